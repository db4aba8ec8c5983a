#include "scenforge/synthetic.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>

#include "scenforge/rng.hpp"

namespace scenforge::data {

TimeSeriesDataset synthesize_dataset(const SyntheticConfig& cfg) {
  if (cfg.sensors == 0 || cfg.steps == 0) throw DataError("synthesize_dataset: sensors and steps must be positive");
  if (cfg.humidity_slope > 0.0) throw DataError("synthesize_dataset: humidity coupling slope must be <= 0");
  if (cfg.diurnal_period == 0) throw DataError("synthesize_dataset: diurnal period must be positive");

  constexpr double kTwoPi = 6.283185307179586476925286766559;
  TimeSeriesDataset ds;
  ds.sensors.resize(cfg.sensors);
  for (std::size_t si = 0; si < cfg.sensors; ++si) {
    SensorSeries& s = ds.sensors[si];
    char name[32];
    std::snprintf(name, sizeof(name), "sensor_%02zu", si);
    s.id = name;
    s.time.reserve(cfg.steps);
    s.temperature.reserve(cfg.steps);
    s.humidity.reserve(cfg.steps);

    nn::Rng rng(nn::Rng::derive(cfg.seed, si));
    // Even sensors sit in hot aisles (server exhaust), odd in cold aisles.
    double base = (si % 2 == 0 ? cfg.base_hot : cfg.base_cold) + rng.uniform(-cfg.base_jitter, cfg.base_jitter);
    double ar = 0.0;
    for (std::size_t t = 0; t < cfg.steps; ++t) {
      ar = cfg.ar_coeff * ar + cfg.ar_scale * rng.normal();
      double temp = base + cfg.diurnal_amplitude * std::sin(kTwoPi * static_cast<double>(t) /
                                                            static_cast<double>(cfg.diurnal_period)) +
                    ar;
      double hum = cfg.humidity_intercept + cfg.humidity_slope * temp + cfg.humidity_noise * rng.normal();
      hum = std::clamp(hum, 0.0, 100.0);
      s.time.push_back(cfg.start_time + static_cast<std::int64_t>(t) * kCadenceSeconds);
      s.temperature.push_back(temp);
      s.humidity.push_back(hum);
    }
  }
  return ds;
}

}  // namespace scenforge::data
