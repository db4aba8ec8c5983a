#pragma once

#include <cstdint>

#include "scenforge/dataset.hpp"

namespace scenforge::data {

/// Configuration of the synthetic telemetry generator: alternating hot/cold
/// aisle base temperatures, a shared diurnal cycle, AR(1) temperature noise,
/// and humidity coupled to temperature with a negative slope. The defaults
/// target a pooled temperature-humidity Pearson correlation near -0.78.
struct SyntheticConfig {
  std::size_t sensors = 35;
  std::size_t steps = 5000;
  double base_hot = 30.0;
  double base_cold = 22.0;
  double base_jitter = 1.5;
  double diurnal_amplitude = 1.5;
  std::size_t diurnal_period = 144;  // 24 h at 10-minute cadence
  double ar_coeff = 0.8;
  double ar_scale = 0.3;
  double humidity_slope = -0.7;  // must be <= 0
  double humidity_intercept = 58.0;
  double humidity_noise = 2.4;
  std::int64_t start_time = 1546300800;  // 2019-01-01T00:00:00Z
  std::uint64_t seed = 42;
};

/// Deterministic under (config, seed): one derived RNG stream per sensor, so
/// parallel and serial generation agree. Humidity is clipped to [0,100].
TimeSeriesDataset synthesize_dataset(const SyntheticConfig& cfg);

}  // namespace scenforge::data
