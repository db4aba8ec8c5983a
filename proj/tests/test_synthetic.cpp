#include <cmath>

#include "doctest.h"
#include "scenforge/synthetic.hpp"
#include "testutil.hpp"

using namespace scenforge::data;

namespace {

// Plain sample Pearson correlation as an independent check.
double pearson_oracle(const TimeSeriesDataset& ds) {
  double sx = 0, sy = 0, sxx = 0, syy = 0, sxy = 0, n = 0;
  for (const auto& s : ds.sensors) {
    for (std::size_t i = 0; i < s.size(); ++i) {
      double x = s.temperature[i], y = s.humidity[i];
      sx += x;
      sy += y;
      sxx += x * x;
      syy += y * y;
      sxy += x * y;
      n += 1;
    }
  }
  double cov = sxy / n - (sx / n) * (sy / n);
  double vx = sxx / n - (sx / n) * (sx / n);
  double vy = syy / n - (sy / n) * (sy / n);
  return cov / std::sqrt(vx * vy);
}

}  // namespace

TEST_CASE("zero slope and zero noise give constant humidity at the intercept") {
  SyntheticConfig cfg;
  cfg.sensors = 2;
  cfg.steps = 50;
  cfg.humidity_slope = 0.0;
  cfg.humidity_noise = 0.0;
  TimeSeriesDataset ds = synthesize_dataset(cfg);
  for (const auto& s : ds.sensors)
    for (double h : s.humidity) CHECK(h == doctest::Approx(cfg.humidity_intercept));
}

TEST_CASE("positive humidity slope is rejected") {
  SyntheticConfig cfg;
  cfg.humidity_slope = 0.4;
  CHECK_THROWS_AS(synthesize_dataset(cfg), DataError);
}

TEST_CASE("default config hits the target temperature-humidity correlation") {
  SyntheticConfig cfg;  // 35 sensors x 5000 steps
  TimeSeriesDataset ds = synthesize_dataset(cfg);
  double r = pearson_oracle(ds);
  CHECK(r > -0.864);
  CHECK(r < -0.704);
}

TEST_CASE("without AR and diurnal terms the temperature is white noise") {
  SyntheticConfig cfg;
  cfg.sensors = 1;
  cfg.steps = 5000;
  cfg.ar_coeff = 0.0;
  cfg.diurnal_amplitude = 0.0;
  TimeSeriesDataset ds = synthesize_dataset(cfg);
  const auto& t = ds.sensors[0].temperature;
  double mean = 0;
  for (double v : t) mean += v;
  mean /= static_cast<double>(t.size());
  double num = 0, den = 0;
  for (std::size_t i = 0; i + 1 < t.size(); ++i) num += (t[i] - mean) * (t[i + 1] - mean);
  for (double v : t) den += (v - mean) * (v - mean);
  CHECK(std::fabs(num / den) < 0.05);
}

TEST_CASE("identical config and seed give byte-identical CSV files") {
  testutil::TempDir tmp("synth");
  SyntheticConfig cfg;
  cfg.sensors = 3;
  cfg.steps = 200;
  export_csv(synthesize_dataset(cfg), tmp.path("a.csv"));
  export_csv(synthesize_dataset(cfg), tmp.path("b.csv"));
  CHECK(testutil::read_file(tmp.path("a.csv")) == testutil::read_file(tmp.path("b.csv")));
  SyntheticConfig other = cfg;
  other.seed = 43;
  export_csv(synthesize_dataset(other), tmp.path("c.csv"));
  CHECK(testutil::read_file(tmp.path("a.csv")) != testutil::read_file(tmp.path("c.csv")));
}

TEST_CASE("humidity stays inside [0,100] across a 100-seed sweep") {
  SyntheticConfig cfg;
  cfg.sensors = 5;
  cfg.steps = 200;
  cfg.humidity_noise = 30.0;  // stress the clip
  for (std::uint64_t seed = 0; seed < 100; ++seed) {
    cfg.seed = seed;
    TimeSeriesDataset ds = synthesize_dataset(cfg);
    for (const auto& s : ds.sensors)
      for (double h : s.humidity) {
        REQUIRE(h >= 0.0);
        REQUIRE(h <= 100.0);
      }
  }
}

TEST_CASE("synthetic output ingests cleanly at the expected cadence") {
  testutil::TempDir tmp("synth_ingest");
  SyntheticConfig cfg;
  cfg.sensors = 2;
  cfg.steps = 30;
  export_csv(synthesize_dataset(cfg), tmp.path("d.csv"));
  TimeSeriesDataset back = ingest_csv(tmp.path("d.csv"));
  CHECK(back.sensors.size() == 2);
  CHECK(back.gaps.empty());
  CHECK(back.sensors[0].size() == 30);
}
