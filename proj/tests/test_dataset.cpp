#include <cmath>
#include <fstream>
#include <set>

#include "doctest.h"
#include "scenforge/dataset.hpp"
#include "scenforge/rng.hpp"
#include "testutil.hpp"

using namespace scenforge::data;
using scenforge::nn::Rng;

namespace {

std::string iso(std::int64_t t) { return format_time_utc(t); }

// Small CSV builder: rows as (t, id, temp, hum).
void write_csv(const std::string& path, const std::vector<std::tuple<std::int64_t, std::string, double, double>>& rows) {
  std::ofstream os(path);
  os << "timestamp,sensor_id,temperature,humidity\n";
  for (const auto& [t, id, temp, hum] : rows) {
    os << iso(t) << ',' << id << ',' << format_double(temp) << ',' << format_double(hum) << '\n';
  }
}

TimeSeriesDataset make_series(std::size_t sensors, std::size_t len, double base = 20.0) {
  TimeSeriesDataset ds;
  for (std::size_t s = 0; s < sensors; ++s) {
    SensorSeries series;
    series.id = "s" + std::to_string(s);
    for (std::size_t i = 0; i < len; ++i) {
      series.time.push_back(1000000000 + static_cast<std::int64_t>(i) * kCadenceSeconds);
      series.temperature.push_back(base + static_cast<double>(s) + 0.1 * static_cast<double>(i));
      series.humidity.push_back(50.0 - 0.05 * static_cast<double>(i));
    }
    ds.sensors.push_back(std::move(series));
  }
  return ds;
}

}  // namespace

TEST_CASE("timestamp format round trips") {
  CHECK(format_time_utc(1546300800) == "2019-01-01T00:00:00Z");
  CHECK(parse_time_utc("2019-01-01T00:00:00Z") == 1546300800);
  Rng rng(4);
  for (int i = 0; i < 100; ++i) {
    std::int64_t t = static_cast<std::int64_t>(rng.uniform(0, 2e9));
    CHECK(parse_time_utc(format_time_utc(t)) == t);
  }
  CHECK_THROWS_AS(parse_time_utc("2019-01-01 00:00:00"), DataError);
}

TEST_CASE("ingest groups rows by sensor in order of appearance") {
  testutil::TempDir tmp("ingest");
  std::vector<std::tuple<std::int64_t, std::string, double, double>> rows;
  for (int i = 0; i < 3; ++i) {
    rows.emplace_back(1000000000 + i * 600, "a", 21.0 + i, 40.0);
    rows.emplace_back(1000000000 + i * 600, "b", 30.0 + i, 35.0);
  }
  write_csv(tmp.path("d.csv"), rows);
  TimeSeriesDataset ds = ingest_csv(tmp.path("d.csv"));
  REQUIRE(ds.sensors.size() == 2);
  CHECK(ds.sensors[0].id == "a");
  CHECK(ds.sensors[0].size() == 3);
  CHECK(ds.sensors[1].size() == 3);
  CHECK(ds.gaps.empty());
}

TEST_CASE("ingest rejects bad rows with the offending line") {
  testutil::TempDir tmp("badrows");
  SUBCASE("humidity out of range") {
    write_csv(tmp.path("d.csv"), {{1000000000, "a", 20.0, 150.0}});
    CHECK_THROWS_WITH_AS(ingest_csv(tmp.path("d.csv")), doctest::Contains(":2:"), DataError);
  }
  SUBCASE("malformed numeric field") {
    std::ofstream os(tmp.path("d.csv"));
    os << "timestamp,sensor_id,temperature,humidity\n";
    os << iso(1000000000) << ",a,hot,40\n";
    os.close();
    CHECK_THROWS_WITH_AS(ingest_csv(tmp.path("d.csv")), doctest::Contains(":2:"), DataError);
  }
  SUBCASE("non-monotone timestamps") {
    write_csv(tmp.path("d.csv"), {{1000000600, "a", 20.0, 40.0}, {1000000000, "a", 20.0, 40.0}});
    CHECK_THROWS_WITH_AS(ingest_csv(tmp.path("d.csv")), doctest::Contains("non-monotone"), DataError);
  }
  SUBCASE("wrong header") {
    std::ofstream os(tmp.path("d.csv"));
    os << "time,id,t,h\n";
    os.close();
    CHECK_THROWS_AS(ingest_csv(tmp.path("d.csv")), DataError);
  }
}

TEST_CASE("cadence gaps are flagged, not fatal") {
  testutil::TempDir tmp("gaps");
  write_csv(tmp.path("d.csv"),
            {{1000000000, "a", 20.0, 40.0}, {1000000600, "a", 20.0, 40.0}, {1000002400, "a", 20.0, 40.0}});
  TimeSeriesDataset ds = ingest_csv(tmp.path("d.csv"));
  REQUIRE(ds.gaps.size() == 1);
  CHECK(ds.gaps[0].record_index == 1);
}

TEST_CASE("export then ingest is the identity on values, and re-export is byte-identical") {
  testutil::TempDir tmp("roundtrip");
  Rng rng(12);
  TimeSeriesDataset ds = make_series(3, 20);
  for (auto& s : ds.sensors)
    for (auto& v : s.temperature) v += rng.normal() * 1e-7;  // exercise full precision
  export_csv(ds, tmp.path("a.csv"));
  TimeSeriesDataset back = ingest_csv(tmp.path("a.csv"));
  REQUIRE(back.sensors.size() == ds.sensors.size());
  for (std::size_t s = 0; s < ds.sensors.size(); ++s) {
    REQUIRE(back.sensors[s].size() == ds.sensors[s].size());
    for (std::size_t i = 0; i < ds.sensors[s].size(); ++i) {
      CHECK(back.sensors[s].temperature[i] == ds.sensors[s].temperature[i]);
      CHECK(back.sensors[s].humidity[i] == ds.sensors[s].humidity[i]);
      CHECK(back.sensors[s].time[i] == ds.sensors[s].time[i]);
    }
  }
  export_csv(back, tmp.path("b.csv"));
  CHECK(testutil::read_file(tmp.path("a.csv")) == testutil::read_file(tmp.path("b.csv")));
}

TEST_CASE("scaler endpoints, midpoint, inverse, and no clipping") {
  ScalerParams p{10.0, 30.0, 0.0, 100.0};
  CHECK(p.scale_temp(10.0) == doctest::Approx(-1.0));
  CHECK(p.scale_temp(20.0) == doctest::Approx(0.0));
  CHECK(p.scale_temp(30.0) == doctest::Approx(1.0));
  CHECK(p.scale_temp(35.0) == doctest::Approx(1.5));  // outside the train range, not clipped
  Rng rng(3);
  for (int i = 0; i < 100; ++i) {
    double x = rng.uniform(-50, 80);
    CHECK(std::fabs(p.inv_temp(p.scale_temp(x)) - x) < 1e-9);
    CHECK(std::fabs(p.inv_hum(p.scale_hum(x)) - x) < 1e-9);
  }
}

TEST_CASE("rolling windows: counts, overlap and adjacency") {
  auto ds = std::make_shared<TimeSeriesDataset>(make_series(1, 10));
  WindowSet ws = rolling_windows(ds, 4);
  CHECK(ws.windows.size() == 6);  // 10 - 4

  // Consecutive windows overlap by W-1 rows; window i's last row plus its
  // target reproduce window i+1's last two rows.
  const SensorSeries& s = ds->sensors[0];
  for (std::size_t i = 0; i + 1 < ws.windows.size(); ++i) {
    std::size_t a = ws.windows[i].start, b = ws.windows[i + 1].start;
    CHECK(b == a + 1);
    double last_of_i = s.temperature[a + 3];
    double target_of_i = s.temperature[a + 4];
    CHECK(last_of_i == s.temperature[b + 2]);
    CHECK(target_of_i == s.temperature[b + 3]);
  }

  SUBCASE("count equals length - W for every W") {
    for (std::size_t w = 1; w < 10; ++w) {
      CHECK(rolling_windows(ds, w).windows.size() == 10 - w);
    }
  }
  SUBCASE("short sensors are skipped") {
    auto tiny = std::make_shared<TimeSeriesDataset>(make_series(1, 3));
    CHECK(rolling_windows(tiny, 4).windows.empty());
  }
  SUBCASE("windows spanning a gap are dropped") {
    TimeSeriesDataset broken = make_series(1, 10);
    broken.sensors[0].time[7] += 600;  // gap between 6 and 7, shifts the tail
    for (std::size_t i = 8; i < 10; ++i) broken.sensors[0].time[i] += 600;
    auto bp = std::make_shared<TimeSeriesDataset>(std::move(broken));
    WindowSet bw = rolling_windows(bp, 4);
    // Valid starts must avoid the pair (6,7): windows 3,4,5,6 die.
    CHECK(bw.windows.size() == 3);
  }
}

TEST_CASE("split: fractions, determinism, stratification") {
  auto ds = std::make_shared<TimeSeriesDataset>(make_series(4, 104));
  WindowSet ws = rolling_windows(ds, 4);  // 100 windows per sensor
  split_windows(ws, 0.75, 0.10, 0.15, 99);

  std::size_t counts[3] = {0, 0, 0};
  for (const auto& w : ws.windows) counts[static_cast<int>(w.split)]++;
  CHECK(counts[0] == 300);
  CHECK(counts[1] == 40);
  CHECK(counts[2] == 60);

  SUBCASE("per-sensor quotas are within one window") {
    for (std::size_t s = 0; s < 4; ++s) {
      std::size_t c[3] = {0, 0, 0};
      for (const auto& w : ws.windows)
        if (w.sensor == s) c[static_cast<int>(w.split)]++;
      CHECK(std::llabs(static_cast<long long>(c[0]) - 75) <= 1);
      CHECK(std::llabs(static_cast<long long>(c[1]) - 10) <= 1);
      CHECK(std::llabs(static_cast<long long>(c[2]) - 15) <= 1);
    }
  }
  SUBCASE("same seed gives the same assignment") {
    WindowSet ws2 = rolling_windows(ds, 4);
    split_windows(ws2, 0.75, 0.10, 0.15, 99);
    for (std::size_t i = 0; i < ws.windows.size(); ++i) CHECK(ws.windows[i].split == ws2.windows[i].split);
  }
  SUBCASE("different seed changes the assignment") {
    WindowSet ws2 = rolling_windows(ds, 4);
    split_windows(ws2, 0.75, 0.10, 0.15, 100);
    bool any_diff = false;
    for (std::size_t i = 0; i < ws.windows.size(); ++i) any_diff |= ws.windows[i].split != ws2.windows[i].split;
    CHECK(any_diff);
  }
  SUBCASE("block mode keeps splits contiguous in time") {
    WindowSet wb = rolling_windows(ds, 4);
    split_windows(wb, 0.75, 0.10, 0.15, 99, SplitMode::kBlock);
    for (std::size_t s = 0; s < 4; ++s) {
      int last = -1;
      for (const auto& w : wb.windows) {
        if (w.sensor != s) continue;
        int tag = static_cast<int>(w.split);
        CHECK(tag >= last);  // train block, then val, then test
        last = tag;
      }
    }
  }
  SUBCASE("fractions must sum to one") {
    WindowSet wf = rolling_windows(ds, 4);
    CHECK_THROWS_AS(split_windows(wf, 0.8, 0.1, 0.2, 1), DataError);
  }
}

TEST_CASE("scaler is fitted on the training split only (leakage canary)") {
  TimeSeriesDataset raw = make_series(1, 50);
  // Plant the extremes late in the series so block splits put them in test.
  raw.sensors[0].temperature[48] = 99.0;
  auto ds = std::make_shared<TimeSeriesDataset>(std::move(raw));
  WindowSet ws = rolling_windows(ds, 4);
  split_windows(ws, 0.75, 0.10, 0.15, 7, SplitMode::kBlock);
  ScalerParams train_only = fit_scaler(ws, Split::kTrain);
  CHECK(train_only.temp_max < 99.0);

  // Re-fitting with validation windows included must move the parameters.
  WindowSet merged = ws;
  for (auto& w : merged.windows)
    if (w.split == Split::kTest) w.split = Split::kTrain;
  ScalerParams leaky = fit_scaler(merged, Split::kTrain);
  CHECK(leaky.temp_max != train_only.temp_max);
}

TEST_CASE("fit_scaler rejects a constant variable") {
  TimeSeriesDataset raw = make_series(1, 20);
  for (auto& v : raw.sensors[0].humidity) v = 42.0;
  auto ds = std::make_shared<TimeSeriesDataset>(std::move(raw));
  WindowSet ws = rolling_windows(ds, 4);
  CHECK_THROWS_WITH_AS(fit_scaler(ws), doctest::Contains("constant"), DataError);
}

TEST_CASE("assemble_batch lays out ids, history and sequence") {
  auto ds = std::make_shared<TimeSeriesDataset>(make_series(2, 12));
  WindowSet ws = rolling_windows(ds, 4);
  std::vector<std::size_t> pick{0, ws.windows.size() - 1};
  Batch b = assemble_batch(ws, pick);
  CHECK(b.ids.shape() == scenforge::nn::Shape{2});
  CHECK(b.history.shape() == scenforge::nn::Shape{2, 4, 2});
  CHECK(b.sequence.shape() == scenforge::nn::Shape{2, 5, 2});
  // The sequence's first W rows equal the history block.
  for (std::size_t t = 0; t < 4; ++t)
    for (std::size_t v = 0; v < 2; ++v) CHECK(b.sequence[(0 * 5 + t) * 2 + v] == b.history[(0 * 4 + t) * 2 + v]);
}

TEST_CASE("continuation returns the following real steps or nothing") {
  auto ds = std::make_shared<TimeSeriesDataset>(make_series(1, 12));
  WindowSet ws = rolling_windows(ds, 4);
  auto cont = continuation(ws, 0, 3);
  REQUIRE(cont.has_value());
  CHECK((*cont)[0] == ds->sensors[0].temperature[4]);
  CHECK(!continuation(ws, ws.windows.size() - 1, 10).has_value());
}

TEST_CASE("prepare bundles windows over the scaled dataset") {
  PreparedData prep = prepare(make_series(2, 60), 6, 0.75, 0.10, 0.15, 5);
  CHECK(prep.windows.dataset == prep.scaled);
  double lo = 1e9, hi = -1e9;
  for (const auto& s : prep.scaled->sensors)
    for (double v : s.temperature) {
      lo = std::min(lo, v);
      hi = std::max(hi, v);
    }
  CHECK(lo >= -1.0 - 1e-12);
  CHECK(hi <= 1.0 + 1e-12);
}
