#include "scenforge/dataset.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <map>
#include <numeric>

#include "scenforge/rng.hpp"

namespace scenforge::data {

namespace {

// Civil-calendar conversions (proleptic Gregorian), days since 1970-01-01.
std::int64_t days_from_civil(int y, unsigned m, unsigned d) {
  y -= m <= 2;
  const int era = (y >= 0 ? y : y - 399) / 400;
  const unsigned yoe = static_cast<unsigned>(y - era * 400);
  const unsigned doy = (153 * (m + (m > 2 ? -3 : 9)) + 2) / 5 + d - 1;
  const unsigned doe = yoe * 365 + yoe / 4 - yoe / 100 + doy;
  return static_cast<std::int64_t>(era) * 146097 + static_cast<std::int64_t>(doe) - 719468;
}

void civil_from_days(std::int64_t z, int& y, unsigned& m, unsigned& d) {
  z += 719468;
  const std::int64_t era = (z >= 0 ? z : z - 146096) / 146097;
  const unsigned doe = static_cast<unsigned>(z - era * 146097);
  const unsigned yoe = (doe - doe / 1460 + doe / 36524 - doe / 146096) / 365;
  const std::int64_t yy = static_cast<std::int64_t>(yoe) + era * 400;
  const unsigned doy = doe - (365 * yoe + yoe / 4 - yoe / 100);
  const unsigned mp = (5 * doy + 2) / 153;
  d = doy - (153 * mp + 2) / 5 + 1;
  m = mp + (mp < 10 ? 3 : -9);
  y = static_cast<int>(yy + (m <= 2));
}

double parse_number(const std::string& field, const std::string& where) {
  const char* begin = field.c_str();
  char* end = nullptr;
  double v = std::strtod(begin, &end);
  if (end == begin || *end != '\0' || !std::isfinite(v))
    throw DataError(where + ": bad numeric value '" + field + "'");
  return v;
}

}  // namespace

std::size_t TimeSeriesDataset::total_records() const {
  std::size_t n = 0;
  for (const auto& s : sensors) n += s.size();
  return n;
}

const SensorSeries* TimeSeriesDataset::find(const std::string& id) const {
  for (const auto& s : sensors)
    if (s.id == id) return &s;
  return nullptr;
}

std::string format_time_utc(std::int64_t t) {
  std::int64_t days = t / 86400;
  std::int64_t sec = t % 86400;
  if (sec < 0) {
    sec += 86400;
    days -= 1;
  }
  int y;
  unsigned m, d;
  civil_from_days(days, y, m, d);
  char buf[24];
  std::snprintf(buf, sizeof(buf), "%04d-%02u-%02uT%02lld:%02lld:%02lldZ", y, m, d,
                static_cast<long long>(sec / 3600), static_cast<long long>((sec / 60) % 60),
                static_cast<long long>(sec % 60));
  return buf;
}

std::int64_t parse_time_utc(const std::string& s) {
  int y = 0, mo = 0, d = 0, h = 0, mi = 0, se = 0;
  char z = 0;
  if (s.size() != 20 || std::sscanf(s.c_str(), "%4d-%2d-%2dT%2d:%2d:%2d%c", &y, &mo, &d, &h, &mi, &se, &z) != 7 ||
      z != 'Z' || mo < 1 || mo > 12 || d < 1 || d > 31 || h > 23 || mi > 59 || se > 59)
    throw DataError("bad ISO-8601 UTC timestamp '" + s + "'");
  return days_from_civil(y, static_cast<unsigned>(mo), static_cast<unsigned>(d)) * 86400 + h * 3600 + mi * 60 + se;
}

std::string format_double(double v) {
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

TimeSeriesDataset ingest_csv(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw DataError("cannot open '" + path + "'");
  std::string line;
  if (!std::getline(is, line)) throw DataError(path + ": empty file");
  if (!line.empty() && line.back() == '\r') line.pop_back();
  if (line != "timestamp,sensor_id,temperature,humidity")
    throw DataError(path + ": unexpected header '" + line + "'");

  TimeSeriesDataset ds;
  std::map<std::string, std::size_t> index;
  std::size_t line_no = 1;
  while (std::getline(is, line)) {
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    const std::string where = path + ":" + std::to_string(line_no);

    std::string fields[4];
    std::size_t pos = 0;
    for (int f = 0; f < 4; ++f) {
      std::size_t next = line.find(',', pos);
      if (f < 3 && next == std::string::npos) throw DataError(where + ": expected 4 fields");
      if (f == 3 && next != std::string::npos) throw DataError(where + ": expected 4 fields");
      fields[f] = line.substr(pos, next == std::string::npos ? std::string::npos : next - pos);
      pos = next + 1;
    }

    std::int64_t t;
    try {
      t = parse_time_utc(fields[0]);
    } catch (const DataError& e) {
      throw DataError(where + ": " + e.what());
    }
    const std::string& id = fields[1];
    if (id.empty()) throw DataError(where + ": empty sensor_id");
    double temp = parse_number(fields[2], where);
    double hum = parse_number(fields[3], where);
    if (hum < 0.0 || hum > 100.0)
      throw DataError(where + ": humidity " + format_double(hum) + " outside [0,100]");

    auto [it, inserted] = index.try_emplace(id, ds.sensors.size());
    if (inserted) {
      ds.sensors.push_back(SensorSeries{id, {}, {}, {}});
    }
    SensorSeries& series = ds.sensors[it->second];
    if (!series.time.empty()) {
      std::int64_t prev = series.time.back();
      if (t <= prev)
        throw DataError(where + ": non-monotone timestamp for sensor '" + id + "'");
      if (t - prev != kCadenceSeconds)
        ds.gaps.push_back(Gap{it->second, series.size() - 1, prev, t});
    }
    series.time.push_back(t);
    series.temperature.push_back(temp);
    series.humidity.push_back(hum);
  }
  return ds;
}

void export_csv(const TimeSeriesDataset& ds, const std::string& path) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw DataError("cannot open '" + path + "' for writing");
  os << "timestamp,sensor_id,temperature,humidity\n";
  // Time-major merge so the file reads like a live telemetry dump.
  std::vector<std::size_t> cursor(ds.sensors.size(), 0);
  while (true) {
    std::size_t best = ds.sensors.size();
    std::int64_t best_t = 0;
    for (std::size_t s = 0; s < ds.sensors.size(); ++s) {
      if (cursor[s] >= ds.sensors[s].size()) continue;
      std::int64_t t = ds.sensors[s].time[cursor[s]];
      if (best == ds.sensors.size() || t < best_t) {
        best = s;
        best_t = t;
      }
    }
    if (best == ds.sensors.size()) break;
    const SensorSeries& series = ds.sensors[best];
    std::size_t i = cursor[best]++;
    os << format_time_utc(series.time[i]) << ',' << series.id << ',' << format_double(series.temperature[i]) << ','
       << format_double(series.humidity[i]) << '\n';
  }
}

namespace {
TimeSeriesDataset map_dataset(const TimeSeriesDataset& ds, const ScalerParams& p, bool forward) {
  TimeSeriesDataset out = ds;
  for (auto& s : out.sensors) {
    for (auto& v : s.temperature) v = forward ? p.scale_temp(v) : p.inv_temp(v);
    for (auto& v : s.humidity) v = forward ? p.scale_hum(v) : p.inv_hum(v);
  }
  return out;
}
}  // namespace

TimeSeriesDataset scale_dataset(const TimeSeriesDataset& ds, const ScalerParams& p) {
  return map_dataset(ds, p, true);
}

TimeSeriesDataset inverse_scale_dataset(const TimeSeriesDataset& ds, const ScalerParams& p) {
  return map_dataset(ds, p, false);
}

WindowSet rolling_windows(std::shared_ptr<const TimeSeriesDataset> ds, std::size_t window, std::size_t stride) {
  if (window < 1) throw DataError("rolling_windows: window must be >= 1");
  if (stride < 1) throw DataError("rolling_windows: stride must be >= 1");
  WindowSet ws;
  ws.dataset = ds;
  ws.window = window;

  // Per-sensor prefix count of cadence gaps for O(1) span checks.
  for (std::size_t si = 0; si < ds->sensors.size(); ++si) {
    const SensorSeries& s = ds->sensors[si];
    if (s.size() < window + 1) continue;  // skipped, too short
    std::vector<std::size_t> gap_prefix(s.size(), 0);
    for (std::size_t i = 0; i + 1 < s.size(); ++i) {
      gap_prefix[i + 1] = gap_prefix[i] + ((s.time[i + 1] - s.time[i] != kCadenceSeconds) ? 1 : 0);
    }
    for (std::size_t start = 0; start + window < s.size(); start += stride) {
      // Records start..start+window must be contiguous (target included).
      if (gap_prefix[start + window] - gap_prefix[start] != 0) continue;
      ws.windows.push_back(WindowRef{si, start, Split::kTrain});
    }
  }
  return ws;
}

void split_windows(WindowSet& ws, double train_frac, double val_frac, double test_frac, std::uint64_t seed,
                   SplitMode mode) {
  if (std::fabs(train_frac + val_frac + test_frac - 1.0) > 1e-9)
    throw DataError("split_windows: fractions must sum to 1");
  nn::Rng rng(seed);

  // Stratified per sensor.
  std::vector<std::vector<std::size_t>> by_sensor(ws.dataset->sensors.size());
  for (std::size_t i = 0; i < ws.windows.size(); ++i) by_sensor[ws.windows[i].sensor].push_back(i);

  for (auto& idx : by_sensor) {
    const std::size_t n = idx.size();
    if (n == 0) continue;
    if (mode == SplitMode::kPerWindow) {
      for (std::size_t i = n - 1; i > 0; --i) std::swap(idx[i], idx[rng.uniform_index(i + 1)]);
    }
    // Largest-remainder quotas; ties resolved in train, val, test order.
    const double quota[3] = {train_frac * n, val_frac * n, test_frac * n};
    std::size_t count[3];
    double rem[3];
    std::size_t assigned = 0;
    for (int k = 0; k < 3; ++k) {
      count[k] = static_cast<std::size_t>(quota[k]);
      rem[k] = quota[k] - static_cast<double>(count[k]);
      assigned += count[k];
    }
    while (assigned < n) {
      int best = 0;
      for (int k = 1; k < 3; ++k)
        if (rem[k] > rem[best]) best = k;
      ++count[best];
      rem[best] = -1.0;
      ++assigned;
    }
    std::size_t at = 0;
    for (int k = 0; k < 3; ++k) {
      for (std::size_t i = 0; i < count[k]; ++i) ws.windows[idx[at++]].split = static_cast<Split>(k);
    }
  }
}

ScalerParams fit_scaler(const WindowSet& ws, Split tag) {
  double tmin = std::numeric_limits<double>::infinity(), tmax = -tmin;
  double hmin = tmin, hmax = -tmin;
  bool any = false;
  for (const WindowRef& w : ws.windows) {
    if (w.split != tag) continue;
    const SensorSeries& s = ws.dataset->sensors[w.sensor];
    for (std::size_t i = w.start; i <= w.start + ws.window; ++i) {
      tmin = std::min(tmin, s.temperature[i]);
      tmax = std::max(tmax, s.temperature[i]);
      hmin = std::min(hmin, s.humidity[i]);
      hmax = std::max(hmax, s.humidity[i]);
      any = true;
    }
  }
  if (!any) throw DataError("fit_scaler: no windows with the requested split tag");
  if (!(tmax > tmin)) throw DataError("fit_scaler: temperature is constant on the training split");
  if (!(hmax > hmin)) throw DataError("fit_scaler: humidity is constant on the training split");
  return ScalerParams{tmin, tmax, hmin, hmax};
}

std::vector<std::size_t> windows_with_tag(const WindowSet& ws, Split tag) {
  std::vector<std::size_t> out;
  for (std::size_t i = 0; i < ws.windows.size(); ++i)
    if (ws.windows[i].split == tag) out.push_back(i);
  return out;
}

Batch assemble_batch(const WindowSet& ws, std::span<const std::size_t> window_indices) {
  const std::size_t n = window_indices.size(), w = ws.window;
  Batch batch{nn::Tensor({n}), nn::Tensor({n, w, kVariables}), nn::Tensor({n, w + 1, kVariables})};
  for (std::size_t bi = 0; bi < n; ++bi) {
    const WindowRef& ref = ws.windows[window_indices[bi]];
    const SensorSeries& s = ws.dataset->sensors[ref.sensor];
    batch.ids[bi] = static_cast<double>(ref.sensor);
    for (std::size_t t = 0; t <= w; ++t) {
      double temp = s.temperature[ref.start + t];
      double hum = s.humidity[ref.start + t];
      batch.sequence[(bi * (w + 1) + t) * kVariables + 0] = temp;
      batch.sequence[(bi * (w + 1) + t) * kVariables + 1] = hum;
      if (t < w) {
        batch.history[(bi * w + t) * kVariables + 0] = temp;
        batch.history[(bi * w + t) * kVariables + 1] = hum;
      }
    }
  }
  return batch;
}

std::optional<nn::Tensor> continuation(const WindowSet& ws, std::size_t window_index, std::size_t steps) {
  const WindowRef& ref = ws.windows[window_index];
  const SensorSeries& s = ws.dataset->sensors[ref.sensor];
  const std::size_t first = ref.start + ws.window;
  if (first + steps > s.size()) return std::nullopt;
  for (std::size_t i = first; i + 1 < first + steps; ++i) {
    if (s.time[i + 1] - s.time[i] != kCadenceSeconds) return std::nullopt;
  }
  nn::Tensor out({steps, kVariables});
  for (std::size_t t = 0; t < steps; ++t) {
    out[t * kVariables + 0] = s.temperature[first + t];
    out[t * kVariables + 1] = s.humidity[first + t];
  }
  return out;
}

PreparedData prepare(TimeSeriesDataset raw, std::size_t window, double train_frac, double val_frac, double test_frac,
                     std::uint64_t seed, SplitMode mode) {
  PreparedData out;
  out.raw = std::make_shared<TimeSeriesDataset>(std::move(raw));
  WindowSet refs = rolling_windows(out.raw, window);
  split_windows(refs, train_frac, val_frac, test_frac, seed, mode);
  out.scaler = fit_scaler(refs, Split::kTrain);
  out.scaled = std::make_shared<TimeSeriesDataset>(scale_dataset(*out.raw, out.scaler));
  out.windows = refs;
  out.windows.dataset = out.scaled;
  return out;
}

}  // namespace scenforge::data
