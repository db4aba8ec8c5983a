#pragma once

#include <cstdint>
#include <memory>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "scenforge/tensor.hpp"

namespace scenforge::data {

/// Sensor cadence: one reading every 10 minutes.
inline constexpr std::int64_t kCadenceSeconds = 600;

/// Variables carried per record: temperature, humidity.
inline constexpr std::size_t kVariables = 2;

class DataError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct SensorSeries {
  std::string id;
  std::vector<std::int64_t> time;
  std::vector<double> temperature;
  std::vector<double> humidity;
  std::size_t size() const { return time.size(); }
};

struct Gap {
  std::size_t sensor_index = 0;
  std::size_t record_index = 0;  // gap sits between record_index and record_index+1
  std::int64_t from_time = 0, to_time = 0;
};

struct TimeSeriesDataset {
  std::vector<SensorSeries> sensors;
  std::vector<Gap> gaps;

  std::size_t total_records() const;
  const SensorSeries* find(const std::string& id) const;
};

// ---------------------------------------------------------------------------
// CSV interchange: header `timestamp,sensor_id,temperature,humidity`,
// ISO-8601 UTC timestamps, 17 significant digits on export.

std::string format_time_utc(std::int64_t t);
std::int64_t parse_time_utc(const std::string& s);
std::string format_double(double v);

TimeSeriesDataset ingest_csv(const std::string& path);
void export_csv(const TimeSeriesDataset& ds, const std::string& path);

// ---------------------------------------------------------------------------
// Min-max scaling to [-1, 1], fitted on the training split only.

struct ScalerParams {
  double temp_min = 0, temp_max = 1, hum_min = 0, hum_max = 1;

  double scale_temp(double v) const { return -1.0 + 2.0 * (v - temp_min) / (temp_max - temp_min); }
  double inv_temp(double v) const { return temp_min + (v + 1.0) * (temp_max - temp_min) / 2.0; }
  double scale_hum(double v) const { return -1.0 + 2.0 * (v - hum_min) / (hum_max - hum_min); }
  double inv_hum(double v) const { return hum_min + (v + 1.0) * (hum_max - hum_min) / 2.0; }
};

TimeSeriesDataset scale_dataset(const TimeSeriesDataset& ds, const ScalerParams& p);
TimeSeriesDataset inverse_scale_dataset(const TimeSeriesDataset& ds, const ScalerParams& p);

// ---------------------------------------------------------------------------
// Rolling-window segmentation and splits.

enum class Split : std::uint8_t { kTrain = 0, kVal = 1, kTest = 2 };
enum class SplitMode { kPerWindow, kBlock };

struct WindowRef {
  std::size_t sensor = 0;  // index into dataset->sensors; doubles as vocab id
  std::size_t start = 0;   // first record of the input window
  Split split = Split::kTrain;
};

struct WindowSet {
  std::shared_ptr<const TimeSeriesDataset> dataset;
  std::size_t window = 24;  // W: input steps per window; target is step W
  std::vector<WindowRef> windows;

  std::size_t vocab() const { return dataset ? dataset->sensors.size() : 0; }
};

/// Per sensor: one (input, next-step target) pair per stride step. Windows
/// spanning a cadence gap are dropped; sensors shorter than W+1 are skipped
/// (count reported via the return's per-sensor tally if needed).
WindowSet rolling_windows(std::shared_ptr<const TimeSeriesDataset> ds, std::size_t window, std::size_t stride = 1);

/// Random stratified assignment per sensor (largest-remainder quotas), or
/// contiguous blocks per sensor in kBlock mode. Deterministic under seed.
void split_windows(WindowSet& ws, double train_frac, double val_frac, double test_frac, std::uint64_t seed,
                   SplitMode mode = SplitMode::kPerWindow);

/// Min/max over every record covered by windows tagged `tag` (targets
/// included). Throws DataError when a variable is constant.
ScalerParams fit_scaler(const WindowSet& ws, Split tag = Split::kTrain);

std::vector<std::size_t> windows_with_tag(const WindowSet& ws, Split tag);

/// Tensors for a batch of windows drawn from a scaled dataset.
struct Batch {
  nn::Tensor ids;       // [N] vocab indices (integral values)
  nn::Tensor history;   // [N, W, V]
  nn::Tensor sequence;  // [N, W+1, V]: history plus the next-step target
};
Batch assemble_batch(const WindowSet& ws, std::span<const std::size_t> window_indices);

/// The L real steps following a window's input, or nullopt when the series
/// ends or a gap intervenes. Values in the dataset's domain (scaled if the
/// window set binds a scaled dataset).
std::optional<nn::Tensor> continuation(const WindowSet& ws, std::size_t window_index, std::size_t steps);

/// ingest -> window -> split -> fit scaler on train -> scale, bundled.
struct PreparedData {
  std::shared_ptr<const TimeSeriesDataset> raw;
  std::shared_ptr<const TimeSeriesDataset> scaled;
  ScalerParams scaler;
  WindowSet windows;  // bound to `scaled`
};

PreparedData prepare(TimeSeriesDataset raw, std::size_t window, double train_frac, double val_frac, double test_frac,
                     std::uint64_t seed, SplitMode mode = SplitMode::kPerWindow);

}  // namespace scenforge::data
