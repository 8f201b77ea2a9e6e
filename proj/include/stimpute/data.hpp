#ifndef STIMPUTE_DATA_HPP
#define STIMPUTE_DATA_HPP

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include <Eigen/Dense>

#include "stimpute/tensor.hpp"

namespace stimpute {

using BoolArray = Eigen::Array<bool, Eigen::Dynamic, Eigen::Dynamic>;

/// Seconds since the Unix epoch, read as a naive (zone-less) civil time.
std::int64_t parse_timestamp(std::string_view text);
std::string format_timestamp(std::int64_t seconds);
/// 0 = Monday ... 6 = Sunday.
int day_of_week(std::int64_t seconds);
int hour_of_day(std::int64_t seconds);

/**
 * Sensor readings on a uniform time grid (f = 1 feature: flow per interval).
 * NaN marks a reading that was never observed; it is excluded from scaling,
 * training targets and evaluation.
 */
struct SpatioTemporalSeries {
  std::vector<std::string> sensor_ids;
  Eigen::MatrixXd values;  // sensors x timesteps
  std::int64_t start_time = 0;
  std::int64_t step_seconds = 300;

  Index sensors() const { return values.rows(); }
  Index timesteps() const { return values.cols(); }
  std::int64_t timestamp(Index t) const { return start_time + t * step_seconds; }

  /// Throws ConfigError unless ids are unique, step > 0 and t >= min_steps.
  void validate(Index min_steps = 1) const;

  SpatioTemporalSeries slice(Index begin, Index length) const;
};

/// Header "timestamp,<sensor ids...>", then one ISO-8601 timestamp plus s values per row. Lines starting with # are skipped.
SpatioTemporalSeries load_csv(const std::filesystem::path& path);
SpatioTemporalSeries parse_csv(std::istream& in);
void write_csv(const SpatioTemporalSeries& series, std::ostream& out);
void save_csv(const SpatioTemporalSeries& series, const std::filesystem::path& path);

/// Single global min/max per dataset: min maps to 0, max to 1.
struct ScalerParams {
  double min = 0.0;
  double max = 1.0;

  /// Fits on the observed (non-NaN, non-masked) entries.
  static ScalerParams fit(const Eigen::MatrixXd& values, const BoolArray* exclude = nullptr);
  void validate() const;

  double scale(double x) const { return (x - min) / (max - min); }
  double inverse(double y) const { return y * (max - min) + min; }
};

/// Values above the fitted max scale past 1; nothing is clamped.
SpatioTemporalSeries minmax_scale(const SpatioTemporalSeries& series, const ScalerParams& params);
SpatioTemporalSeries inverse_scale(const SpatioTemporalSeries& series, const ScalerParams& params);

struct MissingBlock {
  Index sensor = 0;
  Index start = 0;
  Index length = 0;

  bool operator==(const MissingBlock&) const = default;
};

/// Injected missingness: exactly the union of `blocks` (true = missing).
struct MissingMask {
  BoolArray missing;
  std::vector<MissingBlock> blocks;
  std::uint64_t seed = 0;

  static MissingMask from_blocks(Index sensors, Index timesteps, std::vector<MissingBlock> blocks,
                                 std::uint64_t seed = 0);
  Index count() const { return missing.count(); }
  double fraction() const { return missing.size() ? static_cast<double>(count()) / missing.size() : 0.0; }
};

struct MissingBlockConfig {
  double fraction = 0.25;
  double min_hours = 0.5;
  double max_hours = 4.0;
};

/**
 * Draws single-sensor blocks (uniform length in steps, uniform sensor, uniform
 * start), rejecting candidates that overlap an accepted block, until the
 * global missing fraction reaches the target.
 */
MissingMask generate_missing_blocks(const SpatioTemporalSeries& series, const MissingBlockConfig& config,
                                    std::uint64_t seed);

/// One row per block: sensor_id,start_timestamp,n_steps.
void write_mask_csv(const MissingMask& mask, const SpatioTemporalSeries& series, std::ostream& out);

/**
 * Stride-1 windows of a (scaled) series. Row r covers steps [r, r+w); column
 * i*w + j holds sensor i at step r+j.
 *
 *   clean      ground truth (0 where never observed)
 *   corrupted  model input: clean with injected-missing entries zero-filled
 *   missing    1 where the entry was injected-missing, else 0
 *   valid      1 where ground truth is known, else 0
 */
struct WindowSet {
  Index sensors = 0;
  Index window = 0;
  Index features = 1;
  Index stride = 1;
  Index timesteps = 0;
  Eigen::MatrixXd clean;
  Eigen::MatrixXd corrupted;
  Eigen::MatrixXd missing;
  Eigen::MatrixXd valid;
  std::vector<Index> origins;
  std::vector<std::int64_t> origin_times;

  Index size() const { return clean.rows(); }
  Index width() const { return sensors * window * features; }
  Index column(Index sensor, Index offset) const { return sensor * window + offset; }

  /// Windows [begin, begin+count) as an independent set.
  WindowSet subset(Index begin, Index count) const;
};

WindowSet slide_windows(const SpatioTemporalSeries& series, const MissingMask& mask, Index window = 6);

/// Chronological split at floor(t * ratio); each side must keep at least `window` steps.
std::pair<SpatioTemporalSeries, SpatioTemporalSeries> train_test_split(const SpatioTemporalSeries& series,
                                                                       double ratio, Index window = 6);

struct SynthSpec {
  Index sensors = 10;
  Index days = 60;
  std::uint64_t seed = 0;
  double noise_level = 0.08;
  double event_rate = 0.3;  // expected disturbance events per day
  std::int64_t start_time = 1451606400;  // 2016-01-01T00:00:00
  std::int64_t step_seconds = 300;

  void validate() const;
};

/**
 * Desk-scale traffic-like data: per-sensor weekday double-peak profile with
 * a weekend midday profile, peaks shifting downstream along the sensor index,
 * spatially smoothed AR(1) noise and occasional localised events. Values are
 * non-negative.
 */
SpatioTemporalSeries synth_generate(const SynthSpec& spec);

}  // namespace stimpute

#endif  // STIMPUTE_DATA_HPP
