#include "stimpute/data.hpp"

#include <algorithm>
#include <charconv>
#include <chrono>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <limits>
#include <set>
#include <sstream>

#include "stimpute/errors.hpp"
#include "stimpute/random.hpp"

namespace stimpute {

namespace {

constexpr std::int64_t kSecondsPerDay = 86400;

template <typename T>
bool parse_number(std::string_view text, T& value) {
  const auto* end = text.data() + text.size();
  auto [ptr, ec] = std::from_chars(text.data(), end, value);
  return ec == std::errc() && ptr == end;
}

std::string_view trim(std::string_view s) {
  while (!s.empty() && (s.front() == ' ' || s.front() == '\t')) s.remove_prefix(1);
  while (!s.empty() && (s.back() == ' ' || s.back() == '\t' || s.back() == '\r')) s.remove_suffix(1);
  return s;
}

std::vector<std::string_view> split_fields(std::string_view line) {
  std::vector<std::string_view> fields;
  std::size_t begin = 0;
  while (true) {
    const std::size_t comma = line.find(',', begin);
    fields.push_back(trim(line.substr(begin, comma == std::string_view::npos ? std::string_view::npos : comma - begin)));
    if (comma == std::string_view::npos) break;
    begin = comma + 1;
  }
  return fields;
}

std::int64_t floor_div(std::int64_t a, std::int64_t b) { return a / b - ((a % b != 0) && ((a < 0) != (b < 0))); }

}  // namespace

std::int64_t parse_timestamp(std::string_view text) {
  text = trim(text);
  if (!text.empty() && text.back() == 'Z') text.remove_suffix(1);
  // YYYY-MM-DDTHH:MM[:SS]
  int year = 0, month = 0, day = 0, hour = 0, minute = 0, second = 0;
  const bool shape_ok = text.size() >= 16 && text[4] == '-' && text[7] == '-' && (text[10] == 'T' || text[10] == ' ') &&
                        text[13] == ':' && (text.size() == 16 || (text.size() == 19 && text[16] == ':'));
  if (!shape_ok || !parse_number(text.substr(0, 4), year) || !parse_number(text.substr(5, 2), month) ||
      !parse_number(text.substr(8, 2), day) || !parse_number(text.substr(11, 2), hour) ||
      !parse_number(text.substr(14, 2), minute) || (text.size() == 19 && !parse_number(text.substr(17, 2), second))) {
    throw ParseError("invalid ISO-8601 timestamp '" + std::string(text) + "'");
  }
  using namespace std::chrono;
  const year_month_day ymd{std::chrono::year{year}, std::chrono::month{static_cast<unsigned>(month)},
                           std::chrono::day{static_cast<unsigned>(day)}};
  if (!ymd.ok() || hour > 23 || minute > 59 || second > 59) {
    throw ParseError("invalid calendar time '" + std::string(text) + "'");
  }
  const auto days = sys_days{ymd}.time_since_epoch().count();
  return static_cast<std::int64_t>(days) * kSecondsPerDay + hour * 3600 + minute * 60 + second;
}

std::string format_timestamp(std::int64_t seconds) {
  using namespace std::chrono;
  const std::int64_t days = floor_div(seconds, kSecondsPerDay);
  const std::int64_t rem = seconds - days * kSecondsPerDay;
  const year_month_day ymd{sys_days{std::chrono::days{days}}};
  std::ostringstream out;
  out << std::setfill('0') << std::setw(4) << static_cast<int>(ymd.year()) << '-' << std::setw(2)
      << static_cast<unsigned>(ymd.month()) << '-' << std::setw(2) << static_cast<unsigned>(ymd.day()) << 'T'
      << std::setw(2) << rem / 3600 << ':' << std::setw(2) << (rem / 60) % 60 << ':' << std::setw(2) << rem % 60;
  return out.str();
}

int day_of_week(std::int64_t seconds) {
  // 1970-01-01 was a Thursday (index 3 with Monday = 0).
  const std::int64_t days = floor_div(seconds, kSecondsPerDay);
  return static_cast<int>(((days + 3) % 7 + 7) % 7);
}

int hour_of_day(std::int64_t seconds) {
  const std::int64_t rem = seconds - floor_div(seconds, kSecondsPerDay) * kSecondsPerDay;
  return static_cast<int>(rem / 3600);
}

void SpatioTemporalSeries::validate(Index min_steps) const {
  if (static_cast<Index>(sensor_ids.size()) != values.rows()) {
    throw ConfigError("series has " + std::to_string(sensor_ids.size()) + " sensor ids but " +
                      std::to_string(values.rows()) + " rows");
  }
  if (std::set<std::string>(sensor_ids.begin(), sensor_ids.end()).size() != sensor_ids.size()) {
    throw ConfigError("sensor ids must be unique");
  }
  if (step_seconds <= 0) throw ConfigError("step duration must be positive");
  if (timesteps() < min_steps) {
    throw ConfigError("series has " + std::to_string(timesteps()) + " timesteps, need at least " +
                      std::to_string(min_steps));
  }
}

SpatioTemporalSeries SpatioTemporalSeries::slice(Index begin, Index length) const {
  if (begin < 0 || length < 0 || begin + length > timesteps()) throw ContractError("series slice out of range");
  return {sensor_ids, values.middleCols(begin, length), timestamp(begin), step_seconds};
}

SpatioTemporalSeries parse_csv(std::istream& in) {
  std::string line;
  long line_no = 0;
  std::vector<std::string> ids;
  while (std::getline(in, line)) {
    ++line_no;
    if (!trim(line).empty() && trim(line).front() != '#') break;
  }
  if (line_no == 0 || trim(line).empty() || trim(line).front() == '#') throw ParseError("missing header row", line_no);
  const auto header = split_fields(line);
  if (header.size() < 2) throw ParseError("header must name at least one sensor", line_no);
  for (std::size_t k = 1; k < header.size(); ++k) {
    if (header[k].empty()) throw ParseError("empty sensor id in header", line_no);
    ids.emplace_back(header[k]);
  }
  const std::size_t sensors = ids.size();

  std::vector<std::int64_t> stamps;
  std::vector<double> flat;
  std::int64_t step = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (trim(line).empty() || trim(line).front() == '#') continue;
    const auto fields = split_fields(line);
    if (fields.size() != sensors + 1) {
      throw ParseError("ragged row: expected " + std::to_string(sensors + 1) + " fields, found " +
                           std::to_string(fields.size()),
                       line_no);
    }
    std::int64_t ts;
    try {
      ts = parse_timestamp(fields[0]);
    } catch (const ParseError& e) {
      throw ParseError(e.what(), line_no);
    }
    if (!stamps.empty()) {
      const std::int64_t diff = ts - stamps.back();
      if (diff <= 0) throw ParseError("non-monotonic timestamp " + std::string(fields[0]), line_no);
      if (step == 0) step = diff;
      if (diff != step) {
        throw ParseError("gap in timestamps between " + format_timestamp(stamps.back()) + " and " +
                             std::string(fields[0]) + " (expected step " + std::to_string(step) + " s)",
                         line_no);
      }
    }
    stamps.push_back(ts);
    for (std::size_t k = 1; k <= sensors; ++k) {
      double v;
      if (fields[k].empty() || !parse_number(fields[k], v) || std::isinf(v)) {
        throw ParseError("non-numeric cell '" + std::string(fields[k]) + "' in column " + std::to_string(k + 1),
                         line_no);
      }
      flat.push_back(v);
    }
  }
  if (stamps.empty()) throw ParseError("no timesteps");

  SpatioTemporalSeries series;
  series.sensor_ids = std::move(ids);
  series.start_time = stamps.front();
  series.step_seconds = step == 0 ? 300 : step;
  const Index t = static_cast<Index>(stamps.size());
  series.values = Eigen::Map<const Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::ColMajor>>(
      flat.data(), static_cast<Index>(sensors), t);
  try {
    series.validate();
  } catch (const ConfigError& e) {
    throw ParseError(e.what(), 1);
  }
  return series;
}

SpatioTemporalSeries load_csv(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ParseError("cannot open '" + path.string() + "'");
  return parse_csv(in);
}

void write_csv(const SpatioTemporalSeries& series, std::ostream& out) {
  out << "timestamp";
  for (const auto& id : series.sensor_ids) out << ',' << id;
  out << '\n';
  char buffer[64];
  for (Index t = 0; t < series.timesteps(); ++t) {
    out << format_timestamp(series.timestamp(t));
    for (Index i = 0; i < series.sensors(); ++i) {
      // Shortest round-trip representation.
      auto [end, ec] = std::to_chars(buffer, buffer + sizeof(buffer), series.values(i, t));
      out << ',' << std::string_view(buffer, static_cast<std::size_t>(end - buffer));
    }
    out << '\n';
  }
}

void save_csv(const SpatioTemporalSeries& series, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw std::runtime_error("cannot open '" + path.string() + "' for writing");
  write_csv(series, out);
}

ScalerParams ScalerParams::fit(const Eigen::MatrixXd& values, const BoolArray* exclude) {
  double lo = std::numeric_limits<double>::infinity();
  double hi = -lo;
  for (Index t = 0; t < values.cols(); ++t)
    for (Index i = 0; i < values.rows(); ++i) {
      const double v = values(i, t);
      if (std::isnan(v) || (exclude && (*exclude)(i, t))) continue;
      lo = std::min(lo, v);
      hi = std::max(hi, v);
    }
  ScalerParams params{lo, hi};
  params.validate();
  return params;
}

void ScalerParams::validate() const {
  if (!std::isfinite(min) || !std::isfinite(max) || !(max > min)) {
    throw ConfigError("scaler requires max > min, got min=" + std::to_string(min) + " max=" + std::to_string(max));
  }
}

SpatioTemporalSeries minmax_scale(const SpatioTemporalSeries& series, const ScalerParams& params) {
  params.validate();
  SpatioTemporalSeries out = series;
  out.values = (series.values.array() - params.min) / (params.max - params.min);
  return out;
}

SpatioTemporalSeries inverse_scale(const SpatioTemporalSeries& series, const ScalerParams& params) {
  params.validate();
  SpatioTemporalSeries out = series;
  out.values = series.values.array() * (params.max - params.min) + params.min;
  return out;
}

MissingMask MissingMask::from_blocks(Index sensors, Index timesteps, std::vector<MissingBlock> blocks,
                                     std::uint64_t seed) {
  MissingMask mask{BoolArray::Constant(sensors, timesteps, false), std::move(blocks), seed};
  for (const auto& b : mask.blocks) {
    if (b.sensor < 0 || b.sensor >= sensors || b.start < 0 || b.length < 1 || b.start + b.length > timesteps) {
      throw ContractError("missing block out of range");
    }
    mask.missing.row(b.sensor).segment(b.start, b.length) = true;
  }
  return mask;
}

MissingMask generate_missing_blocks(const SpatioTemporalSeries& series, const MissingBlockConfig& config,
                                    std::uint64_t seed) {
  const Index s = series.sensors(), t = series.timesteps();
  if (!(config.fraction >= 0.0 && config.fraction < 1.0)) {
    throw ConfigError("missing fraction must lie in [0, 1), got " + std::to_string(config.fraction));
  }
  MissingMask mask = MissingMask::from_blocks(s, t, {}, seed);
  if (config.fraction == 0.0) return mask;

  const double step_hours = static_cast<double>(series.step_seconds) / 3600.0;
  const Index min_len = std::max<Index>(1, std::llround(config.min_hours / step_hours));
  const Index max_len = std::llround(config.max_hours / step_hours);
  if (!(config.min_hours > 0.0) || max_len < min_len) {
    throw ConfigError("invalid missing-block duration range [" + std::to_string(config.min_hours) + ", " +
                      std::to_string(config.max_hours) + "] h");
  }
  if (t < min_len) {
    throw ConfigError("series of " + std::to_string(t) + " steps is shorter than the minimum block of " +
                      std::to_string(min_len) + " steps");
  }
  const auto target = static_cast<Index>(std::ceil(config.fraction * static_cast<double>(s * t)));
  const Index max_attempts = 10000 + 200 * (target / min_len + 1);
  Rng rng(seed);
  Index covered = 0;
  for (Index attempt = 0; covered < target; ++attempt) {
    if (attempt >= max_attempts) {
      throw ConfigError("missing fraction " + std::to_string(config.fraction) +
                        " is unreachable with non-overlapping blocks on this series");
    }
    const Index length = rng.uniform_int(min_len, std::min(max_len, t));
    const Index sensor = rng.uniform_int(0, s - 1);
    const Index start = rng.uniform_int(0, t - length);
    if (mask.missing.row(sensor).segment(start, length).any()) continue;
    mask.missing.row(sensor).segment(start, length) = true;
    mask.blocks.push_back({sensor, start, length});
    covered += length;
  }
  return mask;
}

void write_mask_csv(const MissingMask& mask, const SpatioTemporalSeries& series, std::ostream& out) {
  out << "sensor_id,start_timestamp,n_steps\n";
  for (const auto& b : mask.blocks) {
    out << series.sensor_ids.at(static_cast<std::size_t>(b.sensor)) << ',' << format_timestamp(series.timestamp(b.start))
        << ',' << b.length << '\n';
  }
}

WindowSet WindowSet::subset(Index begin, Index count) const {
  if (begin < 0 || count < 0 || begin + count > size()) throw ContractError("window subset out of range");
  WindowSet out = *this;
  out.clean = clean.middleRows(begin, count);
  out.corrupted = corrupted.middleRows(begin, count);
  out.missing = missing.middleRows(begin, count);
  out.valid = valid.middleRows(begin, count);
  out.origins.assign(origins.begin() + begin, origins.begin() + begin + count);
  out.origin_times.assign(origin_times.begin() + begin, origin_times.begin() + begin + count);
  return out;
}

WindowSet slide_windows(const SpatioTemporalSeries& series, const MissingMask& mask, Index window) {
  const Index s = series.sensors(), t = series.timesteps();
  if (window < 1) throw ConfigError("window length must be positive");
  if (t < window) {
    throw ContractError("series has " + std::to_string(t) + " timesteps, fewer than the window length " +
                        std::to_string(window));
  }
  if (mask.missing.rows() != s || mask.missing.cols() != t) {
    throw DimensionError("missing mask shape does not match series");
  }
  const Index n = t - window + 1;
  WindowSet ws;
  ws.sensors = s;
  ws.window = window;
  ws.timesteps = t;
  ws.clean.resize(n, s * window);
  ws.corrupted.resize(n, s * window);
  ws.missing.resize(n, s * window);
  ws.valid.resize(n, s * window);
  for (Index r = 0; r < n; ++r) {
    ws.origins.push_back(r);
    ws.origin_times.push_back(series.timestamp(r));
    for (Index i = 0; i < s; ++i)
      for (Index j = 0; j < window; ++j) {
        const Index col = i * window + j;
        const double v = series.values(i, r + j);
        const bool known = !std::isnan(v);
        const bool injected = mask.missing(i, r + j);
        ws.clean(r, col) = known ? v : 0.0;
        ws.corrupted(r, col) = known && !injected ? v : 0.0;
        ws.missing(r, col) = injected ? 1.0 : 0.0;
        ws.valid(r, col) = known ? 1.0 : 0.0;
      }
  }
  return ws;
}

std::pair<SpatioTemporalSeries, SpatioTemporalSeries> train_test_split(const SpatioTemporalSeries& series,
                                                                       double ratio, Index window) {
  if (!(ratio > 0.0 && ratio < 1.0)) throw ConfigError("split ratio must lie in (0, 1)");
  const Index t = series.timesteps();
  const auto split = static_cast<Index>(std::floor(static_cast<double>(t) * ratio));
  if (split < window || t - split < window) {
    throw ConfigError("degenerate split: " + std::to_string(split) + " train / " + std::to_string(t - split) +
                      " test steps, each side needs at least w=" + std::to_string(window));
  }
  return {series.slice(0, split), series.slice(split, t - split)};
}

void SynthSpec::validate() const {
  if (sensors < 2) throw ConfigError("synthetic data needs at least 2 sensors");
  if (days < 7) throw ConfigError("synthetic data needs at least 7 days, got " + std::to_string(days));
  if (step_seconds <= 0 || kSecondsPerDay % step_seconds != 0) {
    throw ConfigError("step duration must divide one day");
  }
  if (noise_level < 0.0 || event_rate < 0.0) throw ConfigError("noise level and event rate must be non-negative");
}

namespace {

double bump(double x, double center, double width) {
  const double z = (x - center) / width;
  return std::exp(-0.5 * z * z);
}

// Flow profile shape (vehicles per 5 minutes) at hour-of-day h.
double weekday_profile(double h, double shift) {
  return 40.0 + 260.0 * bump(h, 8.0 + shift, 1.2) + 230.0 * bump(h, 17.5 + shift, 1.6) + 140.0 * bump(h, 13.0, 3.0);
}

double weekend_profile(double h, double shift) {
  return 30.0 + 200.0 * bump(h, 14.0 + shift, 3.0) + 30.0 * bump(h, 20.0, 2.0);
}

std::int64_t poisson(Rng& rng, double lambda) {
  const double limit = std::exp(-lambda);
  std::int64_t k = 0;
  double p = rng.uniform();
  while (p > limit) {
    ++k;
    p *= rng.uniform();
  }
  return k;
}

}  // namespace

SpatioTemporalSeries synth_generate(const SynthSpec& spec) {
  spec.validate();
  const Index s = spec.sensors;
  const Index per_day = kSecondsPerDay / spec.step_seconds;
  const Index t = spec.days * per_day;
  Rng rng(spec.seed);

  SpatioTemporalSeries series;
  for (Index i = 0; i < s; ++i) {
    std::ostringstream id;
    id << "S" << std::setfill('0') << std::setw(3) << i;
    series.sensor_ids.push_back(id.str());
  }
  series.start_time = spec.start_time;
  series.step_seconds = spec.step_seconds;
  series.values.resize(s, t);

  Eigen::VectorXd capacity(s), shift(s);
  for (Index i = 0; i < s; ++i) {
    capacity[i] = 1.0 + 0.25 * std::sin(0.9 * static_cast<double>(i) + 0.3);
    shift[i] = 0.12 * static_cast<double>(i);  // hours, downstream propagation
  }

  // Smoothed AR(1) noise shared between neighbouring sensors.
  const double phi = 0.95;
  const double innovation = std::sqrt(1.0 - phi * phi);
  Eigen::VectorXd state(s);
  for (Index i = 0; i < s; ++i) state[i] = rng.normal();
  Eigen::MatrixXd noise(s, t);
  for (Index k = 0; k < t; ++k) {
    for (Index i = 0; i < s; ++i) state[i] = phi * state[i] + innovation * rng.normal();
    for (Index i = 0; i < s; ++i) {
      const double left = state[std::max<Index>(i - 1, 0)];
      const double right = state[std::min<Index>(i + 1, s - 1)];
      noise(i, k) = (0.25 * left + 0.5 * state[i] + 0.25 * right) / std::sqrt(0.375);
    }
  }

  Eigen::MatrixXd events = Eigen::MatrixXd::Ones(s, t);
  const std::int64_t n_events = poisson(rng, spec.event_rate * static_cast<double>(spec.days));
  for (std::int64_t e = 0; e < n_events; ++e) {
    const Index center = rng.uniform_int(0, s - 1);
    const Index length = rng.uniform_int(per_day / 24, per_day / 8);  // 1 to 3 hours
    const Index start = rng.uniform_int(0, t - length);
    const double magnitude = rng.uniform(-0.5, 0.4);
    for (Index i = std::max<Index>(0, center - 2); i <= std::min<Index>(s - 1, center + 2); ++i) {
      const double spread = 1.0 - static_cast<double>(std::abs(i - center)) / 3.0;
      for (Index k = 0; k < length; ++k) {
        const double envelope = std::sin(M_PI * (static_cast<double>(k) + 0.5) / static_cast<double>(length));
        events(i, start + k) *= 1.0 + magnitude * spread * envelope;
      }
    }
  }

  for (Index k = 0; k < t; ++k) {
    const std::int64_t ts = series.timestamp(k);
    const int dow = day_of_week(ts);
    const double hour = static_cast<double>(ts % kSecondsPerDay) / 3600.0;
    const bool weekend = dow >= 5;
    const double day_factor = dow == 4 ? 1.05 : 1.0;
    for (Index i = 0; i < s; ++i) {
      const double base = weekend ? weekend_profile(hour, shift[i]) : day_factor * weekday_profile(hour, shift[i]);
      const double measurement = 0.02 * rng.normal();
      const double v = base * capacity[i] * events(i, k) * (1.0 + spec.noise_level * noise(i, k) + measurement);
      series.values(i, k) = std::max(0.0, v);
    }
  }
  return series;
}

}  // namespace stimpute
