#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <iomanip>
#include <map>
#include <numbers>
#include <numeric>
#include <random>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "fluid/tensor.hpp"

namespace fluid {

/// values [T,F], times [T], mask [T] (1 = real). Padding forms a tail.
struct EventSequence {
  Tensor values;
  std::vector<double> times;
  std::vector<std::uint8_t> mask;

  std::size_t length() const { return times.size(); }
  std::size_t features() const { return values.rank() == 2 ? values.dim(1) : 0; }
  std::size_t valid_length() const {
    return static_cast<std::size_t>(std::count(mask.begin(), mask.end(), std::uint8_t{1}));
  }

  void validate() const {
    const std::size_t T = times.size();
    if (values.rank() != 2 || values.dim(0) != T || mask.size() != T)
      throw DimensionError("event sequence: values " + shape_str(values.shape()) + ", " + std::to_string(T) +
                           " times, " + std::to_string(mask.size()) + " mask entries");
    bool in_tail = false;
    for (std::size_t i = 0; i < T; ++i) {
      if (!mask[i]) in_tail = true;
      else if (in_tail) throw std::invalid_argument("event sequence: masked entries must form a tail");
      if (mask[i] && i > 0 && mask[i - 1] && !(times[i] > times[i - 1]))
        throw std::invalid_argument("event sequence: times not strictly increasing at index " + std::to_string(i));
    }
  }

  bool operator==(const EventSequence& o) const {
    return values == o.values && times == o.times && mask == o.mask;
  }
};

// ---------------------------------------------------------------------------
// Irregular spirals
// ---------------------------------------------------------------------------

struct SpiralSpec {
  std::size_t n_spirals = 300;
  std::size_t n_points = 150;
  std::size_t n_subsample = 50;
  double noise_std = 0.02;
  std::uint64_t seed = 0;
  double r0 = 0.1;
  double r_slope = 0.02;
  double t_max = 6.0 * std::numbers::pi;
  double interp_frac = 0.2;  // of the subsample, drawn from the non-extrapolation span
  double extrap_frac = 0.2;  // final segment by time

  void validate() const {
    if (n_spirals == 0 || n_points == 0 || n_subsample == 0)
      throw std::invalid_argument("spiral spec: counts must be positive");
    if (n_subsample > n_points)
      throw std::invalid_argument("spiral spec: n_subsample (" + std::to_string(n_subsample) + ") > n_points (" +
                                  std::to_string(n_points) + ")");
    if (noise_std < 0) throw std::invalid_argument("spiral spec: noise_std must be >= 0");
    if (!(t_max > 0)) throw std::invalid_argument("spiral spec: t_max must be positive");
    if (interp_frac < 0 || extrap_frac < 0 || interp_frac + extrap_frac >= 1)
      throw std::invalid_argument("spiral spec: split fractions must leave a conditioning segment");
  }
};

inline nlohmann::json to_json(const SpiralSpec& s) {
  return {{"n_spirals", s.n_spirals}, {"n_points", s.n_points},       {"n_subsample", s.n_subsample},
          {"noise_std", s.noise_std}, {"seed", s.seed},               {"r0", s.r0},
          {"r_slope", s.r_slope},     {"t_max", s.t_max},             {"interp_frac", s.interp_frac},
          {"extrap_frac", s.extrap_frac}};
}

inline SpiralSpec spiral_spec_from_json(const nlohmann::json& j) {
  SpiralSpec s;
  s.n_spirals = j.value("n_spirals", s.n_spirals);
  s.n_points = j.value("n_points", s.n_points);
  s.n_subsample = j.value("n_subsample", s.n_subsample);
  s.noise_std = j.value("noise_std", s.noise_std);
  s.seed = j.value("seed", s.seed);
  s.r0 = j.value("r0", s.r0);
  s.r_slope = j.value("r_slope", s.r_slope);
  s.t_max = j.value("t_max", s.t_max);
  s.interp_frac = j.value("interp_frac", s.interp_frac);
  s.extrap_frac = j.value("extrap_frac", s.extrap_frac);
  s.validate();
  return s;
}

inline double spiral_radius(const SpiralSpec& s, double t) { return s.r0 + s.r_slope * t; }

/// Indices into one subsampled spiral, sorted by time.
struct SpiralSplit {
  std::vector<std::size_t> conditioning, interpolation, extrapolation;
};

/// Last extrap_frac of the points (by time) is extrapolation; interpolation
/// points are spread evenly through the remainder.
inline SpiralSplit split_spiral(std::size_t n, const SpiralSpec& s) {
  const auto n_ex = static_cast<std::size_t>(std::llround(s.extrap_frac * static_cast<double>(n)));
  const auto n_in = static_cast<std::size_t>(std::llround(s.interp_frac * static_cast<double>(n)));
  const std::size_t head = n - n_ex;
  SpiralSplit out;
  std::vector<std::uint8_t> interp(head, 0);
  if (n_in > 0) {
    // Evenly spaced inside (0, head); never the first point.
    for (std::size_t k = 0; k < n_in; ++k) {
      const std::size_t idx = ((2 * k + 1) * head) / (2 * n_in);
      interp[std::min(std::max<std::size_t>(idx, 1), head - 1)] = 1;
    }
  }
  for (std::size_t i = 0; i < head; ++i) (interp[i] ? out.interpolation : out.conditioning).push_back(i);
  for (std::size_t i = head; i < n; ++i) out.extrapolation.push_back(i);
  return out;
}

/// Archimedean spirals (x, y) = (r(t) cos t, r(t) sin t) with r linear in t,
/// sampled uniformly at n_points on [0, t_max], perturbed by Gaussian noise,
/// then subsampled without replacement and sorted by time. Times are the raw
/// angle parameter t.
inline std::vector<EventSequence> generate_spirals(const SpiralSpec& spec) {
  spec.validate();
  std::mt19937_64 rng(spec.seed);
  std::normal_distribution<double> noise(0.0, 1.0);
  std::vector<EventSequence> out;
  out.reserve(spec.n_spirals);
  const double step = spec.n_points > 1 ? spec.t_max / static_cast<double>(spec.n_points - 1) : 0.0;
  for (std::size_t s = 0; s < spec.n_spirals; ++s) {
    std::vector<double> xs(spec.n_points), ys(spec.n_points);
    for (std::size_t i = 0; i < spec.n_points; ++i) {
      const double t = step * static_cast<double>(i);
      const double r = spiral_radius(spec, t);
      xs[i] = r * std::cos(t);
      ys[i] = r * std::sin(t);
      if (spec.noise_std > 0) {
        xs[i] += spec.noise_std * noise(rng);
        ys[i] += spec.noise_std * noise(rng);
      }
    }
    std::vector<std::size_t> idx(spec.n_points);
    std::iota(idx.begin(), idx.end(), 0);
    // Partial Fisher-Yates keeps the draw independent of std::sample's
    // implementation-defined ordering.
    for (std::size_t i = 0; i < spec.n_subsample; ++i) {
      std::uniform_int_distribution<std::size_t> pick(i, spec.n_points - 1);
      std::swap(idx[i], idx[pick(rng)]);
    }
    idx.resize(spec.n_subsample);
    std::sort(idx.begin(), idx.end());
    EventSequence e;
    e.values = Tensor({spec.n_subsample, 2});
    auto v = e.values.mutable_data();
    for (std::size_t k = 0; k < idx.size(); ++k) {
      v[2 * k] = xs[idx[k]];
      v[2 * k + 1] = ys[idx[k]];
      e.times.push_back(step * static_cast<double>(idx[k]));
    }
    e.mask.assign(spec.n_subsample, 1);
    out.push_back(std::move(e));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Run-length event encoding of pixel rows
// ---------------------------------------------------------------------------

/// Binarize at `threshold` (>= is on), collapse runs into (value, duration)
/// events. Event k sits at time t_k = sum of durations up to and including k.
/// Padding rows carry value 0 and repeat the final time.
inline EventSequence event_encode(const std::vector<double>& pixels, double threshold, std::size_t pad_to) {
  std::vector<double> vals, ends;
  double t = 0.0;
  for (std::size_t i = 0; i < pixels.size(); ++i) {
    const double b = pixels[i] >= threshold ? 1.0 : 0.0;
    if (vals.empty() || vals.back() != b) {
      vals.push_back(b);
      ends.push_back(t);
    }
    t += 1.0;
    ends.back() = t;
  }
  if (vals.size() > pad_to)
    throw std::invalid_argument("event_encode: " + std::to_string(vals.size()) + " events exceed pad_to " +
                                std::to_string(pad_to));
  EventSequence e;
  e.values = Tensor({pad_to, 1});
  auto v = e.values.mutable_data();
  e.times.assign(pad_to, ends.empty() ? 0.0 : ends.back());
  e.mask.assign(pad_to, 0);
  for (std::size_t k = 0; k < vals.size(); ++k) {
    v[k] = vals[k];
    e.times[k] = ends[k];
    e.mask[k] = 1;
  }
  return e;
}

/// Inverse of event_encode on the binarized signal.
inline std::vector<double> event_decode(const EventSequence& e) {
  std::vector<double> out;
  double prev = 0.0;
  for (std::size_t k = 0; k < e.length() && e.mask[k]; ++k) {
    const auto n = static_cast<std::size_t>(std::llround(e.times[k] - prev));
    out.insert(out.end(), n, e.values[k * e.features()]);
    prev = e.times[k];
  }
  return out;
}

// ---------------------------------------------------------------------------
// Dataset CSV: seq_id,t,feature_0..F-1,mask
// ---------------------------------------------------------------------------

inline void write_dataset_csv(std::ostream& os, const std::vector<EventSequence>& data) {
  const std::size_t F = data.empty() ? 0 : data.front().features();
  os << "seq_id,t";
  for (std::size_t f = 0; f < F; ++f) os << ",feature_" << f;
  os << ",mask\n";
  os << std::setprecision(17);
  for (std::size_t s = 0; s < data.size(); ++s) {
    const auto& e = data[s];
    if (e.features() != F) throw DimensionError("dataset sequences disagree on feature count");
    for (std::size_t i = 0; i < e.length(); ++i) {
      os << s << ',' << e.times[i];
      for (std::size_t f = 0; f < F; ++f) os << ',' << e.values[i * F + f];
      os << ',' << static_cast<int>(e.mask[i]) << '\n';
    }
  }
}

inline void write_dataset_csv(const std::string& path, const std::vector<EventSequence>& data) {
  std::ofstream os(path);
  if (!os) throw std::runtime_error("cannot write " + path);
  write_dataset_csv(os, data);
}

inline std::vector<EventSequence> read_dataset_csv(std::istream& is) {
  std::string line;
  if (!std::getline(is, line)) throw std::runtime_error("dataset csv: empty input");
  std::vector<std::string> header;
  {
    std::stringstream ss(line);
    std::string cell;
    while (std::getline(ss, cell, ',')) header.push_back(cell);
  }
  if (header.size() < 3 || header[0] != "seq_id" || header[1] != "t" || header.back() != "mask")
    throw std::runtime_error("dataset csv: unexpected header '" + line + "'");
  const std::size_t F = header.size() - 3;
  for (std::size_t f = 0; f < F; ++f)
    if (header[2 + f] != "feature_" + std::to_string(f))
      throw std::runtime_error("dataset csv: unexpected column '" + header[2 + f] + "'");

  std::map<std::size_t, std::pair<std::vector<double>, EventSequence>> rows;
  std::size_t line_no = 1;
  while (std::getline(is, line)) {
    ++line_no;
    if (line.empty()) continue;
    std::stringstream ss(line);
    std::string cell;
    std::vector<std::string> cells;
    while (std::getline(ss, cell, ',')) cells.push_back(cell);
    if (cells.size() != F + 3) throw std::runtime_error("dataset csv: wrong column count on line " + std::to_string(line_no));
    try {
      auto& [vals, e] = rows[std::stoull(cells[0])];
      e.times.push_back(std::stod(cells[1]));
      for (std::size_t f = 0; f < F; ++f) vals.push_back(std::stod(cells[2 + f]));
      e.mask.push_back(static_cast<std::uint8_t>(std::stoi(cells[F + 2]) != 0));
    } catch (const std::logic_error&) {
      throw std::runtime_error("dataset csv: malformed number on line " + std::to_string(line_no));
    }
  }
  std::vector<EventSequence> out;
  for (auto& [id, entry] : rows) {
    auto& [vals, e] = entry;
    e.values = Tensor({e.times.size(), F}, std::span<const double>(vals));
    e.validate();
    out.push_back(std::move(e));
  }
  return out;
}

inline std::vector<EventSequence> read_dataset_csv(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw std::runtime_error("cannot read " + path);
  return read_dataset_csv(is);
}

}  // namespace fluid
