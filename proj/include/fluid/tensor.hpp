#pragma once

#include <atomic>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <functional>
#include <istream>
#include <memory>
#include <numeric>
#include <ostream>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace fluid {

using Shape = std::vector<std::size_t>;

class DimensionError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

inline std::string shape_str(const Shape& s) {
  std::string out = "[";
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (i) out += ",";
    out += std::to_string(s[i]);
  }
  return out + "]";
}

inline std::size_t numel(const Shape& s) {
  return std::accumulate(s.begin(), s.end(), std::size_t{1}, std::multiplies<>());
}

// ---------------------------------------------------------------------------
// Allocation accounting. Every tensor payload goes through TrackingAllocator,
// so the benchmark can report peak bytes held by tensors in this process.
// ---------------------------------------------------------------------------

namespace memory {

struct Counters {
  std::atomic<std::int64_t> current{0};
  std::atomic<std::int64_t> peak{0};
};

inline Counters& counters() {
  static Counters c;
  return c;
}

inline void on_alloc(std::size_t bytes) {
  auto& c = counters();
  const auto now = c.current.fetch_add(static_cast<std::int64_t>(bytes)) +
                   static_cast<std::int64_t>(bytes);
  auto prev = c.peak.load();
  while (now > prev && !c.peak.compare_exchange_weak(prev, now)) {
  }
}

inline void on_free(std::size_t bytes) {
  counters().current.fetch_sub(static_cast<std::int64_t>(bytes));
}

inline std::int64_t current_bytes() { return counters().current.load(); }
inline std::int64_t peak_bytes() { return counters().peak.load(); }

/// Restart peak tracking from the current live byte count.
inline void reset_peak() { counters().peak.store(counters().current.load()); }

}  // namespace memory

template <class T>
struct TrackingAllocator {
  using value_type = T;

  TrackingAllocator() noexcept = default;
  template <class U>
  TrackingAllocator(const TrackingAllocator<U>&) noexcept {}

  T* allocate(std::size_t n) {
    memory::on_alloc(n * sizeof(T));
    return std::allocator<T>{}.allocate(n);
  }
  void deallocate(T* p, std::size_t n) noexcept {
    memory::on_free(n * sizeof(T));
    std::allocator<T>{}.deallocate(p, n);
  }

  template <class U>
  bool operator==(const TrackingAllocator<U>&) const noexcept {
    return true;
  }
};

using Buffer = std::vector<double, TrackingAllocator<double>>;

// ---------------------------------------------------------------------------
// Tensor: dense row-major f64 array. The payload is shared between copies and
// reshapes; a tensor is never modified after it has been handed to another
// owner, so sharing is safe.
// ---------------------------------------------------------------------------

class Tensor {
 public:
  Tensor() : Tensor(Shape{0}) {}

  explicit Tensor(Shape shape, double fill = 0.0)
      : shape_(std::move(shape)),
        data_(std::make_shared<Buffer>(numel(shape_), fill)) {}

  Tensor(Shape shape, std::span<const double> values) : shape_(std::move(shape)) {
    if (numel(shape_) != values.size())
      throw DimensionError("tensor of shape " + shape_str(shape_) + " cannot hold " +
                           std::to_string(values.size()) + " values");
    data_ = std::make_shared<Buffer>(values.begin(), values.end());
  }

  Tensor(Shape shape, std::initializer_list<double> values)
      : Tensor(std::move(shape), std::span<const double>(values.begin(), values.size())) {}

  static Tensor scalar(double v) { return Tensor(Shape{}, {v}); }

  static Tensor zeros_like(const Tensor& t) { return Tensor(t.shape()); }

  const Shape& shape() const noexcept { return shape_; }
  std::size_t rank() const noexcept { return shape_.size(); }
  std::size_t size() const noexcept { return data_->size(); }
  std::size_t dim(std::size_t i) const { return shape_.at(i); }
  bool is_scalar() const noexcept { return size() == 1 && shape_.empty(); }

  std::span<const double> data() const noexcept { return {data_->data(), data_->size()}; }

  /// Writable view. Only valid while this tensor is the payload's sole owner,
  /// i.e. while it is being built inside a kernel.
  std::span<double> mutable_data() noexcept { return {data_->data(), data_->size()}; }

  double operator[](std::size_t i) const noexcept { return (*data_)[i]; }
  double item() const {
    if (size() != 1) throw DimensionError("item() on tensor of shape " + shape_str(shape_));
    return (*data_)[0];
  }

  /// Same payload, new shape.
  Tensor reshaped(Shape s) const {
    if (numel(s) != size())
      throw DimensionError("cannot reshape " + shape_str(shape_) + " to " + shape_str(s));
    Tensor t;
    t.shape_ = std::move(s);
    t.data_ = data_;
    return t;
  }

  Tensor clone() const {
    Tensor t;
    t.shape_ = shape_;
    t.data_ = std::make_shared<Buffer>(*data_);
    return t;
  }

  bool all_finite() const noexcept {
    for (double v : *data_)
      if (!std::isfinite(v)) return false;
    return true;
  }

  friend bool operator==(const Tensor& a, const Tensor& b) {
    if (a.shape_ != b.shape_) return false;
    return std::memcmp(a.data_->data(), b.data_->data(), a.size() * sizeof(double)) == 0;
  }

 private:
  Shape shape_;
  std::shared_ptr<Buffer> data_;
};

inline double max_abs_diff(const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape())
    throw DimensionError("shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  double m = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

// ---------------------------------------------------------------------------
// Binary serialization: little-endian u32 rank, u32 dims, then f64 payload.
// ---------------------------------------------------------------------------

namespace detail {

inline void put_u32(std::ostream& os, std::uint32_t v) {
  unsigned char b[4];
  for (int i = 0; i < 4; ++i) b[i] = static_cast<unsigned char>((v >> (8 * i)) & 0xFFu);
  os.write(reinterpret_cast<const char*>(b), 4);
}

inline std::uint32_t get_u32(std::istream& is) {
  unsigned char b[4];
  if (!is.read(reinterpret_cast<char*>(b), 4)) throw std::runtime_error("truncated tensor header");
  std::uint32_t v = 0;
  for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(b[i]) << (8 * i);
  return v;
}

inline void put_f64(std::ostream& os, double d) {
  std::uint64_t bits;
  std::memcpy(&bits, &d, sizeof bits);
  unsigned char b[8];
  for (int i = 0; i < 8; ++i) b[i] = static_cast<unsigned char>((bits >> (8 * i)) & 0xFFu);
  os.write(reinterpret_cast<const char*>(b), 8);
}

inline double get_f64(std::istream& is) {
  unsigned char b[8];
  if (!is.read(reinterpret_cast<char*>(b), 8)) throw std::runtime_error("truncated tensor payload");
  std::uint64_t bits = 0;
  for (int i = 0; i < 8; ++i) bits |= static_cast<std::uint64_t>(b[i]) << (8 * i);
  double d;
  std::memcpy(&d, &bits, sizeof d);
  return d;
}

}  // namespace detail

inline void write_tensor(std::ostream& os, const Tensor& t) {
  detail::put_u32(os, static_cast<std::uint32_t>(t.rank()));
  for (auto d : t.shape()) detail::put_u32(os, static_cast<std::uint32_t>(d));
  for (double v : t.data()) detail::put_f64(os, v);
}

inline Tensor read_tensor(std::istream& is) {
  const auto rank = detail::get_u32(is);
  if (rank > 16) throw std::runtime_error("implausible tensor rank " + std::to_string(rank));
  Shape shape(rank);
  for (auto& d : shape) d = detail::get_u32(is);
  Tensor t(shape);
  for (double& v : t.mutable_data()) v = detail::get_f64(is);
  return t;
}

inline std::size_t serialized_size(const Tensor& t) { return 4 + 4 * t.rank() + 8 * t.size(); }

}  // namespace fluid
