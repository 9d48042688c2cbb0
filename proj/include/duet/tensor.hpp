#pragma once

#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <numeric>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace duet {

using Shape = std::vector<int64_t>;

inline int64_t shape_numel(const Shape& s) {
  int64_t n = 1;
  for (int64_t d : s) n *= d;
  return n;
}

inline std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << '[';
  for (size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
  os << ']';
  return os.str();
}

/// Dense n-dimensional array of doubles, row-major. Rank 0 is a scalar
/// (one element). Shapes are fixed at construction.
class Tensor {
 public:
  Tensor() = default;

  explicit Tensor(Shape shape) : shape_(std::move(shape)) {
    for (int64_t d : shape_)
      if (d <= 0) throw std::runtime_error("Tensor: nonpositive dim in " + shape_str(shape_));
    data_.assign(shape_numel(shape_), 0.0);
  }

  static Tensor scalar(double v) {
    Tensor t{Shape{}};
    t.data_[0] = v;
    return t;
  }

  static Tensor full(Shape shape, double v) {
    Tensor t(std::move(shape));
    t.data_.assign(t.data_.size(), v);
    return t;
  }

  static Tensor from(Shape shape, std::vector<double> data) {
    Tensor t;
    t.shape_ = std::move(shape);
    if (shape_numel(t.shape_) != static_cast<int64_t>(data.size()))
      throw std::runtime_error("Tensor::from: shape " + shape_str(t.shape_) + " does not match " +
                               std::to_string(data.size()) + " values");
    t.data_ = std::move(data);
    return t;
  }

  const Shape& shape() const { return shape_; }
  int64_t rank() const { return static_cast<int64_t>(shape_.size()); }
  int64_t dim(int i) const { return shape_.at(i); }
  int64_t numel() const { return static_cast<int64_t>(data_.size()); }

  double* data() { return data_.data(); }
  const double* data() const { return data_.data(); }

  double& operator[](int64_t i) { return data_[i]; }
  double operator[](int64_t i) const { return data_[i]; }

  // Row-major multi-index access.
  template <typename... Ix>
  double& at(Ix... ix) {
    return data_[flat_index(ix...)];
  }
  template <typename... Ix>
  double at(Ix... ix) const {
    return data_[flat_index(ix...)];
  }

  bool same_shape(const Tensor& o) const { return shape_ == o.shape_; }

  bool all_finite() const {
    for (double v : data_)
      if (!std::isfinite(v)) return false;
    return true;
  }

  double value() const {
    if (numel() != 1) throw std::runtime_error("Tensor::value: not a scalar, shape " + shape_str(shape_));
    return data_[0];
  }

  bool operator==(const Tensor& o) const { return shape_ == o.shape_ && data_ == o.data_; }

 private:
  template <typename... Ix>
  int64_t flat_index(Ix... ix) const {
    const int64_t idx[] = {static_cast<int64_t>(ix)...};
    constexpr size_t n = sizeof...(Ix);
    if (n != shape_.size()) throw std::runtime_error("Tensor::at: rank mismatch");
    int64_t flat = 0;
    for (size_t i = 0; i < n; ++i) flat = flat * shape_[i] + idx[i];
    return flat;
  }

  Shape shape_;
  std::vector<double> data_;
};

// --- DTF1 binary tensor file format -----------------------------------------
// magic "DTF1", u32 LE rank, rank x u64 LE dims, product(dims) x f64 LE values.

namespace detail {
inline void put_u32le(std::ostream& os, uint32_t v) {
  unsigned char b[4] = {static_cast<unsigned char>(v), static_cast<unsigned char>(v >> 8),
                        static_cast<unsigned char>(v >> 16), static_cast<unsigned char>(v >> 24)};
  os.write(reinterpret_cast<const char*>(b), 4);
}
inline void put_u64le(std::ostream& os, uint64_t v) {
  unsigned char b[8];
  for (int i = 0; i < 8; ++i) b[i] = static_cast<unsigned char>(v >> (8 * i));
  os.write(reinterpret_cast<const char*>(b), 8);
}
inline uint32_t get_u32le(std::istream& is) {
  unsigned char b[4];
  is.read(reinterpret_cast<char*>(b), 4);
  return uint32_t(b[0]) | uint32_t(b[1]) << 8 | uint32_t(b[2]) << 16 | uint32_t(b[3]) << 24;
}
inline uint64_t get_u64le(std::istream& is) {
  unsigned char b[8];
  is.read(reinterpret_cast<char*>(b), 8);
  uint64_t v = 0;
  for (int i = 0; i < 8; ++i) v |= uint64_t(b[i]) << (8 * i);
  return v;
}
inline uint64_t f64_bits(double d) {
  uint64_t u;
  std::memcpy(&u, &d, 8);
  return u;
}
inline double bits_f64(uint64_t u) {
  double d;
  std::memcpy(&d, &u, 8);
  return d;
}
}  // namespace detail

inline void write_dtf(std::ostream& os, const Tensor& t) {
  os.write("DTF1", 4);
  detail::put_u32le(os, static_cast<uint32_t>(t.rank()));
  for (int64_t d : t.shape()) detail::put_u64le(os, static_cast<uint64_t>(d));
  for (int64_t i = 0; i < t.numel(); ++i) detail::put_u64le(os, detail::f64_bits(t[i]));
}

inline void write_dtf(const std::string& path, const Tensor& t) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("write_dtf: cannot open " + path);
  write_dtf(f, t);
  if (!f) throw std::runtime_error("write_dtf: write failed for " + path);
}

inline Tensor read_dtf(std::istream& is, const std::string& what = "<stream>") {
  char magic[4];
  is.read(magic, 4);
  if (!is || std::memcmp(magic, "DTF1", 4) != 0)
    throw std::runtime_error("read_dtf: bad magic in " + what);
  uint32_t rank = detail::get_u32le(is);
  if (rank > 8) throw std::runtime_error("read_dtf: implausible rank " + std::to_string(rank) + " in " + what);
  Shape shape(rank);
  for (uint32_t i = 0; i < rank; ++i) {
    uint64_t d = detail::get_u64le(is);
    if (d == 0 || d > (uint64_t(1) << 32)) throw std::runtime_error("read_dtf: bad dim in " + what);
    shape[i] = static_cast<int64_t>(d);
  }
  int64_t n = shape_numel(shape);
  std::vector<double> data(n);
  for (int64_t i = 0; i < n; ++i) data[i] = detail::bits_f64(detail::get_u64le(is));
  if (!is) throw std::runtime_error("read_dtf: truncated file " + what);
  return Tensor::from(std::move(shape), std::move(data));
}

inline Tensor read_dtf(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("read_dtf: cannot open " + path);
  return read_dtf(f, path);
}

}  // namespace duet
