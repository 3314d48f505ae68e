#include "embedlens/tensor.hpp"

#include "embedlens/error.hpp"

#include <cmath>
#include <cstring>
#include <numeric>
#include <sstream>

namespace embedlens {

std::string dtype_name(DType t) { return t == DType::f32 ? "F32" : "F64"; }

DType dtype_from_name(const std::string& name) {
  if (name == "F32" || name == "f32") return DType::f32;
  if (name == "F64" || name == "f64") return DType::f64;
  throw Error("tensor", "dtype", name, "unsupported dtype (expected F32 or F64)");
}

std::size_t dtype_size(DType t) { return t == DType::f32 ? 4 : 8; }

std::string shape_string(const std::vector<std::int64_t>& shape) {
  std::ostringstream os;
  os << "[";
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
  os << "]";
  return os.str();
}

namespace {

std::size_t product(const std::vector<std::int64_t>& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1},
                         [](std::size_t a, std::int64_t b) { return a * static_cast<std::size_t>(b); });
}

void check_shape(const std::vector<std::int64_t>& shape, std::size_t count) {
  for (auto s : shape)
    if (s <= 0) throw Error("tensor", "shape", shape_string(shape), "dimensions must be positive");
  if (product(shape) != count)
    throw Error("tensor", "shape", shape_string(shape),
                "element count " + std::to_string(count) + " does not match shape");
}

}  // namespace

Tensor::Tensor(std::vector<std::int64_t> shape, std::vector<float> data)
    : shape_(std::move(shape)), dtype_(DType::f32), data_(std::move(data)) {
  check_shape(shape_, std::get<0>(data_).size());
}

Tensor::Tensor(std::vector<std::int64_t> shape, std::vector<double> data)
    : shape_(std::move(shape)), dtype_(DType::f64), data_(std::move(data)) {
  check_shape(shape_, std::get<1>(data_).size());
}

std::size_t Tensor::numel() const noexcept { return shape_.empty() ? 0 : product(shape_); }

std::span<const std::byte> Tensor::bytes() const noexcept {
  return std::visit(
      [](const auto& v) { return std::as_bytes(std::span(v.data(), v.size())); }, data_);
}

template <typename T>
Mat<T> Tensor::matrix() const {
  if (shape_.empty() || shape_.size() > 2)
    throw Error("tensor", "shape", embedlens::shape_string(shape_), "matrix view requires rank 1 or 2");
  const Eigen::Index rows = shape_.size() == 2 ? shape_[0] : 1;
  const Eigen::Index cols = shape_.size() == 2 ? shape_[1] : shape_[0];
  return std::visit(
      [&](const auto& v) -> Mat<T> {
        using S = typename std::decay_t<decltype(v)>::value_type;
        Eigen::Map<const Mat<S>> view(v.data(), rows, cols);
        return view.template cast<T>();
      },
      data_);
}

template MatF Tensor::matrix<float>() const;
template MatD Tensor::matrix<double>() const;

Tensor Tensor::transposed() const {
  if (shape_.size() != 2)
    throw Error("tensor", "shape", embedlens::shape_string(shape_), "transpose requires rank 2");
  return std::visit(
      [&](const auto& v) -> Tensor {
        using S = typename std::decay_t<decltype(v)>::value_type;
        Eigen::Map<const Mat<S>> view(v.data(), shape_[0], shape_[1]);
        Mat<S> t = view.transpose();
        return Tensor::from_matrix<S>(t);
      },
      data_);
}

Tensor Tensor::column_block(std::int64_t begin, std::int64_t end) const {
  if (shape_.size() != 2 || begin < 0 || end > shape_[1] || begin >= end)
    throw Error("tensor", "column_block", std::to_string(begin) + ":" + std::to_string(end),
                "invalid column block for shape " + embedlens::shape_string(shape_));
  return std::visit(
      [&](const auto& v) -> Tensor {
        using S = typename std::decay_t<decltype(v)>::value_type;
        Eigen::Map<const Mat<S>> view(v.data(), shape_[0], shape_[1]);
        Mat<S> block = view.middleCols(begin, end - begin);
        return Tensor::from_matrix<S>(block);
      },
      data_);
}

bool Tensor::all_finite() const {
  return std::visit(
      [](const auto& v) {
        for (auto x : v)
          if (!std::isfinite(x)) return false;
        return true;
      },
      data_);
}

bool Tensor::bit_equal(const Tensor& other) const {
  if (shape_ != other.shape_ || dtype_ != other.dtype_) return false;
  auto a = bytes();
  auto b = other.bytes();
  return a.size() == b.size() && std::memcmp(a.data(), b.data(), a.size()) == 0;
}

std::string Tensor::shape_string() const { return embedlens::shape_string(shape_); }

}  // namespace embedlens
