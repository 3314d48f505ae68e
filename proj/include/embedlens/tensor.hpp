#pragma once

#include <Eigen/Dense>

#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <variant>
#include <vector>

namespace embedlens {

template <typename T>
using Mat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using Vec = Eigen::Matrix<T, Eigen::Dynamic, 1>;

using MatF = Mat<float>;
using MatD = Mat<double>;
using VecF = Vec<float>;
using VecD = Vec<double>;

enum class DType { f32, f64 };

std::string dtype_name(DType t);
DType dtype_from_name(const std::string& name);
std::size_t dtype_size(DType t);

template <typename T>
constexpr DType dtype_of();
template <>
constexpr DType dtype_of<float>() { return DType::f32; }
template <>
constexpr DType dtype_of<double>() { return DType::f64; }

// Dense row-major tensor stored in its native element type.
class Tensor {
 public:
  Tensor() = default;
  Tensor(std::vector<std::int64_t> shape, std::vector<float> data);
  Tensor(std::vector<std::int64_t> shape, std::vector<double> data);

  template <typename T>
  static Tensor from_matrix(const Mat<T>& m) {
    std::vector<T> data(m.data(), m.data() + m.size());
    return Tensor({m.rows(), m.cols()}, std::move(data));
  }

  const std::vector<std::int64_t>& shape() const noexcept { return shape_; }
  DType dtype() const noexcept { return dtype_; }
  std::size_t numel() const noexcept;
  std::size_t rank() const noexcept { return shape_.size(); }
  std::int64_t dim(std::size_t i) const { return shape_.at(i); }

  // Raw little-endian bytes (host order is little-endian on supported targets).
  std::span<const std::byte> bytes() const noexcept;

  template <typename T>
  const std::vector<T>& storage() const {
    return std::get<std::vector<T>>(data_);
  }

  // 2-D view converted to T (copy). Rank-1 tensors become a single row.
  template <typename T>
  Mat<T> matrix() const;

  Tensor transposed() const;

  // Column block [begin, end) of a rank-2 tensor.
  Tensor column_block(std::int64_t begin, std::int64_t end) const;

  bool all_finite() const;
  bool bit_equal(const Tensor& other) const;
  std::string shape_string() const;

 private:
  std::vector<std::int64_t> shape_;
  DType dtype_ = DType::f32;
  std::variant<std::vector<float>, std::vector<double>> data_;
};

std::string shape_string(const std::vector<std::int64_t>& shape);

}  // namespace embedlens
