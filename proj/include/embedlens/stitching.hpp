#pragma once

#include "embedlens/tensor.hpp"

#include <filesystem>
#include <string>

namespace embedlens {

// K = E_A * pinv(E_B), mapping model A's hidden states (row vectors, d1)
// into model B's feature space (d2). Always built from the exact
// pseudo-inverse in double precision.
struct StitchKernel {
  MatD K;  // d1 x d2
  std::string source;
  std::string target;
  double rcond = 0;
  Eigen::Index vocab_size = 0;
};

StitchKernel stitch_kernel(const MatD& e_a, const MatD& e_b, std::string source = "A",
                           std::string target = "B");

template <typename T>
Mat<T> apply_kernel(const Mat<T>& h, const StitchKernel& kernel);

// Writes `path` (safetensors, single tensor "kernel") and `path`.json with
// {source, target, rcond, d1, d2, e}.
void export_kernel(const StitchKernel& kernel, const std::filesystem::path& path,
                   DType dtype = DType::f64);
StitchKernel load_kernel(const std::filesystem::path& path);

std::filesystem::path kernel_sidecar_path(const std::filesystem::path& path);

}  // namespace embedlens
