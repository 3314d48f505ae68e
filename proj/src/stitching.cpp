#include "embedlens/stitching.hpp"

#include "embedlens/algebra.hpp"
#include "embedlens/error.hpp"
#include "embedlens/io.hpp"
#include "embedlens/safetensors.hpp"

#include <json.hpp>

namespace embedlens {

StitchKernel stitch_kernel(const MatD& e_a, const MatD& e_b, std::string source, std::string target) {
  if (e_a.cols() != e_b.cols())
    throw Error("stitching", "vocab_size", std::to_string(e_b.cols()),
                "embedding matrices differ in vocabulary size (" + std::to_string(e_a.cols()) + ")");
  for (const auto* e : {&e_a, &e_b})
    if (e->rows() > e->cols())
      throw Error("stitching", "hidden_dim", std::to_string(e->rows()),
                  "hidden size exceeds vocabulary size " + std::to_string(e->cols()));
  const auto pinv = pseudo_inverse<double>(e_b, "E_B(" + target + ")");
  if (pinv.rank < e_b.rows())
    throw Error("stitching", "rank", std::to_string(pinv.rank),
                "E_B is rank-deficient: numerical rank " + std::to_string(pinv.rank) + " < " +
                    std::to_string(e_b.rows()));
  StitchKernel k;
  k.K = e_a * pinv.matrix;
  if (!k.K.allFinite()) throw Error("stitching", "kernel", "non-finite", "kernel has non-finite entries");
  k.source = std::move(source);
  k.target = std::move(target);
  k.rcond = pinv.rcond;
  k.vocab_size = e_a.cols();
  return k;
}

template <typename T>
Mat<T> apply_kernel(const Mat<T>& h, const StitchKernel& kernel) {
  if (h.cols() != kernel.K.rows())
    throw Error("stitching", "hidden", std::to_string(h.cols()),
                "width does not match kernel rows " + std::to_string(kernel.K.rows()));
  return h * kernel.K.template cast<T>();
}

template MatF apply_kernel(const MatF&, const StitchKernel&);
template MatD apply_kernel(const MatD&, const StitchKernel&);

std::filesystem::path kernel_sidecar_path(const std::filesystem::path& path) {
  auto p = path;
  p += ".json";
  return p;
}

void export_kernel(const StitchKernel& kernel, const std::filesystem::path& path, DType dtype) {
  Tensor t = dtype == DType::f64 ? Tensor::from_matrix<double>(kernel.K)
                                 : Tensor::from_matrix<float>(kernel.K.cast<float>());
  safetensors::write(path, {{"kernel", std::move(t)}},
                     {{"source", kernel.source}, {"target", kernel.target}});
  nlohmann::ordered_json j;
  j["source"] = kernel.source;
  j["target"] = kernel.target;
  j["rcond"] = kernel.rcond;
  j["d1"] = kernel.K.rows();
  j["d2"] = kernel.K.cols();
  j["e"] = kernel.vocab_size;
  write_file_atomic(kernel_sidecar_path(path), j.dump(2) + "\n");
}

StitchKernel load_kernel(const std::filesystem::path& path) {
  auto file = safetensors::read(path);
  auto it = file.tensors.find("kernel");
  if (it == file.tensors.end()) throw Error("stitching", "path", path.string(), "no \"kernel\" tensor");
  StitchKernel k;
  k.K = it->second.matrix<double>();
  const auto side = kernel_sidecar_path(path);
  if (std::filesystem::exists(side)) {
    const auto j = nlohmann::json::parse(read_file(side));
    k.source = j.value("source", "");
    k.target = j.value("target", "");
    k.rcond = j.value("rcond", 0.0);
    k.vocab_size = j.value("e", Eigen::Index{0});
  }
  return k;
}

}  // namespace embedlens
