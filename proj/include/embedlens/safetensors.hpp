#pragma once

// safetensors layout: 8-byte little-endian header length N, N bytes of UTF-8
// JSON mapping tensor name -> {dtype, shape, data_offsets}, then the raw
// little-endian tensor bytes. Offsets are relative to the start of the data
// section.

#include "embedlens/tensor.hpp"

#include <filesystem>
#include <map>
#include <string>
#include <vector>

namespace embedlens::safetensors {

struct File {
  std::map<std::string, Tensor> tensors;
  std::map<std::string, std::string> metadata;
  // Entries with dtypes this tool does not handle (e.g. U8 masks); names only.
  std::vector<std::string> skipped;
};

File parse(std::string_view bytes, const std::string& origin = "<memory>");
File read(const std::filesystem::path& path);

// Tensors are laid out in name order; the header is space-padded to an
// 8-byte boundary.
std::string serialize(const std::map<std::string, Tensor>& tensors,
                      const std::map<std::string, std::string>& metadata = {});
void write(const std::filesystem::path& path, const std::map<std::string, Tensor>& tensors,
           const std::map<std::string, std::string>& metadata = {});

}  // namespace embedlens::safetensors
