#include "embedlens/safetensors.hpp"

#include "embedlens/error.hpp"
#include "embedlens/io.hpp"

#include <json.hpp>

#include <bit>
#include <cstring>

namespace embedlens::safetensors {

static_assert(std::endian::native == std::endian::little, "little-endian host required");

using json = nlohmann::json;

namespace {

template <typename T>
std::vector<T> copy_elements(std::string_view data, std::size_t begin, std::size_t count) {
  std::vector<T> out(count);
  std::memcpy(out.data(), data.data() + begin, count * sizeof(T));
  return out;
}

}  // namespace

File parse(std::string_view bytes, const std::string& origin) {
  if (bytes.size() < 8) throw Error("checkpoint", "file", origin, "truncated safetensors header");
  std::uint64_t header_len = 0;
  std::memcpy(&header_len, bytes.data(), 8);
  if (header_len > bytes.size() - 8)
    throw Error("checkpoint", "header_length", std::to_string(header_len),
                "header length exceeds file size in " + origin);

  json header;
  try {
    header = json::parse(bytes.substr(8, header_len));
  } catch (const json::exception& e) {
    throw Error("checkpoint", "file", origin, std::string("malformed JSON header: ") + e.what());
  }
  if (!header.is_object()) throw Error("checkpoint", "file", origin, "header is not a JSON object");

  const std::string_view data = bytes.substr(8 + header_len);
  File file;
  for (const auto& [name, info] : header.items()) {
    if (name == "__metadata__") {
      for (const auto& [k, v] : info.items())
        file.metadata[k] = v.is_string() ? v.get<std::string>() : v.dump();
      continue;
    }
    try {
      const auto dtype = info.at("dtype").get<std::string>();
      const auto shape = info.at("shape").get<std::vector<std::int64_t>>();
      const auto offsets = info.at("data_offsets").get<std::vector<std::uint64_t>>();
      if (offsets.size() != 2 || offsets[0] > offsets[1] || offsets[1] > data.size())
        throw Error("checkpoint", "data_offsets", name, "offsets out of range in " + origin);
      if (dtype != "F32" && dtype != "F64") {
        file.skipped.push_back(name);
        continue;
      }
      const DType dt = dtype_from_name(dtype);
      std::size_t count = 1;
      for (auto s : shape) count *= static_cast<std::size_t>(s);
      if (shape.empty()) count = 1;
      if (offsets[1] - offsets[0] != count * dtype_size(dt))
        throw Error("checkpoint", "data_offsets", name,
                    "byte range does not match shape " + shape_string(shape) + " in " + origin);
      auto dims = shape.empty() ? std::vector<std::int64_t>{1} : shape;
      if (dt == DType::f32)
        file.tensors.emplace(name, Tensor(dims, copy_elements<float>(data, offsets[0], count)));
      else
        file.tensors.emplace(name, Tensor(dims, copy_elements<double>(data, offsets[0], count)));
    } catch (const json::exception& e) {
      throw Error("checkpoint", "tensor", name, std::string("malformed header entry: ") + e.what());
    }
  }
  return file;
}

File read(const std::filesystem::path& path) { return parse(read_file(path), path.string()); }

std::string serialize(const std::map<std::string, Tensor>& tensors,
                      const std::map<std::string, std::string>& metadata) {
  json header = json::object();
  if (!metadata.empty()) header["__metadata__"] = metadata;
  std::uint64_t offset = 0;
  for (const auto& [name, t] : tensors) {
    const auto n = t.bytes().size();
    header[name] = {{"dtype", dtype_name(t.dtype())},
                    {"shape", t.shape()},
                    {"data_offsets", {offset, offset + n}}};
    offset += n;
  }
  std::string header_text = header.dump();
  while ((8 + header_text.size()) % 8 != 0) header_text.push_back(' ');

  std::string out;
  out.reserve(8 + header_text.size() + offset);
  const std::uint64_t len = header_text.size();
  out.append(reinterpret_cast<const char*>(&len), 8);
  out += header_text;
  for (const auto& [name, t] : tensors) {
    auto b = t.bytes();
    out.append(reinterpret_cast<const char*>(b.data()), b.size());
  }
  return out;
}

void write(const std::filesystem::path& path, const std::map<std::string, Tensor>& tensors,
           const std::map<std::string, std::string>& metadata) {
  write_file_atomic(path, serialize(tensors, metadata));
}

}  // namespace embedlens::safetensors
