#include "tail/checkpoint.hpp"

#include <openssl/evp.h>

#include <bit>
#include <cstring>
#include <fstream>
#include <iomanip>
#include <memory>
#include <sstream>

#include "tail/errors.hpp"

namespace tail {

namespace fs = std::filesystem;
using nlohmann::json;

static_assert(std::endian::native == std::endian::little, "tensor files are written in host byte order");

namespace {

struct MdDeleter {
  void operator()(EVP_MD_CTX* c) const { EVP_MD_CTX_free(c); }
};

void update_u64(EVP_MD_CTX* ctx, std::uint64_t v) {
  unsigned char b[8];
  for (int i = 0; i < 8; ++i) b[i] = static_cast<unsigned char>(v >> (8 * i));
  EVP_DigestUpdate(ctx, b, sizeof b);
}

}  // namespace

std::string digest(const TensorMap& tensors) {
  std::unique_ptr<EVP_MD_CTX, MdDeleter> ctx(EVP_MD_CTX_new());
  if (!ctx || EVP_DigestInit_ex(ctx.get(), EVP_sha256(), nullptr) != 1) throw std::runtime_error("sha256 init failed");
  for (const auto& [name, t] : tensors) {  // std::map iterates in sorted order
    update_u64(ctx.get(), name.size());
    EVP_DigestUpdate(ctx.get(), name.data(), name.size());
    update_u64(ctx.get(), t.shape().size());
    for (Index d : t.shape()) update_u64(ctx.get(), static_cast<std::uint64_t>(d));
    EVP_DigestUpdate(ctx.get(), t.data(), static_cast<std::size_t>(t.numel()) * sizeof(double));
  }
  unsigned char md[EVP_MAX_MD_SIZE];
  unsigned len = 0;
  EVP_DigestFinal_ex(ctx.get(), md, &len);
  std::ostringstream os;
  for (unsigned i = 0; i < len; ++i) os << std::hex << std::setw(2) << std::setfill('0') << static_cast<int>(md[i]);
  return os.str();
}

void save_tensors(const fs::path& dir, const TensorMap& tensors, const json& meta,
                  const std::map<std::string, json>& tensor_meta) {
  fs::create_directories(dir);
  json manifest = meta.is_object() ? meta : json::object();
  manifest["format_version"] = kFormatVersion;
  json entries = json::array();
  std::ofstream bin(dir / "tensors.bin", std::ios::binary | std::ios::trunc);
  if (!bin) throw DataError("cannot write " + (dir / "tensors.bin").string());
  std::uint64_t offset = 0;
  for (const auto& [name, t] : tensors) {
    json e = {{"name", name}, {"shape", t.shape()}, {"offset", offset}};
    if (auto it = tensor_meta.find(name); it != tensor_meta.end())
      for (const auto& [k, v] : it->second.items()) e[k] = v;
    entries.push_back(std::move(e));
    const auto bytes = static_cast<std::streamsize>(t.numel() * sizeof(double));
    bin.write(reinterpret_cast<const char*>(t.data()), bytes);
    offset += static_cast<std::uint64_t>(bytes);
  }
  if (!bin) throw DataError("short write to " + (dir / "tensors.bin").string());
  manifest["tensors"] = std::move(entries);
  manifest["digest"] = digest(tensors);
  std::ofstream mf(dir / "manifest.json", std::ios::trunc);
  mf << manifest.dump(2) << '\n';
  if (!mf) throw DataError("cannot write " + (dir / "manifest.json").string());
}

LoadedTensors load_tensors(const fs::path& dir) {
  const fs::path mpath = dir / "manifest.json", bpath = dir / "tensors.bin";
  std::ifstream mf(mpath);
  if (!mf) throw DataError("missing " + mpath.string());
  LoadedTensors out;
  try {
    out.manifest = json::parse(mf);
  } catch (const json::exception& e) {
    throw DataError("corrupt manifest " + mpath.string() + ": " + e.what());
  }
  const json& m = out.manifest;
  if (!m.is_object() || !m.contains("format_version") || !m.contains("tensors"))
    throw DataError("corrupt manifest " + mpath.string());
  if (m["format_version"] != kFormatVersion)
    throw DataError("unsupported format version " + m["format_version"].dump() + " in " + mpath.string());

  std::ifstream bin(bpath, std::ios::binary);
  if (!bin) throw DataError("missing " + bpath.string());
  std::vector<char> blob((std::istreambuf_iterator<char>(bin)), std::istreambuf_iterator<char>());
  try {
    for (const json& e : m["tensors"]) {
      const auto name = e.at("name").get<std::string>();
      const auto shape = e.at("shape").get<Shape>();
      const auto offset = e.at("offset").get<std::uint64_t>();
      const Index n = numel(shape);
      const std::uint64_t bytes = static_cast<std::uint64_t>(n) * sizeof(double);
      if (offset + bytes > blob.size()) throw DataError("tensor '" + name + "' runs past end of " + bpath.string());
      Vec v(n);
      std::memcpy(v.data(), blob.data() + offset, bytes);
      out.tensors.emplace(name, Tensor(shape, std::move(v)));
    }
  } catch (const json::exception& e) {
    throw DataError("corrupt manifest " + mpath.string() + ": " + e.what());
  } catch (const ShapeError& e) {
    throw DataError("corrupt manifest " + mpath.string() + ": " + e.what());
  }
  if (m.contains("digest") && m["digest"] != digest(out.tensors))
    throw DataError("content digest mismatch in " + dir.string());
  return out;
}

}  // namespace tail
