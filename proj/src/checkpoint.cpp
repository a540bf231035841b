#include "acvae/checkpoint.hpp"

#include <cstring>
#include <fstream>

#include "acvae/errors.hpp"

namespace acvae::io {

void ContainerWriter::add(const std::string& name, const std::string& dtype,
                          std::vector<int64_t> shape, const void* data, size_t bytes) {
  nlohmann::json b;
  b["name"] = name;
  b["dtype"] = dtype;
  b["shape"] = shape;
  b["bytes"] = bytes;
  buffers_.push_back(std::move(b));
  size_t off = blob_.size();
  blob_.resize(off + bytes);
  if (bytes) std::memcpy(blob_.data() + off, data, bytes);
}

void ContainerWriter::write(const std::string& path) const {
  nlohmann::json header = meta_;
  header["buffers"] = buffers_;
  std::string hs = header.dump();
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw ParseError("cannot open for writing: " + path);
  f.write(kMagic, sizeof(kMagic));
  uint32_t hlen = uint32_t(hs.size());
  f.write(reinterpret_cast<const char*>(&hlen), sizeof(hlen));
  f.write(hs.data(), std::streamsize(hs.size()));
  f.write(reinterpret_cast<const char*>(blob_.data()), std::streamsize(blob_.size()));
  if (!f) throw ParseError("write failed: " + path);
}

ContainerReader::ContainerReader(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw ParseError("cannot open: " + path);
  char magic[6];
  if (!f.read(magic, 6) || std::memcmp(magic, kMagic, 6) != 0)
    throw ParseError("not an ACVAE1 container: " + path);
  uint32_t hlen = 0;
  if (!f.read(reinterpret_cast<char*>(&hlen), sizeof(hlen)))
    throw ParseError("truncated container header: " + path);
  std::string hs(hlen, '\0');
  if (!f.read(hs.data(), hlen)) throw ParseError("truncated container header: " + path);
  try {
    meta_ = nlohmann::json::parse(hs);
  } catch (const nlohmann::json::exception& e) {
    throw ParseError("bad container header in " + path + ": " + e.what());
  }
  size_t total = 0;
  for (const auto& b : meta_.at("buffers")) {
    Entry e;
    e.dtype = b.at("dtype").get<std::string>();
    e.shape = b.at("shape").get<std::vector<int64_t>>();
    e.bytes = b.at("bytes").get<size_t>();
    e.offset = total;
    total += e.bytes;
    entries_.emplace_back(b.at("name").get<std::string>(), std::move(e));
  }
  blob_.resize(total);
  if (total && !f.read(reinterpret_cast<char*>(blob_.data()), std::streamsize(total)))
    throw ParseError("truncated container payload: " + path);
  meta_.erase("buffers");
}

bool ContainerReader::has(const std::string& name) const {
  for (const auto& [n, e] : entries_)
    if (n == name) return true;
  return false;
}

const ContainerReader::Entry& ContainerReader::entry(const std::string& name,
                                                     const std::string& want_dtype) const {
  for (const auto& [n, e] : entries_) {
    if (n == name) {
      if (!want_dtype.empty() && e.dtype != want_dtype)
        throw ParseError("buffer '" + name + "' has dtype " + e.dtype + ", wanted " + want_dtype);
      return e;
    }
  }
  throw ParseError("container has no buffer named '" + name + "'");
}

std::vector<int64_t> ContainerReader::shape(const std::string& name) const {
  return entry(name, "").shape;
}

std::string ContainerReader::dtype(const std::string& name) const { return entry(name, "").dtype; }

template <class T>
static std::vector<T> extract(const std::vector<std::byte>& blob, size_t off, size_t bytes) {
  std::vector<T> out(bytes / sizeof(T));
  if (bytes) std::memcpy(out.data(), blob.data() + off, bytes);
  return out;
}

std::vector<float> ContainerReader::get_f32(const std::string& name) const {
  const auto& e = entry(name, "f32");
  return extract<float>(blob_, e.offset, e.bytes);
}
std::vector<double> ContainerReader::get_f64(const std::string& name) const {
  const auto& e = entry(name, "f64");
  return extract<double>(blob_, e.offset, e.bytes);
}
std::vector<int32_t> ContainerReader::get_i32(const std::string& name) const {
  const auto& e = entry(name, "i32");
  return extract<int32_t>(blob_, e.offset, e.bytes);
}
std::vector<int64_t> ContainerReader::get_i64(const std::string& name) const {
  const auto& e = entry(name, "i64");
  return extract<int64_t>(blob_, e.offset, e.bytes);
}

}  // namespace acvae::io
