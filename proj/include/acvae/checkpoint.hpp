#pragma once

// ACVAE1 container: 6-byte magic "ACVAE1", little-endian u32 header length,
// JSON header, then raw little-endian buffers concatenated in header order.
// Used for both model checkpoints and preprocessed dataset caches.

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

namespace acvae::io {

inline constexpr char kMagic[6] = {'A', 'C', 'V', 'A', 'E', '1'};

class ContainerWriter {
 public:
  explicit ContainerWriter(nlohmann::json meta) : meta_(std::move(meta)) {}

  void add(const std::string& name, const std::string& dtype, std::vector<int64_t> shape,
           const void* data, size_t bytes);

  void add_f32(const std::string& name, std::vector<int64_t> shape, std::span<const float> v) {
    add(name, "f32", std::move(shape), v.data(), v.size() * sizeof(float));
  }
  void add_f64(const std::string& name, std::vector<int64_t> shape, std::span<const double> v) {
    add(name, "f64", std::move(shape), v.data(), v.size() * sizeof(double));
  }
  void add_i32(const std::string& name, std::vector<int64_t> shape, std::span<const int32_t> v) {
    add(name, "i32", std::move(shape), v.data(), v.size() * sizeof(int32_t));
  }
  void add_i64(const std::string& name, std::vector<int64_t> shape, std::span<const int64_t> v) {
    add(name, "i64", std::move(shape), v.data(), v.size() * sizeof(int64_t));
  }

  void write(const std::string& path) const;

 private:
  nlohmann::json meta_;
  nlohmann::json buffers_ = nlohmann::json::array();
  std::vector<std::byte> blob_;
};

class ContainerReader {
 public:
  explicit ContainerReader(const std::string& path);  // throws ParseError on bad magic/truncation

  const nlohmann::json& meta() const { return meta_; }
  bool has(const std::string& name) const;
  std::vector<int64_t> shape(const std::string& name) const;
  std::string dtype(const std::string& name) const;

  std::vector<float> get_f32(const std::string& name) const;
  std::vector<double> get_f64(const std::string& name) const;
  std::vector<int32_t> get_i32(const std::string& name) const;
  std::vector<int64_t> get_i64(const std::string& name) const;

 private:
  struct Entry {
    std::string dtype;
    std::vector<int64_t> shape;
    size_t offset = 0, bytes = 0;
  };
  const Entry& entry(const std::string& name, const std::string& want_dtype) const;

  nlohmann::json meta_;
  std::vector<std::pair<std::string, Entry>> entries_;
  std::vector<std::byte> blob_;
};

}  // namespace acvae::io
