#include "transmpc/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>

#include <nlohmann/json.hpp>

namespace transmpc {

namespace {

constexpr char kMagic[8] = {'T', 'M', 'P', 'C', 'C', 'K', 'P', '1'};

static_assert(sizeof(double) == 8, "64-bit IEEE doubles required");

std::uint64_t to_le64(std::uint64_t v) {
  if constexpr (std::endian::native == std::endian::little) return v;
  std::uint64_t out = 0;
  for (int i = 0; i < 8; ++i) out = (out << 8) | ((v >> (8 * i)) & 0xff);
  return out;
}

void write_doubles_le(std::ofstream& os, const std::vector<double>& v) {
  if constexpr (std::endian::native == std::endian::little) {
    os.write(reinterpret_cast<const char*>(v.data()),
             static_cast<std::streamsize>(v.size() * sizeof(double)));
  } else {
    for (double d : v) {
      std::uint64_t bits;
      std::memcpy(&bits, &d, 8);
      bits = to_le64(bits);
      os.write(reinterpret_cast<const char*>(&bits), 8);
    }
  }
}

void read_doubles_le(std::ifstream& is, std::vector<double>& v) {
  if constexpr (std::endian::native == std::endian::little) {
    is.read(reinterpret_cast<char*>(v.data()),
            static_cast<std::streamsize>(v.size() * sizeof(double)));
  } else {
    for (double& d : v) {
      std::uint64_t bits = 0;
      is.read(reinterpret_cast<char*>(&bits), 8);
      bits = to_le64(bits);
      std::memcpy(&d, &bits, 8);
    }
  }
}

}  // namespace

const ad::Tensor* Checkpoint::find(const std::string& name) const {
  for (const auto& [n, t] : entries)
    if (n == name) return &t;
  return nullptr;
}

void save_checkpoint(const Checkpoint& ckpt, const std::string& path) {
  nlohmann::json manifest;
  manifest["meta"] = nlohmann::json::parse(ckpt.meta_json);
  auto& list = manifest["entries"] = nlohmann::json::array();
  std::uint64_t offset = 0;
  for (const auto& [name, t] : ckpt.entries) {
    nlohmann::json e;
    e["name"] = name;
    e["shape"] = t.shape;
    e["offset"] = offset;
    list.push_back(std::move(e));
    offset += t.numel() * sizeof(double);
  }
  const std::string text = manifest.dump();

  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw std::runtime_error("checkpoint: cannot open " + path);
  os.write(kMagic, 8);
  const std::uint64_t len = to_le64(text.size());
  os.write(reinterpret_cast<const char*>(&len), 8);
  os.write(text.data(), static_cast<std::streamsize>(text.size()));
  for (const auto& [name, t] : ckpt.entries) write_doubles_le(os, t.data);
  if (!os) throw std::runtime_error("checkpoint: write failed for " + path);
}

Checkpoint load_checkpoint(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("checkpoint: cannot open " + path);
  char magic[8];
  is.read(magic, 8);
  if (!is || std::memcmp(magic, kMagic, 8) != 0)
    throw std::runtime_error("checkpoint: bad magic in " + path);
  std::uint64_t len = 0;
  is.read(reinterpret_cast<char*>(&len), 8);
  len = to_le64(len);
  std::string text(len, '\0');
  is.read(text.data(), static_cast<std::streamsize>(len));
  if (!is) throw std::runtime_error("checkpoint: truncated manifest in " + path);
  const nlohmann::json manifest = nlohmann::json::parse(text);

  const std::streamoff payload_start = static_cast<std::streamoff>(16 + len);
  Checkpoint ckpt;
  ckpt.meta_json = manifest.value("meta", nlohmann::json::object()).dump();
  for (const auto& e : manifest.at("entries")) {
    ad::Shape shape = e.at("shape").get<ad::Shape>();
    ad::Tensor t = ad::Tensor::zeros(shape);
    is.seekg(payload_start +
             static_cast<std::streamoff>(e.at("offset").get<std::uint64_t>()));
    read_doubles_le(is, t.data);
    if (!is) throw std::runtime_error("checkpoint: truncated payload in " + path);
    ckpt.entries.emplace_back(e.at("name").get<std::string>(), std::move(t));
  }
  return ckpt;
}

}  // namespace transmpc
