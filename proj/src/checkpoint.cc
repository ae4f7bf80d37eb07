#include "rhpo/checkpoint.h"

#include <cstdint>
#include <cstring>
#include <fstream>
#include <vector>

#include "rhpo/errors.h"

namespace rhpo {
namespace {

constexpr char kMagic[8] = {'R', 'H', 'P', 'O', 'C', 'K', 'P', 'T'};
constexpr std::uint32_t kVersion = 1;

template <class T>
void put(std::ostream& os, T v) {
  os.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <class T>
T take(std::istream& is) {
  T v{};
  is.read(reinterpret_cast<char*>(&v), sizeof(T));
  if (!is) throw ContractError("truncated checkpoint");
  return v;
}

}  // namespace

void save_checkpoint(const std::string& path,
                     const std::map<std::string, Tensor>& tensors,
                     const nlohmann::json& meta, const std::string& dtype) {
  if (dtype != "f64" && dtype != "f32")
    throw ContractError("checkpoint dtype must be f64 or f32, got " + dtype);
  const size_t elem = dtype == "f64" ? 8 : 4;

  nlohmann::json manifest;
  manifest["meta"] = meta;
  auto& list = manifest["tensors"] = nlohmann::json::array();
  std::uint64_t offset = 0;
  for (const auto& [name, t] : tensors) {
    list.push_back({{"name", name},
                    {"rows", t.rows()},
                    {"cols", t.cols()},
                    {"rank", t.rank()},
                    {"dtype", dtype},
                    {"offset", offset}});
    offset += static_cast<std::uint64_t>(t.size()) * elem;
  }
  const std::string header = manifest.dump();

  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw ContractError("cannot open checkpoint for writing: " + path);
  os.write(kMagic, sizeof(kMagic));
  put<std::uint32_t>(os, kVersion);
  put<std::uint64_t>(os, header.size());
  os.write(header.data(), static_cast<std::streamsize>(header.size()));
  for (const auto& [name, t] : tensors) {
    (void)name;
    if (dtype == "f64") {
      os.write(reinterpret_cast<const char*>(t.data()),
               static_cast<std::streamsize>(t.size() * 8));
    } else {
      std::vector<float> buf(static_cast<size_t>(t.size()));
      for (std::int64_t i = 0; i < t.size(); ++i) buf[i] = static_cast<float>(t[i]);
      os.write(reinterpret_cast<const char*>(buf.data()),
               static_cast<std::streamsize>(buf.size() * 4));
    }
  }
  if (!os) throw ContractError("checkpoint write failed: " + path);
}

Checkpoint load_checkpoint(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw ContractError("cannot open checkpoint: " + path);
  char magic[8];
  is.read(magic, sizeof(magic));
  if (!is || std::memcmp(magic, kMagic, sizeof(kMagic)) != 0)
    throw ContractError("bad checkpoint magic in " + path);
  const auto version = take<std::uint32_t>(is);
  if (version != kVersion)
    throw ContractError("unsupported checkpoint version " + std::to_string(version));
  const auto header_len = take<std::uint64_t>(is);
  std::string header(header_len, '\0');
  is.read(header.data(), static_cast<std::streamsize>(header_len));
  if (!is) throw ContractError("truncated checkpoint manifest");

  nlohmann::json manifest = nlohmann::json::parse(header);
  Checkpoint ck;
  ck.meta = manifest.value("meta", nlohmann::json::object());

  const std::streampos data_start = is.tellg();
  for (const auto& e : manifest.at("tensors")) {
    const std::string name = e.at("name");
    const int rows = e.at("rows");
    const int cols = e.at("cols");
    const int rank = e.value("rank", 2);
    const std::string dtype = e.at("dtype");
    const std::uint64_t offset = e.at("offset");
    Tensor t(rows, cols, 0.0);
    t.set_rank(rank);
    is.seekg(data_start + static_cast<std::streamoff>(offset));
    if (dtype == "f64") {
      is.read(reinterpret_cast<char*>(t.data()),
              static_cast<std::streamsize>(t.size() * 8));
    } else if (dtype == "f32") {
      std::vector<float> buf(static_cast<size_t>(t.size()));
      is.read(reinterpret_cast<char*>(buf.data()),
              static_cast<std::streamsize>(buf.size() * 4));
      for (std::int64_t i = 0; i < t.size(); ++i) t[i] = buf[i];
    } else {
      throw ContractError("unknown tensor dtype '" + dtype + "' in " + path);
    }
    if (!is) throw ContractError("truncated tensor data for '" + name + "'");
    ck.tensors.emplace(name, std::move(t));
  }
  return ck;
}

}  // namespace rhpo
