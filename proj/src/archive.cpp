#include "hapnet/archive.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <iterator>

namespace hapnet {

namespace {

constexpr char kMagic[8] = {'H', 'A', 'P', 'N', 'E', 'T', 'A', 'R'};
constexpr std::uint32_t kVersion = 1;
constexpr std::uint8_t kFloat64 = 1;

static_assert(std::endian::native == std::endian::little, "archive codec assumes a little-endian host");

class Writer {
 public:
  template <typename T>
  void put(T v) {
    const auto* p = reinterpret_cast<const std::uint8_t*>(&v);
    bytes.insert(bytes.end(), p, p + sizeof(T));
  }
  void put_bytes(const void* data, std::size_t n) {
    const auto* p = static_cast<const std::uint8_t*>(data);
    bytes.insert(bytes.end(), p, p + n);
  }
  std::vector<std::uint8_t> bytes;
};

class Reader {
 public:
  explicit Reader(const std::vector<std::uint8_t>& b) : bytes_(b) {}
  template <typename T>
  T get() {
    T v;
    get_bytes(&v, sizeof(T));
    return v;
  }
  void get_bytes(void* out, std::size_t n) {
    if (n > bytes_.size() - pos_) throw CheckpointError("archive truncated");
    std::memcpy(out, bytes_.data() + pos_, n);
    pos_ += n;
  }
  bool done() const { return pos_ == bytes_.size(); }

 private:
  const std::vector<std::uint8_t>& bytes_;
  std::size_t pos_ = 0;
};

}  // namespace

std::vector<std::uint8_t> encode_archive(const Archive& archive) {
  Writer w;
  w.put_bytes(kMagic, sizeof(kMagic));
  w.put(kVersion);
  const std::string meta = archive.meta.dump();
  w.put(static_cast<std::uint64_t>(meta.size()));
  w.put_bytes(meta.data(), meta.size());
  w.put(static_cast<std::uint64_t>(archive.arrays.size()));
  for (const auto& [name, arr] : archive.arrays) {
    if (ag::shape_numel(arr.shape) != arr.data.size()) {
      throw CheckpointError("array '" + name + "' data does not match its shape");
    }
    w.put(static_cast<std::uint32_t>(name.size()));
    w.put_bytes(name.data(), name.size());
    w.put(kFloat64);
    w.put(static_cast<std::uint32_t>(arr.shape.size()));
    for (auto d : arr.shape) w.put(static_cast<std::uint64_t>(d));
    w.put_bytes(arr.data.data(), arr.data.size() * sizeof(double));
  }
  return std::move(w.bytes);
}

Archive decode_archive(const std::vector<std::uint8_t>& bytes) {
  Reader r(bytes);
  char magic[8];
  r.get_bytes(magic, sizeof(magic));
  if (std::memcmp(magic, kMagic, sizeof(kMagic)) != 0) throw CheckpointError("not a named-array archive");
  if (auto v = r.get<std::uint32_t>(); v != kVersion) {
    throw CheckpointError("unsupported archive version " + std::to_string(v));
  }
  Archive archive;
  const auto meta_len = r.get<std::uint64_t>();
  std::string meta(meta_len, '\0');
  r.get_bytes(meta.data(), meta_len);
  try {
    archive.meta = nlohmann::json::parse(meta);
  } catch (const nlohmann::json::exception& e) {
    throw CheckpointError(std::string("archive metadata is not valid JSON: ") + e.what());
  }
  const auto count = r.get<std::uint64_t>();
  for (std::uint64_t i = 0; i < count; ++i) {
    const auto name_len = r.get<std::uint32_t>();
    std::string name(name_len, '\0');
    r.get_bytes(name.data(), name_len);
    if (r.get<std::uint8_t>() != kFloat64) throw CheckpointError("array '" + name + "' has unsupported dtype");
    NamedArray arr;
    const auto ndim = r.get<std::uint32_t>();
    for (std::uint32_t d = 0; d < ndim; ++d) arr.shape.push_back(static_cast<std::size_t>(r.get<std::uint64_t>()));
    arr.data.resize(ag::shape_numel(arr.shape));
    r.get_bytes(arr.data.data(), arr.data.size() * sizeof(double));
    if (!archive.arrays.emplace(std::move(name), std::move(arr)).second) {
      throw CheckpointError("duplicate array name in archive");
    }
  }
  if (!r.done()) throw CheckpointError("trailing bytes after archive");
  return archive;
}

void save_archive(const Archive& archive, const std::filesystem::path& path) {
  const auto bytes = encode_archive(archive);
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw CheckpointError("cannot open " + path.string() + " for writing");
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw CheckpointError("failed writing " + path.string());
}

Archive load_archive(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw CheckpointError("cannot open checkpoint " + path.string());
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return decode_archive(bytes);
}

}  // namespace hapnet
