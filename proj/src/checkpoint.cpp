// SPDX-License-Identifier: Apache-2.0
#include "canet/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <sstream>

#include "canet/errors.hpp"

namespace canet {

static_assert(std::endian::native == std::endian::little, "checkpoint codec assumes little-endian");

namespace {

constexpr char kMagic[4] = {'C', 'A', 'N', 'T'};
constexpr std::uint8_t kDtypeF64 = 1;

template <typename T>
void put(std::string& out, T v) {
  char buf[sizeof(T)];
  std::memcpy(buf, &v, sizeof(T));
  out.append(buf, sizeof(T));
}

class Reader {
 public:
  explicit Reader(const std::string& bytes) : bytes_(bytes) {}

  template <typename T>
  T get(const char* what) {
    need(sizeof(T), what);
    T v;
    std::memcpy(&v, bytes_.data() + pos_, sizeof(T));
    pos_ += sizeof(T);
    return v;
  }

  std::string get_bytes(std::size_t n, const char* what) {
    need(n, what);
    std::string s = bytes_.substr(pos_, n);
    pos_ += n;
    return s;
  }

  void get_doubles(std::vector<double>& out, std::size_t n, const char* what) {
    if (n > (bytes_.size() - pos_) / sizeof(double)) {
      throw FormatError(std::string("checkpoint truncated in ") + what);
    }
    out.resize(n);
    std::memcpy(out.data(), bytes_.data() + pos_, n * sizeof(double));
    pos_ += n * sizeof(double);
  }

  bool done() const { return pos_ == bytes_.size(); }

 private:
  void need(std::size_t n, const char* what) const {
    if (bytes_.size() - pos_ < n) throw FormatError(std::string("checkpoint truncated in ") + what);
  }

  const std::string& bytes_;
  std::size_t pos_ = 0;
};

}  // namespace

const StoredTensor& CheckpointData::tensor(const std::string& name) const {
  for (const auto& t : tensors) {
    if (t.name == name) return t;
  }
  throw FormatError("checkpoint has no tensor " + name);
}

bool CheckpointData::has_tensor(const std::string& name) const {
  for (const auto& t : tensors) {
    if (t.name == name) return true;
  }
  return false;
}

std::string encode_checkpoint(const CheckpointData& data) {
  std::string out(kMagic, 4);
  put<std::uint32_t>(out, kCheckpointVersion);
  const std::string json = data.meta.dump();
  put<std::uint32_t>(out, static_cast<std::uint32_t>(json.size()));
  out += json;
  put<std::uint32_t>(out, static_cast<std::uint32_t>(data.tensors.size()));
  for (const auto& t : data.tensors) {
    if (t.name.size() > 0xFFFF) throw FormatError("tensor name too long: " + t.name.substr(0, 40));
    if (t.shape.size() > 0xFF) throw FormatError("tensor rank too large: " + t.name);
    if (shape_numel(t.shape) != t.values.size()) {
      throw FormatError("tensor " + t.name + " has " + std::to_string(t.values.size()) +
                        " values for shape " + shape_string(t.shape));
    }
    put<std::uint16_t>(out, static_cast<std::uint16_t>(t.name.size()));
    out += t.name;
    put<std::uint8_t>(out, kDtypeF64);
    put<std::uint8_t>(out, static_cast<std::uint8_t>(t.shape.size()));
    for (std::size_t d : t.shape) put<std::uint64_t>(out, d);
    out.append(reinterpret_cast<const char*>(t.values.data()), t.values.size() * sizeof(double));
  }
  put<std::uint64_t>(out, data.rng_state);
  put<std::uint32_t>(out, data.epoch);
  return out;
}

CheckpointData decode_checkpoint(const std::string& bytes) {
  Reader in(bytes);
  if (in.get_bytes(4, "magic") != std::string(kMagic, 4)) throw FormatError("not a checkpoint (bad magic)");
  const auto version = in.get<std::uint32_t>("version");
  if (version != kCheckpointVersion) {
    throw FormatError("unsupported checkpoint version " + std::to_string(version));
  }
  CheckpointData data;
  const auto json_len = in.get<std::uint32_t>("config length");
  try {
    data.meta = nlohmann::json::parse(in.get_bytes(json_len, "config"));
  } catch (const nlohmann::json::parse_error& e) {
    throw FormatError(std::string("checkpoint config is not valid JSON: ") + e.what());
  }
  const auto count = in.get<std::uint32_t>("tensor count");
  data.tensors.reserve(count);
  for (std::uint32_t i = 0; i < count; ++i) {
    StoredTensor t;
    const auto name_len = in.get<std::uint16_t>("tensor name length");
    t.name = in.get_bytes(name_len, "tensor name");
    const auto dtype = in.get<std::uint8_t>("dtype");
    if (dtype != kDtypeF64) throw FormatError("tensor " + t.name + " has unsupported dtype " + std::to_string(dtype));
    const auto rank = in.get<std::uint8_t>("rank");
    std::size_t numel = 1;
    for (std::uint8_t r = 0; r < rank; ++r) {
      const auto d = in.get<std::uint64_t>("dims");
      t.shape.push_back(static_cast<std::size_t>(d));
      numel *= static_cast<std::size_t>(d);
    }
    in.get_doubles(t.values, numel, "tensor data");
    data.tensors.push_back(std::move(t));
  }
  data.rng_state = in.get<std::uint64_t>("rng state");
  data.epoch = in.get<std::uint32_t>("epoch");
  if (!in.done()) throw FormatError("trailing bytes after checkpoint");
  return data;
}

void write_checkpoint(const std::filesystem::path& path, const CheckpointData& data) {
  const std::string bytes = encode_checkpoint(data);
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write " + path.string());
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw IoError("failed writing " + path.string());
}

CheckpointData read_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  std::ostringstream buffer;
  buffer << in.rdbuf();
  return decode_checkpoint(buffer.str());
}

}  // namespace canet
