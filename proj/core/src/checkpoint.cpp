#include "retiscreen/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <string>

#include "retiscreen/file_util.hpp"

namespace retiscreen::dl {
namespace {

constexpr char kMagic[4] = {'R', 'S', 'C', 'K'};

class Writer {
 public:
  void bytes(const void* data, std::size_t n) {
    const auto* p = static_cast<const std::uint8_t*>(data);
    out_.insert(out_.end(), p, p + n);
  }
  template <typename U>
  void le(U value) {
    using Bits = std::make_unsigned_t<U>;
    auto bits = static_cast<Bits>(value);
    for (std::size_t i = 0; i < sizeof(U); ++i) out_.push_back(static_cast<std::uint8_t>(bits >> (8 * i)));
  }
  void f32(float value) { le(std::bit_cast<std::uint32_t>(value)); }
  std::vector<std::uint8_t> take() { return std::move(out_); }

 private:
  std::vector<std::uint8_t> out_;
};

class Reader {
 public:
  explicit Reader(std::span<const std::uint8_t> data) : data_(data) {}
  std::span<const std::uint8_t> bytes(std::size_t n) {
    if (n > data_.size() - pos_) throw DataError("checkpoint truncated");
    auto s = data_.subspan(pos_, n);
    pos_ += n;
    return s;
  }
  template <typename U>
  U le() {
    const auto s = bytes(sizeof(U));
    std::uint64_t bits = 0;
    for (std::size_t i = 0; i < sizeof(U); ++i) bits |= static_cast<std::uint64_t>(s[i]) << (8 * i);
    return static_cast<U>(bits);
  }
  float f32() { return std::bit_cast<float>(le<std::uint32_t>()); }
  bool done() const { return pos_ == data_.size(); }

 private:
  std::span<const std::uint8_t> data_;
  std::size_t pos_ = 0;
};

}  // namespace

std::vector<std::uint8_t> encode_checkpoint(const MicroCnnModel& model, const nlohmann::json& provenance) {
  nlohmann::json header;
  header["config"] = model.config();
  header["training"] = {{"task", model.meta.task},
                        {"epochs_run", model.meta.epochs_run},
                        {"best_validation_metric", model.meta.best_validation_metric}};
  if (!provenance.is_null()) header["provenance"] = provenance;
  const std::string json = header.dump();

  Writer w;
  w.bytes(kMagic, 4);
  w.le<std::uint16_t>(kCheckpointVersion);
  w.le<std::uint32_t>(static_cast<std::uint32_t>(json.size()));
  w.bytes(json.data(), json.size());
  const auto params = model.parameters();
  w.le<std::uint32_t>(static_cast<std::uint32_t>(params.size()));
  for (const auto& p : params) {
    w.le<std::uint16_t>(static_cast<std::uint16_t>(p.name.size()));
    w.bytes(p.name.data(), p.name.size());
    const auto& shape = p.value.shape();
    w.le<std::uint8_t>(static_cast<std::uint8_t>(shape.size()));
    for (auto d : shape) w.le<std::uint32_t>(static_cast<std::uint32_t>(d));
    for (float v : p.value.values()) w.f32(v);
  }
  return w.take();
}

MicroCnnModel decode_checkpoint(std::span<const std::uint8_t> bytes, nlohmann::json* provenance) {
  Reader r(bytes);
  const auto magic = r.bytes(4);
  if (std::memcmp(magic.data(), kMagic, 4) != 0) throw DataError("not an RSCK checkpoint (bad magic)");
  const auto version = r.le<std::uint16_t>();
  if (version != kCheckpointVersion)
    throw DataError("unsupported checkpoint version " + std::to_string(version));
  const auto json_len = r.le<std::uint32_t>();
  const auto json_bytes = r.bytes(json_len);
  nlohmann::json header;
  try {
    header = nlohmann::json::parse(json_bytes.begin(), json_bytes.end());
  } catch (const nlohmann::json::exception& e) {
    throw DataError(std::string("checkpoint header is not valid JSON: ") + e.what());
  }
  MicroCnnConfig config;
  try {
    config = header.at("config").get<MicroCnnConfig>();
  } catch (const nlohmann::json::exception& e) {
    throw DataError(std::string("checkpoint config invalid: ") + e.what());
  }

  const auto count = r.le<std::uint32_t>();
  std::vector<NamedParameter> params;
  params.reserve(count);
  for (std::uint32_t i = 0; i < count; ++i) {
    const auto name_len = r.le<std::uint16_t>();
    const auto name_bytes = r.bytes(name_len);
    std::string name(name_bytes.begin(), name_bytes.end());
    const auto rank = r.le<std::uint8_t>();
    Shape shape(rank);
    for (auto& d : shape) d = r.le<std::uint32_t>();
    const auto n = element_count(shape);
    if (n > bytes.size()) throw DataError("checkpoint parameter '" + name + "' has an implausible shape");
    std::vector<float> values(n);
    for (auto& v : values) v = r.f32();
    params.push_back({std::move(name), Tensor(std::move(shape), std::move(values), true)});
  }
  if (!r.done()) throw DataError("trailing bytes after checkpoint parameters");

  MicroCnnModel model = [&] {
    try {
      return MicroCnnModel(config, std::move(params));
    } catch (const std::invalid_argument& e) {
      throw DataError(std::string("checkpoint parameters inconsistent with config: ") + e.what());
    }
  }();
  if (header.contains("training")) {
    const auto& t = header["training"];
    model.meta.task = t.value("task", "");
    model.meta.epochs_run = t.value("epochs_run", 0);
    model.meta.best_validation_metric = t.value("best_validation_metric", 0.0);
  }
  if (provenance) *provenance = header.value("provenance", nlohmann::json{});
  return model;
}

void save_checkpoint(const MicroCnnModel& model, const std::filesystem::path& path,
                     const nlohmann::json& provenance) {
  const auto bytes = encode_checkpoint(model, provenance);
  write_file_atomic(path, bytes);
}

MicroCnnModel load_checkpoint(const std::filesystem::path& path, nlohmann::json* provenance) {
  const auto bytes = read_file_bytes(path);
  return decode_checkpoint(bytes, provenance);
}

}  // namespace retiscreen::dl
