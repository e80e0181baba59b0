#include <array>
#include <cstring>
#include <fstream>

#include "caqa/error.hpp"
#include "caqa/model.hpp"

namespace caqa {

namespace {

constexpr std::array<char, 8> kMagic = {'C', 'A', 'Q', 'A', 'C', 'K', 'P', 'T'};

template <typename T>
void put(std::ostream& os, T v) {
  os.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <typename T>
T get(std::istream& is, const std::string& where) {
  T v{};
  if (!is.read(reinterpret_cast<char*>(&v), sizeof(T))) throw FormatError(where, "truncated checkpoint");
  return v;
}

EncoderConfig read_config(std::istream& is) {
  EncoderConfig c;
  c.vocab_size = get<std::uint64_t>(is, "header.vocab_size");
  c.hidden_dim = get<std::uint64_t>(is, "header.hidden_dim");
  c.num_layers = get<std::uint64_t>(is, "header.num_layers");
  c.num_heads = get<std::uint64_t>(is, "header.num_heads");
  c.ffn_dim = get<std::uint64_t>(is, "header.ffn_dim");
  c.max_seq_len = get<std::uint64_t>(is, "header.max_seq_len");
  c.seed = get<std::uint64_t>(is, "header.seed");
  return c;
}

}  // namespace

void save_checkpoint(const QAModel& model, const std::filesystem::path& path) {
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw Error("cannot open " + path.string() + " for writing");
  os.write(kMagic.data(), kMagic.size());
  put<std::uint32_t>(os, kCheckpointVersion);
  const auto& c = model.config();
  for (std::uint64_t v : {c.vocab_size, c.hidden_dim, c.num_layers, c.num_heads, c.ffn_dim, c.max_seq_len,
                          static_cast<std::size_t>(c.seed)})
    put<std::uint64_t>(os, v);
  put<std::uint64_t>(os, model.parameters().size());
  for (const auto& p : model.parameters()) {
    put<std::uint32_t>(os, static_cast<std::uint32_t>(p.name.size()));
    os.write(p.name.data(), static_cast<std::streamsize>(p.name.size()));
    put<std::uint32_t>(os, static_cast<std::uint32_t>(p.value.ndim()));
    for (auto d : p.value.shape()) put<std::uint64_t>(os, d);
    auto v = p.value.values();
    os.write(reinterpret_cast<const char*>(v.data()), static_cast<std::streamsize>(v.size() * sizeof(double)));
  }
  if (!os) throw Error("write failed for " + path.string());
}

QAModel load_checkpoint(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw Error("cannot open checkpoint " + path.string());
  std::array<char, 8> magic{};
  if (!is.read(magic.data(), magic.size()) || magic != kMagic)
    throw FormatError("header.magic", path.string() + " is not a checkpoint");
  const auto version = get<std::uint32_t>(is, "header.version");
  if (version != kCheckpointVersion)
    throw FormatError("header.version", "unsupported checkpoint version " + std::to_string(version));
  QAModel model(read_config(is));
  const auto count = get<std::uint64_t>(is, "header.parameter_count");
  auto& params = model.parameters();
  if (count != params.size())
    throw FormatError("header.parameter_count",
                      "expected " + std::to_string(params.size()) + " arrays, found " + std::to_string(count));
  for (auto& p : params) {
    const auto len = get<std::uint32_t>(is, "parameters");
    std::string name(len, '\0');
    if (!is.read(name.data(), len)) throw FormatError("parameters", "truncated name");
    if (name != p.name) throw FormatError("parameters." + name, "expected parameter " + p.name);
    const auto ndim = get<std::uint32_t>(is, name);
    Shape shape(ndim);
    for (auto& d : shape) d = get<std::uint64_t>(is, name);
    if (shape != p.value.shape())
      throw FormatError("parameters." + name,
                        "shape " + shape_str(shape) + " does not match " + shape_str(p.value.shape()));
    auto v = p.value.mutable_values();
    if (!is.read(reinterpret_cast<char*>(v.data()), static_cast<std::streamsize>(v.size() * sizeof(double))))
      throw FormatError("parameters." + name, "truncated values");
  }
  return model;
}

QAModel load_checkpoint(const std::filesystem::path& path, const EncoderConfig& expected) {
  QAModel model = load_checkpoint(path);
  if (!(model.config() == expected))
    throw InvalidArgument("checkpoint " + path.string() + " was written for a different encoder config");
  return model;
}

}  // namespace caqa
