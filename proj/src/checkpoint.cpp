#include "selmask/checkpoint.hpp"

#include <array>
#include <cstring>
#include <fstream>

#include "selmask/error.hpp"

namespace selmask {

namespace {

constexpr std::array<char, 8> kMagic = {'S', 'E', 'L', 'M', 'C', 'K', 'P', 'T'};
constexpr std::uint32_t kFormatVersion = 1;

template <typename T>
void write_pod(std::ostream& out, const T& value) {
  out.write(reinterpret_cast<const char*>(&value), sizeof(T));
}

template <typename T>
T read_pod(std::istream& in) {
  T value{};
  in.read(reinterpret_cast<char*>(&value), sizeof(T));
  if (!in) throw ConfigError("checkpoint: truncated file");
  return value;
}

void write_tensors(std::ostream& out, const Parameters& p) {
  for (const auto& t : p.tensors())
    out.write(reinterpret_cast<const char*>(t.tensor->data()),
              static_cast<std::streamsize>(sizeof(double) * static_cast<std::size_t>(t.tensor->size())));
}

void read_tensors(std::istream& in, Parameters& p) {
  for (auto& t : p.tensors()) {
    in.read(reinterpret_cast<char*>(t.tensor->data()),
            static_cast<std::streamsize>(sizeof(double) * static_cast<std::size_t>(t.tensor->size())));
    if (!in) throw ConfigError("checkpoint: truncated tensor data for " + t.name);
  }
}

}  // namespace

nlohmann::json Provenance::to_json() const {
  return {{"stage", stage}, {"step", step}, {"seed", seed}, {"policy", policy}};
}

Provenance Provenance::from_json(const nlohmann::json& j) {
  Provenance p;
  p.stage = j.value("stage", "");
  p.step = j.value("step", std::uint64_t{0});
  p.seed = j.value("seed", std::uint64_t{0});
  p.policy = j.value("policy", "");
  return p;
}

void save_checkpoint(const Checkpoint& checkpoint, const std::filesystem::path& path) {
  const Parameters& params = checkpoint.params;
  nlohmann::json header;
  header["config"] = params.config.to_json();
  header["provenance"] = checkpoint.provenance.to_json();
  header["tensors"] = nlohmann::json::array();
  for (const auto& t : params.tensors())
    header["tensors"].push_back({{"name", t.name}, {"rows", t.tensor->rows()}, {"cols", t.tensor->cols()}});
  header["optimizer"] = checkpoint.optimizer.has_value();
  header["optimizer_step"] = checkpoint.optimizer ? checkpoint.optimizer->step : 0;
  const std::string text = header.dump();

  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  const auto tmp = std::filesystem::path(path.string() + ".tmp");
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw ConfigError("checkpoint: cannot write " + path.string());
    out.write(kMagic.data(), kMagic.size());
    write_pod(out, kFormatVersion);
    write_pod(out, static_cast<std::uint64_t>(text.size()));
    out.write(text.data(), static_cast<std::streamsize>(text.size()));
    write_tensors(out, params);
    if (checkpoint.optimizer) {
      write_tensors(out, checkpoint.optimizer->m);
      write_tensors(out, checkpoint.optimizer->v);
    }
    if (!out) throw ConfigError("checkpoint: write failed for " + path.string());
  }
  std::filesystem::rename(tmp, path);
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ConfigError("checkpoint: cannot open " + path.string());
  std::array<char, 8> magic{};
  in.read(magic.data(), magic.size());
  if (!in || magic != kMagic) throw ConfigError("checkpoint: " + path.string() + " is not a selmask checkpoint");
  const auto version = read_pod<std::uint32_t>(in);
  if (version != kFormatVersion)
    throw ConfigError("checkpoint: format version " + std::to_string(version) + " unsupported (expected " +
                      std::to_string(kFormatVersion) + ")");
  const auto header_len = read_pod<std::uint64_t>(in);
  std::string text(header_len, '\0');
  in.read(text.data(), static_cast<std::streamsize>(header_len));
  if (!in) throw ConfigError("checkpoint: truncated header");
  const auto header = nlohmann::json::parse(text);

  Checkpoint ck;
  const auto config = ModelConfig::from_json(header.at("config"));
  ck.params = init_parameters(config);
  ck.provenance = Provenance::from_json(header.at("provenance"));
  const auto& shapes = header.at("tensors");
  auto tensors = ck.params.tensors();
  if (shapes.size() != tensors.size()) throw ConfigError("checkpoint: tensor count does not match config");
  for (std::size_t i = 0; i < tensors.size(); ++i) {
    if (shapes[i].at("name") != tensors[i].name || shapes[i].at("rows") != tensors[i].tensor->rows() ||
        shapes[i].at("cols") != tensors[i].tensor->cols())
      throw ConfigError("checkpoint: tensor " + tensors[i].name + " does not match config");
  }
  read_tensors(in, ck.params);
  if (header.value("optimizer", false)) {
    OptimizerState opt = make_optimizer_state(ck.params);
    read_tensors(in, opt.m);
    read_tensors(in, opt.v);
    opt.step = header.value("optimizer_step", std::uint64_t{0});
    ck.optimizer = std::move(opt);
  }
  return ck;
}

Checkpoint load_checkpoint(const std::filesystem::path& path, const ModelConfig& expected) {
  Checkpoint ck = load_checkpoint(path);
  if (!(ck.params.config == expected))
    throw ConfigError("checkpoint: config mismatch for " + path.string() + ": stored " +
                      ck.params.config.to_json().dump() + ", expected " + expected.to_json().dump());
  return ck;
}

void require_vocab_compatible(const ModelConfig& config, std::size_t vocab_size, const std::string& context) {
  if (config.vocab_size != vocab_size)
    throw ConfigError(context + ": checkpoint vocab_size " + std::to_string(config.vocab_size) +
                      " does not match vocabulary of size " + std::to_string(vocab_size));
}

}  // namespace selmask
