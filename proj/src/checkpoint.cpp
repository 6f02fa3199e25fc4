#include "mmtumor/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>

#include <nlohmann/json.hpp>

#include "mmtumor/errors.hpp"

namespace mmtumor {

static_assert(std::endian::native == std::endian::little, "checkpoint I/O assumes little-endian");

namespace {

constexpr char kMagic[] = "MMTCKPT\n";
constexpr std::size_t kMagicSize = sizeof kMagic - 1;

template <typename T>
void write_pod(std::ostream& out, T v) {
  out.write(reinterpret_cast<const char*>(&v), sizeof v);
}

template <typename T>
T read_pod(std::istream& in, const std::filesystem::path& path) {
  T v{};
  if (!in.read(reinterpret_cast<char*>(&v), sizeof v)) {
    throw LoadError("truncated checkpoint " + path.string());
  }
  return v;
}

nlohmann::json scaler_json(const ScalerParams& s) {
  return {{"mean", s.mean}, {"stddev", s.stddev}};
}

}  // namespace

void save_checkpoint(const std::filesystem::path& path, Model& model, const CheckpointInfo& info) {
  nlohmann::json header;
  header["spec"] = model.spec();
  header["scaler"] = scaler_json(info.scaler);
  header["fold"] = info.fold;
  header["best_epoch"] = info.best_epoch;
  header["feature_mode"] = info.feature_mode;
  header["feature_levels"] = info.feature_levels;
  header["tamura_max_k"] = info.tamura_max_k;
  header["entropy_source"] = "glcm";
  header["validation_ids"] = info.validation_ids;
  header["metrics"] = info.metrics;
  nlohmann::json table = nlohmann::json::array();
  const auto state = model.state();
  for (const auto& [name, tensor] : state) {
    table.push_back({{"name", name}, {"shape", tensor->shape()}});
  }
  header["tensors"] = table;
  const std::string text = header.dump();

  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw LoadError("cannot write checkpoint " + path.string());
  out.write(kMagic, kMagicSize);
  write_pod<std::uint32_t>(out, kCheckpointVersion);
  write_pod<std::uint64_t>(out, text.size());
  out.write(text.data(), static_cast<std::streamsize>(text.size()));
  for (const auto& entry : state) {
    const Tensor& t = *entry.second;
    out.write(reinterpret_cast<const char*>(t.data()),
              static_cast<std::streamsize>(t.size() * sizeof(double)));
  }
  if (!out) throw LoadError("failed writing checkpoint " + path.string());
}

LoadedCheckpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw LoadError("cannot open checkpoint " + path.string());
  char magic[kMagicSize];
  if (!in.read(magic, kMagicSize) || std::memcmp(magic, kMagic, kMagicSize) != 0) {
    throw LoadError(path.string() + " is not a checkpoint");
  }
  const auto version = read_pod<std::uint32_t>(in, path);
  if (version != kCheckpointVersion) {
    throw LoadError("unsupported checkpoint version " + std::to_string(version) + " in " + path.string());
  }
  const auto header_size = read_pod<std::uint64_t>(in, path);
  if (header_size > (std::uint64_t{1} << 30)) throw LoadError("corrupt checkpoint header in " + path.string());
  std::string text(header_size, '\0');
  if (!in.read(text.data(), static_cast<std::streamsize>(header_size))) {
    throw LoadError("truncated checkpoint " + path.string());
  }

  nlohmann::json header;
  ModelSpec spec;
  CheckpointInfo info;
  try {
    header = nlohmann::json::parse(text);
    spec = header.at("spec").get<ModelSpec>();
    header.at("scaler").at("mean").get_to(info.scaler.mean);
    header.at("scaler").at("stddev").get_to(info.scaler.stddev);
    header.at("fold").get_to(info.fold);
    header.at("best_epoch").get_to(info.best_epoch);
    header.at("feature_mode").get_to(info.feature_mode);
    header.at("feature_levels").get_to(info.feature_levels);
    header.at("tamura_max_k").get_to(info.tamura_max_k);
    header.at("validation_ids").get_to(info.validation_ids);
    header.at("metrics").get_to(info.metrics);
  } catch (const nlohmann::json::exception& e) {
    throw LoadError("bad checkpoint header in " + path.string() + ": " + e.what());
  }

  LoadedCheckpoint loaded{Model(spec, 0), std::move(info)};
  const auto state = loaded.model.state();
  const auto& table = header.at("tensors");
  if (table.size() != state.size()) {
    throw SchemaError("checkpoint " + path.string() + " holds " + std::to_string(table.size()) +
                      " tensors, the spec needs " + std::to_string(state.size()));
  }
  for (std::size_t i = 0; i < state.size(); ++i) {
    const auto& [name, tensor] = state[i];
    const auto stored_name = table[i].at("name").get<std::string>();
    const auto stored_shape = table[i].at("shape").get<std::vector<std::size_t>>();
    if (stored_name != name || stored_shape != tensor->shape()) {
      throw SchemaError("checkpoint tensor " + stored_name + " does not match model tensor " + name);
    }
    if (!in.read(reinterpret_cast<char*>(tensor->data()),
                 static_cast<std::streamsize>(tensor->size() * sizeof(double)))) {
      throw LoadError("truncated checkpoint " + path.string());
    }
  }
  return loaded;
}

}  // namespace mmtumor
