#include <fstream>
#include <sstream>

#include "json.hpp"
#include "spodnet/models.hpp"

namespace spodnet {

using nlohmann::json;

namespace {

const char* tape_mode_name(TapeMode m) { return m == TapeMode::Full ? "full" : "detached"; }

}  // namespace

std::string checkpoint_to_string(const Checkpoint& ckpt) {
  ModelParams params = ckpt.params;
  json j;
  j["format"] = kCheckpointFormat;
  j["variant"] = to_string(params.variant);
  j["p"] = params.p;
  j["seed"] = ckpt.seed;
  j["zeta"] = ckpt.layer.zeta;
  j["num_layers"] = ckpt.layer.num_layers;
  j["stabilize"] = ckpt.layer.stabilize;
  j["tape_mode"] = tape_mode_name(ckpt.layer.tape_mode);
  j["lambda_scale"] = params.lambda_scale;
  json blocks = json::array();
  for (const auto& ref : params.named()) {
    // row-major values
    std::vector<double> values;
    values.reserve(static_cast<std::size_t>(ref.rows * ref.cols));
    const auto m = ref.map();
    for (Eigen::Index r = 0; r < ref.rows; ++r) {
      for (Eigen::Index c = 0; c < ref.cols; ++c) values.push_back(m(r, c));
    }
    blocks.push_back({{"name", ref.name}, {"shape", {ref.rows, ref.cols}}, {"values", values}});
  }
  j["params"] = std::move(blocks);
  return j.dump(1);
}

Checkpoint checkpoint_from_string(const std::string& text) {
  json j;
  try {
    j = json::parse(text);
  } catch (const json::exception& e) {
    throw IoError(std::string("checkpoint is not valid JSON: ") + e.what());
  }
  try {
    if (j.at("format").get<std::string>() != kCheckpointFormat) {
      throw IoError("unsupported checkpoint format '" + j.at("format").get<std::string>() + "'");
    }
    Checkpoint ckpt;
    const Variant variant = parse_variant(j.at("variant").get<std::string>());
    const auto p = j.at("p").get<Eigen::Index>();
    ckpt.params = make_model(variant, p);
    ckpt.params.lambda_scale = j.value("lambda_scale", ckpt.params.lambda_scale);
    ckpt.seed = j.value("seed", std::uint64_t{0});
    ckpt.layer.zeta = j.at("zeta").get<double>();
    ckpt.layer.num_layers = j.at("num_layers").get<int>();
    ckpt.layer.stabilize = j.at("stabilize").get<bool>();
    ckpt.layer.tape_mode =
        j.value("tape_mode", std::string("detached")) == "full" ? TapeMode::Full : TapeMode::Detached;
    ckpt.layer.validate(p);

    auto refs = ckpt.params.named();
    const json& blocks = j.at("params");
    if (blocks.size() != refs.size()) throw IoError("checkpoint parameter count does not match the model");
    for (std::size_t k = 0; k < refs.size(); ++k) {
      const json& b = blocks[k];
      const auto& ref = refs[k];
      if (b.at("name").get<std::string>() != ref.name) {
        throw IoError("checkpoint block " + std::to_string(k) + " is '" +
                      b.at("name").get<std::string>() + "', expected '" + ref.name + "'");
      }
      const auto shape = b.at("shape").get<std::vector<Eigen::Index>>();
      const auto values = b.at("values").get<std::vector<double>>();
      if (shape.size() != 2 || shape[0] != ref.rows || shape[1] != ref.cols ||
          static_cast<Eigen::Index>(values.size()) != ref.rows * ref.cols) {
        throw IoError("checkpoint block '" + ref.name + "' has the wrong shape");
      }
      auto m = ref.map();
      for (Eigen::Index r = 0; r < ref.rows; ++r) {
        for (Eigen::Index c = 0; c < ref.cols; ++c) m(r, c) = values[r * ref.cols + c];
      }
    }
    return ckpt;
  } catch (const json::exception& e) {
    throw IoError(std::string("malformed checkpoint: ") + e.what());
  } catch (const ConfigError& e) {
    throw IoError(std::string("malformed checkpoint: ") + e.what());
  }
}

void save_checkpoint(const Checkpoint& ckpt, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write " + path.string());
  out << checkpoint_to_string(ckpt) << '\n';
  if (!out) throw IoError("failed writing " + path.string());
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot read " + path.string());
  std::stringstream buf;
  buf << in.rdbuf();
  return checkpoint_from_string(buf.str());
}

}  // namespace spodnet
