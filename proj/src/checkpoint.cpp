#include "clface/checkpoint.hpp"

#include <cstdio>
#include <cstring>
#include <fstream>
#include <vector>

#include <json.hpp>

#include "clface/errors.hpp"

namespace clface {

namespace {

constexpr char kMagic[8] = {'C', 'L', 'F', 'C', '0', '0', '0', '1'};

uint64_t fnv1a(const void* data, size_t bytes, uint64_t h = 1469598103934665603ULL) {
  const auto* p = static_cast<const unsigned char*>(data);
  for (size_t i = 0; i < bytes; ++i) {
    h ^= p[i];
    h *= 1099511628211ULL;
  }
  return h;
}

nlohmann::json spec_to_json(const BackboneSpec& spec) {
  nlohmann::json j;
  j["stage_count"] = spec.stage_count;
  j["channels_per_stage"] = spec.channels_per_stage;
  nlohmann::json dims = nlohmann::json::array();
  for (const auto& [h, w] : spec.spatial_dims_per_stage) {
    dims.push_back({h, w});
  }
  j["spatial_dims_per_stage"] = dims;
  j["embedding_dim"] = spec.embedding_dim;
  j["input_shape"] = spec.input_shape;
  return j;
}

BackboneSpec spec_from_json(const nlohmann::json& j) {
  BackboneSpec spec;
  spec.stage_count = j.at("stage_count").get<int>();
  spec.channels_per_stage = j.at("channels_per_stage").get<std::vector<int>>();
  for (const auto& d : j.at("spatial_dims_per_stage")) {
    spec.spatial_dims_per_stage.emplace_back(d.at(0).get<int>(), d.at(1).get<int>());
  }
  spec.embedding_dim = j.at("embedding_dim").get<int>();
  auto in = j.at("input_shape").get<std::vector<int>>();
  if (in.size() != 3) throw ValidationError("bad input_shape in checkpoint");
  spec.input_shape = {in[0], in[1], in[2]};
  spec.validate();
  return spec;
}

}  // namespace

uint64_t payload_hash(const ModelSnapshot& model) {
  uint64_t h = 1469598103934665603ULL;
  for (const auto& [name, vec] : model.params().named()) {
    (void)name;
    h = fnv1a(vec->data(), vec->size() * sizeof(double), h);
  }
  return h;
}

std::string hash_hex(uint64_t h) {
  char buf[17];
  std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

void save_checkpoint(const ModelSnapshot& model, const std::string& path) {
  nlohmann::json manifest;
  manifest["format"] = "clfc-1";
  manifest["backbone_spec"] = spec_to_json(model.spec());
  manifest["step_index"] = model.step_index();
  manifest["frozen"] = model.frozen();
  nlohmann::json params = nlohmann::json::array();
  for (const auto& [name, vec] : model.params().named()) {
    params.push_back({{"name", name}, {"count", vec->size()}});
  }
  manifest["parameters"] = params;
  manifest["payload_hash"] = hash_hex(payload_hash(model));

  const std::string mtext = manifest.dump();
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw ValidationError("cannot open checkpoint for writing: " + path);
  out.write(kMagic, sizeof(kMagic));
  const uint64_t mlen = mtext.size();
  out.write(reinterpret_cast<const char*>(&mlen), sizeof(mlen));
  out.write(mtext.data(), static_cast<std::streamsize>(mtext.size()));
  for (const auto& [name, vec] : model.params().named()) {
    (void)name;
    out.write(reinterpret_cast<const char*>(vec->data()),
              static_cast<std::streamsize>(vec->size() * sizeof(double)));
  }
  if (!out) throw ValidationError("short write on checkpoint: " + path);
}

ModelSnapshot load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ValidationError("cannot open checkpoint: " + path);

  char magic[8];
  in.read(magic, sizeof(magic));
  if (!in || std::memcmp(magic, kMagic, sizeof(kMagic)) != 0) {
    throw ValidationError("not a checkpoint file: " + path);
  }
  uint64_t mlen = 0;
  in.read(reinterpret_cast<char*>(&mlen), sizeof(mlen));
  if (!in || mlen == 0 || mlen > (1ULL << 30)) {
    throw ValidationError("corrupt checkpoint manifest length: " + path);
  }
  std::string mtext(mlen, '\0');
  in.read(mtext.data(), static_cast<std::streamsize>(mlen));
  if (!in) throw ValidationError("truncated checkpoint manifest: " + path);

  nlohmann::json manifest;
  try {
    manifest = nlohmann::json::parse(mtext);
  } catch (const nlohmann::json::exception& e) {
    throw ValidationError(std::string("bad checkpoint manifest: ") + e.what());
  }

  const BackboneSpec spec = spec_from_json(manifest.at("backbone_spec"));
  Parameters params = Parameters::zeros_like(spec);

  auto expected = params.named();
  const auto& table = manifest.at("parameters");
  if (table.size() != expected.size()) {
    throw ValidationError("checkpoint parameter table size mismatch");
  }
  uint64_t h = 1469598103934665603ULL;
  for (size_t i = 0; i < expected.size(); ++i) {
    const auto& entry = table.at(i);
    if (entry.at("name").get<std::string>() != expected[i].first ||
        entry.at("count").get<size_t>() != expected[i].second->size()) {
      throw ValidationError("checkpoint parameter table disagrees with spec");
    }
    Vec& vec = *expected[i].second;
    in.read(reinterpret_cast<char*>(vec.data()),
            static_cast<std::streamsize>(vec.size() * sizeof(double)));
    if (!in) throw ValidationError("truncated checkpoint payload: " + path);
    h = fnv1a(vec.data(), vec.size() * sizeof(double), h);
  }
  if (hash_hex(h) != manifest.at("payload_hash").get<std::string>()) {
    throw ValidationError("checkpoint hash mismatch: " + path);
  }

  ModelSnapshot model = ModelSnapshot::from_parts(
      spec, std::move(params), manifest.at("step_index").get<int>(),
      manifest.at("frozen").get<bool>());
  return model;
}

}  // namespace clface
