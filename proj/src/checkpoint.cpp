// SPDX-FileCopyrightText: Copyright (c) 2026 The minitune Authors
// SPDX-License-Identifier: Apache-2.0

#include "minitune/checkpoint.hpp"

#include <algorithm>
#include <bit>
#include <cstring>
#include <fstream>
#include <set>
#include <stdexcept>

#include <json.hpp>

namespace minitune::checkpoint {

static_assert(std::endian::native == std::endian::little, "checkpoint blobs are written in host byte order");

using nlohmann::json;

std::string to_string(Mode mode) { return mode == Mode::kFull ? "full" : "adapter"; }

bool is_adapter_name(const std::string& name) { return name.find("lora_") != std::string::npos; }

namespace {

Mode mode_from_string(const std::string& s) {
  if (s == "full") return Mode::kFull;
  if (s == "adapter") return Mode::kAdapter;
  throw std::runtime_error("checkpoint manifest has unknown mode '" + s + "'");
}

class BlobWriter {
 public:
  json add(const std::string& name, const std::string& dtype, const std::vector<std::int64_t>& shape, const void* data,
           std::size_t nbytes) {
    json e = {{"name", name}, {"dtype", dtype}, {"shape", shape}, {"offset", blob_.size()}, {"nbytes", nbytes}};
    const auto* p = static_cast<const char*>(data);
    blob_.insert(blob_.end(), p, p + nbytes);
    return e;
  }
  const std::vector<char>& blob() const { return blob_; }

 private:
  std::vector<char> blob_;
};

TensorEntry parse_entry(const json& e) {
  TensorEntry t;
  t.name = e.at("name").get<std::string>();
  t.dtype = e.at("dtype").get<std::string>();
  t.shape = e.at("shape").get<std::vector<std::int64_t>>();
  t.offset = e.at("offset").get<std::int64_t>();
  t.nbytes = e.at("nbytes").get<std::int64_t>();
  std::int64_t numel = 1;
  for (auto d : t.shape) numel *= d;
  const std::int64_t width = t.dtype == "f32" ? 4 : t.dtype == "u8" ? 1 : 0;
  if (width == 0) throw std::runtime_error("checkpoint tensor '" + t.name + "' has unknown dtype " + t.dtype);
  if (numel * width != t.nbytes) {
    throw std::runtime_error("checkpoint tensor '" + t.name + "' has " + std::to_string(t.nbytes) +
                             " bytes for shape of " + std::to_string(numel) + " elements");
  }
  return t;
}

void write_file(const std::filesystem::path& path, const char* data, std::size_t size) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  out.write(data, static_cast<std::streamsize>(size));
  if (!out) throw std::runtime_error("failed to write " + path.string());
}

}  // namespace

void save_checkpoint(const std::filesystem::path& dir, const nn::TransformerDecoder& model, Mode mode,
                     const TrainingState& state, const optim::OptimizerStateDict* optimizer) {
  std::filesystem::create_directories(dir);
  BlobWriter blob;
  json tensors = json::array();
  std::set<std::string> names;
  for (const auto& [name, p] : model.named_parameters()) {
    if (!names.insert(name).second) throw std::invalid_argument("duplicate parameter name '" + name + "'");
    if (mode == Mode::kAdapter && !is_adapter_name(name)) continue;
    auto data = p.value().data();
    tensors.push_back(blob.add(name, "f32", p.shape(), data.data(), data.size_bytes()));
  }
  if (mode == Mode::kAdapter && tensors.empty()) {
    throw std::invalid_argument("adapter checkpoint requested for a model without LoRA parameters");
  }
  json manifest = {{"format_version", kFormatVersion},
                   {"mode", to_string(mode)},
                   {"tensors", tensors},
                   {"training", {{"step", state.step}, {"epoch", state.epoch}, {"seed", state.seed}, {"recipe", state.recipe}}},
                   {"optimizer_state", optimizer != nullptr}};
  if (optimizer) {
    json params = json::object();
    for (const auto& [name, rec] : optimizer->params) {
      json buffers = json::object();
      for (const auto& [key, buf] : rec.buffers) {
        buffers[key] = blob.add("optimizer/" + name + "/" + key, buf.dtype, buf.shape, buf.bytes.data(), buf.bytes.size());
      }
      params[name] = {{"step", rec.step}, {"buffers", buffers}};
    }
    manifest["optimizer"] = {{"kind", optimizer->optimizer}, {"params", params}};
  }
  // The manifest goes last so a crash mid-save never leaves a manifest that
  // points past the end of the blob.
  std::filesystem::remove(dir / kManifestName);
  write_file(dir / kBlobName, blob.blob().data(), blob.blob().size());
  const std::string text = manifest.dump(2);
  write_file(dir / kManifestName, text.data(), text.size());
}

Checkpoint read_checkpoint(const std::filesystem::path& dir) {
  std::ifstream min(dir / kManifestName);
  if (!min) throw std::runtime_error("no checkpoint manifest in " + dir.string());
  json manifest;
  try {
    manifest = json::parse(min);
  } catch (const json::exception& e) {
    throw std::runtime_error("unreadable checkpoint manifest in " + dir.string() + ": " + e.what());
  }
  std::ifstream bin(dir / kBlobName, std::ios::binary);
  if (!bin) throw std::runtime_error("no checkpoint blob in " + dir.string());
  std::vector<char> blob((std::istreambuf_iterator<char>(bin)), std::istreambuf_iterator<char>());

  try {
    if (manifest.at("format_version").get<int>() != kFormatVersion) {
      throw std::runtime_error("unsupported checkpoint format version " + manifest.at("format_version").dump());
    }
    Checkpoint ck;
    ck.mode = mode_from_string(manifest.at("mode").get<std::string>());
    const auto& tr = manifest.at("training");
    ck.state = {tr.at("step").get<std::int64_t>(), tr.at("epoch").get<std::int64_t>(), tr.at("seed").get<std::uint64_t>(),
                tr.at("recipe").get<std::string>()};

    std::vector<TensorEntry> all;
    for (const auto& e : manifest.at("tensors")) all.push_back(parse_entry(e));
    const std::size_t num_params = all.size();
    if (manifest.at("optimizer_state").get<bool>()) {
      optim::OptimizerStateDict sd;
      const auto& o = manifest.at("optimizer");
      sd.optimizer = o.at("kind").get<std::string>();
      for (const auto& [name, rec] : o.at("params").items()) {
        auto& out = sd.params[name];
        out.step = rec.at("step").get<std::int64_t>();
        for (const auto& [key, e] : rec.at("buffers").items()) {
          all.push_back(parse_entry(e));
          const auto& t = all.back();
          out.buffers[key] = {t.dtype, t.shape, {}};
        }
      }
      ck.optimizer = std::move(sd);
    }

    std::vector<std::pair<std::int64_t, std::int64_t>> ranges;
    std::int64_t end = 0;
    for (const auto& t : all) {
      if (t.offset < 0 || t.offset + t.nbytes > static_cast<std::int64_t>(blob.size())) {
        throw std::runtime_error("tensor '" + t.name + "' lies outside the blob");
      }
      ranges.emplace_back(t.offset, t.offset + t.nbytes);
      end = std::max(end, t.offset + t.nbytes);
    }
    std::sort(ranges.begin(), ranges.end());
    for (std::size_t i = 1; i < ranges.size(); ++i) {
      if (ranges[i].first < ranges[i - 1].second) throw std::runtime_error("checkpoint tensors overlap in the blob");
    }
    if (end != static_cast<std::int64_t>(blob.size())) {
      throw std::runtime_error("checkpoint blob has " + std::to_string(blob.size()) + " bytes, manifest indexes " +
                               std::to_string(end));
    }

    for (std::size_t i = 0; i < num_params; ++i) {
      const auto& t = all[i];
      if (t.dtype != "f32") throw std::runtime_error("parameter '" + t.name + "' is not f32");
      if (ck.mode == Mode::kAdapter && !is_adapter_name(t.name)) {
        throw std::runtime_error("adapter checkpoint contains non-LoRA tensor '" + t.name + "'");
      }
      std::vector<float> v(static_cast<std::size_t>(t.nbytes / 4));
      std::memcpy(v.data(), blob.data() + t.offset, static_cast<std::size_t>(t.nbytes));
      ck.tensors.emplace_back(t.name, Tensor(t.shape, std::move(v), AllocTag::kParameter));
    }
    if (ck.optimizer) {
      std::size_t i = num_params;
      for (auto& [name, rec] : ck.optimizer->params) {
        for (auto& [key, buf] : rec.buffers) {
          const auto& t = all[i++];
          buf.bytes.assign(blob.begin() + t.offset, blob.begin() + t.offset + t.nbytes);
        }
      }
    }
    return ck;
  } catch (const json::exception& e) {
    throw std::runtime_error("malformed checkpoint manifest in " + dir.string() + ": " + e.what());
  }
}

void load_into(const Checkpoint& ck, nn::TransformerDecoder& model) {
  std::map<std::string, const Tensor*> by_name;
  for (const auto& [name, t] : ck.tensors) by_name[name] = &t;
  std::vector<std::string> missing;
  std::set<std::string> used;
  auto params = model.named_parameters();
  for (const auto& [name, p] : params) {
    if (ck.mode == Mode::kAdapter && !is_adapter_name(name)) continue;
    auto it = by_name.find(name);
    if (it == by_name.end()) {
      missing.push_back(name);
      continue;
    }
    if (it->second->shape() != p.shape()) {
      throw std::runtime_error("checkpoint tensor '" + name + "' has shape " + shape_str(it->second->shape()) +
                               ", model expects " + shape_str(p.shape()));
    }
    used.insert(name);
  }
  std::vector<std::string> unknown;
  for (const auto& [name, t] : by_name) {
    if (!used.count(name) && std::find(missing.begin(), missing.end(), name) == missing.end()) unknown.push_back(name);
  }
  if (!missing.empty() || !unknown.empty()) {
    std::string msg = "checkpoint does not match model;";
    if (!missing.empty()) {
      msg += " missing:";
      for (const auto& n : missing) msg += " " + n;
    }
    if (!unknown.empty()) {
      msg += " unknown:";
      for (const auto& n : unknown) msg += " " + n;
    }
    throw std::runtime_error(msg);
  }
  for (auto& [name, p] : params) {
    if (used.count(name)) p.assign(by_name.at(name)->data());
  }
}

std::int64_t checkpoint_bytes(const std::filesystem::path& dir) {
  return static_cast<std::int64_t>(std::filesystem::file_size(dir / kBlobName) +
                                   std::filesystem::file_size(dir / kManifestName));
}

}  // namespace minitune::checkpoint
