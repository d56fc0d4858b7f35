#include "ferlite/checkpoint.hpp"

#include "json.hpp"
#include <zlib.h>

#include <cmath>
#include <cstring>
#include <fstream>
#include <unordered_map>

namespace ferlite {

namespace {

constexpr char kMagic[8] = {'F', 'E', 'R', 'L', 'C', 'K', 'P', 'T'};

std::uint32_t crc_of(const std::vector<char>& payload) {
  uLong crc = crc32(0L, Z_NULL, 0);
  crc = crc32(crc, reinterpret_cast<const Bytef*>(payload.data()),
              static_cast<uInt>(payload.size()));
  return static_cast<std::uint32_t>(crc);
}

void append_floats(std::vector<char>& payload, const float* data, std::size_t n,
                   std::uint64_t& offset_out) {
  offset_out = payload.size();
  const std::size_t bytes = n * sizeof(float);
  const std::size_t base = payload.size();
  payload.resize(base + bytes);
  std::memcpy(payload.data() + base, data, bytes);
}

}  // namespace

Checkpoint Checkpoint::from_model(const Module<float>& model, std::string config_json,
                                  long epoch, std::uint64_t rng_state, double val_accuracy,
                                  const Adam<float>* adam) {
  Checkpoint c;
  c.config_json = std::move(config_json);
  c.epoch = epoch;
  c.rng_state = rng_state;
  c.val_accuracy = val_accuracy;
  for (const auto& p : named_params(model)) {
    Tens t;
    t.name = p.name;
    t.buffer = (p.kind == ParamKind::Buffer);
    t.shape = p.tensor.shape();
    t.data.assign(p.tensor.value().data(), p.tensor.value().data() + p.tensor.size());
    c.tensors.push_back(std::move(t));
  }
  if (adam) {
    OptState os;
    os.t = adam->step_count();
    for (const auto& e : adam->entries()) {
      os.names.push_back(e.name);
      os.m.emplace_back(e.m.data(), e.m.data() + e.m.size());
      os.v.emplace_back(e.v.data(), e.v.data() + e.v.size());
    }
    c.optimizer = std::move(os);
  }
  return c;
}

Checkpoint::LoadReport Checkpoint::apply_to(const Module<float>& model, bool partial) const {
  LoadReport report;
  std::unordered_map<std::string, const Tens*> by_name;
  for (const auto& t : tensors) by_name[t.name] = &t;
  auto params = named_params(model);
  std::unordered_map<std::string, bool> model_names;
  for (const auto& p : params) model_names[p.name] = true;

  for (const auto& p : params) {
    auto it = by_name.find(p.name);
    if (it == by_name.end()) {
      report.missing_in_file.push_back(p.name);
      continue;
    }
    if (it->second->shape != p.tensor.shape())
      throw CheckpointNameMismatchError("checkpoint tensor " + p.name + " has shape " +
                                        shape_str(it->second->shape) + ", model expects " +
                                        shape_str(p.tensor.shape()));
    report.loaded.push_back(p.name);
  }
  for (const auto& t : tensors)
    if (!model_names.count(t.name)) report.unknown_in_file.push_back(t.name);

  if (!partial && (!report.missing_in_file.empty() || !report.unknown_in_file.empty())) {
    std::string msg = "checkpoint/model tensor sets differ";
    if (!report.missing_in_file.empty())
      msg += "; missing in file: " + report.missing_in_file.front() +
             (report.missing_in_file.size() > 1
                  ? " (+" + std::to_string(report.missing_in_file.size() - 1) + " more)"
                  : "");
    if (!report.unknown_in_file.empty())
      msg += "; unknown in file: " + report.unknown_in_file.front() +
             (report.unknown_in_file.size() > 1
                  ? " (+" + std::to_string(report.unknown_in_file.size() - 1) + " more)"
                  : "");
    msg += " (use partial loading to take the intersection)";
    throw CheckpointNameMismatchError(msg);
  }
  for (auto& p : params) {
    auto it = by_name.find(p.name);
    if (it == by_name.end()) continue;
    Tensor<float> dst = p.tensor;  // shared handle, writable view
    std::copy(it->second->data.begin(), it->second->data.end(), dst.value().data());
  }
  return report;
}

void Checkpoint::apply_optimizer(Adam<float>& adam) const {
  if (!optimizer) throw StateError("checkpoint carries no optimizer state");
  std::unordered_map<std::string, std::size_t> by_name;
  for (std::size_t i = 0; i < optimizer->names.size(); ++i)
    by_name[optimizer->names[i]] = i;
  for (auto& e : adam.entries()) {
    auto it = by_name.find(e.name);
    if (it == by_name.end())
      throw CheckpointNameMismatchError("optimizer state missing for " + e.name);
    const auto& m = optimizer->m[it->second];
    const auto& v = optimizer->v[it->second];
    if (static_cast<long>(m.size()) != e.m.size())
      throw CheckpointNameMismatchError("optimizer state size mismatch for " + e.name);
    std::copy(m.begin(), m.end(), e.m.data());
    std::copy(v.begin(), v.end(), e.v.data());
  }
  // private step counter restored through a fresh construction elsewhere;
  // here we rely on Adam::set_step
  adam.set_step(optimizer->t);
}

void save_checkpoint(const Checkpoint& ckpt, const std::string& path) {
  std::vector<char> payload;
  nlohmann::json meta;
  meta["format_version"] = Checkpoint::kFormatVersion;
  meta["config"] = ckpt.config_json.empty()
                       ? nlohmann::json(nullptr)
                       : nlohmann::json::parse(ckpt.config_json, nullptr, false);
  meta["epoch"] = ckpt.epoch;
  meta["rng_state"] = ckpt.rng_state;
  if (std::isnan(ckpt.val_accuracy)) meta["val_accuracy"] = nullptr;
  else meta["val_accuracy"] = ckpt.val_accuracy;

  nlohmann::json tens = nlohmann::json::array();
  for (const auto& t : ckpt.tensors) {
    std::uint64_t off = 0;
    append_floats(payload, t.data.data(), t.data.size(), off);
    tens.push_back({{"name", t.name},
                    {"kind", t.buffer ? "buffer" : "param"},
                    {"shape", t.shape},
                    {"dtype", "f32"},
                    {"offset", off},
                    {"count", t.data.size()}});
  }
  meta["tensors"] = tens;
  if (ckpt.optimizer) {
    nlohmann::json opt;
    opt["t"] = ckpt.optimizer->t;
    nlohmann::json entries = nlohmann::json::array();
    for (std::size_t i = 0; i < ckpt.optimizer->names.size(); ++i) {
      std::uint64_t off_m = 0, off_v = 0;
      append_floats(payload, ckpt.optimizer->m[i].data(), ckpt.optimizer->m[i].size(), off_m);
      append_floats(payload, ckpt.optimizer->v[i].data(), ckpt.optimizer->v[i].size(), off_v);
      entries.push_back({{"name", ckpt.optimizer->names[i]},
                         {"offset_m", off_m},
                         {"offset_v", off_v},
                         {"count", ckpt.optimizer->m[i].size()}});
    }
    opt["entries"] = entries;
    meta["optimizer"] = opt;
  } else {
    meta["optimizer"] = nullptr;
  }
  meta["payload_bytes"] = payload.size();
  meta["payload_crc32"] = crc_of(payload);

  const std::string meta_str = meta.dump();
  std::ofstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot write checkpoint: " + path);
  f.write(kMagic, 8);
  const std::uint32_t version = Checkpoint::kFormatVersion;
  f.write(reinterpret_cast<const char*>(&version), 4);
  const std::uint64_t meta_len = meta_str.size();
  f.write(reinterpret_cast<const char*>(&meta_len), 8);
  f.write(meta_str.data(), static_cast<std::streamsize>(meta_str.size()));
  f.write(payload.data(), static_cast<std::streamsize>(payload.size()));
  if (!f) throw IoError("short write for checkpoint: " + path);
}

Checkpoint load_checkpoint(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot open checkpoint: " + path);
  char magic[8];
  if (!f.read(magic, 8) || std::memcmp(magic, kMagic, 8) != 0)
    throw CheckpointCorruptError("not a checkpoint file: " + path);
  std::uint32_t version = 0;
  std::uint64_t meta_len = 0;
  if (!f.read(reinterpret_cast<char*>(&version), 4) ||
      !f.read(reinterpret_cast<char*>(&meta_len), 8))
    throw CheckpointCorruptError("truncated checkpoint header: " + path);
  if (version != Checkpoint::kFormatVersion)
    throw CheckpointVersionError("checkpoint format v" + std::to_string(version) +
                                 " not supported (want v" +
                                 std::to_string(Checkpoint::kFormatVersion) + "): " + path);
  std::string meta_str(meta_len, '\0');
  if (!f.read(meta_str.data(), static_cast<std::streamsize>(meta_len)))
    throw CheckpointCorruptError("truncated checkpoint metadata: " + path);
  nlohmann::json meta = nlohmann::json::parse(meta_str, nullptr, false);
  if (meta.is_discarded())
    throw CheckpointCorruptError("unparseable checkpoint metadata: " + path);

  const std::uint64_t payload_bytes = meta.at("payload_bytes").get<std::uint64_t>();
  std::vector<char> payload(payload_bytes);
  if (!f.read(payload.data(), static_cast<std::streamsize>(payload_bytes)))
    throw CheckpointCorruptError("truncated checkpoint payload: " + path);
  if (crc_of(payload) != meta.at("payload_crc32").get<std::uint32_t>())
    throw CheckpointCorruptError("checkpoint payload checksum mismatch: " + path);

  Checkpoint c;
  c.config_json = meta.at("config").is_null() ? "" : meta.at("config").dump();
  c.epoch = meta.at("epoch").get<long>();
  c.rng_state = meta.at("rng_state").get<std::uint64_t>();
  c.val_accuracy = meta.at("val_accuracy").is_null()
                       ? std::numeric_limits<double>::quiet_NaN()
                       : meta.at("val_accuracy").get<double>();
  auto read_floats = [&](std::uint64_t off, std::uint64_t count) {
    if (off + count * sizeof(float) > payload.size())
      throw CheckpointCorruptError("tensor extends past checkpoint payload: " + path);
    std::vector<float> out(count);
    std::memcpy(out.data(), payload.data() + off, count * sizeof(float));
    return out;
  };
  for (const auto& jt : meta.at("tensors")) {
    Checkpoint::Tens t;
    t.name = jt.at("name").get<std::string>();
    t.buffer = jt.at("kind").get<std::string>() == "buffer";
    t.shape = jt.at("shape").get<Shape>();
    t.data = read_floats(jt.at("offset").get<std::uint64_t>(),
                         jt.at("count").get<std::uint64_t>());
    c.tensors.push_back(std::move(t));
  }
  if (!meta.at("optimizer").is_null()) {
    Checkpoint::OptState os;
    os.t = meta.at("optimizer").at("t").get<long>();
    for (const auto& je : meta.at("optimizer").at("entries")) {
      os.names.push_back(je.at("name").get<std::string>());
      const auto count = je.at("count").get<std::uint64_t>();
      os.m.push_back(read_floats(je.at("offset_m").get<std::uint64_t>(), count));
      os.v.push_back(read_floats(je.at("offset_v").get<std::uint64_t>(), count));
    }
    c.optimizer = std::move(os);
  }
  return c;
}

}  // namespace ferlite
