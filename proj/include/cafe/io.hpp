#pragma once

// Persistence:
//   - checkpoints: one UTF-8 JSON header line (format_version + tensor
//     manifest with byte offsets) followed by raw little-endian payload,
//     byte-exact across save/load/save
//   - PPM (P6) / PGM (P5) images, maxval 255, values mapped to [0,1] by /255
//   - heatmap export with a sidecar recording the normalization
//   - fixed-schema CSV writers
//   - sectioned key=value run configuration with a strict key registry
//
// I/O failures throw data_error carrying the path.

#include <cstdint>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "cafe/attribution.hpp"
#include "cafe/erf.hpp"
#include "cafe/eval.hpp"
#include "cafe/sae.hpp"
#include "cafe/tensor.hpp"
#include "cafe/vit.hpp"

namespace cafe {

inline constexpr int kCheckpointVersion = 1;

namespace detail {

inline void put_le(std::string& out, const void* p, std::size_t bytes_per,
                   std::size_t count) {
  const unsigned char* c = static_cast<const unsigned char*>(p);
  for (std::size_t i = 0; i < count; ++i)
    for (std::size_t b = 0; b < bytes_per; ++b) {
      std::uint64_t word = 0;
      std::memcpy(&word, c + i * bytes_per, bytes_per);
      out.push_back(static_cast<char>((word >> (8 * b)) & 0xff));
    }
}

inline void get_le(const char* in, void* p, std::size_t bytes_per,
                   std::size_t count) {
  unsigned char* c = static_cast<unsigned char*>(p);
  for (std::size_t i = 0; i < count; ++i) {
    std::uint64_t word = 0;
    for (std::size_t b = 0; b < bytes_per; ++b)
      word |= static_cast<std::uint64_t>(static_cast<unsigned char>(in[i * bytes_per + b]))
              << (8 * b);
    std::memcpy(c + i * bytes_per, &word, bytes_per);
  }
}

template <typename T>
const char* dtype_name() {
  return sizeof(T) == 8 ? "f64" : "f32";
}

}  // namespace detail

class CheckpointWriter {
 public:
  template <typename T>
  void add(const std::string& name, const Tensor<T>& t) {
    for (const auto& e : entries_)
      require(e.name != name, "checkpoint: duplicate tensor name " + name);
    Entry e;
    e.name = name;
    e.shape = t.shape();
    e.dtype = detail::dtype_name<T>();
    e.offset = payload_.size();
    detail::put_le(payload_, t.data(), sizeof(T), t.size());
    entries_.push_back(std::move(e));
  }

  void set_meta(const std::string& key, const std::string& value) {
    meta_[key] = value;
  }

  void save(const std::string& path) const {
    nlohmann::json manifest = nlohmann::json::array();
    for (const auto& e : entries_) {
      manifest.push_back({{"name", e.name},
                          {"shape", e.shape},
                          {"dtype", e.dtype},
                          {"offset", e.offset}});
    }
    nlohmann::json header = {{"format_version", kCheckpointVersion},
                             {"tensors", manifest}};
    if (!meta_.empty()) header["meta"] = meta_;
    std::ofstream f(path, std::ios::binary);
    if (!f) throw data_error("cannot write checkpoint: " + path);
    f << header.dump() << '\n';
    f.write(payload_.data(), static_cast<std::streamsize>(payload_.size()));
    if (!f) throw data_error("short write on checkpoint: " + path);
  }

 private:
  struct Entry {
    std::string name;
    Shape shape;
    std::string dtype;
    std::size_t offset = 0;
  };
  std::vector<Entry> entries_;
  std::map<std::string, std::string> meta_;
  std::string payload_;
};

class Checkpoint {
 public:
  static Checkpoint load(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw data_error("cannot open checkpoint: " + path);
    std::string header_line;
    if (!std::getline(f, header_line))
      throw data_error("checkpoint missing header line: " + path);
    nlohmann::json header;
    try {
      header = nlohmann::json::parse(header_line);
    } catch (const nlohmann::json::exception& e) {
      throw data_error("checkpoint header is not valid JSON (" + path +
                       "): " + e.what());
    }
    if (!header.contains("format_version") ||
        header["format_version"].get<int>() != kCheckpointVersion)
      throw data_error("checkpoint format_version mismatch: " + path);

    Checkpoint cp;
    std::ostringstream payload;
    payload << f.rdbuf();
    cp.payload_ = payload.str();
    if (header.contains("meta"))
      cp.meta_ = header["meta"].get<std::map<std::string, std::string>>();

    std::size_t prev_end = 0;
    for (const auto& j : header["tensors"]) {
      Entry e;
      e.name = j["name"].get<std::string>();
      e.shape = j["shape"].get<Shape>();
      e.dtype = j["dtype"].get<std::string>();
      e.offset = j["offset"].get<std::size_t>();
      if (e.dtype != "f32" && e.dtype != "f64")
        throw data_error("checkpoint tensor " + e.name + " has unknown dtype " +
                         e.dtype);
      if (e.offset < prev_end)
        throw data_error("checkpoint offsets overlap at tensor " + e.name +
                         " (offset " + std::to_string(e.offset) + ", expected >= " +
                         std::to_string(prev_end) + "): " + path);
      if (e.offset != prev_end)
        throw data_error("checkpoint offsets leave a gap before tensor " + e.name +
                         ": " + path);
      prev_end = e.offset + shape_numel(e.shape) * (e.dtype == "f64" ? 8 : 4);
      cp.order_.push_back(e.name);
      cp.entries_.emplace(e.name, std::move(e));
    }
    if (prev_end != cp.payload_.size())
      throw data_error("checkpoint payload length " +
                       std::to_string(cp.payload_.size()) + " != manifest total " +
                       std::to_string(prev_end) + ": " + path);
    return cp;
  }

  bool has(const std::string& name) const { return entries_.count(name) > 0; }
  const std::vector<std::string>& names() const { return order_; }
  const std::map<std::string, std::string>& meta() const { return meta_; }

  template <typename T>
  Tensor<T> get(const std::string& name) const {
    auto it = entries_.find(name);
    if (it == entries_.end())
      throw data_error("checkpoint has no tensor named " + name);
    const Entry& e = it->second;
    if (e.dtype != detail::dtype_name<T>())
      throw data_error("checkpoint tensor " + name + " is " + e.dtype +
                       ", requested " + detail::dtype_name<T>());
    const std::size_t count = shape_numel(e.shape);
    std::vector<T> data(count);
    detail::get_le(payload_.data() + e.offset, data.data(), sizeof(T), count);
    return Tensor<T>::external(e.shape, std::move(data), name.c_str());
  }

 private:
  struct Entry {
    std::string name;
    Shape shape;
    std::string dtype;
    std::size_t offset = 0;
  };
  std::map<std::string, Entry> entries_;
  std::vector<std::string> order_;
  std::map<std::string, std::string> meta_;
  std::string payload_;
};

// --------------------------------------------------------------------------
// Model checkpoints.

inline nlohmann::json vit_config_json(const ViTConfig& c) {
  return {{"image_size", c.image_size}, {"patch_size", c.patch_size},
          {"channels", c.channels},     {"depth", c.depth},
          {"heads", c.heads},           {"model_dim", c.model_dim},
          {"mlp_dim", c.mlp_dim},       {"use_cls_token", c.use_cls_token},
          {"seed", c.seed}};
}

inline ViTConfig vit_config_from_json(const nlohmann::json& j) {
  ViTConfig c;
  c.image_size = j.at("image_size").get<int>();
  c.patch_size = j.at("patch_size").get<int>();
  c.channels = j.at("channels").get<int>();
  c.depth = j.at("depth").get<int>();
  c.heads = j.at("heads").get<int>();
  c.model_dim = j.at("model_dim").get<int>();
  c.mlp_dim = j.at("mlp_dim").get<int>();
  c.use_cls_token = j.at("use_cls_token").get<bool>();
  c.seed = j.at("seed").get<std::uint64_t>();
  c.validate();
  return c;
}

template <typename T>
void save_vit(const ViTWeights<T>& w, const std::string& path) {
  CheckpointWriter cw;
  cw.set_meta("kind", "vit");
  cw.set_meta("vit_config", vit_config_json(w.cfg).dump());
  const_cast<ViTWeights<T>&>(w).for_each_tensor(
      [&](const std::string& name, Tensor<T>& t) { cw.add(name, t); });
  cw.save(path);
}

template <typename T>
ViTWeights<T> load_vit(const std::string& path) {
  Checkpoint cp = Checkpoint::load(path);
  auto it = cp.meta().find("vit_config");
  if (it == cp.meta().end())
    throw data_error("checkpoint lacks vit_config meta: " + path);
  ViTConfig cfg = vit_config_from_json(nlohmann::json::parse(it->second));
  ViTWeights<T> w = zero_vit<T>(cfg);
  w.for_each_tensor([&](const std::string& name, Tensor<T>& t) {
    Tensor<T> loaded = cp.get<T>(name);
    require(loaded.shape() == t.shape(), "vit checkpoint shape mismatch: " + name);
    t = std::move(loaded);
  });
  return w;
}

template <typename T>
void save_sae(const SAEModel<T>& s, const std::string& path) {
  CheckpointWriter cw;
  cw.set_meta("kind", "sae");
  cw.set_meta("n", std::to_string(s.n));
  cw.set_meta("m", std::to_string(s.m));
  cw.set_meta("decoder_bias_sign", s.subtract_output_bias ? "sub" : "add");
  cw.add("w_enc", s.w_enc);
  cw.add("w_dec", s.w_dec);
  cw.add("b_dec", s.b_dec);
  cw.add("b_out", s.b_out);
  cw.save(path);
}

template <typename T>
SAEModel<T> load_sae(const std::string& path) {
  Checkpoint cp = Checkpoint::load(path);
  SAEModel<T> s;
  s.n = std::stoi(cp.meta().at("n"));
  s.m = std::stoi(cp.meta().at("m"));
  s.subtract_output_bias = cp.meta().at("decoder_bias_sign") == "sub";
  s.w_enc = cp.get<T>("w_enc");
  s.w_dec = cp.get<T>("w_dec");
  s.b_dec = cp.get<T>("b_dec");
  s.b_out = cp.get<T>("b_out");
  s.validate();
  return s;
}

// --------------------------------------------------------------------------
// PPM / PGM. Byte b maps to value b/255.

template <typename T>
void write_ppm(const std::string& path, const Tensor<T>& image) {
  require(image.ndim() == 3 && image.dim(0) == 3, "write_ppm needs [3,H,W]");
  const int h = image.dim(1), w = image.dim(2);
  std::ofstream f(path, std::ios::binary);
  if (!f) throw data_error("cannot write image: " + path);
  f << "P6\n" << w << ' ' << h << "\n255\n";
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x)
      for (int c = 0; c < 3; ++c) {
        const T v = image[static_cast<std::size_t>((c * h + y) * w + x)];
        const T cl = std::min(T(1), std::max(T(0), v));
        f.put(static_cast<char>(static_cast<int>(cl * T(255) + T(0.5))));
      }
  if (!f) throw data_error("short write on image: " + path);
}

template <typename T>
Tensor<T> read_ppm(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw data_error("cannot open image: " + path);
  std::string magic;
  int w = 0, h = 0, maxval = 0;
  f >> magic >> w >> h >> maxval;
  if (magic != "P6") throw data_error("not a P6 ppm: " + path);
  if (maxval != 255) throw data_error("unsupported ppm maxval: " + path);
  f.get();  // single whitespace after header
  std::vector<char> raw(static_cast<std::size_t>(w) * h * 3);
  f.read(raw.data(), static_cast<std::streamsize>(raw.size()));
  if (!f) throw data_error("truncated ppm payload: " + path);
  Tensor<T> img({3, h, w});
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x)
      for (int c = 0; c < 3; ++c)
        img[static_cast<std::size_t>((c * h + y) * w + x)] =
            static_cast<T>(static_cast<unsigned char>(
                raw[static_cast<std::size_t>((y * w + x) * 3 + c)])) /
            T(255);
  return img;
}

inline void write_pgm(const std::string& path, int h, int w,
                      const std::vector<unsigned char>& bytes) {
  require(bytes.size() == static_cast<std::size_t>(h) * w, "pgm size mismatch");
  std::ofstream f(path, std::ios::binary);
  if (!f) throw data_error("cannot write image: " + path);
  f << "P5\n" << w << ' ' << h << "\n255\n";
  f.write(reinterpret_cast<const char*>(bytes.data()),
          static_cast<std::streamsize>(bytes.size()));
  if (!f) throw data_error("short write on image: " + path);
}

namespace detail {

inline void write_sidecar(const std::string& path,
                          const std::map<std::string, std::string>& kv) {
  std::ofstream f(path);
  if (!f) throw data_error("cannot write sidecar: " + path);
  for (const auto& [k, v] : kv) f << k << '=' << v << '\n';
}

}  // namespace detail

// Signed diverging heatmap, one cell per patch, symmetric about 0:
// positive -> red, negative -> blue, zero -> mid-gray (128,128,128).
template <typename T>
void export_erf_heatmap(const ERFMap<T>& map, const std::string& path) {
  require(!map.scores.empty(), "export_erf_heatmap: empty map");
  T maxabs = 0;
  for (T v : map.scores) maxabs = std::max(maxabs, std::abs(v));
  const int g = map.grid;
  std::string out;
  out += "P6\n" + std::to_string(g) + " " + std::to_string(g) + "\n255\n";
  for (int p = 0; p < map.patches(); ++p) {
    const double t = maxabs < static_cast<T>(1e-12)
                         ? 0.0
                         : static_cast<double>(map.scores[static_cast<std::size_t>(p)]) /
                               static_cast<double>(maxabs);
    const int r = std::min(255, std::max(0, 128 + static_cast<int>(127.0 * t)));
    const int b = std::min(255, std::max(0, 128 - static_cast<int>(127.0 * t)));
    const int gr = 128 - static_cast<int>(63.0 * std::abs(t));
    out.push_back(static_cast<char>(r));
    out.push_back(static_cast<char>(gr));
    out.push_back(static_cast<char>(b));
  }
  std::ofstream f(path, std::ios::binary);
  if (!f) throw data_error("cannot write heatmap: " + path);
  f << out;
  if (!f) throw data_error("short write on heatmap: " + path);
  detail::write_sidecar(path + ".norm.txt",
                        {{"kind", "erf_diverging"},
                         {"scale_maxabs", fmt_num(static_cast<double>(maxabs))},
                         {"zero_byte", "128"},
                         {"format_version", "1"}});
}

// Grayscale min-max normalized activation heatmap over patch tokens (the CLS
// value, when present, is recorded in the sidecar, not the raster).
template <typename T>
void export_activation_heatmap(const ActivationMap<T>& map,
                               const std::string& path) {
  require(!map.values.empty(), "export_activation_heatmap: empty map");
  const int off = map.has_cls ? 1 : 0;
  const int n = map.tokens() - off;
  require(n == map.grid * map.grid, "activation map grid mismatch");
  T lo = map.values[static_cast<std::size_t>(off)], hi = lo;
  for (int i = 0; i < n; ++i) {
    const T v = map.values[static_cast<std::size_t>(i + off)];
    lo = std::min(lo, v);
    hi = std::max(hi, v);
  }
  std::vector<unsigned char> bytes(static_cast<std::size_t>(n));
  for (int i = 0; i < n; ++i) {
    const T v = map.values[static_cast<std::size_t>(i + off)];
    const double t = hi > lo ? static_cast<double>(v - lo) / static_cast<double>(hi - lo)
                             : 0.5;  // constant map -> uniform mid-gray
    bytes[static_cast<std::size_t>(i)] =
        static_cast<unsigned char>(static_cast<int>(t * 255.0 + 0.5));
  }
  write_pgm(path, map.grid, map.grid, bytes);
  std::map<std::string, std::string> sidecar{
      {"kind", "activation_minmax"},
      {"min", fmt_num(static_cast<double>(lo))},
      {"max", fmt_num(static_cast<double>(hi))},
      {"format_version", "1"}};
  if (map.has_cls)
    sidecar["cls_value"] = fmt_num(static_cast<double>(map.values[0]));
  detail::write_sidecar(path + ".norm.txt", sidecar);
}

// --------------------------------------------------------------------------
// CSV writers (schemas fixed; all float formatting via fmt_num).

template <typename T>
void write_erf_csv(const ERFMap<T>& map, const std::string& path) {
  std::ofstream f(path);
  if (!f) throw data_error("cannot write csv: " + path);
  f << "row,col,score\n";
  for (int p = 0; p < map.patches(); ++p)
    f << map.row_of(p) << ',' << map.col_of(p) << ','
      << fmt_num(static_cast<double>(map.scores[static_cast<std::size_t>(p)])) << '\n';
}

template <typename T>
void write_curves_csv(const std::vector<CurveRecord<T>>& records,
                      const std::string& path) {
  std::ofstream f(path);
  if (!f) throw data_error("cannot write csv: " + path);
  f << "target_id,method,step,r\n";
  for (const auto& rec : records)
    for (std::size_t i = 0; i < rec.curve.r.size(); ++i)
      f << rec.target_id << ',' << rec.method << ',' << i << ','
        << fmt_num(static_cast<double>(rec.curve.r[i])) << '\n';
}

template <typename T>
void write_comparison_csv(const std::vector<ComparisonRow<T>>& rows,
                          const std::string& path) {
  std::ofstream f(path);
  if (!f) throw data_error("cannot write csv: " + path);
  f << "method,layer,mean_auc,sd,win_rate,n_targets\n";
  for (const auto& r : rows)
    f << r.method << ',' << r.layer << ','
      << fmt_num(static_cast<double>(r.mean_auc)) << ','
      << fmt_num(static_cast<double>(r.sd)) << ','
      << fmt_num(static_cast<double>(r.win_rate)) << ',' << r.n_targets << '\n';
}

template <typename T>
void write_nonlocality_csv(const NonlocalityReport<T>& rep,
                           const std::string& path) {
  std::ofstream f(path);
  if (!f) throw data_error("cannot write csv: " + path);
  f << "layer,feature,sigma,flagged,n_firing_images\n";
  for (const auto& e : rep.entries)
    f << e.layer << ',' << e.feature << ','
      << fmt_num(static_cast<double>(e.sigma)) << ',' << (e.flagged ? 1 : 0)
      << ',' << e.n_firing_images << '\n';
}

// --------------------------------------------------------------------------
// Run configuration: INI-style sections, strict key registry, explicit
// defaults (no wall-clock entropy anywhere).

class RunConfig {
 public:
  RunConfig() { init_registry(); }

  static RunConfig load(const std::string& path) {
    std::ifstream f(path);
    if (!f) throw data_error("cannot open config: " + path);
    RunConfig cfg;
    std::string line, section;
    int lineno = 0;
    while (std::getline(f, line)) {
      ++lineno;
      const auto cut = line.find_first_of(";#");
      if (cut != std::string::npos) line = line.substr(0, cut);
      line = trim(line);
      if (line.empty()) continue;
      if (line.front() == '[' && line.back() == ']') {
        section = trim(line.substr(1, line.size() - 2));
        if (!cfg.registry_.count(section))
          throw usage_error("config " + path + ":" + std::to_string(lineno) +
                            ": unknown section [" + section + "]");
        continue;
      }
      const auto eq = line.find('=');
      if (eq == std::string::npos)
        throw usage_error("config " + path + ":" + std::to_string(lineno) +
                          ": expected key = value");
      cfg.set(section, trim(line.substr(0, eq)), trim(line.substr(eq + 1)));
    }
    if (cfg.get("run", "format_version") != "1")
      throw data_error("config format_version mismatch: " + path);
    return cfg;
  }

  void set(const std::string& section, const std::string& key,
           const std::string& value) {
    auto sec = registry_.find(section);
    require(sec != registry_.end(), "unknown config section [" + section + "]");
    require(sec->second.count(key) > 0,
            "unknown config key " + section + "." + key);
    values_[section][key] = value;
  }

  std::string get(const std::string& section, const std::string& key) const {
    auto sec = registry_.find(section);
    require(sec != registry_.end(), "unknown config section [" + section + "]");
    auto def = sec->second.find(key);
    require(def != sec->second.end(), "unknown config key " + section + "." + key);
    auto si = values_.find(section);
    if (si != values_.end()) {
      auto ki = si->second.find(key);
      if (ki != si->second.end()) return ki->second;
    }
    return def->second;
  }

  int get_int(const std::string& s, const std::string& k) const {
    return std::stoi(get(s, k));
  }
  std::uint64_t get_u64(const std::string& s, const std::string& k) const {
    return std::stoull(get(s, k));
  }
  double get_double(const std::string& s, const std::string& k) const {
    return std::stod(get(s, k));
  }
  bool get_bool(const std::string& s, const std::string& k) const {
    const std::string v = get(s, k);
    if (v == "true" || v == "1") return true;
    if (v == "false" || v == "0") return false;
    throw usage_error("config " + s + "." + k + " must be true/false");
  }
  std::vector<int> get_int_list(const std::string& s, const std::string& k) const {
    std::vector<int> out;
    std::stringstream ss(get(s, k));
    std::string item;
    while (std::getline(ss, item, ',')) {
      item = trim(item);
      if (!item.empty()) out.push_back(std::stoi(item));
    }
    return out;
  }

  ViTConfig vit_config() const {
    ViTConfig c;
    c.image_size = get_int("vit", "image_size");
    c.patch_size = get_int("vit", "patch_size");
    c.channels = get_int("vit", "channels");
    c.depth = get_int("vit", "depth");
    c.heads = get_int("vit", "heads");
    c.model_dim = get_int("vit", "model_dim");
    c.mlp_dim = get_int("vit", "mlp_dim");
    c.use_cls_token = get_bool("vit", "use_cls_token");
    c.seed = get_u64("vit", "seed");
    c.validate();
    return c;
  }

  // Effective configuration echo: every key, resolved.
  void write(const std::string& path) const {
    std::ofstream f(path);
    if (!f) throw data_error("cannot write config echo: " + path);
    for (const auto& [section, keys] : registry_) {
      f << '[' << section << "]\n";
      for (const auto& [key, def] : keys) f << key << " = " << get(section, key) << '\n';
      f << '\n';
    }
  }

 private:
  static std::string trim(const std::string& s) {
    const auto a = s.find_first_not_of(" \t\r");
    if (a == std::string::npos) return "";
    const auto b = s.find_last_not_of(" \t\r");
    return s.substr(a, b - a + 1);
  }

  void init_registry() {
    registry_["run"] = {{"format_version", "1"}, {"seed", "0"},
                        {"dtype", "f32"},        {"out", "out"},
                        {"vit_checkpoint", ""},  {"sae_checkpoint", ""}};
    registry_["vit"] = {{"image_size", "32"}, {"patch_size", "4"},
                        {"channels", "3"},    {"depth", "6"},
                        {"heads", "4"},       {"model_dim", "64"},
                        {"mlp_dim", "128"},   {"use_cls_token", "true"},
                        {"seed", "0"}};
    registry_["sae"] = {{"lambda", "0.001"},        {"lr", "0.001"},
                        {"batch", "64"},            {"steps", "1000"},
                        {"seed", "0"},              {"m", "128"},
                        {"layer", "4"},             {"matryoshka_groups", ""},
                        {"decoder_bias_sign", "sub"}, {"dead_steps", "1000"},
                        {"latents", ""}};
    registry_["attribution"] = {{"method", "attnlrp"}, {"ig_steps", "128"},
                                {"shap_samples", "2048"}, {"shap_ridge", "1e-06"},
                                {"shap_seed", "0"},    {"lrp_eps", ""},
                                {"attn_rule", "attnlrp"}, {"pooling", "signed"},
                                {"baseline", "zero"},  {"baseline_image", ""}};
    registry_["eval"] = {{"radius", "1"},          {"theta", "0.5"},
                         {"features_per_layer", "8"}, {"layers", ""},
                         {"token", "-1"}};
    registry_["synthetic"] = {{"n_images", "8"},    {"n_local", "1"},
                              {"n_nonlocal", "1"},  {"sources_per_feature", "3"},
                              {"strength", "4"},    {"min_dist", "2"},
                              {"staggered_routers", "false"}};
  }

  std::map<std::string, std::map<std::string, std::string>> registry_;
  std::map<std::string, std::map<std::string, std::string>> values_;
};

}  // namespace cafe
