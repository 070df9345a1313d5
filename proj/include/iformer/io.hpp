#pragma once

// Persistence and interchange: a little-endian binary weight container with
// bit-exact round-trips, a flat key=value model config format, P6 PPM image
// loading, and CSV emission for analysis reports.

#include <cstdint>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "iformer/analysis.hpp"

namespace iformer {

// ---------------------------------------------------------------------------
// Weight container. Layout (all integers little-endian):
//   magic   4 bytes  "IFW1"
//   version u32      1
//   count   u32      number of tensor records
//   record: name_len u32, name bytes (UTF-8), rank u32, dims u64 x rank,
//           dtype u8 (0 = float32), payload raw float32 x prod(dims)
// Trainable parameters are written first, then running statistics, each in
// creation order, so identical models serialize to identical bytes.
// ---------------------------------------------------------------------------

namespace detail {

inline void put_u32(std::string& out, uint32_t v) {
  char b[4];
  std::memcpy(b, &v, 4);
  out.append(b, 4);
}

inline void put_u64(std::string& out, uint64_t v) {
  char b[8];
  std::memcpy(b, &v, 8);
  out.append(b, 8);
}

struct ByteReader {
  const char* p;
  const char* end;
  explicit ByteReader(const std::string& s) : p(s.data()), end(s.data() + s.size()) {}
  void need(size_t n, const char* what) {
    if (static_cast<size_t>(end - p) < n) {
      throw FormatError(std::string("weight container truncated while reading ") + what);
    }
  }
  uint32_t u32(const char* what) {
    need(4, what);
    uint32_t v;
    std::memcpy(&v, p, 4);
    p += 4;
    return v;
  }
  uint64_t u64(const char* what) {
    need(8, what);
    uint64_t v;
    std::memcpy(&v, p, 8);
    p += 8;
    return v;
  }
  uint8_t u8(const char* what) {
    need(1, what);
    return static_cast<uint8_t>(*p++);
  }
  std::string bytes(size_t n, const char* what) {
    need(n, what);
    std::string s(p, n);
    p += n;
    return s;
  }
};

inline void append_record(std::string& out, const std::string& name, const Tensor<float>& t) {
  put_u32(out, static_cast<uint32_t>(name.size()));
  out.append(name);
  put_u32(out, static_cast<uint32_t>(t.rank()));
  for (int64_t d : t.shape()) put_u64(out, static_cast<uint64_t>(d));
  out.push_back('\0');  // dtype 0 = float32
  out.append(reinterpret_cast<const char*>(t.data()), static_cast<size_t>(t.numel()) * 4);
}

}  // namespace detail

inline std::string serialize_tensors(
    const std::vector<std::pair<std::string, const Tensor<float>*>>& entries) {
  std::string out;
  out.append("IFW1", 4);
  detail::put_u32(out, 1);
  detail::put_u32(out, static_cast<uint32_t>(entries.size()));
  for (const auto& [name, t] : entries) detail::append_record(out, name, *t);
  return out;
}

inline std::string serialize_weights(const Model<float>& m) {
  std::vector<std::pair<std::string, const Tensor<float>*>> entries;
  for (const auto& [name, t] : m.params) entries.emplace_back(name, &t);
  for (const auto& [name, t] : m.buffers) entries.emplace_back(name, &t);
  return serialize_tensors(entries);
}

// Parses a container into (name, tensor) records, validating structure.
inline std::vector<std::pair<std::string, Tensor<float>>> parse_weight_container(
    const std::string& blob) {
  detail::ByteReader r(blob);
  if (r.bytes(4, "magic") != "IFW1") throw FormatError("not a weight container (bad magic)");
  const uint32_t version = r.u32("version");
  if (version != 1) throw FormatError("unsupported weight container version " + std::to_string(version));
  const uint32_t count = r.u32("record count");
  std::vector<std::pair<std::string, Tensor<float>>> records;
  records.reserve(count);
  for (uint32_t i = 0; i < count; ++i) {
    const uint32_t name_len = r.u32("name length");
    const std::string name = r.bytes(name_len, "name");
    for (const auto& [prev, t] : records) {
      if (prev == name) throw FormatError("duplicate tensor name '" + name + "' in weight container");
    }
    const uint32_t rank = r.u32("rank");
    std::vector<int64_t> dims(rank);
    int64_t numel = 1;
    for (uint32_t d = 0; d < rank; ++d) {
      dims[d] = static_cast<int64_t>(r.u64("dimension"));
      numel *= dims[d];
    }
    const uint8_t dtype = r.u8("dtype");
    if (dtype != 0) throw FormatError("tensor '" + name + "': unsupported dtype " + std::to_string(dtype));
    const size_t bytes = static_cast<size_t>(numel) * 4;
    r.need(bytes, name.c_str());
    Tensor<float> t(dims);
    std::memcpy(t.data(), r.p, bytes);
    r.p += bytes;
    records.emplace_back(name, std::move(t));
  }
  if (r.p != r.end) throw FormatError("weight container has trailing bytes");
  return records;
}

// Fully parses and validates before touching the model: a bad file never
// leaves partially loaded weights behind.
inline void deserialize_weights(Model<float>& m, const std::string& blob) {
  auto records = parse_weight_container(blob);
  const size_t expected = m.params.size() + m.buffers.size();
  if (records.size() != expected) {
    throw FormatError("weight container has " + std::to_string(records.size()) +
                      " tensors, model needs " + std::to_string(expected));
  }
  for (const auto& [name, t] : records) {
    const Tensor<float>* dst = nullptr;
    if (m.params.has(name)) {
      dst = &m.params.at(name);
    } else if (m.buffers.has(name)) {
      dst = &m.buffers.at(name);
    } else {
      throw FormatError("tensor '" + name + "' does not exist in this model");
    }
    if (dst->shape() != t.shape()) {
      throw FormatError("tensor '" + name + "' has shape " + shape_str(t.shape()) +
                        " in the container but " + shape_str(dst->shape()) + " in the model");
    }
  }
  for (auto& [name, t] : records) {
    Tensor<float>& dst = m.params.has(name) ? m.params.at(name) : m.buffers.at(name);
    dst = std::move(t);
  }
}

inline std::string read_file(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw FormatError("cannot open " + path);
  std::ostringstream ss;
  ss << f.rdbuf();
  return ss.str();
}

inline void write_file(const std::string& path, const std::string& data) {
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw FormatError("cannot write " + path);
  f.write(data.data(), static_cast<std::streamsize>(data.size()));
  if (!f) throw FormatError("write failed for " + path);
}

inline void save_weights(const Model<float>& m, const std::string& path) {
  write_file(path, serialize_weights(m));
}

inline void load_weights(Model<float>& m, const std::string& path) {
  deserialize_weights(m, read_file(path));
}

// ---------------------------------------------------------------------------
// Config files: one `key = value` per line, '#' starts a comment. A `preset`
// line loads a named configuration; later keys override individual fields.
// ---------------------------------------------------------------------------

namespace detail {

inline std::string trim(const std::string& s) {
  size_t a = s.find_first_not_of(" \t\r");
  if (a == std::string::npos) return "";
  size_t b = s.find_last_not_of(" \t\r");
  return s.substr(a, b - a + 1);
}

inline int64_t parse_int(const std::string& key, const std::string& v, int line_no) {
  try {
    size_t pos = 0;
    const int64_t x = std::stoll(v, &pos);
    if (pos != v.size()) throw std::invalid_argument(v);
    return x;
  } catch (const std::exception&) {
    throw ConfigError("line " + std::to_string(line_no) + ": key '" + key +
                      "' expects an integer, got '" + v + "'");
  }
}

inline double parse_float(const std::string& key, const std::string& v, int line_no) {
  try {
    size_t pos = 0;
    const double x = std::stod(v, &pos);
    if (pos != v.size()) throw std::invalid_argument(v);
    return x;
  } catch (const std::exception&) {
    throw ConfigError("line " + std::to_string(line_no) + ": key '" + key +
                      "' expects a number, got '" + v + "'");
  }
}

}  // namespace detail

inline std::string high_mix_name(HighMix m) {
  switch (m) {
    case HighMix::pool_and_conv: return "pool_and_conv";
    case HighMix::pool_only: return "pool_only";
    case HighMix::none: return "none";
  }
  return "pool_and_conv";
}

inline HighMix parse_high_mix(const std::string& s) {
  if (s == "pool_and_conv") return HighMix::pool_and_conv;
  if (s == "pool_only") return HighMix::pool_only;
  if (s == "none") return HighMix::none;
  throw ConfigError("unknown high_mix '" + s + "' (expected pool_and_conv, pool_only or none)");
}

inline ModelConfig parse_config_text(const std::string& text) {
  ModelConfig cfg = preset_config("iformer-micro");
  bool preset_seen = false;
  std::istringstream in(text);
  std::string raw;
  int line_no = 0;
  while (std::getline(in, raw)) {
    ++line_no;
    std::string line = raw;
    const size_t hash = line.find('#');
    if (hash != std::string::npos) line = line.substr(0, hash);
    line = detail::trim(line);
    if (line.empty()) continue;
    const size_t eq = line.find('=');
    if (eq == std::string::npos) {
      throw ConfigError("line " + std::to_string(line_no) + ": expected 'key = value', got '" +
                        detail::trim(raw) + "'");
    }
    const std::string key = detail::trim(line.substr(0, eq));
    const std::string val = detail::trim(line.substr(eq + 1));
    if (key.empty() || val.empty()) {
      throw ConfigError("line " + std::to_string(line_no) + ": empty key or value");
    }
    if (key == "preset") {
      cfg = preset_config(val);
      preset_seen = true;
      continue;
    }
    if (key == "head_dim") { cfg.head_dim = detail::parse_int(key, val, line_no); continue; }
    if (key == "num_classes") { cfg.num_classes = static_cast<int>(detail::parse_int(key, val, line_no)); continue; }
    if (key == "input_size") { cfg.input_size = detail::parse_int(key, val, line_no); continue; }
    if (key == "layerscale_init") { cfg.layerscale_init = detail::parse_float(key, val, line_no); continue; }
    if (key == "seed") { cfg.seed = static_cast<uint64_t>(detail::parse_int(key, val, line_no)); continue; }
    if (key == "high_mix") {
      try {
        cfg.high_mix = parse_high_mix(val);
      } catch (const ConfigError& e) {
        throw ConfigError("line " + std::to_string(line_no) + ": " + e.what());
      }
      continue;
    }
    if (key == "reverse_ramp") { cfg.reverse_ramp = detail::parse_int(key, val, line_no) != 0; continue; }
    if (key == "name") { cfg.name = val; continue; }
    if (key.rfind("stage", 0) == 0 && key.size() > 6 && key[6] == '.') {
      const int idx = key[5] - '1';
      if (idx < 0 || idx > 3) {
        throw ConfigError("line " + std::to_string(line_no) + ": stage index in '" + key +
                          "' must be 1..4");
      }
      StageConfig& st = cfg.stages[idx];
      const std::string field = key.substr(7);
      if (field == "depth") { st.depth = static_cast<int>(detail::parse_int(key, val, line_no)); continue; }
      if (field == "channels") { st.channels = detail::parse_int(key, val, line_no); continue; }
      if (field == "heads") { st.heads = static_cast<int>(detail::parse_int(key, val, line_no)); continue; }
      if (field == "high_ratio_start") { st.high_start = static_cast<int>(detail::parse_int(key, val, line_no)); continue; }
      if (field == "high_ratio_end") { st.high_end = static_cast<int>(detail::parse_int(key, val, line_no)); continue; }
      if (field == "pool_stride") { st.pool_stride = static_cast<int>(detail::parse_int(key, val, line_no)); continue; }
      throw ConfigError("line " + std::to_string(line_no) + ": unknown stage field '" + field + "'");
    }
    throw ConfigError("line " + std::to_string(line_no) + ": unknown config key '" + key + "'");
  }
  if (!preset_seen && cfg.name == "iformer-micro") cfg.name = "custom";
  validate_config(cfg);
  return cfg;
}

inline ModelConfig load_config(const std::string& path) {
  try {
    return parse_config_text(read_file(path));
  } catch (const ConfigError& e) {
    throw ConfigError(path + ": " + e.what());
  }
}

inline std::string emit_config(const ModelConfig& cfg) {
  std::ostringstream out;
  out << "name = " << cfg.name << "\n";
  out << "head_dim = " << cfg.head_dim << "\n";
  out << "num_classes = " << cfg.num_classes << "\n";
  out << "input_size = " << cfg.input_size << "\n";
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.9g", cfg.layerscale_init);
  out << "layerscale_init = " << buf << "\n";
  out << "seed = " << cfg.seed << "\n";
  out << "high_mix = " << high_mix_name(cfg.high_mix) << "\n";
  out << "reverse_ramp = " << (cfg.reverse_ramp ? 1 : 0) << "\n";
  for (int s = 0; s < 4; ++s) {
    const StageConfig& st = cfg.stages[s];
    const std::string p = "stage" + std::to_string(s + 1) + ".";
    out << p << "depth = " << st.depth << "\n";
    out << p << "channels = " << st.channels << "\n";
    out << p << "heads = " << st.heads << "\n";
    out << p << "high_ratio_start = " << st.high_start << "\n";
    out << p << "high_ratio_end = " << st.high_end << "\n";
    out << p << "pool_stride = " << st.pool_stride << "\n";
  }
  return out.str();
}

// ---------------------------------------------------------------------------
// P6 PPM loader. Pixels are scaled to [0,1] and then standardized with the
// given mean/std; the (0.5, 0.5) default maps onto [-1,1], the range the
// synthetic data generator uses.
// ---------------------------------------------------------------------------

inline Tensor<float> load_ppm(const std::string& path, float mean = 0.5f, float std_dev = 0.5f) {
  const std::string data = read_file(path);
  size_t pos = 0;
  auto skip_ws = [&]() {
    while (pos < data.size()) {
      if (data[pos] == '#') {
        while (pos < data.size() && data[pos] != '\n') ++pos;
      } else if (std::isspace(static_cast<unsigned char>(data[pos]))) {
        ++pos;
      } else {
        break;
      }
    }
  };
  auto token = [&]() {
    skip_ws();
    const size_t start = pos;
    while (pos < data.size() && !std::isspace(static_cast<unsigned char>(data[pos]))) ++pos;
    if (start == pos) throw FormatError(path + ": truncated PPM header");
    return data.substr(start, pos - start);
  };
  if (token() != "P6") throw FormatError(path + ": not a P6 PPM file");
  const long w = std::stol(token());
  const long h = std::stol(token());
  const long maxval = std::stol(token());
  if (w <= 0 || h <= 0) throw FormatError(path + ": bad PPM dimensions");
  if (maxval != 255) throw FormatError(path + ": PPM maxval must be 255, got " + std::to_string(maxval));
  ++pos;  // single whitespace after maxval
  const size_t need = static_cast<size_t>(w) * h * 3;
  if (data.size() - pos < need) throw FormatError(path + ": PPM pixel data truncated");
  Tensor<float> out({1, h, w, 3});
  for (size_t i = 0; i < need; ++i) {
    const float v = static_cast<float>(static_cast<unsigned char>(data[pos + i])) / 255.0f;
    out[static_cast<int64_t>(i)] = (v - mean) / std_dev;
  }
  return out;
}

// ---------------------------------------------------------------------------
// CSV with deterministic float formatting (%.9g).
// ---------------------------------------------------------------------------

inline std::string csv_num(double v) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.9g", v);
  return buf;
}

inline std::string spectrum_csv(const SpectrumReport& rep) {
  std::ostringstream out;
  out << "bin,nu_lo,nu_hi,count,mean_amplitude,delta_log_amplitude\n";
  for (size_t i = 0; i < rep.bins.size(); ++i) {
    const SpectrumBin& b = rep.bins[i];
    out << i << ',' << csv_num(b.nu_lo) << ',' << csv_num(b.nu_hi) << ',' << b.count << ','
        << csv_num(b.mean_amplitude) << ',' << csv_num(b.delta_log_amplitude) << "\n";
  }
  return out.str();
}

inline std::string cost_csv(const CostReport& rep) {
  std::ostringstream out;
  out << "module,params,flops\n";
  for (const auto& row : rep.rows) {
    out << row.name << ',' << row.params << ',' << row.flops << "\n";
  }
  out << "total," << rep.total_params << ',' << rep.total_flops << "\n";
  return out.str();
}

}  // namespace iformer
