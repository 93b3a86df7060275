#pragma once

// On-disk formats: 16-bit PGM images, "ATDD" checkpoints, key=value config
// files, and the dataset manifest.

#include <algorithm>
#include <bit>
#include <cctype>
#include <charconv>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include "atddpm/denoiser.hpp"
#include "atddpm/error.hpp"
#include "atddpm/tensor.hpp"
#include "atddpm/trainer.hpp"

namespace atddpm {

namespace fs = std::filesystem;

static_assert(std::endian::native == std::endian::little, "binary formats assume a little-endian host");

/// Shortest decimal text that parses back to the same double.
inline std::string format_double(double v) {
  char buf[64];
  const auto r = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, r.ptr);
}

inline double parse_double(std::string_view s, std::string_view what) {
  double v = 0;
  const auto r = std::from_chars(s.data(), s.data() + s.size(), v);
  if (r.ec != std::errc() || r.ptr != s.data() + s.size()) {
    throw ContractError(std::string(what) + ": '" + std::string(s) + "' is not a number");
  }
  return v;
}

inline std::uint64_t parse_uint(std::string_view s, std::string_view what) {
  std::uint64_t v = 0;
  const auto r = std::from_chars(s.data(), s.data() + s.size(), v);
  if (r.ec != std::errc() || r.ptr != s.data() + s.size()) {
    throw ContractError(std::string(what) + ": '" + std::string(s) + "' is not a non-negative integer");
  }
  return v;
}

// ---------------------------------------------------------------------------
// PGM

/// Binary P5, maxval 65535, big-endian samples; [0,1] maps to [0,65535]
/// with round-half-up. Values outside [0,1] are clamped.
inline void write_pgm(const fs::path& path, const Tensor& img) {
  if (img.rank() != 2) throw ShapeError("write_pgm: expected an [H,W] image, got " + to_string(img.shape()));
  std::ofstream out(path, std::ios::binary);
  if (!out) throw ContractError("write_pgm: cannot open " + path.string());
  out << "P5\n" << img.dim(1) << ' ' << img.dim(0) << "\n65535\n";
  std::vector<unsigned char> bytes(2 * img.size());
  for (std::size_t i = 0; i < img.size(); ++i) {
    const double v = std::clamp(img[i], 0.0, 1.0);
    const auto q = static_cast<std::uint32_t>(std::floor(v * 65535.0 + 0.5));
    bytes[2 * i] = static_cast<unsigned char>(q >> 8);
    bytes[2 * i + 1] = static_cast<unsigned char>(q & 0xff);
  }
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw ContractError("write_pgm: write failed for " + path.string());
}

/// Reads P5 images with 8- or 16-bit samples into [0,1].
inline Tensor read_pgm(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ContractError("read_pgm: cannot open " + path.string());
  const auto token = [&]() {
    std::string t;
    int c;
    while ((c = in.get()) != EOF) {
      if (c == '#') {
        while ((c = in.get()) != EOF && c != '\n') {
        }
        continue;
      }
      if (std::isspace(c)) {
        if (!t.empty()) break;
        continue;
      }
      t.push_back(static_cast<char>(c));
    }
    return t;
  };
  if (token() != "P5") throw ContractError("read_pgm: " + path.string() + " is not a binary PGM");
  const auto w = parse_uint(token(), "read_pgm width");
  const auto h = parse_uint(token(), "read_pgm height");
  const auto maxval = parse_uint(token(), "read_pgm maxval");
  if (w == 0 || h == 0 || maxval == 0 || maxval > 65535) throw ContractError("read_pgm: bad header in " + path.string());
  const std::size_t bps = maxval > 255 ? 2 : 1;
  std::vector<unsigned char> bytes(bps * w * h);
  in.read(reinterpret_cast<char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (in.gcount() != static_cast<std::streamsize>(bytes.size())) {
    throw ContractError("read_pgm: truncated pixel data in " + path.string());
  }
  std::vector<double> v(w * h);
  for (std::size_t i = 0; i < v.size(); ++i) {
    const std::uint32_t q = bps == 2 ? (std::uint32_t{bytes[2 * i]} << 8) | bytes[2 * i + 1] : bytes[i];
    v[i] = static_cast<double>(q) / static_cast<double>(maxval);
  }
  return Tensor({h, w}, std::move(v));
}

// ---------------------------------------------------------------------------
// key=value config files

/// Parsed key=value settings. Lookups consume keys so that leftovers can be
/// reported as unknown.
class ConfigMap {
 public:
  ConfigMap() = default;
  explicit ConfigMap(std::map<std::string, std::string> values) : values_(std::move(values)) {}

  static ConfigMap parse(std::istream& in, const std::string& origin = "config") {
    std::map<std::string, std::string> values;
    std::string line;
    std::size_t lineno = 0;
    const auto trim = [](std::string s) {
      const auto b = s.find_first_not_of(" \t\r");
      const auto e = s.find_last_not_of(" \t\r");
      return b == std::string::npos ? std::string() : s.substr(b, e - b + 1);
    };
    while (std::getline(in, line)) {
      ++lineno;
      if (const auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
      line = trim(line);
      if (line.empty()) continue;
      const auto eq = line.find('=');
      if (eq == std::string::npos) {
        throw UsageError(origin + ":" + std::to_string(lineno) + ": expected key=value");
      }
      values[trim(line.substr(0, eq))] = trim(line.substr(eq + 1));
    }
    return ConfigMap(std::move(values));
  }

  static ConfigMap load(const fs::path& path) {
    std::ifstream in(path);
    if (!in) throw UsageError("cannot open config file " + path.string());
    return parse(in, path.string());
  }

  /// Later values win.
  void set(const std::string& key, std::string value) { values_[key] = std::move(value); }
  bool contains(const std::string& key) const { return values_.count(key) > 0; }

  std::string take_string(const std::string& key, std::string fallback) {
    used_.insert(key);
    const auto it = values_.find(key);
    return it == values_.end() ? fallback : it->second;
  }
  double take_double(const std::string& key, double fallback) {
    used_.insert(key);
    const auto it = values_.find(key);
    return it == values_.end() ? fallback : parse_double(it->second, key);
  }
  std::uint64_t take_uint(const std::string& key, std::uint64_t fallback) {
    used_.insert(key);
    const auto it = values_.find(key);
    return it == values_.end() ? fallback : parse_uint(it->second, key);
  }

  /// Throws listing every key that no lookup consumed.
  void reject_unknown() const {
    std::string unknown;
    for (const auto& [k, v] : values_) {
      if (!used_.count(k)) unknown += (unknown.empty() ? "" : ", ") + k;
    }
    if (!unknown.empty()) throw UsageError("unknown config keys: " + unknown);
  }

 private:
  std::map<std::string, std::string> values_;
  std::set<std::string> used_;
};

// ---------------------------------------------------------------------------
// Checkpoints
//
//   "ATDD" | u32 version | u32 header length | header (UTF-8 "key=value\n" lines)
//   then per tensor: u32 name length | name | u32 rank | u64 dims... | f64 values
//
// Tensors are ordered student/*, teacher/* (if has_teacher=1), then adam_m/*
// and adam_v/* (if has_moments=1). All integers and floats little-endian.

inline constexpr std::uint32_t kCheckpointVersion = 1;

struct Checkpoint {
  std::map<std::string, std::string> header;  // extra keys; structural keys are derived on save
  DenoiserParams student;
  std::optional<DenoiserParams> teacher;
  std::optional<AdamState> moments;
};

namespace detail {

template <class T>
void put(std::ostream& out, T v) {
  out.write(reinterpret_cast<const char*>(&v), sizeof v);
}

template <class T>
T get(std::istream& in, const std::string& what) {
  T v{};
  in.read(reinterpret_cast<char*>(&v), sizeof v);
  if (in.gcount() != sizeof v) throw ContractError("checkpoint: truncated while reading " + what);
  return v;
}

inline void put_tensor(std::ostream& out, const std::string& name, const Shape& shape, std::span<const double> values) {
  if (!all_finite(values)) throw NumericError("checkpoint: tensor " + name + " holds non-finite values");
  put<std::uint32_t>(out, static_cast<std::uint32_t>(name.size()));
  out.write(name.data(), static_cast<std::streamsize>(name.size()));
  put<std::uint32_t>(out, static_cast<std::uint32_t>(shape.size()));
  for (auto d : shape) put<std::uint64_t>(out, d);
  out.write(reinterpret_cast<const char*>(values.data()), static_cast<std::streamsize>(values.size() * sizeof(double)));
}

inline std::vector<double> get_tensor(std::istream& in, const std::string& name, const Shape& shape) {
  const auto len = get<std::uint32_t>(in, "name length");
  std::string got(len, '\0');
  in.read(got.data(), len);
  if (got != name) throw ContractError("checkpoint: expected tensor '" + name + "', found '" + got + "'");
  const auto rank = get<std::uint32_t>(in, name + " rank");
  Shape dims(rank);
  for (auto& d : dims) d = get<std::uint64_t>(in, name + " dims");
  if (dims != shape) {
    throw ContractError("checkpoint: tensor " + name + " has shape " + to_string(dims) + ", descriptor implies " +
                        to_string(shape));
  }
  std::vector<double> v(numel(shape));
  in.read(reinterpret_cast<char*>(v.data()), static_cast<std::streamsize>(v.size() * sizeof(double)));
  if (in.gcount() != static_cast<std::streamsize>(v.size() * sizeof(double))) {
    throw ContractError("checkpoint: truncated payload of " + name);
  }
  return v;
}

inline std::string join_widths(const std::array<std::size_t, 4>& w) {
  return std::to_string(w[0]) + "," + std::to_string(w[1]) + "," + std::to_string(w[2]) + "," + std::to_string(w[3]);
}

}  // namespace detail

inline std::array<std::size_t, 4> parse_widths(const std::string& s) {
  std::array<std::size_t, 4> w{};
  std::stringstream ss(s);
  std::string part;
  std::size_t i = 0;
  while (std::getline(ss, part, ',')) {
    if (i == 4) throw ContractError("widths: expected four comma-separated values, got '" + s + "'");
    w[i++] = parse_uint(part, "widths");
  }
  if (i != 4) throw ContractError("widths: expected four comma-separated values, got '" + s + "'");
  return w;
}

inline void describe(std::map<std::string, std::string>& h, const DenoiserDescriptor& d) {
  h["image_size"] = std::to_string(d.image_size);
  h["channels"] = std::to_string(d.channels);
  h["widths"] = detail::join_widths(d.widths);
  h["groups"] = std::to_string(d.groups);
  h["time_dim"] = std::to_string(d.time_dim);
  h["kernel"] = std::to_string(d.kernel);
}

inline DenoiserDescriptor descriptor_from(const std::map<std::string, std::string>& h) {
  const auto need = [&](const char* key) -> const std::string& {
    const auto it = h.find(key);
    if (it == h.end()) throw ContractError(std::string("checkpoint: header lacks '") + key + "'");
    return it->second;
  };
  DenoiserDescriptor d;
  d.image_size = parse_uint(need("image_size"), "image_size");
  d.channels = parse_uint(need("channels"), "channels");
  d.widths = parse_widths(need("widths"));
  d.groups = parse_uint(need("groups"), "groups");
  d.time_dim = parse_uint(need("time_dim"), "time_dim");
  d.kernel = parse_uint(need("kernel"), "kernel");
  d.validate();
  return d;
}

inline std::string serialize_checkpoint(const Checkpoint& c) {
  auto header = c.header;
  describe(header, c.student.descriptor());
  header["has_teacher"] = c.teacher ? "1" : "0";
  header["has_moments"] = c.moments ? "1" : "0";
  if (c.moments) header["adam_step"] = std::to_string(c.moments->step);
  if (c.teacher && !c.teacher->combinable_with(c.student)) {
    throw ContractError("checkpoint: teacher and student descriptors differ");
  }
  std::string text;
  for (const auto& [k, v] : header) {
    if (k.find_first_of("=\n") != std::string::npos || v.find('\n') != std::string::npos) {
      throw ContractError("checkpoint: header entry '" + k + "' is not representable");
    }
    text += k + "=" + v + "\n";
  }

  std::ostringstream out(std::ios::binary);
  out.write("ATDD", 4);
  detail::put<std::uint32_t>(out, kCheckpointVersion);
  detail::put<std::uint32_t>(out, static_cast<std::uint32_t>(text.size()));
  out.write(text.data(), static_cast<std::streamsize>(text.size()));
  for (const auto& t : c.student.tensors()) detail::put_tensor(out, "student/" + t.name, t.value.shape(), t.value.data());
  if (c.teacher) {
    for (const auto& t : c.teacher->tensors()) detail::put_tensor(out, "teacher/" + t.name, t.value.shape(), t.value.data());
  }
  if (c.moments) {
    const auto& ts = c.student.tensors();
    if (c.moments->m.size() != ts.size() || c.moments->v.size() != ts.size()) {
      throw ContractError("checkpoint: optimizer moments do not match the student");
    }
    for (std::size_t i = 0; i < ts.size(); ++i) detail::put_tensor(out, "adam_m/" + ts[i].name, ts[i].value.shape(), c.moments->m[i]);
    for (std::size_t i = 0; i < ts.size(); ++i) detail::put_tensor(out, "adam_v/" + ts[i].name, ts[i].value.shape(), c.moments->v[i]);
  }
  return std::move(out).str();
}

inline Checkpoint deserialize_checkpoint(const std::string& bytes) {
  std::istringstream in(bytes, std::ios::binary);
  char magic[4] = {};
  in.read(magic, 4);
  if (in.gcount() != 4 || std::memcmp(magic, "ATDD", 4) != 0) throw ContractError("checkpoint: bad magic");
  const auto version = detail::get<std::uint32_t>(in, "version");
  if (version != kCheckpointVersion) throw ContractError("checkpoint: unsupported version " + std::to_string(version));
  const auto len = detail::get<std::uint32_t>(in, "header length");
  std::string text(len, '\0');
  in.read(text.data(), len);
  if (in.gcount() != static_cast<std::streamsize>(len)) throw ContractError("checkpoint: truncated header");

  Checkpoint c;
  std::istringstream lines(text);
  std::string line;
  while (std::getline(lines, line)) {
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw ContractError("checkpoint: malformed header line '" + line + "'");
    c.header[line.substr(0, eq)] = line.substr(eq + 1);
  }
  const auto d = descriptor_from(c.header);
  const auto layout = parameter_layout(d);
  const auto read_set = [&](const std::string& prefix) {
    std::vector<NamedTensor> ts;
    for (const auto& s : layout) ts.push_back({s.name, Tensor(s.shape, detail::get_tensor(in, prefix + s.name, s.shape), true)});
    return DenoiserParams(d, std::move(ts));
  };
  c.student = read_set("student/");
  if (c.header["has_teacher"] == "1") c.teacher = read_set("teacher/");
  if (c.header["has_moments"] == "1") {
    AdamState m;
    for (const auto& s : layout) m.m.push_back(detail::get_tensor(in, "adam_m/" + s.name, s.shape));
    for (const auto& s : layout) m.v.push_back(detail::get_tensor(in, "adam_v/" + s.name, s.shape));
    m.step = parse_uint(c.header.at("adam_step"), "adam_step");
    c.moments = std::move(m);
  }
  if (in.peek() != EOF) throw ContractError("checkpoint: trailing bytes after the tensor table");
  return c;
}

inline void save_checkpoint(const fs::path& path, const Checkpoint& c) {
  const auto bytes = serialize_checkpoint(c);
  const auto tmp = fs::path(path.string() + ".tmp");
  {
    std::ofstream out(tmp, std::ios::binary);
    if (!out) throw ContractError("save_checkpoint: cannot open " + tmp.string());
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw ContractError("save_checkpoint: write failed for " + tmp.string());
  }
  fs::rename(tmp, path);
}

inline std::string read_file(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ContractError("cannot open " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return std::move(ss).str();
}

inline Checkpoint load_checkpoint(const fs::path& path) { return deserialize_checkpoint(read_file(path)); }

// ---------------------------------------------------------------------------
// Dataset manifest: "item_id clean_path weak_path strong_path seed" per line,
// paths relative to the dataset directory.

struct ManifestRow {
  std::string item_id;
  std::string clean_path;
  std::string weak_path;
  std::string strong_path;
  std::uint64_t seed = 0;
};

inline void write_manifest(const fs::path& path, const std::vector<ManifestRow>& rows) {
  std::ofstream out(path);
  if (!out) throw ContractError("write_manifest: cannot open " + path.string());
  for (const auto& r : rows) {
    out << r.item_id << ' ' << r.clean_path << ' ' << r.weak_path << ' ' << r.strong_path << ' ' << r.seed << '\n';
  }
}

inline std::vector<ManifestRow> read_manifest(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw ContractError("read_manifest: cannot open " + path.string());
  std::vector<ManifestRow> rows;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    std::istringstream ss(line);
    ManifestRow r;
    std::string seed, extra;
    if (!(ss >> r.item_id >> r.clean_path >> r.weak_path >> r.strong_path >> seed) || (ss >> extra)) {
      throw ContractError(path.string() + ":" + std::to_string(lineno) + ": expected 5 fields");
    }
    r.seed = parse_uint(seed, "manifest seed");
    rows.push_back(std::move(r));
  }
  return rows;
}

/// Loads every manifest item of a dataset directory.
inline TripletDataset load_dataset(const fs::path& dir) {
  TripletDataset data;
  for (const auto& r : read_manifest(dir / "manifest.txt")) {
    const Tensor c = read_pgm(dir / r.clean_path);
    const Tensor w = read_pgm(dir / r.weak_path);
    const Tensor s = read_pgm(dir / r.strong_path);
    if (c.rank() != 2 || c.dim(0) != c.dim(1) || w.shape() != c.shape() || s.shape() != c.shape()) {
      throw ContractError("load_dataset: item " + r.item_id + " has inconsistent image sizes");
    }
    if (data.image_size == 0) data.image_size = c.dim(0);
    if (c.dim(0) != data.image_size) throw ContractError("load_dataset: mixed image sizes at item " + r.item_id);
    data.clean.emplace_back(c.data().begin(), c.data().end());
    data.weak.emplace_back(w.data().begin(), w.data().end());
    data.strong.emplace_back(s.data().begin(), s.data().end());
  }
  return data;
}

}  // namespace atddpm
