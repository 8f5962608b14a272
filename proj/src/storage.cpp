#include "avs/storage.hpp"

#include <algorithm>
#include <bit>
#include <charconv>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <limits>
#include <set>
#include <sstream>

namespace avs {

// ---------------------------------------------------------------------------
// Files

Bytes read_file(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open '" + path.string() + "' for reading");
  Bytes bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  if (in.bad()) throw IoError("read failed for '" + path.string() + "'");
  return bytes;
}

void write_file(const fs::path& path, std::span<const std::uint8_t> bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot open '" + path.string() + "' for writing");
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  out.close();
  if (!out) throw IoError("write failed for '" + path.string() + "'");
}

std::string read_text(const fs::path& path) {
  const Bytes b = read_file(path);
  return std::string(b.begin(), b.end());
}

void write_text(const fs::path& path, std::string_view text) {
  write_file(path, std::span(reinterpret_cast<const std::uint8_t*>(text.data()), text.size()));
}

namespace {

// ---------------------------------------------------------------------------
// Little-endian encoding

void put_u32(Bytes& out, std::uint32_t v) {
  for (int k = 0; k < 4; ++k) out.push_back(static_cast<std::uint8_t>(v >> (8 * k)));
}

void put_f64(Bytes& out, double v) {
  const auto bits = std::bit_cast<std::uint64_t>(v);
  for (int k = 0; k < 8; ++k) out.push_back(static_cast<std::uint8_t>(bits >> (8 * k)));
}

std::uint32_t checked_u32(std::size_t v, const char* what) {
  if (v > std::numeric_limits<std::uint32_t>::max()) throw ArgumentError(std::string(what) + " exceeds 32 bits");
  return static_cast<std::uint32_t>(v);
}

class Reader {
 public:
  explicit Reader(std::span<const std::uint8_t> bytes) : bytes_(bytes) {}

  std::size_t pos() const { return pos_; }
  std::size_t remaining() const { return bytes_.size() - pos_; }

  void need(std::size_t n, const char* what) const {
    if (remaining() < n) throw FormatError(std::string("truncated ") + what, bytes_.size());
  }

  void magic(std::string_view m) {
    need(m.size(), "magic");
    for (std::size_t k = 0; k < m.size(); ++k) {
      if (bytes_[pos_ + k] != static_cast<std::uint8_t>(m[k])) {
        throw FormatError("bad magic, expected '" + std::string(m) + "'", pos_ + k);
      }
    }
    pos_ += m.size();
  }

  std::uint32_t u32(const char* what) {
    need(4, what);
    std::uint32_t v = 0;
    for (int k = 0; k < 4; ++k) v |= static_cast<std::uint32_t>(bytes_[pos_ + k]) << (8 * k);
    pos_ += 4;
    return v;
  }

  double f64() {
    std::uint64_t v = 0;
    for (int k = 0; k < 8; ++k) v |= static_cast<std::uint64_t>(bytes_[pos_ + k]) << (8 * k);
    pos_ += 8;
    return std::bit_cast<double>(v);
  }

  std::string_view chars(std::size_t n, const char* what) {
    need(n, what);
    std::string_view s(reinterpret_cast<const char*>(bytes_.data() + pos_), n);
    pos_ += n;
    return s;
  }

 private:
  std::span<const std::uint8_t> bytes_;
  std::size_t pos_ = 0;
};

void append_tensor(Bytes& out, const Tensor& t) {
  out.insert(out.end(), {'A', 'V', 'S', 'T'});
  put_u32(out, checked_u32(t.rank(), "rank"));
  for (auto d : t.dims()) put_u32(out, checked_u32(d, "dimension"));
  for (double v : t.data()) put_f64(out, v);
}

Tensor take_tensor(Reader& in) {
  in.magic("AVST");
  const std::size_t rank_at = in.pos();
  const std::uint32_t rank = in.u32("rank");
  if (rank > in.remaining() / 4) throw FormatError("rank " + std::to_string(rank) + " exceeds file size", rank_at);
  Shape dims(rank);
  std::size_t count = 1;
  for (auto& d : dims) {
    const std::size_t at = in.pos();
    d = in.u32("dimension");
    if (d == 0) throw FormatError("zero dimension", at);
    if (count > (in.remaining() / 8) / d) throw FormatError("dimensions exceed payload size", at);
    count *= d;
  }
  if (in.remaining() < count * 8) {
    throw FormatError("truncated payload: need " + std::to_string(count * 8) + " bytes", in.pos() + in.remaining());
  }
  std::vector<double> data(count);
  for (auto& v : data) v = in.f64();
  return Tensor(std::move(dims), std::move(data));
}

}  // namespace

// ---------------------------------------------------------------------------
// Tensor / checkpoint files

Bytes encode_tensor(const Tensor& t) {
  Bytes out;
  out.reserve(8 + 4 * t.rank() + 8 * t.numel());
  append_tensor(out, t);
  return out;
}

Tensor decode_tensor(std::span<const std::uint8_t> bytes) {
  Reader in(bytes);
  Tensor t = take_tensor(in);
  if (in.remaining() != 0) throw FormatError("trailing bytes after tensor", in.pos());
  return t;
}

void write_tensor(const fs::path& path, const Tensor& t) { write_file(path, encode_tensor(t)); }
Tensor read_tensor(const fs::path& path) { return decode_tensor(read_file(path)); }

Bytes encode_checkpoint(const NamedTensors& entries) {
  std::set<std::string_view> seen;
  Bytes out{'A', 'V', 'S', 'C'};
  put_u32(out, checked_u32(entries.size(), "entry count"));
  for (const auto& [name, t] : entries) {
    if (name.empty() || !seen.insert(name).second) throw CheckpointError("empty or duplicate entry name '" + name + "'");
    put_u32(out, checked_u32(name.size(), "name length"));
    out.insert(out.end(), name.begin(), name.end());
    append_tensor(out, t);
  }
  return out;
}

NamedTensors decode_checkpoint(std::span<const std::uint8_t> bytes) {
  Reader in(bytes);
  in.magic("AVSC");
  const std::size_t count_at = in.pos();
  const std::uint32_t count = in.u32("entry count");
  // smallest entry: name length + 1 name byte + tensor magic + rank
  if (count > in.remaining() / 13) throw FormatError("entry count exceeds file size", count_at);
  NamedTensors entries;
  std::set<std::string, std::less<>> seen;
  for (std::uint32_t e = 0; e < count; ++e) {
    const std::size_t at = in.pos();
    const std::uint32_t len = in.u32("name length");
    if (len == 0) throw FormatError("empty entry name", at);
    std::string name(in.chars(len, "entry name"));
    if (!seen.insert(name).second) throw FormatError("duplicate entry '" + name + "'", at);
    Tensor t = take_tensor(in);
    entries.emplace_back(std::move(name), std::move(t));
  }
  if (in.remaining() != 0) throw FormatError("trailing bytes after checkpoint", in.pos());
  return entries;
}

void save_checkpoint(const fs::path& path, const AvsModel& model) {
  NamedTensors entries;
  for (std::size_t i = 0; i < model.names().size(); ++i) {
    entries.emplace_back(model.names()[i], Tensor(model.parameters()[i].dims(), model.parameters()[i].values()));
  }
  write_file(path, encode_checkpoint(entries));
}

NamedTensors read_checkpoint(const fs::path& path) { return decode_checkpoint(read_file(path)); }

namespace {

const Tensor& entry(const NamedTensors& entries, std::string_view name) {
  for (const auto& [n, t] : entries) {
    if (n == name) return t;
  }
  throw CheckpointError("checkpoint lacks parameter '" + std::string(name) + "'");
}

bool has_entry(const NamedTensors& entries, std::string_view name) {
  return std::any_of(entries.begin(), entries.end(), [&](const auto& e) { return e.first == name; });
}

}  // namespace

ModelConfig infer_model_config(const NamedTensors& entries, std::size_t height, std::size_t width) {
  ModelConfig c;
  c.height = height;
  c.width = width;
  auto shape = [&](std::string_view name, std::size_t rank) -> const Shape& {
    const Shape& s = entry(entries, name).dims();
    if (s.size() != rank) throw CheckpointError("parameter '" + std::string(name) + "' has shape " + to_string(s));
    return s;
  };
  c.n_mels = shape("audio.fc1.weight", 2)[0];
  c.audio_hidden = shape("audio.fc1.weight", 2)[1];
  c.audio_dim = shape("audio.fc2.weight", 2)[1];
  for (std::size_t i = 0; i < kStageCount; ++i) {
    c.stage_channels[i] = shape("visual.stage" + std::to_string(i + 1) + ".down.weight", 4)[3];
  }
  c.channels = shape("aspp1.point.weight", 4)[3];

  c.aspp_rates.clear();
  const std::string rate_prefix = "aspp1.rate";
  for (const auto& [name, t] : entries) {
    if (name.rfind(rate_prefix, 0) != 0 || !name.ends_with(".weight")) continue;
    const std::string digits = name.substr(rate_prefix.size(), name.size() - rate_prefix.size() - 7);
    std::size_t rate = 0;
    auto [p, ec] = std::from_chars(digits.data(), digits.data() + digits.size(), rate);
    if (ec != std::errc{} || p != digits.data() + digits.size() || rate == 0) {
      throw CheckpointError("unreadable dilation in '" + name + "'");
    }
    c.aspp_rates.push_back(rate);
  }
  std::sort(c.aspp_rates.begin(), c.aspp_rates.end());

  c.fusion_stages.clear();
  bool tpavi = false, add = false;
  for (int s = 1; s <= static_cast<int>(kStageCount); ++s) {
    const bool t = has_entry(entries, "tpavi" + std::to_string(s) + ".theta.weight");
    const bool a = has_entry(entries, "fuse" + std::to_string(s) + ".audio.weight");
    if (t || a) c.fusion_stages.push_back(s);
    tpavi |= t;
    add |= a;
  }
  if (tpavi && add) throw CheckpointError("checkpoint mixes fusion kinds");
  c.fusion = tpavi ? FusionMode::tpavi : add ? FusionMode::add : FusionMode::none;
  return c;
}

void load_parameters(AvsModel& model, const NamedTensors& entries) {
  if (entries.size() != model.names().size()) {
    throw CheckpointError("checkpoint has " + std::to_string(entries.size()) + " entries, model expects " +
                          std::to_string(model.names().size()));
  }
  for (const auto& [name, t] : entries) {
    const auto idx = model.find(name);
    if (!idx) throw CheckpointError("unexpected parameter '" + name + "'");
    Tensor& p = model.parameters()[*idx];
    if (p.dims() != t.dims()) {
      throw CheckpointError("parameter '" + name + "' has shape " + to_string(t.dims()) + ", model expects " +
                            to_string(p.dims()));
    }
    std::copy(t.data().begin(), t.data().end(), p.data().begin());
  }
}

AvsModel load_model(const fs::path& path, std::size_t height, std::size_t width) {
  const NamedTensors entries = read_checkpoint(path);
  AvsModel model(infer_model_config(entries, height, width));
  load_parameters(model, entries);
  return model;
}

// ---------------------------------------------------------------------------
// Netpbm

namespace {

struct Netpbm {
  std::size_t width = 0, height = 0, maxval = 0, offset = 0;
};

Netpbm parse_netpbm_header(std::span<const std::uint8_t> bytes, std::string_view magic) {
  if (bytes.size() < 2 || bytes[0] != magic[0] || bytes[1] != magic[1]) {
    throw FormatError("not a " + std::string(magic) + " image", 0);
  }
  std::size_t pos = 2;
  auto is_space = [](std::uint8_t c) { return c == ' ' || c == '\t' || c == '\n' || c == '\r' || c == '\v' || c == '\f'; };
  auto number = [&](const char* what) -> std::size_t {
    for (;;) {
      if (pos >= bytes.size()) throw FormatError(std::string("truncated header before ") + what, pos);
      if (is_space(bytes[pos])) {
        ++pos;
      } else if (bytes[pos] == '#') {
        while (pos < bytes.size() && bytes[pos] != '\n') ++pos;
      } else {
        break;
      }
    }
    const std::size_t start = pos;
    std::size_t v = 0;
    while (pos < bytes.size() && bytes[pos] >= '0' && bytes[pos] <= '9') {
      if (pos - start >= 9) throw FormatError(std::string(what) + " too large", start);
      v = v * 10 + (bytes[pos] - '0');
      ++pos;
    }
    if (pos == start) throw FormatError(std::string("expected ") + what, start);
    return v;
  };
  Netpbm h;
  h.width = number("width");
  h.height = number("height");
  const std::size_t maxval_at = pos;
  h.maxval = number("maxval");
  if (h.width == 0 || h.height == 0) throw FormatError("zero image size", maxval_at);
  if (h.maxval == 0 || h.maxval > 255) throw FormatError("unsupported maxval " + std::to_string(h.maxval), maxval_at);
  if (pos >= bytes.size() || !is_space(bytes[pos])) throw FormatError("missing separator after header", pos);
  h.offset = pos + 1;
  return h;
}

std::span<const std::uint8_t> netpbm_payload(std::span<const std::uint8_t> bytes, const Netpbm& h,
                                             std::size_t channels) {
  const std::size_t expect = h.width * h.height * channels;
  const std::size_t have = bytes.size() - h.offset;
  if (have < expect) throw FormatError("pixel data shorter than declared size", bytes.size());
  if (have > expect) throw FormatError("pixel data longer than declared size", h.offset + expect);
  return bytes.subspan(h.offset);
}

Bytes netpbm_header(std::string_view magic, std::size_t w, std::size_t h) {
  const std::string s = std::string(magic) + "\n" + std::to_string(w) + " " + std::to_string(h) + "\n255\n";
  return Bytes(s.begin(), s.end());
}

std::uint8_t to_level(double v) {
  if (!(v >= 0.0 && v <= 1.0)) throw ArgumentError("pixel value " + std::to_string(v) + " outside [0, 1]");
  return static_cast<std::uint8_t>(std::lround(v * 255.0));
}

}  // namespace

Bytes encode_mask_pgm(const Tensor& mask) {
  if (mask.rank() != 2) throw ShapeError("mask must be (H, W), got " + to_string(mask.dims()));
  Bytes out = netpbm_header("P5", mask.dim(1), mask.dim(0));
  for (double v : mask.data()) {
    if (v != 0.0 && v != 1.0) throw ArgumentError("mask values must be 0 or 1");
    out.push_back(v == 1.0 ? 255 : 0);
  }
  return out;
}

Tensor decode_mask_pgm(std::span<const std::uint8_t> bytes) {
  const Netpbm h = parse_netpbm_header(bytes, "P5");
  const auto px = netpbm_payload(bytes, h, 1);
  Tensor m({h.height, h.width});
  for (std::size_t k = 0; k < px.size(); ++k) m[k] = px[k] > 127 ? 1.0 : 0.0;
  return m;
}

void write_mask_pgm(const fs::path& path, const Tensor& mask) { write_file(path, encode_mask_pgm(mask)); }
Tensor read_mask_pgm(const fs::path& path) { return decode_mask_pgm(read_file(path)); }

void write_gray_pgm(const fs::path& path, const Tensor& image) {
  if (image.rank() != 2) throw ShapeError("gray image must be (H, W), got " + to_string(image.dims()));
  Bytes out = netpbm_header("P5", image.dim(1), image.dim(0));
  for (double v : image.data()) out.push_back(to_level(v));
  write_file(path, out);
}

Tensor read_gray_pgm(const fs::path& path) {
  const Bytes bytes = read_file(path);
  const Netpbm h = parse_netpbm_header(bytes, "P5");
  const auto px = netpbm_payload(bytes, h, 1);
  Tensor m({h.height, h.width});
  for (std::size_t k = 0; k < px.size(); ++k) m[k] = px[k] / static_cast<double>(h.maxval);
  return m;
}

Bytes encode_ppm(const Tensor& image) {
  if (image.rank() != 3 || image.dim(2) != 3) throw ShapeError("colour image must be (H, W, 3), got " + to_string(image.dims()));
  Bytes out = netpbm_header("P6", image.dim(1), image.dim(0));
  for (double v : image.data()) out.push_back(to_level(v));
  return out;
}

Tensor decode_ppm(std::span<const std::uint8_t> bytes) {
  const Netpbm h = parse_netpbm_header(bytes, "P6");
  const auto px = netpbm_payload(bytes, h, 3);
  Tensor img({h.height, h.width, 3});
  for (std::size_t k = 0; k < px.size(); ++k) img[k] = px[k] / static_cast<double>(h.maxval);
  return img;
}

void write_ppm(const fs::path& path, const Tensor& image) { write_file(path, encode_ppm(image)); }
Tensor read_ppm(const fs::path& path) { return decode_ppm(read_file(path)); }

// ---------------------------------------------------------------------------
// Metrics CSV

namespace {

std::string fixed6(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.6f", v);
  return buf;
}

double parse_real(std::string_view s, std::size_t line) {
  double v = 0.0;
  auto [p, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (ec != std::errc{} || p != s.data() + s.size()) {
    throw FormatError("bad number '" + std::string(s) + "' on line " + std::to_string(line), line);
  }
  return v;
}

std::vector<std::string_view> split(std::string_view s, char sep) {
  std::vector<std::string_view> out;
  std::size_t start = 0;
  for (;;) {
    const auto k = s.find(sep, start);
    out.push_back(s.substr(start, k == std::string_view::npos ? std::string_view::npos : k - start));
    if (k == std::string_view::npos) return out;
    start = k + 1;
  }
}

std::string_view trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string_view::npos) return {};
  return s.substr(b, s.find_last_not_of(" \t\r") - b + 1);
}

}  // namespace

std::string format_metrics_csv(const MetricReport& report) {
  if (report.per_video.empty()) throw ArgumentError("refusing to write an empty metric report");
  auto rows = report.per_video;
  std::sort(rows.begin(), rows.end(), [](const auto& a, const auto& b) { return a.video_id < b.video_id; });
  std::string out = "video_id,miou,fscore\n";
  for (const auto& r : rows) {
    if (r.video_id.find_first_of(",\n") != std::string::npos) throw ArgumentError("video id contains a separator");
    out += r.video_id + "," + fixed6(r.miou) + "," + fixed6(r.fscore) + "\n";
  }
  out += "ALL," + fixed6(report.miou) + "," + fixed6(report.fscore) + "\n";
  return out;
}

void write_metrics_csv(const fs::path& path, const MetricReport& report) {
  write_text(path, format_metrics_csv(report));
}

MetricReport parse_metrics_csv(std::string_view text) {
  auto lines = split(text, '\n');
  if (!lines.empty() && lines.back().empty()) lines.pop_back();
  if (lines.empty() || trim(lines[0]) != "video_id,miou,fscore") throw FormatError("missing CSV header", 0);
  MetricReport report;
  bool summary = false;
  for (std::size_t i = 1; i < lines.size(); ++i) {
    if (summary) throw FormatError("rows after summary", i + 1);
    const auto cells = split(trim(lines[i]), ',');
    if (cells.size() != 3) throw FormatError("expected 3 cells on line " + std::to_string(i + 1), i + 1);
    const double m = parse_real(cells[1], i + 1), f = parse_real(cells[2], i + 1);
    if (cells[0] == "ALL") {
      report.miou = m;
      report.fscore = f;
      summary = true;
    } else {
      report.per_video.push_back({std::string(cells[0]), m, f});
    }
  }
  if (!summary || report.per_video.empty()) throw FormatError("CSV lacks rows or summary", lines.size());
  return report;
}

MetricReport read_metrics_csv(const fs::path& path) { return parse_metrics_csv(read_text(path)); }

// ---------------------------------------------------------------------------
// Config

ConfigFile ConfigFile::parse(std::string_view text) {
  ConfigFile cfg;
  const auto lines = split(text, '\n');
  for (std::size_t i = 0; i < lines.size(); ++i) {
    std::string_view line = lines[i];
    if (const auto hash = line.find('#'); hash != std::string_view::npos) line = line.substr(0, hash);
    line = trim(line);
    if (line.empty()) continue;
    const std::string where = " on config line " + std::to_string(i + 1);
    const auto eq = line.find('=');
    if (eq == std::string_view::npos) throw ConfigError("expected 'key = value'" + where);
    const std::string key(trim(line.substr(0, eq)));
    const std::string value(trim(line.substr(eq + 1)));
    if (key.empty()) throw ConfigError("empty key" + where);
    if (key.find_first_of(" \t") != std::string::npos) throw ConfigError("key contains whitespace" + where);
    if (!cfg.entries_.emplace(key, value).second) throw ConfigError("duplicate key '" + key + "'" + where);
  }
  return cfg;
}

ConfigFile ConfigFile::load(const fs::path& path) { return parse(read_text(path)); }

bool ConfigFile::has(std::string_view key) const { return entries_.find(key) != entries_.end(); }

const std::string& ConfigFile::text(std::string_view key) const {
  const auto it = entries_.find(key);
  if (it == entries_.end()) throw ConfigError("missing config key '" + std::string(key) + "'");
  return it->second;
}

std::string ConfigFile::text_or(std::string_view key, std::string fallback) const {
  return has(key) ? text(key) : std::move(fallback);
}

namespace {

template <class T>
T parse_number(std::string_view s, std::string_view key) {
  T v{};
  auto [p, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (s.empty() || ec != std::errc{} || p != s.data() + s.size()) {
    throw ConfigError("config key '" + std::string(key) + "' has invalid value '" + std::string(s) + "'");
  }
  return v;
}

}  // namespace

double ConfigFile::real(std::string_view key) const { return parse_number<double>(text(key), key); }
std::int64_t ConfigFile::integer(std::string_view key) const { return parse_number<std::int64_t>(text(key), key); }
std::uint64_t ConfigFile::unsigned_integer(std::string_view key) const {
  return parse_number<std::uint64_t>(text(key), key);
}

std::vector<std::int64_t> ConfigFile::integers(std::string_view key) const {
  std::vector<std::int64_t> out;
  const std::string& v = text(key);
  if (trim(v).empty()) return out;
  for (auto cell : split(v, ',')) out.push_back(parse_number<std::int64_t>(trim(cell), key));
  return out;
}

void ConfigFile::set(std::string key, std::string value) { entries_[std::move(key)] = std::move(value); }

std::string ConfigFile::format() const {
  std::string out;
  for (const auto& [k, v] : entries_) out += k + " = " + v + "\n";
  return out;
}

}  // namespace avs
