#pragma once

// Datasets and spike-time encodings.

#include <zlib.h>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <iomanip>
#include <limits>
#include <random>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "evnn/network.hpp"

namespace evnn {

inline constexpr double kMaxInputTime = 30.0;

struct Sample {
  std::vector<InputSpike> spikes;
  std::size_t label = 0;
  double window_start = 0.0;

  TrialInput input() const { return {spikes, window_start}; }
};

struct Dataset {
  std::string name;
  std::size_t channels = 0;
  std::size_t classes = 0;
  std::vector<Sample> samples;

  std::size_t size() const { return samples.size(); }
};

// ---- encoders ----

// (0, x, y, 1 - x, 1 - y) * t_max
inline std::vector<InputSpike> encode_yinyang(double x, double y, double t_max = kMaxInputTime) {
  return {{0, 0.0}, {1, x * t_max}, {2, y * t_max}, {3, (1.0 - x) * t_max}, {4, (1.0 - y) * t_max}};
}

// Pixel k spikes at (1 - p/255) t_max; zero pixels never spike.
inline std::vector<InputSpike> encode_mnist(std::span<const std::uint8_t> pixels, double t_max = kMaxInputTime) {
  std::vector<InputSpike> out;
  out.reserve(pixels.size());
  for (std::size_t k = 0; k < pixels.size(); ++k) {
    const double t = pixels[k] > 0 ? (1.0 - pixels[k] / 255.0) * t_max : kSilent;
    out.push_back({k, t});
  }
  return out;
}

// ---- Yin-Yang ----

struct YinYangPoint {
  double x = 0.0;
  double y = 0.0;
  std::size_t label = 0;  // 0 yang, 1 yin, 2 dot
};

inline constexpr double kYinYangSmall = 0.1;
inline constexpr double kYinYangBig = 0.5;

inline std::size_t yinyang_class(double x, double y, double r_small = kYinYangSmall, double r_big = kYinYangBig) {
  const double d_right = std::hypot(x - 1.5 * r_big, y - r_big);
  const double d_left = std::hypot(x - 0.5 * r_big, y - r_big);
  if (d_right < r_small || d_left < r_small) return 2;
  const bool yin = d_right <= r_small || (d_left > r_small && d_left <= 0.5 * r_big) ||
                   (y > r_big && d_right > 0.5 * r_big);
  return yin ? 1 : 0;
}

namespace detail {

// Draw sequence of the reference generator: 32-bit Mersenne Twister, 53-bit
// doubles from two words, masked rejection for small integers.
struct LegacyRng {
  explicit LegacyRng(std::uint32_t seed) : mt(seed) {}
  double uniform() {
    const std::uint32_t a = static_cast<std::uint32_t>(mt()) >> 5;
    const std::uint32_t b = static_cast<std::uint32_t>(mt()) >> 6;
    return (a * 67108864.0 + b) / 9007199254740992.0;
  }
  std::uint32_t below(std::uint32_t n) {
    std::uint32_t mask = n - 1;
    for (int s = 1; s < 32; s <<= 1) mask |= mask >> s;
    while (true) {
      const std::uint32_t v = static_cast<std::uint32_t>(mt()) & mask;
      if (v < n) return v;
    }
  }
  std::mt19937 mt;
};

}  // namespace detail

// Class-balanced rejection sampling inside the big disk.
inline std::vector<YinYangPoint> generate_yinyang_points(std::size_t n, std::uint32_t seed) {
  detail::LegacyRng rng(seed);
  std::vector<YinYangPoint> out;
  out.reserve(n);
  for (std::size_t i = 0; i < n; ++i) {
    const std::size_t goal = rng.below(3);
    while (true) {
      const double x = rng.uniform() * 2.0 * kYinYangBig;
      const double y = rng.uniform() * 2.0 * kYinYangBig;
      if (std::hypot(x - kYinYangBig, y - kYinYangBig) > kYinYangBig) continue;
      const std::size_t c = yinyang_class(x, y);
      if (c != goal) continue;
      out.push_back({x, y, c});
      break;
    }
  }
  return out;
}

inline Dataset generate_yinyang(std::size_t n, std::uint32_t seed, double t_max = kMaxInputTime) {
  Dataset d{"yinyang", 5, 3, {}};
  for (const auto& p : generate_yinyang_points(n, seed)) d.samples.push_back({encode_yinyang(p.x, p.y, t_max), p.label, 0.0});
  return d;
}

struct Splits {
  Dataset train, val, test;
};

inline Splits yinyang_splits(std::size_t n_train = 5000, std::size_t n_val = 1000, std::size_t n_test = 1000) {
  return {generate_yinyang(n_train, 42), generate_yinyang(n_val, 41), generate_yinyang(n_test, 40)};
}

// ---- delayed XOR ----

struct XorOptions {
  double t_max = 60.0;
  double jitter = 1.0;  // spikes ~ U(t_x, t_x + jitter)
  std::size_t spikes_per_group = 3;
};

inline constexpr std::size_t kXorCueChannel = 6;

inline Dataset generate_delayed_xor(std::size_t n, std::uint64_t seed, const XorOptions& o = {}) {
  if (!(o.t_max > 0.0) || !(o.jitter >= 0.0)) throw std::invalid_argument("delayed xor: bad timing options");
  const std::size_t k = o.spikes_per_group;
  Dataset d{"xor", 3 * k, 2, {}};
  std::mt19937_64 rng(seed);
  for (std::size_t i = 0; i < n; ++i) {
    const double t0 = 0.0;
    const double t1 = unit_uniform(rng) * o.t_max / 3.0;
    const double t2 = t1 + unit_uniform(rng) * o.t_max / 3.0;
    const std::size_t b0 = rng() >> 63;
    const std::size_t b1 = rng() >> 63;
    Sample s;
    s.label = b0 ^ b1;
    auto group = [&](double t, std::size_t first_channel) {
      for (std::size_t j = 0; j < k; ++j) s.spikes.push_back({first_channel + j, t + unit_uniform(rng) * o.jitter});
    };
    group(t0, b0 * k);
    group(t1, b1 * k);
    group(t2, 2 * k);
    s.window_start = kSilent;
    for (const auto& sp : s.spikes)
      if (sp.channel >= 2 * k) s.window_start = std::min(s.window_start, sp.time);
    d.samples.push_back(std::move(s));
  }
  return d;
}

// Recomputes the readout window (first cue spike) of loaded XOR samples.
inline void set_xor_windows(Dataset& d) {
  const std::size_t cue = 2 * (d.channels / 3);
  for (auto& s : d.samples) {
    s.window_start = kSilent;
    for (const auto& sp : s.spikes)
      if (sp.channel >= cue) s.window_start = std::min(s.window_start, sp.time);
    if (!std::isfinite(s.window_start)) s.window_start = 0.0;
  }
}

// ---- IDX ----

class IdxError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct IdxFile {
  std::uint32_t magic = 0;
  std::vector<std::uint32_t> dims;
  std::vector<std::uint8_t> data;
};

inline constexpr std::uint32_t kIdxImages = 0x00000803;
inline constexpr std::uint32_t kIdxLabels = 0x00000801;

// Reads a whole file, inflating it when gzip-compressed.
inline std::vector<std::uint8_t> read_maybe_gzip(const std::string& path) {
  gzFile f = gzopen(path.c_str(), "rb");
  if (f == nullptr) throw IdxError("cannot open " + path);
  std::vector<std::uint8_t> out;
  std::uint8_t buf[1 << 16];
  while (true) {
    const int n = gzread(f, buf, sizeof buf);
    if (n < 0) {
      int code = 0;
      const std::string msg = gzerror(f, &code);
      gzclose(f);
      throw IdxError(path + ": " + msg);
    }
    if (n == 0) break;
    out.insert(out.end(), buf, buf + n);
  }
  gzclose(f);
  return out;
}

inline IdxFile parse_idx(const std::vector<std::uint8_t>& bytes, const std::string& what = "idx") {
  auto be32 = [&](std::size_t off) {
    return (std::uint32_t{bytes[off]} << 24) | (std::uint32_t{bytes[off + 1]} << 16) |
           (std::uint32_t{bytes[off + 2]} << 8) | std::uint32_t{bytes[off + 3]};
  };
  if (bytes.size() < 4) throw IdxError(what + ": truncated header (" + std::to_string(bytes.size()) + " bytes)");
  IdxFile f;
  f.magic = be32(0);
  if (f.magic != kIdxImages && f.magic != kIdxLabels) {
    std::ostringstream os;
    os << what << ": bad magic 0x" << std::hex << std::setw(8) << std::setfill('0') << f.magic;
    throw IdxError(os.str());
  }
  const std::size_t ndim = f.magic & 0xff;
  const std::size_t header = 4 + 4 * ndim;
  if (bytes.size() < header) {
    throw IdxError(what + ": truncated header, expected " + std::to_string(header) + " bytes, got " +
                   std::to_string(bytes.size()));
  }
  std::size_t expected = 1;
  for (std::size_t i = 0; i < ndim; ++i) {
    f.dims.push_back(be32(4 + 4 * i));
    expected *= f.dims.back();
  }
  const std::size_t actual = bytes.size() - header;
  if (actual != expected) {
    throw IdxError(what + ": payload size mismatch, expected " + std::to_string(expected) + " bytes, got " +
                   std::to_string(actual));
  }
  f.data.assign(bytes.begin() + static_cast<std::ptrdiff_t>(header), bytes.end());
  return f;
}

inline IdxFile read_idx(const std::string& path) { return parse_idx(read_maybe_gzip(path), path); }

struct MnistImages {
  std::size_t count = 0, rows = 0, cols = 0;
  std::vector<std::uint8_t> pixels;
  std::span<const std::uint8_t> image(std::size_t i) const { return {pixels.data() + i * rows * cols, rows * cols}; }
};

inline MnistImages read_mnist_images(const std::string& path) {
  IdxFile f = read_idx(path);
  if (f.magic != kIdxImages || f.dims.size() != 3) throw IdxError(path + ": not an image file");
  if (f.dims[1] != 28 || f.dims[2] != 28) {
    throw IdxError(path + ": expected 28x28 images, got " + std::to_string(f.dims[1]) + "x" + std::to_string(f.dims[2]));
  }
  return {f.dims[0], f.dims[1], f.dims[2], std::move(f.data)};
}

inline std::vector<std::uint8_t> read_mnist_labels(const std::string& path) {
  IdxFile f = read_idx(path);
  if (f.magic != kIdxLabels || f.dims.size() != 1) throw IdxError(path + ": not a label file");
  for (std::size_t i = 0; i < f.data.size(); ++i) {
    if (f.data[i] > 9) throw IdxError(path + ": label " + std::to_string(f.data[i]) + " at record " + std::to_string(i));
  }
  return std::move(f.data);
}

// Encodes records [begin, end) of an image/label pair.
inline Dataset mnist_dataset(const MnistImages& images, const std::vector<std::uint8_t>& labels, std::size_t begin,
                             std::size_t end, double t_max = kMaxInputTime) {
  if (images.count != labels.size()) {
    throw IdxError("image/label count mismatch: " + std::to_string(images.count) + " vs " +
                   std::to_string(labels.size()));
  }
  end = std::min(end, images.count);
  Dataset d{"mnist", images.rows * images.cols, 10, {}};
  for (std::size_t i = begin; i < end; ++i) {
    Sample s;
    for (const auto& sp : encode_mnist(images.image(i), t_max))
      if (std::isfinite(sp.time)) s.spikes.push_back(sp);
    s.label = labels[i];
    d.samples.push_back(std::move(s));
  }
  return d;
}

// ---- delimited text ----

inline std::string format_time(double t) {
  if (std::isinf(t)) return "inf";
  std::ostringstream os;
  os << std::setprecision(17) << t;
  return os.str();
}

// Header row, then one row per spike: sample,channel,time_ms,label.
inline void write_dataset_csv(const Dataset& d, std::ostream& os) {
  os << "sample,channel,time_ms,label\n";
  for (std::size_t i = 0; i < d.samples.size(); ++i)
    for (const auto& sp : d.samples[i].spikes)
      os << i << ',' << sp.channel << ',' << format_time(sp.time) << ',' << d.samples[i].label << '\n';
}

inline void write_dataset_csv(const Dataset& d, const std::string& path) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw std::runtime_error("cannot write " + path);
  write_dataset_csv(d, os);
}

inline Dataset read_dataset_csv(const std::string& path, std::string name, std::size_t channels, std::size_t classes) {
  std::ifstream is(path);
  if (!is) throw std::runtime_error("cannot read " + path);
  std::string line;
  std::getline(is, line);
  if (line.rfind("sample,channel,time_ms,label", 0) != 0) throw std::runtime_error(path + ": unexpected header");
  Dataset d{std::move(name), channels, classes, {}};
  std::size_t row = 1;
  while (std::getline(is, line)) {
    ++row;
    if (line.empty()) continue;
    std::istringstream ls(line);
    std::string f[4];
    for (auto& x : f)
      if (!std::getline(ls, x, ',')) throw std::runtime_error(path + ": malformed row " + std::to_string(row));
    const std::size_t id = std::stoul(f[0]);
    if (id >= d.samples.size()) d.samples.resize(id + 1);
    const double t = f[2] == "inf" ? kSilent : std::stod(f[2]);
    d.samples[id].spikes.push_back({std::stoul(f[1]), t});
    d.samples[id].label = std::stoul(f[3]);
  }
  if (d.name == "xor") set_xor_windows(d);
  return d;
}

}  // namespace evnn
