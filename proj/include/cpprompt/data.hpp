#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <numeric>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "cpprompt/error.hpp"
#include "cpprompt/io.hpp"

namespace cpprompt {

enum class Split : std::uint8_t { Train = 0, Test = 1 };

inline const char* to_string(Split s) { return s == Split::Train ? "train" : "test"; }

/// Labelled images of one domain split. Pixels are stored N×H×W×C in [0,1].
struct Dataset {
  std::size_t height = 16;
  std::size_t width = 16;
  std::size_t channels = 1;
  std::size_t classes = 0;
  int domain_id = 0;
  Split split = Split::Train;
  std::vector<int> labels;
  std::vector<float> pixels;

  std::size_t size() const { return labels.size(); }
  bool empty() const { return labels.empty(); }
  std::size_t image_size() const { return height * width * channels; }
  std::span<const float> image(std::size_t i) const { return {pixels.data() + i * image_size(), image_size()}; }
  std::span<float> image(std::size_t i) { return {pixels.data() + i * image_size(), image_size()}; }

  std::vector<std::size_t> class_counts() const {
    std::vector<std::size_t> counts(classes, 0);
    for (int y : labels) ++counts.at(static_cast<std::size_t>(y));
    return counts;
  }

  bool operator==(const Dataset&) const = default;
};

/// Shape of a generated split.
struct DatasetSpec {
  std::size_t classes = 5;
  std::size_t per_class = 200;
  std::size_t height = 16;
  std::size_t width = 16;
};

/// Label-preserving parametric image transform standing in for a style shift.
struct DomainTransform {
  enum class Kind { Identity, Inversion, AdditiveNoise, Blur, StripeMask, Quantize };

  Kind kind = Kind::Identity;
  /// sigma for AdditiveNoise, kernel size for Blur, period for StripeMask,
  /// level count for Quantize; unused otherwise.
  double strength = 0.0;
  std::uint64_t seed = 0;

  static DomainTransform identity() { return {Kind::Identity, 0.0, 0}; }
  static DomainTransform inversion() { return {Kind::Inversion, 0.0, 0}; }
  static DomainTransform noise(double sigma, std::uint64_t seed) { return {Kind::AdditiveNoise, sigma, seed}; }
  static DomainTransform blur(int kernel) { return {Kind::Blur, static_cast<double>(kernel), 0}; }
  static DomainTransform stripes(int period) { return {Kind::StripeMask, static_cast<double>(period), 0}; }
  static DomainTransform quantize(int levels) { return {Kind::Quantize, static_cast<double>(levels), 0}; }
};

inline std::string transform_name(DomainTransform::Kind k) {
  switch (k) {
    case DomainTransform::Kind::Identity: return "identity";
    case DomainTransform::Kind::Inversion: return "pixel-inversion";
    case DomainTransform::Kind::AdditiveNoise: return "additive-noise";
    case DomainTransform::Kind::Blur: return "blur";
    case DomainTransform::Kind::StripeMask: return "stripe-mask";
    case DomainTransform::Kind::Quantize: return "intensity-quantize";
  }
  return "unknown";
}

inline DomainTransform::Kind parse_transform_kind(const std::string& name) {
  using K = DomainTransform::Kind;
  for (K k : {K::Identity, K::Inversion, K::AdditiveNoise, K::Blur, K::StripeMask, K::Quantize})
    if (transform_name(k) == name) return k;
  throw ConfigError("unknown domain transform '" + name + "'");
}

namespace detail {

inline constexpr std::size_t kPrototypeCount = 10;

/// Renders one jittered instance of class prototype `cls` into a single-channel image.
template <typename Rng>
void render_prototype(std::size_t cls, std::size_t h, std::size_t w, Rng& rng, std::span<float> out) {
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  std::uniform_int_distribution<int> shift(-2, 2);
  const double amp = 0.7 + 0.3 * unit(rng);
  const double cy = static_cast<double>(h) / 2.0 - 0.5 + shift(rng);
  const double cx = static_cast<double>(w) / 2.0 - 0.5 + shift(rng);
  const int phase = std::uniform_int_distribution<int>(0, 3)(rng);
  const double radius = 4.5 + 1.5 * unit(rng);
  const double half = 3.0 + unit(rng);
  for (std::size_t y = 0; y < h; ++y) {
    for (std::size_t x = 0; x < w; ++x) {
      const double fy = static_cast<double>(y), fx = static_cast<double>(x);
      const int iy = static_cast<int>(y), ix = static_cast<int>(x);
      bool on = false;
      switch (cls) {
        case 0: on = ((iy + phase) % 4) < 2; break;                                    // horizontal bars
        case 1: on = std::abs(fy - cy) < 1.1 || std::abs(fx - cx) < 1.1; break;        // cross
        case 2: on = std::abs(std::hypot(fy - cy, fx - cx) - radius) < 0.9; break;     // ring
        case 3: on = (((iy + phase) / 4) + ((ix + phase) / 4)) % 2 == 0; break;        // checker
        case 4: on = ((ix + iy + phase) % 6) < 2; break;                               // diagonal stripes
        case 5: on = ((ix + phase) % 4) < 2; break;                                    // vertical bars
        case 6: on = std::abs(fy - cy) < half && std::abs(fx - cx) < half; break;      // filled square
        case 7: on = std::abs(std::abs(fy - cy) - std::abs(fx - cx)) < 1.0 &&
                     std::abs(fy - cy) < 6.0; break;                                   // X
        case 8: on = std::max(std::abs(fy - cy), std::abs(fx - cx)) < half + 1.5 &&
                     std::max(std::abs(fy - cy), std::abs(fx - cx)) > half; break;     // frame
        default: on = (iy + phase) % 4 == 0 && (ix + phase) % 4 == 0; break;           // dot grid
      }
      out[y * w + x] = static_cast<float>(on ? amp : 0.0);
    }
  }
  std::normal_distribution<double> jitter(0.0, 0.03);
  for (auto& p : out) p = static_cast<float>(std::clamp(p + jitter(rng), 0.0, 1.0));
}

inline std::uint64_t mix_seed(std::uint64_t a, std::uint64_t b) {
  std::seed_seq seq{static_cast<std::uint32_t>(a), static_cast<std::uint32_t>(a >> 32),
                    static_cast<std::uint32_t>(b), static_cast<std::uint32_t>(b >> 32)};
  std::uint32_t words[2];
  seq.generate(words, words + 2);
  return (static_cast<std::uint64_t>(words[0]) << 32) | words[1];
}

}  // namespace detail

/// Fresh procedural samples: `per_class` images of each class, shuffled.
inline Dataset generate_base(const DatasetSpec& spec, std::uint64_t seed, Split split = Split::Train) {
  if (spec.classes < 2) throw ConfigError("generate_base: need at least 2 classes");
  if (spec.classes > detail::kPrototypeCount) {
    throw ConfigError("generate_base: at most " + std::to_string(detail::kPrototypeCount) + " classes available");
  }
  if (spec.height < 4 || spec.width < 4) throw ConfigError("generate_base: images smaller than 4x4");
  std::mt19937_64 rng(seed);
  Dataset ds;
  ds.height = spec.height;
  ds.width = spec.width;
  ds.channels = 1;
  ds.classes = spec.classes;
  ds.split = split;
  const std::size_t n = spec.classes * spec.per_class;
  ds.labels.resize(n);
  for (std::size_t i = 0; i < n; ++i) ds.labels[i] = static_cast<int>(i % spec.classes);
  std::shuffle(ds.labels.begin(), ds.labels.end(), rng);
  ds.pixels.resize(n * ds.image_size());
  for (std::size_t i = 0; i < n; ++i)
    detail::render_prototype(static_cast<std::size_t>(ds.labels[i]), ds.height, ds.width, rng, ds.image(i));
  return ds;
}

/// Applies `t` in place. Labels are untouched; pixels end in [0,1].
inline void apply_transform(Dataset& ds, const DomainTransform& t) {
  using K = DomainTransform::Kind;
  std::mt19937_64 rng(t.seed);
  const std::size_t h = ds.height, w = ds.width, c = ds.channels;
  switch (t.kind) {
    case K::Identity: break;
    case K::Inversion:
      for (auto& p : ds.pixels) p = 1.0f - p;
      break;
    case K::AdditiveNoise: {
      if (t.strength < 0) throw ConfigError("additive-noise: negative sigma");
      std::normal_distribution<double> noise(0.0, t.strength);
      for (auto& p : ds.pixels) p = static_cast<float>(p + noise(rng));
      break;
    }
    case K::Blur: {
      const int k = static_cast<int>(t.strength);
      if (k < 1 || k % 2 == 0) throw ConfigError("blur: kernel size must be odd and positive");
      const int r = k / 2;
      std::vector<float> src;
      for (std::size_t i = 0; i < ds.size(); ++i) {
        auto img = ds.image(i);
        src.assign(img.begin(), img.end());
        for (std::size_t y = 0; y < h; ++y)
          for (std::size_t x = 0; x < w; ++x)
            for (std::size_t ch = 0; ch < c; ++ch) {
              double acc = 0.0;
              int cnt = 0;
              for (int dy = -r; dy <= r; ++dy)
                for (int dx = -r; dx <= r; ++dx) {
                  const int yy = static_cast<int>(y) + dy, xx = static_cast<int>(x) + dx;
                  if (yy < 0 || xx < 0 || yy >= static_cast<int>(h) || xx >= static_cast<int>(w)) continue;
                  acc += src[(static_cast<std::size_t>(yy) * w + static_cast<std::size_t>(xx)) * c + ch];
                  ++cnt;
                }
              img[(y * w + x) * c + ch] = static_cast<float>(acc / cnt);
            }
      }
      break;
    }
    case K::StripeMask: {
      const auto period = static_cast<std::size_t>(t.strength);
      if (period < 2) throw ConfigError("stripe-mask: period must be at least 2");
      for (std::size_t i = 0; i < ds.size(); ++i) {
        auto img = ds.image(i);
        for (std::size_t y = 0; y < h; y += period)
          std::fill_n(img.begin() + static_cast<std::ptrdiff_t>(y * w * c), w * c, 0.0f);
      }
      break;
    }
    case K::Quantize: {
      const double levels = t.strength;
      if (levels < 2) throw ConfigError("intensity-quantize: need at least 2 levels");
      for (auto& p : ds.pixels) p = static_cast<float>(std::round(p * (levels - 1)) / (levels - 1));
      break;
    }
  }
  for (auto& p : ds.pixels) p = std::clamp(p, 0.0f, 1.0f);
}

/// Fresh prototype samples for one domain, followed by its transform.
inline Dataset generate_domain(const DatasetSpec& spec, const DomainTransform& transform, std::uint64_t seed,
                               int domain_id, Split split) {
  Dataset ds = generate_base(spec, seed, split);
  ds.domain_id = domain_id;
  DomainTransform t = transform;
  t.seed = detail::mix_seed(transform.seed, seed);
  apply_transform(ds, t);
  return ds;
}

/// Ordered list of domain transforms plus split sizes.
struct StreamSpec {
  std::size_t classes = 5;
  std::size_t train_per_class = 200;
  std::size_t test_per_class = 100;
  std::size_t height = 16;
  std::size_t width = 16;
  std::vector<DomainTransform> domains;
};

/// noise(σ=0.3), inversion, stripe-mask(period 2).
inline StreamSpec default_stream() {
  StreamSpec s;
  s.domains = {DomainTransform::noise(0.3, 11), DomainTransform::inversion(), DomainTransform::stripes(2)};
  return s;
}

struct DomainSplits {
  int id = 0;
  DomainTransform transform;
  Dataset train;
  Dataset test;
};

/// Domains are numbered from 1 in stream order.
inline std::vector<DomainSplits> generate_stream(const StreamSpec& spec, std::uint64_t seed) {
  if (spec.domains.empty()) throw ConfigError("domain stream is empty");
  std::vector<DomainSplits> out;
  for (std::size_t s = 0; s < spec.domains.size(); ++s) {
    DomainSplits d;
    d.id = static_cast<int>(s + 1);
    d.transform = spec.domains[s];
    const DatasetSpec train{spec.classes, spec.train_per_class, spec.height, spec.width};
    const DatasetSpec test{spec.classes, spec.test_per_class, spec.height, spec.width};
    d.train = generate_domain(train, d.transform, detail::mix_seed(seed, 2 * s), d.id, Split::Train);
    d.test = generate_domain(test, d.transform, detail::mix_seed(seed, 2 * s + 1), d.id, Split::Test);
    out.push_back(std::move(d));
  }
  return out;
}

// ---------------------------------------------------------------------------
// "DILD" dataset file
//
//   magic "DILD" | version u16 | H u32 | W u32 | C u32 | U u32 | N u32 |
//   domain_id i32 | split u8 | labels u16[N] | pixels f32[N·H·W·C] | CRC-32 u32

namespace dild {

inline constexpr char kMagic[4] = {'D', 'I', 'L', 'D'};
inline constexpr std::uint16_t kVersion = 1;

inline void save(const std::filesystem::path& path, const Dataset& ds) {
  detail::ByteWriter w;
  w.put_bytes(kMagic, 4);
  w.put<std::uint16_t>(kVersion);
  for (auto v : {ds.height, ds.width, ds.channels, ds.classes, ds.size()}) w.put<std::uint32_t>(static_cast<std::uint32_t>(v));
  w.put<std::int32_t>(ds.domain_id);
  w.put<std::uint8_t>(static_cast<std::uint8_t>(ds.split));
  for (int y : ds.labels) w.put<std::uint16_t>(static_cast<std::uint16_t>(y));
  w.put_bytes(ds.pixels.data(), ds.pixels.size() * sizeof(float));
  w.finish(path);
}

inline Dataset load(const std::filesystem::path& path) {
  const auto file = detail::read_file(path);
  const std::string ctx = "DILD " + path.string();
  if (file.size() < 4 || std::memcmp(file.data(), kMagic, 4) != 0) throw FormatError(ctx + ": bad magic");
  if (file.size() >= 6) {
    std::uint16_t version;
    std::memcpy(&version, file.data() + 4, sizeof(version));
    if (version != kVersion) throw VersionError(ctx + ": unsupported version " + std::to_string(version));
  }
  auto body = detail::verified_body(file, 27, ctx);
  detail::ByteReader r(body, ctx);
  r.get<std::uint32_t>();
  r.get<std::uint16_t>();
  Dataset ds;
  ds.height = r.get<std::uint32_t>();
  ds.width = r.get<std::uint32_t>();
  ds.channels = r.get<std::uint32_t>();
  ds.classes = r.get<std::uint32_t>();
  const std::size_t n = r.get<std::uint32_t>();
  ds.domain_id = r.get<std::int32_t>();
  const auto split = r.get<std::uint8_t>();
  if (split > 1) throw CorruptionError(ctx + ": bad split tag");
  ds.split = static_cast<Split>(split);
  ds.labels.resize(n);
  for (auto& y : ds.labels) {
    y = r.get<std::uint16_t>();
    if (static_cast<std::size_t>(y) >= ds.classes) throw CorruptionError(ctx + ": label out of range");
  }
  ds.pixels.resize(n * ds.image_size());
  if (ds.pixels.size() * sizeof(float) != r.remaining()) throw CorruptionError(ctx + ": pixel block size mismatch");
  r.get_bytes(ds.pixels.data(), ds.pixels.size() * sizeof(float));
  return ds;
}

}  // namespace dild

}  // namespace cpprompt
