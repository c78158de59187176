#pragma once

// Synthetic six-class maturity dataset, ImageFolder-style indexing,
// group-aware splitting and deterministic image loading.
//
// Layout: root/<ClassName>/<group>_<orientation>_<lighting>.ppm, with an
// optional root/labels.json mapping class names to indices.

#include <algorithm>
#include <array>
#include <cctype>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <numbers>
#include <optional>
#include <set>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include <nlohmann/json.hpp>

#include "rcmp/image_set.hpp"
#include "rcmp/model.hpp"
#include "rcmp/rng.hpp"
#include "rcmp/tensor.hpp"

namespace rcmp {

class DatasetError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

inline constexpr std::array<std::string_view, 6> kMaturityClasses{"Green", "Breaker", "Pink",
                                                                  "LightRed", "Red", "OverMature"};
inline constexpr std::array<std::string_view, 6> kOrientations{"frontal", "dorsal", "up", "down", "left", "right"};
inline constexpr std::array<std::string_view, 2> kLightings{"on", "off"};

// ---------------------------------------------------------------------------
// PPM (binary P6, maxval 255)

struct RgbImage {
  int width = 0, height = 0;
  std::vector<std::uint8_t> rgb;  // row-major, interleaved

  bool operator==(const RgbImage&) const = default;
};

inline std::string encode_ppm(const RgbImage& img) {
  if (img.rgb.size() != static_cast<std::size_t>(img.width) * img.height * 3)
    throw std::invalid_argument("encode_ppm: pixel buffer does not match dimensions");
  std::string out = "P6\n" + std::to_string(img.width) + " " + std::to_string(img.height) + "\n255\n";
  out.append(reinterpret_cast<const char*>(img.rgb.data()), img.rgb.size());
  return out;
}

inline RgbImage decode_ppm(std::string_view bytes, const std::string& origin = "<memory>") {
  std::size_t pos = 0;
  auto fail = [&](const std::string& why) -> RgbImage { throw DatasetError(origin + ": malformed PPM: " + why); };
  auto skip_space = [&] {
    while (pos < bytes.size()) {
      if (bytes[pos] == '#') {
        while (pos < bytes.size() && bytes[pos] != '\n') ++pos;
      } else if (std::isspace(static_cast<unsigned char>(bytes[pos]))) {
        ++pos;
      } else {
        break;
      }
    }
  };
  auto number = [&]() -> long {
    skip_space();
    const auto start = pos;
    while (pos < bytes.size() && std::isdigit(static_cast<unsigned char>(bytes[pos]))) ++pos;
    if (start == pos || pos - start > 9) return -1;
    return std::stol(std::string(bytes.substr(start, pos - start)));
  };
  if (bytes.substr(0, 2) != "P6") return fail("missing P6 magic");
  pos = 2;
  const long w = number(), h = number(), maxval = number();
  if (w <= 0 || h <= 0) return fail("bad dimensions");
  if (maxval != 255) return fail("only maxval 255 is supported");
  if (pos >= bytes.size() || !std::isspace(static_cast<unsigned char>(bytes[pos]))) return fail("bad header terminator");
  ++pos;
  const auto need = static_cast<std::size_t>(w) * static_cast<std::size_t>(h) * 3;
  if (bytes.size() - pos != need)
    return fail("expected " + std::to_string(need) + " pixel bytes, found " + std::to_string(bytes.size() - pos));
  RgbImage img{static_cast<int>(w), static_cast<int>(h), {}};
  img.rgb.assign(reinterpret_cast<const std::uint8_t*>(bytes.data() + pos),
                 reinterpret_cast<const std::uint8_t*>(bytes.data() + bytes.size()));
  return img;
}

inline RgbImage read_ppm(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DatasetError(path.string() + ": cannot open");
  std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return decode_ppm(bytes, path.string());
}

inline void write_ppm(const std::filesystem::path& path, const RgbImage& img) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  const auto bytes = encode_ppm(img);
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw DatasetError(path.string() + ": write failed");
}

// ---------------------------------------------------------------------------
// Index

struct SampleRecord {
  std::filesystem::path path;
  int class_index = 0;
  std::string class_name;
  std::string group_id;  // "<ClassName>/<group>"
  std::string orientation;
  std::string lighting;

  bool operator==(const SampleRecord&) const = default;
};

struct DatasetIndex {
  std::vector<SampleRecord> records;
  std::vector<std::string> class_names;  // index -> name
  std::vector<std::string> warnings;

  std::size_t size() const noexcept { return records.size(); }
  std::vector<int> labels() const {
    std::vector<int> out;
    for (const auto& r : records) out.push_back(r.class_index);
    return out;
  }
  std::set<std::string> groups() const {
    std::set<std::string> g;
    for (const auto& r : records) g.insert(r.group_id);
    return g;
  }
};

// ---------------------------------------------------------------------------
// Synthetic generator

struct GeneratorConfig {
  int groups_per_class = 25;
  std::uint64_t seed = 0;
  int image_size = 64;
  double lighting_off_factor = 0.6;
  double noise_sigma = 8.0 / 255.0;
};

inline void to_json(nlohmann::json& j, const GeneratorConfig& c) {
  j = nlohmann::json{{"groups_per_class", c.groups_per_class},
                     {"seed", c.seed},
                     {"image_size", c.image_size},
                     {"lighting_off_factor", c.lighting_off_factor},
                     {"noise_sigma", c.noise_sigma}};
}

namespace detail {

// Base colors along the green -> red -> dark-red ramp, 0..255.
inline constexpr std::array<std::array<double, 3>, 6> kClassColors{{
    {70, 150, 50},    // Green
    {150, 170, 70},   // Breaker
    {220, 135, 120},  // Pink
    {230, 90, 60},    // LightRed
    {200, 30, 30},    // Red
    {110, 35, 45},    // OverMature
}};
inline constexpr std::array<double, 3> kBackground{190, 190, 180};

struct GroupTraits {
  std::array<double, 3> color;
  double radius;  // fraction of the image side
  double aspect;
};

inline GroupTraits group_traits(int cls, const std::string& group_id, std::uint64_t seed) {
  Rng rng(derive_seed(seed, "group/" + group_id));
  GroupTraits t{};
  for (int c = 0; c < 3; ++c)
    t.color[static_cast<std::size_t>(c)] = kClassColors[static_cast<std::size_t>(cls)][static_cast<std::size_t>(c)] + rng.uniform(-10.0, 10.0);
  t.radius = 0.30 * rng.uniform(0.9, 1.1);
  t.aspect = rng.uniform(0.8, 0.95);
  return t;
}

inline RgbImage render_sample(const GroupTraits& g, int orientation, bool light_on, const std::string& stream,
                              const GeneratorConfig& cfg) {
  // Orientation sets the ellipse rotation and a small center offset.
  static constexpr std::array<double, 6> kAngle{0, 90, 30, 150, 60, 120};
  static constexpr std::array<std::array<double, 2>, 6> kOffset{{{0, 0}, {0, 0}, {0, -0.06}, {0, 0.06}, {-0.06, 0}, {0.06, 0}}};
  const int S = cfg.image_size;
  const double cx = S * (0.5 + kOffset[static_cast<std::size_t>(orientation)][0]);
  const double cy = S * (0.5 + kOffset[static_cast<std::size_t>(orientation)][1]);
  const double a = g.radius * S, b = a * g.aspect;
  const double th = kAngle[static_cast<std::size_t>(orientation)] * std::numbers::pi / 180.0;
  const double ct = std::cos(th), st = std::sin(th);
  const double light = light_on ? 1.0 : cfg.lighting_off_factor;
  Rng rng(derive_seed(cfg.seed, "pixels/" + stream));
  RgbImage img{S, S, std::vector<std::uint8_t>(static_cast<std::size_t>(S) * S * 3)};
  for (int y = 0; y < S; ++y) {
    for (int x = 0; x < S; ++x) {
      const double dx = x + 0.5 - cx, dy = y + 0.5 - cy;
      const double u = (dx * ct + dy * st) / a, v = (-dx * st + dy * ct) / b;
      const double r2 = u * u + v * v;
      for (int c = 0; c < 3; ++c) {
        double val;
        if (r2 <= 1.0) {
          // Mild radial shading so the fruit reads as a sphere.
          val = g.color[static_cast<std::size_t>(c)] * (1.0 - 0.25 * r2);
        } else {
          val = kBackground[static_cast<std::size_t>(c)];
        }
        val = val * light + rng.normal() * cfg.noise_sigma * 255.0;
        img.rgb[(static_cast<std::size_t>(y) * S + x) * 3 + c] =
            static_cast<std::uint8_t>(std::clamp(std::nearbyint(val), 0.0, 255.0));
      }
    }
  }
  return img;
}

inline std::string group_label(int g) {
  char buf[16];
  std::snprintf(buf, sizeof buf, "g%02d", g);
  return buf;
}

}  // namespace detail

inline nlohmann::json labels_json(const std::vector<std::string>& class_names) {
  nlohmann::json j = nlohmann::json::object();
  for (std::size_t i = 0; i < class_names.size(); ++i) j[class_names[i]] = i;
  return j;
}

/// Writes 6 x groups x 6 orientations x 2 lightings images plus labels.json
/// (ramp order) and dataset_manifest.json. Every pixel stream is seeded from
/// (seed, file identity), so output is independent of generation order.
inline DatasetIndex load_index(const std::filesystem::path& root);

inline DatasetIndex generate_synthetic(const std::filesystem::path& out_dir, const GeneratorConfig& cfg = {}) {
  if (cfg.groups_per_class <= 0) throw std::invalid_argument("generate_synthetic: groups_per_class must be positive");
  if (cfg.image_size <= 0) throw std::invalid_argument("generate_synthetic: image_size must be positive");
  namespace fs = std::filesystem;
  std::error_code ec;
  fs::create_directories(out_dir, ec);
  if (ec || !fs::is_directory(out_dir)) throw DatasetError(out_dir.string() + ": cannot create directory");
  std::vector<std::string> names(kMaturityClasses.begin(), kMaturityClasses.end());
  for (int cls = 0; cls < 6; ++cls) {
    const auto dir = out_dir / names[static_cast<std::size_t>(cls)];
    fs::create_directories(dir, ec);
    if (ec) throw DatasetError(dir.string() + ": cannot create directory");
    for (int g = 0; g < cfg.groups_per_class; ++g) {
      const auto group = detail::group_label(g);
      const auto traits = detail::group_traits(cls, names[static_cast<std::size_t>(cls)] + "/" + group, cfg.seed);
      for (int o = 0; o < 6; ++o) {
        for (int l = 0; l < 2; ++l) {
          const std::string file = group + "_" + std::string(kOrientations[static_cast<std::size_t>(o)]) + "_" +
                                   std::string(kLightings[static_cast<std::size_t>(l)]) + ".ppm";
          write_ppm(dir / file, detail::render_sample(traits, o, l == 0, names[static_cast<std::size_t>(cls)] + "/" + file, cfg));
        }
      }
    }
  }
  auto write_json = [&](const fs::path& p, const nlohmann::json& j) {
    std::ofstream out(p, std::ios::trunc);
    out << j.dump(2) << '\n';
    if (!out) throw DatasetError(p.string() + ": write failed");
  };
  write_json(out_dir / "labels.json", labels_json(names));
  write_json(out_dir / "dataset_manifest.json",
             {{"generator", cfg},
              {"classes", names},
              {"orientations", kOrientations},
              {"lightings", kLightings},
              {"images", 6 * cfg.groups_per_class * 12}});
  return load_index(out_dir);
}

/// Class indices follow labels.json when present, otherwise the sorted
/// directory names. Records are sorted by path. A .ppm whose name does not
/// parse as <group>_<orientation>_<lighting> gets a warning and a singleton
/// group; other files are skipped with a warning.
inline DatasetIndex load_index(const std::filesystem::path& root) {
  namespace fs = std::filesystem;
  if (!fs::is_directory(root)) throw DatasetError(root.string() + ": not a directory");
  std::vector<std::string> dirs;
  for (const auto& e : fs::directory_iterator(root))
    if (e.is_directory()) dirs.push_back(e.path().filename().string());
  std::sort(dirs.begin(), dirs.end());
  if (dirs.empty()) throw DatasetError(root.string() + ": no class directories");

  DatasetIndex idx;
  std::map<std::string, int> class_of;
  if (fs::exists(root / "labels.json")) {
    nlohmann::json j;
    try {
      std::ifstream in(root / "labels.json");
      j = nlohmann::json::parse(in);
    } catch (const nlohmann::json::exception& e) {
      throw DatasetError((root / "labels.json").string() + ": " + e.what());
    }
    idx.class_names.assign(j.size(), "");
    for (const auto& [name, v] : j.items()) {
      if (!v.is_number_integer() || v.get<int>() < 0 || v.get<std::size_t>() >= j.size() ||
          !idx.class_names[v.get<std::size_t>()].empty())
        throw DatasetError((root / "labels.json").string() + ": indices must be a permutation of 0.." +
                           std::to_string(j.size() - 1));
      idx.class_names[v.get<std::size_t>()] = name;
      class_of[name] = v.get<int>();
    }
    for (const auto& d : dirs)
      if (!class_of.count(d)) throw DatasetError(root.string() + ": directory '" + d + "' is not listed in labels.json");
  } else {
    idx.class_names = dirs;
    for (std::size_t i = 0; i < dirs.size(); ++i) class_of[dirs[i]] = static_cast<int>(i);
  }

  const std::set<std::string_view> orientations(kOrientations.begin(), kOrientations.end());
  const std::set<std::string_view> lightings(kLightings.begin(), kLightings.end());
  for (const auto& d : dirs) {
    std::vector<fs::path> files;
    for (const auto& e : fs::directory_iterator(root / d))
      if (e.is_regular_file()) files.push_back(e.path());
    std::sort(files.begin(), files.end());
    for (const auto& f : files) {
      if (f.extension() != ".ppm") {
        idx.warnings.push_back(f.string() + ": not a .ppm file, skipped");
        continue;
      }
      SampleRecord r{f, class_of.at(d), d, {}, {}, {}};
      const auto stem = f.stem().string();
      const auto p2 = stem.rfind('_');
      const auto p1 = p2 == std::string::npos || p2 == 0 ? std::string::npos : stem.rfind('_', p2 - 1);
      if (p1 != std::string::npos && p1 > 0 && orientations.count(stem.substr(p1 + 1, p2 - p1 - 1)) &&
          lightings.count(stem.substr(p2 + 1))) {
        r.group_id = d + "/" + stem.substr(0, p1);
        r.orientation = stem.substr(p1 + 1, p2 - p1 - 1);
        r.lighting = stem.substr(p2 + 1);
      } else {
        idx.warnings.push_back(f.string() + ": name does not match <group>_<orientation>_<lighting>.ppm; using a singleton group");
        r.group_id = d + "/" + stem;
      }
      idx.records.push_back(std::move(r));
    }
  }
  std::sort(idx.records.begin(), idx.records.end(), [](const auto& a, const auto& b) { return a.path < b.path; });
  return idx;
}

// ---------------------------------------------------------------------------
// Group-aware split

struct SplitSpec {
  double train = 0.8, val = 0.1, test = 0.1;
  std::uint64_t seed = 0;

  void validate() const {
    for (double f : {train, val, test})
      if (!(f >= 0.0 && f <= 1.0)) throw ConfigError("split fractions must lie in [0, 1]");
    if (std::abs(train + val + test - 1.0) > 1e-9) throw ConfigError("split fractions must sum to 1");
  }
};

struct DatasetSplit {
  DatasetIndex train, val, test;
};

/// Group counts per split for n groups: floors of fraction * n, with the
/// remainder handed out by largest fractional part (ties go to test, then
/// val, then train).
inline std::array<std::size_t, 3> split_counts(std::size_t n, const SplitSpec& s) {
  const std::array<double, 3> f{s.train, s.val, s.test};
  std::array<std::size_t, 3> counts{};
  std::array<double, 3> frac{};
  std::size_t used = 0;
  for (std::size_t i = 0; i < 3; ++i) {
    const double exact = f[i] * static_cast<double>(n);
    counts[i] = static_cast<std::size_t>(std::floor(exact + 1e-9));
    frac[i] = exact - static_cast<double>(counts[i]);
    used += counts[i];
  }
  std::array<std::size_t, 3> order{2, 1, 0};
  std::stable_sort(order.begin(), order.end(), [&](auto a, auto b) { return frac[a] > frac[b] + 1e-12; });
  for (std::size_t k = 0; used < n; ++k, ++used) ++counts[order[k % 3]];
  return counts;
}

/// Shuffles each class's groups with the seed and partitions them, so every
/// image of a group lands in exactly one split.
inline DatasetSplit group_split(const DatasetIndex& index, const SplitSpec& spec) {
  spec.validate();
  std::map<int, std::vector<std::string>> groups_by_class;
  {
    std::map<int, std::set<std::string>> seen;
    for (const auto& r : index.records) seen[r.class_index].insert(r.group_id);
    for (auto& [c, g] : seen) groups_by_class[c].assign(g.begin(), g.end());
  }
  std::map<std::string, int> split_of;
  const std::array<double, 3> fractions{spec.train, spec.val, spec.test};
  static constexpr std::array<std::string_view, 3> kSplitNames{"train", "val", "test"};
  for (auto& [c, groups] : groups_by_class) {
    Rng rng(derive_seed(spec.seed, "split/" + std::to_string(c)));
    rng.shuffle(groups.begin(), groups.end());
    const auto counts = split_counts(groups.size(), spec);
    std::size_t k = 0;
    for (int s = 0; s < 3; ++s) {
      if (fractions[static_cast<std::size_t>(s)] > 0.0 && counts[static_cast<std::size_t>(s)] == 0)
        throw ConfigError("group_split: class " + std::to_string(c) + " has " + std::to_string(groups.size()) +
                          " groups, too few to give the " + std::string(kSplitNames[static_cast<std::size_t>(s)]) +
                          " split any");
      for (std::size_t i = 0; i < counts[static_cast<std::size_t>(s)]; ++i) split_of[groups[k++]] = s;
    }
  }
  DatasetSplit out;
  for (auto* part : {&out.train, &out.val, &out.test}) part->class_names = index.class_names;
  for (const auto& r : index.records) {
    const int s = split_of.at(r.group_id);
    (s == 0 ? out.train : s == 1 ? out.val : out.test).records.push_back(r);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Loading

struct Normalization {
  double mean = 0.5, stddev = 0.5;
};

/// Nearest-neighbor resize (source pixel at floor((d + 0.5) * in / out)),
/// scaling to [0, 1] and (x - mean) / std. Output is 3 x S x S.
inline void image_to_chw(const RgbImage& img, int S, const Normalization& norm, float* dst) {
  for (int y = 0; y < S; ++y) {
    const int sy = std::min(img.height - 1, static_cast<int>((y + 0.5) * img.height / S));
    for (int x = 0; x < S; ++x) {
      const int sx = std::min(img.width - 1, static_cast<int>((x + 0.5) * img.width / S));
      for (int c = 0; c < 3; ++c) {
        const double v = img.rgb[(static_cast<std::size_t>(sy) * img.width + sx) * 3 + c] / 255.0;
        dst[(static_cast<std::size_t>(c) * S + y) * S + x] = static_cast<float>((v - norm.mean) / norm.stddev);
      }
    }
  }
}

inline Tensor<float> load_batch(const std::vector<SampleRecord>& records, int input_size, const Normalization& norm = {}) {
  if (records.empty()) throw std::invalid_argument("load_batch: no records");
  if (input_size <= 0) throw std::invalid_argument("load_batch: input size must be positive");
  const auto per = static_cast<std::size_t>(3) * input_size * input_size;
  Tensor<float> out(Shape{static_cast<std::int64_t>(records.size()), 3, input_size, input_size});
  for (std::size_t i = 0; i < records.size(); ++i) image_to_chw(read_ppm(records[i].path), input_size, norm, out.data() + i * per);
  return out;
}

inline ImageSet load_image_set(const DatasetIndex& index, int input_size, const Normalization& norm = {}) {
  ImageSet set;
  set.image_shape = Shape{3, input_size, input_size};
  if (index.records.empty()) return set;
  const auto per = static_cast<std::size_t>(3) * input_size * input_size;
  set.pixels.resize(index.records.size() * per);
  for (std::size_t i = 0; i < index.records.size(); ++i) {
    image_to_chw(read_ppm(index.records[i].path), input_size, norm, set.pixels.data() + i * per);
    set.labels.push_back(index.records[i].class_index);
  }
  return set;
}

}  // namespace rcmp
