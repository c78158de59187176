#include <gtest/gtest.h>

#include <fstream>
#include <iterator>

#include "fixtures.hpp"
#include "rcmp/dataset.hpp"

using namespace rcmp;
namespace fs = std::filesystem;

namespace {

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

std::size_t count_files(const fs::path& root, const std::string& ext) {
  std::size_t n = 0;
  for (const auto& e : fs::recursive_directory_iterator(root)) n += e.is_regular_file() && e.path().extension() == ext;
  return n;
}

/// Index with `groups` groups of 12 images per class; no files behind it.
DatasetIndex synthetic_index(int groups) {
  DatasetIndex idx;
  idx.class_names.assign(kMaturityClasses.begin(), kMaturityClasses.end());
  for (int c = 0; c < 6; ++c)
    for (int g = 0; g < groups; ++g)
      for (int i = 0; i < 12; ++i) {
        SampleRecord r;
        r.class_index = c;
        r.class_name = idx.class_names[static_cast<std::size_t>(c)];
        r.group_id = r.class_name + "/g" + std::to_string(g);
        r.path = r.group_id + "_" + std::to_string(i) + ".ppm";
        idx.records.push_back(r);
      }
  return idx;
}

std::map<std::string, int> owner_of_groups(const DatasetSplit& s, bool& conflict) {
  std::map<std::string, int> owner;
  conflict = false;
  int k = 0;
  for (const auto* part : {&s.train, &s.val, &s.test}) {
    for (const auto& r : part->records) {
      auto [it, fresh] = owner.emplace(r.group_id, k);
      if (!fresh && it->second != k) conflict = true;
    }
    ++k;
  }
  return owner;
}

}  // namespace

// ---------------------------------------------------------------------------
// Generator

TEST(Generator, OneGroupPerClassGivesSeventyTwoFiles) {
  fixture::TempDir dir("gen1");
  GeneratorConfig cfg;
  cfg.groups_per_class = 1;
  cfg.image_size = 16;
  const auto idx = generate_synthetic(dir.path(), cfg);
  EXPECT_EQ(count_files(dir.path(), ".ppm"), 72u);
  EXPECT_EQ(idx.size(), 72u);
  EXPECT_TRUE(idx.warnings.empty());
  EXPECT_EQ(idx.class_names, (std::vector<std::string>{"Green", "Breaker", "Pink", "LightRed", "Red", "OverMature"}));
  EXPECT_TRUE(fs::exists(dir / "labels.json"));
  EXPECT_EQ(nlohmann::json::parse(slurp(dir / "dataset_manifest.json")).at("images"), 72);
}

TEST(Generator, DefaultsGiveEighteenHundredBalancedImages) {
  fixture::TempDir dir("gen25");
  const auto idx = generate_synthetic(dir.path());
  EXPECT_EQ(count_files(dir.path(), ".ppm"), 1800u);
  EXPECT_EQ(idx.groups().size(), 150u);
  std::map<std::tuple<int, std::string, std::string>, int> cells;
  for (const auto& r : idx.records) ++cells[{r.class_index, r.orientation, r.lighting}];
  EXPECT_EQ(cells.size(), 6u * 6u * 2u);
  for (const auto& [k, n] : cells) EXPECT_EQ(n, 25);
  EXPECT_EQ(read_ppm(idx.records[0].path).width, 64);
}

TEST(Generator, SameSeedIsByteIdentical) {
  fixture::TempDir a("genA"), b("genB"), c("genC");
  GeneratorConfig cfg;
  cfg.groups_per_class = 1;
  cfg.image_size = 12;
  cfg.seed = 5;
  const auto ia = generate_synthetic(a.path(), cfg), ib = generate_synthetic(b.path(), cfg);
  cfg.seed = 6;
  const auto ic = generate_synthetic(c.path(), cfg);
  ASSERT_EQ(ia.size(), ib.size());
  bool any_differs = false;
  for (std::size_t i = 0; i < ia.size(); ++i) {
    EXPECT_EQ(slurp(ia.records[i].path), slurp(ib.records[i].path)) << ia.records[i].path;
    any_differs |= slurp(ia.records[i].path) != slurp(ic.records[i].path);
  }
  EXPECT_TRUE(any_differs);
}

TEST(Generator, LightingOffIsDarker) {
  fixture::TempDir dir("genlight");
  GeneratorConfig cfg;
  cfg.groups_per_class = 1;
  cfg.image_size = 24;
  cfg.noise_sigma = 0;
  const auto idx = generate_synthetic(dir.path(), cfg);
  auto brightness = [](const RgbImage& im) {
    double s = 0;
    for (auto v : im.rgb) s += v;
    return s / static_cast<double>(im.rgb.size());
  };
  const auto on = read_ppm(dir / "Red" / "g00_frontal_on.ppm"), off = read_ppm(dir / "Red" / "g00_frontal_off.ppm");
  EXPECT_NEAR(brightness(off) / brightness(on), 0.6, 0.01);
}

TEST(Generator, InvalidConfigRejected) {
  fixture::TempDir dir("genbad");
  GeneratorConfig cfg;
  cfg.groups_per_class = 0;
  EXPECT_THROW(generate_synthetic(dir.path(), cfg), std::invalid_argument);
  EXPECT_THROW(generate_synthetic("/proc/rcmp_not_writable", GeneratorConfig{}), DatasetError);
}

// ---------------------------------------------------------------------------
// Index

TEST(Index, SortedDirectoriesWithoutLabelsFile) {
  fixture::TempDir dir("idxsort");
  const RgbImage px{1, 1, {1, 2, 3}};
  for (const char* d : {"zeta", "alpha", "mid"}) {
    fs::create_directories(dir / d);
    write_ppm(dir / d / "s1_up_on.ppm", px);
  }
  const auto idx = load_index(dir.path());
  EXPECT_EQ(idx.class_names, (std::vector<std::string>{"alpha", "mid", "zeta"}));
  EXPECT_EQ(idx.labels(), (std::vector<int>{0, 1, 2}));
}

TEST(Index, LabelsFileOverridesOrder) {
  fixture::TempDir dir("idxlabels");
  const RgbImage px{1, 1, {1, 2, 3}};
  for (const char* d : {"a", "b"}) {
    fs::create_directories(dir / d);
    write_ppm(dir / d / "s1_up_on.ppm", px);
  }
  std::ofstream(dir / "labels.json") << R"({"a": 1, "b": 0})";
  const auto idx = load_index(dir.path());
  EXPECT_EQ(idx.class_names, (std::vector<std::string>{"b", "a"}));
  EXPECT_EQ(idx.records[0].class_index, 1);
  std::ofstream(dir / "labels.json", std::ios::trunc) << R"({"a": 0, "b": 0})";
  EXPECT_THROW(load_index(dir.path()), DatasetError);
}

TEST(Index, TwoFileFixture) {
  fixture::TempDir dir("idxfix");
  fs::create_directories(dir / "Pink");
  const RgbImage px{1, 1, {9, 9, 9}};
  write_ppm(dir / "Pink" / "t07_left_off.ppm", px);
  write_ppm(dir / "Pink" / "oddname.ppm", px);
  std::ofstream(dir / "Pink" / "notes.txt") << "x";
  const auto idx = load_index(dir.path());
  ASSERT_EQ(idx.size(), 2u);
  EXPECT_EQ(idx.records[0], (SampleRecord{dir / "Pink" / "oddname.ppm", 0, "Pink", "Pink/oddname", "", ""}));
  EXPECT_EQ(idx.records[1], (SampleRecord{dir / "Pink" / "t07_left_off.ppm", 0, "Pink", "Pink/t07", "left", "off"}));
  EXPECT_EQ(idx.warnings.size(), 2u);
}

TEST(Index, EmptyRootRejected) {
  fixture::TempDir dir("idxempty");
  EXPECT_THROW(load_index(dir.path()), DatasetError);
  EXPECT_THROW(load_index(dir / "missing"), DatasetError);
}

// ---------------------------------------------------------------------------
// Split

TEST(Split, EightyZeroTwentyOfTwentyFiveGroups) {
  const auto idx = synthetic_index(25);
  const auto s = group_split(idx, {0.8, 0.0, 0.2, 3});
  EXPECT_EQ(s.train.groups().size(), 6u * 20u);
  EXPECT_TRUE(s.val.records.empty());
  EXPECT_EQ(s.test.groups().size(), 6u * 5u);
  EXPECT_EQ(s.train.size() + s.test.size(), idx.size());
  bool conflict = true;
  owner_of_groups(s, conflict);
  EXPECT_FALSE(conflict);
}

TEST(Split, AllTrain) {
  const auto idx = synthetic_index(3);
  const auto s = group_split(idx, {1.0, 0.0, 0.0, 0});
  EXPECT_EQ(s.train.records, idx.records);
  EXPECT_TRUE(s.val.records.empty());
  EXPECT_TRUE(s.test.records.empty());
}

TEST(Split, NoGroupLeakageAcrossThousandSeeds) {
  const auto idx = synthetic_index(25);
  for (std::uint64_t seed = 0; seed < 1000; ++seed) {
    const auto s = group_split(idx, {0.8, 0.1, 0.1, seed});
    bool conflict = true;
    const auto owner = owner_of_groups(s, conflict);
    ASSERT_FALSE(conflict) << "seed " << seed;
    ASSERT_EQ(owner.size(), 150u);
    ASSERT_EQ(s.train.size() + s.val.size() + s.test.size(), idx.size());
  }
}

TEST(Split, PerClassCountsAreBalanced) {
  const auto s = group_split(synthetic_index(25), {0.8, 0.1, 0.1, 4});
  for (const auto* part : {&s.train, &s.val, &s.test}) {
    std::map<int, std::size_t> n;
    for (const auto& r : part->records) ++n[r.class_index];
    ASSERT_EQ(n.size(), 6u);
    for (const auto& [c, k] : n) EXPECT_EQ(k, n.begin()->second);
  }
}

TEST(Split, SeedChangesAssignment) {
  const auto idx = synthetic_index(25);
  EXPECT_EQ(group_split(idx, {0.8, 0.1, 0.1, 1}).test.records, group_split(idx, {0.8, 0.1, 0.1, 1}).test.records);
  EXPECT_NE(group_split(idx, {0.8, 0.1, 0.1, 1}).test.records, group_split(idx, {0.8, 0.1, 0.1, 2}).test.records);
}

TEST(Split, CountsSumToGroupTotal) {
  for (std::size_t n = 1; n < 60; ++n) {
    const auto c = split_counts(n, {0.7, 0.2, 0.1, 0});
    EXPECT_EQ(c[0] + c[1] + c[2], n);
  }
  EXPECT_EQ(split_counts(25, {0.8, 0.1, 0.1, 0}), (std::array<std::size_t, 3>{20, 2, 3}));
}

TEST(Split, InvalidSpecsRejected) {
  const auto idx = synthetic_index(2);
  EXPECT_THROW(group_split(idx, {0.5, 0.2, 0.2, 0}), ConfigError);
  EXPECT_THROW(group_split(idx, {1.2, -0.2, 0.0, 0}), ConfigError);
  // Two groups cannot feed three nonzero splits.
  EXPECT_THROW(group_split(idx, {0.5, 0.25, 0.25, 0}), ConfigError);
}

// ---------------------------------------------------------------------------
// Images

TEST(Ppm, RoundTripIsByteIdentical) {
  Rng rng(1);
  RgbImage img{7, 5, std::vector<std::uint8_t>(7 * 5 * 3)};
  for (auto& v : img.rgb) v = static_cast<std::uint8_t>(rng.below(256));
  const auto bytes = encode_ppm(img);
  EXPECT_EQ(decode_ppm(bytes), img);
  EXPECT_EQ(encode_ppm(decode_ppm(bytes)), bytes);
}

TEST(Ppm, MalformedInputNamesOrigin) {
  for (const std::string bad : {"P3\n1 1\n255\nabc", "P6\n2 2\n255\n\x01\x02", "P6\n1 1\n65535\n\x01\x02\x03", "P6"}) {
    try {
      decode_ppm(bad, "fixture.ppm");
      FAIL() << "accepted malformed input";
    } catch (const DatasetError& e) {
      EXPECT_NE(std::string(e.what()).find("fixture.ppm"), std::string::npos);
    }
  }
}

TEST(Ppm, HeaderCommentsAreSkipped) {
  const auto img = decode_ppm(std::string("P6\n# made by hand\n1 1\n255\n") + std::string("\x0a\x14\x1e", 3));
  EXPECT_EQ(img.rgb, (std::vector<std::uint8_t>{10, 20, 30}));
}

TEST(Load, ConstantImageResizesToConstant) {
  const RgbImage img{8, 8, [] {
                       std::vector<std::uint8_t> v;
                       for (int i = 0; i < 64; ++i) v.insert(v.end(), {51, 102, 255});
                       return v;
                     }()};
  std::vector<float> out(3 * 4 * 4);
  image_to_chw(img, 4, {}, out.data());
  for (int c = 0; c < 3; ++c)
    for (int i = 0; i < 16; ++i) {
      const double expect = ((c == 0 ? 51 : c == 1 ? 102 : 255) / 255.0 - 0.5) / 0.5;
      EXPECT_FLOAT_EQ(out[static_cast<std::size_t>(c * 16 + i)], static_cast<float>(expect));
    }
}

TEST(Load, TwoByTwoFixture) {
  fixture::TempDir dir("load2x2");
  fs::create_directories(dir / "Green");
  // Row-major RGB: (0,0)=black (0,1)=white (1,0)=pure red (1,1)=mid gray.
  const RgbImage img{2, 2, {0, 0, 0, 255, 255, 255, 255, 0, 0, 127, 127, 127}};
  write_ppm(dir / "Green" / "g00_up_on.ppm", img);
  const auto idx = load_index(dir.path());
  const auto t = load_batch(idx.records, 2);
  ASSERT_EQ(t.shape(), (Shape{1, 3, 2, 2}));
  const float m = static_cast<float>((127 / 255.0 - 0.5) / 0.5);
  const std::vector<float> expect{-1, 1, 1, m,  /* R */
                                  -1, 1, -1, m, /* G */
                                  -1, 1, -1, m /* B */};
  for (std::size_t i = 0; i < 12; ++i) EXPECT_FLOAT_EQ(t[i], expect[i]) << i;
  const auto set = load_image_set(idx, 2);
  EXPECT_EQ(set.labels, std::vector<int>{0});
  EXPECT_EQ(std::vector<float>(set.pixels.begin(), set.pixels.end()), std::vector<float>(t.values().begin(), t.values().end()));
}

TEST(Load, UpsamplingRepeatsPixels) {
  const RgbImage img{2, 1, {0, 0, 0, 255, 255, 255}};
  std::vector<float> out(3 * 4 * 4);
  image_to_chw(img, 4, {0.0, 1.0}, out.data());
  for (int y = 0; y < 4; ++y)
    for (int x = 0; x < 4; ++x) EXPECT_EQ(out[static_cast<std::size_t>(y * 4 + x)], x < 2 ? 0.0f : 1.0f);
}

TEST(Load, OrderIsDeterministic) {
  fixture::TempDir dir("loadorder");
  GeneratorConfig cfg;
  cfg.groups_per_class = 1;
  cfg.image_size = 8;
  generate_synthetic(dir.path(), cfg);
  const auto a = load_index(dir.path()), b = load_index(dir.path());
  EXPECT_EQ(a.records, b.records);
  EXPECT_TRUE(std::is_sorted(a.records.begin(), a.records.end(), [](const auto& x, const auto& y) { return x.path < y.path; }));
}
