#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <fstream>

#include "overseg/data.hpp"

using namespace overseg;
namespace fs = std::filesystem;

namespace {

fs::path scratch(const std::string& name) {
  auto p = fs::temp_directory_path() / ("overseg_data_" + name);
  fs::remove_all(p);
  return p;
}

std::int64_t count_label(const Tensor& m, float v) {
  std::int64_t n = 0;
  for (auto x : m.data()) n += x == v;
  return n;
}

}  // namespace

TEST(Components, FaceConnectivityOnly) {
  // diagonal neighbours are separate components
  std::vector<std::int64_t> ids{1, 0, 0,
                                0, 1, 0,
                                0, 1, 2};
  const auto cs = connected_components({3, 3}, ids);
  ASSERT_EQ(cs.size(), 3u);
  EXPECT_EQ(cs[0].area, 1);
  EXPECT_EQ(cs[1].area, 2);
  EXPECT_EQ(cs[1].lo, (std::vector<std::int64_t>{1, 1}));
  EXPECT_EQ(cs[1].hi, (std::vector<std::int64_t>{2, 1}));
  EXPECT_EQ(cs[2].label, 2);
}

TEST(Generator, DeterministicPerSeedAndIndex) {
  GenParams gp;
  gp.seed = 9;
  const auto a = generate_sample(gp, 3);
  const auto b = generate_sample(gp, 3);
  EXPECT_TRUE(a.image == b.image);
  EXPECT_TRUE(a.mask == b.mask);
  EXPECT_FALSE(generate_sample(gp, 4).mask == a.mask);
  gp.seed = 10;
  EXPECT_FALSE(generate_sample(gp, 3).image == a.image);
}

TEST(Generator, StructureCountsAndAreas) {
  GenParams gp;
  gp.seed = 21;
  gp.multiclass = true;
  const double s = static_cast<double>(gp.size);
  for (std::int64_t i = 0; i < 40; ++i) {
    const auto r = generate_sample(gp, i);
    const auto comps = connected_components(spatial_dims(r.mask), mask_ids(r.mask));
    int large = 0, small = 0;
    for (const auto& c : comps) {
      if (c.label == 1) {
        ++large;
        // full axes in [0.2, 0.4] * size, one pixel of rasterisation slack
        EXPECT_GE(c.area, std::floor(M_PI * (0.1 * s - 1) * (0.1 * s - 1))) << i;
        EXPECT_LE(c.area, std::ceil(M_PI * (0.2 * s + 1) * (0.2 * s + 1))) << i;
      } else {
        ++small;
        EXPECT_LE(c.area, small_threshold(2)) << i;
        EXPECT_GE(c.area, 5) << i;  // radius-1 disc
      }
    }
    EXPECT_EQ(large, 1) << i;
    EXPECT_LE(small, 4) << i;
    EXPECT_EQ(static_cast<int>(r.meta.small_areas.size()), small);
    EXPECT_EQ(r.meta.large_count, 1);
  }
}

TEST(Generator, NoiseFreeImageIsScaledMask) {
  GenParams gp;
  gp.seed = 4;
  gp.blur_sigma = 0;
  gp.speckle = 0;
  gp.background = 0;
  gp.foreground = 0.8;
  const auto r = generate_sample(gp, 0);
  for (std::int64_t i = 0; i < r.image.numel(); ++i) ASSERT_FLOAT_EQ(r.image[i], 0.8f * r.mask[i]);
}

TEST(Generator, IntensitiesStayInUnitInterval) {
  GenParams gp;
  gp.speckle = 1.0;
  const auto r = generate_sample(gp, 0);
  for (auto v : r.image.data()) {
    ASSERT_GE(v, 0.0f);
    ASSERT_LE(v, 1.0f);
  }
}

TEST(Generator, ThreeDimensionalSmallBallsStayUnderThreshold) {
  GenParams gp;
  gp.dims = 3;
  gp.size = 32;
  gp.depth = 16;
  gp.seed = 2;
  for (std::int64_t i = 0; i < 6; ++i) {
    const auto r = generate_sample(gp, i);
    EXPECT_EQ(r.mask.shape(), (Shape{1, 16, 32, 32}));
    for (auto a : r.meta.small_areas) EXPECT_LE(a, small_threshold(3));
  }
}

TEST(Generator, RejectsBadParameters) {
  GenParams gp;
  gp.size = 30;
  gp.small_max = 7;
  try {
    gp.validate();
    FAIL();
  } catch (const ValidationError& e) {
    const std::string m = e.what();
    EXPECT_NE(m.find("size"), std::string::npos);
    EXPECT_NE(m.find("0..4"), std::string::npos);
  }
}

TEST(Manifest, RoundTripAndSplits) {
  const auto dir = scratch("manifest");
  GenParams gp;
  gp.size = 32;
  gp.n_train = 3;
  gp.n_test = 2;
  gp.seed = 77;
  const auto path = generate_synthetic(gp, dir);
  const auto m = read_manifest(path);
  EXPECT_EQ(m.params.at("seed"), "77");
  ASSERT_EQ(m.entries.size(), 5u);
  EXPECT_EQ(load_dataset(path, "train", 8).size(), 3u);
  const auto test = load_dataset(path, "test", 8);
  ASSERT_EQ(test.size(), 2u);
  const auto direct = generate_sample(gp, 3);
  EXPECT_TRUE(test[0].image == direct.image);
  EXPECT_TRUE(test[0].mask == direct.mask);
  EXPECT_EQ(test[0].meta.small_areas, direct.meta.small_areas);
  fs::remove_all(dir);
}

TEST(Manifest, MalformedLineNamesTheLine) {
  const auto dir = scratch("bad");
  fs::create_directories(dir);
  std::ofstream(dir / "manifest.tsv") << "# seed=1\na\tb\tc\n";
  try {
    read_manifest(dir / "manifest.tsv");
    FAIL();
  } catch (const ValidationError& e) {
    EXPECT_NE(std::string(e.what()).find(":2:"), std::string::npos);
  }
  EXPECT_THROW(read_manifest(dir / "missing.tsv"), IoError);
  fs::remove_all(dir);
}

TEST(Padding, ReflectAndCropRoundTrip) {
  Tensor t(Shape{1, 3, 5});
  for (std::int64_t i = 0; i < t.numel(); ++i) t[i] = static_cast<float>(i);
  const auto p = reflect_pad(t, pad_for({3, 5}, 4));
  EXPECT_EQ(p.shape(), (Shape{1, 4, 8}));
  // row 3 reflects row 1, column 5 reflects column 3
  EXPECT_EQ(p.at(0, 3, 0), t.at(0, 1, 0));
  EXPECT_EQ(p.at(0, 0, 5), t.at(0, 0, 3));
  EXPECT_EQ(p.at(0, 0, 7), t.at(0, 0, 1));
  EXPECT_TRUE(crop_to(p, {3, 5}) == t);
  EXPECT_THROW(reflect_pad(Tensor(Shape{1, 2, 2}), {2, 0}), ShapeError);
}

TEST(SmallRegion, BoxesGrownAndLargeRemoved) {
  Tensor m(Shape{1, 20, 20});
  for (int i = 2; i < 11; ++i)
    for (int j = 2; j < 11; ++j) m.at(0, i, j) = 1;  // 81 px, large
  m.at(0, 14, 14) = 1;                               // small
  const auto r = small_structure_region(m, 2);
  EXPECT_EQ(r.count(), 7 * 7);  // 11..17 square, clear of the large block
  EXPECT_TRUE(r.v[static_cast<std::size_t>(11 * 20 + 11)]);
  EXPECT_FALSE(r.v[static_cast<std::size_t>(10 * 20 + 10)]);
  const auto gt = restrict_mask(mask_from_tensor(m, true), r);
  EXPECT_EQ(gt.count(), 1);
  EXPECT_EQ(count_label(m, 1.0f), 82);
}

TEST(Padding, Depth50VolumePadsTo56AndCropsBack) {
  Rng rng(6);
  Tensor m(Shape{1, 50, 8, 8});
  for (auto& v : m.data()) v = rng.bernoulli(0.3) ? 1.0f : 0.0f;
  const auto pad = pad_for({50, 8, 8}, 8);
  EXPECT_EQ(pad, (std::vector<std::int64_t>{6, 0, 0}));
  const auto p = reflect_pad(m, pad);
  EXPECT_EQ(p.shape(), (Shape{1, 56, 8, 8}));
  EXPECT_TRUE(crop_to(p, {50, 8, 8}) == m);
}

TEST(Manifest, CorruptFileNamesEntry) {
  const auto dir = scratch("corrupt");
  GenParams gp;
  gp.size = 16;
  gp.n_train = 1;
  gp.n_test = 0;
  const auto path = generate_synthetic(gp, dir);
  std::ofstream(dir / "images" / "s0000.kiut", std::ios::binary | std::ios::trunc) << "KIUT";
  try {
    load_dataset(path, "", 8);
    FAIL();
  } catch (const FormatError& e) {
    const std::string m = e.what();
    EXPECT_NE(m.find("s0000"), std::string::npos);
    EXPECT_NE(m.find("offset"), std::string::npos) << m;
  }
  fs::remove_all(dir / "images");
  EXPECT_THROW(load_dataset(path, "", 8), IoError);
  fs::remove_all(dir);
}
