#include <gtest/gtest.h>

#include <bit>
#include <cstring>
#include <fstream>
#include <iterator>
#include <sstream>
#include <string>

#include "overseg/io.hpp"

using namespace overseg;

namespace {

std::string read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

Tensor random_tensor(Rng& rng) {
  const auto rank = rng.uniform_int(1, 5);
  std::vector<std::int64_t> dims;
  for (std::int64_t i = 0; i < rank; ++i) dims.push_back(rng.uniform_int(1, 5));
  Tensor t{Shape(dims)};
  for (auto& v : t.data()) {
    // Arbitrary finite bit patterns, including subnormals and negative zero.
    std::uint32_t bits = static_cast<std::uint32_t>(rng.next_u64());
    float f = std::bit_cast<float>(bits);
    v = std::isfinite(f) ? f : -0.0f;
  }
  return t;
}

}  // namespace

TEST(Kiut, SingleZeroElementLayout) {
  Tensor t(Shape{1});
  const auto bytes = tensor_bytes(t);
  ASSERT_EQ(bytes.size(), 18u);
  EXPECT_EQ(bytes.substr(0, 4), "KIUT");
  EXPECT_EQ(bytes[4], 1);
  EXPECT_EQ(bytes[5], 0);
  EXPECT_EQ(bytes[6], 1);
  EXPECT_EQ(bytes.substr(7, 3), std::string(3, '\0'));
  EXPECT_EQ(bytes.substr(10, 4), std::string("\x01\0\0\0", 4));
  EXPECT_EQ(bytes.substr(14, 4), std::string(4, '\0'));
}

TEST(Kiut, MatchesGoldenFixtureBytes) {
  Tensor t(Shape{2, 3}, std::vector<float>{1, 2, 3, 4, 5, 6});
  std::ostringstream os(std::ios::binary);
  EXPECT_EQ(write_tensor(t, os), 42u);
  EXPECT_EQ(os.str(), read_file(std::string(OVERSEG_FIXTURES) + "/tensor_2x3.kiut"));

  std::istringstream is(os.str(), std::ios::binary);
  EXPECT_EQ(read_tensor(is), t);
}

TEST(Kiut, RoundTripIsBitExactOverSeededTensors) {
  Rng rng(42);
  for (int i = 0; i < 100; ++i) {
    const Tensor t = random_tensor(rng);
    std::istringstream is(tensor_bytes(t), std::ios::binary);
    const Tensor back = read_tensor(is);
    ASSERT_EQ(back.shape(), t.shape());
    ASSERT_EQ(0, std::memcmp(back.ptr(), t.ptr(), static_cast<std::size_t>(t.numel()) * 4)) << "tensor " << i;
  }
}

TEST(Kiut, RejectsBadMagic) {
  auto bytes = tensor_bytes(Tensor(Shape{2}));
  bytes.replace(0, 4, "XXXX");
  std::istringstream is(bytes, std::ios::binary);
  EXPECT_THROW(read_tensor(is), FormatError);
}

TEST(Kiut, RejectsUnsupportedDtype) {
  auto bytes = tensor_bytes(Tensor(Shape{2}));
  bytes[5] = 1;
  std::istringstream is(bytes, std::ios::binary);
  try {
    read_tensor(is);
    FAIL();
  } catch (const FormatError& e) {
    EXPECT_NE(std::string(e.what()).find("dtype"), std::string::npos);
  }
}

TEST(Kiut, EveryTruncationIsReported) {
  const Tensor t(Shape{4, 6}, 1.5f);
  const auto bytes = tensor_bytes(t);
  for (std::size_t len = 0; len < bytes.size(); ++len) {
    std::istringstream is(bytes.substr(0, len), std::ios::binary);
    EXPECT_THROW(read_tensor(is), FormatError) << "prefix " << len;
  }
  // 24 declared floats, 20 present
  std::istringstream is(bytes.substr(0, bytes.size() - 16), std::ios::binary);
  try {
    read_tensor(is);
    FAIL();
  } catch (const FormatError& e) {
    const std::string msg = e.what();
    EXPECT_NE(msg.find("expected 96 bytes, got 80"), std::string::npos) << msg;
  }
}

TEST(Kiut, FileErrorsNamePath) {
  const auto dir = std::filesystem::temp_directory_path() / "overseg_io_test";
  std::filesystem::create_directories(dir);
  const auto path = dir / "broken.kiut";
  {
    std::ofstream os(path, std::ios::binary);
    os << tensor_bytes(Tensor(Shape{3, 3})).substr(0, 20);
  }
  try {
    load_tensor(path);
    FAIL();
  } catch (const FormatError& e) {
    const std::string msg = e.what();
    EXPECT_NE(msg.find(path.string()), std::string::npos);
    EXPECT_NE(msg.find("byte offset 18"), std::string::npos) << msg;
  }
  EXPECT_THROW(load_tensor(dir / "missing.kiut"), IoError);
}

TEST(Kiuc, EmptyCollection) {
  std::ostringstream os(std::ios::binary);
  EXPECT_EQ(write_checkpoint({}, os), 9u);
  EXPECT_EQ(os.str(), std::string("KIUC\x01\0\0\0\0", 9));
  std::istringstream is(os.str(), std::ios::binary);
  EXPECT_TRUE(read_checkpoint(is).empty());
}

TEST(Kiuc, RoundTripPreservesNamesOrderAndBits) {
  Rng rng(3);
  NamedTensors params{{"enc1.w", random_uniform({32, 1, 3, 3}, rng)},
                      {"enc1.b", random_uniform({32}, rng)},
                      {"a.late.name", random_uniform({2, 2}, rng)}};
  std::ostringstream os(std::ios::binary);
  write_checkpoint(params, os);
  std::istringstream is(os.str(), std::ios::binary);
  EXPECT_EQ(read_checkpoint(is), params);
}

TEST(Kiuc, MatchesGoldenFixture) {
  NamedTensors params{{"enc1.w", Tensor(Shape{2, 2}, std::vector<float>{0.5f, -1.5f, 2.25f, 3.0f})},
                      {"head.b", Tensor(Shape{1}, std::vector<float>{-0.125f})}};
  std::ostringstream os(std::ios::binary);
  write_checkpoint(params, os);
  EXPECT_EQ(os.str(), read_file(std::string(OVERSEG_FIXTURES) + "/two_entries.kiuc"));
}

TEST(Kiuc, DuplicateNamesAreRejected) {
  NamedTensors params{{"w", Tensor(Shape{1})}, {"w", Tensor(Shape{2})}};
  std::ostringstream os(std::ios::binary);
  EXPECT_THROW(write_checkpoint(params, os), ValidationError);
}

TEST(Kiuc, EmbeddedTensorErrorsCarryEntryName) {
  NamedTensors params{{"first", Tensor(Shape{2})}, {"second", Tensor(Shape{8})}};
  std::ostringstream os(std::ios::binary);
  write_checkpoint(params, os);
  const auto bytes = os.str();
  std::istringstream is(bytes.substr(0, bytes.size() - 3), std::ios::binary);
  try {
    read_checkpoint(is);
    FAIL();
  } catch (const FormatError& e) {
    EXPECT_NE(std::string(e.what()).find("'second'"), std::string::npos) << e.what();
  }
}
