#include <gtest/gtest.h>

#include <cstdio>
#include <filesystem>
#include <fstream>

#include "dst/checkpoint.hpp"
#include "testutil.hpp"

using namespace dst;

namespace {

std::string temp_path(const std::string& name) {
  return (std::filesystem::temp_directory_path() / name).string();
}

std::string slurp(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  return std::string(std::istreambuf_iterator<char>(f), std::istreambuf_iterator<char>());
}

}  // namespace

TEST(Checkpoint, RoundTripBitExactF64) {
  Rng rng(31);
  Tensor a = testutil::random_tensor({3, 4}, rng, -1e6, 1e6);
  Tensor b = testutil::random_tensor({7}, rng, -1e-9, 1e-9);
  std::string path = temp_path("dst_ckpt_roundtrip.dstckpt");

  CheckpointWriter w;
  w.add("layer.w", a);
  w.add("layer.b", b);
  w.add_text("meta", "{\"k\":3}");
  w.write(path);

  CheckpointReader r(path);
  EXPECT_EQ(r.tensor("layer.w").data, a.data);
  EXPECT_EQ(r.tensor("layer.w").shape, a.shape);
  EXPECT_EQ(r.tensor("layer.b").data, b.data);
  EXPECT_EQ(r.text("meta"), "{\"k\":3}");
  std::remove(path.c_str());
}

TEST(Checkpoint, SaveLoadSaveIsByteIdentical) {
  Rng rng(32);
  Tensor a = testutil::random_tensor({5, 5}, rng);
  std::string p1 = temp_path("dst_ckpt_a.dstckpt"), p2 = temp_path("dst_ckpt_b.dstckpt");
  {
    CheckpointWriter w;
    w.add("t", a);
    w.write(p1);
  }
  {
    CheckpointReader r(p1);
    CheckpointWriter w;
    w.add("t", r.tensor("t"));
    w.write(p2);
  }
  EXPECT_EQ(slurp(p1), slurp(p2));
  std::remove(p1.c_str());
  std::remove(p2.c_str());
}

TEST(Checkpoint, MagicStartsFile) {
  std::string path = temp_path("dst_ckpt_magic.dstckpt");
  CheckpointWriter w;
  w.add("t", Tensor::vec({1.0}));
  w.write(path);
  std::string bytes = slurp(path);
  ASSERT_GE(bytes.size(), 8u);
  EXPECT_EQ(bytes.substr(0, 8), "DSTCKPT1");
  std::remove(path.c_str());
}

TEST(Checkpoint, WrongMagicFailsCleanly) {
  std::string path = temp_path("dst_ckpt_bad.dstckpt");
  std::ofstream f(path, std::ios::binary);
  f << "NOTMAGIC followed by junk";
  f.close();
  try {
    CheckpointReader r(path);
    FAIL() << "expected bad-magic error";
  } catch (const std::runtime_error& e) {
    EXPECT_NE(std::string(e.what()).find("magic"), std::string::npos);
  }
  std::remove(path.c_str());
}

TEST(Checkpoint, TruncatedPayloadFails) {
  std::string path = temp_path("dst_ckpt_trunc.dstckpt");
  {
    CheckpointWriter w;
    w.add("t", Tensor::full({64}, 1.5));
    w.write(path);
  }
  std::string bytes = slurp(path);
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  f.write(bytes.data(), static_cast<std::streamsize>(bytes.size() - 100));
  f.close();
  EXPECT_THROW(CheckpointReader r(path), std::runtime_error);
  std::remove(path.c_str());
}

TEST(Checkpoint, F32EntryRoundsToSinglePrecision) {
  std::string path = temp_path("dst_ckpt_f32.dstckpt");
  Tensor t = Tensor::vec({0.1, 1.0 / 3.0});
  CheckpointWriter w;
  w.add("t", t, Dtype::f32);
  w.write(path);
  CheckpointReader r(path);
  Tensor back = r.tensor("t");
  EXPECT_DOUBLE_EQ(back.data[0], static_cast<double>(static_cast<float>(0.1)));
  EXPECT_DOUBLE_EQ(back.data[1], static_cast<double>(static_cast<float>(1.0 / 3.0)));
  std::remove(path.c_str());
}

TEST(Checkpoint, MissingEntryNamed) {
  std::string path = temp_path("dst_ckpt_missing.dstckpt");
  CheckpointWriter w;
  w.add("present", Tensor::vec({1.0}));
  w.write(path);
  CheckpointReader r(path);
  EXPECT_TRUE(r.has("present"));
  EXPECT_FALSE(r.has("absent"));
  try {
    r.tensor("absent");
    FAIL() << "expected missing-entry error";
  } catch (const std::runtime_error& e) {
    EXPECT_NE(std::string(e.what()).find("absent"), std::string::npos);
  }
  std::remove(path.c_str());
}
