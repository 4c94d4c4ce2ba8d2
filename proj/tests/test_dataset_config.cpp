#include <gtest/gtest.h>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <set>

#include "dst/config.hpp"
#include "dst/dataset.hpp"
#include "dst/nets.hpp"
#include "dst/trainer.hpp"
#include "testutil.hpp"

using namespace dst;

namespace {

std::string temp_file(const std::string& name) {
  return (std::filesystem::temp_directory_path() / name).string();
}

// Minimal big-endian IDX writer for fixture files.
void write_be32(std::ofstream& f, uint32_t v) {
  unsigned char b[4] = {static_cast<unsigned char>(v >> 24), static_cast<unsigned char>(v >> 16),
                        static_cast<unsigned char>(v >> 8), static_cast<unsigned char>(v)};
  f.write(reinterpret_cast<char*>(b), 4);
}

void write_idx_pair(const std::string& images, const std::string& labels, int64_t n, int64_t rows,
                    int64_t cols, unsigned char pixel_fill, bool corrupt_magic = false,
                    int64_t label_count = -1) {
  std::ofstream imgf(images, std::ios::binary | std::ios::trunc);
  write_be32(imgf, corrupt_magic ? 0x00000777u : 0x00000803u);
  write_be32(imgf, static_cast<uint32_t>(n));
  write_be32(imgf, static_cast<uint32_t>(rows));
  write_be32(imgf, static_cast<uint32_t>(cols));
  std::vector<unsigned char> px(static_cast<size_t>(rows * cols), pixel_fill);
  for (int64_t i = 0; i < n; ++i) imgf.write(reinterpret_cast<char*>(px.data()), static_cast<std::streamsize>(px.size()));
  imgf.close();

  std::ofstream labf(labels, std::ios::binary | std::ios::trunc);
  write_be32(labf, 0x00000801u);
  int64_t ln = label_count >= 0 ? label_count : n;
  write_be32(labf, static_cast<uint32_t>(ln));
  for (int64_t i = 0; i < ln; ++i) {
    unsigned char b = static_cast<unsigned char>(i == 0 ? 7 : i % 3);
    labf.write(reinterpret_cast<char*>(&b), 1);
  }
}

}  // namespace

TEST(Blobs, ConstructionCountsAndLabels) {
  Dataset ds = gen_blobs(3, 2, 200, 0.05, 1);
  EXPECT_EQ(ds.size(), 600);
  EXPECT_EQ(ds.class_count, 3);
  std::set<int64_t> seen(ds.labels.begin(), ds.labels.end());
  EXPECT_EQ(seen, (std::set<int64_t>{0, 1, 2}));
  for (double v : ds.inputs.data) {
    EXPECT_GE(v, 0.0);
    EXPECT_LE(v, 1.0);
  }
}

TEST(Blobs, TightSpreadIsLinearlySeparable) {
  Dataset ds = gen_blobs(3, 2, 100, 0.001, 2);
  TargetConfig cfg;
  cfg.in = {DataKind::vector, 2};
  cfg.class_count = 3;
  cfg.hidden = 16;
  TargetNet net(cfg);
  TargetTrainReport report = train_target_model(net, ds, 40, 0.02, 32, 3);
  EXPECT_DOUBLE_EQ(report.train_accuracy, 1.0);
}

TEST(Blobs, SeedDeterminism) {
  Dataset a = gen_blobs(4, 3, 50, 0.08, 77);
  Dataset b = gen_blobs(4, 3, 50, 0.08, 77);
  EXPECT_EQ(a.inputs.data, b.inputs.data);
  EXPECT_EQ(a.labels, b.labels);
  Dataset c = gen_blobs(4, 3, 50, 0.08, 78);
  EXPECT_NE(a.inputs.data, c.inputs.data);
}

TEST(Blobs, DegenerateSpreadRejected) {
  EXPECT_THROW(gen_blobs(3, 2, 10, 0.0, 1), std::invalid_argument);
  EXPECT_THROW(gen_blobs(1, 2, 10, 0.1, 1), std::invalid_argument);
}

TEST(Blobs, SplitsDisjointExhaustive) {
  Dataset ds = gen_blobs(3, 2, 50, 0.08, 5);
  EXPECT_EQ(ds.train_idx.size() + ds.test_idx.size(), static_cast<size_t>(ds.size()));
  ds.validate();  // throws on overlap or gaps
}

TEST(DatasetContainer, SaveLoadRoundTrip) {
  Dataset ds = gen_blobs(3, 2, 30, 0.08, 9);
  std::string path = temp_file("dst_blobs_roundtrip.dstdata");
  save_dataset(path, ds);
  Dataset back = load_dataset(path);
  EXPECT_EQ(back.inputs.data, ds.inputs.data);
  EXPECT_EQ(back.labels, ds.labels);
  EXPECT_EQ(back.train_idx, ds.train_idx);
  EXPECT_EQ(back.test_idx, ds.test_idx);
  EXPECT_EQ(back.class_count, ds.class_count);
  std::remove(path.c_str());
}

TEST(Idx, ParsesImagesAndLabels) {
  std::string img = temp_file("dst_idx_images"), lab = temp_file("dst_idx_labels");
  write_idx_pair(img, lab, 10, 28, 28, 255);
  Dataset ds = load_idx(img, lab);
  EXPECT_EQ(ds.inputs.shape, (Shape{10, 1, 28, 28}));
  // byte 255 scales to exactly 1.0
  EXPECT_DOUBLE_EQ(ds.inputs.data[0], 1.0);
  // label byte 7 parses to class 7
  EXPECT_EQ(ds.labels[0], 7);
  EXPECT_EQ(ds.class_count, 8);
  std::remove(img.c_str());
  std::remove(lab.c_str());
}

TEST(Idx, ZeroByteIsZeroPixel) {
  std::string img = temp_file("dst_idx_images0"), lab = temp_file("dst_idx_labels0");
  write_idx_pair(img, lab, 4, 5, 5, 0);
  Dataset ds = load_idx(img, lab);
  EXPECT_DOUBLE_EQ(ds.inputs.data[0], 0.0);
  std::remove(img.c_str());
  std::remove(lab.c_str());
}

TEST(Idx, BadMagicRejected) {
  std::string img = temp_file("dst_idx_badmagic"), lab = temp_file("dst_idx_badmagic_l");
  write_idx_pair(img, lab, 4, 5, 5, 10, /*corrupt_magic=*/true);
  try {
    load_idx(img, lab);
    FAIL() << "expected bad magic error";
  } catch (const std::runtime_error& e) {
    EXPECT_NE(std::string(e.what()).find("magic"), std::string::npos);
  }
  std::remove(img.c_str());
  std::remove(lab.c_str());
}

TEST(Idx, CountMismatchRejected) {
  std::string img = temp_file("dst_idx_cm"), lab = temp_file("dst_idx_cm_l");
  write_idx_pair(img, lab, 6, 4, 4, 10, false, /*label_count=*/5);
  EXPECT_THROW(load_idx(img, lab), std::runtime_error);
  std::remove(img.c_str());
  std::remove(lab.c_str());
}

TEST(Idx, TruncatedPayloadRejected) {
  std::string img = temp_file("dst_idx_trunc"), lab = temp_file("dst_idx_trunc_l");
  write_idx_pair(img, lab, 6, 8, 8, 10);
  // chop the image payload
  std::ifstream in(img, std::ios::binary);
  std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  in.close();
  std::ofstream out(img, std::ios::binary | std::ios::trunc);
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size() - 30));
  out.close();
  EXPECT_THROW(load_idx(img, lab), std::runtime_error);
  std::remove(img.c_str());
  std::remove(lab.c_str());
}

// ---------------------------------------------------------------------

TEST(Config, DefaultsAndTypedAccess) {
  ExperimentConfig cfg;
  EXPECT_EQ(cfg.get_int("trainer.epochs"), 30);
  EXPECT_DOUBLE_EQ(cfg.get_real("trainer.lr_sub"), 0.001);
  EXPECT_EQ(cfg.get_string("scenario"), "probability");
  EXPECT_FALSE(cfg.get_bool("trainer.reuse_query"));
  EXPECT_EQ(cfg.get_int_list("substitute.widths"), (std::vector<int64_t>{16, 16, 16, 16}));
}

TEST(Config, FileParsingAndComments) {
  std::string path = temp_file("dst_cfg_basic.config");
  std::ofstream(path) << "# comment line\n"
                         "trainer.batch = 128\n"
                         "gsil.alpha2 = 0.5\n"
                         "\n"
                         "substitute.widths = [8, 8, 16]\n"
                         "scenario = label\n"
                         "trainer.reuse_query = true\n";
  ExperimentConfig cfg;
  cfg.load_file(path);
  EXPECT_EQ(cfg.get_int("trainer.batch"), 128);
  EXPECT_DOUBLE_EQ(cfg.get_real("gsil.alpha2"), 0.5);
  EXPECT_EQ(cfg.get_int_list("substitute.widths"), (std::vector<int64_t>{8, 8, 16}));
  EXPECT_EQ(cfg.get_string("scenario"), "label");
  EXPECT_TRUE(cfg.get_bool("trainer.reuse_query"));
  std::remove(path.c_str());
}

TEST(Config, UnknownKeyRejectedWithPath) {
  std::string path = temp_file("dst_cfg_unknown.config");
  std::ofstream(path) << "trainer.batches = 4\n";
  ExperimentConfig cfg;
  try {
    cfg.load_file(path);
    FAIL() << "expected unknown-key error";
  } catch (const ConfigError& e) {
    std::string msg = e.what();
    EXPECT_NE(msg.find("trainer.batches"), std::string::npos);
    EXPECT_NE(msg.find(":1"), std::string::npos);  // file:line prefix
  }
  std::remove(path.c_str());
}

TEST(Config, SetOverridesAndBadValues) {
  ExperimentConfig cfg;
  cfg.set("trainer.epochs", "99");
  EXPECT_EQ(cfg.get_int("trainer.epochs"), 99);
  EXPECT_THROW(cfg.set("no.such.key", "1"), ConfigError);
  EXPECT_THROW(cfg.set("trainer.reuse_query", "maybe"), ConfigError);
  EXPECT_THROW(cfg.set("trainer.epochs", "not_a_number"), ConfigError);
}

TEST(Config, EnvSeedOverride) {
  ExperimentConfig cfg;
  setenv("DST_SEED", "4242", 1);
  cfg.apply_env();
  unsetenv("DST_SEED");
  EXPECT_EQ(cfg.get_int("seed"), 4242);
}

TEST(Config, ResolvedTextRoundTripsAndFingerprints) {
  ExperimentConfig a;
  a.set("trainer.batch", "77");
  std::string path = temp_file("dst_cfg_resolved.config");
  a.save_resolved(path);
  ExperimentConfig b;
  b.load_file(path);  // the canonical dump parses back
  EXPECT_EQ(b.get_int("trainer.batch"), 77);
  EXPECT_EQ(a.fingerprint(), b.fingerprint());
  b.set("trainer.batch", "78");
  EXPECT_NE(a.fingerprint(), b.fingerprint());
  std::remove(path.c_str());
}
