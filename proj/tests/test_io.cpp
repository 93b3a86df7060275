#include <gtest/gtest.h>

#include <cstring>
#include <fstream>

#include "atddpm/error.hpp"
#include "atddpm/io.hpp"
#include "test_util.hpp"

using namespace atddpm;
using atddpm::testing::randomize_output;
using atddpm::testing::scratch_dir;
using atddpm::testing::tiny_descriptor;

namespace {

Checkpoint sample_checkpoint(bool teacher, bool moments) {
  Checkpoint c;
  c.header["stage"] = "strong";
  c.header["gamma"] = format_double(0.01);
  c.student = init_params(tiny_descriptor(8), Rng(1));
  Rng rng(2);
  randomize_output(c.student, rng);
  if (teacher) c.teacher = init_params(tiny_descriptor(8), Rng(3));
  if (moments) {
    AdamState m;
    for (const auto& t : c.student.tensors()) {
      m.m.emplace_back(t.value.size(), 0.25);
      m.v.emplace_back(t.value.size(), 1e-9);
    }
    m.m[0][0] = -1.0 / 3.0;
    m.step = 17;
    c.moments = m;
  }
  return c;
}

void expect_same_params(const DenoiserParams& a, const DenoiserParams& b) {
  ASSERT_TRUE(a.combinable_with(b));
  for (std::size_t i = 0; i < a.tensors().size(); ++i) {
    ASSERT_EQ(std::memcmp(a.at(i).data().data(), b.at(i).data().data(), a.at(i).size() * sizeof(double)), 0);
  }
}

}  // namespace

TEST(Pgm, RoundTripErrorIsHalfAQuantum) {
  const auto dir = scratch_dir("pgm");
  Rng rng(1);
  std::vector<double> v(13 * 7);
  for (double& e : v) e = rng.uniform();
  v[0] = 0.0;
  v[1] = 1.0;
  v[2] = 0.5 / 65535;  // rounds half up
  const Tensor img({7, 13}, v);
  write_pgm(dir / "a.pgm", img);
  const Tensor back = read_pgm(dir / "a.pgm");
  ASSERT_EQ(back.shape(), img.shape());
  for (std::size_t i = 0; i < v.size(); ++i) EXPECT_LE(std::abs(back[i] - v[i]), 1.0 / 131070 + 1e-16);
  EXPECT_EQ(back[0], 0.0);
  EXPECT_EQ(back[1], 1.0);
  EXPECT_EQ(back[2], 1.0 / 65535);
  // rewriting what was read is exact
  write_pgm(dir / "b.pgm", back);
  EXPECT_EQ(read_file(dir / "a.pgm"), read_file(dir / "b.pgm"));
}

TEST(Pgm, HeaderLayoutAndEightBitInput) {
  const auto dir = scratch_dir("pgm8");
  write_pgm(dir / "a.pgm", Tensor({1, 2}, {0.0, 1.0}));
  EXPECT_EQ(read_file(dir / "a.pgm"), std::string("P5\n2 1\n65535\n\x00\x00\xff\xff", 17));
  {
    std::ofstream out(dir / "b.pgm", std::ios::binary);
    out << "P5\n# comment\n3 1\n255\n" << '\x00' << '\x80' << '\xff';
  }
  const Tensor b = read_pgm(dir / "b.pgm");
  EXPECT_EQ(b.shape(), (Shape{1, 3}));
  EXPECT_DOUBLE_EQ(b[1], 128.0 / 255);
  {
    std::ofstream out(dir / "c.pgm", std::ios::binary);
    out << "P2\n1 1\n255\n0";
  }
  EXPECT_THROW(read_pgm(dir / "c.pgm"), ContractError);
  {
    std::ofstream out(dir / "d.pgm", std::ios::binary);
    out << "P5\n4 4\n65535\n\x01";
  }
  EXPECT_THROW(read_pgm(dir / "d.pgm"), ContractError);
  EXPECT_THROW(read_pgm(dir / "missing.pgm"), ContractError);
}

TEST(Checkpoint, RoundTripIsBitwise) {
  for (bool t : {false, true}) {
    for (bool m : {false, true}) {
      const auto c = sample_checkpoint(t, m);
      const auto bytes = serialize_checkpoint(c);
      const auto back = deserialize_checkpoint(bytes);
      EXPECT_EQ(serialize_checkpoint(back), bytes);
      expect_same_params(back.student, c.student);
      EXPECT_EQ(back.teacher.has_value(), t);
      if (t) expect_same_params(*back.teacher, *c.teacher);
      ASSERT_EQ(back.moments.has_value(), m);
      if (m) {
        EXPECT_EQ(back.moments->step, 17u);
        EXPECT_EQ(back.moments->m, c.moments->m);
        EXPECT_EQ(back.moments->v, c.moments->v);
      }
      EXPECT_EQ(back.header.at("stage"), "strong");
      EXPECT_EQ(back.header.at("widths"), "4,4,8,4");
    }
  }
}

TEST(Checkpoint, FileRoundTrip) {
  const auto dir = scratch_dir("ckpt");
  const auto c = sample_checkpoint(true, true);
  save_checkpoint(dir / "m.ckpt", c);
  EXPECT_FALSE(fs::exists(dir / "m.ckpt.tmp"));
  EXPECT_EQ(serialize_checkpoint(load_checkpoint(dir / "m.ckpt")), serialize_checkpoint(c));
}

TEST(Checkpoint, RejectsCorruption) {
  const auto bytes = serialize_checkpoint(sample_checkpoint(false, false));
  auto bad = bytes;
  bad[0] = 'X';
  EXPECT_THROW(deserialize_checkpoint(bad), ContractError);
  EXPECT_THROW(deserialize_checkpoint(bytes.substr(0, bytes.size() - 3)), ContractError);
  EXPECT_THROW(deserialize_checkpoint(bytes + "z"), ContractError);
  bad = bytes;
  bad[4] = 9;  // version
  EXPECT_THROW(deserialize_checkpoint(bad), ContractError);
  // a header that implies different shapes than the payload
  const auto pos = bytes.find("widths=4,4,8,4");
  ASSERT_NE(pos, std::string::npos);
  bad = bytes;
  bad.replace(pos, 14, "widths=4,4,4,4");
  EXPECT_THROW(deserialize_checkpoint(bad), ContractError);
  Checkpoint nan = sample_checkpoint(false, false);
  nan.student.at(0).mutable_data()[0] = std::nan("");
  EXPECT_THROW(serialize_checkpoint(nan), NumericError);
}

TEST(ConfigMap, ParsesCommentsAndRejectsUnknownKeys) {
  std::istringstream in("# settings\n gamma = 0.5 \n\nsteps=10 # trailing\nwidths=8,8,8,8\n");
  auto cfg = ConfigMap::parse(in);
  EXPECT_EQ(cfg.take_double("gamma", 0), 0.5);
  EXPECT_EQ(cfg.take_uint("steps", 0), 10u);
  EXPECT_EQ(cfg.take_uint("batch", 4), 4u);
  EXPECT_THROW(cfg.reject_unknown(), UsageError);
  EXPECT_EQ(cfg.take_string("widths", ""), "8,8,8,8");
  EXPECT_NO_THROW(cfg.reject_unknown());
  std::istringstream bad("just words\n");
  EXPECT_THROW(ConfigMap::parse(bad), UsageError);
  std::istringstream nonnum("gamma=fast\n");
  auto c2 = ConfigMap::parse(nonnum);
  EXPECT_THROW(c2.take_double("gamma", 0), ContractError);
}

TEST(FormatDouble, ShortestRoundTrip) {
  for (double v : {0.1, 1e-4, 0.9909, 1.0 / 3.0, 123456789.125}) EXPECT_EQ(parse_double(format_double(v), "v"), v);
  EXPECT_EQ(format_double(0.01), "0.01");
  EXPECT_THROW(parse_uint("-3", "n"), ContractError);
  EXPECT_EQ(parse_widths("1,2,3,4")[3], 4u);
  EXPECT_THROW(parse_widths("1,2,3"), ContractError);
}

TEST(Manifest, RoundTrip) {
  const auto dir = scratch_dir("manifest");
  const std::vector<ManifestRow> rows{{"000000", "clean/a.pgm", "weak/a.pgm", "strong/a.pgm", 18446744073709551615ull},
                                      {"000001", "clean/b.pgm", "weak/b.pgm", "strong/b.pgm", 3}};
  write_manifest(dir / "manifest.txt", rows);
  const auto back = read_manifest(dir / "manifest.txt");
  ASSERT_EQ(back.size(), 2u);
  EXPECT_EQ(back[0].seed, rows[0].seed);
  EXPECT_EQ(back[1].strong_path, "strong/b.pgm");
  std::ofstream(dir / "bad.txt") << "a b c\n";
  EXPECT_THROW(read_manifest(dir / "bad.txt"), ContractError);
}
