#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <limits>
#include <vector>

#include "doctest.h"
#include "json.hpp"
#include "test_util.hpp"
#include "vtcd/error.hpp"
#include "vtcd/volume.hpp"

using namespace vtcd;
using vtcd::test::TempDir;

namespace {

std::vector<unsigned char> read_bytes(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

void write_bytes(const std::filesystem::path& p, const std::vector<unsigned char>& b) {
  std::ofstream out(p, std::ios::binary);
  out.write(reinterpret_cast<const char*>(b.data()), static_cast<std::streamsize>(b.size()));
}

}  // namespace

TEST_SUITE("voxcore") {

TEST_CASE("save then load is bit exact") {
  TempDir dir("vol");
  const Volume3D v = test::random_volume({4, 4, 4}, 11);
  save_volume(v, dir / "a.vol");
  const Volume3D back = load_volume(dir / "a.vol");
  CHECK(test::bit_equal(v, back));
  CHECK(back.voxel_size() == v.voxel_size());
  CHECK(back.range() == v.range());
}

TEST_CASE("round trip keeps voxel size, range and odd shapes") {
  TempDir dir("vol");
  Volume3D v(Dims{3, 7, 5}, {100.0, 100.0, 430.0}, {0.0, 2.0});
  auto d = v.data();
  for (std::size_t i = 0; i < d.size(); ++i) d[i] = static_cast<float>(std::sin(0.37 * i) + 1.0);
  save_volume(v, dir / "b.vol");
  const Volume3D back = load_volume(dir / "b.vol");
  CHECK(test::bit_equal(v, back));
  CHECK(back.voxel_size()[2] == 430.0);
  CHECK(back.range().hi == 2.0);
}

TEST_CASE("file layout: magic, header length, JSON header, little-endian payload order") {
  TempDir dir("vol");
  Volume3D v(Dims{2, 3, 5});
  for (int x = 0; x < 2; ++x)
    for (int y = 0; y < 3; ++y)
      for (int z = 0; z < 5; ++z) v.at(x, y, z) = static_cast<float>(100 * z + 10 * x + y);
  save_volume(v, dir / "c.vol");
  const auto bytes = read_bytes(dir / "c.vol");
  REQUIRE(bytes.size() > 12);
  CHECK(std::string(bytes.begin(), bytes.begin() + 8) == "VTCDVOL1");
  const std::uint32_t len = bytes[8] | (bytes[9] << 8) | (bytes[10] << 16) | (static_cast<std::uint32_t>(bytes[11]) << 24);
  const auto header = nlohmann::json::parse(std::string(bytes.begin() + 12, bytes.begin() + 12 + len));
  CHECK(header.at("dims") == nlohmann::json::array({2, 3, 5}));
  CHECK(header.at("dtype") == "f32le");
  CHECK(header.at("range") == nlohmann::json::array({0.0, 1.0}));
  CHECK(header.at("voxel_size").size() == 3);
  const std::size_t payload = 12 + len;
  REQUIRE(bytes.size() == payload + 4 * 30);
  // z-major, then x, then y
  std::size_t k = 0;
  for (int z = 0; z < 5; ++z)
    for (int x = 0; x < 2; ++x)
      for (int y = 0; y < 3; ++y, ++k) {
        std::uint32_t bits = 0;
        for (int b = 0; b < 4; ++b) bits |= static_cast<std::uint32_t>(bytes[payload + 4 * k + b]) << (8 * b);
        float f;
        std::memcpy(&f, &bits, 4);
        CHECK(f == static_cast<float>(100 * z + 10 * x + y));
      }
}

TEST_CASE("NaN volume is rejected and no file is written") {
  TempDir dir("vol");
  Volume3D v(Dims{3, 3, 3});
  v.at(1, 1, 1) = std::numeric_limits<float>::quiet_NaN();
  CHECK_THROWS_AS(save_volume(v, dir / "nan.vol"), ValidationError);
  CHECK_FALSE(std::filesystem::exists(dir / "nan.vol"));
}

TEST_CASE("bad magic is a format error") {
  TempDir dir("vol");
  save_volume(test::random_volume({4, 4, 4}, 3), dir / "m.vol");
  auto bytes = read_bytes(dir / "m.vol");
  std::fill(bytes.begin(), bytes.begin() + 8, 'X');
  write_bytes(dir / "m.vol", bytes);
  CHECK_THROWS_AS(load_volume(dir / "m.vol"), FormatError);
}

TEST_CASE("payload one byte short names expected and actual sizes") {
  TempDir dir("vol");
  save_volume(test::random_volume({4, 4, 4}, 3), dir / "t.vol");
  auto bytes = read_bytes(dir / "t.vol");
  bytes.pop_back();
  write_bytes(dir / "t.vol", bytes);
  try {
    load_volume(dir / "t.vol");
    FAIL("expected a format error");
  } catch (const FormatError& e) {
    const std::string msg = e.what();
    CHECK(msg.find("256") != std::string::npos);
    CHECK(msg.find("255") != std::string::npos);
  }
}

TEST_CASE("missing file is an I/O error naming the path") {
  TempDir dir("vol");
  try {
    load_volume(dir / "absent.vol");
    FAIL("expected an I/O error");
  } catch (const IoError& e) {
    CHECK(std::string(e.what()).find("absent.vol") != std::string::npos);
  }
}

TEST_CASE("XY slicing shapes and endpoint steps") {
  const Volume3D v = test::random_volume({4, 5, 6}, 5);
  const SliceSet ss = slice_volume(v, PlaneId::XY, 10);
  REQUIRE(ss.slices.size() == 6);
  CHECK(ss.index_axis_len == 6);
  for (const auto& s : ss.slices) {
    CHECK(s.rows == 4);
    CHECK(s.cols == 5);
  }
  CHECK(ss.t_of_index.front() == 0);
  CHECK(ss.t_of_index.back() == 10);
  CHECK(std::is_sorted(ss.t_of_index.begin(), ss.t_of_index.end()));
}

TEST_CASE("XZ and YZ slicing shapes") {
  const Volume3D v = test::random_volume({4, 5, 6}, 5);
  const SliceSet xz = slice_volume(v, PlaneId::XZ, 3);
  CHECK(xz.slices.size() == 5);
  CHECK(xz.slices[0].rows == 4);
  CHECK(xz.slices[0].cols == 6);
  const SliceSet yz = slice_volume(v, PlaneId::YZ, 3);
  CHECK(yz.slices.size() == 4);
  CHECK(yz.slices[0].rows == 5);
  CHECK(yz.slices[0].cols == 6);
  CHECK(xz.slices[2].at(1, 3) == v.at(1, 2, 3));
  CHECK(yz.slices[3].at(4, 5) == v.at(3, 4, 5));
}

TEST_CASE("depth to step map at C=5, T=8") {
  // round(2 * 8 / 4)
  const int expected = static_cast<int>(std::lround(2.0 * 8.0 / 4.0));
  CHECK(step_for_index(2, 5, 8) == expected);
  CHECK(step_for_index(2, 5, 8) == 4);
  const SliceSet ss = slice_volume(test::random_volume({2, 2, 5}, 1), PlaneId::XY, 8);
  CHECK(ss.t_of_index[2] == 4);
}

TEST_CASE("step map is surjective when C >= T + 1") {
  for (int C : {11, 17, 32}) {
    const int T = 10;
    std::vector<bool> seen(T + 1, false);
    for (int z = 0; z < C; ++z) seen[step_for_index(z, C, T)] = true;
    CHECK(std::all_of(seen.begin(), seen.end(), [](bool b) { return b; }));
  }
}

TEST_CASE("slice then reassemble is bit exact on every plane") {
  const Volume3D v = test::random_volume({4, 4, 4}, 21);
  for (PlaneId p : {PlaneId::XY, PlaneId::XZ, PlaneId::YZ}) {
    CAPTURE(to_string(p));
    CHECK(test::bit_equal(reassemble_volume(slice_volume(v, p, 4), v.dims()), v));
  }
  const Volume3D w = test::random_volume({3, 6, 5}, 22);
  for (PlaneId p : {PlaneId::XY, PlaneId::XZ, PlaneId::YZ})
    CHECK(test::bit_equal(reassemble_volume(slice_volume(w, p, 7), w.dims()), w));
}

TEST_CASE("slicing preserves the multiset of voxel values") {
  const Volume3D v = test::random_volume({3, 4, 5}, 8);
  std::vector<float> ref(v.data().begin(), v.data().end());
  std::sort(ref.begin(), ref.end());
  for (PlaneId p : {PlaneId::XY, PlaneId::XZ, PlaneId::YZ}) {
    std::vector<float> got;
    for (const auto& s : slice_volume(v, p, 2).slices) got.insert(got.end(), s.data.begin(), s.data.end());
    std::sort(got.begin(), got.end());
    CHECK(got == ref);
  }
}

TEST_CASE("XY and XZ slicings reassemble to equal volumes") {
  const Volume3D v = test::random_volume({4, 4, 4}, 9);
  CHECK(reassemble_volume(slice_volume(v, PlaneId::XY, 3), v.dims()) ==
        reassemble_volume(slice_volume(v, PlaneId::XZ, 3), v.dims()));
}

TEST_CASE("a slice of the wrong shape is a dimension error") {
  const Volume3D v = test::random_volume({4, 4, 4}, 9);
  SliceSet ss = slice_volume(v, PlaneId::XZ, 3);
  ss.slices[1] = Image2D(3, 4);
  CHECK_THROWS_AS(reassemble_volume(ss, v.dims()), DimensionError);
  SliceSet short_set = slice_volume(v, PlaneId::XY, 3);
  short_set.slices.pop_back();
  CHECK_THROWS_AS(reassemble_volume(short_set, v.dims()), DimensionError);
}

TEST_CASE("plane names parse case-insensitively") {
  CHECK(parse_plane("xy") == PlaneId::XY);
  CHECK(parse_plane("XZ") == PlaneId::XZ);
  CHECK(parse_plane("Yz") == PlaneId::YZ);
  CHECK_THROWS_AS(parse_plane("zz"), ValidationError);
}

TEST_CASE("tensor view shares the storage order") {
  const Volume3D v = test::random_volume({3, 4, 2}, 4);
  const Tensor t = to_tensor(v);
  CHECK(t.c == 2);
  CHECK(t.h == 3);
  CHECK(t.w == 4);
  CHECK(t.at(1, 2, 3) == static_cast<double>(v.at(2, 3, 1)));
  CHECK(test::bit_equal(from_tensor(t), v));
}

TEST_CASE("invariants: finiteness and minimum lateral size") {
  Volume3D v(Dims{1, 4, 4});
  CHECK_THROWS_AS(v.validate(), ValidationError);
  Volume3D w(Dims{2, 2, 1});
  CHECK_NOTHROW(w.validate());
  w.at(0, 0, 0) = std::numeric_limits<float>::infinity();
  CHECK_THROWS_AS(w.validate(), ValidationError);
}

TEST_CASE("clip_to_range enforces the declared range") {
  Volume3D v(Dims{2, 2, 2}, {1, 1, 1}, {0.0, 1.0});
  v.at(0, 0, 0) = 1.5f;
  v.at(1, 1, 1) = -0.25f;
  CHECK_FALSE(v.within_range());
  v.clip_to_range();
  CHECK(v.within_range());
  CHECK(v.at(0, 0, 0) == 1.0f);
  CHECK(v.at(1, 1, 1) == 0.0f);
}

}  // TEST_SUITE
