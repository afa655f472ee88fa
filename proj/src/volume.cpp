#include "vtcd/volume.hpp"

#include <algorithm>
#include <bit>
#include <cctype>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <iterator>
#include <sstream>

#include "json.hpp"

#include "vtcd/error.hpp"

namespace vtcd {

namespace {

constexpr char kMagic[8] = {'V', 'T', 'C', 'D', 'V', 'O', 'L', '1'};

void put_u32le(std::string& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xFFu));
}

std::uint32_t get_u32le(const unsigned char* p) {
  return static_cast<std::uint32_t>(p[0]) | (static_cast<std::uint32_t>(p[1]) << 8) |
         (static_cast<std::uint32_t>(p[2]) << 16) | (static_cast<std::uint32_t>(p[3]) << 24);
}

}  // namespace

std::string to_string(const Dims& d) {
  std::ostringstream os;
  os << d.h << "x" << d.w << "x" << d.c;
  return os.str();
}

std::string_view to_string(PlaneId plane) {
  switch (plane) {
    case PlaneId::XY: return "xy";
    case PlaneId::XZ: return "xz";
    case PlaneId::YZ: return "yz";
  }
  return "?";
}

PlaneId parse_plane(std::string_view name) {
  std::string s(name);
  std::transform(s.begin(), s.end(), s.begin(), [](unsigned char ch) { return std::tolower(ch); });
  if (s == "xy") return PlaneId::XY;
  if (s == "xz") return PlaneId::XZ;
  if (s == "yz") return PlaneId::YZ;
  throw ValidationError("unknown plane '" + std::string(name) + "' (expected xy, xz or yz)");
}

Volume3D::Volume3D(Dims dims, std::array<double, 3> voxel_size, IntensityRange range, float fill)
    : dims_(dims), voxel_size_(voxel_size), range_(range) {
  if (dims.h < 1 || dims.w < 1 || dims.c < 1)
    throw DimensionError("volume dims must be positive, got " + to_string(dims));
  data_.assign(dims.voxels(), fill);
}

void Volume3D::validate() const {
  if (dims_.h < 2 || dims_.w < 2 || dims_.c < 1)
    throw ValidationError("volume dims " + to_string(dims_) + " violate H>=2, W>=2, C>=1");
  if (!(range_.lo < range_.hi) || !std::isfinite(range_.lo) || !std::isfinite(range_.hi))
    throw ValidationError("invalid intensity range");
  for (std::size_t i = 0; i < data_.size(); ++i) {
    if (!std::isfinite(data_[i]))
      throw ValidationError("volume contains a non-finite value at flat index " + std::to_string(i));
  }
}

bool Volume3D::within_range() const {
  return std::all_of(data_.begin(), data_.end(), [&](float v) {
    return v >= range_.lo && v <= range_.hi;
  });
}

void Volume3D::clip_to_range() {
  const auto lo = static_cast<float>(range_.lo);
  const auto hi = static_cast<float>(range_.hi);
  for (auto& v : data_) v = std::clamp(v, lo, hi);
}

bool Volume3D::operator==(const Volume3D& o) const {
  if (!(dims_ == o.dims_) || voxel_size_ != o.voxel_size_ || !(range_ == o.range_)) return false;
  return std::memcmp(data_.data(), o.data_.data(), data_.size() * sizeof(float)) == 0;
}

Tensor to_tensor(const Volume3D& vol) {
  const auto& d = vol.dims();
  Tensor t(d.c, d.h, d.w);
  auto src = vol.data();
  std::copy(src.begin(), src.end(), t.v.begin());
  return t;
}

Volume3D from_tensor(const Tensor& t, std::array<double, 3> voxel_size, IntensityRange range) {
  Volume3D vol(Dims{t.h, t.w, t.c}, voxel_size, range);
  auto dst = vol.data();
  for (std::size_t i = 0; i < t.v.size(); ++i) dst[i] = static_cast<float>(t.v[i]);
  return vol;
}

int step_for_index(int index, int count, int steps) {
  if (count <= 1) return 0;
  const double t = static_cast<double>(index) * steps / static_cast<double>(count - 1);
  return static_cast<int>(std::lround(t));
}

void save_volume(const Volume3D& vol, const std::filesystem::path& path) {
  vol.validate();
  const auto& d = vol.dims();
  nlohmann::json header = {
      {"dims", {d.h, d.w, d.c}},
      {"voxel_size", {vol.voxel_size()[0], vol.voxel_size()[1], vol.voxel_size()[2]}},
      {"dtype", "f32le"},
      {"range", {vol.range().lo, vol.range().hi}},
  };
  const std::string hdr = header.dump();

  std::string buf;
  buf.reserve(12 + hdr.size() + vol.data().size() * 4);
  buf.append(kMagic, 8);
  put_u32le(buf, static_cast<std::uint32_t>(hdr.size()));
  buf += hdr;
  for (float f : vol.data()) put_u32le(buf, std::bit_cast<std::uint32_t>(f));

  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot open '" + path.string() + "' for writing");
  out.write(buf.data(), static_cast<std::streamsize>(buf.size()));
  if (!out) throw IoError("write failed for '" + path.string() + "'");
}

Volume3D load_volume(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open '" + path.string() + "' for reading");
  std::vector<unsigned char> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());

  if (bytes.size() < 12 || std::memcmp(bytes.data(), kMagic, 8) != 0)
    throw FormatError("'" + path.string() + "' is not a VTCDVOL1 file (bad magic)");
  const std::uint32_t hlen = get_u32le(bytes.data() + 8);
  if (bytes.size() < 12ull + hlen)
    throw FormatError("'" + path.string() + "': header truncated");

  nlohmann::json header;
  try {
    header = nlohmann::json::parse(bytes.begin() + 12, bytes.begin() + 12 + hlen);
  } catch (const nlohmann::json::exception& e) {
    throw FormatError("'" + path.string() + "': malformed header: " + e.what());
  }

  Dims dims;
  std::array<double, 3> vs{};
  IntensityRange range;
  try {
    if (header.at("dtype").get<std::string>() != "f32le")
      throw FormatError("'" + path.string() + "': unsupported dtype");
    const auto& jd = header.at("dims");
    dims = Dims{jd.at(0).get<int>(), jd.at(1).get<int>(), jd.at(2).get<int>()};
    for (int i = 0; i < 3; ++i) vs[i] = header.at("voxel_size").at(i).get<double>();
    range = IntensityRange{header.at("range").at(0).get<double>(), header.at("range").at(1).get<double>()};
  } catch (const nlohmann::json::exception& e) {
    throw FormatError("'" + path.string() + "': bad header field: " + e.what());
  }
  if (dims.h < 1 || dims.w < 1 || dims.c < 1)
    throw FormatError("'" + path.string() + "': bad dims " + to_string(dims));

  const std::size_t expected = dims.voxels() * 4;
  const std::size_t actual = bytes.size() - 12 - hlen;
  if (actual != expected)
    throw FormatError("'" + path.string() + "': payload is " + std::to_string(actual) +
                      " bytes, expected " + std::to_string(expected));

  Volume3D vol(dims, vs, range);
  auto dst = vol.data();
  const unsigned char* p = bytes.data() + 12 + hlen;
  for (std::size_t i = 0; i < dst.size(); ++i) dst[i] = std::bit_cast<float>(get_u32le(p + 4 * i));
  return vol;
}

SliceSet slice_volume(const Volume3D& vol, PlaneId plane, int steps) {
  if (steps < 1) throw ValidationError("slice_volume requires T >= 1");
  const auto& d = vol.dims();
  SliceSet ss;
  ss.plane = plane;
  switch (plane) {
    case PlaneId::XY:
      ss.index_axis_len = d.c;
      for (int z = 0; z < d.c; ++z) {
        Image2D img(d.h, d.w);
        for (int x = 0; x < d.h; ++x)
          for (int y = 0; y < d.w; ++y) img.at(x, y) = vol.at(x, y, z);
        ss.slices.push_back(std::move(img));
        ss.t_of_index.push_back(step_for_index(z, d.c, steps));
      }
      break;
    case PlaneId::XZ:
      ss.index_axis_len = d.w;
      for (int y = 0; y < d.w; ++y) {
        Image2D img(d.h, d.c);
        for (int x = 0; x < d.h; ++x)
          for (int z = 0; z < d.c; ++z) img.at(x, z) = vol.at(x, y, z);
        ss.slices.push_back(std::move(img));
        ss.t_of_index.push_back(0);
      }
      break;
    case PlaneId::YZ:
      ss.index_axis_len = d.h;
      for (int x = 0; x < d.h; ++x) {
        Image2D img(d.w, d.c);
        for (int y = 0; y < d.w; ++y)
          for (int z = 0; z < d.c; ++z) img.at(y, z) = vol.at(x, y, z);
        ss.slices.push_back(std::move(img));
        ss.t_of_index.push_back(0);
      }
      break;
  }
  return ss;
}

Volume3D reassemble_volume(const SliceSet& ss, Dims dims) {
  int count = 0, rows = 0, cols = 0;
  switch (ss.plane) {
    case PlaneId::XY: count = dims.c; rows = dims.h; cols = dims.w; break;
    case PlaneId::XZ: count = dims.w; rows = dims.h; cols = dims.c; break;
    case PlaneId::YZ: count = dims.h; rows = dims.w; cols = dims.c; break;
  }
  if (static_cast<int>(ss.slices.size()) != count)
    throw DimensionError("expected " + std::to_string(count) + " slices, got " +
                         std::to_string(ss.slices.size()));
  for (std::size_t i = 0; i < ss.slices.size(); ++i) {
    const auto& s = ss.slices[i];
    if (s.rows != rows || s.cols != cols || s.data.size() != static_cast<std::size_t>(rows) * cols)
      throw DimensionError("slice " + std::to_string(i) + " has shape (" + std::to_string(s.rows) + "," +
                           std::to_string(s.cols) + "), expected (" + std::to_string(rows) + "," +
                           std::to_string(cols) + ")");
  }
  Volume3D vol(dims);
  for (int i = 0; i < count; ++i) {
    const auto& s = ss.slices[i];
    for (int r = 0; r < rows; ++r)
      for (int cl = 0; cl < cols; ++cl) {
        switch (ss.plane) {
          case PlaneId::XY: vol.at(r, cl, i) = s.at(r, cl); break;
          case PlaneId::XZ: vol.at(r, i, cl) = s.at(r, cl); break;
          case PlaneId::YZ: vol.at(i, r, cl) = s.at(r, cl); break;
        }
      }
  }
  return vol;
}

Image2D xy_slice(const Volume3D& vol, int z) {
  const auto& d = vol.dims();
  Image2D img(d.h, d.w);
  auto src = vol.data().subspan(static_cast<std::size_t>(z) * d.h * d.w, static_cast<std::size_t>(d.h) * d.w);
  std::copy(src.begin(), src.end(), img.data.begin());
  return img;
}

Tensor slice_tensor(const Image2D& img) {
  Tensor t = Tensor::field(img.rows, img.cols);
  for (std::size_t i = 0; i < img.data.size(); ++i) t.v[i] = img.data[i];
  return t;
}

Image2D image_from_tensor(const Tensor& t) {
  Image2D img(t.h, t.w);
  for (std::size_t i = 0; i < img.data.size(); ++i) img.data[i] = static_cast<float>(t.v[i]);
  return img;
}

}  // namespace vtcd
