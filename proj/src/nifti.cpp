#include "neuropipe/nifti.hpp"

#include <zlib.h>

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <cstring>
#include <iostream>
#include <limits>
#include <string>
#include <vector>

#include "neuropipe/errors.hpp"

namespace neuropipe {

namespace {

// NIfTI-1 header, 348 bytes. Field offsets are fixed by the standard and
// pinned by the static_asserts below; the struct is naturally aligned so
// no packing pragma is needed.
struct Nifti1Header {
  std::int32_t sizeof_hdr;
  char data_type[10];
  char db_name[18];
  std::int32_t extents;
  std::int16_t session_error;
  char regular;
  char dim_info;
  std::int16_t dim[8];
  float intent_p1;
  float intent_p2;
  float intent_p3;
  std::int16_t intent_code;
  std::int16_t datatype;
  std::int16_t bitpix;
  std::int16_t slice_start;
  float pixdim[8];
  float vox_offset;
  float scl_slope;
  float scl_inter;
  std::int16_t slice_end;
  char slice_code;
  char xyzt_units;
  float cal_max;
  float cal_min;
  float slice_duration;
  float toffset;
  std::int32_t glmax;
  std::int32_t glmin;
  char descrip[80];
  char aux_file[24];
  std::int16_t qform_code;
  std::int16_t sform_code;
  float quatern_b;
  float quatern_c;
  float quatern_d;
  float qoffset_x;
  float qoffset_y;
  float qoffset_z;
  float srow_x[4];
  float srow_y[4];
  float srow_z[4];
  char intent_name[16];
  char magic[4];
};

static_assert(sizeof(Nifti1Header) == 348);
static_assert(offsetof(Nifti1Header, dim) == 40);
static_assert(offsetof(Nifti1Header, datatype) == 70);
static_assert(offsetof(Nifti1Header, bitpix) == 72);
static_assert(offsetof(Nifti1Header, pixdim) == 76);
static_assert(offsetof(Nifti1Header, vox_offset) == 108);
static_assert(offsetof(Nifti1Header, scl_slope) == 112);
static_assert(offsetof(Nifti1Header, scl_inter) == 116);
static_assert(offsetof(Nifti1Header, qform_code) == 252);
static_assert(offsetof(Nifti1Header, sform_code) == 254);
static_assert(offsetof(Nifti1Header, quatern_b) == 256);
static_assert(offsetof(Nifti1Header, srow_x) == 280);
static_assert(offsetof(Nifti1Header, srow_y) == 296);
static_assert(offsetof(Nifti1Header, srow_z) == 312);
static_assert(offsetof(Nifti1Header, magic) == 344);
static_assert(std::endian::native == std::endian::little,
              "writer assumes a little-endian host");

void swap2(void* p) {
  auto* b = static_cast<std::uint8_t*>(p);
  std::swap(b[0], b[1]);
}

void swap4(void* p) {
  auto* b = static_cast<std::uint8_t*>(p);
  std::swap(b[0], b[3]);
  std::swap(b[1], b[2]);
}

void swap8(void* p) {
  auto* b = static_cast<std::uint8_t*>(p);
  std::swap(b[0], b[7]);
  std::swap(b[1], b[6]);
  std::swap(b[2], b[5]);
  std::swap(b[3], b[4]);
}

void swap_header(Nifti1Header& h) {
  swap4(&h.sizeof_hdr);
  swap4(&h.extents);
  swap2(&h.session_error);
  for (auto& d : h.dim) swap2(&d);
  swap4(&h.intent_p1);
  swap4(&h.intent_p2);
  swap4(&h.intent_p3);
  swap2(&h.intent_code);
  swap2(&h.datatype);
  swap2(&h.bitpix);
  swap2(&h.slice_start);
  for (auto& p : h.pixdim) swap4(&p);
  swap4(&h.vox_offset);
  swap4(&h.scl_slope);
  swap4(&h.scl_inter);
  swap2(&h.slice_end);
  swap4(&h.cal_max);
  swap4(&h.cal_min);
  swap4(&h.slice_duration);
  swap4(&h.toffset);
  swap4(&h.glmax);
  swap4(&h.glmin);
  swap2(&h.qform_code);
  swap2(&h.sform_code);
  swap4(&h.quatern_b);
  swap4(&h.quatern_c);
  swap4(&h.quatern_d);
  swap4(&h.qoffset_x);
  swap4(&h.qoffset_y);
  swap4(&h.qoffset_z);
  for (auto& v : h.srow_x) swap4(&v);
  for (auto& v : h.srow_y) swap4(&v);
  for (auto& v : h.srow_z) swap4(&v);
}

class GzReader {
public:
  explicit GzReader(const std::filesystem::path& path)
      : path_(path), f_(gzopen(path.string().c_str(), "rb")) {
    if (!f_)
      throw IoError("cannot open file: " + path.string());
  }
  ~GzReader() {
    if (f_) gzclose(f_);
  }
  GzReader(const GzReader&) = delete;
  GzReader& operator=(const GzReader&) = delete;

  // Reads exactly n bytes or throws.
  void read_exact(void* dst, std::size_t n, const char* what) {
    std::size_t got = read_up_to(dst, n);
    if (got != n)
      throw TruncationError("truncated " + std::string(what) + " in " +
                            path_.string());
  }

  // Reads at most n bytes, returning the count (short only at EOF).
  std::size_t read_up_to(void* dst, std::size_t n) {
    auto* out = static_cast<std::uint8_t*>(dst);
    std::size_t total = 0;
    while (total < n) {
      unsigned chunk = static_cast<unsigned>(
          std::min<std::size_t>(n - total, 1u << 30));
      int got = gzread(f_, out + total, chunk);
      if (got < 0)
        throw IoError("read error in " + path_.string());
      if (got == 0)
        break;
      total += static_cast<std::size_t>(got);
    }
    return total;
  }

  std::vector<std::uint8_t> read_rest() {
    std::vector<std::uint8_t> out;
    std::uint8_t buf[65536];
    for (;;) {
      std::size_t got = read_up_to(buf, sizeof(buf));
      out.insert(out.end(), buf, buf + got);
      if (got < sizeof(buf))
        return out;
    }
  }

private:
  std::filesystem::path path_;
  gzFile f_;
};

class GzWriter {
public:
  GzWriter(const std::filesystem::path& path, bool compress) : path_(path) {
    // "wT" writes the file uncompressed (transparent mode).
    f_ = gzopen(path.string().c_str(), compress ? "wb" : "wT");
    if (!f_)
      throw IoError("cannot open file for writing: " + path.string());
  }
  ~GzWriter() {
    if (f_) gzclose(f_);
  }
  GzWriter(const GzWriter&) = delete;
  GzWriter& operator=(const GzWriter&) = delete;

  void write(const void* src, std::size_t n) {
    auto* in = static_cast<const std::uint8_t*>(src);
    std::size_t total = 0;
    while (total < n) {
      unsigned chunk = static_cast<unsigned>(
          std::min<std::size_t>(n - total, 1u << 30));
      int put = gzwrite(f_, in + total, chunk);
      if (put <= 0)
        throw IoError("write error in " + path_.string());
      total += static_cast<std::size_t>(put);
    }
  }

  void close() {
    int rc = gzclose(f_);
    f_ = nullptr;
    if (rc != Z_OK)
      throw IoError("failed to finalize " + path_.string());
  }

private:
  std::filesystem::path path_;
  gzFile f_ = nullptr;
};

bool swapped_matches(std::int32_t raw, std::int32_t want) {
  swap4(&raw);
  return raw == want;
}

Eigen::Matrix3d quaternion_rotation(const Nifti1Header& h) {
  double b = h.quatern_b, c = h.quatern_c, d = h.quatern_d;
  double a2 = 1.0 - (b * b + c * c + d * d);
  double a = a2 > 0.0 ? std::sqrt(a2) : 0.0;
  Eigen::Matrix3d r;
  r << a * a + b * b - c * c - d * d, 2 * (b * c - a * d), 2 * (b * d + a * c),
      2 * (b * c + a * d), a * a + c * c - b * b - d * d, 2 * (c * d - a * b),
      2 * (b * d - a * c), 2 * (c * d + a * b), a * a + d * d - c * c - b * b;
  return r;
}

template <typename T>
void decode_samples(const std::uint8_t* bytes, std::int64_t n, bool swap,
                    Eigen::ArrayXd& out) {
  for (std::int64_t i = 0; i < n; ++i) {
    T v;
    std::memcpy(&v, bytes + i * sizeof(T), sizeof(T));
    if (swap) {
      if constexpr (sizeof(T) == 2)
        swap2(&v);
      else if constexpr (sizeof(T) == 4)
        swap4(&v);
      else if constexpr (sizeof(T) == 8)
        swap8(&v);
    }
    out[i] = static_cast<double>(v);
  }
}

void decode_data(const std::vector<std::uint8_t>& bytes, DataType dtype,
                 bool swap, Eigen::ArrayXd& out) {
  const std::int64_t n = out.size();
  switch (dtype) {
  case DataType::UInt8:
    decode_samples<std::uint8_t>(bytes.data(), n, false, out);
    break;
  case DataType::Int16:
    decode_samples<std::int16_t>(bytes.data(), n, swap, out);
    break;
  case DataType::Int32:
    decode_samples<std::int32_t>(bytes.data(), n, swap, out);
    break;
  case DataType::Float32:
    decode_samples<float>(bytes.data(), n, swap, out);
    break;
  case DataType::Float64:
    decode_samples<double>(bytes.data(), n, swap, out);
    break;
  }
}

template <typename T>
void encode_integer_samples(const Eigen::ArrayXd& data,
                            std::vector<std::uint8_t>& out) {
  constexpr double lo = static_cast<double>(std::numeric_limits<T>::min());
  constexpr double hi = static_cast<double>(std::numeric_limits<T>::max());
  for (std::int64_t i = 0; i < data.size(); ++i) {
    double clamped = std::clamp(data[i], lo, hi);
    T v = static_cast<T>(std::llround(clamped));
    std::memcpy(out.data() + i * sizeof(T), &v, sizeof(T));
  }
}

std::vector<std::uint8_t> encode_data(const Volume& vol) {
  std::vector<std::uint8_t> out(
      static_cast<std::size_t>(vol.voxel_count()) *
      static_cast<std::size_t>(bytes_per_voxel(vol.dtype)));
  switch (vol.dtype) {
  case DataType::UInt8:
    encode_integer_samples<std::uint8_t>(vol.data, out);
    break;
  case DataType::Int16:
    encode_integer_samples<std::int16_t>(vol.data, out);
    break;
  case DataType::Int32:
    encode_integer_samples<std::int32_t>(vol.data, out);
    break;
  case DataType::Float32:
    for (std::int64_t i = 0; i < vol.data.size(); ++i) {
      float v = static_cast<float>(vol.data[i]);
      std::memcpy(out.data() + i * 4, &v, 4);
    }
    break;
  case DataType::Float64:
    for (std::int64_t i = 0; i < vol.data.size(); ++i) {
      double v = vol.data[i];
      std::memcpy(out.data() + i * 8, &v, 8);
    }
    break;
  }
  return out;
}

// A lone zeroed 4-byte extender carries no extensions; represent it as
// "none" so written-then-read volumes compare equal to their source.
bool is_blank_extender(const std::vector<std::uint8_t>& region) {
  return region.size() == 4 &&
         std::all_of(region.begin(), region.end(),
                     [](std::uint8_t b) { return b == 0; });
}

std::filesystem::path sibling_image_path(const std::filesystem::path& hdr) {
  std::string s = hdr.string();
  auto replace_suffix = [&](const std::string& from, const std::string& to)
      -> std::filesystem::path {
    if (s.size() >= from.size() &&
        s.compare(s.size() - from.size(), from.size(), from) == 0)
      return s.substr(0, s.size() - from.size()) + to;
    return {};
  };
  for (auto [from, to] : {std::pair<const char*, const char*>{".hdr.gz", ".img.gz"},
                          {".hdr", ".img"}}) {
    auto p = replace_suffix(from, to);
    if (p.empty())
      continue;
    if (std::filesystem::exists(p))
      return p;
    // gzopen reads either framing, so accept the other compression variant.
    auto alt = replace_suffix(from, std::string(to) == ".img" ? ".img.gz" : ".img");
    if (!alt.empty() && std::filesystem::exists(alt))
      return alt;
  }
  throw IoError("header/image pair: no .img file found next to " + hdr.string());
}

} // namespace

Volume read_volume(const std::filesystem::path& path) {
  GzReader in(path);

  Nifti1Header h;
  in.read_exact(&h, sizeof(h), "header");

  bool swap = false;
  if (h.sizeof_hdr != 348) {
    if (h.sizeof_hdr == 540 || swapped_matches(h.sizeof_hdr, 540))
      throw FormatError("NIfTI-2 is not supported: " + path.string());
    if (!swapped_matches(h.sizeof_hdr, 348))
      throw FormatError("not a NIfTI-1 file (bad sizeof_hdr): " + path.string());
    swap = true;
    swap_header(h);
  }

  bool single_file;
  if (std::memcmp(h.magic, "n+1", 4) == 0)
    single_file = true;
  else if (std::memcmp(h.magic, "ni1", 4) == 0)
    single_file = false;
  else
    throw FormatError("malformed NIfTI magic in " + path.string());

  DataType dtype = dtype_from_nifti_code(h.datatype);
  if (h.bitpix != 8 * bytes_per_voxel(dtype))
    throw FormatError("bitpix contradicts datatype in " + path.string());

  int nd = h.dim[0];
  if (nd < 1 || nd > 7)
    throw FormatError("invalid dim[0] in " + path.string());
  for (int a = 4; a <= nd; ++a)
    if (h.dim[a] > 1)
      throw FormatError("volume has more than three non-singleton dimensions: " +
                        path.string());
  Eigen::Array3i dims;
  for (int a = 0; a < 3; ++a) {
    dims[a] = a < nd ? h.dim[a + 1] : 1;
    if (dims[a] < 1)
      throw FormatError("non-positive dimension in " + path.string());
  }

  Eigen::Matrix4d affine = Eigen::Matrix4d::Identity();
  if (h.sform_code > 0) {
    for (int c = 0; c < 4; ++c) {
      affine(0, c) = h.srow_x[c];
      affine(1, c) = h.srow_y[c];
      affine(2, c) = h.srow_z[c];
    }
  } else if (h.qform_code > 0) {
    Eigen::Matrix3d r = quaternion_rotation(h);
    double qfac = h.pixdim[0] < 0.0f ? -1.0 : 1.0;
    Eigen::Vector3d step(h.pixdim[1], h.pixdim[2], qfac * h.pixdim[3]);
    affine.topLeftCorner<3, 3>() = r * step.asDiagonal();
    affine.topRightCorner<3, 1>() =
        Eigen::Vector3d(h.qoffset_x, h.qoffset_y, h.qoffset_z);
  } else {
    for (int a = 0; a < 3; ++a)
      affine(a, a) = h.pixdim[a + 1];
  }
  if (!affine.allFinite() || affine.topLeftCorner<3, 3>().determinant() == 0.0)
    throw FormatError("degenerate affine in " + path.string());

  Eigen::Vector3d col_norms;
  for (int a = 0; a < 3; ++a)
    col_norms[a] = affine.block<3, 1>(0, a).norm();
  Eigen::Vector3d spacing;
  for (int a = 0; a < 3; ++a) {
    double pd = h.pixdim[a + 1];
    if (pd > 0.0 && std::abs(pd - col_norms[a]) <= 1e-4 * pd) {
      spacing[a] = pd;
    } else {
      spacing[a] = col_norms[a];
      if (pd > 0.0)
        std::cerr << "warning: pixdim disagrees with affine column norm on axis "
                  << a << " in " << path.string() << "; using the affine\n";
    }
  }

  std::vector<std::uint8_t> region;
  std::vector<std::uint8_t> raw;
  const std::size_t nbytes = static_cast<std::size_t>(dims.cast<std::int64_t>().prod()) *
                             static_cast<std::size_t>(bytes_per_voxel(dtype));
  if (single_file) {
    auto data_start = static_cast<std::int64_t>(h.vox_offset);
    if (data_start < 348)
      throw FormatError("vox_offset below header size in " + path.string());
    region.resize(static_cast<std::size_t>(data_start - 348));
    if (!region.empty())
      in.read_exact(region.data(), region.size(), "extension region");
    raw.resize(nbytes);
    in.read_exact(raw.data(), nbytes, "data section");
  } else {
    region = in.read_rest();
    GzReader img(sibling_image_path(path));
    auto img_offset = static_cast<std::int64_t>(h.vox_offset);
    if (img_offset < 0)
      throw FormatError("negative vox_offset in " + path.string());
    if (img_offset > 0) {
      std::vector<std::uint8_t> skip(static_cast<std::size_t>(img_offset));
      img.read_exact(skip.data(), skip.size(), "data section");
    }
    raw.resize(nbytes);
    img.read_exact(raw.data(), nbytes, "data section");
  }
  if (is_blank_extender(region))
    region.clear();

  Volume vol;
  vol.dims = dims;
  vol.spacing = spacing;
  vol.affine = affine;
  vol.dtype = dtype;
  vol.extensions = std::move(region);
  vol.data.resize(vol.voxel_count());
  decode_data(raw, dtype, swap, vol.data);

  if (h.scl_slope != 0.0f &&
      !(h.scl_slope == 1.0f && h.scl_inter == 0.0f)) {
    vol.data = vol.data * static_cast<double>(h.scl_slope) +
               static_cast<double>(h.scl_inter);
    // Scaled values are no longer the stored integers; retag so a write
    // does not quantize them away.
    if (is_integer_dtype(vol.dtype))
      vol.dtype = DataType::Float32;
  }

  validate(vol);
  if (!has_orthogonal_direction(vol))
    std::cerr << "warning: non-orthogonal direction in " << path.string()
              << "; resampling and registration will reject this volume\n";
  return vol;
}

void write_volume(const Volume& vol, const std::filesystem::path& path,
                  bool compress) {
  validate(vol);

  Nifti1Header h;
  std::memset(&h, 0, sizeof(h));
  h.sizeof_hdr = 348;
  h.regular = 'r';
  h.dim[0] = 3;
  for (int a = 0; a < 3; ++a) {
    if (vol.dims[a] > 32767)
      throw GeometryError("dimension exceeds the NIfTI-1 int16 dim field");
    h.dim[a + 1] = static_cast<std::int16_t>(vol.dims[a]);
  }
  for (int a = 4; a < 8; ++a)
    h.dim[a] = 1;
  h.datatype = static_cast<std::int16_t>(nifti_code(vol.dtype));
  h.bitpix = static_cast<std::int16_t>(8 * bytes_per_voxel(vol.dtype));
  h.pixdim[0] = 1.0f;
  for (int a = 0; a < 3; ++a)
    h.pixdim[a + 1] = static_cast<float>(vol.spacing[a]);
  const std::vector<std::uint8_t>& ext = vol.extensions;
  std::size_t region_size = ext.empty() ? 4 : ext.size();
  h.vox_offset = static_cast<float>(348 + region_size);
  h.scl_slope = 1.0f;
  h.scl_inter = 0.0f;
  h.xyzt_units = 2; // millimetres
  h.qform_code = 0;
  h.sform_code = 1;
  for (int c = 0; c < 4; ++c) {
    h.srow_x[c] = static_cast<float>(vol.affine(0, c));
    h.srow_y[c] = static_cast<float>(vol.affine(1, c));
    h.srow_z[c] = static_cast<float>(vol.affine(2, c));
  }
  std::memcpy(h.magic, "n+1", 4);

  std::vector<std::uint8_t> raw = encode_data(vol);

  GzWriter out(path, compress);
  out.write(&h, sizeof(h));
  if (ext.empty()) {
    const std::uint8_t extender[4] = {0, 0, 0, 0};
    out.write(extender, 4);
  } else {
    out.write(ext.data(), ext.size());
  }
  out.write(raw.data(), raw.size());
  out.close();
}

void write_volume(const Volume& vol, const std::filesystem::path& path) {
  std::string s = path.string();
  bool gz = s.size() >= 3 && s.compare(s.size() - 3, 3, ".gz") == 0;
  write_volume(vol, path, gz);
}

} // namespace neuropipe
