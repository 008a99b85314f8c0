#include "neuropipe/mask.hpp"

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <string>

#include "neuropipe/errors.hpp"

namespace neuropipe {

std::int64_t BinaryMask::count() const {
  return std::count_if(bits.begin(), bits.end(),
                       [](std::uint8_t b) { return b != 0; });
}

void validate(const BinaryMask& m) {
  for (int a = 0; a < 3; ++a) {
    if (m.dims[a] <= 0)
      throw GeometryError("mask dims must be positive");
    if (!(m.spacing[a] > 0.0) || !std::isfinite(m.spacing[a]))
      throw GeometryError("mask spacing must be positive and finite");
  }
  if (m.affine.row(3) != Eigen::RowVector4d(0, 0, 0, 1))
    throw GeometryError("mask affine last row must be 0 0 0 1");
  if (static_cast<std::int64_t>(m.bits.size()) != m.voxel_count())
    throw GeometryError("mask bits size does not match dims");
}

bool same_geometry(const Volume& v, const BinaryMask& m, double tol) {
  return (v.dims == m.dims).all() &&
         (v.spacing - m.spacing).cwiseAbs().maxCoeff() <= tol &&
         (v.affine - m.affine).cwiseAbs().maxCoeff() <= tol;
}

bool same_geometry(const BinaryMask& a, const BinaryMask& b, double tol) {
  return (a.dims == b.dims).all() &&
         (a.spacing - b.spacing).cwiseAbs().maxCoeff() <= tol &&
         (a.affine - b.affine).cwiseAbs().maxCoeff() <= tol;
}

BinaryMask make_mask(const Eigen::Array3i& dims, const Eigen::Vector3d& spacing,
                     const Eigen::Matrix4d& affine) {
  BinaryMask m;
  m.dims = dims;
  m.spacing = spacing;
  m.affine = affine;
  m.bits.assign(static_cast<std::size_t>(m.voxel_count()), 0);
  validate(m);
  return m;
}

BinaryMask mask_from_volume(const Volume& v) {
  validate(v);
  BinaryMask m = make_mask(v.dims, v.spacing, v.affine);
  for (std::int64_t i = 0; i < v.data.size(); ++i)
    m.bits[i] = v.data[i] != 0.0 ? 1 : 0;
  return m;
}

Volume mask_to_volume(const BinaryMask& m) {
  validate(m);
  Volume v = make_volume(m.dims, m.spacing, m.affine, DataType::UInt8);
  for (std::size_t i = 0; i < m.bits.size(); ++i)
    v.data[static_cast<std::int64_t>(i)] = m.bits[i] ? 1.0 : 0.0;
  return v;
}

LabelVolume label_volume_from(const Volume& v, const LabelTable& table) {
  validate(v);
  LabelVolume lv;
  lv.dims = v.dims;
  lv.spacing = v.spacing;
  lv.affine = v.affine;
  lv.labels.resize(static_cast<std::size_t>(v.voxel_count()));
  for (std::int64_t i = 0; i < v.data.size(); ++i) {
    double raw = v.data[i];
    int value = static_cast<int>(std::llround(raw));
    if (static_cast<double>(value) != raw ||
        (value != 0 && value != table.necrotic_core && value != table.edema &&
         value != table.enhancing))
      throw LabelError("unexpected label value " + std::to_string(raw) +
                       " at voxel index " + std::to_string(i));
    lv.labels[static_cast<std::size_t>(i)] = value;
  }
  return lv;
}

RegionSet derive_regions(const LabelVolume& seg, const LabelTable& table) {
  RegionSet r;
  r.wt = make_mask(seg.dims, seg.spacing, seg.affine);
  r.tc = make_mask(seg.dims, seg.spacing, seg.affine);
  r.at = make_mask(seg.dims, seg.spacing, seg.affine);
  for (std::size_t i = 0; i < seg.labels.size(); ++i) {
    int v = seg.labels[i];
    if (v == 0)
      continue;
    r.wt.bits[i] = 1;
    if (v == table.necrotic_core || v == table.enhancing)
      r.tc.bits[i] = 1;
    if (v == table.enhancing)
      r.at.bits[i] = 1;
  }
  return r;
}

Volume apply_mask(const Volume& vol, const BinaryMask& mask, double background) {
  validate(vol);
  validate(mask);
  if (!same_geometry(vol, mask))
    throw GeometryError("apply_mask requires volume and mask on one grid");
  Volume out = vol;
  for (std::int64_t i = 0; i < out.data.size(); ++i)
    if (!mask.bits[static_cast<std::size_t>(i)])
      out.data[i] = background;
  return out;
}

BinaryMask extract_mask(const Volume& stripped, double threshold) {
  validate(stripped);
  BinaryMask m = make_mask(stripped.dims, stripped.spacing, stripped.affine);
  for (std::int64_t i = 0; i < stripped.data.size(); ++i)
    m.bits[static_cast<std::size_t>(i)] =
        std::abs(stripped.data[i]) > threshold ? 1 : 0;
  return m;
}

} // namespace neuropipe
