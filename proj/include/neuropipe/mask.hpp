#pragma once

#include <Eigen/Dense>

#include <cstdint>
#include <vector>

#include "neuropipe/volume.hpp"

namespace neuropipe {

/// A boolean field on a voxel grid, same layout as Volume::data.
struct BinaryMask {
  Eigen::Array3i dims{0, 0, 0};
  Eigen::Vector3d spacing{1.0, 1.0, 1.0};
  Eigen::Matrix4d affine = Eigen::Matrix4d::Identity();
  std::vector<std::uint8_t> bits;

  std::int64_t voxel_count() const {
    return static_cast<std::int64_t>(dims[0]) * dims[1] * dims[2];
  }
  std::int64_t index_of(int i, int j, int k) const {
    return i + static_cast<std::int64_t>(dims[0]) *
                   (j + static_cast<std::int64_t>(dims[1]) * k);
  }
  bool at(int i, int j, int k) const { return bits[index_of(i, j, k)] != 0; }
  void set(int i, int j, int k, bool v) { bits[index_of(i, j, k)] = v ? 1 : 0; }

  std::int64_t count() const;
  bool empty() const { return count() == 0; }
};

void validate(const BinaryMask& m);
bool same_geometry(const Volume& v, const BinaryMask& m, double tol = 1e-4);
bool same_geometry(const BinaryMask& a, const BinaryMask& b, double tol = 1e-4);

BinaryMask make_mask(const Eigen::Array3i& dims, const Eigen::Vector3d& spacing,
                     const Eigen::Matrix4d& affine);

/// Mask from any volume: bit set iff the voxel is nonzero.
BinaryMask mask_from_volume(const Volume& v);

/// Masks travel as uint8 NIfTI volumes holding 0/1.
Volume mask_to_volume(const BinaryMask& m);

/// Integer label field; values restricted to {0, 1, 2, 4}
/// (1 necrotic/non-enhancing core, 2 edema, 4 enhancing tumor).
struct LabelVolume {
  Eigen::Array3i dims{0, 0, 0};
  Eigen::Vector3d spacing{1.0, 1.0, 1.0};
  Eigen::Matrix4d affine = Eigen::Matrix4d::Identity();
  std::vector<int> labels;

  std::int64_t voxel_count() const {
    return static_cast<std::int64_t>(dims[0]) * dims[1] * dims[2];
  }
};

/// The label convention in one place, so an alternative coding is a
/// single-table change.
struct LabelTable {
  int necrotic_core = 1;
  int edema = 2;
  int enhancing = 4;
};

/// Validates every voxel against the table (plus background 0); throws
/// LabelError naming the offending value and voxel index.
LabelVolume label_volume_from(const Volume& v, const LabelTable& table = {});

/// The three nested evaluation regions derived from a segmentation:
/// whole tumor, tumor core, active tumor. at is a subset of tc is a
/// subset of wt by construction.
struct RegionSet {
  BinaryMask wt;
  BinaryMask tc;
  BinaryMask at;
};

/// wt = {necrotic, edema, enhancing}; tc = {necrotic, enhancing};
/// at = {enhancing}.
RegionSet derive_regions(const LabelVolume& seg, const LabelTable& table = {});

/// In-mask voxels pass through; the rest become `background`.
/// Throws GeometryError when the grids differ.
Volume apply_mask(const Volume& vol, const BinaryMask& mask,
                  double background = 0.0);

/// Brain mask of an already-stripped image: bit iff |voxel| > threshold.
BinaryMask extract_mask(const Volume& stripped, double threshold = 0.0);

} // namespace neuropipe
