#pragma once

#include <Eigen/Dense>

#include <cstdint>
#include <vector>

#include "neuropipe/errors.hpp"

namespace neuropipe {

enum class DataType : std::uint8_t {
  UInt8,
  Int16,
  Int32,
  Float32,
  Float64,
};

int nifti_code(DataType dt);
DataType dtype_from_nifti_code(int code); // throws UnsupportedDtypeError
int bytes_per_voxel(DataType dt);
bool is_integer_dtype(DataType dt);
const char* dtype_name(DataType dt);

/// A 3D scalar grid with physical geometry. Voxel (i,j,k) lives at
/// data[i + dims[0]*(j + dims[1]*k)]; its world position in mm is
/// affine * (i,j,k,1). Intensities are held as float64 regardless of
/// dtype; dtype records the on-disk representation.
struct Volume {
  Eigen::Array3i dims{0, 0, 0};
  Eigen::Vector3d spacing{1.0, 1.0, 1.0};
  Eigen::Matrix4d affine = Eigen::Matrix4d::Identity();
  Eigen::ArrayXd data;
  DataType dtype = DataType::Float32;

  // Raw NIfTI extension bytes (extender included), passed through untouched.
  std::vector<std::uint8_t> extensions;

  std::int64_t voxel_count() const {
    return static_cast<std::int64_t>(dims[0]) * dims[1] * dims[2];
  }

  std::int64_t index_of(int i, int j, int k) const {
    return i + static_cast<std::int64_t>(dims[0]) * (j + static_cast<std::int64_t>(dims[1]) * k);
  }

  double at(int i, int j, int k) const { return data[index_of(i, j, k)]; }
  double& at(int i, int j, int k) { return data[index_of(i, j, k)]; }

  Eigen::Vector3d index_to_world(const Eigen::Vector3d& idx) const {
    return affine.topLeftCorner<3, 3>() * idx + affine.topRightCorner<3, 1>();
  }

  /// Direction cosines: affine columns divided by spacing.
  Eigen::Matrix3d direction() const {
    Eigen::Matrix3d d = affine.topLeftCorner<3, 3>();
    for (int c = 0; c < 3; ++c) d.col(c) /= spacing[c];
    return d;
  }
};

/// Throws if any Volume invariant is violated: data length must equal
/// dims product, spacing must be positive, the affine's last row must be
/// (0,0,0,1), and the affine column norms must match spacing to 1e-4
/// relative.
void validate(const Volume& v);

/// True when the direction cosines are orthogonal within `tol` (required
/// by resampling and registration; plain I/O tolerates anything).
bool has_orthogonal_direction(const Volume& v, double tol = 1e-4);

/// Grids considered identical for voxelwise operations: equal dims and
/// affine entries within an absolute tolerance in mm.
bool same_geometry(const Volume& a, const Volume& b, double tol = 1e-4);

bool operator==(const Volume& a, const Volume& b);

Volume make_volume(const Eigen::Array3i& dims, const Eigen::Vector3d& spacing,
                   const Eigen::Matrix4d& affine, DataType dtype);

/// Same volume with the dtype tag switched to float32 (values untouched).
Volume as_float32(Volume v);

} // namespace neuropipe
