#pragma once

#include <Eigen/Dense>

#include <filesystem>

#include "neuropipe/errors.hpp"
#include "neuropipe/volume.hpp"

namespace neuropipe {

/// A world-to-world (mm) map: rotation plus translation. The wrapped 4x4
/// homogeneous matrix always has last row (0,0,0,1) and an upper-left
/// block R with R'R = I and det(R) = +1, both within 1e-9.
class RigidTransform {
public:
  RigidTransform() : mat_(Eigen::Matrix4d::Identity()) {}

  /// Validates rigidity; throws GeometryError otherwise.
  explicit RigidTransform(const Eigen::Matrix4d& m);

  const Eigen::Matrix4d& matrix() const { return mat_; }
  Eigen::Matrix3d rotation() const { return mat_.topLeftCorner<3, 3>(); }
  Eigen::Vector3d translation() const { return mat_.topRightCorner<3, 1>(); }

  static RigidTransform identity() { return RigidTransform(); }
  static RigidTransform translate(const Eigen::Vector3d& t);

private:
  Eigen::Matrix4d mat_;
};

inline constexpr double kRigidityTol = 1e-9;

/// Result maps x to second(first(x)). Re-orthonormalizes when the product
/// drifts beyond 1e-12 from a true rotation.
RigidTransform compose(const RigidTransform& first, const RigidTransform& second);

RigidTransform invert(const RigidTransform& t);

Eigen::Vector3d apply_point(const RigidTransform& t, const Eigen::Vector3d& p);

/// Rotation about `center` by intrinsic Z-Y-X Euler angles
/// (angles = [z, y, x], radians), followed by `translation` in mm.
RigidTransform euler_to_transform(const Eigen::Vector3d& angles,
                                  const Eigen::Vector3d& translation,
                                  const Eigen::Vector3d& center);

/// Smallest rotation angle (radians) taking a.rotation() to b.rotation().
double rotation_angle_between(const RigidTransform& a, const RigidTransform& b);

/// An output sampling lattice: dims voxels at `spacing` mm, voxel (0,0,0)
/// centered at `origin`, axes along the orthonormal `direction` columns.
struct GridSpec {
  Eigen::Array3i dims{0, 0, 0};
  Eigen::Vector3d spacing{1.0, 1.0, 1.0};
  Eigen::Vector3d origin{0.0, 0.0, 0.0};
  Eigen::Matrix3d direction = Eigen::Matrix3d::Identity();

  Eigen::Matrix4d affine() const;
  Eigen::Vector3d index_to_world(const Eigen::Vector3d& idx) const;
  std::int64_t voxel_count() const {
    return static_cast<std::int64_t>(dims[0]) * dims[1] * dims[2];
  }
};

/// Throws on non-positive dims/spacing or direction columns that are not
/// orthonormal within 1e-9.
void validate(const GridSpec& g);

/// Extracts the sampling grid of a volume. The direction is snapped to the
/// nearest orthonormal matrix (float32 headers carry ~1e-7 error); beyond
/// `tol` the volume is rejected as non-orthogonal.
GridSpec grid_of(const Volume& v, double tol = 1e-4);

/// Fresh volume allocated on `grid` (data zero-filled).
Volume volume_on_grid(const GridSpec& grid, DataType dtype);

// Transform text files: a `kind: rigid` tag followed by the 16 matrix
// entries, row-major.
void write_transform(const RigidTransform& t, const std::filesystem::path& path);
RigidTransform read_transform(const std::filesystem::path& path);

} // namespace neuropipe
