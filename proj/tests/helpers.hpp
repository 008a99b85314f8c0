#pragma once

// Shared builders for the test suites: analytic Gaussian phantoms,
// random rigid perturbations, random volumes for round-trip checks,
// and scratch directories. Everything is seeded explicitly; no test
// draws from global state.

#include <Eigen/Dense>

#include <atomic>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <random>
#include <string>
#include <vector>

#include <unistd.h>

#include "neuropipe/geometry.hpp"
#include "neuropipe/mask.hpp"
#include "neuropipe/volume.hpp"

namespace testutil {

// volatile blocks a GCC 11 -O3 SLP miscompilation that elides the
// double->float->double narrowing when the float stays in registers.
inline double round_f32(double v) {
  volatile float f = static_cast<float>(v);
  return f;
}

inline std::filesystem::path scratch_dir(const std::string& tag) {
  static std::atomic<int> counter{0};
  const auto dir = std::filesystem::temp_directory_path() /
                   ("neuropipe-" + tag + "-" + std::to_string(getpid()) + "-" +
                    std::to_string(counter.fetch_add(1)));
  std::filesystem::create_directories(dir);
  return dir;
}

// Sum of isotropic Gaussians placed in world space (mm). Rigid maps act
// on it exactly: moving a blob's center by T transforms the whole field
// by T, which gives closed-form references for resampling tests.
struct PhantomField {
  struct Blob {
    Eigen::Vector3d center{0.0, 0.0, 0.0};
    double sigma_mm = 10.0;
    double amplitude = 100.0;
  };
  std::vector<Blob> blobs;

  double operator()(const Eigen::Vector3d& world) const {
    double s = 0.0;
    for (const auto& b : blobs)
      s += b.amplitude *
           std::exp(-(world - b.center).squaredNorm() / (2.0 * b.sigma_mm * b.sigma_mm));
    return s;
  }
};

inline PhantomField transformed(PhantomField f, const neuropipe::RigidTransform& t) {
  for (auto& b : f.blobs)
    b.center = neuropipe::apply_point(t, b.center);
  return f;
}

// Three unequal blobs around the grid center; the asymmetry makes every
// rigid motion observable (a single blob is rotation-invariant).
inline PhantomField default_field(const neuropipe::GridSpec& grid) {
  const Eigen::Vector3d c = grid.index_to_world(
      (grid.dims.cast<double>() - 1.0).matrix() / 2.0);
  const Eigen::Vector3d extent =
      (grid.dims.cast<double>() * grid.spacing.array()).matrix();
  const double r = extent.minCoeff() / 2.0;
  PhantomField f;
  f.blobs.push_back({c + Eigen::Vector3d(0.30 * r, 0.0, 0.0), 0.32 * r, 100.0});
  f.blobs.push_back({c + Eigen::Vector3d(-0.25 * r, 0.25 * r, 0.0), 0.20 * r, 70.0});
  f.blobs.push_back({c + Eigen::Vector3d(0.0, -0.20 * r, 0.30 * r), 0.14 * r, 55.0});
  return f;
}

inline neuropipe::Volume sample_field(const PhantomField& f,
                                      const neuropipe::GridSpec& grid,
                                      neuropipe::DataType dtype =
                                          neuropipe::DataType::Float32) {
  neuropipe::Volume v = neuropipe::volume_on_grid(grid, dtype);
  for (int k = 0; k < grid.dims[2]; ++k)
    for (int j = 0; j < grid.dims[1]; ++j)
      for (int i = 0; i < grid.dims[0]; ++i)
        v.at(i, j, k) = f(grid.index_to_world(Eigen::Vector3d(i, j, k)));
  if (dtype == neuropipe::DataType::Float32)
    for (std::int64_t n = 0; n < v.data.size(); ++n)
      v.data[n] = round_f32(v.data[n]);
  return v;
}

inline neuropipe::GridSpec cube_grid(int n, double spacing_mm) {
  neuropipe::GridSpec g;
  g.dims = Eigen::Array3i(n, n, n);
  g.spacing = Eigen::Vector3d::Constant(spacing_mm);
  g.origin = Eigen::Vector3d::Zero();
  return g;
}

// Rotation by `rot` about `center`, then translation by `t` (mm).
inline neuropipe::RigidTransform rigid_about(const Eigen::Matrix3d& rot,
                                             const Eigen::Vector3d& t,
                                             const Eigen::Vector3d& center) {
  Eigen::Matrix4d m = Eigen::Matrix4d::Identity();
  m.topLeftCorner<3, 3>() = rot;
  m.topRightCorner<3, 1>() = t + center - rot * center;
  return neuropipe::RigidTransform(m);
}

// Axis-angle rotation (angle ≤ max_angle_rad) about `center` plus a
// translation of norm ≤ max_translation_mm.
inline neuropipe::RigidTransform random_rigid(std::mt19937_64& rng,
                                              double max_translation_mm,
                                              double max_angle_rad,
                                              const Eigen::Vector3d& center) {
  std::uniform_real_distribution<double> unit(-1.0, 1.0);
  std::uniform_real_distribution<double> mag(0.0, 1.0);
  Eigen::Vector3d axis;
  do {
    axis = Eigen::Vector3d(unit(rng), unit(rng), unit(rng));
  } while (axis.norm() < 1e-3);
  axis.normalize();
  const double angle = mag(rng) * max_angle_rad;
  Eigen::Vector3d dir;
  do {
    dir = Eigen::Vector3d(unit(rng), unit(rng), unit(rng));
  } while (dir.norm() < 1e-3);
  dir.normalize();
  const Eigen::Vector3d t = mag(rng) * max_translation_mm * dir;
  return rigid_about(Eigen::AngleAxisd(angle, axis).toRotationMatrix(), t,
                     center);
}

// Random volume whose every stored quantity is exactly representable in
// a NIfTI-1 header/payload, so write→read must be bit-exact.
inline neuropipe::Volume random_volume(std::mt19937_64& rng) {
  using neuropipe::DataType;
  std::uniform_int_distribution<int> dim_dist(1, 12);
  std::uniform_int_distribution<int> dtype_dist(0, 4);
  std::uniform_real_distribution<double> spacing_dist(0.3, 3.0);
  std::uniform_real_distribution<double> angle_dist(-3.14, 3.14);
  std::uniform_real_distribution<double> origin_dist(-80.0, 80.0);

  const Eigen::Array3i dims(dim_dist(rng), dim_dist(rng), dim_dist(rng));
  const DataType dtype = static_cast<DataType>(dtype_dist(rng));

  Eigen::Vector3d spacing;
  for (int a = 0; a < 3; ++a)
    spacing[a] = round_f32(spacing_dist(rng));

  Eigen::Matrix3d rot =
      (Eigen::AngleAxisd(angle_dist(rng), Eigen::Vector3d::UnitZ()) *
       Eigen::AngleAxisd(angle_dist(rng), Eigen::Vector3d::UnitY()) *
       Eigen::AngleAxisd(angle_dist(rng), Eigen::Vector3d::UnitX()))
          .toRotationMatrix();
  if (rng() % 2)
    rot.col(0) *= -1.0; // axis flips are routine in scanner frames

  Eigen::Matrix4d affine = Eigen::Matrix4d::Identity();
  for (int c = 0; c < 3; ++c)
    affine.block<3, 1>(0, c) = rot.col(c) * spacing[c];
  affine.block<3, 1>(0, 3) =
      Eigen::Vector3d(origin_dist(rng), origin_dist(rng), origin_dist(rng));
  for (int r = 0; r < 3; ++r)
    for (int c = 0; c < 4; ++c)
      affine(r, c) = round_f32(affine(r, c));

  neuropipe::Volume v = neuropipe::make_volume(dims, spacing, affine, dtype);
  std::uniform_real_distribution<double> val(-1000.0, 1000.0);
  std::uniform_int_distribution<int> byte(0, 255);
  for (std::int64_t n = 0; n < v.voxel_count(); ++n) {
    switch (dtype) {
    case DataType::UInt8:
      v.data[n] = byte(rng);
      break;
    case DataType::Int16:
      v.data[n] = std::uniform_int_distribution<int>(-32768, 32767)(rng);
      break;
    case DataType::Int32:
      v.data[n] = std::uniform_int_distribution<int>(-1000000, 1000000)(rng);
      break;
    case DataType::Float32:
      v.data[n] = round_f32(val(rng));
      break;
    case DataType::Float64:
      v.data[n] = val(rng);
      break;
    }
  }

  if (rng() % 3 == 0) {
    // One well-formed extension: extender {1,0,0,0}, esize 16, ecode 6.
    std::vector<std::uint8_t> ext = {1, 0, 0, 0};
    const std::int32_t esize = 16, ecode = 6;
    const auto* ep = reinterpret_cast<const std::uint8_t*>(&esize);
    ext.insert(ext.end(), ep, ep + 4);
    const auto* cp = reinterpret_cast<const std::uint8_t*>(&ecode);
    ext.insert(ext.end(), cp, cp + 4);
    for (int n = 0; n < 8; ++n)
      ext.push_back(static_cast<std::uint8_t>(byte(rng)));
    v.extensions = std::move(ext);
  }
  return v;
}

// Random 0/1 mask on a shared unit grid (for metric oracles).
inline neuropipe::BinaryMask random_mask(std::mt19937_64& rng,
                                         const Eigen::Array3i& dims,
                                         const Eigen::Vector3d& spacing,
                                         double fill = 0.2) {
  neuropipe::BinaryMask m = neuropipe::make_mask(
      dims, spacing, [&] {
        Eigen::Matrix4d a = Eigen::Matrix4d::Identity();
        a(0, 0) = spacing[0];
        a(1, 1) = spacing[1];
        a(2, 2) = spacing[2];
        return a;
      }());
  std::uniform_real_distribution<double> coin(0.0, 1.0);
  for (std::int64_t n = 0; n < m.voxel_count(); ++n)
    if (coin(rng) < fill)
      m.bits[n] = 1;
  return m;
}

} // namespace testutil
