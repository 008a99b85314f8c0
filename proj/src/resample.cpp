#include "neuropipe/resample.hpp"

#include <Eigen/Dense>

#include <cmath>
#include <string>

#include "neuropipe/errors.hpp"
#include "neuropipe/mask.hpp"
#include "neuropipe/metrics.hpp"

namespace neuropipe {

namespace {

// Continuous indices this close to the domain edge are snapped inside,
// so grid-coincident sampling is not rejected over affine round-off.
constexpr double kSnapTol = 1e-6;

// Far tighter than kSnapTol: coordinates this close to a lattice point
// are treated as exactly on it, which keeps algebraically exact cases
// (identity onto the same grid, whole-voxel shifts) bit-exact instead
// of mixing in neighbors with ~1e-16 weights.
constexpr double kLatticeTol = 1e-9;

struct AxisSample {
  int lo;
  int hi;
  double frac; // weight of hi
};

// In-domain test and cell selection for one axis. The interpolation cell
// [lo, lo+1] always lies inside the volume; a coordinate outside
// [0, n-1] (beyond the snap tolerance) has no full cell and is rejected.
bool axis_cell(double c, int n, AxisSample& out) {
  if (c < -kSnapTol || c > static_cast<double>(n - 1) + kSnapTol)
    return false;
  c = std::clamp(c, 0.0, static_cast<double>(n - 1));
  const double nearest = std::round(c);
  if (std::abs(c - nearest) < kLatticeTol)
    c = nearest;
  if (n == 1) {
    out = {0, 0, 0.0};
    return true;
  }
  int lo = std::min(static_cast<int>(std::floor(c)), n - 2);
  out = {lo, lo + 1, c - lo};
  return true;
}

} // namespace

InterpolationKind interpolation_from_name(const std::string& name) {
  if (name == "trilinear")
    return InterpolationKind::Trilinear;
  if (name == "nearest")
    return InterpolationKind::Nearest;
  throw UsageError("unknown interpolation kind: " + name +
                   " (expected trilinear or nearest)");
}

const char* interpolation_name(InterpolationKind k) {
  return k == InterpolationKind::Trilinear ? "trilinear" : "nearest";
}

Volume resample(const Volume& vol, const RigidTransform& world_transform,
                const GridSpec& target, InterpolationKind kind,
                double background) {
  validate(vol);
  validate(target);
  if (!has_orthogonal_direction(vol))
    throw GeometryError("resample requires orthogonal direction columns");
  if (kind == InterpolationKind::Trilinear && is_integer_dtype(vol.dtype))
    throw UsageError("trilinear interpolation on integer dtype " +
                     std::string(dtype_name(vol.dtype)) +
                     " is forbidden; use nearest for labels");

  Volume out = volume_on_grid(target, vol.dtype);
  out.extensions = vol.extensions;

  // Output index -> input continuous index, one matrix for the whole pass.
  Eigen::Matrix4d s = vol.affine.inverse() *
                      invert(world_transform).matrix() * target.affine();

  const int nx = vol.dims[0], ny = vol.dims[1], nz = vol.dims[2];
  for (int k = 0; k < target.dims[2]; ++k) {
    for (int j = 0; j < target.dims[1]; ++j) {
      for (int i = 0; i < target.dims[0]; ++i) {
        Eigen::Vector4d c = s * Eigen::Vector4d(i, j, k, 1.0);
        double value = background;
        if (kind == InterpolationKind::Nearest) {
          AxisSample ax, ay, az;
          if (axis_cell(c[0], nx, ax) && axis_cell(c[1], ny, ay) &&
              axis_cell(c[2], nz, az)) {
            int ii = ax.frac < 0.5 ? ax.lo : ax.hi;
            int jj = ay.frac < 0.5 ? ay.lo : ay.hi;
            int kk = az.frac < 0.5 ? az.lo : az.hi;
            value = vol.at(ii, jj, kk);
          }
        } else {
          AxisSample ax, ay, az;
          if (axis_cell(c[0], nx, ax) && axis_cell(c[1], ny, ay) &&
              axis_cell(c[2], nz, az)) {
            double fx = ax.frac, fy = ay.frac, fz = az.frac;
            value =
                (1 - fz) * ((1 - fy) * ((1 - fx) * vol.at(ax.lo, ay.lo, az.lo) +
                                        fx * vol.at(ax.hi, ay.lo, az.lo)) +
                            fy * ((1 - fx) * vol.at(ax.lo, ay.hi, az.lo) +
                                  fx * vol.at(ax.hi, ay.hi, az.lo))) +
                fz * ((1 - fy) * ((1 - fx) * vol.at(ax.lo, ay.lo, az.hi) +
                                  fx * vol.at(ax.hi, ay.lo, az.hi)) +
                      fy * ((1 - fx) * vol.at(ax.lo, ay.hi, az.hi) +
                            fx * vol.at(ax.hi, ay.hi, az.hi)));
          }
        }
        out.at(i, j, k) = value;
      }
    }
  }
  return out;
}

OnceTwicePsnr resample_once_vs_twice_report(
    const Volume& vol, const RigidTransform& a, const RigidTransform& b,
    const GridSpec& target, const std::optional<Volume>& reference) {
  Volume once = resample(vol, compose(a, b), target,
                         InterpolationKind::Trilinear, 0.0);
  Volume intermediate = resample(vol, a, target,
                                 InterpolationKind::Trilinear, 0.0);
  Volume twice = resample(intermediate, b, target,
                          InterpolationKind::Trilinear, 0.0);

  const Volume& ref = reference ? *reference : once;
  if (!same_geometry(ref, once))
    throw GeometryError("once-vs-twice reference must live on the target grid");

  BinaryMask all = make_mask(ref.dims, ref.spacing, ref.affine);
  std::fill(all.bits.begin(), all.bits.end(), std::uint8_t{1});

  OnceTwicePsnr report;
  report.psnr_once = psnr_masked(ref, once, all);
  report.psnr_twice = psnr_masked(ref, twice, all);
  return report;
}

} // namespace neuropipe
