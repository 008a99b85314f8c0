#pragma once

#include <optional>

#include "neuropipe/geometry.hpp"
#include "neuropipe/volume.hpp"

namespace neuropipe {

enum class InterpolationKind {
  Trilinear,
  Nearest,
};

InterpolationKind interpolation_from_name(const std::string& name);
const char* interpolation_name(InterpolationKind k);

/// Pulls `vol` onto `target`: each output voxel samples vol at
/// invert(world_transform) applied to the voxel's world position.
/// `world_transform` maps vol's world onto the target's world
/// (moving to fixed). Sample points whose interpolation cell is not
/// fully inside the input receive `background`; there is no edge
/// clamping. Trilinear on an integer dtype throws UsageError (labels
/// must use nearest). Output dtype equals input dtype.
Volume resample(const Volume& vol, const RigidTransform& world_transform,
                const GridSpec& target, InterpolationKind kind,
                double background = 0.0);

struct OnceTwicePsnr {
  double psnr_once = 0.0;
  double psnr_twice = 0.0;
};

/// Compares the single-pass path resample(vol, compose(a,b), target)
/// against the two-pass path resample(resample(vol, a, target), b,
/// target), reporting each one's PSNR versus `reference` (a volume on
/// `target`). Without a reference the single-pass result itself is the
/// reference, so psnr_once reads as the cap value. Trilinear throughout.
OnceTwicePsnr resample_once_vs_twice_report(
    const Volume& vol, const RigidTransform& a, const RigidTransform& b,
    const GridSpec& target,
    const std::optional<Volume>& reference = std::nullopt);

} // namespace neuropipe
