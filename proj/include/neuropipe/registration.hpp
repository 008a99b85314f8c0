#pragma once

#include <Eigen/Dense>

#include <optional>
#include <vector>

#include "neuropipe/errors.hpp"
#include "neuropipe/geometry.hpp"
#include "neuropipe/mask.hpp"
#include "neuropipe/volume.hpp"

namespace neuropipe {

enum class SimilarityMetric {
  Ncc,
  Msd,
};

SimilarityMetric metric_from_name(const std::string& name);
const char* metric_name(SimilarityMetric m);

struct RegistrationConfig {
  // Downsampling factors, coarse to fine; strictly decreasing, last 1.
  std::vector<int> pyramid_levels{4, 2, 1};
  int max_iterations_per_level = 200;
  SimilarityMetric metric = SimilarityMetric::Ncc;
  double translation_bounds_mm = 60.0;
  double rotation_bounds_rad = 0.6;
  double convergence_tol = 1e-6;
  // Reserved for stochastic restarts; the current optimizer is fully
  // deterministic and ignores it.
  std::uint64_t seed = 0;
};

void validate(const RegistrationConfig& cfg);

struct RegistrationResult {
  RigidTransform transform; // moving world -> fixed world, mm
  double final_metric = 0.0;
  std::vector<int> iterations; // one entry per pyramid level
  bool converged = false;      // last level hit tolerance before the cap
};

/// Optimization could not start: the similarity was degenerate at the
/// initial alignment. Carries that initial transform.
class RegistrationError : public Error {
public:
  RegistrationError(const std::string& what, const RigidTransform& initial)
      : Error(what), initial_(initial) {}
  const RigidTransform& initial_transform() const { return initial_; }

private:
  RigidTransform initial_;
};

/// Similarity between two volumes already on one grid. Ncc is
/// Pearson-style normalized cross-correlation in [-1,1] (higher is
/// better); Msd is mean squared difference (lower is better). Voxels
/// outside `mask` are ignored. Fewer than 2 in-mask voxels or zero
/// variance under ncc throws DegenerateInputError.
double similarity(const Volume& fixed, const Volume& moving_resampled,
                  const std::optional<BinaryMask>& mask,
                  SimilarityMetric metric);

/// Histogram-based foreground threshold (256 bins, between-class
/// variance). Throws DegenerateInputError on a constant image.
double otsu_threshold(const Volume& v);

/// Foreground mask at the Otsu threshold: bit iff value > threshold.
BinaryMask otsu_mask(const Volume& v);

/// Intensity-weighted centroid (world mm) over voxels above the Otsu
/// threshold; stabilizes initialization against bright non-brain tissue.
Eigen::Vector3d weighted_centroid_world(const Volume& v);

/// Estimates the rigid moving->fixed transform by coarse-to-fine
/// Nelder-Mead over 6 parameters (Euler z-y-x about the moving centroid
/// + translation), warm-started across pyramid levels. Each candidate is
/// scored with trilinear pulls in both directions (moving onto the fixed
/// grid and fixed onto the moving grid, averaged; interpolation blur
/// would otherwise bias a one-way score), restricted to the domain
/// overlap so background never scores against signal, 2x subsampled at
/// the coarsest level. Initialization matches the two volumes' intensity
/// centroids. Deterministic for identical inputs.
RegistrationResult register_rigid(const Volume& fixed, const Volume& moving,
                                  const RegistrationConfig& cfg = {});

/// Masked copy of `moving` for estimating the second transform when the
/// reference is already skull-stripped. The caller must use the result
/// only to estimate that transform; it is never resampled into pipeline
/// output. Empty mask throws DegenerateInputError.
Volume intermediate_skullstrip_guard(const Volume& moving,
                                     const BinaryMask& mask);

/// Box-average downsample by an integer factor (pyramid construction).
/// Partial edge blocks average the voxels that exist.
Volume downsample_by(const Volume& v, int factor);

} // namespace neuropipe
