#include "neuropipe/registration.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <string>

#include "neuropipe/optimize.hpp"
#include "neuropipe/resample.hpp"

namespace neuropipe {

namespace {

struct PairStats {
  std::int64_t n = 0;
  double mean_a = 0.0, mean_b = 0.0;
  double var_a = 0.0, var_b = 0.0, cov = 0.0; // sums of centered products
  double msd = 0.0;
};

PairStats masked_stats(const Volume& a, const Volume& b,
                       const std::optional<BinaryMask>& mask) {
  PairStats s;
  double sum_a = 0.0, sum_b = 0.0;
  const auto in = [&](std::int64_t i) {
    return !mask || mask->bits[static_cast<std::size_t>(i)] != 0;
  };
  for (std::int64_t i = 0; i < a.data.size(); ++i) {
    if (!in(i))
      continue;
    ++s.n;
    sum_a += a.data[i];
    sum_b += b.data[i];
  }
  if (s.n < 2)
    throw DegenerateInputError(
        "similarity requires at least 2 in-mask voxels, got " +
        std::to_string(s.n));
  s.mean_a = sum_a / static_cast<double>(s.n);
  s.mean_b = sum_b / static_cast<double>(s.n);
  for (std::int64_t i = 0; i < a.data.size(); ++i) {
    if (!in(i))
      continue;
    const double da = a.data[i] - s.mean_a, db = b.data[i] - s.mean_b;
    s.var_a += da * da;
    s.var_b += db * db;
    s.cov += da * db;
    const double diff = a.data[i] - b.data[i];
    s.msd += diff * diff;
  }
  s.msd /= static_cast<double>(s.n);
  return s;
}

// Every-other-voxel view of a volume: exact voxel copies on a coarser
// lattice, used to thin the similarity sums at the coarsest level.
Volume stride2_view(const Volume& v) {
  GridSpec g = grid_of(v);
  GridSpec out = g;
  for (int a = 0; a < 3; ++a)
    out.dims[a] = (g.dims[a] + 1) / 2;
  out.spacing = g.spacing * 2.0;
  Volume r = volume_on_grid(out, v.dtype);
  for (int k = 0; k < out.dims[2]; ++k)
    for (int j = 0; j < out.dims[1]; ++j)
      for (int i = 0; i < out.dims[0]; ++i)
        r.at(i, j, k) = v.at(2 * i, 2 * j, 2 * k);
  return r;
}

} // namespace

SimilarityMetric metric_from_name(const std::string& name) {
  if (name == "ncc")
    return SimilarityMetric::Ncc;
  if (name == "msd")
    return SimilarityMetric::Msd;
  throw UsageError("unknown similarity metric: " + name +
                   " (expected ncc or msd)");
}

const char* metric_name(SimilarityMetric m) {
  return m == SimilarityMetric::Ncc ? "ncc" : "msd";
}

void validate(const RegistrationConfig& cfg) {
  if (cfg.pyramid_levels.empty() || cfg.pyramid_levels.back() != 1)
    throw UsageError("pyramid levels must end at 1");
  for (std::size_t i = 0; i < cfg.pyramid_levels.size(); ++i) {
    if (cfg.pyramid_levels[i] < 1)
      throw UsageError("pyramid factors must be positive");
    if (i > 0 && cfg.pyramid_levels[i] >= cfg.pyramid_levels[i - 1])
      throw UsageError("pyramid factors must be strictly decreasing");
  }
  if (cfg.max_iterations_per_level < 1)
    throw UsageError("max_iterations_per_level must be positive");
  if (!(cfg.translation_bounds_mm > 0.0) || !(cfg.rotation_bounds_rad > 0.0))
    throw UsageError("registration bounds must be positive");
  if (!(cfg.convergence_tol > 0.0))
    throw UsageError("convergence_tol must be positive");
}

double similarity(const Volume& fixed, const Volume& moving_resampled,
                  const std::optional<BinaryMask>& mask,
                  SimilarityMetric metric) {
  validate(fixed);
  validate(moving_resampled);
  if (!same_geometry(fixed, moving_resampled))
    throw GeometryError("similarity requires both volumes on one grid");
  if (mask) {
    validate(*mask);
    if (!same_geometry(fixed, *mask))
      throw GeometryError("similarity mask must live on the volume grid");
  }
  PairStats s = masked_stats(fixed, moving_resampled, mask);
  if (metric == SimilarityMetric::Msd)
    return s.msd;
  if (s.var_a == 0.0 || s.var_b == 0.0)
    throw DegenerateInputError("ncc is undefined under zero variance");
  return std::clamp(s.cov / std::sqrt(s.var_a * s.var_b), -1.0, 1.0);
}

double otsu_threshold(const Volume& v) {
  validate(v);
  const double lo = v.data.minCoeff(), hi = v.data.maxCoeff();
  if (lo == hi)
    throw DegenerateInputError("otsu threshold is undefined on a constant image");
  constexpr int kBins = 256;
  const double width = (hi - lo) / kBins;
  std::vector<std::int64_t> hist(kBins, 0);
  for (std::int64_t i = 0; i < v.data.size(); ++i) {
    int b = static_cast<int>((v.data[i] - lo) / width);
    hist[std::clamp(b, 0, kBins - 1)]++;
  }
  const double total = static_cast<double>(v.data.size());
  double sum_all = 0.0;
  for (int b = 0; b < kBins; ++b)
    sum_all += b * static_cast<double>(hist[b]);
  double w0 = 0.0, sum0 = 0.0, best_var = -1.0;
  int best_bin = 0;
  for (int b = 0; b < kBins - 1; ++b) {
    w0 += static_cast<double>(hist[b]);
    if (w0 == 0.0)
      continue;
    const double w1 = total - w0;
    if (w1 == 0.0)
      break;
    sum0 += b * static_cast<double>(hist[b]);
    const double m0 = sum0 / w0, m1 = (sum_all - sum0) / w1;
    const double between = w0 * w1 * (m0 - m1) * (m0 - m1);
    if (between > best_var) {
      best_var = between;
      best_bin = b;
    }
  }
  // Threshold at the upper edge of the chosen bin.
  return lo + width * (best_bin + 1);
}

BinaryMask otsu_mask(const Volume& v) {
  const double thr = otsu_threshold(v);
  BinaryMask m = make_mask(v.dims, v.spacing, v.affine);
  for (std::int64_t i = 0; i < v.data.size(); ++i)
    m.bits[static_cast<std::size_t>(i)] = v.data[i] > thr ? 1 : 0;
  return m;
}

Eigen::Vector3d weighted_centroid_world(const Volume& v) {
  const double thr = otsu_threshold(v);
  Eigen::Vector3d centroid = Eigen::Vector3d::Zero();
  double total = 0.0;
  for (int k = 0; k < v.dims[2]; ++k)
    for (int j = 0; j < v.dims[1]; ++j)
      for (int i = 0; i < v.dims[0]; ++i) {
        const double w = v.at(i, j, k);
        if (w > thr) {
          centroid += w * Eigen::Vector3d(i, j, k);
          total += w;
        }
      }
  if (total <= 0.0)
    throw DegenerateInputError("no foreground above the Otsu threshold");
  return v.index_to_world(centroid / total);
}

Volume downsample_by(const Volume& v, int factor) {
  validate(v);
  if (factor < 1)
    throw UsageError("downsample factor must be positive");
  if (factor == 1)
    return v;
  Volume out;
  for (int a = 0; a < 3; ++a)
    out.dims[a] = (v.dims[a] + factor - 1) / factor;
  out.spacing = v.spacing * factor;
  // Level voxel m covers input block [f*m, f*m+f-1]; its center sits at
  // input index f*m + (f-1)/2.
  Eigen::Matrix4d block = Eigen::Matrix4d::Identity();
  block.topLeftCorner<3, 3>() *= factor;
  block.topRightCorner<3, 1>().setConstant((factor - 1) / 2.0);
  out.affine = v.affine * block;
  out.dtype = v.dtype;
  out.data = Eigen::ArrayXd::Zero(out.voxel_count());
  for (int k = 0; k < out.dims[2]; ++k)
    for (int j = 0; j < out.dims[1]; ++j)
      for (int i = 0; i < out.dims[0]; ++i) {
        double sum = 0.0;
        int n = 0;
        for (int dk = 0; dk < factor; ++dk)
          for (int dj = 0; dj < factor; ++dj)
            for (int di = 0; di < factor; ++di) {
              const int ii = factor * i + di, jj = factor * j + dj,
                        kk = factor * k + dk;
              if (ii < v.dims[0] && jj < v.dims[1] && kk < v.dims[2]) {
                sum += v.at(ii, jj, kk);
                ++n;
              }
            }
        out.at(i, j, k) = sum / n;
      }
  return out;
}

Volume intermediate_skullstrip_guard(const Volume& moving,
                                     const BinaryMask& mask) {
  if (mask.empty())
    throw DegenerateInputError("guard mask is empty");
  return apply_mask(moving, mask, 0.0);
}

RegistrationResult register_rigid(const Volume& fixed, const Volume& moving,
                                  const RegistrationConfig& cfg) {
  validate(cfg);
  validate(fixed);
  validate(moving);
  if (is_integer_dtype(fixed.dtype) || is_integer_dtype(moving.dtype))
    throw UsageError("register_rigid requires float volumes; convert labels "
                     "or retag integer images first");
  if (!has_orthogonal_direction(fixed) || !has_orthogonal_direction(moving))
    throw GeometryError("register_rigid requires orthogonal direction columns");

  // Shared parameterization across levels: rotation about the moving
  // centroid, translation offset from the centroid-matching shift.
  Eigen::Vector3d center, t0;
  try {
    center = weighted_centroid_world(moving);
    t0 = weighted_centroid_world(fixed) - center;
  } catch (const DegenerateInputError& e) {
    throw RegistrationError(std::string("initialization failed: ") + e.what(),
                            RigidTransform::identity());
  }

  const auto transform_of = [&](const Eigen::VectorXd& p) {
    return euler_to_transform(Eigen::Vector3d(p[0], p[1], p[2]),
                              t0 + Eigen::Vector3d(p[3], p[4], p[5]), center);
  };

  const double sign = cfg.metric == SimilarityMetric::Ncc ? -1.0 : 1.0;
  const double inf = std::numeric_limits<double>::infinity();

  RegistrationResult result;
  Eigen::VectorXd p = Eigen::VectorXd::Zero(6);
  bool first_level = true;
  for (std::size_t li = 0; li < cfg.pyramid_levels.size(); ++li) {
    const int f = cfg.pyramid_levels[li];
    Volume fixed_l = downsample_by(fixed, f);
    Volume moving_l = downsample_by(moving, f);
    // The stride thinning is a speed trick for full-size scans; on tiny
    // inputs it would leave too few samples to score a candidate.
    const int thinned = std::min((fixed_l.dims.minCoeff() + 1) / 2,
                                 (moving_l.dims.minCoeff() + 1) / 2);
    if (li == 0 && cfg.pyramid_levels.size() > 1 && thinned >= 4) {
      fixed_l = stride2_view(fixed_l);
      moving_l = stride2_view(moving_l);
    }
    const GridSpec target_f = grid_of(fixed_l);
    const GridSpec target_m = grid_of(moving_l);

    // Out-of-bounds and degenerate candidates read as +inf so the
    // optimizer backs away from them instead of aborting the run.
    // The objective is symmetrized and scored over the overlap only:
    // trilinear pulls blur the image being resampled (skewing a one-way
    // score toward lattice-aligned candidates), and voxels pulled from
    // outside the source domain would score background against real
    // signal. NaN background marks those voxels for exclusion.
    const double nan = std::numeric_limits<double>::quiet_NaN();
    const auto overlap_sim = [&](const Volume& ref, const Volume& pulled) {
      BinaryMask fov = make_mask(ref.dims, ref.spacing, ref.affine);
      std::int64_t n = 0;
      for (std::int64_t i = 0; i < pulled.data.size(); ++i) {
        fov.bits[static_cast<std::size_t>(i)] =
            std::isfinite(pulled.data[i]) ? 1 : 0;
        n += fov.bits[static_cast<std::size_t>(i)];
      }
      // A sliver of overlap can score spuriously well; veto it.
      if (n * 8 < pulled.data.size())
        throw DegenerateInputError("overlap too small");
      return similarity(ref, pulled, fov, cfg.metric);
    };
    const auto cost = [&](const Eigen::VectorXd& q) {
      for (int i = 0; i < 3; ++i)
        if (std::abs(q[i]) > cfg.rotation_bounds_rad)
          return inf;
      for (int i = 3; i < 6; ++i)
        if (std::abs(q[i]) > cfg.translation_bounds_mm)
          return inf;
      const RigidTransform t = transform_of(q);
      Volume pulled = resample(moving_l, t, target_f,
                               InterpolationKind::Trilinear, nan);
      Volume pushed = resample(fixed_l, invert(t), target_m,
                               InterpolationKind::Trilinear, nan);
      try {
        return sign * 0.5 *
               (overlap_sim(fixed_l, pulled) + overlap_sim(moving_l, pushed));
      } catch (const DegenerateInputError&) {
        return inf;
      }
    };

    if (!std::isfinite(cost(p))) {
      // p is all-zero on the first level, so this carries the initial
      // transform; on later levels it carries the warm start.
      throw RegistrationError(
          first_level ? std::string(
                            "degenerate similarity at the initial alignment")
                      : "similarity became degenerate at pyramid level " +
                            std::to_string(f),
          transform_of(p));
    }
    first_level = false;

    const double mean_spacing = fixed_l.spacing.mean();
    Eigen::VectorXd steps(6);
    steps << 0.02 * f, 0.02 * f, 0.02 * f, mean_spacing, mean_spacing,
        mean_spacing;

    NelderMeadOptions opts;
    opts.max_iterations = cfg.max_iterations_per_level;
    opts.tolerance = cfg.convergence_tol;

    // The simplex collapses anisotropically on shallow ridges and can
    // satisfy the spread test away from the optimum; restarting it
    // around the incumbent with shrunken steps recovers the lost
    // directions. Rounds past the first stop once they no longer help.
    double best = std::numeric_limits<double>::infinity();
    Eigen::VectorXd round_steps = steps;
    int level_iterations = 0;
    bool level_converged = false;
    for (int round = 0; round < 3; ++round) {
      NelderMeadResult nm = nelder_mead(cost, p, round_steps, opts);
      level_iterations += nm.iterations;
      level_converged = nm.converged;
      p = nm.x;
      const bool improved = best - nm.value > opts.tolerance;
      best = nm.value;
      if (round > 0 && !improved)
        break;
      round_steps *= 0.25;
    }
    result.iterations.push_back(level_iterations);
    result.converged = level_converged;
    result.final_metric = sign * best;
  }
  result.transform = transform_of(p);
  return result;
}

} // namespace neuropipe
