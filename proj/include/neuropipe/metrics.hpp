#pragma once

#include <Eigen/Dense>

#include <optional>
#include <string>
#include <vector>

#include "neuropipe/mask.hpp"
#include "neuropipe/volume.hpp"

namespace neuropipe {

/// PSNR of an exact match, and the ceiling for near-exact ones.
inline constexpr double kPsnrCapDb = 200.0;

/// 2|P∩T| / (|P|+|T|). Both masks empty yields 1.0; exactly one empty
/// yields 0.0.
double dice(const BinaryMask& p, const BinaryMask& t);

/// World coordinates (mm) of the mask's boundary voxel centers: set
/// voxels with at least one background 6-neighbor, the volume border
/// counting as background.
std::vector<Eigen::Vector3d> surface_points(const BinaryMask& m);

/// Sentinel returned by hausdorff95 when exactly one mask is empty:
/// the world-space diagonal of the volume.
double volume_diagonal_mm(const BinaryMask& m);

/// Symmetrized 95th-percentile surface distance in mm: the directed
/// nearest-distance sets from each surface to the other are reduced to
/// their nearest-rank (ceiling) 95th percentiles, and the larger of the
/// two is returned. Identical masks give 0; both empty gives 0; exactly
/// one empty gives the volume-diagonal sentinel.
double hausdorff95(const BinaryMask& p, const BinaryMask& t);

/// Sample Pearson correlation over in-mask voxels, clamped to [-1,1].
/// Requires at least 2 in-mask voxels and nonzero variance in both.
double pearson_masked(const Volume& a, const Volume& b, const BinaryMask& mask);

/// 10*log10(peak^2/MSE) over in-mask voxels, peak = max|reference| in
/// mask, capped at 200 dB (zero MSE returns the cap). Throws
/// DegenerateInputError when the mask is empty or peak is 0.
double psnr_masked(const Volume& reference, const Volume& test,
                   const BinaryMask& mask);

struct AlignmentScores {
  double pearson = 0.0;
  double psnr_db = 0.0;
};

/// One evaluated subject: per-region overlap and surface metrics plus
/// bookkeeping for the summary tables.
struct EvaluationRecord {
  std::string subject_id;
  std::string be_method;
  double dice_wt = 0.0;
  double dice_tc = 0.0;
  double dice_at = 0.0;
  double hd95_wt = 0.0;
  double hd95_tc = 0.0;
  double hd95_at = 0.0;
  double wall_time_s = 0.0;
  std::optional<AlignmentScores> alignment;
};

struct Summary {
  double median_avg_dice = 0.0;
  double median_avg_hd95 = 0.0;
};

/// Per record, the three regions are averaged; the median is then taken
/// across records (even count: mean of the two central values). Throws
/// DegenerateInputError on an empty list.
Summary summarize(const std::vector<EvaluationRecord>& records);

} // namespace neuropipe
