#include "neuropipe/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <vector>

#include "neuropipe/errors.hpp"

namespace neuropipe {

namespace {

void require_same_geometry(const BinaryMask& p, const BinaryMask& t) {
  validate(p);
  validate(t);
  if (!same_geometry(p, t))
    throw GeometryError("masks must share one grid");
}

bool has_orthogonal_direction(const BinaryMask& m, double tol = 1e-4) {
  Eigen::Matrix3d d = m.affine.topLeftCorner<3, 3>();
  for (int c = 0; c < 3; ++c)
    d.col(c) /= m.spacing[c];
  return ((d.transpose() * d) - Eigen::Matrix3d::Identity())
             .cwiseAbs()
             .maxCoeff() <= tol;
}

std::vector<Eigen::Array3i> boundary_voxels(const BinaryMask& m) {
  std::vector<Eigen::Array3i> out;
  const int nx = m.dims[0], ny = m.dims[1], nz = m.dims[2];
  for (int k = 0; k < nz; ++k)
    for (int j = 0; j < ny; ++j)
      for (int i = 0; i < nx; ++i) {
        if (!m.at(i, j, k))
          continue;
        bool boundary =
            i == 0 || !m.at(i - 1, j, k) || i == nx - 1 || !m.at(i + 1, j, k) ||
            j == 0 || !m.at(i, j - 1, k) || j == ny - 1 || !m.at(i, j + 1, k) ||
            k == 0 || !m.at(i, j, k - 1) || k == nz - 1 || !m.at(i, j, k + 1);
        if (boundary)
          out.push_back({i, j, k});
      }
  return out;
}

// Squared-distance grids start at this stand-in for infinity; it keeps
// the envelope arithmetic finite (IEEE inf would produce inf-inf = NaN).
constexpr double kFar = 1e20;

// Lower envelope of parabolas, generalized to samples at abscissae q*w
// so anisotropic spacing stays in mm. f holds squared distances in, d
// gets squared distances out; both must have room for n entries.
void dt_1d(const std::vector<double>& f, int n, std::vector<double>& d,
           std::vector<int>& v, std::vector<double>& z, double w) {
  int k = 0;
  v[0] = 0;
  z[0] = -kFar;
  z[1] = kFar;
  for (int q = 1; q < n; ++q) {
    const double pq = q * w;
    double s;
    for (;;) {
      const double pv = v[k] * w;
      s = ((f[q] + pq * pq) - (f[v[k]] + pv * pv)) / (2.0 * (pq - pv));
      if (s <= z[k] && k > 0) {
        --k;
      } else {
        break;
      }
    }
    ++k;
    v[k] = q;
    z[k] = s;
    z[k + 1] = kFar;
  }
  k = 0;
  for (int q = 0; q < n; ++q) {
    const double pq = q * w;
    while (z[k + 1] < pq)
      ++k;
    const double pv = v[k] * w;
    d[q] = (pq - pv) * (pq - pv) + f[v[k]];
  }
}

// Exact Euclidean distance transform: squared mm distance from every
// voxel center to the nearest site voxel center.
std::vector<double> edt_squared(const Eigen::Array3i& dims,
                                const Eigen::Vector3d& spacing,
                                const std::vector<Eigen::Array3i>& sites) {
  const int nx = dims[0], ny = dims[1], nz = dims[2];
  const auto idx = [&](int i, int j, int k) {
    return static_cast<std::size_t>(i) +
           static_cast<std::size_t>(nx) *
               (static_cast<std::size_t>(j) +
                static_cast<std::size_t>(ny) * static_cast<std::size_t>(k));
  };
  std::vector<double> g(static_cast<std::size_t>(nx) * ny * nz, kFar);
  for (const auto& s : sites)
    g[idx(s[0], s[1], s[2])] = 0.0;

  const int nmax = std::max({nx, ny, nz});
  std::vector<double> f(nmax), d(nmax), z(nmax + 1);
  std::vector<int> v(nmax);

  for (int k = 0; k < nz; ++k)
    for (int j = 0; j < ny; ++j) {
      for (int i = 0; i < nx; ++i)
        f[i] = g[idx(i, j, k)];
      dt_1d(f, nx, d, v, z, spacing[0]);
      for (int i = 0; i < nx; ++i)
        g[idx(i, j, k)] = d[i];
    }
  for (int k = 0; k < nz; ++k)
    for (int i = 0; i < nx; ++i) {
      for (int j = 0; j < ny; ++j)
        f[j] = g[idx(i, j, k)];
      dt_1d(f, ny, d, v, z, spacing[1]);
      for (int j = 0; j < ny; ++j)
        g[idx(i, j, k)] = d[j];
    }
  for (int j = 0; j < ny; ++j)
    for (int i = 0; i < nx; ++i) {
      for (int k = 0; k < nz; ++k)
        f[k] = g[idx(i, j, k)];
      dt_1d(f, nz, d, v, z, spacing[2]);
      for (int k = 0; k < nz; ++k)
        g[idx(i, j, k)] = d[k];
    }
  return g;
}

// Nearest-rank percentile with ceiling index: the ceil(0.95 n)-th order
// statistic, computed in integer arithmetic.
double percentile95(std::vector<double>& d) {
  std::sort(d.begin(), d.end());
  const std::size_t n = d.size();
  std::size_t rank = (19 * n + 19) / 20;
  rank = std::clamp<std::size_t>(rank, 1, n);
  return d[rank - 1];
}

std::vector<double> directed_distances(
    const std::vector<Eigen::Array3i>& from, const std::vector<double>& edt_sq,
    const Eigen::Array3i& dims) {
  std::vector<double> out;
  out.reserve(from.size());
  for (const auto& p : from) {
    std::size_t i = static_cast<std::size_t>(p[0]) +
                    static_cast<std::size_t>(dims[0]) *
                        (static_cast<std::size_t>(p[1]) +
                         static_cast<std::size_t>(dims[1]) *
                             static_cast<std::size_t>(p[2]));
    out.push_back(std::sqrt(edt_sq[i]));
  }
  return out;
}

struct MaskedPairs {
  std::vector<double> a;
  std::vector<double> b;
};

MaskedPairs gather_masked(const Volume& a, const Volume& b,
                          const BinaryMask& mask) {
  validate(a);
  validate(b);
  validate(mask);
  if (!same_geometry(a, b) || !same_geometry(a, mask))
    throw GeometryError("volumes and mask must share one grid");
  MaskedPairs out;
  for (std::int64_t i = 0; i < a.data.size(); ++i) {
    if (mask.bits[static_cast<std::size_t>(i)]) {
      out.a.push_back(a.data[i]);
      out.b.push_back(b.data[i]);
    }
  }
  return out;
}

} // namespace

double dice(const BinaryMask& p, const BinaryMask& t) {
  require_same_geometry(p, t);
  std::int64_t np = 0, nt = 0, ni = 0;
  for (std::size_t i = 0; i < p.bits.size(); ++i) {
    const bool bp = p.bits[i] != 0, bt = t.bits[i] != 0;
    np += bp;
    nt += bt;
    ni += bp && bt;
  }
  if (np == 0 && nt == 0)
    return 1.0;
  if (np == 0 || nt == 0)
    return 0.0;
  return 2.0 * static_cast<double>(ni) / static_cast<double>(np + nt);
}

std::vector<Eigen::Vector3d> surface_points(const BinaryMask& m) {
  validate(m);
  std::vector<Eigen::Vector3d> out;
  for (const auto& p : boundary_voxels(m)) {
    Eigen::Vector3d idx = p.cast<double>().matrix();
    out.push_back(m.affine.topLeftCorner<3, 3>() * idx +
                  m.affine.topRightCorner<3, 1>());
  }
  return out;
}

double volume_diagonal_mm(const BinaryMask& m) {
  return (m.spacing.array() * m.dims.cast<double>()).matrix().norm();
}

double hausdorff95(const BinaryMask& p, const BinaryMask& t) {
  require_same_geometry(p, t);
  if (!has_orthogonal_direction(p))
    throw GeometryError("hausdorff95 requires orthogonal direction columns");
  const bool pe = p.empty(), te = t.empty();
  if (pe && te)
    return 0.0;
  if (pe || te)
    return volume_diagonal_mm(p);

  const auto sp = boundary_voxels(p);
  const auto st = boundary_voxels(t);
  const auto edt_p = edt_squared(p.dims, p.spacing, sp);
  const auto edt_t = edt_squared(t.dims, t.spacing, st);
  auto d_pt = directed_distances(sp, edt_t, p.dims);
  auto d_tp = directed_distances(st, edt_p, p.dims);
  return std::max(percentile95(d_pt), percentile95(d_tp));
}

double pearson_masked(const Volume& a, const Volume& b,
                      const BinaryMask& mask) {
  MaskedPairs pairs = gather_masked(a, b, mask);
  const std::size_t n = pairs.a.size();
  if (n < 2)
    throw DegenerateInputError(
        "pearson requires at least 2 in-mask voxels, got " + std::to_string(n));
  double ma = 0.0, mb = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    ma += pairs.a[i];
    mb += pairs.b[i];
  }
  ma /= static_cast<double>(n);
  mb /= static_cast<double>(n);
  double cov = 0.0, va = 0.0, vb = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    const double da = pairs.a[i] - ma, db = pairs.b[i] - mb;
    cov += da * db;
    va += da * da;
    vb += db * db;
  }
  if (va == 0.0 || vb == 0.0)
    throw DegenerateInputError("pearson is undefined under zero variance");
  return std::clamp(cov / std::sqrt(va * vb), -1.0, 1.0);
}

double psnr_masked(const Volume& reference, const Volume& test,
                   const BinaryMask& mask) {
  MaskedPairs pairs = gather_masked(reference, test, mask);
  const std::size_t n = pairs.a.size();
  if (n == 0)
    throw DegenerateInputError("psnr requires a nonempty mask");
  double peak = 0.0, mse = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    peak = std::max(peak, std::abs(pairs.a[i]));
    const double d = pairs.a[i] - pairs.b[i];
    mse += d * d;
  }
  mse /= static_cast<double>(n);
  if (peak == 0.0)
    throw DegenerateInputError("psnr is undefined for an all-zero reference");
  if (mse == 0.0)
    return kPsnrCapDb;
  return std::min(kPsnrCapDb, 10.0 * std::log10(peak * peak / mse));
}

Summary summarize(const std::vector<EvaluationRecord>& records) {
  if (records.empty())
    throw DegenerateInputError("summarize requires at least one record");
  std::vector<double> avg_dice, avg_hd95;
  avg_dice.reserve(records.size());
  avg_hd95.reserve(records.size());
  for (const auto& r : records) {
    avg_dice.push_back((r.dice_wt + r.dice_tc + r.dice_at) / 3.0);
    avg_hd95.push_back((r.hd95_wt + r.hd95_tc + r.hd95_at) / 3.0);
  }
  const auto median = [](std::vector<double>& v) {
    std::sort(v.begin(), v.end());
    const std::size_t n = v.size();
    return n % 2 == 1 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
  };
  Summary s;
  s.median_avg_dice = median(avg_dice);
  s.median_avg_hd95 = median(avg_hd95);
  return s;
}

} // namespace neuropipe
