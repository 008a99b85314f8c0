#include "neuropipe/geometry.hpp"

#include <Eigen/Dense>
#include <Eigen/SVD>

#include <cmath>
#include <cstdio>
#include <fstream>
#include <sstream>
#include <string>

#include "neuropipe/errors.hpp"

namespace neuropipe {

namespace {

double rigidity_error(const Eigen::Matrix4d& m) {
  Eigen::Matrix3d r = m.topLeftCorner<3, 3>();
  double ortho = ((r.transpose() * r) - Eigen::Matrix3d::Identity()).cwiseAbs().maxCoeff();
  double det = std::abs(r.determinant() - 1.0);
  return std::max(ortho, det);
}

Eigen::Matrix3d nearest_rotation(const Eigen::Matrix3d& m) {
  Eigen::JacobiSVD<Eigen::Matrix3d> svd(m, Eigen::ComputeFullU | Eigen::ComputeFullV);
  Eigen::Matrix3d r = svd.matrixU() * svd.matrixV().transpose();
  if (r.determinant() < 0.0) {
    Eigen::Matrix3d u = svd.matrixU();
    u.col(2) *= -1.0;
    r = u * svd.matrixV().transpose();
  }
  return r;
}

// Direction matrices may legitimately be reflections (axis flips), so snap
// to the nearest orthogonal matrix without forcing det = +1.
Eigen::Matrix3d nearest_orthogonal(const Eigen::Matrix3d& m) {
  Eigen::JacobiSVD<Eigen::Matrix3d> svd(m, Eigen::ComputeFullU | Eigen::ComputeFullV);
  return svd.matrixU() * svd.matrixV().transpose();
}

} // namespace

RigidTransform::RigidTransform(const Eigen::Matrix4d& m) : mat_(m) {
  if (!m.allFinite())
    throw GeometryError("rigid transform must be finite");
  if (m.row(3) != Eigen::RowVector4d(0, 0, 0, 1))
    throw GeometryError("rigid transform last row must be 0 0 0 1");
  if (rigidity_error(m) > kRigidityTol)
    throw GeometryError("matrix is not a rigid transform (rotation block "
                        "fails orthonormality or det(R) = +1 within 1e-9)");
}

RigidTransform RigidTransform::translate(const Eigen::Vector3d& t) {
  Eigen::Matrix4d m = Eigen::Matrix4d::Identity();
  m.topRightCorner<3, 1>() = t;
  return RigidTransform(m);
}

RigidTransform compose(const RigidTransform& first, const RigidTransform& second) {
  Eigen::Matrix4d m = second.matrix() * first.matrix();
  if (rigidity_error(m) > 1e-12) {
    Eigen::Matrix3d r = nearest_rotation(m.topLeftCorner<3, 3>());
    m.topLeftCorner<3, 3>() = r;
  }
  return RigidTransform(m);
}

RigidTransform invert(const RigidTransform& t) {
  Eigen::Matrix3d rt = t.rotation().transpose();
  Eigen::Matrix4d m = Eigen::Matrix4d::Identity();
  m.topLeftCorner<3, 3>() = rt;
  m.topRightCorner<3, 1>() = -rt * t.translation();
  return RigidTransform(m);
}

Eigen::Vector3d apply_point(const RigidTransform& t, const Eigen::Vector3d& p) {
  return t.rotation() * p + t.translation();
}

RigidTransform euler_to_transform(const Eigen::Vector3d& angles,
                                  const Eigen::Vector3d& translation,
                                  const Eigen::Vector3d& center) {
  Eigen::Matrix3d r =
      (Eigen::AngleAxisd(angles[0], Eigen::Vector3d::UnitZ()) *
       Eigen::AngleAxisd(angles[1], Eigen::Vector3d::UnitY()) *
       Eigen::AngleAxisd(angles[2], Eigen::Vector3d::UnitX()))
          .toRotationMatrix();
  Eigen::Matrix4d m = Eigen::Matrix4d::Identity();
  m.topLeftCorner<3, 3>() = r;
  m.topRightCorner<3, 1>() = translation + center - r * center;
  return RigidTransform(m);
}

double rotation_angle_between(const RigidTransform& a, const RigidTransform& b) {
  Eigen::Matrix3d rel = a.rotation().transpose() * b.rotation();
  double c = (rel.trace() - 1.0) / 2.0;
  c = std::clamp(c, -1.0, 1.0);
  return std::acos(c);
}

Eigen::Matrix4d GridSpec::affine() const {
  Eigen::Matrix4d m = Eigen::Matrix4d::Identity();
  m.topLeftCorner<3, 3>() = direction * spacing.asDiagonal();
  m.topRightCorner<3, 1>() = origin;
  return m;
}

Eigen::Vector3d GridSpec::index_to_world(const Eigen::Vector3d& idx) const {
  return direction * (spacing.asDiagonal() * idx) + origin;
}

void validate(const GridSpec& g) {
  for (int a = 0; a < 3; ++a) {
    if (g.dims[a] <= 0)
      throw GeometryError("grid dims must be positive");
    if (!(g.spacing[a] > 0.0) || !std::isfinite(g.spacing[a]))
      throw GeometryError("grid spacing must be positive and finite");
  }
  if (!g.origin.allFinite() || !g.direction.allFinite())
    throw GeometryError("grid origin and direction must be finite");
  double err = ((g.direction.transpose() * g.direction) -
                Eigen::Matrix3d::Identity())
                   .cwiseAbs()
                   .maxCoeff();
  if (err > 1e-9)
    throw GeometryError("grid direction columns must be orthonormal");
}

GridSpec grid_of(const Volume& v, double tol) {
  validate(v);
  Eigen::Matrix3d linear = v.affine.topLeftCorner<3, 3>();
  Eigen::Matrix3d dir = linear * v.spacing.cwiseInverse().asDiagonal();
  double err = ((dir.transpose() * dir) - Eigen::Matrix3d::Identity())
                   .cwiseAbs()
                   .maxCoeff();
  if (err > tol)
    throw GeometryError("volume direction is not orthogonal within tolerance");
  GridSpec g;
  g.dims = v.dims;
  g.spacing = v.spacing;
  g.origin = v.affine.topRightCorner<3, 1>();
  g.direction = err > 0.0 ? nearest_orthogonal(dir) : dir;
  validate(g);
  return g;
}

Volume volume_on_grid(const GridSpec& grid, DataType dtype) {
  validate(grid);
  return make_volume(grid.dims, grid.spacing, grid.affine(), dtype);
}

void write_transform(const RigidTransform& t, const std::filesystem::path& path) {
  std::ostringstream out;
  out << "kind: rigid\n";
  const Eigen::Matrix4d& m = t.matrix();
  char buf[64];
  for (int r = 0; r < 4; ++r) {
    for (int c = 0; c < 4; ++c) {
      std::snprintf(buf, sizeof(buf), "%.17g", m(r, c));
      out << buf << (c == 3 ? '\n' : ' ');
    }
  }
  std::ofstream f(path, std::ios::binary);
  if (!f)
    throw IoError("cannot open transform file for writing: " + path.string());
  f << out.str();
  if (!f.flush())
    throw IoError("failed writing transform file: " + path.string());
}

RigidTransform read_transform(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f)
    throw IoError("cannot open transform file: " + path.string());
  std::string line;
  if (!std::getline(f, line))
    throw FormatError("empty transform file: " + path.string());
  if (!line.empty() && line.back() == '\r')
    line.pop_back();
  // Tolerate flexible whitespace after the colon.
  std::istringstream tag(line);
  std::string key, kind;
  tag >> key >> kind;
  if (key != "kind:" || kind != "rigid")
    throw FormatError("transform file must begin with 'kind: rigid': " +
                      path.string());
  Eigen::Matrix4d m;
  for (int r = 0; r < 4; ++r)
    for (int c = 0; c < 4; ++c)
      if (!(f >> m(r, c)))
        throw FormatError("transform file has fewer than 16 matrix entries: " +
                          path.string());
  return RigidTransform(m);
}

} // namespace neuropipe
