#include "neuropipe/volume.hpp"

#include <Eigen/Dense>

#include <cmath>
#include <cstdint>

#include "neuropipe/errors.hpp"

namespace neuropipe {

int nifti_code(DataType t) {
  switch (t) {
  case DataType::UInt8: return 2;
  case DataType::Int16: return 4;
  case DataType::Int32: return 8;
  case DataType::Float32: return 16;
  case DataType::Float64: return 64;
  }
  throw UnsupportedDtypeError("unknown dtype");
}

DataType dtype_from_nifti_code(int code) {
  switch (code) {
  case 2: return DataType::UInt8;
  case 4: return DataType::Int16;
  case 8: return DataType::Int32;
  case 16: return DataType::Float32;
  case 64: return DataType::Float64;
  default:
    throw UnsupportedDtypeError("unsupported NIfTI datatype code " +
                                std::to_string(code));
  }
}

int bytes_per_voxel(DataType t) {
  switch (t) {
  case DataType::UInt8: return 1;
  case DataType::Int16: return 2;
  case DataType::Int32: return 4;
  case DataType::Float32: return 4;
  case DataType::Float64: return 8;
  }
  throw UnsupportedDtypeError("unknown dtype");
}

bool is_integer_dtype(DataType t) {
  return t == DataType::UInt8 || t == DataType::Int16 || t == DataType::Int32;
}

const char* dtype_name(DataType t) {
  switch (t) {
  case DataType::UInt8: return "uint8";
  case DataType::Int16: return "int16";
  case DataType::Int32: return "int32";
  case DataType::Float32: return "float32";
  case DataType::Float64: return "float64";
  }
  return "unknown";
}

void validate(const Volume& v) {
  for (int a = 0; a < 3; ++a) {
    if (v.dims[a] <= 0)
      throw GeometryError("volume dims must be positive");
    if (!(v.spacing[a] > 0.0) || !std::isfinite(v.spacing[a]))
      throw GeometryError("volume spacing must be positive and finite");
  }
  if (!v.affine.allFinite())
    throw GeometryError("volume affine must be finite");
  Eigen::RowVector4d last = v.affine.row(3);
  if (last != Eigen::RowVector4d(0, 0, 0, 1))
    throw GeometryError("volume affine last row must be 0 0 0 1");
  if (v.affine.topLeftCorner<3, 3>().determinant() == 0.0)
    throw GeometryError("volume affine is singular");
  for (int a = 0; a < 3; ++a) {
    double norm = v.affine.block<3, 1>(0, a).norm();
    if (std::abs(norm - v.spacing[a]) > 1e-4 * v.spacing[a])
      throw GeometryError("affine column norms must match spacing within "
                          "1e-4 relative tolerance");
  }
  if (v.data.size() != v.voxel_count())
    throw GeometryError("volume data size does not match dims");
}

bool has_orthogonal_direction(const Volume& v, double tol) {
  Eigen::Matrix3d d = v.direction();
  return ((d.transpose() * d) - Eigen::Matrix3d::Identity()).cwiseAbs().maxCoeff() <= tol;
}

bool same_geometry(const Volume& a, const Volume& b, double tol) {
  return (a.dims == b.dims).all() &&
         (a.spacing - b.spacing).cwiseAbs().maxCoeff() <= tol &&
         (a.affine - b.affine).cwiseAbs().maxCoeff() <= tol;
}

bool operator==(const Volume& a, const Volume& b) {
  return (a.dims == b.dims).all() && a.spacing == b.spacing &&
         a.affine == b.affine && a.dtype == b.dtype &&
         a.data.size() == b.data.size() && (a.data == b.data).all();
}

Volume make_volume(const Eigen::Array3i& dims, const Eigen::Vector3d& spacing,
                   const Eigen::Matrix4d& affine, DataType dtype) {
  Volume v;
  v.dims = dims;
  v.spacing = spacing;
  v.affine = affine;
  v.dtype = dtype;
  v.data = Eigen::ArrayXd::Zero(v.voxel_count());
  validate(v);
  return v;
}

Volume as_float32(Volume v) {
  v.dtype = DataType::Float32;
  return v;
}

} // namespace neuropipe
