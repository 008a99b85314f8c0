#pragma once

#include <filesystem>

#include "neuropipe/volume.hpp"

namespace neuropipe {

/// Reads a NIfTI-1 volume (.nii, .nii.gz, or .hdr/.img pair, either
/// compressed). sform wins over qform when sform_code > 0; with neither
/// code set the affine is diag(pixdim). scl_slope/scl_inter are applied
/// when slope != 0, and a scaling that actually changes values retags the
/// volume float32 (integer bins no longer describe the data). Extension
/// bytes between header and data are preserved opaquely in
/// Volume::extensions. NIfTI-2 files are rejected.
Volume read_volume(const std::filesystem::path& path);

/// Writes a single-file NIfTI-1 volume, gzip-compressed when `compress`.
/// The affine goes to the sform (code 1), qform_code is 0, slope/inter are
/// written as 1/0, and data is stored in vol.dtype. A volume read back
/// from the result compares equal field-by-field.
void write_volume(const Volume& vol, const std::filesystem::path& path,
                  bool compress);

/// Compression inferred from the extension (".gz" suffix).
void write_volume(const Volume& vol, const std::filesystem::path& path);

} // namespace neuropipe
