// neuropipe: command-line front end for the preprocessing and
// evaluation library. Exit codes: 0 success, 1 usage/config error,
// 2 operational failure.

#include <CLI11.hpp>
#include <json.hpp>

#include <cstdio>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "neuropipe/errors.hpp"
#include "neuropipe/geometry.hpp"
#include "neuropipe/mask.hpp"
#include "neuropipe/metrics.hpp"
#include "neuropipe/nifti.hpp"
#include "neuropipe/pipeline.hpp"
#include "neuropipe/registration.hpp"
#include "neuropipe/resample.hpp"
#include "neuropipe/volume.hpp"

namespace {

using json = nlohmann::json;
namespace np = neuropipe;

struct RegisterArgs {
  std::string fixed, moving, out;
  std::string metric = "ncc";
  std::vector<int> pyramid{4, 2, 1};
  int max_iterations = 200;
  double translation_bounds = 60.0;
  double rotation_bounds = 0.6;
  double tol = 1e-6;
};

int cmd_register(const RegisterArgs& a) {
  np::RegistrationConfig cfg;
  cfg.metric = np::metric_from_name(a.metric);
  cfg.pyramid_levels = a.pyramid;
  cfg.max_iterations_per_level = a.max_iterations;
  cfg.translation_bounds_mm = a.translation_bounds;
  cfg.rotation_bounds_rad = a.rotation_bounds;
  cfg.convergence_tol = a.tol;

  const np::Volume fixed = np::read_volume(a.fixed);
  const np::Volume moving = np::read_volume(a.moving);
  const np::RegistrationResult r = np::register_rigid(fixed, moving, cfg);
  np::write_transform(r.transform, a.out);

  json j;
  j["transform"] = a.out;
  j["metric"] = np::metric_name(cfg.metric);
  j["final_metric"] = r.final_metric;
  j["iterations"] = r.iterations;
  j["converged"] = r.converged;
  std::printf("%s\n", j.dump(2).c_str());
  return 0;
}

struct ResampleArgs {
  std::string input, out;
  std::string transform;   // empty = identity
  std::string target_like; // empty = input's own grid
  std::string interp = "trilinear";
  double background = 0.0;
};

int cmd_resample(const ResampleArgs& a) {
  const np::Volume vol = np::read_volume(a.input);
  const np::RigidTransform t = a.transform.empty()
                                   ? np::RigidTransform::identity()
                                   : np::read_transform(a.transform);
  const np::GridSpec target = a.target_like.empty()
                                  ? np::grid_of(vol)
                                  : np::grid_of(np::read_volume(a.target_like));
  const np::Volume out =
      np::resample(vol, t, target, np::interpolation_from_name(a.interp),
                   a.background);
  np::write_volume(out, a.out);
  return 0;
}

int cmd_compose(const std::string& first, const std::string& second,
                const std::string& out) {
  const np::RigidTransform c =
      np::compose(np::read_transform(first), np::read_transform(second));
  np::write_transform(c, out);
  return 0;
}

int cmd_apply_mask(const std::string& input, const std::string& mask,
                   double background, const std::string& out) {
  const np::Volume vol = np::read_volume(input);
  const np::BinaryMask m = np::mask_from_volume(np::read_volume(mask));
  np::write_volume(np::apply_mask(vol, m, background), out);
  return 0;
}

int cmd_extract_mask(const std::string& input, double threshold,
                     const std::string& out) {
  const np::BinaryMask m = np::extract_mask(np::read_volume(input), threshold);
  np::write_volume(np::mask_to_volume(m), out);
  return 0;
}

int cmd_derive_regions(const std::string& labels, const std::string& wt,
                       const std::string& tc, const std::string& at) {
  const np::RegionSet r =
      np::derive_regions(np::label_volume_from(np::read_volume(labels)));
  np::write_volume(np::mask_to_volume(r.wt), wt);
  np::write_volume(np::mask_to_volume(r.tc), tc);
  np::write_volume(np::mask_to_volume(r.at), at);
  return 0;
}

struct EvaluateArgs {
  std::string prediction, truth;
  std::string mask; // optional: voxels outside count as background
  std::string subject = "subject";
  std::string be_method = "none";
  double wall_time = 0.0;
  std::string csv; // optional: append the record as a row
};

int cmd_evaluate(const EvaluateArgs& a) {
  np::Volume pred = np::read_volume(a.prediction);
  np::Volume truth = np::read_volume(a.truth);
  if (!a.mask.empty()) {
    const np::BinaryMask m = np::mask_from_volume(np::read_volume(a.mask));
    pred = np::apply_mask(pred, m);
    truth = np::apply_mask(truth, m);
  }
  const np::RegionSet rp = np::derive_regions(np::label_volume_from(pred));
  const np::RegionSet rt = np::derive_regions(np::label_volume_from(truth));

  np::EvaluationRecord rec;
  rec.subject_id = a.subject;
  rec.be_method = a.be_method;
  rec.dice_wt = np::dice(rp.wt, rt.wt);
  rec.dice_tc = np::dice(rp.tc, rt.tc);
  rec.dice_at = np::dice(rp.at, rt.at);
  rec.hd95_wt = np::hausdorff95(rp.wt, rt.wt);
  rec.hd95_tc = np::hausdorff95(rp.tc, rt.tc);
  rec.hd95_at = np::hausdorff95(rp.at, rt.at);
  rec.wall_time_s = a.wall_time;

  std::printf("%s\n", np::evaluation_record_json(rec).c_str());
  if (!a.csv.empty())
    np::append_record_csv(rec, a.csv);
  return 0;
}

int cmd_validate_alignment(const std::string& ours,
                           const std::string& reference) {
  const np::AlignmentScores s = np::validate_alignment(
      np::read_volume(ours), np::read_volume(reference));
  json j;
  j["pearson"] = s.pearson;
  j["psnr_db"] = s.psnr_db;
  std::printf("%s\n", j.dump(2).c_str());
  return 0;
}

int cmd_run(const std::string& config, bool force, std::optional<int> workers) {
  const np::PipelineConfig cfg = np::load_config(config);
  np::RunOptions opt;
  opt.force = force;
  opt.workers = workers;
  const std::vector<np::SubjectRun> runs = np::run_all(cfg, opt);
  for (const auto& run : runs)
    std::printf("%s: done (be=%s)\n", run.subject_id.c_str(),
                run.be_method.c_str());
  std::printf("reports written to %s\n", cfg.output_dir.string().c_str());
  return 0;
}

int cmd_report(const std::string& runs_dir, const std::string& out) {
  std::vector<np::SubjectRun> runs;
  std::vector<std::filesystem::path> files;
  for (const auto& entry : std::filesystem::directory_iterator(runs_dir))
    if (entry.is_directory() &&
        std::filesystem::exists(entry.path() / "run.json"))
      files.push_back(entry.path() / "run.json");
  std::sort(files.begin(), files.end());
  for (const auto& f : files)
    runs.push_back(np::load_run(f));
  if (runs.empty())
    throw np::UsageError("no run.json files under " + runs_dir);
  np::emit_report(runs, out);
  std::printf("reports written to %s\n", out.c_str());
  return 0;
}

} // namespace

int main(int argc, char** argv) {
  CLI::App app{"Brain-MRI preprocessing and evaluation pipeline"};
  app.require_subcommand(1);

  RegisterArgs reg;
  auto* c_reg = app.add_subcommand("register",
                                   "Rigidly register a moving volume to a "
                                   "fixed one and save the transform");
  c_reg->add_option("--fixed", reg.fixed, "Fixed volume")->required();
  c_reg->add_option("--moving", reg.moving, "Moving volume")->required();
  c_reg->add_option("--out", reg.out, "Output transform file")->required();
  c_reg->add_option("--metric", reg.metric, "Similarity metric: ncc or msd");
  c_reg->add_option("--pyramid", reg.pyramid,
                    "Downsampling factors, coarse to fine (default 4 2 1)");
  c_reg->add_option("--max-iterations", reg.max_iterations,
                    "Optimizer iterations per level");
  c_reg->add_option("--translation-bounds", reg.translation_bounds,
                    "Translation search bounds, mm");
  c_reg->add_option("--rotation-bounds", reg.rotation_bounds,
                    "Rotation search bounds, radians");
  c_reg->add_option("--tol", reg.tol, "Convergence tolerance");

  ResampleArgs rs;
  auto* c_rs = app.add_subcommand(
      "resample", "Resample a volume through a rigid transform");
  c_rs->add_option("--input", rs.input, "Input volume")->required();
  c_rs->add_option("--out", rs.out, "Output volume")->required();
  c_rs->add_option("--transform", rs.transform,
                   "Transform file (identity when omitted)");
  c_rs->add_option("--target-like", rs.target_like,
                   "Volume whose grid to resample onto (default: input grid)");
  c_rs->add_option("--interp", rs.interp,
                   "Interpolation: trilinear or nearest");
  c_rs->add_option("--background", rs.background,
                   "Value for out-of-domain voxels");

  std::string co_first, co_second, co_out;
  auto* c_co = app.add_subcommand(
      "compose", "Compose two transforms (apply first, then second)");
  c_co->add_option("--first", co_first, "Transform applied first")->required();
  c_co->add_option("--second", co_second, "Transform applied second")
      ->required();
  c_co->add_option("--out", co_out, "Output transform file")->required();

  std::string am_input, am_mask, am_out;
  double am_background = 0.0;
  auto* c_am = app.add_subcommand("apply-mask",
                                  "Zero a volume outside a binary mask");
  c_am->add_option("--input", am_input, "Input volume")->required();
  c_am->add_option("--mask", am_mask, "Mask volume (nonzero = keep)")
      ->required();
  c_am->add_option("--out", am_out, "Output volume")->required();
  c_am->add_option("--background", am_background,
                   "Value for voxels outside the mask");

  std::string em_input, em_out;
  double em_threshold = 0.0;
  auto* c_em = app.add_subcommand(
      "extract-mask", "Mask of an already-stripped image (|voxel| > threshold)");
  c_em->add_option("--input", em_input, "Skull-stripped volume")->required();
  c_em->add_option("--out", em_out, "Output mask volume")->required();
  c_em->add_option("--threshold", em_threshold, "Absolute-value threshold");

  std::string dr_labels, dr_wt, dr_tc, dr_at;
  auto* c_dr = app.add_subcommand(
      "derive-regions",
      "Whole-tumor / tumor-core / active-tumor masks from a label volume");
  c_dr->add_option("--labels", dr_labels, "Label volume (0/1/2/4)")
      ->required();
  c_dr->add_option("--wt", dr_wt, "Whole-tumor mask output")->required();
  c_dr->add_option("--tc", dr_tc, "Tumor-core mask output")->required();
  c_dr->add_option("--at", dr_at, "Active-tumor mask output")->required();

  EvaluateArgs ev;
  auto* c_ev = app.add_subcommand(
      "evaluate", "Dice and HD95 per region for a predicted segmentation");
  c_ev->add_option("--prediction", ev.prediction, "Predicted label volume")
      ->required();
  c_ev->add_option("--truth", ev.truth, "Ground-truth label volume")
      ->required();
  c_ev->add_option("--mask", ev.mask,
                   "Optional mask; labels outside count as background");
  c_ev->add_option("--subject", ev.subject, "Subject id for the record");
  c_ev->add_option("--be-method", ev.be_method,
                   "Brain-extraction method name for the record");
  c_ev->add_option("--wall-time", ev.wall_time,
                   "Segmentation wall time to store, seconds");
  c_ev->add_option("--csv", ev.csv, "Append the record to this CSV");

  std::string va_ours, va_reference;
  auto* c_va = app.add_subcommand(
      "validate-alignment",
      "Pearson and PSNR against a reference, over its nonzero voxels");
  c_va->add_option("--ours", va_ours, "Our preprocessed volume")->required();
  c_va->add_option("--reference", va_reference, "Reference volume")
      ->required();

  std::string run_config;
  bool run_force = false;
  std::optional<int> run_workers;
  auto* c_run = app.add_subcommand("run", "Run the full pipeline from a config");
  c_run->add_option("--config", run_config, "Pipeline config (JSON)")
      ->required();
  c_run->add_flag("--force", run_force, "Recompute completed stages");
  c_run->add_option("--workers", run_workers,
                    "Concurrent subjects (beats NEUROPIPE_WORKERS)");

  std::string rp_runs, rp_out;
  auto* c_rp = app.add_subcommand(
      "report", "Rebuild reports from stored per-subject run.json files");
  c_rp->add_option("--runs", rp_runs, "Directory of per-subject run dirs")
      ->required();
  c_rp->add_option("--out", rp_out, "Report output directory")->required();

  try {
    app.parse(argc, argv);
    if (*c_reg)
      return cmd_register(reg);
    if (*c_rs)
      return cmd_resample(rs);
    if (*c_co)
      return cmd_compose(co_first, co_second, co_out);
    if (*c_am)
      return cmd_apply_mask(am_input, am_mask, am_background, am_out);
    if (*c_em)
      return cmd_extract_mask(em_input, em_threshold, em_out);
    if (*c_dr)
      return cmd_derive_regions(dr_labels, dr_wt, dr_tc, dr_at);
    if (*c_ev)
      return cmd_evaluate(ev);
    if (*c_va)
      return cmd_validate_alignment(va_ours, va_reference);
    if (*c_run)
      return cmd_run(run_config, run_force, run_workers);
    if (*c_rp)
      return cmd_report(rp_runs, rp_out);
    return 1;
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 1;
  } catch (const np::UsageError& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 2;
  }
}
