#pragma once

#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "neuropipe/geometry.hpp"
#include "neuropipe/metrics.hpp"
#include "neuropipe/registration.hpp"
#include "neuropipe/volume.hpp"

namespace neuropipe {

enum class ToolInputKind {
  SingleT1,
  AllFour,
};

/// A subprocess invoked through a shell command template. Placeholders:
/// {input} (single modality path), {inputs_4mod} (four space-separated
/// paths, order t1 t1ce t2 flair), {output} (path the tool must create).
struct ExternalToolSpec {
  std::string name = "tool";
  std::string command_template;
  double timeout_s = 600.0;
  ToolInputKind expects = ToolInputKind::SingleT1;
};

/// Requires {output} plus at least one input placeholder in the template.
void validate(const ExternalToolSpec& spec);

struct ToolOutcome {
  int exit_code = 0;
  double wall_time_s = 0.0;
};

/// Runs the tool with every placeholder substituted from `bindings`,
/// timing spawn-to-exit on the monotonic clock. A nonzero exit is
/// returned, not thrown (the wall time is still meaningful). Throws
/// TimeoutError after killing the tool's process group at timeout_s, and
/// ToolContractError when the tool exits 0 without creating the bound
/// {output} file. Unbound placeholders throw UsageError.
ToolOutcome time_external(const ExternalToolSpec& tool,
                          const std::map<std::string, std::string>& bindings);

enum class BeMode {
  None,   // skip brain extraction
  Manual, // mask extracted from the reference image (gold standard)
  Tool,   // external BE tool produces the mask
};

enum class GuardMode {
  Otsu, // built-in foreground mask (default; no external dependency)
  Tool, // external tool produces the guard mask
  None, // second registration sees the unstripped intermediate
};

struct SubjectSpec {
  std::string id;
  // Keys from {t1, t1ce, t2, flair}; t1 is required.
  std::map<std::string, std::filesystem::path> modalities;
  std::optional<std::filesystem::path> reference;
  std::optional<std::filesystem::path> ground_truth;
};

struct PipelineConfig {
  std::filesystem::path atlas_path;
  BeMode be_mode = BeMode::None;
  std::optional<ExternalToolSpec> be_tool; // set iff be_mode == Tool
  std::optional<ExternalToolSpec> seg_tool;
  GuardMode guard_mode = GuardMode::Otsu;
  std::optional<ExternalToolSpec> guard_tool; // set iff guard_mode == Tool
  RegistrationConfig registration;
  std::filesystem::path output_dir;
  // Output lattice; when absent the atlas's own grid is used.
  std::optional<GridSpec> target_grid;
  int workers = 1;
  // Repeat the first-stage registration per modality instead of reusing
  // the T1 transform.
  bool per_modality_registration = false;
  std::vector<SubjectSpec> subjects;
};

/// Parses the JSON config; all paths inside are resolved relative to the
/// config file's directory. Malformed content throws UsageError.
PipelineConfig load_config(const std::filesystem::path& path);

void validate(const PipelineConfig& cfg);

const char* be_mode_name(BeMode m);

/// One step of a subject's run, for provenance and timing.
struct StageEvent {
  std::string stage;
  std::vector<std::string> inputs;  // artifact paths consumed
  std::vector<std::string> outputs; // artifact paths produced
  double wall_time_s = 0.0;
  std::string started_at; // ISO 8601 UTC
  std::string finished_at;
};

struct SubjectRun {
  std::string subject_id;
  std::string be_method;
  RigidTransform composed_transform;
  std::map<std::string, std::filesystem::path> preprocessed; // per modality
  std::optional<std::filesystem::path> brain_mask_path;
  std::optional<std::filesystem::path> prediction_path;
  std::optional<EvaluationRecord> record;
  std::vector<StageEvent> events;
  std::map<std::string, double> tool_wall_times_s;
};

/// Resample-stage events that wrote `artifact`. Exactly one per final
/// preprocessed modality (the single-interpolation contract).
int resample_events_writing(const SubjectRun& run, const std::string& artifact);

/// True when some guard-stage output reaches the final resample or any
/// later stage of the artifact path. Must be false: the guard copy only
/// steers the second registration.
bool guard_output_in_final_path(const SubjectRun& run);

struct RunOptions {
  bool force = false; // recompute even when stage outputs already exist
  std::optional<int> workers; // beats NEUROPIPE_WORKERS and the config
};

/// Executes one subject end to end: (1) register T1 to the atlas; (2)
/// resample the T1 intermediate onto the target grid; (3) with a
/// reference: guard-strip that intermediate, register it to the
/// reference, and compose the two transforms; (4) ONE final resample per
/// modality through the composed transform; (5) brain extraction per
/// be_mode; (6) segmentation tool; (7) with ground truth: region metrics
/// and alignment scores. Stage artifacts persist under
/// output_dir/<subject_id>/ and completed stages are skipped on rerun
/// unless options.force.
SubjectRun run_subject(const PipelineConfig& cfg, const SubjectSpec& subject,
                       const RunOptions& options = {});

/// Runs every configured subject (worker pool of cfg.workers, overridden
/// by the NEUROPIPE_WORKERS env var), then emits reports into
/// output_dir. Throws StageFailureError naming the subjects that failed,
/// after finishing the rest.
std::vector<SubjectRun> run_all(const PipelineConfig& cfg,
                                const RunOptions& options = {});

/// Pearson and PSNR of `ours` against `reference`, over the reference's
/// nonzero voxels. Empty reference mask throws DegenerateInputError.
AlignmentScores validate_alignment(const Volume& ours, const Volume& reference);

/// Writes per_subject.csv, summary.json (median-average Dice/HD95 per
/// be_method plus mean wall time per tool and the empty-mask
/// conventions), and plot_data.json (per-method score lists) into `out`.
void emit_report(const std::vector<SubjectRun>& runs,
                 const std::filesystem::path& out);

/// Round-trips a SubjectRun through JSON (the `report` subcommand feeds
/// on stored runs).
void save_run(const SubjectRun& run, const std::filesystem::path& path);
SubjectRun load_run(const std::filesystem::path& path);

/// Pretty-printed JSON for a single record (stdout of `evaluate`).
std::string evaluation_record_json(const EvaluationRecord& r);

/// Appends one row to a CSV with the per_subject.csv column order,
/// writing the header first when the file is new or empty.
void append_record_csv(const EvaluationRecord& r,
                       const std::filesystem::path& path);

} // namespace neuropipe
