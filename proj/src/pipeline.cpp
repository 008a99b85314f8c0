#include "neuropipe/pipeline.hpp"

#include <json.hpp>

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cstdio>
#include <cstdlib>
#include <ctime>
#include <fstream>
#include <functional>
#include <mutex>
#include <set>
#include <sstream>
#include <thread>

#include "neuropipe/errors.hpp"
#include "neuropipe/mask.hpp"
#include "neuropipe/nifti.hpp"
#include "neuropipe/resample.hpp"

namespace neuropipe {

using nlohmann::json;

namespace {

const std::vector<std::string> kModalityOrder = {"t1", "t1ce", "t2", "flair"};

std::string iso_utc_now() {
  const auto now = std::chrono::system_clock::now();
  const std::time_t t = std::chrono::system_clock::to_time_t(now);
  std::tm tm{};
  gmtime_r(&t, &tm);
  char buf[32];
  std::strftime(buf, sizeof(buf), "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

std::filesystem::path resolve(const std::filesystem::path& base,
                              const std::string& p) {
  std::filesystem::path path(p);
  return path.is_absolute() ? path : base / path;
}

ToolInputKind tool_input_from_name(const std::string& s) {
  if (s == "single_t1")
    return ToolInputKind::SingleT1;
  if (s == "all_four")
    return ToolInputKind::AllFour;
  throw UsageError("config: tool 'expects' must be single_t1 or all_four, got " + s);
}

ExternalToolSpec parse_tool(const json& j, const std::string& key) {
  if (!j.is_object())
    throw UsageError("config: " + key + " must be an object");
  ExternalToolSpec t;
  t.name = j.value("name", key);
  if (!j.contains("command"))
    throw UsageError("config: " + key + " needs a 'command' template");
  t.command_template = j.at("command").get<std::string>();
  t.timeout_s = j.value("timeout_s", 600.0);
  t.expects = tool_input_from_name(j.value("expects", std::string("single_t1")));
  validate(t);
  return t;
}

GridSpec parse_grid(const json& j) {
  GridSpec g;
  if (!j.contains("dims") || !j.contains("spacing"))
    throw UsageError("config: target_grid needs dims and spacing");
  for (int a = 0; a < 3; ++a) {
    g.dims[a] = j.at("dims").at(a).get<int>();
    g.spacing[a] = j.at("spacing").at(a).get<double>();
  }
  if (j.contains("origin"))
    for (int a = 0; a < 3; ++a)
      g.origin[a] = j.at("origin").at(a).get<double>();
  if (j.contains("direction")) {
    const auto& d = j.at("direction");
    for (int r = 0; r < 3; ++r)
      for (int c = 0; c < 3; ++c)
        g.direction(r, c) = d.at(3 * r + c).get<double>();
  }
  validate(g);
  return g;
}

void parse_registration(const json& j, RegistrationConfig& cfg) {
  if (j.contains("pyramid_levels"))
    cfg.pyramid_levels = j.at("pyramid_levels").get<std::vector<int>>();
  cfg.max_iterations_per_level =
      j.value("max_iterations_per_level", cfg.max_iterations_per_level);
  if (j.contains("metric"))
    cfg.metric = metric_from_name(j.at("metric").get<std::string>());
  cfg.translation_bounds_mm =
      j.value("translation_bounds_mm", cfg.translation_bounds_mm);
  cfg.rotation_bounds_rad =
      j.value("rotation_bounds_rad", cfg.rotation_bounds_rad);
  cfg.convergence_tol = j.value("convergence_tol", cfg.convergence_tol);
  cfg.seed = j.value("seed", cfg.seed);
  validate(cfg);
}

// Volumes are interpolated as floats; integer-coded intensity images are
// retagged on load so trilinear pulls are legal.
Volume load_intensity(const std::filesystem::path& p) {
  Volume v = read_volume(p);
  return is_integer_dtype(v.dtype) ? as_float32(std::move(v)) : v;
}

} // namespace

const char* be_mode_name(BeMode m) {
  switch (m) {
  case BeMode::None: return "none";
  case BeMode::Manual: return "manual";
  case BeMode::Tool: return "tool";
  }
  return "none";
}

PipelineConfig load_config(const std::filesystem::path& path) {
  std::ifstream f(path);
  if (!f)
    throw UsageError("cannot open config file: " + path.string());
  json j;
  try {
    f >> j;
  } catch (const json::exception& e) {
    throw UsageError("config: " + std::string(e.what()));
  }
  try {
    const std::filesystem::path base =
        std::filesystem::absolute(path).parent_path();
    PipelineConfig cfg;
    if (!j.contains("atlas") || !j.contains("output_dir"))
      throw UsageError("config: atlas and output_dir are required");
    cfg.atlas_path = resolve(base, j.at("atlas").get<std::string>());
    cfg.output_dir = resolve(base, j.at("output_dir").get<std::string>());

    const json be = j.value("be_tool", json("none"));
    if (be.is_string()) {
      const std::string s = be.get<std::string>();
      if (s == "none")
        cfg.be_mode = BeMode::None;
      else if (s == "manual")
        cfg.be_mode = BeMode::Manual;
      else
        throw UsageError("config: be_tool must be none, manual, or a tool "
                         "object, got '" + s + "'");
    } else {
      cfg.be_mode = BeMode::Tool;
      cfg.be_tool = parse_tool(be, "be_tool");
    }

    if (j.contains("seg_tool"))
      cfg.seg_tool = parse_tool(j.at("seg_tool"), "seg_tool");

    const json guard = j.value("guard", json("otsu"));
    if (guard.is_string()) {
      const std::string s = guard.get<std::string>();
      if (s == "otsu")
        cfg.guard_mode = GuardMode::Otsu;
      else if (s == "none")
        cfg.guard_mode = GuardMode::None;
      else
        throw UsageError("config: guard must be otsu, none, or a tool object");
    } else {
      cfg.guard_mode = GuardMode::Tool;
      cfg.guard_tool = parse_tool(guard, "guard");
    }

    if (j.contains("registration"))
      parse_registration(j.at("registration"), cfg.registration);
    if (j.contains("target_grid"))
      cfg.target_grid = parse_grid(j.at("target_grid"));
    cfg.workers = j.value("workers", 1);
    cfg.per_modality_registration =
        j.value("per_modality_registration", false);

    for (const json& js : j.value("subjects", json::array())) {
      SubjectSpec s;
      s.id = js.at("id").get<std::string>();
      for (const auto& m : kModalityOrder)
        if (js.contains(m))
          s.modalities[m] = resolve(base, js.at(m).get<std::string>());
      if (js.contains("reference"))
        s.reference = resolve(base, js.at("reference").get<std::string>());
      if (js.contains("ground_truth"))
        s.ground_truth =
            resolve(base, js.at("ground_truth").get<std::string>());
      cfg.subjects.push_back(std::move(s));
    }
    validate(cfg);
    return cfg;
  } catch (const json::exception& e) {
    throw UsageError("config: " + std::string(e.what()));
  }
}

void validate(const PipelineConfig& cfg) {
  if (cfg.atlas_path.empty() || cfg.output_dir.empty())
    throw UsageError("config: atlas and output_dir are required");
  if (cfg.be_mode == BeMode::Tool) {
    if (!cfg.be_tool)
      throw UsageError("config: be_mode tool requires a be_tool spec");
    validate(*cfg.be_tool);
  }
  if (cfg.guard_mode == GuardMode::Tool) {
    if (!cfg.guard_tool)
      throw UsageError("config: guard mode tool requires a guard tool spec");
    validate(*cfg.guard_tool);
  }
  if (cfg.seg_tool)
    validate(*cfg.seg_tool);
  if (cfg.workers < 1)
    throw UsageError("config: workers must be at least 1");
  validate(cfg.registration);
  std::set<std::string> ids;
  for (const auto& s : cfg.subjects) {
    if (s.id.empty())
      throw UsageError("config: every subject needs an id");
    if (!ids.insert(s.id).second)
      throw UsageError("config: duplicate subject id " + s.id);
    if (!s.modalities.count("t1"))
      throw UsageError("config: subject " + s.id + " has no t1 modality");
    for (const auto& [name, p] : s.modalities) {
      (void)p;
      if (std::find(kModalityOrder.begin(), kModalityOrder.end(), name) ==
          kModalityOrder.end())
        throw UsageError("config: subject " + s.id +
                         " has unknown modality " + name);
    }
  }
}

int resample_events_writing(const SubjectRun& run, const std::string& artifact) {
  int n = 0;
  for (const auto& e : run.events)
    if (e.stage.rfind("resample", 0) == 0)
      for (const auto& out : e.outputs)
        if (out == artifact)
          ++n;
  return n;
}

bool guard_output_in_final_path(const SubjectRun& run) {
  std::set<std::string> steering; // guard + intermediate artifacts
  for (const auto& e : run.events)
    if (e.stage == "guard" || e.stage == "resample_intermediate")
      steering.insert(e.outputs.begin(), e.outputs.end());
  for (const auto& e : run.events) {
    const bool final_path = e.stage.rfind("resample_final", 0) == 0 ||
                            e.stage == "brain_extraction" ||
                            e.stage == "segmentation";
    if (!final_path)
      continue;
    for (const auto& in : e.inputs)
      if (steering.count(in))
        return true;
  }
  return false;
}

namespace {

void to_json_transform(json& j, const RigidTransform& t) {
  std::vector<double> m;
  m.reserve(16);
  for (int r = 0; r < 4; ++r)
    for (int c = 0; c < 4; ++c)
      m.push_back(t.matrix()(r, c));
  j = m;
}

RigidTransform transform_from_json(const json& j) {
  Eigen::Matrix4d m;
  for (int r = 0; r < 4; ++r)
    for (int c = 0; c < 4; ++c)
      m(r, c) = j.at(4 * r + c).get<double>();
  return RigidTransform(m);
}

json record_to_json(const EvaluationRecord& r) {
  json j{{"subject_id", r.subject_id},
         {"be_method", r.be_method},
         {"dice", {{"wt", r.dice_wt}, {"tc", r.dice_tc}, {"at", r.dice_at}}},
         {"hd95", {{"wt", r.hd95_wt}, {"tc", r.hd95_tc}, {"at", r.hd95_at}}},
         {"wall_time_s", r.wall_time_s}};
  if (r.alignment)
    j["alignment"] = {{"pearson", r.alignment->pearson},
                      {"psnr_db", r.alignment->psnr_db}};
  return j;
}

EvaluationRecord record_from_json(const json& j) {
  EvaluationRecord r;
  r.subject_id = j.at("subject_id").get<std::string>();
  r.be_method = j.at("be_method").get<std::string>();
  r.dice_wt = j.at("dice").at("wt").get<double>();
  r.dice_tc = j.at("dice").at("tc").get<double>();
  r.dice_at = j.at("dice").at("at").get<double>();
  r.hd95_wt = j.at("hd95").at("wt").get<double>();
  r.hd95_tc = j.at("hd95").at("tc").get<double>();
  r.hd95_at = j.at("hd95").at("at").get<double>();
  r.wall_time_s = j.at("wall_time_s").get<double>();
  if (j.contains("alignment")) {
    AlignmentScores a;
    a.pearson = j.at("alignment").at("pearson").get<double>();
    a.psnr_db = j.at("alignment").at("psnr_db").get<double>();
    r.alignment = a;
  }
  return r;
}

json event_to_json(const StageEvent& e) {
  return json{{"stage", e.stage},          {"inputs", e.inputs},
              {"outputs", e.outputs},      {"wall_time_s", e.wall_time_s},
              {"started_at", e.started_at}, {"finished_at", e.finished_at}};
}

StageEvent event_from_json(const json& j) {
  StageEvent e;
  e.stage = j.at("stage").get<std::string>();
  e.inputs = j.at("inputs").get<std::vector<std::string>>();
  e.outputs = j.at("outputs").get<std::vector<std::string>>();
  e.wall_time_s = j.at("wall_time_s").get<double>();
  e.started_at = j.at("started_at").get<std::string>();
  e.finished_at = j.at("finished_at").get<std::string>();
  return e;
}

void write_text_atomic(const std::filesystem::path& path,
                       const std::string& text) {
  const std::filesystem::path tmp = path.string() + ".tmp";
  {
    std::ofstream f(tmp, std::ios::binary);
    if (!f)
      throw IoError("cannot write " + path.string());
    f << text;
    if (!f.flush())
      throw IoError("failed writing " + path.string());
  }
  std::filesystem::rename(tmp, path);
}

} // namespace

void save_run(const SubjectRun& run, const std::filesystem::path& path) {
  json j;
  j["subject_id"] = run.subject_id;
  j["be_method"] = run.be_method;
  to_json_transform(j["composed_transform"], run.composed_transform);
  json pre = json::object();
  for (const auto& [mod, p] : run.preprocessed)
    pre[mod] = p.string();
  j["preprocessed"] = pre;
  if (run.brain_mask_path)
    j["brain_mask"] = run.brain_mask_path->string();
  if (run.prediction_path)
    j["prediction"] = run.prediction_path->string();
  if (run.record)
    j["record"] = record_to_json(*run.record);
  json events = json::array();
  for (const auto& e : run.events)
    events.push_back(event_to_json(e));
  j["events"] = events;
  j["tool_wall_times_s"] = run.tool_wall_times_s;
  write_text_atomic(path, j.dump(2) + "\n");
}

SubjectRun load_run(const std::filesystem::path& path) {
  std::ifstream f(path);
  if (!f)
    throw IoError("cannot open run file: " + path.string());
  json j;
  try {
    f >> j;
    SubjectRun run;
    run.subject_id = j.at("subject_id").get<std::string>();
    run.be_method = j.at("be_method").get<std::string>();
    run.composed_transform = transform_from_json(j.at("composed_transform"));
    for (const auto& [mod, p] : j.at("preprocessed").items())
      run.preprocessed[mod] = p.get<std::string>();
    if (j.contains("brain_mask"))
      run.brain_mask_path = j.at("brain_mask").get<std::string>();
    if (j.contains("prediction"))
      run.prediction_path = j.at("prediction").get<std::string>();
    if (j.contains("record"))
      run.record = record_from_json(j.at("record"));
    for (const json& je : j.at("events"))
      run.events.push_back(event_from_json(je));
    run.tool_wall_times_s =
        j.at("tool_wall_times_s").get<std::map<std::string, double>>();
    return run;
  } catch (const json::exception& e) {
    throw FormatError("malformed run file " + path.string() + ": " + e.what());
  }
}

AlignmentScores validate_alignment(const Volume& ours, const Volume& reference) {
  BinaryMask mask = extract_mask(reference);
  if (mask.empty())
    throw DegenerateInputError(
        "reference image is all background; alignment mask is empty");
  AlignmentScores s;
  s.pearson = pearson_masked(reference, ours, mask);
  s.psnr_db = psnr_masked(reference, ours, mask);
  return s;
}

namespace {

// Sequences one subject's stages: runs each once, skips stages whose
// outputs exist and whose ledger entries survive from a prior run, and
// checkpoints run.json after every stage.
class SubjectExecution {
public:
  SubjectExecution(const PipelineConfig& cfg, const SubjectSpec& subject,
                   const RunOptions& options)
      : cfg_(cfg), subject_(subject), options_(options),
        dir_(cfg.output_dir / subject.id) {}

  SubjectRun execute() {
    std::filesystem::create_directories(dir_ / "transforms");
    std::filesystem::create_directories(dir_ / "intermediate");
    std::filesystem::create_directories(dir_ / "resampled");
    std::filesystem::create_directories(dir_ / "eval");

    run_.subject_id = subject_.id;
    run_.be_method = cfg_.be_mode == BeMode::Tool ? cfg_.be_tool->name
                                                  : be_mode_name(cfg_.be_mode);
    if (!options_.force && std::filesystem::exists(dir_ / "run.json")) {
      try {
        prior_ = load_run(dir_ / "run.json");
      } catch (const Error&) {
        // Unreadable ledger: recompute from scratch.
      }
    }

    target_ = cfg_.target_grid ? *cfg_.target_grid
                               : grid_of(load_intensity(cfg_.atlas_path));

    stage_register_atlas();
    stage_resample_intermediate();
    if (subject_.reference) {
      stage_guard();
      stage_register_reference();
    }
    stage_compose();
    stage_resample_final();
    stage_brain_extraction();
    stage_segmentation();
    stage_evaluation();

    run_.composed_transform = read_transform(composed_path("t1"));
    verify_artifact_path();
    checkpoint();
    return run_;
  }

private:
  using Paths = std::vector<std::filesystem::path>;

  // Tool wall times are keyed "<prefix>:<tool name>"; the prefix names
  // the stage that ran the tool, so skipped stages can re-adopt them.
  static std::string stage_tool_prefix(const std::string& stage) {
    if (stage == "guard")
      return "guard:";
    if (stage == "brain_extraction")
      return "be:";
    if (stage == "segmentation")
      return "seg:";
    return {};
  }

  // Returns true when the stage was skipped: outputs on disk, a prior
  // ledger entry, and no earlier stage recomputed this run.
  bool ensure(const std::string& stage, const Paths& inputs,
              const Paths& outputs, const std::function<void()>& body) {
    bool complete = !options_.force && !upstream_dirty_ && prior_.has_value();
    if (complete)
      for (const auto& p : outputs)
        complete = complete && std::filesystem::exists(p);
    if (complete) {
      bool found = false;
      for (const auto& e : prior_->events)
        if (e.stage == stage) {
          run_.events.push_back(e);
          found = true;
        }
      if (found) {
        const std::string prefix = stage_tool_prefix(stage);
        if (!prefix.empty())
          for (const auto& [tool, t] : prior_->tool_wall_times_s)
            if (tool.rfind(prefix, 0) == 0)
              run_.tool_wall_times_s[tool] = t;
        checkpoint();
        return true;
      }
    }
    upstream_dirty_ = true;
    StageEvent e;
    e.stage = stage;
    for (const auto& p : inputs)
      e.inputs.push_back(p.string());
    for (const auto& p : outputs)
      e.outputs.push_back(p.string());
    e.started_at = iso_utc_now();
    const auto t0 = std::chrono::steady_clock::now();
    body();
    e.wall_time_s =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - t0)
            .count();
    e.finished_at = iso_utc_now();
    run_.events.push_back(e);
    checkpoint();
    return false;
  }

  void checkpoint() { save_run(run_, dir_ / "run.json"); }

  std::filesystem::path atlas_transform_path(const std::string& mod) const {
    return cfg_.per_modality_registration
               ? dir_ / "transforms" / ("atlas_" + mod + ".txt")
               : dir_ / "transforms" / "atlas_t1.txt";
  }
  std::filesystem::path composed_path(const std::string& mod) const {
    return cfg_.per_modality_registration
               ? dir_ / "transforms" / ("composed_" + mod + ".txt")
               : dir_ / "transforms" / "composed_t1.txt";
  }
  std::filesystem::path resampled_path(const std::string& mod) const {
    return dir_ / "resampled" / (mod + ".nii.gz");
  }

  std::vector<std::string> present_modalities() const {
    std::vector<std::string> mods;
    for (const auto& m : kModalityOrder)
      if (subject_.modalities.count(m))
        mods.push_back(m);
    return mods;
  }

  // Bindings for a tool that consumes the final (or given) modality set.
  std::map<std::string, std::string> tool_bindings(
      const ExternalToolSpec& tool,
      const std::map<std::string, std::filesystem::path>& mods,
      const std::filesystem::path& output, const std::string& stage) const {
    std::map<std::string, std::string> b;
    if (tool.expects == ToolInputKind::AllFour) {
      std::string joined;
      for (const auto& m : kModalityOrder) {
        const auto it = mods.find(m);
        if (it == mods.end())
          throw UsageError("subject " + subject_.id + ": " + stage +
                           " tool expects all four modalities, missing " + m);
        if (!joined.empty())
          joined += ' ';
        joined += it->second.string();
      }
      b["inputs_4mod"] = joined;
    } else {
      b["input"] = mods.at("t1").string();
    }
    b["output"] = output.string();
    return b;
  }

  void run_tool(const ExternalToolSpec& tool, const std::string& key,
                const std::string& stage,
                const std::map<std::string, std::string>& bindings) {
    const ToolOutcome outcome = time_external(tool, bindings);
    run_.tool_wall_times_s[key] = outcome.wall_time_s;
    if (outcome.exit_code != 0)
      throw StageFailureError("subject " + subject_.id + ": stage " + stage +
                              ": tool '" + tool.name + "' exited with code " +
                              std::to_string(outcome.exit_code) + " after " +
                              std::to_string(outcome.wall_time_s) + " s");
  }

  void stage_register_atlas() {
    const auto mods = cfg_.per_modality_registration
                          ? present_modalities()
                          : std::vector<std::string>{"t1"};
    for (const auto& mod : mods) {
      const auto out = atlas_transform_path(mod);
      ensure("register_atlas_" + mod,
             {subject_.modalities.at(mod), cfg_.atlas_path}, {out}, [&] {
               const Volume atlas = load_intensity(cfg_.atlas_path);
               const Volume moving =
                   load_intensity(subject_.modalities.at(mod));
               const RegistrationResult r =
                   register_rigid(atlas, moving, cfg_.registration);
               write_transform(r.transform, out);
             });
    }
  }

  void stage_resample_intermediate() {
    const auto out = dir_ / "intermediate" / "t1_atlas.nii.gz";
    intermediate_path_ = out;
    ensure("resample_intermediate",
           {subject_.modalities.at("t1"), atlas_transform_path("t1")}, {out},
           [&] {
             const Volume moving = load_intensity(subject_.modalities.at("t1"));
             const RigidTransform a = read_transform(atlas_transform_path("t1"));
             write_volume(resample(moving, a, target_,
                                   InterpolationKind::Trilinear, 0.0),
                          out);
           });
  }

  void stage_guard() {
    if (cfg_.guard_mode == GuardMode::None) {
      guard_input_path_ = intermediate_path_;
      return;
    }
    std::filesystem::create_directories(dir_ / "guard");
    const auto out = dir_ / "guard" / "t1_stripped.nii.gz";
    guard_input_path_ = out;
    if (cfg_.guard_mode == GuardMode::Otsu) {
      ensure("guard", {intermediate_path_}, {out}, [&] {
        const Volume in = load_intensity(intermediate_path_);
        write_volume(intermediate_skullstrip_guard(in, otsu_mask(in)), out);
      });
    } else {
      const auto mask_path = dir_ / "guard" / "mask.nii.gz";
      ensure("guard", {intermediate_path_}, {out, mask_path}, [&] {
        std::map<std::string, std::string> b{
            {"input", intermediate_path_.string()},
            {"output", mask_path.string()}};
        run_tool(*cfg_.guard_tool, "guard:" + cfg_.guard_tool->name, "guard",
                 b);
        const Volume in = load_intensity(intermediate_path_);
        const BinaryMask mask = mask_from_volume(read_volume(mask_path));
        if (!same_geometry(in, mask))
          throw StageFailureError("subject " + subject_.id +
                                  ": guard tool mask is on a different grid");
        write_volume(intermediate_skullstrip_guard(in, mask), out);
      });
    }
  }

  void stage_register_reference() {
    const auto out = dir_ / "transforms" / "reference.txt";
    ensure("register_reference", {guard_input_path_, *subject_.reference},
           {out}, [&] {
             const Volume fixed = load_intensity(*subject_.reference);
             const Volume moving = load_intensity(guard_input_path_);
             const RegistrationResult r =
                 register_rigid(fixed, moving, cfg_.registration);
             write_transform(r.transform, out);
           });
  }

  void stage_compose() {
    const auto mods = cfg_.per_modality_registration
                          ? present_modalities()
                          : std::vector<std::string>{"t1"};
    for (const auto& mod : mods) {
      const auto out = composed_path(mod);
      Paths inputs{atlas_transform_path(mod)};
      if (subject_.reference)
        inputs.push_back(dir_ / "transforms" / "reference.txt");
      ensure("compose_" + mod, inputs, {out}, [&] {
        const RigidTransform a = read_transform(atlas_transform_path(mod));
        if (subject_.reference) {
          const RigidTransform b =
              read_transform(dir_ / "transforms" / "reference.txt");
          write_transform(compose(a, b), out);
        } else {
          write_transform(a, out);
        }
      });
    }
  }

  void stage_resample_final() {
    for (const auto& mod : present_modalities()) {
      const auto out = resampled_path(mod);
      ensure("resample_final_" + mod,
             {subject_.modalities.at(mod), composed_path(mod)}, {out}, [&] {
               const Volume moving =
                   load_intensity(subject_.modalities.at(mod));
               const RigidTransform t = read_transform(composed_path(mod));
               write_volume(resample(moving, t, target_,
                                     InterpolationKind::Trilinear, 0.0),
                            out);
             });
      run_.preprocessed[mod] = out;
    }
  }

  void stage_brain_extraction() {
    if (cfg_.be_mode == BeMode::None)
      return;
    std::filesystem::create_directories(dir_ / "be");
    std::filesystem::create_directories(dir_ / "preproc");
    const auto mask_path = dir_ / "be" / "brain_mask.nii.gz";
    Paths inputs, outputs{mask_path};
    for (const auto& mod : present_modalities()) {
      inputs.push_back(resampled_path(mod));
      outputs.push_back(dir_ / "preproc" / (mod + ".nii.gz"));
    }
    if (cfg_.be_mode == BeMode::Manual)
      inputs.push_back(*subject_.reference);

    ensure("brain_extraction", inputs, outputs, [&] {
      BinaryMask mask;
      if (cfg_.be_mode == BeMode::Manual) {
        if (!subject_.reference)
          throw UsageError("subject " + subject_.id +
                           ": manual brain extraction needs a reference image");
        mask = extract_mask(read_volume(*subject_.reference));
        write_volume(mask_to_volume(mask), mask_path);
      } else {
        std::map<std::string, std::filesystem::path> mods;
        for (const auto& mod : present_modalities())
          mods[mod] = resampled_path(mod);
        run_tool(*cfg_.be_tool, "be:" + cfg_.be_tool->name, "brain_extraction",
                 tool_bindings(*cfg_.be_tool, mods, mask_path,
                               "brain_extraction"));
        mask = mask_from_volume(read_volume(mask_path));
      }
      for (const auto& mod : present_modalities()) {
        const Volume v = load_intensity(resampled_path(mod));
        if (!same_geometry(v, mask))
          throw StageFailureError("subject " + subject_.id +
                                  ": brain mask is on a different grid");
        write_volume(apply_mask(v, mask, 0.0),
                     dir_ / "preproc" / (mod + ".nii.gz"));
      }
    });
    run_.brain_mask_path = mask_path;
    for (const auto& mod : present_modalities())
      run_.preprocessed[mod] = dir_ / "preproc" / (mod + ".nii.gz");
  }

  void stage_segmentation() {
    if (!cfg_.seg_tool)
      return;
    std::filesystem::create_directories(dir_ / "seg");
    const auto out = dir_ / "seg" / "prediction.nii.gz";
    Paths inputs;
    for (const auto& mod : present_modalities())
      inputs.push_back(run_.preprocessed.at(mod));
    ensure("segmentation", inputs, {out}, [&] {
      run_tool(*cfg_.seg_tool, "seg:" + cfg_.seg_tool->name, "segmentation",
               tool_bindings(*cfg_.seg_tool, run_.preprocessed, out,
                             "segmentation"));
    });
    run_.prediction_path = out;
  }

  void stage_evaluation() {
    if (!subject_.ground_truth || !run_.prediction_path)
      return;
    const auto out = dir_ / "eval" / "record.json";
    Paths inputs{*run_.prediction_path, *subject_.ground_truth};
    if (subject_.reference)
      inputs.push_back(*subject_.reference);
    const bool skipped = ensure("evaluation", inputs, {out}, [&] {
      const RegionSet pred =
          derive_regions(label_volume_from(read_volume(*run_.prediction_path)));
      const RegionSet truth =
          derive_regions(label_volume_from(read_volume(*subject_.ground_truth)));
      EvaluationRecord r;
      r.subject_id = subject_.id;
      r.be_method = run_.be_method;
      r.dice_wt = dice(pred.wt, truth.wt);
      r.dice_tc = dice(pred.tc, truth.tc);
      r.dice_at = dice(pred.at, truth.at);
      r.hd95_wt = hausdorff95(pred.wt, truth.wt);
      r.hd95_tc = hausdorff95(pred.tc, truth.tc);
      r.hd95_at = hausdorff95(pred.at, truth.at);
      const auto seg_key = "seg:" + cfg_.seg_tool->name;
      if (run_.tool_wall_times_s.count(seg_key))
        r.wall_time_s = run_.tool_wall_times_s.at(seg_key);
      if (subject_.reference)
        r.alignment =
            validate_alignment(load_intensity(run_.preprocessed.at("t1")),
                               load_intensity(*subject_.reference));
      std::ostringstream buf;
      buf << record_to_json(r).dump(2) << "\n";
      write_text_atomic(out, buf.str());
      run_.record = r;
    });
    if (skipped) {
      std::ifstream f(out);
      json j;
      f >> j;
      run_.record = record_from_json(j);
    }
  }

  void verify_artifact_path() {
    for (const auto& mod : present_modalities()) {
      const int n = resample_events_writing(run_, resampled_path(mod).string());
      if (n != 1)
        throw StageFailureError(
            "internal: modality " + mod + " of subject " + subject_.id +
            " was written by " + std::to_string(n) +
            " resample passes; the contract requires exactly one");
    }
    if (guard_output_in_final_path(run_))
      throw StageFailureError("internal: a guard artifact leaked into the "
                              "final artifact path of subject " + subject_.id);
  }

  const PipelineConfig& cfg_;
  const SubjectSpec& subject_;
  const RunOptions& options_;
  std::filesystem::path dir_;
  GridSpec target_;
  std::filesystem::path intermediate_path_;
  std::filesystem::path guard_input_path_;
  SubjectRun run_;
  std::optional<SubjectRun> prior_;
  bool upstream_dirty_ = false;
};

} // namespace

SubjectRun run_subject(const PipelineConfig& cfg, const SubjectSpec& subject,
                       const RunOptions& options) {
  validate(cfg);
  return SubjectExecution(cfg, subject, options).execute();
}

std::vector<SubjectRun> run_all(const PipelineConfig& cfg,
                                const RunOptions& options) {
  validate(cfg);
  if (cfg.subjects.empty())
    throw UsageError("config lists no subjects");

  int workers = cfg.workers;
  if (const char* env = std::getenv("NEUROPIPE_WORKERS")) {
    try {
      workers = std::stoi(env);
    } catch (const std::exception&) {
      throw UsageError("NEUROPIPE_WORKERS must be a positive integer");
    }
    if (workers < 1)
      throw UsageError("NEUROPIPE_WORKERS must be a positive integer");
  }
  if (options.workers) {
    if (*options.workers < 1)
      throw UsageError("workers must be a positive integer");
    workers = *options.workers;
  }
  workers = std::min<int>(workers, static_cast<int>(cfg.subjects.size()));

  std::vector<std::optional<SubjectRun>> results(cfg.subjects.size());
  std::vector<std::string> failures(cfg.subjects.size());
  std::atomic<std::size_t> next{0};
  const auto worker = [&] {
    for (;;) {
      const std::size_t i = next.fetch_add(1);
      if (i >= cfg.subjects.size())
        return;
      try {
        results[i] = run_subject(cfg, cfg.subjects[i], options);
      } catch (const std::exception& e) {
        failures[i] = e.what();
      }
    }
  };
  if (workers <= 1) {
    worker();
  } else {
    std::vector<std::thread> pool;
    for (int w = 0; w < workers; ++w)
      pool.emplace_back(worker);
    for (auto& t : pool)
      t.join();
  }

  std::vector<SubjectRun> runs;
  std::string failed;
  for (std::size_t i = 0; i < cfg.subjects.size(); ++i) {
    if (results[i])
      runs.push_back(std::move(*results[i]));
    else
      failed += (failed.empty() ? "" : "; ") + cfg.subjects[i].id + ": " +
                failures[i];
  }
  if (!runs.empty())
    emit_report(runs, cfg.output_dir);
  if (!failed.empty())
    throw StageFailureError("subjects failed: " + failed);
  return runs;
}

namespace {

constexpr const char* kCsvHeader =
    "subject_id,be_method,dice_wt,dice_tc,dice_at,hd95_wt,hd95_tc,"
    "hd95_at,wall_time_s,pearson,psnr_db";

std::string csv_number(double v) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%.6f", v);
  return buf;
}

std::string csv_record_fields(const EvaluationRecord& r) {
  std::string row = csv_number(r.dice_wt) + "," + csv_number(r.dice_tc) +
                    "," + csv_number(r.dice_at) + "," + csv_number(r.hd95_wt) +
                    "," + csv_number(r.hd95_tc) + "," + csv_number(r.hd95_at) +
                    "," + csv_number(r.wall_time_s) + ",";
  if (r.alignment)
    row += csv_number(r.alignment->pearson) + "," +
           csv_number(r.alignment->psnr_db);
  else
    row += ",";
  return row;
}

} // namespace

std::string evaluation_record_json(const EvaluationRecord& r) {
  return record_to_json(r).dump(2);
}

void append_record_csv(const EvaluationRecord& r,
                       const std::filesystem::path& path) {
  const bool fresh =
      !std::filesystem::exists(path) || std::filesystem::file_size(path) == 0;
  if (path.has_parent_path())
    std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::app);
  if (!out)
    throw IoError("cannot open " + path.string() + " for append");
  if (fresh)
    out << kCsvHeader << '\n';
  out << r.subject_id << ',' << r.be_method << ',' << csv_record_fields(r)
      << '\n';
  if (!out)
    throw IoError("failed writing " + path.string());
}

void emit_report(const std::vector<SubjectRun>& runs,
                 const std::filesystem::path& out) {
  if (runs.empty())
    throw DegenerateInputError("emit_report requires at least one run");
  std::filesystem::create_directories(out);

  std::ostringstream csv;
  csv << kCsvHeader << '\n';
  for (const auto& run : runs) {
    csv << run.subject_id << ',' << run.be_method << ',';
    if (run.record)
      csv << csv_record_fields(*run.record);
    else
      csv << ",,,,,,,,";
    csv << '\n';
  }
  write_text_atomic(out / "per_subject.csv", csv.str());

  // Group evaluated records by brain-extraction method.
  std::map<std::string, std::vector<EvaluationRecord>> by_method;
  for (const auto& run : runs)
    if (run.record)
      by_method[run.be_method].push_back(*run.record);

  json summary;
  summary["per_be_method"] = json::object();
  for (const auto& [method, records] : by_method) {
    const Summary s = summarize(records);
    summary["per_be_method"][method] = {
        {"median_avg_dice", s.median_avg_dice},
        {"median_avg_hd95", s.median_avg_hd95},
        {"subjects", records.size()}};
  }
  std::map<std::string, std::pair<double, int>> wall;
  for (const auto& run : runs)
    for (const auto& [tool, t] : run.tool_wall_times_s) {
      wall[tool].first += t;
      wall[tool].second += 1;
    }
  summary["mean_wall_time_s"] = json::object();
  for (const auto& [tool, acc] : wall)
    summary["mean_wall_time_s"][tool] = acc.first / acc.second;
  summary["conventions"] = {
      {"dice_both_empty", 1.0},
      {"dice_one_empty", 0.0},
      {"hd95_both_empty", 0.0},
      {"hd95_one_empty", "world-space diagonal of the volume (mm)"},
      {"hd95_percentile", "nearest-rank ceiling on each directed set, then max"},
      {"surface", "6-connectivity boundary voxels; volume border is background"},
      {"psnr_cap_db", kPsnrCapDb}};
  write_text_atomic(out / "summary.json", summary.dump(2) + "\n");

  json plot = json::object();
  for (const auto& [method, records] : by_method) {
    json m;
    m["subjects"] = json::array();
    for (const char* region : {"wt", "tc", "at"}) {
      m["dice"][region] = json::array();
      m["hd95"][region] = json::array();
    }
    m["avg_dice"] = json::array();
    m["avg_hd95"] = json::array();
    for (const auto& r : records) {
      m["subjects"].push_back(r.subject_id);
      m["dice"]["wt"].push_back(r.dice_wt);
      m["dice"]["tc"].push_back(r.dice_tc);
      m["dice"]["at"].push_back(r.dice_at);
      m["hd95"]["wt"].push_back(r.hd95_wt);
      m["hd95"]["tc"].push_back(r.hd95_tc);
      m["hd95"]["at"].push_back(r.hd95_at);
      m["avg_dice"].push_back((r.dice_wt + r.dice_tc + r.dice_at) / 3.0);
      m["avg_hd95"].push_back((r.hd95_wt + r.hd95_tc + r.hd95_at) / 3.0);
    }
    plot[method] = m;
  }
  write_text_atomic(out / "plot_data.json", plot.dump(2) + "\n");
}

} // namespace neuropipe
