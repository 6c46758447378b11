// Command-line entry point: one verb per invocation.
//
// Exit status: 0 success, 1 runtime failure, 2 configuration / usage error,
// 3 invariant violation. Failures print one line to stderr:
//   ctguard: error[<class>]: <message>

#include <CLI11.hpp>

#include <cstdlib>
#include <filesystem>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include "ctguard/error.hpp"
#include "ctguard/evaluation.hpp"
#include "ctguard/manipulator.hpp"
#include "ctguard/metrics.hpp"
#include "ctguard/trainer.hpp"
#include "ctguard/volume_io.hpp"

namespace fs = std::filesystem;
using namespace ctguard;

namespace {

fs::path data_root() {
  const char* env = std::getenv("CTGUARD_DATA_DIR");
  return env && *env ? fs::path(env) : fs::path(".");
}

// Relative paths resolve against CTGUARD_DATA_DIR when it is set.
fs::path resolve(const std::string& p) {
  if (p.empty()) return {};
  fs::path path(p);
  return path.is_absolute() ? path : data_root() / path;
}

std::vector<int> parse_ints(const std::string& s, std::size_t expected, const std::string& flag) {
  std::vector<int> out;
  std::stringstream ss(s);
  std::string tok;
  while (std::getline(ss, tok, ',')) {
    try {
      std::size_t used = 0;
      out.push_back(std::stoi(tok, &used));
      if (used != tok.size()) throw std::invalid_argument(tok);
    } catch (const std::exception&) {
      throw ConfigError(flag + ": '" + s + "' is not a comma-separated integer list");
    }
  }
  if (out.size() != expected) throw ConfigError(flag + " expects " + std::to_string(expected) + " integers");
  return out;
}

std::vector<double> parse_grid(const std::string& s) {
  std::vector<double> out;
  std::stringstream ss(s);
  std::string tok;
  while (std::getline(ss, tok, ',')) {
    try {
      out.push_back(std::stod(tok));
    } catch (const std::exception&) {
      throw ConfigError("--grid: '" + tok + "' is not a number");
    }
  }
  if (out.empty()) throw ConfigError("--grid is empty");
  return out;
}

TrainingConfig resolve_config(const std::string& config_path, const std::vector<std::string>& overrides) {
  TrainingConfig cfg = config_path.empty() ? TrainingConfig{} : TrainingConfig::load(resolve(config_path));
  for (const std::string& o : overrides) {
    const auto eq = o.find('=');
    if (eq == std::string::npos) throw ConfigError("--set expects key=value, got '" + o + "'");
    cfg.set(o.substr(0, eq), o.substr(eq + 1));
  }
  if (cfg.data != "phantom") cfg.data = resolve(cfg.data).string();
  if (cfg.output_dir.empty()) cfg.output_dir = (data_root() / "runs" / "train").string();
  else cfg.output_dir = resolve(cfg.output_dir).string();
  if (!cfg.manipulator_weights.empty()) cfg.manipulator_weights = resolve(cfg.manipulator_weights).string();
  cfg.validate();
  return cfg;
}

struct VolumeArgs {
  std::string path;
  std::string dims;
  std::string dtype = "int16";
};

CtVolume read_volume(const VolumeArgs& a) {
  const fs::path p = resolve(a.path);
  if (fs::is_directory(p)) return load_dicom_series(p);
  if (a.dims.empty()) throw ConfigError("--dims n,h,w is required for raw volume '" + a.path + "'");
  const auto d = parse_ints(a.dims, 3, "--dims");
  CtVolume v = load_raw_volume(p, d[0], d[1], d[2], parse_raw_dtype(a.dtype));
  v.source_id = p.stem().string();
  return v;
}

void print_map(const std::map<std::string, std::string>& m) {
  for (const auto& [k, v] : m) std::cout << k << " = " << v << "\n";
}

int fail(const char* cls, const std::string& msg, int code) {
  std::string one_line = msg;
  for (char& c : one_line)
    if (c == '\n') c = ' ';
  std::cerr << "ctguard: error[" << cls << "]: " << one_line << "\n";
  return code;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"CT slice protection against tampering: train, protect, tamper, evaluate"};
  app.require_subcommand(1, 1);
  bool dry_run = false;
  app.add_flag("--dry-run", dry_run, "Print the resolved configuration and exit")->configurable(false);

  // ingest
  auto* ingest = app.add_subcommand("ingest", "Read a DICOM series or raw dump into a slice cache");
  std::string dicom_dir, ingest_out, volume_id;
  VolumeArgs raw_in;
  auto* dicom_opt = ingest->add_option("--dicom-dir", dicom_dir, "Directory holding one DICOM series");
  auto* raw_opt = ingest->add_option("--raw", raw_in.path, "Headerless little-endian volume");
  dicom_opt->excludes(raw_opt);
  ingest->add_option("--dims", raw_in.dims, "n,h,w of the raw volume");
  ingest->add_option("--dtype", raw_in.dtype, "Raw voxel type: int16, uint16, int32, float32, uint8");
  ingest->add_option("--volume-id", volume_id, "Identifier stored with every slice");
  ingest->add_option("--out", ingest_out, "Output slice-cache directory")->required();

  // phantom
  auto* phantom = app.add_subcommand("phantom", "Generate a synthetic chest phantom volume");
  PhantomSpec pspec;
  std::string phantom_out;
  bool phantom_cache = false;
  phantom->add_option("--size", pspec.size, "Slice edge in pixels")->check(CLI::Range(32, 4096));
  phantom->add_option("--slices", pspec.n_slices, "Number of slices")->check(CLI::Range(1, 100000));
  phantom->add_option("--nodule-prob", pspec.nodule_probability, "Chance of a nodule per slice")
      ->check(CLI::Range(0.0, 1.0));
  phantom->add_option("--seed", pspec.seed, "Generator seed");
  phantom->add_option("--out", phantom_out, "Output raw int16 volume file")->required();
  phantom->add_flag("--cache", phantom_cache, "Also write a slice cache next to the volume");

  // train
  auto* train = app.add_subcommand("train", "Adversarially train the protection generator");
  std::string config_path;
  std::vector<std::string> overrides;
  train->add_option("--config", config_path, "key = value configuration file");
  train->add_option("--set", overrides, "Override one key (key=value), repeatable");

  // protect
  auto* protect_cmd = app.add_subcommand("protect", "Protect every slice of a volume");
  std::string ckpt_path, protect_out;
  VolumeArgs protect_in;
  protect_cmd->add_option("--checkpoint", ckpt_path, "Trained checkpoint (default: the config's final checkpoint)");
  protect_cmd->add_option("--config", config_path, "Training configuration naming the run directory");
  protect_cmd->add_option("--set", overrides, "Override one training key (key=value)");
  protect_cmd->add_option("--in", protect_in.path, "Raw volume file or DICOM directory")->required();
  protect_cmd->add_option("--dims", protect_in.dims, "n,h,w for raw input");
  protect_cmd->add_option("--dtype", protect_in.dtype, "Raw voxel type");
  protect_cmd->add_option("--out", protect_out, "Output raw int16 volume")->required();

  // tamper
  auto* tamper_cmd = app.add_subcommand("tamper", "Manipulate one square on each (or one) slice");
  VolumeArgs tamper_in;
  std::string region_text, kind_text = "blur_blend", weights_path, tamper_ckpt, tamper_out;
  int tamper_slice = -1, region_size = 32;
  tamper_cmd->add_option("--in", tamper_in.path, "Raw volume file or DICOM directory")->required();
  tamper_cmd->add_option("--dims", tamper_in.dims, "n,h,w for raw input");
  tamper_cmd->add_option("--dtype", tamper_in.dtype, "Raw voxel type");
  tamper_cmd->add_option("--region", region_text, "cx,cy of the square")->required();
  tamper_cmd->add_option("--size", region_size, "Square edge")->check(CLI::Range(2, 4096));
  tamper_cmd->add_option("--kind", kind_text, "blur_blend, inpaint_surrogate or external");
  tamper_cmd->add_option("--weights", weights_path, "Manipulator weight archive");
  tamper_cmd->add_option("--checkpoint", tamper_ckpt, "Use the manipulator stored in a checkpoint");
  tamper_cmd->add_option("--slice", tamper_slice, "Only this slice (default: all)");
  tamper_cmd->add_option("--out", tamper_out, "Output raw int16 volume")->required();

  // evaluate
  auto* eval_cmd = app.add_subcommand("evaluate", "Metric tables for a checkpoint on its test split");
  std::string plan_path;
  std::vector<std::string> plan_overrides;
  eval_cmd->add_option("--plan", plan_path, "key = value evaluation plan")->required();
  eval_cmd->add_option("--set", plan_overrides, "Override one plan key (key=value)");

  // ablate
  auto* ablate = app.add_subcommand("ablate", "Train and evaluate once per alpha");
  std::string grid_text = "0.2,0.4,0.6,0.8,1.0", ablate_plan, ablate_out;
  ablate->add_option("--config", config_path, "Training configuration");
  ablate->add_option("--set", overrides, "Override one training key (key=value)");
  ablate->add_option("--grid", grid_text, "Comma-separated alpha values");
  ablate->add_option("--plan", ablate_plan, "Evaluation plan (metric settings, region seed)");
  ablate->add_option("--out", ablate_out, "Report directory");

  // heatmap
  auto* heat = app.add_subcommand("heatmap", "Difference heatmap of one slice of two volumes");
  VolumeArgs heat_a, heat_b;
  std::string heat_out;
  int heat_slice = 0;
  heat->add_option("--a", heat_a.path, "First volume")->required();
  heat->add_option("--b", heat_b.path, "Second volume")->required();
  heat->add_option("--dims", heat_a.dims, "n,h,w for raw inputs");
  heat->add_option("--slice", heat_slice, "Slice index");
  heat->add_option("--out", heat_out, "Output PNG")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    return fail("config", e.what(), 2);
  }

  try {
    if (*ingest) {
      if (dicom_dir.empty() && raw_in.path.empty()) throw ConfigError("ingest needs --dicom-dir or --raw");
      if (dry_run) {
        std::cout << "verb = ingest\nsource = " << (dicom_dir.empty() ? resolve(raw_in.path) : resolve(dicom_dir)).string()
                  << "\nout = " << resolve(ingest_out).string() << "\n";
        return 0;
      }
      CtVolume v = dicom_dir.empty() ? read_volume(raw_in) : load_dicom_series(resolve(dicom_dir));
      if (!volume_id.empty()) v.source_id = volume_id;
      if (v.source_id.empty()) v.source_id = "volume";
      write_slice_cache(resolve(ingest_out), volume_to_slices(v));
      std::cout << "ingested " << v.n << " slices of " << v.h << "x" << v.w << " into "
                << (resolve(ingest_out) / "index.txt").string() << "\n";
    } else if (*phantom) {
      if (dry_run) {
        std::cout << "verb = phantom\nsize = " << pspec.size << "\nslices = " << pspec.n_slices
                  << "\nnodule_prob = " << pspec.nodule_probability << "\nseed = " << pspec.seed
                  << "\nout = " << resolve(phantom_out).string() << "\n";
        return 0;
      }
      CtVolume v = generate_phantom(pspec);
      v.source_id = fs::path(phantom_out).stem().string();
      const fs::path out = resolve(phantom_out);
      if (out.has_parent_path()) fs::create_directories(out.parent_path());
      save_raw_volume(v, out);
      if (phantom_cache) write_slice_cache(out.parent_path() / (out.stem().string() + "_slices"), volume_to_slices(v));
      std::cout << "wrote " << out.string() << " dims " << v.n << "," << v.h << "," << v.w << "\n";
    } else if (*train) {
      const TrainingConfig cfg = resolve_config(config_path, overrides);
      if (dry_run) {
        std::cout << cfg.to_text();
        return 0;
      }
      const TrainingData data = load_training_data(cfg);
      std::vector<Image> slices;
      for (const SliceRecord& r : data.train) slices.push_back(r.pixels);
      FitHooks hooks;
      hooks.on_epoch = [&](int epoch, const Checkpoint&) {
        std::cerr << "epoch " << epoch << "/" << cfg.epochs << " done\n";
      };
      fit(slices, cfg, hooks);
      std::cout << "trained on " << slices.size() << " slices; checkpoint "
                << (fs::path(cfg.output_dir) / "checkpoint_final.mca").string() << "\n";
    } else if (*protect_cmd) {
      if (ckpt_path.empty()) {
        ckpt_path = (fs::path(resolve_config(config_path, overrides).output_dir) / "checkpoint_final.mca").string();
      }
      if (dry_run) {
        std::cout << "verb = protect\ncheckpoint = " << resolve(ckpt_path).string()
                  << "\nin = " << resolve(protect_in.path).string() << "\nout = " << resolve(protect_out).string() << "\n";
        return 0;
      }
      const Checkpoint c = load_checkpoint(resolve(ckpt_path));
      const CtVolume v = read_volume(protect_in);
      save_raw_volume(protect(v, c), resolve(protect_out));
      std::cout << "protected " << v.n << " slices -> " << resolve(protect_out).string() << "\n";
    } else if (*tamper_cmd) {
      const auto c = parse_ints(region_text, 2, "--region");
      TamperRegion r{c[0], c[1], region_size};
      const ManipulatorKind kind = parse_manipulator_kind(kind_text);
      if (dry_run) {
        std::cout << "verb = tamper\nkind = " << to_string(kind) << "\nregion = " << r.cx << "," << r.cy
                  << "\nsize = " << r.size << "\nout = " << resolve(tamper_out).string() << "\n";
        return 0;
      }
      ManipulatorHandle m;
      if (!tamper_ckpt.empty()) {
        m = load_checkpoint(resolve(tamper_ckpt)).manipulator();
      } else if (kind != ManipulatorKind::kBlurBlend) {
        if (weights_path.empty()) throw ConfigError("--kind " + kind_text + " needs --weights or --checkpoint");
        m = ManipulatorHandle::load(resolve(weights_path).string());
      }
      const CtVolume v = read_volume(tamper_in);
      std::vector<Image> hu;
      const auto slices = volume_to_slices(v);
      for (int i = 0; i < v.n; ++i) {
        const Image& x = slices[static_cast<std::size_t>(i)].pixels;
        hu.push_back(denormalize_slice(tamper_slice < 0 || tamper_slice == i ? tamper(x, r, m) : x));
      }
      save_raw_volume(slices_to_volume(hu, v), resolve(tamper_out));
      std::cout << "tampered -> " << resolve(tamper_out).string() << "\n";
    } else if (*eval_cmd) {
      EvaluationPlan plan = EvaluationPlan::load(resolve(plan_path));
      for (const std::string& o : plan_overrides) {
        const auto eq = o.find('=');
        if (eq == std::string::npos) throw ConfigError("--set expects key=value, got '" + o + "'");
        plan.set(o.substr(0, eq), o.substr(eq + 1));
      }
      plan.checkpoint = resolve(plan.checkpoint).string();
      plan.output_dir = plan.output_dir.empty() ? (data_root() / "runs" / "eval").string() : resolve(plan.output_dir).string();
      plan.validate();
      if (dry_run) {
        print_map(plan.fields());
        return 0;
      }
      if (!fs::exists(plan.checkpoint)) throw IngestError("checkpoint not found: " + plan.checkpoint);
      const EvaluationResult r = evaluate(plan);
      std::cout << r.whole_image.to_csv() << r.tamper_square.to_csv();
    } else if (*ablate) {
      TrainingConfig cfg = resolve_config(config_path, overrides);
      const std::vector<double> grid = parse_grid(grid_text);
      EvaluationPlan plan = ablate_plan.empty() ? EvaluationPlan{} : EvaluationPlan::load(resolve(ablate_plan));
      plan.heatmap_samples = 0;
      const fs::path out = ablate_out.empty() ? data_root() / "runs" / "ablation" : resolve(ablate_out);
      cfg.output_dir = (out / "runs").string();
      if (dry_run) {
        std::cout << cfg.to_text() << "grid = " << grid_text << "\nout = " << out.string() << "\n";
        return 0;
      }
      const TrainingData data = load_training_data(cfg);
      std::vector<Image> tr, te;
      for (const SliceRecord& s : data.train) tr.push_back(s.pixels);
      for (const SliceRecord& s : data.test) te.push_back(s.pixels);
      const ManipulatorHandle m = resolve_manipulator(cfg, tr);
      const AblationResult res = ablation_sweep(cfg, grid, tr, te, m, plan);
      render_ablation(res, out);
      std::cout << res.to_csv();
    } else if (*heat) {
      heat_b.dims = heat_a.dims;
      if (dry_run) {
        std::cout << "verb = heatmap\na = " << resolve(heat_a.path).string() << "\nb = " << resolve(heat_b.path).string()
                  << "\nslice = " << heat_slice << "\nout = " << resolve(heat_out).string() << "\n";
        return 0;
      }
      const CtVolume a = read_volume(heat_a), b = read_volume(heat_b);
      if (heat_slice < 0 || heat_slice >= a.n || heat_slice >= b.n) throw ConfigError("--slice out of range");
      const Image ia = normalize_slice(a.slice(heat_slice), a.h, a.w);
      const Image ib = normalize_slice(b.slice(heat_slice), b.h, b.w);
      write_png_gray(resolve(heat_out), heatmap(to_metric_scale(ia), to_metric_scale(ib)), a.h, a.w);
      std::cout << "heatmap -> " << resolve(heat_out).string() << "\n";
    }
  } catch (const ConfigError& e) {
    return fail("config", e.what(), 2);
  } catch (const InvariantError& e) {
    return fail("invariant", e.what(), 3);
  } catch (const ArchiveError& e) {
    return fail("archive", e.what(), 1);
  } catch (const std::exception& e) {
    return fail("runtime", e.what(), 1);
  }
  return 0;
}
