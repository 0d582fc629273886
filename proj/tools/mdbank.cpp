#include <cstdlib>
#include <fstream>
#include <iostream>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>
#include <spdlog/spdlog.h>

#include "mdbank/checkpoint.hpp"
#include "mdbank/evaluation.hpp"
#include "mdbank/experiments.hpp"
#include "mdbank/parallel.hpp"
#include "mdbank/plot.hpp"
#include "mdbank/run_manifest.hpp"
#include "mdbank/synthdata.hpp"
#include "mdbank/trainer.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace mdbank;

namespace {

constexpr int kUsageError = 1;
constexpr int kRunFailure = 2;

fs::path run_root() {
  const char* env = std::getenv("MDBANK_RUN_ROOT");
  return env && *env ? fs::path(env) : fs::path("runs");
}

struct TrainFlags {
  TrainConfig config;
  std::string variant = "mdbank";
  std::string gate;

  TrainConfig resolve() const {
    TrainConfig c = config;
    c.variant = variant_from_string(variant);
    if (!gate.empty()) c.gate = gate_from_string(gate);
    return c;
  }
};

void add_train_options(CLI::App* app, TrainFlags& f) {
  TrainConfig& c = f.config;
  app->add_option("--variant", f.variant, "faster_only, mt_ins, mdbank_h or mdbank")->capture_default_str();
  app->add_option("--gate", f.gate, "G1 (hard) or G2 (soft); defaults to the variant's gate");
  app->add_option("--eta", c.eta, "weight of the adaptation terms")->capture_default_str();
  app->add_option("--lambda", c.lambda, "weight of the adversarial term")->capture_default_str();
  app->add_option("--gamma", c.gamma, "soft gate sharpening exponent")->capture_default_str();
  app->add_option("--alpha", c.alpha, "teacher EMA decay")->capture_default_str();
  app->add_option("--k_top_target", c.k_top_target, "teacher proposals per target image")->capture_default_str();
  app->add_option("--steps", c.steps)->capture_default_str();
  app->add_option("--lr", c.lr)->capture_default_str();
  app->add_option("--momentum", c.momentum)->capture_default_str();
  app->add_option("--weight_decay", c.weight_decay)->capture_default_str();
  app->add_option("--lr_decay_step", c.lr_decay_step, "multiply lr by lr_decay_factor from this step; 0 disables")
      ->capture_default_str();
  app->add_option("--lr_decay_factor", c.lr_decay_factor)->capture_default_str();
  app->add_option("--grad_clip", c.grad_clip)->capture_default_str();
  app->add_option("--seed", c.seed)->capture_default_str();
  app->add_option("--burnin_steps", c.burnin_steps, "source-only steps before adaptation starts")->capture_default_str();
  app->add_option("--grl_coeff", c.grl_coeff)->capture_default_str();
  app->add_option("--grl_ramp", c.grl_ramp, "ramp the reversal coefficient up after burn-in")->capture_default_str();
  app->add_option("--unit_entropy", c.unit_entropy, "use unit consistency weights")->capture_default_str();
  app->add_option("--deterministic", c.deterministic)->capture_default_str();
  app->add_option("--checkpoint_every", c.checkpoint_every)->capture_default_str();
  app->add_option("--bank_hidden", c.bank_hidden)->capture_default_str();
  app->add_option("--train_proposals", c.detector.train_proposals)->capture_default_str();
  app->add_option("--test_proposals", c.detector.test_proposals)->capture_default_str();
  app->add_option("--rpn_batch", c.detector.rpn_batch)->capture_default_str();
  app->add_option("--roi_batch", c.detector.roi_batch)->capture_default_str();
}

std::vector<std::string> split_list(const std::string& s) {
  std::vector<std::string> out;
  std::string cur;
  for (char ch : s) {
    if (ch == ',') {
      if (!cur.empty()) out.push_back(cur);
      cur.clear();
    } else if (!std::isspace(static_cast<unsigned char>(ch))) {
      cur += ch;
    }
  }
  if (!cur.empty()) out.push_back(cur);
  return out;
}

void write_json(const fs::path& path, const json& j) {
  if (!path.parent_path().empty()) fs::create_directories(path.parent_path());
  write_file_atomic(path, j.dump(2) + "\n");
}

void write_manifest(const fs::path& dir, const std::string& command, const json& config, const fs::path& dataset,
                    const std::string& started) {
  RunManifest m{command, config, dataset.empty() ? "" : dataset_fingerprint(dataset), kCodeVersion, started,
                utc_timestamp()};
  write_json(dir / "run_manifest.json", m);
}

// Splices the entries of a --config file (flat key = value, TOML syntax) into
// the argument list right after the subcommand, ahead of explicit flags, so
// that flags given on the command line take precedence.
std::vector<std::string> expand_config(int argc, char** argv) {
  std::vector<std::string> args(argv + 1, argv + argc);
  std::vector<std::string> expanded;
  std::optional<std::string> path;
  std::vector<std::string> rest;
  for (std::size_t i = 0; i < args.size(); ++i) {
    if (args[i] == "--config") {
      if (i + 1 >= args.size()) throw CLI::ValidationError("--config", "missing file name");
      path = args[++i];
    } else if (args[i].rfind("--config=", 0) == 0) {
      path = args[i].substr(9);
    } else {
      rest.push_back(args[i]);
    }
  }
  if (!path) return rest;
  if (!fs::exists(*path)) throw CLI::FileError::Missing(*path);
  std::vector<std::string> injected;
  for (const auto& item : CLI::ConfigTOML().from_file(*path)) {
    if (item.name == "++" || item.name == "--") continue;  // section markers
    if (item.inputs.size() == 1) {
      injected.push_back("--" + item.name + "=" + item.inputs.front());
    } else {
      injected.push_back("--" + item.name);
      injected.insert(injected.end(), item.inputs.begin(), item.inputs.end());
    }
  }
  // The subcommand is the first token that does not start with a dash and is
  // not the value of a global option.
  std::size_t at = 0;
  while (at < rest.size() && rest[at].rfind("-", 0) == 0) at += rest[at] == "--threads" ? 2 : 1;
  at = std::min(at + 1, rest.size());
  rest.insert(rest.begin() + static_cast<std::ptrdiff_t>(at), injected.begin(), injected.end());
  return rest;
}

void take_last(CLI::App* app) { app->option_defaults()->multi_option_policy(CLI::MultiOptionPolicy::TakeLast); }

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Synthetic-domain detector adaptation toolkit"};
  app.require_subcommand(1);
  take_last(&app);
  std::string config_file;
  int threads = 0;
  bool verbose = false;
  app.add_option("--threads", threads, "OpenMP threads (0 keeps the runtime default)");
  app.add_flag("-v,--verbose", verbose);

  std::string command_line;
  for (int i = 0; i < argc; ++i) command_line += (i ? " " : "") + std::string(argv[i]);

  // generate
  auto* gen = app.add_subcommand("generate", "render the synthetic source/target dataset");
  gen->add_option("--config", config_file, "flat key = value file; command-line flags win");
  synth::GenerateOptions gen_opts;
  fs::path gen_out;
  gen->add_option("--out", gen_out, "dataset directory")->required();
  gen->add_option("--n_source", gen_opts.n_source)->capture_default_str();
  gen->add_option("--n_target", gen_opts.n_target)->capture_default_str();
  gen->add_option("--n_eval", gen_opts.n_eval)->capture_default_str();
  gen->add_option("--seed", gen_opts.seed)->capture_default_str();
  gen->add_option("--image_size", gen_opts.image_size)->capture_default_str();
  gen->add_option("--max_objects", gen_opts.max_objects)->capture_default_str();
  gen->add_option("--fog_beta", gen_opts.style.fog_beta)->capture_default_str();
  gen->add_option("--fog_level", gen_opts.style.fog_level)->capture_default_str();
  gen->add_option("--hue_degrees", gen_opts.style.hue_degrees)->capture_default_str();
  gen->add_option("--noise_sigma", gen_opts.style.noise_sigma)->capture_default_str();
  gen->add_flag("--overwrite", gen_opts.overwrite, "replace an existing dataset directory");

  // train
  auto* train = app.add_subcommand("train", "train one variant");
  train->add_option("--config", config_file, "flat key = value file; command-line flags win");
  TrainFlags train_flags;
  fs::path train_data, train_dir;
  add_train_options(train, train_flags);
  train->add_option("--dataset", train_data)->required();
  train->add_option("--run-dir,--run_dir", train_dir, "defaults to $MDBANK_RUN_ROOT/<variant>_seed<seed>");

  // eval
  auto* ev = app.add_subcommand("eval", "evaluate a checkpoint or dump region embeddings");
  ev->add_option("--config", config_file, "flat key = value file; command-line flags win");
  fs::path ev_ckpt, ev_data, ev_out, ev_embed;
  std::string ev_split = synth::kTargetEvalSplit;
  eval::EvalOptions ev_opts;
  eval::EmbedOptions embed_opts;
  ev->add_option("--checkpoint", ev_ckpt)->required();
  ev->add_option("--dataset", ev_data)->required();
  ev->add_option("--split", ev_split)->capture_default_str();
  ev->add_option("--out", ev_out, "report path (JSON); printed when omitted");
  ev->add_option("--score_thresh", ev_opts.score_thresh)->capture_default_str();
  ev->add_option("--nms_iou", ev_opts.nms_iou)->capture_default_str();
  ev->add_option("--embeddings", ev_embed, "also write a region-embedding CSV here");
  ev->add_option("--regions_per_image", embed_opts.regions_per_image)->capture_default_str();
  ev->add_option("--images_per_split", embed_opts.images_per_split)->capture_default_str();

  // plot
  auto* pl = app.add_subcommand("plot", "render reports to images");
  std::string plot_kind;
  std::vector<fs::path> plot_inputs;
  fs::path plot_out;
  pl->add_option("--kind", plot_kind, "pr, sweep, train or embed")
      ->required()
      ->check(CLI::IsMember({"pr", "sweep", "train", "embed"}));
  pl->add_option("--input", plot_inputs, "eval.json, sweep.json (repeatable), metrics.jsonl or embeddings CSV")
      ->required();
  pl->add_option("--out", plot_out)->required();

  // ablate
  auto* ab = app.add_subcommand("ablate", "train and evaluate variants over seeds");
  ab->add_option("--config", config_file, "flat key = value file; command-line flags win");
  TrainFlags ab_flags;
  fs::path ab_data, ab_out;
  std::string ab_seeds = "1,2,3", ab_variants = "faster_only,mt_ins,mdbank";
  int ab_workers = 1;
  add_train_options(ab, ab_flags);
  ab->add_option("--dataset", ab_data)->required();
  ab->add_option("--out", ab_out, "defaults to $MDBANK_RUN_ROOT/ablate");
  ab->add_option("--seeds", ab_seeds)->capture_default_str();
  ab->add_option("--variants", ab_variants)->capture_default_str();
  ab->add_option("--workers", ab_workers)->capture_default_str();

  // sweep
  auto* sw = app.add_subcommand("sweep", "train one run per value of eta or lambda");
  sw->add_option("--config", config_file, "flat key = value file; command-line flags win");
  TrainFlags sw_flags;
  fs::path sw_data, sw_out;
  std::string sw_param = "eta", sw_values;
  int sw_workers = 1;
  add_train_options(sw, sw_flags);
  sw->add_option("--dataset", sw_data)->required();
  sw->add_option("--out", sw_out, "defaults to $MDBANK_RUN_ROOT/sweep_<param>");
  sw->add_option("--param", sw_param)->check(CLI::IsMember({"eta", "lambda"}))->capture_default_str();
  sw->add_option("--values", sw_values, "comma-separated values")->required();
  sw->add_option("--workers", sw_workers)->capture_default_str();

  try {
    auto args = expand_config(argc, argv);
    std::reverse(args.begin(), args.end());
    app.parse(args);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : kUsageError;
  }
  if (threads > 0) set_threads(threads);
  spdlog::set_level(verbose ? spdlog::level::debug : spdlog::level::info);
  const std::string started = utc_timestamp();

  // Configuration problems are usage errors; anything after that is a run failure.
  try {
    if (*train) {
      const TrainConfig cfg = train_flags.resolve();
      validate(cfg);
      const fs::path dir =
          train_dir.empty() ? run_root() / (to_string(cfg.variant) + "_seed" + std::to_string(cfg.seed)) : train_dir;
      try {
        FitOptions fo{train_data, dir, command_line, false, {}};
        fit(cfg, fo);
        spdlog::info("run written to {}", dir.string());
      } catch (const std::exception& e) {
        spdlog::error("training failed: {}", e.what());
        return kRunFailure;
      }
      return 0;
    }
    if (*ab) {
      exp::AblateOptions opts;
      opts.dataset_root = ab_data;
      opts.out_dir = ab_out.empty() ? run_root() / "ablate" : ab_out;
      for (const auto& s : split_list(ab_seeds)) opts.seeds.push_back(std::stoull(s));
      for (const auto& v : split_list(ab_variants)) opts.variants.push_back(variant_from_string(v));
      opts.base = ab_flags.resolve();
      opts.workers = ab_workers;
      validate(opts.base);
      if (opts.seeds.empty() || opts.variants.size() < 2) {
        std::cerr << "ablate needs at least one seed and two variants\n";
        return kUsageError;
      }
      try {
        const auto table = exp::ablate(opts, exp::subprocess_launcher(fs::canonical("/proc/self/exe")));
        write_json(opts.out_dir / "ablation.json", table);
        write_file_atomic(opts.out_dir / "ablation.md", exp::render_table(table));
        write_manifest(opts.out_dir, command_line, json(opts.base), opts.dataset_root, started);
        std::cout << exp::render_table(table);
        for (const auto& c : table.cells) {
          if (!c.ok) return kRunFailure;
        }
      } catch (const std::exception& e) {
        spdlog::error("ablation failed: {}", e.what());
        return kRunFailure;
      }
      return 0;
    }
    if (*sw) {
      exp::SweepOptions opts;
      opts.dataset_root = sw_data;
      opts.param = exp::sweep_param_from_string(sw_param);
      opts.out_dir = sw_out.empty() ? run_root() / ("sweep_" + sw_param) : sw_out;
      for (const auto& v : split_list(sw_values)) opts.values.push_back(std::stod(v));
      opts.base = sw_flags.resolve();
      opts.workers = sw_workers;
      validate(opts.base);
      if (opts.values.empty()) {
        std::cerr << "sweep needs at least one value\n";
        return kUsageError;
      }
      try {
        const auto result = exp::sweep(opts, exp::subprocess_launcher(fs::canonical("/proc/self/exe")));
        write_json(opts.out_dir / "sweep.json", result);
        write_manifest(opts.out_dir, command_line, json(opts.base), opts.dataset_root, started);
        std::cout << json(result).dump(2) << "\n";
        for (const auto& p : result.points) {
          if (!p.ok) return kRunFailure;
        }
      } catch (const std::exception& e) {
        spdlog::error("sweep failed: {}", e.what());
        return kRunFailure;
      }
      return 0;
    }
  } catch (const std::exception& e) {
    std::cerr << "invalid configuration: " << e.what() << "\n";
    return kUsageError;
  }

  try {
    if (*gen) {
      const auto manifest = synth::generate_dataset(gen_out, gen_opts);
      write_manifest(gen_out, command_line, json(manifest), "", started);
      spdlog::info("dataset written to {} ({} source, {} target, {} eval)", gen_out.string(), manifest.n_source,
                   manifest.n_target, manifest.n_eval);
    } else if (*ev) {
      const auto report = eval::evaluate_checkpoint(ev_ckpt, ev_data, ev_split, ev_opts);
      if (ev_out.empty()) {
        std::cout << json(report).dump(2) << "\n";
      } else {
        write_json(ev_out, report);
        spdlog::info("mAP {:.4f} on {} ({} images)", report.map, ev_split, report.num_images);
      }
      if (!ev_embed.empty()) {
        const auto table = eval::dump_embeddings(ev_ckpt, ev_data, embed_opts);
        eval::write_embedding_csv(ev_embed, table);
        write_json(fs::path(ev_embed).replace_extension(".summary.json"), eval::embedding_summary(table));
      }
    } else if (*pl) {
      if (plot_kind == "pr") {
        std::ifstream in(plot_inputs.at(0));
        plot::pr_curves(json::parse(in).get<eval::EvalReport>(), plot_out);
      } else if (plot_kind == "sweep") {
        std::vector<exp::SweepResult> sweeps;
        for (const auto& p : plot_inputs) {
          std::ifstream in(p);
          sweeps.push_back(json::parse(in).get<exp::SweepResult>());
        }
        plot::sweep_curve(sweeps, plot_out);
      } else if (plot_kind == "train") {
        plot::training_curves(plot::read_metrics(plot_inputs.at(0)), plot_out);
      } else {
        plot::embedding_scatter(eval::read_embedding_csv(plot_inputs.at(0)), plot_out);
      }
    }
  } catch (const std::exception& e) {
    spdlog::error("{}", e.what());
    return kRunFailure;
  }
  return 0;
}
