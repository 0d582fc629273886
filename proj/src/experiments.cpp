#include "mdbank/experiments.hpp"

#include <algorithm>
#include <atomic>
#include <charconv>
#include <cmath>
#include <fcntl.h>
#include <fstream>
#include <set>
#include <sstream>
#include <sys/wait.h>
#include <thread>
#include <unistd.h>

#include <spdlog/spdlog.h>

#include "mdbank/checkpoint.hpp"

namespace mdbank::exp {
namespace fs = std::filesystem;
using nlohmann::json;

namespace {

std::string shortest(double v) {
  char buf[64];
  const auto res = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, res.ptr);
}

// Runs argv[0] with the given arguments, appending output to `log`. Returns
// the exit status, or -1 if the child could not be started or was signaled.
int run_child(const std::vector<std::string>& argv, const fs::path& log) {
  std::vector<char*> args;
  for (const auto& a : argv) args.push_back(const_cast<char*>(a.c_str()));
  args.push_back(nullptr);
  const pid_t pid = fork();
  if (pid < 0) return -1;
  if (pid == 0) {
    const int fd = open(log.c_str(), O_WRONLY | O_CREAT | O_APPEND, 0644);
    if (fd >= 0) {
      dup2(fd, STDOUT_FILENO);
      dup2(fd, STDERR_FILENO);
      close(fd);
    }
    execv(args[0], args.data());
    _exit(127);
  }
  int status = 0;
  if (waitpid(pid, &status, 0) < 0) return -1;
  return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

double sample_std(const std::vector<double>& v) {
  if (v.size() < 2) return 0.0;
  double mean = 0.0;
  for (double x : v) mean += x;
  mean /= v.size();
  double ss = 0.0;
  for (double x : v) ss += (x - mean) * (x - mean);
  return std::sqrt(ss / (v.size() - 1));
}

}  // namespace

std::map<std::string, std::string> flat_config(const TrainConfig& c) {
  std::map<std::string, std::string> m{
      {"eta", shortest(c.eta)},
      {"lambda", shortest(c.lambda)},
      {"gamma", shortest(c.gamma)},
      {"alpha", shortest(c.alpha)},
      {"k_top_target", std::to_string(c.k_top_target)},
      {"variant", to_string(c.variant)},
      {"steps", std::to_string(c.steps)},
      {"lr", shortest(c.lr)},
      {"momentum", shortest(c.momentum)},
      {"weight_decay", shortest(c.weight_decay)},
      {"lr_decay_step", std::to_string(c.lr_decay_step)},
      {"lr_decay_factor", shortest(c.lr_decay_factor)},
      {"grad_clip", shortest(c.grad_clip)},
      {"seed", std::to_string(c.seed)},
      {"burnin_steps", std::to_string(c.burnin_steps)},
      {"grl_coeff", shortest(c.grl_coeff)},
      {"grl_ramp", c.grl_ramp ? "true" : "false"},
      {"unit_entropy", c.unit_entropy ? "true" : "false"},
      {"deterministic", c.deterministic ? "true" : "false"},
      {"checkpoint_every", std::to_string(c.checkpoint_every)},
      {"bank_hidden", std::to_string(c.bank_hidden)},
      {"train_proposals", std::to_string(c.detector.train_proposals)},
      {"test_proposals", std::to_string(c.detector.test_proposals)},
      {"rpn_batch", std::to_string(c.detector.rpn_batch)},
      {"roi_batch", std::to_string(c.detector.roi_batch)},
  };
  if (c.gate) m["gate"] = to_string(*c.gate);
  return m;
}

std::string render_flat_config(const TrainConfig& config) {
  std::string out;
  for (const auto& [k, v] : flat_config(config)) {
    const bool quoted = k == "variant" || k == "gate";
    out += k + " = " + (quoted ? "\"" + v + "\"" : v) + "\n";
  }
  return out;
}

Launcher in_process_launcher(eval::EvalOptions options) {
  return [options](const RunSpec& spec) {
    RunResult r;
    r.key = spec.key;
    try {
      FitOptions fo;
      fo.dataset_root = spec.dataset_root;
      fo.run_dir = spec.run_dir;
      fo.command = "in-process " + spec.key;
      fo.quiet = true;
      fit(spec.config, fo);
      r.report = eval::evaluate_checkpoint(spec.run_dir / "checkpoints" / "teacher_final.ckpt", spec.dataset_root,
                                           synth::kTargetEvalSplit, options);
      write_file_atomic(spec.run_dir / "eval.json", json(r.report).dump(2) + "\n");
      r.ok = true;
    } catch (const std::exception& e) {
      r.error = e.what();
    }
    return r;
  };
}

Launcher subprocess_launcher(fs::path executable) {
  return [exe = std::move(executable)](const RunSpec& spec) {
    RunResult r;
    r.key = spec.key;
    try {
      fs::create_directories(spec.run_dir);
      const fs::path cfg = spec.run_dir / "run_config.toml";
      write_file_atomic(cfg, render_flat_config(spec.config));
      const fs::path log = spec.run_dir / "log.txt";
      const int train = run_child({exe.string(), "train", "--config", cfg.string(), "--dataset",
                                   spec.dataset_root.string(), "--run-dir", spec.run_dir.string()},
                                  log);
      if (train != 0) throw ExperimentError("train exited with status " + std::to_string(train) + " (see " + log.string() + ")");
      const fs::path report = spec.run_dir / "eval.json";
      const int ev = run_child({exe.string(), "eval", "--checkpoint",
                                (spec.run_dir / "checkpoints" / "teacher_final.ckpt").string(), "--dataset",
                                spec.dataset_root.string(), "--split", synth::kTargetEvalSplit, "--out", report.string()},
                               log);
      if (ev != 0) throw ExperimentError("eval exited with status " + std::to_string(ev) + " (see " + log.string() + ")");
      std::ifstream in(report);
      r.report = json::parse(in).get<eval::EvalReport>();
      r.ok = true;
    } catch (const std::exception& e) {
      r.error = e.what();
    }
    return r;
  };
}

std::vector<RunResult> run_all(const std::vector<RunSpec>& specs, const Launcher& launcher, int workers) {
  std::vector<RunResult> results(specs.size());
  std::atomic<std::size_t> next{0};
  const auto worker = [&] {
    for (std::size_t i = next++; i < specs.size(); i = next++) {
      spdlog::info("run {} started", specs[i].key);
      try {
        results[i] = launcher(specs[i]);
      } catch (const std::exception& e) {
        results[i] = RunResult{specs[i].key, false, e.what(), {}};
      }
      if (results[i].ok) {
        spdlog::info("run {} finished: target mAP {:.4f}", specs[i].key, results[i].report.map);
      } else {
        spdlog::error("run {} failed: {}", specs[i].key, results[i].error);
      }
    }
  };
  const int n = std::max(1, std::min<int>(workers, static_cast<int>(specs.size())));
  std::vector<std::thread> pool;
  for (int t = 1; t < n; ++t) pool.emplace_back(worker);
  worker();
  for (auto& t : pool) t.join();
  return results;
}

AblateTable ablate(const AblateOptions& options, const Launcher& launcher) {
  if (options.seeds.empty()) throw ExperimentError("ablate needs at least one seed");
  if (options.variants.size() < 2) throw ExperimentError("ablate needs at least two variants");
  std::vector<RunSpec> specs;
  for (Variant v : options.variants) {
    for (auto seed : options.seeds) {
      RunSpec s;
      s.key = to_string(v) + "_seed" + std::to_string(seed);
      s.config = options.base;
      s.config.variant = v;
      s.config.seed = seed;
      if (v != Variant::mdbank) s.config.gate.reset();
      s.dataset_root = options.dataset_root;
      s.run_dir = options.out_dir / "runs" / s.key;
      specs.push_back(std::move(s));
    }
  }
  AblateTable table;
  table.cells = run_all(specs, launcher, options.workers);
  std::size_t cell = 0;
  for (Variant v : options.variants) {
    AblateRow row;
    row.variant = v;
    std::vector<double> maps;
    for (auto seed : options.seeds) {
      const RunResult& r = table.cells[cell++];
      ++row.runs;
      if (!r.ok) {
        ++row.failures;
        continue;
      }
      maps.push_back(r.report.map);
      row.seed_map[seed] = r.report.map;
      for (const auto& [c, ap] : r.report.per_class_ap) row.per_class_ap[c] += ap;
    }
    if (!maps.empty()) {
      for (double m : maps) row.mean_map += m;
      row.mean_map /= maps.size();
      for (auto& [c, ap] : row.per_class_ap) ap /= maps.size();
    }
    row.spread = sample_std(maps);
    table.rows.push_back(std::move(row));
  }
  return table;
}

void to_json(json& j, const AblateTable& t) {
  j = {{"rows", json::array()}, {"cells", json::array()}};
  for (const auto& r : t.rows) {
    json pc = json::object(), sm = json::object();
    for (const auto& [c, ap] : r.per_class_ap) pc[std::to_string(c)] = ap;
    for (const auto& [s, m] : r.seed_map) sm[std::to_string(s)] = m;
    j["rows"].push_back({{"variant", to_string(r.variant)},
                         {"runs", r.runs},
                         {"failures", r.failures},
                         {"mean_map", r.mean_map},
                         {"spread", r.spread},
                         {"per_class_ap", pc},
                         {"seed_map", sm}});
  }
  for (const auto& c : t.cells) {
    json cell = {{"key", c.key}, {"ok", c.ok}};
    if (c.ok) {
      cell["map"] = c.report.map;
    } else {
      cell["error"] = c.error;
    }
    j["cells"].push_back(cell);
  }
}

std::string render_table(const AblateTable& t) {
  std::set<int> classes;
  for (const auto& r : t.rows) {
    for (const auto& [c, _] : r.per_class_ap) classes.insert(c);
  }
  std::ostringstream out;
  out << "| variant | mAP (mean ± std) |";
  for (int c : classes) out << " AP class " << c << " |";
  out << " runs | failed |\n|---|---|";
  for (std::size_t i = 0; i < classes.size(); ++i) out << "---|";
  out << "---|---|\n";
  const auto pct = [](double v) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.1f", 100.0 * v);
    return std::string(buf);
  };
  for (const auto& r : t.rows) {
    out << "| " << to_string(r.variant) << " | ";
    if (r.runs > r.failures) {
      out << pct(r.mean_map) << " ± " << pct(r.spread);
    } else {
      out << "n/a";
    }
    out << " |";
    for (int c : classes) {
      auto it = r.per_class_ap.find(c);
      out << ' ' << (it == r.per_class_ap.end() ? std::string("n/a") : pct(it->second)) << " |";
    }
    out << ' ' << r.runs << " | " << r.failures << " |\n";
  }
  for (const auto& c : t.cells) {
    if (!c.ok) out << "\nfailed: " << c.key << ": " << c.error;
  }
  if (std::any_of(t.cells.begin(), t.cells.end(), [](const RunResult& c) { return !c.ok; })) out << '\n';
  return out.str();
}

std::string to_string(SweepParam p) { return p == SweepParam::eta ? "eta" : "lambda"; }

SweepParam sweep_param_from_string(const std::string& s) {
  if (s == "eta") return SweepParam::eta;
  if (s == "lambda") return SweepParam::lambda;
  throw ExperimentError("sweep parameter must be eta or lambda, got " + s);
}

SweepResult sweep(const SweepOptions& options, const Launcher& launcher) {
  if (options.values.empty()) throw ExperimentError("sweep needs at least one value");
  std::vector<RunSpec> specs;
  for (double v : options.values) {
    RunSpec s;
    s.key = to_string(options.param) + "_" + shortest(v);
    s.config = options.base;
    (options.param == SweepParam::eta ? s.config.eta : s.config.lambda) = v;
    s.dataset_root = options.dataset_root;
    s.run_dir = options.out_dir / "runs" / s.key;
    specs.push_back(std::move(s));
  }
  const auto results = run_all(specs, launcher, options.workers);
  SweepResult out;
  out.param = options.param;
  out.variant = options.base.variant;
  out.seed = options.base.seed;
  for (std::size_t i = 0; i < results.size(); ++i) {
    SweepPoint p;
    p.value = options.values[i];
    p.ok = results[i].ok;
    p.map = results[i].ok ? results[i].report.map : 0.0;
    p.error = results[i].error;
    out.points.push_back(p);
  }
  return out;
}

void to_json(json& j, const SweepResult& s) {
  j = {{"param", to_string(s.param)}, {"variant", to_string(s.variant)}, {"seed", s.seed}, {"points", json::array()}};
  for (const auto& p : s.points) {
    json pj = {{"value", p.value}, {"ok", p.ok}, {"map", p.map}};
    if (!p.ok) pj["error"] = p.error;
    j["points"].push_back(pj);
  }
}

void from_json(const json& j, SweepResult& s) {
  s.param = sweep_param_from_string(j.at("param").get<std::string>());
  s.variant = variant_from_string(j.at("variant").get<std::string>());
  s.seed = j.at("seed").get<std::uint64_t>();
  s.points.clear();
  for (const auto& pj : j.at("points")) {
    SweepPoint p;
    p.value = pj.at("value").get<double>();
    p.ok = pj.at("ok").get<bool>();
    p.map = pj.at("map").get<double>();
    p.error = pj.value("error", "");
    s.points.push_back(p);
  }
}

}  // namespace mdbank::exp
