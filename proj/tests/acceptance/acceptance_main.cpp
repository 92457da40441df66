// End-to-end acceptance run. Prints one PASS/FAIL line per criterion and
// exits non-zero if any criterion fails.
//
// Environment:
//   APA_ARTIFACTS       directory with the full-scale base.ckpt and adapter.ckpt
//   APA_ACCEPTANCE_OUT  scratch directory for CLI runs and reports

#include <algorithm>
#include <chrono>
#include <cstdlib>
#include <filesystem>
#include <functional>
#include <iostream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "apa/binary_io.hpp"
#include "apa/checks.hpp"
#include "apa/errors.hpp"
#include "apa/runconfig.hpp"
#include "apa/training.hpp"

namespace fs = std::filesystem;
using namespace apa;

namespace {

constexpr double kAlgebraSeconds = 60.0;
constexpr double kGradientSeconds = 300.0;
constexpr double kMetricSeconds = 60.0;
constexpr double kSmokeSeconds = 20.0 * 60.0;
constexpr std::size_t kSmokeClips = 64, kSmokeBaseSteps = 500, kSmokeAdapterSteps = 300;
constexpr std::size_t kFullClips = 2048, kDataSeed = 2024;
constexpr std::size_t kFrechetSamples = 256, kRequests = 32;

std::string cli_path() {
  if (const char* p = std::getenv("APA_CLI")) return p;
  return APA_CLI_PATH;
}

fs::path env_dir(const char* name, const char* fallback) {
  if (const char* p = std::getenv(name)) return p;
  return fallback;
}

struct Outcome {
  bool pass = false;
  std::string detail;
};

class Report {
 public:
  void add(int id, const std::string& title, const Outcome& o) {
    std::cout << (o.pass ? "PASS" : "FAIL") << "  " << id << ". " << title << ": " << o.detail << std::endl;
    all_ &= o.pass;
  }
  bool all() const { return all_; }

 private:
  bool all_ = true;
};

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

std::string quote(const std::string& s) { return "'" + s + "'"; }

// Runs the CLI with stdout and stderr appended to `log`; returns the exit status.
int run_cli(const std::string& args, const fs::path& log) {
  const std::string cmd = quote(cli_path()) + " " + args + " >> " + quote(log.string()) + " 2>&1";
  const int status = std::system(cmd.c_str());
  return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

std::string read_text(const fs::path& p) {
  const auto b = io::read_file(p);
  return {b.begin(), b.end()};
}

std::vector<std::vector<std::string>> read_csv(const fs::path& p) {
  std::vector<std::vector<std::string>> rows;
  std::istringstream in(read_text(p));
  std::string line;
  std::getline(in, line);  // header
  while (std::getline(in, line)) {
    std::vector<std::string> cells;
    std::istringstream ls(line);
    std::string cell;
    while (std::getline(ls, cell, ',')) cells.push_back(cell);
    rows.push_back(std::move(cells));
  }
  return rows;
}

std::string fmt(double v) {
  std::ostringstream os;
  os.precision(4);
  os << v;
  return os.str();
}

Outcome check_group(const std::function<std::vector<checks::CheckResult>()>& fn, double limit) {
  const auto t0 = std::chrono::steady_clock::now();
  const auto rs = fn();
  const double secs = seconds_since(t0);
  Outcome o;
  std::size_t ok = 0;
  std::string failed;
  for (const auto& r : rs) {
    if (r.pass)
      ++ok;
    else
      failed += "; failed " + r.name + " (" + r.detail + ")";
  }
  o.pass = ok == rs.size() && secs < limit;
  o.detail = std::to_string(ok) + "/" + std::to_string(rs.size()) + " checks in " + fmt(secs) + " s (limit " +
             fmt(limit) + " s)" + failed;
  return o;
}

// ---- smoke pipeline (criteria 5 and 10) ----

struct SmokeRun {
  fs::path dir;
  bool ok = true;
  double train_seconds = 0.0;
  std::string error;
};

bool step(SmokeRun& r, const std::string& what, const std::string& args, const fs::path& log) {
  if (!r.ok) return false;
  const int rc = run_cli(args, log);
  if (rc != 0) {
    r.ok = false;
    r.error = what + " exited with " + std::to_string(rc);
  }
  return r.ok;
}

SmokeRun smoke_run(const fs::path& dir, const fs::path& logs, const std::string& name) {
  SmokeRun r;
  r.dir = dir;
  fs::remove_all(dir);
  fs::create_directories(dir);
  const fs::path log = logs / (name + ".log");
  fs::remove(log);
  const std::string d = quote((dir / "data.bin").string());
  const std::string b = quote((dir / "base.ckpt").string());
  const std::string a = quote((dir / "adapter.ckpt").string());

  const auto t0 = std::chrono::steady_clock::now();
  step(r, "gen-data", "gen-data --n " + std::to_string(kSmokeClips) + " --seed " + std::to_string(kDataSeed) +
                          " --out " + d, log);
  step(r, "pretrain", "pretrain --data " + d + " --out " + b + " --steps " + std::to_string(kSmokeBaseSteps), log);
  step(r, "train-adapter", "train-adapter --data " + d + " --base " + b + " --out " + a + " --steps " +
                               std::to_string(kSmokeAdapterSteps), log);
  r.train_seconds = seconds_since(t0);

  step(r, "edit", "edit --base " + b + " --adapter " + a + " --input " + d + " --index 1 --target bright --out " +
                      quote((dir / "edit.grid").string()), log);
  step(r, "edit texture", "edit --base " + b + " --adapter " + a + " --input " + d +
                              " --index 2 --task texture --target pulse --set edit.sampler=ancestral --seed 5 --out " +
                              quote((dir / "edit_texture.grid").string()), log);
  step(r, "sdedit", "sdedit --base " + b + " --input " + d + " --index 1 --target bright --out " +
                        quote((dir / "sdedit.grid").string()), log);
  step(r, "eval", "eval --base " + b + " --adapter " + a + " --data " + d +
                      " --requests 4 --samples 8 --negative-ablation --out-dir " + quote((dir / "eval").string()),
       log);
  step(r, "sweep", "sweep --base " + b + " --adapter " + a +
                       " --axis omega --values 1,8 --requests 32 --threads 2 --set edit.steps=10 --out-dir " +
                       quote((dir / "sweep").string()), log);
  step(r, "selftest", "selftest > " + quote((dir / "selftest.txt").string()), log);
  return r;
}

// Files under `a` and `b` with identical relative names and bytes.
Outcome compare_trees(const fs::path& a, const fs::path& b) {
  std::map<std::string, fs::path> files;
  for (const auto& e : fs::recursive_directory_iterator(a))
    if (e.is_regular_file()) files[fs::relative(e.path(), a).string()] = e.path();
  std::size_t other = 0;
  for (const auto& e : fs::recursive_directory_iterator(b))
    if (e.is_regular_file()) ++other;
  Outcome o;
  std::vector<std::string> diffs;
  for (const auto& [rel, p] : files) {
    const fs::path q = b / rel;
    if (!fs::exists(q) || io::read_file(p) != io::read_file(q)) diffs.push_back(rel);
  }
  o.pass = diffs.empty() && other == files.size() && !files.empty();
  o.detail = std::to_string(files.size()) + " output files compared";
  if (other != files.size()) o.detail += ", file count differs (" + std::to_string(other) + ")";
  for (const auto& d : diffs) o.detail += ", differs: " + d;
  return o;
}

Outcome windows_decrease(const train::Checkpoint& c, const std::string& stage) {
  Outcome o;
  if (c.log.size() < 2) {
    o.detail = stage + " has " + std::to_string(c.log.size()) + " loss windows";
    return o;
  }
  const double first = c.log.front().loss, last = c.log.back().loss;
  o.pass = last < first;
  o.detail = stage + " window loss " + fmt(first) + " -> " + fmt(last);
  return o;
}

Outcome criterion5(const SmokeRun& r1, const SmokeRun& r2) {
  Outcome o;
  if (!r1.ok || !r2.ok) {
    o.detail = "smoke run failed: " + (r1.ok ? r2.error : r1.error);
    return o;
  }
  const auto base = train::load_checkpoint(r1.dir / "base.ckpt");
  const auto adapter = train::load_checkpoint(r1.dir / "adapter.ckpt");
  const Outcome wb = windows_decrease(base, "base");
  const Outcome wa = windows_decrease(adapter, "adapter");

  // Stage 2 again in process, with the base bytes captured before and after.
  const auto before = train::serialize_checkpoint(base);
  cli::RunConfig cfg;
  cfg.set("adapter.steps", std::to_string(kSmokeAdapterSteps));
  auto tc = cfg.train_config(train::Stage::adapter);
  tc.unet = base.base.config;
  const auto data = synth::read_dataset(r1.dir / "data.bin");
  const auto again = train::train_adapter(base, tc, data);
  const bool frozen = train::serialize_checkpoint(base) == before &&
                      adapter.base_hash == train::tensor_hash(base.base);
  const bool in_process_same =
      train::serialize_checkpoint(again) == io::read_file(r1.dir / "adapter.ckpt");

  const bool same_base = io::read_file(r1.dir / "base.ckpt") == io::read_file(r2.dir / "base.ckpt");
  const bool same_adapter = io::read_file(r1.dir / "adapter.ckpt") == io::read_file(r2.dir / "adapter.ckpt");
  const bool fast = r1.train_seconds < kSmokeSeconds;

  o.pass = wb.pass && wa.pass && frozen && in_process_same && same_base && same_adapter && fast;
  o.detail = wb.detail + ", " + wa.detail + "; frozen base " + (frozen ? "byte-identical" : "CHANGED") +
             "; repeat checkpoints " + (same_base && same_adapter ? "bit-identical" : "DIFFER") +
             (in_process_same ? "" : "; in-process stage 2 differs from CLI") + "; training " +
             fmt(r1.train_seconds) + " s (limit " + fmt(kSmokeSeconds) + " s)";
  return o;
}

// ---- full-scale criteria (6 to 9) ----

std::map<std::string, std::vector<std::string>> keyed(const fs::path& csv) {
  std::map<std::string, std::vector<std::string>> out;
  for (auto& row : read_csv(csv))
    if (!row.empty()) out[row[0]] = row;
  return out;
}

std::size_t inversions(const std::vector<double>& v, bool increasing) {
  std::size_t n = 0;
  for (std::size_t i = 1; i < v.size(); ++i)
    if (increasing ? v[i] < v[i - 1] : v[i] > v[i - 1]) ++n;
  return n;
}

struct SweepSeries {
  std::vector<double> transfer, fidelity;
};

SweepSeries read_sweep(const fs::path& csv) {
  SweepSeries s;
  for (const auto& row : read_csv(csv)) {
    s.transfer.push_back(std::stod(row.at(2)));
    s.fidelity.push_back(std::stod(row.at(4)));
  }
  return s;
}

std::string series(const std::vector<double>& v) {
  std::string s = "[";
  for (std::size_t i = 0; i < v.size(); ++i) s += (i ? " " : "") + fmt(v[i]);
  return s + "]";
}

double range(const std::vector<double>& v) {
  const auto [lo, hi] = std::minmax_element(v.begin(), v.end());
  return *hi - *lo;
}

}  // namespace

int main() {
  ::unsetenv(cli::kConfigEnv);
  const fs::path artifacts = env_dir("APA_ARTIFACTS", APA_ARTIFACTS_DIR);
  const fs::path out = env_dir("APA_ACCEPTANCE_OUT", APA_ACCEPTANCE_OUT_DIR);
  const fs::path logs = out / "logs";
  fs::create_directories(logs);
  Report report;

  report.add(1, "scope",
             {true, "published benchmark numbers rely on large pretrained audio models and datasets and are not "
                    "reproduced; criteria 2-10 check the properties that stand in for them"});

  report.add(2, "algebraic identities", check_group(checks::algebra_checks, kAlgebraSeconds));
  report.add(3, "gradient checks", check_group(checks::gradient_checks, kGradientSeconds));
  report.add(4, "metric closed forms", check_group(checks::metric_checks, kMetricSeconds));

  const SmokeRun r1 = smoke_run(out / "smoke1", logs, "smoke1");
  const SmokeRun r2 = smoke_run(out / "smoke2", logs, "smoke2");
  try {
    report.add(5, "training contracts (smoke scale)", criterion5(r1, r2));
  } catch (const std::exception& e) {
    report.add(5, "training contracts (smoke scale)", {false, e.what()});
  }

  const fs::path base = artifacts / "base.ckpt", adapter = artifacts / "adapter.ckpt";
  const bool have_full = fs::exists(base) && fs::exists(adapter);
  const fs::path full = out / "full";
  const fs::path full_log = logs / "full.log";
  Outcome eval_run;
  if (!have_full) {
    eval_run.detail = "missing full-scale checkpoints in " + artifacts.string();
  } else {
    fs::create_directories(full);
    fs::remove(full_log);
    const std::string data = quote((full / "data.bin").string());
    const std::string pair = "--base " + quote(base.string()) + " --adapter " + quote(adapter.string());
    int rc = run_cli("gen-data --n " + std::to_string(kFullClips) + " --seed " + std::to_string(kDataSeed) +
                         " --out " + data, full_log);
    if (rc == 0)
      rc = run_cli("eval " + pair + " --data " + data + " --requests " + std::to_string(kRequests) + " --samples " +
                       std::to_string(kFrechetSamples) + " --negative-ablation --out-dir " + quote(full.string()),
                   full_log);
    for (const char* axis : {"omega", "alpha", "lambda"})
      if (rc == 0)
        rc = run_cli("sweep " + pair + " --axis " + axis + " --requests " + std::to_string(kRequests) +
                         " --out-dir " + quote(full.string()),
                     full_log);
    eval_run.pass = rc == 0;
    if (rc != 0) eval_run.detail = "CLI exited with " + std::to_string(rc) + ", see " + full_log.string();
  }

  auto guarded = [&](int id, const std::string& title, const std::function<Outcome()>& fn) {
    if (!eval_run.pass) return report.add(id, title, {false, eval_run.detail});
    try {
      report.add(id, title, fn());
    } catch (const std::exception& e) {
      report.add(id, title, {false, e.what()});
    }
  };

  guarded(6, "generative sanity", [&] {
    const auto rows = keyed(full / "eval_frechet.csv");
    const double samples = std::stod(rows.at("samples").at(2)), noise = std::stod(rows.at("uniform_noise").at(2));
    return Outcome{samples < noise, "Frechet distance of " + std::to_string(kFrechetSamples) + " samples " +
                                        fmt(samples) + " vs uniform noise " + fmt(noise)};
  });

  guarded(7, "tradeoff trends", [&] {
    const auto w = read_sweep(full / "sweep_omega.csv");
    const auto a = read_sweep(full / "sweep_alpha.csv");
    const auto l = read_sweep(full / "sweep_lambda.csv");
    const std::size_t wf = inversions(w.fidelity, false), wt = inversions(w.transfer, true);
    const std::size_t af = inversions(a.fidelity, true), at = inversions(a.transfer, false);
    const double lr = range(l.transfer), wr = range(w.transfer);
    Outcome o;
    o.pass = wf <= 1 && wt <= 1 && af <= 1 && at <= 1 && lr < wr;
    o.detail = "omega fidelity " + series(w.fidelity) + " (" + std::to_string(wf) + " inv), transfer " +
               series(w.transfer) + " (" + std::to_string(wt) + " inv); alpha fidelity " + series(a.fidelity) + " (" +
               std::to_string(af) + " inv), transfer " + series(a.transfer) + " (" + std::to_string(at) +
               " inv); lambda transfer range " + fmt(lr) + " vs omega " + fmt(wr);
    return o;
  });

  guarded(8, "baseline comparison", [&] {
    const auto rows = keyed(full / "eval_summary.csv");
    const double ours = std::stod(rows.at("adapter").at(4)), sd = std::stod(rows.at("sdedit").at(4));
    return Outcome{ours > sd, "mean chroma similarity adapter " + fmt(ours) + " vs partial noising " + fmt(sd) +
                                  " over " + rows.at("adapter").at(1) + " requests"};
  });

  guarded(9, "negative prompt ablation", [&] {
    const auto rows = keyed(full / "eval_summary.csv");
    const double task = std::stod(rows.at("adapter").at(2));
    const double null = std::stod(rows.at("adapter_null_negative").at(2));
    return Outcome{task >= null, "mean transfer task-specific " + fmt(task) + " vs null " + fmt(null)};
  });

  Outcome det;
  if (!r1.ok || !r2.ok)
    det.detail = "smoke run failed: " + (r1.ok ? r2.error : r1.error);
  else
    det = compare_trees(r1.dir, r2.dir);
  report.add(10, "determinism", det);

  return report.all() ? 0 : 1;
}
