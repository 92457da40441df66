// Command-line driver: data generation, two-stage training, editing,
// evaluation, tradeoff sweeps and closed-form self checks.

#include <chrono>
#include <cstdio>
#include <filesystem>
#include <iostream>
#include <optional>
#include <sstream>

#include "CLI11.hpp"
#include "apa/binary_io.hpp"
#include "apa/checks.hpp"
#include "apa/errors.hpp"
#include "apa/experiments.hpp"
#include "apa/runconfig.hpp"

namespace fs = std::filesystem;
using namespace apa;
using cli::UsageError;

namespace {

struct Common {
  std::string config;
  std::vector<std::string> sets;
};

void add_common(CLI::App* app, Common& c) {
  app->add_option("--config", c.config, "Run config file (key = value lines); default from $APA_CONFIG");
  app->add_option("--set", c.sets, "Override a config key, key=value (repeatable)");
}

// Flag values become config overrides so the written config reflects them.
template <typename T>
void flag_override(std::vector<std::string>& sets, const std::string& key, const std::optional<T>& v) {
  if (!v) return;
  std::ostringstream os;
  os << *v;
  sets.push_back(key + "=" + os.str());
}

void ensure_parent(const fs::path& p) {
  if (p.has_parent_path()) fs::create_directories(p.parent_path());
}

void log_line(const std::string& s) { std::cerr << s << std::endl; }

struct Input {
  synth::Spectrogram grid;
  std::optional<synth::Timbre> timbre;  // known when read from a dataset
};

Input load_input(const fs::path& path, std::size_t index) {
  try {
    const auto records = synth::read_dataset(path);
    if (index >= records.size())
      throw UsageError("input index " + std::to_string(index) + " out of range (" + std::to_string(records.size()) +
                       " records)");
    return {records[index].grid, records[index].spec.timbre};
  } catch (const FormatError&) {
    const auto grids = synth::read_grids(path);
    if (index >= grids.size())
      throw UsageError("input index " + std::to_string(index) + " out of range (" + std::to_string(grids.size()) +
                       " grids)");
    return {grids[index], std::nullopt};
  }
}

edit::EditRequest build_request(const cli::RunConfig& cfg, const Input& in) {
  synth::Task task;
  int target;
  try {
    task = synth::parse_task(cfg.get("edit.task"));
    if (task == synth::Task::none) throw UsageError("edit.task must be timbre, texture or accomp");
    target = synth::parse_class(task, cfg.get("edit.target"));
  } catch (const ContractError& e) {
    throw UsageError(e.what());
  }
  auto r = edit::make_request(in.grid, task, target, cfg.seed("edit.seed"));
  if (in.timbre) r.source_timbre = *in.timbre;
  cfg.apply_edit_options(r);
  edit::validate(r);
  return r;
}

train::Checkpoint load_stage(const fs::path& p, train::Stage stage) {
  auto c = train::load_checkpoint(p);
  if (c.stage != stage)
    throw ContractError("checkpoint " + p.string() + " holds stage " + std::string(train::to_string(c.stage)) +
                        ", expected " + std::string(train::to_string(stage)));
  return c;
}

train::ProgressFn progress(const char* stage) {
  return [stage, start = std::chrono::steady_clock::now()](const train::LossRecord& r) {
    const double s = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    std::ostringstream os;
    os << stage << " step " << r.step << " loss " << r.loss;
    if (std::isfinite(r.reference)) os << " reference " << r.reference;
    os << " (" << static_cast<long>(s) << " s)";
    log_line(os.str());
  };
}

std::string csv_summary_row(const std::string& method, const exp::Summary& s) {
  std::ostringstream os;
  os.precision(9);
  os << method << ',' << s.n << ',' << s.mean_transfer << ',' << s.std_transfer << ',' << s.mean_fidelity << ','
     << s.std_fidelity << '\n';
  return os.str();
}

int run_selftest() {
  std::size_t passed = 0, total = 0;
  for (const auto& group : {checks::algebra_checks(), checks::gradient_checks(), checks::metric_checks()})
    for (const auto& r : group) {
      ++total;
      passed += r.pass;
      std::cout << (r.pass ? "ok   " : "FAIL ") << r.name << ": " << r.detail << '\n';
    }
  std::cout << "selftest: " << passed << "/" << total << " checks passed\n";
  return passed == total ? 0 : 1;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Audio-prompt adapter for zero-shot spectrogram editing"};
  app.require_subcommand(1);
  Common common;

  std::string out, data, input, out_dir;
  std::string base_path = "base.ckpt", adapter_path = "adapter.ckpt";
  std::optional<std::size_t> n, steps, index, requests, threads, samples;
  std::optional<std::uint64_t> seed;
  std::optional<std::string> task, target, axis, values;
  bool ablation = false;

  auto* gen = app.add_subcommand("gen-data", "Generate a synthetic dataset");
  add_common(gen, common);
  gen->add_option("--out", out, "Dataset file")->required();
  gen->add_option("--n", n, "Number of clips (data.n)");
  gen->add_option("--seed", seed, "First clip seed (data.seed)");

  auto* pre = app.add_subcommand("pretrain", "Train the text-conditioned base model");
  add_common(pre, common);
  pre->add_option("--data", data, "Dataset file")->required();
  pre->add_option("--out", out, "Checkpoint file")->required();
  pre->add_option("--steps", steps, "Optimizer steps (base.steps)");
  pre->add_option("--seed", seed, "Training seed (base.seed)");

  auto* ada = app.add_subcommand("train-adapter", "Train audio adapters on a frozen base");
  add_common(ada, common);
  ada->add_option("--data", data, "Dataset file")->required();
  ada->add_option("--base", base_path, "Base checkpoint")->capture_default_str();
  ada->add_option("--out", out, "Adapter checkpoint file")->required();
  ada->add_option("--steps", steps, "Optimizer steps (adapter.steps)");
  ada->add_option("--seed", seed, "Training seed (adapter.seed)");

  auto* ed = app.add_subcommand("edit", "Edit one clip with the audio adapter");
  auto* sd = app.add_subcommand("sdedit", "Edit one clip by partial noising without audio conditioning");
  for (auto* sub : {ed, sd}) {
    add_common(sub, common);
    sub->add_option("--base", base_path, "Base checkpoint")->capture_default_str();
    sub->add_option("--input", input, "Dataset or grid file holding the input clip")->required();
    sub->add_option("--index", index, "Clip index in the input file (edit.index)");
    sub->add_option("--task", task, "timbre, texture or accomp (edit.task)");
    sub->add_option("--target", target, "Target class name (edit.target)");
    sub->add_option("--seed", seed, "Sampling seed (edit.seed)");
    sub->add_option("--out", out, "Output grid file; metadata goes to <out>.json")->required();
  }
  ed->add_option("--adapter", adapter_path, "Adapter checkpoint")->capture_default_str();

  auto* ev = app.add_subcommand("eval", "Score adapter edits against the partial-noising baseline");
  add_common(ev, common);
  ev->add_option("--base", base_path, "Base checkpoint")->capture_default_str();
  ev->add_option("--adapter", adapter_path, "Adapter checkpoint")->capture_default_str();
  ev->add_option("--out-dir", out_dir, "Output directory")->required();
  ev->add_option("--requests", requests, "Held-out requests (eval.requests)");
  ev->add_option("--data", data, "Training dataset; enables the Frechet check");
  ev->add_option("--samples", samples, "Unconditional samples for the Frechet check (eval.fad_samples)");
  ev->add_flag("--negative-ablation", ablation, "Also run with a null negative prompt");

  auto* sw = app.add_subcommand("sweep", "Fidelity/transfer sweep over one guidance parameter");
  add_common(sw, common);
  sw->add_option("--base", base_path, "Base checkpoint")->capture_default_str();
  sw->add_option("--adapter", adapter_path, "Adapter checkpoint")->capture_default_str();
  sw->add_option("--out-dir", out_dir, "Output directory")->required();
  sw->add_option("--axis", axis, "omega, alpha or lambda (sweep.axis)");
  sw->add_option("--values", values, "Comma-separated ascending values (sweep.values)");
  sw->add_option("--requests", requests, "Held-out requests per point (sweep.requests)");
  sw->add_option("--threads", threads, "Worker threads (sweep.threads)");

  auto* self = app.add_subcommand("selftest", "Closed-form algebra, gradient and metric checks");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e) == 0 ? 0 : 2;
  }

  try {
    if (self->parsed()) return run_selftest();

    auto& sets = common.sets;
    if (gen->parsed()) {
      flag_override(sets, "data.n", n);
      flag_override(sets, "data.seed", seed);
    } else if (pre->parsed()) {
      flag_override(sets, "base.steps", steps);
      flag_override(sets, "base.seed", seed);
    } else if (ada->parsed()) {
      flag_override(sets, "adapter.steps", steps);
      flag_override(sets, "adapter.seed", seed);
    } else if (ed->parsed() || sd->parsed()) {
      flag_override(sets, "edit.index", index);
      flag_override(sets, "edit.task", task);
      flag_override(sets, "edit.target", target);
      flag_override(sets, "edit.seed", seed);
    } else if (ev->parsed()) {
      flag_override(sets, "eval.requests", requests);
      flag_override(sets, "eval.fad_samples", samples);
      if (ablation) sets.push_back("eval.negative_ablation=true");
    } else if (sw->parsed()) {
      flag_override(sets, "sweep.axis", axis);
      flag_override(sets, "sweep.values", values);
      flag_override(sets, "sweep.requests", requests);
      flag_override(sets, "sweep.threads", threads);
    }
    const auto cfg = cli::resolve_config(common.config, sets);

    if (gen->parsed()) {
      const auto records = synth::generate_dataset(cfg.count("data.n"), cfg.seed("data.seed"));
      ensure_parent(out);
      synth::write_dataset(records, out);
      cfg.write(out + ".config");
      log_line("wrote " + std::to_string(records.size()) + " clips to " + out);
      return 0;
    }
    if (pre->parsed() || ada->parsed()) {
      const auto records = synth::read_dataset(data);
      train::Checkpoint ckpt;
      if (pre->parsed()) {
        ckpt = train::pretrain_base(cfg.train_config(train::Stage::base), records, progress("base"));
      } else {
        const auto base = load_stage(base_path, train::Stage::base);
        auto tc = cfg.train_config(train::Stage::adapter);
        tc.unet = base.base.config;
        ckpt = train::train_adapter(base, tc, records, progress("adapter"));
      }
      ensure_parent(out);
      train::save_checkpoint(ckpt, out);
      train::write_loss_csv(ckpt.log, out + ".loss.csv");
      cfg.write(out + ".config");
      log_line("wrote " + out);
      return 0;
    }
    if (ed->parsed() || sd->parsed()) {
      const auto base = load_stage(base_path, train::Stage::base);
      const auto in = load_input(input, cfg.count("edit.index"));
      const auto request = build_request(cfg, in);
      edit::EditResult result;
      if (ed->parsed()) {
        const auto adapter = load_stage(adapter_path, train::Stage::adapter);
        result = edit::edit(request, base, adapter);
      } else {
        result = edit::sdedit_baseline(request, base);
      }
      ensure_parent(out);
      edit::write_result(result, ed->parsed() ? "edit" : "sdedit", out);
      cfg.write(out + ".config");
      std::ostringstream os;
      os.precision(4);
      os << "wrote " << out << " in " << result.wall_seconds << " s; fidelity "
         << metrics::chroma_similarity(in.grid, result.edited).score << ", transfer "
         << metrics::transfer_score(result.edited, request.task, request.target_class);
      log_line(os.str());
      return 0;
    }
    if (ev->parsed() || sw->parsed()) {
      const auto base = load_stage(base_path, train::Stage::base);
      const auto adapter = load_stage(adapter_path, train::Stage::adapter);
      train::check_compatible(base, adapter);
      fs::create_directories(out_dir);
      const fs::path dir(out_dir);
      const std::string prefix = ev->parsed() ? "eval" : "sweep";
      auto reqs = exp::heldout_timbre_requests(cfg.count(prefix + ".requests"), cfg.seed("eval.clip_seed"),
                                               cfg.seed("eval.seed"));
      for (auto& r : reqs) r.steps = cfg.count("edit.steps");

      if (sw->parsed()) {
        const auto ax = exp::parse_axis(cfg.get("sweep.axis"));
        const auto vals = cfg.get("sweep.values") == "auto" ? exp::default_axis_values(ax) : cfg.reals("sweep.values");
        const exp::SweepFixed fixed{cfg.count("sweep.omega"), cfg.real("sweep.alpha"), cfg.real("sweep.lambda")};
        const auto rows =
            exp::sweep_grid(ax, vals, fixed, reqs, base.base, adapter.adapter, cfg.count("sweep.threads"));
        const std::string stem = "sweep_" + std::string(exp::to_string(ax));
        exp::write_sweep_csv(rows, ax, dir / (stem + ".csv"));
        exp::write_plot_data(rows, ax, dir / (stem + ".plot"));
        cfg.write(dir / (stem + ".config"));
        log_line("wrote " + (dir / (stem + ".csv")).string());
        return 0;
      }

      std::string per_request = "method,request,source,target,fidelity,transfer\n";
      std::string summary = "method,n,mean_transfer,std_transfer,mean_fidelity,std_fidelity\n";
      auto record = [&](const std::string& method, const std::vector<edit::EditResult>& results) {
        const auto scores = exp::score_results(results);
        std::ostringstream os;
        os.precision(9);
        for (std::size_t i = 0; i < scores.size(); ++i)
          os << method << ',' << i << ',' << synth::to_string(results[i].request.source_timbre) << ','
             << synth::class_name(results[i].request.task, results[i].request.target_class) << ','
             << scores[i].fidelity << ',' << scores[i].transfer << '\n';
        per_request += os.str();
        const auto s = exp::summarize(scores);
        summary += csv_summary_row(method, s);
        log_line(method + ": transfer " + std::to_string(s.mean_transfer) + ", fidelity " +
                 std::to_string(s.mean_fidelity));
      };
      record("adapter", edit::edit_batch(reqs, base.base, adapter.adapter));
      record("sdedit", edit::sdedit_batch(reqs, base.base));
      if (cfg.flag("eval.negative_ablation")) {
        auto nulls = reqs;
        for (auto& r : nulls) r.negative = synth::null_condition();
        record("adapter_null_negative", edit::edit_batch(nulls, base.base, adapter.adapter));
      }
      io::write_text(dir / "eval_requests.csv", per_request);
      io::write_text(dir / "eval_summary.csv", summary);
      if (!data.empty()) {
        const auto records = synth::read_dataset(data);
        std::vector<synth::Spectrogram> train_grids;
        for (const auto& r : records) train_grids.push_back(r.grid);
        const std::size_t count = cfg.count("eval.fad_samples");
        const auto gen_grids = exp::unconditional_samples(base.base, count, cfg.seed("eval.seed"), cfg.count("edit.steps"));
        const auto noise = exp::uniform_noise_grids(count, cfg.seed("eval.seed"));
        const auto fr = exp::frechet_report(train_grids, gen_grids, noise, base.base.encoder);
        std::ostringstream os;
        os.precision(9);
        os << "source,n,frechet_distance\nsamples," << count << ',' << fr.samples << "\nuniform_noise," << count << ','
           << fr.noise << '\n';
        io::write_text(dir / "eval_frechet.csv", os.str());
      }
      cfg.write(dir / "eval.config");
      log_line("wrote " + (dir / "eval_summary.csv").string());
      return 0;
    }
  } catch (const UsageError& e) {
    std::cerr << "usage error: " << e.what() << '\n';
    return 2;
  } catch (const IoError& e) {
    std::cerr << "io error: " << e.what() << '\n';
    return 1;
  } catch (const FormatError& e) {
    std::cerr << "format error: " << e.what() << '\n';
    return 1;
  } catch (const CorruptionError& e) {
    std::cerr << "corruption error: " << e.what() << '\n';
    return 1;
  } catch (const ContractError& e) {
    std::cerr << "contract error: " << e.what() << '\n';
    return 3;
  } catch (const DimensionError& e) {
    std::cerr << "dimension error: " << e.what() << '\n';
    return 3;
  } catch (const DivergenceError& e) {
    std::cerr << "divergence: " << e.what() << '\n';
    return 4;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
  return 0;
}
