// fluid: command-line front end for data generation, training, evaluation,
// verification suites and the efficiency benchmark.
//
// Exit codes: 0 ok, 1 verification failure or runtime error, 2 usage error.

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>

#include <CLI11.hpp>
#include <json.hpp>

#include "fluid/fluid.hpp"

namespace {

using nlohmann::json;

json read_json(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw std::runtime_error("cannot read config " + path);
  return json::parse(is);
}

/// Explicit flag > FLUID_SEED > config value.
std::uint64_t resolve_seed(std::optional<std::uint64_t> flag, std::uint64_t from_config) {
  if (flag) return *flag;
  if (const char* env = std::getenv("FLUID_SEED")) {
    try {
      return std::stoull(env);
    } catch (const std::exception&) {
      throw CLI::ValidationError("FLUID_SEED", std::string("not an unsigned integer: ") + env);
    }
  }
  return from_config;
}

std::vector<std::vector<double>> read_pixel_rows(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw std::runtime_error("cannot read " + path);
  std::vector<std::vector<double>> rows;
  std::string line;
  while (std::getline(is, line)) {
    if (line.empty()) continue;
    std::vector<double> row;
    std::stringstream ss(line);
    std::string cell;
    while (std::getline(ss, cell, ',')) row.push_back(std::stod(cell));
    rows.push_back(std::move(row));
  }
  return rows;
}

void emit(const std::string& out, const std::function<void(std::ostream&)>& write) {
  if (out.empty() || out == "-") {
    write(std::cout);
    return;
  }
  std::ofstream os(out);
  if (!os) throw std::runtime_error("cannot write " + out);
  write(os);
}

fluid::SpiralExperiment load_experiment(const std::string& path) {
  return path.empty() ? fluid::SpiralExperiment::desk_scale() : fluid::spiral_experiment_from_json(read_json(path));
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"FLUID liquid-attention toolkit"};
  app.require_subcommand(1);

  // generate
  auto* gen = app.add_subcommand("generate", "Write a synthetic dataset as CSV");
  gen->require_subcommand(1);
  auto* gen_spiral = gen->add_subcommand("spiral", "Irregularly sampled noisy spirals");
  std::size_t gen_n = 300, gen_points = 150, gen_sub = 50;
  double gen_noise = 0.02;
  std::optional<std::uint64_t> gen_seed;
  std::string gen_out, gen_config;
  gen_spiral->add_option("--n", gen_n, "number of spirals")->check(CLI::PositiveNumber);
  gen_spiral->add_option("--points", gen_points, "uniform samples per spiral")->check(CLI::PositiveNumber);
  gen_spiral->add_option("--subsample", gen_sub, "points kept per spiral")->check(CLI::PositiveNumber);
  gen_spiral->add_option("--noise", gen_noise, "noise standard deviation")->check(CLI::NonNegativeNumber);
  gen_spiral->add_option("--seed", gen_seed, "random seed");
  gen_spiral->add_option("--config", gen_config, "JSON spiral spec (flags override it)")->check(CLI::ExistingFile);
  gen_spiral->add_option("--out,-o", gen_out, "output CSV (stdout if omitted)");

  auto* gen_events = gen->add_subcommand("events", "Run-length event encoding of pixel rows");
  std::string ev_in, ev_out;
  double ev_threshold = 128.0;
  std::size_t ev_pad = 0;
  gen_events->add_option("--input", ev_in, "CSV, one row of pixel values per line")->required()->check(CLI::ExistingFile);
  gen_events->add_option("--threshold", ev_threshold, "binarization threshold");
  gen_events->add_option("--pad-to", ev_pad, "padded length (default: longest encoding)");
  gen_events->add_option("--out,-o", ev_out, "output CSV (stdout if omitted)");

  // train
  auto* tr = app.add_subcommand("train", "Train on the spiral task");
  std::string tr_config, tr_out = "fluid_run";
  std::optional<std::uint64_t> tr_seed;
  std::optional<std::size_t> tr_epochs;
  std::string tr_gate = "learned";
  std::size_t tr_folds = 1;
  tr->add_option("--config", tr_config, "experiment JSON")->check(CLI::ExistingFile);
  tr->add_option("--out-dir", tr_out, "directory for history.csv and the checkpoint");
  tr->add_option("--seed", tr_seed, "seed for initialization and shuffling");
  tr->add_option("--epochs", tr_epochs, "override the configured epoch count");
  tr->add_option("--gate-mode", tr_gate, "learned | sdpa_limit")->check(CLI::IsMember({"learned", "sdpa_limit"}));
  tr->add_option("--folds", tr_folds, "cross-validation folds (rotates the spiral roles)")->check(CLI::PositiveNumber);

  // eval
  auto* ev = app.add_subcommand("eval", "Evaluate a checkpoint on the held-out spirals");
  std::string ev_config, ev_ckpt;
  ev->add_option("--config", ev_config, "experiment JSON")->check(CLI::ExistingFile);
  ev->add_option("--checkpoint", ev_ckpt, "checkpoint path without extension")->required();

  // verify
  auto* ver = app.add_subcommand("verify", "Run the dynamical property suites");
  std::string ver_suite = "all";
  std::optional<std::uint64_t> ver_seed;
  ver->add_option("--suite", ver_suite, "invariance | stability | limits | all")
      ->check(CLI::IsMember({"invariance", "stability", "limits", "all"}));
  ver->add_option("--seed", ver_seed, "battery seed");

  // bench
  auto* be = app.add_subcommand("bench", "Forward-pass timing and peak memory");
  std::string be_config;
  fluid::BenchDims dims;
  std::size_t be_reps = 5, be_warmup = 1, be_steps = 5;
  std::optional<std::size_t> be_topk;
  std::string be_label;
  bool be_json = false;
  be->add_option("--config", be_config, "bench JSON (label, top_k, euler_steps, dims)")->check(CLI::ExistingFile);
  be->add_option("--d-model", dims.d_model)->check(CLI::PositiveNumber);
  be->add_option("--heads", dims.heads)->check(CLI::PositiveNumber);
  be->add_option("--batch", dims.batch)->check(CLI::PositiveNumber);
  be->add_option("--seq-len", dims.seq_len)->check(CLI::PositiveNumber);
  be->add_option("--reps", be_reps)->check(CLI::Range(3, 1000000));
  be->add_option("--warmup", be_warmup);
  be->add_option("--euler-steps", be_steps)->check(CLI::PositiveNumber);
  be->add_option("--top-k", be_topk, "Top-K pairs per query (full pairwise if omitted)");
  be->add_option("--label", be_label);
  be->add_flag("--json", be_json, "print the JSON report instead of CSV");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    std::cerr << app.help();
    return 2;
  }

  try {
    if (gen_spiral->parsed()) {
      fluid::SpiralSpec spec;
      if (!gen_config.empty()) spec = fluid::spiral_spec_from_json(read_json(gen_config));
      if (gen_spiral->count("--n")) spec.n_spirals = gen_n;
      if (gen_spiral->count("--points")) spec.n_points = gen_points;
      if (gen_spiral->count("--subsample")) spec.n_subsample = gen_sub;
      if (gen_spiral->count("--noise")) spec.noise_std = gen_noise;
      spec.seed = resolve_seed(gen_seed, spec.seed);
      const auto data = fluid::generate_spirals(spec);
      emit(gen_out, [&](std::ostream& os) { fluid::write_dataset_csv(os, data); });
      return 0;
    }

    if (gen_events->parsed()) {
      const auto rows = read_pixel_rows(ev_in);
      std::size_t pad = ev_pad;
      if (pad == 0)
        for (const auto& r : rows) pad = std::max(pad, fluid::event_encode(r, ev_threshold, r.size() + 1).valid_length());
      std::vector<fluid::EventSequence> data;
      for (const auto& r : rows) data.push_back(fluid::event_encode(r, ev_threshold, pad));
      emit(ev_out, [&](std::ostream& os) { fluid::write_dataset_csv(os, data); });
      return 0;
    }

    if (tr->parsed()) {
      auto ex = load_experiment(tr_config);
      if (tr_epochs) ex.train.epochs = *tr_epochs;
      const std::uint64_t seed = resolve_seed(tr_seed, ex.train.seed);
      const auto mode = fluid::parse_gate_mode(tr_gate);
      std::filesystem::create_directories(tr_out);
      json summary = json::array();
      for (std::size_t fold = 0; fold < tr_folds; ++fold) {
        ex.rotate = fold * (ex.data.n_spirals / tr_folds);
        const auto run = fluid::run_spiral(ex, seed, mode);
        const std::string tag = tr_folds == 1 ? "" : "_fold" + std::to_string(fold);
        std::ofstream hist(std::filesystem::path(tr_out) / ("history" + tag + ".csv"));
        fluid::write_history_csv(hist, run.result.history);
        fluid::save_checkpoint(run.model, std::filesystem::path(tr_out) / ("model" + tag));
        summary.push_back({{"fold", fold},
                           {"seed", seed},
                           {"gate_mode", tr_gate},
                           {"best_epoch", run.result.best_epoch},
                           {"val_mae", run.val_mae},
                           {"test_mae", run.test_mae}});
      }
      std::cout << (tr_folds == 1 ? summary[0] : summary).dump(2) << '\n';
      return 0;
    }

    if (ev->parsed()) {
      const auto ex = load_experiment(ev_config);
      const auto model = fluid::load_checkpoint(ev_ckpt);
      const auto data = fluid::generate_spirals(ex.data);
      std::vector<std::size_t> test;
      for (std::size_t i = ex.data.n_spirals - ex.n_test; i < ex.data.n_spirals; ++i) test.push_back(i);
      const double mae = fluid::spiral_mae(model, data, test, ex.data, ex.value_scale);
      std::cout << json{{"checkpoint", ev_ckpt}, {"test_spirals", test.size()}, {"test_mae", mae}}.dump(2) << '\n';
      return 0;
    }

    if (ver->parsed()) {
      const auto reports = fluid::run_verify_suite(ver_suite, resolve_seed(ver_seed, 0));
      json out = json::array();
      bool ok = true;
      for (const auto& r : reports) {
        out.push_back(r.to_json());
        ok = ok && r.pass;
      }
      std::cout << out.dump(2) << '\n';
      return ok ? 0 : 1;
    }

    if (be->parsed()) {
      fluid::FluidConfig mc;
      std::string label = "full";
      std::optional<std::size_t> topk;
      std::size_t steps = 5;
      std::uint64_t seed = 0;
      if (!be_config.empty()) {
        const auto j = read_json(be_config);
        label = j.value("label", label);
        if (j.contains("top_k") && !j["top_k"].is_null()) topk = j["top_k"].get<std::size_t>();
        steps = j.value("euler_steps", steps);
        seed = j.value("seed", seed);
        if (j.contains("dims")) {
          const auto& d = j["dims"];
          if (!be->count("--d-model")) dims.d_model = d.value("d_model", dims.d_model);
          if (!be->count("--heads")) dims.heads = d.value("heads", dims.heads);
          if (!be->count("--batch")) dims.batch = d.value("batch", dims.batch);
          if (!be->count("--seq-len")) dims.seq_len = d.value("seq_len", dims.seq_len);
        }
        if (j.contains("reps") && !be->count("--reps")) be_reps = j["reps"].get<std::size_t>();
      }
      if (be->count("--top-k")) topk = be_topk;
      if (be->count("--euler-steps")) steps = be_steps;
      if (!be_label.empty()) label = be_label;
      mc.lan.top_k = topk;
      mc.lan.euler_steps = steps;
      mc.in_features = 1;
      mc.out_dim = 1;
      mc.ffn_dim = 2 * dims.d_model;
      const auto report =
          fluid::bench(fluid::fluid_encoder_factory(mc, resolve_seed(std::nullopt, seed)), dims, be_reps, be_warmup, label);
      if (be_json) std::cout << report.to_json().dump(2) << '\n';
      else std::cout << fluid::BenchReport::csv_header() << '\n' << report.csv_row() << '\n';
      return 0;
    }
  } catch (const CLI::ValidationError& e) {
    std::cerr << "usage error: " << e.what() << '\n';
    return 2;
  } catch (const fluid::TrainingDiverged& e) {
    std::cerr << "training diverged: " << e.what() << '\n';
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
  return 2;
}
