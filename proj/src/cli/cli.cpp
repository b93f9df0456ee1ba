#include "msl/cli/cli.hpp"

#include "msl/core/mgt_io.hpp"
#include "msl/lambda_opt/lambda_opt.hpp"
#include "msl/metrics/metrics.hpp"
#include "msl/model/checkpoint.hpp"
#include "msl/service/inference.hpp"
#include "msl/service/server.hpp"
#include "msl/training/trainer.hpp"

#include <CLI11.hpp>
#include <httplib.h>

#include <cstdio>
#include <cstdlib>
#include <iostream>
#include <optional>

namespace msl::cli {

namespace fs = std::filesystem;
using service::ImageF;

namespace {

struct LoadedModel {
  model::MslModel<float> model;
  std::string hash;
};

LoadedModel load_model(const fs::path& path) {
  const std::string bytes = read_file(path);
  return {model::model_from_checkpoint(model::decode_checkpoint(bytes)), model::content_hash(bytes)};
}

void write_image(const fs::path& dir, const std::string& stem, const ImageF& image) {
  write_file(dir / (stem + ".mgt"), service::image_mgt(image));
  write_file(dir / (stem + ".png"), service::encode_png(image));
}

std::string fmt(const char* pattern, double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, pattern, v);
  return buf;
}

// Cases of a dataset directory: its test/ split when present, else its own case subdirectories.
std::vector<fs::path> dataset_cases(const fs::path& root) {
  auto dirs = training::list_case_dirs(root / "test");
  if (dirs.empty()) dirs = training::list_case_dirs(root);
  if (dirs.empty()) throw std::runtime_error("no cases found under " + root.string());
  return dirs;
}

const training::Case& require_gt(const training::Case& c, const fs::path& dir) {
  if (!c.has_ground_truth()) throw std::runtime_error("case has no ground truth: " + dir.string());
  return c;
}

// --- subcommands ---------------------------------------------------------------

struct GenData {
  fs::path out;
  int pairs = 8;
  int heldout = 2;
  std::uint64_t seed = 0;
  int views = 64;
  double rate = 0.25;
  double center_fraction = 0.08;
  Index size = 64;

  void run(std::ostream& os) const {
    const training::SensorConfig cfg{views, rate, center_fraction};
    auto write_split = [&](const char* split, Index first, Index count) {
      for (Index i = 0; i < count; ++i) {
        const auto c = training::synthesize_case(seed, first + i, size, cfg);
        char name[32];
        std::snprintf(name, sizeof name, "case_%04lld", static_cast<long long>(first + i));
        training::save_case(out / split / name, c);
      }
    };
    write_split("train", 0, pairs);
    write_split("test", pairs, heldout);
    os << "wrote " << pairs << " training and " << heldout << " held-out cases to " << out.string() << "\n";
  }
};

struct Train {
  fs::path config;
  fs::path out;
  fs::path resume;
  fs::path data;
  std::optional<std::int64_t> iterations;
  int log_every = 50;

  void run(std::ostream& os) const {
    std::optional<training::Trainer> trainer;
    if (!resume.empty()) {
      auto ckpt = model::load_checkpoint(resume);
      auto tc = training::TrainConfig::from_text(ckpt.metadata.at("train_config"));
      if (iterations) tc.iterations = *iterations;
      if (!data.empty()) tc.data_dir = data;
      tc.validate();
      ckpt.metadata["train_config"] = tc.to_text();
      trainer.emplace(ckpt, training::training_cases(tc));
    } else {
      auto tc = config.empty() ? training::TrainConfig{} : training::TrainConfig::load(config);
      if (iterations) tc.iterations = *iterations;
      if (!data.empty()) tc.data_dir = data;
      tc.validate();
      trainer.emplace(tc, training::training_cases(tc));
    }
    const auto result = training::train(*trainer, out, [&](const training::LossRecord& r) {
      if (log_every > 0 && (r.iteration % log_every == 0 || r.iteration + 1 == trainer->config().iterations)) {
        os << "iter " << r.iteration << " total " << fmt("%.6f", r.total) << " rec " << fmt("%.6f", r.rec) << "\n"
           << std::flush;
      }
    });
    os << "checkpoint " << result.final_checkpoint.string() << "\n";
  }
};

struct Infer {
  fs::path checkpoint;
  fs::path case_dir;
  std::vector<double> lambdas;
  fs::path lambda_map;
  std::string modalities = "ct,mri";
  fs::path out;

  void run(std::ostream& os) const {
    const auto m = load_model(checkpoint);
    const auto c = training::load_case(case_dir);
    const auto rep = service::case_representation(m.model, c, service::parse_modalities(modalities));
    fs::create_directories(out);
    std::vector<double> ls = lambdas;
    if (ls.empty() && lambda_map.empty()) ls = {0.0, 1.0};
    for (double l : ls) {
      const auto stem = service::lambda_stem(l);
      write_image(out, stem, service::decode_image(m.model, rep, l));
      os << (out / (stem + ".mgt")).string() << "\n";
    }
    if (!lambda_map.empty()) {
      const ImageF map = service::image_from_tensor(load_mgt(lambda_map));
      const auto t = service::lambda_map_tensor(map, m.model.config().feature_size());
      write_image(out, "msl_lambda_map", service::decode_image(m.model, rep, t));
      os << (out / "msl_lambda_map.mgt").string() << "\n";
    }
  }
};

struct Sweep {
  fs::path checkpoint;
  fs::path case_dir;
  int grid = 11;
  std::string modalities = "ct,mri";
  fs::path out;

  void run(std::ostream& os) const {
    const auto m = load_model(checkpoint);
    const auto c = training::load_case(case_dir);
    require_gt(c, case_dir);
    const auto rep = service::case_representation(m.model, c, service::parse_modalities(modalities));
    fs::create_directories(out);
    const auto lambdas = metrics::lambda_grid(grid);
    std::vector<ImageF> images;
    for (double l : lambdas) {
      images.push_back(service::decode_image(m.model, rep, l));
      write_image(out, service::lambda_stem(l), images.back());
    }
    const auto report = metrics::sweep_report(lambdas, images, c.pair.ct_gt, c.pair.mri_gt);
    write_file(out / "report.csv", metrics::report_csv(report));
    write_file(out / "sums.csv", metrics::sums_csv(report));
    os << (out / "report.csv").string() << "\n";
  }
};

struct OptimizeLambda {
  fs::path checkpoint;
  fs::path case_dir;
  lambda_opt::LambdaOptConfig cfg;
  std::string modalities = "ct,mri";
  fs::path out;

  void run(std::ostream& os) const {
    const auto m = load_model(checkpoint);
    const auto c = training::load_case(case_dir);
    const auto rep = service::case_representation(m.model, c, service::parse_modalities(modalities));
    const auto result = lambda_opt::optimize_lambda_map(m.model, rep, cfg);
    fs::create_directories(out);
    save_mgt(out / "lambda_map.mgt", result.map);
    write_file(out / "lambda_map.png",
               service::encode_png_gray(lambda_opt::map_to_gray(result.map), result.map.dim(2), result.map.dim(3)));
    write_image(out, "msl_optimized", service::decode_image(m.model, rep, result.map));
    std::string trace = "iteration,objective,best\n";
    for (std::size_t i = 0; i < result.trace.size(); ++i) {
      trace += std::to_string(i) + "," + fmt("%.17g", result.trace[i]) + "," + fmt("%.17g", result.best_trace[i]) + "\n";
    }
    write_file(out / "trace.csv", trace);
    os << "objective " << fmt("%.6f", result.initial_objective) << " -> " << fmt("%.6f", result.objective) << " in "
       << result.iterations << " iterations\n";
  }
};

struct Eval {
  fs::path checkpoint;
  fs::path data;
  int grid = 11;
  fs::path out;

  void run(std::ostream& os) const {
    const auto m = load_model(checkpoint);
    const auto lambdas = metrics::lambda_grid(grid);
    std::vector<metrics::MetricReport> reports;
    double fbp = 0, zero_filled = 0;
    const auto dirs = dataset_cases(data);
    for (const auto& dir : dirs) {
      const auto c = training::load_case(dir);
      require_gt(c, dir);
      if (!c.has_ct() || !c.has_mri()) throw std::runtime_error("eval needs both modalities: " + dir.string());
      const auto rep = service::case_representation(m.model, c);
      std::vector<ImageF> images;
      for (double l : lambdas) images.push_back(service::decode_image(m.model, rep, l));
      reports.push_back(metrics::sweep_report(lambdas, images, c.pair.ct_gt, c.pair.mri_gt));
      fbp += metrics::mae(c.ct_input, c.pair.ct_gt);
      zero_filled += metrics::mae(c.mri_input, c.pair.mri_gt);
    }
    const auto report = metrics::average_reports(reports);
    const double n = static_cast<double>(dirs.size());
    fs::create_directories(out);
    write_file(out / "report.csv", metrics::report_csv(report));
    write_file(out / "sums.csv", metrics::sums_csv(report));
    write_file(out / "baselines.csv", "baseline,MAE\nfbp_vs_CT," + fmt("%.17g", fbp / n) + "\nzero_filled_vs_MRI," +
                                          fmt("%.17g", zero_filled / n) + "\n");
    os << "cases " << dirs.size() << "\n"
       << "MSL-CT MAE " << fmt("%.6f", report.rows.front().mae_ct) << " (FBP " << fmt("%.6f", fbp / n) << ")\n"
       << "MSL-MRI MAE " << fmt("%.6f", report.rows.back().mae_mri) << " (zero-filled " << fmt("%.6f", zero_filled / n)
       << ")\n";
  }
};

struct ExportFeatures {
  fs::path checkpoint;
  fs::path data;
  fs::path out;

  void run(std::ostream& os) const {
    const auto m = load_model(checkpoint);
    auto dirs = training::list_case_dirs(data);
    for (const char* split : {"train", "test"}) {
      for (auto& d : training::list_case_dirs(data / split)) dirs.push_back(d);
    }
    if (dirs.empty()) throw std::runtime_error("no cases found under " + data.string());
    const Index dim = m.model.config().token_dim();
    std::string csv = "case,group";
    for (Index k = 0; k < dim; ++k) csv += ",f" + std::to_string(k);
    csv += "\n";
    NoGradGuard guard;
    for (const auto& dir : dirs) {
      const auto c = training::load_case(dir);
      const auto r = m.model.represent(c.has_ct() ? physics::image_to_tensor(c.ct_input) : Tensor<float>(),
                                       c.has_mri() ? physics::image_to_tensor(c.mri_input) : Tensor<float>());
      for (int g = 0; g < model::kGroupCount; ++g) {
        const auto group = static_cast<model::Group>(g);
        if (!r.groups.has(group)) continue;
        const Tensor<float> mean_token = mean(r.groups[group], {1}, false);  // [1, D]
        csv += fs::relative(dir, data).generic_string() + "," + model::group_name(group);
        for (Index k = 0; k < dim; ++k) csv += "," + fmt("%.9g", mean_token.values()[k]);
        csv += "\n";
      }
    }
    if (out.has_parent_path()) fs::create_directories(out.parent_path());
    write_file(out, csv);
    os << out.string() << "\n";
  }
};

struct Serve {
  fs::path checkpoint;
  std::string host = "127.0.0.1";
  int port = 8080;
  fs::path data_dir;
  double session_timeout = 900;

  void run(std::ostream& os) const {
    auto m = load_model(checkpoint);
    service::ServiceConfig cfg;
    cfg.data_dir = data_dir;
    cfg.idle_timeout = std::chrono::milliseconds(static_cast<std::int64_t>(session_timeout * 1000));
    service::Service svc(std::move(m.model), m.hash, cfg);
    httplib::Server server;
    service::install_routes(server, svc);
    if (!server.bind_to_port(host, port)) throw std::runtime_error("cannot bind " + host + ":" + std::to_string(port));
    os << "serving " << checkpoint.string() << " on http://" << host << ":" << port << "\n" << std::flush;
    server.listen_after_bind();
  }
};

int default_port() {
  const char* env = std::getenv("MSL_PORT");
  if (!env || !*env) return 8080;
  char* end = nullptr;
  const long v = std::strtol(env, &end, 10);
  if (*end != '\0' || v <= 0 || v > 65535) throw CLI::ValidationError("MSL_PORT", "not a valid port: " + std::string(env));
  return static_cast<int>(v);
}

std::string one_line(std::string s) {
  for (char& ch : s) {
    if (ch == '\n' || ch == '\r') ch = ' ';
  }
  while (!s.empty() && s.back() == ' ') s.pop_back();
  return s;
}

}  // namespace

int run(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
  CLI::App app{"Multi-sensor learning for CT/MRI reconstruction and hybrid imaging", "msl"};
  app.require_subcommand(1);

  GenData gen;
  auto* gen_cmd = app.add_subcommand("gen-data", "Synthesize phantom pairs and their sensory data");
  gen_cmd->add_option("--out", gen.out, "Output directory (train/ and test/ splits)")->required();
  gen_cmd->add_option("--pairs", gen.pairs, "Training pairs")->check(CLI::NonNegativeNumber);
  gen_cmd->add_option("--heldout", gen.heldout, "Held-out pairs")->check(CLI::NonNegativeNumber);
  gen_cmd->add_option("--seed", gen.seed, "Dataset seed");
  gen_cmd->add_option("--views", gen.views, "CT projection views")->check(CLI::PositiveNumber);
  gen_cmd->add_option("--rate", gen.rate, "MRI sampling rate")->check(CLI::Range(0.0, 1.0));
  gen_cmd->add_option("--center-fraction", gen.center_fraction, "Fully sampled central band")->check(CLI::Range(0.0, 1.0));
  gen_cmd->add_option("--size", gen.size, "Image size")->check(CLI::Range(8, 4096));

  Train train;
  std::int64_t train_iterations = 0;
  auto* train_cmd = app.add_subcommand("train", "Train a model; writes checkpoints and curve.csv");
  train_cmd->add_option("--config", train.config, "key = value training config")->check(CLI::ExistingFile);
  train_cmd->add_option("--out", train.out, "Output directory")->required();
  train_cmd->add_option("--resume", train.resume, "Checkpoint to resume from")->check(CLI::ExistingFile);
  auto* iter_opt = train_cmd->add_option("--iterations", train_iterations, "Override total iterations")->check(CLI::NonNegativeNumber);
  train_cmd->add_option("--data", train.data, "Dataset directory written by gen-data")->check(CLI::ExistingDirectory);
  train_cmd->add_option("--log-every", train.log_every, "Progress line period (0 = quiet)");
  train_cmd->get_option("--resume")->excludes("--config");

  Infer infer;
  auto* infer_cmd = app.add_subcommand("infer", "Decode a case at global lambdas and/or a lambda map");
  infer_cmd->add_option("--checkpoint", infer.checkpoint)->required()->check(CLI::ExistingFile);
  infer_cmd->add_option("--case", infer.case_dir)->required()->check(CLI::ExistingDirectory);
  infer_cmd->add_option("--lambda", infer.lambdas, "Global lambda (repeatable)")->check(CLI::Range(0.0, 1.0));
  infer_cmd->add_option("--lambda-map", infer.lambda_map, ".mgt lambda map")->check(CLI::ExistingFile);
  infer_cmd->add_option("--modalities", infer.modalities, "ct, mri or ct,mri");
  infer_cmd->add_option("--out", infer.out)->required();

  Sweep sweep;
  auto* sweep_cmd = app.add_subcommand("sweep", "Decode over a lambda grid and report metrics");
  sweep_cmd->add_option("--checkpoint", sweep.checkpoint)->required()->check(CLI::ExistingFile);
  sweep_cmd->add_option("--case", sweep.case_dir)->required()->check(CLI::ExistingDirectory);
  sweep_cmd->add_option("--grid", sweep.grid, "Grid points in [0, 1]")->check(CLI::Range(2, 1001));
  sweep_cmd->add_option("--modalities", sweep.modalities, "ct, mri or ct,mri");
  sweep_cmd->add_option("--out", sweep.out)->required();

  OptimizeLambda opt;
  auto* opt_cmd = app.add_subcommand("optimize-lambda", "Optimize a spatial lambda map for a case");
  opt_cmd->add_option("--checkpoint", opt.checkpoint)->required()->check(CLI::ExistingFile);
  opt_cmd->add_option("--case", opt.case_dir)->required()->check(CLI::ExistingDirectory);
  opt_cmd->add_option("--alpha", opt.cfg.alpha, "TV weight")->check(CLI::NonNegativeNumber);
  opt_cmd->add_option("--iters", opt.cfg.iterations, "Ascent iterations")->check(CLI::NonNegativeNumber);
  opt_cmd->add_option("--step", opt.cfg.step, "Ascent step")->check(CLI::PositiveNumber);
  opt_cmd->add_option("--modalities", opt.modalities, "ct, mri or ct,mri");
  opt_cmd->add_option("--out", opt.out)->required();

  Eval eval;
  auto* eval_cmd = app.add_subcommand("eval", "Average lambda-sweep metrics over a held-out set");
  eval_cmd->add_option("--checkpoint", eval.checkpoint)->required()->check(CLI::ExistingFile);
  eval_cmd->add_option("--data", eval.data, "Dataset directory (its test/ split if present)")->required()->check(CLI::ExistingDirectory);
  eval_cmd->add_option("--grid", eval.grid)->check(CLI::Range(2, 1001));
  eval_cmd->add_option("--out", eval.out)->required();

  ExportFeatures feats;
  auto* feat_cmd = app.add_subcommand("export-features", "Per-case mean token-group features as CSV");
  feat_cmd->add_option("--checkpoint", feats.checkpoint)->required()->check(CLI::ExistingFile);
  feat_cmd->add_option("--data", feats.data)->required()->check(CLI::ExistingDirectory);
  feat_cmd->add_option("--out", feats.out, "CSV path")->required();

  Serve serve;
  auto* serve_cmd = app.add_subcommand("serve", "HTTP inference service");
  serve_cmd->add_option("--checkpoint", serve.checkpoint)->required()->check(CLI::ExistingFile);
  serve_cmd->add_option("--host", serve.host);
  auto* port_opt = serve_cmd->add_option("--port", serve.port, "Port (default $MSL_PORT or 8080)")->check(CLI::Range(1, 65535));
  serve_cmd->add_option("--data-dir", serve.data_dir, "Root for case_id lookups")->check(CLI::ExistingDirectory);
  serve_cmd->add_option("--session-timeout", serve.session_timeout, "Idle session timeout in seconds")->check(CLI::PositiveNumber);

  try {
    app.parse(argc, argv);
    if (!port_opt->count()) serve.port = default_port();
  } catch (const CLI::ParseError& e) {
    if (e.get_exit_code() == 0) return app.exit(e, out, err);
    err << "msl: " << one_line(e.what()) << "\n";
    return 2;
  }
  if (iter_opt->count()) train.iterations = train_iterations;

  try {
    if (gen_cmd->parsed()) gen.run(out);
    else if (train_cmd->parsed()) train.run(out);
    else if (infer_cmd->parsed()) infer.run(out);
    else if (sweep_cmd->parsed()) sweep.run(out);
    else if (opt_cmd->parsed()) opt.run(out);
    else if (eval_cmd->parsed()) eval.run(out);
    else if (feat_cmd->parsed()) feats.run(out);
    else if (serve_cmd->parsed()) serve.run(out);
  } catch (const std::exception& e) {
    err << "msl: error: " << one_line(e.what()) << "\n";
    return 1;
  }
  return 0;
}

}  // namespace msl::cli
