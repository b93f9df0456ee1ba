#include <doctest.h>

#include "msl/cli/cli.hpp"
#include "msl/core/mgt_io.hpp"
#include "msl/lambda_opt/lambda_opt.hpp"
#include "msl/metrics/metrics.hpp"
#include "msl/model/checkpoint.hpp"
#include "msl/service/inference.hpp"
#include "msl/service/server.hpp"
#include "test_util.hpp"

#include <json.hpp>

#include <algorithm>
#include <fstream>
#include <sstream>

using namespace msl;
using msl::testing::scramble;
using msl::testing::TempDir;
using msl::testing::tiny_config;
using nlohmann::json;
namespace fs = std::filesystem;

namespace {

struct CliResult {
  int code;
  std::string out, err;
};

CliResult msl_cli(std::vector<std::string> args) {
  args.insert(args.begin(), "msl");
  std::vector<const char*> argv;
  for (const auto& a : args) argv.push_back(a.c_str());
  std::ostringstream out, err;
  const int code = cli::run(static_cast<int>(argv.size()), argv.data(), out, err);
  return {code, out.str(), err.str()};
}

std::size_t lines(const std::string& s) { return static_cast<std::size_t>(std::count(s.begin(), s.end(), '\n')); }

// A tiny checkpoint plus a generated 16x16 dataset.
struct Fixture {
  TempDir dir{"cli"};
  fs::path ckpt = dir.path() / "model.mslc";
  fs::path data = dir.path() / "data";
  fs::path case0 = data / "test" / "case_0002";

  Fixture() {
    model::MslModel<float> m(tiny_config());
    scramble(m, 91, 0.3);
    model::save_checkpoint(ckpt, model::make_checkpoint(m));
    const auto r = msl_cli({"gen-data", "--out", data.string(), "--pairs", "2", "--heldout", "2", "--seed", "3",
                            "--size", "16"});
    REQUIRE(r.code == 0);
  }
};

const Fixture& fixture() {
  static Fixture f;
  return f;
}

model::MslModel<float> fixture_model() { return model::model_from_checkpoint(model::load_checkpoint(fixture().ckpt)); }

}  // namespace

TEST_CASE("usage errors exit 2 with one line") {
  for (const auto& args : std::vector<std::vector<std::string>>{
           {}, {"bogus"}, {"infer"}, {"gen-data", "--out", "x", "--pairs", "-1"}, {"sweep", "--grid", "11"},
           {"infer", "--checkpoint", "/nonexistent.mslc", "--case", ".", "--out", "x"},
           {"infer", "--checkpoint", fixture().ckpt.string(), "--case", fixture().case0.string(), "--out", "x",
            "--lambda", "1.5"}}) {
    const auto r = msl_cli(args);
    CHECK(r.code == 2);
    CHECK(lines(r.err) == 1);
  }
  CHECK(msl_cli({"--help"}).code == 0);
}

TEST_CASE("runtime failures exit 1 with one line") {
  TempDir tmp("cli_fail");
  write_file(tmp.path() / "junk.mslc", "not a checkpoint");
  const auto r = msl_cli({"infer", "--checkpoint", (tmp.path() / "junk.mslc").string(), "--case",
                          fixture().case0.string(), "--out", tmp.path().string()});
  CHECK(r.code == 1);
  CHECK(lines(r.err) == 1);
  CHECK(r.err.rfind("msl: error:", 0) == 0);

  // A model trained at another image size cannot read this case.
  model::ModelConfig big = tiny_config();
  big.image_size = 32;
  model::save_checkpoint(tmp.path() / "big.mslc", model::make_checkpoint(model::MslModel<float>(big)));
  CHECK(msl_cli({"infer", "--checkpoint", (tmp.path() / "big.mslc").string(), "--case", fixture().case0.string(),
                 "--out", tmp.path().string()})
            .code == 1);
}

TEST_CASE("gen-data is reproducible") {
  TempDir a("gen_a"), b("gen_b");
  for (const auto* d : {&a, &b}) {
    REQUIRE(msl_cli({"gen-data", "--out", d->path().string(), "--pairs", "3", "--heldout", "1", "--seed", "7",
                     "--size", "16"})
                .code == 0);
  }
  const auto train = training::list_case_dirs(a.path() / "train");
  CHECK(train.size() == 3);
  CHECK(training::list_case_dirs(a.path() / "test").size() == 1);
  for (const auto& entry : fs::recursive_directory_iterator(a.path())) {
    if (!entry.is_regular_file()) continue;
    const auto rel = fs::relative(entry.path(), a.path());
    CHECK(read_file(entry.path()) == read_file(b.path() / rel));
  }
  // Directory contents equal the in-memory synthesis.
  const auto c = training::load_case(train[1]);
  const auto ref = training::synthesize_case(7, 1, 16, {});
  CHECK((c.pair.ct_gt == ref.pair.ct_gt).all());
  CHECK((c.mri_input == ref.mri_input).all());
}

TEST_CASE("infer writes role-named outputs") {
  const auto& f = fixture();
  TempDir out("infer");
  const auto r = msl_cli({"infer", "--checkpoint", f.ckpt.string(), "--case", f.case0.string(), "--out",
                          out.path().string()});
  REQUIRE(r.code == 0);
  const auto m = fixture_model();
  const auto rep = service::case_representation(m, training::load_case(f.case0));
  for (const auto& [stem, l] : {std::pair{"msl_ct", 0.0}, std::pair{"msl_mri", 1.0}}) {
    const auto direct = service::decode_image(m, rep, l);
    CHECK(read_file(out.path() / (std::string(stem) + ".mgt")) == service::image_mgt(direct));
    CHECK(read_file(out.path() / (std::string(stem) + ".png")) == service::encode_png(direct));
  }

  // A constant 0.5 map file at image resolution equals the scalar.
  const Tensor<float> half({16, 16}, 0.5f);
  save_mgt(out.path() / "half.mgt", half);
  REQUIRE(msl_cli({"infer", "--checkpoint", f.ckpt.string(), "--case", f.case0.string(), "--out",
                   out.path().string(), "--lambda", "0.5", "--lambda-map", (out.path() / "half.mgt").string()})
              .code == 0);
  CHECK(read_file(out.path() / "msl_lambda_0.5000.mgt") == read_file(out.path() / "msl_lambda_map.mgt"));
  CHECK(read_file(out.path() / "msl_lambda_0.5000.png") == read_file(out.path() / "msl_lambda_map.png"));

  save_mgt(out.path() / "odd.mgt", Tensor<float>({6, 6}, 0.5f));
  CHECK(msl_cli({"infer", "--checkpoint", f.ckpt.string(), "--case", f.case0.string(), "--out",
                 out.path().string(), "--lambda-map", (out.path() / "odd.mgt").string()})
            .code == 1);
}

TEST_CASE("sweep endpoints equal infer outputs") {
  const auto& f = fixture();
  TempDir out("sweep");
  REQUIRE(msl_cli({"sweep", "--checkpoint", f.ckpt.string(), "--case", f.case0.string(), "--grid", "11", "--out",
                   (out.path() / "sweep").string()})
              .code == 0);
  REQUIRE(msl_cli({"infer", "--checkpoint", f.ckpt.string(), "--case", f.case0.string(), "--out",
                   (out.path() / "infer").string()})
              .code == 0);
  std::size_t images = 0;
  for (const auto& e : fs::directory_iterator(out.path() / "sweep")) images += e.path().extension() == ".mgt";
  CHECK(images == 11);
  for (const char* stem : {"msl_ct.mgt", "msl_mri.mgt", "msl_ct.png"}) {
    CHECK(read_file(out.path() / "sweep" / stem) == read_file(out.path() / "infer" / stem));
  }
  const auto report = metrics::parse_report_csv(read_file(out.path() / "sweep" / "report.csv"));
  REQUIRE(report.rows.size() == 11);
  const auto c = training::load_case(f.case0);
  const auto ct = service::image_from_tensor(load_mgt(out.path() / "infer" / "msl_ct.mgt"));
  CHECK(report.rows.front() == metrics::metric_row(0.0, ct, c.pair.ct_gt, c.pair.mri_gt));
  CHECK(lines(read_file(out.path() / "sweep" / "sums.csv")) == 12);
}

TEST_CASE("optimize-lambda outputs") {
  const auto& f = fixture();
  TempDir out("opt");
  const auto r = msl_cli({"optimize-lambda", "--checkpoint", f.ckpt.string(), "--case", f.case0.string(), "--iters",
                          "5", "--alpha", "0.01", "--out", out.path().string()});
  REQUIRE(r.code == 0);
  const auto map = load_mgt(out.path() / "lambda_map.mgt");
  CHECK(map.shape() == Shape{1, 1, 4, 4});
  CHECK(map.values().minCoeff() >= 0.0f);
  CHECK(map.values().maxCoeff() <= 1.0f);
  CHECK(read_file(out.path() / "lambda_map.png").substr(1, 3) == "PNG");
  const auto trace = read_file(out.path() / "trace.csv");
  CHECK(trace.rfind("iteration,objective,best\n", 0) == 0);

  // The saved map fed back through infer reproduces the optimized image.
  REQUIRE(msl_cli({"infer", "--checkpoint", f.ckpt.string(), "--case", f.case0.string(), "--out",
                   out.path().string(), "--lambda-map", (out.path() / "lambda_map.mgt").string()})
              .code == 0);
  CHECK(read_file(out.path() / "msl_lambda_map.mgt") == read_file(out.path() / "msl_optimized.mgt"));
}

TEST_CASE("eval averages held-out reports") {
  const auto& f = fixture();
  TempDir out("eval");
  const auto r = msl_cli({"eval", "--checkpoint", f.ckpt.string(), "--data", f.data.string(), "--grid", "3", "--out",
                          out.path().string()});
  REQUIRE(r.code == 0);
  const auto report = metrics::parse_report_csv(read_file(out.path() / "report.csv"));
  REQUIRE(report.rows.size() == 3);

  const auto m = fixture_model();
  std::vector<metrics::MetricReport> reports;
  double fbp = 0;
  const auto dirs = training::list_case_dirs(f.data / "test");
  REQUIRE(dirs.size() == 2);
  for (const auto& d : dirs) {
    const auto c = training::load_case(d);
    const auto rep = service::case_representation(m, c);
    std::vector<physics::ImageF> images;
    const std::vector<double> grid{0.0, 0.5, 1.0};
    for (double l : grid) images.push_back(service::decode_image(m, rep, l));
    reports.push_back(metrics::sweep_report(grid, images, c.pair.ct_gt, c.pair.mri_gt));
    fbp += metrics::mae(c.ct_input, c.pair.ct_gt) / 2;
  }
  const auto expect = metrics::average_reports(reports);
  for (std::size_t i = 0; i < 3; ++i) CHECK(report.rows[i].mae_ct == doctest::Approx(expect.rows[i].mae_ct).epsilon(1e-15));
  const auto baselines = read_file(out.path() / "baselines.csv");
  CHECK(baselines.find("fbp_vs_CT,") != std::string::npos);
  const auto pos = baselines.find("fbp_vs_CT,") + 10;
  CHECK(std::stod(baselines.substr(pos)) == doctest::Approx(fbp).epsilon(1e-12));
}

TEST_CASE("export-features rows per case and group") {
  const auto& f = fixture();
  TempDir out("feat");
  const auto csv_path = out.path() / "features.csv";
  REQUIRE(msl_cli({"export-features", "--checkpoint", f.ckpt.string(), "--data", f.data.string(), "--out",
                   csv_path.string()})
              .code == 0);
  std::istringstream in(read_file(csv_path));
  std::string header, line;
  std::getline(in, header);
  const auto dim = tiny_config().token_dim();
  CHECK(std::count(header.begin(), header.end(), ',') == dim + 1);
  std::vector<std::string> rows;
  while (std::getline(in, line)) rows.push_back(line);
  CHECK(rows.size() == 4 * 4);
  CHECK(rows[0].rfind("train/case_0000,intra_CT,", 0) == 0);
  const std::string prefix = "test/case_0002,intra_CT,";
  const auto row = std::find_if(rows.begin(), rows.end(), [&](const std::string& r) { return r.rfind(prefix, 0) == 0; });
  REQUIRE(row != rows.end());

  // Oracle: mean over tokens of the group, computed here from the raw groups.
  const auto m = fixture_model();
  const auto c = training::load_case(f.case0);
  NoGradGuard g;
  const auto groups = m.represent(physics::image_to_tensor(c.ct_input), physics::image_to_tensor(c.mri_input)).groups;
  const auto& t = groups[model::Group::IntraCT];
  double first = 0;
  for (Index k = 0; k < t.dim(1); ++k) first += t.values()[k * t.dim(2)];
  first /= static_cast<double>(t.dim(1));
  const auto cell = row->substr(prefix.size());
  CHECK(std::stod(cell.substr(0, cell.find(','))) == doctest::Approx(first).epsilon(1e-6));
}

TEST_CASE("train and resume through the command line") {
  TempDir tmp("cli_train");
  std::ofstream(tmp.path() / "desk.cfg") << tiny_config().to_text() << "iterations = 4\nbatch_size = 2\n"
                                         << "train_pairs = 2\nheldout_pairs = 1\ncheckpoint_every = 2\n";
  const auto cfg = (tmp.path() / "desk.cfg").string();
  REQUIRE(msl_cli({"train", "--config", cfg, "--out", (tmp.path() / "full").string(), "--log-every", "0"}).code == 0);
  REQUIRE(msl_cli({"train", "--config", cfg, "--out", (tmp.path() / "half").string(), "--iterations", "2",
                   "--log-every", "0"})
              .code == 0);
  REQUIRE(msl_cli({"train", "--resume", (tmp.path() / "half" / "model.mslc").string(), "--out",
                   (tmp.path() / "half").string(), "--iterations", "4", "--log-every", "0"})
              .code == 0);
  const auto full = model::load_checkpoint(tmp.path() / "full" / "model.mslc");
  const auto resumed = model::load_checkpoint(tmp.path() / "half" / "model.mslc");
  for (const auto& p : full.tensors) {
    if (p.name.rfind("meta:", 0) == 0) continue;
    const auto* q = resumed.find(p.name);
    REQUIRE(q != nullptr);
    CHECK((p.tensor.values().array() == q->values().array()).all());
  }
  CHECK(read_file(tmp.path() / "full" / "curve.csv") == read_file(tmp.path() / "half" / "curve.csv"));
  CHECK(msl_cli({"train", "--config", cfg, "--resume", (tmp.path() / "half" / "model.mslc").string(), "--out",
                 tmp.path().string()})
            .code == 2);
}

TEST_CASE("api decode equals cli infer byte for byte") {
  const auto& f = fixture();
  TempDir out("api_cli");
  REQUIRE(msl_cli({"infer", "--checkpoint", f.ckpt.string(), "--case", f.case0.string(), "--out",
                   out.path().string(), "--lambda", "0", "--lambda", "0.3", "--lambda", "1"})
              .code == 0);
  const auto bytes = read_file(f.ckpt);
  service::Service svc(model::model_from_checkpoint(model::decode_checkpoint(bytes)), model::content_hash(bytes));
  const auto created = svc.create_session(json{{"case_dir", f.case0.string()}}.dump());
  REQUIRE(created.status == 200);
  const auto id = json::parse(created.body)["session_id"].get<std::string>();
  for (double l : {0.0, 0.3, 1.0}) {
    const auto png = json::parse(svc.decode(json{{"session_id", id}, {"lambda", l}}.dump(), "").body);
    CHECK(service::base64_decode(png["image"].get<std::string>()) ==
          read_file(out.path() / (service::lambda_stem(l) + ".png")));
    const auto raw = json::parse(svc.decode(json{{"session_id", id}, {"lambda", l}}.dump(), "raw").body);
    CHECK(service::base64_decode(raw["image"].get<std::string>()) ==
          read_file(out.path() / (service::lambda_stem(l) + ".mgt")));
  }
}
