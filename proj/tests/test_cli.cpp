#include "dropedge/cli.hpp"
#include "dropedge/harness.hpp"

#include <doctest.h>

#include <nlohmann/json.hpp>

#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

using namespace dropedge;
namespace fs = std::filesystem;

namespace {

struct Result {
  int code = 0;
  std::string out;
  std::string err;
};

Result run(std::vector<std::string> args) {
  args.insert(args.begin(), "dropedge");
  std::vector<const char*> argv;
  for (const auto& a : args) argv.push_back(a.c_str());
  std::ostringstream out, err;
  const int code = cli_main(static_cast<int>(argv.size()), argv.data(), out, err);
  return {code, out.str(), err.str()};
}

fs::path scratch(const std::string& name) {
  auto dir = fs::temp_directory_path() / ("dropedge_cli_" + name);
  fs::remove_all(dir);
  return dir;
}

int count_lines(const fs::path& p) {
  std::ifstream in(p);
  int n = 0;
  for (std::string line; std::getline(in, line);) ++n;
  return n;
}

nlohmann::json read_json(const fs::path& p) {
  std::ifstream in(p);
  return nlohmann::json::parse(in);
}

}  // namespace

TEST_CASE("usage errors exit with 2") {
  CHECK(run({}).code == 2);
  CHECK(run({"train", "--no-such-flag"}).code == 2);
  CHECK(run({"train", "--backbone", "mlp", "--synthetic", "30"}).code == 2);
  CHECK(run({"train"}).code == 2);
  CHECK(run({"train", "--synthetic", "30", "--nlayers", "1"}).code == 2);
  CHECK(run({"train", "--synthetic", "30", "--sampling-percent", "1.5"}).code == 2);
  const auto r = run({"analyze-spectral", "--synthetic", "30", "--normalization", "AugRWalk"});
  CHECK(r.code == 2);
  CHECK(r.err.find("symmetric") != std::string::npos);
  CHECK(run({"ablate", "--synthetic", "30", "--kind", "other"}).code == 2);
}

TEST_CASE("help exits cleanly") {
  const auto r = run({"--help"});
  CHECK(r.code == 0);
  CHECK(r.out.find("train") != std::string::npos);
}

TEST_CASE("missing data is a runtime error") {
  const auto r = run({"train", "--data-dir", scratch("missing").string()});
  CHECK(r.code == 1);
  CHECK(!r.err.empty());
}

TEST_CASE("train writes one metrics row per epoch") {
  const auto dir = scratch("train");
  const auto ckpt = dir / "best.ckpt";
  const auto r = run({"train", "--synthetic", "60", "--epochs", "7", "--nlayers", "3", "--hidden", "8",
                      "--sampling-percent", "0.7", "--out-dir", dir.string(), "--checkpoint", ckpt.string()});
  REQUIRE(r.code == 0);
  CHECK(count_lines(dir / "metrics.csv") == 8);
  const auto summary = read_json(dir / "summary.json");
  CHECK(summary.at("config").at("epochs") == 7);
  CHECK(summary.at("config").at("model").at("dropedge").at("p").get<double>() == doctest::Approx(0.3));
  CHECK(summary.at("eval_dropedge_free") == true);
  CHECK(fs::exists(ckpt));
  CHECK(nlohmann::json::parse(r.out) == summary);
}

TEST_CASE("flags override a config file") {
  const auto dir = scratch("config");
  fs::create_directories(dir);
  TrainConfig cfg;
  cfg.epochs = 3;
  cfg.model.hidden_dim = 5;
  cfg.lr = 0.02;
  {
    std::ofstream f(dir / "cfg.json");
    f << nlohmann::json(cfg).dump();
  }
  const auto r = run({"train", "--config", (dir / "cfg.json").string(), "--synthetic", "40", "--epochs", "2",
                      "--out-dir", (dir / "out").string()});
  REQUIRE(r.code == 0);
  const auto echo = read_json(dir / "out" / "summary.json").at("config");
  CHECK(echo.at("epochs") == 2);
  CHECK(echo.at("model").at("hidden_dim") == 5);
  CHECK(echo.at("lr").get<double>() == 0.02);
}

TEST_CASE("probe, spectral and theorem subcommands") {
  const auto dir = scratch("probe");
  auto r = run({"probe-oversmoothing", "--synthetic", "50", "--nlayers", "8", "--hidden", "8", "--probe-epochs", "2",
                "--sampling-percent", "0.2", "--out-dir", dir.string()});
  REQUIRE(r.code == 0);
  const auto probe = read_json(dir / "probe.json");
  CHECK(probe.at("before").at("distances").size() == 5);
  CHECK(probe.at("after").at("epochs_trained") == 2);

  CHECK(run({"probe-oversmoothing", "--synthetic", "50", "--nlayers", "4", "--out-dir", dir.string()}).code == 2);

  r = run({"analyze-spectral", "--synthetic", "40", "--out-dir", dir.string()});
  REQUIRE(r.code == 0);
  const auto spectral = read_json(dir / "spectral.json");
  CHECK(spectral.at("eigenvalues").size() == 40);
  CHECK(spectral.at("top_multiplicity") == spectral.at("component_count"));

  r = run({"theorem-check", "--graphs", "10", "--max-nodes", "10", "--out-dir", dir.string()});
  CHECK(r.code == 0);
  CHECK(read_json(dir / "theorem.json").at("all_ok") == true);
}

TEST_CASE("ablate writes a run per variant") {
  const auto dir = scratch("ablate");
  auto r = run({"ablate", "--synthetic", "40", "--epochs", "3", "--hidden", "8", "--dropout", "0.5",
                "--sampling-percent", "0.7", "--out-dir", dir.string()});
  REQUIRE(r.code == 0);
  for (const char* name : {"neither", "dropout", "dropedge", "both"}) {
    CHECK(count_lines(dir / name / "metrics.csv") == 4);
  }
  r = run({"ablate", "--kind", "layerwise", "--synthetic", "40", "--epochs", "3", "--hidden", "8", "--out-dir",
           (dir / "lw").string()});
  REQUIRE(r.code == 0);
  CHECK(read_json(dir / "lw" / "ablation.json").at("runs").contains("layer_wise"));
}
