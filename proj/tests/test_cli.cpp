// End-to-end CLI checks: artifacts, resume, determinism, and error JSON.
#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <sys/wait.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <string>
#include <vector>

#include "dkd/attacks.hpp"
#include "dkd/config.hpp"
#include "doctest.h"
#include "json.hpp"

using namespace dkd;
namespace fs = std::filesystem;

namespace {

struct RunResult {
  int rc = -1;
  std::string out, err;
};

fs::path work_root() {
  static const fs::path p = [] {
    const fs::path root = fs::temp_directory_path() / "dkd_cli_test";
    fs::remove_all(root);
    fs::create_directories(root);
    return root;
  }();
  return p;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return std::string((std::istreambuf_iterator<char>(in)),
                     std::istreambuf_iterator<char>());
}

RunResult run_cli(const std::string& args) {
  const fs::path out = work_root() / "stdout.txt";
  const fs::path err = work_root() / "stderr.txt";
  const std::string cmd = std::string(DKD_CLI_PATH) + " " + args + " > " +
                          out.string() + " 2> " + err.string();
  const int raw = std::system(cmd.c_str());
  RunResult r;
  r.rc = WIFEXITED(raw) ? WEXITSTATUS(raw) : -1;
  r.out = slurp(out);
  r.err = slurp(err);
  return r;
}

// The shared fixture config: tiny, separable, fast.
std::string config_path() {
  static const std::string path = [] {
    ExperimentConfig cfg;
    cfg.train.mode = TrainMode::dkd;
    cfg.train.arch = Arch::toy;
    cfg.train.ensemble_size = 3;
    cfg.train.epochs = 6;
    cfg.train.batch_size = 16;
    cfg.train.lr = 5e-3;
    cfg.train.zeta = 0.9;
    cfg.train.dataset = "blobs";
    cfg.train.seed = 11;
    cfg.attack.kind = AttackKind::fgsm;
    cfg.attack.epsilon = 0.1;
    const std::string p = (work_root() / "exp.json").string();
    save_experiment_config(cfg, p);
    return p;
  }();
  return path;
}

std::vector<fs::path> sorted_files(const fs::path& dir, const std::string& ext) {
  std::vector<fs::path> out;
  for (const auto& e : fs::recursive_directory_iterator(dir))
    if (e.is_regular_file() && e.path().extension() == ext) out.push_back(e.path());
  std::sort(out.begin(), out.end());
  return out;
}

}  // namespace

TEST_CASE("train writes the run directory and reports accuracy") {
  const fs::path dir = work_root() / "run1";
  const RunResult r =
      run_cli("train --config " + config_path() + " --out " + dir.string());
  CAPTURE(r.err);
  REQUIRE(r.rc == 0);
  // doctest re-enters this body once per SUBCASE; later entries resume.
  CHECK(r.out.find("member 2: ") != std::string::npos);
  CHECK(r.out.find("clean test accuracy") != std::string::npos);
  for (const char* f : {"config.json", "census.json", "census.csv", "member_0.ckpt",
                        "member_1.ckpt", "member_2.ckpt", "member_0_history.csv"})
    CHECK(fs::exists(dir / f));

  // The manifest records the resolved configuration.
  const ExperimentConfig cfg = load_experiment_config((dir / "config.json").string());
  CHECK(cfg.train.ensemble_size == 3);
  CHECK(cfg.train.zeta == 0.9);
  CHECK(cfg.out_dir == dir.string());

  SUBCASE("a second train resumes from the checkpoints") {
    const std::string before = slurp(dir / "member_2.ckpt");
    const RunResult again =
        run_cli("train --config " + config_path() + " --out " + dir.string());
    REQUIRE(again.rc == 0);
    CHECK(again.out.find("member 0: resumed") != std::string::npos);
    CHECK(again.out.find("member 2: resumed") != std::string::npos);
    CHECK(slurp(dir / "member_2.ckpt") == before);
  }

  SUBCASE("flag overrides beat the config file") {
    const fs::path dir2 = work_root() / "run_override";
    const RunResult o = run_cli("train --config " + config_path() + " --zeta 0.5 --out " +
                                dir2.string());
    REQUIRE(o.rc == 0);
    const ExperimentConfig c2 = load_experiment_config((dir2 / "config.json").string());
    CHECK(c2.train.zeta == 0.5);
  }

  SUBCASE("attack runs all three protocols and persists batches") {
    const RunResult a =
        run_cli("attack --config " + config_path() + " --out " + dir.string());
    CAPTURE(a.err);
    REQUIRE(a.rc == 0);
    CHECK(a.out.find("blackbox fgsm") != std::string::npos);
    CHECK(a.out.find("projected fgsm") != std::string::npos);
    CHECK(a.out.find("aggregated fgsm") != std::string::npos);
    CHECK(fs::exists(dir / "reference.ckpt"));
    CHECK(fs::exists(dir / "protocols.csv"));

    const std::string csv = slurp(dir / "protocols.csv");
    CHECK(csv.find("protocol,attack,epsilon,mode,ref,plain,boosted") == 0);
    CHECK(csv.find("blackbox,fgsm,0.1,dkd,") != std::string::npos);
    CHECK(csv.find("aggregated,fgsm,0.1,dkd,,") != std::string::npos);

    // the persisted black-box batch reloads with matching metadata
    AttackConfig meta;
    std::string ds;
    const auto batch =
        load_attack_batch((dir / "adv_blackbox").string(), &meta, &ds);
    CHECK(batch.size() == 200);
    CHECK(meta.kind == AttackKind::fgsm);
    CHECK(meta.epsilon == 0.1);
    CHECK(ds == "blobs");

    // census gained the attack streams alongside clean
    const std::string census = slurp(dir / "census.csv");
    CHECK(census.find("clean,200") != std::string::npos);
    CHECK(census.find("blackbox:fgsm,200") != std::string::npos);
    CHECK(census.find("aggregated:fgsm,200") != std::string::npos);
  }

  SUBCASE("lss scores the persisted ensemble") {
    const RunResult l = run_cli("lss --config " + config_path() + " --out " + dir.string());
    REQUIRE(l.rc == 0);
    CHECK(l.out.find("ensemble lss:") != std::string::npos);
    const nlohmann::json j = nlohmann::json::parse(slurp(dir / "lss.json"));
    CHECK(j.at("zeta").get<double>() == 0.9);
    CHECK(j.at("per_member").size() == 3);
    CHECK(j.at("ensemble_lss").get<double>() > 0.0);
  }

  SUBCASE("report merges the artifacts into markdown") {
    run_cli("lss --config " + config_path() + " --out " + dir.string());
    const RunResult rep = run_cli("report --out " + dir.string());
    REQUIRE(rep.rc == 0);
    CHECK(fs::exists(dir / "report.md"));
    CHECK(rep.out.find("# Run report") != std::string::npos);
    CHECK(rep.out.find("## Training") != std::string::npos);
    CHECK(rep.out.find("## Latent separation") != std::string::npos);
  }
}

TEST_CASE("census tabulates clean and black-box streams") {
  const fs::path dir = work_root() / "run_census";
  const RunResult r =
      run_cli("census --config " + config_path() + " --out " + dir.string());
  CAPTURE(r.err);
  REQUIRE(r.rc == 0);
  CHECK(r.out.find("clean: failed plain") != std::string::npos);
  CHECK(r.out.find("blackbox:fgsm: failed plain") != std::string::npos);
  const std::string census = slurp(dir / "census.csv");
  CHECK(census.find("stream,samples,kd,kd*,dkd,dkd*,ri,ri*") == 0);
  CHECK(census.find("clean,200") != std::string::npos);
}

TEST_CASE("identical configs reproduce identical artifact bytes") {
  const fs::path a = work_root() / "repro_a";
  const fs::path b = work_root() / "repro_b";
  for (const fs::path& dir : {a, b}) {
    REQUIRE(run_cli("train --config " + config_path() + " --out " + dir.string()).rc == 0);
    REQUIRE(run_cli("attack --config " + config_path() + " --out " + dir.string()).rc == 0);
  }
  const auto ckpt_a = sorted_files(a, ".ckpt"), ckpt_b = sorted_files(b, ".ckpt");
  REQUIRE(ckpt_a.size() == 4);  // three members + reference
  REQUIRE(ckpt_b.size() == 4);
  for (std::size_t i = 0; i < ckpt_a.size(); ++i)
    CHECK(slurp(ckpt_a[i]) == slurp(ckpt_b[i]));
  const auto csv_a = sorted_files(a, ".csv"), csv_b = sorted_files(b, ".csv");
  REQUIRE(csv_a.size() == csv_b.size());
  for (std::size_t i = 0; i < csv_a.size(); ++i)
    CHECK(slurp(csv_a[i]) == slurp(csv_b[i]));
}

TEST_CASE("failures exit nonzero with machine-readable JSON on stderr") {
  SUBCASE("missing run directory") {
    const RunResult r = run_cli("train --config " + config_path());
    CHECK(r.rc == 1);
    const nlohmann::json j = nlohmann::json::parse(r.err);
    CHECK(j.at("command").get<std::string>() == "train");
    CHECK(j.at("error").get<std::string>().find("run directory") != std::string::npos);
  }
  SUBCASE("parse error") {
    const RunResult r = run_cli("lss --zeta 7 --out /tmp/x");
    CHECK(r.rc == 1);
    const nlohmann::json j = nlohmann::json::parse(r.err);
    CHECK(j.at("command").get<std::string>() == "parse");
  }
  SUBCASE("unknown dataset") {
    const fs::path dir = work_root() / "run_bad";
    const RunResult r = run_cli("train --dataset marsdust --out " + dir.string());
    CHECK(r.rc == 1);
    const nlohmann::json j = nlohmann::json::parse(r.err);
    CHECK(j.at("error").get<std::string>().find("marsdust") != std::string::npos);
  }
  SUBCASE("config and checkpoints disagree") {
    const fs::path dir = work_root() / "run_mismatch";
    REQUIRE(run_cli("train --config " + config_path() + " --out " + dir.string()).rc == 0);
    const RunResult r = run_cli("train --config " + config_path() + " --zeta 0.2 --out " +
                                dir.string());
    CHECK(r.rc == 1);
    const nlohmann::json j = nlohmann::json::parse(r.err);
    CHECK(j.at("error").get<std::string>().find("different run") != std::string::npos);
  }
  SUBCASE("a subcommand is required") {
    const RunResult r = run_cli("--seed 4");
    CHECK(r.rc == 1);
    CHECK(nlohmann::json::parse(r.err).at("command").get<std::string>() == "parse");
  }
}
