// Experiment CLI: trains diverse ensembles, scores latent separation, runs
// attack protocols, and merges run artifacts into reports. Every artifact a
// subcommand writes is deterministic for a given config + seed.
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "dkd/attacks.hpp"
#include "dkd/checkpoint.hpp"
#include "dkd/config.hpp"
#include "dkd/report.hpp"
#include "dkd/trainer.hpp"
#include "json.hpp"

using namespace dkd;
namespace fs = std::filesystem;
using ojson = nlohmann::ordered_json;

namespace {

// ---------------------------------------------------------------------------
// Run-directory state: census.json / protocols.json accumulate rows across
// subcommands (upsert by key), and the CSV views are regenerated from them.
// ---------------------------------------------------------------------------

ojson load_array(const fs::path& path) {
  if (!fs::exists(path)) return ojson::array();
  std::ifstream in(path);
  ojson j;
  in >> j;
  if (!j.is_array()) throw std::runtime_error("corrupt state file " + path.string());
  return j;
}

void save_text(const fs::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << text;
  if (!out) throw std::runtime_error("short write on " + path.string());
}

void upsert(ojson& arr, const ojson& row, std::initializer_list<const char*> keys) {
  for (ojson& existing : arr) {
    bool match = true;
    for (const char* k : keys)
      if (existing.at(k) != row.at(k)) match = false;
    if (match) {
      existing = row;
      return;
    }
  }
  arr.push_back(row);
}

void record_census(const fs::path& dir, const std::string& mode, const CensusRow& row) {
  const fs::path state = dir / "census.json";
  ojson arr = load_array(state);
  upsert(arr,
         ojson{{"mode", mode},
               {"stream", row.stream},
               {"samples", row.samples},
               {"failed_plain", row.failed_plain},
               {"failed_boosted", row.failed_boosted},
               {"acc_plain", row.acc_plain},
               {"acc_boosted", row.acc_boosted}},
         {"mode", "stream"});
  save_text(state, arr.dump(2) + "\n");

  std::vector<StreamCensus> cells;
  for (const ojson& r : arr) {
    StreamCensus c;
    c.mode = r.at("mode").get<std::string>();
    c.row.stream = r.at("stream").get<std::string>();
    c.row.samples = r.at("samples").get<int>();
    c.row.failed_plain = r.at("failed_plain").get<int>();
    c.row.failed_boosted = r.at("failed_boosted").get<int>();
    c.row.acc_plain = r.at("acc_plain").get<double>();
    c.row.acc_boosted = r.at("acc_boosted").get<double>();
    c.row.accuracy_improved = c.row.acc_boosted - c.row.acc_plain;
    cells.push_back(std::move(c));
  }
  save_text(dir / "census.csv", census_table_csv(cells));
}

void record_protocol(const fs::path& dir, const std::string& mode,
                     const ProtocolReport& rep, double epsilon) {
  const fs::path state = dir / "protocols.json";
  ojson arr = load_array(state);
  upsert(arr,
         ojson{{"protocol", rep.protocol},
               {"mode", mode},
               {"attack", rep.attack},
               {"epsilon", epsilon},
               {"ref", rep.ref_accuracy},
               {"plain", rep.plain_accuracy},
               {"boosted", rep.boosted_accuracy}},
         {"protocol", "mode", "attack", "epsilon"});
  save_text(state, arr.dump(2) + "\n");

  std::vector<ProtocolRow> rows;
  for (const ojson& r : arr) {
    ProtocolRow p;
    p.protocol = r.at("protocol").get<std::string>();
    p.mode = r.at("mode").get<std::string>();
    p.attack = r.at("attack").get<std::string>();
    p.epsilon = r.at("epsilon").get<double>();
    p.ref_accuracy = r.at("ref").get<double>();
    p.plain_accuracy = r.at("plain").get<double>();
    p.boosted_accuracy = r.at("boosted").get<double>();
    rows.push_back(std::move(p));
  }
  save_text(dir / "protocols.csv", protocol_table_csv(rows));
}

// ---------------------------------------------------------------------------
// Shared run plumbing
// ---------------------------------------------------------------------------

fs::path require_out(const ExperimentConfig& cfg, const char* sub) {
  if (cfg.out_dir.empty())
    throw std::invalid_argument(std::string(sub) + " needs a run directory (--out or out_dir)");
  fs::create_directories(cfg.out_dir);
  return cfg.out_dir;
}

EnsembleState run_ensemble(ExperimentConfig& cfg) {
  cfg.train.out_dir = cfg.out_dir;
  return build_ensemble(cfg.train);
}

/// The independent model black-box streams transfer from. Cached in the run
/// directory; seed offset keeps it disjoint from every ensemble member.
ModelGraph reference_model(const ExperimentConfig& cfg) {
  const fs::path path = fs::path(cfg.out_dir) / "reference.ckpt";
  const std::uint64_t ref_seed = cfg.train.seed + 1000;
  if (fs::exists(path)) {
    CheckpointMeta meta;
    ModelGraph m = load_checkpoint(path.string(), &meta);
    if (meta.arch != cfg.train.arch || meta.seed != ref_seed || meta.mode != "ri")
      throw std::runtime_error("reference checkpoint " + path.string() +
                               " belongs to a different run");
    return m;
  }
  TrainConfig rcfg = cfg.train;
  rcfg.mode = TrainMode::ri;
  rcfg.ensemble_size = 1;
  rcfg.zeta = 0.0;
  rcfg.seed = ref_seed;
  rcfg.out_dir.clear();
  ModelGraph m = train_main(rcfg);
  CheckpointMeta meta;
  meta.arch = rcfg.arch;
  meta.tap = m.tap();
  meta.mode = "ri";
  meta.zeta = 0.0;
  meta.seed = ref_seed;
  save_checkpoint(path.string(), m, meta);
  return m;
}

CensusRow clean_census(const ExperimentConfig& cfg, const EnsembleState& ens,
                       const Dataset& test) {
  const auto probs = ensemble_probs(ens.members, test);
  return failed_majority_census(probs, test.labels, cfg.boost_n, "clean");
}

LSSReport ensemble_lss_report(const ExperimentConfig& cfg, const EnsembleState& ens,
                              const Dataset& test) {
  std::vector<LatentCloud> clouds;
  for (std::size_t i = 0; i < ens.members.size(); ++i) {
    LatentCloud c = extract_latent_cloud(ens.members[i], test, static_cast<int>(i));
    // One shared seed: every member's cloud keeps the same sample rows.
    clouds.push_back(subsample_cloud(c, cfg.lss.max_points, cfg.train.seed));
  }
  LSSReport rep = lss_ensemble(clouds, cfg.lss.tol);
  rep.subsampled_to = test.size() > cfg.lss.max_points ? cfg.lss.max_points : 0;
  return rep;
}

// ---------------------------------------------------------------------------
// Subcommands
// ---------------------------------------------------------------------------

void cmd_train(ExperimentConfig cfg) {
  const fs::path out = require_out(cfg, "train");
  save_experiment_config(cfg, (out / "config.json").string());
  const EnsembleState ens = run_ensemble(cfg);
  const Dataset test = trainer_split(cfg.train, "test");
  const CensusRow clean = clean_census(cfg, ens, test);
  record_census(out, to_string(ens.mode), clean);

  for (const MemberHistory& h : ens.history)
    std::printf("member %d: %s final train %.4f val %.4f\n", h.member,
                h.resumed ? "resumed" : "trained", h.final_train_accuracy,
                h.final_val_accuracy);
  std::printf("clean test accuracy: plain %.4f boosted %.4f (%d samples)\n",
              clean.acc_plain, clean.acc_boosted, clean.samples);
  std::printf("run directory: %s\n", out.string().c_str());
}

void cmd_attack(ExperimentConfig cfg) {
  const fs::path out = require_out(cfg, "attack");
  save_experiment_config(cfg, (out / "config.json").string());
  const EnsembleState ens = run_ensemble(cfg);
  const Dataset test = trainer_split(cfg.train, "test");
  const std::string mode = to_string(ens.mode);
  const ModelGraph ref = reference_model(cfg);

  const ProtocolReport black = blackbox_transfer(ref, ens.members, cfg.attack, test, cfg.boost_n);
  const ProtocolReport proj = whitebox_projected(ens.members, cfg.attack, test, cfg.boost_n);
  const ProtocolReport agg = whitebox_aggregated(ens.members, cfg.attack, test, cfg.boost_n);

  for (const ProtocolReport* rep : {&black, &proj, &agg}) {
    record_protocol(out, mode, *rep, cfg.attack.epsilon);
    record_census(out, mode, rep->census);
    if (!rep->per_sample.empty())
      save_attack_batch((out / ("adv_" + rep->protocol)).string(), rep->per_sample,
                        cfg.attack, test.name);
    std::printf("%s %s: plain %.4f boosted %.4f", rep->protocol.c_str(),
                rep->attack.c_str(), rep->plain_accuracy, rep->boosted_accuracy);
    if (rep->ref_accuracy >= 0.0) std::printf(" (reference %.4f)", rep->ref_accuracy);
    std::printf("\n");
  }
  std::printf("run directory: %s\n", out.string().c_str());
}

void cmd_lss(ExperimentConfig cfg) {
  const fs::path out = require_out(cfg, "lss");
  save_experiment_config(cfg, (out / "config.json").string());
  const EnsembleState ens = run_ensemble(cfg);
  const Dataset test = trainer_split(cfg.train, "test");
  const LSSReport rep = ensemble_lss_report(cfg, ens, test);
  save_text(out / "lss.json", lss_report_json(rep, cfg.train.zeta));

  for (std::size_t i = 0; i < rep.per_member.size(); ++i)
    std::printf("member %zu: lss %.6g%s\n", i, rep.per_member[i].lss,
                rep.per_member[i].separable ? "" : " (not separable)");
  std::printf("ensemble lss: %.6g\n", rep.ensemble_lss);
}

void cmd_census(ExperimentConfig cfg) {
  const fs::path out = require_out(cfg, "census");
  save_experiment_config(cfg, (out / "config.json").string());
  const EnsembleState ens = run_ensemble(cfg);
  const Dataset test = trainer_split(cfg.train, "test");
  const std::string mode = to_string(ens.mode);

  const CensusRow clean = clean_census(cfg, ens, test);
  record_census(out, mode, clean);
  const ModelGraph ref = reference_model(cfg);
  const ProtocolReport black = blackbox_transfer(ref, ens.members, cfg.attack, test, cfg.boost_n);
  record_census(out, mode, black.census);

  for (const CensusRow* r : {&clean, &black.census})
    std::printf("%s: failed plain %d boosted %d of %d\n", r->stream.c_str(),
                r->failed_plain, r->failed_boosted, r->samples);
}

void cmd_sweep(ExperimentConfig cfg) {
  const fs::path out = require_out(cfg, "zeta-sweep");
  save_experiment_config(cfg, (out / "config.json").string());
  std::vector<SweepRow> rows;
  for (int step = 0; step <= 9; ++step) {
    const double zeta = 0.1 * step;
    char leaf[16];
    std::snprintf(leaf, sizeof leaf, "zeta_%.1f", zeta);
    ExperimentConfig point = cfg;
    point.train.zeta = zeta;
    point.out_dir = (out / leaf).string();
    const EnsembleState ens = run_ensemble(point);
    const Dataset test = trainer_split(point.train, "test");
    const CensusRow clean = clean_census(point, ens, test);
    const LSSReport lss = ensemble_lss_report(point, ens, test);

    SweepRow row;
    row.zeta = zeta;
    row.ensemble_lss = lss.ensemble_lss;
    row.all_separable = lss.all_separable;
    row.plain_accuracy = clean.acc_plain;
    row.boosted_accuracy = clean.acc_boosted;
    rows.push_back(row);
    std::printf("zeta %.1f: lss %.6g accuracy plain %.4f boosted %.4f\n", zeta,
                row.ensemble_lss, row.plain_accuracy, row.boosted_accuracy);
  }
  save_text(out / "sweep.csv", sweep_csv(rows));
  std::printf("run directory: %s\n", out.string().c_str());
}

void cmd_report(const ExperimentConfig& cfg) {
  if (cfg.out_dir.empty())
    throw std::invalid_argument("report needs a run directory (--out or out_dir)");
  int found = 0;
  const std::string md = merge_report_markdown(cfg.out_dir, &found);
  if (found > 0) save_text(fs::path(cfg.out_dir) / "report.md", md);
  std::fputs(md.c_str(), stdout);
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Diverse-ensemble workbench: train, separate, attack, report."};
  app.require_subcommand(1);

  std::string config_path, dataset, mode_s, attack_s, out_dir;
  std::uint64_t seed = 0;
  double zeta = 0.0, epsilon = 0.0;
  int members = 0, epochs = 0, iterations = 0, boost_n = 0;

  auto* o_config =
      app.add_option("--config", config_path, "experiment config JSON")->check(CLI::ExistingFile);
  auto* o_seed = app.add_option("--seed", seed, "base training seed");
  auto* o_dataset =
      app.add_option("--dataset", dataset, "mnist | cifar10 | digits28 | blobs");
  auto* o_mode = app.add_option("--mode", mode_s, "ri | kd | dkd")
                     ->check(CLI::IsMember({"ri", "kd", "dkd"}));
  auto* o_zeta = app.add_option("--zeta", zeta, "diversity / distillation weight")
                     ->check(CLI::Range(0.0, 1.0));
  auto* o_members = app.add_option("--members", members, "ensemble size");
  auto* o_epochs = app.add_option("--epochs", epochs, "training epochs");
  auto* o_attack = app.add_option("--attack", attack_s, "fgsm | deepfool | jsma | cw")
                       ->check(CLI::IsMember({"fgsm", "deepfool", "jsma", "cw"}));
  auto* o_epsilon = app.add_option("--epsilon", epsilon, "attack budget");
  auto* o_iterations = app.add_option("--iterations", iterations, "attack iteration cap");
  auto* o_boost = app.add_option("--boost-n", boost_n, "boosted-vote fallback width");
  auto* o_out = app.add_option("--out", out_dir, "run directory");

  const char* names[] = {"train", "attack", "lss", "zeta-sweep", "census", "report"};
  const char* blurbs[] = {"train an ensemble into the run directory",
                          "run black-box and white-box attack protocols",
                          "score latent separation of the trained ensemble",
                          "train across the zeta grid and tabulate lss/accuracy",
                          "tabulate failed-majority counts (clean + black-box)",
                          "merge run artifacts into a Markdown digest"};
  for (int i = 0; i < 6; ++i) app.add_subcommand(names[i], blurbs[i])->fallthrough();

  try {
    app.parse(argc, argv);
  } catch (const CLI::Success& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    const ojson err{{"error", e.what()}, {"command", "parse"}};
    std::fprintf(stderr, "%s\n", err.dump().c_str());
    return 1;
  }
  const std::string sub = app.get_subcommands().front()->get_name();

  try {
    ExperimentConfig cfg;
    if (o_config->count()) cfg = load_experiment_config(config_path);
    if (o_seed->count()) cfg.train.seed = seed;
    if (o_dataset->count()) cfg.train.dataset = dataset;
    if (o_mode->count()) cfg.train.mode = mode_from_string(mode_s);
    if (o_zeta->count()) cfg.train.zeta = zeta;
    if (o_members->count()) cfg.train.ensemble_size = members;
    if (o_epochs->count()) cfg.train.epochs = epochs;
    if (o_attack->count()) cfg.attack.kind = attack_from_string(attack_s);
    if (o_epsilon->count()) cfg.attack.epsilon = epsilon;
    if (o_iterations->count()) cfg.attack.iterations = iterations;
    if (o_boost->count()) cfg.boost_n = boost_n;
    if (o_out->count()) cfg.out_dir = out_dir;

    if (sub == "train") cmd_train(std::move(cfg));
    else if (sub == "attack") cmd_attack(std::move(cfg));
    else if (sub == "lss") cmd_lss(std::move(cfg));
    else if (sub == "zeta-sweep") cmd_sweep(std::move(cfg));
    else if (sub == "census") cmd_census(std::move(cfg));
    else cmd_report(cfg);
  } catch (const std::exception& e) {
    const ojson err{{"error", e.what()}, {"command", sub}};
    std::fprintf(stderr, "%s\n", err.dump().c_str());
    return 1;
  }
  return 0;
}
