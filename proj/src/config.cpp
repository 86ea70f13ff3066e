#include "dkd/config.hpp"

#include <fstream>
#include <initializer_list>
#include <sstream>
#include <stdexcept>
#include <string>

#include "json.hpp"

namespace dkd {

namespace {

using json = nlohmann::ordered_json;

[[noreturn]] void bad(const std::string& path, const std::string& what) {
  throw std::invalid_argument("config: " + path + ": " + what);
}

// Strictness half 1: every present key must be one we know.
void reject_unknown(const json& o, const std::string& path,
                    std::initializer_list<const char*> allowed) {
  if (!o.is_object()) bad(path, "expected an object");
  for (const auto& [key, _] : o.items()) {
    bool known = false;
    for (const char* a : allowed)
      if (key == a) known = true;
    if (!known) bad(path + "." + key, "unknown key");
  }
}

// Strictness half 2: present keys must carry the right type.
double get_num(const json& o, const std::string& path, const char* key, double dflt) {
  if (!o.contains(key)) return dflt;
  const json& v = o.at(key);
  if (!v.is_number()) bad(path + "." + key, "expected a number");
  return v.get<double>();
}

int get_int(const json& o, const std::string& path, const char* key, int dflt) {
  if (!o.contains(key)) return dflt;
  const json& v = o.at(key);
  if (!v.is_number_integer() && !v.is_number_unsigned())
    bad(path + "." + key, "expected an integer");
  return v.get<int>();
}

std::uint64_t get_u64(const json& o, const std::string& path, const char* key,
                      std::uint64_t dflt) {
  if (!o.contains(key)) return dflt;
  const json& v = o.at(key);
  if (!v.is_number_unsigned() && !(v.is_number_integer() && v.get<std::int64_t>() >= 0))
    bad(path + "." + key, "expected a non-negative integer");
  return v.get<std::uint64_t>();
}

bool get_bool(const json& o, const std::string& path, const char* key, bool dflt) {
  if (!o.contains(key)) return dflt;
  const json& v = o.at(key);
  if (!v.is_boolean()) bad(path + "." + key, "expected a boolean");
  return v.get<bool>();
}

std::string get_str(const json& o, const std::string& path, const char* key,
                    const std::string& dflt) {
  if (!o.contains(key)) return dflt;
  const json& v = o.at(key);
  if (!v.is_string()) bad(path + "." + key, "expected a string");
  return v.get<std::string>();
}

TrainConfig parse_train(const json& o, const std::string& path) {
  reject_unknown(o, path,
                 {"mode", "arch", "ensemble_size", "epochs", "batch_size", "lr", "zeta",
                  "kd_temperature", "kd_distill_main_only", "seed", "dataset", "data_dir",
                  "train_subset", "test_subset", "validation_fraction", "tap_override"});
  TrainConfig t;
  try {
    t.mode = mode_from_string(get_str(o, path, "mode", to_string(t.mode)));
    t.arch = arch_from_string(get_str(o, path, "arch", to_string(t.arch)));
  } catch (const std::invalid_argument& e) {
    bad(path, e.what());
  }
  t.ensemble_size = get_int(o, path, "ensemble_size", t.ensemble_size);
  t.epochs = get_int(o, path, "epochs", t.epochs);
  t.batch_size = get_int(o, path, "batch_size", t.batch_size);
  t.lr = get_num(o, path, "lr", t.lr);
  t.zeta = get_num(o, path, "zeta", t.zeta);
  t.kd_temperature = get_num(o, path, "kd_temperature", t.kd_temperature);
  t.kd_distill_main_only = get_bool(o, path, "kd_distill_main_only", t.kd_distill_main_only);
  t.seed = get_u64(o, path, "seed", t.seed);
  t.dataset = get_str(o, path, "dataset", t.dataset);
  t.data_dir = get_str(o, path, "data_dir", t.data_dir);
  t.train_subset = get_int(o, path, "train_subset", t.train_subset);
  t.test_subset = get_int(o, path, "test_subset", t.test_subset);
  t.validation_fraction = get_num(o, path, "validation_fraction", t.validation_fraction);
  t.tap_override = get_int(o, path, "tap_override", t.tap_override);
  return t;
}

AttackConfig parse_attack(const json& o, const std::string& path) {
  reject_unknown(o, path,
                 {"kind", "epsilon", "iterations", "deepfool_overshoot", "jsma_theta",
                  "jsma_max_pixels", "jsma_target", "cw_initial_c", "cw_lr",
                  "cw_binary_steps"});
  AttackConfig a;
  try {
    a.kind = attack_from_string(get_str(o, path, "kind", to_string(a.kind)));
  } catch (const std::invalid_argument& e) {
    bad(path, e.what());
  }
  a.epsilon = get_num(o, path, "epsilon", a.epsilon);
  a.iterations = get_int(o, path, "iterations", a.iterations);
  a.deepfool_overshoot = get_num(o, path, "deepfool_overshoot", a.deepfool_overshoot);
  a.jsma_theta = get_num(o, path, "jsma_theta", a.jsma_theta);
  a.jsma_max_pixels = get_int(o, path, "jsma_max_pixels", a.jsma_max_pixels);
  a.jsma_target = get_int(o, path, "jsma_target", a.jsma_target);
  a.cw_initial_c = get_num(o, path, "cw_initial_c", a.cw_initial_c);
  a.cw_lr = get_num(o, path, "cw_lr", a.cw_lr);
  a.cw_binary_steps = get_int(o, path, "cw_binary_steps", a.cw_binary_steps);
  return a;
}

}  // namespace

bool operator==(const LssConfig& a, const LssConfig& b) {
  return a.tol == b.tol && a.max_points == b.max_points;
}

bool operator==(const ExperimentConfig& a, const ExperimentConfig& b) {
  const TrainConfig &t = a.train, &u = b.train;
  const AttackConfig &p = a.attack, &q = b.attack;
  return t.mode == u.mode && t.arch == u.arch && t.ensemble_size == u.ensemble_size &&
         t.epochs == u.epochs && t.batch_size == u.batch_size && t.lr == u.lr &&
         t.zeta == u.zeta && t.kd_temperature == u.kd_temperature &&
         t.kd_distill_main_only == u.kd_distill_main_only && t.seed == u.seed &&
         t.dataset == u.dataset && t.data_dir == u.data_dir &&
         t.train_subset == u.train_subset && t.test_subset == u.test_subset &&
         // train.out_dir is run-time derived, not part of the document
         t.validation_fraction == u.validation_fraction && t.tap_override == u.tap_override &&
         p.kind == q.kind && p.epsilon == q.epsilon &&
         p.iterations == q.iterations && p.deepfool_overshoot == q.deepfool_overshoot &&
         p.jsma_theta == q.jsma_theta && p.jsma_max_pixels == q.jsma_max_pixels &&
         p.jsma_target == q.jsma_target && p.cw_initial_c == q.cw_initial_c &&
         p.cw_lr == q.cw_lr && p.cw_binary_steps == q.cw_binary_steps &&
         a.boost_n == b.boost_n && a.lss == b.lss && a.out_dir == b.out_dir;
}

ExperimentConfig parse_experiment_config(const std::string& json_text) {
  json root;
  try {
    root = json::parse(json_text);
  } catch (const json::exception& e) {
    throw std::invalid_argument(std::string("config: malformed JSON: ") + e.what());
  }
  reject_unknown(root, "$", {"train", "attack", "boost_n", "lss", "out_dir"});

  ExperimentConfig cfg;
  if (root.contains("train")) cfg.train = parse_train(root.at("train"), "$.train");
  if (root.contains("attack")) cfg.attack = parse_attack(root.at("attack"), "$.attack");
  cfg.boost_n = get_int(root, "$", "boost_n", cfg.boost_n);
  if (root.contains("lss")) {
    const json& l = root.at("lss");
    reject_unknown(l, "$.lss", {"tol", "max_points"});
    cfg.lss.tol = get_num(l, "$.lss", "tol", cfg.lss.tol);
    cfg.lss.max_points = get_int(l, "$.lss", "max_points", cfg.lss.max_points);
  }
  cfg.out_dir = get_str(root, "$", "out_dir", cfg.out_dir);
  return cfg;
}

std::string serialize_experiment_config(const ExperimentConfig& cfg) {
  const TrainConfig& t = cfg.train;
  const AttackConfig& a = cfg.attack;
  json root;
  root["train"] = {{"mode", to_string(t.mode)},
                   {"arch", to_string(t.arch)},
                   {"ensemble_size", t.ensemble_size},
                   {"epochs", t.epochs},
                   {"batch_size", t.batch_size},
                   {"lr", t.lr},
                   {"zeta", t.zeta},
                   {"kd_temperature", t.kd_temperature},
                   {"kd_distill_main_only", t.kd_distill_main_only},
                   {"seed", t.seed},
                   {"dataset", t.dataset},
                   {"data_dir", t.data_dir},
                   {"train_subset", t.train_subset},
                   {"test_subset", t.test_subset},
                   {"validation_fraction", t.validation_fraction},
                   {"tap_override", t.tap_override}};
  root["attack"] = {{"kind", to_string(a.kind)},
                    {"epsilon", a.epsilon},
                    {"iterations", a.iterations},
                    {"deepfool_overshoot", a.deepfool_overshoot},
                    {"jsma_theta", a.jsma_theta},
                    {"jsma_max_pixels", a.jsma_max_pixels},
                    {"jsma_target", a.jsma_target},
                    {"cw_initial_c", a.cw_initial_c},
                    {"cw_lr", a.cw_lr},
                    {"cw_binary_steps", a.cw_binary_steps}};
  root["boost_n"] = cfg.boost_n;
  root["lss"] = {{"tol", cfg.lss.tol}, {"max_points", cfg.lss.max_points}};
  root["out_dir"] = cfg.out_dir;
  return root.dump(2) + "\n";
}

ExperimentConfig load_experiment_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("config: cannot open " + path);
  std::ostringstream ss;
  ss << in.rdbuf();
  return parse_experiment_config(ss.str());
}

void save_experiment_config(const ExperimentConfig& cfg, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("config: cannot write " + path);
  out << serialize_experiment_config(cfg);
  if (!out) throw std::runtime_error("config: short write on " + path);
}

}  // namespace dkd
