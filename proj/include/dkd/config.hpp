#pragma once

#include <string>

#include "dkd/attacks.hpp"
#include "dkd/trainer.hpp"

namespace dkd {

/// LSS evaluation knobs: solver tolerance and the per-member cloud cap.
struct LssConfig {
  double tol = 1e-3;
  int max_points = 2000;
};

/// One experiment, end to end: how to train, how to attack, how to vote,
/// how to score separation, and where the artifacts go. `out_dir` is the
/// run directory; the trainer's own out_dir is derived from it at run time
/// and never serialized.
struct ExperimentConfig {
  TrainConfig train;
  AttackConfig attack;
  int boost_n = 3;
  LssConfig lss;
  std::string out_dir;
};

bool operator==(const LssConfig& a, const LssConfig& b);
bool operator==(const ExperimentConfig& a, const ExperimentConfig& b);

/// Strict JSON codec: every key is optional (defaults apply), every present
/// key must carry the right type, and unknown keys are rejected with their
/// path. parse(serialize(c)) == c.
ExperimentConfig parse_experiment_config(const std::string& json_text);
std::string serialize_experiment_config(const ExperimentConfig& cfg);

ExperimentConfig load_experiment_config(const std::string& path);
void save_experiment_config(const ExperimentConfig& cfg, const std::string& path);

}  // namespace dkd
