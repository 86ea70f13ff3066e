#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "dkd/data.hpp"
#include "dkd/model.hpp"

namespace dkd {

/// RI trains every member independently; KD distills member i from its
/// predecessors' softened outputs; DKD adds the latent-diversity pressure.
enum class TrainMode { ri, kd, dkd };

std::string to_string(TrainMode m);
TrainMode mode_from_string(const std::string& s);

struct TrainConfig {
  TrainMode mode = TrainMode::dkd;
  Arch arch = Arch::mnist;
  int ensemble_size = 3;
  int epochs = 15;
  int batch_size = 64;
  double lr = 1e-4;
  double zeta = 0.9;              // diversity / distillation weight
  double kd_temperature = 4.0;
  bool kd_distill_main_only = false;  // distill from the first member only
  std::uint64_t seed = 0;         // member i trains with seed + i
  std::string dataset = "digits28";
  std::string data_dir;           // empty: $DKD_DATA_DIR
  int train_subset = 0;           // 0: whole split; else seed-keyed subset
  int test_subset = 0;
  double validation_fraction = 0.1;  // tail slice of the training subset
  int tap_override = -1;
  std::string out_dir;  // empty: no checkpoints/history files, no resume
};

struct EpochStats {
  int epoch = 0;
  double total_loss = 0.0;  // sample-weighted epoch mean
  double ce = 0.0;
  double diversity = 0.0;  // cosine term (DKD) or scaled KL (KD); 0 for CE
  double train_accuracy = 0.0;
  double val_accuracy = 0.0;
};

struct MemberHistory {
  int member = 0;
  bool resumed = false;  // loaded from a checkpoint; epochs is empty then
  std::vector<EpochStats> epochs;
  double final_train_accuracy = 0.0;
  double final_val_accuracy = 0.0;
};

struct EnsembleState {
  TrainMode mode = TrainMode::dkd;
  double zeta = 0.0;
  int tap = -1;
  std::vector<ModelGraph> members;  // parameters frozen once trained
  std::vector<MemberHistory> history;
};

/// Trains the first (or an RI) member with plain cross-entropy. Diverging
/// loss aborts with a diagnostic; zero epochs returns the initialized model.
ModelGraph train_main(const TrainConfig& cfg);

/// Appends one KD/DKD member trained against the frozen members already in
/// `ens`; predecessors are byte-identical afterwards. RI is rejected here —
/// independent members go through train_main.
EnsembleState train_auxiliary(EnsembleState ens, const TrainConfig& cfg);

/// train_main + (ensemble_size - 1) auxiliary rounds. With out_dir set,
/// every member is checkpointed (member_<i>.ckpt) with a history CSV, and a
/// rerun resumes from the longest contiguous prefix of existing member
/// checkpoints whose metadata matches the config.
EnsembleState build_ensemble(const TrainConfig& cfg);

/// The train/test splits the trainer uses for `cfg`, after subsetting.
/// Exposed so evaluations run on exactly the data the members saw.
Dataset trainer_split(const TrainConfig& cfg, const std::string& split);

}  // namespace dkd
