#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "dkd/data.hpp"
#include "dkd/lss.hpp"
#include "dkd/model.hpp"
#include "dkd/tensor.hpp"
#include "dkd/voting.hpp"

namespace dkd {

enum class AttackKind { fgsm, deepfool, jsma, cw };

std::string to_string(AttackKind k);
AttackKind attack_from_string(const std::string& s);

/// Knobs for all four generators; each attack reads only its own fields.
struct AttackConfig {
  AttackKind kind = AttackKind::fgsm;
  double epsilon = 0.1;           // fgsm L-inf budget
  int iterations = 50;            // deepfool/cw inner iterations
  double deepfool_overshoot = 0.02;
  double jsma_theta = 0.1;        // per-pixel step (increasing feature variant)
  int jsma_max_pixels = 28;       // pixel-pair budget
  int jsma_target = -1;           // -1: untargeted (runner-up at the start)
  double cw_initial_c = 10.0;
  double cw_lr = 1e-2;
  int cw_binary_steps = 5;
};

/// One crafted sample. `perturbation` is what was actually applied
/// (adversarial - original, after pixel-box clipping); norms are its norms.
struct AttackResult {
  std::vector<double> adversarial;
  std::vector<double> perturbation;
  double linf = 0.0, l2 = 0.0;
  int source_model = -1;
  bool success = false;  // source model misclassifies the adversarial
  bool flagged = false;  // degenerate path: zero gradient, already wrong,
                         // empty saliency domain, or exhausted budget
  int iterations_used = 0;
  std::vector<double> best_l2_trace;  // cw only: best L2 after each c step
};

// ---------------------------------------------------------------------------
// Generators. x is a [1,C,H,W] tensor in the pixel box; every returned
// adversarial lies in [0,1] elementwise. All four are deterministic in
// (model parameters, input, config). Crafting is cheaper when the model's
// parameters have gradient tracking disabled; it is not required.
// ---------------------------------------------------------------------------

/// One signed gradient step: clip(x + eps*sign(dCE/dx)). sign(0) = 0; a
/// gradient that vanishes everywhere returns x unchanged and flags it.
AttackResult fgsm(const ModelGraph& model, const Tensor& x, int label, double epsilon);

/// Batched fgsm over [N,C,H,W]; identical per-sample output to fgsm().
std::vector<AttackResult> fgsm_batch(const ModelGraph& model, const Tensor& x,
                                     const std::vector<int>& labels, double epsilon);

/// Iterative minimal-L2 push to the nearest linearized class boundary;
/// the accumulated step is overshot by (1+overshoot) and clipped at the
/// end only. An input that is already misclassified returns unchanged.
AttackResult deepfool(const ModelGraph& model, const Tensor& x, int label, int max_iter,
                      double overshoot = 0.02);

/// Greedy pairwise saliency attack: per step, the admissible pixel pair
/// (target gradient positive, others-sum negative) with the largest
/// saliency product moves by +theta. target < 0 picks the runner-up class
/// of the clean input. L0 of the perturbation is at most 2*max_pixels.
AttackResult jsma(const ModelGraph& model, const Tensor& x, int label, int target,
                  int max_pixels, double theta = 0.1);

/// Carlini-Wagner L2 with tanh reparameterization, margin loss at kappa=0,
/// an Adam inner loop, and a binary search over the constant c. Returns the
/// lowest-L2 success found; if none, the last iterate, flagged.
AttackResult cw_l2(const ModelGraph& model, const Tensor& x, int label, double initial_c,
                   int iterations, double lr = 1e-2, int binary_steps = 5);

/// Dispatch on cfg.kind.
AttackResult run_attack(const ModelGraph& model, const Tensor& x, int label,
                        const AttackConfig& cfg);

/// Elementwise sum of per-member perturbations; fgsm aggregates are
/// re-projected onto the L-inf ball of radius epsilon.
std::vector<double> aggregate_perturbations(const std::vector<std::vector<double>>& taus,
                                            AttackKind kind, double epsilon);

// ---------------------------------------------------------------------------
// Evaluation helpers and the three protocols
// ---------------------------------------------------------------------------

/// Top-1 accuracy of one model over a dataset (chunked forward passes).
double model_accuracy(const ModelGraph& model, const Dataset& data, int chunk = 256);

/// Per-sample, per-member probability rows: result[sample][member][class].
std::vector<std::vector<std::vector<double>>> ensemble_probs(
    const std::vector<ModelGraph>& members, const Dataset& data, int chunk = 256);

/// The model's tap-layer activations over `data`, as a cloud ready for
/// separation scoring.
LatentCloud extract_latent_cloud(const ModelGraph& model, const Dataset& data,
                                 int source_model = -1, int chunk = 256);

/// Accuracy of a model on adversarials crafted against itself.
double attacked_accuracy(const ModelGraph& model, const AttackConfig& cfg, const Dataset& data);

struct ProtocolReport {
  std::string protocol;  // "blackbox" | "projected" | "aggregated"
  std::string attack;
  double ref_accuracy = -1.0;  // blackbox only; -1 otherwise
  double plain_accuracy = 0.0;
  double boosted_accuracy = 0.0;
  CensusRow census;
  Dataset adversarial_set;  // crafted stream, original labels
  // Per-sample crafting records for single-source protocols (blackbox,
  // projected); empty for aggregated, whose stream has no single source.
  std::vector<AttackResult> per_sample;
};

/// Table-3 protocol: craft every sample on the reference model, apply the
/// transferred adversarials to the ensemble, vote plain and boosted.
ProtocolReport blackbox_transfer(const ModelGraph& reference,
                                 const std::vector<ModelGraph>& ensemble,
                                 const AttackConfig& cfg, const Dataset& data, int boost_n = 3);

/// Table-4 "projected": craft sample i on member i mod k, apply to all.
ProtocolReport whitebox_projected(const std::vector<ModelGraph>& ensemble,
                                  const AttackConfig& cfg, const Dataset& data, int boost_n = 3);

/// Table-4 "aggregated": sum the per-member perturbations for each sample,
/// re-project (fgsm) and re-clip, apply the single aggregate to all.
ProtocolReport whitebox_aggregated(const std::vector<ModelGraph>& ensemble,
                                   const AttackConfig& cfg, const Dataset& data, int boost_n = 3);

// ---------------------------------------------------------------------------
// Persistence: <prefix>.bin holds the adversarial and perturbation planes,
// <prefix>.json the config and per-sample metadata (traces are not kept).
// ---------------------------------------------------------------------------

void save_attack_batch(const std::string& path_prefix, const std::vector<AttackResult>& results,
                       const AttackConfig& cfg, const std::string& dataset_name);
std::vector<AttackResult> load_attack_batch(const std::string& path_prefix,
                                            AttackConfig* cfg = nullptr,
                                            std::string* dataset_name = nullptr);

}  // namespace dkd
