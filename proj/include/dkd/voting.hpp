#pragma once

#include <string>
#include <vector>

namespace dkd {

/// Result of one ensemble vote. `prediction` is always a valid class id —
/// voting is a total function; failure flags record how it was reached.
struct VoteOutcome {
  int prediction = -1;
  bool failed_top1 = false;  // no strict top-1 majority
  bool used_boost = false;   // top-n fallback ran (implies failed_top1)
  bool boost_tie = false;    // fallback vote counts had no unique winner
  std::vector<std::vector<int>> member_topn;       // per member, ranked class ids
  std::vector<std::vector<double>> member_probs;   // the inputs, for reporting
};

/// Plain top-1 majority over per-member probability rows (each summing to 1).
/// A strict majority (> half the members) wins; otherwise failed_top1 is set
/// and the prediction falls back to the highest summed probability across
/// members (ties to the lowest class id). Throws on an empty member list,
/// ragged rows, or rows that are not probability vectors.
VoteOutcome majority_vote(const std::vector<std::vector<double>>& member_probs);

/// Top-1 majority with a top-n fallback: when no strict majority exists,
/// each member casts one vote for each of its top-n classes and the most
/// voted class wins. Vote-count ties break by highest summed probability,
/// then lowest class id; such ties set boost_tie (the starred census count).
/// n >= 2; n larger than the class count is clamped.
VoteOutcome boosted_vote(const std::vector<std::vector<double>>& member_probs, int n = 3);

/// One row of the failed-majority census for a labeled sample stream.
struct CensusRow {
  std::string stream;        // caller-supplied stream tag (e.g. "fgsm_0.1")
  int samples = 0;
  int failed_plain = 0;      // samples with no strict top-1 majority
  int failed_boosted = 0;    // samples whose top-n fallback still tied
  double acc_plain = 0.0;
  double acc_boosted = 0.0;
  double accuracy_improved = 0.0;  // acc_boosted - acc_plain
};

/// Runs both voting schemes over per-sample member probabilities
/// (probs[sample][member][class]) against ground-truth labels.
CensusRow failed_majority_census(const std::vector<std::vector<std::vector<double>>>& probs,
                                 const std::vector<int>& labels, int boost_n = 3,
                                 const std::string& stream = "");

}  // namespace dkd
