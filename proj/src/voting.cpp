#include "dkd/voting.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <stdexcept>

namespace dkd {

namespace {

void check_rows(const std::vector<std::vector<double>>& member_probs) {
  if (member_probs.empty()) throw std::invalid_argument("vote: empty member list");
  const std::size_t k = member_probs[0].size();
  if (k == 0) throw std::invalid_argument("vote: empty probability row");
  for (const auto& row : member_probs) {
    if (row.size() != k) throw std::invalid_argument("vote: ragged probability rows");
    double sum = 0.0;
    for (double p : row) {
      if (!(p >= 0.0)) throw std::invalid_argument("vote: negative probability");
      sum += p;
    }
    if (std::abs(sum - 1.0) > 1e-6)
      throw std::invalid_argument("vote: probability row does not sum to 1");
  }
}

/// Class ids ranked by probability (descending), ties to the lower id.
std::vector<int> ranked(const std::vector<double>& row, int n) {
  std::vector<int> ids(row.size());
  std::iota(ids.begin(), ids.end(), 0);
  std::stable_sort(ids.begin(), ids.end(),
                   [&](int a, int b) { return row[a] > row[b]; });
  ids.resize(n);
  return ids;
}

/// Highest-summed-probability class, ties to the lowest id; `allowed` empty
/// means all classes, otherwise restricts the argmax to that set. Each
/// class's addends are summed in sorted order so the result is exactly
/// invariant under member permutation despite float non-associativity.
int prob_argmax(const std::vector<std::vector<double>>& member_probs,
                const std::vector<int>& allowed) {
  const int k = static_cast<int>(member_probs[0].size());
  std::vector<double> column(member_probs.size());
  int best = -1;
  double best_sum = 0.0;
  for (int c = 0; c < k; ++c) {
    if (!allowed.empty() && !std::binary_search(allowed.begin(), allowed.end(), c)) continue;
    for (std::size_t m = 0; m < member_probs.size(); ++m) column[m] = member_probs[m][c];
    std::sort(column.begin(), column.end());
    const double sum = std::accumulate(column.begin(), column.end(), 0.0);
    if (best < 0 || sum > best_sum) {
      best = c;
      best_sum = sum;
    }
  }
  return best;
}

VoteOutcome top1_stage(const std::vector<std::vector<double>>& member_probs, int topn) {
  const int m = static_cast<int>(member_probs.size());
  const int k = static_cast<int>(member_probs[0].size());
  VoteOutcome out;
  out.member_probs = member_probs;
  std::vector<int> count(k, 0);
  for (const auto& row : member_probs) {
    out.member_topn.push_back(ranked(row, topn));
    ++count[out.member_topn.back()[0]];
  }
  for (int c = 0; c < k; ++c) {
    if (2 * count[c] > m) {
      out.prediction = c;
      return out;
    }
  }
  out.failed_top1 = true;
  out.prediction = prob_argmax(member_probs, {});
  return out;
}

}  // namespace

VoteOutcome majority_vote(const std::vector<std::vector<double>>& member_probs) {
  check_rows(member_probs);
  return top1_stage(member_probs, 1);
}

VoteOutcome boosted_vote(const std::vector<std::vector<double>>& member_probs, int n) {
  check_rows(member_probs);
  if (n < 2) throw std::invalid_argument("boosted_vote: n must be >= 2");
  const int k = static_cast<int>(member_probs[0].size());
  n = std::min(n, k);

  VoteOutcome out = top1_stage(member_probs, n);
  if (!out.failed_top1) return out;

  out.used_boost = true;
  std::vector<int> votes(k, 0);
  for (const auto& topn : out.member_topn)
    for (int c : topn) ++votes[c];
  const int vmax = *std::max_element(votes.begin(), votes.end());
  std::vector<int> leaders;
  for (int c = 0; c < k; ++c)
    if (votes[c] == vmax) leaders.push_back(c);
  out.boost_tie = leaders.size() > 1;
  out.prediction = leaders.size() == 1 ? leaders[0] : prob_argmax(member_probs, leaders);
  return out;
}

CensusRow failed_majority_census(const std::vector<std::vector<std::vector<double>>>& probs,
                                 const std::vector<int>& labels, int boost_n,
                                 const std::string& stream) {
  if (probs.size() != labels.size())
    throw std::invalid_argument("census: sample/label count mismatch");
  CensusRow row;
  row.stream = stream;
  row.samples = static_cast<int>(probs.size());
  int ok_plain = 0, ok_boost = 0;
  for (std::size_t i = 0; i < probs.size(); ++i) {
    const VoteOutcome plain = majority_vote(probs[i]);
    const VoteOutcome boost = boosted_vote(probs[i], boost_n);
    if (plain.failed_top1) ++row.failed_plain;
    if (boost.boost_tie) ++row.failed_boosted;
    if (plain.prediction == labels[i]) ++ok_plain;
    if (boost.prediction == labels[i]) ++ok_boost;
  }
  if (row.samples > 0) {
    row.acc_plain = static_cast<double>(ok_plain) / row.samples;
    row.acc_boosted = static_cast<double>(ok_boost) / row.samples;
    row.accuracy_improved = row.acc_boosted - row.acc_plain;
  }
  return row;
}

}  // namespace dkd
