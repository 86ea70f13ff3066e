#include "dkd/attacks.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <limits>
#include <stdexcept>
#include <utility>

#include "json.hpp"

namespace dkd {

namespace {

constexpr double kInf = std::numeric_limits<double>::infinity();

double sgn(double v) { return v > 0.0 ? 1.0 : (v < 0.0 ? -1.0 : 0.0); }

double clamp01(double v) { return std::min(1.0, std::max(0.0, v)); }

// First index of the maximum (ties resolve to the lowest class id).
int argmax_at(const std::vector<double>& v, std::int64_t off, int k) {
  int best = 0;
  for (int c = 1; c < k; ++c)
    if (v[off + c] > v[off + best]) best = c;
  return best;
}

int argmax_excluding(const std::vector<double>& v, std::int64_t off, int k, int skip) {
  int best = -1;
  for (int c = 0; c < k; ++c) {
    if (c == skip) continue;
    if (best < 0 || v[off + c] > v[off + best]) best = c;
  }
  return best;
}

int predict(const ModelGraph& model, const std::vector<double>& vals,
            const std::vector<int>& shape) {
  Tensor probe = Tensor::from(vals, shape, false);
  ForwardResult fwd = model.forward(probe);
  return argmax_at(fwd.logits.values(), 0, model.num_classes());
}

void finalize_norms(AttackResult& r, const std::vector<double>& original) {
  const std::size_t px = original.size();
  r.perturbation.resize(px);
  double linf = 0.0, sq = 0.0;
  for (std::size_t p = 0; p < px; ++p) {
    const double d = r.adversarial[p] - original[p];
    r.perturbation[p] = d;
    linf = std::max(linf, std::abs(d));
    sq += d * d;
  }
  r.linf = linf;
  r.l2 = std::sqrt(sq);
}

void check_single_sample(const Tensor& x, int label, int classes) {
  const auto& s = x.shape();
  if (s.size() != 4 || s[0] != 1)
    throw std::invalid_argument("attack input must be a [1,C,H,W] tensor");
  if (label < 0 || label >= classes) throw std::invalid_argument("attack label out of range");
}

// Input gradient of one logit; the tape stays live so repeated sweeps over
// different class selections reuse the same forward pass.
std::vector<double> logit_input_grad(Tensor& x_leaf, const Tensor& logits, int c) {
  x_leaf.zero_grad();
  backward(select_scalar(logits, c));
  std::vector<double> g = x_leaf.grad();
  for (double v : g)
    if (!std::isfinite(v)) throw std::runtime_error("non-finite input gradient during attack");
  return g;
}

}  // namespace

std::string to_string(AttackKind k) {
  switch (k) {
    case AttackKind::fgsm: return "fgsm";
    case AttackKind::deepfool: return "deepfool";
    case AttackKind::jsma: return "jsma";
    case AttackKind::cw: return "cw";
  }
  throw std::logic_error("unknown attack kind");
}

AttackKind attack_from_string(const std::string& s) {
  if (s == "fgsm") return AttackKind::fgsm;
  if (s == "deepfool") return AttackKind::deepfool;
  if (s == "jsma") return AttackKind::jsma;
  if (s == "cw") return AttackKind::cw;
  throw std::invalid_argument("unknown attack: " + s);
}

// --------------------------------------------------------------------------
// FGSM
// --------------------------------------------------------------------------

std::vector<AttackResult> fgsm_batch(const ModelGraph& model, const Tensor& x,
                                     const std::vector<int>& labels, double epsilon) {
  if (epsilon < 0.0) throw std::invalid_argument("fgsm epsilon must be non-negative");
  const auto& shape = x.shape();
  if (shape.size() != 4) throw std::invalid_argument("fgsm input must be [N,C,H,W]");
  const int n = shape[0];
  const int k = model.num_classes();
  if (static_cast<int>(labels.size()) != n)
    throw std::invalid_argument("fgsm label count does not match batch");
  for (int lb : labels)
    if (lb < 0 || lb >= k) throw std::invalid_argument("fgsm label out of range");
  const std::int64_t px = x.numel() / n;

  Tensor leaf = Tensor::from(x.values(), shape, true);
  ForwardResult fwd = model.forward(leaf);
  backward(cross_entropy_mean(fwd.probs, labels));
  const std::vector<double>& g = leaf.grad();
  const std::vector<double>& orig = x.values();

  std::vector<double> adv(orig.size());
  std::vector<AttackResult> out(n);
  for (int i = 0; i < n; ++i) {
    bool any_grad = false;
    for (std::int64_t p = 0; p < px; ++p) {
      const double gv = g[i * px + p];
      if (gv != 0.0) any_grad = true;
      const double o = orig[i * px + p];
      double a = clamp01(o + epsilon * sgn(gv));
      // Addition rounding can push the measured step half an ulp past the
      // budget; walk back so |adv - x| <= epsilon holds exactly.
      while (std::abs(a - o) > epsilon) a = std::nextafter(a, o);
      adv[i * px + p] = a;
    }
    if (!any_grad) {  // dead gradient: leave the input untouched, flag it
      for (std::int64_t p = 0; p < px; ++p) adv[i * px + p] = orig[i * px + p];
      out[i].flagged = true;
    }
    out[i].iterations_used = 1;
  }

  Tensor advt = Tensor::from(adv, shape, false);
  const ForwardResult adv_fwd = model.forward(advt);
  const std::vector<double>& logits = adv_fwd.logits.values();
  for (int i = 0; i < n; ++i) {
    out[i].adversarial.assign(adv.begin() + i * px, adv.begin() + (i + 1) * px);
    out[i].success = argmax_at(logits, static_cast<std::int64_t>(i) * k, k) != labels[i];
    std::vector<double> row(orig.begin() + i * px, orig.begin() + (i + 1) * px);
    finalize_norms(out[i], row);
  }
  return out;
}

AttackResult fgsm(const ModelGraph& model, const Tensor& x, int label, double epsilon) {
  check_single_sample(x, label, model.num_classes());
  return fgsm_batch(model, x, {label}, epsilon)[0];
}

// --------------------------------------------------------------------------
// DeepFool
// --------------------------------------------------------------------------

AttackResult deepfool(const ModelGraph& model, const Tensor& x, int label, int max_iter,
                      double overshoot) {
  const int k = model.num_classes();
  check_single_sample(x, label, k);
  if (max_iter < 1) throw std::invalid_argument("deepfool max_iter must be positive");
  if (overshoot < 0.0) throw std::invalid_argument("deepfool overshoot must be non-negative");

  const std::vector<double> x0 = x.values();
  const std::size_t px = x0.size();
  AttackResult r;

  if (predict(model, x0, x.shape()) != label) {  // nothing to do: already wrong
    r.adversarial = x0;
    r.success = true;
    r.flagged = true;
    finalize_norms(r, x0);
    return r;
  }

  std::vector<double> cur = x0, r_total(px, 0.0);
  bool crossed = false, degenerate = false;
  for (int it = 0; it < max_iter; ++it) {
    Tensor xc = Tensor::from(cur, x.shape(), true);
    ForwardResult fwd = model.forward(xc);
    const std::vector<double> vals = fwd.logits.values();
    if (argmax_at(vals, 0, k) != label) {
      crossed = true;
      break;
    }
    std::vector<std::vector<double>> g(k);
    for (int c = 0; c < k; ++c) g[c] = logit_input_grad(xc, fwd.logits, c);

    // Closest linearized boundary: minimize |f_c - f_label| / ||w_c||.
    int best = -1;
    double best_score = kInf, best_f = 0.0, best_wn2 = 0.0;
    std::vector<double> best_w;
    for (int c = 0; c < k; ++c) {
      if (c == label) continue;
      std::vector<double> w(px);
      double wn2 = 0.0;
      for (std::size_t p = 0; p < px; ++p) {
        w[p] = g[c][p] - g[label][p];
        wn2 += w[p] * w[p];
      }
      if (wn2 < 1e-60) continue;
      const double f = vals[c] - vals[label];
      const double score = std::abs(f) / std::sqrt(wn2);
      if (score < best_score) {
        best_score = score;
        best = c;
        best_f = f;
        best_wn2 = wn2;
        best_w = std::move(w);
      }
    }
    if (best < 0) {  // all boundary normals vanished
      degenerate = true;
      break;
    }
    const double coef = (std::abs(best_f) + 1e-12) / best_wn2;
    for (std::size_t p = 0; p < px; ++p) {
      const double step = coef * best_w[p];
      cur[p] += step;
      r_total[p] += step;
    }
    ++r.iterations_used;
  }

  r.adversarial.resize(px);
  for (std::size_t p = 0; p < px; ++p)
    r.adversarial[p] = clamp01(x0[p] + (1.0 + overshoot) * r_total[p]);
  r.success = predict(model, r.adversarial, x.shape()) != label;
  r.flagged = degenerate || !crossed;
  finalize_norms(r, x0);
  return r;
}

// --------------------------------------------------------------------------
// JSMA (increasing-feature, pairwise saliency)
// --------------------------------------------------------------------------

AttackResult jsma(const ModelGraph& model, const Tensor& x, int label, int target,
                  int max_pixels, double theta) {
  const int k = model.num_classes();
  check_single_sample(x, label, k);
  if (theta <= 0.0) throw std::invalid_argument("jsma theta must be positive");
  if (max_pixels < 1) throw std::invalid_argument("jsma max_pixels must be positive");
  if (target >= k) throw std::invalid_argument("jsma target out of range");
  if (target == label) throw std::invalid_argument("jsma target equals the true label");
  const bool explicit_target = target >= 0;

  const std::vector<double> x0 = x.values();
  const std::size_t px = x0.size();
  AttackResult r;

  {
    Tensor probe = Tensor::from(x0, x.shape(), false);
    const std::vector<double> v0 = model.forward(probe).logits.values();
    if (argmax_at(v0, 0, k) != label) {
      r.adversarial = x0;
      r.success = true;
      r.flagged = true;
      finalize_norms(r, x0);
      return r;
    }
    if (!explicit_target) target = argmax_excluding(v0, 0, k, label);  // runner-up
  }

  std::vector<double> cur = x0;
  bool reached = false, no_pair = false;
  for (int step = 0; step < max_pixels; ++step) {
    Tensor xc = Tensor::from(cur, x.shape(), true);
    ForwardResult fwd = model.forward(xc);
    const std::vector<double> vals = fwd.logits.values();
    const int pred = argmax_at(vals, 0, k);
    if (explicit_target ? pred == target : pred != label) {
      reached = true;
      break;
    }

    std::vector<std::vector<double>> g(k);
    for (int c = 0; c < k; ++c) g[c] = logit_input_grad(xc, fwd.logits, c);
    std::vector<double> alpha = g[target], beta(px, 0.0);
    for (int c = 0; c < k; ++c) {
      if (c == target) continue;
      for (std::size_t p = 0; p < px; ++p) beta[p] += g[c][p];
    }

    // Best admissible pair: target gradient up, everything else down.
    std::vector<std::size_t> domain;
    for (std::size_t p = 0; p < px; ++p)
      if (cur[p] < 1.0 - 1e-12) domain.push_back(p);
    std::size_t bp = 0, bq = 0;
    double best_score = -kInf;
    for (std::size_t a = 0; a + 1 < domain.size(); ++a) {
      for (std::size_t b = a + 1; b < domain.size(); ++b) {
        const std::size_t p = domain[a], q = domain[b];
        const double up = alpha[p] + alpha[q];
        const double down = beta[p] + beta[q];
        if (up <= 0.0 || down >= 0.0) continue;
        const double score = -up * down;
        if (score > best_score) {
          best_score = score;
          bp = p;
          bq = q;
        }
      }
    }
    if (best_score == -kInf) {
      no_pair = true;
      break;
    }
    cur[bp] = std::min(1.0, cur[bp] + theta);
    cur[bq] = std::min(1.0, cur[bq] + theta);
    ++r.iterations_used;
  }

  r.adversarial = cur;
  const int final_pred = predict(model, cur, x.shape());
  r.success = final_pred != label;
  if (!reached && !no_pair)  // budget ran out; the very last step may still have landed
    reached = explicit_target ? final_pred == target : final_pred != label;
  r.flagged = no_pair || !reached;
  finalize_norms(r, x0);
  return r;
}

// --------------------------------------------------------------------------
// Carlini-Wagner L2
// --------------------------------------------------------------------------

AttackResult cw_l2(const ModelGraph& model, const Tensor& x, int label, double initial_c,
                   int iterations, double lr, int binary_steps) {
  const int k = model.num_classes();
  check_single_sample(x, label, k);
  if (initial_c <= 0.0) throw std::invalid_argument("cw initial c must be positive");
  if (iterations < 1) throw std::invalid_argument("cw iterations must be positive");
  if (lr <= 0.0) throw std::invalid_argument("cw learning rate must be positive");
  if (binary_steps < 1) throw std::invalid_argument("cw binary steps must be positive");

  const std::vector<double> x0 = x.values();
  const std::size_t px = x0.size();
  Tensor x0t = Tensor::from(x0, x.shape(), false);

  // tanh reparameterization keeps every iterate strictly inside the box.
  std::vector<double> u0(px);
  for (std::size_t p = 0; p < px; ++p) {
    const double xt = std::min(1.0 - 1e-6, std::max(1e-6, x0[p]));
    u0[p] = std::atanh(2.0 * xt - 1.0);
  }

  AttackResult r;
  double lo = 0.0, hi = kInf, c = initial_c;
  double best_l2 = kInf;
  std::vector<double> best_adv, last_iterate = x0;

  for (int bs = 0; bs < binary_steps; ++bs) {
    Tensor u = Tensor::from(u0, x.shape(), true);
    std::vector<Tensor> opt{u};
    AdamState st;
    AdamConfig acfg;
    acfg.lr = lr;
    bool step_success = false;

    for (int it = 0; it < iterations; ++it) {
      Tensor xs = scalar_affine(tanh_t(u), 0.5, 0.5);
      ForwardResult fwd = model.forward(xs);
      const std::vector<double> vals = fwd.logits.values();
      const std::vector<double>& xsv = xs.values();
      last_iterate = xsv;

      if (argmax_at(vals, 0, k) != label) {
        double sq = 0.0;
        for (std::size_t p = 0; p < px; ++p) sq += (xsv[p] - x0[p]) * (xsv[p] - x0[p]);
        const double l2 = std::sqrt(sq);
        step_success = true;
        if (l2 < best_l2) {
          best_l2 = l2;
          best_adv = xsv;
        }
      }

      // distortion + c * relu(f_label - best other logit)   (kappa = 0)
      const int other = argmax_excluding(vals, 0, k, label);
      Tensor margin = sub(select_scalar(fwd.logits, label), select_scalar(fwd.logits, other));
      Tensor d = sub(xs, x0t);
      Tensor loss = add(sum(mul(d, d)), mul_scalar(relu(margin), c));
      backward(loss);
      adam_step(opt, st, acfg);
      ++r.iterations_used;
    }

    r.best_l2_trace.push_back(best_l2);
    if (step_success)
      hi = c;
    else
      lo = c;
    c = std::isfinite(hi) ? 0.5 * (lo + hi) : c * 10.0;
  }

  if (!best_adv.empty()) {
    r.adversarial = std::move(best_adv);
    r.success = true;
  } else {
    r.adversarial = std::move(last_iterate);
    r.success = false;
    r.flagged = true;
  }
  finalize_norms(r, x0);
  return r;
}

AttackResult run_attack(const ModelGraph& model, const Tensor& x, int label,
                        const AttackConfig& cfg) {
  switch (cfg.kind) {
    case AttackKind::fgsm:
      return fgsm(model, x, label, cfg.epsilon);
    case AttackKind::deepfool:
      return deepfool(model, x, label, cfg.iterations, cfg.deepfool_overshoot);
    case AttackKind::jsma:
      return jsma(model, x, label, cfg.jsma_target, cfg.jsma_max_pixels, cfg.jsma_theta);
    case AttackKind::cw:
      return cw_l2(model, x, label, cfg.cw_initial_c, cfg.iterations, cfg.cw_lr,
                   cfg.cw_binary_steps);
  }
  throw std::logic_error("unknown attack kind");
}

std::vector<double> aggregate_perturbations(const std::vector<std::vector<double>>& taus,
                                            AttackKind kind, double epsilon) {
  if (taus.empty()) throw std::invalid_argument("no perturbations to aggregate");
  const std::size_t px = taus.front().size();
  std::vector<double> sum(px, 0.0);
  for (const auto& t : taus) {
    if (t.size() != px) throw std::invalid_argument("perturbation sizes differ");
    for (std::size_t p = 0; p < px; ++p) sum[p] += t[p];
  }
  if (kind == AttackKind::fgsm)  // keep the aggregate inside the L-inf budget
    for (double& v : sum) v = std::min(epsilon, std::max(-epsilon, v));
  return sum;
}

// --------------------------------------------------------------------------
// Evaluation helpers
// --------------------------------------------------------------------------

double model_accuracy(const ModelGraph& model, const Dataset& data, int chunk) {
  if (data.size() == 0) throw std::invalid_argument("accuracy over an empty dataset");
  if (chunk < 1) throw std::invalid_argument("chunk must be positive");
  const int n = data.size();
  const int k = model.num_classes();
  int correct = 0;
  for (int i0 = 0; i0 < n; i0 += chunk) {
    const int i1 = std::min(n, i0 + chunk);
    std::vector<int> idx(i1 - i0);
    for (int i = i0; i < i1; ++i) idx[i - i0] = i;
    const ForwardResult fwd = model.forward(data.batch(idx));
    const std::vector<double>& logits = fwd.logits.values();
    for (int i = i0; i < i1; ++i)
      if (argmax_at(logits, static_cast<std::int64_t>(i - i0) * k, k) == data.labels[i])
        ++correct;
  }
  return static_cast<double>(correct) / n;
}

std::vector<std::vector<std::vector<double>>> ensemble_probs(
    const std::vector<ModelGraph>& members, const Dataset& data, int chunk) {
  if (members.empty()) throw std::invalid_argument("ensemble_probs needs at least one member");
  if (data.size() == 0) throw std::invalid_argument("ensemble_probs over an empty dataset");
  if (chunk < 1) throw std::invalid_argument("chunk must be positive");
  const int n = data.size();
  const int m = static_cast<int>(members.size());
  std::vector<std::vector<std::vector<double>>> out(
      n, std::vector<std::vector<double>>(m));
  for (int mi = 0; mi < m; ++mi) {
    const int k = members[mi].num_classes();
    for (int i0 = 0; i0 < n; i0 += chunk) {
      const int i1 = std::min(n, i0 + chunk);
      std::vector<int> idx(i1 - i0);
      for (int i = i0; i < i1; ++i) idx[i - i0] = i;
      const ForwardResult fwd = members[mi].forward_boxed(data.batch(idx));
      const std::vector<double>& probs = fwd.probs.values();
      for (int i = i0; i < i1; ++i)
        out[i][mi].assign(probs.begin() + static_cast<std::int64_t>(i - i0) * k,
                          probs.begin() + static_cast<std::int64_t>(i - i0 + 1) * k);
    }
  }
  return out;
}

LatentCloud extract_latent_cloud(const ModelGraph& model, const Dataset& data,
                                 int source_model, int chunk) {
  if (data.size() == 0) throw std::invalid_argument("latent cloud over an empty dataset");
  if (chunk < 1) throw std::invalid_argument("chunk must be positive");
  LatentCloud cloud;
  cloud.dim = model.latent_dim();
  cloud.source_model = source_model;
  cloud.tap = model.tap();
  cloud.points.reserve(static_cast<std::size_t>(data.size()) * cloud.dim);
  const int n = data.size();
  for (int i0 = 0; i0 < n; i0 += chunk) {
    const int i1 = std::min(n, i0 + chunk);
    std::vector<int> idx(i1 - i0);
    for (int i = i0; i < i1; ++i) idx[i - i0] = i;
    const ForwardResult fwd = model.forward_boxed(data.batch(idx));
    const std::vector<double>& lat = fwd.latent.values();
    cloud.points.insert(cloud.points.end(), lat.begin(), lat.end());
  }
  return cloud;
}

// --------------------------------------------------------------------------
// Protocols
// --------------------------------------------------------------------------

namespace {

// Craft one adversarial per sample; sources[i] indexes the crafting pool,
// record_ids[i] is stored in the result. fgsm takes the batched fast path.
std::vector<AttackResult> craft_stream(const std::vector<const ModelGraph*>& pool,
                                       const std::vector<int>& sources,
                                       const std::vector<int>& record_ids,
                                       const AttackConfig& cfg, const Dataset& data) {
  const int n = data.size();
  std::vector<AttackResult> out(n);
  if (cfg.kind == AttackKind::fgsm) {
    const int chunk = 128;
    for (int i0 = 0; i0 < n; i0 += chunk) {
      const int i1 = std::min(n, i0 + chunk);
      for (std::size_t s = 0; s < pool.size(); ++s) {
        std::vector<int> idx;
        for (int i = i0; i < i1; ++i)
          if (sources[i] == static_cast<int>(s)) idx.push_back(i);
        if (idx.empty()) continue;
        std::vector<int> lbs(idx.size());
        for (std::size_t j = 0; j < idx.size(); ++j) lbs[j] = data.labels[idx[j]];
        std::vector<AttackResult> rs = fgsm_batch(*pool[s], data.batch(idx), lbs, cfg.epsilon);
        for (std::size_t j = 0; j < idx.size(); ++j) out[idx[j]] = std::move(rs[j]);
      }
    }
  } else {
    for (int i = 0; i < n; ++i)
      out[i] = run_attack(*pool[sources[i]], data.sample(i), data.labels[i], cfg);
  }
  for (int i = 0; i < n; ++i) out[i].source_model = record_ids[i];
  return out;
}

Dataset stream_to_dataset(const Dataset& base, const std::vector<AttackResult>& results,
                          const std::string& name) {
  Dataset adv;
  adv.name = name;
  adv.channels = base.channels;
  adv.height = base.height;
  adv.width = base.width;
  adv.labels = base.labels;
  adv.images.reserve(base.images.size());
  for (const AttackResult& r : results)
    adv.images.insert(adv.images.end(), r.adversarial.begin(), r.adversarial.end());
  return adv;
}

ProtocolReport evaluate_stream(const std::vector<ModelGraph>& ensemble, Dataset adv,
                               const std::string& protocol, const AttackConfig& cfg,
                               int boost_n) {
  ProtocolReport rep;
  rep.protocol = protocol;
  rep.attack = to_string(cfg.kind);
  const auto probs = ensemble_probs(ensemble, adv);
  rep.census = failed_majority_census(probs, adv.labels, boost_n, protocol + ":" + rep.attack);
  rep.plain_accuracy = rep.census.acc_plain;
  rep.boosted_accuracy = rep.census.acc_boosted;
  rep.adversarial_set = std::move(adv);
  return rep;
}

void check_protocol_args(const std::vector<ModelGraph>& ensemble, const Dataset& data) {
  if (ensemble.size() < 2)
    throw std::invalid_argument("voting protocols need at least two ensemble members");
  if (data.size() == 0) throw std::invalid_argument("protocol over an empty dataset");
}

}  // namespace

double attacked_accuracy(const ModelGraph& model, const AttackConfig& cfg, const Dataset& data) {
  if (data.size() == 0) throw std::invalid_argument("attacked_accuracy over an empty dataset");
  const std::vector<const ModelGraph*> pool{&model};
  const std::vector<int> zeros(data.size(), 0), ids(data.size(), -1);
  const std::vector<AttackResult> rs = craft_stream(pool, zeros, ids, cfg, data);
  int correct = 0;
  for (const AttackResult& r : rs)
    if (!r.success) ++correct;
  return static_cast<double>(correct) / data.size();
}

ProtocolReport blackbox_transfer(const ModelGraph& reference,
                                 const std::vector<ModelGraph>& ensemble,
                                 const AttackConfig& cfg, const Dataset& data, int boost_n) {
  check_protocol_args(ensemble, data);
  const std::vector<const ModelGraph*> pool{&reference};
  const std::vector<int> zeros(data.size(), 0), ids(data.size(), -1);
  std::vector<AttackResult> rs = craft_stream(pool, zeros, ids, cfg, data);
  Dataset adv = stream_to_dataset(data, rs, data.name + ":" + to_string(cfg.kind));
  ProtocolReport rep = evaluate_stream(ensemble, std::move(adv), "blackbox", cfg, boost_n);
  rep.ref_accuracy = model_accuracy(reference, rep.adversarial_set);
  rep.per_sample = std::move(rs);
  return rep;
}

ProtocolReport whitebox_projected(const std::vector<ModelGraph>& ensemble,
                                  const AttackConfig& cfg, const Dataset& data, int boost_n) {
  check_protocol_args(ensemble, data);
  const int k = static_cast<int>(ensemble.size());
  std::vector<const ModelGraph*> pool(k);
  for (int m = 0; m < k; ++m) pool[m] = &ensemble[m];
  std::vector<int> sources(data.size());
  for (int i = 0; i < data.size(); ++i) sources[i] = i % k;  // round-robin source
  std::vector<AttackResult> rs = craft_stream(pool, sources, sources, cfg, data);
  Dataset adv = stream_to_dataset(data, rs, data.name + ":" + to_string(cfg.kind));
  ProtocolReport rep = evaluate_stream(ensemble, std::move(adv), "projected", cfg, boost_n);
  rep.per_sample = std::move(rs);
  return rep;
}

ProtocolReport whitebox_aggregated(const std::vector<ModelGraph>& ensemble,
                                   const AttackConfig& cfg, const Dataset& data, int boost_n) {
  check_protocol_args(ensemble, data);
  const int n = data.size();
  const int k = static_cast<int>(ensemble.size());
  const std::int64_t px = data.pixels_per_image();

  Dataset adv;
  adv.name = data.name + ":" + to_string(cfg.kind);
  adv.channels = data.channels;
  adv.height = data.height;
  adv.width = data.width;
  adv.labels = data.labels;
  adv.images.resize(data.images.size());

  const int chunk = 128;
  for (int i0 = 0; i0 < n; i0 += chunk) {
    const int i1 = std::min(n, i0 + chunk);
    std::vector<int> idx(i1 - i0);
    for (int i = i0; i < i1; ++i) idx[i - i0] = i;
    // taus[member][sample within chunk]
    std::vector<std::vector<std::vector<double>>> taus(k);
    if (cfg.kind == AttackKind::fgsm) {
      std::vector<int> lbs(idx.size());
      for (std::size_t j = 0; j < idx.size(); ++j) lbs[j] = data.labels[idx[j]];
      const Tensor xb = data.batch(idx);
      for (int m = 0; m < k; ++m) {
        std::vector<AttackResult> rs = fgsm_batch(ensemble[m], xb, lbs, cfg.epsilon);
        taus[m].resize(rs.size());
        for (std::size_t j = 0; j < rs.size(); ++j) taus[m][j] = std::move(rs[j].perturbation);
      }
    } else {
      for (int m = 0; m < k; ++m) {
        taus[m].resize(idx.size());
        for (std::size_t j = 0; j < idx.size(); ++j)
          taus[m][j] =
              run_attack(ensemble[m], data.sample(idx[j]), data.labels[idx[j]], cfg).perturbation;
      }
    }
    for (std::size_t j = 0; j < idx.size(); ++j) {
      std::vector<std::vector<double>> member_taus(k);
      for (int m = 0; m < k; ++m) member_taus[m] = std::move(taus[m][j]);
      const std::vector<double> tau =
          aggregate_perturbations(member_taus, cfg.kind, cfg.epsilon);
      const std::int64_t off = static_cast<std::int64_t>(idx[j]) * px;
      for (std::int64_t p = 0; p < px; ++p) {
        const double o = data.images[off + p];
        double a = clamp01(o + tau[p]);
        if (cfg.kind == AttackKind::fgsm)  // keep the applied step on budget
          while (std::abs(a - o) > cfg.epsilon) a = std::nextafter(a, o);
        adv.images[off + p] = a;
      }
    }
  }
  return evaluate_stream(ensemble, std::move(adv), "aggregated", cfg, boost_n);
}

// --------------------------------------------------------------------------
// Persistence
// --------------------------------------------------------------------------

namespace {

constexpr char kBatchMagic[8] = {'D', 'K', 'D', 'A', 'D', 'V', '1', '\n'};

nlohmann::json config_to_json(const AttackConfig& cfg) {
  return {{"attack", to_string(cfg.kind)},
          {"epsilon", cfg.epsilon},
          {"iterations", cfg.iterations},
          {"deepfool_overshoot", cfg.deepfool_overshoot},
          {"jsma_theta", cfg.jsma_theta},
          {"jsma_max_pixels", cfg.jsma_max_pixels},
          {"jsma_target", cfg.jsma_target},
          {"cw_initial_c", cfg.cw_initial_c},
          {"cw_lr", cfg.cw_lr},
          {"cw_binary_steps", cfg.cw_binary_steps}};
}

AttackConfig config_from_json(const nlohmann::json& j) {
  AttackConfig cfg;
  cfg.kind = attack_from_string(j.at("attack").get<std::string>());
  cfg.epsilon = j.at("epsilon").get<double>();
  cfg.iterations = j.at("iterations").get<int>();
  cfg.deepfool_overshoot = j.at("deepfool_overshoot").get<double>();
  cfg.jsma_theta = j.at("jsma_theta").get<double>();
  cfg.jsma_max_pixels = j.at("jsma_max_pixels").get<int>();
  cfg.jsma_target = j.at("jsma_target").get<int>();
  cfg.cw_initial_c = j.at("cw_initial_c").get<double>();
  cfg.cw_lr = j.at("cw_lr").get<double>();
  cfg.cw_binary_steps = j.at("cw_binary_steps").get<int>();
  return cfg;
}

}  // namespace

void save_attack_batch(const std::string& path_prefix, const std::vector<AttackResult>& results,
                       const AttackConfig& cfg, const std::string& dataset_name) {
  if (results.empty()) throw std::invalid_argument("nothing to save in attack batch");
  const std::size_t px = results.front().adversarial.size();
  for (const AttackResult& r : results)
    if (r.adversarial.size() != px || r.perturbation.size() != px)
      throw std::invalid_argument("attack batch has inconsistent sample sizes");

  std::ofstream bin(path_prefix + ".bin", std::ios::binary);
  if (!bin) throw std::runtime_error("cannot write " + path_prefix + ".bin");
  const std::uint32_t count = static_cast<std::uint32_t>(results.size());
  const std::uint32_t pixels = static_cast<std::uint32_t>(px);
  bin.write(kBatchMagic, sizeof kBatchMagic);
  bin.write(reinterpret_cast<const char*>(&count), sizeof count);
  bin.write(reinterpret_cast<const char*>(&pixels), sizeof pixels);
  for (const AttackResult& r : results)
    bin.write(reinterpret_cast<const char*>(r.adversarial.data()),
              static_cast<std::streamsize>(px * sizeof(double)));
  for (const AttackResult& r : results)
    bin.write(reinterpret_cast<const char*>(r.perturbation.data()),
              static_cast<std::streamsize>(px * sizeof(double)));
  if (!bin) throw std::runtime_error("short write on " + path_prefix + ".bin");

  nlohmann::json meta = config_to_json(cfg);
  meta["dataset"] = dataset_name;
  meta["count"] = count;
  meta["pixels"] = pixels;
  nlohmann::json samples = nlohmann::json::array();
  for (const AttackResult& r : results)
    samples.push_back({{"source", r.source_model},
                       {"success", r.success},
                       {"flagged", r.flagged},
                       {"linf", r.linf},
                       {"l2", r.l2},
                       {"iterations", r.iterations_used}});
  meta["samples"] = std::move(samples);
  std::ofstream js(path_prefix + ".json");
  if (!js) throw std::runtime_error("cannot write " + path_prefix + ".json");
  js << meta.dump(2) << "\n";
  if (!js) throw std::runtime_error("short write on " + path_prefix + ".json");
}

std::vector<AttackResult> load_attack_batch(const std::string& path_prefix, AttackConfig* cfg,
                                            std::string* dataset_name) {
  std::ifstream bin(path_prefix + ".bin", std::ios::binary);
  if (!bin) throw std::runtime_error("cannot open " + path_prefix + ".bin");
  char magic[sizeof kBatchMagic];
  std::uint32_t count = 0, pixels = 0;
  bin.read(magic, sizeof magic);
  bin.read(reinterpret_cast<char*>(&count), sizeof count);
  bin.read(reinterpret_cast<char*>(&pixels), sizeof pixels);
  if (!bin || std::memcmp(magic, kBatchMagic, sizeof magic) != 0)
    throw std::runtime_error("bad attack batch header in " + path_prefix + ".bin");
  if (count == 0 || pixels == 0)
    throw std::runtime_error("empty attack batch in " + path_prefix + ".bin");

  const std::size_t plane = static_cast<std::size_t>(count) * pixels;
  std::vector<double> adv(plane), pert(plane);
  bin.read(reinterpret_cast<char*>(adv.data()),
           static_cast<std::streamsize>(plane * sizeof(double)));
  bin.read(reinterpret_cast<char*>(pert.data()),
           static_cast<std::streamsize>(plane * sizeof(double)));
  if (!bin) throw std::runtime_error("truncated attack batch in " + path_prefix + ".bin");
  bin.peek();
  if (!bin.eof()) throw std::runtime_error("trailing bytes in " + path_prefix + ".bin");

  std::ifstream js(path_prefix + ".json");
  if (!js) throw std::runtime_error("cannot open " + path_prefix + ".json");
  nlohmann::json meta = nlohmann::json::parse(js);
  if (meta.at("count").get<std::uint32_t>() != count ||
      meta.at("pixels").get<std::uint32_t>() != pixels)
    throw std::runtime_error("attack batch metadata disagrees with " + path_prefix + ".bin");
  const nlohmann::json& samples = meta.at("samples");
  if (samples.size() != count)
    throw std::runtime_error("attack batch sample list has the wrong length");
  if (cfg) *cfg = config_from_json(meta);
  if (dataset_name) *dataset_name = meta.at("dataset").get<std::string>();

  std::vector<AttackResult> out(count);
  for (std::uint32_t i = 0; i < count; ++i) {
    AttackResult& r = out[i];
    r.adversarial.assign(adv.begin() + static_cast<std::size_t>(i) * pixels,
                         adv.begin() + static_cast<std::size_t>(i + 1) * pixels);
    r.perturbation.assign(pert.begin() + static_cast<std::size_t>(i) * pixels,
                          pert.begin() + static_cast<std::size_t>(i + 1) * pixels);
    const nlohmann::json& s = samples[i];
    r.source_model = s.at("source").get<int>();
    r.success = s.at("success").get<bool>();
    r.flagged = s.at("flagged").get<bool>();
    r.linf = s.at("linf").get<double>();
    r.l2 = s.at("l2").get<double>();
    r.iterations_used = s.at("iterations").get<int>();
  }
  return out;
}

}  // namespace dkd
