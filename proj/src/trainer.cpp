#include "dkd/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <stdexcept>
#include <utility>

#include "dkd/attacks.hpp"
#include "dkd/checkpoint.hpp"
#include "dkd/losses.hpp"
#include "dkd/rng.hpp"

namespace fs = std::filesystem;

namespace dkd {

std::string to_string(TrainMode m) {
  switch (m) {
    case TrainMode::ri: return "ri";
    case TrainMode::kd: return "kd";
    case TrainMode::dkd: return "dkd";
  }
  throw std::logic_error("unknown train mode");
}

TrainMode mode_from_string(const std::string& s) {
  if (s == "ri") return TrainMode::ri;
  if (s == "kd") return TrainMode::kd;
  if (s == "dkd") return TrainMode::dkd;
  throw std::invalid_argument("unknown train mode: " + s);
}

namespace {

void validate_config(const TrainConfig& cfg) {
  if (cfg.ensemble_size < 1) throw std::invalid_argument("ensemble_size must be >= 1");
  if (cfg.epochs < 0) throw std::invalid_argument("epochs must be >= 0");
  if (cfg.batch_size < 1) throw std::invalid_argument("batch_size must be >= 1");
  if (cfg.lr <= 0.0) throw std::invalid_argument("lr must be positive");
  if (cfg.zeta < 0.0 || cfg.zeta > 1.0) throw std::invalid_argument("zeta must lie in [0,1]");
  if (cfg.kd_temperature <= 0.0) throw std::invalid_argument("kd_temperature must be positive");
  if (cfg.validation_fraction < 0.0 || cfg.validation_fraction > 0.9)
    throw std::invalid_argument("validation_fraction must lie in [0, 0.9]");
  if (cfg.train_subset < 0 || cfg.test_subset < 0)
    throw std::invalid_argument("subset sizes must be non-negative");
}

std::uint64_t shuffle_key(std::uint64_t member_seed, int epoch) {
  return member_seed ^ (0x9e3779b97f4a7c15ULL * static_cast<std::uint64_t>(epoch + 1));
}

struct TrainSlices {
  Dataset train, val;
};

// The validation split is the fixed tail of the (already deterministic)
// training subset, so every mode/seed sees the same holdout rows.
TrainSlices split_train(const Dataset& full, double fraction) {
  const int n = full.size();
  int val_count = static_cast<int>(std::lround(fraction * n));
  val_count = std::max(0, std::min(val_count, n - 1));
  const int train_count = n - val_count;
  const std::int64_t px = full.pixels_per_image();

  TrainSlices s;
  s.train.name = full.name;
  s.train.channels = full.channels;
  s.train.height = full.height;
  s.train.width = full.width;
  s.val = s.train;
  s.train.images.assign(full.images.begin(), full.images.begin() + train_count * px);
  s.train.labels.assign(full.labels.begin(), full.labels.begin() + train_count);
  s.val.images.assign(full.images.begin() + train_count * px, full.images.end());
  s.val.labels.assign(full.labels.begin() + train_count, full.labels.end());
  return s;
}

// Per-predecessor activations over the training slice, computed once while
// the predecessors are frozen: [pred][row * width + col] row-major.
std::vector<std::vector<double>> cache_forward(const std::vector<const ModelGraph*>& models,
                                               const Dataset& data, bool latents) {
  const int n = data.size();
  std::vector<std::vector<double>> cache(models.size());
  for (std::size_t mi = 0; mi < models.size(); ++mi) {
    const int width = latents ? models[mi]->latent_dim() : models[mi]->num_classes();
    cache[mi].resize(static_cast<std::size_t>(n) * width);
    const int chunk = 256;
    for (int i0 = 0; i0 < n; i0 += chunk) {
      const int i1 = std::min(n, i0 + chunk);
      std::vector<int> idx(i1 - i0);
      std::iota(idx.begin(), idx.end(), i0);
      const ForwardResult fwd = models[mi]->forward(data.batch(idx));
      const std::vector<double>& src = latents ? fwd.latent.values() : fwd.logits.values();
      std::copy(src.begin(), src.end(),
                cache[mi].begin() + static_cast<std::size_t>(i0) * width);
    }
  }
  return cache;
}

void gather_rows(const std::vector<double>& cache, int width, const std::vector<int>& rows,
                 std::vector<double>& out) {
  out.resize(rows.size() * static_cast<std::size_t>(width));
  for (std::size_t j = 0; j < rows.size(); ++j)
    std::copy(cache.begin() + static_cast<std::size_t>(rows[j]) * width,
              cache.begin() + static_cast<std::size_t>(rows[j] + 1) * width,
              out.begin() + j * width);
}

ModelGraph train_member(const TrainConfig& cfg, int member_index,
                        const std::vector<ModelGraph>& predecessors, MemberHistory& hist) {
  const std::uint64_t mseed = cfg.seed + static_cast<std::uint64_t>(member_index);
  ModelGraph model = build_model(cfg.arch, mseed, cfg.tap_override);
  hist.member = member_index;

  const Dataset full = trainer_split(cfg, "train");
  const auto want = arch_input_shape(cfg.arch);
  if (full.channels != want[0] || full.height != want[1] || full.width != want[2])
    throw std::invalid_argument(
        "dataset '" + cfg.dataset + "' is " + std::to_string(full.channels) + "x" +
        std::to_string(full.height) + "x" + std::to_string(full.width) + " but arch '" +
        to_string(cfg.arch) + "' wants " + std::to_string(want[0]) + "x" +
        std::to_string(want[1]) + "x" + std::to_string(want[2]));
  const TrainSlices slices = split_train(full, cfg.validation_fraction);
  const Dataset& train = slices.train;
  const Dataset& val = slices.val;
  if (train.size() < 1) throw std::invalid_argument("training slice is empty");

  const bool use_dkd = cfg.mode == TrainMode::dkd && !predecessors.empty();
  const bool use_kd = cfg.mode == TrainMode::kd && !predecessors.empty();
  std::vector<const ModelGraph*> teachers;
  if (use_dkd || use_kd) {
    if (use_kd && cfg.kd_distill_main_only)
      teachers.push_back(&predecessors.front());
    else
      for (const ModelGraph& p : predecessors) teachers.push_back(&p);
  }
  const std::vector<std::vector<double>> cache =
      teachers.empty() ? std::vector<std::vector<double>>{}
                       : cache_forward(teachers, train, /*latents=*/use_dkd);
  const int cache_width = use_dkd ? model.latent_dim() : model.num_classes();

  AdamState opt;
  AdamConfig acfg;
  acfg.lr = cfg.lr;
  acfg.snap_to_f32 = true;  // parameters stay on the f32 checkpoint grid
  const int n = train.size();
  const int k = model.num_classes();
  const double zeta_eff = (use_dkd || use_kd) ? cfg.zeta : 0.0;

  std::vector<int> order(n);
  std::iota(order.begin(), order.end(), 0);
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    Rng rng(shuffle_key(mseed, epoch));
    std::iota(order.begin(), order.end(), 0);
    rng.shuffle(order);

    double sum_total = 0.0, sum_ce = 0.0, sum_div = 0.0;
    std::int64_t seen = 0, correct = 0;
    for (int b0 = 0; b0 < n; b0 += cfg.batch_size) {
      const int b1 = std::min(n, b0 + cfg.batch_size);
      const std::vector<int> idx(order.begin() + b0, order.begin() + b1);
      std::vector<int> yb(idx.size());
      for (std::size_t j = 0; j < idx.size(); ++j) yb[j] = train.labels[idx[j]];

      const ForwardResult fwd = model.forward(train.batch(idx));
      LossTerms terms;
      Tensor loss;
      std::vector<double> rowbuf;
      if (use_dkd) {
        std::vector<Tensor> frozen;
        frozen.reserve(cache.size());
        for (const std::vector<double>& c : cache) {
          gather_rows(c, cache_width, idx, rowbuf);
          frozen.push_back(
              Tensor::from(rowbuf, {static_cast<int>(idx.size()), cache_width}, false));
        }
        loss = dkd_loss(fwd.probs, yb, fwd.latent, frozen, cfg.zeta, &terms);
      } else if (use_kd) {
        std::vector<std::vector<double>> tlogits(cache.size());
        for (std::size_t t = 0; t < cache.size(); ++t)
          gather_rows(cache[t], cache_width, idx, tlogits[t]);
        loss = kd_loss(fwd.logits, yb, tlogits, cfg.zeta, cfg.kd_temperature, &terms);
      } else {
        loss = ce_loss(fwd.probs, yb, &terms);
      }

      if (!std::isfinite(terms.total))
        throw std::runtime_error("diverging loss: member " + std::to_string(member_index) +
                                 ", epoch " + std::to_string(epoch) + ", batch at " +
                                 std::to_string(b0));
      const double recomposed = (1.0 - zeta_eff) * terms.ce + zeta_eff * terms.diversity;
      if (std::abs(terms.total - recomposed) > 1e-6 * std::max(1.0, std::abs(terms.total)))
        throw std::logic_error("loss decomposition violated at member " +
                               std::to_string(member_index));

      const std::vector<double>& probs = fwd.probs.values();
      for (std::size_t j = 0; j < idx.size(); ++j) {
        int best = 0;
        for (int c = 1; c < k; ++c)
          if (probs[j * k + c] > probs[j * k + best]) best = c;
        if (best == yb[j]) ++correct;
      }
      const int bs = b1 - b0;
      sum_total += terms.total * bs;
      sum_ce += terms.ce * bs;
      sum_div += terms.diversity * bs;
      seen += bs;

      backward(loss);
      adam_step(model.parameters(), opt, acfg);
    }

    EpochStats es;
    es.epoch = epoch;
    es.total_loss = sum_total / static_cast<double>(seen);
    es.ce = sum_ce / static_cast<double>(seen);
    es.diversity = sum_div / static_cast<double>(seen);
    es.train_accuracy = static_cast<double>(correct) / static_cast<double>(seen);
    es.val_accuracy = val.size() > 0 ? model_accuracy(model, val) : es.train_accuracy;
    hist.epochs.push_back(es);
  }

  hist.final_train_accuracy = model_accuracy(model, train);
  hist.final_val_accuracy =
      val.size() > 0 ? model_accuracy(model, val) : hist.final_train_accuracy;
  return model;
}

void write_history_csv(const std::string& path, const MemberHistory& hist) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write history " + path);
  out << "epoch,total_loss,ce,diversity,train_accuracy,val_accuracy\n";
  char line[256];
  for (const EpochStats& e : hist.epochs) {
    std::snprintf(line, sizeof line, "%d,%.10g,%.10g,%.10g,%.10g,%.10g\n", e.epoch,
                  e.total_loss, e.ce, e.diversity, e.train_accuracy, e.val_accuracy);
    out << line;
  }
  if (!out) throw std::runtime_error("short write on history " + path);
}

}  // namespace

Dataset trainer_split(const TrainConfig& cfg, const std::string& split) {
  Dataset ds = load_dataset(cfg.dataset, split, cfg.data_dir);
  const int want = split == "train" ? cfg.train_subset : cfg.test_subset;
  if (want > 0 && want < ds.size()) ds = subset(ds, want, cfg.seed);
  return ds;
}

ModelGraph train_main(const TrainConfig& cfg) {
  validate_config(cfg);
  MemberHistory hist;
  return train_member(cfg, 0, {}, hist);
}

EnsembleState train_auxiliary(EnsembleState ens, const TrainConfig& cfg) {
  validate_config(cfg);
  if (ens.members.empty())
    throw std::invalid_argument("train_auxiliary needs at least one trained member");
  if (cfg.mode == TrainMode::ri)
    throw std::invalid_argument("RI members train independently via train_main");
  for (ModelGraph& m : ens.members) m.set_requires_grad(false);

  MemberHistory hist;
  ModelGraph m =
      train_member(cfg, static_cast<int>(ens.members.size()), ens.members, hist);
  m.set_requires_grad(false);
  ens.members.push_back(std::move(m));
  ens.history.push_back(std::move(hist));
  ens.mode = cfg.mode;
  ens.zeta = cfg.zeta;
  ens.tap = ens.members.front().tap();
  return ens;
}

EnsembleState build_ensemble(const TrainConfig& cfg) {
  validate_config(cfg);
  EnsembleState ens;
  ens.mode = cfg.mode;
  ens.zeta = cfg.zeta;

  const bool persist = !cfg.out_dir.empty();
  if (persist) fs::create_directories(cfg.out_dir);
  bool resume_chain = persist;  // only a contiguous checkpoint prefix loads

  for (int i = 0; i < cfg.ensemble_size; ++i) {
    const std::string ckpt =
        persist ? cfg.out_dir + "/member_" + std::to_string(i) + ".ckpt" : "";
    MemberHistory hist;
    hist.member = i;
    ModelGraph m;
    if (resume_chain && fs::exists(ckpt)) {
      CheckpointMeta meta;
      m = load_checkpoint(ckpt, &meta);
      if (meta.arch != cfg.arch || meta.mode != to_string(cfg.mode) || meta.zeta != cfg.zeta)
        throw std::runtime_error("checkpoint " + ckpt + " belongs to a different run");
      hist.resumed = true;
      const TrainSlices slices =
          split_train(trainer_split(cfg, "train"), cfg.validation_fraction);
      hist.final_train_accuracy = model_accuracy(m, slices.train);
      hist.final_val_accuracy = slices.val.size() > 0 ? model_accuracy(m, slices.val)
                                                      : hist.final_train_accuracy;
    } else {
      resume_chain = false;
      const std::vector<ModelGraph> no_predecessors;
      m = train_member(cfg, i, cfg.mode == TrainMode::ri ? no_predecessors : ens.members,
                       hist);
      if (persist) {
        CheckpointMeta meta;
        meta.arch = cfg.arch;
        meta.tap = m.tap();
        meta.mode = to_string(cfg.mode);
        meta.zeta = cfg.zeta;
        meta.seed = cfg.seed + static_cast<std::uint64_t>(i);
        save_checkpoint(ckpt, m, meta);
        write_history_csv(cfg.out_dir + "/member_" + std::to_string(i) + "_history.csv",
                          hist);
      }
    }
    m.set_requires_grad(false);  // frozen: it is a predecessor from here on
    ens.members.push_back(std::move(m));
    ens.history.push_back(std::move(hist));
  }
  ens.tap = ens.members.front().tap();
  return ens;
}

}  // namespace dkd
