#pragma once

#include <algorithm>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <numeric>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include "urwkv/adamw.hpp"
#include "urwkv/checkpoint.hpp"
#include "urwkv/config.hpp"
#include "urwkv/data.hpp"
#include "urwkv/loss.hpp"
#include "urwkv/metrics.hpp"
#include "urwkv/model.hpp"
#include "urwkv/parallel.hpp"

namespace urwkv {

/// Per-pixel argmax of logits [B, n, H, W] into labels [B, H, W].
inline std::vector<std::uint8_t> argmax_labels(const Tensor& logits) {
  const std::size_t B = logits.dim(0), n = logits.dim(1), HW = logits.dim(2) * logits.dim(3);
  std::vector<std::uint8_t> out(B * HW);
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t x = 0; x < HW; ++x) {
      std::size_t best = 0;
      for (std::size_t c = 1; c < n; ++c)
        if (logits[(b * n + c) * HW + x] > logits[(b * n + best) * HW + x]) best = c;
      out[b * HW + x] = static_cast<std::uint8_t>(best);
    }
  return out;
}

inline MetricReport evaluate(const Model& model, const std::vector<Sample>& samples, std::size_t batch_size = 8) {
  MetricAccumulator acc(model.config().classes);
  batch_size = std::max<std::size_t>(1, batch_size);
  for (std::size_t i = 0; i < samples.size(); i += batch_size) {
    std::vector<const Sample*> part;
    for (std::size_t j = i; j < std::min(samples.size(), i + batch_size); ++j) part.push_back(&samples[j]);
    const Batch b = make_batch(part);
    const std::vector<std::uint8_t> pred = argmax_labels(model.predict(b.images));
    const std::size_t HW = part[0]->mask.labels.size();
    for (std::size_t j = 0; j < part.size(); ++j)
      acc.add(std::span(pred).subspan(j * HW, HW), std::span(part[j]->mask.labels));
  }
  return acc.report();
}

/// Evaluates with every parameter rounded to float, i.e. exactly what a
/// reloaded checkpoint computes. Parameters are restored afterwards.
inline MetricReport evaluate_as_saved(Model& model, const std::vector<Sample>& samples, std::size_t batch_size = 8) {
  std::vector<Tensor> saved;
  model.params().for_each([&](const Parameter& p) { saved.push_back(p.value); });
  round_params_to_f32(model);
  const MetricReport r = evaluate(model, samples, batch_size);
  std::size_t i = 0;
  model.params().for_each([&](Parameter& p) { p.value = std::move(saved[i++]); });
  return r;
}

struct EpochLog {
  std::size_t epoch = 0;
  double loss = 0;  // mean training loss over the epoch's batches
  double dsc = 0;   // test-split mean foreground DSC
  double iou = 0;
};

struct TrainResult {
  std::vector<EpochLog> log;
  std::size_t best_epoch = 0;
  double best_dsc = -1;
  double best_iou = 0;
  std::uint64_t steps = 0;
  bool early_stopped = false;
};

struct TrainHooks {
  std::function<void(const EpochLog&)> on_epoch;
  std::function<void(double loss)> on_step;
  std::string checkpoint_path;  // best checkpoint; empty to skip writing
};

/// One optimisation step on a batch; returns the loss before the update.
inline double train_step(Model& model, AdamW& opt, const Batch& batch, const LossWeights& wt) {
  model.params().zero_grad();
  Context ctx(true);
  const Var images = ctx.input(batch.images);
  const Var loss = ce_dice_loss(model.forward(ctx, images), batch.labels, wt);
  ctx.backward(loss);
  ctx.accumulate_grads();
  opt.step(model.params());
  return loss.value().item();
}

/// Trains on ds.train, evaluates ds.test after every epoch, and keeps the
/// parameters of the best test DSC. Stops after `patience` epochs without
/// improvement. On return the model holds the best parameters.
inline TrainResult train(Model& model, const Dataset& ds, const TrainConfig& tc, const TrainHooks& hooks = {}) {
  check(!ds.train.empty(), ErrorKind::invalid_argument, "train: training split is empty");
  check(tc.batch_size >= 1, ErrorKind::config, "train: batch_size must be >= 1");
  if (tc.threads > 0) set_thread_cap(tc.threads);
  const std::vector<Sample>& eval_set = ds.test.empty() ? ds.train : ds.test;
  AdamW opt(AdamWOptions{tc.lr, 0.9, 0.999, 1e-8, tc.weight_decay});
  const LossWeights wt{tc.ce_weight, tc.dice_weight, 1.0};
  Rng rng(tc.seed ^ 0x9e3779b97f4a7c15ULL);
  std::vector<std::size_t> order(ds.train.size());
  std::iota(order.begin(), order.end(), 0);

  TrainResult res;
  std::vector<Tensor> best;
  std::size_t stale = 0;
  for (std::size_t epoch = 0; epoch < tc.epochs; ++epoch) {
    model.apply_freeze_schedule(epoch, tc.freeze_epochs);
    std::shuffle(order.begin(), order.end(), rng);
    double loss_sum = 0;
    std::size_t batches = 0;
    for (std::size_t i = 0; i < order.size(); i += tc.batch_size) {
      std::vector<Sample> aug;
      std::vector<const Sample*> part;
      const std::size_t end = std::min(order.size(), i + tc.batch_size);
      if (tc.augment) {
        for (std::size_t j = i; j < end; ++j) aug.push_back(augment(ds.train[order[j]], rng));
        for (const Sample& s : aug) part.push_back(&s);
      } else {
        for (std::size_t j = i; j < end; ++j) part.push_back(&ds.train[order[j]]);
      }
      const double l = train_step(model, opt, make_batch(part), wt);
      if (hooks.on_step) hooks.on_step(l);
      loss_sum += l;
      ++batches;
      ++res.steps;
    }
    const MetricReport m = evaluate_as_saved(model, eval_set, tc.batch_size);
    const EpochLog row{epoch + 1, loss_sum / static_cast<double>(batches), m.mean_dsc, m.mean_iou};
    res.log.push_back(row);
    if (hooks.on_epoch) hooks.on_epoch(row);
    if (m.mean_dsc > res.best_dsc) {
      res.best_dsc = m.mean_dsc;
      res.best_iou = m.mean_iou;
      res.best_epoch = epoch + 1;
      best.clear();
      model.params().for_each([&](const Parameter& p) { best.push_back(p.value); });
      if (!hooks.checkpoint_path.empty()) {
        // Saved with float payloads; the logged DSC was computed on the same rounding.
        save_checkpoint(model, hooks.checkpoint_path, res.steps);
      }
      stale = 0;
    } else if (++stale >= tc.patience) {
      res.early_stopped = true;
      break;
    }
  }
  if (!best.empty()) {
    std::size_t i = 0;
    model.params().for_each([&](Parameter& p) { p.value = std::move(best[i++]); });
  }
  model.apply_freeze_schedule(tc.freeze_epochs, tc.freeze_epochs);
  return res;
}

struct AblationRow {
  std::string name;
  bool fawa = false;
  bool mscf = false;
  TrainResult result;
};

/// Trains the 2x2 grid {base, +FAWA, +MSCF, both} with identical seed and budget.
inline std::vector<AblationRow> ablate(const ModelConfig& base, const Dataset& ds, const TrainConfig& tc,
                                       const std::function<void(const AblationRow&)>& on_row = {}) {
  std::vector<AblationRow> rows{{"baseline", false, false, {}},
                                {"+FAWA", true, false, {}},
                                {"+MSCF", false, true, {}},
                                {"+FAWA+MSCF", true, true, {}}};
  for (AblationRow& r : rows) {
    ModelConfig cfg = base;
    cfg.fawa = r.fawa;
    cfg.mscf = r.mscf;
    Model model(cfg, tc.seed);
    r.result = train(model, ds, tc);
    if (on_row) on_row(r);
  }
  return rows;
}

}  // namespace urwkv
