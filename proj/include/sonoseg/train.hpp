#pragma once

#include <cmath>
#include <functional>
#include <iomanip>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "json.hpp"
#include "sonoseg/checkpoint.hpp"
#include "sonoseg/data.hpp"
#include "sonoseg/decoder.hpp"
#include "sonoseg/distill.hpp"
#include "sonoseg/losses.hpp"
#include "sonoseg/metrics.hpp"
#include "sonoseg/optim.hpp"

namespace sonoseg {

inline double lr_at(double lr0, double decay, int64_t epoch) {
  return lr0 * std::pow(decay, static_cast<double>(epoch));
}

// ---------------------------------------------------------------------------
// Evaluation

struct EvalRow {
  std::string id;
  double dice_score, iou_score, hd;
};

struct EvalReport {
  std::vector<EvalRow> rows;
  double mean_dice = 0.0, miou = 0.0, mean_hd = 0.0;

  std::string csv() const {
    std::ostringstream out;
    out << std::setprecision(12);
    out << "id,dice,iou,hd\n";
    for (const EvalRow& r : rows)
      out << r.id << "," << r.dice_score << "," << r.iou_score << "," << r.hd << "\n";
    out << "AGGREGATE," << mean_dice << "," << miou << "," << mean_hd << "\n";
    return out.str();
  }

  nlohmann::json json() const {
    nlohmann::json per = nlohmann::json::array();
    for (const EvalRow& r : rows)
      per.push_back({{"id", r.id}, {"dice", r.dice_score}, {"iou", r.iou_score}, {"hd", r.hd}});
    return {{"aggregates", {{"dice", mean_dice}, {"miou", miou}, {"hd", mean_hd}}},
            {"per_image", per}};
  }
};

using ForwardFn = std::function<Tensor(const Tensor&, const BoxPrompt&)>;

inline EvalReport evaluate_with(const ForwardFn& fwd, const std::vector<MaskPair>& data) {
  if (data.empty()) throw DataError("evaluate: empty dataset");
  NoGradGuard ng;
  EvalReport rep;
  for (const MaskPair& p : data) {
    BinaryMask pred = threshold_mask(fwd(p.image, p.box));
    MetricReport m = score_pair(pred, p.mask);
    rep.rows.push_back({p.id, m.dice, m.iou, m.hd});
    rep.mean_dice += m.dice;
    rep.miou += m.iou;
    rep.mean_hd += m.hd;
  }
  double n = static_cast<double>(rep.rows.size());
  rep.mean_dice /= n;
  rep.miou /= n;
  rep.mean_hd /= n;
  return rep;
}

inline EvalReport evaluate(const SegModel& model, const std::vector<MaskPair>& data) {
  return evaluate_with(
      [&](const Tensor& img, const BoxPrompt& box) { return model.forward(img, box).logits; },
      data);
}

inline EvalReport evaluate(const StudentModel& model, const std::vector<MaskPair>& data) {
  return evaluate_with(
      [&](const Tensor& img, const BoxPrompt& box) { return model.forward(img, box); }, data);
}

// ---------------------------------------------------------------------------
// Phase-1 training: adapters + decoder + prompt learn, backbone stays frozen.

struct TrainOptions {
  int64_t epochs = 200;
  int64_t batch_size = 4;
  double lr0 = 3e-3;
  double lr_decay = 0.98;
  SegLossConfig loss;
  std::string checkpoint_path;  // when set, the best-val model is written here
};

struct TrainResult {
  std::string metrics_csv;  // epoch,lr,train_loss,train_dice,val_dice
  double final_train_dice = 0.0;
  double best_val_dice = 0.0;
  int64_t best_epoch = 0;        // 1-based; 0 if no val data
  bool freeze_audit_ok = false;
  std::vector<std::string> freeze_violations;
};

// Trains in place; on return the model holds the best-val-Dice parameters
// (final-epoch parameters when there is no validation split).
inline TrainResult train_peft(SegModel& model, const std::vector<MaskPair>& train,
                              const std::vector<MaskPair>& val, const TrainOptions& opt,
                              uint64_t seed) {
  if (train.empty()) throw DataError("train: empty training set");
  if (opt.epochs < 1) throw ConfigError("train: epochs must be >= 1");
  if (opt.batch_size < 1) throw ConfigError("train: batch_size must be >= 1");

  ParamList params = model.params();
  apply_peft_freeze(params);
  std::vector<std::vector<double>> frozen_snapshot;
  for (const auto& p : params)
    frozen_snapshot.push_back(p.value.requires_grad() ? std::vector<double>{} : p.value.data());

  Adam opt_state(params, AdamConfig{opt.lr0});

  std::ostringstream csv;
  csv << std::setprecision(12);
  csv << "epoch,lr,train_loss,train_dice,val_dice\n";

  TrainResult result;
  std::vector<std::vector<double>> best_values;
  result.best_val_dice = -1.0;

  std::vector<size_t> order(train.size());
  for (size_t i = 0; i < order.size(); ++i) order[i] = i;

  for (int64_t epoch = 0; epoch < opt.epochs; ++epoch) {
    double lr = lr_at(opt.lr0, opt.lr_decay, epoch);
    opt_state.set_lr(lr);

    Rng order_rng(seed, "order", static_cast<uint64_t>(epoch));
    order_rng.shuffle(order);

    double loss_sum = 0.0;
    size_t done = 0;
    while (done < order.size()) {
      size_t batch = std::min<size_t>(static_cast<size_t>(opt.batch_size), order.size() - done);
      for (size_t b = 0; b < batch; ++b) {
        const MaskPair& p = train[order[done + b]];
        Tensor loss = seg_loss(model.forward(p.image, p.box).logits, p.mask, opt.loss);
        loss_sum += loss.item();
        scale(loss, 1.0 / static_cast<double>(batch)).backward();
      }
      opt_state.step();
      done += batch;
    }

    double train_dice = evaluate(model, train).mean_dice;
    double val_dice = val.empty() ? 0.0 : evaluate(model, val).mean_dice;
    csv << (epoch + 1) << "," << lr << "," << loss_sum / static_cast<double>(train.size()) << ","
        << train_dice << "," << val_dice << "\n";
    result.final_train_dice = train_dice;

    bool is_best = val.empty() ? true : val_dice > result.best_val_dice;
    if (is_best) {
      result.best_val_dice = val_dice;
      result.best_epoch = epoch + 1;
      best_values.clear();
      for (const auto& p : params) best_values.push_back(p.value.data());
    }
  }

  // freeze audit: frozen entries must be bit-identical to their snapshots
  result.freeze_audit_ok = true;
  for (size_t i = 0; i < params.size(); ++i) {
    if (params[i].value.requires_grad()) continue;
    if (params[i].value.data() != frozen_snapshot[i]) {
      result.freeze_audit_ok = false;
      result.freeze_violations.push_back(params[i].name);
    }
  }

  if (!best_values.empty())
    for (size_t i = 0; i < params.size(); ++i) params[i].value.raw_data() = best_values[i];

  if (!opt.checkpoint_path.empty()) save_checkpoint(opt.checkpoint_path, "teacher", params);

  result.metrics_csv = csv.str();
  if (val.empty()) result.best_epoch = 0;
  return result;
}

}  // namespace sonoseg
