#pragma once

#include "sonoseg/metrics.hpp"
#include "sonoseg/tensor.hpp"

namespace sonoseg {

struct SegLossConfig {
  double focal_weight = 20.0;
  double dice_weight = 1.0;
  double gamma = 2.0;
  double alpha = 0.25;
  double dice_eps = 1.0;
};

// Focal loss from raw logits, mean over pixels. Built entirely from
// log-sigmoid so saturated logits stay finite:
//   (1-p)^gamma = exp(gamma * log_sigmoid(-x)),  log p = log_sigmoid(x)
inline Tensor focal_loss(const Tensor& logits, const Tensor& gt, double gamma = 2.0,
                         double alpha = 0.25) {
  check_shape(logits.shape() == gt.shape(), "focal loss shape mismatch", logits.shape(),
              gt.shape());
  Tensor ls_pos = log_sigmoid(logits);
  Tensor ls_neg = log_sigmoid(neg(logits));
  Tensor pos_term = scale(mul(exp(scale(ls_neg, gamma)), ls_pos), -alpha);
  Tensor neg_term = scale(mul(exp(scale(ls_pos, gamma)), ls_neg), -(1.0 - alpha));
  Tensor one_minus_gt = add_scalar(neg(gt), 1.0);
  return mean(add(mul(gt, pos_term), mul(one_minus_gt, neg_term)));
}

// Soft dice loss: 1 - (2*sum(p*g)+eps) / (sum(p)+sum(g)+eps)
inline Tensor dice_loss(const Tensor& logits, const Tensor& gt, double eps = 1.0) {
  check_shape(logits.shape() == gt.shape(), "dice loss shape mismatch", logits.shape(),
              gt.shape());
  Tensor p = sigmoid(logits);
  Tensor num = add_scalar(scale(sum(mul(p, gt)), 2.0), eps);
  Tensor den = add_scalar(add(sum(p), sum(gt)), eps);
  return add_scalar(neg(div(num, den)), 1.0);
}

inline Tensor seg_loss(const Tensor& logits, const BinaryMask& gt,
                       const SegLossConfig& cfg = {}) {
  Tensor g = mask_to_tensor(gt);
  return add(scale(focal_loss(logits, g, cfg.gamma, cfg.alpha), cfg.focal_weight),
             scale(dice_loss(logits, g, cfg.dice_eps), cfg.dice_weight));
}

}  // namespace sonoseg
