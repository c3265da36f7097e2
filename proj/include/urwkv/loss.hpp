#pragma once

// Cross-entropy plus soft Dice over softmax probabilities:
//   loss = ce_weight * mean_px(-log p[label]) + dice_weight * (1 - mean_{c>=1} D_c)
//   D_c  = (2 * sum(p_c * y_c) + eps) / (sum(p_c) + sum(y_c) + eps)
// Sums run over every pixel of the batch.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "urwkv/error.hpp"
#include "urwkv/tape.hpp"

namespace urwkv {

struct LossWeights {
  double ce = 0.5;
  double dice = 0.5;
  double eps = 1.0;
};

struct LossTerms {
  double ce = 0;
  double dice = 0;  // mean foreground soft Dice (a score, not a loss)
  double total = 0;
};

namespace loss_detail {

/// Softmax over the class axis of [B, n, H, W].
inline std::vector<double> softmax_nchw(const Tensor& z, std::size_t B, std::size_t n, std::size_t HW) {
  std::vector<double> p(z.size());
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t x = 0; x < HW; ++x) {
      const std::size_t base = b * n * HW + x;
      double m = z[base];
      for (std::size_t c = 1; c < n; ++c) m = std::max(m, z[base + c * HW]);
      double s = 0;
      for (std::size_t c = 0; c < n; ++c) s += p[base + c * HW] = std::exp(z[base + c * HW] - m);
      for (std::size_t c = 0; c < n; ++c) p[base + c * HW] /= s;
    }
  return p;
}

}  // namespace loss_detail

/// Evaluates the loss terms without recording anything.
inline LossTerms ce_dice_terms(const Tensor& logits, std::span<const std::uint8_t> labels, LossWeights wt = {}) {
  const Shape& s = logits.shape();
  check(s.size() == 4, ErrorKind::shape, "ce_dice_loss: logits must be [B,n,H,W], got " + to_string(s));
  const std::size_t B = s[0], n = s[1], HW = s[2] * s[3];
  check(n >= 2, ErrorKind::shape, "ce_dice_loss: need at least 2 classes");
  check(labels.size() == B * HW, ErrorKind::shape,
        "ce_dice_loss: mask has " + std::to_string(labels.size()) + " pixels, logits have " + std::to_string(B * HW));
  for (std::uint8_t l : labels)
    check(l < n, ErrorKind::invalid_argument,
          "ce_dice_loss: label " + std::to_string(l) + " >= class count " + std::to_string(n));
  const std::vector<double> p = loss_detail::softmax_nchw(logits, B, n, HW);
  LossTerms t;
  double ce = 0;
  std::vector<double> inter(n, 0.0), psum(n, 0.0), ysum(n, 0.0);
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t x = 0; x < HW; ++x) {
      const std::size_t lab = labels[b * HW + x];
      const std::size_t base = b * n * HW + x;
      ce -= std::log(std::max(p[base + lab * HW], 1e-300));
      for (std::size_t c = 0; c < n; ++c) psum[c] += p[base + c * HW];
      inter[lab] += p[base + lab * HW];
      ysum[lab] += 1.0;
    }
  t.ce = ce / static_cast<double>(B * HW);
  double dice = 0;
  for (std::size_t c = 1; c < n; ++c) dice += (2 * inter[c] + wt.eps) / (psum[c] + ysum[c] + wt.eps);
  t.dice = dice / static_cast<double>(n - 1);
  t.total = wt.ce * t.ce + wt.dice * (1.0 - t.dice);
  return t;
}

/// Differentiable scalar loss on logits [B, n, H, W]; labels are row-major [B, H, W].
inline Var ce_dice_loss(const Var& logits, std::span<const std::uint8_t> labels, LossWeights wt = {}) {
  const LossTerms terms = ce_dice_terms(logits.value(), labels, wt);
  const Shape s = logits.shape();
  const std::size_t B = s[0], n = s[1], HW = s[2] * s[3];
  std::vector<std::uint8_t> lab(labels.begin(), labels.end());
  const std::size_t zi = logits.id();
  return logits.tape().record(
      "ce_dice_loss", Tensor::scalar(terms.total), {logits},
      [zi, lab = std::move(lab), wt, B, n, HW](Tape& t, const Tensor&, const Tensor& g) {
        Tensor* gz = t.grad_target(zi);
        if (!gz) return;
        const Tensor& z = t.value(zi);
        const std::vector<double> p = loss_detail::softmax_nchw(z, B, n, HW);
        const double N = static_cast<double>(B * HW);
        std::vector<double> inter(n, 0.0), denom(n, 0.0);
        for (std::size_t b = 0; b < B; ++b)
          for (std::size_t x = 0; x < HW; ++x) {
            const std::size_t l = lab[b * HW + x];
            for (std::size_t c = 0; c < n; ++c) denom[c] += p[b * n * HW + c * HW + x];
            inter[l] += p[b * n * HW + l * HW + x];
            denom[l] += 1.0;
          }
        // dL/dp_c at a pixel: -dice_w/(n-1) * (2 y (S+eps) - (2I+eps)) / (S+eps)^2 for c >= 1.
        std::vector<double> a(n, 0.0), c0(n, 0.0);
        for (std::size_t c = 1; c < n; ++c) {
          const double S = denom[c] + wt.eps;
          const double k = -wt.dice / static_cast<double>(n - 1) / (S * S);
          a[c] = k * 2 * S;
          c0[c] = -k * (2 * inter[c] + wt.eps);
        }
        const double go = g[0];
        std::vector<double> gp(n);
        for (std::size_t b = 0; b < B; ++b)
          for (std::size_t x = 0; x < HW; ++x) {
            const std::size_t l = lab[b * HW + x];
            const std::size_t base = b * n * HW + x;
            double dot = 0;
            for (std::size_t c = 0; c < n; ++c) {
              gp[c] = c0[c] + (c == l ? a[c] : 0.0);
              dot += p[base + c * HW] * gp[c];
            }
            for (std::size_t c = 0; c < n; ++c) {
              const double pc = p[base + c * HW];
              // softmax chain rule for the Dice part plus the closed-form CE gradient
              const double ce = wt.ce * (pc - (c == l ? 1.0 : 0.0)) / N;
              (*gz)[base + c * HW] += go * (pc * (gp[c] - dot) + ce);
            }
          }
      });
}

}  // namespace urwkv
