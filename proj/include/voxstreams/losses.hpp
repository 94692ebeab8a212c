#pragma once

#include <cmath>
#include <cstdint>
#include <vector>

#include "voxstreams/tensor.hpp"

namespace voxstreams::losses {

// Mean of squared elementwise differences.
inline double mse(const Tensor& pred, const Tensor& target) {
  require_same_shape(pred, target, "mse");
  double acc = 0.0;
  for (std::size_t i = 0; i < pred.data.size(); ++i) {
    const double e = pred.data[i] - target.data[i];
    acc += e * e;
  }
  return acc / static_cast<double>(pred.data.size());
}

inline Tensor mse_grad(const Tensor& pred, const Tensor& target) {
  require_same_shape(pred, target, "mse_grad");
  Tensor g(pred.shape);
  const double inv_n = 1.0 / static_cast<double>(pred.data.size());
  for (std::size_t i = 0; i < pred.data.size(); ++i) {
    g.data[i] = 2.0 * (pred.data[i] - target.data[i]) * inv_n;
  }
  return g;
}

// Mean over elements of 0.5 e^2 for |e| <= delta, else delta (|e| - 0.5 delta).
inline double huber(const Tensor& pred, const Tensor& target, double delta = 1.0) {
  require_same_shape(pred, target, "huber");
  check(delta > 0.0, "huber: delta must be positive");
  double acc = 0.0;
  for (std::size_t i = 0; i < pred.data.size(); ++i) {
    const double e = std::abs(pred.data[i] - target.data[i]);
    acc += e <= delta ? 0.5 * e * e : delta * (e - 0.5 * delta);
  }
  return acc / static_cast<double>(pred.data.size());
}

inline Tensor huber_grad(const Tensor& pred, const Tensor& target, double delta = 1.0) {
  require_same_shape(pred, target, "huber_grad");
  check(delta > 0.0, "huber_grad: delta must be positive");
  Tensor g(pred.shape);
  const double inv_n = 1.0 / static_cast<double>(pred.data.size());
  for (std::size_t i = 0; i < pred.data.size(); ++i) {
    const double e = pred.data[i] - target.data[i];
    const double d = std::abs(e) <= delta ? e : delta * (e > 0 ? 1.0 : -1.0);
    g.data[i] = d * inv_n;
  }
  return g;
}

// Symmetric InfoNCE over the batch cosine-similarity matrix: positives on
// the diagonal, cross-entropy averaged over both matching directions.
struct InfoNceResult {
  double value = 0.0;
  Tensor grad_pred;
};

namespace detail {

inline Tensor cosine_logits(const Tensor& pred, const Tensor& target, double temperature,
                            std::vector<double>& pred_norms, Tensor& pred_unit,
                            Tensor& target_unit) {
  check(pred.rank() == 2 && target.rank() == 2, "info_nce: rank-2 (B,D) batches required");
  require_same_shape(pred, target, "info_nce");
  check(temperature > 0.0, "info_nce: temperature must be positive");
  const std::int64_t batch = pred.shape[0], dim = pred.shape[1];
  pred_unit = Tensor({batch, dim});
  target_unit = Tensor({batch, dim});
  pred_norms.assign(static_cast<std::size_t>(batch), 0.0);
  for (std::int64_t i = 0; i < batch; ++i) {
    double np = 0.0, nt = 0.0;
    for (std::int64_t j = 0; j < dim; ++j) {
      np += pred.at2(i, j) * pred.at2(i, j);
      nt += target.at2(i, j) * target.at2(i, j);
    }
    np = std::sqrt(np);
    nt = std::sqrt(nt);
    check(np > 0.0, "info_nce: zero-norm prediction row");
    check(nt > 0.0, "info_nce: zero-norm target row");
    pred_norms[static_cast<std::size_t>(i)] = np;
    for (std::int64_t j = 0; j < dim; ++j) {
      pred_unit.at2(i, j) = pred.at2(i, j) / np;
      target_unit.at2(i, j) = target.at2(i, j) / nt;
    }
  }
  Tensor logits = matmul_bt(pred_unit, target_unit);
  scale_inplace(logits, 1.0 / temperature);
  return logits;
}

inline double cross_entropy_diag(const Tensor& logits, bool by_rows, Tensor* softmax_out) {
  const std::int64_t batch = logits.shape[0];
  double total = 0.0;
  if (softmax_out) *softmax_out = Tensor({batch, batch});
  for (std::int64_t r = 0; r < batch; ++r) {
    double max_logit = -1e300;
    for (std::int64_t c = 0; c < batch; ++c) {
      const double v = by_rows ? logits.at2(r, c) : logits.at2(c, r);
      max_logit = std::max(max_logit, v);
    }
    double denom = 0.0;
    for (std::int64_t c = 0; c < batch; ++c) {
      const double v = by_rows ? logits.at2(r, c) : logits.at2(c, r);
      denom += std::exp(v - max_logit);
    }
    const double pos = by_rows ? logits.at2(r, r) : logits.at2(r, r);
    total += std::log(denom) + max_logit - pos;
    if (softmax_out) {
      for (std::int64_t c = 0; c < batch; ++c) {
        const double v = by_rows ? logits.at2(r, c) : logits.at2(c, r);
        const double p = std::exp(v - max_logit) / denom;
        if (by_rows) {
          softmax_out->at2(r, c) = p;
        } else {
          softmax_out->at2(c, r) = p;
        }
      }
    }
  }
  return total / static_cast<double>(batch);
}

}  // namespace detail

inline double info_nce(const Tensor& pred, const Tensor& target, double temperature = 0.05) {
  std::vector<double> pred_norms;
  Tensor pred_unit, target_unit;
  const Tensor logits =
      detail::cosine_logits(pred, target, temperature, pred_norms, pred_unit, target_unit);
  const double row_ce = detail::cross_entropy_diag(logits, true, nullptr);
  const double col_ce = detail::cross_entropy_diag(logits, false, nullptr);
  return 0.5 * (row_ce + col_ce);
}

inline InfoNceResult info_nce_with_grad(const Tensor& pred, const Tensor& target,
                                        double temperature = 0.05) {
  std::vector<double> pred_norms;
  Tensor pred_unit, target_unit;
  const Tensor logits =
      detail::cosine_logits(pred, target, temperature, pred_norms, pred_unit, target_unit);
  Tensor row_softmax, col_softmax;
  const double row_ce = detail::cross_entropy_diag(logits, true, &row_softmax);
  const double col_ce = detail::cross_entropy_diag(logits, false, &col_softmax);

  const std::int64_t batch = pred.shape[0], dim = pred.shape[1];
  // dL/dlogits, both directions combined.
  Tensor dlogits({batch, batch});
  const double inv_2b = 0.5 / static_cast<double>(batch);
  for (std::int64_t i = 0; i < batch; ++i) {
    for (std::int64_t j = 0; j < batch; ++j) {
      const double target_ij = i == j ? 1.0 : 0.0;
      dlogits.at2(i, j) = inv_2b * (row_softmax.at2(i, j) - target_ij) +
                          inv_2b * (col_softmax.at2(i, j) - target_ij);
    }
  }

  InfoNceResult result;
  result.value = 0.5 * (row_ce + col_ce);
  result.grad_pred = Tensor({batch, dim});
  for (std::int64_t i = 0; i < batch; ++i) {
    // Gradient w.r.t. the unit vector, then through the normalization.
    std::vector<double> gu(static_cast<std::size_t>(dim), 0.0);
    for (std::int64_t j = 0; j < batch; ++j) {
      const double coef = dlogits.at2(i, j) / temperature;
      if (coef == 0.0) continue;
      for (std::int64_t d = 0; d < dim; ++d) {
        gu[static_cast<std::size_t>(d)] += coef * target_unit.at2(j, d);
      }
    }
    double u_dot_gu = 0.0;
    for (std::int64_t d = 0; d < dim; ++d) {
      u_dot_gu += pred_unit.at2(i, d) * gu[static_cast<std::size_t>(d)];
    }
    const double inv_norm = 1.0 / pred_norms[static_cast<std::size_t>(i)];
    for (std::int64_t d = 0; d < dim; ++d) {
      result.grad_pred.at2(i, d) =
          (gu[static_cast<std::size_t>(d)] - u_dot_gu * pred_unit.at2(i, d)) * inv_norm;
    }
  }
  return result;
}

}  // namespace voxstreams::losses
