#pragma once

#include "etdmpc/common.hpp"

namespace etdmpc {

/// Numerically stable column-wise softmax.
inline MatrixXd softmax_columns(const MatrixXd& logits) {
  MatrixXd out(logits.rows(), logits.cols());
  for (int c = 0; c < logits.cols(); ++c) {
    const double m = logits.col(c).maxCoeff();
    out.col(c) = (logits.col(c).array() - m).exp();
    out.col(c) /= out.col(c).sum();
  }
  return out;
}

// SimNorm: partition each column into contiguous groups of `group` entries
// and apply a softmax within each group, projecting it onto the simplex.
inline void simnorm_inplace(Eigen::Ref<MatrixXd> x, int group) {
  if (group <= 0 || x.rows() % group != 0)
    throw std::invalid_argument("simnorm: dimension " + std::to_string(x.rows()) +
                                " not divisible by group size " + std::to_string(group));
  const int n_groups = static_cast<int>(x.rows()) / group;
  for (int c = 0; c < x.cols(); ++c) {
    for (int g = 0; g < n_groups; ++g) {
      auto seg = x.col(c).segment(g * group, group);
      const double m = seg.maxCoeff();
      seg = (seg.array() - m).exp();
      seg /= seg.sum();
    }
  }
}

inline MatrixXd simnorm(const MatrixXd& x, int group) {
  MatrixXd out = x;
  simnorm_inplace(out, group);
  return out;
}

inline VectorXd simnorm(const VectorXd& x, int group) {
  MatrixXd out = x;
  simnorm_inplace(out, group);
  return out.col(0);
}

/// Backward pass through SimNorm given the forward output `post`.
inline MatrixXd simnorm_backward(const MatrixXd& post, const MatrixXd& dpost, int group) {
  const int n_groups = static_cast<int>(post.rows()) / group;
  MatrixXd dx(post.rows(), post.cols());
  for (int c = 0; c < post.cols(); ++c) {
    for (int g = 0; g < n_groups; ++g) {
      auto s = post.col(c).segment(g * group, group);
      auto ds = dpost.col(c).segment(g * group, group);
      const double dot = s.dot(ds);
      dx.col(c).segment(g * group, group) = s.array() * (ds.array() - dot);
    }
  }
  return dx;
}

// Two-hot codec over a uniform bin grid on [v_min, v_max]. A scalar is
// encoded as interpolated mass on its two neighboring bin centers; decoding
// takes the probability-weighted sum of centers.
struct TwoHotCodec {
  int num_bins = 101;
  double v_min = -10.0;
  double v_max = 10.0;

  double bin_center(int k) const {
    const double t = static_cast<double>(k) / (num_bins - 1);
    return v_min * (1.0 - t) + v_max * t;  // exact at both endpoints
  }

  struct Location {
    int lo;         // lower bin index
    double w_hi;    // mass on bin lo+1; 1 - w_hi goes on bin lo
  };

  Location locate(double v) const {
    const double c = clamp(v, v_min, v_max);
    double pos = (c - v_min) / (v_max - v_min) * (num_bins - 1);
    int lo = static_cast<int>(std::floor(pos));
    if (lo >= num_bins - 1) return {num_bins - 1, 0.0};
    return {lo, pos - lo};
  }

  VectorXd encode(double v) const {
    if (!std::isfinite(v)) throw NumericsError("two_hot_encode: non-finite value");
    VectorXd p = VectorXd::Zero(num_bins);
    const Location loc = locate(v);
    p(loc.lo) = 1.0 - loc.w_hi;
    if (loc.w_hi > 0.0) p(loc.lo + 1) = loc.w_hi;
    return p;
  }

  /// Decode a probability vector. Non-normalized input is renormalized;
  /// `renormalized` reports whether that happened.
  double decode(const VectorXd& p, bool* renormalized = nullptr) const {
    if (p.size() != num_bins)
      throw NumericsError("two_hot_decode: expected " + std::to_string(num_bins) +
                                  " bins, got " + std::to_string(p.size()));
    double sum = p.sum();
    if (renormalized) *renormalized = std::abs(sum - 1.0) > 1e-9;
    if (sum <= 0.0) throw NumericsError("two_hot_decode: non-positive mass");
    double v = 0.0;
    for (int k = 0; k < num_bins; ++k) v += p(k) * bin_center(k);
    return v / sum;
  }

  /// Expected value under softmax(logits), one scalar per column.
  VectorXd decode_logits(const MatrixXd& logits) const {
    const MatrixXd probs = softmax_columns(logits);
    VectorXd centers(num_bins);
    for (int k = 0; k < num_bins; ++k) centers(k) = bin_center(k);
    return probs.transpose() * centers;
  }

  /// Cross-entropy of softmax(logits) against the two-hot encoding of each
  /// target, summed into `loss`; writes dL/dlogits (softmax - target) scaled
  /// by `grad_scale` into dlogits when non-null. Column c pairs with
  /// targets(c).
  double cross_entropy_batch(const MatrixXd& logits, const VectorXd& targets,
                             MatrixXd* dlogits = nullptr, double grad_scale = 1.0) const {
    const MatrixXd probs = softmax_columns(logits);
    double loss = 0.0;
    if (dlogits) *dlogits = probs * grad_scale;
    for (int c = 0; c < logits.cols(); ++c) {
      const Location loc = locate(targets(c));
      const double w_lo = 1.0 - loc.w_hi;
      const double eps = 1e-300;  // probs are strictly positive after softmax anyway
      loss -= w_lo * std::log(probs(loc.lo, c) + eps);
      if (loc.w_hi > 0.0) loss -= loc.w_hi * std::log(probs(loc.lo + 1, c) + eps);
      if (dlogits) {
        (*dlogits)(loc.lo, c) -= grad_scale * w_lo;
        if (loc.w_hi > 0.0) (*dlogits)(loc.lo + 1, c) -= grad_scale * loc.w_hi;
      }
    }
    return loss;
  }
};

inline VectorXd two_hot_encode(double v, const TwoHotCodec& codec) { return codec.encode(v); }
inline double two_hot_decode(const VectorXd& p, const TwoHotCodec& codec, bool* flag = nullptr) {
  return codec.decode(p, flag);
}

}  // namespace etdmpc
