#pragma once

#include <cmath>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "tealab/autodiff.hpp"

namespace tealab {

/// Output-variable kind. Binary variables are squashed through a sigmoid at
/// the component output and scored with cross-entropy; continuous variables
/// stay raw and use the quadratic loss.
enum class VarKind : std::uint8_t { Continuous = 0, Binary = 1 };

/// Per-row loss layout plus the two mixing coefficients: lambda, the
/// strength-of-prior weight on the reconstruction term, and nu, the l2
/// penalty coefficient. lambda = 0.5 gives the 1:1 prediction/reconstruction
/// ratio used by default.
struct LossSpec {
    std::vector<VarKind> row_kinds;
    double lambda = 0.5;
    double nu = 0.0;

    void validate() const {
        if (!(lambda >= 0.0 && lambda <= 1.0)) {
            throw ValueError("lambda must lie in [0, 1], got " + std::to_string(lambda));
        }
        if (!(nu >= 0.0)) throw ValueError("nu must be >= 0, got " + std::to_string(nu));
    }
};

inline std::vector<std::uint8_t> binary_mask(const std::vector<VarKind>& kinds) {
    std::vector<std::uint8_t> m(kinds.size());
    for (std::size_t i = 0; i < kinds.size(); ++i) m[i] = kinds[i] == VarKind::Binary;
    return m;
}

inline bool any_binary(const std::vector<VarKind>& kinds) {
    for (VarKind k : kinds) {
        if (k == VarKind::Binary) return true;
    }
    return false;
}

namespace detail {

constexpr double kProbClamp = 1e-7;

inline void check_batch_shapes(const char* op, const Tensor& pred, const Tensor& target) {
    if (!pred.same_shape(target)) {
        throw ShapeError(std::string(op) + ": prediction " + pred.shape_string() +
                         " vs target " + target.shape_string());
    }
}

inline std::size_t batch_cols(const Tensor& t) { return t.rank() == 2 ? t.cols() : 1; }

} // namespace detail

/// Squared-error loss, summed over dimensions and averaged over the batch
/// (columns). Fused node: value and adjoint computed directly.
inline NodePtr quadratic_loss(const NodePtr& pred, const Tensor& target) {
    detail::check_batch_shapes("quadratic_loss", pred->value, target);
    const std::size_t batch = detail::batch_cols(pred->value);
    double acc = 0.0;
    for (std::size_t i = 0; i < target.size(); ++i) {
        const double d = pred->value[i] - target[i];
        acc += d * d;
    }
    Tensor out({1});
    out[0] = acc / static_cast<double>(batch);
    return detail::make_node("quadratic_loss", std::move(out), {pred},
                             [target, batch](Node& self) {
                                 const double g = self.grad[0] * 2.0 / static_cast<double>(batch);
                                 Node& p = *self.parents[0];
                                 for (std::size_t i = 0; i < target.size(); ++i) {
                                     p.grad[i] += g * (p.value[i] - target[i]);
                                 }
                             });
}

/// Binary cross-entropy against probabilities, averaged over the batch.
/// Probabilities are clamped to [1e-7, 1 - 1e-7]; labels must be 0 or 1.
inline NodePtr bce_loss(const NodePtr& probs, const Tensor& target) {
    detail::check_batch_shapes("bce_loss", probs->value, target);
    for (std::size_t i = 0; i < target.size(); ++i) {
        if (target[i] != 0.0 && target[i] != 1.0) {
            throw ValueError("bce_loss: label outside {0,1}: " + std::to_string(target[i]));
        }
    }
    const std::size_t batch = detail::batch_cols(probs->value);
    const double lo = detail::kProbClamp, hi = 1.0 - detail::kProbClamp;
    double acc = 0.0;
    for (std::size_t i = 0; i < target.size(); ++i) {
        const double p = std::min(hi, std::max(lo, probs->value[i]));
        acc -= target[i] * std::log(p) + (1.0 - target[i]) * std::log(1.0 - p);
    }
    Tensor out({1});
    out[0] = acc / static_cast<double>(batch);
    return detail::make_node(
        "bce_loss", std::move(out), {probs}, [target, batch, lo, hi](Node& self) {
            const double g = self.grad[0] / static_cast<double>(batch);
            Node& p = *self.parents[0];
            for (std::size_t i = 0; i < target.size(); ++i) {
                const double raw = p.value[i];
                if (raw < lo || raw > hi) continue; // clamp region: zero slope
                p.grad[i] += g * (-target[i] / raw + (1.0 - target[i]) / (1.0 - raw));
            }
        });
}

/// Loss over a mixed target vector: quadratic over continuous rows plus BCE
/// over binary rows, the two parts summed, averaged over the batch.
inline NodePtr mixed_target_loss(const NodePtr& pred, const Tensor& target,
                                 const std::vector<VarKind>& row_kinds) {
    detail::check_batch_shapes("mixed_target_loss", pred->value, target);
    const std::size_t rows = pred->value.rank() == 2 ? pred->value.rows() : pred->value.size();
    const std::size_t batch = detail::batch_cols(pred->value);
    if (row_kinds.size() != rows) {
        throw ShapeError("mixed_target_loss: " + std::to_string(row_kinds.size()) +
                         " row kinds against " + std::to_string(rows) + " rows");
    }
    const double lo = detail::kProbClamp, hi = 1.0 - detail::kProbClamp;
    double acc = 0.0;
    for (std::size_t r = 0; r < rows; ++r) {
        for (std::size_t j = 0; j < batch; ++j) {
            const std::size_t i = r * batch + j;
            if (row_kinds[r] == VarKind::Continuous) {
                const double d = pred->value[i] - target[i];
                acc += d * d;
            } else {
                if (target[i] != 0.0 && target[i] != 1.0) {
                    throw ValueError("mixed_target_loss: label outside {0,1}");
                }
                const double p = std::min(hi, std::max(lo, pred->value[i]));
                acc -= target[i] * std::log(p) + (1.0 - target[i]) * std::log(1.0 - p);
            }
        }
    }
    Tensor out({1});
    out[0] = acc / static_cast<double>(batch);
    return detail::make_node(
        "mixed_target_loss", std::move(out), {pred},
        [target, row_kinds, rows, batch, lo, hi](Node& self) {
            const double g = self.grad[0] / static_cast<double>(batch);
            Node& p = *self.parents[0];
            for (std::size_t r = 0; r < rows; ++r) {
                for (std::size_t j = 0; j < batch; ++j) {
                    const std::size_t i = r * batch + j;
                    if (row_kinds[r] == VarKind::Continuous) {
                        p.grad[i] += g * 2.0 * (p.value[i] - target[i]);
                    } else {
                        const double raw = p.value[i];
                        if (raw < lo || raw > hi) continue;
                        p.grad[i] += g * (-target[i] / raw + (1.0 - target[i]) / (1.0 - raw));
                    }
                }
            }
        });
}

/// Prediction loss l_p(y_hat, y): dispatches on the per-row kinds.
inline NodePtr prediction_loss(const NodePtr& pred, const Tensor& target,
                               const LossSpec& spec) {
    spec.validate();
    if (!any_binary(spec.row_kinds)) return quadratic_loss(pred, target);
    return mixed_target_loss(pred, target, spec.row_kinds);
}

/// Reconstruction loss l_r(y_tilde, y): same form as the prediction loss,
/// evaluated on the reconstruction pathway.
inline NodePtr reconstruction_loss(const NodePtr& recon, const Tensor& target,
                                   const LossSpec& spec) {
    return prediction_loss(recon, target, spec);
}

/// Quadratic distance between two latent batches, averaged over the batch.
/// Both sides are graph nodes: in the indirect variants the latent loss
/// backpropagates through the encoder as well as the predictor.
inline NodePtr latent_loss(const NodePtr& predicted, const NodePtr& encoded) {
    detail::check_batch_shapes("latent_loss", predicted->value, encoded->value);
    const std::size_t batch = detail::batch_cols(predicted->value);
    double acc = 0.0;
    for (std::size_t i = 0; i < predicted->value.size(); ++i) {
        const double d = predicted->value[i] - encoded->value[i];
        acc += d * d;
    }
    Tensor out({1});
    out[0] = acc / static_cast<double>(batch);
    return detail::make_node("latent_loss", std::move(out), {predicted, encoded},
                             [batch](Node& self) {
                                 const double g = self.grad[0] * 2.0 / static_cast<double>(batch);
                                 Node& a = *self.parents[0];
                                 Node& b = *self.parents[1];
                                 for (std::size_t i = 0; i < a.value.size(); ++i) {
                                     const double d = g * (a.value[i] - b.value[i]);
                                     a.grad[i] += d;
                                     b.grad[i] -= d;
                                 }
                             });
}

/// Sum of squared entries of one parameter tensor (the l2 penalty unit).
inline NodePtr sum_squares(const NodePtr& w) {
    double acc = 0.0;
    for (std::size_t i = 0; i < w->value.size(); ++i) acc += w->value[i] * w->value[i];
    Tensor out({1});
    out[0] = acc;
    return detail::make_node("sum_squares", std::move(out), {w}, [](Node& self) {
        const double g = self.grad[0] * 2.0;
        Node& p = *self.parents[0];
        for (std::size_t i = 0; i < p.value.size(); ++i) p.grad[i] += g * p.value[i];
    });
}

/// (1 - lambda) L_p + lambda L_r + nu sum of ||W||^2 over the weights in
/// scope. Either loss may be null when its stage does not use it.
inline NodePtr composite_objective(const NodePtr& pred_loss, const NodePtr& recon_loss,
                                   double lambda, double nu,
                                   const std::vector<NodePtr>& parameters) {
    if (!(lambda >= 0.0 && lambda <= 1.0)) {
        throw ValueError("composite_objective: lambda outside [0, 1]");
    }
    if (!(nu >= 0.0)) throw ValueError("composite_objective: nu must be >= 0");
    NodePtr total;
    auto accumulate = [&total](const NodePtr& term) {
        total = total ? add(total, term) : term;
    };
    if (pred_loss) accumulate(scale(pred_loss, 1.0 - lambda));
    if (recon_loss) accumulate(scale(recon_loss, lambda));
    if (nu > 0.0 && !parameters.empty()) {
        NodePtr penalty;
        for (const NodePtr& w : parameters) {
            NodePtr s = sum_squares(w);
            penalty = penalty ? add(penalty, s) : s;
        }
        accumulate(scale(penalty, nu));
    }
    if (!total) throw ValueError("composite_objective: no loss terms");
    return total;
}

} // namespace tealab
