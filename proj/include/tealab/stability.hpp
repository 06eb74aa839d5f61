#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <string>
#include <vector>

#include "tealab/linalg.hpp"
#include "tealab/rng.hpp"

namespace tealab {

/// Empirical uniform-stability harness for the linear case with quadratic
/// losses: the shared forward model is re-solved in closed form while the
/// predictor and encoder stay frozen, and the worst-case prediction-loss
/// perturbation under single-sample replacement is measured against the
/// O(M/N) bound.

/// Constants of the bound: c strong convexity of l_r (2 for the quadratic
/// loss), sigma_p / sigma_r admissibility estimates, and the representative-errors
/// constant a, which is supplied rather than estimated.
struct StabilityConfig {
    std::vector<std::size_t> n_grid{50, 100, 200, 400, 800, 1600};
    int replacements_per_batch = 20;
    int trials_per_n = 5;
    std::size_t probe_size = 512;
    double c_strong_convexity = 2.0;
    double a_assumption2 = 1.0;
    std::size_t representative_m = 0; // 0: use |Z|
    double solve_tolerance = 1e-12;
};

struct ThetaSolveResult {
    Tensor theta; // |Y| x |Z|
    bool used_pseudo_inverse = false;
};

/// Closed-form minimizer over Theta alone of
///   sum_n ||Theta W_u x_n - y_n||^2 + ||Theta W_e y_n - y_n||^2:
/// Theta* = [sum y_n (z_hat_n + z_n)^T] [sum z_hat_n z_hat_n^T + z_n z_n^T]^{-1},
/// with a pseudo-inverse on a rank-deficient Gram matrix.
inline ThetaSolveResult solve_theta(const Tensor& w_u, const Tensor& w_e, const Tensor& x,
                                    const Tensor& y, double tol = 1e-12) {
    const std::size_t z_dim = w_u.rows();
    if (w_e.rows() != z_dim) {
        throw ShapeError("solve_theta: W_u and W_e latent dims differ");
    }
    if (x.cols() != y.cols()) throw ShapeError("solve_theta: X and Y sample counts differ");
    const Tensor z_hat = mat_mul(w_u, x); // |Z| x N
    const Tensor z_enc = mat_mul(w_e, y); // |Z| x N

    Tensor gram({z_dim, z_dim});
    const std::size_t n = x.cols();
    for (std::size_t i = 0; i < z_dim; ++i) {
        for (std::size_t j = 0; j < z_dim; ++j) {
            double acc = 0.0;
            for (std::size_t s = 0; s < n; ++s) {
                acc += z_hat[i * n + s] * z_hat[j * n + s] + z_enc[i * n + s] * z_enc[j * n + s];
            }
            gram[i * z_dim + j] = acc;
        }
    }
    const std::size_t y_dim = y.rows();
    Tensor cross({y_dim, z_dim});
    for (std::size_t i = 0; i < y_dim; ++i) {
        for (std::size_t j = 0; j < z_dim; ++j) {
            double acc = 0.0;
            for (std::size_t s = 0; s < n; ++s) {
                acc += y[i * n + s] * (z_hat[j * n + s] + z_enc[j * n + s]);
            }
            cross[i * z_dim + j] = acc;
        }
    }

    ThetaSolveResult out;
    // Theta G = C  <=>  G^T Theta^T = C^T; G is symmetric.
    try {
        double gmax = 0.0;
        for (std::size_t i = 0; i < z_dim; ++i) gmax = std::max(gmax, gram[i * z_dim + i]);
        out.theta = mat_transpose(solve_linear(gram, mat_transpose(cross),
                                               tol * std::max(1.0, gmax)));
    } catch (const ValueError&) {
        out.used_pseudo_inverse = true;
        out.theta = mat_mul(cross, pinv_psd(gram, tol));
    }
    return out;
}

/// Quadratic prediction loss of one probe column under a given Theta.
inline double probe_prediction_loss(const Tensor& theta, const Tensor& z_hat_probe,
                                    const Tensor& y_probe, std::size_t col) {
    const std::size_t y_dim = y_probe.rows(), z_dim = theta.cols();
    const std::size_t n = y_probe.cols();
    double acc = 0.0;
    for (std::size_t i = 0; i < y_dim; ++i) {
        double v = 0.0;
        for (std::size_t j = 0; j < z_dim; ++j) {
            v += theta[i * z_dim + j] * z_hat_probe[j * n + col];
        }
        const double d = v - y_probe[i * n + col];
        acc += d * d;
    }
    return acc;
}

/// Representative-subset report: the chosen target subset B, the residual
/// epsilon, and the coefficient norms r_alpha, r_beta.
struct AssumptionReport {
    std::vector<std::size_t> subset_indices;
    double epsilon = 0.0;
    double r_alpha = 0.0;
    double r_beta = 0.0;
    bool underspanned_warning = false; // raised when M < |Z|
};

/// Greedy max-residual selection of M representative targets, followed by
/// least-squares fits of every predicted latent (alpha, over the probe
/// points too when given) and every encoded target (beta) against the
/// representative latents.
inline AssumptionReport check_assumption1(const Tensor& w_u, const Tensor& w_e, const Tensor& x,
                                          const Tensor& y, std::size_t m,
                                          const Tensor* probe_x = nullptr,
                                          const Tensor* probe_y = nullptr) {
    const std::size_t n = x.cols();
    if (m > n) throw ValueError("check_assumption1: M exceeds the sample count");
    const std::size_t z_dim = w_u.rows();
    const Tensor z_hat = mat_mul(w_u, x);
    const Tensor z_enc = mat_mul(w_e, y);

    AssumptionReport rep;
    rep.underspanned_warning = m < z_dim;

    // Greedy pivoted selection on encoded targets: repeatedly take the
    // column with the largest residual against the span selected so far.
    std::vector<std::vector<double>> basis; // orthonormal columns, length z_dim
    std::vector<double> col(z_dim), resid(z_dim);
    std::vector<bool> taken(n, false);
    for (std::size_t pick = 0; pick < m; ++pick) {
        double best_norm = -1.0;
        std::size_t best = 0;
        for (std::size_t s = 0; s < n; ++s) {
            if (taken[s]) continue;
            for (std::size_t i = 0; i < z_dim; ++i) resid[i] = z_enc[i * n + s];
            for (const auto& b : basis) {
                double dot = 0.0;
                for (std::size_t i = 0; i < z_dim; ++i) dot += resid[i] * b[i];
                for (std::size_t i = 0; i < z_dim; ++i) resid[i] -= dot * b[i];
            }
            double nrm = 0.0;
            for (std::size_t i = 0; i < z_dim; ++i) nrm += resid[i] * resid[i];
            if (nrm > best_norm) {
                best_norm = nrm;
                best = s;
            }
        }
        taken[best] = true;
        rep.subset_indices.push_back(best);
        for (std::size_t i = 0; i < z_dim; ++i) col[i] = z_enc[i * n + best];
        for (const auto& b : basis) {
            double dot = 0.0;
            for (std::size_t i = 0; i < z_dim; ++i) dot += col[i] * b[i];
            for (std::size_t i = 0; i < z_dim; ++i) col[i] -= dot * b[i];
        }
        double nrm = 0.0;
        for (std::size_t i = 0; i < z_dim; ++i) nrm += col[i] * col[i];
        nrm = std::sqrt(nrm);
        if (nrm > 1e-12) {
            for (std::size_t i = 0; i < z_dim; ++i) col[i] /= nrm;
            basis.push_back(col);
        }
    }
    std::sort(rep.subset_indices.begin(), rep.subset_indices.end());

    Tensor zb({z_dim, m});
    for (std::size_t j = 0; j < m; ++j) {
        const std::size_t s = rep.subset_indices[j];
        for (std::size_t i = 0; i < z_dim; ++i) zb[i * m + j] = z_enc[i * n + s];
    }

    auto fit_all = [&](const Tensor& latents, double& r_max) {
        const std::size_t cols = latents.cols();
        Tensor b({z_dim, 1});
        for (std::size_t s = 0; s < cols; ++s) {
            for (std::size_t i = 0; i < z_dim; ++i) b[i] = latents[i * cols + s];
            auto [coef, res] = least_squares(zb, b);
            rep.epsilon = std::max(rep.epsilon, res);
            double nrm = 0.0;
            for (std::size_t i = 0; i < m; ++i) nrm += coef[i] * coef[i];
            r_max = std::max(r_max, std::sqrt(nrm));
        }
    };
    fit_all(z_hat, rep.r_alpha);
    fit_all(z_enc, rep.r_beta);
    if (probe_x) fit_all(mat_mul(w_u, *probe_x), rep.r_alpha);
    if (probe_y) fit_all(mat_mul(w_e, *probe_y), rep.r_beta);
    return rep;
}

/// The analytic instability bound: 2 (sigma_p^2 r_alpha^2 + sigma_p sigma_r r_alpha
/// r_beta) a M / (c N). Strictly decreasing in N and c, increasing in the
/// rest.
inline double theorem1_bound(const AssumptionReport& rep, const StabilityConfig& cfg,
                             double sigma_p, double sigma_r, std::size_t m, std::size_t n) {
    if (!(sigma_p > 0.0) || !(sigma_r > 0.0) || !(cfg.c_strong_convexity > 0.0) ||
        !(cfg.a_assumption2 > 0.0) || m == 0 || n == 0) {
        throw ValueError("theorem1_bound: all constants must be positive");
    }
    return 2.0 * (sigma_p * sigma_p * rep.r_alpha * rep.r_alpha +
                  sigma_p * sigma_r * rep.r_alpha * rep.r_beta) *
           cfg.a_assumption2 * static_cast<double>(m) /
           (cfg.c_strong_convexity * static_cast<double>(n));
}

/// One instability trial at batch size N: gamma_hat is the maximum
/// prediction-loss perturbation over k single-sample replacements and the
/// probe set; sigma estimates and the representative-subset report feed the bound.
struct InstabilityTrial {
    double gamma_hat = 0.0;
    double sigma_p = 0.0;
    double sigma_r = 0.0;
    double bound = 0.0;
    AssumptionReport assumption;
    bool degenerate = false; // rank-deficient Gram matrix encountered
};

/// Pool of flattened samples the harness draws from.
struct SamplePool {
    Tensor x; // |X| x pool size
    Tensor y; // |Y| x pool size

    std::size_t size() const { return x.cols(); }

    void gather(const std::vector<std::size_t>& idx, Tensor& gx, Tensor& gy) const {
        const std::size_t xd = x.rows(), yd = y.rows(), n = idx.size(), p = x.cols();
        gx = Tensor({xd, n});
        gy = Tensor({yd, n});
        for (std::size_t j = 0; j < n; ++j) {
            for (std::size_t i = 0; i < xd; ++i) gx[i * n + j] = x[i * p + idx[j]];
            for (std::size_t i = 0; i < yd; ++i) gy[i * n + j] = y[i * p + idx[j]];
        }
    }
};

inline InstabilityTrial empirical_instability(const SamplePool& pool, const Tensor& probe_x,
                                              const Tensor& probe_y, const Tensor& w_u,
                                              const Tensor& w_e, std::size_t n,
                                              const StabilityConfig& cfg, Rng& rng) {
    if (n < w_u.rows() + 1) throw ValueError("empirical_instability: N must exceed |Z|");
    std::vector<std::size_t> batch_idx(n);
    for (auto& i : batch_idx) i = static_cast<std::size_t>(rng.below(pool.size()));
    Tensor bx, by;
    pool.gather(batch_idx, bx, by);

    ThetaSolveResult base = solve_theta(w_u, w_e, bx, by, cfg.solve_tolerance);
    const Tensor z_probe = mat_mul(w_u, probe_x);
    const std::size_t n_probe = probe_x.cols();

    InstabilityTrial trial;
    trial.degenerate = base.used_pseudo_inverse;

    std::vector<double> base_loss(n_probe);
    for (std::size_t p = 0; p < n_probe; ++p) {
        base_loss[p] = probe_prediction_loss(base.theta, z_probe, probe_y, p);
    }

    // sigma estimates: max loss-gradient norm 2||v - y|| over the probe set,
    // across every Theta this trial visits.
    auto update_sigmas = [&](const Tensor& theta) {
        const Tensor pred = mat_mul(theta, z_probe);
        const Tensor recon = mat_mul(theta, mat_mul(w_e, probe_y));
        for (std::size_t p = 0; p < n_probe; ++p) {
            double gp = 0.0, gr = 0.0;
            for (std::size_t i = 0; i < probe_y.rows(); ++i) {
                const double dp = pred[i * n_probe + p] - probe_y[i * n_probe + p];
                const double dr = recon[i * n_probe + p] - probe_y[i * n_probe + p];
                gp += dp * dp;
                gr += dr * dr;
            }
            trial.sigma_p = std::max(trial.sigma_p, 2.0 * std::sqrt(gp));
            trial.sigma_r = std::max(trial.sigma_r, 2.0 * std::sqrt(gr));
        }
    };
    update_sigmas(base.theta);

    Tensor bx_mod = bx, by_mod = by;
    const std::size_t xd = bx.rows(), yd = by.rows();
    for (int rep = 0; rep < cfg.replacements_per_batch; ++rep) {
        const std::size_t i = static_cast<std::size_t>(rng.below(n));
        const std::size_t j = static_cast<std::size_t>(rng.below(pool.size()));
        // Swap in the replacement sample, solve, then restore.
        std::vector<double> saved_x(xd), saved_y(yd);
        for (std::size_t r = 0; r < xd; ++r) {
            saved_x[r] = bx_mod[r * n + i];
            bx_mod[r * n + i] = pool.x[r * pool.size() + j];
        }
        for (std::size_t r = 0; r < yd; ++r) {
            saved_y[r] = by_mod[r * n + i];
            by_mod[r * n + i] = pool.y[r * pool.size() + j];
        }
        ThetaSolveResult mod = solve_theta(w_u, w_e, bx_mod, by_mod, cfg.solve_tolerance);
        trial.degenerate = trial.degenerate || mod.used_pseudo_inverse;
        update_sigmas(mod.theta);
        for (std::size_t p = 0; p < n_probe; ++p) {
            const double delta =
                std::fabs(probe_prediction_loss(mod.theta, z_probe, probe_y, p) - base_loss[p]);
            trial.gamma_hat = std::max(trial.gamma_hat, delta);
        }
        for (std::size_t r = 0; r < xd; ++r) bx_mod[r * n + i] = saved_x[r];
        for (std::size_t r = 0; r < yd; ++r) by_mod[r * n + i] = saved_y[r];
    }

    const std::size_t m = cfg.representative_m == 0 ? w_u.rows() : cfg.representative_m;
    trial.assumption = check_assumption1(w_u, w_e, bx, by, m, &probe_x, &probe_y);
    trial.bound = theorem1_bound(trial.assumption, cfg, trial.sigma_p, trial.sigma_r, m, n);
    return trial;
}

/// Regularizer decomposition: L(Theta) = L_p + R1 + R2 with R1 = (M/N) L_r^B
/// and R2 the remaining reconstruction mass. The three terms sum to the
/// complete objective exactly.
struct RegularizerDecomposition {
    double prediction = 0.0; // L_p
    double r1 = 0.0;
    double r2 = 0.0;

    double total() const { return prediction + r1 + r2; }
};

inline RegularizerDecomposition regularizer_decomposition(
    const Tensor& theta, const Tensor& w_u, const Tensor& w_e, const Tensor& x, const Tensor& y,
    const std::vector<std::size_t>& subset_indices) {
    const std::size_t n = x.cols();
    const Tensor pred = mat_mul(theta, mat_mul(w_u, x));
    const Tensor recon = mat_mul(theta, mat_mul(w_e, y));
    const std::size_t yd = y.rows();
    std::vector<bool> in_b(n, false);
    for (std::size_t s : subset_indices) {
        if (s >= n) throw ValueError("regularizer_decomposition: subset index out of range");
        in_b[s] = true;
    }
    RegularizerDecomposition out;
    double lr_subset = 0.0, lr_rest = 0.0;
    for (std::size_t s = 0; s < n; ++s) {
        double lp = 0.0, lr = 0.0;
        for (std::size_t i = 0; i < yd; ++i) {
            const double dp = pred[i * n + s] - y[i * n + s];
            const double dr = recon[i * n + s] - y[i * n + s];
            lp += dp * dp;
            lr += dr * dr;
        }
        out.prediction += lp;
        (in_b[s] ? lr_subset : lr_rest) += lr;
    }
    out.prediction /= static_cast<double>(n);
    out.r1 = lr_subset / static_cast<double>(n);
    out.r2 = lr_rest / static_cast<double>(n);
    return out;
}

/// Per-N samples plus the fitted log-log decay slope of gamma_hat against N.
struct StabilityReport {
    std::vector<std::size_t> n_grid;
    std::vector<std::vector<double>> gamma_samples; // per N, one per trial
    std::vector<double> gamma_max;                  // per N
    std::vector<double> gamma_median;               // per N
    std::vector<double> bound;                      // per N (max over trials)
    // Worst-case estimated constants per N, from the per-trial assumption
    // reports and sigma estimates.
    std::vector<double> epsilon_max;
    std::vector<double> r_alpha_max;
    std::vector<double> r_beta_max;
    std::vector<double> sigma_p_max;
    std::vector<double> sigma_r_max;
    double slope = 0.0;
    double slope_stderr = 0.0;
    bool any_degenerate = false;
};

inline StabilityReport run_stability_study(const SamplePool& pool, const Tensor& probe_x,
                                           const Tensor& probe_y, const Tensor& w_u,
                                           const Tensor& w_e, const StabilityConfig& cfg,
                                           std::uint64_t seed) {
    StabilityReport rep;
    rep.n_grid = cfg.n_grid;
    for (std::size_t gi = 0; gi < cfg.n_grid.size(); ++gi) {
        const std::size_t n = cfg.n_grid[gi];
        std::vector<double> gammas;
        double bound_max = 0.0, eps_max = 0.0, ra_max = 0.0, rb_max = 0.0, sp_max = 0.0,
               sr_max = 0.0;
        for (int t = 0; t < cfg.trials_per_n; ++t) {
            Rng rng(child_seed(seed, "stability-trial", gi * 1000 + static_cast<std::size_t>(t)));
            InstabilityTrial trial =
                empirical_instability(pool, probe_x, probe_y, w_u, w_e, n, cfg, rng);
            gammas.push_back(trial.gamma_hat);
            bound_max = std::max(bound_max, trial.bound);
            eps_max = std::max(eps_max, trial.assumption.epsilon);
            ra_max = std::max(ra_max, trial.assumption.r_alpha);
            rb_max = std::max(rb_max, trial.assumption.r_beta);
            sp_max = std::max(sp_max, trial.sigma_p);
            sr_max = std::max(sr_max, trial.sigma_r);
            rep.any_degenerate = rep.any_degenerate || trial.degenerate;
        }
        std::vector<double> sorted = gammas;
        std::sort(sorted.begin(), sorted.end());
        rep.gamma_samples.push_back(gammas);
        rep.gamma_max.push_back(sorted.back());
        rep.gamma_median.push_back(sorted[sorted.size() / 2]);
        rep.bound.push_back(bound_max);
        rep.epsilon_max.push_back(eps_max);
        rep.r_alpha_max.push_back(ra_max);
        rep.r_beta_max.push_back(rb_max);
        rep.sigma_p_max.push_back(sp_max);
        rep.sigma_r_max.push_back(sr_max);
    }
    // Least-squares slope of log gamma_median against log N.
    const std::size_t k = rep.n_grid.size();
    double sx = 0.0, sy = 0.0, sxx = 0.0, sxy = 0.0;
    for (std::size_t i = 0; i < k; ++i) {
        const double lx = std::log(static_cast<double>(rep.n_grid[i]));
        const double ly = std::log(std::max(rep.gamma_median[i], 1e-300));
        sx += lx;
        sy += ly;
        sxx += lx * lx;
        sxy += lx * ly;
    }
    const double denom = static_cast<double>(k) * sxx - sx * sx;
    rep.slope = (static_cast<double>(k) * sxy - sx * sy) / denom;
    const double intercept = (sy - rep.slope * sx) / static_cast<double>(k);
    double ss_res = 0.0, ss_x = 0.0;
    const double mean_x = sx / static_cast<double>(k);
    for (std::size_t i = 0; i < k; ++i) {
        const double lx = std::log(static_cast<double>(rep.n_grid[i]));
        const double ly = std::log(std::max(rep.gamma_median[i], 1e-300));
        const double r = ly - (intercept + rep.slope * lx);
        ss_res += r * r;
        ss_x += (lx - mean_x) * (lx - mean_x);
    }
    rep.slope_stderr =
        k > 2 ? std::sqrt(ss_res / (static_cast<double>(k) - 2.0) / ss_x) : 0.0;
    return rep;
}

} // namespace tealab
