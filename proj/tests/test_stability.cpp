#include <doctest.h>

#include <cmath>

#include "tealab/rng.hpp"
#include "tealab/stability.hpp"

using namespace tealab;

namespace {

Tensor random_matrix(Rng& rng, std::size_t r, std::size_t c, double scale = 1.0) {
    Tensor t({r, c});
    for (std::size_t i = 0; i < t.size(); ++i) t[i] = scale * rng.normal();
    return t;
}

/// Full objective of the Theta problem: (1/N) sum ||T zh - y||^2 + ||T ze - y||^2.
double theta_objective(const Tensor& theta, const Tensor& w_u, const Tensor& w_e,
                       const Tensor& x, const Tensor& y) {
    const Tensor zh = mat_mul(w_u, x), ze = mat_mul(w_e, y);
    const Tensor p = mat_mul(theta, zh), r = mat_mul(theta, ze);
    double acc = 0.0;
    for (std::size_t i = 0; i < p.size(); ++i) {
        acc += (p[i] - y[i]) * (p[i] - y[i]) + (r[i] - y[i]) * (r[i] - y[i]);
    }
    return acc / static_cast<double>(x.cols());
}

/// Steepest descent with exact line search on the quadratic objective,
/// run to a tiny gradient norm. Independent of the closed-form path.
Tensor theta_gradient_descent(const Tensor& w_u, const Tensor& w_e, const Tensor& x,
                              const Tensor& y, double grad_tol) {
    const std::size_t zd = w_u.rows(), yd = y.rows(), n = x.cols();
    const Tensor zh = mat_mul(w_u, x), ze = mat_mul(w_e, y);
    // Gradient = 2 (Theta G - C) / N with G, C the Gram/cross sums.
    Tensor g_mat({zd, zd}), c_mat({yd, zd});
    for (std::size_t i = 0; i < zd; ++i) {
        for (std::size_t j = 0; j < zd; ++j) {
            double acc = 0.0;
            for (std::size_t s = 0; s < n; ++s) {
                acc += zh[i * n + s] * zh[j * n + s] + ze[i * n + s] * ze[j * n + s];
            }
            g_mat[i * zd + j] = acc / static_cast<double>(n);
        }
    }
    for (std::size_t i = 0; i < yd; ++i) {
        for (std::size_t j = 0; j < zd; ++j) {
            double acc = 0.0;
            for (std::size_t s = 0; s < n; ++s) {
                acc += y[i * n + s] * (zh[j * n + s] + ze[j * n + s]);
            }
            c_mat[i * zd + j] = acc / static_cast<double>(n);
        }
    }
    Tensor theta({yd, zd});
    for (int iter = 0; iter < 200000; ++iter) {
        Tensor grad = mat_scale(mat_sub(mat_mul(theta, g_mat), c_mat), 2.0);
        const double gn = frobenius_norm(grad);
        if (gn < grad_tol) break;
        const Tensor dg = mat_mul(grad, g_mat);
        const double denom = 2.0 * dot_all(dg, grad);
        const double step = dot_all(grad, grad) / denom;
        theta = mat_sub(theta, mat_scale(grad, step));
    }
    return theta;
}

} // namespace

TEST_CASE("solve_theta: scalar case solved by hand") {
    // x = 1, y = 2, W_u = W_e = 1 => Theta* = (2*1 + 2*2) / (1 + 4) = 6/5.
    Tensor w_u({1, 1}, {1.0}), w_e({1, 1}, {1.0});
    Tensor x({1, 1}, {1.0}), y({1, 1}, {2.0});
    auto res = solve_theta(w_u, w_e, x, y);
    CHECK(res.theta[0] == doctest::Approx(1.2).epsilon(1e-14));
    CHECK(!res.used_pseudo_inverse);
}

TEST_CASE("solve_theta agrees with a gradient-descent minimizer") {
    Rng rng(201);
    for (int rep = 0; rep < 5; ++rep) {
        const std::size_t xd = 8, yd = 12, zd = 4, n = 50;
        Tensor w_u = random_matrix(rng, zd, xd, 0.5);
        Tensor w_e = random_matrix(rng, zd, yd, 0.5);
        Tensor x = random_matrix(rng, xd, n);
        Tensor y = random_matrix(rng, yd, n);
        Tensor closed = solve_theta(w_u, w_e, x, y).theta;
        Tensor gd = theta_gradient_descent(w_u, w_e, x, y, 1e-12);
        for (std::size_t i = 0; i < closed.size(); ++i) {
            CHECK(std::fabs(closed[i] - gd[i]) <= 1e-8);
        }
    }
}

TEST_CASE("solve_theta is optimal against random perturbations") {
    Rng rng(202);
    Tensor w_u = random_matrix(rng, 3, 6, 0.5);
    Tensor w_e = random_matrix(rng, 3, 9, 0.5);
    Tensor x = random_matrix(rng, 6, 30);
    Tensor y = random_matrix(rng, 9, 30);
    Tensor theta = solve_theta(w_u, w_e, x, y).theta;
    const double at_opt = theta_objective(theta, w_u, w_e, x, y);
    for (int rep = 0; rep < 100; ++rep) {
        Tensor delta = random_matrix(rng, 9, 3, 0.05);
        CHECK(theta_objective(mat_add(theta, delta), w_u, w_e, x, y) >= at_opt - 1e-12);
    }
}

TEST_CASE("solve_theta is permutation-invariant in sample order") {
    Rng rng(203);
    const std::size_t n = 25;
    Tensor w_u = random_matrix(rng, 3, 5, 0.5);
    Tensor w_e = random_matrix(rng, 3, 7, 0.5);
    Tensor x = random_matrix(rng, 5, n);
    Tensor y = random_matrix(rng, 7, n);
    std::vector<std::size_t> perm(n);
    for (std::size_t i = 0; i < n; ++i) perm[i] = (i * 7 + 3) % n;
    Tensor xp({5, n}), yp({7, n});
    for (std::size_t j = 0; j < n; ++j) {
        for (std::size_t i = 0; i < 5; ++i) xp[i * n + j] = x[i * n + perm[j]];
        for (std::size_t i = 0; i < 7; ++i) yp[i * n + j] = y[i * n + perm[j]];
    }
    Tensor t1 = solve_theta(w_u, w_e, x, y).theta;
    Tensor t2 = solve_theta(w_u, w_e, xp, yp).theta;
    for (std::size_t i = 0; i < t1.size(); ++i) {
        CHECK(std::fabs(t1[i] - t2[i]) <= 1e-9 * std::max(1.0, std::fabs(t1[i])));
    }
}

TEST_CASE("solve_theta flags rank deficiency and uses the pseudo-inverse") {
    // One sample with |Z| = 2 leaves a rank-1 Gram matrix.
    Tensor w_u({2, 2}, {1.0, 0.0, 0.0, 1.0});
    Tensor w_e({2, 2}, {1.0, 0.0, 0.0, 1.0});
    Tensor x({2, 1}, {1.0, 0.0});
    Tensor y({2, 1}, {1.0, 0.0});
    auto res = solve_theta(w_u, w_e, x, y);
    CHECK(res.used_pseudo_inverse);
    CHECK(res.theta.all_finite());
}

TEST_CASE("check_assumption1: spanning subsets give zero residual") {
    Rng rng(204);
    const std::size_t xd = 6, yd = 10, zd = 3, n = 40;
    Tensor w_u = random_matrix(rng, zd, xd, 0.5);
    Tensor w_e = random_matrix(rng, zd, yd, 0.5);
    Tensor x = random_matrix(rng, xd, n);
    Tensor y = random_matrix(rng, yd, n);

    AssumptionReport rep = check_assumption1(w_u, w_e, x, y, zd);
    CHECK(rep.epsilon <= 1e-10);
    CHECK(!rep.underspanned_warning);
    CHECK(rep.subset_indices.size() == zd);
    CHECK(rep.r_alpha > 0.0);
    CHECK(rep.r_beta > 0.0);

    // M = 1 on generically spread latents leaves a positive residual.
    AssumptionReport under = check_assumption1(w_u, w_e, x, y, 1);
    CHECK(under.underspanned_warning);
    CHECK(under.epsilon > 1e-6);

    CHECK_THROWS_AS(check_assumption1(w_u, w_e, x, y, n + 1), ValueError);
}

TEST_CASE("check_assumption1 residuals match a dense normal-equations oracle") {
    Rng rng(205);
    const std::size_t xd = 5, yd = 8, zd = 3, n = 20, m = 4;
    Tensor w_u = random_matrix(rng, zd, xd, 0.5);
    Tensor w_e = random_matrix(rng, zd, yd, 0.5);
    Tensor x = random_matrix(rng, xd, n);
    Tensor y = random_matrix(rng, yd, n);
    AssumptionReport rep = check_assumption1(w_u, w_e, x, y, m);

    const Tensor z_hat = mat_mul(w_u, x), z_enc = mat_mul(w_e, y);
    Tensor zb({zd, m});
    for (std::size_t j = 0; j < m; ++j) {
        for (std::size_t i = 0; i < zd; ++i) {
            zb[i * m + j] = z_enc[i * n + rep.subset_indices[j]];
        }
    }
    // Oracle: ridge-free normal equations via the PSD pseudo-inverse.
    Tensor gram = mat_mul(mat_transpose(zb), zb);
    Tensor gram_pinv = pinv_psd(gram);
    double eps_oracle = 0.0;
    for (const Tensor* latents : {&z_hat, &z_enc}) {
        for (std::size_t s = 0; s < n; ++s) {
            Tensor b({zd, 1});
            for (std::size_t i = 0; i < zd; ++i) b[i] = (*latents)[i * n + s];
            Tensor coef = mat_mul(gram_pinv, mat_mul(mat_transpose(zb), b));
            Tensor res = mat_sub(mat_mul(zb, coef), b);
            eps_oracle = std::max(eps_oracle, frobenius_norm(res));
        }
    }
    CHECK(std::fabs(rep.epsilon - eps_oracle) <= 1e-10);
}

TEST_CASE("theorem1_bound: plug-in values and scaling laws") {
    AssumptionReport rep;
    rep.r_alpha = 1.0;
    rep.r_beta = 1.0;
    StabilityConfig cfg;
    cfg.c_strong_convexity = 1.0;
    cfg.a_assumption2 = 1.0;
    // All constants 1, M = 1, N = 1: bound = 2 (1 + 1) / 1 = 4.
    CHECK(theorem1_bound(rep, cfg, 1.0, 1.0, 1, 1) == doctest::Approx(4.0));
    // Doubling N halves the bound exactly.
    const double b1 = theorem1_bound(rep, cfg, 1.0, 1.0, 1, 100);
    const double b2 = theorem1_bound(rep, cfg, 1.0, 1.0, 1, 200);
    CHECK(b1 == doctest::Approx(2.0 * b2).epsilon(1e-15));
    // Monotonicity in each constant.
    CHECK(theorem1_bound(rep, cfg, 2.0, 1.0, 1, 1) > 4.0);
    CHECK(theorem1_bound(rep, cfg, 1.0, 2.0, 1, 1) > 4.0);
    CHECK(theorem1_bound(rep, cfg, 1.0, 1.0, 2, 1) > 4.0);
    cfg.c_strong_convexity = 2.0;
    CHECK(theorem1_bound(rep, cfg, 1.0, 1.0, 1, 1) < 4.0);
    CHECK_THROWS_AS(theorem1_bound(rep, cfg, 0.0, 1.0, 1, 1), ValueError);
}

TEST_CASE("empirical instability: identical replacement gives gamma = 0") {
    Rng rng(206);
    const std::size_t xd = 5, yd = 8, zd = 3;
    Tensor w_u = random_matrix(rng, zd, xd, 0.5);
    Tensor w_e = random_matrix(rng, zd, yd, 0.5);
    // Pool of ONE repeated sample: every replacement is identical, so the
    // re-solved Theta cannot move.
    Tensor x0 = random_matrix(rng, xd, 1), y0 = random_matrix(rng, yd, 1);
    const std::size_t pool_n = 64;
    SamplePool pool;
    pool.x = Tensor({xd, pool_n});
    pool.y = Tensor({yd, pool_n});
    for (std::size_t j = 0; j < pool_n; ++j) {
        for (std::size_t i = 0; i < xd; ++i) pool.x[i * pool_n + j] = x0[i];
        for (std::size_t i = 0; i < yd; ++i) pool.y[i * pool_n + j] = y0[i];
    }
    StabilityConfig cfg;
    cfg.replacements_per_batch = 5;
    Rng trial_rng(207);
    InstabilityTrial t =
        empirical_instability(pool, pool.x, pool.y, w_u, w_e, 8, cfg, trial_rng);
    CHECK(t.gamma_hat == 0.0);
}

TEST_CASE("gamma decays roughly like 1/N and stays under the bound") {
    Rng rng(208);
    const std::size_t xd = 6, yd = 10, zd = 3, pool_n = 4000, probe_n = 64;
    // Low-rank data so the TEA structure is meaningful.
    Tensor mix_x = random_matrix(rng, xd, zd, 0.7);
    Tensor mix_y = random_matrix(rng, yd, zd, 0.7);
    SamplePool pool;
    pool.x = Tensor({xd, pool_n});
    pool.y = Tensor({yd, pool_n});
    for (std::size_t s = 0; s < pool_n; ++s) {
        std::vector<double> latent(zd);
        for (double& v : latent) v = rng.normal();
        for (std::size_t i = 0; i < xd; ++i) {
            double acc = 0.0;
            for (std::size_t k = 0; k < zd; ++k) acc += mix_x[i * zd + k] * latent[k];
            pool.x[i * pool_n + s] = acc + 0.05 * rng.normal();
        }
        for (std::size_t i = 0; i < yd; ++i) {
            double acc = 0.0;
            for (std::size_t k = 0; k < zd; ++k) acc += mix_y[i * zd + k] * latent[k];
            pool.y[i * pool_n + s] = acc + 0.05 * rng.normal();
        }
    }
    Tensor probe_x({xd, probe_n}), probe_y({yd, probe_n});
    for (std::size_t s = 0; s < probe_n; ++s) {
        for (std::size_t i = 0; i < xd; ++i) probe_x[i * probe_n + s] = pool.x[i * pool_n + s];
        for (std::size_t i = 0; i < yd; ++i) probe_y[i * probe_n + s] = pool.y[i * pool_n + s];
    }
    Tensor w_u = random_matrix(rng, zd, xd, 0.4);
    Tensor w_e = random_matrix(rng, zd, yd, 0.4);

    StabilityConfig cfg;
    cfg.n_grid = {50, 100, 200, 400};
    cfg.replacements_per_batch = 10;
    cfg.trials_per_n = 3;
    StabilityReport rep = run_stability_study(pool, probe_x, probe_y, w_u, w_e, cfg, 209);
    CHECK(rep.slope < -0.5);
    CHECK(rep.slope > -1.6);
    for (std::size_t i = 0; i < rep.n_grid.size(); ++i) {
        CHECK(rep.gamma_max[i] <= rep.bound[i]);
        if (i + 1 < rep.n_grid.size()) CHECK(rep.bound[i + 1] < rep.bound[i]);
    }
}

TEST_CASE("regularizer decomposition: identity, M=N cancellation, oracle") {
    Rng rng(210);
    const std::size_t xd = 5, yd = 7, zd = 3, n = 12;
    Tensor w_u = random_matrix(rng, zd, xd, 0.5);
    Tensor w_e = random_matrix(rng, zd, yd, 0.5);
    Tensor x = random_matrix(rng, xd, n);
    Tensor y = random_matrix(rng, yd, n);
    Tensor theta = random_matrix(rng, yd, zd, 0.5);

    std::vector<std::size_t> subset{1, 4, 7};
    auto dec = regularizer_decomposition(theta, w_u, w_e, x, y, subset);

    // Scalar-loop oracle for the full objective.
    double lp = 0.0, lr = 0.0;
    const Tensor pred = mat_mul(theta, mat_mul(w_u, x));
    const Tensor recon = mat_mul(theta, mat_mul(w_e, y));
    for (std::size_t i = 0; i < pred.size(); ++i) {
        lp += (pred[i] - y[i]) * (pred[i] - y[i]);
        lr += (recon[i] - y[i]) * (recon[i] - y[i]);
    }
    lp /= static_cast<double>(n);
    lr /= static_cast<double>(n);
    CHECK(std::fabs(dec.total() - (lp + lr)) <= 1e-12);
    CHECK(std::fabs(dec.prediction - lp) <= 1e-12);

    // R1 = (M/N) L_r^B with L_r^B the subset mean.
    double lrb = 0.0;
    for (std::size_t s : subset) {
        for (std::size_t i = 0; i < yd; ++i) {
            const double d = recon[i * n + s] - y[i * n + s];
            lrb += d * d;
        }
    }
    lrb /= static_cast<double>(subset.size());
    CHECK(std::fabs(dec.r1 - static_cast<double>(subset.size()) / static_cast<double>(n) * lrb) <=
          1e-12);

    // B = all targets: R2 vanishes.
    std::vector<std::size_t> all(n);
    for (std::size_t i = 0; i < n; ++i) all[i] = i;
    auto dec_all = regularizer_decomposition(theta, w_u, w_e, x, y, all);
    CHECK(std::fabs(dec_all.r2) <= 1e-15);
}
