#pragma once

#include <algorithm>
#include <cmath>
#include <map>
#include <numeric>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "tealab/losses.hpp"
#include "tealab/tensor.hpp"

namespace tealab {

inline double mse(std::span<const double> predictions, std::span<const double> targets) {
    if (predictions.size() != targets.size() || predictions.empty()) {
        throw ShapeError("mse: size mismatch or empty input");
    }
    double acc = 0.0;
    for (std::size_t i = 0; i < predictions.size(); ++i) {
        const double d = predictions[i] - targets[i];
        acc += d * d;
    }
    return acc / static_cast<double>(predictions.size());
}

/// ROC AUC as the Mann-Whitney rank statistic with half credit for ties.
/// Returns nullopt when only one class is present (undefined metric).
inline std::optional<double> roc_auc(std::span<const double> scores,
                                     std::span<const double> labels) {
    if (scores.size() != labels.size() || scores.empty()) {
        throw ShapeError("roc_auc: size mismatch or empty input");
    }
    const std::size_t n = scores.size();
    std::size_t pos = 0;
    for (std::size_t i = 0; i < n; ++i) {
        if (labels[i] != 0.0 && labels[i] != 1.0) {
            throw ValueError("roc_auc: label outside {0,1}");
        }
        pos += labels[i] == 1.0;
    }
    const std::size_t neg = n - pos;
    if (pos == 0 || neg == 0) return std::nullopt;

    std::vector<std::size_t> idx(n);
    std::iota(idx.begin(), idx.end(), 0);
    std::sort(idx.begin(), idx.end(),
              [&](std::size_t a, std::size_t b) { return scores[a] < scores[b]; });
    // Average ranks over tied score groups, then U = R_pos - P(P+1)/2.
    double rank_sum_pos = 0.0;
    std::size_t i = 0;
    while (i < n) {
        std::size_t j = i;
        while (j + 1 < n && scores[idx[j + 1]] == scores[idx[i]]) ++j;
        const double avg_rank = 0.5 * static_cast<double>(i + 1 + j + 1);
        for (std::size_t k = i; k <= j; ++k) {
            if (labels[idx[k]] == 1.0) rank_sum_pos += avg_rank;
        }
        i = j + 1;
    }
    const double u = rank_sum_pos - 0.5 * static_cast<double>(pos) * static_cast<double>(pos + 1);
    return u / (static_cast<double>(pos) * static_cast<double>(neg));
}

/// Area under the precision-recall curve by the average-precision
/// convention: precision at each distinct threshold integrated over the
/// recall steps. Ties are handled at the threshold level.
inline std::optional<double> pr_auc(std::span<const double> scores,
                                    std::span<const double> labels) {
    if (scores.size() != labels.size() || scores.empty()) {
        throw ShapeError("pr_auc: size mismatch or empty input");
    }
    const std::size_t n = scores.size();
    std::size_t pos = 0;
    for (std::size_t i = 0; i < n; ++i) {
        if (labels[i] != 0.0 && labels[i] != 1.0) {
            throw ValueError("pr_auc: label outside {0,1}");
        }
        pos += labels[i] == 1.0;
    }
    if (pos == 0 || pos == n) return std::nullopt;

    std::vector<std::size_t> idx(n);
    std::iota(idx.begin(), idx.end(), 0);
    std::sort(idx.begin(), idx.end(),
              [&](std::size_t a, std::size_t b) { return scores[a] > scores[b]; });
    double ap = 0.0;
    double prev_recall = 0.0;
    std::size_t tp = 0, fp = 0;
    std::size_t i = 0;
    while (i < n) {
        std::size_t j = i;
        while (j + 1 < n && scores[idx[j + 1]] == scores[idx[i]]) ++j;
        for (std::size_t k = i; k <= j; ++k) {
            if (labels[idx[k]] == 1.0) {
                ++tp;
            } else {
                ++fp;
            }
        }
        const double recall = static_cast<double>(tp) / static_cast<double>(pos);
        const double precision = static_cast<double>(tp) / static_cast<double>(tp + fp);
        ap += (recall - prev_recall) * precision;
        prev_recall = recall;
        i = j + 1;
    }
    return ap;
}

namespace detail {

/// Regularized incomplete beta function I_x(a, b) by continued fraction.
inline double betacf(double a, double b, double x) {
    const int max_iter = 300;
    const double eps = 3e-16, fpmin = 1e-300;
    const double qab = a + b, qap = a + 1.0, qam = a - 1.0;
    double c = 1.0, d = 1.0 - qab * x / qap;
    if (std::fabs(d) < fpmin) d = fpmin;
    d = 1.0 / d;
    double h = d;
    for (int m = 1; m <= max_iter; ++m) {
        const int m2 = 2 * m;
        double aa = m * (b - m) * x / ((qam + m2) * (a + m2));
        d = 1.0 + aa * d;
        if (std::fabs(d) < fpmin) d = fpmin;
        c = 1.0 + aa / c;
        if (std::fabs(c) < fpmin) c = fpmin;
        d = 1.0 / d;
        h *= d * c;
        aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2));
        d = 1.0 + aa * d;
        if (std::fabs(d) < fpmin) d = fpmin;
        c = 1.0 + aa / c;
        if (std::fabs(c) < fpmin) c = fpmin;
        d = 1.0 / d;
        const double del = d * c;
        h *= del;
        if (std::fabs(del - 1.0) < eps) break;
    }
    return h;
}

inline double incomplete_beta(double a, double b, double x) {
    if (x <= 0.0) return 0.0;
    if (x >= 1.0) return 1.0;
    const double ln_bt = std::lgamma(a + b) - std::lgamma(a) - std::lgamma(b) +
                         a * std::log(x) + b * std::log(1.0 - x);
    const double bt = std::exp(ln_bt);
    if (x < (a + 1.0) / (a + b + 2.0)) return bt * betacf(a, b, x) / a;
    return 1.0 - bt * betacf(b, a, 1.0 - x) / b;
}

} // namespace detail

/// CDF of Student's t distribution with `dof` degrees of freedom.
inline double student_t_cdf(double t, double dof) {
    const double x = dof / (dof + t * t);
    const double p = 0.5 * detail::incomplete_beta(0.5 * dof, 0.5, x);
    return t >= 0.0 ? 1.0 - p : p;
}

struct TTestResult {
    double t = 0.0;
    double dof = 0.0;
    double p_value = 1.0;
    bool significant(double alpha = 0.05) const { return p_value < alpha; }
};

/// Welch's two-sample t-test for a difference in means. Identical
/// zero-variance samples return t = 0, p = 1 by convention.
inline TTestResult two_sample_ttest(std::span<const double> a, std::span<const double> b) {
    if (a.size() < 2 || b.size() < 2) {
        throw ValueError("two_sample_ttest: each sample needs at least 2 points");
    }
    const double na = static_cast<double>(a.size()), nb = static_cast<double>(b.size());
    double ma = 0.0, mb = 0.0;
    for (double v : a) ma += v;
    for (double v : b) mb += v;
    ma /= na;
    mb /= nb;
    double va = 0.0, vb = 0.0;
    for (double v : a) va += (v - ma) * (v - ma);
    for (double v : b) vb += (v - mb) * (v - mb);
    va /= (na - 1.0);
    vb /= (nb - 1.0);
    const double se2 = va / na + vb / nb;
    TTestResult r;
    if (se2 == 0.0) {
        if (ma == mb) return r; // degenerate: identical constants
        r.t = ma > mb ? std::numeric_limits<double>::infinity()
                      : -std::numeric_limits<double>::infinity();
        r.dof = na + nb - 2.0;
        r.p_value = 0.0;
        return r;
    }
    r.t = (ma - mb) / std::sqrt(se2);
    const double num = se2 * se2;
    const double den = (va / na) * (va / na) / (na - 1.0) + (vb / nb) * (vb / nb) / (nb - 1.0);
    r.dof = num / den;
    r.p_value = 2.0 * (1.0 - student_t_cdf(std::fabs(r.t), r.dof));
    return r;
}

struct SpearmanResult {
    double rho = 0.0;
    double p_value = 1.0;
};

/// Spearman rank correlation with tie-averaged ranks; significance via the
/// t approximation. Used for monotone-trend checks across sweep points.
inline SpearmanResult spearman_trend(std::span<const double> x, std::span<const double> y) {
    if (x.size() != y.size() || x.size() < 3) {
        throw ValueError("spearman_trend: need >= 3 paired points");
    }
    const std::size_t n = x.size();
    auto ranks = [n](std::span<const double> v) {
        std::vector<std::size_t> idx(n);
        std::iota(idx.begin(), idx.end(), 0);
        std::sort(idx.begin(), idx.end(),
                  [&](std::size_t a, std::size_t b) { return v[a] < v[b]; });
        std::vector<double> r(n);
        std::size_t i = 0;
        while (i < n) {
            std::size_t j = i;
            while (j + 1 < n && v[idx[j + 1]] == v[idx[i]]) ++j;
            const double avg = 0.5 * static_cast<double>(i + 1 + j + 1);
            for (std::size_t k = i; k <= j; ++k) r[idx[k]] = avg;
            i = j + 1;
        }
        return r;
    };
    const std::vector<double> rx = ranks(x), ry = ranks(y);
    double mx = 0.0, my = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        mx += rx[i];
        my += ry[i];
    }
    mx /= static_cast<double>(n);
    my /= static_cast<double>(n);
    double sxy = 0.0, sxx = 0.0, syy = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        sxy += (rx[i] - mx) * (ry[i] - my);
        sxx += (rx[i] - mx) * (rx[i] - mx);
        syy += (ry[i] - my) * (ry[i] - my);
    }
    SpearmanResult r;
    if (sxx == 0.0 || syy == 0.0) return r;
    r.rho = sxy / std::sqrt(sxx * syy);
    const double dof = static_cast<double>(n) - 2.0;
    if (std::fabs(r.rho) >= 1.0) {
        r.p_value = 0.0;
    } else {
        const double t = r.rho * std::sqrt(dof / (1.0 - r.rho * r.rho));
        r.p_value = 2.0 * (1.0 - student_t_cdf(std::fabs(t), dof));
    }
    return r;
}

/// Named row range of the target vector (e.g. the predictable/unpredictable
/// blocks of the adversarial generator).
struct BlockRange {
    std::string name;
    std::size_t row_begin = 0;
    std::size_t row_end = 0;
};

/// Evaluation summary over a test matrix: per-variable metrics averaged
/// across variables, with undefined AUCs excluded and counted.
struct MetricReport {
    std::optional<double> mse;
    std::optional<double> roc_auc;
    std::optional<double> pr_auc;
    std::vector<double> per_row_mse;              // continuous rows only; NaN elsewhere
    std::vector<std::optional<double>> per_row_roc; // binary rows only
    std::vector<std::optional<double>> per_row_prc;
    std::vector<double> per_step_mse; // filled when step size divides the rows
    int undefined_auc_rows = 0;
    std::map<std::string, double> block_mse;
};

/// Compute the report from predictions and targets laid out as
/// (flat target rows) x (instances).
inline MetricReport compute_metrics(const Tensor& predictions, const Tensor& targets,
                                    const std::vector<VarKind>& row_kinds,
                                    const std::vector<BlockRange>& blocks = {},
                                    std::size_t step_rows = 0) {
    if (!predictions.same_shape(targets) || predictions.rank() != 2) {
        throw ShapeError("compute_metrics: predictions " + predictions.shape_string() +
                         " vs targets " + targets.shape_string());
    }
    const std::size_t rows = predictions.rows(), n = predictions.cols();
    if (row_kinds.size() != rows) throw ShapeError("compute_metrics: row kind count mismatch");

    MetricReport rep;
    rep.per_row_mse.assign(rows, std::nan(""));
    rep.per_row_roc.assign(rows, std::nullopt);
    rep.per_row_prc.assign(rows, std::nullopt);

    double mse_acc = 0.0, roc_acc = 0.0, prc_acc = 0.0;
    std::size_t mse_rows = 0, roc_rows = 0;
    std::vector<double> srow(n), trow(n);
    for (std::size_t r = 0; r < rows; ++r) {
        for (std::size_t j = 0; j < n; ++j) {
            srow[j] = predictions[r * n + j];
            trow[j] = targets[r * n + j];
        }
        if (row_kinds[r] == VarKind::Continuous) {
            const double m = mse(srow, trow);
            rep.per_row_mse[r] = m;
            mse_acc += m;
            ++mse_rows;
        } else {
            const auto roc = roc_auc(srow, trow);
            const auto prc = pr_auc(srow, trow);
            rep.per_row_roc[r] = roc;
            rep.per_row_prc[r] = prc;
            if (roc && prc) {
                roc_acc += *roc;
                prc_acc += *prc;
                ++roc_rows;
            } else {
                ++rep.undefined_auc_rows;
            }
        }
    }
    if (mse_rows) rep.mse = mse_acc / static_cast<double>(mse_rows);
    if (roc_rows) {
        rep.roc_auc = roc_acc / static_cast<double>(roc_rows);
        rep.pr_auc = prc_acc / static_cast<double>(roc_rows);
    }
    for (const BlockRange& b : blocks) {
        if (b.row_end > rows || b.row_begin >= b.row_end) {
            throw ShapeError("compute_metrics: block '" + b.name + "' out of range");
        }
        double acc = 0.0;
        for (std::size_t r = b.row_begin; r < b.row_end; ++r) {
            for (std::size_t j = 0; j < n; ++j) {
                const double d = predictions[r * n + j] - targets[r * n + j];
                acc += d * d;
            }
        }
        rep.block_mse[b.name] =
            acc / static_cast<double>((b.row_end - b.row_begin) * n);
    }
    if (step_rows > 0 && rows % step_rows == 0) {
        const std::size_t steps = rows / step_rows;
        rep.per_step_mse.assign(steps, 0.0);
        for (std::size_t s = 0; s < steps; ++s) {
            double acc = 0.0;
            for (std::size_t r = s * step_rows; r < (s + 1) * step_rows; ++r) {
                for (std::size_t j = 0; j < n; ++j) {
                    const double d = predictions[r * n + j] - targets[r * n + j];
                    acc += d * d;
                }
            }
            rep.per_step_mse[s] = acc / static_cast<double>(step_rows * n);
        }
    }
    return rep;
}

inline double sample_mean(std::span<const double> v) {
    double acc = 0.0;
    for (double x : v) acc += x;
    return acc / static_cast<double>(v.size());
}

/// Standard error of the mean (sample stddev / sqrt(n)).
inline double standard_error(std::span<const double> v) {
    if (v.size() < 2) return 0.0;
    const double m = sample_mean(v);
    double acc = 0.0;
    for (double x : v) acc += (x - m) * (x - m);
    return std::sqrt(acc / static_cast<double>(v.size() - 1)) /
           std::sqrt(static_cast<double>(v.size()));
}

} // namespace tealab
