#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "tealab/checkpoint.hpp"
#include "tealab/components.hpp"
#include "tealab/datagen.hpp"
#include "tealab/losses.hpp"
#include "tealab/metrics.hpp"
#include "tealab/rng.hpp"

namespace tealab {

/// Optimization and convergence settings. Defaults follow the standard
/// protocol: up to 10,000 iterations per stage, validation every 50,
/// patience of 10 checks, Adam with psi = 3e-4.
struct TrainConfig {
    double learning_rate = 3e-4;
    int minibatch = 64;
    long max_iterations = 10000;
    int validation_period = 50;
    int patience_checks = 10;
    double lambda = 0.5;
    double nu = 0.0;
    double validation_fraction = 0.2;
    std::uint64_t seed = 0;
    ModelType model = ModelType::Linear;
    std::size_t latent_dim = 8;
    int gru_layers = 1;

    struct Grids {
        std::vector<double> learning_rate{3e-5, 3e-4, 3e-3, 3e-2};
        std::vector<double> nu{0.0, 3e-5, 3e-4, 3e-3, 3e-2};
        std::vector<int> minibatch{32, 64, 128};
        std::vector<int> gru_layers{1, 2};
    } grids;
    int search_iterations = 20;
    int cv_folds = 3;

    void validate() const {
        if (!(learning_rate > 0.0)) throw ConfigError("learning rate must be positive");
        if (minibatch < 1) throw ConfigError("minibatch size must be >= 1");
        if (max_iterations < 1) throw ConfigError("max iterations must be >= 1");
        if (validation_period < 1) throw ConfigError("validation period must be >= 1");
        if (!(lambda >= 0.0 && lambda <= 1.0)) throw ConfigError("lambda outside [0, 1]");
        if (!(nu >= 0.0)) throw ConfigError("nu must be >= 0");
        if (!(validation_fraction > 0.0 && validation_fraction < 1.0)) {
            throw ConfigError("validation fraction must lie in (0, 1)");
        }
    }
};

enum class LossTerm : std::uint8_t { Prediction, Reconstruction, Latent, FeatureRecon };

inline const char* loss_term_name(LossTerm t) {
    switch (t) {
        case LossTerm::Prediction: return "L_p";
        case LossTerm::Reconstruction: return "L_r";
        case LossTerm::Latent: return "L_z";
        case LossTerm::FeatureRecon: return "L_rx";
    }
    return "?";
}

/// One training stage: the weighted loss terms it minimizes, the parameter
/// groups it updates, the routing map saying which term's gradient reaches
/// which group, and an optional stop-criterion override.
struct Stage {
    std::string name;
    std::vector<std::pair<LossTerm, double>> losses;
    std::vector<std::string> trainable;
    std::map<std::string, std::vector<LossTerm>> routing;
    std::optional<long> max_iterations;  // overrides TrainConfig when set
    std::optional<int> patience_checks;

    double weight_of(LossTerm t) const {
        for (const auto& [term, w] : losses) {
            if (term == t) return w;
        }
        return 0.0;
    }
};

struct StagePlan {
    std::vector<Stage> stages;
};

/// Architecture variant plus training-procedure flags.
struct Variant {
    enum class Flavor : std::uint8_t { Plain, Latent, LatentPrediction };

    ArchKind arch = ArchKind::Reg;
    Flavor flavor = Flavor::Plain;
    bool no_joint = false;
    bool no_staged = false;
    std::vector<int> stage_order; // optional override over {1,2,3}

    std::string name() const {
        std::string n = arch_name(arch);
        if (flavor == Flavor::Latent) n += "_L";
        if (flavor == Flavor::LatentPrediction) n += "_LP";
        if (!stage_order.empty()) {
            n += ":order=";
            for (std::size_t i = 0; i < stage_order.size(); ++i) {
                if (i) n += "-";
                n += std::to_string(stage_order[i]);
            }
            return n;
        }
        if (no_joint && no_staged) return n + ":neither";
        if (no_joint) return n + ":nojoint";
        if (no_staged) return n + ":nostaged";
        return n;
    }
};

inline Variant parse_variant(const std::string& s) {
    Variant v;
    std::string base = s, suffix;
    if (auto pos = s.find(':'); pos != std::string::npos) {
        base = s.substr(0, pos);
        suffix = s.substr(pos + 1);
    }
    if (base == "Base") {
        v.arch = ArchKind::Base;
    } else if (base == "Reg") {
        v.arch = ArchKind::Reg;
    } else if (base == "FEA") {
        v.arch = ArchKind::Fea;
    } else if (base == "TEA") {
        v.arch = ArchKind::Tea;
    } else if (base == "FTEA") {
        v.arch = ArchKind::Ftea;
    } else if (base == "TEA_L") {
        v.arch = ArchKind::Tea;
        v.flavor = Variant::Flavor::Latent;
    } else if (base == "TEA_LP") {
        v.arch = ArchKind::Tea;
        v.flavor = Variant::Flavor::LatentPrediction;
    } else {
        throw ConfigError("unknown variant '" + base + "'");
    }
    if (!suffix.empty()) {
        if (suffix == "nojoint") {
            v.no_joint = true;
        } else if (suffix == "nostaged") {
            v.no_staged = true;
        } else if (suffix == "neither") {
            v.no_joint = v.no_staged = true;
        } else if (suffix.rfind("order=", 0) == 0) {
            for (std::size_t i = 6; i < suffix.size(); ++i) {
                const char c = suffix[i];
                if (c == '-') continue;
                if (c < '1' || c > '3') throw ConfigError("bad stage order '" + suffix + "'");
                v.stage_order.push_back(c - '0');
            }
            if (v.stage_order.empty()) throw ConfigError("empty stage order in '" + s + "'");
        } else {
            throw ConfigError("unknown variant suffix '" + suffix + "'");
        }
    }
    return v;
}

namespace detail {

inline Stage direct_stage(ArchKind arch) {
    Stage s;
    s.name = "direct";
    s.losses = {{LossTerm::Prediction, 1.0}};
    if (arch == ArchKind::Fea) {
        s.trainable = {"phi", "d"};
        s.routing = {{"phi", {LossTerm::Prediction}}, {"d", {LossTerm::Prediction}}};
    } else {
        s.trainable = {"u", "theta"};
        s.routing = {{"u", {LossTerm::Prediction}}, {"theta", {LossTerm::Prediction}}};
    }
    return s;
}

inline Stage tea_stage1(ArchKind arch, double lambda) {
    Stage s;
    s.name = "stage1";
    if (arch == ArchKind::Fea) {
        s.losses = {{LossTerm::FeatureRecon, lambda}};
        s.trainable = {"phi", "r"};
        s.routing = {{"phi", {LossTerm::FeatureRecon}}, {"r", {LossTerm::FeatureRecon}}};
    } else {
        s.losses = {{LossTerm::Reconstruction, lambda}};
        s.trainable = {"e", "theta"};
        s.routing = {{"e", {LossTerm::Reconstruction}}, {"theta", {LossTerm::Reconstruction}}};
    }
    return s;
}

inline Stage tea_stage2(ArchKind arch, double lambda) {
    Stage s;
    s.name = "stage2";
    if (arch == ArchKind::Fea) {
        // No latent loss exists for FEA: the downstream predictor regresses
        // targets over the frozen shared model.
        s.losses = {{LossTerm::Prediction, 1.0 - lambda}};
        s.trainable = {"d"};
        s.routing = {{"d", {LossTerm::Prediction}}};
    } else {
        s.losses = {{LossTerm::Latent, 1.0 - lambda}};
        s.trainable = {"u"};
        s.routing = {{"u", {LossTerm::Latent}}};
    }
    return s;
}

inline Stage tea_stage3(ArchKind arch, Variant::Flavor flavor, double lambda) {
    Stage s;
    s.name = "stage3";
    if (arch == ArchKind::Fea) {
        s.losses = {{LossTerm::Prediction, 1.0 - lambda}, {LossTerm::FeatureRecon, lambda}};
        s.trainable = {"phi", "d", "r"};
        s.routing = {{"d", {LossTerm::Prediction}},
                     {"r", {LossTerm::FeatureRecon}},
                     {"phi", {LossTerm::Prediction, LossTerm::FeatureRecon}}};
        return s;
    }
    switch (flavor) {
        case Variant::Flavor::Plain:
            s.losses = {{LossTerm::Prediction, 1.0 - lambda}, {LossTerm::Reconstruction, lambda}};
            s.trainable = {"u", "e", "theta"};
            s.routing = {{"u", {LossTerm::Prediction}},
                         {"e", {LossTerm::Reconstruction}},
                         {"theta", {LossTerm::Prediction, LossTerm::Reconstruction}}};
            break;
        case Variant::Flavor::Latent:
            // Indirect variant: the predictor keeps regressing embeddings and
            // the latent loss backpropagates through both u and e.
            s.losses = {{LossTerm::Latent, 1.0 - lambda}, {LossTerm::Reconstruction, lambda}};
            s.trainable = {"u", "e", "theta"};
            s.routing = {{"u", {LossTerm::Latent}},
                         {"e", {LossTerm::Latent, LossTerm::Reconstruction}},
                         {"theta", {LossTerm::Reconstruction}}};
            break;
        case Variant::Flavor::LatentPrediction:
            s.losses = {{LossTerm::Prediction, 1.0 - lambda},
                        {LossTerm::Latent, 1.0 - lambda},
                        {LossTerm::Reconstruction, lambda}};
            s.trainable = {"u", "e", "theta"};
            s.routing = {{"u", {LossTerm::Prediction, LossTerm::Latent}},
                         {"e", {LossTerm::Latent, LossTerm::Reconstruction}},
                         {"theta", {LossTerm::Prediction, LossTerm::Reconstruction}}};
            break;
    }
    if (arch == ArchKind::Ftea) {
        // The feature-reconstruction arm hangs off the predicted latent and
        // is trained jointly.
        s.losses.emplace_back(LossTerm::FeatureRecon, lambda);
        s.trainable.push_back("r");
        s.routing["r"] = {LossTerm::FeatureRecon};
        s.routing["u"].push_back(LossTerm::FeatureRecon);
    }
    return s;
}

inline bool stage_trains_group(const Stage& s, const std::string& g) {
    return std::find(s.trainable.begin(), s.trainable.end(), g) != s.trainable.end();
}

inline bool stage_uses_latent(const Stage& s) {
    for (const auto& [t, w] : s.losses) {
        if (t == LossTerm::Latent) return true;
    }
    return false;
}

} // namespace detail

/// Assemble the stage plan for a variant. The canonical staged plan is
/// [stage1, stage2, stage3]; ablation flags drop stages and a stage-order
/// override permutes them. A plan is rejected when a stage would regress
/// embeddings from an encoder no earlier stage has trained.
inline StagePlan build_stage_plan(const Variant& v, double lambda) {
    if (!(lambda >= 0.0 && lambda <= 1.0)) throw ConfigError("lambda outside [0, 1]");
    StagePlan plan;
    const bool staged_arch = v.arch != ArchKind::Base && v.arch != ArchKind::Reg;
    if (!staged_arch) {
        if (v.no_joint || v.no_staged || !v.stage_order.empty() ||
            v.flavor != Variant::Flavor::Plain) {
            throw ConfigError("ablation flags apply only to autoencoder variants");
        }
        plan.stages.push_back(detail::direct_stage(v.arch));
        return plan;
    }
    if (!v.stage_order.empty() && (v.no_joint || v.no_staged)) {
        throw ConfigError("stage-order override cannot be combined with ablation flags");
    }
    std::vector<int> order;
    if (!v.stage_order.empty()) {
        order = v.stage_order;
    } else if (v.no_joint && v.no_staged) {
        // "Neither" collapses to vanilla direct prediction.
        plan.stages.push_back(detail::direct_stage(v.arch));
        return plan;
    } else if (v.no_joint) {
        order = {1, 2};
    } else if (v.no_staged) {
        order = {3};
    } else {
        order = {1, 2, 3};
    }
    for (int s : order) {
        switch (s) {
            case 1: plan.stages.push_back(detail::tea_stage1(v.arch, lambda)); break;
            case 2: plan.stages.push_back(detail::tea_stage2(v.arch, lambda)); break;
            case 3: plan.stages.push_back(detail::tea_stage3(v.arch, v.flavor, lambda)); break;
            default: throw ConfigError("stage index out of range: " + std::to_string(s));
        }
    }
    // Ordering rule: a frozen-encoder stage consuming the latent loss needs
    // the encoder trained earlier (covers rejecting plans that start at 2;
    // 3-1-2 is fine because stage 3 trains the encoder first).
    bool encoder_trained = false;
    for (const Stage& s : plan.stages) {
        const bool uses_latent = detail::stage_uses_latent(s);
        const bool trains_encoder = detail::stage_trains_group(s, "e");
        if (uses_latent && !trains_encoder && !encoder_trained) {
            throw ConfigError("stage '" + s.name +
                              "' regresses embeddings before any stage trained the encoder");
        }
        encoder_trained = encoder_trained || trains_encoder;
    }
    return plan;
}

// ---------------------------------------------------------------------------
// Adam
// ---------------------------------------------------------------------------

struct AdamState {
    Tensor m, v;
    long step = 0;
};

/// Standard Adam update (beta1 = 0.9, beta2 = 0.999, eps = 1e-8).
inline void adam_step(Tensor& param, const Tensor& grad, AdamState& st, double psi,
                      double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8) {
    if (!param.same_shape(grad)) {
        throw ShapeError("adam_step: parameter " + param.shape_string() + " vs gradient " +
                         grad.shape_string());
    }
    if (!grad.all_finite()) throw DivergenceError("adam_step: non-finite gradient");
    if (st.step == 0) {
        st.m = Tensor(param.shape());
        st.v = Tensor(param.shape());
    }
    ++st.step;
    const double bc1 = 1.0 - std::pow(beta1, static_cast<double>(st.step));
    const double bc2 = 1.0 - std::pow(beta2, static_cast<double>(st.step));
    for (std::size_t i = 0; i < param.size(); ++i) {
        const double g = grad[i];
        st.m[i] = beta1 * st.m[i] + (1.0 - beta1) * g;
        st.v[i] = beta2 * st.v[i] + (1.0 - beta2) * g * g;
        const double mhat = st.m[i] / bc1;
        const double vhat = st.v[i] / bc2;
        param[i] -= psi * mhat / (std::sqrt(vhat) + eps);
    }
}

// ---------------------------------------------------------------------------
// Stage execution
// ---------------------------------------------------------------------------

namespace detail {

/// Target tensor for the feature-reconstruction loss: the full flattened
/// input for linear models, the temporal window only for recurrent ones.
inline Tensor feature_recon_target(const Batch& batch, const ComponentSet& cs) {
    if (cs.spec().model == ModelType::Linear) return batch.flat_x;
    const DataDims& d = cs.spec().dims;
    const std::size_t B = batch.size;
    Tensor t({d.window_x * d.temporal_x, B});
    for (std::size_t k = 0; k < t.size(); ++k) {
        t[k] = batch.flat_x[d.static_dim * B + k];
    }
    return t;
}

/// Build the requested loss-term nodes over one batch. Terms share the
/// underlying parameter leaves; each term is a separate scalar root.
inline std::map<LossTerm, NodePtr> build_terms(const ComponentSet& cs, const Batch& batch,
                                               const std::vector<LossTerm>& needed,
                                               const LossSpec& ls) {
    std::map<LossTerm, NodePtr> out;
    for (LossTerm t : needed) {
        switch (t) {
            case LossTerm::Prediction:
                out[t] = prediction_loss(cs.predict(batch), batch.flat_y, ls);
                break;
            case LossTerm::Reconstruction:
                out[t] = reconstruction_loss(cs.decode(cs.encode(batch)), batch.flat_y, ls);
                break;
            case LossTerm::Latent:
                out[t] = latent_loss(cs.predict_latent(batch), cs.encode(batch));
                break;
            case LossTerm::FeatureRecon:
                out[t] = quadratic_loss(cs.feature_reconstruct(batch),
                                        feature_recon_target(batch, cs));
                break;
        }
    }
    return out;
}

inline std::vector<LossTerm> needed_terms(const Stage& stage) {
    std::vector<LossTerm> out;
    for (const auto& [t, w] : stage.losses) {
        if (w != 0.0) out.push_back(t);
    }
    return out;
}

} // namespace detail

/// Data loss of a stage on a batch: the weighted sum of its loss terms
/// (the l2 penalty is excluded; it is an optimization term, not a fit
/// measure).
inline double evaluate_stage_loss(const ComponentSet& cs, const Stage& stage,
                                  const Batch& batch, const LossSpec& ls) {
    auto terms = detail::build_terms(cs, batch, detail::needed_terms(stage), ls);
    double total = 0.0;
    for (const auto& [t, w] : stage.losses) {
        if (w != 0.0) total += w * terms[t]->value[0];
    }
    return total;
}

/// One optimization step of a stage on one batch: per-term backward passes,
/// routed per-group gradient assembly, l2 penalty on every trainable weight,
/// then Adam. Returns the batch data loss.
inline double stage_step(ComponentSet& cs, const Stage& stage, const Batch& batch,
                         const LossSpec& ls, double psi,
                         std::map<std::string, AdamState>& adam, long iteration) {
    auto terms = detail::build_terms(cs, batch, detail::needed_terms(stage), ls);

    double data_loss = 0.0;
    for (const auto& [t, w] : stage.losses) {
        if (w != 0.0) data_loss += w * terms[t]->value[0];
    }
    if (!std::isfinite(data_loss)) {
        throw DivergenceError("non-finite loss in " + stage.name + " at iteration " +
                              std::to_string(iteration));
    }

    // Collect trainable parameters in declaration order.
    std::vector<const ComponentSet::Param*> trainable;
    for (const auto& p : cs.params()) {
        if (detail::stage_trains_group(stage, p.group)) trainable.push_back(&p);
    }

    // Per-term gradients of every trainable parameter.
    std::map<LossTerm, std::vector<Tensor>> term_grads;
    for (const auto& [t, node] : terms) {
        cs.zero_param_grads();
        backward(node);
        std::vector<Tensor> grads;
        grads.reserve(trainable.size());
        for (const auto* p : trainable) grads.push_back(p->node->grad);
        term_grads[t] = std::move(grads);
    }

    // Routed total per parameter, plus the l2 term 2 nu W.
    for (std::size_t i = 0; i < trainable.size(); ++i) {
        const auto& p = *trainable[i];
        Tensor total(p.node->value.shape());
        auto it = stage.routing.find(p.group);
        if (it != stage.routing.end()) {
            for (LossTerm t : it->second) {
                const double w = stage.weight_of(t);
                if (w == 0.0) continue;
                const Tensor& g = term_grads[t][i];
                for (std::size_t k = 0; k < total.size(); ++k) total[k] += w * g[k];
            }
        }
        if (ls.nu > 0.0) {
            for (std::size_t k = 0; k < total.size(); ++k) {
                total[k] += 2.0 * ls.nu * p.node->value[k];
            }
        }
        if (!total.all_finite()) {
            throw DivergenceError("non-finite gradient for " + p.name + " in " + stage.name +
                                  " at iteration " + std::to_string(iteration));
        }
        adam_step(p.node->value, total, adam[p.name], psi);
    }
    return data_loss;
}

struct StageLogEntry {
    std::string stage;
    long iteration = 0;
    double train_loss = 0.0;
    double val_loss = 0.0;
};

struct StageResult {
    double best_val_loss = std::numeric_limits<double>::infinity();
    long iterations_run = 0;
    std::vector<StageLogEntry> log;
};

/// Minibatch loop of one stage: i.i.d. sampling with replacement, periodic
/// validation, best-checkpoint tracking with patience, restore-best on exit.
inline StageResult run_stage(ComponentSet& cs, const Stage& stage, const WindowedDataset& ds,
                             const std::vector<std::size_t>& train_idx,
                             const std::vector<std::size_t>& val_idx, const TrainConfig& cfg,
                             Rng& rng) {
    cfg.validate();
    if (train_idx.empty()) throw ValueError("run_stage: empty training split");
    if (val_idx.empty()) throw ValueError("run_stage: empty validation split");

    LossSpec ls{ds.target_kinds_flat, cfg.lambda, cfg.nu};
    std::map<std::string, AdamState> adam; // fresh optimizer state per stage

    const Batch val_batch = make_batch(ds, val_idx);
    StageResult res;
    std::vector<Tensor> best_params;
    auto snapshot = [&]() {
        best_params.clear();
        for (const auto& p : cs.params()) best_params.push_back(p.node->value);
    };
    snapshot();
    res.best_val_loss = evaluate_stage_loss(cs, stage, val_batch, ls);

    const long max_iterations = stage.max_iterations.value_or(cfg.max_iterations);
    const int patience = stage.patience_checks.value_or(cfg.patience_checks);
    int checks_without_improvement = 0;
    std::vector<std::size_t> batch_idx(static_cast<std::size_t>(cfg.minibatch));
    double last_train_loss = 0.0;
    for (long iter = 1; iter <= max_iterations; ++iter) {
        for (auto& bi : batch_idx) {
            bi = train_idx[static_cast<std::size_t>(rng.below(train_idx.size()))];
        }
        const Batch batch = make_batch(ds, batch_idx);
        last_train_loss = stage_step(cs, stage, batch, ls, cfg.learning_rate, adam, iter);
        res.iterations_run = iter;

        if (iter % cfg.validation_period == 0) {
            const double val_loss = evaluate_stage_loss(cs, stage, val_batch, ls);
            res.log.push_back({stage.name, iter, last_train_loss, val_loss});
            if (val_loss < res.best_val_loss) {
                res.best_val_loss = val_loss;
                snapshot();
                checks_without_improvement = 0;
            } else {
                ++checks_without_improvement;
                if (checks_without_improvement >= patience) break;
            }
        }
    }
    // Restore the best-validation parameters.
    for (std::size_t i = 0; i < cs.params().size(); ++i) {
        cs.params()[i].node->value = best_params[i];
    }
    return res;
}

// ---------------------------------------------------------------------------
// Full variant training
// ---------------------------------------------------------------------------

struct RunResult {
    std::string variant;
    int run_index = 0;
    std::uint64_t seed = 0;
    std::map<std::string, double> metrics;
    int undefined_auc_rows = 0;
};

struct TrainOutcome {
    ComponentSet components;
    RunResult result;
    std::vector<StageLogEntry> logs;
    std::string stage_reached;
    double final_stage_best_val = std::numeric_limits<double>::infinity();
};

namespace detail {

/// Entity-level carve of a validation subset out of the training indices.
inline void carve_validation(const WindowedDataset& ds, std::vector<std::size_t>& train_idx,
                             std::vector<std::size_t>& val_idx, double fraction,
                             std::uint64_t seed) {
    std::vector<std::uint32_t> entities;
    for (std::size_t i : train_idx) {
        const std::uint32_t e = ds.instances[i].entity;
        if (std::find(entities.begin(), entities.end(), e) == entities.end()) {
            entities.push_back(e);
        }
    }
    if (entities.size() < 2) throw ValueError("too few training entities to carve validation");
    Rng rng(seed);
    rng.shuffle(entities);
    std::size_t n_val = static_cast<std::size_t>(
        fraction * static_cast<double>(entities.size()) + 0.5);
    n_val = std::max<std::size_t>(1, std::min(n_val, entities.size() - 1));
    std::vector<bool> is_val_entity;
    std::uint32_t max_e = 0;
    for (std::uint32_t e : entities) max_e = std::max(max_e, e);
    is_val_entity.assign(max_e + 1, false);
    for (std::size_t i = 0; i < n_val; ++i) is_val_entity[entities[i]] = true;

    std::vector<std::size_t> new_train;
    for (std::size_t i : train_idx) {
        if (is_val_entity[ds.instances[i].entity]) {
            val_idx.push_back(i);
        } else {
            new_train.push_back(i);
        }
    }
    train_idx = std::move(new_train);
}

/// Predictions over an index set, evaluated in chunks through the
/// inference hypothesis theta(u(x)).
inline Tensor predict_matrix(const ComponentSet& cs, const WindowedDataset& ds,
                             const std::vector<std::size_t>& idx, std::size_t chunk = 512) {
    const std::size_t rows = ds.dims.flat_y();
    Tensor out({rows, idx.size()});
    for (std::size_t start = 0; start < idx.size(); start += chunk) {
        const std::size_t end = std::min(idx.size(), start + chunk);
        std::vector<std::size_t> part(idx.begin() + static_cast<std::ptrdiff_t>(start),
                                      idx.begin() + static_cast<std::ptrdiff_t>(end));
        const Batch b = make_batch(ds, part);
        const Tensor pred = cs.predict_values(b);
        for (std::size_t r = 0; r < rows; ++r) {
            for (std::size_t j = 0; j < part.size(); ++j) {
                out[r * idx.size() + start + j] = pred[r * part.size() + j];
            }
        }
    }
    return out;
}

inline Tensor target_matrix(const WindowedDataset& ds, const std::vector<std::size_t>& idx) {
    const std::size_t rows = ds.dims.flat_y();
    Tensor out({rows, idx.size()});
    for (std::size_t j = 0; j < idx.size(); ++j) {
        const Instance& in = ds.instances[idx[j]];
        for (std::size_t r = 0; r < rows; ++r) out[r * idx.size() + j] = in.y[r];
    }
    return out;
}

} // namespace detail

/// Train a variant on pre-chosen index sets and evaluate on the test set
/// through the inference hypothesis. The workhorse behind train_variant,
/// cross-validation folds, and the sweep runner.
inline TrainOutcome train_with_indices(const Variant& variant, const WindowedDataset& ds,
                                       std::vector<std::size_t> train_idx,
                                       std::vector<std::size_t> val_idx,
                                       const std::vector<std::size_t>& test_idx,
                                       const TrainConfig& cfg) {
    cfg.validate();
    ArchitectureSpec arch;
    arch.kind = variant.arch;
    arch.model = cfg.model;
    arch.dims = ds.dims;
    arch.latent_dim = cfg.latent_dim;
    arch.gru_layers = cfg.gru_layers;
    arch.target_row_kinds = ds.target_kinds_flat;

    TrainConfig run_cfg = cfg;
    if (variant.arch == ArchKind::Base) run_cfg.nu = 0.0; // Base is unregularized

    StagePlan plan = build_stage_plan(variant, run_cfg.lambda);
    TrainOutcome out{ComponentSet::init(arch, child_seed(cfg.seed, "init")), {}, {}, ""};

    for (std::size_t si = 0; si < plan.stages.size(); ++si) {
        Rng stage_rng(child_seed(cfg.seed, "stage", si));
        StageResult sr =
            run_stage(out.components, plan.stages[si], ds, train_idx, val_idx, run_cfg, stage_rng);
        out.logs.insert(out.logs.end(), sr.log.begin(), sr.log.end());
        out.stage_reached = plan.stages[si].name;
        out.final_stage_best_val = sr.best_val_loss;
    }

    out.result.variant = variant.name();
    out.result.seed = cfg.seed;
    if (!test_idx.empty()) {
        const Tensor preds = detail::predict_matrix(out.components, ds, test_idx);
        const Tensor targets = detail::target_matrix(ds, test_idx);
        const MetricReport rep = compute_metrics(preds, targets, ds.target_kinds_flat,
                                                 ds.target_blocks, ds.dims.temporal_y);
        if (rep.mse) out.result.metrics["mse"] = *rep.mse;
        if (rep.roc_auc) out.result.metrics["roc_auc"] = *rep.roc_auc;
        if (rep.pr_auc) out.result.metrics["pr_auc"] = *rep.pr_auc;
        for (const auto& [name, v] : rep.block_mse) out.result.metrics["mse_" + name] = v;
        out.result.undefined_auc_rows = rep.undefined_auc_rows;
        if (rep.undefined_auc_rows > 0) {
            out.result.metrics["undefined_auc_rows"] =
                static_cast<double>(rep.undefined_auc_rows);
        }
        if (has_target_encoder(variant.arch)) {
            // Reconstruction quality of the embedding arm on the test set.
            const Batch tb = make_batch(ds, test_idx);
            const NodePtr recon = out.components.decode(out.components.encode(tb));
            double acc = 0.0;
            for (std::size_t i = 0; i < recon->value.size(); ++i) {
                const double d = recon->value[i] - tb.flat_y[i];
                acc += d * d;
            }
            out.result.metrics["recon_mse"] =
                acc / static_cast<double>(recon->value.size());
        }
    }
    return out;
}

/// Train one variant on a dataset whose split labels carry train/test;
/// validation is carved out of the training entities per run seed.
inline TrainOutcome train_variant(const Variant& variant, const WindowedDataset& ds,
                                  const TrainConfig& cfg) {
    std::vector<std::size_t> train_idx = ds.indices_of(SplitLabel::Train);
    std::vector<std::size_t> val_idx = ds.indices_of(SplitLabel::Validation);
    const std::vector<std::size_t> test_idx = ds.indices_of(SplitLabel::Test);
    if (val_idx.empty()) {
        detail::carve_validation(ds, train_idx, val_idx, cfg.validation_fraction,
                                 child_seed(cfg.seed, "validation"));
    }
    return train_with_indices(variant, ds, std::move(train_idx), std::move(val_idx), test_idx,
                              cfg);
}

// ---------------------------------------------------------------------------
// Hyperparameter search
// ---------------------------------------------------------------------------

/// Random search (default 20 draws) over (gru_layers, psi, nu, minibatch)
/// scored by k-fold cross-validation loss on the training split. The chosen
/// setting is conventionally reused across comparator variants.
inline TrainConfig tune_hyperparameters(const Variant& variant, const WindowedDataset& ds,
                                        const TrainConfig& cfg) {
    cfg.validate();
    if (cfg.grids.learning_rate.empty() || cfg.grids.nu.empty() ||
        cfg.grids.minibatch.empty() || cfg.grids.gru_layers.empty()) {
        throw ConfigError("tune_hyperparameters: empty grid");
    }
    std::vector<std::size_t> train_idx = ds.indices_of(SplitLabel::Train);
    std::vector<std::uint32_t> entities;
    for (std::size_t i : train_idx) {
        const std::uint32_t e = ds.instances[i].entity;
        if (std::find(entities.begin(), entities.end(), e) == entities.end()) {
            entities.push_back(e);
        }
    }
    const int k = cfg.cv_folds;
    if (k < 2) throw ConfigError("cv_folds must be >= 2");
    if (entities.size() < static_cast<std::size_t>(k)) {
        throw ConfigError("fewer training entities than folds");
    }
    Rng rng(child_seed(cfg.seed, "tune"));
    rng.shuffle(entities);
    std::uint32_t max_e = 0;
    for (std::uint32_t e : entities) max_e = std::max(max_e, e);
    std::vector<int> fold_of(max_e + 1, -1);
    for (std::size_t i = 0; i < entities.size(); ++i) {
        fold_of[entities[i]] = static_cast<int>(i % static_cast<std::size_t>(k));
    }

    TrainConfig best = cfg;
    double best_score = std::numeric_limits<double>::infinity();
    for (int draw = 0; draw < cfg.search_iterations; ++draw) {
        TrainConfig cand = cfg;
        cand.learning_rate =
            cfg.grids.learning_rate[rng.below(cfg.grids.learning_rate.size())];
        cand.nu = cfg.grids.nu[rng.below(cfg.grids.nu.size())];
        cand.minibatch = cfg.grids.minibatch[rng.below(cfg.grids.minibatch.size())];
        cand.gru_layers = cfg.model == ModelType::Gru
                              ? cfg.grids.gru_layers[rng.below(cfg.grids.gru_layers.size())]
                              : cfg.gru_layers;
        double score = 0.0;
        bool diverged = false;
        for (int fold = 0; fold < k && !diverged; ++fold) {
            std::vector<std::size_t> fold_train, fold_val;
            for (std::size_t i : train_idx) {
                if (fold_of[ds.instances[i].entity] == fold) {
                    fold_val.push_back(i);
                } else {
                    fold_train.push_back(i);
                }
            }
            TrainConfig fold_cfg = cand;
            fold_cfg.seed = child_seed(cfg.seed, "tune-fold", static_cast<std::uint64_t>(
                                                                  draw * k + fold));
            try {
                TrainOutcome o = train_with_indices(variant, ds, fold_train, fold_val, {},
                                                    fold_cfg);
                // Score by the final stage's best validation loss.
                if (!std::isfinite(o.final_stage_best_val)) diverged = true;
                score += o.final_stage_best_val;
            } catch (const DivergenceError&) {
                diverged = true;
            }
        }
        if (diverged) continue;
        score /= static_cast<double>(k);
        if (score < best_score) {
            best_score = score;
            best = cand;
        }
    }
    if (!std::isfinite(best_score)) {
        throw DivergenceError("tune_hyperparameters: every candidate diverged");
    }
    return best;
}

} // namespace tealab
