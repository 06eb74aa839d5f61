#pragma once

#include <algorithm>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "tealab/components.hpp"
#include "tealab/linalg.hpp"
#include "tealab/metrics.hpp"
#include "tealab/rng.hpp"

namespace tealab {

enum class SplitLabel : std::uint8_t { Train, Validation, Test, Excluded };

/// One entity's full record: static covariates plus aligned feature and
/// target series (row-major by time step).
struct EntitySeries {
    std::vector<double> statics;  // static_dim
    std::vector<double> features; // timesteps * temporal_x
    std::vector<double> targets;  // timesteps * temporal_y
};

/// Un-windowed sequence data as generated or loaded from CSV.
struct RawDataset {
    std::size_t static_dim = 0;
    std::size_t temporal_x = 0;
    std::size_t temporal_y = 0;
    std::size_t timesteps = 0;
    std::vector<EntitySeries> entities;
    std::vector<VarKind> feature_kinds; // per temporal feature variable
    std::vector<VarKind> target_kinds;  // per temporal target variable
    nlohmann::json meta;                // generator name, seed, extras
};

/// One supervised instance: a feature window, a target window, statics.
struct Instance {
    std::uint32_t entity = 0;
    std::vector<double> statics;
    std::vector<double> x; // window_x * temporal_x, step-major
    std::vector<double> y; // window_y * temporal_y, step-major
};

/// Windowed instances with split assignments and generation metadata.
struct WindowedDataset {
    DataDims dims;
    std::vector<VarKind> target_kinds;      // per temporal target variable
    std::vector<VarKind> target_kinds_flat; // repeated per forecast step
    std::vector<Instance> instances;
    std::vector<SplitLabel> split;
    std::vector<BlockRange> target_blocks; // flat-row blocks (optional)
    nlohmann::json meta;

    std::vector<std::size_t> indices_of(SplitLabel s) const {
        std::vector<std::size_t> out;
        for (std::size_t i = 0; i < split.size(); ++i) {
            if (split[i] == s) out.push_back(i);
        }
        return out;
    }
};

/// Fractions of entities per split; validation is usually carved out of the
/// training side at run time, so {train, test} is the common shape.
struct SplitFractions {
    double train = 0.5;
    double validation = 0.0;
    double test = 0.5;

    void validate() const {
        const double s = train + validation + test;
        if (std::fabs(s - 1.0) > 1e-9) {
            throw ValueError("split fractions must sum to 1, got " + std::to_string(s));
        }
        if (train < 0 || validation < 0 || test < 0) {
            throw ValueError("split fractions must be non-negative");
        }
    }
};

/// Entity-level split assignment: every window of an entity lands in the
/// same split. Deterministic in (dataset, fractions, seed).
inline void assign_splits(WindowedDataset& ds, const SplitFractions& fr, std::uint64_t seed) {
    fr.validate();
    std::uint32_t max_entity = 0;
    for (const Instance& in : ds.instances) max_entity = std::max(max_entity, in.entity);
    std::vector<std::uint32_t> entities;
    {
        std::vector<bool> present(max_entity + 1, false);
        for (const Instance& in : ds.instances) present[in.entity] = true;
        for (std::uint32_t e = 0; e <= max_entity; ++e) {
            if (present[e]) entities.push_back(e);
        }
    }
    Rng rng(child_seed(seed, "entity-split"));
    rng.shuffle(entities);
    const std::size_t n = entities.size();
    const std::size_t n_train = static_cast<std::size_t>(fr.train * static_cast<double>(n) + 0.5);
    const std::size_t n_val =
        static_cast<std::size_t>(fr.validation * static_cast<double>(n) + 0.5);
    std::vector<SplitLabel> by_entity(max_entity + 1, SplitLabel::Test);
    for (std::size_t i = 0; i < n; ++i) {
        SplitLabel lab = SplitLabel::Test;
        if (i < n_train) {
            lab = SplitLabel::Train;
        } else if (i < n_train + n_val) {
            lab = SplitLabel::Validation;
        }
        by_entity[entities[i]] = lab;
    }
    ds.split.resize(ds.instances.size());
    for (std::size_t i = 0; i < ds.instances.size(); ++i) {
        ds.split[i] = by_entity[ds.instances[i].entity];
    }
}

/// Sliding-window extraction: feature window [t0, t0+w_x), target window
/// [t0+offset, t0+offset+w_y) with offset defaulting to w_x (the succedent
/// window). Only instances with the full input window available are kept.
inline WindowedDataset window_and_split(const RawDataset& raw, std::size_t w_x, std::size_t w_y,
                                        const SplitFractions& fractions, std::uint64_t seed,
                                        std::ptrdiff_t target_offset = -1) {
    if (w_x == 0 || w_y == 0) throw ValueError("window widths must be positive");
    const std::size_t offset =
        target_offset < 0 ? w_x : static_cast<std::size_t>(target_offset);
    const std::size_t need = std::max(w_x, offset + w_y);
    if (raw.timesteps < need) {
        throw ValueError("no valid windows: " + std::to_string(raw.timesteps) +
                         " timesteps < required " + std::to_string(need));
    }
    WindowedDataset ds;
    ds.dims = DataDims{raw.static_dim, raw.temporal_x, raw.temporal_y, w_x, w_y};
    ds.target_kinds = raw.target_kinds;
    for (std::size_t s = 0; s < w_y; ++s) {
        ds.target_kinds_flat.insert(ds.target_kinds_flat.end(), raw.target_kinds.begin(),
                                    raw.target_kinds.end());
    }
    ds.meta = raw.meta;
    ds.meta["windowing"] = {{"w_x", w_x}, {"w_y", w_y}, {"target_offset", offset}};
    const std::size_t last_t0 = raw.timesteps - need;
    for (std::size_t e = 0; e < raw.entities.size(); ++e) {
        const EntitySeries& es = raw.entities[e];
        for (std::size_t t0 = 0; t0 <= last_t0; ++t0) {
            Instance in;
            in.entity = static_cast<std::uint32_t>(e);
            in.statics = es.statics;
            in.x.reserve(w_x * raw.temporal_x);
            for (std::size_t t = t0; t < t0 + w_x; ++t) {
                const double* row = es.features.data() + t * raw.temporal_x;
                in.x.insert(in.x.end(), row, row + raw.temporal_x);
            }
            in.y.reserve(w_y * raw.temporal_y);
            for (std::size_t t = t0 + offset; t < t0 + offset + w_y; ++t) {
                const double* row = es.targets.data() + t * raw.temporal_y;
                in.y.insert(in.y.end(), row, row + raw.temporal_y);
            }
            ds.instances.push_back(std::move(in));
        }
    }
    assign_splits(ds, fractions, seed);
    return ds;
}

/// Assemble a minibatch (columns = instances) in both the flattened and the
/// per-step views.
inline Batch make_batch(const WindowedDataset& ds, const std::vector<std::size_t>& idx) {
    if (idx.empty()) throw ValueError("make_batch: empty index set");
    const DataDims& d = ds.dims;
    const std::size_t B = idx.size();
    Batch b;
    b.size = B;
    b.flat_x = Tensor({d.flat_x(), B});
    b.flat_y = Tensor({d.flat_y(), B});
    if (d.static_dim > 0) b.statics = Tensor({d.static_dim, B});
    b.x_steps.assign(d.window_x, Tensor({d.temporal_x, B}));
    b.y_steps.assign(d.window_y, Tensor({d.temporal_y, B}));
    for (std::size_t j = 0; j < B; ++j) {
        const Instance& in = ds.instances[idx[j]];
        for (std::size_t s = 0; s < d.static_dim; ++s) {
            b.flat_x[s * B + j] = in.statics[s];
            b.statics[s * B + j] = in.statics[s];
        }
        for (std::size_t k = 0; k < d.window_x * d.temporal_x; ++k) {
            b.flat_x[(d.static_dim + k) * B + j] = in.x[k];
        }
        for (std::size_t k = 0; k < d.window_y * d.temporal_y; ++k) {
            b.flat_y[k * B + j] = in.y[k];
        }
        for (std::size_t t = 0; t < d.window_x; ++t) {
            for (std::size_t v = 0; v < d.temporal_x; ++v) {
                b.x_steps[t][v * B + j] = in.x[t * d.temporal_x + v];
            }
        }
        for (std::size_t t = 0; t < d.window_y; ++t) {
            for (std::size_t v = 0; v < d.temporal_y; ++v) {
                b.y_steps[t][v * B + j] = in.y[t * d.temporal_y + v];
            }
        }
    }
    return b;
}

// ---------------------------------------------------------------------------
// Generators
// ---------------------------------------------------------------------------

/// Sequences driven by a compact latent state: s_{t+1} = Phi s_t + w_t with
/// spectral radius < 1, features B s_t + noise, targets A s_t + noise.
struct LatentFactorSpec {
    std::size_t entities = 1000;
    std::size_t timesteps = 7;
    std::size_t latent_dim = 8;
    std::size_t temporal_x = 40;
    std::size_t temporal_y = 40;
    std::size_t static_dim = 5;
    std::size_t w_x = 3;
    std::size_t w_y = 4;
    double noise = 0.1;         // observation noise on targets
    double feature_noise = 0.1; // observation noise on features
    double process_noise = 0.1;
    double spectral_radius = 0.9;
    bool binary_targets = false;
    SplitFractions split;
    std::uint64_t seed = 0;

    void validate() const {
        if (latent_dim >= temporal_y) {
            throw ValueError("latent_factor: latent dim must be < target dim");
        }
        if (!(spectral_radius < 1.0) || spectral_radius <= 0.0) {
            throw ValueError("latent_factor: spectral radius must lie in (0, 1)");
        }
        split.validate();
    }
};

/// Debug handles for tests: the mixing matrices and latents actually used.
struct LatentFactorDebug {
    Tensor dynamics;  // k x k
    Tensor feat_map;  // d_x x k
    Tensor targ_map;  // d_y x k
};

inline RawDataset gen_latent_factor_raw(const LatentFactorSpec& spec,
                                        LatentFactorDebug* debug = nullptr) {
    spec.validate();
    const std::size_t k = spec.latent_dim;
    Rng rng_struct(child_seed(spec.seed, "structure"));
    Tensor Phi({k, k});
    for (std::size_t i = 0; i < Phi.size(); ++i) Phi[i] = rng_struct.normal();
    const double nrm = operator_norm(Phi);
    if (nrm > 0.0) Phi = mat_scale(Phi, spec.spectral_radius / nrm);
    Tensor B({spec.temporal_x, k}), A({spec.temporal_y, k}), C({k, spec.static_dim ? spec.static_dim : 1});
    for (std::size_t i = 0; i < B.size(); ++i) B[i] = rng_struct.normal() / std::sqrt(double(k));
    for (std::size_t i = 0; i < A.size(); ++i) A[i] = rng_struct.normal() / std::sqrt(double(k));
    for (std::size_t i = 0; i < C.size(); ++i) C[i] = rng_struct.normal();
    if (debug) {
        debug->dynamics = Phi;
        debug->feat_map = B;
        debug->targ_map = A;
    }

    RawDataset raw;
    raw.static_dim = spec.static_dim;
    raw.temporal_x = spec.temporal_x;
    raw.temporal_y = spec.temporal_y;
    raw.timesteps = spec.timesteps;
    raw.feature_kinds.assign(spec.temporal_x, VarKind::Continuous);
    raw.target_kinds.assign(spec.temporal_y,
                            spec.binary_targets ? VarKind::Binary : VarKind::Continuous);
    raw.meta = {{"generator", "latent_factor"}, {"seed", spec.seed}};

    std::vector<double> s(k), s_next(k);
    for (std::size_t e = 0; e < spec.entities; ++e) {
        Rng rng(child_seed(spec.seed, "entity", e));
        EntitySeries es;
        es.statics.resize(spec.static_dim);
        for (double& v : es.statics) v = rng.normal();
        // Initial latent partially determined by statics so they carry signal.
        for (std::size_t i = 0; i < k; ++i) {
            double acc = rng.normal() * 0.5;
            for (std::size_t j = 0; j < spec.static_dim; ++j) {
                acc += C[i * C.cols() + j] * es.statics[j] * 0.5;
            }
            s[i] = acc;
        }
        es.features.resize(spec.timesteps * spec.temporal_x);
        es.targets.resize(spec.timesteps * spec.temporal_y);
        for (std::size_t t = 0; t < spec.timesteps; ++t) {
            for (std::size_t v = 0; v < spec.temporal_x; ++v) {
                double acc = 0.0;
                for (std::size_t j = 0; j < k; ++j) acc += B[v * k + j] * s[j];
                es.features[t * spec.temporal_x + v] = acc + spec.feature_noise * rng.normal();
            }
            for (std::size_t v = 0; v < spec.temporal_y; ++v) {
                double acc = 0.0;
                for (std::size_t j = 0; j < k; ++j) acc += A[v * k + j] * s[j];
                const double raw_y = acc + spec.noise * rng.normal();
                es.targets[t * spec.temporal_y + v] =
                    spec.binary_targets
                        ? (rng.uniform() < 1.0 / (1.0 + std::exp(-2.0 * raw_y)) ? 1.0 : 0.0)
                        : raw_y;
            }
            for (std::size_t i = 0; i < k; ++i) {
                double acc = 0.0;
                for (std::size_t j = 0; j < k; ++j) acc += Phi[i * k + j] * s[j];
                s_next[i] = acc + spec.process_noise * rng.normal();
            }
            std::swap(s, s_next);
        }
        raw.entities.push_back(std::move(es));
    }
    return raw;
}

inline WindowedDataset gen_latent_factor_sequences(const LatentFactorSpec& spec,
                                                   LatentFactorDebug* debug = nullptr) {
    RawDataset raw = gen_latent_factor_raw(spec, debug);
    return window_and_split(raw, spec.w_x, spec.w_y, spec.split,
                            child_seed(spec.seed, "split"));
}

/// The contrived counterexample: features x linear in latent p; targets
/// stack a predictable block y_P (linear in p, 10 rows) on an unpredictable
/// block y_U (linear in an independent latent u, 40 rows).
struct AdversarialBlocksSpec {
    std::size_t instances = 2000;
    std::size_t latent_dim = 10;  // each of p, u
    std::size_t feature_dim = 10;
    std::size_t predictable_dim = 10;
    std::size_t unpredictable_dim = 40;
    SplitFractions split;
    std::uint64_t seed = 0;
};

inline RawDataset gen_adversarial_blocks_raw(const AdversarialBlocksSpec& spec) {
    const std::size_t k = spec.latent_dim;
    Rng rng_struct(child_seed(spec.seed, "structure"));
    Tensor Mx({spec.feature_dim, k}), Mp({spec.predictable_dim, k}),
        Mu({spec.unpredictable_dim, k});
    for (std::size_t i = 0; i < Mx.size(); ++i) Mx[i] = rng_struct.normal() / std::sqrt(double(k));
    for (std::size_t i = 0; i < Mp.size(); ++i) Mp[i] = rng_struct.normal() / std::sqrt(double(k));
    for (std::size_t i = 0; i < Mu.size(); ++i) Mu[i] = rng_struct.normal() / std::sqrt(double(k));

    RawDataset raw;
    raw.static_dim = 0;
    raw.temporal_x = spec.feature_dim;
    raw.temporal_y = spec.predictable_dim + spec.unpredictable_dim;
    raw.timesteps = 1;
    raw.feature_kinds.assign(raw.temporal_x, VarKind::Continuous);
    raw.target_kinds.assign(raw.temporal_y, VarKind::Continuous);
    raw.meta = {{"generator", "adversarial_blocks"},
                {"seed", spec.seed},
                {"blocks",
                 {{{"name", "P"}, {"row_begin", 0}, {"row_end", spec.predictable_dim}},
                  {{"name", "U"},
                   {"row_begin", spec.predictable_dim},
                   {"row_end", raw.temporal_y}}}}};

    std::vector<double> p(k), u(k);
    for (std::size_t n = 0; n < spec.instances; ++n) {
        Rng rng(child_seed(spec.seed, "instance", n));
        for (double& v : p) v = rng.normal();
        for (double& v : u) v = rng.normal();
        EntitySeries es;
        es.features.resize(raw.temporal_x);
        es.targets.resize(raw.temporal_y);
        for (std::size_t i = 0; i < spec.feature_dim; ++i) {
            double acc = 0.0;
            for (std::size_t j = 0; j < k; ++j) acc += Mx[i * k + j] * p[j];
            es.features[i] = acc;
        }
        for (std::size_t i = 0; i < spec.predictable_dim; ++i) {
            double acc = 0.0;
            for (std::size_t j = 0; j < k; ++j) acc += Mp[i * k + j] * p[j];
            es.targets[i] = acc;
        }
        for (std::size_t i = 0; i < spec.unpredictable_dim; ++i) {
            double acc = 0.0;
            for (std::size_t j = 0; j < k; ++j) acc += Mu[i * k + j] * u[j];
            es.targets[spec.predictable_dim + i] = acc;
        }
        raw.entities.push_back(std::move(es));
    }
    return raw;
}

inline WindowedDataset gen_adversarial_blocks(const AdversarialBlocksSpec& spec) {
    RawDataset raw = gen_adversarial_blocks_raw(spec);
    WindowedDataset ds =
        window_and_split(raw, 1, 1, spec.split, child_seed(spec.seed, "split"), 0);
    ds.target_blocks = {{"P", 0, spec.predictable_dim},
                        {"U", spec.predictable_dim,
                         spec.predictable_dim + spec.unpredictable_dim}};
    return ds;
}

/// Static multi-label data with low-rank logit structure:
/// labels ~ Bernoulli(sigmoid(A s + b)), features = B s + noise.
struct StaticMultilabelSpec {
    std::size_t instances = 1000;
    std::size_t latent_dim = 6;
    std::size_t feature_dim = 12;
    std::size_t label_dim = 40;
    double feature_noise = 0.3;
    double logit_scale = 2.0;
    SplitFractions split;
    std::uint64_t seed = 0;
};

struct StaticMultilabelDebug {
    Tensor logits; // label_dim x instances
    std::vector<double> bias;
    std::vector<double> marginals;
};

inline RawDataset gen_static_multilabel_raw(const StaticMultilabelSpec& spec,
                                            StaticMultilabelDebug* debug = nullptr) {
    const std::size_t k = spec.latent_dim;
    Rng rng_struct(child_seed(spec.seed, "structure"));
    Tensor A({spec.label_dim, k}), B({spec.feature_dim, k});
    std::vector<double> bias(spec.label_dim);
    for (std::size_t i = 0; i < A.size(); ++i) A[i] = rng_struct.normal() / std::sqrt(double(k));
    for (std::size_t i = 0; i < B.size(); ++i) B[i] = rng_struct.normal() / std::sqrt(double(k));
    for (double& v : bias) v = 0.3 * rng_struct.normal();

    RawDataset raw;
    raw.static_dim = 0;
    raw.temporal_x = spec.feature_dim;
    raw.temporal_y = spec.label_dim;
    raw.timesteps = 1;
    raw.feature_kinds.assign(raw.temporal_x, VarKind::Continuous);
    raw.target_kinds.assign(raw.temporal_y, VarKind::Binary);
    raw.meta = {{"generator", "static_multilabel"}, {"seed", spec.seed}};

    if (debug) {
        debug->logits = Tensor({spec.label_dim, spec.instances});
        debug->bias = bias;
    }
    std::vector<double> marg(spec.label_dim, 0.0);
    std::vector<double> s(k);
    for (std::size_t n = 0; n < spec.instances; ++n) {
        Rng rng(child_seed(spec.seed, "instance", n));
        for (double& v : s) v = rng.normal();
        EntitySeries es;
        es.features.resize(raw.temporal_x);
        es.targets.resize(raw.temporal_y);
        for (std::size_t i = 0; i < spec.feature_dim; ++i) {
            double acc = 0.0;
            for (std::size_t j = 0; j < k; ++j) acc += B[i * k + j] * s[j];
            es.features[i] = acc + spec.feature_noise * rng.normal();
        }
        for (std::size_t i = 0; i < spec.label_dim; ++i) {
            double logit = bias[i];
            for (std::size_t j = 0; j < k; ++j) {
                logit += spec.logit_scale * A[i * k + j] * s[j];
            }
            if (debug) debug->logits[i * spec.instances + n] = logit;
            const double prob = 1.0 / (1.0 + std::exp(-logit));
            const double y = rng.uniform() < prob ? 1.0 : 0.0;
            es.targets[i] = y;
            marg[i] += y;
        }
        raw.entities.push_back(std::move(es));
    }
    for (double& v : marg) v /= static_cast<double>(spec.instances);
    raw.meta["label_marginals"] = marg;
    if (debug) debug->marginals = marg;
    return raw;
}

inline WindowedDataset gen_static_multilabel(const StaticMultilabelSpec& spec,
                                             StaticMultilabelDebug* debug = nullptr) {
    RawDataset raw = gen_static_multilabel_raw(spec, debug);
    return window_and_split(raw, 1, 1, spec.split, child_seed(spec.seed, "split"), 0);
}

// ---------------------------------------------------------------------------
// CSV + sidecar persistence
// ---------------------------------------------------------------------------

namespace detail {

inline std::string format_double(double v) {
    char buf[40];
    std::snprintf(buf, sizeof(buf), "%.17g", v);
    return buf;
}

} // namespace detail

/// CSV rows: entity_id, t, static columns (repeated per row), feature
/// columns, then target columns. The JSON sidecar carries the schema.
inline void save_raw_csv(const RawDataset& raw, const std::filesystem::path& csv_path) {
    std::ofstream f(csv_path);
    if (!f) throw IoError("cannot write " + csv_path.string());
    f << "entity_id,t";
    for (std::size_t s = 0; s < raw.static_dim; ++s) f << ",s" << s;
    for (std::size_t v = 0; v < raw.temporal_x; ++v) f << ",x" << v;
    for (std::size_t v = 0; v < raw.temporal_y; ++v) f << ",y" << v;
    f << "\n";
    for (std::size_t e = 0; e < raw.entities.size(); ++e) {
        const EntitySeries& es = raw.entities[e];
        for (std::size_t t = 0; t < raw.timesteps; ++t) {
            f << e << "," << t;
            for (std::size_t s = 0; s < raw.static_dim; ++s) {
                f << "," << detail::format_double(es.statics[s]);
            }
            for (std::size_t v = 0; v < raw.temporal_x; ++v) {
                f << "," << detail::format_double(es.features[t * raw.temporal_x + v]);
            }
            for (std::size_t v = 0; v < raw.temporal_y; ++v) {
                f << "," << detail::format_double(es.targets[t * raw.temporal_y + v]);
            }
            f << "\n";
        }
    }
    if (!f) throw IoError("short write to " + csv_path.string());
}

inline void save_sidecar(const RawDataset& raw, const SplitFractions& fractions,
                         std::size_t w_x, std::size_t w_y, std::size_t target_offset,
                         const std::filesystem::path& json_path) {
    nlohmann::json j;
    j["generator"] = raw.meta.value("generator", "unknown");
    j["seed"] = raw.meta.value("seed", 0ULL);
    j["dims"] = {{"static_dim", raw.static_dim},
                 {"temporal_x", raw.temporal_x},
                 {"temporal_y", raw.temporal_y},
                 {"timesteps", raw.timesteps},
                 {"w_x", w_x},
                 {"w_y", w_y},
                 {"target_offset", target_offset}};
    std::string fk, tk;
    for (VarKind k : raw.feature_kinds) fk += k == VarKind::Binary ? 'b' : 'c';
    for (VarKind k : raw.target_kinds) tk += k == VarKind::Binary ? 'b' : 'c';
    j["variable_types"] = {{"features", fk}, {"targets", tk}};
    j["split_fractions"] = {{"train", fractions.train},
                            {"validation", fractions.validation},
                            {"test", fractions.test}};
    if (raw.meta.contains("blocks")) j["blocks"] = raw.meta["blocks"];
    if (raw.meta.contains("label_marginals")) j["label_marginals"] = raw.meta["label_marginals"];
    std::ofstream f(json_path);
    if (!f) throw IoError("cannot write " + json_path.string());
    f << j.dump(2) << "\n";
}

struct LoadedDataset {
    RawDataset raw;
    SplitFractions fractions;
    std::size_t w_x = 1, w_y = 1, target_offset = 0;
};

inline LoadedDataset load_dataset(const std::filesystem::path& csv_path,
                                  const std::filesystem::path& json_path) {
    std::ifstream jf(json_path);
    if (!jf) throw IoError("cannot read " + json_path.string());
    nlohmann::json j;
    try {
        jf >> j;
    } catch (const nlohmann::json::exception& e) {
        throw IoError("malformed sidecar: " + std::string(e.what()));
    }
    LoadedDataset out;
    RawDataset& raw = out.raw;
    const auto& d = j.at("dims");
    raw.static_dim = d.at("static_dim").get<std::size_t>();
    raw.temporal_x = d.at("temporal_x").get<std::size_t>();
    raw.temporal_y = d.at("temporal_y").get<std::size_t>();
    raw.timesteps = d.at("timesteps").get<std::size_t>();
    out.w_x = d.at("w_x").get<std::size_t>();
    out.w_y = d.at("w_y").get<std::size_t>();
    out.target_offset = d.at("target_offset").get<std::size_t>();
    for (char c : j.at("variable_types").at("features").get<std::string>()) {
        raw.feature_kinds.push_back(c == 'b' ? VarKind::Binary : VarKind::Continuous);
    }
    for (char c : j.at("variable_types").at("targets").get<std::string>()) {
        raw.target_kinds.push_back(c == 'b' ? VarKind::Binary : VarKind::Continuous);
    }
    out.fractions.train = j.at("split_fractions").at("train").get<double>();
    out.fractions.validation = j.at("split_fractions").at("validation").get<double>();
    out.fractions.test = j.at("split_fractions").at("test").get<double>();
    raw.meta["generator"] = j.at("generator");
    raw.meta["seed"] = j.at("seed");
    if (j.contains("blocks")) raw.meta["blocks"] = j["blocks"];

    std::ifstream cf(csv_path);
    if (!cf) throw IoError("cannot read " + csv_path.string());
    std::string line;
    if (!std::getline(cf, line)) throw IoError("empty CSV " + csv_path.string());
    const std::size_t expect_cols = 2 + raw.static_dim + raw.temporal_x + raw.temporal_y;
    std::vector<double> fields;
    fields.reserve(expect_cols);
    std::int64_t current_entity = -1;
    while (std::getline(cf, line)) {
        if (line.empty()) continue;
        fields.clear();
        std::size_t start = 0;
        while (start <= line.size()) {
            std::size_t end = line.find(',', start);
            if (end == std::string::npos) end = line.size();
            fields.push_back(std::strtod(line.c_str() + start, nullptr));
            start = end + 1;
        }
        if (fields.size() != expect_cols) {
            throw IoError("CSV row with " + std::to_string(fields.size()) + " columns, expected " +
                          std::to_string(expect_cols));
        }
        const std::int64_t entity = static_cast<std::int64_t>(fields[0]);
        if (entity != current_entity) {
            raw.entities.emplace_back();
            EntitySeries& es = raw.entities.back();
            es.statics.assign(fields.begin() + 2, fields.begin() + 2 + raw.static_dim);
            current_entity = entity;
        }
        EntitySeries& es = raw.entities.back();
        const auto xb = fields.begin() + 2 + raw.static_dim;
        es.features.insert(es.features.end(), xb, xb + raw.temporal_x);
        es.targets.insert(es.targets.end(), xb + raw.temporal_x,
                          xb + raw.temporal_x + raw.temporal_y);
    }
    for (const EntitySeries& es : raw.entities) {
        if (es.features.size() != raw.timesteps * raw.temporal_x) {
            throw IoError("CSV entity with wrong timestep count");
        }
    }
    return out;
}

inline WindowedDataset window_loaded(const LoadedDataset& ld, std::uint64_t split_seed) {
    WindowedDataset ds = window_and_split(ld.raw, ld.w_x, ld.w_y, ld.fractions, split_seed,
                                          static_cast<std::ptrdiff_t>(ld.target_offset));
    if (ld.raw.meta.contains("blocks")) {
        for (const auto& b : ld.raw.meta["blocks"]) {
            ds.target_blocks.push_back({b.at("name").get<std::string>(),
                                        b.at("row_begin").get<std::size_t>(),
                                        b.at("row_end").get<std::size_t>()});
        }
    }
    return ds;
}

} // namespace tealab
