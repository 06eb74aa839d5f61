#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include "tealab/autodiff.hpp"
#include "tealab/losses.hpp"
#include "tealab/rng.hpp"

namespace tealab {

/// Architecture family. Base and Reg share the predictor/forward structure
/// (Reg merely allows the l2 penalty); FEA reconstructs features from a
/// shared latent; TEA embeds targets; FTEA forces one latent to do both.
enum class ArchKind : std::uint8_t { Base, Reg, Fea, Tea, Ftea };

enum class ModelType : std::uint8_t { Linear, Gru };

inline const char* arch_name(ArchKind k) {
    switch (k) {
        case ArchKind::Base: return "Base";
        case ArchKind::Reg: return "Reg";
        case ArchKind::Fea: return "FEA";
        case ArchKind::Tea: return "TEA";
        case ArchKind::Ftea: return "FTEA";
    }
    return "?";
}

inline bool has_target_encoder(ArchKind k) { return k == ArchKind::Tea || k == ArchKind::Ftea; }
inline bool has_feature_recon(ArchKind k) { return k == ArchKind::Fea || k == ArchKind::Ftea; }

/// Window and per-step dimensions of a dataset. The flattened linear view
/// is [statics; x window] -> [y window].
struct DataDims {
    std::size_t static_dim = 0;
    std::size_t temporal_x = 0; // feature variables per step
    std::size_t temporal_y = 0; // target variables per step
    std::size_t window_x = 1;
    std::size_t window_y = 1;

    std::size_t flat_x() const { return static_dim + window_x * temporal_x; }
    std::size_t flat_y() const { return window_y * temporal_y; }
};

/// Everything needed to build a ComponentSet: family, linear vs GRU,
/// dimensions, and the per-row output kinds of the flattened target.
struct ArchitectureSpec {
    ArchKind kind = ArchKind::Reg;
    ModelType model = ModelType::Linear;
    DataDims dims;
    std::size_t latent_dim = 0;
    int gru_layers = 1;
    std::vector<VarKind> target_row_kinds; // length flat_y

    void validate() const {
        if (dims.temporal_x == 0 || dims.temporal_y == 0 || dims.window_x == 0 ||
            dims.window_y == 0) {
            throw ValueError("architecture: dimensions must be positive");
        }
        if (latent_dim == 0) throw ValueError("architecture: latent dimension must be positive");
        if (has_target_encoder(kind) && latent_dim >= dims.flat_y()) {
            throw ValueError("architecture: target-embedding requires |Z| < |Y| (" +
                             std::to_string(latent_dim) + " >= " +
                             std::to_string(dims.flat_y()) + ")");
        }
        if (target_row_kinds.size() != dims.flat_y()) {
            throw ValueError("architecture: target row kinds must cover the flattened target");
        }
        if (gru_layers < 1 || gru_layers > 2) {
            throw ValueError("architecture: GRU layer count must be 1 or 2");
        }
        if (model == ModelType::Gru && latent_dim != dims.temporal_y) {
            throw ValueError("architecture: GRU hidden width (latent) must equal the temporal "
                             "target dimension");
        }
    }
};

/// A minibatch in both views: flattened matrices for linear components and
/// per-step matrices (columns = instances) for recurrent ones.
struct Batch {
    Tensor flat_x;  // flat_x() x B
    Tensor flat_y;  // flat_y() x B
    Tensor statics; // static_dim x B (static_dim may be 0 -> empty tensor)
    std::vector<Tensor> x_steps; // window_x tensors of temporal_x x B
    std::vector<Tensor> y_steps; // window_y tensors of temporal_y x B
    std::size_t size = 0;
};

namespace detail {

struct GruLayer {
    // Gate weights: input-to-hidden (absent when input_dim == 0),
    // hidden-to-hidden, and biases for reset / update / candidate.
    NodePtr Wir, Wiz, Win;
    NodePtr Whr, Whz, Whn;
    NodePtr br, bz, bn;
    NodePtr static_init; // hidden x static_dim, only on feature-side stacks
};

struct GruStack {
    std::vector<GruLayer> layers;
    NodePtr head; // d_out x hidden, only on decoder stacks
    std::size_t input_dim = 0;
    std::size_t hidden = 0;
};

/// One GRU step: h' from input x (may be null when input_dim == 0) and h.
inline NodePtr gru_step(const GruLayer& L, const NodePtr& x, const NodePtr& h) {
    auto gate_pre = [&](const NodePtr& Wi, const NodePtr& Wh, const NodePtr& b) {
        NodePtr pre = matmul(Wh, h);
        if (x) pre = add(pre, matmul(Wi, x));
        return colwise_add(pre, b);
    };
    NodePtr r = sigmoid(gate_pre(L.Wir, L.Whr, L.br));
    NodePtr z = sigmoid(gate_pre(L.Wiz, L.Whz, L.bz));
    NodePtr cand_h = matmul(L.Whn, hadamard(r, h));
    if (x) cand_h = add(cand_h, matmul(L.Win, x));
    NodePtr n = tanh(colwise_add(cand_h, L.bn));
    // h' = (1 - z) .* n + z .* h
    NodePtr one_minus_z = sub(leaf(Tensor::full(z->value.shape(), 1.0)), z);
    return add(hadamard(one_minus_z, n), hadamard(z, h));
}

} // namespace detail

/// The parameterized functions of one architecture, held as named leaf
/// nodes grouped by component. Value object: clone() deep-copies the
/// weights so harnesses can retrain replicas independently.
class ComponentSet {
public:
    struct Param {
        std::string name;
        std::string group; // "u", "e", "theta", "phi", "d", "r"
        NodePtr node;
    };

    static ComponentSet init(const ArchitectureSpec& spec, std::uint64_t seed);

    const ArchitectureSpec& spec() const { return spec_; }
    std::uint64_t seed() const { return seed_; }

    const std::vector<Param>& params() const { return params_; }
    std::vector<Param>& params() { return params_; }

    std::vector<NodePtr> group_nodes(const std::string& group) const {
        std::vector<NodePtr> out;
        for (const Param& p : params_) {
            if (p.group == group) out.push_back(p.node);
        }
        return out;
    }

    std::vector<std::string> groups() const {
        std::vector<std::string> out;
        for (const Param& p : params_) {
            bool known = false;
            for (const auto& g : out) known = known || g == p.group;
            if (!known) out.push_back(p.group);
        }
        return out;
    }

    NodePtr param(const std::string& name) const {
        for (const Param& p : params_) {
            if (p.name == name) return p.node;
        }
        throw ValueError("unknown parameter '" + name + "'");
    }

    std::size_t parameter_count() const {
        std::size_t n = 0;
        for (const Param& p : params_) n += p.node->value.size();
        return n;
    }

    void zero_param_grads() {
        for (Param& p : params_) p.node->grad.fill(0.0);
    }

    ComponentSet clone() const {
        ComponentSet c;
        c.spec_ = spec_;
        c.seed_ = seed_;
        for (const Param& p : params_) {
            c.params_.push_back({p.name, p.group, leaf(p.node->value)});
        }
        return c;
    }

    /// Inference hypothesis: theta(u(x)) (or d(phi(x)) for FEA). Binary
    /// target rows are squashed through a sigmoid; the embedding arm is
    /// never touched.
    NodePtr predict(const Batch& batch) const {
        NodePtr z = predict_latent(batch);
        return decode(z);
    }

    /// Latent predicted from features: u(x) (phi(x) for FEA).
    NodePtr predict_latent(const Batch& batch) const {
        const std::string g = spec_.kind == ArchKind::Fea ? "phi" : "u";
        if (spec_.model == ModelType::Linear) {
            return matmul(param(g + ".W"), leaf(batch.flat_x));
        }
        return gru_forward(g, batch.x_steps, &batch.statics, batch.size);
    }

    /// Latent encoded from targets: e(y). Only target-embedding kinds have
    /// an encoder.
    NodePtr encode(const Batch& batch) const {
        require_encoder();
        if (spec_.model == ModelType::Linear) {
            return matmul(param("e.W"), leaf(batch.flat_y));
        }
        return gru_forward("e", batch.y_steps, nullptr, batch.size);
    }

    /// Shared forward model applied to a latent: theta(z) (d(z) for FEA).
    NodePtr decode(const NodePtr& z) const {
        const std::string g = spec_.kind == ArchKind::Fea ? "d" : "theta";
        NodePtr out;
        if (spec_.model == ModelType::Linear) {
            out = matmul(param(g + ".W"), z);
        } else {
            out = gru_decode(g, z, spec_.dims.window_y);
        }
        if (any_binary(spec_.target_row_kinds)) {
            out = masked_sigmoid(out, binary_mask(spec_.target_row_kinds));
        }
        return out;
    }

    /// Feature reconstruction r(phi(x)) for FEA, r(u(x)) for FTEA.
    NodePtr feature_reconstruct(const Batch& batch) const {
        if (!has_feature_recon(spec_.kind)) {
            throw ValueError(std::string("feature reconstruction unsupported for ") +
                             arch_name(spec_.kind));
        }
        NodePtr z = predict_latent(batch);
        if (spec_.model == ModelType::Linear) {
            return matmul(param("r.W"), z);
        }
        return gru_decode("r", z, spec_.dims.window_x);
    }

    /// Value-only convenience: run predict() and return the result tensor.
    Tensor predict_values(const Batch& batch) const { return predict(batch)->value; }

private:
    void require_encoder() const {
        if (!has_target_encoder(spec_.kind)) {
            throw ValueError(std::string("encode() unsupported for ") + arch_name(spec_.kind) +
                             ": architecture has no target encoder");
        }
    }

    NodePtr gru_forward(const std::string& comp, const std::vector<Tensor>& steps,
                        const Tensor* statics, std::size_t batch) const;
    NodePtr gru_decode(const std::string& comp, const NodePtr& z, std::size_t steps) const;

    ArchitectureSpec spec_;
    std::uint64_t seed_ = 0;
    std::vector<Param> params_;

    friend ComponentSet component_set_from_params(const ArchitectureSpec&, std::uint64_t,
                                                  std::vector<Param>);
};

namespace detail {

inline Tensor scaled_uniform(Rng& rng, std::size_t out_dim, std::size_t in_dim) {
    const double s = std::sqrt(6.0 / static_cast<double>(in_dim + out_dim));
    Tensor w({out_dim, in_dim});
    for (std::size_t i = 0; i < w.size(); ++i) w[i] = rng.uniform(-s, s);
    return w;
}

struct ParamBuilder {
    std::vector<ComponentSet::Param>* out;
    std::uint64_t seed;

    void matrix(const std::string& group, const std::string& name, std::size_t rows,
                std::size_t cols) {
        Rng rng(child_seed(seed, name));
        out->push_back({name, group, leaf(scaled_uniform(rng, rows, cols))});
    }
    void zeros(const std::string& group, const std::string& name, std::size_t rows,
               std::size_t cols) {
        out->push_back({name, group, leaf(Tensor({rows, cols}))});
    }
};

inline void build_gru_stack(ParamBuilder& b, const std::string& comp, std::size_t input_dim,
                            std::size_t hidden, int layers, std::size_t static_dim,
                            std::size_t head_dim) {
    for (int l = 0; l < layers; ++l) {
        const std::size_t in = l == 0 ? input_dim : hidden;
        const std::string p = comp + ".l" + std::to_string(l) + ".";
        if (in > 0) {
            b.matrix(comp, p + "Wir", hidden, in);
            b.matrix(comp, p + "Wiz", hidden, in);
            b.matrix(comp, p + "Win", hidden, in);
        }
        b.matrix(comp, p + "Whr", hidden, hidden);
        b.matrix(comp, p + "Whz", hidden, hidden);
        b.matrix(comp, p + "Whn", hidden, hidden);
        b.zeros(comp, p + "br", hidden, 1);
        b.zeros(comp, p + "bz", hidden, 1);
        b.zeros(comp, p + "bn", hidden, 1);
        if (static_dim > 0) b.matrix(comp, p + "S", hidden, static_dim);
    }
    if (head_dim > 0) b.matrix(comp, comp + ".head", head_dim, hidden);
}

} // namespace detail

inline ComponentSet component_set_from_params(const ArchitectureSpec& spec, std::uint64_t seed,
                                              std::vector<ComponentSet::Param> params) {
    ComponentSet cs;
    cs.spec_ = spec;
    cs.seed_ = seed;
    cs.params_ = std::move(params);
    return cs;
}

inline ComponentSet ComponentSet::init(const ArchitectureSpec& spec, std::uint64_t seed) {
    spec.validate();
    std::vector<Param> params;
    detail::ParamBuilder b{&params, seed};
    const std::size_t X = spec.dims.flat_x(), Y = spec.dims.flat_y(), Z = spec.latent_dim;

    if (spec.model == ModelType::Linear) {
        // Single layer, no bias, linear activation per component.
        if (spec.kind == ArchKind::Fea) {
            b.matrix("phi", "phi.W", Z, X);
            b.matrix("d", "d.W", Y, Z);
            b.matrix("r", "r.W", X, Z);
        } else {
            b.matrix("u", "u.W", Z, X);
            if (has_target_encoder(spec.kind)) b.matrix("e", "e.W", Z, Y);
            b.matrix("theta", "theta.W", Y, Z);
            if (spec.kind == ArchKind::Ftea) b.matrix("r", "r.W", X, Z);
        }
    } else {
        const std::size_t H = Z; // hidden width = temporal target dimension
        const std::size_t S = spec.dims.static_dim;
        if (spec.kind == ArchKind::Fea) {
            detail::build_gru_stack(b, "phi", spec.dims.temporal_x, H, spec.gru_layers, S, 0);
            detail::build_gru_stack(b, "d", 0, H, spec.gru_layers, 0, spec.dims.temporal_y);
            detail::build_gru_stack(b, "r", 0, H, spec.gru_layers, 0, spec.dims.temporal_x);
        } else {
            detail::build_gru_stack(b, "u", spec.dims.temporal_x, H, spec.gru_layers, S, 0);
            if (has_target_encoder(spec.kind)) {
                detail::build_gru_stack(b, "e", spec.dims.temporal_y, H, spec.gru_layers, 0, 0);
            }
            detail::build_gru_stack(b, "theta", 0, H, spec.gru_layers, 0, spec.dims.temporal_y);
            if (spec.kind == ArchKind::Ftea) {
                detail::build_gru_stack(b, "r", 0, H, spec.gru_layers, 0, spec.dims.temporal_x);
            }
        }
    }
    return component_set_from_params(spec, seed, std::move(params));
}

inline NodePtr ComponentSet::gru_forward(const std::string& comp,
                                         const std::vector<Tensor>& steps, const Tensor* statics,
                                         std::size_t batch) const {
    const std::size_t H = spec_.latent_dim;
    const int layers = spec_.gru_layers;
    std::vector<NodePtr> h(layers);
    for (int l = 0; l < layers; ++l) {
        const std::string p = comp + ".l" + std::to_string(l) + ".";
        if (statics && spec_.dims.static_dim > 0) {
            h[l] = matmul(param(p + "S"), leaf(*statics));
        } else {
            h[l] = leaf(Tensor({H, batch}));
        }
    }
    for (const Tensor& x_t : steps) {
        NodePtr layer_in = leaf(x_t);
        for (int l = 0; l < layers; ++l) {
            const std::string p = comp + ".l" + std::to_string(l) + ".";
            detail::GruLayer L;
            const std::size_t in = l == 0 ? (comp == "e" ? spec_.dims.temporal_y
                                                         : spec_.dims.temporal_x)
                                          : H;
            if (in > 0) {
                L.Wir = param(p + "Wir");
                L.Wiz = param(p + "Wiz");
                L.Win = param(p + "Win");
            }
            L.Whr = param(p + "Whr");
            L.Whz = param(p + "Whz");
            L.Whn = param(p + "Whn");
            L.br = param(p + "br");
            L.bz = param(p + "bz");
            L.bn = param(p + "bn");
            h[l] = detail::gru_step(L, layer_in, h[l]);
            layer_in = h[l];
        }
    }
    return h[layers - 1];
}

inline NodePtr ComponentSet::gru_decode(const std::string& comp, const NodePtr& z,
                                        std::size_t steps) const {
    const int layers = spec_.gru_layers;
    std::vector<NodePtr> h(layers, z); // all layers start from the latent
    NodePtr head = param(comp + ".head");
    std::vector<NodePtr> outputs;
    outputs.reserve(steps);
    for (std::size_t t = 0; t < steps; ++t) {
        for (int l = 0; l < layers; ++l) {
            const std::string p = comp + ".l" + std::to_string(l) + ".";
            detail::GruLayer L;
            if (l > 0) {
                L.Wir = param(p + "Wir");
                L.Wiz = param(p + "Wiz");
                L.Win = param(p + "Win");
            }
            L.Whr = param(p + "Whr");
            L.Whz = param(p + "Whz");
            L.Whn = param(p + "Whn");
            L.br = param(p + "br");
            L.bz = param(p + "bz");
            L.bn = param(p + "bn");
            // State-driven decoding: layer 0 receives no step input.
            h[l] = detail::gru_step(L, l == 0 ? nullptr : h[l - 1], h[l]);
        }
        outputs.push_back(matmul(head, h[layers - 1]));
    }
    return outputs.size() == 1 ? outputs[0] : concat_rows(outputs);
}

/// Analytic trainable-scalar count for an architecture; the audit that a
/// built ComponentSet has exactly the layers it should.
inline std::size_t expected_parameter_count(const ArchitectureSpec& spec) {
    const std::size_t X = spec.dims.flat_x(), Y = spec.dims.flat_y(), Z = spec.latent_dim;
    if (spec.model == ModelType::Linear) {
        std::size_t n = 0;
        if (spec.kind == ArchKind::Fea) {
            n = Z * X + Y * Z + X * Z;
        } else {
            n = Z * X + Y * Z;
            if (has_target_encoder(spec.kind)) n += Z * Y;
            if (spec.kind == ArchKind::Ftea) n += X * Z;
        }
        return n;
    }
    const std::size_t H = Z, S = spec.dims.static_dim;
    auto stack = [&](std::size_t input_dim, bool with_static, std::size_t head_dim) {
        std::size_t n = 0;
        for (int l = 0; l < spec.gru_layers; ++l) {
            const std::size_t in = l == 0 ? input_dim : H;
            n += 3 * (H * in + H * H + H);
            if (with_static) n += H * S;
        }
        return n + head_dim * H;
    };
    std::size_t n = 0;
    if (spec.kind == ArchKind::Fea) {
        n = stack(spec.dims.temporal_x, S > 0, 0) + stack(0, false, spec.dims.temporal_y) +
            stack(0, false, spec.dims.temporal_x);
    } else {
        n = stack(spec.dims.temporal_x, S > 0, 0) + stack(0, false, spec.dims.temporal_y);
        if (has_target_encoder(spec.kind)) n += stack(spec.dims.temporal_y, false, 0);
        if (spec.kind == ArchKind::Ftea) n += stack(0, false, spec.dims.temporal_x);
    }
    return n;
}

} // namespace tealab
