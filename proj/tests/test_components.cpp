#include <doctest.h>

#include <cmath>
#include <cstdio>
#include <filesystem>

#include "tealab/checkpoint.hpp"
#include "tealab/components.hpp"
#include "tealab/linalg.hpp"
#include "tealab/rng.hpp"

using namespace tealab;

namespace {

ArchitectureSpec linear_tea_spec(std::size_t static_dim, std::size_t dx, std::size_t dy,
                                 std::size_t wx, std::size_t wy, std::size_t z) {
    ArchitectureSpec s;
    s.kind = ArchKind::Tea;
    s.model = ModelType::Linear;
    s.dims = DataDims{static_dim, dx, dy, wx, wy};
    s.latent_dim = z;
    s.target_row_kinds.assign(s.dims.flat_y(), VarKind::Continuous);
    return s;
}

Batch single_column_batch(const DataDims& d, Rng& rng) {
    Batch b;
    b.size = 1;
    b.flat_x = Tensor({d.flat_x(), 1});
    b.flat_y = Tensor({d.flat_y(), 1});
    for (std::size_t i = 0; i < b.flat_x.size(); ++i) b.flat_x[i] = rng.uniform(-1, 1);
    for (std::size_t i = 0; i < b.flat_y.size(); ++i) b.flat_y[i] = rng.uniform(-1, 1);
    if (d.static_dim > 0) {
        b.statics = Tensor({d.static_dim, 1});
        for (std::size_t i = 0; i < d.static_dim; ++i) b.statics[i] = b.flat_x[i];
    }
    b.x_steps.assign(d.window_x, Tensor({d.temporal_x, 1}));
    for (std::size_t t = 0; t < d.window_x; ++t) {
        for (std::size_t v = 0; v < d.temporal_x; ++v) {
            b.x_steps[t][v] = b.flat_x[d.static_dim + t * d.temporal_x + v];
        }
    }
    b.y_steps.assign(d.window_y, Tensor({d.temporal_y, 1}));
    for (std::size_t t = 0; t < d.window_y; ++t) {
        for (std::size_t v = 0; v < d.temporal_y; ++v) {
            b.y_steps[t][v] = b.flat_y[t * d.temporal_y + v];
        }
    }
    return b;
}

} // namespace

TEST_CASE("init is deterministic and produces the documented shapes") {
    // UKCF-scale linear TEA: |X| = 11 + 3*43 = 140, |Y| = 4*34 = 136.
    ArchitectureSpec spec = linear_tea_spec(11, 43, 34, 3, 4, 32);
    CHECK(spec.dims.flat_x() == 140);
    CHECK(spec.dims.flat_y() == 136);
    ComponentSet a = ComponentSet::init(spec, 7);
    ComponentSet b = ComponentSet::init(spec, 7);
    REQUIRE(a.params().size() == b.params().size());
    for (std::size_t i = 0; i < a.params().size(); ++i) {
        CHECK(a.params()[i].node->value.bit_equal(b.params()[i].node->value));
    }
    CHECK(a.param("u.W")->value.rows() == 32);
    CHECK(a.param("u.W")->value.cols() == 140);
    CHECK(a.param("e.W")->value.rows() == 32);
    CHECK(a.param("e.W")->value.cols() == 136);
    CHECK(a.param("theta.W")->value.rows() == 136);
    CHECK(a.param("theta.W")->value.cols() == 32);

    ComponentSet c = ComponentSet::init(spec, 8);
    CHECK(!c.param("u.W")->value.bit_equal(a.param("u.W")->value));
}

TEST_CASE("target-embedding kinds reject |Z| >= |Y|") {
    ArchitectureSpec spec = linear_tea_spec(0, 2, 2, 1, 1, 2);
    CHECK_THROWS_AS(ComponentSet::init(spec, 1), ValueError);
    spec.latent_dim = 5;
    CHECK_THROWS_AS(ComponentSet::init(spec, 1), ValueError);
    // Base has no such constraint.
    spec.kind = ArchKind::Base;
    spec.latent_dim = 5;
    CHECK_NOTHROW(ComponentSet::init(spec, 1));
}

TEST_CASE("identity composition maps x to itself") {
    ArchitectureSpec spec = linear_tea_spec(0, 2, 2, 1, 2, 2);
    ComponentSet cs = ComponentSet::init(spec, 3);
    cs.param("u.W")->value = make_matrix({{1, 0}, {0, 1}});
    cs.param("theta.W")->value = make_matrix({{1, 0}, {0, 1}, {0, 0}, {0, 0}});
    Batch b;
    b.size = 1;
    b.flat_x = Tensor({2, 1}, {1.0, 0.0});
    b.flat_y = Tensor({4, 1});
    Tensor out = cs.predict_values(b);
    CHECK(out[0] == 1.0);
    CHECK(out[1] == 0.0);
    CHECK(out[2] == 0.0);
}

TEST_CASE("linear predict equals the independent matrix-product oracle") {
    ArchitectureSpec spec = linear_tea_spec(3, 5, 4, 2, 3, 6);
    ComponentSet cs = ComponentSet::init(spec, 42);
    Rng rng(1001);
    Batch b = single_column_batch(spec.dims, rng);
    Tensor got = cs.predict_values(b);
    Tensor want = mat_mul(cs.param("theta.W")->value,
                          mat_mul(cs.param("u.W")->value, b.flat_x));
    REQUIRE(got.size() == want.size());
    for (std::size_t i = 0; i < got.size(); ++i) CHECK(std::fabs(got[i] - want[i]) <= 1e-12);
}

TEST_CASE("encode/decode round trip: identity weights reproduce y exactly") {
    ArchitectureSpec spec = linear_tea_spec(0, 2, 2, 1, 2, 3);
    ComponentSet cs = ComponentSet::init(spec, 9);
    Rng rng(1002);
    Batch b = single_column_batch(spec.dims, rng);
    // e keeps the first 3 of 4 coordinates; theta maps them back.
    cs.param("e.W")->value = make_matrix({{1, 0, 0, 0}, {0, 1, 0, 0}, {0, 0, 1, 0}});
    cs.param("theta.W")->value = make_matrix({{1, 0, 0}, {0, 1, 0}, {0, 0, 1}, {0, 0, 0}});
    Tensor recon = cs.decode(cs.encode(b))->value;
    for (std::size_t i = 0; i < 3; ++i) CHECK(recon[i] == doctest::Approx(b.flat_y[i]));
    CHECK(recon[3] == 0.0);
}

TEST_CASE("decode(encode(y)) equals Theta We y by independent arithmetic") {
    ArchitectureSpec spec = linear_tea_spec(2, 6, 5, 2, 2, 4);
    ComponentSet cs = ComponentSet::init(spec, 77);
    Rng rng(1003);
    Batch b = single_column_batch(spec.dims, rng);
    Tensor got = cs.decode(cs.encode(b))->value;
    Tensor want = mat_mul(cs.param("theta.W")->value,
                          mat_mul(cs.param("e.W")->value, b.flat_y));
    for (std::size_t i = 0; i < got.size(); ++i) CHECK(std::fabs(got[i] - want[i]) <= 1e-12);
}

TEST_CASE("encode is unsupported without an encoder") {
    ArchitectureSpec spec = linear_tea_spec(0, 3, 3, 1, 2, 2);
    spec.kind = ArchKind::Base;
    ComponentSet cs = ComponentSet::init(spec, 5);
    Rng rng(1004);
    Batch b = single_column_batch(spec.dims, rng);
    CHECK_THROWS_AS(cs.encode(b), ValueError);
    spec.kind = ArchKind::Fea;
    ComponentSet fea = ComponentSet::init(spec, 5);
    CHECK_THROWS_AS(fea.encode(b), ValueError);
    CHECK_NOTHROW(fea.feature_reconstruct(b));
    CHECK_THROWS_AS(cs.feature_reconstruct(b), ValueError);
}

TEST_CASE("parameter-count audit across architectures and models") {
    for (ArchKind kind : {ArchKind::Base, ArchKind::Reg, ArchKind::Fea, ArchKind::Tea,
                          ArchKind::Ftea}) {
        ArchitectureSpec spec = linear_tea_spec(3, 5, 4, 2, 3, 6);
        spec.kind = kind;
        ComponentSet cs = ComponentSet::init(spec, 2);
        CHECK(cs.parameter_count() == expected_parameter_count(spec));
    }
    for (int layers : {1, 2}) {
        for (ArchKind kind : {ArchKind::Reg, ArchKind::Fea, ArchKind::Tea, ArchKind::Ftea}) {
            ArchitectureSpec spec;
            spec.kind = kind;
            spec.model = ModelType::Gru;
            spec.dims = DataDims{3, 5, 4, 2, 3};
            spec.latent_dim = 4; // hidden = temporal target dimension
            spec.gru_layers = layers;
            spec.target_row_kinds.assign(spec.dims.flat_y(), VarKind::Continuous);
            ComponentSet cs = ComponentSet::init(spec, 2);
            CHECK(cs.parameter_count() == expected_parameter_count(spec));
        }
    }
}

TEST_CASE("linear TEA predict is exactly linear") {
    ArchitectureSpec spec = linear_tea_spec(2, 4, 3, 2, 2, 4);
    ComponentSet cs = ComponentSet::init(spec, 21);
    Rng rng(1005);
    Batch b1 = single_column_batch(spec.dims, rng);
    Batch b2 = single_column_batch(spec.dims, rng);
    const double alpha = 0.7, beta = -1.3;
    Batch mix = b1;
    for (std::size_t i = 0; i < mix.flat_x.size(); ++i) {
        mix.flat_x[i] = alpha * b1.flat_x[i] + beta * b2.flat_x[i];
    }
    Tensor p1 = cs.predict_values(b1);
    Tensor p2 = cs.predict_values(b2);
    Tensor pm = cs.predict_values(mix);
    for (std::size_t i = 0; i < pm.size(); ++i) {
        CHECK(std::fabs(pm[i] - (alpha * p1[i] + beta * p2[i])) <= 1e-10);
    }
}

TEST_CASE("inference output is invariant to encoder weights") {
    ArchitectureSpec spec = linear_tea_spec(2, 4, 3, 2, 2, 4);
    ComponentSet cs = ComponentSet::init(spec, 33);
    Rng rng(1006);
    Batch b = single_column_batch(spec.dims, rng);
    Tensor before = cs.predict_values(b);
    for (std::size_t i = 0; i < cs.param("e.W")->value.size(); ++i) {
        cs.param("e.W")->value[i] += rng.uniform(-10.0, 10.0);
    }
    Tensor after = cs.predict_values(b);
    CHECK(before.bit_equal(after));
}

TEST_CASE("GRU with zero weights and zero statics emits zero") {
    ArchitectureSpec spec;
    spec.kind = ArchKind::Tea;
    spec.model = ModelType::Gru;
    spec.dims = DataDims{2, 3, 3, 2, 2};
    spec.latent_dim = 3;
    spec.target_row_kinds.assign(spec.dims.flat_y(), VarKind::Continuous);
    ComponentSet cs = ComponentSet::init(spec, 4);
    for (auto& p : cs.params()) p.node->value.fill(0.0);
    Batch b;
    b.size = 1;
    b.statics = Tensor({2, 1});
    b.flat_x = Tensor({spec.dims.flat_x(), 1});
    b.flat_y = Tensor({spec.dims.flat_y(), 1});
    b.x_steps.assign(2, Tensor({3, 1}));
    b.y_steps.assign(2, Tensor({3, 1}));
    for (auto& s : b.x_steps) {
        s[0] = 1.0; // nonzero inputs; zero weights must still give zero hidden
        s[1] = -2.0;
    }
    Tensor out = cs.predict_values(b);
    for (std::size_t i = 0; i < out.size(); ++i) CHECK(out[i] == 0.0);
}

TEST_CASE("GRU gradients match finite differences through predict") {
    ArchitectureSpec spec;
    spec.kind = ArchKind::Tea;
    spec.model = ModelType::Gru;
    spec.dims = DataDims{2, 3, 3, 2, 2};
    spec.latent_dim = 3;
    spec.gru_layers = 2;
    spec.target_row_kinds.assign(spec.dims.flat_y(), VarKind::Continuous);
    ComponentSet cs = ComponentSet::init(spec, 11);
    Rng rng(1007);
    Batch b = single_column_batch(spec.dims, rng);

    NodePtr loss = quadratic_loss(cs.predict(b), b.flat_y);
    cs.zero_param_grads();
    backward(loss);
    for (const char* pname : {"u.l0.Wir", "u.l1.Whn", "u.l0.S", "u.l0.bz", "theta.l0.Whr",
                              "theta.l1.Win", "theta.head"}) {
        NodePtr p = cs.param(pname);
        const Tensor at = p->value;
        Tensor fd = finite_difference_gradient(
            [&](const Tensor& probe) {
                p->value = probe;
                const double v = quadratic_loss(cs.predict(b), b.flat_y)->value[0];
                return v;
            },
            at, 1e-6);
        p->value = at;
        for (std::size_t i = 0; i < fd.size(); ++i) {
            CHECK(std::fabs(p->grad[i] - fd[i]) <= 1e-5 * std::max(1.0, std::fabs(fd[i])));
        }
    }
}

TEST_CASE("GRU encoder/decoder gradients match finite differences") {
    ArchitectureSpec spec;
    spec.kind = ArchKind::Tea;
    spec.model = ModelType::Gru;
    spec.dims = DataDims{0, 2, 2, 2, 3};
    spec.latent_dim = 2;
    spec.target_row_kinds.assign(spec.dims.flat_y(), VarKind::Continuous);
    ComponentSet cs = ComponentSet::init(spec, 12);
    Rng rng(1008);
    Batch b = single_column_batch(spec.dims, rng);

    NodePtr loss = quadratic_loss(cs.decode(cs.encode(b)), b.flat_y);
    cs.zero_param_grads();
    backward(loss);
    for (const char* pname : {"e.l0.Wiz", "e.l0.Whn", "theta.l0.Whz", "theta.head"}) {
        NodePtr p = cs.param(pname);
        const Tensor at = p->value;
        Tensor fd = finite_difference_gradient(
            [&](const Tensor& probe) {
                p->value = probe;
                return quadratic_loss(cs.decode(cs.encode(b)), b.flat_y)->value[0];
            },
            at, 1e-6);
        p->value = at;
        for (std::size_t i = 0; i < fd.size(); ++i) {
            CHECK(std::fabs(p->grad[i] - fd[i]) <= 1e-5 * std::max(1.0, std::fabs(fd[i])));
        }
    }
}

TEST_CASE("binary rows pass through a sigmoid at the component output") {
    ArchitectureSpec spec = linear_tea_spec(0, 2, 2, 1, 2, 3);
    spec.target_row_kinds = {VarKind::Binary, VarKind::Continuous, VarKind::Binary,
                             VarKind::Continuous};
    ComponentSet cs = ComponentSet::init(spec, 6);
    Rng rng(1009);
    Batch b = single_column_batch(spec.dims, rng);
    Tensor raw = mat_mul(cs.param("theta.W")->value, mat_mul(cs.param("u.W")->value, b.flat_x));
    Tensor out = cs.predict_values(b);
    CHECK(out[0] == doctest::Approx(1.0 / (1.0 + std::exp(-raw[0]))));
    CHECK(out[1] == doctest::Approx(raw[1]));
}

TEST_CASE("checkpoint round trip preserves weights bit-exactly") {
    ArchitectureSpec spec = linear_tea_spec(2, 4, 3, 2, 2, 4);
    ComponentSet cs = ComponentSet::init(spec, 55);
    const auto dir = std::filesystem::temp_directory_path() / "tealab_ckpt_test";
    std::filesystem::remove_all(dir);
    save_checkpoint(cs, dir, {55, "stage3"});
    CheckpointMeta meta;
    ComponentSet back = load_checkpoint(dir, &meta);
    CHECK(meta.seed == 55);
    CHECK(meta.stage_reached == "stage3");
    REQUIRE(back.params().size() == cs.params().size());
    for (std::size_t i = 0; i < cs.params().size(); ++i) {
        CHECK(back.params()[i].name == cs.params()[i].name);
        CHECK(back.params()[i].node->value.bit_equal(cs.params()[i].node->value));
    }
    CHECK(back.spec().kind == ArchKind::Tea);
    std::filesystem::remove_all(dir);
}

TEST_CASE("clone decouples parameter storage") {
    ArchitectureSpec spec = linear_tea_spec(1, 2, 2, 1, 2, 2);
    ComponentSet cs = ComponentSet::init(spec, 71);
    ComponentSet copy = cs.clone();
    copy.param("u.W")->value[0] += 1.0;
    CHECK(copy.param("u.W")->value[0] != cs.param("u.W")->value[0]);
}
