#include <doctest.h>

#include <cmath>
#include <functional>
#include <vector>

#include "tealab/autodiff.hpp"
#include "tealab/rng.hpp"
#include "tealab/tensor.hpp"

using namespace tealab;

namespace {

Tensor random_tensor(Rng& rng, std::vector<std::size_t> shape, double mag = 1.0) {
    Tensor t(std::move(shape));
    for (std::size_t i = 0; i < t.size(); ++i) t[i] = rng.uniform(-mag, mag);
    return t;
}

/// Finite-difference check of d(root)/d(leaf) for a graph builder that maps
/// leaf tensors to a scalar node.
void check_gradient(const std::function<NodePtr(const std::vector<NodePtr>&)>& build,
                    std::vector<Tensor> leaf_values, double tol, double h = 1e-5) {
    std::vector<NodePtr> leaves;
    for (const Tensor& v : leaf_values) leaves.push_back(leaf(v));
    NodePtr root = build(leaves);
    backward(root);
    for (std::size_t li = 0; li < leaves.size(); ++li) {
        Tensor fd = finite_difference_gradient(
            [&](const Tensor& at) {
                std::vector<NodePtr> probe;
                for (std::size_t k = 0; k < leaf_values.size(); ++k) {
                    probe.push_back(leaf(k == li ? at : leaf_values[k]));
                }
                return build(probe)->value[0];
            },
            leaf_values[li], h);
        for (std::size_t i = 0; i < fd.size(); ++i) {
            const double got = leaves[li]->grad[i];
            const double want = fd[i];
            CHECK(std::fabs(got - want) <= tol * std::max(1.0, std::fabs(want)));
        }
    }
}

} // namespace

TEST_CASE("tensor constructor validates shape and contents") {
    CHECK_THROWS_AS(Tensor({2, 2}, {1.0, 2.0, 3.0}), ShapeError);
    CHECK_THROWS_AS(Tensor({2}, {1.0, std::nan("")}), ValueError);
    CHECK_THROWS_AS(Tensor({2}, {1.0, std::numeric_limits<double>::infinity()}), ValueError);
    CHECK_THROWS_AS(Tensor({0, 3}), ShapeError);
    Tensor t({2, 3});
    CHECK(t.size() == 6);
    CHECK(t.rows() == 2);
    CHECK(t.cols() == 3);
    for (std::size_t i = 0; i < t.size(); ++i) CHECK(t[i] == 0.0);
}

TEST_CASE("matmul identity and forced product") {
    auto a = leaf(make_matrix({{1, 2}, {3, 4}}));
    auto id = leaf(make_matrix({{1, 0}, {0, 1}}));
    auto prod = matmul(a, id);
    CHECK(prod->value.bit_equal(a->value));

    auto row = leaf(make_matrix({{1, 2}}));
    auto col = leaf(make_matrix({{3}, {4}}));
    CHECK(matmul(row, col)->value[0] == doctest::Approx(11.0).epsilon(1e-15));

    CHECK_THROWS_AS(matmul(row, row), ShapeError);
    try {
        matmul(row, row);
    } catch (const ShapeError& e) {
        const std::string msg = e.what();
        CHECK(msg.find("[1x2]") != std::string::npos); // both shapes in the message
    }
}

TEST_CASE("matmul backward matches finite differences") {
    Rng rng(11);
    check_gradient(
        [](const std::vector<NodePtr>& in) { return sum(matmul(in[0], in[1])); },
        {random_tensor(rng, {3, 4}), random_tensor(rng, {4, 2})}, 1e-6);
}

TEST_CASE("elementwise values") {
    auto z = leaf(Tensor::scalar(0.0));
    CHECK(sigmoid(z)->value[0] == doctest::Approx(0.5).epsilon(1e-15));
    CHECK(tanh(z)->value[0] == 0.0);
    auto a = leaf(make_vector({1, 2}));
    auto b = leaf(make_vector({3, 5}));
    CHECK(add(a, b)->value[0] == 4.0);
    CHECK(sub(a, b)->value[1] == -3.0);
    CHECK(hadamard(a, b)->value[1] == 10.0);
    CHECK(scale(a, -2.0)->value[0] == -2.0);
    auto c = leaf(make_vector({1, 2, 3}));
    CHECK_THROWS_AS(add(a, c), ShapeError);
    CHECK_THROWS_AS(hadamard(a, c), ShapeError);
}

TEST_CASE("elementwise backward matches finite differences") {
    Rng rng(12);
    check_gradient(
        [](const std::vector<NodePtr>& in) { return sum(hadamard(in[0], in[1])); },
        {random_tensor(rng, {2, 3}), random_tensor(rng, {2, 3})}, 1e-6);
    check_gradient(
        [](const std::vector<NodePtr>& in) {
            return sum(hadamard(sigmoid(in[0]), tanh(in[1])));
        },
        {random_tensor(rng, {2, 3}), random_tensor(rng, {2, 3})}, 1e-6);
    check_gradient(
        [](const std::vector<NodePtr>& in) { return mean(scale(sub(in[0], in[1]), 3.0)); },
        {random_tensor(rng, {4}), random_tensor(rng, {4})}, 1e-6);
}

TEST_CASE("reductions and structure") {
    auto v = leaf(make_vector({1, 2, 3}));
    auto m = mean(v);
    CHECK(m->value[0] == doctest::Approx(2.0).epsilon(1e-15));
    backward(m);
    for (std::size_t i = 0; i < 3; ++i) {
        CHECK(v->grad[i] == doctest::Approx(1.0 / 3.0).epsilon(1e-15));
    }

    auto r1 = leaf(make_matrix({{1, 2}}));
    auto r2 = leaf(make_matrix({{3, 4}}));
    auto cat = concat_rows(r1, r2);
    CHECK(cat->value.rows() == 2);
    CHECK(slice_rows(cat, 0, 1)->value.bit_equal(r1->value));
    CHECK(slice_rows(cat, 1, 2)->value.bit_equal(r2->value));
    CHECK_THROWS_AS(slice_rows(cat, 1, 3), ShapeError);
    CHECK_THROWS_AS(concat_rows(r1, leaf(make_matrix({{1, 2, 3}}))), ShapeError);

    Rng rng(13);
    check_gradient([](const std::vector<NodePtr>& in) { return sum(in[0]); },
                   {random_tensor(rng, {4, 4})}, 1e-6);
    check_gradient(
        [](const std::vector<NodePtr>& in) {
            return sum(hadamard(slice_rows(concat_rows(in[0], in[1]), 1, 3),
                                slice_rows(concat_rows(in[1], in[0]), 0, 2)));
        },
        {random_tensor(rng, {2, 3}), random_tensor(rng, {2, 3})}, 1e-6);
}

TEST_CASE("colwise_add and masked_sigmoid") {
    Rng rng(14);
    check_gradient(
        [](const std::vector<NodePtr>& in) { return sum(colwise_add(in[0], in[1])); },
        {random_tensor(rng, {3, 4}), random_tensor(rng, {3, 1})}, 1e-6);
    std::vector<std::uint8_t> mask = {1, 0, 1};
    check_gradient(
        [&mask](const std::vector<NodePtr>& in) { return sum(masked_sigmoid(in[0], mask)); },
        {random_tensor(rng, {3, 2})}, 1e-6);
    auto m = leaf(make_matrix({{0, 0}, {5, -5}}));
    auto ms = masked_sigmoid(m, {1, 0});
    CHECK(ms->value.at(0, 0) == doctest::Approx(0.5));
    CHECK(ms->value.at(1, 0) == 5.0);
    CHECK_THROWS_AS(masked_sigmoid(m, {1, 0, 0}), ShapeError);
    CHECK_THROWS_AS(colwise_add(m, leaf(make_matrix({{1}, {2}, {3}}))), ShapeError);
}

TEST_CASE("backward on x*x and sigmoid(w*x)") {
    auto x = leaf(Tensor::scalar(3.0));
    auto root = hadamard(x, x);
    backward(root);
    CHECK(x->grad[0] == doctest::Approx(6.0).epsilon(1e-15));

    auto w = leaf(make_matrix({{0.0}}));
    auto xi = leaf(make_matrix({{1.0}}));
    auto s = sum(sigmoid(matmul(w, xi)));
    backward(s);
    CHECK(w->grad[0] == doctest::Approx(0.25).epsilon(1e-12));
}

TEST_CASE("backward requires a scalar root") {
    auto v = leaf(make_vector({1, 2}));
    CHECK_THROWS_AS(backward(v), ShapeError);
}

TEST_CASE("fan-out sums both adjoint contributions") {
    auto x = leaf(Tensor::scalar(1.5));
    auto root = add(x, x);
    backward(root);
    CHECK(x->grad[0] == doctest::Approx(2.0).epsilon(1e-15));
}

TEST_CASE("repeated backward accumulates until gradients are zeroed") {
    auto x = leaf(Tensor::scalar(3.0));
    auto root = hadamard(x, x);
    backward(root);
    backward(root);
    CHECK(x->grad[0] == doctest::Approx(12.0).epsilon(1e-12));
    zero_gradients(root);
    CHECK(x->grad[0] == 0.0);
    backward(root);
    CHECK(x->grad[0] == doctest::Approx(6.0).epsilon(1e-12));
}

TEST_CASE("five-op composite graph matches finite differences") {
    Rng rng(15);
    check_gradient(
        [](const std::vector<NodePtr>& in) {
            auto h = tanh(matmul(in[0], in[1]));
            auto g = sigmoid(matmul(in[2], h));
            return mean(hadamard(g, g));
        },
        {random_tensor(rng, {3, 3}), random_tensor(rng, {3, 2}), random_tensor(rng, {2, 3})},
        1e-5);
}

TEST_CASE("finite_difference_gradient basics") {
    auto square = [](const Tensor& t) { return t[0] * t[0]; };
    Tensor at = Tensor::scalar(3.0);
    Tensor g = finite_difference_gradient(square, at, 1e-5);
    CHECK(std::fabs(g[0] - 6.0) <= 1e-8);

    auto total = [](const Tensor& t) {
        double acc = 0.0;
        for (std::size_t i = 0; i < t.size(); ++i) acc += t[i];
        return acc;
    };
    Rng rng(16);
    Tensor at2 = random_tensor(rng, {5});
    Tensor g2 = finite_difference_gradient(total, at2, 1e-5);
    for (std::size_t i = 0; i < g2.size(); ++i) {
        CHECK(g2[i] == doctest::Approx(1.0).epsilon(1e-9));
    }
    CHECK_THROWS_AS(finite_difference_gradient(square, at, 0.0), ValueError);

    // Quadratic loss gradient matches the analytic 2(yhat - y).
    Tensor target = random_tensor(rng, {6});
    Tensor point = random_tensor(rng, {6});
    auto loss = [&target](const Tensor& t) {
        double acc = 0.0;
        for (std::size_t i = 0; i < t.size(); ++i) {
            acc += (t[i] - target[i]) * (t[i] - target[i]);
        }
        return acc;
    };
    Tensor g3 = finite_difference_gradient(loss, point, 1e-5);
    for (std::size_t i = 0; i < g3.size(); ++i) {
        const double analytic = 2.0 * (point[i] - target[i]);
        CHECK(std::fabs(g3[i] - analytic) <= 1e-6 * std::max(1.0, std::fabs(analytic)));
    }
}

TEST_CASE("random composite graphs match finite differences") {
    // Smaller version of the acceptance sweep: random small DAGs over the
    // full op set, parameters of magnitude <= 1.
    Rng rng(17);
    for (int rep = 0; rep < 25; ++rep) {
        const std::size_t r = 2 + rng.below(3), c = 2 + rng.below(3);
        std::vector<Tensor> leaves = {random_tensor(rng, {r, c}), random_tensor(rng, {r, c}),
                                      random_tensor(rng, {c, r})};
        const std::uint64_t pick = rng.below(4);
        check_gradient(
            [pick](const std::vector<NodePtr>& in) {
                NodePtr a = in[0], b = in[1];
                NodePtr m;
                switch (pick) {
                    case 0: m = tanh(matmul(a, in[2])); break;
                    case 1: m = sigmoid(matmul(b, in[2])); break;
                    case 2: m = matmul(hadamard(a, b), in[2]); break;
                    default: m = matmul(add(a, b), in[2]); break;
                }
                return mean(hadamard(m, m));
            },
            leaves, 1e-5);
    }
}
