// SPDX-License-Identifier: Apache-2.0
#include "fdd/nn.hpp"

#include <doctest.h>

#include <cmath>
#include <filesystem>

using namespace fdd;
using namespace fdd::nn;

namespace {

using MatD = Mat<double>;

MatD random_mat(Eigen::Index r, Eigen::Index c, RandomStream& rng, double scale = 1.0) {
    MatD m(r, c);
    for (Eigen::Index j = 0; j < c; ++j)
        for (Eigen::Index i = 0; i < r; ++i) m(i, j) = scale * rng.normal();
    return m;
}

ParamRef<double> ref(const std::string& name, MatD& value, MatD& grad) {
    return {name, value.data(), grad.data(), static_cast<std::size_t>(value.size())};
}

// sum(c .* y): a linear probe whose upstream gradient is c.
double probe(const MatD& y, const MatD& c) { return (y.array() * c.array()).sum(); }

// Central differences with respect to an input matrix, returned as a report.
GradCheckReport check_input(const std::function<MatD(const MatD&)>& f, MatD x, const MatD& analytic, const MatD& c) {
    MatD g = analytic;
    const auto loss = [&] { return probe(f(x), c); };
    return grad_check(loss, {ref("x", x, g)});
}

}  // namespace

TEST_CASE("dense: identity, bias gradient, finite differences") {
    Dense<double> d(3, 3);
    d.w = MatD::Identity(3, 3);
    d.b.setZero();
    RandomStream rng(1);
    const MatD x = random_mat(3, 5, rng);
    CHECK(d.forward(x) == x);

    double worst = 0.0;
    for (int t = 0; t < 100; ++t) {
        Dense<double> layer(4, 3);
        layer.init(rng);
        layer.b = random_mat(3, 1, rng);
        MatD in = random_mat(4, 6, rng);
        const MatD c = random_mat(3, 6, rng);
        layer.zero_grad();
        layer.forward(in);
        const MatD dx = layer.backward(c);
        REQUIRE((layer.db - c.rowwise().sum()).norm() < 1e-12);

        std::vector<ParamRef<double>> params;
        layer.collect(params, "d");
        const auto rep = grad_check([&] { return probe(layer.forward(in), c); }, params);
        worst = std::max(worst, rep.max_rel_error);
        const auto irep = check_input([&](const MatD& v) { return layer.forward(v); }, in, dx, c);
        worst = std::max(worst, irep.max_rel_error);
    }
    CHECK(worst < 1e-6);
    CHECK_THROWS(d.forward(random_mat(4, 2, rng)));
}

TEST_CASE("relu and tanh: examples and finite differences") {
    MatD x(3, 1);
    x << -1.0, 0.0, 2.0;
    const MatD y = relu_forward<double>(x);
    CHECK(y(0) == 0.0);
    CHECK(y(1) == 0.0);
    CHECK(y(2) == 2.0);
    CHECK(relu_backward<double>(x, MatD::Ones(3, 1))(1) == 0.0);

    MatD z = MatD::Zero(1, 1);
    CHECK(tanh_backward<double>(tanh_forward<double>(z), MatD::Ones(1, 1))(0) == 1.0);

    RandomStream rng(2);
    double worst = 0.0;
    for (int t = 0; t < 100; ++t) {
        MatD in = random_mat(5, 4, rng);
        for (Eigen::Index i = 0; i < in.size(); ++i)
            if (std::abs(in.data()[i]) < 1e-3) in.data()[i] = 0.5;
        const MatD c = random_mat(5, 4, rng);
        worst = std::max(worst, check_input([](const MatD& v) { return relu_forward<double>(v); }, in,
                                            relu_backward<double>(in, c), c)
                                    .max_rel_error);
        worst = std::max(worst, check_input([](const MatD& v) { return tanh_forward<double>(v); }, in,
                                            tanh_backward<double>(tanh_forward<double>(in), c), c)
                                    .max_rel_error);
    }
    CHECK(worst < 1e-6);
}

TEST_CASE("batchnorm: constant batch, normalized statistics, batch of one") {
    BatchNorm<double> bn(2);
    const MatD k = MatD::Constant(2, 8, 3.0);
    CHECK(bn.forward(k, Mode::train).cwiseAbs().maxCoeff() < 1e-6);

    RandomStream rng(3);
    BatchNorm<double> b2(3, 0.99, 0.0);
    const MatD x = random_mat(3, 64, rng, 4.0).array() + 2.0;
    const MatD y = b2.forward(x, Mode::train);
    for (Eigen::Index f = 0; f < 3; ++f) {
        const double mean = y.row(f).mean();
        const double var = (y.row(f).array() - mean).square().mean();
        CHECK(std::abs(mean) < 1e-6);
        CHECK(std::abs(var - 1.0) < 1e-6);
    }
    CHECK_THROWS(bn.forward(random_mat(2, 1, rng), Mode::train));
    CHECK_NOTHROW(bn.forward(random_mat(2, 1, rng), Mode::infer));
}

TEST_CASE("batchnorm: train-mode backward matches finite differences") {
    RandomStream rng(4);
    double worst = 0.0;
    for (int t = 0; t < 100; ++t) {
        BatchNorm<double> bn(3);
        bn.gamma = random_mat(3, 1, rng);
        bn.beta = random_mat(3, 1, rng);
        MatD x = random_mat(3, 16, rng, 2.0);
        const MatD c = random_mat(3, 16, rng);
        bn.zero_grad();
        bn.forward(x, Mode::train);
        const MatD dx = bn.backward(c);
        std::vector<ParamRef<double>> params;
        bn.collect(params, "bn");
        worst = std::max(worst, grad_check([&] { return probe(bn.forward(x, Mode::train), c); }, params).max_rel_error);
        worst = std::max(
            worst, check_input([&](const MatD& v) { return bn.forward(v, Mode::train); }, x, dx, c).max_rel_error);
    }
    CHECK(worst < 1e-5);
}

TEST_CASE("batchnorm: infer mode and running statistics convergence") {
    BatchNorm<double> bn(1);
    RandomStream rng(5);
    const double mu = 1.5, sd = 2.0;
    for (int t = 0; t < 10'000; ++t) {
        MatD x = random_mat(1, 1024, rng, sd).array() + mu;
        bn.forward(x, Mode::train);
    }
    CHECK(std::abs(bn.running_mean(0) - mu) < 0.01 * mu);
    CHECK(std::abs(bn.running_var(0) - sd * sd) < 0.01 * sd * sd);
    CHECK(bn.running_var(0) >= 0.0);

    // Infer mode is a fixed affine map given the running statistics.
    MatD x(1, 2);
    x << 0.0, 4.0;
    const MatD y = bn.forward(x, Mode::infer);
    const double s = 1.0 / std::sqrt(bn.running_var(0) + bn.epsilon);
    CHECK(y(0) == doctest::Approx((0.0 - bn.running_mean(0)) * s).epsilon(1e-12));
    CHECK(y(1) == doctest::Approx((4.0 - bn.running_mean(0)) * s).epsilon(1e-12));
}

TEST_CASE("sign: forward values and surrogate slope") {
    MatD u(5, 1);
    u << 0.3, -0.2, 0.0, std::numeric_limits<double>::infinity(), -std::numeric_limits<double>::infinity();
    const MatD s = sign_forward<double>(u);
    CHECK(s(0) == 1.0);
    CHECK(s(1) == -1.0);
    CHECK(s(2) == 1.0);
    CHECK(s(3) == 1.0);
    CHECK(s(4) == -1.0);
    MatD nan(1, 1);
    nan(0) = std::numeric_limits<double>::quiet_NaN();
    CHECK(std::abs(sign_forward<double>(nan)(0)) == 1.0);

    CHECK(sign_surrogate_slope(0.0, 1.0) == doctest::Approx(0.5).epsilon(1e-15));
    CHECK(sign_surrogate_slope(50.0, 10.0) < 1e-12);
    CHECK(sign_surrogate_slope(-50.0, 10.0) < 1e-12);

    RandomStream rng(6);
    const MatD x = random_mat(6, 3, rng), c = random_mat(6, 3, rng);
    const MatD g = sign_backward<double>(x, c, 2.5);
    for (Eigen::Index i = 0; i < x.size(); ++i)
        CHECK(g.data()[i] == doctest::Approx(c.data()[i] * sign_surrogate_slope(x.data()[i], 2.5)).epsilon(1e-14));
}

TEST_CASE("sign: surrogate-smoothed backward matches finite differences") {
    RandomStream rng(7);
    double worst = 0.0;
    for (int t = 0; t < 100; ++t) {
        const double alpha = rng.uniform(0.5, 5.0);
        MatD x = random_mat(4, 5, rng);
        const MatD c = random_mat(4, 5, rng);
        worst = std::max(worst, check_input([&](const MatD& v) { return sign_surrogate_forward<double>(v, alpha); }, x,
                                            sign_backward<double>(x, c, alpha), c)
                                    .max_rel_error);
    }
    CHECK(worst < 1e-5);
}

TEST_CASE("unit norm: power, scale invariance, finite differences, zero input") {
    RandomStream rng(8);
    const double p = 10.0;
    const MatD x = random_mat(6, 4, rng);
    const MatD y = unit_norm_forward<double>(x, p);
    for (Eigen::Index j = 0; j < 4; ++j) CHECK(y.col(j).norm() == doctest::Approx(std::sqrt(p)).epsilon(1e-14));
    CHECK((unit_norm_forward<double>(MatD(3.0 * x), p) - y).norm() < 1e-13);

    double worst = 0.0;
    for (int t = 0; t < 100; ++t) {
        MatD in = random_mat(6, 3, rng);
        const MatD c = random_mat(6, 3, rng);
        worst = std::max(worst, check_input([&](const MatD& v) { return unit_norm_forward<double>(v, p); }, in,
                                            unit_norm_backward<double>(in, c, p), c)
                                    .max_rel_error);
    }
    CHECK(worst < 1e-6);
    CHECK_THROWS(unit_norm_forward<double>(MatD::Zero(3, 1), p));
}

TEST_CASE("mlp: full stack with BN, ReLU and ST surrogate matches finite differences") {
    RandomStream rng(9);
    double worst_plain = 0.0, worst_st = 0.0;
    for (int t = 0; t < 100; ++t) {
        Mlp<double> mlp({4, 6, 5, 3});
        mlp.init(rng);
        MatD x = random_mat(4, 8, rng);
        const MatD c = random_mat(3, 8, rng);
        const double alpha = rng.uniform(0.5, 3.0);

        mlp.zero_grad();
        mlp.forward(x, Mode::train);
        if (mlp.min_relu_margin() < 1e-3) continue;
        mlp.backward(c);
        std::vector<ParamRef<double>> params;
        mlp.collect(params, "m");
        worst_plain = std::max(worst_plain, grad_check([&] { return probe(mlp.forward(x, Mode::train), c); }, params).max_rel_error);

        mlp.zero_grad();
        const MatD u = mlp.forward(x, Mode::train);
        mlp.backward(sign_backward<double>(u, c, alpha));
        worst_st = std::max(worst_st, grad_check([&] {
                                          return probe(sign_surrogate_forward<double>(mlp.forward(x, Mode::train), alpha), c);
                                      },
                                                 params)
                                          .max_rel_error);
    }
    CHECK(worst_plain < 1e-5);
    CHECK(worst_st < 1e-5);
}

TEST_CASE("mlp: layout") {
    Mlp<float> mlp({8, 16, 4});
    REQUIRE(mlp.layers.size() == 2);
    REQUIRE(mlp.norms.size() == 2);
    CHECK(mlp.layers[0].w.rows() == 16);
    CHECK(mlp.layers[0].w.cols() == 8);
    CHECK(mlp.layers[1].w.rows() == 4);
    CHECK(mlp.input_size() == 8);
    CHECK(mlp.output_size() == 4);
}

namespace {

// Reference Adam, written from the textbook update.
struct RefAdam {
    double m = 0.0, v = 0.0;
    int t = 0;
    double step(double x, double g, double lr) {
        ++t;
        m = 0.9 * m + 0.1 * g;
        v = 0.999 * v + 0.001 * g * g;
        const double mh = m / (1.0 - std::pow(0.9, t)), vh = v / (1.0 - std::pow(0.999, t));
        return x - lr * mh / (std::sqrt(vh) + 1e-8);
    }
};

}  // namespace

TEST_CASE("adam: zero gradient, first step, reference trajectory") {
    MatD p = MatD::Constant(3, 1, 2.0), g = MatD::Zero(3, 1);
    Adam<double> opt;
    opt.step({ref("p", p, g)}, 1e-2);
    CHECK(p == MatD::Constant(3, 1, 2.0));
    CHECK(opt.step_count() == 1);

    MatD q(3, 1), gq(3, 1);
    q << 1.0, -1.0, 0.5;
    gq << 0.3, -2.0, 1e-3;
    const MatD q0 = q;
    Adam<double> first;
    first.step({ref("q", q, gq)}, 0.1);
    for (Eigen::Index i = 0; i < 3; ++i)
        CHECK(q(i) - q0(i) == doctest::Approx(-0.1 * gq(i) / (std::abs(gq(i)) + 1e-8)).epsilon(1e-9));

    MatD x = MatD::Constant(1, 1, 3.0), gx(1, 1);
    double xr = 3.0;
    RefAdam reference;
    Adam<double> opt2;
    for (int s = 0; s < 100; ++s) {
        gx(0) = 2.0 * x(0);
        const double grad_ref = 2.0 * xr;
        opt2.step({ref("x", x, gx)}, 0.05);
        xr = reference.step(xr, grad_ref, 0.05);
        REQUIRE(std::abs(x(0) - xr) < 1e-10);
    }
}

TEST_CASE("adam: gradient scaling keeps the step sign pattern") {
    RandomStream rng(10);
    MatD g = random_mat(50, 1, rng);
    for (double c : {1e-2, 1.0, 1e3}) {
        MatD p = MatD::Zero(50, 1), gs = c * g;
        Adam<double> opt;
        opt.step({ref("p", p, gs)}, 1e-3);
        for (Eigen::Index i = 0; i < 50; ++i) REQUIRE((p(i) < 0.0) == (g(i) > 0.0));
    }
}

TEST_CASE("checkpoint: bit-exact round trip and hash check") {
    RandomStream rng(11);
    Mlp<float> mlp({5, 7, 3});
    mlp.init(rng);
    Eigen::MatrixXf x = Eigen::MatrixXf::Random(5, 16);
    mlp.forward(x, Mode::train);
    TensorSet set;
    export_mlp(mlp, "enc", set);
    std::vector<double> pilot{1.0 / 3.0, -2.0, 1e-300};
    set.add(Tensor::from<double>("pilot", {3}, pilot.data(), 3));

    const auto stem = std::filesystem::temp_directory_path() / "fdd_nn_ckpt";
    save_checkpoint(stem, set, "abc123", R"({"note":1})");
    std::string hash, meta;
    const auto back = load_checkpoint(stem, &hash, &meta);
    CHECK(back == set);
    CHECK(hash == "abc123");
    CHECK(meta.find("note") != std::string::npos);

    Mlp<float> other({5, 7, 3});
    import_mlp(other, "enc", back);
    CHECK(other.forward(x, Mode::infer) == mlp.forward(x, Mode::infer));

    std::vector<double> p2(3);
    back.at("pilot").to<double>(p2.data(), 3);
    CHECK(p2 == pilot);
    std::vector<float> wrong(3);
    CHECK_THROWS(back.at("pilot").to<float>(wrong.data(), 3));
    CHECK_THROWS(back.at("missing"));

    Mlp<float> bad({5, 8, 3});
    CHECK_THROWS(import_mlp(bad, "enc", back));
    std::filesystem::remove(stem.string() + ".json");
    std::filesystem::remove(stem.string() + ".bin");
}

TEST_CASE("grad_check: detects a wrong gradient") {
    MatD x = MatD::Constant(2, 1, 1.0), g(2, 1);
    g << 2.0, 5.0;  // true gradient of sum(x^2) is (2, 2)
    const auto rep = grad_check([&] { return x.squaredNorm(); }, {ref("x", x, g)});
    CHECK(rep.max_rel_error > 0.5);
    CHECK(rep.checked == 2);
}
