#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <vector>

#include "fedgrid/nn.hpp"
#include "fedgrid/rng.hpp"

using namespace fedgrid;

namespace {

// Independent forward oracle: naive triple loop over the documented flat
// layout (per layer: weights row-major [out][in], then bias).
std::vector<double> naive_forward(const nn::ParamVector& p, std::vector<double> x) {
    std::size_t off = 0;
    for (const auto& s : p.shape_meta) {
        std::vector<double> y(static_cast<std::size_t>(s.output_dim), 0.0);
        for (int r = 0; r < s.output_dim; ++r) {
            double acc = 0.0;
            for (int c = 0; c < s.input_dim; ++c)
                acc += p.values[off + static_cast<std::size_t>(r) * s.input_dim + c] * x[static_cast<std::size_t>(c)];
            acc += p.values[off + static_cast<std::size_t>(s.input_dim) * s.output_dim + r];
            switch (s.activation) {
                case nn::Activation::Tanh: y[static_cast<std::size_t>(r)] = std::tanh(acc); break;
                case nn::Activation::Relu: y[static_cast<std::size_t>(r)] = acc > 0 ? acc : 0.0; break;
                case nn::Activation::Identity: y[static_cast<std::size_t>(r)] = acc; break;
            }
        }
        off += nn::layer_param_count(s);
        x = std::move(y);
    }
    return x;
}

double fd_rel_err(double analytic, double numeric) {
    return std::abs(analytic - numeric) / std::max({1.0, std::abs(analytic), std::abs(numeric)});
}

// Central finite differences of <forward(p, x), g_out> against every
// parameter and input entry; returns the max relative error vs mlp_backward.
double gradient_check(const nn::ParamVector& p, const std::vector<double>& x,
                      const std::vector<double>& g_out, double h = 1e-5) {
    const auto grads = nn::mlp_backward(p, x, g_out);
    auto dot_out = [&](const nn::ParamVector& q, const std::vector<double>& in) {
        const auto y = nn::mlp_forward(q, in);
        double acc = 0.0;
        for (std::size_t i = 0; i < y.size(); ++i) acc += y[i] * g_out[i];
        return acc;
    };
    double worst = 0.0;
    for (std::size_t j = 0; j < p.size(); ++j) {
        nn::ParamVector q = p;
        q.values[j] = p.values[j] + h;
        const double fp = dot_out(q, x);
        q.values[j] = p.values[j] - h;
        const double fm = dot_out(q, x);
        worst = std::max(worst, fd_rel_err(grads.params[j], (fp - fm) / (2 * h)));
    }
    for (std::size_t j = 0; j < x.size(); ++j) {
        std::vector<double> xp = x, xm = x;
        xp[j] += h;
        xm[j] -= h;
        worst = std::max(worst, fd_rel_err(grads.input[j], (dot_out(p, xp) - dot_out(p, xm)) / (2 * h)));
    }
    return worst;
}

} // namespace

TEST_CASE("mlp_init length, determinism and seed sensitivity") {
    const std::vector<nn::LayerSpec> specs{{2, 3, nn::Activation::Tanh}, {3, 1, nn::Activation::Identity}};
    const auto p = nn::mlp_init(specs, 7);
    CHECK(p.size() == 13); // 2*3+3 + 3*1+1

    const auto q = nn::mlp_init(specs, 7);
    CHECK(p.values == q.values);

    const auto r = nn::mlp_init(specs, 8);
    CHECK(p.values != r.values);

    for (std::size_t k = 0; k < p.layer_count(); ++k) {
        const auto& s = p.shape_meta[k];
        const double bound = std::sqrt(6.0 / (s.input_dim + s.output_dim));
        for (int i = 0; i < s.input_dim * s.output_dim; ++i) {
            CHECK(p.weights(k)[i] <= bound);
            CHECK(p.weights(k)[i] >= -bound);
        }
        for (int i = 0; i < s.output_dim; ++i) CHECK(p.bias(k)[i] == 0.0);
    }
}

TEST_CASE("mlp spec validation") {
    CHECK_THROWS_AS(nn::mlp_init({{2, 3, nn::Activation::Tanh}, {4, 1, nn::Activation::Identity}}, 1),
                    std::invalid_argument);
    CHECK_THROWS_AS(nn::mlp_init({{0, 3, nn::Activation::Tanh}}, 1), std::invalid_argument);
    CHECK_THROWS_AS(nn::mlp_init({}, 1), std::invalid_argument);
}

TEST_CASE("mlp_forward basics") {
    SECTION("all-zero weights give zero output through identity head") {
        nn::ParamVector p({{3, 4, nn::Activation::Tanh}, {4, 2, nn::Activation::Identity}});
        const auto y = nn::mlp_forward(p, std::vector<double>{0.3, -0.7, 2.0});
        REQUIRE(y.size() == 2);
        CHECK(y[0] == 0.0);
        CHECK(y[1] == 0.0);
    }
    SECTION("single identity layer with weight I, bias 0 echoes the input") {
        nn::ParamVector p({{3, 3, nn::Activation::Identity}});
        for (int i = 0; i < 3; ++i) p.weights(0)[i * 3 + i] = 1.0;
        const std::vector<double> x{0.25, -1.5, 4.0};
        CHECK(nn::mlp_forward(p, x) == x);
    }
    SECTION("input length mismatch throws") {
        nn::ParamVector p({{3, 2, nn::Activation::Identity}});
        CHECK_THROWS_AS(nn::mlp_forward(p, std::vector<double>{1.0, 2.0}), std::invalid_argument);
    }
}

TEST_CASE("mlp_forward matches the naive oracle on random nets") {
    rng::Stream s(2024);
    for (int trial = 0; trial < 20; ++trial) {
        const int in = 1 + static_cast<int>(s.next_below(6));
        const int mid = 1 + static_cast<int>(s.next_below(6));
        const int out = 1 + static_cast<int>(s.next_below(4));
        const auto act = trial % 2 ? nn::Activation::Tanh : nn::Activation::Relu;
        auto p = nn::mlp_init({{in, mid, act}, {mid, out, nn::Activation::Identity}}, 100 + trial);
        std::vector<double> x(static_cast<std::size_t>(in));
        for (auto& v : x) v = s.uniform(-2, 2);

        const auto got = nn::mlp_forward(p, x);
        const auto want = naive_forward(p, x);
        REQUIRE(got.size() == want.size());
        for (std::size_t i = 0; i < got.size(); ++i)
            CHECK(std::abs(got[i] - want[i]) <= 1e-12);
    }
}

TEST_CASE("mlp_forward is pure") {
    const auto p = nn::mlp_init({{4, 5, nn::Activation::Tanh}, {5, 3, nn::Activation::Identity}}, 11);
    const std::vector<double> x{0.1, 0.2, 0.3, 0.4};
    const auto a = nn::mlp_forward(p, x);
    const auto b = nn::mlp_forward(p, x);
    CHECK(a == b);
}

TEST_CASE("mlp_backward zero upstream gradient gives zero gradients") {
    const auto p = nn::mlp_init({{3, 4, nn::Activation::Tanh}, {4, 2, nn::Activation::Identity}}, 5);
    const auto g = nn::mlp_backward(p, std::vector<double>{1, 2, 3}, std::vector<double>{0, 0});
    for (double v : g.params) CHECK(v == 0.0);
    for (double v : g.input) CHECK(v == 0.0);
}

TEST_CASE("mlp_backward linear layer weight gradient is outer(g_out, x)") {
    nn::ParamVector p({{3, 2, nn::Activation::Identity}});
    rng::Stream s(77);
    for (auto& v : p.values) v = s.uniform(-1, 1);
    const std::vector<double> x{0.5, -1.25, 2.0};
    const std::vector<double> g_out{1.5, -0.5};
    const auto g = nn::mlp_backward(p, x, g_out);
    for (int r = 0; r < 2; ++r)
        for (int c = 0; c < 3; ++c)
            CHECK(g.params[static_cast<std::size_t>(r) * 3 + c] == g_out[static_cast<std::size_t>(r)] * x[static_cast<std::size_t>(c)]);
    // bias gradient is g_out itself
    CHECK(g.params[6] == g_out[0]);
    CHECK(g.params[7] == g_out[1]);
}

TEST_CASE("gradient check: every width in 1..8, depth in 1..3") {
    rng::Stream s(31337);
    for (int width = 1; width <= 8; ++width) {
        for (int depth = 1; depth <= 3; ++depth) {
            std::vector<nn::LayerSpec> specs;
            int in = width;
            for (int d = 0; d < depth - 1; ++d) specs.push_back({in, width, nn::Activation::Tanh});
            specs.push_back({width, std::max(1, width / 2), nn::Activation::Identity});
            const auto p = nn::mlp_init(specs, static_cast<std::uint64_t>(width * 100 + depth));
            std::vector<double> x(static_cast<std::size_t>(width));
            for (auto& v : x) v = s.uniform(-1.5, 1.5);
            std::vector<double> g(static_cast<std::size_t>(specs.back().output_dim));
            for (auto& v : g) v = s.uniform(-2, 2);
            CHECK(gradient_check(p, x, g) <= 1e-4);
        }
    }
}

TEST_CASE("flatten(unflatten(v)) is bit-exact") {
    rng::Stream s(909);
    for (int trial = 0; trial < 10; ++trial) {
        std::vector<nn::LayerSpec> specs;
        int in = 1 + static_cast<int>(s.next_below(7));
        const int layers = 1 + static_cast<int>(s.next_below(3));
        for (int k = 0; k < layers; ++k) {
            const int out = 1 + static_cast<int>(s.next_below(7));
            specs.push_back({in, out, k + 1 == layers ? nn::Activation::Identity : nn::Activation::Tanh});
            in = out;
        }
        auto p = nn::mlp_init(specs, 1000 + trial);
        for (auto& v : p.values) v = s.uniform(-3, 3);

        const auto structured = nn::unflatten(p);
        const auto q = nn::flatten(structured, p.shape_meta);
        REQUIRE(q.values.size() == p.values.size());
        CHECK(q.values == p.values); // exact, not approximate
        CHECK(q.shape_meta == p.shape_meta);
        CHECK(q.offsets == p.offsets);
    }
}

TEST_CASE("param vector offsets are strictly increasing and contiguous") {
    nn::ParamVector p({{2, 3, nn::Activation::Tanh}, {3, 4, nn::Activation::Tanh}, {4, 1, nn::Activation::Identity}});
    REQUIRE(p.offsets.size() == 3);
    CHECK(p.offsets[0] == 0);
    for (std::size_t k = 1; k < p.offsets.size(); ++k) {
        CHECK(p.offsets[k] > p.offsets[k - 1]);
        CHECK(p.offsets[k] == p.offsets[k - 1] + nn::layer_param_count(p.shape_meta[k - 1]));
    }
    CHECK(p.size() == p.offsets.back() + nn::layer_param_count(p.shape_meta.back()));
}

TEST_CASE("gaussian head basics") {
    SECTION("standard normal at the mode") {
        for (int d = 1; d <= 5; ++d) {
            nn::GaussianHead h{std::vector<double>(static_cast<std::size_t>(d), 0.0),
                               std::vector<double>(static_cast<std::size_t>(d), 0.0)};
            const double lp = nn::gaussian_log_prob(h, std::vector<double>(static_cast<std::size_t>(d), 0.0));
            CHECK(lp == Catch::Approx(-0.5 * d * std::log(2 * M_PI)).epsilon(1e-14));
        }
    }
    SECTION("translation invariance") {
        nn::GaussianHead h{{0.3, -0.7}, {-0.2, 0.4}};
        const std::vector<double> a{1.0, 2.0};
        const double lp0 = nn::gaussian_log_prob(h, a);
        nn::GaussianHead shifted = h;
        const double c = 3.25;
        for (auto& m : shifted.mean) m += c;
        const double lp1 = nn::gaussian_log_prob(shifted, std::vector<double>{a[0] + c, a[1] + c});
        CHECK(lp0 == Catch::Approx(lp1).epsilon(1e-14));
    }
    SECTION("sampled log_prob matches gaussian_log_prob to 1e-12") {
        rng::Stream s(424242);
        nn::GaussianHead h{{0.5, -1.0, 2.0}, {-0.5, 0.0, 0.7}};
        for (int i = 0; i < 200; ++i) {
            const auto smp = nn::gaussian_sample(h, s);
            CHECK(std::abs(smp.log_prob - nn::gaussian_log_prob(h, smp.action)) <= 1e-12);
        }
    }
    SECTION("closed-form density oracle") {
        rng::Stream s(5150);
        for (int trial = 0; trial < 50; ++trial) {
            const std::size_t d = 1 + s.next_below(6);
            nn::GaussianHead h;
            std::vector<double> a(d);
            for (std::size_t i = 0; i < d; ++i) {
                h.mean.push_back(s.uniform(-3, 3));
                h.log_std.push_back(s.uniform(-2, 1));
                a[i] = s.uniform(-4, 4);
            }
            // independent route: product of 1-d normal densities, then log
            double density = 1.0;
            for (std::size_t i = 0; i < d; ++i) {
                const double sd = std::exp(h.log_std[i]);
                const double z = (a[i] - h.mean[i]) / sd;
                density *= std::exp(-0.5 * z * z) / (sd * std::sqrt(2 * M_PI));
            }
            CHECK(nn::gaussian_log_prob(h, a) == Catch::Approx(std::log(density)).margin(1e-10));
        }
    }
    SECTION("make_head clamps log_std to the configured range") {
        const auto h = nn::make_head({0.0, 0.0}, std::vector<double>{-9.0, 9.0}, -5.0, 2.0);
        CHECK(h.log_std[0] == -5.0);
        CHECK(h.log_std[1] == 2.0);
    }
    SECTION("dimension mismatch throws") {
        nn::GaussianHead h{{0.0}, {0.0}};
        CHECK_THROWS_AS(nn::gaussian_log_prob(h, std::vector<double>{1.0, 2.0}), std::invalid_argument);
    }
}
