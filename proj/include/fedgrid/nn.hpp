#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "fedgrid/rng.hpp"

// Minimal dense-network substrate: MLP forward/backward with explicit
// gradients, flat parameter vectors with layer-shape metadata, and
// diagonal-Gaussian utilities. All math is in doubles.

namespace fedgrid::nn {

enum class Activation : std::uint8_t { Tanh = 0, Relu = 1, Identity = 2 };

struct LayerSpec {
    int input_dim = 0;
    int output_dim = 0;
    Activation activation = Activation::Tanh;

    bool operator==(const LayerSpec&) const = default;
};

inline std::size_t layer_param_count(const LayerSpec& s) {
    return static_cast<std::size_t>(s.input_dim) * static_cast<std::size_t>(s.output_dim) +
           static_cast<std::size_t>(s.output_dim);
}

inline void validate_specs(std::span<const LayerSpec> specs) {
    if (specs.empty()) throw std::invalid_argument("mlp: empty layer spec list");
    for (std::size_t k = 0; k < specs.size(); ++k) {
        if (specs[k].input_dim < 1 || specs[k].output_dim < 1)
            throw std::invalid_argument("mlp: layer " + std::to_string(k) + " has non-positive dims");
        if (k + 1 < specs.size() && specs[k].output_dim != specs[k + 1].input_dim)
            throw std::invalid_argument("mlp: dimension chain mismatch between layers " +
                                        std::to_string(k) + " and " + std::to_string(k + 1));
    }
}

inline std::size_t param_count(std::span<const LayerSpec> specs) {
    std::size_t n = 0;
    for (const auto& s : specs) n += layer_param_count(s);
    return n;
}

// Flat parameter vector plus the layer shapes it factors into. Layer k
// occupies [offsets[k], offsets[k] + in*out + out): weights row-major
// [out][in], then bias [out].
struct ParamVector {
    std::vector<double> values;
    std::vector<LayerSpec> shape_meta;
    std::vector<std::size_t> offsets; // strictly increasing, contiguous

    ParamVector() = default;

    explicit ParamVector(std::vector<LayerSpec> specs) : shape_meta(std::move(specs)) {
        validate_specs(shape_meta);
        offsets.reserve(shape_meta.size());
        std::size_t off = 0;
        for (const auto& s : shape_meta) {
            offsets.push_back(off);
            off += layer_param_count(s);
        }
        values.assign(off, 0.0);
    }

    std::size_t size() const { return values.size(); }
    std::size_t layer_count() const { return shape_meta.size(); }

    int input_dim() const { return shape_meta.front().input_dim; }
    int output_dim() const { return shape_meta.back().output_dim; }

    double* weights(std::size_t k) { return values.data() + offsets[k]; }
    const double* weights(std::size_t k) const { return values.data() + offsets[k]; }
    double* bias(std::size_t k) {
        return values.data() + offsets[k] +
               static_cast<std::size_t>(shape_meta[k].input_dim) * shape_meta[k].output_dim;
    }
    const double* bias(std::size_t k) const {
        return values.data() + offsets[k] +
               static_cast<std::size_t>(shape_meta[k].input_dim) * shape_meta[k].output_dim;
    }

    bool same_shape(const ParamVector& o) const { return shape_meta == o.shape_meta; }
};

// Structured (per-layer) view used by flatten/unflatten.
struct LayerParams {
    std::vector<std::vector<double>> weights; // [out][in]
    std::vector<double> bias;                 // [out]
};

inline std::vector<LayerParams> unflatten(const ParamVector& p) {
    std::vector<LayerParams> out(p.layer_count());
    for (std::size_t k = 0; k < p.layer_count(); ++k) {
        const auto& s = p.shape_meta[k];
        const double* w = p.weights(k);
        const double* b = p.bias(k);
        out[k].weights.assign(static_cast<std::size_t>(s.output_dim),
                              std::vector<double>(static_cast<std::size_t>(s.input_dim)));
        for (int r = 0; r < s.output_dim; ++r)
            for (int c = 0; c < s.input_dim; ++c)
                out[k].weights[r][c] = w[static_cast<std::size_t>(r) * s.input_dim + c];
        out[k].bias.assign(b, b + s.output_dim);
    }
    return out;
}

inline ParamVector flatten(const std::vector<LayerParams>& layers, std::vector<LayerSpec> specs) {
    if (layers.size() != specs.size())
        throw std::invalid_argument("flatten: layer count mismatch");
    ParamVector p(std::move(specs));
    for (std::size_t k = 0; k < p.layer_count(); ++k) {
        const auto& s = p.shape_meta[k];
        if (layers[k].weights.size() != static_cast<std::size_t>(s.output_dim) ||
            layers[k].bias.size() != static_cast<std::size_t>(s.output_dim))
            throw std::invalid_argument("flatten: layer " + std::to_string(k) + " shape mismatch");
        double* w = p.weights(k);
        double* b = p.bias(k);
        for (int r = 0; r < s.output_dim; ++r) {
            if (layers[k].weights[r].size() != static_cast<std::size_t>(s.input_dim))
                throw std::invalid_argument("flatten: layer " + std::to_string(k) + " row size mismatch");
            for (int c = 0; c < s.input_dim; ++c)
                w[static_cast<std::size_t>(r) * s.input_dim + c] = layers[k].weights[r][c];
        }
        std::copy(layers[k].bias.begin(), layers[k].bias.end(), b);
    }
    return p;
}

// Weights uniform in +-sqrt(6/(fan_in+fan_out)), biases zero. Deterministic
// per seed.
inline ParamVector mlp_init(std::vector<LayerSpec> specs, std::uint64_t seed) {
    ParamVector p(std::move(specs));
    rng::Stream stream(seed);
    for (std::size_t k = 0; k < p.layer_count(); ++k) {
        const auto& s = p.shape_meta[k];
        const double bound = std::sqrt(6.0 / (s.input_dim + s.output_dim));
        double* w = p.weights(k);
        const std::size_t n = static_cast<std::size_t>(s.input_dim) * s.output_dim;
        for (std::size_t i = 0; i < n; ++i) w[i] = stream.uniform(-bound, bound);
        // biases stay zero
    }
    return p;
}

inline double apply_activation(Activation a, double x) {
    switch (a) {
        case Activation::Tanh: return std::tanh(x);
        case Activation::Relu: return x > 0.0 ? x : 0.0;
        case Activation::Identity: return x;
    }
    return x;
}

// Derivative expressed through the post-activation value y = f(x).
inline double activation_grad(Activation a, double y) {
    switch (a) {
        case Activation::Tanh: return 1.0 - y * y;
        case Activation::Relu: return y > 0.0 ? 1.0 : 0.0;
        case Activation::Identity: return 1.0;
    }
    return 1.0;
}

// Optional per-hidden-layer multiplicative unit masks (inverted dropout).
// masks[k] applies to the post-activation output of layer k and must have
// that layer's output_dim; the final layer is never masked.
using UnitMasks = std::vector<std::vector<double>>;

namespace detail {

inline void check_input(const ParamVector& p, std::span<const double> x) {
    if (x.size() != static_cast<std::size_t>(p.input_dim()))
        throw std::invalid_argument("mlp: input length " + std::to_string(x.size()) +
                                    " != first layer input_dim " + std::to_string(p.input_dim()));
}

inline void check_masks(const ParamVector& p, const UnitMasks* masks) {
    if (!masks) return;
    if (masks->size() + 1 != p.layer_count())
        throw std::invalid_argument("mlp: expected one unit mask per hidden layer");
    for (std::size_t k = 0; k < masks->size(); ++k)
        if ((*masks)[k].size() != static_cast<std::size_t>(p.shape_meta[k].output_dim))
            throw std::invalid_argument("mlp: unit mask size mismatch at layer " + std::to_string(k));
}

// Runs the forward pass keeping every post-activation (index 0 is the input).
inline std::vector<std::vector<double>> forward_trace(const ParamVector& p, std::span<const double> x,
                                                      const UnitMasks* masks) {
    check_input(p, x);
    check_masks(p, masks);
    std::vector<std::vector<double>> acts(p.layer_count() + 1);
    acts[0].assign(x.begin(), x.end());
    for (std::size_t k = 0; k < p.layer_count(); ++k) {
        const auto& s = p.shape_meta[k];
        const double* w = p.weights(k);
        const double* b = p.bias(k);
        const auto& in = acts[k];
        auto& out = acts[k + 1];
        out.assign(static_cast<std::size_t>(s.output_dim), 0.0);
        for (int r = 0; r < s.output_dim; ++r) {
            double acc = b[r];
            const double* wr = w + static_cast<std::size_t>(r) * s.input_dim;
            for (int c = 0; c < s.input_dim; ++c) acc += wr[c] * in[static_cast<std::size_t>(c)];
            double y = apply_activation(s.activation, acc);
            if (masks && k + 1 < p.layer_count()) y *= (*masks)[k][static_cast<std::size_t>(r)];
            out[static_cast<std::size_t>(r)] = y;
        }
    }
    return acts;
}

} // namespace detail

inline std::vector<double> mlp_forward(const ParamVector& p, std::span<const double> x,
                                       const UnitMasks* masks = nullptr) {
    return detail::forward_trace(p, x, masks).back();
}

struct Gradients {
    std::vector<double> params; // same layout as ParamVector::values
    std::vector<double> input;  // d<output, g_out>/dx
};

// Exact reverse-mode gradients of <mlp_forward(p, x), g_out> with respect to
// p and x.
inline Gradients mlp_backward(const ParamVector& p, std::span<const double> x,
                              std::span<const double> g_out, const UnitMasks* masks = nullptr) {
    if (g_out.size() != static_cast<std::size_t>(p.output_dim()))
        throw std::invalid_argument("mlp_backward: g_out length mismatch");
    const auto acts = detail::forward_trace(p, x, masks);

    Gradients g;
    g.params.assign(p.size(), 0.0);
    std::vector<double> delta(g_out.begin(), g_out.end()); // gradient wrt post-activation
    for (std::size_t k = p.layer_count(); k-- > 0;) {
        const auto& s = p.shape_meta[k];
        const auto& in = acts[k];
        const auto& out = acts[k + 1];
        const double* w = p.weights(k);
        double* gw = g.params.data() + p.offsets[k];
        double* gb = gw + static_cast<std::size_t>(s.input_dim) * s.output_dim;
        std::vector<double> next_delta(static_cast<std::size_t>(s.input_dim), 0.0);
        for (int r = 0; r < s.output_dim; ++r) {
            double d = delta[static_cast<std::size_t>(r)];
            double y = out[static_cast<std::size_t>(r)];
            if (masks && k + 1 < p.layer_count()) {
                const double m = (*masks)[k][static_cast<std::size_t>(r)];
                d *= m;
                // undo the mask so the activation derivative sees f(x)
                y = (m != 0.0) ? y / m : 0.0;
            }
            d *= activation_grad(s.activation, y);
            gb[r] += d;
            const double* wr = w + static_cast<std::size_t>(r) * s.input_dim;
            double* gwr = gw + static_cast<std::size_t>(r) * s.input_dim;
            for (int c = 0; c < s.input_dim; ++c) {
                gwr[c] += d * in[static_cast<std::size_t>(c)];
                next_delta[static_cast<std::size_t>(c)] += d * wr[c];
            }
        }
        delta = std::move(next_delta);
    }
    g.input = std::move(delta);
    return g;
}

// ---------------------------------------------------------------------------
// Diagonal Gaussian head for continuous-action policies.

inline constexpr double kLog2Pi = 1.8378770664093454835606594728112;

struct GaussianHead {
    std::vector<double> mean;
    std::vector<double> log_std; // already clamped to the configured range
};

inline GaussianHead make_head(std::vector<double> mean, std::span<const double> log_std_raw,
                              double lo, double hi) {
    if (mean.size() != log_std_raw.size())
        throw std::invalid_argument("make_head: mean/log_std dim mismatch");
    GaussianHead h;
    h.mean = std::move(mean);
    h.log_std.resize(log_std_raw.size());
    for (std::size_t i = 0; i < log_std_raw.size(); ++i)
        h.log_std[i] = std::clamp(log_std_raw[i], lo, hi);
    return h;
}

inline double gaussian_log_prob(const GaussianHead& h, std::span<const double> action) {
    if (action.size() != h.mean.size())
        throw std::invalid_argument("gaussian_log_prob: action dim mismatch");
    double lp = -0.5 * kLog2Pi * static_cast<double>(h.mean.size());
    for (std::size_t i = 0; i < h.mean.size(); ++i) {
        const double s = std::exp(h.log_std[i]);
        const double z = (action[i] - h.mean[i]) / s;
        lp -= 0.5 * z * z + h.log_std[i];
    }
    return lp;
}

struct GaussianSample {
    std::vector<double> action;
    double log_prob = 0.0;
};

inline GaussianSample gaussian_sample(const GaussianHead& h, rng::Stream& stream) {
    GaussianSample s;
    s.action.resize(h.mean.size());
    for (std::size_t i = 0; i < h.mean.size(); ++i)
        s.action[i] = h.mean[i] + std::exp(h.log_std[i]) * stream.normal();
    s.log_prob = gaussian_log_prob(h, s.action);
    return s;
}

inline double gaussian_entropy(const GaussianHead& h) {
    double e = 0.5 * (1.0 + kLog2Pi) * static_cast<double>(h.mean.size());
    for (double ls : h.log_std) e += ls;
    return e;
}

} // namespace fedgrid::nn
