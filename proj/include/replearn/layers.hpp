#pragma once

// Layer zoo. Every layer implements a hand-derived forward and backward
// rule; parameters are always passed in explicitly so a frozen layer can be
// evaluated with parameters composed from its neighbours.
//
// Composite layers (ResidualConvBlock, TransformerBlock) act as one unit in
// a network's layer list. Their `freezable` parameter subset is what the
// composition mechanism replaces; anything outside that subset stays owned
// and trainable even when the layer is frozen (the transformer block keeps
// its MLP and layer norms training while only the attention tensors are
// composed).

#include <algorithm>
#include <cmath>
#include <memory>
#include <string>
#include <vector>

#include "replearn/tensor.hpp"

namespace replearn {

struct ParamSpec {
    std::string name;
    Shape shape;
    bool freezable = true;

    std::size_t count() const { return shape_numel(shape); }
};

template <typename T>
struct LayerIOT {
    TensorT<T> input;
    TensorT<T> output;
    std::vector<TensorT<T>> cache; // layer-specific intermediates for backward
};

template <typename T>
struct LayerGradsT {
    TensorT<T> input_grad;
    std::vector<TensorT<T>> param_grads; // aligned with param_specs()
};

template <typename T>
class LayerT {
public:
    virtual ~LayerT() = default;

    virtual std::string kind() const = 0;
    virtual std::vector<ParamSpec> param_specs() const { return {}; }
    virtual Shape output_shape(const Shape& input) const = 0;

    virtual LayerIOT<T> forward(const TensorT<T>& input,
                                const std::vector<TensorT<T>>& params) const = 0;
    virtual LayerGradsT<T> backward(const LayerIOT<T>& io,
                                    const std::vector<TensorT<T>>& params,
                                    const TensorT<T>& output_grad) const = 0;

    virtual void init_params(std::vector<TensorT<T>>& params, Rng& rng) const {
        (void)params;
        (void)rng;
    }

    std::size_t param_count() const {
        std::size_t n = 0;
        for (const auto& s : param_specs()) n += s.count();
        return n;
    }

    std::size_t freezable_count() const {
        std::size_t n = 0;
        for (const auto& s : param_specs())
            if (s.freezable) n += s.count();
        return n;
    }

    std::vector<std::size_t> freezable_slots() const {
        std::vector<std::size_t> idx;
        auto specs = param_specs();
        for (std::size_t i = 0; i < specs.size(); ++i)
            if (specs[i].freezable) idx.push_back(i);
        return idx;
    }

    std::vector<Shape> freezable_shapes() const {
        std::vector<Shape> shapes;
        for (const auto& s : param_specs())
            if (s.freezable) shapes.push_back(s.shape);
        return shapes;
    }

protected:
    void check_params(const std::vector<TensorT<T>>& params, const char* who) const {
        auto specs = param_specs();
        if (params.size() != specs.size())
            throw ShapeError(std::string(who) + ": expected " + std::to_string(specs.size()) +
                             " parameter tensors, got " + std::to_string(params.size()));
        for (std::size_t i = 0; i < specs.size(); ++i) {
            if (params[i].empty() || params[i].shape() != specs[i].shape)
                throw ShapeError(std::string(who) + ": parameter '" + specs[i].name +
                                 "' has shape " +
                                 (params[i].empty() ? std::string("<empty>")
                                                    : shape_str(params[i].shape())) +
                                 ", expected " + shape_str(specs[i].shape));
        }
    }

    void check_output_grad(const LayerIOT<T>& io, const TensorT<T>& g, const char* who) const {
        if (io.output.empty())
            throw ShapeError(std::string(who) + ": backward called before forward");
        if (!g.same_shape(io.output))
            throw ShapeError(std::string(who) + ": output gradient shape " +
                             shape_str(g.shape()) + " does not match output " +
                             shape_str(io.output.shape()));
    }
};

namespace detail {

// Flatten [B, ...] to a [rows, features] view for feature-wise layers.
// Rank-2 keeps its shape, rank-3 is treated token-wise, rank-4 is flattened
// to one feature vector per sample.
inline std::size_t trailing_features(const Shape& s) {
    if (s.size() == 2 || s.size() == 3) return s.back();
    if (s.size() == 4) return s[1] * s[2] * s[3];
    throw ShapeError("expected rank 2-4 input, got " + shape_str(s));
}

template <typename T>
TensorT<T> as_rows(const TensorT<T>& t) {
    std::size_t f = trailing_features(t.shape());
    return t.reshaped(Shape{t.size() / f, f});
}

template <typename T>
void softmax_rows_inplace(TensorT<T>& m) {
    const std::size_t rows = m.dim(0), cols = m.dim(1);
    for (std::size_t r = 0; r < rows; ++r) {
        T* p = m.data() + r * cols;
        T mx = p[0];
        for (std::size_t c = 1; c < cols; ++c) mx = std::max(mx, p[c]);
        T denom = T(0);
        for (std::size_t c = 0; c < cols; ++c) {
            p[c] = std::exp(p[c] - mx);
            denom += p[c];
        }
        for (std::size_t c = 0; c < cols; ++c) p[c] /= denom;
    }
}

// d(softmax)/dS given P = softmax(S) and dL/dP, row-wise.
template <typename T>
TensorT<T> softmax_rows_backward(const TensorT<T>& probs, const TensorT<T>& dprobs) {
    const std::size_t rows = probs.dim(0), cols = probs.dim(1);
    TensorT<T> ds(probs.shape());
    for (std::size_t r = 0; r < rows; ++r) {
        const T* p = probs.data() + r * cols;
        const T* dp = dprobs.data() + r * cols;
        T inner = T(0);
        for (std::size_t c = 0; c < cols; ++c) inner += p[c] * dp[c];
        T* out = ds.data() + r * cols;
        for (std::size_t c = 0; c < cols; ++c) out[c] = p[c] * (dp[c] - inner);
    }
    return ds;
}

} // namespace detail

// ---------------------------------------------------------------------------
// Dense: y = x W^T + b, optionally fused with ReLU. Accepts [B,in],
// [B,T,in] (applied per token) and [B,C,H,W] (flattened per sample).
// ---------------------------------------------------------------------------
template <typename T>
class DenseT final : public LayerT<T> {
public:
    DenseT(std::size_t in, std::size_t out, bool relu = false, bool bias = true)
        : in_(in), out_(out), relu_(relu), bias_(bias) {}

    std::string kind() const override { return relu_ ? "dense+relu" : "dense"; }

    std::vector<ParamSpec> param_specs() const override {
        std::vector<ParamSpec> specs{{"weight", Shape{out_, in_}, true}};
        if (bias_) specs.push_back({"bias", Shape{out_}, true});
        return specs;
    }

    Shape output_shape(const Shape& input) const override {
        if (detail::trailing_features(input) != in_)
            throw ShapeError("dense: input " + shape_str(input) + " does not provide " +
                             std::to_string(in_) + " features");
        if (input.size() == 3) return Shape{input[0], input[1], out_};
        return Shape{input[0], out_};
    }

    LayerIOT<T> forward(const TensorT<T>& input,
                        const std::vector<TensorT<T>>& params) const override {
        this->check_params(params, "dense");
        Shape out_shape = output_shape(input.shape());
        TensorT<T> x = detail::as_rows(input);
        TensorT<T> z = matmul(x, transpose(params[0]));
        if (bias_) {
            const TensorT<T>& b = params[1];
            for (std::size_t r = 0; r < z.dim(0); ++r)
                for (std::size_t c = 0; c < out_; ++c) z.at(r, c) += b[c];
        }
        LayerIOT<T> io;
        io.input = input;
        if (relu_) {
            io.cache.push_back(z); // pre-activation
            for (std::size_t i = 0; i < z.size(); ++i)
                if (z[i] < T(0)) z[i] = T(0);
        }
        io.output = z.reshaped(out_shape);
        return io;
    }

    LayerGradsT<T> backward(const LayerIOT<T>& io, const std::vector<TensorT<T>>& params,
                            const TensorT<T>& output_grad) const override {
        this->check_params(params, "dense");
        this->check_output_grad(io, output_grad, "dense");
        TensorT<T> dz = detail::as_rows(output_grad);
        if (relu_) {
            if (io.cache.empty()) throw ShapeError("dense: missing cached pre-activation");
            const TensorT<T>& z = io.cache[0];
            TensorT<T> masked(dz.shape());
            for (std::size_t i = 0; i < dz.size(); ++i)
                masked[i] = z[i] > T(0) ? dz[i] : T(0);
            dz = std::move(masked);
        }
        TensorT<T> x = detail::as_rows(io.input);
        LayerGradsT<T> g;
        g.param_grads.push_back(matmul(transpose(dz), x)); // dW = dz^T x
        if (bias_) {
            TensorT<T> db(Shape{out_});
            for (std::size_t r = 0; r < dz.dim(0); ++r)
                for (std::size_t c = 0; c < out_; ++c) db[c] += dz.at(r, c);
            g.param_grads.push_back(std::move(db));
        }
        g.input_grad = matmul(dz, params[0]).reshaped(io.input.shape());
        return g;
    }

    void init_params(std::vector<TensorT<T>>& params, Rng& rng) const override {
        params.clear();
        double bound = std::sqrt(6.0 / double(in_ + out_));
        TensorT<T> w(Shape{out_, in_});
        for (std::size_t i = 0; i < w.size(); ++i)
            w[i] = static_cast<T>(rng.uniform(-bound, bound));
        params.push_back(std::move(w));
        // Slightly positive bias under a fused ReLU: with low-dimensional
        // non-negative inputs a zero bias leaves a large fraction of units
        // dead from the very first step.
        if (bias_) params.push_back(TensorT<T>::full(Shape{out_}, relu_ ? T(0.1) : T(0)));
    }

    std::size_t in() const { return in_; }
    std::size_t out() const { return out_; }

private:
    std::size_t in_, out_;
    bool relu_, bias_;
};

// ---------------------------------------------------------------------------
// ReLU (standalone, parameter-free)
// ---------------------------------------------------------------------------
template <typename T>
class ReluT final : public LayerT<T> {
public:
    std::string kind() const override { return "relu"; }
    Shape output_shape(const Shape& input) const override { return input; }

    LayerIOT<T> forward(const TensorT<T>& input,
                        const std::vector<TensorT<T>>& params) const override {
        this->check_params(params, "relu");
        LayerIOT<T> io;
        io.input = input;
        io.output = input;
        for (std::size_t i = 0; i < io.output.size(); ++i)
            if (io.output[i] < T(0)) io.output[i] = T(0);
        return io;
    }

    LayerGradsT<T> backward(const LayerIOT<T>& io, const std::vector<TensorT<T>>& params,
                            const TensorT<T>& output_grad) const override {
        this->check_params(params, "relu");
        this->check_output_grad(io, output_grad, "relu");
        LayerGradsT<T> g;
        g.input_grad = TensorT<T>(io.input.shape());
        for (std::size_t i = 0; i < output_grad.size(); ++i)
            g.input_grad[i] = io.input[i] > T(0) ? output_grad[i] : T(0);
        return g;
    }
};

// ---------------------------------------------------------------------------
// LayerNorm over the last axis: y = (x - mean) / sqrt(var + eps) * gain + bias
// ---------------------------------------------------------------------------
template <typename T>
class LayerNormT final : public LayerT<T> {
public:
    explicit LayerNormT(std::size_t dim, double eps = 1e-5) : dim_(dim), eps_(eps) {}

    std::string kind() const override { return "layernorm"; }

    std::vector<ParamSpec> param_specs() const override {
        return {{"gain", Shape{dim_}, true}, {"bias", Shape{dim_}, true}};
    }

    Shape output_shape(const Shape& input) const override {
        if (input.back() != dim_)
            throw ShapeError("layernorm: last axis of " + shape_str(input) + " is not " +
                             std::to_string(dim_));
        return input;
    }

    LayerIOT<T> forward(const TensorT<T>& input,
                        const std::vector<TensorT<T>>& params) const override {
        this->check_params(params, "layernorm");
        output_shape(input.shape());
        const TensorT<T>& gain = params[0];
        const TensorT<T>& bias = params[1];
        const std::size_t rows = input.size() / dim_;

        TensorT<T> xhat(Shape{rows, dim_});
        TensorT<T> inv_std(Shape{rows});
        TensorT<T> out(input.shape());
        for (std::size_t r = 0; r < rows; ++r) {
            const T* x = input.data() + r * dim_;
            T mean = T(0);
            for (std::size_t c = 0; c < dim_; ++c) mean += x[c];
            mean /= T(dim_);
            T var = T(0);
            for (std::size_t c = 0; c < dim_; ++c) var += (x[c] - mean) * (x[c] - mean);
            var /= T(dim_);
            T istd = T(1) / std::sqrt(var + T(eps_));
            inv_std[r] = istd;
            for (std::size_t c = 0; c < dim_; ++c) {
                T h = (x[c] - mean) * istd;
                xhat.at(r, c) = h;
                out[r * dim_ + c] = h * gain[c] + bias[c];
            }
        }
        LayerIOT<T> io;
        io.input = input;
        io.output = std::move(out);
        io.cache = {std::move(xhat), std::move(inv_std)};
        return io;
    }

    LayerGradsT<T> backward(const LayerIOT<T>& io, const std::vector<TensorT<T>>& params,
                            const TensorT<T>& output_grad) const override {
        this->check_params(params, "layernorm");
        this->check_output_grad(io, output_grad, "layernorm");
        if (io.cache.size() != 2) throw ShapeError("layernorm: missing cached intermediates");
        const TensorT<T>& gain = params[0];
        const TensorT<T>& xhat = io.cache[0];
        const TensorT<T>& inv_std = io.cache[1];
        const std::size_t rows = io.input.size() / dim_;

        LayerGradsT<T> g;
        g.input_grad = TensorT<T>(io.input.shape());
        TensorT<T> dgain(Shape{dim_});
        TensorT<T> dbias(Shape{dim_});
        for (std::size_t r = 0; r < rows; ++r) {
            const T* dy = output_grad.data() + r * dim_;
            const T* xh = xhat.data() + r * dim_;
            T mean_dxhat = T(0);
            T mean_dxhat_xhat = T(0);
            for (std::size_t c = 0; c < dim_; ++c) {
                T dxh = dy[c] * gain[c];
                mean_dxhat += dxh;
                mean_dxhat_xhat += dxh * xh[c];
                dgain[c] += dy[c] * xh[c];
                dbias[c] += dy[c];
            }
            mean_dxhat /= T(dim_);
            mean_dxhat_xhat /= T(dim_);
            T* dx = g.input_grad.data() + r * dim_;
            for (std::size_t c = 0; c < dim_; ++c) {
                T dxh = dy[c] * gain[c];
                dx[c] = inv_std[r] * (dxh - mean_dxhat - xh[c] * mean_dxhat_xhat);
            }
        }
        g.param_grads = {std::move(dgain), std::move(dbias)};
        return g;
    }

    void init_params(std::vector<TensorT<T>>& params, Rng& rng) const override {
        (void)rng;
        params = {TensorT<T>::full(Shape{dim_}, T(1)), TensorT<T>::zeros(Shape{dim_})};
    }

private:
    std::size_t dim_;
    double eps_;
};

// ---------------------------------------------------------------------------
// Conv2D, 3x3 kernel, stride 1, zero padding 1 (spatial shape preserved so
// that stacked conv layers stay shape-compatible for composition).
// Direct loops, fixed order. Optional fused ReLU.
// ---------------------------------------------------------------------------
template <typename T>
class Conv2dT final : public LayerT<T> {
public:
    Conv2dT(std::size_t in_ch, std::size_t out_ch, bool relu = false)
        : in_ch_(in_ch), out_ch_(out_ch), relu_(relu) {}

    std::string kind() const override { return relu_ ? "conv3x3+relu" : "conv3x3"; }

    std::vector<ParamSpec> param_specs() const override {
        return {{"weight", Shape{out_ch_, in_ch_, 3, 3}, true}, {"bias", Shape{out_ch_}, true}};
    }

    Shape output_shape(const Shape& input) const override {
        if (input.size() != 4 || input[1] != in_ch_)
            throw ShapeError("conv3x3: expected [BxCxHxW] with C=" + std::to_string(in_ch_) +
                             ", got " + shape_str(input));
        return Shape{input[0], out_ch_, input[2], input[3]};
    }

    LayerIOT<T> forward(const TensorT<T>& input,
                        const std::vector<TensorT<T>>& params) const override {
        this->check_params(params, "conv3x3");
        Shape os = output_shape(input.shape());
        const std::size_t B = os[0], H = os[2], W = os[3];
        const TensorT<T>& weight = params[0];
        const TensorT<T>& bias = params[1];
        TensorT<T> z(os);
        const T* id = input.data();
        T* zd = z.data();
        for (std::size_t b = 0; b < B; ++b) {
            for (std::size_t o = 0; o < out_ch_; ++o) {
                for (std::size_t y = 0; y < H; ++y) {
                    for (std::size_t x = 0; x < W; ++x) {
                        T acc = bias[o];
                        for (std::size_t c = 0; c < in_ch_; ++c) {
                            for (std::size_t ky = 0; ky < 3; ++ky) {
                                std::ptrdiff_t iy = std::ptrdiff_t(y + ky) - 1;
                                if (iy < 0 || iy >= std::ptrdiff_t(H)) continue;
                                for (std::size_t kx = 0; kx < 3; ++kx) {
                                    std::ptrdiff_t ix = std::ptrdiff_t(x + kx) - 1;
                                    if (ix < 0 || ix >= std::ptrdiff_t(W)) continue;
                                    acc += weight[((o * in_ch_ + c) * 3 + ky) * 3 + kx] *
                                           id[((b * in_ch_ + c) * H + iy) * W + ix];
                                }
                            }
                        }
                        zd[((b * out_ch_ + o) * H + y) * W + x] = acc;
                    }
                }
            }
        }
        LayerIOT<T> io;
        io.input = input;
        if (relu_) {
            io.cache.push_back(z);
            for (std::size_t i = 0; i < z.size(); ++i)
                if (z[i] < T(0)) z[i] = T(0);
        }
        io.output = std::move(z);
        return io;
    }

    LayerGradsT<T> backward(const LayerIOT<T>& io, const std::vector<TensorT<T>>& params,
                            const TensorT<T>& output_grad) const override {
        this->check_params(params, "conv3x3");
        this->check_output_grad(io, output_grad, "conv3x3");
        const Shape& os = io.output.shape();
        const std::size_t B = os[0], H = os[2], W = os[3];
        const TensorT<T>& weight = params[0];

        TensorT<T> dz = output_grad;
        if (relu_) {
            if (io.cache.empty()) throw ShapeError("conv3x3: missing cached pre-activation");
            const TensorT<T>& z = io.cache[0];
            for (std::size_t i = 0; i < dz.size(); ++i)
                if (z[i] <= T(0)) dz[i] = T(0);
        }

        LayerGradsT<T> g;
        g.input_grad = TensorT<T>(io.input.shape());
        TensorT<T> dw(weight.shape());
        TensorT<T> db(Shape{out_ch_});
        const T* id = io.input.data();
        const T* dzd = dz.data();
        T* dxd = g.input_grad.data();
        for (std::size_t b = 0; b < B; ++b) {
            for (std::size_t o = 0; o < out_ch_; ++o) {
                for (std::size_t y = 0; y < H; ++y) {
                    for (std::size_t x = 0; x < W; ++x) {
                        T gz = dzd[((b * out_ch_ + o) * H + y) * W + x];
                        if (gz == T(0)) continue;
                        db[o] += gz;
                        for (std::size_t c = 0; c < in_ch_; ++c) {
                            for (std::size_t ky = 0; ky < 3; ++ky) {
                                std::ptrdiff_t iy = std::ptrdiff_t(y + ky) - 1;
                                if (iy < 0 || iy >= std::ptrdiff_t(H)) continue;
                                for (std::size_t kx = 0; kx < 3; ++kx) {
                                    std::ptrdiff_t ix = std::ptrdiff_t(x + kx) - 1;
                                    if (ix < 0 || ix >= std::ptrdiff_t(W)) continue;
                                    std::size_t widx = ((o * in_ch_ + c) * 3 + ky) * 3 + kx;
                                    std::size_t iidx = ((b * in_ch_ + c) * H + iy) * W + ix;
                                    dw[widx] += gz * id[iidx];
                                    dxd[iidx] += gz * weight[widx];
                                }
                            }
                        }
                    }
                }
            }
        }
        g.param_grads = {std::move(dw), std::move(db)};
        return g;
    }

    void init_params(std::vector<TensorT<T>>& params, Rng& rng) const override {
        params.clear();
        double std_dev = std::sqrt(2.0 / double(in_ch_ * 9));
        TensorT<T> w(Shape{out_ch_, in_ch_, 3, 3});
        for (std::size_t i = 0; i < w.size(); ++i)
            w[i] = static_cast<T>(rng.normal() * std_dev);
        params.push_back(std::move(w));
        params.push_back(TensorT<T>::zeros(Shape{out_ch_}));
    }

private:
    std::size_t in_ch_, out_ch_;
    bool relu_;
};

// ---------------------------------------------------------------------------
// Single-head scaled dot-product attention over [B, T, d]:
//   Q = X Wq, K = X Wk, V = X Wv
//   Y = softmax(Q K^T / sqrt(d)) V Wo
// No mask, no dropout. All four projection matrices are freezable.
// ---------------------------------------------------------------------------
template <typename T>
class SingleHeadAttentionT final : public LayerT<T> {
public:
    explicit SingleHeadAttentionT(std::size_t dim) : dim_(dim) {}

    std::string kind() const override { return "attention"; }

    std::vector<ParamSpec> param_specs() const override {
        return {{"wq", Shape{dim_, dim_}, true},
                {"wk", Shape{dim_, dim_}, true},
                {"wv", Shape{dim_, dim_}, true},
                {"wo", Shape{dim_, dim_}, true}};
    }

    Shape output_shape(const Shape& input) const override {
        if (input.size() != 3 || input[2] != dim_)
            throw ShapeError("attention: expected [BxTx" + std::to_string(dim_) + "], got " +
                             shape_str(input));
        return input;
    }

    LayerIOT<T> forward(const TensorT<T>& input,
                        const std::vector<TensorT<T>>& params) const override {
        this->check_params(params, "attention");
        output_shape(input.shape());
        const std::size_t B = input.dim(0), S = input.dim(1);
        const T alpha = T(1) / std::sqrt(T(dim_));

        TensorT<T> q(input.shape()), k(input.shape()), v(input.shape());
        TensorT<T> probs(Shape{B, S, S});
        TensorT<T> ctx(input.shape());
        TensorT<T> out(input.shape());
        for (std::size_t b = 0; b < B; ++b) {
            TensorT<T> x = input.slice(b);
            TensorT<T> qb = matmul(x, params[0]);
            TensorT<T> kb = matmul(x, params[1]);
            TensorT<T> vb = matmul(x, params[2]);
            TensorT<T> scores = scale(alpha, matmul(qb, transpose(kb)));
            detail::softmax_rows_inplace(scores);
            TensorT<T> cb = matmul(scores, vb);
            out.set_slice(b, matmul(cb, params[3]));
            q.set_slice(b, qb);
            k.set_slice(b, kb);
            v.set_slice(b, vb);
            probs.set_slice(b, scores);
            ctx.set_slice(b, cb);
        }
        LayerIOT<T> io;
        io.input = input;
        io.output = std::move(out);
        io.cache = {std::move(q), std::move(k), std::move(v), std::move(probs), std::move(ctx)};
        return io;
    }

    LayerGradsT<T> backward(const LayerIOT<T>& io, const std::vector<TensorT<T>>& params,
                            const TensorT<T>& output_grad) const override {
        this->check_params(params, "attention");
        this->check_output_grad(io, output_grad, "attention");
        if (io.cache.size() != 5) throw ShapeError("attention: missing cached intermediates");
        const std::size_t B = io.input.dim(0);
        const T alpha = T(1) / std::sqrt(T(dim_));
        const TensorT<T>& q = io.cache[0];
        const TensorT<T>& k = io.cache[1];
        const TensorT<T>& v = io.cache[2];
        const TensorT<T>& probs = io.cache[3];
        const TensorT<T>& ctx = io.cache[4];

        LayerGradsT<T> g;
        g.input_grad = TensorT<T>(io.input.shape());
        TensorT<T> dwq(Shape{dim_, dim_}), dwk(Shape{dim_, dim_});
        TensorT<T> dwv(Shape{dim_, dim_}), dwo(Shape{dim_, dim_});
        for (std::size_t b = 0; b < B; ++b) {
            TensorT<T> x = io.input.slice(b);
            TensorT<T> dy = output_grad.slice(b);
            TensorT<T> cb = ctx.slice(b);
            TensorT<T> pb = probs.slice(b);
            TensorT<T> qb = q.slice(b), kb = k.slice(b), vb = v.slice(b);

            dwo = add(dwo, matmul(transpose(cb), dy));
            TensorT<T> dctx = matmul(dy, transpose(params[3]));
            TensorT<T> dv = matmul(transpose(pb), dctx);
            TensorT<T> dprobs = matmul(dctx, transpose(vb));
            TensorT<T> dscores = scale(alpha, detail::softmax_rows_backward(pb, dprobs));
            TensorT<T> dq = matmul(dscores, kb);
            TensorT<T> dk = matmul(transpose(dscores), qb);

            dwq = add(dwq, matmul(transpose(x), dq));
            dwk = add(dwk, matmul(transpose(x), dk));
            dwv = add(dwv, matmul(transpose(x), dv));
            TensorT<T> dx = matmul(dq, transpose(params[0]));
            dx = add(dx, matmul(dk, transpose(params[1])));
            dx = add(dx, matmul(dv, transpose(params[2])));
            g.input_grad.set_slice(b, dx);
        }
        g.param_grads = {std::move(dwq), std::move(dwk), std::move(dwv), std::move(dwo)};
        return g;
    }

    void init_params(std::vector<TensorT<T>>& params, Rng& rng) const override {
        params.clear();
        double bound = std::sqrt(3.0 / double(dim_));
        for (int i = 0; i < 4; ++i) {
            TensorT<T> w(Shape{dim_, dim_});
            for (std::size_t j = 0; j < w.size(); ++j)
                w[j] = static_cast<T>(rng.uniform(-bound, bound));
            params.push_back(std::move(w));
        }
    }

private:
    std::size_t dim_;
};

// ---------------------------------------------------------------------------
// Residual conv block: y = conv2(relu(conv1(x))) + x. Counts as one layer;
// freezing it composes both convolutions' weights and biases jointly.
// ---------------------------------------------------------------------------
template <typename T>
class ResidualConvBlockT final : public LayerT<T> {
public:
    explicit ResidualConvBlockT(std::size_t channels)
        : channels_(channels), conv1_(channels, channels, true), conv2_(channels, channels, false) {}

    std::string kind() const override { return "resblock"; }

    std::vector<ParamSpec> param_specs() const override {
        return {{"conv1_weight", Shape{channels_, channels_, 3, 3}, true},
                {"conv1_bias", Shape{channels_}, true},
                {"conv2_weight", Shape{channels_, channels_, 3, 3}, true},
                {"conv2_bias", Shape{channels_}, true}};
    }

    Shape output_shape(const Shape& input) const override {
        if (input.size() != 4 || input[1] != channels_)
            throw ShapeError("resblock: expected [Bx" + std::to_string(channels_) +
                             "xHxW], got " + shape_str(input));
        return input;
    }

    LayerIOT<T> forward(const TensorT<T>& input,
                        const std::vector<TensorT<T>>& params) const override {
        this->check_params(params, "resblock");
        output_shape(input.shape());
        LayerIOT<T> a = conv1_.forward(input, {params[0], params[1]});
        LayerIOT<T> z = conv2_.forward(a.output, {params[2], params[3]});
        LayerIOT<T> io;
        io.input = input;
        io.output = add(z.output, input);
        io.cache = {a.cache[0], a.output}; // conv1 pre-activation, conv1 output
        return io;
    }

    LayerGradsT<T> backward(const LayerIOT<T>& io, const std::vector<TensorT<T>>& params,
                            const TensorT<T>& output_grad) const override {
        this->check_params(params, "resblock");
        this->check_output_grad(io, output_grad, "resblock");
        if (io.cache.size() != 2) throw ShapeError("resblock: missing cached intermediates");
        LayerIOT<T> io2;
        io2.input = io.cache[1];
        io2.output = sub(io.output, io.input);
        LayerGradsT<T> g2 = conv2_.backward(io2, {params[2], params[3]}, output_grad);

        LayerIOT<T> io1;
        io1.input = io.input;
        io1.output = io.cache[1];
        io1.cache = {io.cache[0]};
        LayerGradsT<T> g1 = conv1_.backward(io1, {params[0], params[1]}, g2.input_grad);

        LayerGradsT<T> g;
        g.input_grad = add(g1.input_grad, output_grad); // skip path
        g.param_grads = {std::move(g1.param_grads[0]), std::move(g1.param_grads[1]),
                         std::move(g2.param_grads[0]), std::move(g2.param_grads[1])};
        return g;
    }

    void init_params(std::vector<TensorT<T>>& params, Rng& rng) const override {
        params.clear();
        std::vector<TensorT<T>> p1, p2;
        conv1_.init_params(p1, rng);
        conv2_.init_params(p2, rng);
        params = {std::move(p1[0]), std::move(p1[1]), std::move(p2[0]), std::move(p2[1])};
    }

private:
    std::size_t channels_;
    Conv2dT<T> conv1_, conv2_;
};

// ---------------------------------------------------------------------------
// Transformer block (pre-norm):
//   a = x + Attn(LN1(x)),  y = a + W2 relu(W1 LN2(a) + b1) + b2
// Only the four attention projections are freezable; the layer norms and the
// MLP keep ordinary gradient descent even when the block is frozen.
// ---------------------------------------------------------------------------
template <typename T>
class TransformerBlockT final : public LayerT<T> {
public:
    explicit TransformerBlockT(std::size_t dim)
        : dim_(dim),
          hidden_(2 * dim),
          ln1_(dim),
          attn_(dim),
          ln2_(dim),
          fc1_(dim, 2 * dim, true),
          fc2_(2 * dim, dim, false) {}

    std::string kind() const override { return "vitblock"; }

    std::vector<ParamSpec> param_specs() const override {
        return {{"ln1_gain", Shape{dim_}, false},
                {"ln1_bias", Shape{dim_}, false},
                {"wq", Shape{dim_, dim_}, true},
                {"wk", Shape{dim_, dim_}, true},
                {"wv", Shape{dim_, dim_}, true},
                {"wo", Shape{dim_, dim_}, true},
                {"ln2_gain", Shape{dim_}, false},
                {"ln2_bias", Shape{dim_}, false},
                {"mlp_w1", Shape{hidden_, dim_}, false},
                {"mlp_b1", Shape{hidden_}, false},
                {"mlp_w2", Shape{dim_, hidden_}, false},
                {"mlp_b2", Shape{dim_}, false}};
    }

    Shape output_shape(const Shape& input) const override {
        if (input.size() != 3 || input[2] != dim_)
            throw ShapeError("vitblock: expected [BxTx" + std::to_string(dim_) + "], got " +
                             shape_str(input));
        return input;
    }

    LayerIOT<T> forward(const TensorT<T>& input,
                        const std::vector<TensorT<T>>& params) const override {
        this->check_params(params, "vitblock");
        output_shape(input.shape());
        LayerIOT<T> u = ln1_.forward(input, {params[0], params[1]});
        LayerIOT<T> s = attn_.forward(u.output, {params[2], params[3], params[4], params[5]});
        TensorT<T> a = add(s.output, input);
        LayerIOT<T> n = ln2_.forward(a, {params[6], params[7]});
        LayerIOT<T> h = fc1_.forward(n.output, {params[8], params[9]});
        LayerIOT<T> m = fc2_.forward(h.output, {params[10], params[11]});

        LayerIOT<T> io;
        io.input = input;
        io.output = add(m.output, a);
        io.cache = {u.output,   u.cache[0], u.cache[1],              // ln1
                    s.output,   s.cache[0], s.cache[1], s.cache[2],  // attention
                    s.cache[3], s.cache[4],
                    a,          n.output,   n.cache[0], n.cache[1],  // ln2
                    h.output,   h.cache[0], m.output};               // mlp
        return io;
    }

    LayerGradsT<T> backward(const LayerIOT<T>& io, const std::vector<TensorT<T>>& params,
                            const TensorT<T>& output_grad) const override {
        this->check_params(params, "vitblock");
        this->check_output_grad(io, output_grad, "vitblock");
        if (io.cache.size() != 16) throw ShapeError("vitblock: missing cached intermediates");
        const TensorT<T>& u_out = io.cache[0];
        const TensorT<T>& a = io.cache[9];
        const TensorT<T>& n_out = io.cache[10];
        const TensorT<T>& h_out = io.cache[13];
        const TensorT<T>& m_out = io.cache[15];

        LayerIOT<T> mio{h_out, m_out, {}};
        LayerGradsT<T> gm = fc2_.backward(mio, {params[10], params[11]}, output_grad);

        LayerIOT<T> hio{n_out, h_out, {io.cache[14]}};
        LayerGradsT<T> gh = fc1_.backward(hio, {params[8], params[9]}, gm.input_grad);

        LayerIOT<T> nio{a, n_out, {io.cache[11], io.cache[12]}};
        LayerGradsT<T> gn = ln2_.backward(nio, {params[6], params[7]}, gh.input_grad);

        TensorT<T> da = add(gn.input_grad, output_grad); // MLP skip

        LayerIOT<T> sio{u_out, io.cache[3],
                        {io.cache[4], io.cache[5], io.cache[6], io.cache[7], io.cache[8]}};
        LayerGradsT<T> gs =
            attn_.backward(sio, {params[2], params[3], params[4], params[5]}, da);

        LayerIOT<T> uio{io.input, u_out, {io.cache[1], io.cache[2]}};
        LayerGradsT<T> gu = ln1_.backward(uio, {params[0], params[1]}, gs.input_grad);

        LayerGradsT<T> g;
        g.input_grad = add(gu.input_grad, da); // attention skip
        g.param_grads = {std::move(gu.param_grads[0]), std::move(gu.param_grads[1]),
                         std::move(gs.param_grads[0]), std::move(gs.param_grads[1]),
                         std::move(gs.param_grads[2]), std::move(gs.param_grads[3]),
                         std::move(gn.param_grads[0]), std::move(gn.param_grads[1]),
                         std::move(gh.param_grads[0]), std::move(gh.param_grads[1]),
                         std::move(gm.param_grads[0]), std::move(gm.param_grads[1])};
        return g;
    }

    void init_params(std::vector<TensorT<T>>& params, Rng& rng) const override {
        params.clear();
        std::vector<TensorT<T>> pl1, pa, pl2, pf1, pf2;
        ln1_.init_params(pl1, rng);
        attn_.init_params(pa, rng);
        ln2_.init_params(pl2, rng);
        fc1_.init_params(pf1, rng);
        fc2_.init_params(pf2, rng);
        for (auto& t : pl1) params.push_back(std::move(t));
        for (auto& t : pa) params.push_back(std::move(t));
        for (auto& t : pl2) params.push_back(std::move(t));
        for (auto& t : pf1) params.push_back(std::move(t));
        for (auto& t : pf2) params.push_back(std::move(t));
    }

private:
    std::size_t dim_, hidden_;
    LayerNormT<T> ln1_;
    SingleHeadAttentionT<T> attn_;
    LayerNormT<T> ln2_;
    DenseT<T> fc1_, fc2_;
};

// ---------------------------------------------------------------------------
// Parameter-free reshaping / pooling layers
// ---------------------------------------------------------------------------

// [B,C,H,W] -> [B,T,C*p*p] with T = (H/p)*(W/p), row-major patch order.
template <typename T>
class PatchifyT final : public LayerT<T> {
public:
    explicit PatchifyT(std::size_t patch) : patch_(patch) {}

    std::string kind() const override { return "patchify"; }

    Shape output_shape(const Shape& input) const override {
        if (input.size() != 4)
            throw ShapeError("patchify: expected [BxCxHxW], got " + shape_str(input));
        if (input[2] % patch_ != 0 || input[3] % patch_ != 0)
            throw ShapeError("patchify: spatial dims of " + shape_str(input) +
                             " not divisible by patch " + std::to_string(patch_));
        std::size_t tokens = (input[2] / patch_) * (input[3] / patch_);
        return Shape{input[0], tokens, input[1] * patch_ * patch_};
    }

    LayerIOT<T> forward(const TensorT<T>& input,
                        const std::vector<TensorT<T>>& params) const override {
        this->check_params(params, "patchify");
        Shape os = output_shape(input.shape());
        const std::size_t B = input.dim(0), C = input.dim(1), H = input.dim(2), W = input.dim(3);
        const std::size_t gh = H / patch_, gw = W / patch_;
        TensorT<T> out(os);
        for (std::size_t b = 0; b < B; ++b)
            for (std::size_t ty = 0; ty < gh; ++ty)
                for (std::size_t tx = 0; tx < gw; ++tx) {
                    std::size_t t = ty * gw + tx;
                    std::size_t f = 0;
                    for (std::size_t c = 0; c < C; ++c)
                        for (std::size_t py = 0; py < patch_; ++py)
                            for (std::size_t px = 0; px < patch_; ++px, ++f)
                                out[(b * os[1] + t) * os[2] + f] =
                                    input[((b * C + c) * H + ty * patch_ + py) * W + tx * patch_ +
                                          px];
                }
        LayerIOT<T> io;
        io.input = input;
        io.output = std::move(out);
        return io;
    }

    LayerGradsT<T> backward(const LayerIOT<T>& io, const std::vector<TensorT<T>>& params,
                            const TensorT<T>& output_grad) const override {
        this->check_params(params, "patchify");
        this->check_output_grad(io, output_grad, "patchify");
        const Shape& is = io.input.shape();
        const std::size_t B = is[0], C = is[1], H = is[2], W = is[3];
        const std::size_t gh = H / patch_, gw = W / patch_;
        const Shape& os = io.output.shape();
        LayerGradsT<T> g;
        g.input_grad = TensorT<T>(is);
        for (std::size_t b = 0; b < B; ++b)
            for (std::size_t ty = 0; ty < gh; ++ty)
                for (std::size_t tx = 0; tx < gw; ++tx) {
                    std::size_t t = ty * gw + tx;
                    std::size_t f = 0;
                    for (std::size_t c = 0; c < C; ++c)
                        for (std::size_t py = 0; py < patch_; ++py)
                            for (std::size_t px = 0; px < patch_; ++px, ++f)
                                g.input_grad[((b * C + c) * H + ty * patch_ + py) * W +
                                             tx * patch_ + px] =
                                    output_grad[(b * os[1] + t) * os[2] + f];
                }
        return g;
    }

private:
    std::size_t patch_;
};

// [B,C,H,W] -> [B,C] mean over the spatial grid.
template <typename T>
class GlobalAvgPoolT final : public LayerT<T> {
public:
    std::string kind() const override { return "gap"; }

    Shape output_shape(const Shape& input) const override {
        if (input.size() != 4)
            throw ShapeError("gap: expected [BxCxHxW], got " + shape_str(input));
        return Shape{input[0], input[1]};
    }

    LayerIOT<T> forward(const TensorT<T>& input,
                        const std::vector<TensorT<T>>& params) const override {
        this->check_params(params, "gap");
        Shape os = output_shape(input.shape());
        const std::size_t B = os[0], C = os[1];
        const std::size_t hw = input.dim(2) * input.dim(3);
        TensorT<T> out(os);
        for (std::size_t b = 0; b < B; ++b)
            for (std::size_t c = 0; c < C; ++c) {
                T acc = T(0);
                for (std::size_t i = 0; i < hw; ++i) acc += input[(b * C + c) * hw + i];
                out[b * C + c] = acc / T(hw);
            }
        LayerIOT<T> io;
        io.input = input;
        io.output = std::move(out);
        return io;
    }

    LayerGradsT<T> backward(const LayerIOT<T>& io, const std::vector<TensorT<T>>& params,
                            const TensorT<T>& output_grad) const override {
        this->check_params(params, "gap");
        this->check_output_grad(io, output_grad, "gap");
        const std::size_t B = io.output.dim(0), C = io.output.dim(1);
        const std::size_t hw = io.input.dim(2) * io.input.dim(3);
        LayerGradsT<T> g;
        g.input_grad = TensorT<T>(io.input.shape());
        for (std::size_t b = 0; b < B; ++b)
            for (std::size_t c = 0; c < C; ++c) {
                T v = output_grad[b * C + c] / T(hw);
                for (std::size_t i = 0; i < hw; ++i) g.input_grad[(b * C + c) * hw + i] = v;
            }
        return g;
    }
};

// [B,T,d] -> [B,d] mean over tokens.
template <typename T>
class TokenMeanPoolT final : public LayerT<T> {
public:
    std::string kind() const override { return "tokenpool"; }

    Shape output_shape(const Shape& input) const override {
        if (input.size() != 3)
            throw ShapeError("tokenpool: expected [BxTxd], got " + shape_str(input));
        return Shape{input[0], input[2]};
    }

    LayerIOT<T> forward(const TensorT<T>& input,
                        const std::vector<TensorT<T>>& params) const override {
        this->check_params(params, "tokenpool");
        Shape os = output_shape(input.shape());
        const std::size_t B = os[0], S = input.dim(1), D = os[1];
        TensorT<T> out(os);
        for (std::size_t b = 0; b < B; ++b)
            for (std::size_t d = 0; d < D; ++d) {
                T acc = T(0);
                for (std::size_t t = 0; t < S; ++t) acc += input[(b * S + t) * D + d];
                out[b * D + d] = acc / T(S);
            }
        LayerIOT<T> io;
        io.input = input;
        io.output = std::move(out);
        return io;
    }

    LayerGradsT<T> backward(const LayerIOT<T>& io, const std::vector<TensorT<T>>& params,
                            const TensorT<T>& output_grad) const override {
        this->check_params(params, "tokenpool");
        this->check_output_grad(io, output_grad, "tokenpool");
        const std::size_t B = io.output.dim(0), D = io.output.dim(1);
        const std::size_t S = io.input.dim(1);
        LayerGradsT<T> g;
        g.input_grad = TensorT<T>(io.input.shape());
        for (std::size_t b = 0; b < B; ++b)
            for (std::size_t d = 0; d < D; ++d) {
                T v = output_grad[b * D + d] / T(S);
                for (std::size_t t = 0; t < S; ++t) g.input_grad[(b * S + t) * D + d] = v;
            }
        return g;
    }
};

// ---------------------------------------------------------------------------
// Softmax cross-entropy over [batch x classes] logits. Mean over the batch,
// log-sum-exp stabilised; the returned gradient is (softmax - onehot)/batch.
// ---------------------------------------------------------------------------
template <typename T>
std::pair<T, TensorT<T>> loss_softmax_xent(const TensorT<T>& logits,
                                           const std::vector<int>& labels) {
    if (logits.rank() != 2)
        throw ShapeError("loss: logits must be [batch x classes], got " +
                         shape_str(logits.shape()));
    const std::size_t batch = logits.dim(0), classes = logits.dim(1);
    if (labels.size() != batch)
        throw ShapeError("loss: " + std::to_string(labels.size()) + " labels for batch " +
                         std::to_string(batch));
    for (int y : labels)
        if (y < 0 || std::size_t(y) >= classes)
            throw std::out_of_range("loss: label " + std::to_string(y) + " outside [0, " +
                                    std::to_string(classes) + ")");

    TensorT<T> grad(logits.shape());
    T loss = T(0);
    for (std::size_t b = 0; b < batch; ++b) {
        const T* row = logits.data() + b * classes;
        T mx = row[0];
        for (std::size_t c = 1; c < classes; ++c) mx = std::max(mx, row[c]);
        T denom = T(0);
        for (std::size_t c = 0; c < classes; ++c) denom += std::exp(row[c] - mx);
        T log_denom = std::log(denom);
        loss += (mx + log_denom) - row[labels[b]];
        T* grow = grad.data() + b * classes;
        for (std::size_t c = 0; c < classes; ++c) {
            T p = std::exp(row[c] - mx) / denom;
            grow[c] = (p - (std::size_t(labels[b]) == c ? T(1) : T(0))) / T(batch);
        }
    }
    return {loss / T(batch), std::move(grad)};
}

} // namespace replearn
