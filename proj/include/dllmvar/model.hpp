#pragma once

#include <cmath>
#include <random>
#include <span>

#include <Eigen/Dense>

#include "dllmvar/common.hpp"
#include "dllmvar/masking.hpp"

namespace dllmvar {

template <class S>
using Mat = Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <class S>
using Vec = Eigen::Matrix<S, Eigen::Dynamic, 1>;
template <class S>
using MatMap = Eigen::Map<Mat<S>>;
template <class S>
using CMatMap = Eigen::Map<const Mat<S>>;

struct ModelConfig {
    int vocab_size = 0;
    int dim = 0;
    int n_layers = 0;
    int n_heads = 0;
    int max_positions = 0;
    std::uint64_t seed = 0;

    int head_dim() const { return dim / n_heads; }
    int ffn_dim() const { return 4 * dim; }

    void validate() const {
        if (vocab_size <= kNumSpecial) throw std::invalid_argument("config: vocab_size must exceed reserved ids");
        if (dim <= 0 || n_heads <= 0 || n_layers <= 0 || max_positions <= 0) throw std::invalid_argument("config: non-positive dimension");
        if (dim % n_heads != 0) throw std::invalid_argument("config: dim not divisible by n_heads");
        if (dim % 2 != 0) throw std::invalid_argument("config: dim must be even (sinusoidal positions)");
    }

    bool operator==(const ModelConfig&) const = default;
};

// Flat parameter buffer layout. Order (all row-major, weights are out x in):
//   embedding V*d | per layer: g1 d | wq d*d | wk d*d | wv d*d | wo d*d |
//   g2 d | w1 f*d | w2 d*f | final gain d | head V*d
struct ParamLayout {
    int V, d, f, nl;

    explicit ParamLayout(const ModelConfig& c) : V(c.vocab_size), d(c.dim), f(c.ffn_dim()), nl(c.n_layers) {}

    std::size_t per_layer() const {
        return static_cast<std::size_t>(d) + 4u * d * d + d + 2u * static_cast<std::size_t>(f) * d;
    }
    std::size_t emb() const { return 0; }
    std::size_t layer(int l) const { return static_cast<std::size_t>(V) * d + static_cast<std::size_t>(l) * per_layer(); }
    std::size_t g1(int l) const { return layer(l); }
    std::size_t wq(int l) const { return g1(l) + d; }
    std::size_t wk(int l) const { return wq(l) + static_cast<std::size_t>(d) * d; }
    std::size_t wv(int l) const { return wk(l) + static_cast<std::size_t>(d) * d; }
    std::size_t wo(int l) const { return wv(l) + static_cast<std::size_t>(d) * d; }
    std::size_t g2(int l) const { return wo(l) + static_cast<std::size_t>(d) * d; }
    std::size_t w1(int l) const { return g2(l) + d; }
    std::size_t w2(int l) const { return w1(l) + static_cast<std::size_t>(f) * d; }
    std::size_t gf() const { return layer(nl); }
    std::size_t head() const { return gf() + d; }
    std::size_t total() const { return head() + static_cast<std::size_t>(V) * d; }
};

template <class Scalar>
struct Parameters {
    ModelConfig config;
    std::vector<Scalar> data;

    ParamLayout layout() const { return ParamLayout(config); }
};

// Per-tensor views over a flat buffer (shared by parameters and gradients).
template <class Scalar, class Buf>
struct TensorViews {
    ParamLayout lay;
    Buf* base;

    using M = std::conditional_t<std::is_const_v<Buf>, CMatMap<Scalar>, MatMap<Scalar>>;

    M emb() const { return M(base + lay.emb(), lay.V, lay.d); }
    M g1(int l) const { return M(base + lay.g1(l), 1, lay.d); }
    M wq(int l) const { return M(base + lay.wq(l), lay.d, lay.d); }
    M wk(int l) const { return M(base + lay.wk(l), lay.d, lay.d); }
    M wv(int l) const { return M(base + lay.wv(l), lay.d, lay.d); }
    M wo(int l) const { return M(base + lay.wo(l), lay.d, lay.d); }
    M g2(int l) const { return M(base + lay.g2(l), 1, lay.d); }
    M w1(int l) const { return M(base + lay.w1(l), lay.f, lay.d); }
    M w2(int l) const { return M(base + lay.w2(l), lay.d, lay.f); }
    M gf() const { return M(base + lay.gf(), 1, lay.d); }
    M head() const { return M(base + lay.head(), lay.V, lay.d); }
};

template <class Scalar>
TensorViews<Scalar, const Scalar> views(const Parameters<Scalar>& p) {
    return {p.layout(), p.data.data()};
}
template <class Scalar>
TensorViews<Scalar, Scalar> views(const ModelConfig& c, std::vector<Scalar>& buf) {
    return {ParamLayout(c), buf.data()};
}

// Scaled-Gaussian init: weights N(0, 1/sqrt(fan_in)); residual-output
// projections (wo, w2) further scaled by 1/sqrt(2*n_layers); embeddings and
// head N(0, 1) and N(0, 1/sqrt(dim)); norm gains 1. Deterministic in seed.
template <class Scalar = float>
Parameters<Scalar> init_params(const ModelConfig& config) {
    config.validate();
    Parameters<Scalar> p;
    p.config = config;
    p.data.assign(ParamLayout(config).total(), Scalar(0));
    std::mt19937_64 rng(config.seed);
    std::normal_distribution<double> gauss(0.0, 1.0);
    auto fill = [&](auto view, double std) {
        for (Eigen::Index r = 0; r < view.rows(); ++r)
            for (Eigen::Index c = 0; c < view.cols(); ++c) view(r, c) = static_cast<Scalar>(gauss(rng) * std);
    };
    auto v = views(config, p.data);
    const double d = config.dim;
    const double res_scale = 1.0 / std::sqrt(2.0 * config.n_layers);
    fill(v.emb(), 1.0);
    for (int l = 0; l < config.n_layers; ++l) {
        v.g1(l).setOnes();
        fill(v.wq(l), 1.0 / std::sqrt(d));
        fill(v.wk(l), 1.0 / std::sqrt(d));
        fill(v.wv(l), 1.0 / std::sqrt(d));
        fill(v.wo(l), res_scale / std::sqrt(d));
        v.g2(l).setOnes();
        fill(v.w1(l), 1.0 / std::sqrt(d));
        fill(v.w2(l), res_scale / std::sqrt(static_cast<double>(config.ffn_dim())));
    }
    v.gf().setOnes();
    fill(v.head(), 1.0 / std::sqrt(d));
    return p;
}

// Append-only per-layer K/V records for the prompt and completed blocks.
template <class Scalar>
struct PrefixCache {
    std::vector<Mat<Scalar>> k, v;  // per layer, len x dim
    std::size_t len = 0;

    static PrefixCache empty(const ModelConfig& config) {
        PrefixCache c;
        c.k.resize(static_cast<std::size_t>(config.n_layers));
        c.v.resize(static_cast<std::size_t>(config.n_layers));
        for (int l = 0; l < config.n_layers; ++l) {
            c.k[static_cast<std::size_t>(l)].resize(0, config.dim);
            c.v[static_cast<std::size_t>(l)].resize(0, config.dim);
        }
        return c;
    }
};

// Candidate K/V rows for an active block, produced by one forward pass.
template <class Scalar>
struct BlockKV {
    std::vector<Mat<Scalar>> k, v;  // per layer, T x dim
};

template <class Scalar>
void extend_cache(PrefixCache<Scalar>& cache, const BlockKV<Scalar>& kv) {
    const std::size_t nl = cache.k.size();
    if (kv.k.size() != nl) throw std::invalid_argument("extend_cache: layer count mismatch");
    const Eigen::Index add = kv.k[0].rows();
    for (std::size_t l = 0; l < nl; ++l) {
        Eigen::Index old = cache.k[l].rows();
        cache.k[l].conservativeResize(old + add, Eigen::NoChange);
        cache.v[l].conservativeResize(old + add, Eigen::NoChange);
        cache.k[l].bottomRows(add) = kv.k[l];
        cache.v[l].bottomRows(add) = kv.v[l];
    }
    cache.len += static_cast<std::size_t>(add);
}

namespace detail {

inline constexpr double kRmsEps = 1e-6;

// y = x / rms(x) * g rowwise; r receives per-row inverse rms.
template <class Scalar, class G>
Mat<Scalar> rmsnorm(const Mat<Scalar>& x, const G& g, Vec<Scalar>& r) {
    const Eigen::Index d = x.cols();
    r.resize(x.rows());
    Mat<Scalar> y(x.rows(), d);
    for (Eigen::Index i = 0; i < x.rows(); ++i) {
        Scalar ms = x.row(i).squaredNorm() / static_cast<Scalar>(d);
        r(i) = Scalar(1) / std::sqrt(ms + static_cast<Scalar>(kRmsEps));
        y.row(i) = x.row(i).cwiseProduct(g.row(0)) * r(i);
    }
    return y;
}

template <class Scalar, class G, class GOut>
Mat<Scalar> rmsnorm_backward(const Mat<Scalar>& x, const G& g, const Vec<Scalar>& r, const Mat<Scalar>& dy, GOut dg) {
    const Eigen::Index d = x.cols();
    Mat<Scalar> dx(x.rows(), d);
    for (Eigen::Index i = 0; i < x.rows(); ++i) {
        auto u = dy.row(i).cwiseProduct(g.row(0));  // g ∘ dy
        Scalar dot = u.cwiseProduct(x.row(i)).sum();
        dx.row(i) = u * r(i) - x.row(i) * (r(i) * r(i) * r(i) * dot / static_cast<Scalar>(d));
        dg.row(0) += dy.row(i).cwiseProduct(x.row(i)) * r(i);
    }
    return dx;
}

template <class Scalar>
Scalar silu(Scalar x) {
    Scalar s = Scalar(1) / (Scalar(1) + std::exp(-x));
    return x * s;
}

template <class Scalar>
Scalar silu_grad(Scalar x) {
    Scalar s = Scalar(1) / (Scalar(1) + std::exp(-x));
    return s * (Scalar(1) + x * (Scalar(1) - s));
}

template <class Scalar>
void add_positional(Mat<Scalar>& x, std::size_t first_pos) {
    const Eigen::Index d = x.cols();
    for (Eigen::Index i = 0; i < x.rows(); ++i) {
        const double p = static_cast<double>(first_pos + static_cast<std::size_t>(i));
        for (Eigen::Index j = 0; j < d / 2; ++j) {
            const double angle = p * std::exp(-std::log(10000.0) * (2.0 * j / static_cast<double>(d)));
            x(i, 2 * j) += static_cast<Scalar>(std::sin(angle));
            x(i, 2 * j + 1) += static_cast<Scalar>(std::cos(angle));
        }
    }
}

}  // namespace detail

// Activation stash for reverse mode; only full-sequence forwards (empty
// prefix) are traced.
template <class Scalar>
struct ForwardTrace {
    TokenSeq tokens;
    Mat<Scalar> x0;
    struct Layer {
        Mat<Scalar> x_in, a, q, k, v, o, x_mid, b, h_pre, h;
        std::vector<Mat<Scalar>> attn;  // per head, T x T
        Vec<Scalar> r1, r2;
    };
    std::vector<Layer> layers;
    Mat<Scalar> x_final, n;
    Vec<Scalar> rf;
};

// One forward pass. Active positions occupy [prefix.len, prefix.len + T) and
// attend to the cached prefix plus themselves, with no attention mask.
// Cached entries are read as-is; they are never refreshed against the active
// block. With an empty prefix this is the full bidirectional forward.
template <class Scalar>
Mat<Scalar> forward(const Parameters<Scalar>& params, const PrefixCache<Scalar>& prefix,
                    std::span<const Token> active, BlockKV<Scalar>* kv_out = nullptr,
                    ForwardTrace<Scalar>* trace = nullptr) {
    const ModelConfig& cfg = params.config;
    const Eigen::Index T = static_cast<Eigen::Index>(active.size());
    const Eigen::Index P0 = static_cast<Eigen::Index>(prefix.len);
    if (T == 0) throw std::invalid_argument("forward: empty active sequence");
    if (P0 + T > cfg.max_positions) throw std::invalid_argument("forward: sequence exceeds max_positions");
    if (trace && P0 != 0) throw std::invalid_argument("forward: trace requires empty prefix");
    for (Token t : active) {
        if (t < 0 || t >= cfg.vocab_size) throw std::invalid_argument("forward: token id out of range");
    }

    const auto v = views(params);
    const int d = cfg.dim;
    const int hd = cfg.head_dim();
    const Scalar scale = Scalar(1) / std::sqrt(static_cast<Scalar>(hd));

    Mat<Scalar> x(T, d);
    for (Eigen::Index i = 0; i < T; ++i) x.row(i) = v.emb().row(active[static_cast<std::size_t>(i)]);
    detail::add_positional(x, prefix.len);

    if (kv_out) {
        kv_out->k.assign(static_cast<std::size_t>(cfg.n_layers), Mat<Scalar>());
        kv_out->v.assign(static_cast<std::size_t>(cfg.n_layers), Mat<Scalar>());
    }
    if (trace) {
        trace->tokens.assign(active.begin(), active.end());
        trace->x0 = x;
        trace->layers.assign(static_cast<std::size_t>(cfg.n_layers), {});
    }

    for (int l = 0; l < cfg.n_layers; ++l) {
        auto* tl = trace ? &trace->layers[static_cast<std::size_t>(l)] : nullptr;
        if (tl) tl->x_in = x;

        Vec<Scalar> r1;
        Mat<Scalar> a = detail::rmsnorm(x, v.g1(l), r1);
        Mat<Scalar> q = a * v.wq(l).transpose();
        Mat<Scalar> k = a * v.wk(l).transpose();
        Mat<Scalar> val = a * v.wv(l).transpose();

        // K/V over prefix + active; prefix rows come from the frozen cache.
        Mat<Scalar> k_all(P0 + T, d), v_all(P0 + T, d);
        if (P0 > 0) {
            k_all.topRows(P0) = prefix.k[static_cast<std::size_t>(l)];
            v_all.topRows(P0) = prefix.v[static_cast<std::size_t>(l)];
        }
        k_all.bottomRows(T) = k;
        v_all.bottomRows(T) = val;

        Mat<Scalar> o(T, d);
        std::vector<Mat<Scalar>> attn_heads;
        for (int h = 0; h < cfg.n_heads; ++h) {
            auto qh = q.middleCols(h * hd, hd);
            auto kh = k_all.middleCols(h * hd, hd);
            auto vh = v_all.middleCols(h * hd, hd);
            Mat<Scalar> s = qh * kh.transpose() * scale;
            for (Eigen::Index i = 0; i < T; ++i) {
                Scalar m = s.row(i).maxCoeff();
                s.row(i) = (s.row(i).array() - m).exp();
                s.row(i) /= s.row(i).sum();
            }
            o.middleCols(h * hd, hd) = s * vh;
            if (tl) attn_heads.push_back(std::move(s));
        }
        Mat<Scalar> y = o * v.wo(l).transpose();

        if (kv_out) {
            kv_out->k[static_cast<std::size_t>(l)] = k;
            kv_out->v[static_cast<std::size_t>(l)] = val;
        }
        if (tl) {
            tl->a = a;
            tl->q = std::move(q);
            tl->k = k;
            tl->v = val;
            tl->attn = std::move(attn_heads);
            tl->o = o;
            tl->r1 = std::move(r1);
        }

        x += y;
        if (tl) tl->x_mid = x;

        Vec<Scalar> r2;
        Mat<Scalar> b = detail::rmsnorm(x, v.g2(l), r2);
        Mat<Scalar> h_pre = b * v.w1(l).transpose();
        Mat<Scalar> h = h_pre.unaryExpr([](Scalar e) { return detail::silu(e); });
        Mat<Scalar> f = h * v.w2(l).transpose();
        if (tl) {
            tl->b = std::move(b);
            tl->h_pre = std::move(h_pre);
            tl->h = h;
            tl->r2 = std::move(r2);
        }
        x += f;
    }

    Vec<Scalar> rf;
    Mat<Scalar> n = detail::rmsnorm(x, v.gf(), rf);
    Mat<Scalar> logits = n * v.head().transpose();
    if (trace) {
        trace->x_final = std::move(x);
        trace->n = std::move(n);
        trace->rf = std::move(rf);
    }
    return logits;
}

/// Full-sequence bidirectional forward (no cache).
template <class Scalar>
Mat<Scalar> forward_full(std::span<const Token> tokens, const Parameters<Scalar>& params,
                         ForwardTrace<Scalar>* trace = nullptr) {
    return forward(params, PrefixCache<Scalar>::empty(params.config), tokens, static_cast<BlockKV<Scalar>*>(nullptr),
                   trace);
}

/// Cached-prefix forward; returns logits plus candidate K/V for the block.
template <class Scalar>
std::pair<Mat<Scalar>, BlockKV<Scalar>> forward_cached(std::span<const Token> active, const PrefixCache<Scalar>& cache,
                                                       const Parameters<Scalar>& params) {
    BlockKV<Scalar> kv;
    Mat<Scalar> logits = forward(params, cache, active, &kv);
    return {std::move(logits), std::move(kv)};
}

// Reverse pass over a traced full forward. dlogits is T x V; gradients are
// accumulated into grad (flat, same layout as Parameters::data).
template <class Scalar>
void backward(const Parameters<Scalar>& params, const ForwardTrace<Scalar>& trace, const Mat<Scalar>& dlogits,
              std::vector<Scalar>& grad) {
    const ModelConfig& cfg = params.config;
    const ParamLayout lay(cfg);
    if (grad.size() != lay.total()) throw std::invalid_argument("backward: gradient buffer size mismatch");
    const auto v = views(params);
    TensorViews<Scalar, Scalar> g{lay, grad.data()};
    const int d = cfg.dim;
    const int hd = cfg.head_dim();
    const Scalar scale = Scalar(1) / std::sqrt(static_cast<Scalar>(hd));

    g.head() += dlogits.transpose() * trace.n;
    Mat<Scalar> dn = dlogits * v.head();
    Mat<Scalar> dx = detail::rmsnorm_backward(trace.x_final, v.gf(), trace.rf, dn, g.gf());

    for (int l = cfg.n_layers - 1; l >= 0; --l) {
        const auto& tl = trace.layers[static_cast<std::size_t>(l)];

        // FFN block: x_out = x_mid + silu(rms(x_mid) W1^T) W2^T
        const Mat<Scalar>& df = dx;
        g.w2(l) += df.transpose() * tl.h;
        Mat<Scalar> dh = df * v.w2(l);
        Mat<Scalar> dh_pre = dh.cwiseProduct(tl.h_pre.unaryExpr([](Scalar e) { return detail::silu_grad(e); }));
        g.w1(l) += dh_pre.transpose() * tl.b;
        Mat<Scalar> db = dh_pre * v.w1(l);
        Mat<Scalar> dx_mid = dx + detail::rmsnorm_backward(tl.x_mid, v.g2(l), tl.r2, db, g.g2(l));

        // Attention block: x_mid = x_in + softmax(QK^T) V Wo^T
        const Mat<Scalar>& dy = dx_mid;
        g.wo(l) += dy.transpose() * tl.o;
        Mat<Scalar> do_ = dy * v.wo(l);
        Mat<Scalar> dq = Mat<Scalar>::Zero(tl.q.rows(), d);
        Mat<Scalar> dk = Mat<Scalar>::Zero(tl.k.rows(), d);
        Mat<Scalar> dval = Mat<Scalar>::Zero(tl.v.rows(), d);
        for (int h = 0; h < cfg.n_heads; ++h) {
            const Mat<Scalar>& w = tl.attn[static_cast<std::size_t>(h)];
            auto doh = do_.middleCols(h * hd, hd);
            auto kh = tl.k.middleCols(h * hd, hd);
            auto vh = tl.v.middleCols(h * hd, hd);
            auto qh = tl.q.middleCols(h * hd, hd);
            Mat<Scalar> dw = doh * vh.transpose();
            dval.middleCols(h * hd, hd) += w.transpose() * doh;
            Mat<Scalar> e = w.cwiseProduct(dw);
            Vec<Scalar> rs = e.rowwise().sum();
            Mat<Scalar> ds = e - (w.array().colwise() * rs.array()).matrix();
            dq.middleCols(h * hd, hd) += ds * kh * scale;
            dk.middleCols(h * hd, hd) += ds.transpose() * qh * scale;
        }
        g.wq(l) += dq.transpose() * tl.a;
        g.wk(l) += dk.transpose() * tl.a;
        g.wv(l) += dval.transpose() * tl.a;
        Mat<Scalar> da = dq * v.wq(l) + dk * v.wk(l) + dval * v.wv(l);
        dx = dx_mid + detail::rmsnorm_backward(tl.x_in, v.g1(l), tl.r1, da, g.g1(l));
    }

    for (Eigen::Index i = 0; i < dx.rows(); ++i) {
        g.emb().row(trace.tokens[static_cast<std::size_t>(i)]) += dx.row(i);
    }
}

enum class LossWeighting { inverse_t, uniform };

template <class Scalar>
struct LossGrad {
    Scalar loss = 0;
    std::vector<Scalar> grads;
    std::int64_t masked_count = 0;
};

// Cross-entropy on masked positions only, under the standard masked-diffusion
// ELBO weighting. Per row: sum over masked positions divided by the row
// length, weighted 1/t (so the expected per-position weight is uniform in t,
// since the masked count concentrates at t*L); the batch loss is the row sum
// divided by the row count. Uniform weighting instead normalizes by the
// masked count with no 1/t factor. Rows with no masked positions contribute
// zero loss and zero gradient.
template <class Scalar>
LossGrad<Scalar> loss_and_gradients(const NoisedBatch& batch, const Parameters<Scalar>& params,
                                    LossWeighting weighting = LossWeighting::inverse_t) {
    LossGrad<Scalar> out;
    out.grads.assign(params.layout().total(), Scalar(0));
    if (batch.rows.empty()) return out;
    const Scalar inv_rows = Scalar(1) / static_cast<Scalar>(batch.rows.size());
    const int V = params.config.vocab_size;

    for (const NoisedRow& row : batch.rows) {
        std::vector<std::size_t> masked;
        for (std::size_t i = 0; i < row.mask.size(); ++i) {
            if (row.mask[i]) masked.push_back(i);
        }
        if (masked.empty()) continue;

        ForwardTrace<Scalar> trace;
        Mat<Scalar> logits = forward_full(std::span<const Token>(row.x_t), params, &trace);

        const Scalar coef =
            weighting == LossWeighting::inverse_t
                ? inv_rows / (static_cast<Scalar>(std::max(row.t, 1e-4)) * static_cast<Scalar>(row.x_t.size()))
                : inv_rows / static_cast<Scalar>(masked.size());

        Mat<Scalar> dlogits = Mat<Scalar>::Zero(logits.rows(), V);
        for (std::size_t i : masked) {
            auto row_logits = logits.row(static_cast<Eigen::Index>(i));
            Scalar m = row_logits.maxCoeff();
            Vec<Scalar> p = (row_logits.array() - m).exp();
            Scalar z = p.sum();
            p /= z;
            const Token target = row.x_0[i];
            out.loss += coef * (std::log(z) + m - row_logits(target));
            dlogits.row(static_cast<Eigen::Index>(i)) = coef * p.transpose();
            dlogits(static_cast<Eigen::Index>(i), target) -= coef;
        }
        out.masked_count += static_cast<std::int64_t>(masked.size());
        backward(params, trace, dlogits, out.grads);
    }
    return out;
}

}  // namespace dllmvar
