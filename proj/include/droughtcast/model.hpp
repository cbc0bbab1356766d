#pragma once

// The forecasting network: a cross-scale embedding encoder with alternating
// short- and long-distance windowed attention, a pixel-shuffle decoder with
// skip connections, and a 1x1 output head. Maps today's assembled input state
// [in_channels, H, W] to tomorrow's prognostic + diagnostic stack
// [out_channels, H, W] for arbitrary H, W (padded internally to a multiple of
// the total downsampling factor and cropped back).

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <memory>
#include <random>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "droughtcast/catalog.hpp"
#include "droughtcast/rng.hpp"
#include "droughtcast/tensor.hpp"

namespace droughtcast {

enum class UpsampleMethod { pixel_shuffle, transpose, interpolate };

inline const char* upsample_name(UpsampleMethod m) {
    switch (m) {
        case UpsampleMethod::pixel_shuffle: return "pixel_shuffle";
        case UpsampleMethod::transpose: return "transpose";
        case UpsampleMethod::interpolate: return "interpolate";
    }
    return "?";
}

inline UpsampleMethod upsample_from_name(const std::string& s) {
    if (s == "pixel_shuffle") return UpsampleMethod::pixel_shuffle;
    if (s == "transpose") return UpsampleMethod::transpose;
    if (s == "interpolate") return UpsampleMethod::interpolate;
    throw std::invalid_argument("unknown upsample method '" + s + "'");
}

struct ModelConfig {
    int in_channels = 25;
    int out_channels = 23;
    std::array<int, 4> block_dims = {128, 256, 512, 1024};
    std::array<int, 4> heads_per_block = {4, 8, 16, 32};
    // Attention sublayer pairs (one short-distance + one long-distance unit)
    // per block. The default schedule keeps most depth in the third stage
    // with extra capacity in the processor block; at full scale it totals
    // ~180.6M parameters.
    std::array<int, 4> depths = {2, 2, 10, 3};
    int sda_group = 5;
    std::array<int, 4> lda_intervals = {2, 2, 2, 1};
    std::vector<int> embed_kernels_block1 = {4, 8, 16, 32};
    std::vector<int> embed_kernels_later = {2, 4};
    double dropout = 0.05;
    bool use_spectral_norm = true;
    UpsampleMethod upsample_method = UpsampleMethod::pixel_shuffle;

    static constexpr std::array<int, 4> kStrides = {4, 2, 2, 2};
    static constexpr int kTotalDownsample = 32;

    void validate() const {
        if (in_channels < 1 || out_channels < 1)
            throw std::invalid_argument("ModelConfig: channel counts must be positive");
        for (int i = 0; i < 4; ++i) {
            if (block_dims[static_cast<std::size_t>(i)] <= 0 || heads_per_block[static_cast<std::size_t>(i)] <= 0 ||
                depths[static_cast<std::size_t>(i)] <= 0)
                throw std::invalid_argument("ModelConfig: dims/heads/depths must be positive");
            if (block_dims[static_cast<std::size_t>(i)] % heads_per_block[static_cast<std::size_t>(i)] != 0)
                throw std::invalid_argument("ModelConfig: block dim not divisible by head count");
            if (i > 0 && block_dims[static_cast<std::size_t>(i)] < block_dims[static_cast<std::size_t>(i - 1)])
                throw std::invalid_argument("ModelConfig: block dims must be non-decreasing");
            if (lda_intervals[static_cast<std::size_t>(i)] < 1)
                throw std::invalid_argument("ModelConfig: lda interval must be >= 1");
        }
        if (sda_group < 1) throw std::invalid_argument("ModelConfig: sda_group must be >= 1");
        if (dropout < 0.0 || dropout >= 1.0) throw std::invalid_argument("ModelConfig: dropout must be in [0,1)");
        if (embed_kernels_block1.empty() || embed_kernels_later.empty())
            throw std::invalid_argument("ModelConfig: embedding kernel sets must be non-empty");
    }

    std::string to_text() const {
        std::ostringstream os;
        auto arr = [&](const char* k, const auto& a) {
            os << k << " ";
            for (std::size_t i = 0; i < a.size(); ++i) os << (i ? "," : "") << a[i];
            os << "\n";
        };
        os << "in_channels " << in_channels << "\n";
        os << "out_channels " << out_channels << "\n";
        arr("block_dims", block_dims);
        arr("heads_per_block", heads_per_block);
        arr("depths", depths);
        os << "sda_group " << sda_group << "\n";
        arr("lda_intervals", lda_intervals);
        arr("embed_kernels_block1", embed_kernels_block1);
        arr("embed_kernels_later", embed_kernels_later);
        char buf[64];
        std::snprintf(buf, sizeof(buf), "%.17g", dropout);
        os << "dropout " << buf << "\n";
        os << "use_spectral_norm " << (use_spectral_norm ? 1 : 0) << "\n";
        os << "upsample_method " << upsample_name(upsample_method) << "\n";
        return os.str();
    }

    std::uint64_t hash() const { return fnv1a64(to_text()); }
};

// ---------------------------------------------------------------------------
// Parameter store
// ---------------------------------------------------------------------------

enum class InitKind { fan_avg_normal, zeros, ones };

// Creates and registers parameters/buffers by hierarchical name. In counting
// mode nothing is allocated; only the running total advances.
struct ParamStore {
    std::map<std::string, Tensor> params;
    std::map<std::string, SpectralState> spectral;
    bool counting = false;
    std::int64_t param_count = 0;
    std::mt19937_64 init_rng{0};

    Tensor create(const std::string& name, Shape shape, InitKind kind, double fan_in = 0,
                  double fan_out = 0) {
        param_count += shape_numel(shape);
        if (counting) return Tensor();
        std::vector<double> v(static_cast<std::size_t>(shape_numel(shape)));
        switch (kind) {
            case InitKind::zeros:
                break;
            case InitKind::ones:
                for (auto& e : v) e = 1.0;
                break;
            case InitKind::fan_avg_normal: {
                std::normal_distribution<double> nd(0.0, std::sqrt(2.0 / (fan_in + fan_out)));
                for (auto& e : v) e = nd(init_rng);
                break;
            }
        }
        Tensor t = Tensor::from(std::move(shape), std::move(v), true);
        if (!params.emplace(name, t).second) throw std::invalid_argument("duplicate parameter '" + name + "'");
        return t;
    }

    SpectralState* create_spectral(const std::string& name, std::int64_t rows, std::int64_t cols) {
        if (counting) return nullptr;
        SpectralState st;
        st.init(rows, cols, init_rng);
        auto [it, ok] = spectral.emplace(name, std::move(st));
        if (!ok) throw std::invalid_argument("duplicate spectral state '" + name + "'");
        return &it->second;
    }

    void zero_grad() {
        for (auto& [n, t] : params) t.zero_grad();
    }
};

struct ForwardCtx {
    bool training = false;
    bool update_spectral = false;  // advance power-iteration state this pass
    std::mt19937_64* rng = nullptr;

    std::mt19937_64& rng_ref() {
        if (!rng) throw std::invalid_argument("forward: training mode requires an rng");
        return *rng;
    }
};

// ---------------------------------------------------------------------------
// Layers
// ---------------------------------------------------------------------------

namespace nn {

struct Linear {
    Tensor w, b;  // w[in,out]
    SpectralState* sn = nullptr;
    bool use_sn = false;

    Linear() = default;
    Linear(ParamStore& ps, const std::string& name, int in, int out, bool spectral) : use_sn(spectral) {
        w = ps.create(name + ".w", {in, out}, InitKind::fan_avg_normal, in, out);
        b = ps.create(name + ".b", {out}, InitKind::zeros);
        if (spectral) sn = ps.create_spectral(name + ".w", in, out);
    }

    Tensor effective_weight(ForwardCtx& ctx) const {
        if (!use_sn) return w;
        return spectral_normalize(w, *sn, ctx.update_spectral);
    }

    Tensor forward(const Tensor& x, ForwardCtx& ctx) const { return linear(x, effective_weight(ctx), b); }
};

struct Conv {
    Tensor w, b;  // w[out,in,k,k]
    int stride = 1;
    PadMode pad = PadMode::mirror;
    SpectralState* sn = nullptr;
    bool use_sn = false;

    Conv() = default;
    Conv(ParamStore& ps, const std::string& name, int in, int out, int k, int stride_, bool spectral,
         PadMode pad_ = PadMode::mirror)
        : stride(stride_), pad(pad_), use_sn(spectral) {
        w = ps.create(name + ".w", {out, in, k, k}, InitKind::fan_avg_normal,
                      static_cast<double>(in) * k * k, static_cast<double>(out) * k * k);
        b = ps.create(name + ".b", {out}, InitKind::zeros);
        if (spectral) sn = ps.create_spectral(name + ".w", out, static_cast<std::int64_t>(in) * k * k);
    }

    Tensor forward(const Tensor& x, ForwardCtx& ctx) const {
        Tensor weff = use_sn ? spectral_normalize(w, *sn, ctx.update_spectral) : w;
        return conv2d(x, weff, b, stride, pad);
    }
};

struct LayerNorm {
    Tensor gamma, beta;
    double eps = 1e-5;

    LayerNorm() = default;
    LayerNorm(ParamStore& ps, const std::string& name, int dim) {
        gamma = ps.create(name + ".gamma", {dim}, InitKind::ones);
        beta = ps.create(name + ".beta", {dim}, InitKind::zeros);
    }

    Tensor forward(const Tensor& x) const { return layer_norm(x, gamma, beta, eps); }
};

// Multi-head self-attention over token groups [G, T, D].
struct MultiheadAttention {
    Linear wq, wk, wv, wo;
    int heads = 1;
    int dim = 0;
    double drop = 0.0;

    MultiheadAttention() = default;
    MultiheadAttention(ParamStore& ps, const std::string& name, int dim_, int heads_, double dropout,
                       bool spectral)
        : heads(heads_), dim(dim_), drop(dropout) {
        if (dim_ % heads_ != 0) throw std::invalid_argument("attention: heads do not divide dim");
        wq = Linear(ps, name + ".q", dim_, dim_, spectral);
        wk = Linear(ps, name + ".k", dim_, dim_, spectral);
        wv = Linear(ps, name + ".v", dim_, dim_, spectral);
        wo = Linear(ps, name + ".o", dim_, dim_, spectral);
    }

    Tensor forward(const Tensor& tokens, ForwardCtx& ctx) const {
        const int g = tokens.dim(0), t = tokens.dim(1), d = tokens.dim(2);
        const int dh = d / heads;
        Tensor flat = reshape(tokens, {g * t, d});
        auto split_heads = [&](const Tensor& x) {
            Tensor r = reshape(x, {g, t, heads, dh});
            r = permute(r, {0, 2, 1, 3});  // [G, h, T, dh]
            return reshape(r, {g * heads, t, dh});
        };
        Tensor q = split_heads(wq.forward(flat, ctx));
        Tensor k = split_heads(wk.forward(flat, ctx));
        Tensor v = split_heads(wv.forward(flat, ctx));
        Tensor logits = scale(matmul_batched(q, k, /*transpose_b=*/true), 1.0 / std::sqrt(static_cast<double>(dh)));
        Tensor att = softmax_lastdim(logits);
        Tensor ctxv = matmul_batched(att, v);  // [G*h, T, dh]
        Tensor merged = reshape(permute(reshape(ctxv, {g, heads, t, dh}), {0, 2, 1, 3}), {g * t, d});
        Tensor out = wo.forward(merged, ctx);
        if (ctx.training && drop > 0.0) out = dropout(out, drop, true, ctx.rng_ref());
        return reshape(out, {g, t, d});
    }
};

struct FeedForward {
    Linear lin1, lin2;
    double drop = 0.0;

    FeedForward() = default;
    FeedForward(ParamStore& ps, const std::string& name, int dim, int expansion, double dropout,
                bool spectral)
        : drop(dropout) {
        lin1 = Linear(ps, name + ".fc1", dim, dim * expansion, spectral);
        lin2 = Linear(ps, name + ".fc2", dim * expansion, dim, spectral);
    }

    // x: [..., D] flattened to rows internally.
    Tensor forward(const Tensor& tokens, ForwardCtx& ctx) const {
        Shape s = tokens.shape();
        const int d = s.back();
        const int rows = static_cast<int>(tokens.numel()) / d;
        Tensor x = reshape(tokens, {rows, d});
        Tensor h = gelu(lin1.forward(x, ctx));
        if (ctx.training && drop > 0.0) h = dropout(h, drop, true, ctx.rng_ref());
        Tensor y = lin2.forward(h, ctx);
        if (ctx.training && drop > 0.0) y = dropout(y, drop, true, ctx.rng_ref());
        return reshape(y, s);
    }
};

}  // namespace nn

// ---------------------------------------------------------------------------
// Window partitioning
// ---------------------------------------------------------------------------

namespace detail_model {

// [D,H,W] -> [nWin, g*g, D], non-overlapping g x g windows in row-major order.
inline Tensor window_partition(const Tensor& x, int g) {
    const int d = x.dim(0), h = x.dim(1), w = x.dim(2);
    if (h % g != 0 || w % g != 0) throw std::invalid_argument("window_partition: extents not divisible");
    const int wy = h / g, wx = w / g, nwin = wy * wx, t = g * g;
    std::vector<std::size_t> idx(x.numel());
    std::size_t o = 0;
    for (int win = 0; win < nwin; ++win) {
        const int y0 = (win / wx) * g, x0 = (win % wx) * g;
        for (int tt = 0; tt < t; ++tt) {
            const int y = y0 + tt / g, xx = x0 + tt % g;
            for (int c = 0; c < d; ++c, ++o) idx[o] = static_cast<std::size_t>((c * h + y) * w + xx);
        }
    }
    return gather(x, std::move(idx), {nwin, t, d});
}

inline Tensor window_unpartition(const Tensor& tokens, int g, int d, int h, int w) {
    const int wx = w / g, t = g * g;
    std::vector<std::size_t> idx(tokens.numel());
    std::size_t o = 0;
    for (int c = 0; c < d; ++c)
        for (int y = 0; y < h; ++y)
            for (int xx = 0; xx < w; ++xx, ++o) {
                const int win = (y / g) * wx + xx / g;
                const int tt = (y % g) * g + xx % g;
                idx[o] = static_cast<std::size_t>((win * t + tt) * d + c);
            }
    return gather(tokens, std::move(idx), {d, h, w});
}

// [D,H,W] -> [I*I, (H/I)*(W/I), D]; sites sharing (row mod I, col mod I) form
// one dilated group.
inline Tensor dilated_partition(const Tensor& x, int interval) {
    const int d = x.dim(0), h = x.dim(1), w = x.dim(2), iv = interval;
    if (h % iv != 0 || w % iv != 0) throw std::invalid_argument("dilated_partition: extents not divisible");
    const int gh = h / iv, gw = w / iv, t = gh * gw;
    std::vector<std::size_t> idx(x.numel());
    std::size_t o = 0;
    for (int py = 0; py < iv; ++py)
        for (int px = 0; px < iv; ++px)
            for (int tt = 0; tt < t; ++tt) {
                const int y = (tt / gw) * iv + py, xx = (tt % gw) * iv + px;
                for (int c = 0; c < d; ++c, ++o) idx[o] = static_cast<std::size_t>((c * h + y) * w + xx);
            }
    return gather(x, std::move(idx), {iv * iv, t, d});
}

inline Tensor dilated_unpartition(const Tensor& tokens, int interval, int d, int h, int w) {
    const int iv = interval, gw = w / iv;
    const int t = (h / iv) * gw;
    std::vector<std::size_t> idx(tokens.numel());
    std::size_t o = 0;
    for (int c = 0; c < d; ++c)
        for (int y = 0; y < h; ++y)
            for (int xx = 0; xx < w; ++xx, ++o) {
                const int grp = (y % iv) * iv + xx % iv;
                const int tt = (y / iv) * gw + xx / iv;
                idx[o] = static_cast<std::size_t>((grp * t + tt) * d + c);
            }
    return gather(tokens, std::move(idx), {d, h, w});
}

// Pad the spatial extents up to multiples of m (mirror, trailing sides).
inline Tensor pad_to_multiple(const Tensor& x, int m, bool allow_rebounce = false) {
    const int h = x.dim(static_cast<int>(x.rank()) - 2), w = x.dim(static_cast<int>(x.rank()) - 1);
    const int ph = (m - h % m) % m, pw = (m - w % m) % m;
    if (ph == 0 && pw == 0) return x;
    return pad2d(x, 0, ph, 0, pw, PadMode::mirror, allow_rebounce);
}

}  // namespace detail_model

// ---------------------------------------------------------------------------
// Cross-scale embedding
// ---------------------------------------------------------------------------

// Channel shares across parallel embedding kernels (ascending kernel size):
// geometric halving, remainder folded into the smallest kernel's share.
inline std::vector<int> embed_channel_split(int out_dim, int n_kernels) {
    if (out_dim < n_kernels)
        throw std::invalid_argument("cross_embed: out_dim smaller than number of kernels");
    std::vector<int> shares(static_cast<std::size_t>(n_kernels), 0);
    const double denom = static_cast<double>((1LL << n_kernels) - 1);
    int used = 0;
    for (int i = 1; i < n_kernels; ++i) {
        int s = std::max(1, static_cast<int>(out_dim * static_cast<double>(1LL << (n_kernels - 1 - i)) / denom));
        shares[static_cast<std::size_t>(i)] = s;
        used += s;
    }
    shares[0] = out_dim - used;
    if (shares[0] < 1) throw std::invalid_argument("cross_embed: out_dim too small for kernel set");
    return shares;
}

struct CrossEmbed {
    std::vector<nn::Conv> convs;  // one per kernel, ascending kernel size
    std::vector<int> kernels;
    int stride = 1;

    CrossEmbed() = default;
    CrossEmbed(ParamStore& ps, const std::string& name, int in_dim, int out_dim,
               std::vector<int> kernel_set, int stride_, bool spectral)
        : kernels(std::move(kernel_set)), stride(stride_) {
        std::sort(kernels.begin(), kernels.end());
        const std::vector<int> shares = embed_channel_split(out_dim, static_cast<int>(kernels.size()));
        for (std::size_t i = 0; i < kernels.size(); ++i)
            convs.emplace_back(ps, name + ".k" + std::to_string(kernels[i]), in_dim, shares[i],
                               kernels[i], stride_, spectral);
    }

    // Parallel mirror-padded convolutions at each kernel size, concatenated
    // along channels. H, W must be divisible by the stride.
    Tensor forward(const Tensor& x, ForwardCtx& ctx) const {
        if (x.dim(1) % stride != 0 || x.dim(2) % stride != 0)
            throw std::invalid_argument("cross_embed: extents not divisible by stride");
        std::vector<Tensor> parts;
        parts.reserve(convs.size());
        for (const auto& c : convs) parts.push_back(c.forward(x, ctx));
        return parts.size() == 1 ? parts[0] : concat_channels(parts);
    }
};

// ---------------------------------------------------------------------------
// Attention sublayers
// ---------------------------------------------------------------------------

enum class AttnKind { short_distance, long_distance };

// One pre-norm attention unit plus its feed-forward: token partitioning,
// x += MHA(LN(x)); x += FFN(LN(x)); unpartition.
struct AttnUnit {
    AttnKind kind = AttnKind::short_distance;
    int window = 1;  // group size or interval
    nn::LayerNorm ln1, ln2;
    nn::MultiheadAttention attn;
    nn::FeedForward ffn;

    AttnUnit() = default;
    AttnUnit(ParamStore& ps, const std::string& name, AttnKind kind_, int window_, int dim, int heads,
             double dropout, bool spectral)
        : kind(kind_), window(window_) {
        ln1 = nn::LayerNorm(ps, name + ".ln1", dim);
        ln2 = nn::LayerNorm(ps, name + ".ln2", dim);
        attn = nn::MultiheadAttention(ps, name + ".attn", dim, heads, dropout, spectral);
        ffn = nn::FeedForward(ps, name + ".ffn", dim, 4, dropout, spectral);
    }

    Tensor forward(const Tensor& x, ForwardCtx& ctx) const {
        const int d = x.dim(0), h = x.dim(1), w = x.dim(2);
        // Latent extents can be smaller than the window; rebouncing reflection
        // keeps the pad valid there.
        Tensor padded = detail_model::pad_to_multiple(x, window, /*allow_rebounce=*/true);
        const int hp = padded.dim(1), wp = padded.dim(2);
        Tensor tokens = kind == AttnKind::short_distance
                            ? detail_model::window_partition(padded, window)
                            : detail_model::dilated_partition(padded, window);
        tokens = add(tokens, attn.forward(ln1.forward(tokens), ctx));
        tokens = add(tokens, ffn.forward(ln2.forward(tokens), ctx));
        Tensor back = kind == AttnKind::short_distance
                          ? detail_model::window_unpartition(tokens, window, d, hp, wp)
                          : detail_model::dilated_unpartition(tokens, window, d, hp, wp);
        if (hp != h || wp != w) back = crop2d(back, 0, 0, h, w);
        return back;
    }
};

// Plain windowed attention without the residual/FFN wrapper; the spec-level
// short/long-distance attention operation.
inline Tensor windowed_attention(const Tensor& x, AttnKind kind, int window,
                                 const nn::MultiheadAttention& attn, ForwardCtx& ctx) {
    const int d = x.dim(0), h = x.dim(1), w = x.dim(2);
    Tensor padded = detail_model::pad_to_multiple(x, window, /*allow_rebounce=*/true);
    const int hp = padded.dim(1), wp = padded.dim(2);
    Tensor tokens = kind == AttnKind::short_distance ? detail_model::window_partition(padded, window)
                                                     : detail_model::dilated_partition(padded, window);
    tokens = attn.forward(tokens, ctx);
    Tensor back = kind == AttnKind::short_distance
                      ? detail_model::window_unpartition(tokens, window, d, hp, wp)
                      : detail_model::dilated_unpartition(tokens, window, d, hp, wp);
    if (hp != h || wp != w) back = crop2d(back, 0, 0, h, w);
    return back;
}

// ---------------------------------------------------------------------------
// Encoder stage and decoder blocks
// ---------------------------------------------------------------------------

struct EncoderStage {
    CrossEmbed embed;
    std::vector<AttnUnit> units;  // alternating SDA, LDA

    EncoderStage() = default;
    EncoderStage(ParamStore& ps, const std::string& name, int in_dim, int out_dim,
                 const std::vector<int>& kernels, int stride, int depth_pairs, int heads, int sda_group,
                 int lda_interval, double dropout, bool spectral) {
        embed = CrossEmbed(ps, name + ".embed", in_dim, out_dim, kernels, stride, spectral);
        for (int p = 0; p < depth_pairs; ++p) {
            units.emplace_back(ps, name + ".sda" + std::to_string(p), AttnKind::short_distance, sda_group,
                               out_dim, heads, dropout, spectral);
            units.emplace_back(ps, name + ".lda" + std::to_string(p), AttnKind::long_distance, lda_interval,
                               out_dim, heads, dropout, spectral);
        }
    }

    Tensor forward(const Tensor& x, ForwardCtx& ctx) const {
        Tensor h = embed.forward(x, ctx);
        for (const auto& u : units) h = u.forward(h, ctx);
        return h;
    }
};

// One 2x upsampling step: channel expansion + pixel shuffle (or one of the
// ablation substitutes), optional skip fusion, GELU.
struct UpBlock {
    UpsampleMethod method = UpsampleMethod::pixel_shuffle;
    nn::Conv expand;  // pixel_shuffle: 3x3 -> 4*out; transpose: 1x1 -> 4*out; interpolate: 3x3 -> out
    nn::Conv fuse;    // after skip concat
    bool has_skip = false;

    UpBlock() = default;
    UpBlock(ParamStore& ps, const std::string& name, int in_dim, int out_dim, bool skip,
            UpsampleMethod method_, bool spectral)
        : method(method_), has_skip(skip) {
        switch (method) {
            case UpsampleMethod::pixel_shuffle:
                expand = nn::Conv(ps, name + ".expand", in_dim, 4 * out_dim, 3, 1, spectral);
                break;
            case UpsampleMethod::transpose:
                // 1x1 expansion + shuffle is exactly a k=2, s=2 transposed conv.
                expand = nn::Conv(ps, name + ".expand", in_dim, 4 * out_dim, 1, 1, spectral);
                break;
            case UpsampleMethod::interpolate:
                expand = nn::Conv(ps, name + ".expand", in_dim, out_dim, 3, 1, spectral);
                break;
        }
        if (skip) fuse = nn::Conv(ps, name + ".fuse", 2 * out_dim, out_dim, 3, 1, spectral);
    }

    Tensor upsample(const Tensor& x, ForwardCtx& ctx) const {
        if (method == UpsampleMethod::interpolate) return expand.forward(upsample2x_bilinear(x), ctx);
        return pixel_shuffle(expand.forward(x, ctx), 2);
    }

    Tensor forward(const Tensor& x, const Tensor* skip, ForwardCtx& ctx) const {
        Tensor up = upsample(x, ctx);
        if (has_skip) {
            if (!skip) throw std::invalid_argument("up_block: missing skip input");
            up = fuse.forward(concat_channels({up, *skip}), ctx);
        }
        return gelu(up);
    }
};

// ---------------------------------------------------------------------------
// The network
// ---------------------------------------------------------------------------

class CrossFormerNet {
  public:
    CrossFormerNet(ModelConfig cfg, std::uint64_t init_seed, bool counting = false) : cfg_(std::move(cfg)) {
        cfg_.validate();
        store_.counting = counting;
        store_.init_rng = make_stream(init_seed, "model-init");
        build();
    }

    const ModelConfig& config() const { return cfg_; }
    ParamStore& store() { return store_; }
    const ParamStore& store() const { return store_; }
    std::int64_t parameter_count() const { return store_.param_count; }

    // state [in_channels, H, W] -> [out_channels, H, W]
    Tensor forward(const Tensor& state, ForwardCtx& ctx) const {
        if (state.rank() != 3 || state.dim(0) != cfg_.in_channels)
            throw std::invalid_argument("model_forward: expected [" + std::to_string(cfg_.in_channels) +
                                        ",H,W] input, got " + shape_str(state.shape()));
        const int h = state.dim(1), w = state.dim(2);
        if (h < 2 || w < 2) throw std::invalid_argument("model_forward: extents must be >= 2");
        Tensor x = detail_model::pad_to_multiple(state, ModelConfig::kTotalDownsample, /*allow_rebounce=*/true);

        std::vector<Tensor> skips;
        for (std::size_t i = 0; i < stages_.size(); ++i) {
            x = stages_[i].forward(x, ctx);
            if (i + 1 < stages_.size()) skips.push_back(x);
        }
        for (std::size_t i = 0; i < ups_.size(); ++i) {
            const Tensor* skip = i < skips.size() ? &skips[skips.size() - 1 - i] : nullptr;
            x = ups_[i].forward(x, skip, ctx);
        }
        x = head_.forward(x, ctx);
        if (x.dim(1) != h || x.dim(2) != w) x = crop2d(x, 0, 0, h, w);
        return x;
    }

  private:
    void build() {
        const auto& d = cfg_.block_dims;
        int in = cfg_.in_channels;
        for (int i = 0; i < 4; ++i) {
            const auto& kernels = i == 0 ? cfg_.embed_kernels_block1 : cfg_.embed_kernels_later;
            stages_.emplace_back(store_, "enc" + std::to_string(i + 1), in, d[static_cast<std::size_t>(i)],
                                 kernels, ModelConfig::kStrides[static_cast<std::size_t>(i)],
                                 cfg_.depths[static_cast<std::size_t>(i)],
                                 cfg_.heads_per_block[static_cast<std::size_t>(i)], cfg_.sda_group,
                                 cfg_.lda_intervals[static_cast<std::size_t>(i)], cfg_.dropout,
                                 cfg_.use_spectral_norm);
            in = d[static_cast<std::size_t>(i)];
        }
        // Up path: 1/32 -> 1/16 -> 1/8 -> 1/4 with skips, then two
        // channel-preserving steps back to full resolution.
        ups_.emplace_back(store_, "dec1", d[3], d[2], true, cfg_.upsample_method, cfg_.use_spectral_norm);
        ups_.emplace_back(store_, "dec2", d[2], d[1], true, cfg_.upsample_method, cfg_.use_spectral_norm);
        ups_.emplace_back(store_, "dec3", d[1], d[0], true, cfg_.upsample_method, cfg_.use_spectral_norm);
        ups_.emplace_back(store_, "dec4", d[0], d[0], false, cfg_.upsample_method, cfg_.use_spectral_norm);
        ups_.emplace_back(store_, "dec5", d[0], d[0], false, cfg_.upsample_method, cfg_.use_spectral_norm);
        head_ = nn::Conv(store_, "head", d[0], cfg_.out_channels, 1, 1, /*spectral=*/false);
    }

    ModelConfig cfg_;
    ParamStore store_;
    std::vector<EncoderStage> stages_;
    std::vector<UpBlock> ups_;
    nn::Conv head_;
};

// Exact parameter total for a configuration (no allocation).
inline std::int64_t count_parameters(const ModelConfig& cfg) {
    CrossFormerNet net(cfg, 0, /*counting=*/true);
    return net.parameter_count();
}

// ---------------------------------------------------------------------------
// Checkpoint payloads (model side)
// ---------------------------------------------------------------------------

namespace ckpt {

inline void write_f64(const std::filesystem::path& p, const std::vector<double>& v) {
    std::ofstream f(p, std::ios::binary);
    if (!f) throw std::runtime_error("cannot write " + p.string());
    f.write(reinterpret_cast<const char*>(v.data()), static_cast<std::streamsize>(v.size() * sizeof(double)));
}

inline std::vector<double> read_f64(const std::filesystem::path& p, std::size_t expected) {
    std::ifstream f(p, std::ios::binary);
    if (!f) throw std::runtime_error("cannot read " + p.string());
    std::vector<double> v(expected);
    f.read(reinterpret_cast<char*>(v.data()), static_cast<std::streamsize>(expected * sizeof(double)));
    if (static_cast<std::size_t>(f.gcount()) != expected * sizeof(double))
        throw std::runtime_error("short read on " + p.string());
    return v;
}

}  // namespace ckpt

}  // namespace droughtcast
