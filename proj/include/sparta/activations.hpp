#pragma once

#include <string>

#include "sparta/autodiff.hpp"
#include "sparta/rng.hpp"
#include "sparta/tensor.hpp"

namespace sparta {

// ---------------------------------------------------------------------------
// Activation catalog.
// ---------------------------------------------------------------------------

enum class ActTag {
    Relu,
    Elu,
    Gelu,
    Softplus,
    Swish,
    SwishRelu,
    Sparta,
    SpartaNoDPNet,
    SpartaOnActFeat,
    SpartaShared,
};

struct ActivationKind {
    ActTag tag = ActTag::Relu;
    int share_n = 1;   // block size for SpartaShared
    int kernel = 1;    // kernel size of the spatial-branch convolutions
    int c_o_cap = 256; // reduced width cap: c_o = min(cap, C)

    bool is_sparta() const {
        return tag == ActTag::Sparta || tag == ActTag::SpartaNoDPNet ||
               tag == ActTag::SpartaOnActFeat || tag == ActTag::SpartaShared;
    }

    bool uses_dpnet() const { return is_sparta() && tag != ActTag::SpartaNoDPNet; }

    std::string str() const {
        switch (tag) {
            case ActTag::Relu: return "relu";
            case ActTag::Elu: return "elu";
            case ActTag::Gelu: return "gelu";
            case ActTag::Softplus: return "softplus";
            case ActTag::Swish: return "swish";
            case ActTag::SwishRelu: return "swish-relu";
            case ActTag::Sparta: return "sparta";
            case ActTag::SpartaNoDPNet: return "sparta-no-dpnet";
            case ActTag::SpartaOnActFeat: return "sparta-on-actfeat";
            case ActTag::SpartaShared: return "sparta-shared";
        }
        return "?";
    }

    static ActivationKind parse(const std::string& name) {
        ActivationKind k;
        if (name == "relu") k.tag = ActTag::Relu;
        else if (name == "elu") k.tag = ActTag::Elu;
        else if (name == "gelu") k.tag = ActTag::Gelu;
        else if (name == "softplus") k.tag = ActTag::Softplus;
        else if (name == "swish") k.tag = ActTag::Swish;
        else if (name == "swish-relu") k.tag = ActTag::SwishRelu;
        else if (name == "sparta") k.tag = ActTag::Sparta;
        else if (name == "sparta-no-dpnet") k.tag = ActTag::SpartaNoDPNet;
        else if (name == "sparta-on-actfeat") k.tag = ActTag::SpartaOnActFeat;
        else if (name == "sparta-shared") k.tag = ActTag::SpartaShared;
        else throw ValueError("unknown activation tag: " + name);
        return k;
    }
};

// ---------------------------------------------------------------------------
// DSCANet: the attention sub-network behind the Sparta variants.
//
//   attention(x) = sigmoid( SANet(x) (outer) CANet(x) )
//
//   CANet: global pool -> Conv1 (C -> Co) -> ReLU -> Conv2 (Co -> C)
//   SANet: Conv3 (C -> Co) -> ReLU -> Conv4 (Co -> Co) -> ReLU -> Conv5 (Co -> 1)
//   DPNet: global pool -> dense (C -> K*K*Co + 1), emitting Conv5's weights
//          and bias per sample. Without DPNet, Conv5 holds its own weights.
//
// The sigmoid is applied once, after the outer product. All convolutions are
// 1x1 by default; `kernel` widens the spatial branch.
// ---------------------------------------------------------------------------

struct DSCANetParams {
    int channels = 0;
    int c_o = 0;
    int kernel = 1;
    bool use_dpnet = true;

    Tensor conv1_w, conv1_b; // CANet reduce
    Tensor conv2_w, conv2_b; // CANet expand
    Tensor conv3_w, conv3_b; // SANet reduce
    Tensor conv4_w, conv4_b; // SANet mid
    Tensor conv5_w, conv5_b; // SANet head, static variant only
    Tensor dp_w, dp_b;       // DPNet dense, dynamic variant only

    static DSCANetParams init(int channels, const ActivationKind& kind, Rng& rng) {
        if (channels < 1) throw ValueError("dscanet: channels must be >= 1");
        DSCANetParams p;
        p.channels = channels;
        p.c_o = std::min(kind.c_o_cap, channels);
        p.kernel = kind.kernel;
        p.use_dpnet = kind.uses_dpnet();
        const std::size_t C = static_cast<std::size_t>(channels);
        const std::size_t Co = static_cast<std::size_t>(p.c_o);
        const std::size_t K = static_cast<std::size_t>(p.kernel);

        p.conv1_w = gaussian_weights({1, 1, C, Co}, rng);
        p.conv1_b = Tensor({Co});
        p.conv2_w = gaussian_weights({1, 1, Co, C}, rng);
        p.conv2_b = Tensor({C});
        p.conv3_w = gaussian_weights({K, K, C, Co}, rng);
        p.conv3_b = Tensor({Co});
        p.conv4_w = gaussian_weights({K, K, Co, Co}, rng);
        p.conv4_b = Tensor({Co});
        if (p.use_dpnet) {
            // zero init: training starts from the uniform 0.5 attention regime
            p.dp_w = Tensor({1, 1, C, K * K * Co + 1});
            p.dp_b = Tensor({K * K * Co + 1});
        } else {
            p.conv5_w = gaussian_weights({K, K, Co, 1}, rng);
            p.conv5_b = Tensor({1});
        }
        return p;
    }

    /// Fan-in-scaled zero-mean Gaussian: std = sqrt(2 / fan_in) where
    /// fan_in = K*K*Cin for a KxKxCinxCout weight tensor.
    static Tensor gaussian_weights(Shape s, Rng& rng) {
        const double fan_in = static_cast<double>(s[0] * s[1] * s[2]);
        const double stddev = std::sqrt(2.0 / fan_in);
        Tensor t(std::move(s));
        for (double& v : t.data) v = rng.gaussian(0.0, stddev);
        return t;
    }

    std::size_t parameter_count() const {
        std::size_t n = conv1_w.size() + conv1_b.size() + conv2_w.size() + conv2_b.size() +
                        conv3_w.size() + conv3_b.size() + conv4_w.size() + conv4_b.size();
        if (use_dpnet)
            n += dp_w.size() + dp_b.size();
        else
            n += conv5_w.size() + conv5_b.size();
        return n;
    }
};

/// Tape handles for one DSCANet's parameters.
struct DscaNodes {
    NodeId conv1_w = -1, conv1_b = -1;
    NodeId conv2_w = -1, conv2_b = -1;
    NodeId conv3_w = -1, conv3_b = -1;
    NodeId conv4_w = -1, conv4_b = -1;
    NodeId conv5_w = -1, conv5_b = -1;
    NodeId dp_w = -1, dp_b = -1;
    int channels = 0;
    int c_o = 0;
    int kernel = 1;
    bool use_dpnet = true;
};

inline DscaNodes lift(Tape& t, const DSCANetParams& p, bool requires_grad) {
    DscaNodes n;
    n.channels = p.channels;
    n.c_o = p.c_o;
    n.kernel = p.kernel;
    n.use_dpnet = p.use_dpnet;
    n.conv1_w = t.leaf(p.conv1_w, requires_grad);
    n.conv1_b = t.leaf(p.conv1_b, requires_grad);
    n.conv2_w = t.leaf(p.conv2_w, requires_grad);
    n.conv2_b = t.leaf(p.conv2_b, requires_grad);
    n.conv3_w = t.leaf(p.conv3_w, requires_grad);
    n.conv3_b = t.leaf(p.conv3_b, requires_grad);
    n.conv4_w = t.leaf(p.conv4_w, requires_grad);
    n.conv4_b = t.leaf(p.conv4_b, requires_grad);
    if (p.use_dpnet) {
        n.dp_w = t.leaf(p.dp_w, requires_grad);
        n.dp_b = t.leaf(p.dp_b, requires_grad);
    } else {
        n.conv5_w = t.leaf(p.conv5_w, requires_grad);
        n.conv5_b = t.leaf(p.conv5_b, requires_grad);
    }
    return n;
}

/// Per-sample Conv5 weights/bias predicted by DPNet from pooled features.
/// Returns (weights Nx1x1x(K*K*Co), bias Nx1x1x1).
inline std::pair<NodeId, NodeId> dpnet_predict_graph(Tape& t, NodeId x, const DscaNodes& p) {
    const NodeId pooled = t.global_avg_pool(x);
    const NodeId out = t.conv2d(pooled, p.dp_w, p.dp_b, ConvSpec{1, 0});
    const int wdim = p.kernel * p.kernel * p.c_o;
    return {t.slice_channels(out, 0, wdim), t.slice_channels(out, wdim, wdim + 1)};
}

/// sigmoid(SANet(x) outer CANet(x)), elementwise in (0, 1).
inline NodeId dscanet_attention_graph(Tape& t, NodeId x, const DscaNodes& p, bool use_dpnet) {
    const Tensor& xv = t.value(x);
    if (xv.rank() != 4)
        throw ShapeError("dscanet: input must be rank 4, got " + shape_str(xv.shape));
    if (static_cast<int>(xv.shape[3]) != p.channels)
        throw ShapeError(detail::concat("dscanet: channel mismatch, input has ", xv.shape[3],
                                        " channels but parameters expect ", p.channels));
    const ConvSpec point{1, 0};
    const ConvSpec spatial{1, (p.kernel - 1) / 2};

    // channel branch
    const NodeId pooled = t.global_avg_pool(x);
    const NodeId c1 = t.relu(t.conv2d(pooled, p.conv1_w, p.conv1_b, point));
    const NodeId cvec = t.conv2d(c1, p.conv2_w, p.conv2_b, point);

    // spatial branch
    const NodeId s3 = t.relu(t.conv2d(x, p.conv3_w, p.conv3_b, spatial));
    const NodeId s4 = t.relu(t.conv2d(s3, p.conv4_w, p.conv4_b, spatial));
    NodeId smap;
    if (use_dpnet) {
        const auto [w5, b5] = dpnet_predict_graph(t, x, p);
        const NodeId patches = t.unfold(s4, p.kernel);
        smap = t.add(t.sum_channels(t.mul(patches, w5)), b5);
    } else {
        if (p.conv5_w < 0) throw Error("dscanet: static conv5 weights missing");
        smap = t.conv2d(s4, p.conv5_w, p.conv5_b, spatial);
    }
    return t.sigmoid(t.outer_fuse(smap, cvec));
}

/// Sparta forward as a tape subgraph. For share_n > 1 the attention is
/// computed on the n-times average-pooled input and each score is replicated
/// over its n x n spatial block; share_n == 1 takes the exact plain path.
inline NodeId sparta_forward_graph(Tape& t, NodeId x, const DscaNodes& p, ActTag tag,
                                   int share_n = 1) {
    const NodeId gate = t.relu(x);
    const NodeId att_input = (tag == ActTag::SpartaOnActFeat) ? gate : x;
    NodeId att;
    if (tag == ActTag::SpartaShared && share_n > 1) {
        const Tensor& xv = t.value(x);
        if (xv.shape[1] % static_cast<std::size_t>(share_n) != 0 ||
            xv.shape[2] % static_cast<std::size_t>(share_n) != 0)
            throw ShapeError(detail::concat("sparta-shared: block size ", share_n,
                                            " does not divide spatial extent ", xv.shape[1],
                                            "x", xv.shape[2]));
        const NodeId pooled_in = t.avg_pool(att_input, share_n);
        const NodeId att_small = dscanet_attention_graph(t, pooled_in, p, p.use_dpnet);
        att = t.upsample(att_small, share_n);
    } else {
        att = dscanet_attention_graph(t, att_input, p, p.use_dpnet);
    }
    return t.mul(gate, att);
}

/// Generic activation subgraph; `dsca` must be set for Sparta variants.
inline NodeId activation_graph(Tape& t, NodeId x, const ActivationKind& kind,
                               const DscaNodes* dsca = nullptr) {
    switch (kind.tag) {
        case ActTag::Relu: return t.relu(x);
        case ActTag::Elu: return t.elu(x);
        case ActTag::Softplus: return t.softplus(x);
        case ActTag::Swish: return t.mul(x, t.sigmoid(x));
        case ActTag::SwishRelu: return t.mul(t.relu(x), t.sigmoid(x));
        case ActTag::Gelu: {
            // tanh approximation: 0.5 x (1 + tanh(sqrt(2/pi) (x + 0.044715 x^3)))
            const NodeId x3 = t.mul(t.mul(x, x), x);
            const NodeId inner = t.add(x, t.affine(x3, 0.044715, 0.0));
            const NodeId th = t.tanh(t.affine(inner, 0.79788456080286535588, 0.0));
            return t.mul(x, t.affine(th, 0.5, 0.5));
        }
        case ActTag::Sparta:
        case ActTag::SpartaNoDPNet:
        case ActTag::SpartaOnActFeat:
        case ActTag::SpartaShared: {
            if (!dsca) throw Error("activation_graph: Sparta variant needs DSCANet parameters");
            return sparta_forward_graph(t, x, *dsca, kind.tag, kind.share_n);
        }
    }
    throw Error("activation_graph: unhandled tag");
}

// ---------------------------------------------------------------------------
// Eager entry points. These run the same kernels / subgraphs as the
// differentiable path, so values agree bitwise with training-time forwards.
// ---------------------------------------------------------------------------

inline Tensor relu(const Tensor& x) { return elementwise(UnaryOp::Relu, x); }

inline Tensor swish(const Tensor& x) {
    return mul(x, elementwise(UnaryOp::Sigmoid, x));
}

inline Tensor swish_relu(const Tensor& x) {
    return mul(relu(x), elementwise(UnaryOp::Sigmoid, x));
}

enum class BaselineTag { Elu, Gelu, Softplus };

inline Tensor baseline(const Tensor& x, BaselineTag tag) {
    Tape t;
    const NodeId in = t.constant(x);
    ActivationKind k;
    k.tag = tag == BaselineTag::Elu ? ActTag::Elu
            : tag == BaselineTag::Gelu ? ActTag::Gelu
                                       : ActTag::Softplus;
    return t.value(activation_graph(t, in, k));
}

inline Tensor dscanet_attention(const Tensor& x, const DSCANetParams& p, bool use_dpnet) {
    Tape t;
    const NodeId in = t.constant(x);
    const DscaNodes nodes = lift(t, p, false);
    return t.value(dscanet_attention_graph(t, in, nodes, use_dpnet && p.use_dpnet));
}

inline Tensor sparta_forward(const Tensor& x, const DSCANetParams& p,
                             ActTag variant = ActTag::Sparta) {
    if (variant == ActTag::SpartaShared)
        throw ValueError("sparta_forward: use sparta_shared_forward for the shared variant");
    Tape t;
    const NodeId in = t.constant(x);
    const DscaNodes nodes = lift(t, p, false);
    return t.value(sparta_forward_graph(t, in, nodes, variant));
}

inline Tensor sparta_shared_forward(const Tensor& x, const DSCANetParams& p, int n) {
    if (n < 1) throw ValueError("sparta_shared_forward: n must be >= 1");
    Tape t;
    const NodeId in = t.constant(x);
    const DscaNodes nodes = lift(t, p, false);
    if (n == 1) return t.value(sparta_forward_graph(t, in, nodes, ActTag::Sparta));
    return t.value(sparta_forward_graph(t, in, nodes, ActTag::SpartaShared, n));
}

/// Per-sample Conv5 parameters from DPNet; rows are (K*K*Co weights, bias).
inline Tensor dpnet_predict(const Tensor& x, const DSCANetParams& p) {
    if (!p.use_dpnet) throw Error("dpnet_predict: parameters have no DPNet");
    Tape t;
    const NodeId in = t.constant(x);
    const DscaNodes nodes = lift(t, p, false);
    const auto [w5, b5] = dpnet_predict_graph(t, in, nodes);
    const Tensor& wv = t.value(w5);
    const Tensor& bv = t.value(b5);
    const std::size_t N = wv.shape[0], D = wv.shape[3];
    Tensor out({N, D + 1});
    for (std::size_t i = 0; i < N; ++i) {
        std::copy(wv.ptr() + i * D, wv.ptr() + (i + 1) * D, out.ptr() + i * (D + 1));
        out.data[i * (D + 1) + D] = bv.data[i];
    }
    return out;
}

} // namespace sparta
