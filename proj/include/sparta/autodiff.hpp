#pragma once

#include <functional>
#include <map>
#include <optional>
#include <vector>

#include "sparta/tensor.hpp"

namespace sparta {

using NodeId = int;

enum class OpKind {
    Leaf,
    Add,
    Sub,
    Mul,
    Relu,
    Elu,
    Sigmoid,
    Tanh,
    Exp,
    Softplus,
    Affine,        // a*x + b with scalar coefficients
    Conv2d,        // parents: x, w[, b]
    GlobalAvgPool,
    AvgPool,       // factor in iattr0
    Upsample,      // factor in iattr0
    OuterFuse,     // parents: s (NxHxWx1), v (Nx1x1xC)
    SumChannels,
    SliceChannels, // [iattr0, iattr1)
    Unfold,        // kernel in iattr0
    Reshape,
    BatchNorm,     // parents: x, gamma, beta; saved: xhat, inv_std
    CrossEntropy,  // parent: logits; labels attr; saved: softmax
    SumAll,
};

/// Reverse-mode record. Nodes are appended in forward order, so every
/// parent id precedes its children; replaying the stored ops over the leaf
/// values reproduces each saved output bitwise (all ops are deterministic).
class Tape {
public:
    struct Node {
        OpKind op = OpKind::Leaf;
        NodeId parent[3] = {-1, -1, -1};
        int n_parents = 0;
        Tensor value;
        // op attributes
        int iattr0 = 0;
        int iattr1 = 0;
        double a = 0.0, b = 0.0;
        std::vector<int> labels;
        std::vector<Tensor> saved;
        bool requires_grad = false; // leaf flag, or OR of parents
    };

    const Tensor& value(NodeId id) const { return nodes_[check(id)].value; }
    const Node& node(NodeId id) const { return nodes_[check(id)]; }
    std::size_t size() const { return nodes_.size(); }

    NodeId leaf(Tensor v, bool requires_grad = true) {
        Node n;
        n.op = OpKind::Leaf;
        n.value = std::move(v);
        n.requires_grad = requires_grad;
        return push(std::move(n));
    }

    NodeId constant(Tensor v) { return leaf(std::move(v), false); }

    NodeId add(NodeId x, NodeId y) {
        return binary(OpKind::Add, x, y, sparta::add(value(x), value(y)));
    }
    NodeId sub(NodeId x, NodeId y) {
        return binary(OpKind::Sub, x, y, sparta::sub(value(x), value(y)));
    }
    NodeId mul(NodeId x, NodeId y) {
        return binary(OpKind::Mul, x, y, sparta::mul(value(x), value(y)));
    }

    NodeId relu(NodeId x) { return unary(OpKind::Relu, x, elementwise(UnaryOp::Relu, value(x))); }
    NodeId sigmoid(NodeId x) {
        return unary(OpKind::Sigmoid, x, elementwise(UnaryOp::Sigmoid, value(x)));
    }
    NodeId tanh(NodeId x) { return unary(OpKind::Tanh, x, elementwise(UnaryOp::Tanh, value(x))); }
    NodeId exp(NodeId x) { return unary(OpKind::Exp, x, elementwise(UnaryOp::Exp, value(x))); }
    NodeId softplus(NodeId x) {
        return unary(OpKind::Softplus, x, elementwise(UnaryOp::Softplus, value(x)));
    }

    NodeId elu(NodeId x) {
        const Tensor& v = value(x);
        Tensor out(v.shape);
        for (std::size_t i = 0; i < v.size(); ++i)
            out.data[i] = v.data[i] >= 0.0 ? v.data[i] : std::expm1(v.data[i]);
        return unary(OpKind::Elu, x, std::move(out));
    }

    NodeId affine(NodeId x, double a, double b) {
        const Tensor& v = value(x);
        Tensor out(v.shape);
        for (std::size_t i = 0; i < v.size(); ++i) out.data[i] = a * v.data[i] + b;
        Node n;
        n.op = OpKind::Affine;
        n.a = a;
        n.b = b;
        n.value = std::move(out);
        attach(n, x);
        return push(std::move(n));
    }

    NodeId conv2d(NodeId x, NodeId w, NodeId b, const ConvSpec& cs) {
        Node n;
        n.op = OpKind::Conv2d;
        n.iattr0 = cs.stride;
        n.iattr1 = cs.pad;
        n.value = b >= 0 ? sparta::conv2d(value(x), value(w), value(b), cs)
                         : sparta::conv2d(value(x), value(w), Tensor{}, cs);
        attach(n, x);
        attach(n, w);
        if (b >= 0) attach(n, b);
        return push(std::move(n));
    }

    NodeId global_avg_pool(NodeId x) {
        return unary(OpKind::GlobalAvgPool, x, sparta::global_avg_pool(value(x)));
    }

    NodeId avg_pool(NodeId x, int factor) {
        if (factor == 1) return x;
        Node n;
        n.op = OpKind::AvgPool;
        n.iattr0 = factor;
        n.value = sparta::avg_pool(value(x), static_cast<std::size_t>(factor));
        attach(n, x);
        return push(std::move(n));
    }

    NodeId upsample(NodeId x, int factor) {
        if (factor == 1) return x;
        Node n;
        n.op = OpKind::Upsample;
        n.iattr0 = factor;
        n.value = sparta::upsample_nearest(value(x), static_cast<std::size_t>(factor));
        attach(n, x);
        return push(std::move(n));
    }

    NodeId outer_fuse(NodeId s, NodeId v) {
        return binary(OpKind::OuterFuse, s, v, sparta::outer_fuse(value(s), value(v)));
    }

    NodeId sum_channels(NodeId x) {
        return unary(OpKind::SumChannels, x, sparta::sum_channels(value(x)));
    }

    NodeId slice_channels(NodeId x, int from, int to) {
        Node n;
        n.op = OpKind::SliceChannels;
        n.iattr0 = from;
        n.iattr1 = to;
        n.value = sparta::slice_channels(value(x), static_cast<std::size_t>(from),
                                         static_cast<std::size_t>(to));
        attach(n, x);
        return push(std::move(n));
    }

    NodeId unfold(NodeId x, int kernel) {
        if (kernel == 1) return x;
        Node n;
        n.op = OpKind::Unfold;
        n.iattr0 = kernel;
        n.value = sparta::unfold(value(x), static_cast<std::size_t>(kernel));
        attach(n, x);
        return push(std::move(n));
    }

    NodeId reshape(NodeId x, Shape s) {
        Node n;
        n.op = OpKind::Reshape;
        n.value = sparta::reshape(value(x), std::move(s));
        attach(n, x);
        return push(std::move(n));
    }

    /// Training-mode batch normalization over (N, H, W) per channel.
    /// Biased batch variance; normalization uses eps inside the sqrt. Batch
    /// mean/var are exposed through batch_stats() for running-stat updates.
    NodeId batch_norm(NodeId x, NodeId gamma, NodeId beta, double eps) {
        const Tensor& v = value(x);
        if (v.rank() != 4)
            throw ShapeError("batch_norm: input must be rank 4, got " + shape_str(v.shape));
        const std::size_t C = v.shape[3];
        const std::size_t M = v.size() / C;
        Tensor mean({1, 1, 1, C}), var({1, 1, 1, C});
        for (std::size_t m = 0; m < M; ++m) {
            const double* src = v.ptr() + m * C;
            for (std::size_t c = 0; c < C; ++c) mean.data[c] += src[c];
        }
        for (std::size_t c = 0; c < C; ++c) mean.data[c] /= static_cast<double>(M);
        for (std::size_t m = 0; m < M; ++m) {
            const double* src = v.ptr() + m * C;
            for (std::size_t c = 0; c < C; ++c) {
                const double d = src[c] - mean.data[c];
                var.data[c] += d * d;
            }
        }
        for (std::size_t c = 0; c < C; ++c) var.data[c] /= static_cast<double>(M);

        Tensor inv_std({1, 1, 1, C});
        for (std::size_t c = 0; c < C; ++c) inv_std.data[c] = 1.0 / std::sqrt(var.data[c] + eps);

        const Tensor& g = value(gamma);
        const Tensor& bt = value(beta);
        Tensor xhat(v.shape), out(v.shape);
        for (std::size_t m = 0; m < M; ++m) {
            const double* src = v.ptr() + m * C;
            double* xh = xhat.ptr() + m * C;
            double* o = out.ptr() + m * C;
            for (std::size_t c = 0; c < C; ++c) {
                xh[c] = (src[c] - mean.data[c]) * inv_std.data[c];
                o[c] = g.data[c] * xh[c] + bt.data[c];
            }
        }
        Node n;
        n.op = OpKind::BatchNorm;
        n.value = std::move(out);
        n.saved.push_back(std::move(xhat));
        n.saved.push_back(std::move(inv_std));
        n.saved.push_back(std::move(mean));
        n.saved.push_back(std::move(var));
        attach(n, x);
        attach(n, gamma);
        attach(n, beta);
        return push(std::move(n));
    }

    /// (batch_mean, batch_var) recorded by a BatchNorm node.
    std::pair<const Tensor&, const Tensor&> batch_stats(NodeId bn) const {
        const Node& n = nodes_[check(bn)];
        if (n.op != OpKind::BatchNorm) throw Error("batch_stats: node is not a batch_norm");
        return {n.saved[2], n.saved[3]};
    }

    /// Mean cross-entropy over the batch, stabilized by max subtraction.
    /// logits: N x K; the result is a scalar node.
    NodeId cross_entropy(NodeId logits, const std::vector<int>& labels) {
        const Tensor& z = value(logits);
        if (z.rank() != 2)
            throw ShapeError("cross_entropy: logits must be rank 2 (NxK), got " + shape_str(z.shape));
        const std::size_t N = z.shape[0], K = z.shape[1];
        if (labels.size() != N)
            throw ShapeError(detail::concat("cross_entropy: ", labels.size(), " labels for batch ", N));
        for (const int l : labels)
            if (l < 0 || static_cast<std::size_t>(l) >= K)
                throw ValueError(detail::concat("cross_entropy: label ", l, " outside [0, ", K, ")"));
        Tensor probs(z.shape);
        double loss = 0.0;
        for (std::size_t i = 0; i < N; ++i) {
            const double* row = z.ptr() + i * K;
            double mx = row[0];
            for (std::size_t k = 1; k < K; ++k) mx = std::max(mx, row[k]);
            double denom = 0.0;
            for (std::size_t k = 0; k < K; ++k) denom += std::exp(row[k] - mx);
            const double lse = mx + std::log(denom);
            double* p = probs.ptr() + i * K;
            for (std::size_t k = 0; k < K; ++k) p[k] = std::exp(row[k] - lse);
            loss -= row[static_cast<std::size_t>(labels[i])] - lse;
        }
        loss /= static_cast<double>(N);
        Node n;
        n.op = OpKind::CrossEntropy;
        n.labels = labels;
        n.value = Tensor::scalar(loss);
        n.saved.push_back(std::move(probs));
        attach(n, logits);
        return push(std::move(n));
    }

    NodeId sum_all(NodeId x) {
        Node n;
        n.op = OpKind::SumAll;
        n.value = Tensor::scalar(sum(value(x)));
        attach(n, x);
        return push(std::move(n));
    }

    /// dLoss/dLeaf for every requested leaf. The loss must be scalar.
    /// Leaves not reached by the backward sweep get zero gradients. Nodes
    /// that cannot lead to a requested leaf are pruned, so e.g. an attack
    /// asking only for the input gradient skips all weight-gradient work.
    std::map<NodeId, Tensor> backward(NodeId loss, const std::vector<NodeId>& wrt) const;

    /// Convenience: gradients for every grad-requiring leaf.
    std::map<NodeId, Tensor> backward(NodeId loss) const {
        std::vector<NodeId> wrt;
        for (std::size_t i = 0; i < nodes_.size(); ++i)
            if (nodes_[i].op == OpKind::Leaf && nodes_[i].requires_grad)
                wrt.push_back(static_cast<NodeId>(i));
        return backward(loss, wrt);
    }

private:
    std::vector<Node> nodes_;

    NodeId check(NodeId id) const {
        if (id < 0 || static_cast<std::size_t>(id) >= nodes_.size())
            throw Error(detail::concat("tape: invalid node id ", id));
        return id;
    }

    void attach(Node& n, NodeId parent) {
        n.parent[n.n_parents++] = check(parent);
        n.requires_grad = n.requires_grad || nodes_[parent].requires_grad;
    }

    NodeId push(Node n) {
        nodes_.push_back(std::move(n));
        return static_cast<NodeId>(nodes_.size() - 1);
    }

    NodeId unary(OpKind op, NodeId x, Tensor out) {
        Node n;
        n.op = op;
        n.value = std::move(out);
        attach(n, x);
        return push(std::move(n));
    }

    NodeId binary(OpKind op, NodeId x, NodeId y, Tensor out) {
        Node n;
        n.op = op;
        n.value = std::move(out);
        attach(n, x);
        attach(n, y);
        return push(std::move(n));
    }
};

inline std::map<NodeId, Tensor> Tape::backward(NodeId loss, const std::vector<NodeId>& wrt) const {
    check(loss);
    const Tensor& lv = nodes_[loss].value;
    if (lv.size() != 1)
        throw ShapeError("backward: loss must be scalar, got shape " + shape_str(lv.shape));

    // useful[i]: some requested leaf lies in i's ancestry, so its adjoint
    // contributes to a requested gradient.
    std::vector<char> useful(nodes_.size(), 0);
    for (const NodeId id : wrt) useful[check(id)] = 1;
    for (std::size_t i = 0; i < nodes_.size(); ++i)
        for (int p = 0; p < nodes_[i].n_parents; ++p)
            if (useful[nodes_[i].parent[p]]) useful[i] = 1;

    std::vector<std::optional<Tensor>> adj(nodes_.size());
    adj[loss] = Tensor::full(lv.shape, 1.0);

    auto accum = [&](NodeId id, Tensor g) {
        if (!useful[id]) return;
        if (!adj[id]) {
            adj[id] = std::move(g);
        } else {
            Tensor& a = *adj[id];
            for (std::size_t i = 0; i < a.size(); ++i) a.data[i] += g.data[i];
        }
    };

    for (NodeId id = loss; id >= 0; --id) {
        if (!adj[id] || !useful[id] || !nodes_[id].requires_grad) continue;
        const Node& n = nodes_[id];
        if (n.op == OpKind::Leaf) continue;
        const Tensor& g = *adj[id];
        switch (n.op) {
            case OpKind::Add: {
                accum(n.parent[0], reduce_to_shape(g, nodes_[n.parent[0]].value.shape));
                accum(n.parent[1], reduce_to_shape(g, nodes_[n.parent[1]].value.shape));
                break;
            }
            case OpKind::Sub: {
                accum(n.parent[0], reduce_to_shape(g, nodes_[n.parent[0]].value.shape));
                accum(n.parent[1], reduce_to_shape(scale(g, -1.0), nodes_[n.parent[1]].value.shape));
                break;
            }
            case OpKind::Mul: {
                const Tensor& a = nodes_[n.parent[0]].value;
                const Tensor& b = nodes_[n.parent[1]].value;
                accum(n.parent[0], reduce_to_shape(sparta::mul(g, b), a.shape));
                accum(n.parent[1], reduce_to_shape(sparta::mul(g, a), b.shape));
                break;
            }
            case OpKind::Relu: {
                const Tensor& x = nodes_[n.parent[0]].value;
                Tensor dx(g.shape);
                // derivative 1 at exactly 0, matching the closed form
                for (std::size_t i = 0; i < g.size(); ++i)
                    dx.data[i] = x.data[i] >= 0.0 ? g.data[i] : 0.0;
                accum(n.parent[0], std::move(dx));
                break;
            }
            case OpKind::Elu: {
                const Tensor& x = nodes_[n.parent[0]].value;
                Tensor dx(g.shape);
                for (std::size_t i = 0; i < g.size(); ++i)
                    dx.data[i] = x.data[i] >= 0.0 ? g.data[i]
                                                  : g.data[i] * (n.value.data[i] + 1.0);
                accum(n.parent[0], std::move(dx));
                break;
            }
            case OpKind::Sigmoid: {
                // from the saved forward value: s(1-s), no re-exponentiation
                Tensor dx(g.shape);
                for (std::size_t i = 0; i < g.size(); ++i) {
                    const double s = n.value.data[i];
                    dx.data[i] = g.data[i] * s * (1.0 - s);
                }
                accum(n.parent[0], std::move(dx));
                break;
            }
            case OpKind::Tanh: {
                Tensor dx(g.shape);
                for (std::size_t i = 0; i < g.size(); ++i) {
                    const double t = n.value.data[i];
                    dx.data[i] = g.data[i] * (1.0 - t * t);
                }
                accum(n.parent[0], std::move(dx));
                break;
            }
            case OpKind::Exp: {
                accum(n.parent[0], sparta::mul(g, n.value));
                break;
            }
            case OpKind::Softplus: {
                const Tensor& x = nodes_[n.parent[0]].value;
                Tensor dx(g.shape);
                for (std::size_t i = 0; i < g.size(); ++i)
                    dx.data[i] = g.data[i] * detail::stable_sigmoid(x.data[i]);
                accum(n.parent[0], std::move(dx));
                break;
            }
            case OpKind::Affine: {
                accum(n.parent[0], scale(g, n.a));
                break;
            }
            case OpKind::Conv2d: {
                const ConvSpec cs{n.iattr0, n.iattr1};
                const Tensor& x = nodes_[n.parent[0]].value;
                const Tensor& w = nodes_[n.parent[1]].value;
                if (useful[n.parent[0]])
                    accum(n.parent[0], conv2d_grad_input(g, w, x.shape, cs));
                if (useful[n.parent[1]])
                    accum(n.parent[1], conv2d_grad_weights(x, g, w.shape[0], cs));
                if (n.n_parents == 3 && useful[n.parent[2]])
                    accum(n.parent[2], conv2d_grad_bias(g));
                break;
            }
            case OpKind::GlobalAvgPool: {
                const Tensor& x = nodes_[n.parent[0]].value;
                const std::size_t N = x.shape[0], HW = x.shape[1] * x.shape[2], C = x.shape[3];
                Tensor dx(x.shape);
                const double inv = 1.0 / static_cast<double>(HW);
                for (std::size_t nn = 0; nn < N; ++nn)
                    for (std::size_t m = 0; m < HW; ++m)
                        for (std::size_t c = 0; c < C; ++c)
                            dx.data[(nn * HW + m) * C + c] = g.data[nn * C + c] * inv;
                accum(n.parent[0], std::move(dx));
                break;
            }
            case OpKind::AvgPool: {
                const std::size_t f = static_cast<std::size_t>(n.iattr0);
                accum(n.parent[0],
                      scale(upsample_nearest(g, f), 1.0 / static_cast<double>(f * f)));
                break;
            }
            case OpKind::Upsample: {
                const std::size_t f = static_cast<std::size_t>(n.iattr0);
                const Tensor& x = nodes_[n.parent[0]].value;
                Tensor dx(x.shape);
                const std::size_t N = x.shape[0], H = x.shape[1], W = x.shape[2], C = x.shape[3];
                for (std::size_t nn = 0; nn < N; ++nn)
                    for (std::size_t h = 0; h < H * f; ++h)
                        for (std::size_t w2 = 0; w2 < W * f; ++w2) {
                            const double* gs = &g.data[((nn * H * f + h) * W * f + w2) * C];
                            double* dst = &dx.at4(nn, h / f, w2 / f, 0);
                            for (std::size_t c = 0; c < C; ++c) dst[c] += gs[c];
                        }
                accum(n.parent[0], std::move(dx));
                break;
            }
            case OpKind::OuterFuse: {
                const Tensor& s = nodes_[n.parent[0]].value;
                const Tensor& v = nodes_[n.parent[1]].value;
                const std::size_t N = s.shape[0], HW = s.shape[1] * s.shape[2], C = v.shape[3];
                if (useful[n.parent[0]]) {
                    Tensor ds(s.shape);
                    for (std::size_t nn = 0; nn < N; ++nn)
                        for (std::size_t m = 0; m < HW; ++m) {
                            const double* gr = g.ptr() + (nn * HW + m) * C;
                            const double* vr = v.ptr() + nn * C;
                            double acc = 0.0;
                            for (std::size_t c = 0; c < C; ++c) acc += gr[c] * vr[c];
                            ds.data[nn * HW + m] = acc;
                        }
                    accum(n.parent[0], std::move(ds));
                }
                if (useful[n.parent[1]]) {
                    Tensor dv(v.shape);
                    for (std::size_t nn = 0; nn < N; ++nn)
                        for (std::size_t m = 0; m < HW; ++m) {
                            const double sv = s.data[nn * HW + m];
                            const double* gr = g.ptr() + (nn * HW + m) * C;
                            double* dst = dv.ptr() + nn * C;
                            for (std::size_t c = 0; c < C; ++c) dst[c] += sv * gr[c];
                        }
                    accum(n.parent[1], std::move(dv));
                }
                break;
            }
            case OpKind::SumChannels: {
                const Tensor& x = nodes_[n.parent[0]].value;
                Tensor dx(x.shape);
                const std::size_t M = x.size() / x.shape[3], C = x.shape[3];
                for (std::size_t m = 0; m < M; ++m)
                    for (std::size_t c = 0; c < C; ++c) dx.data[m * C + c] = g.data[m];
                accum(n.parent[0], std::move(dx));
                break;
            }
            case OpKind::SliceChannels: {
                const Tensor& x = nodes_[n.parent[0]].value;
                Tensor dx(x.shape);
                const std::size_t C = x.shape[3];
                const std::size_t Cs = static_cast<std::size_t>(n.iattr1 - n.iattr0);
                const std::size_t M = x.size() / C;
                for (std::size_t m = 0; m < M; ++m)
                    std::copy(g.ptr() + m * Cs, g.ptr() + (m + 1) * Cs,
                              dx.ptr() + m * C + static_cast<std::size_t>(n.iattr0));
                accum(n.parent[0], std::move(dx));
                break;
            }
            case OpKind::Unfold: {
                const Tensor& x = nodes_[n.parent[0]].value;
                accum(n.parent[0], fold_grad(g, x.shape, static_cast<std::size_t>(n.iattr0)));
                break;
            }
            case OpKind::Reshape: {
                accum(n.parent[0], sparta::reshape(g, nodes_[n.parent[0]].value.shape));
                break;
            }
            case OpKind::BatchNorm: {
                const Tensor& xhat = n.saved[0];
                const Tensor& inv_std = n.saved[1];
                const Tensor& gamma = nodes_[n.parent[1]].value;
                const std::size_t C = xhat.shape[3];
                const std::size_t M = xhat.size() / C;
                Tensor dgamma({1, 1, 1, C}), dbeta({1, 1, 1, C});
                for (std::size_t m = 0; m < M; ++m) {
                    const double* gr = g.ptr() + m * C;
                    const double* xh = xhat.ptr() + m * C;
                    for (std::size_t c = 0; c < C; ++c) {
                        dgamma.data[c] += gr[c] * xh[c];
                        dbeta.data[c] += gr[c];
                    }
                }
                if (useful[n.parent[0]]) {
                    Tensor dx(xhat.shape);
                    const double invM = 1.0 / static_cast<double>(M);
                    for (std::size_t m = 0; m < M; ++m) {
                        const double* gr = g.ptr() + m * C;
                        const double* xh = xhat.ptr() + m * C;
                        double* dst = dx.ptr() + m * C;
                        for (std::size_t c = 0; c < C; ++c)
                            dst[c] = gamma.data[c] * inv_std.data[c] *
                                     (gr[c] - invM * dbeta.data[c] -
                                      invM * xh[c] * dgamma.data[c]);
                    }
                    accum(n.parent[0], std::move(dx));
                }
                if (useful[n.parent[1]]) accum(n.parent[1], std::move(dgamma));
                if (useful[n.parent[2]]) accum(n.parent[2], std::move(dbeta));
                break;
            }
            case OpKind::CrossEntropy: {
                const Tensor& probs = n.saved[0];
                const std::size_t N = probs.shape[0], K = probs.shape[1];
                Tensor dz(probs.shape);
                const double gs = g.data[0] / static_cast<double>(N);
                for (std::size_t i = 0; i < N; ++i) {
                    const double* p = probs.ptr() + i * K;
                    double* d = dz.ptr() + i * K;
                    for (std::size_t k = 0; k < K; ++k) d[k] = gs * p[k];
                    d[static_cast<std::size_t>(n.labels[i])] -= gs;
                }
                accum(n.parent[0], std::move(dz));
                break;
            }
            case OpKind::SumAll: {
                accum(n.parent[0], Tensor::full(nodes_[n.parent[0]].value.shape, g.data[0]));
                break;
            }
            case OpKind::Leaf:
                break;
        }
    }

    std::map<NodeId, Tensor> grads;
    for (const NodeId id : wrt) {
        if (adj[id])
            grads.emplace(id, std::move(*adj[id]));
        else
            grads.emplace(id, Tensor::zeros(nodes_[id].value.shape));
    }
    return grads;
}

// ---------------------------------------------------------------------------
// Finite-difference oracle.
// ---------------------------------------------------------------------------

/// Central differences (f(x+h e_p) - f(x-h e_p)) / (2h) per element. The
/// oracle stays independent of the tape: it only needs a scalar-valued f.
inline Tensor finite_diff_grad(const std::function<double(const Tensor&)>& f, const Tensor& x,
                               double h = 1e-6) {
    if (h <= 0.0) throw ValueError("finite_diff_grad: step must be positive");
    Tensor g(x.shape);
    Tensor probe = x;
    for (std::size_t p = 0; p < x.size(); ++p) {
        const double orig = probe.data[p];
        probe.data[p] = orig + h;
        const double up = f(probe);
        probe.data[p] = orig - h;
        const double down = f(probe);
        probe.data[p] = orig;
        g.data[p] = (up - down) / (2.0 * h);
    }
    return g;
}

/// Elementwise relative error with floor max(|a|, |n|, floor_).
inline double max_relative_error(const Tensor& analytic, const Tensor& numeric,
                                 double floor_ = 1e-8) {
    if (!analytic.same_shape(numeric))
        throw ShapeError("max_relative_error: shape mismatch " + shape_str(analytic.shape) +
                         " vs " + shape_str(numeric.shape));
    double worst = 0.0;
    for (std::size_t i = 0; i < analytic.size(); ++i) {
        const double a = analytic.data[i];
        const double n = numeric.data[i];
        const double denom = std::max({std::abs(a), std::abs(n), floor_});
        worst = std::max(worst, std::abs(a - n) / denom);
    }
    return worst;
}

} // namespace sparta
