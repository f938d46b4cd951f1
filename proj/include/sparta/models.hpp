#pragma once

#include <map>
#include <string>
#include <utility>
#include <vector>

#include "sparta/activations.hpp"
#include "sparta/autodiff.hpp"
#include "sparta/rng.hpp"
#include "sparta/tensor.hpp"

namespace sparta {

// ---------------------------------------------------------------------------
// Backbone configuration: CIFAR-style residual nets. The stem is a 3x3
// convolution to the first group's width; each group's first block (after
// the first group) downsamples by stride 2 with a 1x1 projection shortcut.
// ---------------------------------------------------------------------------

struct BackboneConfig {
    std::vector<std::pair<int, int>> groups; // (blocks, channels)
    std::size_t input_h = 32, input_w = 32, input_c = 3;
    int num_classes = 10;
    bool batchnorm = true;
    double bn_eps = 1e-5;
    double bn_momentum = 0.9; // running = m*running + (1-m)*batch

    static BackboneConfig resnet8() {
        BackboneConfig c;
        c.groups = {{1, 16}, {1, 32}, {1, 64}};
        return c;
    }

    static BackboneConfig resnet18() {
        BackboneConfig c;
        c.groups = {{2, 64}, {2, 128}, {2, 256}, {2, 512}};
        return c;
    }

    void validate() const {
        if (groups.empty()) throw ValueError("backbone: at least one group required");
        int prev = 0;
        for (const auto& [blocks, channels] : groups) {
            if (blocks < 1 || channels < 1)
                throw ValueError("backbone: blocks and channels must be >= 1");
            if (channels < prev)
                throw ValueError("backbone: channels must be nondecreasing across groups");
            prev = channels;
        }
        if (num_classes < 2) throw ValueError("backbone: need at least 2 classes");
    }
};

struct Slot {
    int group = 1; // 1-based, matching the G_i.B_j notation
    int block = 1;

    std::string path() const {
        return detail::concat("g", group, ".b", block);
    }
    std::string display() const {
        return detail::concat("G", group, ".B", block);
    }
    bool operator<(const Slot& o) const {
        return group != o.group ? group < o.group : block < o.block;
    }
    bool operator==(const Slot& o) const { return group == o.group && block == o.block; }
};

/// Which blocks' last (post-residual) activation is replaced, and by what.
struct ReplacementStrategy {
    std::vector<Slot> slots;
    ActivationKind activation;

    static ReplacementStrategy none() { return {}; }

    /// G_{1..G}.B_last: the last block of every group.
    static ReplacementStrategy all_group_outputs(const BackboneConfig& cfg,
                                                 ActivationKind kind) {
        ReplacementStrategy s;
        s.activation = kind;
        for (std::size_t g = 0; g < cfg.groups.size(); ++g)
            s.slots.push_back({static_cast<int>(g + 1), cfg.groups[g].first});
        return s;
    }

    bool applies_to(int group, int block) const {
        for (const Slot& s : slots)
            if (s.group == group && s.block == block) return true;
        return false;
    }

    void validate(const BackboneConfig& cfg) const {
        for (const Slot& s : slots) {
            if (s.group < 1 || static_cast<std::size_t>(s.group) > cfg.groups.size() ||
                s.block < 1 || s.block > cfg.groups[s.group - 1].first)
                throw ValueError("strategy: slot " + s.display() + " does not exist in backbone");
        }
    }
};

// ---------------------------------------------------------------------------
// Parameter store.
// ---------------------------------------------------------------------------

struct ParamEntry {
    Tensor value;
    bool trainable = true;
    bool is_stat = false; // batch-norm running statistics
};

struct ModelState {
    std::map<std::string, ParamEntry> entries;

    Tensor& at(const std::string& key) {
        auto it = entries.find(key);
        if (it == entries.end()) throw Error("model state: unknown key " + key);
        return it->second.value;
    }
    const Tensor& at(const std::string& key) const {
        auto it = entries.find(key);
        if (it == entries.end()) throw Error("model state: unknown key " + key);
        return it->second.value;
    }

    /// Total element count over parameters (running stats excluded).
    std::size_t parameter_count() const {
        std::size_t n = 0;
        for (const auto& [key, e] : entries)
            if (!e.is_stat) n += e.value.size();
        return n;
    }
};

struct Model {
    BackboneConfig cfg;
    ReplacementStrategy strategy;
    ModelState state;
};

// ---------------------------------------------------------------------------
// Construction.
// ---------------------------------------------------------------------------

namespace detail {

inline void add_param(ModelState& st, const std::string& key, Tensor v, bool trainable = true,
                      bool is_stat = false) {
    st.entries[key] = ParamEntry{std::move(v), trainable, is_stat};
}

inline void init_conv(ModelState& st, const std::string& prefix, std::size_t k, std::size_t cin,
                      std::size_t cout, bool bias, std::uint64_t seed) {
    Rng rng(derive_seed(seed, "init/" + prefix));
    add_param(st, prefix + ".w", DSCANetParams::gaussian_weights({k, k, cin, cout}, rng));
    if (bias) add_param(st, prefix + ".b", Tensor({cout}));
}

inline void init_bn(ModelState& st, const std::string& prefix, std::size_t c) {
    add_param(st, prefix + ".gamma", Tensor::full({1, 1, 1, c}, 1.0));
    add_param(st, prefix + ".beta", Tensor({1, 1, 1, c}));
    add_param(st, prefix + ".mean", Tensor({1, 1, 1, c}), false, true);
    add_param(st, prefix + ".var", Tensor::full({1, 1, 1, c}, 1.0), false, true);
}

inline void init_dscanet(ModelState& st, const std::string& prefix, int channels,
                         const ActivationKind& kind, std::uint64_t seed) {
    Rng rng(derive_seed(seed, "init/" + prefix));
    const DSCANetParams p = DSCANetParams::init(channels, kind, rng);
    add_param(st, prefix + ".conv1_w", p.conv1_w);
    add_param(st, prefix + ".conv1_b", p.conv1_b);
    add_param(st, prefix + ".conv2_w", p.conv2_w);
    add_param(st, prefix + ".conv2_b", p.conv2_b);
    add_param(st, prefix + ".conv3_w", p.conv3_w);
    add_param(st, prefix + ".conv3_b", p.conv3_b);
    add_param(st, prefix + ".conv4_w", p.conv4_w);
    add_param(st, prefix + ".conv4_b", p.conv4_b);
    if (p.use_dpnet) {
        add_param(st, prefix + ".dp_w", p.dp_w);
        add_param(st, prefix + ".dp_b", p.dp_b);
    } else {
        add_param(st, prefix + ".conv5_w", p.conv5_w);
        add_param(st, prefix + ".conv5_b", p.conv5_b);
    }
}

} // namespace detail

/// Deterministic given the seed: every tensor draws from a stream derived
/// from its own key, so two builds with equal seeds are bitwise identical.
inline Model build_model(const BackboneConfig& cfg, const ReplacementStrategy& strategy,
                         std::uint64_t seed) {
    cfg.validate();
    strategy.validate(cfg);
    Model m;
    m.cfg = cfg;
    m.strategy = strategy;
    ModelState& st = m.state;
    const bool bn = cfg.batchnorm;

    const std::size_t c0 = static_cast<std::size_t>(cfg.groups[0].second);
    detail::init_conv(st, "stem.conv", 3, cfg.input_c, c0, !bn, seed);
    if (bn) detail::init_bn(st, "stem.bn", c0);

    std::size_t in_ch = c0;
    for (std::size_t g = 0; g < cfg.groups.size(); ++g) {
        const auto [blocks, channels] = cfg.groups[g];
        const std::size_t out_ch = static_cast<std::size_t>(channels);
        for (int b = 1; b <= blocks; ++b) {
            const std::string prefix = detail::concat("g", g + 1, ".b", b);
            const int stride = (b == 1 && g > 0) ? 2 : 1;
            detail::init_conv(st, prefix + ".conv1", 3, in_ch, out_ch, !bn, seed);
            if (bn) detail::init_bn(st, prefix + ".bn1", out_ch);
            detail::init_conv(st, prefix + ".conv2", 3, out_ch, out_ch, !bn, seed);
            if (bn) detail::init_bn(st, prefix + ".bn2", out_ch);
            if (stride != 1 || in_ch != out_ch) {
                detail::init_conv(st, prefix + ".short.conv", 1, in_ch, out_ch, !bn, seed);
                if (bn) detail::init_bn(st, prefix + ".short.bn", out_ch);
            }
            if (strategy.applies_to(static_cast<int>(g + 1), b) &&
                strategy.activation.is_sparta())
                detail::init_dscanet(st, prefix + ".act", static_cast<int>(out_ch),
                                     strategy.activation, seed);
            in_ch = out_ch;
        }
    }
    detail::init_conv(st, "head.fc", 1, in_ch, static_cast<std::size_t>(cfg.num_classes), true,
                      seed);
    return m;
}

// ---------------------------------------------------------------------------
// Forward graph.
// ---------------------------------------------------------------------------

enum class Mode { Train, Eval };

struct ForwardOptions {
    Mode mode = Mode::Eval;
    bool input_grad = false;
    bool param_grads = false;
};

struct Forward {
    Tape tape;
    NodeId input = -1;
    NodeId logits = -1;
    std::map<std::string, NodeId> param_ids;
    std::map<std::string, std::pair<NodeId, NodeId>> slot_taps; // slot -> (pre, post)
};

namespace detail {

struct GraphBuilder {
    Model& model;
    const ForwardOptions& opts;
    Forward& fwd;

    NodeId param(const std::string& key) {
        const ParamEntry& e = [&]() -> const ParamEntry& {
            auto it = model.state.entries.find(key);
            if (it == model.state.entries.end())
                throw Error("forward: missing parameter " + key);
            return it->second;
        }();
        const NodeId id = fwd.tape.leaf(e.value, e.trainable && opts.param_grads);
        fwd.param_ids[key] = id;
        return id;
    }

    NodeId conv(NodeId x, const std::string& prefix, const ConvSpec& cs, bool bias) {
        const NodeId w = param(prefix + ".w");
        const NodeId b = bias ? param(prefix + ".b") : -1;
        return fwd.tape.conv2d(x, w, b, cs);
    }

    NodeId bn(NodeId x, const std::string& prefix) {
        Tape& t = fwd.tape;
        if (opts.mode == Mode::Train) {
            const NodeId gamma = param(prefix + ".gamma");
            const NodeId beta = param(prefix + ".beta");
            const NodeId out = t.batch_norm(x, gamma, beta, model.cfg.bn_eps);
            const auto [batch_mean, batch_var] = t.batch_stats(out);
            const double m = model.cfg.bn_momentum;
            Tensor& rm = model.state.at(prefix + ".mean");
            Tensor& rv = model.state.at(prefix + ".var");
            for (std::size_t i = 0; i < rm.size(); ++i) {
                rm.data[i] = m * rm.data[i] + (1.0 - m) * batch_mean.data[i];
                rv.data[i] = m * rv.data[i] + (1.0 - m) * batch_var.data[i];
            }
            return out;
        }
        // eval: affine transform from the running statistics
        const Tensor& gamma = model.state.at(prefix + ".gamma");
        const Tensor& beta = model.state.at(prefix + ".beta");
        const Tensor& mean = model.state.at(prefix + ".mean");
        const Tensor& var = model.state.at(prefix + ".var");
        Tensor a(gamma.shape), b(gamma.shape);
        for (std::size_t i = 0; i < gamma.size(); ++i) {
            a.data[i] = gamma.data[i] / std::sqrt(var.data[i] + model.cfg.bn_eps);
            b.data[i] = beta.data[i] - mean.data[i] * a.data[i];
        }
        return t.add(t.mul(x, t.constant(std::move(a))), t.constant(std::move(b)));
    }

    DscaNodes dsca_nodes(const std::string& prefix, int channels) {
        const ActivationKind& kind = model.strategy.activation;
        DscaNodes n;
        n.channels = channels;
        n.c_o = std::min(kind.c_o_cap, channels);
        n.kernel = kind.kernel;
        n.use_dpnet = kind.uses_dpnet();
        n.conv1_w = param(prefix + ".conv1_w");
        n.conv1_b = param(prefix + ".conv1_b");
        n.conv2_w = param(prefix + ".conv2_w");
        n.conv2_b = param(prefix + ".conv2_b");
        n.conv3_w = param(prefix + ".conv3_w");
        n.conv3_b = param(prefix + ".conv3_b");
        n.conv4_w = param(prefix + ".conv4_w");
        n.conv4_b = param(prefix + ".conv4_b");
        if (n.use_dpnet) {
            n.dp_w = param(prefix + ".dp_w");
            n.dp_b = param(prefix + ".dp_b");
        } else {
            n.conv5_w = param(prefix + ".conv5_w");
            n.conv5_b = param(prefix + ".conv5_b");
        }
        return n;
    }

    NodeId slot_activation(NodeId x, int group, int block, int channels) {
        Tape& t = fwd.tape;
        const std::string slot = detail::concat("g", group, ".b", block);
        NodeId out;
        if (model.strategy.applies_to(group, block)) {
            const ActivationKind& kind = model.strategy.activation;
            if (kind.is_sparta()) {
                const DscaNodes nodes = dsca_nodes(slot + ".act", channels);
                out = activation_graph(t, x, kind, &nodes);
            } else {
                out = activation_graph(t, x, kind);
            }
        } else {
            out = t.relu(x);
        }
        fwd.slot_taps[slot] = {x, out};
        return out;
    }

    NodeId build(NodeId x) {
        Tape& t = fwd.tape;
        const BackboneConfig& cfg = model.cfg;
        const bool bn = cfg.batchnorm;

        // pixels arrive in [0, 255]; normalization is part of the model so
        // attack budgets stay in raw pixel units
        NodeId h = t.affine(x, 1.0 / 255.0, -0.5);

        h = conv(h, "stem.conv", ConvSpec{1, 1}, !bn);
        if (bn) h = this->bn(h, "stem.bn");
        h = t.relu(h);

        std::size_t in_ch = static_cast<std::size_t>(cfg.groups[0].second);
        for (std::size_t g = 0; g < cfg.groups.size(); ++g) {
            const auto [blocks, channels] = cfg.groups[g];
            const std::size_t out_ch = static_cast<std::size_t>(channels);
            for (int b = 1; b <= blocks; ++b) {
                const std::string prefix = detail::concat("g", g + 1, ".b", b);
                const int stride = (b == 1 && g > 0) ? 2 : 1;
                NodeId main = conv(h, prefix + ".conv1", ConvSpec{stride, 1}, !bn);
                if (bn) main = this->bn(main, prefix + ".bn1");
                main = t.relu(main);
                main = conv(main, prefix + ".conv2", ConvSpec{1, 1}, !bn);
                if (bn) main = this->bn(main, prefix + ".bn2");
                NodeId shortcut = h;
                if (stride != 1 || in_ch != out_ch) {
                    shortcut = conv(h, prefix + ".short.conv", ConvSpec{stride, 0}, !bn);
                    if (bn) shortcut = this->bn(shortcut, prefix + ".short.bn");
                }
                const NodeId summed = t.add(main, shortcut);
                h = slot_activation(summed, static_cast<int>(g + 1), b,
                                    static_cast<int>(out_ch));
                in_ch = out_ch;
            }
        }

        h = t.global_avg_pool(h);
        h = conv(h, "head.fc", ConvSpec{1, 0}, true);
        const Tensor& hv = t.value(h);
        return t.reshape(h, {hv.shape[0], hv.shape[3]});
    }
};

} // namespace detail

/// Builds the compute graph for a batch. Train mode updates the batch-norm
/// running statistics as a side effect and therefore needs exclusive access
/// to the model; eval mode leaves the model untouched.
inline Forward forward_graph(Model& model, const Tensor& x, const ForwardOptions& opts) {
    if (x.rank() != 4 || x.shape[1] != model.cfg.input_h || x.shape[2] != model.cfg.input_w ||
        x.shape[3] != model.cfg.input_c)
        throw ShapeError(detail::concat(
            "forward: input shape ", shape_str(x.shape), " does not match configured ",
            model.cfg.input_h, "x", model.cfg.input_w, "x", model.cfg.input_c));
    Forward fwd;
    fwd.input = fwd.tape.leaf(x, opts.input_grad);
    detail::GraphBuilder builder{model, opts, fwd};
    fwd.logits = builder.build(fwd.input);
    return fwd;
}

/// Eager forward: logits only.
inline Tensor forward(Model& model, const Tensor& x, Mode mode = Mode::Eval) {
    ForwardOptions opts;
    opts.mode = mode;
    Forward f = forward_graph(model, x, opts);
    return f.tape.value(f.logits);
}

// ---------------------------------------------------------------------------
// Transfer: freezing and transplanting activation sub-networks.
// ---------------------------------------------------------------------------

/// Marks every DSCANet parameter non-trainable. Backbone keys unaffected.
inline void freeze_activations(Model& model) {
    bool any = false;
    for (auto& [key, e] : model.state.entries) {
        if (key.find(".act.") != std::string::npos) {
            if (!e.is_stat) e.trainable = false;
            any = true;
        }
    }
    if (!any) throw Error("freeze_activations: model has no Sparta slots");
}

/// Copies the donor's DSCANet parameters into the recipient's mapped slots
/// and freezes them. Mapped slots must have equal channel widths.
inline void transplant_activations(const Model& donor, Model& recipient,
                                   const std::vector<std::pair<Slot, Slot>>& slot_map) {
    for (const auto& [from, to] : slot_map) {
        const std::string src = from.path() + ".act.";
        const std::string dst = to.path() + ".act.";
        // collect donor keys under the slot
        std::vector<std::string> donor_keys;
        for (const auto& [key, e] : donor.state.entries)
            if (key.rfind(src, 0) == 0) donor_keys.push_back(key.substr(src.size()));
        if (donor_keys.empty())
            throw Error("transplant: donor has no activation parameters at slot " +
                        from.display());
        for (const std::string& suffix : donor_keys) {
            auto it = recipient.state.entries.find(dst + suffix);
            if (it == recipient.state.entries.end())
                throw Error("transplant: recipient has no activation parameters at slot " +
                            to.display());
            const Tensor& sv = donor.state.at(src + suffix);
            if (it->second.value.shape != sv.shape)
                throw ShapeError(detail::concat(
                    "transplant: width mismatch at slot ", to.display(), " (donor ",
                    shape_str(sv.shape), " vs recipient ",
                    shape_str(it->second.value.shape), " for ", suffix, ")"));
            it->second.value = sv;
            it->second.trainable = false;
        }
    }
}

// ---------------------------------------------------------------------------
// Checkpoints: text manifest (key, flags, shape per line), a checksum line,
// then the concatenated tensor serializations.
// ---------------------------------------------------------------------------

namespace detail {

inline std::uint64_t fnv1a64_bytes(const std::string& bytes) {
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (const char c : bytes) {
        h ^= static_cast<unsigned char>(c);
        h *= 0x100000001b3ULL;
    }
    return h;
}

} // namespace detail

inline void save_checkpoint(const std::string& path, const ModelState& state) {
    std::ostringstream payload(std::ios::binary);
    for (const auto& [key, e] : state.entries) write_tensor(payload, e.value);
    const std::string blob = payload.str();

    std::ofstream os(path, std::ios::binary);
    if (!os) throw IoError("cannot open for writing: " + path);
    os << "sparta-checkpoint v1\n";
    os << "keys " << state.entries.size() << "\n";
    for (const auto& [key, e] : state.entries) {
        os << key << " " << (e.trainable ? 1 : 0) << " " << (e.is_stat ? 1 : 0) << " "
           << e.value.rank();
        for (const std::size_t ext : e.value.shape) os << " " << ext;
        os << "\n";
    }
    char hex[17];
    std::snprintf(hex, sizeof hex, "%016llx",
                  static_cast<unsigned long long>(detail::fnv1a64_bytes(blob)));
    os << "checksum " << hex << "\n";
    os.write(blob.data(), static_cast<std::streamsize>(blob.size()));
}

inline ModelState load_checkpoint(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw IoError("cannot open for reading: " + path);
    std::string line;
    if (!std::getline(is, line) || line != "sparta-checkpoint v1")
        throw IoError("checkpoint: bad magic in " + path);
    std::size_t nkeys = 0;
    if (!std::getline(is, line) || std::sscanf(line.c_str(), "keys %zu", &nkeys) != 1)
        throw IoError("checkpoint: missing key count");
    struct Meta {
        std::string key;
        bool trainable, is_stat;
        Shape shape;
    };
    std::vector<Meta> metas;
    metas.reserve(nkeys);
    for (std::size_t i = 0; i < nkeys; ++i) {
        if (!std::getline(is, line)) throw IoError("checkpoint: truncated manifest");
        std::istringstream ls(line);
        Meta m;
        int trainable = 0, stat = 0;
        std::size_t rank = 0;
        if (!(ls >> m.key >> trainable >> stat >> rank))
            throw IoError("checkpoint: bad manifest line: " + line);
        m.trainable = trainable != 0;
        m.is_stat = stat != 0;
        m.shape.resize(rank);
        for (std::size_t r = 0; r < rank; ++r)
            if (!(ls >> m.shape[r])) throw IoError("checkpoint: bad shape in line: " + line);
        metas.push_back(std::move(m));
    }
    if (!std::getline(is, line) || line.rfind("checksum ", 0) != 0)
        throw IoError("checkpoint: missing checksum line");
    const std::string want = line.substr(9);
    std::string blob((std::istreambuf_iterator<char>(is)), std::istreambuf_iterator<char>());
    char hex[17];
    std::snprintf(hex, sizeof hex, "%016llx",
                  static_cast<unsigned long long>(detail::fnv1a64_bytes(blob)));
    if (want != hex) throw IoError("checkpoint: checksum mismatch in " + path);

    std::istringstream payload(blob, std::ios::binary);
    ModelState st;
    for (const Meta& m : metas) {
        Tensor t = read_tensor(payload);
        if (t.shape != m.shape)
            throw IoError("checkpoint: payload shape disagrees with manifest for " + m.key);
        st.entries[m.key] = ParamEntry{std::move(t), m.trainable, m.is_stat};
    }
    return st;
}

} // namespace sparta
