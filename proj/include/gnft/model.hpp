#pragma once

// Differentiable keyword classifiers with per-neuron addressable convolution
// parameters, reversible neuron masks and exact reverse-mode gradients.

#include <algorithm>
#include <cmath>
#include <compare>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <cblas.h>
#include <random>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include "gnft/corpus.hpp"
#include "gnft/error.hpp"
#include "gnft/hash.hpp"

namespace gnft {

/// Output channel `channel` of the `layer`-th convolution (both 0-based,
/// `layer` counts convolution layers only).
struct NeuronId {
    std::size_t layer = 0;
    std::size_t channel = 0;
    auto operator<=>(const NeuronId&) const = default;
};

inline std::string to_string(const NeuronId& id) {
    return "conv" + std::to_string(id.layer) + ":" + std::to_string(id.channel);
}

struct Shape3 {
    std::size_t c = 1, h = 1, w = 1;
    std::size_t size() const { return c * h * w; }
    bool operator==(const Shape3&) const = default;
};

/// Architecture descriptor; fully determines parameter layout.
struct ModelSpec {
    std::string arch = "small_cnn";  // small_cnn | mlp
    Shape3 input{1, 40, 32};
    std::vector<std::string> classes;
    std::vector<std::size_t> conv_channels{16, 32};  // small_cnn only
    std::size_t hidden = 64;                         // mlp only
    std::string head = "gap";                        // small_cnn: gap | flatten

    bool operator==(const ModelSpec&) const = default;

    std::string describe() const {
        std::ostringstream os;
        os << "arch=" << arch << ";input=" << input.c << 'x' << input.h << 'x' << input.w << ";channels=";
        for (std::size_t i = 0; i < conv_channels.size(); ++i) os << (i ? "," : "") << conv_channels[i];
        os << ";hidden=" << hidden << ";head=" << head << ";classes=";
        for (std::size_t i = 0; i < classes.size(); ++i) os << (i ? "," : "") << classes[i];
        return os.str();
    }

    static ModelSpec parse(const std::string& text) {
        ModelSpec s;
        s.conv_channels.clear();
        std::map<std::string, std::string> kv;
        std::stringstream ss(text);
        std::string item;
        while (std::getline(ss, item, ';')) {
            const auto eq = item.find('=');
            if (eq == std::string::npos) throw FormatError("bad model descriptor field: " + item);
            kv[item.substr(0, eq)] = item.substr(eq + 1);
        }
        auto split = [](const std::string& v, char sep) {
            std::vector<std::string> out;
            std::stringstream s2(v);
            std::string f;
            while (std::getline(s2, f, sep))
                if (!f.empty()) out.push_back(f);
            return out;
        };
        try {
            s.arch = kv.at("arch");
            auto dims = split(kv.at("input"), 'x');
            if (dims.size() != 3) throw FormatError("bad input shape in model descriptor");
            s.input = {std::stoul(dims[0]), std::stoul(dims[1]), std::stoul(dims[2])};
            for (auto& c : split(kv.at("channels"), ',')) s.conv_channels.push_back(std::stoul(c));
            s.hidden = std::stoul(kv.at("hidden"));
            s.head = kv.at("head");
            s.classes = split(kv.at("classes"), ',');
        } catch (const std::out_of_range&) {
            throw FormatError("incomplete model descriptor: " + text);
        } catch (const std::invalid_argument&) {
            throw FormatError("non-numeric field in model descriptor: " + text);
        }
        return s;
    }
};

enum class LayerKind { conv, relu, maxpool, avgpool, flatten, dense };

struct Layer {
    LayerKind kind;
    Shape3 in, out;
    std::size_t kernel = 0;       // conv
    std::size_t w_offset = 0;     // conv/dense weights
    std::size_t b_offset = 0;     // conv/dense biases
    std::size_t conv_ordinal = 0; // conv
    std::size_t mask_offset = 0;  // conv
};

/// Parameter ranges owned by one conv neuron: weights [w, w+w_len) and a bias.
struct NeuronBlock {
    std::size_t w_offset;
    std::size_t w_len;
    std::size_t b_offset;
};

struct LossResult {
    double loss = 0.0;  // mean cross-entropy
    std::vector<std::string> predictions;
    std::vector<double> per_sample;
};

struct GradientReport {
    double loss = 0.0;
    std::vector<double> full;
    std::map<NeuronId, double> per_neuron_norm;  // conv neurons
    std::vector<double> head_block_norms;        // one per dense output unit (weights + bias)
};

/// Per-sample activations retained for the backward pass.
struct Tape {
    std::vector<std::vector<double>> acts;
    std::vector<std::vector<std::uint32_t>> argmax;
    std::vector<std::vector<double>> cols;  // im2col buffers of conv layers

    /// Sizes the tape for `model_layers` layers without touching stored activations.
    void reserve_layers(std::size_t model_layers) {
        acts.resize(model_layers + 1);
        argmax.resize(model_layers);
        cols.resize(model_layers);
    }
};

class Model {
public:
    Model() = default;

    explicit Model(ModelSpec spec) : spec_(std::move(spec)) {
        detail::require(spec_.classes.size() >= 2, "a model needs at least 2 classes");
        detail::require(spec_.input.size() > 0, "input shape must be nonempty");
        Shape3 s = spec_.input;
        std::size_t nparams = 0, nmask = 0, conv_ord = 0;
        auto dense = [&](std::size_t out) {
            Layer l{LayerKind::dense, Shape3{s.size(), 1, 1}, Shape3{out, 1, 1}};
            l.w_offset = nparams;
            nparams += out * s.size();
            l.b_offset = nparams;
            nparams += out;
            layers_.push_back(l);
            s = l.out;
        };
        if (spec_.arch == "small_cnn") {
            detail::require(!spec_.conv_channels.empty(), "small_cnn needs at least one conv layer");
            for (auto ch : spec_.conv_channels) {
                detail::require(ch >= 1, "conv channel count must be >= 1");
                Layer c{LayerKind::conv, s, Shape3{ch, s.h, s.w}};
                c.kernel = 3;
                c.w_offset = nparams;
                nparams += ch * s.c * 9;
                c.b_offset = nparams;
                nparams += ch;
                c.conv_ordinal = conv_ord++;
                c.mask_offset = nmask;
                nmask += ch;
                layers_.push_back(c);
                s = c.out;
                layers_.push_back({LayerKind::relu, s, s});
                if (s.h >= 2 && s.w >= 2) {
                    Layer p{LayerKind::maxpool, s, Shape3{s.c, s.h / 2, s.w / 2}};
                    layers_.push_back(p);
                    s = p.out;
                }
            }
            if (spec_.head == "gap") {
                layers_.push_back({LayerKind::avgpool, s, Shape3{s.c, 1, 1}});
            } else if (spec_.head != "flatten") {
                throw ArgumentError("unsupported head '" + spec_.head + "' (expected gap or flatten)");
            }
            s = layers_.back().out;
            layers_.push_back({LayerKind::flatten, s, Shape3{s.size(), 1, 1}});
            s = layers_.back().out;
            dense(spec_.classes.size());
        } else if (spec_.arch == "mlp") {
            detail::require(spec_.hidden >= 1, "mlp hidden width must be >= 1");
            layers_.push_back({LayerKind::flatten, s, Shape3{s.size(), 1, 1}});
            s = layers_.back().out;
            dense(spec_.hidden);
            layers_.push_back({LayerKind::relu, s, s});
            dense(spec_.classes.size());
        } else {
            throw ArgumentError("unsupported architecture '" + spec_.arch + "' (expected small_cnn or mlp)");
        }
        params_.assign(nparams, 0.0);
        mask_.assign(nmask, 0);
        for (const auto& l : layers_)
            if (l.kind == LayerKind::conv) conv_layers_.push_back(&l - layers_.data());
    }

    const ModelSpec& spec() const { return spec_; }
    const std::vector<Layer>& layers() const { return layers_; }
    std::size_t param_count() const { return params_.size(); }
    std::span<const double> params() const { return params_; }
    std::span<double> params() { return params_; }
    std::size_t n_classes() const { return spec_.classes.size(); }
    std::size_t n_conv_layers() const { return conv_layers_.size(); }
    std::size_t conv_channels(std::size_t conv_layer) const { return conv_layer_ref(conv_layer).out.c; }
    std::size_t embedding_dim() const { return layers_.back().in.size(); }
    /// Index into layers() of the given conv layer.
    std::size_t conv_layer_index(std::size_t conv_layer) const {
        detail::require(conv_layer < conv_layers_.size(), "conv layer index out of range");
        return conv_layers_[conv_layer];
    }

    /// All conv neurons in (layer, channel) order.
    std::vector<NeuronId> neurons() const {
        std::vector<NeuronId> out;
        for (std::size_t i = 0; i < conv_layers_.size(); ++i)
            for (std::size_t j = 0; j < conv_channels(i); ++j) out.push_back({i, j});
        return out;
    }

    bool valid(NeuronId id) const { return id.layer < conv_layers_.size() && id.channel < conv_channels(id.layer); }

    NeuronBlock block(NeuronId id) const {
        check(id);
        const auto& l = conv_layer_ref(id.layer);
        const std::size_t len = l.in.c * l.kernel * l.kernel;
        return {l.w_offset + id.channel * len, len, l.b_offset + id.channel};
    }

    bool masked(NeuronId id) const {
        check(id);
        return mask_[conv_layer_ref(id.layer).mask_offset + id.channel] != 0;
    }
    void set_masked(NeuronId id, bool m) {
        check(id);
        mask_[conv_layer_ref(id.layer).mask_offset + id.channel] = m ? 1 : 0;
    }
    const std::vector<std::uint8_t>& mask_state() const { return mask_; }
    void set_mask_state(std::vector<std::uint8_t> m) {
        detail::require(m.size() == mask_.size(), "mask vector size mismatch");
        mask_ = std::move(m);
    }

    std::size_t class_index(const std::string& label) const {
        for (std::size_t i = 0; i < spec_.classes.size(); ++i)
            if (spec_.classes[i] == label) return i;
        throw ArgumentError("label '" + label + "' is not a model class");
    }

    /// Seeded He-uniform weights, zero biases.
    void initialize(std::uint64_t seed) {
        std::mt19937_64 rng(derive_seed(seed, "init"));
        for (const auto& l : layers_) {
            if (l.kind != LayerKind::conv && l.kind != LayerKind::dense) continue;
            const std::size_t fan_in = l.kind == LayerKind::conv ? l.in.c * l.kernel * l.kernel : l.in.size();
            const std::size_t n_w = l.b_offset - l.w_offset;
            const double bound = std::sqrt(6.0 / double(fan_in));
            std::uniform_real_distribution<double> u(-bound, bound);
            for (std::size_t k = 0; k < n_w; ++k) params_[l.w_offset + k] = u(rng);
            for (std::size_t k = 0; k < l.out.c; ++k) params_[l.b_offset + k] = 0.0;
        }
    }

    void check_input(const FeatureMap& x) const {
        if (x.values.size() != spec_.input.size() || x.n_mfcc * x.n_frames != spec_.input.size() ||
            (spec_.input.c == 1 && (x.n_mfcc != spec_.input.h || x.n_frames != spec_.input.w)))
            throw ArgumentError("input '" + x.id + "' has shape " + std::to_string(x.n_mfcc) + "x" +
                                std::to_string(x.n_frames) + ", model expects " + std::to_string(spec_.input.h) +
                                "x" + std::to_string(spec_.input.w));
    }

    /// Runs one sample forward, recording activations in `tape`.
    void forward(std::span<const double> x, Tape& tape) const {
        tape.acts.resize(layers_.size() + 1);
        tape.argmax.resize(layers_.size());
        tape.cols.resize(layers_.size());
        tape.acts[0].assign(x.begin(), x.end());
        forward_from(0, tape);
    }

    /// Recomputes layers [start, end) from the activation already stored in
    /// tape.acts[start].
    void forward_from(std::size_t start, Tape& tape) const {
        for (std::size_t li = start; li < layers_.size(); ++li) {
            const auto& l = layers_[li];
            const auto& in = tape.acts[li];
            auto& out = tape.acts[li + 1];
            out.assign(l.out.size(), 0.0);
            switch (l.kind) {
                case LayerKind::conv: conv_forward(l, in, out, tape.cols[li]); break;
                case LayerKind::relu:
                    for (std::size_t k = 0; k < in.size(); ++k) out[k] = in[k] > 0.0 ? in[k] : 0.0;
                    break;
                case LayerKind::maxpool: pool_forward(l, in, out, tape.argmax[li]); break;
                case LayerKind::avgpool: {
                    const std::size_t hw = l.in.h * l.in.w;
                    for (std::size_t c = 0; c < l.in.c; ++c) {
                        double acc = 0.0;
                        for (std::size_t k = 0; k < hw; ++k) acc += in[c * hw + k];
                        out[c] = acc / double(hw);
                    }
                    break;
                }
                case LayerKind::flatten: out = in; break;
                case LayerKind::dense: dense_forward(l, in, out); break;
            }
        }
    }

    /// Accumulates scale * dL/dtheta into `grad` given dL/dlogits.
    void backward(const Tape& tape, std::span<const double> dlogits, std::span<double> grad, double scale = 1.0) const {
        std::vector<double> delta(dlogits.begin(), dlogits.end());
        for (auto& d : delta) d *= scale;
        std::vector<double> dprev;
        for (std::size_t li = layers_.size(); li-- > 0;) {
            const auto& l = layers_[li];
            const auto& in = tape.acts[li];
            const bool need_input_grad = li > 0;
            dprev.assign(need_input_grad ? l.in.size() : 0, 0.0);
            switch (l.kind) {
                case LayerKind::conv: conv_backward(l, tape.cols[li], delta, grad, dprev, need_input_grad); break;
                case LayerKind::relu:
                    if (need_input_grad)
                        for (std::size_t k = 0; k < in.size(); ++k) dprev[k] = in[k] > 0.0 ? delta[k] : 0.0;
                    break;
                case LayerKind::maxpool:
                    if (need_input_grad)
                        for (std::size_t k = 0; k < delta.size(); ++k) dprev[tape.argmax[li][k]] += delta[k];
                    break;
                case LayerKind::avgpool:
                    if (need_input_grad) {
                        const std::size_t hw = l.in.h * l.in.w;
                        for (std::size_t c = 0; c < l.in.c; ++c)
                            for (std::size_t k = 0; k < hw; ++k) dprev[c * hw + k] = delta[c] / double(hw);
                    }
                    break;
                case LayerKind::flatten:
                    if (need_input_grad) dprev = delta;
                    break;
                case LayerKind::dense: dense_backward(l, in, delta, grad, dprev, need_input_grad); break;
            }
            if (!need_input_grad) break;
            delta.swap(dprev);
        }
    }

    std::vector<double> logits(const FeatureMap& x) const {
        check_input(x);
        Tape t;
        forward(x.values, t);
        return t.acts.back();
    }

    /// Input to the classification head.
    std::vector<double> embedding(const FeatureMap& x) const {
        check_input(x);
        Tape t;
        forward(x.values, t);
        return t.acts[layers_.size() - 1];
    }

    /// Mean cross-entropy and argmax predictions.
    LossResult forward_loss(std::span<const FeatureMap> batch) const {
        detail::require(!batch.empty(), "forward_loss needs a nonempty batch");
        LossResult r;
        Tape t;
        std::vector<double> p;
        for (const auto& x : batch) {
            check_input(x);
            const std::size_t y = class_index(x.label);
            forward(x.values, t);
            const double l = softmax_xent(t.acts.back(), y, p);
            r.per_sample.push_back(l);
            r.loss += l;
            r.predictions.push_back(spec_.classes[argmax(t.acts.back())]);
        }
        r.loss /= double(batch.size());
        return r;
    }

    /// Mean batch loss; writes the exact gradient of that mean into `grad`.
    double loss_and_gradient(std::span<const FeatureMap> batch, std::vector<double>& grad) const {
        detail::require(!batch.empty(), "gradient needs a nonempty batch");
        grad.assign(params_.size(), 0.0);
        Tape t;
        std::vector<double> p;
        double loss = 0.0;
        const double inv = 1.0 / double(batch.size());
        for (const auto& x : batch) {
            check_input(x);
            const std::size_t y = class_index(x.label);
            forward(x.values, t);
            loss += softmax_xent(t.acts.back(), y, p);
            p[y] -= 1.0;
            backward(t, p, grad, inv);
        }
        return loss * inv;
    }

    GradientReport gradient(std::span<const FeatureMap> batch) const {
        GradientReport r;
        r.loss = loss_and_gradient(batch, r.full);
        for (const auto& id : neurons()) r.per_neuron_norm[id] = block_norm(r.full, id);
        const auto& head = layers_.back();
        for (std::size_t o = 0; o < head.out.c; ++o) {
            double s = r.full[head.b_offset + o] * r.full[head.b_offset + o];
            for (std::size_t k = 0; k < head.in.size(); ++k) {
                const double g = r.full[head.w_offset + o * head.in.size() + k];
                s += g * g;
            }
            r.head_block_norms.push_back(std::sqrt(s));
        }
        if (spec_.arch == "mlp") {
            const auto& hid = layers_[1];
            for (std::size_t o = 0; o < hid.out.c; ++o) {
                double s = r.full[hid.b_offset + o] * r.full[hid.b_offset + o];
                for (std::size_t k = 0; k < hid.in.size(); ++k) {
                    const double g = r.full[hid.w_offset + o * hid.in.size() + k];
                    s += g * g;
                }
                r.head_block_norms.push_back(std::sqrt(s));
            }
        }
        return r;
    }

    /// L2 norm of a neuron's slice (weights + bias) of a parameter-shaped vector.
    double block_norm(std::span<const double> v, NeuronId id) const {
        const auto b = block(id);
        double s = v[b.b_offset] * v[b.b_offset];
        for (std::size_t k = 0; k < b.w_len; ++k) s += v[b.w_offset + k] * v[b.w_offset + k];
        return std::sqrt(s);
    }

    /// Copy with the neuron's weights and bias hard-set to zero (mask untouched).
    Model zeroed_copy(NeuronId id) const {
        Model m = *this;
        const auto b = block(id);
        std::fill_n(m.params_.begin() + std::ptrdiff_t(b.w_offset), b.w_len, 0.0);
        m.params_[b.b_offset] = 0.0;
        return m;
    }

    /// Copy with every mask folded into the parameters and all masks cleared.
    Model hard_pruned() const {
        Model m = *this;
        for (const auto& id : neurons())
            if (masked(id)) {
                m = m.zeroed_copy(id);
                m.set_masked(id, false);
            }
        return m;
    }

    static double softmax_xent(std::span<const double> z, std::size_t y, std::vector<double>& p) {
        const double mx = *std::max_element(z.begin(), z.end());
        p.resize(z.size());
        double sum = 0.0;
        for (std::size_t k = 0; k < z.size(); ++k) {
            p[k] = std::exp(z[k] - mx);
            sum += p[k];
        }
        for (auto& v : p) v /= sum;
        return std::log(sum) + mx - z[y];
    }

    static std::size_t argmax(std::span<const double> z) {
        return std::size_t(std::max_element(z.begin(), z.end()) - z.begin());
    }

private:
    const Layer& conv_layer_ref(std::size_t i) const {
        detail::require(i < conv_layers_.size(), "conv layer index out of range");
        return layers_[conv_layers_[i]];
    }
    void check(NeuronId id) const {
        if (!valid(id)) throw ArgumentError("invalid neuron id " + to_string(id));
    }
    bool channel_masked(const Layer& l, std::size_t o) const { return mask_[l.mask_offset + o] != 0; }

    // 3x3 convolution, stride 1, zero padding 1, as im2col followed by GEMM.
    // Rows of `col` are (in_channel, ky, kx), matching the weight layout.
    static void im2col(const Layer& l, const std::vector<double>& in, std::vector<double>& col) {
        const std::size_t H = l.in.h, W = l.in.w, C = l.in.c, K = l.kernel;
        const std::ptrdiff_t pad = std::ptrdiff_t(K / 2);
        col.assign(C * K * K * H * W, 0.0);
        for (std::size_t c = 0; c < C; ++c)
            for (std::size_t ky = 0; ky < K; ++ky)
                for (std::size_t kx = 0; kx < K; ++kx) {
                    double* row = col.data() + ((c * K + ky) * K + kx) * H * W;
                    const std::ptrdiff_t dy = std::ptrdiff_t(ky) - pad, dx = std::ptrdiff_t(kx) - pad;
                    for (std::size_t y = 0; y < H; ++y) {
                        const std::ptrdiff_t sy = std::ptrdiff_t(y) + dy;
                        if (sy < 0 || sy >= std::ptrdiff_t(H)) continue;
                        const double* src = in.data() + c * H * W + std::size_t(sy) * W;
                        for (std::size_t x = 0; x < W; ++x) {
                            const std::ptrdiff_t sx = std::ptrdiff_t(x) + dx;
                            if (sx >= 0 && sx < std::ptrdiff_t(W)) row[y * W + x] = src[sx];
                        }
                    }
                }
    }

    static void col2im_add(const Layer& l, const std::vector<double>& col, std::vector<double>& din) {
        const std::size_t H = l.in.h, W = l.in.w, C = l.in.c, K = l.kernel;
        const std::ptrdiff_t pad = std::ptrdiff_t(K / 2);
        for (std::size_t c = 0; c < C; ++c)
            for (std::size_t ky = 0; ky < K; ++ky)
                for (std::size_t kx = 0; kx < K; ++kx) {
                    const double* row = col.data() + ((c * K + ky) * K + kx) * H * W;
                    const std::ptrdiff_t dy = std::ptrdiff_t(ky) - pad, dx = std::ptrdiff_t(kx) - pad;
                    for (std::size_t y = 0; y < H; ++y) {
                        const std::ptrdiff_t sy = std::ptrdiff_t(y) + dy;
                        if (sy < 0 || sy >= std::ptrdiff_t(H)) continue;
                        double* dst = din.data() + c * H * W + std::size_t(sy) * W;
                        for (std::size_t x = 0; x < W; ++x) {
                            const std::ptrdiff_t sx = std::ptrdiff_t(x) + dx;
                            if (sx >= 0 && sx < std::ptrdiff_t(W)) dst[sx] += row[y * W + x];
                        }
                    }
                }
    }

    void conv_forward(const Layer& l, const std::vector<double>& in, std::vector<double>& out,
                      std::vector<double>& col) const {
        const std::size_t HW = l.in.h * l.in.w, O = l.out.c, CKK = l.in.c * l.kernel * l.kernel;
        im2col(l, in, col);
        for (std::size_t o = 0; o < O; ++o) std::fill_n(out.data() + o * HW, HW, params_[l.b_offset + o]);
        cblas_dgemm(CblasRowMajor, CblasNoTrans, CblasNoTrans, int(O), int(HW), int(CKK), 1.0,
                    params_.data() + l.w_offset, int(CKK), col.data(), int(HW), 1.0, out.data(), int(HW));
        for (std::size_t o = 0; o < O; ++o)
            if (channel_masked(l, o)) std::fill_n(out.data() + o * HW, HW, 0.0);
    }

    void conv_backward(const Layer& l, const std::vector<double>& col, const std::vector<double>& dout_in,
                       std::span<double> grad, std::vector<double>& din, bool need_input_grad) const {
        const std::size_t HW = l.in.h * l.in.w, O = l.out.c, CKK = l.in.c * l.kernel * l.kernel;
        std::vector<double> dout = dout_in;
        for (std::size_t o = 0; o < O; ++o) {
            double* dp = dout.data() + o * HW;
            if (channel_masked(l, o)) {
                std::fill_n(dp, HW, 0.0);
                continue;
            }
            double bsum = 0.0;
            for (std::size_t k = 0; k < HW; ++k) bsum += dp[k];
            grad[l.b_offset + o] += bsum;
        }
        cblas_dgemm(CblasRowMajor, CblasNoTrans, CblasTrans, int(O), int(CKK), int(HW), 1.0, dout.data(), int(HW),
                    col.data(), int(HW), 1.0, grad.data() + l.w_offset, int(CKK));
        if (!need_input_grad) return;
        std::vector<double> dcol(CKK * HW);
        cblas_dgemm(CblasRowMajor, CblasTrans, CblasNoTrans, int(CKK), int(HW), int(O), 1.0,
                    params_.data() + l.w_offset, int(CKK), dout.data(), int(HW), 0.0, dcol.data(), int(HW));
        col2im_add(l, dcol, din);
    }

    void pool_forward(const Layer& l, const std::vector<double>& in, std::vector<double>& out,
                      std::vector<std::uint32_t>& arg) const {
        arg.resize(out.size());
        const std::size_t H = l.in.h, W = l.in.w, OH = l.out.h, OW = l.out.w;
        for (std::size_t c = 0; c < l.out.c; ++c)
            for (std::size_t y = 0; y < OH; ++y)
                for (std::size_t x = 0; x < OW; ++x) {
                    std::size_t best = c * H * W + 2 * y * W + 2 * x;
                    for (std::size_t py = 0; py < 2; ++py)
                        for (std::size_t px = 0; px < 2; ++px) {
                            const std::size_t k = c * H * W + (2 * y + py) * W + 2 * x + px;
                            if (in[k] > in[best]) best = k;
                        }
                    const std::size_t o = (c * OH + y) * OW + x;
                    out[o] = in[best];
                    arg[o] = std::uint32_t(best);
                }
    }

    void dense_forward(const Layer& l, const std::vector<double>& in, std::vector<double>& out) const {
        const std::size_t N = l.in.size();
        for (std::size_t o = 0; o < l.out.c; ++o) {
            const double* w = params_.data() + l.w_offset + o * N;
            double acc = params_[l.b_offset + o];
            for (std::size_t k = 0; k < N; ++k) acc += w[k] * in[k];
            out[o] = acc;
        }
    }

    void dense_backward(const Layer& l, const std::vector<double>& in, const std::vector<double>& dout,
                        std::span<double> grad, std::vector<double>& din, bool need_input_grad) const {
        const std::size_t N = l.in.size();
        for (std::size_t o = 0; o < l.out.c; ++o) {
            const double d = dout[o];
            grad[l.b_offset + o] += d;
            if (d == 0.0) continue;
            double* g = grad.data() + l.w_offset + o * N;
            const double* w = params_.data() + l.w_offset + o * N;
            for (std::size_t k = 0; k < N; ++k) g[k] += d * in[k];
            if (need_input_grad)
                for (std::size_t k = 0; k < N; ++k) din[k] += d * w[k];
        }
    }

    ModelSpec spec_;
    std::vector<Layer> layers_;
    std::vector<std::size_t> conv_layers_;
    std::vector<double> params_;
    std::vector<std::uint8_t> mask_;
};

/// Builds a seeded reference classifier for `input_shape` maps.
inline Model build_reference_model(const std::string& arch, Shape3 input_shape, std::vector<std::string> classes,
                                   std::uint64_t seed, std::vector<std::size_t> conv_channels = {16, 32},
                                   std::string head = "gap") {
    ModelSpec spec;
    spec.arch = arch;
    spec.input = input_shape;
    spec.classes = std::move(classes);
    spec.conv_channels = arch == "small_cnn" ? std::move(conv_channels) : std::vector<std::size_t>{};
    spec.head = arch == "small_cnn" ? std::move(head) : "none";
    Model m(std::move(spec));
    m.initialize(seed);
    return m;
}

/// Reversibly masks (`masked` = true) or restores a conv neuron.
inline Model& mask_neuron(Model& m, NeuronId id, bool masked) {
    m.set_masked(id, masked);
    return m;
}

/// Masks a neuron for the lifetime of the guard, then restores its prior state.
class ScopedMask {
public:
    ScopedMask(Model& m, NeuronId id) : m_(m), id_(id), prior_(m.masked(id)) { m_.set_masked(id_, true); }
    ~ScopedMask() { m_.set_masked(id_, prior_); }
    ScopedMask(const ScopedMask&) = delete;
    ScopedMask& operator=(const ScopedMask&) = delete;

private:
    Model& m_;
    NeuronId id_;
    bool prior_;
};

// ---------------------------------------------------------------------------
// Training

struct TrainConfig {
    std::size_t epochs = 20;
    double lr = 0.05;
    std::size_t batch_size = 16;
    std::uint64_t seed = 0;
};

struct TrainLog {
    std::vector<double> epoch_loss;  // mean mini-batch loss per epoch
};

/// Plain mini-batch gradient descent on mean cross-entropy. Sample order is
/// reshuffled every epoch from (seed, epoch).
inline TrainLog train(Model& model, const std::vector<FeatureMap>& set, const TrainConfig& cfg) {
    TrainLog log;
    if (cfg.epochs == 0) return log;
    detail::require(!set.empty(), "training set is empty");
    detail::require(cfg.lr > 0.0, "learning rate must be positive");
    detail::require(cfg.batch_size >= 1, "batch_size must be >= 1");
    std::vector<std::size_t> order(set.size());
    std::vector<FeatureMap> batch;
    std::vector<double> grad;
    auto params = model.params();
    for (std::size_t e = 0; e < cfg.epochs; ++e) {
        for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
        std::mt19937_64 rng(derive_seed(cfg.seed, "epoch/" + std::to_string(e)));
        std::shuffle(order.begin(), order.end(), rng);
        double total = 0.0;
        std::size_t n_batches = 0;
        for (std::size_t start = 0; start < order.size(); start += cfg.batch_size) {
            batch.clear();
            for (std::size_t k = start; k < std::min(order.size(), start + cfg.batch_size); ++k)
                batch.push_back(set[order[k]]);
            total += model.loss_and_gradient(batch, grad);
            for (std::size_t k = 0; k < params.size(); ++k) params[k] -= cfg.lr * grad[k];
            ++n_batches;
        }
        log.epoch_loss.push_back(total / double(n_batches));
    }
    return log;
}

// ---------------------------------------------------------------------------
// Checkpoints
//
// Little-endian binary container:
//   magic "GNFTCKPT" | u32 version | u32 descriptor length | descriptor text
//   | u64 parameter count | f64 parameters | u64 mask count | u8 masks

inline constexpr std::uint32_t kCheckpointVersion = 1;

inline void checkpoint_save(const Model& m, const std::filesystem::path& path) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw InputError("cannot write checkpoint: " + path.string());
    auto put = [&](const auto& v) { os.write(reinterpret_cast<const char*>(&v), sizeof v); };
    const std::string desc = m.spec().describe();
    os.write("GNFTCKPT", 8);
    put(kCheckpointVersion);
    put(std::uint32_t(desc.size()));
    os.write(desc.data(), std::streamsize(desc.size()));
    put(std::uint64_t(m.param_count()));
    os.write(reinterpret_cast<const char*>(m.params().data()), std::streamsize(m.param_count() * sizeof(double)));
    const auto& mask = m.mask_state();
    put(std::uint64_t(mask.size()));
    os.write(reinterpret_cast<const char*>(mask.data()), std::streamsize(mask.size()));
    if (!os) throw InputError("failed writing checkpoint: " + path.string());
}

inline Model checkpoint_load(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw InputError("cannot open checkpoint: " + path.string());
    auto get = [&](auto& v) {
        in.read(reinterpret_cast<char*>(&v), sizeof v);
        if (!in) throw FormatError("truncated checkpoint: " + path.string());
    };
    char magic[8];
    in.read(magic, 8);
    if (!in || std::memcmp(magic, "GNFTCKPT", 8) != 0) throw FormatError("not a checkpoint: " + path.string());
    std::uint32_t version = 0, dlen = 0;
    get(version);
    if (version != kCheckpointVersion)
        throw FormatError("unsupported checkpoint version " + std::to_string(version) + ": " + path.string());
    get(dlen);
    std::string desc(dlen, '\0');
    in.read(desc.data(), dlen);
    if (!in) throw FormatError("truncated checkpoint: " + path.string());
    Model m(ModelSpec::parse(desc));
    std::uint64_t np = 0, nm = 0;
    get(np);
    if (np != m.param_count()) throw FormatError("checkpoint parameter count does not match its architecture");
    in.read(reinterpret_cast<char*>(m.params().data()), std::streamsize(np * sizeof(double)));
    get(nm);
    std::vector<std::uint8_t> mask(nm);
    in.read(reinterpret_cast<char*>(mask.data()), std::streamsize(nm));
    if (!in) throw FormatError("truncated checkpoint: " + path.string());
    if (nm != m.mask_state().size()) throw FormatError("checkpoint mask size does not match its architecture");
    m.set_mask_state(std::move(mask));
    return m;
}

/// Loads a checkpoint and verifies it matches the expected architecture.
inline Model checkpoint_load(const std::filesystem::path& path, const ModelSpec& expected) {
    Model m = checkpoint_load(path);
    if (!(m.spec() == expected))
        throw FormatError("checkpoint architecture '" + m.spec().describe() + "' does not match expected '" +
                          expected.describe() + "'");
    return m;
}

}  // namespace gnft
