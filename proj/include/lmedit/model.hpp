#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "lmedit/errors.hpp"
#include "lmedit/matrix.hpp"
#include "lmedit/rng.hpp"

// A small differentiable token model whose feed-forward linear layers can be
// hooked (caching keys and value gradients) and edited (weight replacement).
//
// Architecture: token embedding -> K blocks -> linear head over the vocab.
// Each block first mixes the sequence with a parameter-free causal pooling
// (exponentially decayed prefix mean, so token order matters), then applies
// a two-layer feed-forward net with a pointwise nonlinearity and an optional
// residual connection. Position t consumes tokens 0..t of the prompt+answer
// stream and predicts token t+1; the loss is the summed negative
// log-likelihood of the answer tokens.

namespace lmedit {

// ---- activations ----

enum class Activation { tanh_fn, relu_fn, gelu_fn };

inline double act_eval(Activation a, double x) {
    switch (a) {
        case Activation::tanh_fn: return std::tanh(x);
        case Activation::relu_fn: return x > 0.0 ? x : 0.0;
        case Activation::gelu_fn: return 0.5 * x * (1.0 + std::erf(x * 0.70710678118654752440));
    }
    return 0.0;
}

inline double act_deriv(Activation a, double x) {
    switch (a) {
        case Activation::tanh_fn: {
            double t = std::tanh(x);
            return 1.0 - t * t;
        }
        case Activation::relu_fn: return x > 0.0 ? 1.0 : 0.0;
        case Activation::gelu_fn: {
            constexpr double inv_sqrt2 = 0.70710678118654752440;
            constexpr double inv_sqrt2pi = 0.39894228040143267794;
            return 0.5 * (1.0 + std::erf(x * inv_sqrt2)) + x * inv_sqrt2pi * std::exp(-0.5 * x * x);
        }
    }
    return 0.0;
}

inline std::string activation_name(Activation a) {
    switch (a) {
        case Activation::tanh_fn: return "tanh";
        case Activation::relu_fn: return "relu";
        case Activation::gelu_fn: return "gelu";
    }
    return "?";
}

inline Activation activation_from_name(const std::string& s) {
    if (s == "tanh") return Activation::tanh_fn;
    if (s == "relu") return Activation::relu_fn;
    if (s == "gelu") return Activation::gelu_fn;
    throw ArgumentError("unknown activation: " + s);
}

// ---- layer identifiers ----

// Identifies one feed-forward linear layer: slot 1 is the first FC
// (dim -> hidden), slot 2 the second FC (hidden -> dim).
struct LayerId {
    int block = 0;
    int slot = 0;

    bool operator==(const LayerId& o) const { return block == o.block && slot == o.slot; }
    bool operator<(const LayerId& o) const { return block != o.block ? block < o.block : slot < o.slot; }
};

inline std::string to_string(LayerId id) { return "b" + std::to_string(id.block) + ".fc" + std::to_string(id.slot); }

inline LayerId layer_id_from_string(const std::string& s) {
    // expected form: b<k>.fc<slot>
    auto dotpos = s.find(".fc");
    if (s.size() < 5 || s[0] != 'b' || dotpos == std::string::npos)
        throw ArgumentError("bad layer id: " + s);
    LayerId id;
    id.block = std::stoi(s.substr(1, dotpos - 1));
    id.slot = std::stoi(s.substr(dotpos + 3));
    if (id.slot != 1 && id.slot != 2) throw ArgumentError("bad layer id slot: " + s);
    return id;
}

// ---- model configuration ----

struct ModelConfig {
    int vocab_size = 0;
    int dim = 0;        // embedding / block width
    int hidden = 0;     // feed-forward hidden width
    int num_blocks = 0;
    Activation act = Activation::tanh_fn;
    bool residual = true;
    double pool_decay = 0.6; // decay of the causal prefix mean

    void validate() const {
        if (vocab_size < 2 || dim < 1 || hidden < 1 || num_blocks < 1)
            throw ArgumentError("model config: sizes must be positive (vocab >= 2)");
        if (!(pool_decay >= 0.0 && pool_decay < 1.0))
            throw ArgumentError("model config: pool_decay must be in [0, 1)");
    }
};

// ---- batches ----

enum class TokenPolicy { answer_only, all_tokens };

inline std::string token_policy_name(TokenPolicy p) {
    return p == TokenPolicy::answer_only ? "answer-only" : "all-tokens";
}

inline TokenPolicy token_policy_from_name(const std::string& s) {
    if (s == "answer-only") return TokenPolicy::answer_only;
    if (s == "all-tokens") return TokenPolicy::all_tokens;
    throw ArgumentError("unknown token policy: " + s);
}

struct Batch {
    std::vector<std::vector<int>> prompts;
    std::vector<std::vector<int>> answers;
    // Per example: prediction positions t whose target is an answer token
    // (t = |prompt|-1 .. |prompt|+|answer|-2 on the concatenated stream).
    std::vector<std::vector<int>> answer_positions;

    static Batch make(std::vector<std::vector<int>> prompts_in, std::vector<std::vector<int>> answers_in) {
        if (prompts_in.empty() || prompts_in.size() != answers_in.size())
            throw ArgumentError("batch: empty or mismatched prompt/answer lists");
        Batch b;
        b.prompts = std::move(prompts_in);
        b.answers = std::move(answers_in);
        b.answer_positions.resize(b.prompts.size());
        for (std::size_t i = 0; i < b.prompts.size(); ++i) {
            const int p = static_cast<int>(b.prompts[i].size());
            const int a = static_cast<int>(b.answers[i].size());
            if (p < 1 || a < 1) throw ArgumentError("batch: empty prompt or answer");
            for (int t = p - 1; t <= p + a - 2; ++t) b.answer_positions[i].push_back(t);
        }
        return b;
    }

    int size() const { return static_cast<int>(prompts.size()); }

    void validate_tokens(int vocab) const {
        for (std::size_t i = 0; i < prompts.size(); ++i) {
            for (int t : prompts[i])
                if (t < 0 || t >= vocab) throw ArgumentError("batch: prompt token out of vocabulary");
            for (int t : answers[i])
                if (t < 0 || t >= vocab) throw ArgumentError("batch: answer token out of vocabulary");
            const int total = static_cast<int>(prompts[i].size() + answers[i].size());
            for (int t : answer_positions[i])
                if (t < 0 || t > total - 2) throw ArgumentError("batch: answer position out of bounds");
        }
    }

    // Number of cached tokens per layer under a policy.
    int policy_token_count(TokenPolicy policy) const {
        int n = 0;
        for (std::size_t i = 0; i < prompts.size(); ++i) {
            const int n_pos = static_cast<int>(prompts[i].size() + answers[i].size()) - 1;
            n += policy == TokenPolicy::all_tokens ? n_pos : static_cast<int>(answer_positions[i].size());
        }
        return n;
    }
};

// ---- hook cache ----

// Per-layer, per-token cached (key, value gradient) pairs collected during
// one forward/backward pass. Token order is example-major then position-
// ascending and is shared by every layer.
struct HookCache {
    TokenPolicy policy = TokenPolicy::answer_only;
    std::vector<LayerId> layers;
    std::vector<std::vector<DVec>> keys;   // [layer][token]
    std::vector<std::vector<DVec>> vgrads; // [layer][token]

    int n() const { return keys.empty() ? 0 : static_cast<int>(keys[0].size()); }

    int layer_index(LayerId id) const {
        for (std::size_t i = 0; i < layers.size(); ++i)
            if (layers[i] == id) return static_cast<int>(i);
        throw ArgumentError("hook cache: unknown layer " + to_string(id));
    }

    int key_dim(int li) const { return static_cast<int>(keys[static_cast<std::size_t>(li)].at(0).size()); }
    int val_dim(int li) const { return static_cast<int>(vgrads[static_cast<std::size_t>(li)].at(0).size()); }

    // Key matrix U (d x n) / value-gradient matrix for one layer, columns in
    // token order. Only for diagnostics and tests; hot paths stream instead.
    Matrix key_matrix(int li) const {
        const auto& ks = keys[static_cast<std::size_t>(li)];
        Matrix U(static_cast<int>(ks[0].size()), static_cast<int>(ks.size()));
        for (int j = 0; j < U.cols; ++j)
            for (int i = 0; i < U.rows; ++i) U(i, j) = ks[static_cast<std::size_t>(j)][static_cast<std::size_t>(i)];
        return U;
    }
};

// Test hook: additive offset to the value of `layer` at cached token index
// `token_index` (index in the policy-selected order used by HookCache).
struct ValueInjection {
    LayerId layer;
    int token_index = 0;
    DVec offset;
};

// ---- the model ----

class EditableModel {
public:
    EditableModel() = default;

    static EditableModel init(const ModelConfig& cfg, std::vector<LayerId> editable, Rng& rng) {
        cfg.validate();
        EditableModel m;
        m.cfg_ = cfg;
        m.layout();
        m.set_editable(std::move(editable));
        // scaled normal init, fan-in based
        const double emb_sigma = 1.0;
        fill_normal(m.emb_w(), emb_sigma, rng);
        for (int k = 0; k < cfg.num_blocks; ++k) {
            fill_normal(m.fc1_w(k), 1.0 / std::sqrt(static_cast<double>(cfg.dim)), rng);
            fill_normal(m.fc2_w(k), 1.0 / std::sqrt(static_cast<double>(cfg.hidden)), rng);
        }
        fill_normal(m.head_w(), 1.0 / std::sqrt(static_cast<double>(cfg.dim)), rng);
        return m;
    }

    static EditableModel from_parts(const ModelConfig& cfg, std::vector<LayerId> editable, DVec params) {
        cfg.validate();
        EditableModel m;
        m.cfg_ = cfg;
        m.layout();
        m.set_editable(std::move(editable));
        if (params.size() != m.p_.size()) throw ShapeError("model from_parts: parameter count mismatch");
        m.p_ = std::move(params);
        return m;
    }

    const ModelConfig& config() const { return cfg_; }
    const std::vector<LayerId>& editable_set() const { return editable_; }

    void set_editable(std::vector<LayerId> editable) {
        if (editable.empty()) throw ArgumentError("editable set must be nonempty");
        for (LayerId id : editable) check_layer(id);
        editable_ = std::move(editable);
    }

    bool is_editable(LayerId id) const {
        for (LayerId e : editable_)
            if (e == id) return true;
        return false;
    }

    DVec& params() { return p_; }
    const DVec& params() const { return p_; }
    std::size_t param_count() const { return p_.size(); }

    // weight / bias views
    ConstMatView emb_w() const { return {p_.data() + off_.emb, cfg_.vocab_size, cfg_.dim}; }
    MatView emb_w() { return {p_.data() + off_.emb, cfg_.vocab_size, cfg_.dim}; }
    ConstMatView fc1_w(int k) const { return {p_.data() + off_.blocks[b(k)].fc1_w, cfg_.hidden, cfg_.dim}; }
    MatView fc1_w(int k) { return {p_.data() + off_.blocks[b(k)].fc1_w, cfg_.hidden, cfg_.dim}; }
    std::span<const double> fc1_b(int k) const { return {p_.data() + off_.blocks[b(k)].fc1_b, su(cfg_.hidden)}; }
    std::span<double> fc1_b(int k) { return {p_.data() + off_.blocks[b(k)].fc1_b, su(cfg_.hidden)}; }
    ConstMatView fc2_w(int k) const { return {p_.data() + off_.blocks[b(k)].fc2_w, cfg_.dim, cfg_.hidden}; }
    MatView fc2_w(int k) { return {p_.data() + off_.blocks[b(k)].fc2_w, cfg_.dim, cfg_.hidden}; }
    std::span<const double> fc2_b(int k) const { return {p_.data() + off_.blocks[b(k)].fc2_b, su(cfg_.dim)}; }
    std::span<double> fc2_b(int k) { return {p_.data() + off_.blocks[b(k)].fc2_b, su(cfg_.dim)}; }
    ConstMatView head_w() const { return {p_.data() + off_.head_w, cfg_.vocab_size, cfg_.dim}; }
    MatView head_w() { return {p_.data() + off_.head_w, cfg_.vocab_size, cfg_.dim}; }
    std::span<const double> head_b() const { return {p_.data() + off_.head_b, su(cfg_.vocab_size)}; }
    std::span<double> head_b() { return {p_.data() + off_.head_b, su(cfg_.vocab_size)}; }

    // (out_dim, in_dim) of a feed-forward layer
    std::pair<int, int> layer_shape(LayerId id) const {
        check_layer(id);
        return id.slot == 1 ? std::pair{cfg_.hidden, cfg_.dim} : std::pair{cfg_.dim, cfg_.hidden};
    }

    ConstMatView layer_weight(LayerId id) const {
        check_layer(id);
        return id.slot == 1 ? fc1_w(id.block) : fc2_w(id.block);
    }
    MatView layer_weight(LayerId id) {
        check_layer(id);
        return id.slot == 1 ? fc1_w(id.block) : fc2_w(id.block);
    }

    // Same views into an external flat buffer laid out like params().
    MatView layer_weight_in(DVec& buf, LayerId id) const {
        check_layer(id);
        const auto& bo = off_.blocks[b(id.block)];
        return id.slot == 1 ? MatView{buf.data() + bo.fc1_w, cfg_.hidden, cfg_.dim}
                            : MatView{buf.data() + bo.fc2_w, cfg_.dim, cfg_.hidden};
    }

    // ---- editing ----

    // Returns a copy with W_l += S_l on the given editable layers. All other
    // parameters are bit-identical; the input model is untouched.
    EditableModel apply_shifts(const std::map<LayerId, Matrix>& shifts) const {
        EditableModel out = *this;
        for (const auto& [id, s] : shifts) {
            if (!is_editable(id)) throw ArgumentError("apply_shifts: layer " + to_string(id) + " is not editable");
            auto [rows, cols] = layer_shape(id);
            if (s.rows != rows || s.cols != cols)
                throw ShapeError("apply_shifts: shift shape mismatch on " + to_string(id));
            MatView w = out.layer_weight(id);
            for (int i = 0; i < rows; ++i) axpy(1.0, s.row(i), w.row(i));
        }
        return out;
    }

    // ---- forward / backward ----

    struct Trace {
        std::vector<int> stream;  // prompt ++ answer
        std::vector<int> ans_pos; // prediction positions targeting answer tokens
        int n_pos = 0;            // forward positions (stream length - 1)
        DVec pool_den;            // per-position pooling normalizer
        std::vector<Matrix> pooled; // per block: n_pos x dim
        std::vector<Matrix> pre;    // per block: n_pos x hidden (fc1 values)
        std::vector<Matrix> act;    // per block: n_pos x hidden
        Matrix h_final;             // n_pos x dim
        Matrix probs;               // |ans_pos| x vocab
        double loss = 0.0;          // summed answer NLL
    };

    // Forward one example, teacher forced on the gold answer. Records all
    // intermediates needed by backward. `inject` adds offsets to layer
    // values at given positions (FD / replay tests).
    Trace forward_example(const std::vector<int>& prompt, const std::vector<int>& answer,
                          const std::vector<std::pair<LayerId, std::pair<int, const DVec*>>>* inject = nullptr) const {
        Trace tr;
        tr.stream = prompt;
        tr.stream.insert(tr.stream.end(), answer.begin(), answer.end());
        const int T = static_cast<int>(tr.stream.size());
        tr.n_pos = T - 1;
        const int P = static_cast<int>(prompt.size());
        for (int t = P - 1; t <= T - 2; ++t) tr.ans_pos.push_back(t);

        const int dim = cfg_.dim, hid = cfg_.hidden, K = cfg_.num_blocks;
        Matrix h(tr.n_pos, dim);
        for (int t = 0; t < tr.n_pos; ++t) {
            const int tok = tr.stream[su(t)];
            if (tok < 0 || tok >= cfg_.vocab_size) throw ArgumentError("token out of vocabulary");
            auto er = emb_w().row(tok);
            std::copy(er.begin(), er.end(), h.row(t).begin());
        }

        tr.pool_den.resize(su(tr.n_pos));
        tr.pooled.reserve(su(K));
        tr.pre.reserve(su(K));
        tr.act.reserve(su(K));
        const double g = cfg_.pool_decay;

        for (int k = 0; k < K; ++k) {
            Matrix pooled(tr.n_pos, dim);
            DVec num(su(dim), 0.0);
            double den = 0.0;
            for (int t = 0; t < tr.n_pos; ++t) {
                for (int i = 0; i < dim; ++i) num[su(i)] = h(t, i) + g * num[su(i)];
                den = 1.0 + g * den;
                if (k == 0) tr.pool_den[su(t)] = den;
                const double inv = 1.0 / den;
                for (int i = 0; i < dim; ++i) pooled(t, i) = num[su(i)] * inv;
            }

            Matrix pre(tr.n_pos, hid);
            Matrix actm(tr.n_pos, hid);
            for (int t = 0; t < tr.n_pos; ++t) {
                matvec(fc1_w(k), pooled.row(t), pre.row(t));
                axpy(1.0, fc1_b(k), pre.row(t));
                apply_injection(inject, LayerId{k, 1}, t, pre.row(t));
                for (int i = 0; i < hid; ++i) actm(t, i) = act_eval(cfg_.act, pre(t, i));
            }

            Matrix h_next(tr.n_pos, dim);
            for (int t = 0; t < tr.n_pos; ++t) {
                matvec(fc2_w(k), actm.row(t), h_next.row(t));
                axpy(1.0, fc2_b(k), h_next.row(t));
                apply_injection(inject, LayerId{k, 2}, t, h_next.row(t));
                if (cfg_.residual) axpy(1.0, pooled.row(t), h_next.row(t));
            }

            tr.pooled.push_back(std::move(pooled));
            tr.pre.push_back(std::move(pre));
            tr.act.push_back(std::move(actm));
            h = std::move(h_next);
        }

        tr.h_final = std::move(h);
        tr.probs = Matrix(static_cast<int>(tr.ans_pos.size()), cfg_.vocab_size);
        DVec logits(su(cfg_.vocab_size));
        for (std::size_t ai = 0; ai < tr.ans_pos.size(); ++ai) {
            const int t = tr.ans_pos[ai];
            matvec(head_w(), tr.h_final.row(t), {logits.data(), logits.size()});
            axpy(1.0, head_b(), {logits.data(), logits.size()});
            double mx = logits[0];
            for (double v : logits) mx = std::max(mx, v);
            double se = 0.0;
            auto pr = tr.probs.row(static_cast<int>(ai));
            for (int c = 0; c < cfg_.vocab_size; ++c) {
                pr[su(c)] = std::exp(logits[su(c)] - mx);
                se += pr[su(c)];
            }
            const double inv = 1.0 / se;
            for (int c = 0; c < cfg_.vocab_size; ++c) pr[su(c)] *= inv;
            const int target = tr.stream[su(t + 1)];
            tr.loss += (mx + std::log(se)) - logits[su(target)];
        }
        return tr;
    }

    // Receives hook records during backward, in ascending position order.
    struct CacheSink {
        HookCache* cache = nullptr;
        TokenPolicy policy = TokenPolicy::answer_only;
    };

    // Back-propagate an example given d(loss)/d(logits) rows aligned with
    // trace.ans_pos. Optionally accumulates weight gradients into a flat
    // buffer laid out like params() and/or records hook cache entries.
    void backward_example(const Trace& tr, const Matrix& dlogits, DVec* wgrad, const CacheSink* sink) const {
        const int dim = cfg_.dim, hid = cfg_.hidden, K = cfg_.num_blocks;
        const double g = cfg_.pool_decay;
        Matrix dh(tr.n_pos, dim);

        for (std::size_t ai = 0; ai < tr.ans_pos.size(); ++ai) {
            const int t = tr.ans_pos[ai];
            DVec tmp(su(dim));
            matvec_t(head_w(), dlogits.row(static_cast<int>(ai)), {tmp.data(), tmp.size()});
            axpy(1.0, {tmp.data(), tmp.size()}, dh.row(t));
            if (wgrad) {
                MatView hw{wgrad->data() + off_.head_w, cfg_.vocab_size, dim};
                add_outer(hw, 1.0, dlogits.row(static_cast<int>(ai)), tr.h_final.row(t));
                axpy(1.0, dlogits.row(static_cast<int>(ai)), {wgrad->data() + off_.head_b, su(cfg_.vocab_size)});
            }
        }

        Matrix dpre(tr.n_pos, hid);
        Matrix dpooled(tr.n_pos, dim);
        for (int k = K - 1; k >= 0; --k) {
            // dh holds the gradient w.r.t. this block's output == the fc2 value grad
            record_hook(sink, LayerId{k, 2}, tr, tr.act[su(k)], dh);
            for (int t = 0; t < tr.n_pos; ++t) {
                matvec_t(fc2_w(k), dh.row(t), dpre.row(t));
                for (int i = 0; i < hid; ++i) dpre(t, i) *= act_deriv(cfg_.act, tr.pre[su(k)](t, i));
            }
            record_hook(sink, LayerId{k, 1}, tr, tr.pooled[su(k)], dpre);
            if (wgrad) {
                const auto& bo = off_.blocks[su(k)];
                MatView w2{wgrad->data() + bo.fc2_w, dim, hid};
                MatView w1{wgrad->data() + bo.fc1_w, hid, dim};
                std::span<double> b2{wgrad->data() + bo.fc2_b, su(dim)};
                std::span<double> b1{wgrad->data() + bo.fc1_b, su(hid)};
                for (int t = 0; t < tr.n_pos; ++t) {
                    add_outer(w2, 1.0, dh.row(t), tr.act[su(k)].row(t));
                    axpy(1.0, dh.row(t), b2);
                    add_outer(w1, 1.0, dpre.row(t), tr.pooled[su(k)].row(t));
                    axpy(1.0, dpre.row(t), b1);
                }
            }
            for (int t = 0; t < tr.n_pos; ++t) {
                matvec_t(fc1_w(k), dpre.row(t), dpooled.row(t));
                if (cfg_.residual) axpy(1.0, dh.row(t), dpooled.row(t));
            }
            // pooling transpose: carry = dpooled_t / den_t + g * carry, descending
            DVec carry(su(dim), 0.0);
            for (int t = tr.n_pos - 1; t >= 0; --t) {
                const double inv = 1.0 / tr.pool_den[su(t)];
                for (int i = 0; i < dim; ++i) {
                    carry[su(i)] = dpooled(t, i) * inv + g * carry[su(i)];
                    dh(t, i) = carry[su(i)];
                }
            }
        }

        if (wgrad) {
            MatView ew{wgrad->data() + off_.emb, cfg_.vocab_size, dim};
            for (int t = 0; t < tr.n_pos; ++t) axpy(1.0, dh.row(t), ew.row(tr.stream[su(t)]));
        }
    }

    // dlogits rows for the summed-NLL loss: softmax - onehot(target).
    Matrix nll_dlogits(const Trace& tr) const {
        Matrix d = tr.probs;
        for (std::size_t ai = 0; ai < tr.ans_pos.size(); ++ai)
            d(static_cast<int>(ai), tr.stream[su(tr.ans_pos[ai] + 1)]) -= 1.0;
        return d;
    }

    // Greedy (argmax) prediction at each answer position, teacher forced on
    // the gold answer prefix.
    std::vector<int> argmax_answer(const std::vector<int>& prompt, const std::vector<int>& answer) const {
        Trace tr = forward_example(prompt, answer);
        std::vector<int> out(tr.ans_pos.size());
        for (std::size_t ai = 0; ai < tr.ans_pos.size(); ++ai) {
            auto pr = tr.probs.row(static_cast<int>(ai));
            int best = 0;
            for (int c = 1; c < cfg_.vocab_size; ++c)
                if (pr[su(c)] > pr[su(best)]) best = c;
            out[ai] = best;
        }
        return out;
    }

private:
    struct BlockOffsets {
        std::size_t fc1_w, fc1_b, fc2_w, fc2_b;
    };
    struct Offsets {
        std::size_t emb = 0;
        std::vector<BlockOffsets> blocks;
        std::size_t head_w = 0, head_b = 0;
        std::size_t total = 0;
    };

    static std::size_t su(int v) { return static_cast<std::size_t>(v); }
    std::size_t b(int k) const { return su(k); }

    void check_layer(LayerId id) const {
        if (id.block < 0 || id.block >= cfg_.num_blocks || (id.slot != 1 && id.slot != 2))
            throw ArgumentError("unknown layer id: " + to_string(id));
    }

    void layout() {
        std::size_t cur = 0;
        off_.emb = cur;
        cur += su(cfg_.vocab_size) * su(cfg_.dim);
        off_.blocks.resize(su(cfg_.num_blocks));
        for (int k = 0; k < cfg_.num_blocks; ++k) {
            off_.blocks[su(k)].fc1_w = cur;
            cur += su(cfg_.hidden) * su(cfg_.dim);
            off_.blocks[su(k)].fc1_b = cur;
            cur += su(cfg_.hidden);
            off_.blocks[su(k)].fc2_w = cur;
            cur += su(cfg_.dim) * su(cfg_.hidden);
            off_.blocks[su(k)].fc2_b = cur;
            cur += su(cfg_.dim);
        }
        off_.head_w = cur;
        cur += su(cfg_.vocab_size) * su(cfg_.dim);
        off_.head_b = cur;
        cur += su(cfg_.vocab_size);
        off_.total = cur;
        p_.assign(cur, 0.0);
    }

    static void fill_normal(MatView w, double sigma, Rng& rng) {
        for (int i = 0; i < w.rows; ++i)
            for (int j = 0; j < w.cols; ++j) w(i, j) = rng.normal(0.0, sigma);
    }

    static void apply_injection(const std::vector<std::pair<LayerId, std::pair<int, const DVec*>>>* inject,
                                LayerId id, int t, std::span<double> value) {
        if (!inject) return;
        for (const auto& [lid, rest] : *inject) {
            if (lid == id && rest.first == t) {
                const DVec& off = *rest.second;
                if (off.size() != value.size()) throw ShapeError("value injection size mismatch");
                axpy(1.0, {off.data(), off.size()}, value);
            }
        }
    }

    void record_hook(const CacheSink* sink, LayerId id, const Trace& tr, const Matrix& keys_by_pos,
                     const Matrix& vgrads_by_pos) const {
        if (!sink || !sink->cache) return;
        int li = -1;
        for (std::size_t i = 0; i < sink->cache->layers.size(); ++i)
            if (sink->cache->layers[i] == id) li = static_cast<int>(i);
        if (li < 0) return;
        auto push = [&](int t) {
            auto kr = keys_by_pos.row(t);
            auto gr = vgrads_by_pos.row(t);
            sink->cache->keys[su(li)].emplace_back(kr.begin(), kr.end());
            sink->cache->vgrads[su(li)].emplace_back(gr.begin(), gr.end());
        };
        if (sink->policy == TokenPolicy::all_tokens) {
            for (int t = 0; t < tr.n_pos; ++t) push(t);
        } else {
            for (int t : tr.ans_pos) push(t);
        }
    }

    ModelConfig cfg_;
    std::vector<LayerId> editable_;
    Offsets off_;
    DVec p_;
};

// ---- module operations ----

struct ForwardCacheResult {
    double loss = 0.0;
    HookCache cache;
};

// Run the edit batch through the model, back-propagate the summed answer
// NLL, and cache (key, value gradient) pairs at every editable layer for
// the policy-selected tokens. Weights are not modified.
inline ForwardCacheResult forward_with_cache(const EditableModel& model, const Batch& batch, TokenPolicy policy) {
    if (batch.size() == 0) throw ArgumentError("forward_with_cache: empty batch");
    batch.validate_tokens(model.config().vocab_size);

    ForwardCacheResult out;
    out.cache.policy = policy;
    out.cache.layers = model.editable_set();
    out.cache.keys.resize(out.cache.layers.size());
    out.cache.vgrads.resize(out.cache.layers.size());

    EditableModel::CacheSink sink{&out.cache, policy};
    for (int i = 0; i < batch.size(); ++i) {
        auto tr = model.forward_example(batch.prompts[static_cast<std::size_t>(i)], batch.answers[static_cast<std::size_t>(i)]);
        out.loss += tr.loss;
        Matrix dl = model.nll_dlogits(tr);
        model.backward_example(tr, dl, nullptr, &sink);
    }
    return out;
}

// Summed answer NLL with optional value injections; forward only.
inline double loss_with_injection(const EditableModel& model, const Batch& batch, TokenPolicy policy,
                                  const std::vector<ValueInjection>& injections) {
    if (batch.size() == 0) throw ArgumentError("loss_with_injection: empty batch");
    double loss = 0.0;
    int base = 0; // first cache token index of the current example
    for (int i = 0; i < batch.size(); ++i) {
        const auto& prompt = batch.prompts[static_cast<std::size_t>(i)];
        const auto& answer = batch.answers[static_cast<std::size_t>(i)];
        const int n_pos = static_cast<int>(prompt.size() + answer.size()) - 1;
        const int count = policy == TokenPolicy::all_tokens
                              ? n_pos
                              : static_cast<int>(batch.answer_positions[static_cast<std::size_t>(i)].size());

        std::vector<std::pair<LayerId, std::pair<int, const DVec*>>> local;
        for (const auto& inj : injections) {
            const int rel = inj.token_index - base;
            if (rel < 0 || rel >= count) continue;
            const int t = policy == TokenPolicy::all_tokens
                              ? rel
                              : batch.answer_positions[static_cast<std::size_t>(i)][static_cast<std::size_t>(rel)];
            local.push_back({inj.layer, {t, &inj.offset}});
        }
        loss += model.forward_example(prompt, answer, local.empty() ? nullptr : &local).loss;
        base += count;
    }
    return loss;
}

// Summed answer NLL and full parameter gradient (flat, laid out like
// model.params()).
inline double nll_with_grad(const EditableModel& model, const Batch& batch, DVec& grad_out) {
    if (batch.size() == 0) throw ArgumentError("nll_with_grad: empty batch");
    grad_out.assign(model.param_count(), 0.0);
    double loss = 0.0;
    for (int i = 0; i < batch.size(); ++i) {
        auto tr = model.forward_example(batch.prompts[static_cast<std::size_t>(i)], batch.answers[static_cast<std::size_t>(i)]);
        loss += tr.loss;
        Matrix dl = model.nll_dlogits(tr);
        model.backward_example(tr, dl, &grad_out, nullptr);
    }
    return loss;
}

// ---- meta loss (generalization NLL + locality KL) ----

struct MetaBackwardResult {
    double l_meta = 0.0;
    double l_gen = 0.0;
    double l_loc = 0.0;
    std::map<LayerId, Matrix> grads; // d L_meta / d W~ on editable layers
};

// Accumulates the meta loss over equivalent / unrelated examples in a fixed
// order so sub-batched accumulation reproduces the full-batch result.
class MetaBackwardAccum {
public:
    MetaBackwardAccum(const EditableModel& pre, const EditableModel& post, double lambda_loc)
        : pre_(&pre), post_(&post), lambda_loc_(lambda_loc) {
        if (lambda_loc < 0.0) throw ArgumentError("lambda_loc must be >= 0");
        gen_grad_.assign(post.param_count(), 0.0);
        loc_grad_.assign(post.param_count(), 0.0);
    }

    void add_equiv(const std::vector<int>& prompt, const std::vector<int>& answer) {
        auto tr = post_->forward_example(prompt, answer);
        gen_sum_ += tr.loss;
        Matrix dl = post_->nll_dlogits(tr);
        post_->backward_example(tr, dl, &gen_grad_, nullptr);
        ++gen_count_;
    }

    void add_unrel(const std::vector<int>& prompt, const std::vector<int>& answer) {
        auto tr_pre = pre_->forward_example(prompt, answer);
        auto tr_post = post_->forward_example(prompt, answer);
        // KL(p_pre || p_post) summed over the example's answer positions
        Matrix dl(tr_post.probs.rows, tr_post.probs.cols);
        for (int r = 0; r < tr_post.probs.rows; ++r) {
            for (int c = 0; c < tr_post.probs.cols; ++c) {
                const double p = tr_pre.probs(r, c);
                const double q = tr_post.probs(r, c);
                if (p > 0.0) loc_sum_ += p * (std::log(p) - std::log(q));
                dl(r, c) = q - p;
            }
        }
        post_->backward_example(tr_post, dl, &loc_grad_, nullptr);
        ++unrel_count_;
    }

    void add_batches(const Batch& equiv, const Batch& unrel) {
        for (int i = 0; i < equiv.size(); ++i)
            add_equiv(equiv.prompts[static_cast<std::size_t>(i)], equiv.answers[static_cast<std::size_t>(i)]);
        for (int i = 0; i < unrel.size(); ++i)
            add_unrel(unrel.prompts[static_cast<std::size_t>(i)], unrel.answers[static_cast<std::size_t>(i)]);
    }

    MetaBackwardResult finalize() const {
        if (gen_count_ == 0 || unrel_count_ == 0)
            throw ArgumentError("meta backward: empty equivalent or unrelated batch");
        MetaBackwardResult r;
        r.l_gen = gen_sum_ / static_cast<double>(gen_count_);
        r.l_loc = loc_sum_ / static_cast<double>(unrel_count_);
        r.l_meta = r.l_gen + lambda_loc_ * r.l_loc;
        const double gs = 1.0 / static_cast<double>(gen_count_);
        const double ls = lambda_loc_ / static_cast<double>(unrel_count_);
        for (LayerId id : post_->editable_set()) {
            auto [rows, cols] = post_->layer_shape(id);
            Matrix gm(rows, cols);
            ConstMatView gg = post_->layer_weight_in(const_cast<DVec&>(gen_grad_), id);
            ConstMatView lg = post_->layer_weight_in(const_cast<DVec&>(loc_grad_), id);
            for (int i = 0; i < rows; ++i)
                for (int j = 0; j < cols; ++j) gm(i, j) = gs * gg(i, j) + ls * lg(i, j);
            r.grads.emplace(id, std::move(gm));
        }
        return r;
    }

private:
    const EditableModel* pre_;
    const EditableModel* post_;
    double lambda_loc_;
    double gen_sum_ = 0.0, loc_sum_ = 0.0;
    long gen_count_ = 0, unrel_count_ = 0;
    DVec gen_grad_, loc_grad_;
};

// L_meta = mean answer NLL over equivalent tuples + lambda_loc * mean
// KL(pre || post) over unrelated tuples, with gradients on the edited
// weights of the post model.
inline MetaBackwardResult meta_backward_on_weights(const EditableModel& pre_model, const EditableModel& post_model,
                                                   const Batch& equiv, const Batch& unrel, double lambda_loc) {
    if (equiv.size() == 0 || unrel.size() == 0) throw ArgumentError("meta backward: empty batch");
    MetaBackwardAccum acc(pre_model, post_model, lambda_loc);
    acc.add_batches(equiv, unrel);
    return acc.finalize();
}

} // namespace lmedit
