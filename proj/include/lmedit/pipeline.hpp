#pragma once

#include <chrono>
#include <ostream>
#include <string>
#include <vector>

#include <json.hpp>

#include "lmedit/meta_grad.hpp"
#include "lmedit/serialize.hpp"
#include "lmedit/tasks.hpp"

// Train / edit / evaluate lifecycle: the editor training loop (Adam with
// global-norm clipping on the meta gradient), the plain fine-tuning edit
// baseline, and base-model pre-training for synthetic tasks.

namespace lmedit {

enum class LayerPolicy { second_fc_last_k, first_fc_last_k };

inline std::string layer_policy_name(LayerPolicy p) {
    return p == LayerPolicy::second_fc_last_k ? "second-fc-last-k" : "first-fc-last-k";
}

inline LayerPolicy layer_policy_from_name(const std::string& s) {
    if (s == "second-fc-last-k") return LayerPolicy::second_fc_last_k;
    if (s == "first-fc-last-k") return LayerPolicy::first_fc_last_k;
    throw ArgumentError("unknown editable_layer_policy: " + s);
}

// The FFN layers of the last min(6, K) blocks.
inline std::vector<LayerId> select_editable_layers(int num_blocks, LayerPolicy policy) {
    const int k = std::min(6, num_blocks);
    const int slot = policy == LayerPolicy::second_fc_last_k ? 2 : 1;
    std::vector<LayerId> out;
    for (int b = num_blocks - k; b < num_blocks; ++b) out.push_back({b, slot});
    return out;
}

struct EditorConfig {
    int rank = 32;
    int blocks = 2;
    double eta_init = 1e-2;         // desk-scale default; see README for the
                                    // full-scale published value (1e-6)
    double meta_lr = 1e-5;
    double locality_coeff = 1.0;
    double max_grad_norm = 1.0;
    TokenPolicy token_policy = TokenPolicy::answer_only;
    LayerPolicy editable_layer_policy = LayerPolicy::second_fc_last_k;
    AggregationMethod aggregation = AggregationMethod::normal_eq;
    double lambda_init = 1e-3; // lambda_l starts at lambda_init * key_dim
    std::uint64_t seed = 0;
    int steps = 1000;
    int m_edits = 32;
    int sub_batch_size = 8;

    void validate() const {
        if (rank < 1 || blocks < 1) throw ArgumentError("config: rank and blocks must be >= 1");
        if (!(eta_init > 0.0) || !(meta_lr > 0.0) || !(max_grad_norm > 0.0) || !(lambda_init > 0.0))
            throw ArgumentError("config: rates and coefficients must be > 0");
        if (locality_coeff < 0.0) throw ArgumentError("config: locality_coeff must be >= 0");
        if (steps < 0 || m_edits < 1 || sub_batch_size < 1) throw ArgumentError("config: bad steps/m_edits/sub_batch_size");
    }

    nlohmann::json to_json() const {
        return {{"rank", rank},
                {"blocks", blocks},
                {"eta_init", eta_init},
                {"meta_lr", meta_lr},
                {"locality_coeff", locality_coeff},
                {"max_grad_norm", max_grad_norm},
                {"token_policy", token_policy_name(token_policy)},
                {"editable_layer_policy", layer_policy_name(editable_layer_policy)},
                {"aggregation", aggregation_name(aggregation)},
                {"lambda_init", lambda_init},
                {"seed", seed},
                {"steps", steps},
                {"m_edits", m_edits},
                {"sub_batch_size", sub_batch_size}};
    }

    static EditorConfig from_json(const nlohmann::json& j) {
        static const std::vector<std::string> known = {
            "rank",        "blocks", "eta_init",   "meta_lr", "locality_coeff", "max_grad_norm", "token_policy",
            "editable_layer_policy", "aggregation", "lambda_init", "seed",    "steps",          "m_edits",
            "sub_batch_size"};
        for (auto it = j.begin(); it != j.end(); ++it) {
            bool ok = false;
            for (const auto& k : known)
                if (it.key() == k) ok = true;
            if (!ok) throw ArgumentError("config: unknown key '" + it.key() + "'");
        }
        EditorConfig c;
        c.rank = j.value("rank", c.rank);
        c.blocks = j.value("blocks", c.blocks);
        c.eta_init = j.value("eta_init", c.eta_init);
        c.meta_lr = j.value("meta_lr", c.meta_lr);
        c.locality_coeff = j.value("locality_coeff", c.locality_coeff);
        c.max_grad_norm = j.value("max_grad_norm", c.max_grad_norm);
        if (j.contains("token_policy")) c.token_policy = token_policy_from_name(j["token_policy"].get<std::string>());
        if (j.contains("editable_layer_policy"))
            c.editable_layer_policy = layer_policy_from_name(j["editable_layer_policy"].get<std::string>());
        if (j.contains("aggregation")) c.aggregation = aggregation_from_name(j["aggregation"].get<std::string>());
        c.lambda_init = j.value("lambda_init", c.lambda_init);
        c.seed = j.value("seed", c.seed);
        c.steps = j.value("steps", c.steps);
        c.m_edits = j.value("m_edits", c.m_edits);
        c.sub_batch_size = j.value("sub_batch_size", c.sub_batch_size);
        c.validate();
        return c;
    }

    static EditorConfig load(const std::string& path) { return from_json(detail_io::read_json_file(path)); }

    std::string config_hash() const { return hash_hex(fnv1a(to_json().dump())); }
};

// Scale the gradient so its global norm is at most max_norm; returns the
// pre-clip norm.
inline double clip_global_norm(DVec& grad, double max_norm) {
    const double n = nrm2({grad.data(), grad.size()});
    if (n > max_norm && n > 0.0) scal(max_norm / n, {grad.data(), grad.size()});
    return n;
}

// ---- training log ----

struct TrainRecord {
    int step = 0;
    double l_gen = 0.0, l_loc = 0.0, l_meta = 0.0;
    double mean_residual = 0.0;
    double grad_norm_pre = 0.0, grad_norm_post = 0.0;
    std::vector<double> shift_norms;
    std::vector<double> lambdas;
    double wall_ms = 0.0;
};

struct TrainLog {
    std::vector<std::string> layer_ids;
    std::vector<TrainRecord> records;

    // One row per step. Wall-clock stays in the final column so determinism
    // checks can strip it.
    void write_csv(std::ostream& os) const {
        os << "step,l_gen,l_loc,l_meta,mr,grad_norm_pre,grad_norm_post";
        for (const auto& id : layer_ids) os << ",shift_norm_" << id << ",lambda_" << id;
        os << ",wall_ms\n";
        os.precision(17);
        for (const TrainRecord& r : records) {
            os << r.step << ',' << r.l_gen << ',' << r.l_loc << ',' << r.l_meta << ',' << r.mean_residual << ','
               << r.grad_norm_pre << ',' << r.grad_norm_post;
            for (std::size_t i = 0; i < layer_ids.size(); ++i)
                os << ',' << r.shift_norms[i] << ',' << r.lambdas[i];
            os << ',' << r.wall_ms << '\n';
        }
    }
};

// ---- editor inference (the whole per-batch procedure) ----

struct InferenceOutcome {
    EditableModel post_model;
    std::vector<LayerAggregation> aggregations;
    HookCache cache;
};

inline InferenceOutcome editor_inference(const HyperNetwork& h, const EditableModel& model, const Batch& edit_batch,
                                         const EditorConfig& cfg, bool materialize = false) {
    auto fw = forward_with_cache(model, edit_batch, cfg.token_policy);
    auto aggs = infer_shifts(h, fw.cache, {cfg.aggregation, materialize});
    std::map<LayerId, Matrix> shifts;
    for (const auto& agg : aggs) shifts.emplace(agg.layer, agg.shift);
    InferenceOutcome out{model.apply_shifts(shifts), std::move(aggs), std::move(fw.cache)};
    return out;
}

// ---- editor training (Alg. "Editor Training" loop) ----

struct TrainResult {
    HyperNetwork editor;
    TrainLog log;
    AdamState optimizer;
};

inline TrainResult train_editor(HyperNetwork editor, const EditableModel& model, const EditTask& task,
                                const EditorConfig& cfg, TaskSplit split = TaskSplit::train) {
    cfg.validate();
    TrainResult out{std::move(editor), {}, {}};
    for (LayerId id : out.editor.layers()) out.log.layer_ids.push_back(to_string(id));
    if (cfg.steps == 0) return out;

    // fit the input statistics once, from a pre-training sample
    {
        auto warm = sample_edit_batch(task, cfg.m_edits, Rng::mix(cfg.seed, 0x57a75ULL), split);
        auto fw = forward_with_cache(model, warm.edit, cfg.token_policy);
        out.editor.fit_normalizer(fw.cache);
    }

    AccumulateOptions opt;
    opt.policy = cfg.token_policy;
    opt.method = cfg.aggregation;
    opt.lambda_loc = cfg.locality_coeff;
    opt.sub_batch_size = cfg.sub_batch_size;
    opt.with_residuals = true;

    for (int step = 0; step < cfg.steps; ++step) {
        const auto t0 = std::chrono::steady_clock::now();
        auto triple = sample_edit_batch(task, cfg.m_edits, Rng::mix(cfg.seed, static_cast<std::uint64_t>(step)), split);
        EditorGradients g;
        try {
            g = accumulate_editor_gradient(out.editor, model, triple.edit, triple.equiv, triple.unrel, opt);
        } catch (const SingularityError& e) {
            throw SingularityError("training aborted at step " + std::to_string(step) + " on layer " + e.layer +
                                       ": " + e.what(),
                                   e.pivot, e.layer);
        }
        if (!std::isfinite(g.l_meta) || !all_finite({g.theta_grad.data(), g.theta_grad.size()}))
            throw NumericError("non-finite meta loss or gradient", step);

        TrainRecord rec;
        rec.step = step;
        rec.l_gen = g.l_gen;
        rec.l_loc = g.l_loc;
        rec.l_meta = g.l_meta;
        rec.mean_residual = g.diag.mean_residual;
        rec.shift_norms = std::vector<double>(g.diag.shift_norms.begin(), g.diag.shift_norms.end());
        rec.lambdas = std::vector<double>(g.diag.lambdas.begin(), g.diag.lambdas.end());
        rec.grad_norm_pre = clip_global_norm(g.theta_grad, cfg.max_grad_norm);
        rec.grad_norm_post = nrm2({g.theta_grad.data(), g.theta_grad.size()});
        out.optimizer.step(out.editor.theta(), g.theta_grad, cfg.meta_lr);
        rec.wall_ms = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count();
        out.log.records.push_back(std::move(rec));
    }
    return out;
}

// ---- fine-tuning edit baseline ----

// Decoupled-weight-decay adaptive update on the editable layers' weights
// and biases, full edit batch per epoch.
inline EditableModel finetune_edit_baseline(const EditableModel& model, const Batch& edit_batch, int epochs = 5,
                                            double lr = 5e-4, double weight_decay = 5e-4) {
    if (epochs < 0 || lr < 0.0 || weight_decay < 0.0) throw ArgumentError("finetune: bad hyper-parameters");
    EditableModel m = model;
    // indices of tunable parameters: editable weights and their biases
    std::vector<std::size_t> idx;
    for (LayerId id : m.editable_set()) {
        ConstMatView w = m.layer_weight(id);
        const double* base = m.params().data();
        const std::size_t w0 = static_cast<std::size_t>(w.p - base);
        for (std::size_t k = 0; k < static_cast<std::size_t>(w.rows) * static_cast<std::size_t>(w.cols); ++k)
            idx.push_back(w0 + k);
        std::span<const double> bias = id.slot == 1 ? m.fc1_b(id.block) : m.fc2_b(id.block);
        const std::size_t b0 = static_cast<std::size_t>(bias.data() - base);
        for (std::size_t k = 0; k < bias.size(); ++k) idx.push_back(b0 + k);
    }

    DVec mom(idx.size(), 0.0), vel(idx.size(), 0.0);
    DVec grad;
    const double beta1 = 0.9, beta2 = 0.999, eps = 1e-8;
    for (int epoch = 0; epoch < epochs; ++epoch) {
        const double loss = nll_with_grad(m, edit_batch, grad);
        if (!std::isfinite(loss)) throw NumericError("finetune: non-finite loss", epoch);
        const double bc1 = 1.0 - std::pow(beta1, epoch + 1);
        const double bc2 = 1.0 - std::pow(beta2, epoch + 1);
        for (std::size_t k = 0; k < idx.size(); ++k) {
            const double gk = grad[idx[k]];
            mom[k] = beta1 * mom[k] + (1.0 - beta1) * gk;
            vel[k] = beta2 * vel[k] + (1.0 - beta2) * gk * gk;
            double& p = m.params()[idx[k]];
            p -= lr * ((mom[k] / bc1) / (std::sqrt(vel[k] / bc2) + eps) + weight_decay * p);
        }
    }
    return m;
}

// ---- base-model pre-training on the task's corpus ----

struct PretrainConfig {
    int steps = 3000;
    int batch_size = 64;
    double lr = 2e-3;
    std::uint64_t seed = 0;
};

inline EditableModel pretrain_base_model(EditableModel model, const std::vector<EditTuple>& corpus,
                                         const PretrainConfig& cfg) {
    if (corpus.empty()) throw ArgumentError("pretrain: empty corpus");
    AdamState opt;
    Rng rng(Rng::mix(cfg.seed, 0xba5eULL));
    DVec grad;
    const int n = static_cast<int>(corpus.size());
    for (int step = 0; step < cfg.steps; ++step) {
        std::vector<std::vector<int>> prompts, answers;
        const int bs = std::min(cfg.batch_size, n);
        for (int i = 0; i < bs; ++i) {
            const int pick = static_cast<int>(rng.below(static_cast<std::uint64_t>(n)));
            prompts.push_back(corpus[static_cast<std::size_t>(pick)].prompt);
            answers.push_back(corpus[static_cast<std::size_t>(pick)].answer);
        }
        Batch b = Batch::make(std::move(prompts), std::move(answers));
        const double loss = nll_with_grad(model, b, grad);
        if (!std::isfinite(loss)) throw NumericError("pretrain: non-finite loss", step);
        scal(1.0 / bs, {grad.data(), grad.size()});
        opt.step(model.params(), grad, cfg.lr);
    }
    return model;
}

} // namespace lmedit
