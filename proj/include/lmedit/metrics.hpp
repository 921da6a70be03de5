#pragma once

#include <chrono>
#include <cmath>
#include <map>
#include <ostream>
#include <string>
#include <vector>

#include "lmedit/pipeline.hpp"

// Editing / generalization / locality success on an evaluation split, and
// the experiment drivers: scaling curves over the edit count and the
// ablation table. Rows are plain CSV.

namespace lmedit {

// How a sequence answer counts as correct: all answer tokens must match
// (sequence-wise, the default), or per-token fractions averaged over all
// tokens or over examples.
enum class MatchMode { sequence, token_over_tokens, token_over_examples };

inline std::string match_mode_name(MatchMode m) {
    switch (m) {
        case MatchMode::sequence: return "sequence";
        case MatchMode::token_over_tokens: return "token-over-tokens";
        case MatchMode::token_over_examples: return "token-over-examples";
    }
    return "?";
}

struct EvalSplit {
    std::vector<EditTuple> edits;       // the m tuples that were edited
    std::vector<EditTuple> equivalents; // union of their equivalent sets
    std::vector<EditTuple> unrelated;   // locality targets

    // Evaluation view for the edits picked by a sampled batch.
    static EvalSplit from_task(const EditTask& task, const std::vector<int>& edit_indices) {
        EvalSplit s;
        for (int ei : edit_indices) {
            s.edits.push_back(task.edits.at(static_cast<std::size_t>(ei)));
            for (const auto& q : task.equivalents.at(static_cast<std::size_t>(ei))) s.equivalents.push_back(q);
        }
        s.unrelated = task.unrelated_pool;
        return s;
    }
};

struct EditMetrics {
    double es = 0.0, gs = 0.0, ls = 0.0;
    int m = 0;
    std::uint64_t seed = 0;
    std::string method;
    double mean_residual = 0.0;
    double wall_clock_s = 0.0;
    std::size_t peak_mem_bytes = 0;
};

template <class ModelLike>
double argmax_success(const ModelLike& model, const std::vector<EditTuple>& tuples, MatchMode mode) {
    if (tuples.empty()) throw ArgumentError("metrics: empty evaluation split");
    double num = 0.0, den = 0.0;
    for (const EditTuple& t : tuples) {
        const std::vector<int> got = model.argmax_answer(t.prompt, t.answer);
        int hits = 0;
        for (std::size_t i = 0; i < t.answer.size(); ++i)
            if (got[i] == t.answer[i]) ++hits;
        switch (mode) {
            case MatchMode::sequence:
                num += hits == static_cast<int>(t.answer.size()) ? 1.0 : 0.0;
                den += 1.0;
                break;
            case MatchMode::token_over_tokens:
                num += hits;
                den += static_cast<double>(t.answer.size());
                break;
            case MatchMode::token_over_examples:
                num += static_cast<double>(hits) / static_cast<double>(t.answer.size());
                den += 1.0;
                break;
        }
    }
    return num / den;
}

// ES / GS / LS of a post-edit model on an evaluation split. All three are
// properties of the post-edit model; locality compares against the split's
// stored (pre-edit) answers.
template <class ModelLike>
EditMetrics compute_metrics(const ModelLike& post_model, const EvalSplit& split, MatchMode mode = MatchMode::sequence) {
    EditMetrics r;
    r.es = argmax_success(post_model, split.edits, mode);
    r.gs = argmax_success(post_model, split.equivalents, mode);
    r.ls = argmax_success(post_model, split.unrelated, mode);
    r.m = static_cast<int>(split.edits.size());
    return r;
}

// Exact prompt-to-answer lookup; the oracle reference model for tests and
// sanity runs.
struct LookupModel {
    std::map<std::vector<int>, std::vector<int>> table;
    int fallback = 0;

    static LookupModel post_edit_oracle(const EditTask& task) {
        LookupModel m;
        for (std::size_t i = 0; i < task.edits.size(); ++i) {
            m.table[task.edits[i].prompt] = task.edits[i].answer;
            for (const auto& q : task.equivalents[i]) m.table[q.prompt] = q.answer;
        }
        for (const auto& u : task.unrelated_pool) m.table[u.prompt] = u.answer;
        return m;
    }

    std::vector<int> argmax_answer(const std::vector<int>& prompt, const std::vector<int>& gold) const {
        auto it = table.find(prompt);
        std::vector<int> out(gold.size(), fallback);
        if (it != table.end())
            for (std::size_t i = 0; i < gold.size() && i < it->second.size(); ++i) out[i] = it->second[i];
        return out;
    }
};

// ---- result tables ----

inline void write_metrics_header(std::ostream& os) {
    os << "method,m,seed,es,gs,ls,mr,wall_clock_s,peak_mem_bytes\n";
}

inline void write_metrics_row(std::ostream& os, const EditMetrics& r) {
    os.precision(17);
    os << r.method << ',' << r.m << ',' << r.seed << ',' << r.es << ',' << r.gs << ',' << r.ls << ','
       << r.mean_residual << ',' << r.wall_clock_s << ',' << r.peak_mem_bytes << '\n';
}

struct AggRow {
    std::string method;
    int m = 0;
    double es_mean = 0, es_std = 0, gs_mean = 0, gs_std = 0, ls_mean = 0, ls_std = 0, mr_mean = 0, mr_std = 0;
};

inline std::vector<AggRow> aggregate_rows(const std::vector<EditMetrics>& rows) {
    std::map<std::pair<std::string, int>, std::vector<const EditMetrics*>> by_key;
    for (const auto& r : rows) by_key[{r.method, r.m}].push_back(&r);
    std::vector<AggRow> out;
    for (const auto& [key, group] : by_key) {
        AggRow a;
        a.method = key.first;
        a.m = key.second;
        auto stat = [&](auto get, double& mean, double& sd) {
            double s = 0;
            for (const auto* r : group) s += get(*r);
            mean = s / static_cast<double>(group.size());
            double v = 0;
            for (const auto* r : group) v += (get(*r) - mean) * (get(*r) - mean);
            sd = std::sqrt(v / static_cast<double>(group.size()));
        };
        stat([](const EditMetrics& r) { return r.es; }, a.es_mean, a.es_std);
        stat([](const EditMetrics& r) { return r.gs; }, a.gs_mean, a.gs_std);
        stat([](const EditMetrics& r) { return r.ls; }, a.ls_mean, a.ls_std);
        stat([](const EditMetrics& r) { return r.mean_residual; }, a.mr_mean, a.mr_std);
        out.push_back(a);
    }
    return out;
}

inline void write_agg_csv(std::ostream& os, const std::vector<AggRow>& rows) {
    os << "method,m,es_mean,es_std,gs_mean,gs_std,ls_mean,ls_std,mr_mean,mr_std\n";
    os.precision(17);
    for (const auto& a : rows)
        os << a.method << ',' << a.m << ',' << a.es_mean << ',' << a.es_std << ',' << a.gs_mean << ',' << a.gs_std
           << ',' << a.ls_mean << ',' << a.ls_std << ',' << a.mr_mean << ',' << a.mr_std << '\n';
}

// ---- experiment drivers ----

// Train an editor on the task's train split under `cfg`, edit a held-out
// batch of m validation facts, and measure. method_tag "ft" skips the
// editor and runs the fine-tuning baseline instead.
inline EditMetrics run_editing_experiment(const std::string& method_tag, EditorConfig cfg, const EditTask& task,
                                          const EditableModel& model, int m, std::uint64_t seed,
                                          MatchMode mode = MatchMode::sequence) {
    const auto t0 = std::chrono::steady_clock::now();
    memlog::PeakScope scope;

    cfg.seed = seed;
    cfg.m_edits = std::min(cfg.m_edits, m);
    auto eval_batch = sample_edit_batch(task, m, Rng::mix(seed, 0xe7a1ULL), TaskSplit::val);
    EvalSplit split = EvalSplit::from_task(task, eval_batch.edit_indices);

    EditMetrics row;
    if (method_tag == "ft") {
        EditableModel post = finetune_edit_baseline(model, eval_batch.edit);
        row = compute_metrics(post, split, mode);
        row.mean_residual = std::numeric_limits<double>::quiet_NaN();
    } else {
        cfg.aggregation = aggregation_from_name(method_tag);
        HyperNetwork h = [&] {
            Rng rng(Rng::mix(seed, 0xed170ULL));
            EditableModel tmp = model; // layer selection may differ from the checkpoint's
            tmp.set_editable(select_editable_layers(model.config().num_blocks, cfg.editable_layer_policy));
            return HyperNetwork::init(tmp, cfg.rank, cfg.blocks, cfg.eta_init, cfg.lambda_init, rng);
        }();
        EditableModel editable_view = model;
        editable_view.set_editable(select_editable_layers(model.config().num_blocks, cfg.editable_layer_policy));
        auto trained = train_editor(std::move(h), editable_view, task, cfg);
        auto inf = editor_inference(trained.editor, editable_view, eval_batch.edit, cfg);
        row = compute_metrics(inf.post_model, split, mode);
        row.mean_residual = residuals_for(trained.editor, inf.cache, inf.aggregations).mean_residual;
    }
    row.method = method_tag;
    row.m = m;
    row.seed = seed;
    row.peak_mem_bytes = scope.peak_delta();
    row.wall_clock_s = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    return row;
}

// One row per (method, m, seed); aggregates computed alongside.
struct ScalingTable {
    std::vector<EditMetrics> rows;
    std::vector<AggRow> aggregates;
};

inline ScalingTable scaling_curve(const std::vector<std::string>& methods, const EditorConfig& base_cfg,
                                  const EditTask& task, const EditableModel& model, const std::vector<int>& m_grid,
                                  const std::vector<std::uint64_t>& seeds, MatchMode mode = MatchMode::sequence) {
    for (std::size_t i = 1; i < m_grid.size(); ++i)
        if (m_grid[i] <= m_grid[i - 1]) throw ArgumentError("scaling_curve: m grid must ascend");
    ScalingTable out;
    for (const auto& method : methods)
        for (int m : m_grid)
            for (std::uint64_t seed : seeds)
                out.rows.push_back(run_editing_experiment(method, base_cfg, task, model, m, seed, mode));
    out.aggregates = aggregate_rows(out.rows);
    return out;
}

// ---- ablation suite ----

struct AblationRow {
    std::string variant;
    std::uint64_t seed = 0;
    std::string outcome; // "ok" or a recorded failure
    EditMetrics metrics; // valid when outcome == "ok"
};

inline void write_ablation_csv(std::ostream& os, const std::vector<AblationRow>& rows) {
    os << "variant,seed,outcome,es,gs,ls,mr,wall_clock_s,peak_mem_bytes\n";
    os.precision(17);
    for (const auto& r : rows) {
        os << r.variant << ',' << r.seed << ',' << r.outcome << ',';
        if (r.outcome == "ok")
            os << r.metrics.es << ',' << r.metrics.gs << ',' << r.metrics.ls << ',' << r.metrics.mean_residual << ','
               << r.metrics.wall_clock_s << ',' << r.metrics.peak_mem_bytes;
        else
            os << ",,,,,";
        os << '\n';
    }
}

// The config toggles behind each published ablation variant.
inline EditorConfig ablation_variant_config(const EditorConfig& base, const std::string& variant) {
    EditorConfig c = base;
    if (variant == "default") {
    } else if (variant == "sum_shifts") {
        c.aggregation = AggregationMethod::sum;
    } else if (variant == "no_regularization") {
        c.lambda_init = 1e-300;
    } else if (variant == "first_fc") {
        c.editable_layer_policy = LayerPolicy::first_fc_last_k;
    } else if (variant == "all_tokens") {
        c.token_policy = TokenPolicy::all_tokens;
    } else {
        throw ArgumentError("unknown ablation variant: " + variant);
    }
    return c;
}

inline std::vector<std::string> ablation_variants() {
    return {"default", "sum_shifts", "no_regularization", "first_fc", "all_tokens"};
}

// Runs every variant; failures are captured per row, never propagated.
inline std::vector<AblationRow> ablation_suite(const EditorConfig& base_cfg, const EditTask& task,
                                               const EditableModel& model, const std::vector<std::uint64_t>& seeds,
                                               MatchMode mode = MatchMode::sequence) {
    std::vector<AblationRow> out;
    for (const std::string& variant : ablation_variants()) {
        for (std::uint64_t seed : seeds) {
            AblationRow row;
            row.variant = variant;
            row.seed = seed;
            EditorConfig cfg = ablation_variant_config(base_cfg, variant);
            const std::string tag = aggregation_name(cfg.aggregation);
            try {
                row.metrics = run_editing_experiment(tag, cfg, task, model, cfg.m_edits, seed, mode);
                row.metrics.method = variant;
                row.outcome = "ok";
            } catch (const SingularityError& e) {
                row.outcome = "singularity(layer=" + e.layer + " pivot=" + std::to_string(e.pivot) + ")";
            } catch (const NumericError& e) {
                row.outcome = "non_finite(step=" + std::to_string(e.step) + ")";
            }
            out.push_back(std::move(row));
        }
    }
    return out;
}

} // namespace lmedit
