#pragma once

#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "lmedit/errors.hpp"
#include "lmedit/model.hpp"
#include "lmedit/rng.hpp"

// Edit / equivalent / unrelated tuple triples: a deterministic synthetic
// fact family for desk-scale experiments, plus jsonl ingestion for
// QA-style and fact-checking-style records.

namespace lmedit {

struct EditTuple {
    std::vector<int> prompt;
    std::vector<int> answer;

    bool operator==(const EditTuple& o) const { return prompt == o.prompt && answer == o.answer; }
};

struct EditTask {
    int vocab_size = 0;
    std::vector<EditTuple> edits;
    std::vector<std::vector<EditTuple>> equivalents; // per edit, >= 1 each
    std::vector<EditTuple> unrelated_pool;
    std::vector<EditTuple> base_corpus; // pre-edit knowledge (original answers)
    std::vector<int> train_edit_idx;
    std::vector<int> val_edit_idx;

    int num_edits() const { return static_cast<int>(edits.size()); }

    void validate() const {
        if (vocab_size < 2) throw ArgumentError("task: vocab too small");
        if (edits.size() != equivalents.size()) throw ArgumentError("task: equivalents misaligned");
        for (const auto& eq : equivalents)
            if (eq.empty()) throw ArgumentError("task: every edit needs at least one equivalent");
        auto check = [&](const EditTuple& t) {
            if (t.prompt.empty() || t.answer.empty()) throw ArgumentError("task: empty prompt or answer");
            for (int x : t.prompt)
                if (x < 0 || x >= vocab_size) throw ArgumentError("task: prompt token out of vocabulary");
            for (int x : t.answer)
                if (x < 0 || x >= vocab_size) throw ArgumentError("task: answer token out of vocabulary");
        };
        for (const auto& e : edits) check(e);
        for (const auto& eq : equivalents)
            for (const auto& e : eq) check(e);
        for (const auto& e : unrelated_pool) check(e);
        for (const auto& e : base_corpus) check(e);
    }
};

struct SyntheticTaskConfig {
    std::uint64_t seed = 0;
    int num_facts = 64;
    int vocab_size = 160;
    int prompt_len = 4;
    int paraphrases_per_fact = 2;
    // true: edit answers replace the pre-trained object (the fact-check
    // regime); false: edit facts are held out of the base corpus and edited
    // to their true objects (the QA regime).
    bool flip_labels = true;
    double val_fraction = 0.25;
};

namespace detail_tasks {

constexpr int kFrames = 6;
constexpr int kRelations = 4; // semantic relations, two surface tokens each

struct VocabLayout {
    int frame0 = 0;
    int rel0 = kFrames;
    int obj0 = kFrames + 2 * kRelations;
    int num_objects = 0;
    int subj0 = 0;
    int num_subjects = 0;
};

inline VocabLayout layout_vocab(const SyntheticTaskConfig& cfg) {
    VocabLayout v;
    // facts are (subject, relation) pairs; each subject carries kRelations
    // facts, and unrelated facts use a disjoint subject range
    const int subj_per_side = (cfg.num_facts + kRelations - 1) / kRelations;
    v.num_subjects = 2 * subj_per_side;
    const int fixed = v.obj0 + v.num_subjects;
    v.num_objects = cfg.vocab_size - fixed;
    if (v.num_objects > 16) v.num_objects = 16;
    if (cfg.num_facts < 1 || cfg.prompt_len < 3 || cfg.paraphrases_per_fact < 1 || v.num_objects < 4)
        throw ArgumentError("synthetic task: infeasible sizes (vocabulary too small for the fact count)");
    v.subj0 = v.obj0 + v.num_objects;
    return v;
}

// Render a prompt for (subject, relation) in paraphrase variant `v`:
// leading filler frames, then a frame marker and the subject/relation pair
// whose order and relation synonym depend on the variant.
inline std::vector<int> render_prompt(const VocabLayout& lay, int subj_tok, int rel_sem, int variant, int prompt_len) {
    const int frame = lay.frame0 + variant % kFrames;
    const int rel_tok = lay.rel0 + 2 * rel_sem + ((variant / 2) % 2);
    const bool swapped = variant % 2 == 1;
    std::vector<int> p;
    p.reserve(static_cast<std::size_t>(prompt_len));
    for (int i = 0; i < prompt_len - 3; ++i) p.push_back(lay.frame0 + (variant + i + 1) % kFrames);
    p.push_back(frame);
    if (swapped) {
        p.push_back(rel_tok);
        p.push_back(subj_tok);
    } else {
        p.push_back(subj_tok);
        p.push_back(rel_tok);
    }
    return p;
}

} // namespace detail_tasks

inline EditTask generate_synthetic_task(const SyntheticTaskConfig& cfg) {
    using namespace detail_tasks;
    const VocabLayout lay = layout_vocab(cfg);
    Rng rng(cfg.seed);

    EditTask task;
    task.vocab_size = cfg.vocab_size;
    task.edits.reserve(static_cast<std::size_t>(cfg.num_facts));
    task.equivalents.reserve(static_cast<std::size_t>(cfg.num_facts));

    const int subj_per_side = lay.num_subjects / 2;
    const int total_facts = 2 * cfg.num_facts;
    for (int f = 0; f < total_facts; ++f) {
        Rng fr = rng.derive(static_cast<std::uint64_t>(f));
        const bool unrel_side = f >= cfg.num_facts;
        const int local = unrel_side ? f - cfg.num_facts : f;
        const int subj = lay.subj0 + (unrel_side ? subj_per_side : 0) + local / kRelations;
        const int rel = local % kRelations;
        const int o_orig = lay.obj0 + static_cast<int>(fr.below(static_cast<std::uint64_t>(lay.num_objects)));
        int o_edit = o_orig;
        if (cfg.flip_labels) {
            const int step = 1 + static_cast<int>(fr.below(static_cast<std::uint64_t>(lay.num_objects - 1)));
            o_edit = lay.obj0 + (o_orig - lay.obj0 + step) % lay.num_objects;
        }
        const bool is_edit_fact = f < cfg.num_facts;

        // base corpus: every variant with the original object, except that
        // in the QA regime the edit facts are unseen before editing
        if (cfg.flip_labels || !is_edit_fact) {
            for (int v = 0; v <= cfg.paraphrases_per_fact; ++v)
                task.base_corpus.push_back({render_prompt(lay, subj, rel, v, cfg.prompt_len), {o_orig}});
        }

        if (is_edit_fact) {
            task.edits.push_back({render_prompt(lay, subj, rel, 0, cfg.prompt_len), {o_edit}});
            std::vector<EditTuple> eq;
            for (int v = 1; v <= cfg.paraphrases_per_fact; ++v)
                eq.push_back({render_prompt(lay, subj, rel, v, cfg.prompt_len), {o_edit}});
            task.equivalents.push_back(std::move(eq));
        } else {
            task.unrelated_pool.push_back({render_prompt(lay, subj, rel, 0, cfg.prompt_len), {o_orig}});
        }
    }

    // split tags
    std::vector<int> idx(static_cast<std::size_t>(cfg.num_facts));
    for (int i = 0; i < cfg.num_facts; ++i) idx[static_cast<std::size_t>(i)] = i;
    Rng split_rng = rng.derive(0x5eedULL);
    split_rng.shuffle(idx);
    const int val_count = std::max(1, static_cast<int>(cfg.num_facts * cfg.val_fraction));
    for (int i = 0; i < cfg.num_facts; ++i) {
        if (i < cfg.num_facts - val_count)
            task.train_edit_idx.push_back(idx[static_cast<std::size_t>(i)]);
        else
            task.val_edit_idx.push_back(idx[static_cast<std::size_t>(i)]);
    }
    task.validate();
    return task;
}

// ---- sampling ----

struct EditBatchTriple {
    Batch edit, equiv, unrel;
    std::vector<int> edit_indices;
};

enum class TaskSplit { train, val, all };

inline const char* split_name(TaskSplit s) {
    return s == TaskSplit::train ? "train" : s == TaskSplit::val ? "val" : "all";
}

// m aligned (edit, equivalent, unrelated) triples, sampled without
// replacement over the split's edits.
inline EditBatchTriple sample_edit_batch(const EditTask& task, int m, std::uint64_t seed,
                                         TaskSplit split = TaskSplit::all) {
    std::vector<int> pool;
    switch (split) {
        case TaskSplit::train: pool = task.train_edit_idx; break;
        case TaskSplit::val: pool = task.val_edit_idx; break;
        case TaskSplit::all:
            pool.resize(task.edits.size());
            for (std::size_t i = 0; i < task.edits.size(); ++i) pool[i] = static_cast<int>(i);
            break;
    }
    if (m < 1 || m > static_cast<int>(pool.size()))
        throw ArgumentError("sample_edit_batch: m out of range for split " + std::string(split_name(split)) + " (" +
                            std::to_string(pool.size()) + " edits)");
    if (static_cast<int>(task.unrelated_pool.size()) < m)
        throw ArgumentError("sample_edit_batch: unrelated pool smaller than m");

    Rng rng(seed);
    auto picks = rng.sample_without_replacement(static_cast<int>(pool.size()), m);
    auto unrel_picks = rng.sample_without_replacement(static_cast<int>(task.unrelated_pool.size()), m);

    std::vector<std::vector<int>> ep, ea, qp, qa, up, ua;
    EditBatchTriple out;
    for (int i = 0; i < m; ++i) {
        const int ei = pool[static_cast<std::size_t>(picks[static_cast<std::size_t>(i)])];
        out.edit_indices.push_back(ei);
        const EditTuple& e = task.edits[static_cast<std::size_t>(ei)];
        const auto& eqs = task.equivalents[static_cast<std::size_t>(ei)];
        const EditTuple& q = eqs[static_cast<std::size_t>(rng.below(eqs.size()))];
        const EditTuple& u = task.unrelated_pool[static_cast<std::size_t>(unrel_picks[static_cast<std::size_t>(i)])];
        ep.push_back(e.prompt);
        ea.push_back(e.answer);
        qp.push_back(q.prompt);
        qa.push_back(q.answer);
        up.push_back(u.prompt);
        ua.push_back(u.answer);
    }
    out.edit = Batch::make(std::move(ep), std::move(ea));
    out.equiv = Batch::make(std::move(qp), std::move(qa));
    out.unrel = Batch::make(std::move(up), std::move(ua));
    return out;
}

// ---- vocabulary and jsonl ingestion ----

struct Vocabulary {
    std::vector<std::string> tokens;
    std::map<std::string, int> index;

    static Vocabulary load(const std::string& path) {
        std::ifstream in(path);
        if (!in) throw ArgumentError("vocabulary: cannot open " + path);
        Vocabulary v;
        std::string line;
        long ln = 0;
        while (std::getline(in, line)) {
            ++ln;
            if (!line.empty() && line.back() == '\r') line.pop_back();
            if (line.empty()) throw ParseError("vocabulary: empty token", ln);
            if (v.index.count(line)) throw ParseError("vocabulary: duplicate token '" + line + "'", ln);
            v.index.emplace(line, static_cast<int>(v.tokens.size()));
            v.tokens.push_back(line);
        }
        return v;
    }

    int size() const { return static_cast<int>(tokens.size()); }

    std::vector<int> tokenize(const std::string& text, long line_for_errors = 0) const {
        std::vector<int> out;
        std::istringstream ss(text);
        std::string w;
        while (ss >> w) {
            auto it = index.find(w);
            if (it == index.end()) throw ParseError("unknown token '" + w + "'", line_for_errors);
            out.push_back(it->second);
        }
        return out;
    }

    std::string detokenize(const std::vector<int>& ids) const {
        std::string out;
        for (std::size_t i = 0; i < ids.size(); ++i) {
            if (i) out += ' ';
            out += tokens.at(static_cast<std::size_t>(ids[i]));
        }
        return out;
    }
};

enum class DatasetFormat { qa_jsonl, fc_jsonl };

inline DatasetFormat dataset_format_from_name(const std::string& s) {
    if (s == "qa-jsonl") return DatasetFormat::qa_jsonl;
    if (s == "fc-jsonl") return DatasetFormat::fc_jsonl;
    throw ArgumentError("unknown dataset format: " + s);
}

// One record per line:
//   qa-jsonl: {"prompt": str, "answer": str, "equivalents": [str, ...]}
//   fc-jsonl: same plus "label": bool; the answer becomes True/False.
inline EditTask load_dataset(const std::string& path, DatasetFormat format, const Vocabulary& vocab) {
    std::ifstream in(path);
    if (!in) throw ArgumentError("dataset: cannot open " + path);
    EditTask task;
    task.vocab_size = vocab.size();
    std::string line;
    long ln = 0;
    while (std::getline(in, line)) {
        ++ln;
        if (line.empty()) continue;
        nlohmann::json j;
        try {
            j = nlohmann::json::parse(line);
        } catch (const nlohmann::json::exception& e) {
            throw ParseError(std::string("bad json: ") + e.what(), ln);
        }
        if (!j.contains("prompt") || !j["prompt"].is_string()) throw ParseError("missing field 'prompt'", ln);
        if (!j.contains("equivalents") || !j["equivalents"].is_array())
            throw ParseError("missing field 'equivalents'", ln);

        EditTuple e;
        e.prompt = vocab.tokenize(j["prompt"].get<std::string>(), ln);
        if (format == DatasetFormat::fc_jsonl) {
            if (!j.contains("label") || !j["label"].is_boolean()) throw ParseError("missing field 'label'", ln);
            const std::string tok = j["label"].get<bool>() ? "True" : "False";
            auto it = vocab.index.find(tok);
            if (it == vocab.index.end()) throw ParseError("vocabulary lacks token '" + tok + "'", ln);
            e.answer = {it->second};
        } else {
            if (!j.contains("answer") || !j["answer"].is_string()) throw ParseError("missing field 'answer'", ln);
            e.answer = vocab.tokenize(j["answer"].get<std::string>(), ln);
        }
        if (e.prompt.empty() || e.answer.empty()) throw ParseError("empty prompt or answer", ln);

        std::vector<EditTuple> eqs;
        for (const auto& q : j["equivalents"]) {
            if (!q.is_string()) throw ParseError("equivalent not a string", ln);
            EditTuple et;
            et.prompt = vocab.tokenize(q.get<std::string>(), ln);
            et.answer = e.answer;
            if (et.prompt.empty()) throw ParseError("empty equivalent prompt", ln);
            eqs.push_back(std::move(et));
        }
        if (eqs.empty()) eqs.push_back(e); // a bare record is its own equivalent
        task.edits.push_back(std::move(e));
        task.equivalents.push_back(std::move(eqs));
    }
    for (std::size_t i = 0; i < task.edits.size(); ++i) task.train_edit_idx.push_back(static_cast<int>(i));
    return task;
}

// Use another dataset's records as this task's unrelated pool; prompts must
// not collide with any edit or equivalent.
inline void attach_unrelated_pool(EditTask& task, const EditTask& source) {
    for (const EditTuple& u : source.edits) {
        for (const EditTuple& e : task.edits)
            if (e.prompt == u.prompt) throw ArgumentError("unrelated pool shares a prompt with an edit");
        for (const auto& eqs : task.equivalents)
            for (const EditTuple& e : eqs)
                if (e.prompt == u.prompt) throw ArgumentError("unrelated pool shares a prompt with an equivalent");
        task.unrelated_pool.push_back(u);
    }
}

} // namespace lmedit
