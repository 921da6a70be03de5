#pragma once

#include <fstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "lmedit/editor.hpp"
#include "lmedit/errors.hpp"
#include "lmedit/model.hpp"
#include "lmedit/tasks.hpp"

// Versioned, self-describing json checkpoints. Values are written with
// round-trip precision, so save/load is bit exact and artifacts are
// byte-stable under a fixed seed.

namespace lmedit {

inline std::uint64_t fnv1a(const std::string& s) {
    std::uint64_t h = 1469598103934665603ULL;
    for (unsigned char c : s) {
        h ^= c;
        h *= 1099511628211ULL;
    }
    return h;
}

inline std::string hash_hex(std::uint64_t h) {
    static const char* digits = "0123456789abcdef";
    std::string out(16, '0');
    for (int i = 15; i >= 0; --i) {
        out[static_cast<std::size_t>(i)] = digits[h & 0xf];
        h >>= 4;
    }
    return out;
}

struct ArtifactMeta {
    std::string config_hash; // hash of the run configuration
    std::uint64_t seed = 0;
};

namespace detail_io {

inline nlohmann::json dvec_to_json(const DVec& v) {
    nlohmann::json a = nlohmann::json::array();
    for (double x : v) a.push_back(x);
    return a;
}

inline DVec dvec_from_json(const nlohmann::json& a) {
    DVec v;
    v.reserve(a.size());
    for (const auto& x : a) v.push_back(x.get<double>());
    return v;
}

inline void write_json_file(const std::string& path, const nlohmann::json& j) {
    std::ofstream out(path);
    if (!out) throw ArgumentError("cannot write " + path);
    out << j.dump(1) << '\n';
}

inline nlohmann::json read_json_file(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw ArgumentError("cannot open " + path);
    try {
        return nlohmann::json::parse(in);
    } catch (const nlohmann::json::exception& e) {
        throw ParseError(std::string("bad checkpoint json in ") + path + ": " + e.what(), 0);
    }
}

inline nlohmann::json meta_to_json(const ArtifactMeta& m) {
    return {{"config_hash", m.config_hash}, {"seed", m.seed}};
}

} // namespace detail_io

// ---- model checkpoints ----

inline void save_model(const EditableModel& m, const std::string& path, const ArtifactMeta& meta = {}) {
    const ModelConfig& c = m.config();
    nlohmann::json j;
    j["format"] = "lmedit-model";
    j["version"] = 1;
    j["config"] = {{"vocab_size", c.vocab_size}, {"dim", c.dim},           {"hidden", c.hidden},
                   {"num_blocks", c.num_blocks}, {"activation", activation_name(c.act)},
                   {"residual", c.residual},     {"pool_decay", c.pool_decay}};
    nlohmann::json ed = nlohmann::json::array();
    for (LayerId id : m.editable_set()) ed.push_back(to_string(id));
    j["editable"] = ed;
    j["params"] = detail_io::dvec_to_json(m.params()); // row-major per layer
    j["meta"] = detail_io::meta_to_json(meta);
    detail_io::write_json_file(path, j);
}

inline EditableModel load_model(const std::string& path) {
    nlohmann::json j = detail_io::read_json_file(path);
    if (j.value("format", "") != "lmedit-model") throw ParseError("not a model checkpoint: " + path, 0);
    if (j.value("version", 0) != 1) throw ParseError("unsupported model checkpoint version", 0);
    const auto& c = j.at("config");
    ModelConfig cfg;
    cfg.vocab_size = c.at("vocab_size").get<int>();
    cfg.dim = c.at("dim").get<int>();
    cfg.hidden = c.at("hidden").get<int>();
    cfg.num_blocks = c.at("num_blocks").get<int>();
    cfg.act = activation_from_name(c.at("activation").get<std::string>());
    cfg.residual = c.at("residual").get<bool>();
    cfg.pool_decay = c.at("pool_decay").get<double>();
    std::vector<LayerId> editable;
    for (const auto& s : j.at("editable")) editable.push_back(layer_id_from_string(s.get<std::string>()));
    return EditableModel::from_parts(cfg, std::move(editable), detail_io::dvec_from_json(j.at("params")));
}

// ---- optimizer state ----

struct AdamState {
    DVec m, v;
    long t = 0;

    void ensure_size(std::size_t n) {
        if (m.size() != n) {
            m.assign(n, 0.0);
            v.assign(n, 0.0);
            t = 0;
        }
    }

    // standard bias-corrected update
    void step(DVec& params, const DVec& grad, double lr, double beta1 = 0.9, double beta2 = 0.999,
              double eps = 1e-8) {
        ensure_size(params.size());
        ++t;
        const double bc1 = 1.0 - std::pow(beta1, static_cast<double>(t));
        const double bc2 = 1.0 - std::pow(beta2, static_cast<double>(t));
        for (std::size_t i = 0; i < params.size(); ++i) {
            m[i] = beta1 * m[i] + (1.0 - beta1) * grad[i];
            v[i] = beta2 * v[i] + (1.0 - beta2) * grad[i] * grad[i];
            params[i] -= lr * (m[i] / bc1) / (std::sqrt(v[i] / bc2) + eps);
        }
    }
};

// ---- editor checkpoints ----

inline void save_editor(const HyperNetwork& h, const std::string& path, const AdamState* opt = nullptr,
                        const ArtifactMeta& meta = {}) {
    nlohmann::json j;
    j["format"] = "lmedit-editor";
    j["version"] = 1;
    j["rank"] = h.rank();
    j["blocks"] = h.num_blocks();
    nlohmann::json layers = nlohmann::json::array();
    for (int li = 0; li < h.num_layers(); ++li) {
        auto [d, dp] = h.layer_shape(li);
        layers.push_back({{"id", to_string(h.layers()[static_cast<std::size_t>(li)])}, {"key_dim", d}, {"val_dim", dp}});
    }
    j["layers"] = layers;
    j["theta"] = detail_io::dvec_to_json(h.theta());
    nlohmann::json norms = nlohmann::json::array();
    for (const auto& g : h.groups())
        norms.push_back({{"key_dim", g.key_dim},
                         {"val_dim", g.val_dim},
                         {"mean", detail_io::dvec_to_json(g.norm_mean)},
                         {"std", detail_io::dvec_to_json(g.norm_std)}});
    j["normalizers"] = norms;
    if (opt) {
        j["optimizer"] = {{"m", detail_io::dvec_to_json(opt->m)}, {"v", detail_io::dvec_to_json(opt->v)}, {"t", opt->t}};
    }
    j["meta"] = detail_io::meta_to_json(meta);
    detail_io::write_json_file(path, j);
}

inline HyperNetwork load_editor(const std::string& path, AdamState* opt_out = nullptr) {
    nlohmann::json j = detail_io::read_json_file(path);
    if (j.value("format", "") != "lmedit-editor") throw ParseError("not an editor checkpoint: " + path, 0);
    if (j.value("version", 0) != 1) throw ParseError("unsupported editor checkpoint version", 0);
    std::vector<LayerId> layers;
    std::vector<std::pair<int, int>> shapes;
    for (const auto& l : j.at("layers")) {
        layers.push_back(layer_id_from_string(l.at("id").get<std::string>()));
        shapes.push_back({l.at("key_dim").get<int>(), l.at("val_dim").get<int>()});
    }
    HyperNetwork h = HyperNetwork::from_parts(std::move(layers), std::move(shapes), j.at("rank").get<int>(),
                                              j.at("blocks").get<int>());
    DVec theta = detail_io::dvec_from_json(j.at("theta"));
    if (theta.size() != h.theta_size()) throw ParseError("editor checkpoint: theta size mismatch", 0);
    h.theta() = std::move(theta);
    const auto& norms = j.at("normalizers");
    if (norms.size() != h.groups().size()) throw ParseError("editor checkpoint: normalizer count mismatch", 0);
    for (std::size_t gi = 0; gi < norms.size(); ++gi)
        h.set_normalizer(static_cast<int>(gi), detail_io::dvec_from_json(norms[gi].at("mean")),
                         detail_io::dvec_from_json(norms[gi].at("std")));
    if (opt_out && j.contains("optimizer")) {
        opt_out->m = detail_io::dvec_from_json(j["optimizer"].at("m"));
        opt_out->v = detail_io::dvec_from_json(j["optimizer"].at("v"));
        opt_out->t = j["optimizer"].at("t").get<long>();
    }
    return h;
}

// ---- task files ----

namespace detail_io {

inline nlohmann::json tuple_to_json(const EditTuple& t) {
    return {{"prompt", t.prompt}, {"answer", t.answer}};
}

inline EditTuple tuple_from_json(const nlohmann::json& j) {
    EditTuple t;
    t.prompt = j.at("prompt").get<std::vector<int>>();
    t.answer = j.at("answer").get<std::vector<int>>();
    return t;
}

} // namespace detail_io

inline void save_task(const EditTask& task, const std::string& path, const ArtifactMeta& meta = {}) {
    nlohmann::json j;
    j["format"] = "lmedit-task";
    j["version"] = 1;
    j["vocab_size"] = task.vocab_size;
    nlohmann::json edits = nlohmann::json::array();
    for (std::size_t i = 0; i < task.edits.size(); ++i) {
        nlohmann::json e = detail_io::tuple_to_json(task.edits[i]);
        nlohmann::json eqs = nlohmann::json::array();
        for (const auto& q : task.equivalents[i]) eqs.push_back(detail_io::tuple_to_json(q));
        e["equivalents"] = eqs;
        edits.push_back(e);
    }
    j["edits"] = edits;
    nlohmann::json pool = nlohmann::json::array();
    for (const auto& u : task.unrelated_pool) pool.push_back(detail_io::tuple_to_json(u));
    j["unrelated_pool"] = pool;
    nlohmann::json base = nlohmann::json::array();
    for (const auto& b : task.base_corpus) base.push_back(detail_io::tuple_to_json(b));
    j["base_corpus"] = base;
    j["train_edit_idx"] = task.train_edit_idx;
    j["val_edit_idx"] = task.val_edit_idx;
    j["meta"] = detail_io::meta_to_json(meta);
    detail_io::write_json_file(path, j);
}

inline EditTask load_task(const std::string& path) {
    nlohmann::json j = detail_io::read_json_file(path);
    if (j.value("format", "") != "lmedit-task") throw ParseError("not a task file: " + path, 0);
    if (j.value("version", 0) != 1) throw ParseError("unsupported task file version", 0);
    EditTask task;
    task.vocab_size = j.at("vocab_size").get<int>();
    for (const auto& e : j.at("edits")) {
        task.edits.push_back(detail_io::tuple_from_json(e));
        std::vector<EditTuple> eqs;
        for (const auto& q : e.at("equivalents")) eqs.push_back(detail_io::tuple_from_json(q));
        task.equivalents.push_back(std::move(eqs));
    }
    for (const auto& u : j.at("unrelated_pool")) task.unrelated_pool.push_back(detail_io::tuple_from_json(u));
    for (const auto& b : j.at("base_corpus")) task.base_corpus.push_back(detail_io::tuple_from_json(b));
    task.train_edit_idx = j.at("train_edit_idx").get<std::vector<int>>();
    task.val_edit_idx = j.at("val_edit_idx").get<std::vector<int>>();
    task.validate();
    return task;
}

} // namespace lmedit
