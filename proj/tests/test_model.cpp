#include <catch2/catch_amalgamated.hpp>

#include "lmedit/model.hpp"
#include "support/fd.hpp"

using namespace lmedit;
using testsupport::rel_err_norm;

namespace {

ModelConfig tiny_config() {
    ModelConfig cfg;
    cfg.vocab_size = 8;
    cfg.dim = 4;
    cfg.hidden = 6;
    cfg.num_blocks = 2;
    cfg.act = Activation::tanh_fn;
    return cfg;
}

EditableModel tiny_model(std::uint64_t seed = 1, std::vector<LayerId> editable = {{0, 2}, {1, 2}}) {
    Rng rng(seed);
    return EditableModel::init(tiny_config(), std::move(editable), rng);
}

Batch tiny_batch() {
    return Batch::make({{0, 1, 2}, {3, 4, 5, 6}}, {{7}, {2, 1}});
}

// Forward-only meta loss used as the finite-difference reference.
double eval_meta_loss(const EditableModel& pre, const EditableModel& post, const Batch& equiv, const Batch& unrel,
                      double lambda_loc) {
    double gen = 0.0;
    for (int i = 0; i < equiv.size(); ++i)
        gen += post.forward_example(equiv.prompts[static_cast<std::size_t>(i)], equiv.answers[static_cast<std::size_t>(i)]).loss;
    gen /= equiv.size();
    double loc = 0.0;
    for (int i = 0; i < unrel.size(); ++i) {
        auto tp = pre.forward_example(unrel.prompts[static_cast<std::size_t>(i)], unrel.answers[static_cast<std::size_t>(i)]);
        auto tq = post.forward_example(unrel.prompts[static_cast<std::size_t>(i)], unrel.answers[static_cast<std::size_t>(i)]);
        for (int r = 0; r < tp.probs.rows; ++r)
            for (int c = 0; c < tp.probs.cols; ++c) {
                const double p = tp.probs(r, c);
                if (p > 0.0) loc += p * (std::log(p) - std::log(tq.probs(r, c)));
            }
    }
    loc /= unrel.size();
    return gen + lambda_loc * loc;
}

} // namespace

TEST_CASE("perfect-fit model has zero loss and zero value gradients") {
    // every answer is token 5; a huge head bias pins probability 1 on it
    EditableModel m = tiny_model();
    m.head_b()[5] = 5.0e4;
    Batch b = Batch::make({{0, 1}, {2, 3}}, {{5}, {5}});
    auto fw = forward_with_cache(m, b, TokenPolicy::answer_only);
    REQUIRE(fw.loss == 0.0);
    for (const auto& layer : fw.cache.vgrads)
        for (const auto& g : layer)
            for (double v : g) REQUIRE(v == 0.0);
}

TEST_CASE("cache sizes follow the token policy") {
    EditableModel m = tiny_model();
    Batch b = Batch::make({{0, 1, 2, 3, 4}}, {{5}}); // 5-token prompt, 1 answer token
    auto ans = forward_with_cache(m, b, TokenPolicy::answer_only);
    auto all = forward_with_cache(m, b, TokenPolicy::all_tokens);
    REQUIRE(ans.cache.n() == 1);
    REQUIRE(all.cache.n() == 5);
    for (std::size_t li = 0; li < ans.cache.layers.size(); ++li) {
        REQUIRE(ans.cache.keys[li].size() == 1);
        REQUIRE(all.cache.keys[li].size() == 5);
    }
}

TEST_CASE("cached value gradients match finite differences of the loss") {
    EditableModel m = tiny_model(3, {{0, 1}, {0, 2}, {1, 1}, {1, 2}});
    Batch b = tiny_batch();
    for (TokenPolicy policy : {TokenPolicy::answer_only, TokenPolicy::all_tokens}) {
        auto fw = forward_with_cache(m, b, policy);
        const double eps = 1e-6;
        for (std::size_t li = 0; li < fw.cache.layers.size(); ++li) {
            for (std::size_t j = 0; j < fw.cache.vgrads[li].size(); ++j) {
                const auto& g = fw.cache.vgrads[li][j];
                DVec fd(g.size());
                for (std::size_t k = 0; k < g.size(); ++k) {
                    ValueInjection inj{fw.cache.layers[li], static_cast<int>(j), DVec(g.size(), 0.0)};
                    inj.offset[k] = eps;
                    const double lp = loss_with_injection(m, b, policy, {inj});
                    inj.offset[k] = -eps;
                    const double lm = loss_with_injection(m, b, policy, {inj});
                    fd[k] = (lp - lm) / (2 * eps);
                }
                REQUIRE(rel_err_norm(g, fd) < 1e-5);
            }
        }
    }
}

TEST_CASE("cached keys replay the actual layer inputs") {
    EditableModel m = tiny_model(4, {{1, 1}, {1, 2}});
    Batch b = tiny_batch();
    auto fw = forward_with_cache(m, b, TokenPolicy::all_tokens);
    int j = 0;
    for (int i = 0; i < b.size(); ++i) {
        auto tr = m.forward_example(b.prompts[static_cast<std::size_t>(i)], b.answers[static_cast<std::size_t>(i)]);
        for (int t = 0; t < tr.n_pos; ++t, ++j) {
            // fc1 key = pooled input, fc2 key = activation
            auto k1 = fw.cache.keys[0][static_cast<std::size_t>(j)];
            auto k2 = fw.cache.keys[1][static_cast<std::size_t>(j)];
            for (int c = 0; c < m.config().dim; ++c) REQUIRE(k1[static_cast<std::size_t>(c)] == tr.pooled[1](t, c));
            for (int c = 0; c < m.config().hidden; ++c) REQUIRE(k2[static_cast<std::size_t>(c)] == tr.act[1](t, c));
        }
    }
}

TEST_CASE("outer-product identity between weight and value gradients") {
    EditableModel m = tiny_model(5, {{0, 1}, {0, 2}, {1, 1}, {1, 2}});
    Batch b = tiny_batch();
    DVec grad;
    nll_with_grad(m, b, grad);
    auto fw = forward_with_cache(m, b, TokenPolicy::all_tokens);
    for (std::size_t li = 0; li < fw.cache.layers.size(); ++li) {
        const LayerId id = fw.cache.layers[li];
        auto [rows, cols] = m.layer_shape(id);
        Matrix outer(rows, cols);
        for (std::size_t j = 0; j < fw.cache.keys[li].size(); ++j) {
            const auto& u = fw.cache.keys[li][j];
            const auto& g = fw.cache.vgrads[li][j];
            add_outer(outer, 1.0, {g.data(), g.size()}, {u.data(), u.size()});
        }
        ConstMatView wg = m.layer_weight_in(grad, id);
        double maxdiff = 0.0;
        for (int i = 0; i < rows; ++i)
            for (int c = 0; c < cols; ++c) maxdiff = std::max(maxdiff, std::abs(outer(i, c) - wg(i, c)));
        REQUIRE(maxdiff < 1e-10);
    }
}

TEST_CASE("forward_with_cache is deterministic") {
    EditableModel m = tiny_model(6);
    Batch b = tiny_batch();
    auto a = forward_with_cache(m, b, TokenPolicy::all_tokens);
    auto c = forward_with_cache(m, b, TokenPolicy::all_tokens);
    REQUIRE(a.loss == c.loss);
    for (std::size_t li = 0; li < a.cache.keys.size(); ++li)
        for (std::size_t j = 0; j < a.cache.keys[li].size(); ++j) {
            REQUIRE(a.cache.keys[li][j] == c.cache.keys[li][j]);
            REQUIRE(a.cache.vgrads[li][j] == c.cache.vgrads[li][j]);
        }
}

TEST_CASE("forward_with_cache rejects empty batches") {
    EditableModel m = tiny_model();
    Batch empty;
    REQUIRE_THROWS_AS(forward_with_cache(m, empty, TokenPolicy::answer_only), ArgumentError);
    REQUIRE_THROWS_AS(Batch::make({}, {}), ArgumentError);
}

TEST_CASE("apply_shifts: zero shift leaves outputs identical") {
    EditableModel m = tiny_model(7);
    std::map<LayerId, Matrix> shifts;
    shifts.emplace(LayerId{0, 2}, Matrix(4, 6));
    shifts.emplace(LayerId{1, 2}, Matrix(4, 6));
    EditableModel post = m.apply_shifts(shifts);
    Batch b = tiny_batch();
    for (int i = 0; i < b.size(); ++i) {
        auto t0 = m.forward_example(b.prompts[static_cast<std::size_t>(i)], b.answers[static_cast<std::size_t>(i)]);
        auto t1 = post.forward_example(b.prompts[static_cast<std::size_t>(i)], b.answers[static_cast<std::size_t>(i)]);
        REQUIRE(t0.loss == t1.loss);
        REQUIRE(t0.probs.a == t1.probs.a);
    }
}

TEST_CASE("apply_shifts: S = -W cancels the layer weight") {
    EditableModel m = tiny_model(8, {{1, 2}});
    auto [rows, cols] = m.layer_shape({1, 2});
    Matrix neg(rows, cols);
    ConstMatView w = m.layer_weight(LayerId{1, 2});
    for (int i = 0; i < rows; ++i)
        for (int j = 0; j < cols; ++j) neg(i, j) = -w(i, j);
    EditableModel post = m.apply_shifts({{LayerId{1, 2}, neg}});
    ConstMatView we = post.layer_weight(LayerId{1, 2});
    for (int i = 0; i < rows; ++i)
        for (int j = 0; j < cols; ++j) REQUIRE(we(i, j) == 0.0);
    // untouched parameters are bit-identical
    ConstMatView w0 = m.layer_weight(LayerId{0, 2});
    ConstMatView w0e = post.layer_weight(LayerId{0, 2});
    for (int i = 0; i < w0.rows; ++i)
        for (int j = 0; j < w0.cols; ++j) REQUIRE(w0(i, j) == w0e(i, j));
}

TEST_CASE("apply_shifts equals direct weight substitution") {
    EditableModel m = tiny_model(9);
    Rng g(99);
    auto [rows, cols] = m.layer_shape({0, 2});
    Matrix s = Matrix::random_normal(rows, cols, g, 0.3);
    EditableModel post = m.apply_shifts({{LayerId{0, 2}, s}});

    EditableModel direct = m;
    MatView w = direct.layer_weight(LayerId{0, 2});
    for (int i = 0; i < rows; ++i)
        for (int j = 0; j < cols; ++j) w(i, j) += s(i, j);

    Batch b = tiny_batch();
    for (int i = 0; i < b.size(); ++i) {
        auto t0 = post.forward_example(b.prompts[static_cast<std::size_t>(i)], b.answers[static_cast<std::size_t>(i)]);
        auto t1 = direct.forward_example(b.prompts[static_cast<std::size_t>(i)], b.answers[static_cast<std::size_t>(i)]);
        REQUIRE(t0.loss == t1.loss);
    }
    // input model untouched
    REQUIRE(m.params() != post.params());
}

TEST_CASE("apply_shifts error paths") {
    EditableModel m = tiny_model(10, {{0, 2}});
    REQUIRE_THROWS_AS(m.apply_shifts({{LayerId{1, 2}, Matrix(4, 6)}}), ArgumentError);
    REQUIRE_THROWS_AS(m.apply_shifts({{LayerId{0, 2}, Matrix(3, 6)}}), ShapeError);
}

TEST_CASE("meta backward: identical models give exactly zero locality loss") {
    EditableModel m = tiny_model(11);
    Batch equiv = tiny_batch();
    Batch unrel = Batch::make({{4, 5}, {6, 0, 1}}, {{3}, {2}});
    auto r = meta_backward_on_weights(m, m, equiv, unrel, 1.0);
    REQUIRE(r.l_loc == 0.0);
}

TEST_CASE("meta backward: perfect generalization gives zero L_gen") {
    EditableModel pre = tiny_model(12);
    EditableModel post = pre;
    post.head_b()[5] = 5.0e4;
    Batch equiv = Batch::make({{0, 1}, {2}}, {{5}, {5}});
    Batch unrel = Batch::make({{4, 5}}, {{3}});
    auto r = meta_backward_on_weights(pre, post, equiv, unrel, 1.0);
    REQUIRE(r.l_gen == 0.0);
}

TEST_CASE("meta backward rejects negative lambda_loc") {
    EditableModel m = tiny_model(13);
    Batch b = tiny_batch();
    REQUIRE_THROWS_AS(meta_backward_on_weights(m, m, b, b, -0.5), ArgumentError);
}

TEST_CASE("meta backward gradients match finite differences") {
    EditableModel pre = tiny_model(14);
    Rng g(5);
    std::map<LayerId, Matrix> shifts;
    for (LayerId id : pre.editable_set()) {
        auto [rows, cols] = pre.layer_shape(id);
        shifts.emplace(id, Matrix::random_normal(rows, cols, g, 0.2));
    }
    EditableModel post = pre.apply_shifts(shifts);
    Batch equiv = tiny_batch();
    Batch unrel = Batch::make({{4, 5}, {6, 0, 1}}, {{3}, {2}});
    const double lambda_loc = 0.7;
    auto r = meta_backward_on_weights(pre, post, equiv, unrel, lambda_loc);

    const double eps = 1e-6;
    for (LayerId id : pre.editable_set()) {
        const Matrix& gm = r.grads.at(id);
        Matrix fd(gm.rows, gm.cols);
        for (int i = 0; i < gm.rows; ++i)
            for (int j = 0; j < gm.cols; ++j) {
                EditableModel pp = post;
                pp.layer_weight(id)(i, j) += eps;
                const double lp = eval_meta_loss(pre, pp, equiv, unrel, lambda_loc);
                pp.layer_weight(id)(i, j) -= 2 * eps;
                const double lm = eval_meta_loss(pre, pp, equiv, unrel, lambda_loc);
                fd(i, j) = (lp - lm) / (2 * eps);
            }
        REQUIRE(rel_err_norm(gm.a, fd.a) < 1e-5);
    }
}

TEST_CASE("sub-batched meta backward equals full batch") {
    EditableModel pre = tiny_model(15);
    EditableModel post = pre;
    post.head_b()[3] += 0.5;
    Batch equiv = Batch::make({{0, 1}, {2, 3}, {4}, {5, 6}}, {{7}, {6}, {5}, {4}});
    Batch unrel = Batch::make({{1, 2}, {3, 4}, {5}, {6, 7}}, {{0}, {1}, {2}, {3}});

    auto full = meta_backward_on_weights(pre, post, equiv, unrel, 1.3);

    MetaBackwardAccum acc(pre, post, 1.3);
    for (int i = 0; i < equiv.size(); ++i) { // one-example "sub-batches"
        acc.add_equiv(equiv.prompts[static_cast<std::size_t>(i)], equiv.answers[static_cast<std::size_t>(i)]);
    }
    for (int i = 0; i < unrel.size(); ++i)
        acc.add_unrel(unrel.prompts[static_cast<std::size_t>(i)], unrel.answers[static_cast<std::size_t>(i)]);
    auto sub = acc.finalize();

    REQUIRE(testsupport::rel_err(sub.l_meta, full.l_meta) < 1e-12);
    for (LayerId id : pre.editable_set())
        REQUIRE(rel_err_norm(sub.grads.at(id).a, full.grads.at(id).a) < 1e-8);
}
