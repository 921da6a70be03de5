#include <catch2/catch_amalgamated.hpp>

#include "lmedit/meta_grad.hpp"
#include "lmedit/ref/oracle.hpp"
#include "support/fd.hpp"

using namespace lmedit;
using testsupport::rel_err;
using testsupport::rel_err_norm;

namespace {

Matrix random_matrix(int r, int c, std::uint64_t seed, double sigma = 1.0) {
    Rng g(seed);
    return Matrix::random_normal(r, c, g, sigma);
}

double inner(const Matrix& A, const Matrix& B) {
    double s = 0.0;
    for (std::size_t i = 0; i < A.a.size(); ++i) s += A.a[i] * B.a[i];
    return s;
}

// g(f(D)) with g(S) = <G, S> and f the normal-equation map.
double g_of_f(const Matrix& G, const Matrix& U, const Matrix& D, double lambda) {
    return inner(G, aggregate_normal_eq(U, D, lambda));
}

struct TinyInstance {
    EditableModel model;
    HyperNetwork editor;
    Batch edit, equiv, unrel;
    HookCache cache;
};

// One editable layer with key dim 4 and value dim 6 (the first FC of a
// dim-4 / hidden-6 block), rank-4 editor, 6 cached tokens.
TinyInstance tiny_instance(std::uint64_t seed) {
    TinyInstance ti;
    ModelConfig cfg;
    cfg.vocab_size = 8;
    cfg.dim = 4;
    cfg.hidden = 6;
    cfg.num_blocks = 2;
    Rng mr(seed);
    ti.model = EditableModel::init(cfg, {{1, 1}}, mr);
    Rng hr(seed + 1);
    ti.editor = HyperNetwork::init(ti.model, 4, 2, 0.05, 1e-2, hr);
    Rng noise(seed + 2);
    for (double& v : ti.editor.theta()) v += noise.normal(0.0, 0.1);
    ti.editor.set_eta(0, 0.05);
    ti.editor.set_log_lambda(0, std::log(0.3));

    ti.edit = Batch::make({{0, 1, 2}, {3, 4}, {5, 6, 0}}, {{7, 1}, {2, 3}, {4}});
    REQUIRE(ti.edit.policy_token_count(TokenPolicy::answer_only) == 5);
    // one more token to reach n = 6
    ti.edit = Batch::make({{0, 1, 2}, {3, 4}, {5, 6, 0}}, {{7, 1}, {2, 3}, {4, 5}});
    ti.equiv = Batch::make({{1, 0, 2}, {4, 3}, {6, 5, 0}}, {{7, 1}, {2, 3}, {4, 5}});
    ti.unrel = Batch::make({{2, 2, 1}, {5, 5}, {0, 6, 6}}, {{3}, {1, 0}, {2}});

    auto fw = forward_with_cache(ti.model, ti.edit, TokenPolicy::answer_only);
    ti.cache = std::move(fw.cache);
    ti.editor.fit_normalizer(ti.cache);
    return ti;
}

} // namespace

TEST_CASE("value-diff adjoint: zero weight gradient maps to zero") {
    Matrix U = random_matrix(4, 6, 1);
    Matrix G(3, 4);
    Matrix dd = grad_wrt_value_diffs(G, U, 0.5);
    REQUIRE(frob_norm(dd) == 0.0);
}

TEST_CASE("value-diff adjoint: identity keys with vanishing lambda") {
    Matrix U = Matrix::identity(5);
    Matrix G = random_matrix(3, 5, 2);
    Matrix dd = grad_wrt_value_diffs(G, U, 1e-12);
    REQUIRE(rel_err_norm(dd.a, G.a) < 1e-8);
}

TEST_CASE("value-diff adjoint matches finite differences") {
    const int d = 3, dp = 2, n = 4;
    Matrix U = random_matrix(d, n, 3);
    Matrix D = random_matrix(dp, n, 4);
    Matrix G = random_matrix(dp, d, 5);
    const double lambda = 0.5;
    Matrix got = grad_wrt_value_diffs(G, U, lambda);
    REQUIRE(got.rows == dp);
    REQUIRE(got.cols == n);
    const double eps = 1e-6;
    Matrix fd(dp, n);
    for (int i = 0; i < dp; ++i)
        for (int j = 0; j < n; ++j) {
            Matrix Dp = D;
            Dp(i, j) += eps;
            const double lp = g_of_f(G, U, Dp, lambda);
            Dp(i, j) -= 2 * eps;
            const double lm = g_of_f(G, U, Dp, lambda);
            fd(i, j) = (lp - lm) / (2 * eps);
        }
    REQUIRE(rel_err_norm(got.a, fd.a) < 1e-6);
}

TEST_CASE("value-diff adjoint is exact to first order (linear map)") {
    const int d = 5, dp = 3, n = 7;
    Matrix U = random_matrix(d, n, 6);
    Matrix D = random_matrix(dp, n, 7);
    Matrix G = random_matrix(dp, d, 8);
    const double lambda = 0.8;
    Matrix adj = grad_wrt_value_diffs(G, U, lambda);
    Rng g(9);
    for (int rep = 0; rep < 5; ++rep) {
        Matrix dD = Matrix::random_normal(dp, n, g, 1e-3);
        const double lhs = inner(adj, dD);
        const double rhs = g_of_f(G, U, D + dD, lambda) - g_of_f(G, U, D, lambda);
        REQUIRE(rel_err(lhs, rhs) < 1e-8);
    }
}

TEST_CASE("lambda gradient: zero weight gradient gives zero") {
    Matrix U = random_matrix(3, 5, 10);
    Matrix D = random_matrix(2, 5, 11);
    Matrix S = aggregate_normal_eq(U, D, 0.4);
    Matrix G(2, 3);
    REQUIRE(grad_wrt_lambda(G, U, 0.4, S, D) == 0.0);
}

TEST_CASE("lambda gradient: the two published forms agree") {
    for (std::uint64_t seed = 20; seed < 25; ++seed) {
        const int d = 4, dp = 3, n = 6;
        Matrix U = random_matrix(d, n, seed);
        Matrix D = random_matrix(dp, n, seed + 40);
        Matrix G = random_matrix(dp, d, seed + 80);
        const double lambda = 0.7;
        Matrix S = aggregate_normal_eq(U, D, lambda);
        const double via_shift = grad_wrt_lambda(G, U, lambda, S, D);

        // -tr(G (UU^T + lI)^{-2} U D^T), assembled with explicit solves
        Matrix A(d, d);
        gemm_nt_acc(A, U, U);
        for (int i = 0; i < d; ++i) A(i, i) += lambda;
        Matrix UD(d, dp); // U D^T
        gemm_nt_acc(UD, U, D);
        auto f = SpdFactor::cholesky(A);
        Matrix X = UD;
        for (int c = 0; c < dp; ++c) { // A^{-2} U D^T, column by column
            DVec col(static_cast<std::size_t>(d));
            for (int r = 0; r < d; ++r) col[static_cast<std::size_t>(r)] = X(r, c);
            f.solve_inplace({col.data(), col.size()});
            f.solve_inplace({col.data(), col.size()});
            for (int r = 0; r < d; ++r) X(r, c) = col[static_cast<std::size_t>(r)];
        }
        double tr = 0.0; // tr(G X) with G (dp x d), X (d x dp)
        for (int i = 0; i < dp; ++i)
            for (int j = 0; j < d; ++j) tr += G(i, j) * X(j, i);
        REQUIRE(rel_err(via_shift, -tr) < 1e-10);
    }
}

TEST_CASE("lambda gradient matches finite differences") {
    const int d = 4, dp = 2, n = 5;
    Matrix U = random_matrix(d, n, 30);
    Matrix D = random_matrix(dp, n, 31);
    Matrix G = random_matrix(dp, d, 32);
    const double lambda = 0.6;
    Matrix S = aggregate_normal_eq(U, D, lambda);
    const double got = grad_wrt_lambda(G, U, lambda, S, D);
    const double eps = 1e-6;
    const double fd = (g_of_f(G, U, D, lambda + eps) - g_of_f(G, U, D, lambda - eps)) / (2 * eps);
    REQUIRE(rel_err(got, fd) < 1e-6);
}

TEST_CASE("meta adjoint columns are M u_j") {
    const int d = 4, dp = 3, n = 6;
    Matrix U = random_matrix(d, n, 33);
    Matrix G = random_matrix(dp, d, 34);
    const double lambda = 0.9;
    Matrix full = grad_wrt_value_diffs(G, U, lambda);
    Matrix A(d, d);
    gemm_nt_acc(A, U, U);
    for (int i = 0; i < d; ++i) A(i, i) += lambda;
    MetaAdjoint adj{LayerId{0, 1}, SpdFactor::cholesky(A).solve_right(G), 0.0};
    for (int j = 0; j < n; ++j) {
        DVec u(static_cast<std::size_t>(d));
        for (int i = 0; i < d; ++i) u[static_cast<std::size_t>(i)] = U(i, j);
        DVec q = adj.d_grad({u.data(), u.size()});
        for (int i = 0; i < dp; ++i) REQUIRE(rel_err(q[static_cast<std::size_t>(i)], full(i, j)) < 1e-12);
    }
}

TEST_CASE("zero-step editor: no edit, no locality loss, gradient only through eta") {
    TinyInstance ti = tiny_instance(100);
    for (int li = 0; li < ti.editor.num_layers(); ++li) ti.editor.set_eta(li, 0.0);
    AccumulateOptions opt;
    opt.lambda_loc = 1.0;
    auto r = accumulate_editor_gradient(ti.editor, ti.model, ti.edit, ti.equiv, ti.unrel, opt);
    REQUIRE(r.l_loc == 0.0);
    for (double sn : r.diag.shift_norms) REQUIRE(sn == 0.0);
    // every theta component except the eta entries is zero
    for (std::size_t k = 0; k < r.theta_grad.size(); ++k) {
        bool is_eta = false;
        for (int li = 0; li < ti.editor.num_layers(); ++li)
            if (k == ti.editor.eta_offset(li)) is_eta = true;
        if (!is_eta) REQUIRE(r.theta_grad[k] == 0.0);
    }
    // and the eta gradient is alive (L_gen pressure)
    double eta_norm = 0.0;
    for (int li = 0; li < ti.editor.num_layers(); ++li) eta_norm += std::abs(r.theta_grad[ti.editor.eta_offset(li)]);
    REQUIRE(eta_norm > 0.0);
}

TEST_CASE("editor gradient is invariant to the sub-batch size") {
    TinyInstance ti = tiny_instance(200);
    AccumulateOptions opt;
    opt.lambda_loc = 0.8;
    opt.sub_batch_size = 1;
    auto a = accumulate_editor_gradient(ti.editor, ti.model, ti.edit, ti.equiv, ti.unrel, opt);
    opt.sub_batch_size = 2;
    auto b = accumulate_editor_gradient(ti.editor, ti.model, ti.edit, ti.equiv, ti.unrel, opt);
    opt.sub_batch_size = ti.edit.size();
    auto c = accumulate_editor_gradient(ti.editor, ti.model, ti.edit, ti.equiv, ti.unrel, opt);
    REQUIRE(rel_err_norm(a.theta_grad, b.theta_grad) < 1e-8);
    REQUIRE(rel_err_norm(a.theta_grad, c.theta_grad) < 1e-8);
    REQUIRE(rel_err(a.l_meta, c.l_meta) < 1e-12);
}

TEST_CASE("decomposed gradient equals the monolithic autodiff oracle") {
    TinyInstance ti = tiny_instance(300);
    AccumulateOptions opt;
    opt.lambda_loc = 1.0;
    auto dec = accumulate_editor_gradient(ti.editor, ti.model, ti.edit, ti.equiv, ti.unrel, opt);
    ref::OracleOptions oopt;
    oopt.lambda_loc = 1.0;
    auto mono = ref::monolithic_meta_gradient(ti.editor, ti.model, ti.cache, ti.equiv, ti.unrel, oopt);
    REQUIRE(rel_err(dec.l_meta, mono.l_meta) < 1e-10);
    REQUIRE(rel_err(dec.l_gen, mono.l_gen) < 1e-10);
    REQUIRE(rel_err(dec.l_loc, mono.l_loc) < 1e-10);
    REQUIRE(rel_err_norm(dec.theta_grad, mono.theta_grad) < 1e-6);
}

TEST_CASE("decomposed gradient for the summation route is finite-difference exact") {
    TinyInstance ti = tiny_instance(400);
    AccumulateOptions opt;
    opt.method = AggregationMethod::sum;
    opt.lambda_loc = 0.5;
    // keep the edit small so the loss stays well-behaved
    ti.editor.set_eta(0, 1e-3);
    auto dec = accumulate_editor_gradient(ti.editor, ti.model, ti.edit, ti.equiv, ti.unrel, opt);

    auto eval = [&]() {
        auto fw = forward_with_cache(ti.model, ti.edit, TokenPolicy::answer_only);
        auto aggs = infer_shifts(ti.editor, fw.cache, {AggregationMethod::sum, false});
        std::map<LayerId, Matrix> shifts;
        for (auto& agg : aggs) shifts.emplace(agg.layer, agg.shift);
        EditableModel post = ti.model.apply_shifts(shifts);
        MetaBackwardAccum acc(ti.model, post, opt.lambda_loc);
        acc.add_batches(ti.equiv, ti.unrel);
        return acc.finalize().l_meta;
    };
    const double eps = 1e-6;
    DVec fd(ti.editor.theta_size(), 0.0);
    Rng pick(5);
    // spot-check a subset of coordinates plus every eta
    std::vector<std::size_t> idx;
    for (int k = 0; k < 40; ++k) idx.push_back(static_cast<std::size_t>(pick.below(ti.editor.theta_size())));
    idx.push_back(ti.editor.eta_offset(0));
    for (std::size_t k : idx) {
        const double keep = ti.editor.theta()[k];
        ti.editor.theta()[k] = keep + eps;
        const double lp = eval();
        ti.editor.theta()[k] = keep - eps;
        const double lm = eval();
        ti.editor.theta()[k] = keep;
        const double want = (lp - lm) / (2 * eps);
        if (std::abs(want) > 1e-9) REQUIRE(rel_err(dec.theta_grad[k], want) < 1e-4);
    }
}
