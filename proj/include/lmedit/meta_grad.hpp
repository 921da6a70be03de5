#pragma once

#include <map>
#include <string>
#include <vector>

#include "lmedit/aggregate.hpp"
#include "lmedit/editor.hpp"
#include "lmedit/errors.hpp"
#include "lmedit/matrix.hpp"
#include "lmedit/model.hpp"
#include "lmedit/solve.hpp"

// The decomposed meta gradient. Back-propagation on the language model and
// on the editor never share a graph; the closed-form adjoints of the
// normal-equation map bridge them:
//
//   grad wrt D      : G (U U^T + lambda I)^{-1} U          (per column on demand)
//   d/d lambda      : -tr(M S*^T),  M = G (U U^T + lambda I)^{-1}
//
// so the editor-side gradient is recovered by back-propagating the proxy
// loss  L~ = sum <grad_d, d>  over cache sub-batches with the grad_d held
// constant.

namespace lmedit {

// Exact adjoint of D -> D U^T (U U^T + lambda I)^{-1} applied to weight_grad.
inline Matrix grad_wrt_value_diffs(const Matrix& weight_grad, const Matrix& U, double lambda) {
    if (weight_grad.cols != U.rows) throw ShapeError("grad_wrt_value_diffs: shape mismatch");
    if (!(lambda > 0.0)) throw ArgumentError("grad_wrt_value_diffs: lambda must be > 0");
    Matrix A(U.rows, U.rows);
    gemm_nt_acc(A, U, U);
    for (int i = 0; i < A.rows; ++i) A(i, i) += lambda;
    Matrix M = SpdFactor::cholesky(A).solve_right(weight_grad); // d' x d
    return matmul(M, U);                                        // d' x n
}

// d L / d lambda = -tr(M S*^T) with M = weight_grad (U U^T + lambda I)^{-1}.
// The log-parameterization chain rule is applied by the caller.
inline double grad_wrt_lambda(const Matrix& weight_grad, const Matrix& U, double lambda, const Matrix& S,
                              const Matrix& D) {
    if (weight_grad.cols != U.rows || S.cols != U.rows || S.rows != weight_grad.rows)
        throw ShapeError("grad_wrt_lambda: shape mismatch");
    if (D.rows != S.rows || D.cols != U.cols) throw ShapeError("grad_wrt_lambda: D shape mismatch");
    if (!(lambda > 0.0)) throw ArgumentError("grad_wrt_lambda: lambda must be > 0");
    Matrix A(U.rows, U.rows);
    gemm_nt_acc(A, U, U);
    for (int i = 0; i < A.rows; ++i) A(i, i) += lambda;
    Matrix M = SpdFactor::cholesky(A).solve_right(weight_grad);
    double tr = 0.0;
    for (std::size_t i = 0; i < M.a.size(); ++i) tr += M.a[i] * S.a[i];
    return -tr;
}

// Per-layer adjoint state assembled after the LM-side meta backward.
struct MetaAdjoint {
    LayerId layer;
    Matrix m;                 // G (U U^T + lambda I)^{-1}, d' x d
    double lambda_grad = 0.0; // d L_meta / d lambda

    // grad of L_meta w.r.t. the value difference of one cached key
    DVec d_grad(std::span<const double> key) const {
        DVec q(static_cast<std::size_t>(m.rows));
        matvec(m, key, {q.data(), q.size()});
        return q;
    }
};

struct StepDiagnostics {
    double l_gen = 0.0, l_loc = 0.0, l_meta = 0.0;
    double mean_residual = 0.0;
    long residual_excluded = 0;
    std::vector<std::string> layer_ids;
    std::vector<double> shift_norms;
    std::vector<double> lambdas;
};

struct EditorGradients {
    DVec theta_grad;
    double l_meta = 0.0;
    double l_gen = 0.0;
    double l_loc = 0.0;
    StepDiagnostics diag;
};

struct GradientOptions {
    double lambda_loc = 1.0;
    int sub_batch_size = 1;
    bool with_residuals = false; // adds a second streaming pass over the cache
};

// Stages (ii)-(iv): LM-side meta backward, closed-form adjoints, and the
// editor-side proxy backward, given an already-run editor inference.
// The cache and aggregations are inputs; nothing here scales with the
// total token count beyond reading them.
inline EditorGradients gradient_from_inference(const HyperNetwork& h, const EditableModel& pre_model,
                                               const EditableModel& post_model, const HookCache& cache,
                                               const std::vector<LayerAggregation>& aggs, const Batch& equiv,
                                               const Batch& unrel, const GradientOptions& opt) {
    if (opt.sub_batch_size < 1) throw ArgumentError("gradient: sub_batch_size must be >= 1");

    // (ii) accumulate d L_meta / d W~ over equivalent and unrelated tuples
    MetaBackwardAccum acc(pre_model, post_model, opt.lambda_loc);
    acc.add_batches(equiv, unrel);
    MetaBackwardResult mb = acc.finalize();

    EditorGradients out;
    out.l_meta = mb.l_meta;
    out.l_gen = mb.l_gen;
    out.l_loc = mb.l_loc;
    out.theta_grad.assign(h.theta_size(), 0.0);

    // (iii) adjoints through the aggregation
    std::vector<MetaAdjoint> adjoints;
    adjoints.reserve(aggs.size());
    for (const LayerAggregation& agg : aggs) {
        const int li = h.layer_index(agg.layer);
        const Matrix& G = mb.grads.at(agg.layer);
        MetaAdjoint adj;
        adj.layer = agg.layer;
        if (agg.method == AggregationMethod::normal_eq) {
            if (!agg.factor) throw ArgumentError("gradient: aggregation lacks retained factorization");
            adj.m = agg.factor->solve_right(G);
            double tr = 0.0;
            for (std::size_t i = 0; i < adj.m.a.size(); ++i) tr += adj.m.a[i] * agg.shift.a[i];
            adj.lambda_grad = -tr;
            // chain through the log parameterization: d/d(log l) = l * d/dl
            out.theta_grad[h.log_lambda_offset(li)] += agg.lambda * adj.lambda_grad;
        } else {
            adj.m = G; // summation route: dL/dS_j = G directly
        }
        adjoints.push_back(std::move(adj));
    }

    // (iv) editor-side backward, streamed over cache tuples
    for (std::size_t ai = 0; ai < adjoints.size(); ++ai) {
        const MetaAdjoint& adj = adjoints[ai];
        const int li = h.layer_index(adj.layer);
        const int ci = cache.layer_index(adj.layer);
        const auto [d, dp] = h.layer_shape(li);
        const auto& ks = cache.keys[static_cast<std::size_t>(ci)];
        const auto& gs = cache.vgrads[static_cast<std::size_t>(ci)];
        const double eta = h.eta(li);
        const bool normal_route = aggs[ai].method == AggregationMethod::normal_eq;

        DVec dout(static_cast<std::size_t>(d + dp));
        DVec q(static_cast<std::size_t>(dp));
        for (std::size_t j = 0; j < ks.size(); ++j) {
            auto tr = h.eval_tuple(li, {ks[j].data(), ks[j].size()}, {gs[j].data(), gs[j].size()});
            std::span<const double> pseudo_key{tr.out.data(), static_cast<std::size_t>(d)};
            std::span<const double> pseudo_vgrad{tr.out.data() + d, static_cast<std::size_t>(dp)};
            if (normal_route) {
                // L~_j = <q, d_j>, d_j = -eta (u~ . u) g~, q = M u_j constant
                matvec(adj.m, {ks[j].data(), ks[j].size()}, {q.data(), q.size()});
                const double s1 = dot(pseudo_key, {ks[j].data(), ks[j].size()});
                const double s2 = dot({q.data(), q.size()}, pseudo_vgrad);
                out.theta_grad[h.eta_offset(li)] += -s1 * s2;
                for (int i = 0; i < d; ++i)
                    dout[static_cast<std::size_t>(i)] = -eta * s2 * ks[j][static_cast<std::size_t>(i)];
                for (int i = 0; i < dp; ++i)
                    dout[static_cast<std::size_t>(d + i)] = -eta * s1 * q[static_cast<std::size_t>(i)];
            } else {
                // L~_j = tr(G^T S_j) = -eta g~^T G u~
                matvec(adj.m, pseudo_key, {q.data(), q.size()}); // G u~
                const double s = dot({q.data(), q.size()}, pseudo_vgrad);
                out.theta_grad[h.eta_offset(li)] += -s;
                DVec gt(static_cast<std::size_t>(d));
                matvec_t(adj.m, pseudo_vgrad, {gt.data(), gt.size()}); // G^T g~
                for (int i = 0; i < d; ++i)
                    dout[static_cast<std::size_t>(i)] = -eta * gt[static_cast<std::size_t>(i)];
                for (int i = 0; i < dp; ++i)
                    dout[static_cast<std::size_t>(d + i)] = -eta * q[static_cast<std::size_t>(i)];
            }
            h.backward_tuple(li, tr, {dout.data(), dout.size()}, out.theta_grad);
        }
    }

    out.diag.l_gen = out.l_gen;
    out.diag.l_loc = out.l_loc;
    out.diag.l_meta = out.l_meta;
    for (const LayerAggregation& agg : aggs) {
        out.diag.layer_ids.push_back(to_string(agg.layer));
        out.diag.shift_norms.push_back(frob_norm(agg.shift));
        out.diag.lambdas.push_back(agg.lambda);
    }
    if (opt.with_residuals) {
        ResidualReport rr = residuals_for(h, cache, aggs, false);
        out.diag.mean_residual = rr.mean_residual;
        out.diag.residual_excluded = rr.zero_norm_excluded;
    }
    return out;
}

struct AccumulateOptions {
    TokenPolicy policy = TokenPolicy::answer_only;
    AggregationMethod method = AggregationMethod::normal_eq;
    double lambda_loc = 1.0;
    int sub_batch_size = 1;
    bool with_residuals = false;
};

// Full pipeline on one edit batch: editor inference with caching, LM-side
// meta backward, adjoints, proxy backward.
inline EditorGradients accumulate_editor_gradient(const HyperNetwork& h, const EditableModel& model,
                                                  const Batch& edit_batch, const Batch& equiv, const Batch& unrel,
                                                  const AccumulateOptions& opt) {
    auto fw = forward_with_cache(model, edit_batch, opt.policy);
    auto aggs = infer_shifts(h, fw.cache, {opt.method, false});
    std::map<LayerId, Matrix> shifts;
    for (const LayerAggregation& agg : aggs) shifts.emplace(agg.layer, agg.shift);
    EditableModel post = model.apply_shifts(shifts);
    GradientOptions gopt{opt.lambda_loc, opt.sub_batch_size, opt.with_residuals};
    return gradient_from_inference(h, model, post, fw.cache, aggs, equiv, unrel, gopt);
}

} // namespace lmedit
