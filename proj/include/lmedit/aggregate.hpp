#pragma once

#include <optional>
#include <ostream>
#include <string>
#include <vector>

#include "lmedit/editor.hpp"
#include "lmedit/errors.hpp"
#include "lmedit/matrix.hpp"
#include "lmedit/model.hpp"
#include "lmedit/solve.hpp"

// Aggregation of per-token parameter shifts into one shift per layer.
// The least-squares route solves  min_S ||S U - D||^2 + lambda ||S||^2
// through the normal equation  S (U U^T + lambda I) = D U^T  using an SPD
// factorization; the summation route stacks the rank-1 factors directly.

namespace lmedit {

enum class AggregationMethod { normal_eq, sum };

inline std::string aggregation_name(AggregationMethod m) {
    return m == AggregationMethod::normal_eq ? "normal_eq" : "sum";
}

inline AggregationMethod aggregation_from_name(const std::string& s) {
    if (s == "normal_eq") return AggregationMethod::normal_eq;
    if (s == "sum") return AggregationMethod::sum;
    throw ArgumentError("unknown aggregation method: " + s);
}

// Streams (key, value-difference) columns and accumulates the Gram matrix
// U U^T and the right-hand side D U^T in fixed column order, so the token
// count never has to be memory resident.
class GramAggregator {
public:
    GramAggregator(int key_dim, int val_dim)
        : gram_(key_dim, key_dim), rhs_(val_dim, key_dim) {}

    void add(std::span<const double> key, std::span<const double> value_diff) {
        add_outer(gram_, 1.0, key, key);
        add_outer(rhs_, 1.0, value_diff, key);
        ++count_;
    }

    int count() const { return count_; }
    const Matrix& gram() const { return gram_; }
    const Matrix& rhs() const { return rhs_; }

    struct Solved {
        SpdFactor factor; // of (U U^T + lambda I), reused by adjoint solves
        Matrix shift;     // S* (d' x d)
        double lambda = 0.0;
    };

    Solved solve(double lambda, const std::string& layer_tag = {}) const {
        if (!(lambda > 0.0)) throw ArgumentError("normal equation: lambda must be > 0");
        Matrix A = gram_;
        for (int i = 0; i < A.rows; ++i) A(i, i) += lambda;
        Solved s{SpdFactor::cholesky(A, layer_tag), Matrix{}, lambda};
        s.shift = s.factor.solve_right(rhs_);
        return s;
    }

private:
    Matrix gram_;
    Matrix rhs_;
    int count_ = 0;
};

// S* = argmin ||S U - D||^2 + lambda ||S||^2 for U (d x n), D (d' x n).
inline Matrix aggregate_normal_eq(const Matrix& U, const Matrix& D, double lambda) {
    if (U.cols != D.cols) throw ShapeError("aggregate_normal_eq: U and D column counts differ");
    if (!(lambda > 0.0)) throw ArgumentError("aggregate_normal_eq: lambda must be > 0");
    GramAggregator acc(U.rows, D.rows);
    DVec u(static_cast<std::size_t>(U.rows)), d(static_cast<std::size_t>(D.rows));
    for (int j = 0; j < U.cols; ++j) {
        for (int i = 0; i < U.rows; ++i) u[static_cast<std::size_t>(i)] = U(i, j);
        for (int i = 0; i < D.rows; ++i) d[static_cast<std::size_t>(i)] = D(i, j);
        acc.add({u.data(), u.size()}, {d.data(), d.size()});
    }
    return acc.solve(lambda).shift;
}

// S* = sum_j S_j = -eta * stacked pseudo-vgrads * stacked pseudo-keys^T,
// accumulated in place (no per-token d' x d matrices).
inline Matrix aggregate_sum(const ShiftFactors& factors, LayerId layer) {
    const int li = factors.layer_index(layer);
    const auto& pk = factors.pseudo_keys[static_cast<std::size_t>(li)];
    const auto& pg = factors.pseudo_vgrads[static_cast<std::size_t>(li)];
    if (pk.empty()) throw ArgumentError("aggregate_sum: no factors for layer " + to_string(layer));
    Matrix S(static_cast<int>(pg[0].size()), static_cast<int>(pk[0].size()));
    const double eta = factors.eta[static_cast<std::size_t>(li)];
    for (std::size_t j = 0; j < pk.size(); ++j)
        add_outer(S, -eta, {pg[j].data(), pg[j].size()}, {pk[j].data(), pk[j].size()});
    return S;
}

// ---- residual diagnostic ----

// r_{l,j} = ||S* u_j - d_j|| / ||d_j||. Tokens with ||d_j|| = 0 are skipped
// (the ratio is undefined) and counted separately.
struct ResidualReport {
    struct Row {
        std::string layer_id;
        int token_index = 0;
        double residual = 0.0;
    };
    std::vector<Row> rows;
    double mean_residual = 0.0;
    long included = 0;
    long zero_norm_excluded = 0;

    void write_csv(std::ostream& os) const {
        os << "layer_id,token_index,residual\n";
        for (const Row& r : rows) os << r.layer_id << ',' << r.token_index << ',' << r.residual << '\n';
    }
};

// Streaming form used by the training loop: accumulate residuals across
// layers without materializing matrices.
class ResidualAccum {
public:
    explicit ResidualAccum(bool keep_rows = false) : keep_rows_(keep_rows) {}

    void add(const std::string& layer_id, int token_index, std::span<const double> shifted_key,
             std::span<const double> value_diff) {
        const double dn = nrm2(value_diff);
        if (dn == 0.0) {
            ++report_.zero_norm_excluded;
            return;
        }
        double err = 0.0;
        for (std::size_t i = 0; i < value_diff.size(); ++i) {
            const double e = shifted_key[i] - value_diff[i];
            err += e * e;
        }
        const double r = std::sqrt(err) / dn;
        sum_ += r;
        ++report_.included;
        if (keep_rows_) report_.rows.push_back({layer_id, token_index, r});
    }

    ResidualReport finalize() {
        report_.mean_residual = report_.included > 0 ? sum_ / static_cast<double>(report_.included) : 0.0;
        return report_;
    }

private:
    bool keep_rows_;
    double sum_ = 0.0;
    ResidualReport report_;
};

inline ResidualReport residual_report(const Matrix& S, const Matrix& U, const Matrix& D,
                                      const std::string& layer_id = "l0") {
    if (U.cols != D.cols) throw ShapeError("residual_report: column counts differ");
    if (S.cols != U.rows || S.rows != D.rows) throw ShapeError("residual_report: shift shape mismatch");
    ResidualAccum acc(true);
    DVec su(static_cast<std::size_t>(S.rows)), u(static_cast<std::size_t>(U.rows)), d(static_cast<std::size_t>(D.rows));
    for (int j = 0; j < U.cols; ++j) {
        for (int i = 0; i < U.rows; ++i) u[static_cast<std::size_t>(i)] = U(i, j);
        for (int i = 0; i < D.rows; ++i) d[static_cast<std::size_t>(i)] = D(i, j);
        matvec(S, {u.data(), u.size()}, {su.data(), su.size()});
        acc.add(layer_id, j, {su.data(), su.size()}, {d.data(), d.size()});
    }
    return acc.finalize();
}

// Per-layer aggregation output: the shift, and for the normal-equation
// route the retained factorization for the meta-gradient adjoints.
struct LayerAggregation {
    LayerId layer;
    AggregationMethod method = AggregationMethod::normal_eq;
    double lambda = 0.0;
    Matrix shift;                     // S* (d' x d)
    std::optional<SpdFactor> factor;  // normal_eq only
    std::optional<Matrix> key_matrix;        // U (d x n), when materialized
    std::optional<Matrix> value_diff_matrix; // D (d' x n), when materialized
};

struct InferOptions {
    AggregationMethod method = AggregationMethod::normal_eq;
    // Matrices U / D are only assembled when requested; the default path
    // streams tuples through the editor and keeps O(d^2 + d'd) state.
    bool materialize_matrices = false;
};

// Evaluate the editor over the cache and aggregate one shift per editable
// layer. Tuples are processed in cache order, one at a time.
inline std::vector<LayerAggregation> infer_shifts(const HyperNetwork& h, const HookCache& cache,
                                                  const InferOptions& opt = {}) {
    if (cache.n() == 0) throw ArgumentError("infer_shifts: empty cache");
    std::vector<LayerAggregation> out;
    out.reserve(static_cast<std::size_t>(h.num_layers()));
    for (int li = 0; li < h.num_layers(); ++li) {
        const LayerId id = h.layers()[static_cast<std::size_t>(li)];
        const int ci = cache.layer_index(id);
        const auto [d, dp] = h.layer_shape(li);
        const auto& ks = cache.keys[static_cast<std::size_t>(ci)];
        const auto& gs = cache.vgrads[static_cast<std::size_t>(ci)];
        const double eta = h.eta(li);

        LayerAggregation agg;
        agg.layer = id;
        agg.method = opt.method;
        agg.lambda = h.lambda(li);
        if (opt.materialize_matrices) {
            agg.key_matrix = Matrix(d, static_cast<int>(ks.size()));
            agg.value_diff_matrix = Matrix(dp, static_cast<int>(ks.size()));
        }

        if (opt.method == AggregationMethod::normal_eq) {
            GramAggregator acc(d, dp);
            for (std::size_t j = 0; j < ks.size(); ++j) {
                auto tr = h.eval_tuple(li, {ks[j].data(), ks[j].size()}, {gs[j].data(), gs[j].size()});
                const double c = -eta * dot({tr.out.data(), static_cast<std::size_t>(d)}, {ks[j].data(), ks[j].size()});
                DVec dj(static_cast<std::size_t>(dp));
                for (int i = 0; i < dp; ++i) dj[static_cast<std::size_t>(i)] = c * tr.out[static_cast<std::size_t>(d + i)];
                acc.add({ks[j].data(), ks[j].size()}, {dj.data(), dj.size()});
                if (opt.materialize_matrices) {
                    for (int i = 0; i < d; ++i) (*agg.key_matrix)(i, static_cast<int>(j)) = ks[j][static_cast<std::size_t>(i)];
                    for (int i = 0; i < dp; ++i)
                        (*agg.value_diff_matrix)(i, static_cast<int>(j)) = dj[static_cast<std::size_t>(i)];
                }
            }
            auto solved = acc.solve(agg.lambda, to_string(id));
            agg.shift = std::move(solved.shift);
            agg.factor = std::move(solved.factor);
        } else {
            Matrix S(dp, d);
            for (std::size_t j = 0; j < ks.size(); ++j) {
                auto tr = h.eval_tuple(li, {ks[j].data(), ks[j].size()}, {gs[j].data(), gs[j].size()});
                add_outer(S, -eta, {tr.out.data() + d, static_cast<std::size_t>(dp)},
                          {tr.out.data(), static_cast<std::size_t>(d)});
                if (opt.materialize_matrices) {
                    const double c = -eta * dot({tr.out.data(), static_cast<std::size_t>(d)}, {ks[j].data(), ks[j].size()});
                    for (int i = 0; i < d; ++i) (*agg.key_matrix)(i, static_cast<int>(j)) = ks[j][static_cast<std::size_t>(i)];
                    for (int i = 0; i < dp; ++i)
                        (*agg.value_diff_matrix)(i, static_cast<int>(j)) = c * tr.out[static_cast<std::size_t>(d + i)];
                }
            }
            agg.shift = std::move(S);
        }
        out.push_back(std::move(agg));
    }
    return out;
}

// Mean residual over all layers of an inference result, recomputing the
// value differences tuple by tuple.
inline ResidualReport residuals_for(const HyperNetwork& h, const HookCache& cache,
                                    const std::vector<LayerAggregation>& aggs, bool keep_rows = false) {
    ResidualAccum acc(keep_rows);
    for (const LayerAggregation& agg : aggs) {
        const int li = h.layer_index(agg.layer);
        const int ci = cache.layer_index(agg.layer);
        const auto [d, dp] = h.layer_shape(li);
        const auto& ks = cache.keys[static_cast<std::size_t>(ci)];
        const auto& gs = cache.vgrads[static_cast<std::size_t>(ci)];
        const double eta = h.eta(li);
        const std::string tag = to_string(agg.layer);
        DVec su(static_cast<std::size_t>(dp)), dj(static_cast<std::size_t>(dp));
        for (std::size_t j = 0; j < ks.size(); ++j) {
            auto tr = h.eval_tuple(li, {ks[j].data(), ks[j].size()}, {gs[j].data(), gs[j].size()});
            const double c = -eta * dot({tr.out.data(), static_cast<std::size_t>(d)}, {ks[j].data(), ks[j].size()});
            for (int i = 0; i < dp; ++i) dj[static_cast<std::size_t>(i)] = c * tr.out[static_cast<std::size_t>(d + i)];
            matvec(agg.shift, {ks[j].data(), ks[j].size()}, {su.data(), su.size()});
            acc.add(tag, static_cast<int>(j), {su.data(), su.size()}, {dj.data(), dj.size()});
        }
    }
    return acc.finalize();
}

} // namespace lmedit
