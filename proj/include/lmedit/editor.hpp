#pragma once

#include <array>
#include <cmath>
#include <string>
#include <vector>

#include "lmedit/errors.hpp"
#include "lmedit/matrix.hpp"
#include "lmedit/model.hpp"
#include "lmedit/rng.hpp"

// The editor network g_theta. It maps one cached (key, value-gradient)
// tuple to a pseudo key and pseudo value-gradient whose rank-1 outer
// product, scaled by a learnable per-layer step size, is that token's
// parameter shift: S = -eta * pseudo_vgrad * pseudo_key^T. The shift is
// never materialized; consumers work with the factors.
//
// Structure per distinct layer shape (d, d'): the concatenated input of
// length d+d' is normalized by per-dimension statistics, passed through a
// stack of residual low-rank blocks (down-projection to `rank`, pointwise
// nonlinearity, up-projection back), and split by an identity-initialized
// output head into the two factors. Block parameters are shared across all
// layers of the same shape; the step size eta and the regularizer
// log(lambda) are per layer.

namespace lmedit {

struct ShiftFactors {
    std::vector<LayerId> layers;
    std::vector<std::vector<DVec>> pseudo_keys;   // [layer][token], length d
    std::vector<std::vector<DVec>> pseudo_vgrads; // [layer][token], length d'
    std::vector<double> eta;                      // per layer

    int n(int li) const { return static_cast<int>(pseudo_keys[static_cast<std::size_t>(li)].size()); }

    int layer_index(LayerId id) const {
        for (std::size_t i = 0; i < layers.size(); ++i)
            if (layers[i] == id) return static_cast<int>(i);
        throw ArgumentError("shift factors: unknown layer " + to_string(id));
    }
};

class HyperNetwork {
public:
    struct ShapeGroup {
        int key_dim = 0;
        int val_dim = 0;
        // offsets into theta
        std::vector<std::array<std::size_t, 3>> blocks; // per block: down_w (r x in), down_b (r), up_w (in x r)
        std::size_t head_w = 0;                         // in x in
        std::size_t head_b = 0;                         // in
        // untrained input statistics (fit from data, constant under the
        // meta gradient)
        DVec norm_mean, norm_std;

        int in_dim() const { return key_dim + val_dim; }
    };

    HyperNetwork() = default;

    static HyperNetwork init(const EditableModel& model, int rank, int num_blocks, double eta_init,
                             double lambda_init_coeff, Rng& rng) {
        if (rank < 1 || num_blocks < 1) throw ArgumentError("editor: rank and blocks must be >= 1");
        if (eta_init <= 0.0 || lambda_init_coeff <= 0.0)
            throw ArgumentError("editor: eta_init and lambda_init must be > 0");
        HyperNetwork h;
        h.rank_ = rank;
        h.num_blocks_ = num_blocks;
        h.layers_ = model.editable_set();
        for (LayerId id : h.layers_) {
            auto [out_dim, in_dim] = model.layer_shape(id);
            h.layer_shapes_.push_back({in_dim, out_dim}); // (d, d')
        }
        h.layout();
        // identity head, random down projections, zero up projections: the
        // fresh editor passes normalized inputs straight through
        for (std::size_t gi = 0; gi < h.groups_.size(); ++gi) {
            ShapeGroup& g = h.groups_[gi];
            const int in = g.in_dim();
            MatView hw{h.theta_.data() + g.head_w, in, in};
            for (int i = 0; i < in; ++i) hw(i, i) = 1.0;
            const double sigma = 1.0 / std::sqrt(static_cast<double>(in));
            for (int bk = 0; bk < num_blocks; ++bk) {
                MatView dw{h.theta_.data() + g.blocks[static_cast<std::size_t>(bk)][0], rank, in};
                for (int i = 0; i < rank; ++i)
                    for (int j = 0; j < in; ++j) dw(i, j) = rng.normal(0.0, sigma);
            }
        }
        for (std::size_t li = 0; li < h.layers_.size(); ++li) {
            h.theta_[h.eta_off_ + li] = eta_init;
            h.theta_[h.loglam_off_ + li] =
                std::log(lambda_init_coeff * static_cast<double>(h.layer_shapes_[li].first));
        }
        return h;
    }

    // Rebuild from checkpoint data: layer list with (key_dim, val_dim)
    // shapes; theta and normalizer statistics are filled by the caller.
    static HyperNetwork from_parts(std::vector<LayerId> layers, std::vector<std::pair<int, int>> shapes, int rank,
                                   int num_blocks) {
        if (layers.empty() || layers.size() != shapes.size()) throw ArgumentError("editor from_parts: bad layer list");
        if (rank < 1 || num_blocks < 1) throw ArgumentError("editor from_parts: rank and blocks must be >= 1");
        HyperNetwork h;
        h.rank_ = rank;
        h.num_blocks_ = num_blocks;
        h.layers_ = std::move(layers);
        h.layer_shapes_ = std::move(shapes);
        h.layout();
        return h;
    }

    void set_normalizer(int group_index, DVec mean, DVec std) {
        ShapeGroup& g = groups_.at(static_cast<std::size_t>(group_index));
        if (static_cast<int>(mean.size()) != g.in_dim() || static_cast<int>(std.size()) != g.in_dim())
            throw ShapeError("set_normalizer: wrong statistics length");
        g.norm_mean = std::move(mean);
        g.norm_std = std::move(std);
    }

    int rank() const { return rank_; }
    int num_blocks() const { return num_blocks_; }
    const std::vector<LayerId>& layers() const { return layers_; }
    int num_layers() const { return static_cast<int>(layers_.size()); }
    std::pair<int, int> layer_shape(int li) const { return layer_shapes_[static_cast<std::size_t>(li)]; } // (d, d')
    const std::vector<ShapeGroup>& groups() const { return groups_; }
    int group_of(int li) const { return layer_group_[static_cast<std::size_t>(li)]; }

    DVec& theta() { return theta_; }
    const DVec& theta() const { return theta_; }
    std::size_t theta_size() const { return theta_.size(); }

    int layer_index(LayerId id) const {
        for (std::size_t i = 0; i < layers_.size(); ++i)
            if (layers_[i] == id) return static_cast<int>(i);
        throw ArgumentError("editor: unknown layer " + to_string(id));
    }

    double eta(int li) const { return theta_[eta_off_ + static_cast<std::size_t>(li)]; }
    double log_lambda(int li) const { return theta_[loglam_off_ + static_cast<std::size_t>(li)]; }
    double lambda(int li) const { return std::exp(log_lambda(li)); }
    std::size_t eta_offset(int li) const { return eta_off_ + static_cast<std::size_t>(li); }
    std::size_t log_lambda_offset(int li) const { return loglam_off_ + static_cast<std::size_t>(li); }

    void set_eta(int li, double v) { theta_[eta_off_ + static_cast<std::size_t>(li)] = v; }
    void set_log_lambda(int li, double v) { theta_[loglam_off_ + static_cast<std::size_t>(li)] = v; }

    // Fit the per-shape input normalization statistics from a cache.
    // Statistics are data, not trainable parameters.
    void fit_normalizer(const HookCache& cache) {
        for (std::size_t gi = 0; gi < groups_.size(); ++gi) {
            ShapeGroup& g = groups_[gi];
            const int in = g.in_dim();
            DVec sum(static_cast<std::size_t>(in), 0.0), sq(static_cast<std::size_t>(in), 0.0);
            long count = 0;
            for (std::size_t li = 0; li < layers_.size(); ++li) {
                if (layer_group_[li] != static_cast<int>(gi)) continue;
                const int ci = cache.layer_index(layers_[li]);
                const auto& ks = cache.keys[static_cast<std::size_t>(ci)];
                const auto& gs = cache.vgrads[static_cast<std::size_t>(ci)];
                for (std::size_t j = 0; j < ks.size(); ++j) {
                    for (int i = 0; i < g.key_dim; ++i) {
                        sum[static_cast<std::size_t>(i)] += ks[j][static_cast<std::size_t>(i)];
                        sq[static_cast<std::size_t>(i)] += ks[j][static_cast<std::size_t>(i)] * ks[j][static_cast<std::size_t>(i)];
                    }
                    for (int i = 0; i < g.val_dim; ++i) {
                        sum[static_cast<std::size_t>(g.key_dim + i)] += gs[j][static_cast<std::size_t>(i)];
                        sq[static_cast<std::size_t>(g.key_dim + i)] += gs[j][static_cast<std::size_t>(i)] * gs[j][static_cast<std::size_t>(i)];
                    }
                    ++count;
                }
            }
            if (count == 0) continue;
            for (int i = 0; i < in; ++i) {
                const double mu = sum[static_cast<std::size_t>(i)] / static_cast<double>(count);
                const double var = sq[static_cast<std::size_t>(i)] / static_cast<double>(count) - mu * mu;
                g.norm_mean[static_cast<std::size_t>(i)] = mu;
                g.norm_std[static_cast<std::size_t>(i)] = std::max(std::sqrt(std::max(var, 0.0)), 1e-8);
            }
        }
    }

    // Forward intermediates of one tuple, retained for the manual backward.
    struct TupleTrace {
        std::vector<DVec> z;   // num_blocks + 1 activations, length in_dim
        std::vector<DVec> pre; // per block pre-activation, length rank
        DVec out;              // head output, length in_dim
    };

    // Evaluate the factors for one (key, value gradient) tuple of layer li.
    TupleTrace eval_tuple(int li, std::span<const double> key, std::span<const double> vgrad) const {
        const ShapeGroup& g = groups_[static_cast<std::size_t>(layer_group_[static_cast<std::size_t>(li)])];
        const int in = g.in_dim();
        if (static_cast<int>(key.size()) != g.key_dim || static_cast<int>(vgrad.size()) != g.val_dim)
            throw ShapeError("editor eval: tuple dimensions do not match layer shape");
        TupleTrace tr;
        tr.z.reserve(static_cast<std::size_t>(num_blocks_ + 1));
        tr.pre.reserve(static_cast<std::size_t>(num_blocks_));

        DVec z(static_cast<std::size_t>(in));
        for (int i = 0; i < g.key_dim; ++i)
            z[static_cast<std::size_t>(i)] = (key[static_cast<std::size_t>(i)] - g.norm_mean[static_cast<std::size_t>(i)]) /
                                             g.norm_std[static_cast<std::size_t>(i)];
        for (int i = 0; i < g.val_dim; ++i) {
            const std::size_t o = static_cast<std::size_t>(g.key_dim + i);
            z[o] = (vgrad[static_cast<std::size_t>(i)] - g.norm_mean[o]) / g.norm_std[o];
        }
        tr.z.push_back(z);

        for (int bk = 0; bk < num_blocks_; ++bk) {
            const auto& off = g.blocks[static_cast<std::size_t>(bk)];
            ConstMatView dw{theta_.data() + off[0], rank_, in};
            std::span<const double> db{theta_.data() + off[1], static_cast<std::size_t>(rank_)};
            ConstMatView uw{theta_.data() + off[2], in, rank_};

            DVec pre(static_cast<std::size_t>(rank_));
            matvec(dw, {z.data(), z.size()}, {pre.data(), pre.size()});
            axpy(1.0, db, {pre.data(), pre.size()});
            DVec a(static_cast<std::size_t>(rank_));
            for (int i = 0; i < rank_; ++i) a[static_cast<std::size_t>(i)] = std::tanh(pre[static_cast<std::size_t>(i)]);
            DVec up(static_cast<std::size_t>(in));
            matvec(uw, {a.data(), a.size()}, {up.data(), up.size()});
            axpy(1.0, {up.data(), up.size()}, {z.data(), z.size()});
            tr.pre.push_back(std::move(pre));
            tr.z.push_back(z);
        }

        ConstMatView hw{theta_.data() + g.head_w, in, in};
        std::span<const double> hb{theta_.data() + g.head_b, static_cast<std::size_t>(in)};
        tr.out.resize(static_cast<std::size_t>(in));
        matvec(hw, {z.data(), z.size()}, {tr.out.data(), tr.out.size()});
        axpy(1.0, hb, {tr.out.data(), tr.out.size()});
        return tr;
    }

    // Accumulate d(scalar)/d(theta) for one tuple given the gradient w.r.t.
    // the head output (concatenated pseudo key / pseudo vgrad).
    void backward_tuple(int li, const TupleTrace& tr, std::span<const double> dout, DVec& theta_grad) const {
        const ShapeGroup& g = groups_[static_cast<std::size_t>(layer_group_[static_cast<std::size_t>(li)])];
        const int in = g.in_dim();
        if (static_cast<int>(dout.size()) != in) throw ShapeError("editor backward: dout size mismatch");
        if (theta_grad.size() != theta_.size()) throw ShapeError("editor backward: grad buffer size mismatch");

        ConstMatView hw{theta_.data() + g.head_w, in, in};
        MatView dhw{theta_grad.data() + g.head_w, in, in};
        std::span<double> dhb{theta_grad.data() + g.head_b, static_cast<std::size_t>(in)};
        add_outer(dhw, 1.0, dout, {tr.z.back().data(), tr.z.back().size()});
        axpy(1.0, dout, dhb);

        DVec dz(static_cast<std::size_t>(in));
        matvec_t(hw, dout, {dz.data(), dz.size()});

        DVec da(static_cast<std::size_t>(rank_)), dpre(static_cast<std::size_t>(rank_)), dtmp(static_cast<std::size_t>(in));
        for (int bk = num_blocks_ - 1; bk >= 0; --bk) {
            const auto& off = g.blocks[static_cast<std::size_t>(bk)];
            ConstMatView dw{theta_.data() + off[0], rank_, in};
            ConstMatView uw{theta_.data() + off[2], in, rank_};
            MatView gdw{theta_grad.data() + off[0], rank_, in};
            std::span<double> gdb{theta_grad.data() + off[1], static_cast<std::size_t>(rank_)};
            MatView guw{theta_grad.data() + off[2], in, rank_};

            const DVec& zin = tr.z[static_cast<std::size_t>(bk)];
            const DVec& pre = tr.pre[static_cast<std::size_t>(bk)];
            // a = tanh(pre); z_out = z_in + U a
            DVec a(static_cast<std::size_t>(rank_));
            for (int i = 0; i < rank_; ++i) a[static_cast<std::size_t>(i)] = std::tanh(pre[static_cast<std::size_t>(i)]);

            add_outer(guw, 1.0, {dz.data(), dz.size()}, {a.data(), a.size()});
            matvec_t(uw, {dz.data(), dz.size()}, {da.data(), da.size()});
            for (int i = 0; i < rank_; ++i) {
                const double t = a[static_cast<std::size_t>(i)];
                dpre[static_cast<std::size_t>(i)] = (1.0 - t * t) * da[static_cast<std::size_t>(i)];
            }
            add_outer(gdw, 1.0, {dpre.data(), dpre.size()}, {zin.data(), zin.size()});
            axpy(1.0, {dpre.data(), dpre.size()}, gdb);
            matvec_t(dw, {dpre.data(), dpre.size()}, {dtmp.data(), dtmp.size()});
            axpy(1.0, {dtmp.data(), dtmp.size()}, {dz.data(), dz.size()});
        }
        // input normalization is constant: gradient stops here
    }

private:
    void layout() {
        // group layers by (d, d')
        layer_group_.resize(layers_.size(), -1);
        for (std::size_t li = 0; li < layers_.size(); ++li) {
            const auto [d, dp] = layer_shapes_[li];
            int found = -1;
            for (std::size_t gi = 0; gi < groups_.size(); ++gi)
                if (groups_[gi].key_dim == d && groups_[gi].val_dim == dp) found = static_cast<int>(gi);
            if (found < 0) {
                ShapeGroup g;
                g.key_dim = d;
                g.val_dim = dp;
                groups_.push_back(std::move(g));
                found = static_cast<int>(groups_.size()) - 1;
            }
            layer_group_[li] = found;
        }
        std::size_t cur = 0;
        for (ShapeGroup& g : groups_) {
            const std::size_t in = static_cast<std::size_t>(g.in_dim());
            const std::size_t r = static_cast<std::size_t>(rank_);
            g.blocks.resize(static_cast<std::size_t>(num_blocks_));
            for (int bk = 0; bk < num_blocks_; ++bk) {
                g.blocks[static_cast<std::size_t>(bk)][0] = cur;
                cur += r * in;
                g.blocks[static_cast<std::size_t>(bk)][1] = cur;
                cur += r;
                g.blocks[static_cast<std::size_t>(bk)][2] = cur;
                cur += in * r;
            }
            g.head_w = cur;
            cur += in * in;
            g.head_b = cur;
            cur += in;
            g.norm_mean.assign(in, 0.0);
            g.norm_std.assign(in, 1.0);
        }
        eta_off_ = cur;
        cur += layers_.size();
        loglam_off_ = cur;
        cur += layers_.size();
        theta_.assign(cur, 0.0);
    }

    int rank_ = 0;
    int num_blocks_ = 0;
    std::vector<LayerId> layers_;
    std::vector<std::pair<int, int>> layer_shapes_; // (d, d')
    std::vector<int> layer_group_;
    std::vector<ShapeGroup> groups_;
    std::size_t eta_off_ = 0, loglam_off_ = 0;
    DVec theta_;

};

// ---- module operations ----

// One factor tuple per cached token, per layer.
inline ShiftFactors generate_factors(const HyperNetwork& h, const HookCache& cache) {
    if (cache.n() == 0) throw ArgumentError("generate_factors: empty cache");
    ShiftFactors f;
    f.layers = h.layers();
    f.pseudo_keys.resize(f.layers.size());
    f.pseudo_vgrads.resize(f.layers.size());
    f.eta.resize(f.layers.size());
    for (int li = 0; li < h.num_layers(); ++li) {
        const int ci = cache.layer_index(f.layers[static_cast<std::size_t>(li)]);
        const auto [d, dp] = h.layer_shape(li);
        const auto& ks = cache.keys[static_cast<std::size_t>(ci)];
        const auto& gs = cache.vgrads[static_cast<std::size_t>(ci)];
        f.eta[static_cast<std::size_t>(li)] = h.eta(li);
        auto& pk = f.pseudo_keys[static_cast<std::size_t>(li)];
        auto& pg = f.pseudo_vgrads[static_cast<std::size_t>(li)];
        pk.reserve(ks.size());
        pg.reserve(ks.size());
        for (std::size_t j = 0; j < ks.size(); ++j) {
            auto tr = h.eval_tuple(li, {ks[j].data(), ks[j].size()}, {gs[j].data(), gs[j].size()});
            pk.emplace_back(tr.out.begin(), tr.out.begin() + d);
            pg.emplace_back(tr.out.begin() + d, tr.out.begin() + d + dp);
        }
    }
    return f;
}

// d_{l,j} = -eta_l * (pseudo_key . key) * pseudo_vgrad, scalar first.
inline DVec value_difference_one(double eta, const DVec& pseudo_key, const DVec& pseudo_vgrad, const DVec& key) {
    if (pseudo_key.size() != key.size()) throw ShapeError("value_difference: key length mismatch");
    const double c = -eta * dot({pseudo_key.data(), pseudo_key.size()}, {key.data(), key.size()});
    DVec d(pseudo_vgrad.size());
    for (std::size_t i = 0; i < d.size(); ++i) d[i] = c * pseudo_vgrad[i];
    return d;
}

inline std::vector<std::vector<DVec>> value_difference(const ShiftFactors& factors, const HookCache& cache) {
    if (factors.layers != cache.layers) throw ArgumentError("value_difference: layer sets differ");
    std::vector<std::vector<DVec>> out(factors.layers.size());
    for (std::size_t li = 0; li < factors.layers.size(); ++li) {
        const auto& pk = factors.pseudo_keys[li];
        const auto& pg = factors.pseudo_vgrads[li];
        const auto& ks = cache.keys[li];
        if (pk.size() != ks.size()) throw ArgumentError("value_difference: token index sets differ");
        out[li].reserve(pk.size());
        for (std::size_t j = 0; j < pk.size(); ++j)
            out[li].push_back(value_difference_one(factors.eta[li], pk[j], pg[j], ks[j]));
    }
    return out;
}

// Theta gradient of the proxy loss  L~ = sum_{l,j} <d_grad_{l,j}, d_{l,j}>
// with the d_grads treated as constants. `d_grad_fn(li, j, key, trace)` must
// return the constant gradient w.r.t. d_{l,j}; results accumulate into
// theta_grad so callers can stream over cache sub-batches.
template <class DGradFn>
void proxy_backward_stream(const HyperNetwork& h, const HookCache& cache, DGradFn&& d_grad_fn, DVec& theta_grad,
                           double* proxy_loss_out = nullptr) {
    if (theta_grad.size() != h.theta_size()) theta_grad.assign(h.theta_size(), 0.0);
    for (int li = 0; li < h.num_layers(); ++li) {
        const int ci = cache.layer_index(h.layers()[static_cast<std::size_t>(li)]);
        const auto [d, dp] = h.layer_shape(li);
        const auto& ks = cache.keys[static_cast<std::size_t>(ci)];
        const auto& gs = cache.vgrads[static_cast<std::size_t>(ci)];
        const double eta = h.eta(li);
        DVec dout(static_cast<std::size_t>(d + dp));
        for (std::size_t j = 0; j < ks.size(); ++j) {
            auto tr = h.eval_tuple(li, {ks[j].data(), ks[j].size()}, {gs[j].data(), gs[j].size()});
            const DVec q = d_grad_fn(li, static_cast<int>(j), ks[j], tr);
            if (static_cast<int>(q.size()) != dp) throw ShapeError("proxy backward: d_grad length mismatch");
            std::span<const double> pseudo_key{tr.out.data(), static_cast<std::size_t>(d)};
            std::span<const double> pseudo_vgrad{tr.out.data() + d, static_cast<std::size_t>(dp)};
            const double s1 = dot(pseudo_key, {ks[j].data(), ks[j].size()}); // u~ . u
            const double s2 = dot({q.data(), q.size()}, pseudo_vgrad);       // q . g~
            if (proxy_loss_out) *proxy_loss_out += -eta * s1 * s2;
            // d = -eta * s1 * g~ ; dL/deta = -s1*s2 ; dL/du~ = -eta*s2*u ; dL/dg~ = -eta*s1*q
            theta_grad[h.eta_offset(li)] += -s1 * s2;
            for (int i = 0; i < d; ++i)
                dout[static_cast<std::size_t>(i)] = -eta * s2 * ks[j][static_cast<std::size_t>(i)];
            for (int i = 0; i < dp; ++i)
                dout[static_cast<std::size_t>(d + i)] = -eta * s1 * q[static_cast<std::size_t>(i)];
            h.backward_tuple(li, tr, {dout.data(), dout.size()}, theta_grad);
        }
    }
}

// Explicit-map variant: d_grads aligned with the cache token order.
inline DVec proxy_backward(const HyperNetwork& h, const HookCache& cache,
                           const std::vector<std::vector<DVec>>& d_grads, double* proxy_loss_out = nullptr) {
    if (d_grads.size() != cache.layers.size()) throw ArgumentError("proxy_backward: layer count mismatch");
    DVec grad(h.theta_size(), 0.0);
    proxy_backward_stream(
        h, cache,
        [&](int li, int j, const DVec&, const HyperNetwork::TupleTrace&) -> DVec {
            const int ci = cache.layer_index(h.layers()[static_cast<std::size_t>(li)]);
            return d_grads[static_cast<std::size_t>(ci)][static_cast<std::size_t>(j)];
        },
        grad, proxy_loss_out);
    return grad;
}

} // namespace lmedit
