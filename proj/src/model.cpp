#include "islice/model.hpp"

#include <algorithm>
#include <cmath>
#include <iostream>
#include <random>

namespace islice {

namespace {

Mat rmsnorm(const Mat& x, const Mat& w) {
    constexpr double eps = 1e-6;
    Mat out(x.rows(), x.cols());
    for (Eigen::Index t = 0; t < x.rows(); ++t) {
        const double r = std::sqrt(x.row(t).squaredNorm() / x.cols() + eps);
        out.row(t) = x.row(t).cwiseProduct(w.row(0)) / r;
    }
    return out;
}

// dx for y = x .* w / rms(x); accumulates dw when given.
Mat rmsnorm_backward(const Mat& x, const Mat& w, const Mat& dy, Mat* dw) {
    constexpr double eps = 1e-6;
    Mat dx(x.rows(), x.cols());
    const double d = static_cast<double>(x.cols());
    for (Eigen::Index t = 0; t < x.rows(); ++t) {
        const double r = std::sqrt(x.row(t).squaredNorm() / d + eps);
        Eigen::RowVectorXd wdy = dy.row(t).cwiseProduct(w.row(0));
        const double dot = wdy.dot(x.row(t));
        dx.row(t) = wdy / r - x.row(t) * (dot / (d * r * r * r));
        if (dw) dw->row(0) += dy.row(t).cwiseProduct(x.row(t)) / r;
    }
    return dx;
}

Mat silu(const Mat& z) {
    return (z.array() / (1.0 + (-z.array()).exp())).matrix();
}

Mat silu_grad(const Mat& z) {
    auto s = 1.0 / (1.0 + (-z.array()).exp());
    return (s * (1.0 + z.array() * (1.0 - s))).matrix();
}

// Row-wise softmax over the causal prefix; entries beyond the diagonal are
// exactly zero.
void causal_softmax_inplace(Mat& s) {
    const Eigen::Index n = s.cols();
    for (Eigen::Index t = 0; t < s.rows(); ++t) {
        const Eigen::Index live = std::min<Eigen::Index>(t + 1, n);
        auto head = s.row(t).head(live);
        const double m = head.maxCoeff();
        head = (head.array() - m).exp();
        head /= head.sum();
        if (live < n) s.row(t).tail(n - live).setZero();
    }
}

// ds for p = softmax(s) rows given dp.
Mat softmax_backward(const Mat& p, const Mat& dp) {
    Mat ds(p.rows(), p.cols());
    for (Eigen::Index t = 0; t < p.rows(); ++t) {
        const double dot = dp.row(t).dot(p.row(t));
        ds.row(t) = p.row(t).cwiseProduct((dp.row(t).array() - dot).matrix());
    }
    return ds;
}

std::vector<int> pair_indices_of(const std::vector<bool>& mask) {
    std::vector<int> idx;
    for (int j = 0; j < static_cast<int>(mask.size()); ++j)
        if (mask[j]) idx.push_back(j);
    return idx;
}

}  // namespace

void ModelConfig::validate() const {
    if (layers < 1 || hidden < 1 || heads < 1 || kv_groups < 1 || head_dim < 1 ||
        inter < 1 || vocab < 1)
        throw ConfigError("model config: all counts must be >= 1");
    if (heads % kv_groups != 0)
        throw ConfigError("model config: kv_groups must divide heads");
    if (hidden != heads * head_dim)
        throw ConfigError("model config: hidden must equal heads * head_dim");
    if (rope_theta <= 0) throw ConfigError("model config: rope_theta must be positive");
    if (rope_enabled && head_dim % 2 != 0)
        throw ConfigError("model config: RoPE needs an even head_dim");
}

HeadLayout full_layout(const ModelConfig& cfg) {
    HeadLayout l;
    l.retained_heads.resize(cfg.heads);
    for (int h = 0; h < cfg.heads; ++h) l.retained_heads[h] = h;
    l.per_head_dim = cfg.head_dim;
    if (cfg.rope_enabled)
        l.rope_pair_mask.assign(cfg.heads, std::vector<bool>(cfg.head_dim / 2, true));
    l.ffn_dim = cfg.inter;
    return l;
}

std::string tname(int layer, const std::string& suffix) {
    return "layers." + std::to_string(layer) + "." + suffix;
}

Mat& Checkpoint::tensor(const std::string& name) {
    auto it = tensors.find(name);
    if (it == tensors.end()) throw IoError("missing tensor: " + name);
    return it->second;
}

const Mat& Checkpoint::tensor(const std::string& name) const {
    auto it = tensors.find(name);
    if (it == tensors.end()) throw IoError("missing tensor: " + name);
    return it->second;
}

std::vector<int> Checkpoint::retained_groups(int layer) const {
    const int gs = config.group_size();
    std::vector<int> groups;
    for (int h : layout[layer].retained_heads) {
        const int g = h / gs;
        if (groups.empty() || groups.back() != g) {
            if (std::find(groups.begin(), groups.end(), g) == groups.end())
                groups.push_back(g);
        }
    }
    std::sort(groups.begin(), groups.end());
    return groups;
}

long Checkpoint::total_params() const {
    long n = 0;
    for (const auto& [name, t] : tensors) n += static_cast<long>(t.size());
    return n;
}

long Checkpoint::prunable_params() const {
    long n = 0;
    static const char* kProj[] = {"wq", "wk", "wv", "wo", "wu", "wg", "wd"};
    for (int l = 0; l < config.layers; ++l)
        for (const char* s : kProj) n += static_cast<long>(tensor(tname(l, s)).size());
    return n;
}

void Checkpoint::validate() const {
    config.validate();
    if (static_cast<int>(layout.size()) != config.layers)
        throw ConfigError("checkpoint: layout count does not match layer count");
    const int d = config.hidden;
    auto expect = [&](const std::string& n, long r, long c) {
        const Mat& t = tensor(n);
        if (t.rows() != r || t.cols() != c)
            throw ConfigError("checkpoint: tensor " + n + " has shape " +
                              std::to_string(t.rows()) + "x" + std::to_string(t.cols()) +
                              ", expected " + std::to_string(r) + "x" + std::to_string(c));
    };
    expect("tok_embed", config.vocab, d);
    expect("lm_head", d, config.vocab);
    expect("final_norm", 1, d);
    for (int l = 0; l < config.layers; ++l) {
        const HeadLayout& hl = layout[l];
        if (hl.per_head_dim < 1 || hl.per_head_dim > config.head_dim)
            throw ConfigError("checkpoint: bad per_head_dim in layer " + std::to_string(l));
        if (hl.ffn_dim < 1 || hl.ffn_dim > config.inter)
            throw ConfigError("checkpoint: bad ffn_dim in layer " + std::to_string(l));
        if (config.rope_enabled) {
            if (hl.rope_pair_mask.size() != hl.retained_heads.size())
                throw ConfigError("checkpoint: rope mask count mismatch in layer " +
                                  std::to_string(l));
            for (const auto& m : hl.rope_pair_mask) {
                int live = 0;
                for (bool b : m) live += b ? 1 : 0;
                if (2 * live != hl.per_head_dim)
                    throw ConfigError("checkpoint: rope mask does not match per_head_dim");
            }
        }
        const int hk = hl.n_heads();
        const int gk = static_cast<int>(retained_groups(l).size());
        const int p = hl.per_head_dim;
        expect(tname(l, "attn_norm"), 1, d);
        expect(tname(l, "ffn_norm"), 1, d);
        expect(tname(l, "wq"), d, static_cast<long>(hk) * p);
        expect(tname(l, "wk"), d, static_cast<long>(gk) * p);
        expect(tname(l, "wv"), d, static_cast<long>(gk) * p);
        expect(tname(l, "wo"), static_cast<long>(hk) * p, d);
        expect(tname(l, "wu"), d, hl.ffn_dim);
        expect(tname(l, "wg"), d, hl.ffn_dim);
        expect(tname(l, "wd"), hl.ffn_dim, d);
    }
}

void Capture::add(const Mat& x, long row_cap) {
    gram.add(x);
    const long take = std::min<long>(row_cap - rows.rows(), x.rows());
    if (take > 0) {
        Mat merged(rows.rows() + take, x.cols());
        merged.topRows(rows.rows()) = rows;
        merged.bottomRows(take) = x.topRows(take);
        rows = std::move(merged);
    }
    total_rows += x.rows();
}

Mat rope_rotate_compressed(const Mat& x, const std::vector<long>& positions, double theta,
                           const std::vector<int>& pair_indices, int orig_head_dim) {
    const int half = static_cast<int>(pair_indices.size());
    if (x.cols() != 2 * half)
        throw DimensionError("rope: width does not match pair count");
    if (static_cast<long>(positions.size()) != x.rows())
        throw DimensionError("rope: one position per row required");
    Mat out(x.rows(), x.cols());
    for (int j = 0; j < half; ++j) {
        const double freq =
            std::pow(theta, -2.0 * pair_indices[j] / static_cast<double>(orig_head_dim));
        for (Eigen::Index t = 0; t < x.rows(); ++t) {
            const double ang = static_cast<double>(positions[t]) * freq;
            const double c = std::cos(ang), s = std::sin(ang);
            const double a = x(t, j), b = x(t, j + half);
            out(t, j) = a * c - b * s;
            out(t, j + half) = a * s + b * c;
        }
    }
    return out;
}

Mat apply_rope(const Mat& x, const std::vector<long>& positions, double theta,
               const std::vector<bool>& pair_mask) {
    const int head_dim = static_cast<int>(x.cols());
    if (head_dim % 2 != 0) throw DimensionError("rope: odd channel count");
    if (static_cast<int>(pair_mask.size()) != head_dim / 2)
        throw DimensionError("rope: pair mask must cover head_dim/2 pairs");
    std::vector<int> idx = pair_indices_of(pair_mask);
    const int half = static_cast<int>(idx.size());
    Mat sel(x.rows(), 2 * half);
    for (int j = 0; j < half; ++j) {
        sel.col(j) = x.col(idx[j]);
        sel.col(j + half) = x.col(idx[j] + head_dim / 2);
    }
    return rope_rotate_compressed(sel, positions, theta, idx, head_dim);
}

namespace {

// Inverse rotation, used by backward.
Mat rope_rotate_back(const Mat& x, const std::vector<long>& positions, double theta,
                     const std::vector<int>& pair_indices, int orig_head_dim) {
    std::vector<long> neg(positions.size());
    for (size_t i = 0; i < positions.size(); ++i) neg[i] = -positions[i];
    return rope_rotate_compressed(x, neg, theta, pair_indices, orig_head_dim);
}

struct LayerCache {
    Mat x;            // residual input
    Mat a;            // post attn norm
    std::vector<Mat> q, k, v, p;  // per head slot (k, v per group slot)
    Mat xo;           // concatenated head outputs, pre mask
    Mat xo_masked;
    Mat h2;
    Mat b;            // post ffn norm
    Mat u, g, xd;     // xd pre mask
    Mat xd_masked;
    Mat h3;
};

struct SeqCache {
    std::vector<LayerCache> layers;
    Mat hn;       // final norm output
    Mat logits;
};

// Single code path for the plain and online-transform forward; the cache is
// only filled when backward will follow.
SeqCache forward_one(const Checkpoint& ckpt, const std::vector<int>& toks,
                     const ForwardOptions& opts, ActivationTrace* trace) {
    const ModelConfig& cfg = ckpt.config;
    const int T = static_cast<int>(toks.size());
    const int d = cfg.hidden;
    const double scale = 1.0 / std::sqrt(static_cast<double>(cfg.head_dim));
    const int gs = cfg.group_size();

    std::vector<long> positions(T);
    for (int t = 0; t < T; ++t) positions[t] = t + opts.position_offset;

    SeqCache cache;
    cache.layers.resize(cfg.layers);

    Mat h(T, d);
    const Mat& emb = ckpt.tensor("tok_embed");
    for (int t = 0; t < T; ++t) {
        if (toks[t] < 0 || toks[t] >= cfg.vocab)
            throw DimensionError("token id out of range: " + std::to_string(toks[t]));
        h.row(t) = emb.row(toks[t]);
    }

    for (int l = 0; l < cfg.layers; ++l) {
        LayerCache& lc = cache.layers[l];
        const HeadLayout& hl = ckpt.layout[l];
        const OnlineTransforms* ot =
            opts.online ? &(*opts.online)[l] : nullptr;

        lc.x = h;
        lc.a = rmsnorm(h, ckpt.tensor(tname(l, "attn_norm")));

        const Mat& wq = ckpt.tensor(tname(l, "wq"));
        const Mat& wk = ckpt.tensor(tname(l, "wk"));
        const Mat& wv = ckpt.tensor(tname(l, "wv"));
        const Mat& wo = ckpt.tensor(tname(l, "wo"));

        std::vector<int> kept = hl.retained_heads;
        int p = hl.per_head_dim;
        std::vector<int> groups = ckpt.retained_groups(l);
        const OnlineMhaTransform* mt = nullptr;
        if (ot && ot->mha) {
            mt = &*ot->mha;
            kept = mt->kept_heads;
            p = mt->p;
            groups.clear();
            for (int hh : kept) {
                const int g = hh / gs;
                if (std::find(groups.begin(), groups.end(), g) == groups.end())
                    groups.push_back(g);
            }
            std::sort(groups.begin(), groups.end());
        }
        const int hk = static_cast<int>(kept.size());
        const int gk = static_cast<int>(groups.size());

        auto group_slot = [&](int head) {
            const int g = head / gs;
            return static_cast<int>(std::find(groups.begin(), groups.end(), g) -
                                    groups.begin());
        };

        lc.q.resize(hk);
        lc.k.resize(gk);
        lc.v.resize(gk);
        lc.p.resize(hk);

        for (int j = 0; j < gk; ++j) {
            Mat kj, vj;
            std::vector<int> pair_idx;
            if (mt) {
                // Online mode: full-width projection, then the group-shared
                // q1/q2 applied explicitly.
                int rep = -1;  // first kept head of this group carries the transform
                for (int i = 0; i < hk; ++i)
                    if (kept[i] / gs == groups[j]) { rep = i; break; }
                Mat kfull = lc.a * wk.middleCols(groups[j] * cfg.head_dim, cfg.head_dim);
                Mat vfull = lc.a * wv.middleCols(groups[j] * cfg.head_dim, cfg.head_dim);
                kj = kfull * mt->q1[rep];
                vj = vfull * mt->q2[rep];
                if (cfg.rope_enabled) pair_idx = pair_indices_of(mt->pair_mask[rep]);
            } else {
                kj = lc.a * wk.middleCols(j * p, p);
                vj = lc.a * wv.middleCols(j * p, p);
                if (cfg.rope_enabled) {
                    int rep = 0;
                    for (int i = 0; i < hk; ++i)
                        if (kept[i] / gs == groups[j]) { rep = i; break; }
                    pair_idx = pair_indices_of(hl.rope_pair_mask[rep]);
                }
            }
            if (cfg.rope_enabled)
                kj = rope_rotate_compressed(kj, positions, cfg.rope_theta, pair_idx,
                                            cfg.head_dim);
            lc.k[j] = std::move(kj);
            lc.v[j] = std::move(vj);
        }

        lc.xo = Mat(T, static_cast<long>(hk) * p);
        for (int i = 0; i < hk; ++i) {
            Mat qi;
            std::vector<int> pair_idx;
            if (mt) {
                Mat qfull = lc.a * wq.middleCols(kept[i] * cfg.head_dim, cfg.head_dim);
                qi = qfull * mt->q1[i];
                if (cfg.rope_enabled) pair_idx = pair_indices_of(mt->pair_mask[i]);
            } else {
                qi = lc.a * wq.middleCols(i * p, p);
                if (cfg.rope_enabled) pair_idx = pair_indices_of(hl.rope_pair_mask[i]);
            }
            if (cfg.rope_enabled)
                qi = rope_rotate_compressed(qi, positions, cfg.rope_theta, pair_idx,
                                            cfg.head_dim);
            const int j = group_slot(kept[i]);
            Mat s = scale * (qi * lc.k[j].transpose());
            causal_softmax_inplace(s);
            lc.xo.middleCols(static_cast<long>(i) * p, p) = s * lc.v[j];
            lc.q[i] = std::move(qi);
            lc.p[i] = std::move(s);
        }

        Mat attn_in;  // what actually multiplies wo
        if (mt) {
            attn_in = lc.xo * mt->q2_star;  // back to kept-head channel space
            Mat wo_kept(static_cast<long>(hk) * cfg.head_dim, d);
            for (int i = 0; i < hk; ++i)
                wo_kept.middleRows(static_cast<long>(i) * cfg.head_dim, cfg.head_dim) =
                    wo.middleRows(static_cast<long>(kept[i]) * cfg.head_dim, cfg.head_dim);
            lc.xo_masked = attn_in;
            lc.h2 = h + attn_in * wo_kept;
        } else {
            if (opts.mask_h)
                lc.xo_masked = lc.xo.array().rowwise() *
                               (*opts.mask_h)[l].transpose().array();
            lc.h2 = h + (opts.mask_h ? lc.xo_masked : lc.xo) * wo;
        }

        lc.b = rmsnorm(lc.h2, ckpt.tensor(tname(l, "ffn_norm")));
        const Mat& wu = ckpt.tensor(tname(l, "wu"));
        const Mat& wg = ckpt.tensor(tname(l, "wg"));
        const Mat& wd = ckpt.tensor(tname(l, "wd"));

        if (ot && ot->ffn) {
            Mat uc = (lc.b * wu) * ot->ffn->qc;
            Mat gc = (lc.b * wg) * ot->ffn->qc;
            Mat xdc = uc.cwiseProduct(silu(gc));
            lc.h3 = lc.h2 + (xdc * ot->ffn->qr) * wd;
        } else {
            lc.u = lc.b * wu;
            lc.g = lc.b * wg;
            lc.xd = lc.u.cwiseProduct(silu(lc.g));
            if (opts.mask_f)
                lc.xd_masked = lc.xd.array().rowwise() *
                               (*opts.mask_f)[l].transpose().array();
            lc.h3 = lc.h2 + (opts.mask_f ? lc.xd_masked : lc.xd) * wd;
        }

        if (opts.probe) {
            for (const auto& [pl, proj] : opts.probe->projectors)
                if (pl == l) lc.h3 = lc.h3 * proj;
        }

        if (trace) {
            LayerTrace& lt = trace->layers[l];
            lt.mha_input.add(lc.a, opts.row_cap);
            lt.o_proj_input.add(lc.xo, opts.row_cap);
            lt.ffn_input.add(lc.b, opts.row_cap);
            lt.up_out.add(lc.u, opts.row_cap);
            lt.gate_out.add(lc.g, opts.row_cap);
            lt.down_input.add(lc.xd, opts.row_cap);
            lt.block_output.add(lc.h3, opts.row_cap);
        }
        h = lc.h3;
    }

    cache.hn = rmsnorm(h, ckpt.tensor("final_norm"));
    cache.logits = cache.hn * ckpt.tensor("lm_head");
    return cache;
}

void init_trace(const Checkpoint& ckpt, ActivationTrace& trace, long row_cap) {
    const ModelConfig& cfg = ckpt.config;
    trace.layers.assign(cfg.layers, LayerTrace{});
    trace.row_cap = row_cap;
    for (int l = 0; l < cfg.layers; ++l) {
        const HeadLayout& hl = ckpt.layout[l];
        LayerTrace& lt = trace.layers[l];
        lt.mha_input.init(cfg.hidden);
        lt.o_proj_input.init(hl.n_heads() * hl.per_head_dim);
        lt.ffn_input.init(cfg.hidden);
        lt.up_out.init(hl.ffn_dim);
        lt.gate_out.init(hl.ffn_dim);
        lt.down_input.init(hl.ffn_dim);
        lt.block_output.init(cfg.hidden);
    }
}

}  // namespace

ForwardResult forward(const Checkpoint& ckpt, const TokenBatch& tokens,
                      const ForwardOptions& opts) {
    ForwardResult out;
    if (opts.capture) {
        if (opts.online)
            throw ConfigError("forward: capture is not supported in online-transform mode");
        init_trace(ckpt, out.trace, opts.row_cap);
    }
    out.logits.reserve(tokens.size());
    for (const auto& seq : tokens) {
        SeqCache c = forward_one(ckpt, seq, opts, opts.capture ? &out.trace : nullptr);
        if (opts.capture) out.trace.rows += static_cast<long>(seq.size());
        out.logits.push_back(std::move(c.logits));
    }
    return out;
}

double mean_cross_entropy(const std::vector<Mat>& logits, const TokenBatch& tokens) {
    double total = 0.0;
    long count = 0;
    for (size_t s = 0; s < tokens.size(); ++s) {
        const Mat& lg = logits[s];
        const auto& toks = tokens[s];
        for (size_t t = 0; t + 1 < toks.size(); ++t) {
            const double m = lg.row(t).maxCoeff();
            const double lse = m + std::log((lg.row(t).array() - m).exp().sum());
            total += lse - lg(t, toks[t + 1]);
            ++count;
        }
    }
    if (count == 0) throw DimensionError("cross entropy: no predictions in batch");
    return total / static_cast<double>(count);
}

Gradients backward(const Checkpoint& ckpt, const TokenBatch& batch, bool want_weights,
                   bool want_masks, const std::vector<Vec>* mask_h,
                   const std::vector<Vec>* mask_f) {
    const ModelConfig& cfg = ckpt.config;
    const int d = cfg.hidden;
    const double scale = 1.0 / std::sqrt(static_cast<double>(cfg.head_dim));
    const int gs = cfg.group_size();

    Gradients out;
    if (want_weights)
        for (const auto& [name, t] : ckpt.tensors)
            out.weights.emplace(name, Mat::Zero(t.rows(), t.cols()));
    if (want_masks) {
        out.masks.g_h.resize(cfg.layers);
        out.masks.g_f.resize(cfg.layers);
        for (int l = 0; l < cfg.layers; ++l) {
            const HeadLayout& hl = ckpt.layout[l];
            out.masks.g_h[l] = Vec::Zero(hl.n_heads() * hl.per_head_dim);
            out.masks.g_f[l] = Vec::Zero(hl.ffn_dim);
        }
    }

    ForwardOptions fopts;
    fopts.mask_h = mask_h;
    fopts.mask_f = mask_f;

    long total_preds = 0;
    for (const auto& seq : batch) total_preds += static_cast<long>(seq.size()) - 1;
    if (total_preds <= 0) throw DimensionError("backward: batch carries no predictions");

    double loss_sum = 0.0;
    for (const auto& toks : batch) {
        SeqCache cache = forward_one(ckpt, toks, fopts, nullptr);
        const int T = static_cast<int>(toks.size());
        std::vector<long> positions(T);
        for (int t = 0; t < T; ++t) positions[t] = t;

        // loss and dlogits
        Mat dlogits = Mat::Zero(T, cfg.vocab);
        for (int t = 0; t + 1 < T; ++t) {
            const double m = cache.logits.row(t).maxCoeff();
            Eigen::RowVectorXd e = (cache.logits.row(t).array() - m).exp();
            const double z = e.sum();
            loss_sum += std::log(z) + m - cache.logits(t, toks[t + 1]);
            dlogits.row(t) = e / z;
            dlogits(t, toks[t + 1]) -= 1.0;
        }
        dlogits /= static_cast<double>(total_preds);

        if (want_weights) out.weights["lm_head"] += cache.hn.transpose() * dlogits;
        Mat dhn = dlogits * ckpt.tensor("lm_head").transpose();
        Mat* dwfn = want_weights ? &out.weights["final_norm"] : nullptr;
        Mat dh = rmsnorm_backward(cache.layers.back().h3, ckpt.tensor("final_norm"),
                                  dhn, dwfn);

        for (int l = cfg.layers - 1; l >= 0; --l) {
            const LayerCache& lc = cache.layers[l];
            const HeadLayout& hl = ckpt.layout[l];
            const int hk = hl.n_heads();
            const int p = hl.per_head_dim;
            std::vector<int> groups = ckpt.retained_groups(l);
            const int gk = static_cast<int>(groups.size());
            const Mat& wo = ckpt.tensor(tname(l, "wo"));
            const Mat& wu = ckpt.tensor(tname(l, "wu"));
            const Mat& wg = ckpt.tensor(tname(l, "wg"));
            const Mat& wd = ckpt.tensor(tname(l, "wd"));
            const Mat& wq = ckpt.tensor(tname(l, "wq"));
            const Mat& wk = ckpt.tensor(tname(l, "wk"));

            // FFN
            const Mat& xd_m = mask_f ? lc.xd_masked : lc.xd;
            Mat dxd_masked = dh * wd.transpose();
            if (want_weights) out.weights[tname(l, "wd")] += xd_m.transpose() * dh;
            if (want_masks)
                out.masks.g_f[l] += lc.xd.cwiseProduct(dxd_masked).colwise().sum().transpose();
            Mat dxd = dxd_masked;
            if (mask_f)
                dxd = dxd.array().rowwise() * (*mask_f)[l].transpose().array();
            Mat sg = silu(lc.g);
            Mat du = dxd.cwiseProduct(sg);
            Mat dg = dxd.cwiseProduct(lc.u).cwiseProduct(silu_grad(lc.g));
            if (want_weights) {
                out.weights[tname(l, "wu")] += lc.b.transpose() * du;
                out.weights[tname(l, "wg")] += lc.b.transpose() * dg;
            }
            Mat db = du * wu.transpose() + dg * wg.transpose();
            Mat* dwn2 = want_weights ? &out.weights[tname(l, "ffn_norm")] : nullptr;
            Mat dh2 = dh + rmsnorm_backward(lc.h2, ckpt.tensor(tname(l, "ffn_norm")), db, dwn2);

            // attention
            const Mat& xo_m = mask_h ? lc.xo_masked : lc.xo;
            Mat dxo_masked = dh2 * wo.transpose();
            if (want_weights) out.weights[tname(l, "wo")] += xo_m.transpose() * dh2;
            if (want_masks)
                out.masks.g_h[l] += lc.xo.cwiseProduct(dxo_masked).colwise().sum().transpose();
            Mat dxo = dxo_masked;
            if (mask_h)
                dxo = dxo.array().rowwise() * (*mask_h)[l].transpose().array();

            auto group_slot = [&](int head) {
                const int g = head / gs;
                return static_cast<int>(std::find(groups.begin(), groups.end(), g) -
                                        groups.begin());
            };
            std::vector<Mat> dk(gk), dv(gk);
            for (int j = 0; j < gk; ++j) {
                dk[j] = Mat::Zero(T, p);
                dv[j] = Mat::Zero(T, p);
            }
            Mat da = Mat::Zero(T, d);
            for (int i = 0; i < hk; ++i) {
                const int j = group_slot(hl.retained_heads[i]);
                Mat doi = dxo.middleCols(static_cast<long>(i) * p, p);
                Mat dp = doi * lc.v[j].transpose();
                dv[j] += lc.p[i].transpose() * doi;
                Mat ds = softmax_backward(lc.p[i], dp);
                Mat dq = scale * (ds * lc.k[j]);
                dk[j] += scale * (ds.transpose() * lc.q[i]);
                if (cfg.rope_enabled) {
                    std::vector<int> idx = pair_indices_of(hl.rope_pair_mask[i]);
                    dq = rope_rotate_back(dq, positions, cfg.rope_theta, idx, cfg.head_dim);
                }
                if (want_weights)
                    out.weights[tname(l, "wq")].middleCols(static_cast<long>(i) * p, p) +=
                        lc.a.transpose() * dq;
                da += dq * wq.middleCols(static_cast<long>(i) * p, p).transpose();
            }
            for (int j = 0; j < gk; ++j) {
                Mat dkj = dk[j];
                if (cfg.rope_enabled) {
                    int rep = 0;
                    for (int i = 0; i < hk; ++i)
                        if (hl.retained_heads[i] / gs == groups[j]) { rep = i; break; }
                    std::vector<int> idx = pair_indices_of(hl.rope_pair_mask[rep]);
                    dkj = rope_rotate_back(dkj, positions, cfg.rope_theta, idx, cfg.head_dim);
                }
                if (want_weights) {
                    out.weights[tname(l, "wk")].middleCols(static_cast<long>(j) * p, p) +=
                        lc.a.transpose() * dkj;
                    out.weights[tname(l, "wv")].middleCols(static_cast<long>(j) * p, p) +=
                        lc.a.transpose() * dv[j];
                }
                da += dkj * wk.middleCols(static_cast<long>(j) * p, p).transpose();
                da += dv[j] * ckpt.tensor(tname(l, "wv"))
                                  .middleCols(static_cast<long>(j) * p, p)
                                  .transpose();
            }
            Mat* dwn1 = want_weights ? &out.weights[tname(l, "attn_norm")] : nullptr;
            dh = dh2 + rmsnorm_backward(lc.x, ckpt.tensor(tname(l, "attn_norm")), da, dwn1);
        }

        if (want_weights) {
            Mat& demb = out.weights["tok_embed"];
            for (int t = 0; t < T; ++t) demb.row(toks[t]) += dh.row(t);
        }
    }

    out.loss = loss_sum / static_cast<double>(total_preds);
    if (!std::isfinite(out.loss)) throw NumericalError("backward: non-finite loss");
    return out;
}

LossResult loss_and_mask_gradients(const Checkpoint& ckpt, const TokenBatch& batch) {
    if (batch.empty()) throw DimensionError("loss: empty batch");
    Gradients g = backward(ckpt, batch, /*want_weights=*/false, /*want_masks=*/true);
    return {g.loss, std::move(g.masks)};
}

double perplexity(const Checkpoint& ckpt, const std::vector<int>& corpus, int seq_len) {
    if (seq_len < 2) throw ConfigError("perplexity: seq_len must be >= 2");
    if (static_cast<long>(corpus.size()) < seq_len + 1)
        throw DimensionError("perplexity: corpus shorter than one window");
    double total = 0.0;
    long count = 0;
    for (size_t start = 0; start + seq_len < corpus.size(); start += seq_len) {
        std::vector<int> window(corpus.begin() + start,
                                corpus.begin() + start + seq_len + 1);
        ForwardResult r = forward(ckpt, {window});
        for (int t = 0; t < seq_len; ++t) {
            const double m = r.logits[0].row(t).maxCoeff();
            const double lse =
                m + std::log((r.logits[0].row(t).array() - m).exp().sum());
            total += lse - r.logits[0](t, window[t + 1]);
            ++count;
        }
    }
    return std::exp(total / static_cast<double>(count));
}

Checkpoint init_checkpoint(const ModelConfig& cfg, uint64_t seed) {
    cfg.validate();
    std::mt19937_64 rng(seed);
    std::normal_distribution<double> normal(0.0, 1.0);
    auto randmat = [&](long r, long c, double sigma) {
        Mat m(r, c);
        for (long i = 0; i < r; ++i)
            for (long j = 0; j < c; ++j) m(i, j) = sigma * normal(rng);
        return m;
    };

    Checkpoint ckpt;
    ckpt.config = cfg;
    const int d = cfg.hidden;
    const double proj_sigma = 1.0 / std::sqrt(static_cast<double>(d));
    ckpt.tensors["tok_embed"] = randmat(cfg.vocab, d, 0.02);
    ckpt.tensors["lm_head"] = randmat(d, cfg.vocab, proj_sigma);
    ckpt.tensors["final_norm"] = Mat::Ones(1, d);
    for (int l = 0; l < cfg.layers; ++l) {
        ckpt.tensors[tname(l, "attn_norm")] = Mat::Ones(1, d);
        ckpt.tensors[tname(l, "ffn_norm")] = Mat::Ones(1, d);
        ckpt.tensors[tname(l, "wq")] = randmat(d, d, proj_sigma);
        ckpt.tensors[tname(l, "wk")] =
            randmat(d, cfg.kv_groups * cfg.head_dim, proj_sigma);
        ckpt.tensors[tname(l, "wv")] =
            randmat(d, cfg.kv_groups * cfg.head_dim, proj_sigma);
        ckpt.tensors[tname(l, "wo")] = randmat(d, d, proj_sigma / std::sqrt(2.0 * cfg.layers));
        ckpt.tensors[tname(l, "wu")] = randmat(d, cfg.inter, proj_sigma);
        ckpt.tensors[tname(l, "wg")] = randmat(d, cfg.inter, proj_sigma);
        ckpt.tensors[tname(l, "wd")] =
            randmat(cfg.inter, d, 1.0 / std::sqrt(static_cast<double>(cfg.inter) * 2.0 * cfg.layers));
        ckpt.layout.push_back(full_layout(cfg));
    }
    return ckpt;
}

Checkpoint train_toy(const ModelConfig& cfg, const std::vector<int>& corpus,
                     const TrainOptions& opts) {
    Checkpoint ckpt = init_checkpoint(cfg, opts.seed);
    if (opts.steps == 0) return ckpt;
    if (static_cast<long>(corpus.size()) < opts.seq_len + 2)
        throw DimensionError("train: corpus shorter than one training window");

    std::mt19937_64 rng(opts.seed ^ 0x9e3779b97f4a7c15ull);
    std::uniform_int_distribution<long> pick(0, static_cast<long>(corpus.size()) -
                                                    opts.seq_len - 2);
    for (long step = 0; step < opts.steps; ++step) {
        TokenBatch batch(opts.batch);
        for (int b = 0; b < opts.batch; ++b) {
            const long start = pick(rng);
            batch[b].assign(corpus.begin() + start,
                            corpus.begin() + start + opts.seq_len + 1);
        }
        Gradients g = backward(ckpt, batch, /*want_weights=*/true, /*want_masks=*/false);
        if (!std::isfinite(g.loss))
            throw NumericalError("train: loss diverged at step " + std::to_string(step));

        double sq = 0.0;
        for (const auto& [name, gm] : g.weights) sq += gm.squaredNorm();
        const double norm = std::sqrt(sq);
        const double factor = norm > opts.clip_norm ? opts.clip_norm / norm : 1.0;
        for (auto& [name, gm] : g.weights)
            ckpt.tensor(name) -= (opts.lr * factor) * gm;

        if (opts.verbose && (step % opts.log_every == 0 || step + 1 == opts.steps))
            std::cout << "step " << step << " loss " << g.loss << "\n";
    }
    return ckpt;
}

}  // namespace islice
