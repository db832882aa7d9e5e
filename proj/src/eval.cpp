#include "islice/eval.hpp"

#include "json.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <random>

namespace islice {

using json = nlohmann::json;

RankProfile rank_profile(const Checkpoint& ckpt, const TokenBatch& calib, double tau,
                         const ResidualProbe* probe, const std::string& label) {
    if (calib.empty()) throw DimensionError("rank_profile: empty calibration batch");
    ForwardOptions opts;
    opts.capture = true;
    opts.probe = probe;
    ActivationTrace trace = forward(ckpt, calib, opts).trace;
    RankProfile out;
    out.label = label;
    for (const LayerTrace& lt : trace.layers) {
        Vec values = sym_eig(lt.block_output.gram.symmetrized()).values;
        out.ranks.push_back(energy_rank(values, tau));
    }
    return out;
}

ResidualProbe make_inter_pca_probe(const Checkpoint& ckpt, const TokenBatch& calib,
                                   double sparsity, const std::vector<int>& layer_set) {
    const int d = ckpt.config.hidden;
    for (int l : layer_set)
        if (l < 0 || l >= ckpt.config.layers)
            throw ConfigError("inter probe: invalid layer index " + std::to_string(l));
    ForwardOptions opts;
    opts.capture = true;
    ActivationTrace trace = forward(ckpt, calib, opts).trace;

    ResidualProbe probe;
    const int keep = std::clamp<int>(static_cast<int>(std::lround((1.0 - sparsity) * d)), 1, d);
    for (int l : layer_set) {
        Mat basis = pca_basis(trace.layers[l].block_output.gram.symmetrized(), keep);
        probe.projectors.emplace_back(l, Mat(basis * basis.transpose()));
    }
    return probe;
}

namespace {

Mat selection_from_indices(const std::vector<int>& idx, int dim) {
    Mat q = Mat::Zero(dim, static_cast<long>(idx.size()));
    for (size_t j = 0; j < idx.size(); ++j) q(idx[j], static_cast<long>(j)) = 1.0;
    return q;
}

std::vector<int> top_k_indices(const Vec& score, int k) {
    std::vector<int> order(score.size());
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(),
                     [&](int a, int b) { return score[a] > score[b]; });
    order.resize(k);
    std::sort(order.begin(), order.end());
    return order;
}

std::vector<int> random_indices(std::mt19937_64& rng, int n, int k) {
    std::vector<int> all(n);
    std::iota(all.begin(), all.end(), 0);
    std::shuffle(all.begin(), all.end(), rng);
    all.resize(k);
    std::sort(all.begin(), all.end());
    return all;
}

std::vector<bool> mask_from_pairs(const std::vector<int>& pairs, int half) {
    std::vector<bool> m(half, false);
    for (int j : pairs) m[j] = true;
    return m;
}

}  // namespace

PruneOutput baseline_prune(const Checkpoint& ckpt, const BaselineSpec& spec,
                           const TokenBatch& calib) {
    ckpt.validate();
    const ModelConfig& mc = ckpt.config;
    if (!(spec.sparsity >= 0.0 && spec.sparsity < 1.0))
        throw ConfigError("baseline: sparsity must lie in [0, 1)");
    const double s = spec.sparsity;
    const int hd = mc.head_dim;
    const int gs = mc.group_size();
    const bool magnitude = spec.kind == BaselineKind::Magnitude;

    int p = static_cast<int>(std::lround((1.0 - s) * hd));
    if (mc.rope_enabled) p = 2 * static_cast<int>(std::lround((1.0 - s) * hd / 2.0));
    p = std::clamp(p, mc.rope_enabled ? 2 : 1, hd);

    // Per-layer FFN width chosen so each layer lands on the requested
    // parameter sparsity despite head-width rounding.
    const double layer_params = 2.0 * mc.hidden * mc.hidden +
                                2.0 * mc.hidden * mc.kv_groups * hd +
                                3.0 * mc.hidden * mc.inter;
    const double mha_remain =
        static_cast<double>(p) * (2.0 * mc.hidden * mc.heads + 2.0 * mc.hidden * mc.kv_groups);
    int p_f = static_cast<int>(
        std::lround(((1.0 - s) * layer_params - mha_remain) / (3.0 * mc.hidden)));
    p_f = std::clamp(p_f, 1, mc.inter);

    ActivationTrace trace;
    if (magnitude) {
        ForwardOptions opts;
        opts.capture = true;
        trace = forward(ckpt, calib, opts).trace;
    }
    std::mt19937_64 rng(spec.seed);

    PruneOutput out;
    out.pruned = ckpt;
    out.report.params_before = ckpt.total_params();
    out.report.prunable_before = ckpt.prunable_params();

    for (int l = 0; l < mc.layers; ++l) {
        CompressionPlan plan;
        plan.kept.resize(mc.heads);
        std::iota(plan.kept.begin(), plan.kept.end(), 0);
        plan.p = p;
        plan.target_p_total = p * mc.heads;

        const Mat& wq = out.pruned.tensor(tname(l, "wq"));
        const Mat& wk = out.pruned.tensor(tname(l, "wk"));
        const Mat& wo = out.pruned.tensor(tname(l, "wo"));
        const Mat& wd = out.pruned.tensor(tname(l, "wd"));

        TransformSet ts;
        ts.plan = plan;

        // q1 per KV group, shared across its query heads
        std::vector<Mat> group_q1(mc.kv_groups);
        std::vector<std::vector<bool>> group_mask(mc.kv_groups);
        for (int g = 0; g < mc.kv_groups; ++g) {
            if (mc.rope_enabled) {
                std::vector<int> pairs;
                if (magnitude) {
                    const Mat gin = trace.layers[l].mha_input.gram.symmetrized();
                    Vec pair_imp = Vec::Zero(hd / 2);
                    auto add_imp = [&](const Mat& w, int block) {
                        Mat wb = w.middleCols(static_cast<long>(block) * hd, hd);
                        Mat gb = wb.transpose() * gin * wb;
                        for (int j = 0; j < hd / 2; ++j)
                            pair_imp[j] += std::max(gb(j, j), 0.0) * wb.col(j).squaredNorm() +
                                           std::max(gb(j + hd / 2, j + hd / 2), 0.0) *
                                               wb.col(j + hd / 2).squaredNorm();
                    };
                    for (int h = g * gs; h < (g + 1) * gs; ++h) add_imp(wq, h);
                    add_imp(wk, g);
                    pairs = top_k_indices(pair_imp, p / 2);
                } else {
                    pairs = random_indices(rng, hd / 2, p / 2);
                }
                group_mask[g] = mask_from_pairs(pairs, hd / 2);
                Mat q1 = Mat::Zero(hd, p);
                for (size_t j = 0; j < pairs.size(); ++j) {
                    q1(pairs[j], static_cast<long>(j)) = 1.0;
                    q1(pairs[j] + hd / 2, static_cast<long>(j) + pairs.size()) = 1.0;
                }
                group_q1[g] = q1;
            } else {
                std::vector<int> chans;
                if (magnitude) {
                    const Mat gin = trace.layers[l].mha_input.gram.symmetrized();
                    Vec imp = Vec::Zero(hd);
                    auto add_imp = [&](const Mat& w, int block) {
                        Mat wb = w.middleCols(static_cast<long>(block) * hd, hd);
                        Mat gb = wb.transpose() * gin * wb;
                        for (int c = 0; c < hd; ++c)
                            imp[c] += std::max(gb(c, c), 0.0) * wb.col(c).squaredNorm();
                    };
                    for (int h = g * gs; h < (g + 1) * gs; ++h) add_imp(wq, h);
                    add_imp(wk, g);
                    chans = top_k_indices(imp, p);
                } else {
                    chans = random_indices(rng, hd, p);
                }
                group_q1[g] = selection_from_indices(chans, hd);
            }
        }

        // q2: per-group selected X_o channels
        std::vector<Mat> group_q2(mc.kv_groups);
        for (int g = 0; g < mc.kv_groups; ++g) {
            std::vector<int> chans;
            if (magnitude) {
                const Mat go = trace.layers[l].o_proj_input.gram.symmetrized();
                Vec imp = Vec::Zero(hd);
                for (int h = g * gs; h < (g + 1) * gs; ++h)
                    for (int c = 0; c < hd; ++c)
                        imp[c] += std::max(go(h * hd + c, h * hd + c), 0.0) *
                                  wo.row(h * hd + c).squaredNorm();
                chans = top_k_indices(imp, p);
            } else {
                chans = random_indices(rng, hd, p);
            }
            group_q2[g] = selection_from_indices(chans, hd);
        }

        for (int h = 0; h < mc.heads; ++h) {
            const int g = h / gs;
            ts.mha.q1.push_back(group_q1[g]);
            ts.mha.q2.push(group_q2[g]);
            if (mc.rope_enabled) ts.mha.pair_mask.push_back(group_mask[g]);
        }
        ts.mha.q2_star = ts.mha.q2.dense().transpose();

        Vec ffn_imp;
        if (magnitude) {
            ffn_imp = ffn_channel_importance(trace.layers[l].down_input.gram.symmetrized(), wd);
        } else {
            ffn_imp = Vec::Zero(mc.inter);  // selection drawn uniformly below
        }
        std::vector<int> ffn_keep = magnitude ? top_k_indices(ffn_imp, p_f)
                                              : random_indices(rng, mc.inter, p_f);
        ts.ffn.qc = selection_from_indices(ffn_keep, mc.inter);
        ts.ffn.qr = ts.ffn.qc.transpose();

        fuse_mha(out.pruned, l, ts.mha, plan);
        fuse_ffn(out.pruned, l, ts.ffn);

        LayerReport lrep;
        lrep.layer = l;
        lrep.kept_heads = mc.heads;
        lrep.per_head_dim = p;
        lrep.ffn_dim = p_f;
        out.report.layers.push_back(lrep);
        out.transforms.push_back(std::move(ts));
    }

    out.report.params_after = out.pruned.total_params();
    out.report.prunable_after = out.pruned.prunable_params();
    out.report.realized_sparsity =
        1.0 - static_cast<double>(out.report.prunable_after) / out.report.prunable_before;
    return out;
}

void emit_report(const std::vector<RankProfile>& profiles,
                 const std::map<std::string, double>& ppls,
                 const std::map<std::string, long>& params, const std::string& json_path,
                 const std::string& csv_path) {
    json j;
    j["profiles"] = json::array();
    for (const auto& p : profiles)
        j["profiles"].push_back({{"label", p.label}, {"ranks", p.ranks}});
    j["ppl"] = ppls;
    j["params"] = params;
    std::ofstream jf(json_path, std::ios::trunc);
    if (!jf) throw IoError("cannot write report: " + json_path);
    jf << j.dump(2) << "\n";
    if (!jf) throw IoError("write failed: " + json_path);

    std::ofstream cf(csv_path, std::ios::trunc);
    if (!cf) throw IoError("cannot write report: " + csv_path);
    cf << "layer,metric,variant,value\n";
    for (const auto& p : profiles)
        for (size_t l = 0; l < p.ranks.size(); ++l)
            cf << l << ",energy_rank," << p.label << "," << p.ranks[l] << "\n";
    if (!cf) throw IoError("write failed: " + csv_path);
}

}  // namespace islice
