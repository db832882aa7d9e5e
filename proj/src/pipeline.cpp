#include "islice/pipeline.hpp"

#include "json.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstring>
#include <fstream>
#include <iostream>
#include <numeric>
#include <random>

namespace islice {

using json = nlohmann::json;

namespace {

double seconds_since(std::chrono::steady_clock::time_point t0) {
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

constexpr char kTokenMagic[8] = {'I', 'S', 'L', 'T', 'O', 'K', '0', '1'};

Mat correct_q2_policy(const BlockDiagonal& q2, const Capture& xo, const CompressionPlan& plan,
                      int head_dim, std::optional<double> lambda) {
    // Fit on the row sample when it covers the pass; fall back to the Gram,
    // which carries the same second moments over all rows.
    if (xo.sample_complete() && xo.rows.rows() > 0) {
        Mat rows = kept_columns(xo.rows, plan, head_dim);
        if (lambda) return correct_q2(q2, rows, *lambda);
        try {
            return correct_q2(q2, rows, 0.0);
        } catch (const NumericalError&) {
            Mat c = q2.apply_right(rows);
            return correct_q2(q2, rows, auto_ridge_lambda(c.transpose() * c));
        }
    }
    Mat gram = kept_gram(xo.gram.symmetrized(), plan, head_dim);
    if (lambda) return correct_q2_from_gram(q2, gram, *lambda);
    try {
        return correct_q2_from_gram(q2, gram, 0.0);
    } catch (const NumericalError&) {
        Mat qd = q2.dense();
        Mat ata = qd.transpose() * gram * qd;
        return correct_q2_from_gram(q2, gram, auto_ridge_lambda(ata));
    }
}

}  // namespace

RunConfig run_config_from_json(const std::string& text) {
    json j = json::parse(text, nullptr, /*allow_exceptions=*/false);
    if (j.is_discarded()) throw ConfigError("run config: malformed JSON");
    RunConfig cfg;
    try {
        if (j.contains("sparsity")) cfg.sparsity = j["sparsity"];
        if (j.contains("lambda_b")) cfg.lambda_b = j["lambda_b"];
        if (j.contains("calib")) {
            const auto& c = j["calib"];
            if (c.contains("path")) cfg.calib.path = c["path"];
            if (c.contains("num_samples")) cfg.calib.num_samples = c["num_samples"];
            if (c.contains("seq_len")) cfg.calib.seq_len = c["seq_len"];
        }
        if (j.contains("seed")) cfg.seed = j["seed"];
        if (j.contains("repropagate")) cfg.repropagate = j["repropagate"];
        if (j.contains("iterate_ffn")) {
            const std::string m = j["iterate_ffn"];
            if (m == "auto") cfg.iterate_ffn = IterateMode::Auto;
            else if (m == "on") cfg.iterate_ffn = IterateMode::On;
            else if (m == "off") cfg.iterate_ffn = IterateMode::Off;
            else throw ConfigError("run config: iterate_ffn must be auto|on|off");
        }
        if (j.contains("ridge_lambda")) {
            if (j["ridge_lambda"].is_string()) {
                if (j["ridge_lambda"] != "auto")
                    throw ConfigError("run config: ridge_lambda must be a number or \"auto\"");
                cfg.ridge_lambda.reset();
            } else {
                cfg.ridge_lambda = j["ridge_lambda"].get<double>();
            }
        }
        if (j.contains("per_layer_cap")) cfg.per_layer_cap = j["per_layer_cap"];
        if (j.contains("min_head_dim_ratio")) cfg.min_head_dim_ratio = j["min_head_dim_ratio"];
        if (j.contains("slice")) {
            const auto& s = j["slice"];
            if (s.contains("width")) cfg.slice.slice_width = s["width"];
            if (s.contains("sweeps")) cfg.slice.sweeps = s["sweeps"];
            if (s.contains("steps_per_slice")) cfg.slice.steps_per_slice = s["steps_per_slice"];
            if (s.contains("amplitude_bound")) cfg.slice.amplitude_bound = s["amplitude_bound"];
        }
        if (j.contains("row_cap")) cfg.row_cap = j["row_cap"];
        if (j.contains("ffn_pca_block")) cfg.ffn_pca_block = j["ffn_pca_block"];
    } catch (const json::exception& e) {
        throw ConfigError(std::string("run config: ") + e.what());
    }
    if (!(cfg.sparsity > 0.0 && cfg.sparsity < 1.0))
        throw ConfigError("run config: sparsity must lie in (0, 1)");
    if (cfg.calib.num_samples < 1) throw ConfigError("run config: num_samples must be >= 1");
    if (cfg.calib.seq_len < 2) throw ConfigError("run config: seq_len must be >= 2");
    return cfg;
}

std::string run_config_to_json(const RunConfig& cfg) {
    json j;
    j["sparsity"] = cfg.sparsity;
    j["lambda_b"] = cfg.lambda_b;
    j["calib"] = {{"path", cfg.calib.path},
                  {"num_samples", cfg.calib.num_samples},
                  {"seq_len", cfg.calib.seq_len}};
    j["seed"] = cfg.seed;
    j["repropagate"] = cfg.repropagate;
    j["iterate_ffn"] = cfg.iterate_ffn == IterateMode::Auto ? "auto"
                       : cfg.iterate_ffn == IterateMode::On ? "on"
                                                            : "off";
    if (cfg.ridge_lambda)
        j["ridge_lambda"] = *cfg.ridge_lambda;
    else
        j["ridge_lambda"] = "auto";
    j["per_layer_cap"] = cfg.per_layer_cap;
    j["min_head_dim_ratio"] = cfg.min_head_dim_ratio;
    j["slice"] = {{"width", cfg.slice.slice_width},
                  {"sweeps", cfg.slice.sweeps},
                  {"steps_per_slice", cfg.slice.steps_per_slice},
                  {"amplitude_bound", cfg.slice.amplitude_bound}};
    j["row_cap"] = cfg.row_cap;
    j["ffn_pca_block"] = cfg.ffn_pca_block;
    return j.dump(2);
}

std::vector<int> load_corpus(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw IoError("cannot open corpus: " + path);
    std::vector<char> raw((std::istreambuf_iterator<char>(f)),
                          std::istreambuf_iterator<char>());
    std::vector<int> tokens;
    if (raw.size() >= 16 && std::memcmp(raw.data(), kTokenMagic, 8) == 0) {
        uint64_t count = 0;
        std::memcpy(&count, raw.data() + 8, 8);
        if (raw.size() < 16 + count * 4) throw IoError("token file truncated: " + path);
        tokens.resize(count);
        for (uint64_t i = 0; i < count; ++i) {
            uint32_t id = 0;
            std::memcpy(&id, raw.data() + 16 + i * 4, 4);
            tokens[i] = static_cast<int>(id);
        }
    } else {
        tokens.reserve(raw.size());
        for (char c : raw) tokens.push_back(static_cast<unsigned char>(c));
    }
    return tokens;
}

TokenBatch load_calibration(const std::string& path, int num_samples, int seq_len,
                            uint64_t seed) {
    if (num_samples < 1 || seq_len < 2)
        throw ConfigError("calibration: need num_samples >= 1 and seq_len >= 2");
    std::vector<int> corpus = load_corpus(path);
    const long window = seq_len + 1;
    if (static_cast<long>(corpus.size()) < window)
        throw IoError("calibration file shorter than one window: " + path);

    std::mt19937_64 rng(seed);
    TokenBatch batch;
    const long n_disjoint = static_cast<long>(corpus.size()) / window;
    if (n_disjoint < num_samples) {
        std::cerr << "warning: calibration file only supports " << n_disjoint
                  << " non-overlapping windows (requested " << num_samples << ")\n";
        std::vector<long> starts(n_disjoint);
        for (long i = 0; i < n_disjoint; ++i) starts[i] = i * window;
        std::shuffle(starts.begin(), starts.end(), rng);
        for (long s : starts)
            batch.emplace_back(corpus.begin() + s, corpus.begin() + s + window);
        return batch;
    }
    std::uniform_int_distribution<long> pick(0, static_cast<long>(corpus.size()) - window);
    for (int i = 0; i < num_samples; ++i) {
        const long s = pick(rng);
        batch.emplace_back(corpus.begin() + s, corpus.begin() + s + window);
    }
    return batch;
}

std::vector<OnlineTransforms> to_online_transforms(const std::vector<TransformSet>& sets) {
    std::vector<OnlineTransforms> out(sets.size());
    for (size_t l = 0; l < sets.size(); ++l) {
        out[l].mha = to_online(sets[l].mha, sets[l].plan);
        out[l].ffn = OnlineFfnTransform{sets[l].ffn.qc, sets[l].ffn.qr};
    }
    return out;
}

double fuse_check(const Checkpoint& original, const Checkpoint& pruned,
                  const std::vector<TransformSet>& transforms, int trials,
                  uint64_t seed) {
    if (static_cast<int>(transforms.size()) != original.config.layers)
        throw ConfigError("fuse_check: transforms log does not cover every layer");
    std::vector<OnlineTransforms> online = to_online_transforms(transforms);
    std::mt19937_64 rng(seed);
    std::uniform_int_distribution<int> tok(0, original.config.vocab - 1);

    double worst = 0.0;
    for (int trial = 0; trial < trials; ++trial) {
        TokenBatch batch(2, std::vector<int>(24));
        for (auto& seq : batch)
            for (auto& t : seq) t = tok(rng);
        ForwardResult fused = forward(pruned, batch);
        ForwardOptions opts;
        opts.online = &online;
        ForwardResult ref = forward(original, batch, opts);
        for (size_t s = 0; s < batch.size(); ++s)
            worst = std::max(worst,
                             (fused.logits[s] - ref.logits[s]).cwiseAbs().maxCoeff());
    }
    return worst;
}

PruneOutput run_prune_targets(const RunConfig& cfg, const Checkpoint& ckpt,
                              const std::vector<std::pair<int, int>>& targets,
                              const TokenBatch& calib, bool compensate,
                              bool allow_ffn_comp) {
    const auto t0 = std::chrono::steady_clock::now();
    const ModelConfig& mc = ckpt.config;
    mc.validate();
    if (static_cast<int>(targets.size()) != mc.layers)
        throw ConfigError("run_prune: one (mha, ffn) target per layer required");

    const int hd = mc.head_dim;
    const int min_hd = static_cast<int>(std::ceil(cfg.min_head_dim_ratio * hd));
    const ParamModel pm = param_model(mc);

    PruneOutput out;
    out.pruned = ckpt;
    out.report.params_before = ckpt.total_params();
    out.report.prunable_before = ckpt.prunable_params();

    // Layers whose FFN ratio lands in the top decile get the iterative solver
    // under the auto policy.
    std::vector<bool> iterate_layer(mc.layers, cfg.iterate_ffn == IterateMode::On);
    if (cfg.iterate_ffn == IterateMode::Auto) {
        std::vector<int> order(mc.layers);
        std::iota(order.begin(), order.end(), 0);
        std::stable_sort(order.begin(), order.end(), [&](int a, int b) {
            return (mc.inter - targets[a].second) > (mc.inter - targets[b].second);
        });
        const int n_top = std::max(1, static_cast<int>(std::llround(0.1 * mc.layers)));
        for (int i = 0; i < n_top; ++i)
            if (targets[order[i]].second < mc.inter) iterate_layer[order[i]] = true;
    }

    ForwardOptions capture_opts;
    capture_opts.capture = true;
    capture_opts.row_cap = cfg.row_cap;
    ActivationTrace trace = forward(out.pruned, calib, capture_opts).trace;

    double deficit = 0.0;  // allocated minus realized removed parameters so far
    for (int l = 0; l < mc.layers; ++l) {
        if (cfg.repropagate && l > 0)
            trace = forward(out.pruned, calib, capture_opts).trace;
        const LayerTrace& lt = trace.layers[l];
        LayerReport lrep;
        lrep.layer = l;

        // ---- adaptive head compression
        const auto tm0 = std::chrono::steady_clock::now();
        int t_mha = targets[l].first;
        if (compensate && deficit != 0.0)
            t_mha -= static_cast<int>(std::llround(deficit / pm.cost_h));
        t_mha = std::clamp(t_mha, min_hd, mc.hidden);

        const Mat go = lt.o_proj_input.gram.symmetrized();
        HeadScoreTable scores = build_head_scores(go, out.pruned.tensor(tname(l, "wo")),
                                                  mc.heads);
        CompressionPlan plan = greedy_remove(scores, t_mha, min_hd);
        if (mc.rope_enabled) plan = evenize_plan(plan, min_hd, hd);

        TransformSet ts;
        ts.plan = plan;
        Q1Result q1 = build_q1_from_gram(lt.mha_input.gram.symmetrized(),
                                         out.pruned.tensor(tname(l, "wq")),
                                         out.pruned.tensor(tname(l, "wk")), plan,
                                         mc.rope_enabled, mc);
        ts.mha.q1 = q1.q1;
        ts.mha.pair_mask = q1.pair_mask;
        ts.mha.q2 = build_q2(go, plan, hd, mc.group_size());
        ts.mha.q2_star =
            correct_q2_policy(ts.mha.q2, lt.o_proj_input, plan, hd, cfg.ridge_lambda);
        fuse_mha(out.pruned, l, ts.mha, plan);

        const double alloc_mha = (mc.hidden - targets[l].first) * pm.cost_h;
        const double real_mha =
            (mc.hidden - static_cast<double>(plan.kept.size()) * plan.p) * pm.cost_h;
        deficit += alloc_mha - real_mha;
        lrep.mha_seconds = seconds_since(tm0);

        // ---- progressive sliced iterative PCA
        const auto tf0 = std::chrono::steady_clock::now();
        int t_ffn = targets[l].second;
        if (compensate && allow_ffn_comp && deficit != 0.0)
            t_ffn -= static_cast<int>(std::llround(deficit / pm.cost_f));
        t_ffn = std::clamp(t_ffn, 1, mc.inter);

        SliceSchedule sched = cfg.slice;
        sched.enabled = iterate_layer[l];
        sched.ridge_lambda = cfg.ridge_lambda;
        ts.ffn = iterate_pca(lt.up_out.rows, lt.gate_out.rows, lt.down_input.rows,
                             lt.down_input.gram.symmetrized(),
                             out.pruned.tensor(tname(l, "wd")), t_ffn, sched,
                             &lrep.ffn_objective, cfg.verbose ? &std::cerr : nullptr);
        fuse_ffn(out.pruned, l, ts.ffn);

        const double alloc_ffn = (mc.inter - targets[l].second) * pm.cost_f;
        const double real_ffn = (mc.inter - t_ffn) * pm.cost_f;
        deficit += alloc_ffn - real_ffn;
        lrep.ffn_seconds = seconds_since(tf0);

        lrep.removed_heads = plan.removed;
        lrep.kept_heads = static_cast<int>(plan.kept.size());
        lrep.per_head_dim = plan.p;
        lrep.ffn_dim = t_ffn;
        out.report.layers.push_back(std::move(lrep));
        out.transforms.push_back(std::move(ts));

        if (cfg.verbose)
            std::cerr << "layer " << l << ": kept " << plan.kept.size() << " heads at p="
                      << plan.p << ", ffn " << t_ffn << "/" << mc.inter << "\n";
    }

    out.report.params_after = out.pruned.total_params();
    out.report.prunable_after = out.pruned.prunable_params();
    out.report.realized_sparsity =
        1.0 - static_cast<double>(out.report.prunable_after) / out.report.prunable_before;

    // Fusion is exact algebra; a divergent checkpoint is a bug, not a result.
    out.report.fuse_divergence = fuse_check(ckpt, out.pruned, out.transforms, 3, cfg.seed);
    if (out.report.fuse_divergence >= 1e-5)
        throw NumericalError("fuse_check failed: divergence " +
                             std::to_string(out.report.fuse_divergence));

    out.report.total_seconds = seconds_since(t0);
    return out;
}

PruneOutput run_prune(const RunConfig& cfg, const Checkpoint& ckpt) {
    ckpt.validate();
    const ModelConfig& mc = ckpt.config;
    TokenBatch calib =
        load_calibration(cfg.calib.path, cfg.calib.num_samples, cfg.calib.seq_len, cfg.seed);
    std::vector<int> corpus = load_corpus(cfg.calib.path);

    // Part 1: mask gradients and sparse-PCA correction on the dense model.
    LossResult lr = loss_and_mask_gradients(ckpt, calib);
    ForwardOptions capture_opts;
    capture_opts.capture = true;
    capture_opts.row_cap = cfg.row_cap;
    ActivationTrace dense_trace = forward(ckpt, calib, capture_opts).trace;
    SparseRotations rot = block_sparse_pca(dense_trace, mc, cfg.ffn_pca_block);
    UnitImportance imp = correct_importance(lr.mask_grads, rot);
    RatioPlan plan = allocate_ratios(imp, param_model(mc), cfg.sparsity, cfg.lambda_b,
                                     cfg.per_layer_cap);
    // Raw unit counts go into the loop; the RoPE/min-width constraints are
    // realized per layer where the budget compensation can see their cost.
    const int min_hd = static_cast<int>(std::ceil(cfg.min_head_dim_ratio * mc.head_dim));
    std::vector<std::pair<int, int>> targets;
    for (int l = 0; l < mc.layers; ++l)
        targets.emplace_back(std::max(mc.hidden - plan.removed_h[l], min_hd),
                             std::max(1, mc.inter - plan.removed_f[l]));

    PruneOutput out = run_prune_targets(cfg, ckpt, targets, calib, /*compensate=*/true,
                                        /*allow_ffn_comp=*/cfg.lambda_b > 0.0);
    out.report.ratio_plan = plan;
    out.report.ppl_before = perplexity(ckpt, corpus, cfg.calib.seq_len);
    out.report.ppl_after = perplexity(out.pruned, corpus, cfg.calib.seq_len);
    return out;
}

namespace {

json mat_to_json(const Mat& m) {
    json rows = json::array();
    for (Eigen::Index i = 0; i < m.rows(); ++i) {
        json row = json::array();
        for (Eigen::Index j = 0; j < m.cols(); ++j) row.push_back(m(i, j));
        rows.push_back(std::move(row));
    }
    return rows;
}

Mat mat_from_json(const json& rows) {
    const long r = static_cast<long>(rows.size());
    const long c = r > 0 ? static_cast<long>(rows[0].size()) : 0;
    Mat m(r, c);
    for (long i = 0; i < r; ++i)
        for (long j = 0; j < c; ++j) m(i, j) = rows[i][j].get<double>();
    return m;
}

}  // namespace

void save_transforms(const std::string& path, const std::vector<TransformSet>& sets) {
    json arr = json::array();
    for (const auto& ts : sets) {
        json j;
        j["plan"] = {{"removed", ts.plan.removed},
                     {"kept", ts.plan.kept},
                     {"p", ts.plan.p},
                     {"target_p_total", ts.plan.target_p_total}};
        json q1 = json::array();
        for (const Mat& m : ts.mha.q1) q1.push_back(mat_to_json(m));
        json q2 = json::array();
        for (const auto& b : ts.mha.q2.blocks) q2.push_back(mat_to_json(b.m));
        json masks = json::array();
        for (const auto& m : ts.mha.pair_mask)
            masks.push_back(std::vector<int>(m.begin(), m.end()));
        j["mha"] = {{"q1", q1},
                    {"q2_blocks", q2},
                    {"q2_star", mat_to_json(ts.mha.q2_star)},
                    {"pair_mask", masks}};
        j["ffn"] = {{"qc", mat_to_json(ts.ffn.qc)}, {"qr", mat_to_json(ts.ffn.qr)}};
        arr.push_back(std::move(j));
    }
    std::ofstream f(path, std::ios::trunc);
    if (!f) throw IoError("cannot write transforms log: " + path);
    f << arr.dump() << "\n";
    if (!f) throw IoError("write failed: " + path);
}

std::vector<TransformSet> load_transforms(const std::string& path) {
    std::ifstream f(path);
    if (!f) throw IoError("missing transforms log: " + path);
    json arr = json::parse(f, nullptr, /*allow_exceptions=*/false);
    if (arr.is_discarded()) throw IoError("malformed transforms log: " + path);
    std::vector<TransformSet> sets;
    for (const auto& j : arr) {
        TransformSet ts;
        ts.plan.removed = j["plan"]["removed"].get<std::vector<int>>();
        ts.plan.kept = j["plan"]["kept"].get<std::vector<int>>();
        ts.plan.p = j["plan"]["p"];
        ts.plan.target_p_total = j["plan"]["target_p_total"];
        for (const auto& m : j["mha"]["q1"]) ts.mha.q1.push_back(mat_from_json(m));
        for (const auto& m : j["mha"]["q2_blocks"]) ts.mha.q2.push(mat_from_json(m));
        ts.mha.q2_star = mat_from_json(j["mha"]["q2_star"]);
        for (const auto& m : j["mha"]["pair_mask"]) {
            std::vector<int> raw = m.get<std::vector<int>>();
            ts.mha.pair_mask.emplace_back(raw.begin(), raw.end());
        }
        ts.ffn.qc = mat_from_json(j["ffn"]["qc"]);
        ts.ffn.qr = mat_from_json(j["ffn"]["qr"]);
        sets.push_back(std::move(ts));
    }
    return sets;
}

std::string PruneReport::to_json(bool include_timing) const {
    json j;
    j["params_before"] = params_before;
    j["params_after"] = params_after;
    j["prunable_before"] = prunable_before;
    j["prunable_after"] = prunable_after;
    j["realized_sparsity"] = realized_sparsity;
    j["ppl_before"] = ppl_before;
    j["ppl_after"] = ppl_after;
    j["fuse_divergence"] = fuse_divergence;
    if (ratio_plan) j["ratio_plan"] = json::parse(ratio_plan->to_json());
    json layers_json = json::array();
    for (const auto& l : layers) {
        json lj;
        lj["layer"] = l.layer;
        lj["removed_heads"] = l.removed_heads;
        lj["kept_heads"] = l.kept_heads;
        lj["per_head_dim"] = l.per_head_dim;
        lj["ffn_dim"] = l.ffn_dim;
        json obj = json::array();
        for (const auto& e : l.ffn_objective)
            obj.push_back({{"sweep", e.sweep}, {"slice", e.slice}, {"objective", e.objective}});
        lj["ffn_objective"] = obj;
        if (include_timing) {
            lj["mha_seconds"] = l.mha_seconds;
            lj["ffn_seconds"] = l.ffn_seconds;
        }
        layers_json.push_back(lj);
    }
    j["layers"] = layers_json;
    if (include_timing) j["total_seconds"] = total_seconds;
    return j.dump(2);
}

}  // namespace islice
