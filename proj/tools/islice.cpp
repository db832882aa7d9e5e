#include "islice/eval.hpp"
#include "islice/pipeline.hpp"

#include "CLI11.hpp"

#include <fstream>
#include <iostream>
#include <sstream>

namespace {

using namespace islice;

std::string read_file(const std::string& path) {
    std::ifstream f(path);
    if (!f) throw ConfigError("cannot open config file: " + path);
    std::stringstream ss;
    ss << f.rdbuf();
    return ss.str();
}

std::vector<int> parse_layer_list(const std::string& s) {
    std::vector<int> out;
    std::stringstream ss(s);
    std::string item;
    while (std::getline(ss, item, ',')) out.push_back(std::stoi(item));
    return out;
}

int cmd_train_toy(CLI::App& app) {
    auto* cmd = app.get_subcommand("train-toy");
    ModelConfig mc;
    mc.layers = cmd->get_option("--layers")->as<int>();
    mc.hidden = cmd->get_option("--hidden")->as<int>();
    mc.heads = cmd->get_option("--heads")->as<int>();
    mc.kv_groups = cmd->get_option("--kv-groups")->as<int>();
    if (mc.kv_groups == 0) mc.kv_groups = mc.heads;
    mc.head_dim = mc.hidden / mc.heads;
    mc.inter = cmd->get_option("--inter")->as<int>();
    mc.vocab = cmd->get_option("--vocab")->as<int>();
    mc.rope_enabled = !cmd->get_option("--no-rope")->as<bool>();
    mc.validate();

    TrainOptions topts;
    topts.steps = cmd->get_option("--steps")->as<long>();
    topts.lr = cmd->get_option("--lr")->as<double>();
    topts.seed = cmd->get_option("--seed")->as<uint64_t>();
    topts.seq_len = cmd->get_option("--seq-len")->as<int>();
    topts.batch = cmd->get_option("--batch")->as<int>();
    topts.verbose = true;

    std::vector<int> corpus = load_corpus(cmd->get_option("--corpus")->as<std::string>());
    Checkpoint ckpt = train_toy(mc, corpus, topts);
    const std::string out = cmd->get_option("--out")->as<std::string>();
    save_checkpoint(out, ckpt);
    std::cout << "saved " << out << " (params " << ckpt.total_params() << ", ppl "
              << perplexity(ckpt, corpus, topts.seq_len) << ")\n";
    return 0;
}

int cmd_prune(CLI::App& app) {
    auto* cmd = app.get_subcommand("prune");
    RunConfig cfg;
    const std::string config_path = cmd->get_option("--config")->as<std::string>();
    if (!config_path.empty()) cfg = run_config_from_json(read_file(config_path));

    if (cmd->count("--sparsity")) cfg.sparsity = cmd->get_option("--sparsity")->as<double>();
    if (cmd->count("--lambda-b")) cfg.lambda_b = cmd->get_option("--lambda-b")->as<double>();
    if (cmd->count("--seed")) cfg.seed = cmd->get_option("--seed")->as<uint64_t>();
    if (cmd->count("--no-repropagate")) cfg.repropagate = false;
    if (cmd->count("--iterate-ffn")) {
        const std::string m = cmd->get_option("--iterate-ffn")->as<std::string>();
        cfg.iterate_ffn = m == "on"    ? IterateMode::On
                          : m == "off" ? IterateMode::Off
                                       : IterateMode::Auto;
    }
    if (cmd->count("--calib")) cfg.calib.path = cmd->get_option("--calib")->as<std::string>();
    if (cmd->count("--num-samples"))
        cfg.calib.num_samples = cmd->get_option("--num-samples")->as<int>();
    if (cmd->count("--seq-len")) cfg.calib.seq_len = cmd->get_option("--seq-len")->as<int>();
    if (cmd->count("--verbose")) cfg.verbose = true;
    if (cfg.calib.path.empty()) throw ConfigError("prune: a calibration file is required");
    if (!(cfg.sparsity > 0.0 && cfg.sparsity < 1.0))
        throw ConfigError("prune: sparsity must lie in (0, 1)");

    Checkpoint ckpt = load_checkpoint(cmd->get_option("--model")->as<std::string>());
    PruneOutput out = run_prune(cfg, ckpt);

    const std::string out_path = cmd->get_option("--out")->as<std::string>();
    save_checkpoint(out_path, out.pruned);
    const std::string report_path = cmd->get_option("--report")->as<std::string>();
    if (!report_path.empty()) {
        std::ofstream rf(report_path, std::ios::trunc);
        rf << out.report.to_json(!cmd->count("--no-report-timing")) << "\n";
    }
    const std::string tf_path = cmd->get_option("--transforms-out")->as<std::string>();
    if (!tf_path.empty()) save_transforms(tf_path, out.transforms);

    std::cout << "pruned checkpoint written to " << out_path << "\n"
              << "realized sparsity " << out.report.realized_sparsity << " (requested "
              << cfg.sparsity << ")\n"
              << "ppl " << out.report.ppl_before << " -> " << out.report.ppl_after << "\n"
              << "fuse divergence " << out.report.fuse_divergence << "\n";
    return 0;
}

int cmd_eval_ppl(CLI::App& app) {
    auto* cmd = app.get_subcommand("eval-ppl");
    Checkpoint ckpt = load_checkpoint(cmd->get_option("--model")->as<std::string>());
    std::vector<int> corpus = load_corpus(cmd->get_option("--corpus")->as<std::string>());
    const int seq_len = cmd->get_option("--seq-len")->as<int>();
    std::cout << "ppl " << perplexity(ckpt, corpus, seq_len) << "\n";
    return 0;
}

int cmd_fuse_check(CLI::App& app) {
    auto* cmd = app.get_subcommand("fuse-check");
    Checkpoint original = load_checkpoint(cmd->get_option("--original")->as<std::string>());
    Checkpoint pruned = load_checkpoint(cmd->get_option("--pruned")->as<std::string>());
    std::vector<TransformSet> sets =
        load_transforms(cmd->get_option("--transforms")->as<std::string>());
    const int trials = cmd->get_option("--trials")->as<int>();
    const uint64_t seed = cmd->get_option("--seed")->as<uint64_t>();
    const double div = fuse_check(original, pruned, sets, trials, seed);
    std::cout << "max-abs divergence " << div << "\n";
    if (div >= 1e-5) {
        std::cerr << "fuse-check FAILED (threshold 1e-5)\n";
        return 3;
    }
    std::cout << "fuse-check OK\n";
    return 0;
}

int cmd_rank_profile(CLI::App& app) {
    auto* cmd = app.get_subcommand("rank-profile");
    Checkpoint ckpt = load_checkpoint(cmd->get_option("--model")->as<std::string>());
    TokenBatch calib =
        load_calibration(cmd->get_option("--calib")->as<std::string>(),
                         cmd->get_option("--num-samples")->as<int>(),
                         cmd->get_option("--seq-len")->as<int>(),
                         cmd->get_option("--seed")->as<uint64_t>());
    const double tau = cmd->get_option("--tau")->as<double>();
    const std::string mode = cmd->get_option("--mode")->as<std::string>();
    const double sparsity = cmd->get_option("--sparsity")->as<double>();
    std::vector<int> layer_set;
    if (cmd->count("--layers"))
        layer_set = parse_layer_list(cmd->get_option("--layers")->as<std::string>());

    std::vector<RankProfile> profiles;
    profiles.push_back(rank_profile(ckpt, calib, tau, nullptr, "dense"));
    if (mode == "inter") {
        ResidualProbe probe = make_inter_pca_probe(ckpt, calib, sparsity, layer_set);
        profiles.push_back(rank_profile(ckpt, calib, tau, &probe, "inter-probe"));
    } else if (mode == "intra") {
        RunConfig cfg;
        cfg.sparsity = sparsity;
        cfg.calib.seq_len = cmd->get_option("--seq-len")->as<int>();
        std::vector<std::pair<int, int>> targets;
        for (int l = 0; l < ckpt.config.layers; ++l)
            targets.emplace_back(ckpt.config.hidden, ckpt.config.inter);
        for (int l : layer_set) {
            targets[l].first =
                static_cast<int>(std::lround((1.0 - sparsity) * ckpt.config.hidden));
            targets[l].second =
                static_cast<int>(std::lround((1.0 - sparsity) * ckpt.config.inter));
        }
        PruneOutput pruned =
            run_prune_targets(cfg, ckpt, targets, calib, /*compensate=*/false);
        profiles.push_back(rank_profile(pruned.pruned, calib, tau, nullptr, "intra-pruned"));
    } else if (mode != "dense") {
        throw ConfigError("rank-profile: mode must be dense|intra|inter");
    }

    emit_report(profiles, {}, {}, cmd->get_option("--json")->as<std::string>(),
                cmd->get_option("--csv")->as<std::string>());
    for (const auto& p : profiles) {
        std::cout << p.label << ":";
        for (int r : p.ranks) std::cout << " " << r;
        std::cout << "\n";
    }
    return 0;
}

int cmd_baseline(CLI::App& app) {
    auto* cmd = app.get_subcommand("baseline");
    Checkpoint ckpt = load_checkpoint(cmd->get_option("--model")->as<std::string>());
    BaselineSpec spec;
    const std::string kind = cmd->get_option("--kind")->as<std::string>();
    if (kind == "random") spec.kind = BaselineKind::Random;
    else if (kind == "magnitude") spec.kind = BaselineKind::Magnitude;
    else throw ConfigError("baseline: kind must be random|magnitude");
    spec.sparsity = cmd->get_option("--sparsity")->as<double>();
    spec.seed = cmd->get_option("--seed")->as<uint64_t>();

    TokenBatch calib =
        load_calibration(cmd->get_option("--calib")->as<std::string>(),
                         cmd->get_option("--num-samples")->as<int>(),
                         cmd->get_option("--seq-len")->as<int>(), spec.seed);
    PruneOutput out = baseline_prune(ckpt, spec, calib);
    const std::string out_path = cmd->get_option("--out")->as<std::string>();
    save_checkpoint(out_path, out.pruned);
    std::cout << "baseline checkpoint written to " << out_path << " (realized sparsity "
              << out.report.realized_sparsity << ")\n";
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"IntraSlice structured pruning toolkit"};
    app.require_subcommand(1);

    auto* train = app.add_subcommand("train-toy", "train a toy byte-level transformer");
    train->add_option("--corpus", "")->required();
    train->add_option("--out", "")->required();
    train->add_option("--steps", "")->default_val(2000L);
    train->add_option("--lr", "")->default_val(0.05);
    train->add_option("--seed", "")->default_val(uint64_t{0});
    train->add_option("--layers", "")->default_val(4);
    train->add_option("--hidden", "")->default_val(64);
    train->add_option("--heads", "")->default_val(4);
    train->add_option("--kv-groups", "0 = same as heads")->default_val(0);
    train->add_option("--inter", "")->default_val(256);
    train->add_option("--vocab", "")->default_val(256);
    train->add_option("--seq-len", "")->default_val(64);
    train->add_option("--batch", "")->default_val(8);
    train->add_flag("--no-rope", "");

    auto* prune = app.add_subcommand("prune", "IntraSlice pruning run");
    prune->add_option("--model", "")->required();
    prune->add_option("--config", "JSON run config")->default_val(std::string{});
    prune->add_option("--sparsity", "");
    prune->add_option("--lambda-b", "");
    prune->add_option("--seed", "");
    prune->add_flag("--no-repropagate", "");
    prune->add_option("--iterate-ffn", "auto|on|off");
    prune->add_option("--calib", "");
    prune->add_option("--num-samples", "");
    prune->add_option("--seq-len", "");
    prune->add_option("--out", "")->required();
    prune->add_option("--report", "")->default_val(std::string{});
    prune->add_option("--transforms-out", "")->default_val(std::string{});
    prune->add_flag("--no-report-timing", "omit wall times for bit-comparable reports");
    prune->add_flag("--verbose", "");

    auto* eval = app.add_subcommand("eval-ppl", "perplexity over a token stream");
    eval->add_option("--model", "")->required();
    eval->add_option("--corpus", "")->required();
    eval->add_option("--seq-len", "")->default_val(64);

    auto* fc = app.add_subcommand("fuse-check", "fused vs online-transform forward");
    fc->add_option("--original", "")->required();
    fc->add_option("--pruned", "")->required();
    fc->add_option("--transforms", "")->required();
    fc->add_option("--trials", "")->default_val(8);
    fc->add_option("--seed", "")->default_val(uint64_t{0});

    auto* rp = app.add_subcommand("rank-profile", "per-layer energy ranks");
    rp->add_option("--model", "")->required();
    rp->add_option("--calib", "")->required();
    rp->add_option("--num-samples", "")->default_val(8);
    rp->add_option("--seq-len", "")->default_val(64);
    rp->add_option("--seed", "")->default_val(uint64_t{0});
    rp->add_option("--tau", "")->default_val(0.99);
    rp->add_option("--mode", "dense|intra|inter")->default_val(std::string{"dense"});
    rp->add_option("--sparsity", "")->default_val(0.5);
    rp->add_option("--layers", "comma-separated layer indices");
    rp->add_option("--json", "")->default_val(std::string{"rank_profile.json"});
    rp->add_option("--csv", "")->default_val(std::string{"rank_profile.csv"});

    auto* bl = app.add_subcommand("baseline", "random / magnitude deletion baselines");
    bl->add_option("--model", "")->required();
    bl->add_option("--kind", "random|magnitude")->required();
    bl->add_option("--sparsity", "")->default_val(0.3);
    bl->add_option("--seed", "")->default_val(uint64_t{0});
    bl->add_option("--calib", "")->required();
    bl->add_option("--num-samples", "")->default_val(8);
    bl->add_option("--seq-len", "")->default_val(64);
    bl->add_option("--out", "")->required();

    try {
        app.parse(argc, argv);
        if (app.got_subcommand("train-toy")) return cmd_train_toy(app);
        if (app.got_subcommand("prune")) return cmd_prune(app);
        if (app.got_subcommand("eval-ppl")) return cmd_eval_ppl(app);
        if (app.got_subcommand("fuse-check")) return cmd_fuse_check(app);
        if (app.got_subcommand("rank-profile")) return cmd_rank_profile(app);
        if (app.got_subcommand("baseline")) return cmd_baseline(app);
    } catch (const CLI::ParseError& e) {
        return app.exit(e) == 0 ? 0 : 2;
    } catch (const ConfigError& e) {
        std::cerr << "config error: " << e.what() << "\n";
        return 2;
    } catch (const DimensionError& e) {
        std::cerr << "config error: " << e.what() << "\n";
        return 2;
    } catch (const IoError& e) {
        std::cerr << "io error: " << e.what() << "\n";
        return 2;
    } catch (const NumericalError& e) {
        std::cerr << "numerical failure: " << e.what() << "\n";
        return 3;
    }
    return 0;
}
