#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include "islice/pipeline.hpp"
#include "test_util.hpp"

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <random>

using namespace islice;
using islice::test::random_tokens;

namespace {

namespace fs = std::filesystem;

struct TempDir {
    fs::path path;
    TempDir() {
        path = fs::temp_directory_path() /
               ("islice_test_" + std::to_string(std::random_device{}()));
        fs::create_directories(path);
    }
    ~TempDir() { fs::remove_all(path); }
    std::string file(const std::string& name) const { return (path / name).string(); }
};

ModelConfig pipe_config(bool rope = true, int kv = 4) {
    ModelConfig mc;
    mc.layers = 2;
    mc.hidden = 16;
    mc.heads = 4;
    mc.kv_groups = kv;
    mc.head_dim = 4;
    mc.inter = 32;
    mc.vocab = 256;
    mc.rope_enabled = rope;
    return mc;
}

std::string write_text_corpus(const TempDir& dir, size_t bytes) {
    const std::string phrase = "a small stream of words keeps flowing over stones. ";
    std::string text;
    while (text.size() < bytes) text += phrase;
    text.resize(bytes);
    const std::string p = dir.file("corpus.txt");
    std::ofstream f(p, std::ios::binary);
    f << text;
    return p;
}

bool checkpoints_identical(const Checkpoint& a, const Checkpoint& b) {
    if (a.tensors.size() != b.tensors.size()) return false;
    for (const auto& [name, t] : a.tensors) {
        if (!b.has(name)) return false;
        const Mat& u = b.tensor(name);
        if (u.rows() != t.rows() || u.cols() != t.cols()) return false;
        if ((u - t).cwiseAbs().maxCoeff() != 0.0) return false;
    }
    return true;
}

}  // namespace

TEST_CASE("run config json round trip and validation") {
    RunConfig cfg = run_config_from_json(R"({
        "sparsity": 0.25, "lambda_b": 0.9,
        "calib": {"path": "x.txt", "num_samples": 16, "seq_len": 32},
        "seed": 7, "repropagate": false, "iterate_ffn": "on",
        "ridge_lambda": 0.5, "per_layer_cap": 0.7, "min_head_dim_ratio": 0.5,
        "slice": {"width": 8, "sweeps": 2, "steps_per_slice": 4}
    })");
    CHECK(cfg.sparsity == 0.25);
    CHECK(cfg.lambda_b == 0.9);
    CHECK(cfg.calib.num_samples == 16);
    CHECK_FALSE(cfg.repropagate);
    CHECK(cfg.iterate_ffn == IterateMode::On);
    REQUIRE(cfg.ridge_lambda.has_value());
    CHECK(*cfg.ridge_lambda == 0.5);
    CHECK(cfg.slice.slice_width == 8);

    RunConfig parsed = run_config_from_json(run_config_to_json(cfg));
    CHECK(parsed.sparsity == cfg.sparsity);
    CHECK(parsed.slice.sweeps == cfg.slice.sweeps);

    RunConfig aut = run_config_from_json(R"({"ridge_lambda": "auto"})");
    CHECK_FALSE(aut.ridge_lambda.has_value());

    CHECK_THROWS_AS(run_config_from_json("not json"), ConfigError);
    CHECK_THROWS_AS(run_config_from_json(R"({"sparsity": 1.5})"), ConfigError);
    CHECK_THROWS_AS(run_config_from_json(R"({"iterate_ffn": "maybe"})"), ConfigError);
}

TEST_CASE("corpus loading handles text and the binary token format") {
    TempDir dir;
    const std::string text_path = write_text_corpus(dir, 100);
    std::vector<int> text_tokens = load_corpus(text_path);
    CHECK(text_tokens.size() == 100);
    CHECK(text_tokens[0] == 'a');

    const std::string bin_path = dir.file("tokens.bin");
    {
        std::ofstream f(bin_path, std::ios::binary);
        f.write("ISLTOK01", 8);
        const uint64_t count = 3;
        f.write(reinterpret_cast<const char*>(&count), 8);
        for (uint32_t id : {300u, 5u, 77u})
            f.write(reinterpret_cast<const char*>(&id), 4);
    }
    std::vector<int> bin_tokens = load_corpus(bin_path);
    CHECK(bin_tokens == std::vector<int>{300, 5, 77});

    CHECK_THROWS_AS(load_corpus(dir.file("missing.txt")), IoError);
}

TEST_CASE("calibration sampling is deterministic with a boundary fallback") {
    TempDir dir;
    const std::string path = write_text_corpus(dir, 4000);
    TokenBatch a = load_calibration(path, 8, 32, 5);
    TokenBatch b = load_calibration(path, 8, 32, 5);
    CHECK(a == b);
    CHECK(a.size() == 8);
    CHECK(a[0].size() == 33);
    TokenBatch c = load_calibration(path, 8, 32, 6);
    CHECK(a != c);

    const std::string tiny = write_text_corpus(dir, 100);
    TokenBatch win = load_calibration(tiny, 8, 64, 0);
    CHECK(win.size() == 1);  // only one non-overlapping window fits
    CHECK_THROWS_AS(load_calibration(tiny, 1, 512, 0), IoError);
}

TEST_CASE("checkpoint container round trip is bit exact") {
    TempDir dir;
    ModelConfig mc = pipe_config();
    Checkpoint ckpt = init_checkpoint(mc, 11);
    const std::string p1 = dir.file("a.islice");
    const std::string p2 = dir.file("b.islice");
    save_checkpoint(p1, ckpt);
    Checkpoint loaded = load_checkpoint(p1);  // f32 storage quantizes once
    save_checkpoint(p2, loaded);
    Checkpoint again = load_checkpoint(p2);
    CHECK(checkpoints_identical(loaded, again));
    CHECK(loaded.config.hidden == mc.hidden);
    CHECK(loaded.layout[0].per_head_dim == mc.head_dim);

    // stored files of the same checkpoint are byte-identical
    std::ifstream f1(p1, std::ios::binary), f2(p2, std::ios::binary);
    std::string c1((std::istreambuf_iterator<char>(f1)), std::istreambuf_iterator<char>());
    std::string c2((std::istreambuf_iterator<char>(f2)), std::istreambuf_iterator<char>());
    CHECK(c1 == c2);
}

TEST_CASE("checkpoint loader rejects bad magic and truncation") {
    TempDir dir;
    const std::string path = dir.file("bad.islice");
    {
        std::ofstream f(path, std::ios::binary);
        f << "NOTMAGIC" << std::string(64, '\0');
    }
    CHECK_THROWS_AS(load_checkpoint(path), IoError);

    ModelConfig mc = pipe_config();
    Checkpoint ckpt = init_checkpoint(mc, 1);
    const std::string good = dir.file("good.islice");
    save_checkpoint(good, ckpt);
    const auto size = std::filesystem::file_size(good);
    std::filesystem::resize_file(good, size - 128);
    CHECK_THROWS_AS(load_checkpoint(good), IoError);
}

TEST_CASE("lossless pipeline at full targets preserves the model") {
    TempDir dir;
    const std::string corpus = write_text_corpus(dir, 6000);
    ModelConfig mc = pipe_config();
    Checkpoint ckpt = init_checkpoint(mc, 21);
    TokenBatch calib = load_calibration(corpus, 4, 24, 0);

    RunConfig cfg;
    cfg.calib.seq_len = 24;
    std::vector<std::pair<int, int>> targets(mc.layers, {mc.hidden, mc.inter});
    PruneOutput out = run_prune_targets(cfg, ckpt, targets, calib);
    out.pruned.validate();

    std::mt19937_64 rng(3);
    TokenBatch batch = random_tokens(rng, 2, 16, mc.vocab);
    ForwardResult a = forward(ckpt, batch);
    ForwardResult b = forward(out.pruned, batch);
    for (int s = 0; s < 2; ++s)
        CHECK((a.logits[s] - b.logits[s]).cwiseAbs().maxCoeff() < 1e-5);
    CHECK(out.report.fuse_divergence < 1e-5);

    std::vector<int> held = load_corpus(corpus);
    const double ppl_a = perplexity(ckpt, held, 24);
    const double ppl_b = perplexity(out.pruned, held, 24);
    CHECK(std::abs(ppl_a - ppl_b) <= 1e-6 * ppl_a);
}

TEST_CASE("run_prune hits the requested sparsity and is deterministic") {
    TempDir dir;
    const std::string corpus = write_text_corpus(dir, 8000);
    ModelConfig mc = pipe_config();
    Checkpoint ckpt = init_checkpoint(mc, 33);

    RunConfig cfg;
    cfg.sparsity = 0.3;
    cfg.lambda_b = 1.0;
    cfg.calib.path = corpus;
    cfg.calib.num_samples = 6;
    cfg.calib.seq_len = 32;
    cfg.seed = 9;

    PruneOutput a = run_prune(cfg, ckpt);
    a.pruned.validate();
    CHECK(a.report.realized_sparsity >= 0.297);
    CHECK(a.report.realized_sparsity <= 0.303);
    CHECK(a.report.fuse_divergence < 1e-5);
    CHECK(a.report.ppl_before > 0.0);
    CHECK(a.report.ppl_after > 0.0);

    PruneOutput b = run_prune(cfg, ckpt);
    CHECK(checkpoints_identical(a.pruned, b.pruned));
    CHECK(a.report.to_json(false) == b.report.to_json(false));
}

TEST_CASE("no-repropagate path still fuses exactly") {
    TempDir dir;
    const std::string corpus = write_text_corpus(dir, 6000);
    ModelConfig mc = pipe_config(/*rope=*/true, /*kv=*/2);  // GQA
    Checkpoint ckpt = init_checkpoint(mc, 5);

    RunConfig cfg;
    cfg.sparsity = 0.25;
    cfg.calib.path = corpus;
    cfg.calib.num_samples = 4;
    cfg.calib.seq_len = 24;
    cfg.repropagate = false;
    PruneOutput out = run_prune(cfg, ckpt);
    out.pruned.validate();
    CHECK(out.report.fuse_divergence < 1e-5);

    // group-shared q1/q2 blocks under GQA
    for (const auto& ts : out.transforms) {
        const int gs = mc.group_size();
        for (size_t i = 0; i + 1 < ts.plan.kept.size(); ++i)
            for (size_t j = i + 1; j < ts.plan.kept.size(); ++j)
                if (ts.plan.kept[i] / gs == ts.plan.kept[j] / gs) {
                    CHECK((ts.mha.q1[i] - ts.mha.q1[j]).cwiseAbs().maxCoeff() == 0.0);
                    CHECK((ts.mha.q2.blocks[i].m - ts.mha.q2.blocks[j].m)
                              .cwiseAbs()
                              .maxCoeff() == 0.0);
                }
    }
}

TEST_CASE("fuse_check flags corrupted transforms") {
    TempDir dir;
    const std::string corpus = write_text_corpus(dir, 6000);
    ModelConfig mc = pipe_config();
    Checkpoint ckpt = init_checkpoint(mc, 13);
    RunConfig cfg;
    cfg.sparsity = 0.25;
    cfg.calib.path = corpus;
    cfg.calib.num_samples = 4;
    cfg.calib.seq_len = 24;
    PruneOutput out = run_prune(cfg, ckpt);
    CHECK(fuse_check(ckpt, out.pruned, out.transforms, 4, 1) < 1e-5);

    std::vector<TransformSet> corrupted = out.transforms;
    corrupted[0].ffn.qr.array() += 1e-2;
    CHECK(fuse_check(ckpt, out.pruned, corrupted, 4, 1) > 1e-3);

    std::vector<TransformSet> missing(out.transforms.begin(), out.transforms.end() - 1);
    CHECK_THROWS_AS(fuse_check(ckpt, out.pruned, missing, 2, 1), ConfigError);
}

TEST_CASE("transforms log round trips through json") {
    TempDir dir;
    const std::string corpus = write_text_corpus(dir, 6000);
    ModelConfig mc = pipe_config();
    Checkpoint ckpt = init_checkpoint(mc, 17);
    RunConfig cfg;
    cfg.sparsity = 0.2;
    cfg.calib.path = corpus;
    cfg.calib.num_samples = 4;
    cfg.calib.seq_len = 24;
    PruneOutput out = run_prune(cfg, ckpt);

    const std::string log = dir.file("transforms.json");
    save_transforms(log, out.transforms);
    std::vector<TransformSet> loaded = load_transforms(log);
    CHECK(fuse_check(ckpt, out.pruned, loaded, 3, 2) < 1e-5);
    CHECK_THROWS_AS(load_transforms(dir.file("absent.json")), IoError);
}

TEST_CASE("prune report json carries the ledgered quantities") {
    TempDir dir;
    const std::string corpus = write_text_corpus(dir, 6000);
    ModelConfig mc = pipe_config();
    Checkpoint ckpt = init_checkpoint(mc, 19);
    RunConfig cfg;
    cfg.sparsity = 0.3;
    cfg.calib.path = corpus;
    cfg.calib.num_samples = 4;
    cfg.calib.seq_len = 24;
    PruneOutput out = run_prune(cfg, ckpt);

    const std::string j = out.report.to_json();
    CHECK(j.find("realized_sparsity") != std::string::npos);
    CHECK(j.find("ratio_plan") != std::string::npos);
    CHECK(j.find("total_seconds") != std::string::npos);
    CHECK(out.report.to_json(false).find("total_seconds") == std::string::npos);

    // parameter totals equal direct tensor-size sums
    long total = 0;
    for (const auto& [name, t] : out.pruned.tensors) total += t.size();
    CHECK(out.report.params_after == total);
}
