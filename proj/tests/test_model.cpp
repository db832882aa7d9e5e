#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include "islice/model.hpp"
#include "test_util.hpp"

#include <cmath>
#include <random>

using namespace islice;
using islice::test::random_tokens;

namespace {

ModelConfig tiny_config(bool rope = true, int layers = 2, int hidden = 8, int heads = 2,
                        int kv_groups = 2, int inter = 16, int vocab = 11) {
    ModelConfig mc;
    mc.layers = layers;
    mc.hidden = hidden;
    mc.heads = heads;
    mc.kv_groups = kv_groups;
    mc.head_dim = hidden / heads;
    mc.inter = inter;
    mc.vocab = vocab;
    mc.rope_enabled = rope;
    return mc;
}

double masked_loss(const Checkpoint& ckpt, const TokenBatch& batch,
                   const std::vector<Vec>& mh, const std::vector<Vec>& mf) {
    ForwardOptions opts;
    opts.mask_h = &mh;
    opts.mask_f = &mf;
    return mean_cross_entropy(forward(ckpt, batch, opts).logits, batch);
}

// Fully scalar re-evaluation of a 1-layer, 1-head, no-RoPE model. Kept
// deliberately naive: explicit loops, no shared code with the library path.
std::vector<std::vector<double>> naive_forward(const Checkpoint& ckpt,
                                               const std::vector<int>& toks) {
    const ModelConfig& c = ckpt.config;
    const int T = static_cast<int>(toks.size());
    const int D = c.hidden;
    auto get = [&](const std::string& n) { return ckpt.tensor(n); };
    auto rms = [&](std::vector<double>& row, const Mat& w) {
        double ss = 0;
        for (int j = 0; j < D; ++j) ss += row[j] * row[j];
        const double r = std::sqrt(ss / D + 1e-6);
        for (int j = 0; j < D; ++j) row[j] = row[j] * w(0, j) / r;
    };

    std::vector<std::vector<double>> h(T, std::vector<double>(D));
    for (int t = 0; t < T; ++t)
        for (int j = 0; j < D; ++j) h[t][j] = get("tok_embed")(toks[t], j);

    // attention
    auto a = h;
    for (int t = 0; t < T; ++t) rms(a[t], get(tname(0, "attn_norm")));
    const int hd = c.head_dim;
    std::vector<std::vector<double>> q(T, std::vector<double>(hd, 0));
    auto k = q, v = q;
    for (int t = 0; t < T; ++t)
        for (int j = 0; j < hd; ++j)
            for (int i = 0; i < D; ++i) {
                q[t][j] += a[t][i] * get(tname(0, "wq"))(i, j);
                k[t][j] += a[t][i] * get(tname(0, "wk"))(i, j);
                v[t][j] += a[t][i] * get(tname(0, "wv"))(i, j);
            }
    std::vector<std::vector<double>> o(T, std::vector<double>(hd, 0));
    for (int t = 0; t < T; ++t) {
        std::vector<double> s(t + 1, 0);
        for (int t2 = 0; t2 <= t; ++t2) {
            for (int j = 0; j < hd; ++j) s[t2] += q[t][j] * k[t2][j];
            s[t2] /= std::sqrt(static_cast<double>(hd));
        }
        double m = s[0];
        for (double x : s) m = std::max(m, x);
        double z = 0;
        for (double& x : s) {
            x = std::exp(x - m);
            z += x;
        }
        for (int t2 = 0; t2 <= t; ++t2)
            for (int j = 0; j < hd; ++j) o[t][j] += (s[t2] / z) * v[t2][j];
    }
    for (int t = 0; t < T; ++t)
        for (int j = 0; j < D; ++j)
            for (int i = 0; i < hd; ++i) h[t][j] += o[t][i] * get(tname(0, "wo"))(i, j);

    // ffn
    auto b = h;
    for (int t = 0; t < T; ++t) rms(b[t], get(tname(0, "ffn_norm")));
    for (int t = 0; t < T; ++t) {
        std::vector<double> acc(D, 0);
        for (int j = 0; j < c.inter; ++j) {
            double u = 0, g = 0;
            for (int i = 0; i < D; ++i) {
                u += b[t][i] * get(tname(0, "wu"))(i, j);
                g += b[t][i] * get(tname(0, "wg"))(i, j);
            }
            const double xd = u * (g / (1.0 + std::exp(-g)));
            for (int i = 0; i < D; ++i) acc[i] += xd * get(tname(0, "wd"))(j, i);
        }
        for (int i = 0; i < D; ++i) h[t][i] += acc[i];
    }

    std::vector<std::vector<double>> logits(T, std::vector<double>(c.vocab, 0));
    for (int t = 0; t < T; ++t) {
        rms(h[t], get("final_norm"));
        for (int vcb = 0; vcb < c.vocab; ++vcb)
            for (int i = 0; i < D; ++i)
                logits[t][vcb] += h[t][i] * get("lm_head")(i, vcb);
    }
    return logits;
}

}  // namespace

TEST_CASE("all-zero weights give a uniform softmax") {
    ModelConfig mc = tiny_config();
    Checkpoint ckpt = init_checkpoint(mc, 0);
    for (auto& [name, t] : ckpt.tensors)
        if (name.find("norm") == std::string::npos) t.setZero();
    ForwardResult r = forward(ckpt, {{1, 2, 3}});
    CHECK((r.logits[0].maxCoeff() - r.logits[0].minCoeff()) == doctest::Approx(0.0));
}

TEST_CASE("forward matches a naive scalar evaluation") {
    ModelConfig mc = tiny_config(/*rope=*/false, /*layers=*/1, /*hidden=*/2, /*heads=*/1,
                                 /*kv_groups=*/1, /*inter=*/3, /*vocab=*/5);
    Checkpoint ckpt = init_checkpoint(mc, 42);
    std::vector<int> toks = {0, 3, 1, 4, 2};
    ForwardResult r = forward(ckpt, {toks});
    auto naive = naive_forward(ckpt, toks);
    for (size_t t = 0; t < toks.size(); ++t)
        for (int v = 0; v < mc.vocab; ++v)
            CHECK(r.logits[0](t, v) == doctest::Approx(naive[t][v]).epsilon(1e-10));
}

TEST_CASE("batch order permutes logits identically") {
    std::mt19937_64 rng(1);
    ModelConfig mc = tiny_config();
    Checkpoint ckpt = init_checkpoint(mc, 3);
    TokenBatch batch = random_tokens(rng, 3, 7, mc.vocab);
    ForwardResult fwd = forward(ckpt, batch);
    TokenBatch rev(batch.rbegin(), batch.rend());
    ForwardResult bwd = forward(ckpt, rev);
    for (int s = 0; s < 3; ++s)
        CHECK((fwd.logits[s] - bwd.logits[2 - s]).cwiseAbs().maxCoeff() == 0.0);
}

TEST_CASE("token id out of range is rejected") {
    Checkpoint ckpt = init_checkpoint(tiny_config(), 0);
    CHECK_THROWS_AS(forward(ckpt, {{0, 99}}), DimensionError);
}

TEST_CASE("rope at position zero is the identity") {
    std::mt19937_64 rng(2);
    Mat x = islice::test::random_matrix(rng, 3, 4);
    std::vector<bool> full(2, true);
    Mat y = apply_rope(x, {0, 0, 0}, 10000.0, full);
    CHECK((y - x).cwiseAbs().maxCoeff() == 0.0);
}

TEST_CASE("rope matches the closed-form rotation") {
    Mat x(1, 4);
    x << 1.0, 2.0, 3.0, 4.0;  // pairs (0,2) and (1,3)
    std::vector<bool> full(2, true);
    Mat y = apply_rope(x, {1}, 10000.0, full);
    const double a0 = 1.0;                      // pair 0 frequency
    const double a1 = std::pow(10000.0, -0.5);  // pair 1 frequency
    CHECK(y(0, 0) == doctest::Approx(1.0 * std::cos(a0) - 3.0 * std::sin(a0)));
    CHECK(y(0, 2) == doctest::Approx(1.0 * std::sin(a0) + 3.0 * std::cos(a0)));
    CHECK(y(0, 1) == doctest::Approx(2.0 * std::cos(a1) - 4.0 * std::sin(a1)));
    CHECK(y(0, 3) == doctest::Approx(2.0 * std::sin(a1) + 4.0 * std::cos(a1)));
}

TEST_CASE("rope selection keeps the surviving pair's rotation") {
    Mat x(2, 4);
    x << 1, 2, 3, 4, 5, 6, 7, 8;
    std::vector<bool> keep_first = {true, false};  // drop pair (1,3)
    Mat y = apply_rope(x, {3, 7}, 10000.0, keep_first);
    CHECK(y.cols() == 2);
    std::vector<bool> full(2, true);
    Mat yf = apply_rope(x, {3, 7}, 10000.0, full);
    CHECK((y.col(0) - yf.col(0)).cwiseAbs().maxCoeff() == 0.0);
    CHECK((y.col(1) - yf.col(2)).cwiseAbs().maxCoeff() == 0.0);
}

TEST_CASE("rope selection commutes with rotation") {
    std::mt19937_64 rng(9);
    Mat x = islice::test::random_matrix(rng, 5, 8);
    std::vector<bool> mask = {true, false, true, false};
    std::vector<long> pos = {0, 1, 2, 3, 4};
    Mat select_then_rotate = apply_rope(x, pos, 10000.0, mask);
    std::vector<bool> full(4, true);
    Mat rotated = apply_rope(x, pos, 10000.0, full);
    Mat sel(5, 4);
    sel.col(0) = rotated.col(0);
    sel.col(1) = rotated.col(2);
    sel.col(2) = rotated.col(4);
    sel.col(3) = rotated.col(6);
    CHECK((select_then_rotate - sel).cwiseAbs().maxCoeff() < 1e-15);
}

TEST_CASE("rope rejects odd channel counts") {
    Mat x(1, 3);
    x << 1, 2, 3;
    CHECK_THROWS_AS(apply_rope(x, {0}, 10000.0, {true}), DimensionError);
}

TEST_CASE("mask gradients match central finite differences") {
    std::mt19937_64 rng(4);
    ModelConfig mc = tiny_config();  // 2 layers, D=8
    Checkpoint ckpt = init_checkpoint(mc, 17);
    TokenBatch batch = random_tokens(rng, 2, 6, mc.vocab);

    LossResult lr = loss_and_mask_gradients(ckpt, batch);

    std::vector<Vec> mh(mc.layers, Vec::Ones(mc.hidden));
    std::vector<Vec> mf(mc.layers, Vec::Ones(mc.inter));
    CHECK(masked_loss(ckpt, batch, mh, mf) == doctest::Approx(lr.loss).epsilon(1e-12));

    const double eps = 1e-4;
    for (int l = 0; l < mc.layers; ++l) {
        for (int i = 0; i < mc.hidden; ++i) {
            mh[l][i] = 1.0 + eps;
            const double up = masked_loss(ckpt, batch, mh, mf);
            mh[l][i] = 1.0 - eps;
            const double dn = masked_loss(ckpt, batch, mh, mf);
            mh[l][i] = 1.0;
            const double fd = (up - dn) / (2 * eps);
            const double got = lr.mask_grads.g_h[l][i];
            if (std::abs(fd) > 1e-8)
                CHECK(std::abs(got - fd) / std::abs(fd) < 1e-4);
            else
                CHECK(std::abs(got - fd) < 1e-8);
        }
        for (int i = 0; i < mc.inter; ++i) {
            mf[l][i] = 1.0 + eps;
            const double up = masked_loss(ckpt, batch, mh, mf);
            mf[l][i] = 1.0 - eps;
            const double dn = masked_loss(ckpt, batch, mh, mf);
            mf[l][i] = 1.0;
            const double fd = (up - dn) / (2 * eps);
            const double got = lr.mask_grads.g_f[l][i];
            if (std::abs(fd) > 1e-8)
                CHECK(std::abs(got - fd) / std::abs(fd) < 1e-4);
            else
                CHECK(std::abs(got - fd) < 1e-8);
        }
    }
}

TEST_CASE("dead output channel has zero mask gradient") {
    std::mt19937_64 rng(5);
    ModelConfig mc = tiny_config();
    Checkpoint ckpt = init_checkpoint(mc, 23);
    ckpt.tensor(tname(0, "wo")).row(3).setZero();
    TokenBatch batch = random_tokens(rng, 2, 5, mc.vocab);
    LossResult lr = loss_and_mask_gradients(ckpt, batch);
    CHECK(lr.mask_grads.g_h[0][3] == 0.0);
}

TEST_CASE("mask gradients are prediction-weighted means over sub-batches") {
    std::mt19937_64 rng(6);
    ModelConfig mc = tiny_config();
    Checkpoint ckpt = init_checkpoint(mc, 29);
    TokenBatch a = random_tokens(rng, 1, 6, mc.vocab);
    TokenBatch b = random_tokens(rng, 1, 9, mc.vocab);
    TokenBatch both = a;
    both.push_back(b[0]);

    LossResult la = loss_and_mask_gradients(ckpt, a);
    LossResult lb = loss_and_mask_gradients(ckpt, b);
    LossResult lab = loss_and_mask_gradients(ckpt, both);
    const double na = 5, nb = 8;
    for (int l = 0; l < mc.layers; ++l) {
        Vec expect = (na * la.mask_grads.g_h[l] + nb * lb.mask_grads.g_h[l]) / (na + nb);
        CHECK((lab.mask_grads.g_h[l] - expect).cwiseAbs().maxCoeff() < 1e-12);
    }
    // duplicating the batch leaves the gradient of the mean loss unchanged
    TokenBatch dup = both;
    dup.insert(dup.end(), both.begin(), both.end());
    LossResult ldup = loss_and_mask_gradients(ckpt, dup);
    for (int l = 0; l < mc.layers; ++l)
        CHECK((ldup.mask_grads.g_f[l] - lab.mask_grads.g_f[l]).cwiseAbs().maxCoeff() < 1e-12);
}

TEST_CASE("uniform-logit model has perplexity equal to vocab size") {
    ModelConfig mc = tiny_config();
    Checkpoint ckpt = init_checkpoint(mc, 0);
    for (auto& [name, t] : ckpt.tensors)
        if (name.find("norm") == std::string::npos) t.setZero();
    std::vector<int> corpus(64, 1);
    CHECK(perplexity(ckpt, corpus, 8) == doctest::Approx(static_cast<double>(mc.vocab)));
}

TEST_CASE("perplexity equals the window-mean oracle in any order") {
    std::mt19937_64 rng(7);
    ModelConfig mc = tiny_config();
    Checkpoint ckpt = init_checkpoint(mc, 31);
    std::vector<int> corpus(41);
    for (auto& t : corpus) t = static_cast<int>(rng() % mc.vocab);
    const int s = 8;
    double total = 0;
    long count = 0;
    std::vector<size_t> starts;
    for (size_t st = 0; st + s < corpus.size(); st += s) starts.push_back(st);
    std::reverse(starts.begin(), starts.end());
    for (size_t st : starts) {
        std::vector<int> w(corpus.begin() + st, corpus.begin() + st + s + 1);
        TokenBatch batch = {w};
        total += mean_cross_entropy(forward(ckpt, batch).logits, batch) * s;
        count += s;
    }
    CHECK(perplexity(ckpt, corpus, s) ==
          doctest::Approx(std::exp(total / count)).epsilon(1e-12));
    CHECK_THROWS_AS(perplexity(ckpt, std::vector<int>(5, 0), 8), DimensionError);
}

TEST_CASE("causality: future edits leave past logits unchanged") {
    std::mt19937_64 rng(8);
    ModelConfig mc = tiny_config();
    Checkpoint ckpt = init_checkpoint(mc, 37);
    std::vector<int> toks = random_tokens(rng, 1, 9, mc.vocab)[0];
    ForwardResult base = forward(ckpt, {toks});
    std::vector<int> edited = toks;
    edited[7] = (edited[7] + 1) % mc.vocab;
    edited[8] = (edited[8] + 3) % mc.vocab;
    ForwardResult mod = forward(ckpt, {edited});
    CHECK((base.logits[0].topRows(7) - mod.logits[0].topRows(7)).cwiseAbs().maxCoeff() ==
          0.0);
}

TEST_CASE("rope logits are invariant under a global position shift") {
    std::mt19937_64 rng(9);
    ModelConfig mc = tiny_config(/*rope=*/true, /*layers=*/1);
    Checkpoint ckpt = init_checkpoint(mc, 41);
    TokenBatch batch = random_tokens(rng, 1, 8, mc.vocab);
    ForwardResult base = forward(ckpt, batch);
    ForwardOptions opts;
    opts.position_offset = 11;
    ForwardResult shifted = forward(ckpt, batch, opts);
    CHECK((base.logits[0] - shifted.logits[0]).cwiseAbs().maxCoeff() < 1e-9);
}

TEST_CASE("identity online transforms reproduce the plain forward") {
    std::mt19937_64 rng(10);
    ModelConfig mc = tiny_config();
    Checkpoint ckpt = init_checkpoint(mc, 43);
    std::vector<OnlineTransforms> online(mc.layers);
    for (int l = 0; l < mc.layers; ++l) {
        OnlineMhaTransform mt;
        mt.p = mc.head_dim;
        for (int h = 0; h < mc.heads; ++h) {
            mt.kept_heads.push_back(h);
            mt.q1.push_back(Mat::Identity(mc.head_dim, mc.head_dim));
            mt.q2.push_back(Mat::Identity(mc.head_dim, mc.head_dim));
            mt.pair_mask.push_back(std::vector<bool>(mc.head_dim / 2, true));
        }
        mt.q2_star = Mat::Identity(mc.hidden, mc.hidden);
        online[l].mha = mt;
        online[l].ffn = OnlineFfnTransform{Mat::Identity(mc.inter, mc.inter),
                                           Mat::Identity(mc.inter, mc.inter)};
    }
    TokenBatch batch = random_tokens(rng, 2, 6, mc.vocab);
    ForwardResult plain = forward(ckpt, batch);
    ForwardOptions opts;
    opts.online = &online;
    ForwardResult wrapped = forward(ckpt, batch, opts);
    for (int s = 0; s < 2; ++s)
        CHECK((plain.logits[s] - wrapped.logits[s]).cwiseAbs().maxCoeff() < 1e-12);
}

TEST_CASE("capture shapes and row caps") {
    std::mt19937_64 rng(11);
    ModelConfig mc = tiny_config();
    Checkpoint ckpt = init_checkpoint(mc, 47);
    TokenBatch batch = random_tokens(rng, 3, 5, mc.vocab);
    ForwardOptions opts;
    opts.capture = true;
    opts.row_cap = 7;
    ForwardResult r = forward(ckpt, batch, opts);
    const LayerTrace& lt = r.trace.layers[0];
    CHECK(lt.mha_input.gram.samples == 15);
    CHECK(lt.mha_input.rows.rows() == 7);
    CHECK_FALSE(lt.mha_input.sample_complete());
    CHECK(lt.down_input.gram.dim == mc.inter);
    CHECK(lt.o_proj_input.gram.dim == mc.hidden);
    CHECK(r.trace.rows == 15);
}

TEST_CASE("training is deterministic and a no-op at zero steps") {
    std::mt19937_64 rng(12);
    ModelConfig mc = tiny_config(true, 1, 8, 2, 2, 16, 17);
    std::vector<int> corpus(400);
    for (auto& t : corpus) t = static_cast<int>(rng() % mc.vocab);

    TrainOptions topts;
    topts.steps = 0;
    topts.seq_len = 16;
    Checkpoint zero = train_toy(mc, corpus, topts);
    Checkpoint init = init_checkpoint(mc, topts.seed);
    for (const auto& [name, t] : init.tensors)
        CHECK((zero.tensor(name) - t).cwiseAbs().maxCoeff() == 0.0);

    topts.steps = 30;
    Checkpoint a = train_toy(mc, corpus, topts);
    Checkpoint b = train_toy(mc, corpus, topts);
    for (const auto& [name, t] : a.tensors)
        CHECK((b.tensor(name) - t).cwiseAbs().maxCoeff() == 0.0);
}

TEST_CASE("short training run reduces held-out perplexity") {
    std::vector<int> corpus;
    const std::string phrase = "the quick brown fox jumps over the lazy dog. ";
    while (corpus.size() < 6000)
        for (char c : phrase) corpus.push_back(static_cast<unsigned char>(c));
    std::vector<int> train(corpus.begin(), corpus.begin() + 4500);
    std::vector<int> heldout(corpus.begin() + 4500, corpus.end());

    ModelConfig mc = tiny_config(true, 2, 32, 4, 4, 64, 256);
    TrainOptions topts;
    topts.steps = 250;
    topts.seq_len = 32;
    topts.batch = 4;
    topts.lr = 0.1;
    Checkpoint init = init_checkpoint(mc, topts.seed);
    Checkpoint trained = train_toy(mc, train, topts);
    const double ppl_init = perplexity(init, heldout, 32);
    const double ppl_trained = perplexity(trained, heldout, 32);
    CHECK(ppl_trained < ppl_init);
}
