#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include "islice/ffnprune.hpp"
#include "test_util.hpp"

#include <cmath>
#include <random>

using namespace islice;
using islice::test::random_matrix;
using islice::test::random_tokens;

namespace {

Mat silu_of(const Mat& z) {
    return z.unaryExpr([](double v) { return v / (1.0 + std::exp(-v)); });
}

struct FfnData {
    Mat u, g, xd, gram;
};

FfnData random_ffn_data(std::mt19937_64& rng, int rows, int d_inter) {
    FfnData d;
    d.u = random_matrix(rng, rows, d_inter);
    d.g = random_matrix(rng, rows, d_inter);
    d.xd = d.u.cwiseProduct(silu_of(d.g));
    d.gram = d.xd.transpose() * d.xd;
    return d;
}

}  // namespace

TEST_CASE("qc selection picks top channels with index tie break") {
    Vec imp(3);
    imp << 4, 9, 1;
    Mat qc = init_qc_select(imp, 2);
    CHECK(qc(1, 0) == 1.0);  // channel 1 first (importance 9)
    CHECK(qc(0, 1) == 1.0);  // then channel 0
    CHECK(qc.sum() == doctest::Approx(2.0));
    CHECK(is_selection_matrix(qc));

    Vec tied = Vec::Ones(4);
    Mat qt = init_qc_select(tied, 2);
    CHECK(qt(0, 0) == 1.0);
    CHECK(qt(1, 1) == 1.0);

    Vec imp5(3);
    imp5 << 1, 5, 3;
    Mat full = init_qc_select(imp5, 3);
    CHECK(is_selection_matrix(full));
    CHECK((full * full.transpose() - Mat::Identity(3, 3)).cwiseAbs().maxCoeff() == 0.0);
    CHECK_THROWS_AS(init_qc_select(imp5, 0), DimensionError);
    CHECK_THROWS_AS(init_qc_select(imp5, 4), DimensionError);
}

TEST_CASE("selection shortcut equals the nonlinear evaluation") {
    std::mt19937_64 rng(3);
    FfnData d = random_ffn_data(rng, 20, 6);
    Vec imp = ffn_channel_importance(d.gram, random_matrix(rng, 6, 4));
    Mat qc = init_qc_select(imp, 3);
    Mat shortcut = compressed_intermediate(d.u, d.g, d.xd, qc);
    Mat direct = (d.u * qc).cwiseProduct(silu_of(d.g * qc));
    CHECK((shortcut - direct).cwiseAbs().maxCoeff() < 1e-12);
}

TEST_CASE("qr is the identity for identity qc at full width") {
    std::mt19937_64 rng(5);
    FfnData d = random_ffn_data(rng, 30, 5);
    Mat qc = Mat::Identity(5, 5);
    Mat qr = solve_qr(qc, d.u, d.g, d.xd, 0.0);
    CHECK((qr - Mat::Identity(5, 5)).cwiseAbs().maxCoeff() < 1e-8);
}

TEST_CASE("duplicated channels reconstruct through qr") {
    std::mt19937_64 rng(7);
    FfnData d = random_ffn_data(rng, 40, 4);
    d.xd.col(2) = d.xd.col(0);  // redundant channel
    Mat qc = Mat::Zero(4, 3);
    qc(0, 0) = 1.0;
    qc(1, 1) = 1.0;
    qc(3, 2) = 1.0;
    Mat fx = d.xd * qc;
    Mat qr = ridge_solve(fx, d.xd, 0.0);
    CHECK((d.xd.col(2) - fx * qr.col(2)).cwiseAbs().maxCoeff() < 1e-8);
}

TEST_CASE("qr satisfies its normal equations") {
    std::mt19937_64 rng(9);
    FfnData d = random_ffn_data(rng, 25, 8);
    Vec imp = ffn_channel_importance(d.gram, random_matrix(rng, 8, 4));
    Mat qc = init_qc_select(imp, 4);
    Mat qr = solve_qr(qc, d.u, d.g, d.xd, 0.0);
    Mat fx = compressed_intermediate(d.u, d.g, d.xd, qc);
    Mat lhs = fx.transpose() * fx * qr;
    Mat rhs = fx.transpose() * d.xd;
    CHECK((lhs - rhs).norm() <= 1e-8 * rhs.norm());

    Mat qr_gram = solve_qr_gram(qc, d.gram, 0.0);
    CHECK((qr_gram - qr).cwiseAbs().maxCoeff() < 1e-7);
}

TEST_CASE("linear probe slice reaches the least-squares optimum") {
    std::mt19937_64 rng(11);
    const int rows = 40, d_slice = 4, p = 6;
    Mat u_k = random_matrix(rng, rows, d_slice);
    Mat y_r = 0.1 * random_matrix(rng, rows, p);
    SliceState st;
    st.slice_width = d_slice;
    st.c_u = 0.05 * random_matrix(rng, rows, p);
    st.c_g = Mat::Zero(rows, p);
    st.y_r = y_r;

    Mat q0 = Mat::Zero(d_slice, p);
    Mat q = slice_optimize_qc(st, u_k, Mat::Zero(rows, d_slice), q0, 4000, 1.0,
                              /*linear_probe=*/true);
    Mat q_star = ridge_solve(u_k, y_r - st.c_u, 0.0);  // closed-form oracle
    CHECK(q_star.cwiseAbs().maxCoeff() < 1.0);         // optimum interior to the bound
    const double got = (st.y_r - st.c_u - u_k * q).squaredNorm();
    const double best = (st.y_r - st.c_u - u_k * q_star).squaredNorm();
    CHECK(got <= best + 1e-6 * (1.0 + best));
}

TEST_CASE("zero gradient steps leave the slice unchanged") {
    std::mt19937_64 rng(13);
    SliceState st;
    st.slice_width = 3;
    st.c_u = random_matrix(rng, 10, 4);
    st.c_g = random_matrix(rng, 10, 4);
    st.y_r = random_matrix(rng, 10, 4);
    Mat q0 = random_matrix(rng, 3, 4);
    Mat q = slice_optimize_qc(st, random_matrix(rng, 10, 3), random_matrix(rng, 10, 3),
                              q0, 0, 10.0, false);
    CHECK((q - q0).cwiseAbs().maxCoeff() == 0.0);
}

TEST_CASE("slice updates respect the amplitude bound") {
    std::mt19937_64 rng(17);
    SliceState st;
    st.slice_width = 2;
    st.c_u = Mat::Zero(30, 3);
    st.c_g = Mat::Zero(30, 3);
    st.y_r = 50.0 * random_matrix(rng, 30, 3);
    Mat q = slice_optimize_qc(st, random_matrix(rng, 30, 2), random_matrix(rng, 30, 2),
                              Mat::Zero(2, 3), 50, 1.0, false);
    CHECK(q.cwiseAbs().maxCoeff() <= 1.0 + 1e-15);
}

TEST_CASE("iteration disabled returns the initialization") {
    std::mt19937_64 rng(19);
    FfnData d = random_ffn_data(rng, 50, 16);
    Mat wd = random_matrix(rng, 16, 6);
    SliceSchedule sched;
    sched.enabled = false;
    FfnTransforms t = iterate_pca(d.u, d.g, d.xd, d.gram, wd, 8, sched);
    Mat qc0 = init_qc_select(d.gram, wd, 8);
    Mat qr0 = solve_qr(qc0, d.u, d.g, d.xd, std::nullopt);
    CHECK((t.qc - qc0).cwiseAbs().maxCoeff() == 0.0);
    CHECK((t.qr - qr0).cwiseAbs().maxCoeff() < 1e-12);
}

TEST_CASE("iterated objective is monotone and beats initialization") {
    std::mt19937_64 rng(23);
    for (int inst = 0; inst < 5; ++inst) {
        FfnData d = random_ffn_data(rng, 60, 16);
        Mat wd = random_matrix(rng, 16, 6);
        SliceSchedule sched;
        sched.enabled = true;
        sched.slice_width = 4;
        sched.sweeps = 2;
        sched.steps_per_slice = 8;
        std::vector<SliceTraceEntry> trace;
        FfnTransforms t = iterate_pca(d.u, d.g, d.xd, d.gram, wd, 8, sched, &trace);
        REQUIRE(trace.size() > 1);
        for (size_t i = 1; i < trace.size(); ++i)
            CHECK(trace[i].objective <= trace[i - 1].objective + 1e-12);
        const double init_obj = trace.front().objective;
        const double final_obj = ffn_objective(d.u, d.g, d.xd, t.qc, t.qr);
        CHECK(final_obj <= init_obj + 1e-12);
    }
}

TEST_CASE("more sweeps never hurt the recorded objective") {
    std::mt19937_64 rng(29);
    FfnData d = random_ffn_data(rng, 60, 16);
    Mat wd = random_matrix(rng, 16, 6);
    auto run = [&](int sweeps) {
        SliceSchedule sched;
        sched.enabled = true;
        sched.slice_width = 4;
        sched.sweeps = sweeps;
        sched.steps_per_slice = 8;
        FfnTransforms t = iterate_pca(d.u, d.g, d.xd, d.gram, wd, 8, sched);
        return ffn_objective(d.u, d.g, d.xd, t.qc, t.qr);
    };
    const double o0 = run(0), o1 = run(1), o2 = run(2);
    CHECK(o1 <= o0 + 1e-12);
    CHECK(o2 <= o1 + 1e-12);
}

TEST_CASE("full-width transforms are lossless end to end") {
    std::mt19937_64 rng(31);
    FfnData d = random_ffn_data(rng, 40, 8);
    Mat wd = random_matrix(rng, 8, 5);
    for (bool iterate : {false, true}) {
        SliceSchedule sched;
        sched.enabled = iterate;
        sched.sweeps = 2;
        sched.slice_width = 4;
        FfnTransforms t = iterate_pca(d.u, d.g, d.xd, d.gram, wd, 8, sched);
        Mat out = compressed_intermediate(d.u, d.g, d.xd, t.qc) * t.qr * wd;
        Mat ref = d.xd * wd;
        CHECK((out - ref).cwiseAbs().maxCoeff() < 1e-6);
    }
}

TEST_CASE("ffn fusion is column and row slicing for selection transforms") {
    std::mt19937_64 rng(37);
    ModelConfig mc;
    mc.layers = 1;
    mc.hidden = 8;
    mc.heads = 2;
    mc.kv_groups = 2;
    mc.head_dim = 4;
    mc.inter = 12;
    mc.vocab = 9;
    Checkpoint ckpt = init_checkpoint(mc, 3);
    Mat wu = ckpt.tensor(tname(0, "wu"));
    Mat wd = ckpt.tensor(tname(0, "wd"));

    FfnTransforms t;
    Vec imp(12);
    for (int i = 0; i < 12; ++i) imp[i] = 12 - i;
    t.qc = init_qc_select(imp, 5);
    t.qr = t.qc.transpose();
    Checkpoint fused = ckpt;
    fuse_ffn(fused, 0, t);
    fused.validate();
    for (int j = 0; j < 5; ++j) {
        CHECK((fused.tensor(tname(0, "wu")).col(j) - wu.col(j)).cwiseAbs().maxCoeff() == 0.0);
        CHECK((fused.tensor(tname(0, "wd")).row(j) - wd.row(j)).cwiseAbs().maxCoeff() == 0.0);
    }
    const long d = mc.hidden, p = 5;
    const long ffn_params = fused.tensor(tname(0, "wu")).size() +
                            fused.tensor(tname(0, "wg")).size() +
                            fused.tensor(tname(0, "wd")).size();
    CHECK(ffn_params == 2 * d * p + p * d);
}

TEST_CASE("fused ffn equals the online transform forward") {
    std::mt19937_64 rng(41);
    ModelConfig mc;
    mc.layers = 2;
    mc.hidden = 8;
    mc.heads = 2;
    mc.kv_groups = 2;
    mc.head_dim = 4;
    mc.inter = 16;
    mc.vocab = 13;
    Checkpoint ckpt = init_checkpoint(mc, 7);
    TokenBatch batch = random_tokens(rng, 2, 8, mc.vocab);

    ForwardOptions copts;
    copts.capture = true;
    ActivationTrace trace = forward(ckpt, batch, copts).trace;

    std::vector<OnlineTransforms> online(mc.layers);
    Checkpoint fused = ckpt;
    for (int l = 0; l < mc.layers; ++l) {
        SliceSchedule sched;
        sched.enabled = (l == 1);
        sched.sweeps = 2;
        FfnTransforms t = iterate_pca(trace.layers[l].up_out.rows,
                                      trace.layers[l].gate_out.rows,
                                      trace.layers[l].down_input.rows,
                                      trace.layers[l].down_input.gram.symmetrized(),
                                      ckpt.tensor(tname(l, "wd")), 10, sched);
        online[l].ffn = OnlineFfnTransform{t.qc, t.qr};
        fuse_ffn(fused, l, t);
    }
    fused.validate();
    ForwardOptions oopts;
    oopts.online = &online;
    ForwardResult ref = forward(ckpt, batch, oopts);
    ForwardResult got = forward(fused, batch);
    for (int s = 0; s < 2; ++s)
        CHECK((got.logits[s] - ref.logits[s]).cwiseAbs().maxCoeff() < 1e-6);
}
