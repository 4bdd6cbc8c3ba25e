#include "damd/grad_check.hpp"
#include "damd/losses.hpp"
#include "damd/rng.hpp"

#include <gtest/gtest.h>

#include <cmath>

using namespace damd;

namespace {

const MorphableModel& model()
{
    static const MorphableModel m = generate_synthetic_model(3, 300);
    return m;
}

ParamVector random_params(std::mt19937_64& eng)
{
    EulerPose pose;
    pose.f = uniform(eng, 20.0, 60.0);
    pose.yaw = uniform(eng, -1.2, 1.2);
    pose.pitch = uniform(eng, -0.4, 0.4);
    pose.roll = uniform(eng, -0.4, 0.4);
    pose.t3d = Vec3(uniform(eng, 0.5, 1.5), uniform(eng, 0.5, 1.5), uniform(eng, -0.2, 0.2));
    ParamVector p;
    const auto enc = pose_encode(pose);
    std::copy(enc.begin(), enc.end(), p.values.begin());
    for (std::size_t k = kPoseDims; k < kParamDims; ++k)
        p.values[k] = model().param_std[k] * normal(eng);
    return p;
}

WpdcWeights unit_weights() { return {std::vector<double>(kParamDims, 1.0)}; }

} // namespace

TEST(Wing, ConstantMatchesDefinition)
{
    const WingConfig cfg;
    // C = omega - omega ln(1 + omega/epsilon) = 10 - 10 ln 6
    EXPECT_NEAR(cfg.c(), -7.917594692280550, 1e-12);
    EXPECT_NEAR(cfg.c(), -7.91759, 1e-5);
}

TEST(Wing, BranchesMeetAtOmega)
{
    const WingConfig cfg;
    const double log_branch = cfg.omega * std::log1p(cfg.omega / cfg.epsilon);
    const double linear_branch = cfg.omega - cfg.c();
    EXPECT_NEAR(log_branch, linear_branch, 1e-9);
    EXPECT_NEAR(wing(std::nextafter(10.0, 0.0), cfg), wing(10.0, cfg), 1e-9);
    EXPECT_NEAR(wing(-10.0, cfg), wing(10.0, cfg), 1e-15);
    EXPECT_DOUBLE_EQ(wing(0.0, cfg), 0.0);
}

TEST(Wing, InvalidConfigRejected)
{
    WingConfig cfg;
    cfg.epsilon = 0.0;
    EXPECT_THROW(cfg.validate(), ConfigError);
    CombinedLossConfig c;
    c.lambda1 = c.lambda2 = 0.0;
    EXPECT_THROW(c.validate(), ConfigError);
}

TEST(Wpdc, ZeroAtGroundTruth)
{
    std::mt19937_64 eng(1);
    const auto p = random_params(eng);
    EXPECT_DOUBLE_EQ(wpdc(p.values, p.values, wpdc_weights_from_std(model().param_std)), 0.0);
}

TEST(Wpdc, UnitWeightsGiveSquaredDistance)
{
    std::mt19937_64 eng(2);
    const auto a = random_params(eng), b = random_params(eng);
    double d2 = 0.0;
    for (std::size_t k = 0; k < kParamDims; ++k)
        d2 += (a.values[k] - b.values[k]) * (a.values[k] - b.values[k]);
    EXPECT_NEAR(wpdc(a.values, b.values, unit_weights()), d2, 1e-9 * d2);
}

TEST(Wpdc, SingleCoordinatePerturbationForEveryK)
{
    std::mt19937_64 eng(3);
    const auto p = random_params(eng);
    const auto w = wpdc_weights_from_std(model().param_std);
    for (std::size_t k = 0; k < kParamDims; ++k) {
        auto q = p;
        const double delta = 0.37 + 0.01 * static_cast<double>(k);
        q.values[k] += delta;
        EXPECT_NEAR(wpdc(q.values, p.values, w), w.w[k] * delta * delta, 1e-12) << "k = " << k;
    }
}

TEST(Wpdc, WeightsFromStdNormalizedToMaxOne)
{
    std::vector<double> sd(kParamDims, 2.0);
    sd[5] = 0.5;
    const auto w = wpdc_weights_from_std(sd);
    EXPECT_DOUBLE_EQ(w.w[5], 1.0);
    EXPECT_DOUBLE_EQ(w.w[0], 0.25);
    sd[3] = 0.0;
    EXPECT_THROW(wpdc_weights_from_std(sd), ConfigError);
    EXPECT_THROW(wpdc(std::vector<double>(61), std::vector<double>(62), unit_weights()), DimensionError);
}

TEST(VertexWing, ZeroAtGroundTruthAndPositiveOtherwise)
{
    std::mt19937_64 eng(4);
    const auto p = random_params(eng), q = random_params(eng);
    EXPECT_DOUBLE_EQ(vertex_wing(model(), p, p), 0.0);
    EXPECT_GT(vertex_wing(model(), p, q), 0.0);
}

TEST(TapeRoute, MatchesReferenceRoute)
{
    std::mt19937_64 eng(5);
    const auto w = wpdc_weights_from_std(model().param_std);
    for (bool all : {false, true}) {
        CombinedLossConfig cfg;
        cfg.all_vertices = all;
        const auto ctx = make_loss_context<double>(model(), w, {}, cfg);
        std::vector<ParamVector> pred, gt;
        std::vector<double> pd, gd;
        for (int i = 0; i < 3; ++i) {
            pred.push_back(random_params(eng));
            gt.push_back(random_params(eng));
            pd.insert(pd.end(), pred.back().values.begin(), pred.back().values.end());
            gd.insert(gd.end(), gt.back().values.begin(), gt.back().values.end());
        }
        const auto terms = combined_loss(ctx, Tensor<double>(Shape{3, kParamDims}, pd),
                                         Tensor<double>(Shape{3, kParamDims}, gd));
        double ref_wpdc = 0.0, ref_wing = 0.0, ref_total = 0.0;
        for (int i = 0; i < 3; ++i) {
            ref_wpdc += wpdc(pred[i].values, gt[i].values, w) / 3.0;
            ref_wing += vertex_wing(model(), pred[i], gt[i], {}, all) / 3.0;
            ref_total += combined(pred[i], gt[i], model(), w, {}, cfg) / 3.0;
        }
        EXPECT_NEAR(terms.wpdc.item(), ref_wpdc, 1e-6 * ref_wpdc);
        EXPECT_NEAR(terms.wing.item(), ref_wing, 1e-6 * ref_wing);
        EXPECT_NEAR(terms.total.item(), ref_total, 1e-6 * ref_total);
    }
}

TEST(TapeRoute, GradientMatchesFiniteDifferences)
{
    std::mt19937_64 eng(6);
    const auto ctx = make_loss_context<double>(model(), wpdc_weights_from_std(model().param_std));
    std::vector<double> pd, gd;
    for (int i = 0; i < 2; ++i) {
        const auto a = random_params(eng), b = random_params(eng);
        pd.insert(pd.end(), a.values.begin(), a.values.end());
        gd.insert(gd.end(), b.values.begin(), b.values.end());
    }
    Tensor<double> pred(Shape{2, kParamDims}, pd);
    const Tensor<double> gt(Shape{2, kParamDims}, gd);
    const auto r = finite_diff_check([&] { return combined_loss(ctx, pred, gt).total; }, pred, 1e-6);
    EXPECT_TRUE(r.passed(1e-6)) << r.max_rel_error;
}

TEST(TapeRoute, ReconstructBatchMatchesReference)
{
    std::mt19937_64 eng(7);
    const auto p = random_params(eng);
    const auto ctx = make_loss_context<double>(model(), unit_weights());
    const auto v = reconstruct_batch(ctx, Tensor<double>(Shape{1, kParamDims},
                                                         std::vector<double>(p.values.begin(), p.values.end())));
    const auto ref = reconstruct_landmarks(model(), p);
    ASSERT_EQ(v.numel(), ref.size());
    for (std::size_t i = 0; i < ref.size(); ++i)
        EXPECT_NEAR(v[i], ref[i], 1e-9 * std::max(1.0, std::abs(ref[i])));
    EXPECT_THROW(reconstruct_batch(ctx, Tensor<double>(Shape{1, 61})), DimensionError);
}
