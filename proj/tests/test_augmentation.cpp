#include "damd/augmentation.hpp"

#include <Eigen/Geometry>
#include <gtest/gtest.h>

#include <random>

using namespace damd;

namespace {

const MorphableModel& model()
{
    static const MorphableModel m = generate_synthetic_model(5, 600);
    return m;
}

TrainingSample labeled_sample(std::uint64_t seed)
{
    std::mt19937_64 eng(seed);
    const double deg = std::numbers::pi / 180.0;
    TrainingSample s;
    for (std::size_t k = kPoseDims; k < kParamDims; ++k)
        s.params.values[k] = model().param_std[k] * normal(eng);
    EulerPose pose;
    pose.f = 45.0;
    pose.yaw = uniform(eng, -40.0, 40.0) * deg;
    pose.pitch = uniform(eng, -20.0, 20.0) * deg;
    pose.roll = uniform(eng, -20.0, 20.0) * deg;
    pose.t3d = Vec3(uniform(eng, 0.5, 1.5), uniform(eng, 0.5, 1.5), uniform(eng, -0.2, 0.2));
    const auto p12 = pose_encode(pose);
    std::copy(p12.begin(), p12.end(), s.params.values.begin());
    relabel(s, model());
    return s;
}

// f R (Ry(d) S + t): the extra yaw applied in the model frame, evaluated per landmark vertex.
std::vector<double> rotated_oracle(const TrainingSample& s, double delta_deg)
{
    const auto shape = synthesize_shape(model(), s.params.alpha_id(), s.params.alpha_exp());
    const Eigen::Matrix3d ry = Eigen::AngleAxisd(delta_deg * std::numbers::pi / 180.0, Eigen::Vector3d::UnitY()).toRotationMatrix();
    const Mat3 m = s.params.scaled_rotation();
    const Vec3 t = s.params.translation();
    std::vector<double> out;
    for (std::size_t j = 0; j < kNumLandmarks; ++j) {
        const std::size_t v = model().landmark_indices[j];
        const Vec3 x = m * (ry * Vec3(shape[3 * v], shape[3 * v + 1], shape[3 * v + 2]) + t);
        out.push_back(x.x());
        out.push_back(x.y());
    }
    return out;
}

double max_abs_diff(const std::vector<double>& a, const std::vector<double>& b)
{
    EXPECT_EQ(a.size(), b.size());
    double d = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i)
        d = std::max(d, std::abs(a[i] - b[i]));
    return d;
}

Image gradient_image(std::size_t w, std::size_t h)
{
    Image img(w, h);
    for (std::size_t y = 0; y < h; ++y)
        for (std::size_t x = 0; x < w; ++x)
            img.set(x, y, {static_cast<float>(x) / static_cast<float>(w), static_cast<float>(y) / static_cast<float>(h),
                           0.5f});
    return img;
}

} // namespace

TEST(Crop, EnlargedSquareHandCase)
{
    const auto sq = crop_square({10, 10, 40, 80});
    EXPECT_DOUBLE_EQ(sq.w, 100.0);
    EXPECT_DOUBLE_EQ(sq.h, 100.0);
    EXPECT_DOUBLE_EQ(sq.x + sq.w / 2, 30.0);
    EXPECT_DOUBLE_EQ(sq.y + sq.h / 2, 50.0);
    EXPECT_THROW(crop_square({0, 0, 0, 5}), DataError);
}

TEST(Crop, AffineMapsCropCornersToSquare)
{
    const auto crop = crop_face(gradient_image(200, 150), {10, 10, 40, 80});
    EXPECT_EQ(crop.image.width, kCropSize);
    EXPECT_EQ(crop.image.height, kCropSize);
    EXPECT_DOUBLE_EQ(crop.affine.scale, 100.0 / 120.0);
    const auto tl = crop.affine.to_source(0, 0), br = crop.affine.to_source(120, 120);
    EXPECT_NEAR(tl[0], -20.0, 1e-12);
    EXPECT_NEAR(tl[1], 0.0, 1e-12);
    EXPECT_NEAR(br[0], 80.0, 1e-12);
    EXPECT_NEAR(br[1], 100.0, 1e-12);
}

TEST(Crop, LandmarkRoundTripThroughAffine)
{
    std::mt19937_64 eng(2);
    const auto crop = crop_face(gradient_image(300, 300), {37.5, 80.25, 91.0, 120.0});
    std::vector<double> pts;
    for (int i = 0; i < 136; ++i)
        pts.push_back(uniform(eng, 0.0, 300.0));
    EXPECT_LT(max_abs_diff(crop.affine.landmarks_to_source(crop.affine.landmarks_to_crop(pts)), pts), 1e-9);
}

TEST(Crop, ResampledPixelsMatchSourceAndOutOfFrameIsBlack)
{
    const Image img = gradient_image(200, 150);
    const auto crop = crop_face(img, {10, 10, 40, 80});
    // crop pixel (60,60) center maps to source (30.4167, 50.4167); the gradient is linear in x and y
    const auto s = crop.affine.to_source(60.5, 60.5);
    EXPECT_NEAR(crop.image.at(60, 60, 0), (s[0] - 0.5) / 200.0, 1e-5);
    EXPECT_NEAR(crop.image.at(60, 60, 1), (s[1] - 0.5) / 150.0, 1e-5);
    EXPECT_EQ(crop.image.at(0, 60, 2), 0.0f); // source x < 0
}

TEST(Crop, FullFrameBoxIsIdentity)
{
    Image img(kCropSize, kCropSize);
    std::mt19937_64 eng(3);
    for (auto& v : img.rgb)
        v = static_cast<float>(uniform(eng, 0.0, 1.0));
    const auto crop = crop_face(img, full_frame_bbox());
    EXPECT_NEAR(crop.affine.scale, 1.0, 1e-12);
    EXPECT_NEAR(crop.affine.ox, 0.0, 1e-12);
    double worst = 0.0;
    for (std::size_t i = 0; i < img.rgb.size(); ++i)
        worst = std::max(worst, static_cast<double>(std::abs(img.rgb[i] - crop.image.rgb[i])));
    EXPECT_LT(worst, 1e-3);
}

TEST(Crop, DisjointBoxRejected)
{
    EXPECT_THROW(crop_face(gradient_image(50, 50), {500, 500, 10, 10}), DataError);
}

TEST(Crop, ParamsToSourceReprojectsThroughAffine)
{
    const auto s = labeled_sample(4);
    const CropAffine affine{0.75, 13.0, -4.5};
    const auto src = project_landmarks(model(), params_to_source(s.params, affine));
    EXPECT_LT(max_abs_diff(src, affine.landmarks_to_source(s.landmarks)), 1e-9);
}

TEST(NetworkInput, MapsUnitRangeToSymmetricRange)
{
    Image a(2, 2, {0.0f, 0.5f, 1.0f});
    const auto t = network_input<float>({&a, &a});
    EXPECT_EQ(t.shape(), (Shape{2, 3, 2, 2}));
    EXPECT_FLOAT_EQ(t[0], -1.0f);
    EXPECT_FLOAT_EQ(t[4], 0.0f);
    EXPECT_FLOAT_EQ(t[8], 1.0f);
    Image b(3, 3);
    EXPECT_THROW(network_input<float>({&a, &b}), DimensionError);
}

TEST(RotateProfile, ZeroDeltaIsIdentity)
{
    const auto s = labeled_sample(5);
    const auto r = rotate_profile(s, model(), 0.0);
    EXPECT_EQ(r.params, s.params);
    EXPECT_EQ(r.landmarks, s.landmarks);
    EXPECT_EQ(r.visibility, s.visibility);
}

TEST(RotateProfile, MatchesComposedRotationOracle)
{
    for (std::uint64_t seed = 0; seed < 20; ++seed) {
        const auto s = labeled_sample(100 + seed);
        for (double d : {10.0, 35.0, 90.0, -25.0}) {
            const auto r = rotate_profile(s, model(), d);
            EXPECT_LT(max_abs_diff(r.landmarks, rotated_oracle(s, d)), 1e-6) << seed << " " << d;
            EXPECT_LT(label_inconsistency(r, model()), 1e-9);
            EXPECT_NEAR(r.yaw_deg, yaw_degrees(r.params), 1e-9);
        }
    }
}

TEST(RotateProfile, SuccessiveRotationsCompose)
{
    for (std::uint64_t seed = 0; seed < 20; ++seed) {
        const auto s = labeled_sample(200 + seed);
        const auto two = rotate_profile(rotate_profile(s, model(), 20.0), model(), 35.0);
        const auto one = rotate_profile(s, model(), 55.0);
        EXPECT_LT(max_abs_diff(two.landmarks, one.landmarks), 1e-6);
    }
}

TEST(RotateProfile, FrontalYawMovesByDelta)
{
    auto s = labeled_sample(6);
    EulerPose pose;
    pose.f = 40.0;
    pose.t3d = Vec3(1.0, 1.0, 0.0);
    const auto p12 = pose_encode(pose);
    std::copy(p12.begin(), p12.end(), s.params.values.begin());
    relabel(s, model());
    EXPECT_NEAR(rotate_profile(s, model(), 30.0).yaw_deg, 30.0, 1e-9);
    EXPECT_NEAR(rotate_profile(s, model(), 90.0).yaw_deg, 90.0, 1e-6);
}

TEST(RotateProfile, ProfileHidesOneSide)
{
    auto s = labeled_sample(7);
    EulerPose pose;
    pose.f = 40.0;
    const auto p12 = pose_encode(pose);
    std::copy(p12.begin(), p12.end(), s.params.values.begin());
    relabel(s, model());
    const auto count = [](const std::vector<bool>& v) { return std::count(v.begin(), v.end(), true); };
    const auto r = rotate_profile(s, model(), 80.0);
    EXPECT_LT(count(r.visibility), count(s.visibility));
}

TEST(RotateProfile, RejectsBadInputs)
{
    const auto s = labeled_sample(8);
    EXPECT_THROW(rotate_profile(s, model(), 95.0), ConfigError);
    EXPECT_THROW(rotate_profile(s, model(), std::nan("")), ConfigError);
    auto bad = s;
    for (std::size_t k = 0; k < 9; ++k)
        bad.params.values[k] = 0.0;
    EXPECT_THROW(rotate_profile(bad, model(), 10.0), DataError);
}

TEST(VirtualSample, SeedDeterministicAndConsistent)
{
    const auto a = synthesize_virtual_sample(model(), 42);
    const auto b = synthesize_virtual_sample(model(), 42);
    const auto c = synthesize_virtual_sample(model(), 43);
    EXPECT_EQ(a.image, b.image);
    EXPECT_EQ(a.params, b.params);
    EXPECT_NE(a.params, c.params);
    for (std::uint64_t seed = 0; seed < 30; ++seed) {
        const auto s = synthesize_virtual_sample(model(), seed);
        EXPECT_LT(label_inconsistency(s, model()), 1e-3);
        EXPECT_NEAR(s.yaw_deg, yaw_degrees(s.params), 1e-3);
        EXPECT_LE(std::abs(s.yaw_deg), 90.0);
        EXPECT_EQ(s.image.width, kCropSize);
        EXPECT_EQ(s.bbox, full_frame_bbox());
    }
}

TEST(VirtualSample, FaceFillsMostOfTheFrame)
{
    for (std::uint64_t seed = 0; seed < 10; ++seed) {
        VirtualSampleOptions opt;
        opt.max_yaw_deg = 0.0;
        opt.max_pitch_deg = 0.0;
        opt.max_roll_deg = 0.0;
        auto s = synthesize_virtual_sample(model(), seed, opt);
        std::fill(s.params.values.begin() + kPoseDims, s.params.values.end(), 0.0); // mean shape
        const auto v = reconstruct_vertices(model(), s.params);
        double lo = 1e9, hi = -1e9;
        // the model's height spans [-1, 1]
        for (std::size_t i = 1; i < v.size(); i += 3) {
            lo = std::min(lo, v[i]);
            hi = std::max(hi, v[i]);
        }
        EXPECT_NEAR((hi - lo) / 120.0, 0.8, 0.8 * 0.05 + 1e-9);
    }
}

TEST(VirtualSample, EveryAugmentationPathKeepsLabelsConsistent)
{
    std::mt19937_64 eng(9);
    for (std::uint64_t seed = 0; seed < 10; ++seed) {
        auto s = synthesize_virtual_sample(model(), 500 + seed);
        for (int k = 0; k < 3; ++k) {
            s = rotate_profile(s, model(), uniform(eng, -30.0, 30.0));
            EXPECT_LT(label_inconsistency(s, model()), 1e-9);
        }
    }
}
