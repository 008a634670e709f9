#include "minkocc/ad/gradcheck.hpp"
#include "minkocc/fusion/frontend.hpp"
#include "test_util.hpp"

#include <gtest/gtest.h>

#include <algorithm>
#include <numeric>

using namespace minkocc;
using namespace minkocc::fusion;
using minkocc::testing::random_matrix;

namespace {

Image constant_image(int w, int h, double r, double g, double b) {
    Image im{{w, h}, Matrix(static_cast<Index>(w) * h, 3)};
    for (Index i = 0; i < im.pixels.rows(); ++i) im.pixels.row(i) << r, g, b;
    return im;
}

Image random_image(std::mt19937_64& rng, int w, int h) {
    std::uniform_real_distribution<double> u(0.0, 1.0);
    Image im{{w, h}, Matrix(static_cast<Index>(w) * h, 3)};
    for (Index i = 0; i < im.pixels.size(); ++i) im.pixels.data()[i] = u(rng);
    return im;
}

FeaturePyramid constant_pyramid(ad::Tape& tape, std::mt19937_64& rng, const std::vector<nn::ImageShape>& shapes,
                                const std::vector<int>& channels) {
    FeaturePyramid p;
    for (std::size_t l = 0; l < shapes.size(); ++l)
        p.levels.push_back({shapes[l], tape.variable(random_matrix(rng, shapes[l].pixels(), channels[l]))});
    return p;
}

double bilinear_scalar(const Matrix& f, int w, int h, double u, double v, Index c) {
    u = std::clamp(u, 0.0, w - 1.0);
    v = std::clamp(v, 0.0, h - 1.0);
    const int x0 = static_cast<int>(std::floor(u)), y0 = static_cast<int>(std::floor(v));
    const int x1 = std::min(x0 + 1, w - 1), y1 = std::min(y0 + 1, h - 1);
    const double a = u - x0, b = v - y0;
    auto at = [&](int x, int y) { return f(static_cast<Index>(y) * w + x, c); };
    return (1 - a) * (1 - b) * at(x0, y0) + a * (1 - b) * at(x1, y0) + (1 - a) * b * at(x0, y1) + a * b * at(x1, y1);
}

}  // namespace

TEST(ImageBackbone, ZeroImageZeroBiasGivesZeroFeatures) {
    std::mt19937_64 rng(1);
    ad::ParameterStore store;
    auto params = BackboneParams::create(store, "bb", {16, 32, 64}, rng);
    ad::Tape tape;
    const auto pyr = image_backbone(tape, constant_image(16, 12, 0, 0, 0), params);
    ASSERT_EQ(pyr.levels.size(), 3u);
    for (const auto& l : pyr.levels) EXPECT_EQ(l.data.value().cwiseAbs().maxCoeff(), 0.0);
}

TEST(ImageBackbone, ConstantImageGivesSpatiallyConstantFeatures) {
    std::mt19937_64 rng(2);
    ad::ParameterStore store;
    auto params = BackboneParams::create(store, "bb", {16, 32, 64}, rng);
    for (auto* p : store.all()) p->value.setRandom();
    ad::Tape tape;
    const auto pyr = image_backbone(tape, constant_image(17, 11, 0.2, 0.5, 0.9), params);
    for (const auto& l : pyr.levels) {
        const Matrix& f = l.data.value();
        for (Index r = 1; r < f.rows(); ++r) EXPECT_LT((f.row(r) - f.row(0)).cwiseAbs().maxCoeff(), 1e-12);
    }
}

TEST(ImageBackbone, PyramidShapes) {
    std::mt19937_64 rng(3);
    ad::ParameterStore store;
    auto params = BackboneParams::create(store, "bb", {16, 32, 64}, rng);
    ad::Tape tape;
    const auto pyr = image_backbone(tape, random_image(rng, 64, 48), params);
    ASSERT_EQ(pyr.levels.size(), 3u);
    EXPECT_EQ(pyr.levels[0].shape, (nn::ImageShape{64, 48}));
    EXPECT_EQ(pyr.levels[1].shape, (nn::ImageShape{32, 24}));
    EXPECT_EQ(pyr.levels[2].shape, (nn::ImageShape{16, 12}));
    EXPECT_EQ(pyr.levels[0].data.cols(), 16);
    EXPECT_EQ(pyr.levels[1].data.cols(), 32);
    EXPECT_EQ(pyr.levels[2].data.cols(), 64);
    EXPECT_EQ(pyr.channel_sum(), 112);
}

TEST(ImageBackbone, RejectsWrongImageSize) {
    std::mt19937_64 rng(3);
    ad::ParameterStore store;
    auto params = BackboneParams::create(store, "bb", {4}, rng);
    ad::Tape tape;
    Image bad{{8, 8}, Matrix::Zero(10, 3)};
    EXPECT_THROW(image_backbone(tape, bad, params), std::invalid_argument);
}

TEST(ProjectPoints, OpticalAxisHitsPrincipalPoint) {
    const Camera cam = Camera::looking(0.3, Vec3(1, 2, 1), 64, 48, 1.2);
    const Vec3 p = cam.origin() + 5.0 * cam.ray_direction(cam.cx(), cam.cy());
    Matrix pts(1, 3);
    pts.row(0) = p.transpose();
    const auto proj = project_points(pts, cam);
    EXPECT_NEAR(proj.uv(0, 0), cam.cx(), 1e-9);
    EXPECT_NEAR(proj.uv(0, 1), cam.cy(), 1e-9);
    EXPECT_NEAR(proj.depth[0], 5.0, 1e-9);
    EXPECT_TRUE(proj.valid[0]);
}

TEST(ProjectPoints, BehindCameraIsInvalid) {
    const Camera cam = Camera::looking(0.0, Vec3::Zero(), 64, 48, 1.5);
    Matrix pts(1, 3);
    pts << -5.0, 0.0, 0.0;
    const auto proj = project_points(pts, cam);
    EXPECT_LT(proj.depth[0], 0.0);
    EXPECT_FALSE(proj.valid[0]);
}

TEST(ProjectPoints, RoundTripUnderRandomRigidTransforms) {
    std::mt19937_64 rng(4);
    std::uniform_real_distribution<double> u(-1.0, 1.0);
    double worst = 0.0;
    for (int trial = 0; trial < 50; ++trial) {
        Pose t = Pose::Identity();
        t.linear() = Eigen::Quaterniond(u(rng), u(rng), u(rng), u(rng)).normalized().toRotationMatrix();
        t.translation() = Vec3(u(rng), u(rng), u(rng)) * 10.0;
        const Camera cam = Camera::looking(u(rng) * 3.0, Vec3(u(rng), u(rng), 1.0), 64, 48, 1.4).transformed(t);
        cam.validate();
        const double depth = 2.0 + 20.0 * std::abs(u(rng));
        const double pu = 32 + 30 * u(rng), pv = 24 + 22 * u(rng);
        const Vec3 p = cam.back_project(pu, pv, depth);
        Matrix pts(1, 3);
        pts.row(0) = p.transpose();
        const auto proj = project_points(pts, cam);
        ASSERT_TRUE(proj.valid[0]);
        const Vec3 back = cam.back_project(proj.uv(0, 0), proj.uv(0, 1), proj.depth[0]);
        worst = std::max(worst, (back - p).norm());
    }
    EXPECT_LT(worst, 1e-6);
}

TEST(ProjectPoints, VoxelCenterResampleStaysWithinOneVoxel) {
    const GridConfig grid = GridConfig::desk();
    const Camera cam = Camera::looking(0.0, Vec3(0, 0, 1.0), 64, 48, M_PI / 2);
    int checked = 0;
    for (int x = 34; x < 60; x += 3)
        for (int y = 20; y < 44; y += 3)
            for (int z = 0; z < grid.nz; z += 2) {
                const Vec3 c = grid.center(x, y, z);
                Matrix pts(1, 3);
                pts.row(0) = c.transpose();
                const auto proj = project_points(pts, cam);
                if (!proj.valid[0]) continue;
                const Vec3 back = cam.back_project(proj.uv(0, 0), proj.uv(0, 1), proj.depth[0]);
                const auto idx = grid.index_of(back);
                EXPECT_LE((idx - Eigen::Vector3i(x, y, z)).cwiseAbs().maxCoeff(), 1);
                ++checked;
            }
    EXPECT_GT(checked, 20);
}

TEST(SampleImageFeatures, PixelCenterReturnsPixelAtEveryLevel) {
    std::mt19937_64 rng(5);
    ad::Tape tape;
    const auto pyr = constant_pyramid(tape, rng, {{8, 8}, {4, 4}, {2, 2}}, {2, 3, 4});
    Matrix uv(1, 2);
    uv << 4.0, 2.0;  // level 1 → (2,1), level 2 → (1,0.5)
    const Matrix out = sample_image_features(pyr, uv).value();
    EXPECT_EQ(out.cols(), 9);
    const Matrix& f0 = pyr.levels[0].data.value();
    const Matrix& f1 = pyr.levels[1].data.value();
    for (Index c = 0; c < 2; ++c) EXPECT_DOUBLE_EQ(out(0, c), f0(2 * 8 + 4, c));
    for (Index c = 0; c < 3; ++c) EXPECT_DOUBLE_EQ(out(0, 2 + c), f1(1 * 4 + 2, c));
}

TEST(SampleImageFeatures, MidpointOfTwoPixelGradientIsMean) {
    ad::Tape tape;
    Matrix f(2, 1);
    f << 1.0, 3.0;
    FeaturePyramid pyr;
    pyr.levels.push_back({{2, 1}, tape.constant(f)});
    Matrix uv(1, 2);
    uv << 0.5, 0.0;
    EXPECT_DOUBLE_EQ(sample_image_features(pyr, uv).value()(0, 0), 2.0);
}

TEST(SampleImageFeatures, MatchesScalarBilinearOracle) {
    std::mt19937_64 rng(6);
    ad::Tape tape;
    const std::vector<nn::ImageShape> shapes{{13, 9}, {7, 5}, {4, 3}};
    const auto pyr = constant_pyramid(tape, rng, shapes, {3, 2, 5});
    std::uniform_real_distribution<double> ud(-2.0, 15.0), vd(-2.0, 11.0);
    Matrix uv(200, 2);
    for (Index i = 0; i < uv.rows(); ++i) uv.row(i) << ud(rng), vd(rng);
    const Matrix out = sample_image_features(pyr, uv).value();
    double worst = 0.0;
    for (Index i = 0; i < uv.rows(); ++i) {
        Index col = 0;
        for (std::size_t l = 0; l < shapes.size(); ++l) {
            const double s = 1.0 / (1 << l);
            const Matrix& f = pyr.levels[l].data.value();
            for (Index c = 0; c < f.cols(); ++c)
                worst = std::max(worst, std::abs(out(i, col + c) -
                                                 bilinear_scalar(f, shapes[l].width, shapes[l].height, uv(i, 0) * s, uv(i, 1) * s, c)));
            col += f.cols();
        }
    }
    EXPECT_LT(worst, 1e-6);
}

TEST(SampleImageFeatures, GradientCheck) {
    std::mt19937_64 rng(7);
    Matrix uv(6, 2);
    std::uniform_real_distribution<double> ud(0.0, 5.0);
    for (Index i = 0; i < uv.rows(); ++i) uv.row(i) << ud(rng), ud(rng);
    const Matrix w = random_matrix(rng, 5, 1);
    const double err = ad::check_gradients(
        [&](ad::Tape&, const std::vector<ad::Var>& in) {
            FeaturePyramid p;
            p.levels.push_back({{6, 6}, in[0]});
            p.levels.push_back({{3, 3}, in[1]});
            return ad::sum(ad::matmul(sample_image_features(p, uv), in[0].tape()->constant(w)));
        },
        {random_matrix(rng, 36, 2), random_matrix(rng, 9, 3)});
    EXPECT_LT(err, 1e-6);
}

TEST(FuseMultiview, SingleValidViewPassesThrough) {
    std::mt19937_64 rng(8);
    ad::ParameterStore store;
    auto fp = FuseParams::create(store, "f", 4, rng);
    ad::Tape tape;
    const Matrix a = random_matrix(rng, 3, 4), b = random_matrix(rng, 3, 4);
    const Matrix out = fuse_multiview(tape, {tape.constant(a), tape.constant(b)}, {{1, 0, 1}, {0, 1, 0}}, fp).value();
    EXPECT_LT((out.row(0) - a.row(0)).cwiseAbs().maxCoeff(), 1e-12);
    EXPECT_LT((out.row(1) - b.row(1)).cwiseAbs().maxCoeff(), 1e-12);
    EXPECT_LT((out.row(2) - a.row(2)).cwiseAbs().maxCoeff(), 1e-12);
}

TEST(FuseMultiview, IdenticalViewsAreConvexFixedPoint) {
    std::mt19937_64 rng(9);
    ad::ParameterStore store;
    auto fp = FuseParams::create(store, "f", 5, rng);
    ad::Tape tape;
    const Matrix a = random_matrix(rng, 4, 5);
    const auto v = tape.constant(a);
    const Matrix out = fuse_multiview(tape, {v, v, v}, {{1, 1, 1, 1}, {1, 0, 1, 1}, {1, 1, 0, 1}}, fp).value();
    EXPECT_LT((out - a).cwiseAbs().maxCoeff(), 1e-12);
}

TEST(FuseMultiview, NoValidViewGivesNoViewEmbedding) {
    std::mt19937_64 rng(10);
    ad::ParameterStore store;
    auto fp = FuseParams::create(store, "f", 3, rng);
    fp.no_view->value << 0.5, -1.0, 2.0;
    ad::Tape tape;
    const Matrix out =
        fuse_multiview(tape, {tape.constant(random_matrix(rng, 2, 3)), tape.constant(random_matrix(rng, 2, 3))},
                       {{0, 1}, {0, 0}}, fp)
            .value();
    EXPECT_EQ(out.row(0), fp.no_view->value.row(0));
}

TEST(FuseMultiview, FiniteForEveryMaskPattern) {
    std::mt19937_64 rng(11);
    ad::ParameterStore store;
    auto fp = FuseParams::create(store, "f", 3, rng);
    fp.score.weight->value *= 1e3;  // large logits exercise the max shift
    ad::Tape tape;
    std::vector<ad::Var> views;
    for (int v = 0; v < 3; ++v) views.push_back(tape.constant(random_matrix(rng, 8, 3, 10.0)));
    std::vector<std::vector<std::uint8_t>> valid(3, std::vector<std::uint8_t>(8));
    for (int i = 0; i < 8; ++i)
        for (int v = 0; v < 3; ++v) valid[static_cast<std::size_t>(v)][static_cast<std::size_t>(i)] = (i >> v) & 1;
    EXPECT_TRUE(fuse_multiview(tape, views, valid, fp).value().allFinite());
}

TEST(FuseMultiview, RejectsMaskCountMismatch) {
    std::mt19937_64 rng(12);
    ad::ParameterStore store;
    auto fp = FuseParams::create(store, "f", 2, rng);
    ad::Tape tape;
    EXPECT_THROW(fuse_multiview(tape, {tape.constant(Matrix::Zero(1, 2))}, {}, fp), std::invalid_argument);
}

TEST(FuseMultiview, GradientCheck) {
    std::mt19937_64 rng(13);
    ad::ParameterStore store;
    auto fp = FuseParams::create(store, "f", 3, rng);
    fp.no_view->value = random_matrix(rng, 1, 3);
    const std::vector<std::vector<std::uint8_t>> valid{{1, 1, 0, 1}, {1, 0, 0, 1}, {0, 1, 0, 1}};
    const Matrix w = random_matrix(rng, 3, 1);
    const double err = ad::check_gradients(
        [&](ad::Tape& t, const std::vector<ad::Var>& in) {
            return ad::sum(ad::matmul(fuse_multiview(t, in, valid, fp), t.constant(w)));
        },
        {random_matrix(rng, 4, 3), random_matrix(rng, 4, 3), random_matrix(rng, 4, 3)});
    EXPECT_LT(err, 1e-6);
    const double perr = ad::check_parameter_gradients(
        [&](ad::Tape& t) {
            std::mt19937_64 r2(99);
            std::vector<ad::Var> views;
            for (int v = 0; v < 3; ++v) views.push_back(t.constant(random_matrix(r2, 4, 3)));
            return ad::sum(ad::matmul(fuse_multiview(t, views, valid, fp), t.constant(w)));
        },
        {fp.score.weight, fp.score.bias, fp.no_view});
    EXPECT_LT(perr, 1e-6);
}

TEST(RefineMlp, IdentityWeightsReproduceNonNegativeInput) {
    std::mt19937_64 rng(14);
    ad::ParameterStore store;
    auto p = RefineParams::create(store, "r", 4, 4, 4, rng);
    p.hidden.weight->value.setIdentity();
    p.out.weight->value.setIdentity();
    ad::Tape tape;
    const Matrix x = random_matrix(rng, 5, 4).cwiseAbs();
    const Matrix out = refine_mlp(tape, tape.constant(x), ad::Var{}, p).value();
    EXPECT_LT((out - x).cwiseAbs().maxCoeff(), 1e-15);
}

TEST(RefineMlp, PermutationEquivariant) {
    std::mt19937_64 rng(15);
    ad::ParameterStore store;
    auto p = RefineParams::create(store, "r", 5, 8, 3, rng);
    const Matrix f = random_matrix(rng, 10, 3), a = random_matrix(rng, 10, 2);
    std::vector<int> perm(10);
    std::iota(perm.begin(), perm.end(), 0);
    std::shuffle(perm.begin(), perm.end(), rng);
    Matrix fp(10, 3), ap(10, 2);
    for (int i = 0; i < 10; ++i) {
        fp.row(i) = f.row(perm[static_cast<std::size_t>(i)]);
        ap.row(i) = a.row(perm[static_cast<std::size_t>(i)]);
    }
    ad::Tape tape;
    const Matrix out = refine_mlp(tape, tape.constant(f), tape.constant(a), p).value();
    const Matrix outp = refine_mlp(tape, tape.constant(fp), tape.constant(ap), p).value();
    for (int i = 0; i < 10; ++i) EXPECT_LT((outp.row(i) - out.row(perm[static_cast<std::size_t>(i)])).cwiseAbs().maxCoeff(), 1e-12);
}

TEST(RefineMlp, GradientCheck) {
    std::mt19937_64 rng(16);
    ad::ParameterStore store;
    auto p = RefineParams::create(store, "r", 5, 6, 2, rng);
    const double err = ad::check_gradients(
        [&](ad::Tape& t, const std::vector<ad::Var>& in) {
            return ad::sum(ad::mul(refine_mlp(t, in[0], in[1], p), refine_mlp(t, in[0], in[1], p)));
        },
        {random_matrix(rng, 7, 3), random_matrix(rng, 7, 2)});
    EXPECT_LT(err, 1e-3);
    const double perr = ad::check_parameter_gradients(
        [&](ad::Tape& t) {
            std::mt19937_64 r2(5);
            auto out = refine_mlp(t, t.constant(random_matrix(r2, 7, 3)), t.constant(random_matrix(r2, 7, 2)), p);
            return ad::sum(ad::mul(out, out));
        },
        {p.hidden.weight, p.hidden.bias, p.out.weight, p.out.bias});
    EXPECT_LT(perr, 1e-3);
}

TEST(Voxelize, RangeMinCornerIsOrigin) {
    const GridConfig grid = GridConfig::desk();
    ad::Tape tape;
    Matrix pts(1, 3);
    pts.row(0) = grid.min.transpose();
    const auto t = voxelize(pts, tape.constant(Matrix::Ones(1, 2)), grid);
    ASSERT_EQ(t.size(), 1);
    EXPECT_EQ(t.coordinates()[0], (sparse::Coordinate{0, 0, 0, 0}));
}

TEST(Voxelize, SharedVoxelAveragesFeatures) {
    const GridConfig grid = GridConfig::desk();
    ad::Tape tape;
    Matrix pts(2, 3), f(2, 2);
    pts << 0.1, 0.1, 0.1, 0.3, 0.4, 0.2;
    f << 1.0, 4.0, 3.0, -2.0;
    const auto t = voxelize(pts, tape.constant(f), grid);
    ASSERT_EQ(t.size(), 1);
    EXPECT_DOUBLE_EQ(t.features.value()(0, 0), 2.0);
    EXPECT_DOUBLE_EQ(t.features.value()(0, 1), 1.0);
}

TEST(Voxelize, LargeGridOriginIndex) {
    const GridConfig grid = GridConfig::full();
    EXPECT_NEAR(grid.max().x(), 40.0, 1e-9);
    EXPECT_NEAR(grid.max().z(), 5.4, 1e-9);
    ad::Tape tape;
    const auto t = voxelize(Matrix::Zero(1, 3), tape.constant(Matrix::Ones(1, 1)), grid);
    ASSERT_EQ(t.size(), 1);
    EXPECT_EQ(t.coordinates()[0], (sparse::Coordinate{0, 100, 100, 2}));
}

TEST(Voxelize, DropsOutOfRange) {
    const GridConfig grid = GridConfig::desk();
    ad::Tape tape;
    Matrix pts(4, 3);
    pts << 16.0, 0, 0, -16.01, 0, 0, 0, 0, 3.0, 15.99, 15.99, 2.99;
    const auto t = voxelize(pts, tape.constant(Matrix::Ones(4, 1)), grid);
    ASSERT_EQ(t.size(), 1);
    EXPECT_EQ(t.coordinates()[0], (sparse::Coordinate{0, 63, 63, 7}));
}

TEST(Voxelize, MaxReduction) {
    const GridConfig grid = GridConfig::desk();
    ad::Tape tape;
    Matrix pts(3, 3), f(3, 2);
    pts << 0.1, 0.1, 0.1, 0.3, 0.4, 0.2, 5, 5, 1;
    f << 1.0, 4.0, 3.0, -2.0, 7.0, 7.0;
    const auto t = voxelize(pts, tape.constant(f), grid, 0, VoxelReduce::max);
    ASSERT_EQ(t.size(), 2);
    EXPECT_DOUBLE_EQ(t.features.value()(0, 0), 3.0);
    EXPECT_DOUBLE_EQ(t.features.value()(0, 1), 4.0);
    const double err = ad::check_gradients(
        [&](ad::Tape&, const std::vector<ad::Var>& in) {
            auto v = voxelize(pts, in[0], grid, 0, VoxelReduce::max);
            return ad::sum(ad::mul(v.features, v.features));
        },
        {f});
    EXPECT_LT(err, 1e-6);
}

TEST(Voxelize, PermutationInvariant) {
    std::mt19937_64 rng(17);
    const GridConfig grid = GridConfig::desk();
    std::uniform_real_distribution<double> xy(-4.0, 4.0), z(-1.0, 1.0);
    const Index n = 400;
    Matrix pts(n, 3);
    for (Index i = 0; i < n; ++i) pts.row(i) << xy(rng), xy(rng), z(rng);
    const Matrix f = random_matrix(rng, n, 3);
    std::vector<int> perm(static_cast<std::size_t>(n));
    std::iota(perm.begin(), perm.end(), 0);
    std::shuffle(perm.begin(), perm.end(), rng);
    Matrix pp(n, 3), fp(n, 3);
    for (Index i = 0; i < n; ++i) {
        pp.row(i) = pts.row(perm[static_cast<std::size_t>(i)]);
        fp.row(i) = f.row(perm[static_cast<std::size_t>(i)]);
    }
    ad::Tape tape;
    const auto a = voxelize(pts, tape.constant(f), grid);
    const auto b = voxelize(pp, tape.constant(fp), grid);
    ASSERT_EQ(a.size(), b.size());
    for (Index r = 0; r < a.size(); ++r) {
        const int rb = b.coords->row_of(a.coordinates()[static_cast<std::size_t>(r)]);
        ASSERT_GE(rb, 0);
        EXPECT_LT((a.features.value().row(r) - b.features.value().row(rb)).cwiseAbs().maxCoeff(), 1e-6);
    }
}

TEST(Voxelize, GradientThroughMean) {
    const GridConfig grid = GridConfig::desk();
    Matrix pts(3, 3);
    pts << 0.1, 0.1, 0.1, 0.3, 0.4, 0.2, 2.0, 2.0, 0.5;
    std::mt19937_64 rng(18);
    const double err = ad::check_gradients(
        [&](ad::Tape&, const std::vector<ad::Var>& in) {
            auto v = voxelize(pts, in[0], grid);
            return ad::sum(ad::mul(v.features, v.features));
        },
        {random_matrix(rng, 3, 2)});
    EXPECT_LT(err, 1e-6);
}

TEST(FusionFrontend, EndToEndShapesAndGradients) {
    std::mt19937_64 rng(19);
    ad::ParameterStore store;
    FusionConfig cfg;
    cfg.pyramid_channels = {4, 6, 8};
    cfg.hidden = 8;
    cfg.out_channels = 5;
    FusionFrontend fe(store, cfg, 5, rng);
    const GridConfig grid = GridConfig::desk();
    std::vector<Camera> cams;
    std::vector<Image> images;
    for (int k = 0; k < 4; ++k) {
        cams.push_back(Camera::looking(k * M_PI / 2, Vec3(0, 0, 1.0), 16, 12, M_PI / 2));
        images.push_back(random_image(rng, 16, 12));
    }
    std::uniform_real_distribution<double> xy(-10.0, 10.0), z(-0.9, 2.5);
    Matrix pts(60, 5);
    for (Index i = 0; i < pts.rows(); ++i) pts.row(i) << xy(rng), xy(rng), z(rng), 0.5, 0.0;
    pts.row(0) << 0.0, 0.0, 10.0, 0.1, 0.0;  // above every camera, valid in no view
    ad::Tape tape;
    const auto t = fe.forward(tape, pts, images, cams, grid);
    EXPECT_EQ(t.channels(), 5);
    EXPECT_GT(t.size(), 10);
    EXPECT_TRUE(t.features.value().allFinite());
    tape.backward(ad::sum(ad::mul(t.features, t.features)));
    for (auto* p : store.trainable()) EXPECT_TRUE(p->grad.allFinite()) << p->name;
    EXPECT_GT(fe.backbone().convs[0].weight->grad.cwiseAbs().maxCoeff(), 0.0);
}

TEST(FusionFrontend, EmptyPointCloud) {
    std::mt19937_64 rng(20);
    ad::ParameterStore store;
    FusionFrontend fe(store, {}, 5, rng);
    ad::Tape tape;
    const auto t = fe.forward(tape, Matrix::Zero(0, 5), {}, {}, GridConfig::desk());
    EXPECT_TRUE(t.empty());
    EXPECT_EQ(t.channels(), 16);
}
