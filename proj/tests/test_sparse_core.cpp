#include "minkocc/ad/gradcheck.hpp"
#include "minkocc/sparse/ops.hpp"
#include "test_util.hpp"

#include <gtest/gtest.h>

#include <algorithm>
#include <map>
#include <set>
#include <tuple>

using namespace minkocc;
using namespace minkocc::sparse;
using minkocc::testing::random_coords;
using minkocc::testing::random_matrix;

namespace {

/// Direct dense convolution: zero-filled dense input, loop over every output
/// coordinate and every kernel offset (dz slowest).
Matrix dense_conv_oracle(const std::vector<Coordinate>& in_coords, const Matrix& x, int in_stride,
                         const std::vector<Coordinate>& out_coords, const Matrix& w, int kernel, int extent) {
    const Index din = x.cols();
    const Index dout = w.cols();
    std::vector<double> dense(static_cast<std::size_t>(extent * extent * extent * din), 0.0);
    std::vector<char> present(static_cast<std::size_t>(extent * extent * extent), 0);
    auto cell = [&](int cx, int cy, int cz) { return (cz * extent + cy) * extent + cx; };
    for (std::size_t r = 0; r < in_coords.size(); ++r) {
        const auto& c = in_coords[r];
        const int id = cell(c.x, c.y, c.z);
        present[static_cast<std::size_t>(id)] = 1;
        for (Index ch = 0; ch < din; ++ch) dense[static_cast<std::size_t>(id * din + ch)] = x(static_cast<Index>(r), ch);
    }
    const int lo = kernel % 2 == 1 ? -(kernel - 1) / 2 : 0;
    Matrix out = Matrix::Zero(static_cast<Index>(out_coords.size()), dout);
    for (std::size_t r = 0; r < out_coords.size(); ++r) {
        const auto& u = out_coords[r];
        int k = 0;
        for (int dz = lo; dz < lo + kernel; ++dz)
            for (int dy = lo; dy < lo + kernel; ++dy)
                for (int dx = lo; dx < lo + kernel; ++dx, ++k) {
                    const int px = u.x + dx * in_stride, py = u.y + dy * in_stride, pz = u.z + dz * in_stride;
                    if (px < 0 || py < 0 || pz < 0 || px >= extent || py >= extent || pz >= extent) continue;
                    const int id = cell(px, py, pz);
                    for (Index o = 0; o < dout; ++o)
                        for (Index i = 0; i < din; ++i)
                            out(static_cast<Index>(r), o) += w(k * din + i, o) * dense[static_cast<std::size_t>(id * din + i)];
                }
    }
    return out;
}

double max_rel_err(const Matrix& a, const Matrix& b) {
    double worst = 0.0;
    for (Index i = 0; i < a.size(); ++i)
        worst = std::max(worst, std::abs(a.data()[i] - b.data()[i]) / std::max(1e-6, std::abs(b.data()[i])));
    return worst;
}

}  // namespace

TEST(CoordinateIndex, DeduplicatesPreservingFirstOccurrence) {
    std::vector<Coordinate> coords{{0, 0, 0, 0}, {0, 1, 0, 0}, {0, 0, 0, 0}};
    auto idx = build_coordinate_index(coords);
    ASSERT_EQ(idx.size(), 2u);
    EXPECT_EQ(idx.row_of({0, 0, 0, 0}), 0);
    EXPECT_EQ(idx.row_of({0, 1, 0, 0}), 1);
    EXPECT_FALSE(idx.find({0, 2, 0, 0}).has_value());
    EXPECT_FALSE(idx.find({1, 0, 0, 0}).has_value());
}

TEST(CoordinateIndex, EmptyInput) {
    auto idx = build_coordinate_index({});
    EXPECT_TRUE(idx.empty());
    EXPECT_EQ(idx.row_of({0, 0, 0, 0}), -1);
}

TEST(CoordinateIndex, MatchesSortUniqueOracle) {
    std::mt19937_64 rng(11);
    std::uniform_int_distribution<int> pos(-50, 50);
    std::vector<Coordinate> coords;
    for (int i = 0; i < 900; ++i) coords.push_back({i % 3, pos(rng), pos(rng), pos(rng)});
    for (int i = 0; i < 100; ++i) coords.push_back(coords[static_cast<std::size_t>(i * 7)]);
    std::shuffle(coords.begin(), coords.end(), rng);

    auto sorted = coords;
    std::sort(sorted.begin(), sorted.end());
    sorted.erase(std::unique(sorted.begin(), sorted.end()), sorted.end());

    auto idx = build_coordinate_index(coords);
    ASSERT_EQ(idx.size(), sorted.size());
    for (const auto& c : coords) {
        auto row = idx.find(c);
        ASSERT_TRUE(row.has_value());
        EXPECT_EQ(idx[static_cast<std::size_t>(*row)], c);
    }
}

TEST(KernelOffsets, LexicographicDzSlowest) {
    auto offs = kernel_offsets(3);
    ASSERT_EQ(offs.size(), 27u);
    EXPECT_EQ(offs[0], (Coordinate{0, -1, -1, -1}));
    EXPECT_EQ(offs[1], (Coordinate{0, 0, -1, -1}));
    EXPECT_EQ(offs[3], (Coordinate{0, -1, 0, -1}));
    EXPECT_EQ(offs[9], (Coordinate{0, -1, -1, 0}));
    EXPECT_EQ(offs[13], (Coordinate{0, 0, 0, 0}));
    auto even = kernel_offsets(2);
    EXPECT_EQ(even.front(), (Coordinate{0, 0, 0, 0}));
    EXPECT_EQ(even.back(), (Coordinate{0, 1, 1, 1}));
}

TEST(KernelMap, LoneVoxelHasOnlyCenterPair) {
    auto in = std::make_shared<CoordinateIndex>(std::vector<Coordinate>{{0, 0, 0, 0}});
    auto km = build_kernel_map(*in, 1, in, 3, 1);
    EXPECT_EQ(km.pair_count(), 1u);
    ASSERT_EQ(km.in_rows[13].size(), 1u);
    EXPECT_EQ(km.in_rows[13][0], 0);
    EXPECT_EQ(km.out_rows[13][0], 0);
}

TEST(KernelMap, TwoNeighborsEachSeeTwoPairs) {
    auto in = std::make_shared<CoordinateIndex>(std::vector<Coordinate>{{0, 0, 0, 0}, {0, 1, 0, 0}});
    auto km = build_kernel_map(*in, 1, in, 3, 1);
    EXPECT_EQ(km.pair_count(), 4u);
    std::map<int, int> per_output;
    for (std::size_t k = 0; k < km.kernel_volume(); ++k)
        for (int r : km.out_rows[k]) per_output[r]++;
    EXPECT_EQ(per_output[0], 2);
    EXPECT_EQ(per_output[1], 2);
    // Output 0 reads its neighbor through offset (+1,0,0); output 1 through (-1,0,0).
    EXPECT_EQ(km.in_rows[14], (std::vector<int>{1}));
    EXPECT_EQ(km.out_rows[14], (std::vector<int>{0}));
    EXPECT_EQ(km.in_rows[12], (std::vector<int>{0}));
    EXPECT_EQ(km.out_rows[12], (std::vector<int>{1}));
}

TEST(KernelMap, StridedMatchesBruteForceTripleLoop) {
    std::mt19937_64 rng(3);
    auto coords = random_coords(rng, 6, 0.4);
    auto in = std::make_shared<CoordinateIndex>(coords);
    auto out = downsample_coordinates(*in, 1, 2);
    for (const auto& c : out->coordinates()) ASSERT_TRUE(divisible(c, 2));
    auto km = build_kernel_map(*in, 1, out, 3, 2);

    std::set<std::tuple<int, int, int>> got, expected;
    for (std::size_t k = 0; k < km.kernel_volume(); ++k)
        for (std::size_t p = 0; p < km.in_rows[k].size(); ++p)
            got.insert({static_cast<int>(k), km.in_rows[k][p], km.out_rows[k][p]});
    auto offs = kernel_offsets(3);
    for (std::size_t i = 0; i < in->size(); ++i)
        for (std::size_t o = 0; o < out->size(); ++o)
            for (std::size_t k = 0; k < offs.size(); ++k)
                if ((*out)[o] + offs[k] == (*in)[i]) expected.insert({static_cast<int>(k), static_cast<int>(i), static_cast<int>(o)});
    EXPECT_EQ(got, expected);
}

TEST(KernelMap, RejectsInconsistentStride) {
    auto in = std::make_shared<CoordinateIndex>(std::vector<Coordinate>{{0, 1, 0, 0}});
    EXPECT_THROW(build_kernel_map(*in, 2, in, 3, 1), std::invalid_argument);
    auto in1 = std::make_shared<CoordinateIndex>(std::vector<Coordinate>{{0, 0, 0, 0}});
    auto bad_out = std::make_shared<CoordinateIndex>(std::vector<Coordinate>{{0, 1, 0, 0}});
    EXPECT_THROW(build_kernel_map(*in1, 1, bad_out, 3, 2), std::invalid_argument);
}

TEST(SparseConv, IdentityKernelCopiesFeatures) {
    std::mt19937_64 rng(5);
    ad::Tape tape;
    auto coords = random_coords(rng, 5, 0.3);
    Matrix x = random_matrix(rng, static_cast<Index>(coords.size()), 4);
    auto t = make_tensor(tape, coords, x);
    ConvWeights w{tape.constant(Matrix::Identity(4, 4)), {}, 1};
    auto y = conv(t, w);
    EXPECT_EQ(y.features.value(), x);
    EXPECT_EQ(y.coords, t.coords);
}

TEST(SparseConv, ZeroInputGivesBiasOnly) {
    std::mt19937_64 rng(6);
    ad::Tape tape;
    auto coords = random_coords(rng, 5, 0.3);
    auto t = make_tensor(tape, coords, Matrix::Zero(static_cast<Index>(coords.size()), 2));
    Matrix b(1, 3);
    b << 0.5, -1.0, 2.0;
    ConvWeights w{tape.constant(random_matrix(rng, 27 * 2, 3)), tape.constant(b), 3};
    auto y = conv(t, w);
    for (Index r = 0; r < y.features.rows(); ++r) EXPECT_EQ(Matrix(y.features.value().row(r)), b);
    ConvWeights nob{w.weight, {}, 3};
    EXPECT_EQ(conv(t, nob).features.value().cwiseAbs().maxCoeff(), 0.0);
}

TEST(SparseConv, MatchesDenseOracleOn6Cube) {
    std::mt19937_64 rng(7);
    ad::Tape tape;
    auto coords = random_coords(rng, 6, 0.35);
    Matrix x = random_matrix(rng, static_cast<Index>(coords.size()), 2);
    Matrix w = random_matrix(rng, 27 * 2, 3);
    auto t = make_tensor(tape, coords, x);
    auto y = conv(t, ConvWeights{tape.constant(w), {}, 3});
    Matrix expected = dense_conv_oracle(coords, x, 1, y.coordinates(), w, 3, 6);
    EXPECT_LT(max_rel_err(y.features.value(), expected), 1e-5);
}

TEST(SparseConv, RejectsChannelMismatch) {
    ad::Tape tape;
    auto t = make_tensor(tape, {{0, 0, 0, 0}}, Matrix::Ones(1, 2));
    EXPECT_THROW(conv(t, ConvWeights{tape.constant(Matrix::Ones(27 * 3, 2)), {}, 3}), std::invalid_argument);
}

TEST(GenerativeConv, LoneVoxelExpandsToChildCube) {
    ad::Tape tape;
    auto t = make_tensor(tape, {{0, 0, 0, 0}}, Matrix::Ones(1, 1), 2);
    auto y = generative_transposed_conv(t, ConvWeights{tape.constant(Matrix::Ones(8, 1)), {}, 2}, 2);
    EXPECT_EQ(y.stride, 1);
    std::set<Coordinate> got(y.coordinates().begin(), y.coordinates().end());
    std::set<Coordinate> expected;
    for (int z = 0; z < 2; ++z)
        for (int yy = 0; yy < 2; ++yy)
            for (int x = 0; x < 2; ++x) expected.insert({0, x, yy, z});
    EXPECT_EQ(got, expected);
}

TEST(GenerativeConv, AdjacentVoxelsUnionDeduplicated) {
    ad::Tape tape;
    std::vector<Coordinate> in{{0, 0, 0, 0}, {0, 2, 0, 0}};
    auto t = make_tensor(tape, in, Matrix::Ones(2, 1), 2);
    // K = 3 at output stride 1 overlaps the two footprints along x.
    auto y = generative_transposed_conv(t, ConvWeights{tape.constant(Matrix::Ones(27, 1)), {}, 3}, 2);
    std::set<Coordinate> uni;
    for (const auto& c : in)
        for (const auto& o : generative_offsets(3)) uni.insert(c + o);
    EXPECT_EQ(y.size(), uni.size());
    EXPECT_EQ(y.size(), 45u);
}

TEST(GenerativeConv, IdentityWeightsBroadcastFeature) {
    ad::Tape tape;
    Matrix f(1, 3);
    f << 1.5, -2.0, 0.25;
    auto t = make_tensor(tape, {{0, 4, 8, 0}}, f, 4);
    Matrix w(8 * 3, 3);
    for (int k = 0; k < 8; ++k) w.middleRows(k * 3, 3) = Matrix::Identity(3, 3);
    auto y = generative_transposed_conv(t, ConvWeights{tape.constant(w), {}, 2}, 2);
    ASSERT_EQ(y.size(), 8u);
    EXPECT_EQ(y.stride, 2);
    for (Index r = 0; r < 8; ++r) EXPECT_EQ(Matrix(y.features.value().row(r)), f);
}

TEST(GenerativeConv, RejectsIndivisibleStride) {
    ad::Tape tape;
    auto t = make_tensor(tape, {{0, 0, 0, 0}}, Matrix::Ones(1, 1), 1);
    EXPECT_THROW(generative_transposed_conv(t, ConvWeights{tape.constant(Matrix::Ones(8, 1)), {}, 2}, 2),
                 std::invalid_argument);
}

TEST(Prune, KeepAllDropAllAlternating) {
    std::mt19937_64 rng(9);
    ad::Tape tape;
    std::vector<Coordinate> coords;
    for (int i = 0; i < 10; ++i) coords.push_back({0, i, 0, 0});
    Matrix x = random_matrix(rng, 10, 2);
    auto t = make_tensor(tape, coords, x);

    std::vector<double> hi(10, 10.0), lo(10, -10.0), alt(10);
    for (int i = 0; i < 10; ++i) alt[static_cast<std::size_t>(i)] = i % 2 == 0 ? 10.0 : -10.0;
    auto all = prune(t, hi, 0.5);
    EXPECT_EQ(all.coordinates(), coords);
    EXPECT_EQ(all.features.value(), x);
    EXPECT_TRUE(prune(t, lo, 0.5).empty());
    auto half = prune(t, alt, 0.5);
    ASSERT_EQ(half.size(), 5u);
    for (std::size_t k = 0; k < 5; ++k) {
        EXPECT_EQ(half.coordinates()[k], coords[2 * k]);
        EXPECT_EQ(Matrix(half.features.value().row(static_cast<Index>(k))), Matrix(x.row(static_cast<Index>(2 * k))));
    }
    EXPECT_THROW(prune(t, std::vector<double>(3, 0.0), 0.5), std::invalid_argument);
}

TEST(Prune, MonotoneInThresholdAndSubset) {
    std::mt19937_64 rng(10);
    for (int trial = 0; trial < 50; ++trial) {
        ad::Tape tape;
        auto coords = random_coords(rng, 5, 0.4);
        auto t = make_tensor(tape, coords, random_matrix(rng, static_cast<Index>(coords.size()), 1));
        Matrix logits = random_matrix(rng, static_cast<Index>(coords.size()), 1, 2.0);
        std::span<const double> lv(logits.data(), coords.size());
        std::set<Coordinate> input(coords.begin(), coords.end());
        std::set<Coordinate> previous = input;
        for (double thr : {0.1, 0.3, 0.5, 0.7, 0.9}) {
            auto p = prune(t, lv, thr);
            std::set<Coordinate> s(p.coordinates().begin(), p.coordinates().end());
            EXPECT_TRUE(std::includes(previous.begin(), previous.end(), s.begin(), s.end()));
            EXPECT_TRUE(std::includes(input.begin(), input.end(), s.begin(), s.end()));
            previous = s;
        }
    }
}

TEST(Prune, ForceKeepOverridesLogits) {
    ad::Tape tape;
    auto t = make_tensor(tape, {{0, 0, 0, 0}, {0, 1, 0, 0}}, Matrix::Ones(2, 1));
    std::vector<double> lo(2, -10.0);
    std::vector<std::uint8_t> force{0, 1};
    auto p = prune(t, lo, 0.5, force);
    ASSERT_EQ(p.size(), 1u);
    EXPECT_EQ(p.coordinates()[0], (Coordinate{0, 1, 0, 0}));
}

TEST(SqueezeExcite, SaturatedGateIsIdentity) {
    std::mt19937_64 rng(12);
    ad::Tape tape;
    auto coords = random_coords(rng, 4, 0.5, 1, 2);
    Matrix x = random_matrix(rng, static_cast<Index>(coords.size()), 4);
    auto t = make_tensor(tape, coords, x);
    SqueezeExciteParams p{tape.constant(random_matrix(rng, 4, 2)), tape.constant(Matrix::Zero(1, 2)),
                          tape.constant(Matrix::Zero(2, 4)), tape.constant(Matrix::Constant(1, 4, 60.0))};
    auto y = squeeze_excite(t, p);
    EXPECT_LT((y.features.value() - x).cwiseAbs().maxCoeff(), 1e-12);
}

TEST(SqueezeExcite, PerItemGateMatchesScalarRecompute) {
    std::mt19937_64 rng(13);
    ad::Tape tape;
    auto coords = random_coords(rng, 4, 0.5, 1, 2);
    Matrix x = random_matrix(rng, static_cast<Index>(coords.size()), 4);
    Matrix w1 = random_matrix(rng, 4, 2), b1 = random_matrix(rng, 1, 2), w2 = random_matrix(rng, 2, 4),
           b2 = random_matrix(rng, 1, 4);
    auto t = make_tensor(tape, coords, x);
    auto y = squeeze_excite(t, {tape.constant(w1), tape.constant(b1), tape.constant(w2), tape.constant(b2)});
    for (int b = 0; b < 2; ++b) {
        double pooled[4] = {0, 0, 0, 0};
        int n = 0;
        for (std::size_t r = 0; r < coords.size(); ++r)
            if (coords[r].batch == b) {
                ++n;
                for (int c = 0; c < 4; ++c) pooled[c] += x(static_cast<Index>(r), c);
            }
        for (double& v : pooled) v /= n;
        double hidden[2];
        for (int h = 0; h < 2; ++h) {
            double s = b1(0, h);
            for (int c = 0; c < 4; ++c) s += pooled[c] * w1(c, h);
            hidden[h] = s > 0 ? s : 0;
        }
        for (int c = 0; c < 4; ++c) {
            double s = b2(0, c);
            for (int h = 0; h < 2; ++h) s += hidden[h] * w2(h, c);
            const double gate = 1.0 / (1.0 + std::exp(-s));
            for (std::size_t r = 0; r < coords.size(); ++r)
                if (coords[r].batch == b)
                    EXPECT_NEAR(y.features.value()(static_cast<Index>(r), c), gate * x(static_cast<Index>(r), c), 1e-12);
        }
    }
}

TEST(SqueezeExcite, SingleRowPoolsToItself) {
    ad::Tape tape;
    Matrix x(1, 2);
    x << 2.0, -1.0;
    auto t = make_tensor(tape, {{0, 3, 3, 3}}, x);
    // Identity bottleneck: gate = sigmoid(relu(x)).
    auto y = squeeze_excite(t, {tape.constant(Matrix::Identity(2, 2)), tape.constant(Matrix::Zero(1, 2)),
                                tape.constant(Matrix::Identity(2, 2)), tape.constant(Matrix::Zero(1, 2))});
    EXPECT_NEAR(y.features.value()(0, 0), 2.0 / (1.0 + std::exp(-2.0)), 1e-12);
    EXPECT_NEAR(y.features.value()(0, 1), -1.0 * 0.5, 1e-12);
}

TEST(EmptyTensors, PropagateThroughEveryOp) {
    ad::Tape tape;
    auto t = make_tensor(tape, {}, Matrix::Zero(0, 4), 2);
    ConvWeights w{tape.constant(Matrix::Ones(27 * 4, 4)), tape.constant(Matrix::Ones(1, 4)), 3};
    EXPECT_TRUE(conv(t, w).empty());
    EXPECT_TRUE(conv(t, ConvWeights{tape.constant(Matrix::Ones(8 * 4, 4)), {}, 2}, 2).empty());
    EXPECT_TRUE(generative_transposed_conv(t, ConvWeights{tape.constant(Matrix::Ones(8 * 4, 4)), {}, 2}, 2).empty());
    EXPECT_TRUE(prune(t, std::vector<double>{}, 0.5).empty());
    SqueezeExciteParams p{tape.constant(Matrix::Ones(4, 2)), tape.constant(Matrix::Zero(1, 2)),
                          tape.constant(Matrix::Ones(2, 4)), tape.constant(Matrix::Zero(1, 4))};
    EXPECT_TRUE(squeeze_excite(t, p).empty());
    Matrix rm = Matrix::Zero(1, 4), rv = Matrix::Ones(1, 4);
    EXPECT_EQ(sparse::batch_norm_rows(t.features, tape.constant(Matrix::Ones(1, 4)), tape.constant(Matrix::Zero(1, 4)), rm, rv, true).rows(), 0);
}

TEST(Gradients, SparseConvPassesFiniteDifferences) {
    std::mt19937_64 rng(21);
    auto coords = random_coords(rng, 4, 0.4);
    const Index n = static_cast<Index>(coords.size());
    Matrix readout = random_matrix(rng, n, 3);
    auto index = std::make_shared<CoordinateIndex>(coords);
    double err = ad::check_gradients(
        [&](ad::Tape& t, const std::vector<ad::Var>& v) {
            SparseVoxelTensor x{index, v[0], 1};
            auto y = conv(x, ConvWeights{v[1], v[2], 3});
            return ad::sum(ad::mul(y.features, t.constant(readout)));
        },
        {random_matrix(rng, n, 2), random_matrix(rng, 27 * 2, 3), random_matrix(rng, 1, 3)}, 1e-4);
    EXPECT_LT(err, 1e-3);
}

TEST(Gradients, StridedAndGenerativeConv) {
    std::mt19937_64 rng(22);
    auto coords = random_coords(rng, 4, 0.4);
    const Index n = static_cast<Index>(coords.size());
    auto index = std::make_shared<CoordinateIndex>(coords);
    double err = ad::check_gradients(
        [&](ad::Tape& t, const std::vector<ad::Var>& v) {
            SparseVoxelTensor x{index, v[0], 1};
            auto down = conv(x, ConvWeights{v[1], {}, 2}, 2);
            auto up = generative_transposed_conv(down, ConvWeights{v[2], {}, 2}, 2);
            Matrix readout = Matrix::Constant(up.features.rows(), up.features.cols(), 0.3);
            for (Index i = 0; i < readout.rows(); ++i) readout(i, 0) = 0.1 * static_cast<double>(i % 5);
            return ad::sum(ad::mul(ad::relu(up.features), t.constant(readout)));
        },
        {random_matrix(rng, n, 2), random_matrix(rng, 8 * 2, 3), random_matrix(rng, 8 * 3, 2)}, 1e-4);
    EXPECT_LT(err, 1e-3);
}

TEST(Gradients, PruneThenSumOnRetainedRows) {
    std::mt19937_64 rng(23);
    auto coords = random_coords(rng, 4, 0.5);
    const Index n = static_cast<Index>(coords.size());
    auto index = std::make_shared<CoordinateIndex>(coords);
    std::vector<double> logits(static_cast<std::size_t>(n));
    for (Index i = 0; i < n; ++i) logits[static_cast<std::size_t>(i)] = (i % 3 == 0) ? -5.0 : 5.0;
    double err = ad::check_gradients(
        [&](ad::Tape&, const std::vector<ad::Var>& v) {
            SparseVoxelTensor x{index, v[0], 1};
            auto p = prune(x, logits, 0.5);
            return ad::sum(ad::mul(p.features, p.features));
        },
        {random_matrix(rng, n, 3)}, 1e-4);
    EXPECT_LT(err, 1e-3);

    ad::Tape tape;
    SparseVoxelTensor x{index, tape.variable(random_matrix(rng, n, 3)), 1};
    tape.backward(ad::sum(prune(x, logits, 0.5).features));
    Matrix g = tape.grad(x.features);
    for (Index i = 0; i < n; ++i) EXPECT_EQ(g.row(i).sum(), i % 3 == 0 ? 0.0 : 3.0);
}

TEST(Gradients, SqueezeExcite) {
    std::mt19937_64 rng(24);
    auto coords = random_coords(rng, 4, 0.4, 1, 2);
    const Index n = static_cast<Index>(coords.size());
    auto index = std::make_shared<CoordinateIndex>(coords);
    Matrix readout = random_matrix(rng, n, 4);
    double err = ad::check_gradients(
        [&](ad::Tape& t, const std::vector<ad::Var>& v) {
            SparseVoxelTensor x{index, v[0], 1};
            auto y = squeeze_excite(x, {v[1], v[2], v[3], v[4]});
            return ad::sum(ad::mul(y.features, t.constant(readout)));
        },
        {random_matrix(rng, n, 4), random_matrix(rng, 4, 2), random_matrix(rng, 1, 2), random_matrix(rng, 2, 4),
         random_matrix(rng, 1, 4)},
        1e-4);
    EXPECT_LT(err, 1e-3);
}

TEST(Gradients, BatchNormTrainingAndEval) {
    std::mt19937_64 rng(25);
    Matrix readout = random_matrix(rng, 9, 3);
    for (bool training : {true, false}) {
        Matrix rm = random_matrix(rng, 1, 3), rv = Matrix::Constant(1, 3, 1.7);
        double err = ad::check_gradients(
            [&](ad::Tape& t, const std::vector<ad::Var>& v) {
                Matrix m = rm, var = rv;
                auto y = sparse::batch_norm_rows(v[0], v[1], v[2], m, var, training);
                return ad::sum(ad::mul(y, t.constant(readout)));
            },
            {random_matrix(rng, 9, 3), random_matrix(rng, 1, 3), random_matrix(rng, 1, 3)}, 1e-4);
        EXPECT_LT(err, 1e-3) << "training=" << training;
    }
}

TEST(Determinism, RepeatedConvIsBitIdentical) {
    auto run = [] {
        std::mt19937_64 rng(31);
        ad::Tape tape;
        auto coords = random_coords(rng, 8, 0.3);
        auto t = make_tensor(tape, coords, random_matrix(rng, static_cast<Index>(coords.size()), 4));
        auto y = conv(conv(t, ConvWeights{tape.constant(random_matrix(rng, 27 * 4, 4)), {}, 3}),
                      ConvWeights{tape.constant(random_matrix(rng, 8 * 4, 2)), {}, 2}, 2);
        return std::make_pair(y.coordinates(), y.features.value());
    };
    auto a = run();
    auto b = run();
    EXPECT_EQ(a.first, b.first);
    EXPECT_EQ(a.second, b.second);
}
