#include <gtest/gtest.h>

#include <cmath>
#include <functional>
#include <numbers>

#include "helpers.hpp"
#include "loopmem/grad_check.hpp"
#include "loopmem/ops.hpp"
#include "loopmem/reference.hpp"
#include "loopmem/serialize.hpp"

using namespace loopmem;
using loopmem::testing::random_tensor;
using loopmem::testing::to_vector;

// ---------------------------------------------------------------------------
// Tensor

TEST(Tensor, RejectsZeroDimensionsAndSizeMismatch) {
    EXPECT_THROW(Tensor({2, 0}, {}), ShapeError);
    EXPECT_THROW(Tensor({2, 3}, std::vector<double>(5, 0.0)), ShapeError);
    EXPECT_NO_THROW(Tensor({2, 3}, std::vector<double>(6, 0.0)));
}

TEST(Tensor, CopiesAliasAndCloneIsDeep) {
    Tensor a({2}, {1.0, 2.0});
    Tensor alias = a;
    Tensor deep = a.clone();
    a.mutable_data()[0] = 9.0;
    EXPECT_EQ(alias.data()[0], 9.0);
    EXPECT_EQ(deep.data()[0], 1.0);
    EXPECT_TRUE(a.same_storage(alias));
    EXPECT_FALSE(a.same_storage(deep));
}

TEST(Tensor, GradIsAbsentUntilUsedAndMatchesDataLength) {
    Tensor a = Tensor::zeros({3}, true);
    EXPECT_FALSE(a.has_grad());
    Graph g;
    Tensor loss = sum(g, a);
    g.backward(loss);
    ASSERT_TRUE(a.has_grad());
    EXPECT_EQ(a.grad().size(), a.numel());
}

// ---------------------------------------------------------------------------
// matmul

TEST(Matmul, IdentityTimesMatrix) {
    Graph g;
    Tensor eye({2, 2}, {1, 0, 0, 1});
    Tensor m({2, 2}, {0.3, -1.5, 2.25, 7.0});
    EXPECT_EQ(to_vector(matmul(g, eye, m)), to_vector(m));
}

TEST(Matmul, HandComputedColumn) {
    Graph g;
    Tensor c = matmul(g, Tensor({2, 2}, {1, 2, 3, 4}), Tensor({2, 1}, {5, 6}));
    EXPECT_EQ(c.shape(), (Shape{2, 1}));
    EXPECT_EQ(to_vector(c), (std::vector<double>{17, 39}));
}

TEST(Matmul, MismatchNamesBothShapes) {
    Graph g;
    try {
        matmul(g, Tensor::zeros({2, 3}), Tensor::zeros({4, 5}));
        FAIL() << "expected ShapeError";
    } catch (const ShapeError& e) {
        const std::string msg = e.what();
        EXPECT_NE(msg.find("[2x3]"), std::string::npos) << msg;
        EXPECT_NE(msg.find("[4x5]"), std::string::npos) << msg;
    }
}

TEST(Matmul, MatchesTripleLoopOracleBitForBit) {
    for (std::uint64_t seed = 0; seed < 100; ++seed) {
        Rng rng(seed);
        Tensor a = random_tensor(rng, {4, 5}, 1.0, false);
        Tensor b = random_tensor(rng, {5, 3}, 1.0, false);
        Graph g;
        EXPECT_EQ(to_vector(matmul(g, a, b)), reference::matmul(a.data(), b.data(), 4, 5, 3)) << "seed " << seed;
    }
}

TEST(Matmul, BatchedLeadingDimsBroadcastAgainstSharedRight) {
    Rng rng(3);
    Tensor a = random_tensor(rng, {2, 3, 4}, 1.0, false);
    Tensor b = random_tensor(rng, {4, 2}, 1.0, false);
    Graph g;
    Tensor c = matmul(g, a, b);
    EXPECT_EQ(c.shape(), (Shape{2, 3, 2}));
    EXPECT_EQ(to_vector(c), reference::matmul(a.data(), b.data(), 6, 4, 2));
}

// ---------------------------------------------------------------------------
// layer norm, softmax, activations

TEST(LayerNorm, ConstantRowCollapsesToBias) {
    Graph g;
    Tensor y = layer_norm(g, Tensor::full({1, 4}, 2.5), Tensor::full({4}, 1.0), Tensor::zeros({4}));
    for (double v : y.data()) {
        EXPECT_EQ(v, 0.0);
    }
}

TEST(LayerNorm, TwoElementRowWithTinyEps) {
    Graph g;
    Tensor y = layer_norm(g, Tensor({1, 2}, {1.0, 3.0}), Tensor::full({2}, 1.0), Tensor::zeros({2}), 1e-14);
    EXPECT_NEAR(y.data()[0], -1.0, 1e-12);
    EXPECT_NEAR(y.data()[1], 1.0, 1e-12);
}

TEST(LayerNorm, RowNormMatchesVarianceIdentity) {
    Rng rng(11);
    const std::size_t d = 16;
    Tensor x = random_tensor(rng, {3, d}, 0.05, false);
    Graph g;
    Tensor y = layer_norm(g, x, Tensor::full({d}, 1.0), Tensor::zeros({d}));
    for (std::size_t r = 0; r < 3; ++r) {
        double mu = 0.0;
        for (std::size_t j = 0; j < d; ++j) {
            mu += x.data()[r * d + j];
        }
        mu /= static_cast<double>(d);
        double var = 0.0;
        double norm = 0.0;
        for (std::size_t j = 0; j < d; ++j) {
            var += std::pow(x.data()[r * d + j] - mu, 2);
            norm += std::pow(y.data()[r * d + j], 2);
        }
        var /= static_cast<double>(d);
        EXPECT_NEAR(std::sqrt(norm), std::sqrt(static_cast<double>(d) * var / (var + kLayerNormEps)), 1e-12);
    }
}

TEST(Softmax, ClosedFormExamples) {
    Graph g;
    Tensor a = softmax_rows(g, Tensor({1, 3}, {0, 0, 0}));
    for (double v : a.data()) {
        EXPECT_NEAR(v, 1.0 / 3.0, 1e-15);
    }
    Tensor b = softmax_rows(g, Tensor({1, 2}, {0, std::log(3.0)}));
    EXPECT_NEAR(b.data()[0], 0.25, 1e-15);
    EXPECT_NEAR(b.data()[1], 0.75, 1e-15);
}

TEST(Softmax, RowsSumToOneAndShiftInvariant) {
    for (std::uint64_t seed = 0; seed < 100; ++seed) {
        Rng rng(seed);
        Tensor x = random_tensor(rng, {4, 7}, 5.0, false);
        std::vector<double> shifted = to_vector(x);
        for (double& v : shifted) {
            v += 123.0;
        }
        Graph g;
        Tensor p = softmax_rows(g, x);
        Tensor q = softmax_rows(g, Tensor({4, 7}, shifted));
        for (std::size_t r = 0; r < 4; ++r) {
            double s = 0.0;
            for (std::size_t j = 0; j < 7; ++j) {
                s += p.data()[r * 7 + j];
                EXPECT_NEAR(p.data()[r * 7 + j], q.data()[r * 7 + j], 1e-12);
            }
            EXPECT_NEAR(s, 1.0, 1e-12);
        }
    }
}

TEST(Softmax, MonotoneInItsInput) {
    Graph g;
    Tensor p = softmax_rows(g, Tensor({1, 3}, {0.1, 0.2, 0.3}));
    Tensor q = softmax_rows(g, Tensor({1, 3}, {0.1, 0.5, 0.3}));
    EXPECT_GT(q.data()[1], p.data()[1]);
}

TEST(Activation, ClosedFormValues) {
    Graph g;
    EXPECT_EQ(activation(g, Activation::sigmoid, Tensor({1}, {0.0})).item(), 0.5);
    EXPECT_NEAR(activation(g, Activation::softplus, Tensor({1}, {-7.0})).item(), 9.11466e-4, 1e-9);
    EXPECT_NEAR(activation(g, Activation::sigmoid, Tensor({1}, {3.0})).item(), 0.952574, 1e-6);
    EXPECT_NEAR(activation(g, Activation::sigmoid, Tensor({1}, {-3.0})).item(), 0.047426, 1e-6);
    EXPECT_EQ(activation(g, Activation::gelu, Tensor({1}, {0.0})).item(), 0.0);
}

TEST(Activation, ExtremeInputsStayFinite) {
    Graph g;
    Tensor x({4}, {-800.0, -40.0, 40.0, 800.0});
    for (auto kind : {Activation::sigmoid, Activation::softplus, Activation::gelu}) {
        EXPECT_TRUE(activation(g, kind, x).all_finite());
    }
    Tensor sp = softplus(g, x);
    EXPECT_EQ(sp.data()[3], 800.0);
    EXPECT_GT(sp.data()[0], 0.0 - 1e-300);
    EXPECT_EQ(sigmoid(g, x).data()[0], 0.0);
}

// ---------------------------------------------------------------------------
// cross entropy

TEST(CrossEntropy, ClosedFormExamples) {
    Graph g;
    std::vector<TokenId> t0{0};
    EXPECT_NEAR(cross_entropy(g, Tensor({1, 1, 2}, {0, 0}), t0).item(), std::numbers::ln2, 1e-15);
    EXPECT_NEAR(cross_entropy(g, Tensor({1, 1, 2}, {10, 0}), t0).item(), std::log1p(std::exp(-10.0)), 1e-15);
}

TEST(CrossEntropy, IgnoredPositionsAreExcludedFromTheMean) {
    Graph g;
    std::vector<TokenId> t{0, -100};
    Tensor logits({1, 2, 2}, {0, 0, 50, -50});
    EXPECT_NEAR(cross_entropy(g, logits, t).item(), std::numbers::ln2, 1e-15);
}

TEST(CrossEntropy, AllIgnoredIsAnError) {
    Graph g;
    std::vector<TokenId> t{-100, -100};
    try {
        cross_entropy(g, Tensor::zeros({1, 2, 3}), t);
        FAIL();
    } catch (const Error& e) {
        EXPECT_NE(std::string(e.what()).find("empty loss support"), std::string::npos);
    }
}

TEST(CrossEntropy, OutOfRangeTargetReportsPosition) {
    Graph g;
    std::vector<TokenId> t{1, 7};
    try {
        cross_entropy(g, Tensor::zeros({1, 2, 3}), t);
        FAIL();
    } catch (const IndexError& e) {
        EXPECT_NE(std::string(e.what()).find("position 1"), std::string::npos) << e.what();
    }
}

TEST(CrossEntropy, LargeLogitsDoNotOverflow) {
    Graph g;
    std::vector<TokenId> t{1};
    const double v = cross_entropy(g, Tensor({1, 1, 2}, {1000.0, 0.0}), t).item();
    EXPECT_NEAR(v, 1000.0, 1e-9);
}

// ---------------------------------------------------------------------------
// backward

TEST(Backward, SumGivesOnes) {
    Tensor x({3}, {4, 5, 6}, true);
    Graph g;
    g.backward(sum(g, x));
    EXPECT_EQ(to_vector(Tensor({3}, {x.grad().begin(), x.grad().end()})), (std::vector<double>{1, 1, 1}));
}

TEST(Backward, SquareGivesTwiceX) {
    Tensor x({3}, {1, 2, 3}, true);
    Graph g;
    g.backward(sum(g, mul(g, x, x)));
    EXPECT_EQ(std::vector<double>(x.grad().begin(), x.grad().end()), (std::vector<double>{2, 4, 6}));
}

TEST(Backward, FanOutAccumulates) {
    Tensor x({2}, {1, -1}, true);
    Graph g;
    g.backward(sum(g, add(g, x, x)));
    EXPECT_EQ(std::vector<double>(x.grad().begin(), x.grad().end()), (std::vector<double>{2, 2}));
}

TEST(Backward, SecondCallIsAStateError) {
    Tensor x({2}, {1, 2}, true);
    Graph g;
    Tensor loss = sum(g, x);
    g.backward(loss);
    EXPECT_THROW(g.backward(loss), StateError);
    g.reset();
    Tensor again = sum(g, x);
    EXPECT_NO_THROW(g.backward(again));
}

TEST(Backward, NonScalarLossIsAShapeError) {
    Tensor x({2}, {1, 2}, true);
    Graph g;
    EXPECT_THROW(g.backward(scale(g, x, 2.0)), ShapeError);
}

TEST(Backward, VisitsNodesInReverseCreationOrderOnce) {
    Tensor x({2}, {1, 2}, true);
    Graph g;
    Tensor a = scale(g, x, 2.0);
    Tensor b = mul(g, a, x);
    Tensor c = sum(g, b);
    g.backward(c);
    ASSERT_EQ(g.nodes().size(), 3u);
    EXPECT_EQ(g.visit_order(), (std::vector<std::size_t>{2, 1, 0}));
    EXPECT_EQ(g.nodes()[1].inputs, (std::vector<std::ptrdiff_t>{0, -1}));
}

TEST(Backward, InferenceModeRecordsNothing) {
    Tensor x({2}, {1, 2}, true);
    Graph g(Graph::Mode::inference);
    Tensor y = sum(g, mul(g, x, x));
    EXPECT_TRUE(g.nodes().empty());
    EXPECT_FALSE(y.requires_grad());
}

TEST(Backward, RepeatedPassesAreBitIdentical) {
    Rng rng(21);
    Tensor x = random_tensor(rng, {3, 5});
    Tensor w = random_tensor(rng, {5, 4});
    auto run = [&] {
        x.zero_grad();
        w.zero_grad();
        Graph g;
        Tensor loss = sum(g, softmax_rows(g, gelu(g, matmul(g, x, w))));
        loss = add(g, loss, sum(g, mul(g, w, w)));
        g.backward(loss);
        return std::pair{loss.item(), std::vector<double>(w.grad().begin(), w.grad().end())};
    };
    EXPECT_EQ(run(), run());
}

// ---------------------------------------------------------------------------
// grad_check

TEST(GradCheck, SquareAtThree) {
    Tensor x({1}, {3.0}, true);
    std::vector<NamedTensor> p{{"x", x}};
    GradCheckReport r = grad_check([&](Graph& g) { return mul(g, x, x); }, p);
    EXPECT_TRUE(r.passed);
    EXPECT_NEAR(x.grad()[0], 6.0, 1e-12);
    EXPECT_LT(r.max_rel_error, 1e-8);
}

TEST(GradCheck, LayerNormWithRandomAffine) {
    Rng rng(8);
    Tensor x = random_tensor(rng, {3, 8});
    Tensor gain = random_tensor(rng, {8});
    Tensor bias = random_tensor(rng, {8});
    Tensor w = random_tensor(rng, {3, 8}, 1.0, false);
    std::vector<NamedTensor> p{{"x", x}, {"gain", gain}, {"bias", bias}};
    GradCheckReport r = grad_check([&](Graph& g) { return sum(g, mul(g, layer_norm(g, x, gain, bias), w)); }, p);
    EXPECT_LT(r.max_rel_error, 1e-6);
}

TEST(GradCheck, DetectsAWrongBackwardRule) {
    Tensor x({3}, {0.5, -1.0, 2.0}, true);
    // y = x^2 with a backward rule that forgets the factor 2
    auto broken_square = [&](Graph& g) {
        std::vector<double> out;
        for (double v : x.data()) {
            out.push_back(v * v);
        }
        Tensor y({3}, out, g.needs_grad({&x}));
        if (y.requires_grad()) {
            auto xs = x.storage_ptr();
            auto ys = y.storage_ptr();
            g.record("broken_square", {&x}, y, [xs, ys] {
                auto& gx = xs->grad_buffer();
                for (std::size_t i = 0; i < 3; ++i) {
                    gx[i] += ys->grad[i] * xs->data[i];
                }
            });
        }
        return sum(g, y);
    };
    std::vector<NamedTensor> p{{"x", x}};
    EXPECT_FALSE(grad_check(broken_square, p).passed);
}

TEST(GradCheck, NonDeterministicFunctionIsRejected) {
    Tensor x({1}, {1.0}, true);
    int calls = 0;
    std::vector<NamedTensor> p{{"x", x}};
    auto flaky = [&](Graph& g) { return affine(g, x, 1.0, static_cast<double>(calls++)); };
    EXPECT_THROW(grad_check(flaky, p), StateError);
}

TEST(GradCheck, SubsamplesLargeTensorsDeterministically) {
    EXPECT_EQ(grad_check_indices(10, 24, 1).size(), 10u);
    auto a = grad_check_indices(1000, 24, 5);
    EXPECT_EQ(a.size(), 24u);
    EXPECT_EQ(a, grad_check_indices(1000, 24, 5));
    EXPECT_NE(a, grad_check_indices(1000, 24, 6));
}

// Every differentiable op, random small inputs, 100 seeds. Each case draws its
// inputs once; the loss projects the op output onto fixed random weights.
struct OpCase {
    const char* name;
    std::function<std::vector<NamedTensor>(Rng&)> inputs;
    std::function<Tensor(Graph&, const std::vector<NamedTensor>&)> op;
};

std::ostream& operator<<(std::ostream& os, const OpCase& c) { return os << c.name; }

class OpGradients : public ::testing::TestWithParam<OpCase> {};

TEST_P(OpGradients, PassesCentralDifferencesOver100Seeds) {
    const OpCase& c = GetParam();
    double worst = 0.0;
    for (std::uint64_t seed = 0; seed < 100; ++seed) {
        Rng rng(mix_seed(seed, 77));
        std::vector<NamedTensor> in = c.inputs(rng);
        Tensor probe;
        {
            Graph g(Graph::Mode::inference);
            probe = c.op(g, in);
        }
        Tensor w = random_tensor(rng, probe.shape(), 1.0, false);
        auto loss = [&](Graph& g) { return sum(g, mul(g, c.op(g, in), w)); };
        GradCheckReport r = grad_check(loss, in);
        worst = std::max(worst, r.max_rel_error);
        ASSERT_TRUE(r.passed) << c.name << " seed " << seed << " rel " << r.max_rel_error;
    }
    EXPECT_LT(worst, 1e-4);
}

namespace {

std::vector<NamedTensor> tensors(Rng& rng, std::initializer_list<std::pair<const char*, Shape>> specs) {
    std::vector<NamedTensor> out;
    for (const auto& [name, shape] : specs) {
        out.push_back({name, random_tensor(rng, shape)});
    }
    return out;
}

const std::vector<TokenId> kIds{3, 0, 4, 4, 1, 2};

}  // namespace

INSTANTIATE_TEST_SUITE_P(
    AllOps, OpGradients,
    ::testing::Values(
        OpCase{"add_broadcast", [](Rng& r) { return tensors(r, {{"a", {2, 3, 4}}, {"b", {4}}}); },
               [](Graph& g, const auto& t) { return add(g, t[0].tensor, t[1].tensor); }},
        OpCase{"sub", [](Rng& r) { return tensors(r, {{"a", {3, 4}}, {"b", {3, 4}}}); },
               [](Graph& g, const auto& t) { return sub(g, t[0].tensor, t[1].tensor); }},
        OpCase{"mul_scalar_broadcast", [](Rng& r) { return tensors(r, {{"a", {3, 4}}, {"b", {1}}}); },
               [](Graph& g, const auto& t) { return mul(g, t[0].tensor, t[1].tensor); }},
        OpCase{"mul_suffix_broadcast", [](Rng& r) { return tensors(r, {{"a", {2, 3, 4}}, {"b", {3, 4}}}); },
               [](Graph& g, const auto& t) { return mul(g, t[0].tensor, t[1].tensor); }},
        OpCase{"affine", [](Rng& r) { return tensors(r, {{"x", {5}}}); },
               [](Graph& g, const auto& t) { return affine(g, t[0].tensor, -1.7, 0.3); }},
        OpCase{"scale_rows", [](Rng& r) { return tensors(r, {{"x", {2, 3, 4}}, {"s", {2, 3}}}); },
               [](Graph& g, const auto& t) { return scale_rows(g, t[0].tensor, t[1].tensor); }},
        OpCase{"matmul", [](Rng& r) { return tensors(r, {{"a", {4, 5}}, {"b", {5, 3}}}); },
               [](Graph& g, const auto& t) { return matmul(g, t[0].tensor, t[1].tensor); }},
        OpCase{"matmul_batched_shared", [](Rng& r) { return tensors(r, {{"a", {2, 3, 4}}, {"b", {4, 2}}}); },
               [](Graph& g, const auto& t) { return matmul(g, t[0].tensor, t[1].tensor); }},
        OpCase{"matmul_batched", [](Rng& r) { return tensors(r, {{"a", {2, 3, 4}}, {"b", {2, 4, 2}}}); },
               [](Graph& g, const auto& t) { return matmul(g, t[0].tensor, t[1].tensor); }},
        OpCase{"transpose", [](Rng& r) { return tensors(r, {{"x", {3, 5}}}); },
               [](Graph& g, const auto& t) { return transpose(g, t[0].tensor); }},
        OpCase{"reshape", [](Rng& r) { return tensors(r, {{"x", {2, 6}}}); },
               [](Graph& g, const auto& t) { return reshape(g, t[0].tensor, {3, 4}); }},
        OpCase{"slice_rows", [](Rng& r) { return tensors(r, {{"x", {5, 3}}}); },
               [](Graph& g, const auto& t) { return slice_rows(g, t[0].tensor, 1, 3); }},
        OpCase{"embedding", [](Rng& r) { return tensors(r, {{"table", {5, 3}}}); },
               [](Graph& g, const auto& t) { return embedding(g, t[0].tensor, kIds, {2, 3}); }},
        OpCase{"append_feature", [](Rng& r) { return tensors(r, {{"x", {2, 3}}}); },
               [](Graph& g, const auto& t) { return append_feature(g, t[0].tensor, 1.0); }},
        OpCase{"element", [](Rng& r) { return tensors(r, {{"x", {4}}}); },
               [](Graph& g, const auto& t) { return element(g, t[0].tensor, 2); }},
        OpCase{"mean", [](Rng& r) { return tensors(r, {{"x", {3, 4}}}); },
               [](Graph& g, const auto& t) { return mean(g, t[0].tensor); }},
        OpCase{"layer_norm", [](Rng& r) { return tensors(r, {{"x", {3, 8}}, {"gain", {8}}, {"bias", {8}}}); },
               [](Graph& g, const auto& t) { return layer_norm(g, t[0].tensor, t[1].tensor, t[2].tensor); }},
        OpCase{"layer_norm_gain_only", [](Rng& r) { return tensors(r, {{"x", {2, 2, 6}}, {"gain", {6}}}); },
               [](Graph& g, const auto& t) { return layer_norm(g, t[0].tensor, t[1].tensor); }},
        OpCase{"softmax_rows", [](Rng& r) { return tensors(r, {{"x", {3, 6}}}); },
               [](Graph& g, const auto& t) { return softmax_rows(g, t[0].tensor); }},
        OpCase{"sigmoid", [](Rng& r) { return tensors(r, {{"x", {7}}}); },
               [](Graph& g, const auto& t) { return sigmoid(g, t[0].tensor); }},
        OpCase{"softplus", [](Rng& r) { return tensors(r, {{"x", {7}}}); },
               [](Graph& g, const auto& t) { return softplus(g, t[0].tensor); }},
        OpCase{"gelu", [](Rng& r) { return tensors(r, {{"x", {7}}}); },
               [](Graph& g, const auto& t) { return gelu(g, t[0].tensor); }},
        OpCase{"cross_entropy", [](Rng& r) { return tensors(r, {{"logits", {2, 3, 5}}}); },
               [](Graph& g, const auto& t) { return cross_entropy(g, t[0].tensor, kIds); }},
        OpCase{"causal_attention",
               [](Rng& r) { return tensors(r, {{"q", {2, 4, 6}}, {"k", {2, 4, 6}}, {"v", {2, 4, 6}}}); },
               [](Graph& g, const auto& t) { return causal_attention(g, t[0].tensor, t[1].tensor, t[2].tensor, 2); }}),
    [](const ::testing::TestParamInfo<OpCase>& info) { return std::string(info.param.name); });

// ---------------------------------------------------------------------------
// attention against direct summation

TEST(CausalAttention, MatchesReferenceAndIgnoresTheFuture) {
    Rng rng(4);
    const std::size_t b = 2, t = 5, d = 6, h = 3;
    Tensor q = random_tensor(rng, {b, t, d}, 1.0, false);
    Tensor k = random_tensor(rng, {b, t, d}, 1.0, false);
    Tensor v = random_tensor(rng, {b, t, d}, 1.0, false);
    Graph g;
    Tensor out = causal_attention(g, q, k, v, h);
    auto expect = reference::attention(to_vector(q), to_vector(k), to_vector(v), b, t, d, h);
    for (std::size_t i = 0; i < expect.size(); ++i) {
        EXPECT_NEAR(out.data()[i], expect[i], 1e-13);
    }
    // Changing the last position's keys/values leaves earlier outputs untouched.
    Tensor k2 = k.clone();
    Tensor v2 = v.clone();
    for (std::size_t bi = 0; bi < b; ++bi) {
        for (std::size_t j = 0; j < d; ++j) {
            k2.mutable_data()[(bi * t + t - 1) * d + j] += 5.0;
            v2.mutable_data()[(bi * t + t - 1) * d + j] -= 3.0;
        }
    }
    Tensor out2 = causal_attention(g, q, k2, v2, h);
    for (std::size_t bi = 0; bi < b; ++bi) {
        for (std::size_t i = 0; i < (t - 1) * d; ++i) {
            EXPECT_EQ(out.data()[bi * t * d + i], out2.data()[bi * t * d + i]);
        }
    }
}

TEST(Embedding, OutOfRangeIdReportsPosition) {
    Graph g;
    std::vector<TokenId> ids{0, 9};
    try {
        embedding(g, Tensor::zeros({4, 2}), ids, {2});
        FAIL();
    } catch (const IndexError& e) {
        EXPECT_NE(std::string(e.what()).find("1"), std::string::npos);
    }
}

// ---------------------------------------------------------------------------
// RNG

TEST(Rng, SameSeedSameStream) {
    Rng a(42), b(42), c(43);
    for (int i = 0; i < 100; ++i) {
        const auto x = a.next_u64();
        EXPECT_EQ(x, b.next_u64());
        (void)c;
    }
    EXPECT_NE(Rng(42).next_u64(), Rng(43).next_u64());
}

TEST(Rng, UniformAndBelowStayInRange) {
    Rng r(1);
    double total = 0.0;
    for (int i = 0; i < 20000; ++i) {
        const double u = r.uniform();
        ASSERT_GE(u, 0.0);
        ASSERT_LT(u, 1.0);
        total += u;
        ASSERT_LT(r.below(7), 7u);
    }
    EXPECT_NEAR(total / 20000.0, 0.5, 0.01);
}

TEST(Rng, TruncatedNormalWithinTwoSigma) {
    Rng r(2);
    for (int i = 0; i < 10000; ++i) {
        ASSERT_LE(std::abs(r.truncated_normal(0.02)), 0.04);
    }
}

TEST(Rng, ShuffleIsAPermutation) {
    Rng r(3);
    std::vector<std::size_t> v(50);
    std::iota(v.begin(), v.end(), std::size_t{0});
    auto w = v;
    r.shuffle(w);
    EXPECT_NE(v, w);
    std::sort(w.begin(), w.end());
    EXPECT_EQ(v, w);
}

// ---------------------------------------------------------------------------
// Serialization

TEST(Serialize, RoundTripsF64Exactly) {
    Rng rng(5);
    std::vector<NamedTensor> ts{{"a", random_tensor(rng, {2, 3}, 1.0, false)}, {"b", Tensor({1}, {-0.0})}};
    const std::string bytes = encode_tensors(ts, {{"k", "v"}});
    TensorFile f = decode_tensors(bytes);
    ASSERT_EQ(f.tensors.size(), 2u);
    EXPECT_EQ(f.meta["k"], "v");
    EXPECT_EQ(to_vector(*f.find("a")), to_vector(ts[0].tensor));
    EXPECT_EQ(f.find("a")->shape(), (Shape{2, 3}));
    EXPECT_TRUE(std::signbit(f.find("b")->data()[0]));
    EXPECT_EQ(f.find("missing"), nullptr);
}

TEST(Serialize, F32StoresRoundedValues) {
    std::vector<NamedTensor> ts{{"x", Tensor({2}, {0.1, 3.0})}};
    TensorFile f = decode_tensors(encode_tensors(ts, {}, DType::f32));
    EXPECT_EQ(f.find("x")->data()[0], static_cast<double>(0.1f));
    EXPECT_EQ(f.find("x")->data()[1], 3.0);
}

TEST(Serialize, ManifestListsNameShapeDtypeOffset) {
    std::vector<NamedTensor> ts{{"a", Tensor::zeros({2})}, {"b", Tensor::zeros({3, 1})}};
    const std::string bytes = encode_tensors(ts);
    const auto manifest = nlohmann::json::parse(bytes.substr(0, bytes.find('\n')));
    ASSERT_EQ(manifest["tensors"].size(), 2u);
    EXPECT_EQ(manifest["tensors"][1]["name"], "b");
    EXPECT_EQ(manifest["tensors"][1]["shape"], nlohmann::json::array({3, 1}));
    EXPECT_EQ(manifest["tensors"][1]["dtype"], "f64");
    EXPECT_EQ(manifest["tensors"][1]["byte_offset"], 16);
}

TEST(Serialize, TruncatedOrExtendedBlobIsCorrupt) {
    std::vector<NamedTensor> ts{{"a", Tensor::zeros({4})}};
    const std::string bytes = encode_tensors(ts);
    EXPECT_THROW(decode_tensors(bytes.substr(0, bytes.size() - 1)), CorruptCheckpoint);
    EXPECT_THROW(decode_tensors(bytes + "x"), CorruptCheckpoint);
    EXPECT_THROW(decode_tensors("not a manifest"), CorruptCheckpoint);
    EXPECT_THROW(decode_tensors(""), CorruptCheckpoint);
}

TEST(Serialize, DamagedManifestIsCorrupt) {
    std::vector<NamedTensor> ts{{"a", Tensor::zeros({4})}};
    std::string bytes = encode_tensors(ts);
    const auto pos = bytes.find("\"byte_offset\":0");
    ASSERT_NE(pos, std::string::npos);
    bytes.replace(pos, std::string("\"byte_offset\":0").size(), "\"byte_offset\":8");
    EXPECT_THROW(decode_tensors(bytes), CorruptCheckpoint);
}

TEST(Serialize, FileRoundTripAndMissingFile) {
    loopmem::testing::TempDir dir("ser");
    std::vector<NamedTensor> ts{{"w", Tensor({2}, {1.5, -2.5})}};
    save_tensors(dir / "t.bin", ts, {{"step", 3}});
    TensorFile f = load_tensors(dir / "t.bin");
    EXPECT_EQ(f.meta["step"], 3);
    EXPECT_EQ(to_vector(*f.find("w")), (std::vector<double>{1.5, -2.5}));
    EXPECT_THROW(load_tensors(dir / "nope.bin"), Error);
}
