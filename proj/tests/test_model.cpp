#include "lamedit/model.hpp"
#include "lamedit/solvers.hpp"
#include "oracle_inputs.hpp"
#include "oracle_values.hpp"
#include "test_support.hpp"

#include <gtest/gtest.h>

using namespace lamedit;
using testing_support::random_model;
using testing_support::rel_diff;

namespace {

ToyModel zero_model(Index d, Index h, int layers) {
  std::vector<LamLayer> ls(static_cast<std::size_t>(layers),
                           LamLayer{Matrix::Zero(h, d), Matrix::Zero(d, h), Vector::Ones(d), Vector::Zero(d)});
  return ToyModel(ls, Matrix::Identity(d, d), {1});
}

}  // namespace

TEST(Forward, ZeroWeightsGiveIdentityResidual) {
  const auto model = zero_model(4, 6, 3);
  const Vector x = (Vector(4) << 0.5, -1.0, 2.0, 0.25).finished();
  const auto t = model.forward(x);
  ASSERT_EQ(t.hidden.size(), 4u);
  ASSERT_EQ(t.keys.size(), 3u);
  EXPECT_EQ(t.output(), x);
  for (const auto& k : t.keys) EXPECT_EQ(k, Vector::Zero(6));
}

TEST(Forward, HandArithmeticSingleLayer) {
  std::vector<LamLayer> ls{{Matrix::Identity(2, 2), Matrix::Identity(2, 2), Vector::Ones(2), Vector::Zero(2)}};
  const ToyModel model(ls, Matrix::Identity(2, 2), {1}, NormKind::kIdentity, ActivationKind::kIdentity);
  const auto t = model.forward(Vector::Unit(2, 0));
  EXPECT_EQ(t.keys[0], Vector::Unit(2, 0));
  EXPECT_EQ(t.output(), (Vector(2) << 2.0, 0.0).finished());
}

TEST(Forward, MatchesScriptedOracle) {
  const auto model = oracle::forward_model();
  const Matrix expected = oracle::from_row_major(oracle::kForwardOutputs, oracle::kNx, oracle::kD);
  for (int n = 0; n < oracle::kNx; ++n) {
    const Vector out = model.output(oracle::forward_input(n));
    EXPECT_LE((out - expected.row(n).transpose()).norm(), 1e-9 * out.norm()) << "input " << n;
    EXPECT_EQ(model.predict(oracle::forward_input(n)), static_cast<TokenId>(oracle::kForwardPredictions[n]));
  }
}

TEST(ComputeKey, MatchesScriptedOracle) {
  const auto model = oracle::forward_model();
  const Matrix expected = oracle::from_row_major(oracle::kForwardKeysX0, oracle::kL, oracle::kH);
  const auto t = model.forward(oracle::forward_input(0));
  for (int l = 0; l < oracle::kL; ++l)
    EXPECT_LE((t.keys[static_cast<std::size_t>(l)] - expected.row(l).transpose()).norm(), 1e-9 * expected.row(l).norm());
}

TEST(ComputeKey, EqualsTraceKeyExactly) {
  Rng rng(11);
  const auto model = random_model(rng, 6, 10, 4, 8, {2, 4});
  const Vector x = rng.normal_vector(6);
  const auto t = model.forward(x);
  for (int l = 1; l <= 4; ++l) EXPECT_EQ(model.compute_key(l, t.hidden[static_cast<std::size_t>(l - 1)]), t.keys[l - 1]);
}

TEST(ComputeKey, ReluGatesNegativePreactivation) {
  Matrix w_in(2, 2);
  w_in << 1.0, -1.0, 0.0, 1.0;
  std::vector<LamLayer> ls{{w_in, Matrix::Zero(2, 2), Vector::Ones(2), Vector::Zero(2)}};
  const ToyModel model(ls, Matrix::Identity(2, 2), {1}, NormKind::kIdentity, ActivationKind::kRelu);
  const Vector k = model.compute_key(1, (Vector(2) << 0.3, 0.5).finished());
  EXPECT_EQ(k(0), 0.0);
  EXPECT_DOUBLE_EQ(k(1), 0.5);
}

TEST(ComputeKey, RejectsOutOfRangeLayer) {
  Rng rng(1);
  const auto model = random_model(rng, 4, 6, 2, 4, {1});
  EXPECT_THROW(model.compute_key(0, Vector::Zero(4)), ShapeError);
  EXPECT_THROW(model.compute_key(3, Vector::Zero(4)), ShapeError);
  EXPECT_THROW(model.forward(Vector::Zero(5)), ShapeError);
}

TEST(Forward, ResidualAdditivity) {
  Rng rng(12);
  const auto model = random_model(rng, 8, 16, 5, 8, {1});
  for (int trial = 0; trial < 10; ++trial) {
    const Vector x = rng.normal_vector(8);
    const auto t = model.forward(x);
    Vector sum = Vector::Zero(8);
    for (int l = 1; l <= 5; ++l) sum += model.layer(l).w_out * t.keys[static_cast<std::size_t>(l - 1)];
    EXPECT_LE((t.output() - x - sum).cwiseAbs().maxCoeff(), 1e-10);
  }
}

TEST(Predict, ExactCodebookColumn) {
  Rng rng(3);
  Matrix cb(4, 6);
  for (Index j = 0; j < 6; ++j) cb.col(j) = rng.unit_vector(4);
  std::vector<LamLayer> ls{{Matrix::Zero(4, 4), Matrix::Zero(4, 4), Vector::Ones(4), Vector::Zero(4)}};
  const ToyModel model(ls, cb, {1});
  EXPECT_EQ(model.predict(cb.col(3)), 3u);
}

TEST(Predict, OrthogonalToAllButColumnZero) {
  Matrix cb = Matrix::Identity(3, 3);
  std::vector<LamLayer> ls{{Matrix::Zero(3, 3), Matrix::Zero(3, 3), Vector::Ones(3), Vector::Zero(3)}};
  const ToyModel model(ls, cb, {1});
  EXPECT_EQ(model.predict_from_output(Vector::Unit(3, 0) * 0.7), 0u);
}

TEST(Predict, TiesGoToLowestIndex) {
  Matrix cb(2, 3);
  cb << 1, 0, 1, 0, 1, 0;
  std::vector<LamLayer> ls{{Matrix::Zero(2, 2), Matrix::Zero(2, 2), Vector::Ones(2), Vector::Zero(2)}};
  const ToyModel model(ls, cb, {1});
  EXPECT_EQ(model.predict_from_output(Vector::Unit(2, 0)), 0u);
  EXPECT_EQ(model.predict_from_output(Vector::Ones(2)), 0u);
}

TEST(Predict, MatchesBruteForceAndIsScaleInvariant) {
  Rng rng(4);
  const auto model = random_model(rng, 8, 16, 3, 40, {2});
  for (int trial = 0; trial < 50; ++trial) {
    const Vector out = model.output(rng.normal_vector(8));
    std::size_t best = 0;
    double best_score = -1e300;
    for (Index j = 0; j < model.vocab_size(); ++j) {
      double s = 0.0;
      for (Index i = 0; i < 8; ++i) s += model.codebook()(i, j) * out(i);
      if (s > best_score) best_score = s, best = static_cast<std::size_t>(j);
    }
    EXPECT_EQ(model.predict_from_output(out), best);
    EXPECT_EQ(model.predict_from_output(3.5 * out), best);
  }
}

TEST(TargetValues, SingleEditLayerTakesFullResidual) {
  Rng rng(5);
  const auto model = random_model(rng, 6, 12, 3, 8, {2});
  const std::vector<EditRequest> reqs{{FactId{0}, LanguageId{0}, rng.normal_vector(6), 0, 5}};
  const auto kt = model.compute_keys_and_targets(reqs, 2);
  const auto t = model.forward(reqs[0].input);
  const Vector expected = model.layer(2).w_out * t.keys[1] + (model.codebook().col(5) - t.output());
  EXPECT_LE((kt.values.col(0) - expected).norm(), 1e-12 * expected.norm());
  EXPECT_EQ(kt.keys.col(0), t.keys[1]);
}

TEST(TargetValues, NoOpRequestGivesZeroErrorTerm) {
  // Identity-norm model whose output for x is exactly a codebook column.
  const Index d = 3, h = 4;
  Matrix w_in = Matrix::Zero(h, d);
  w_in(0, 0) = 1.0;
  std::vector<LamLayer> ls{{w_in, Matrix::Zero(d, h), Vector::Ones(d), Vector::Zero(d)}};
  const ToyModel model(ls, Matrix::Identity(d, d), {1}, NormKind::kIdentity, ActivationKind::kRelu);
  const std::vector<EditRequest> reqs{{FactId{0}, LanguageId{0}, Vector::Unit(d, 0), 0, 0}};
  const auto kt = model.compute_keys_and_targets(reqs, 1);
  EXPECT_EQ(kt.values, model.layer(1).w_out * kt.keys);
  const Matrix c = Matrix::Identity(h, h);
  EXPECT_EQ(solve_memit(model.layer(1).w_out, kt.keys, kt.values, c, kt.keys * kt.keys.transpose(), 1.0),
            Matrix::Zero(d, h));
}

TEST(TargetValues, BottomToTopSpreadingHitsTarget) {
  Rng rng(8);
  const auto model = random_model(rng, 6, 24, 2, 6, {1, 2});
  const std::vector<EditRequest> reqs{{FactId{0}, LanguageId{0}, rng.normal_vector(6), 0, 4}};
  const Vector target = model.codebook().col(4);
  const Vector rho = target - model.output(reqs[0].input);

  auto kt1 = model.compute_keys_and_targets(reqs, 1);
  const Vector v1_expected = model.layer(1).w_out * kt1.keys.col(0) + rho / 2.0;
  EXPECT_LE((kt1.values.col(0) - v1_expected).norm(), 1e-12 * v1_expected.norm());

  // Nearly unregularized solves: lambda -> 0, no preserved constraint.
  const double lambda = 1e-10;
  const Matrix eye = Matrix::Identity(24, 24);
  ToyModel state = model;
  for (int layer : {1, 2}) {
    const auto kt = state.compute_keys_and_targets(reqs, layer);
    state.add_to_w_out(layer, solve_memit(state.layer(layer).w_out, kt.keys, kt.values, eye,
                                          kt.keys * kt.keys.transpose(), lambda));
  }
  EXPECT_LE((state.output(reqs[0].input) - target).norm(), 1e-5);
}

TEST(TargetValues, Errors) {
  Rng rng(9);
  const auto model = random_model(rng, 4, 8, 3, 5, {2});
  const std::vector<EditRequest> bad{{FactId{0}, LanguageId{0}, rng.normal_vector(4), 0, 5}};
  EXPECT_THROW(model.compute_keys_and_targets(bad, 2), InvalidRequestError);
  const std::vector<EditRequest> ok{{FactId{0}, LanguageId{0}, rng.normal_vector(4), 0, 1}};
  EXPECT_THROW(model.compute_keys_and_targets(ok, 1), ConfigError);
}

TEST(Model, UpdateReturnsCopy) {
  Rng rng(10);
  const auto model = random_model(rng, 4, 8, 2, 5, {1});
  const Matrix before = model.layer(1).w_out;
  const Matrix delta = rng.normal_matrix(4, 8);
  const auto edited = model.with_w_out_update(1, delta, 2.0);
  EXPECT_EQ(model.layer(1).w_out, before);
  EXPECT_EQ(edited.layer(1).w_out, before + 2.0 * delta);
  EXPECT_THROW(model.with_w_out_update(1, Matrix::Zero(3, 8)), ShapeError);
}

TEST(Model, ValidationRejectsBadShapes) {
  std::vector<LamLayer> ls{{Matrix::Zero(4, 3), Matrix::Zero(3, 4), Vector::Ones(3), Vector::Zero(3)}};
  EXPECT_THROW(ToyModel(ls, Matrix::Ones(3, 2), {1}), ShapeError);  // codebook not unit norm
  EXPECT_THROW(ToyModel(ls, Matrix::Identity(3, 3), {2}), ConfigError);
  EXPECT_THROW(ToyModel(ls, Matrix::Identity(3, 3), {}), ConfigError);
  ls[0].w_out(0, 0) = std::nan("");
  EXPECT_THROW(ToyModel(ls, Matrix::Identity(3, 3), {1}), NumericalError);
}

TEST(Model, ContainerRoundTripIsExact) {
  Rng rng(13);
  const auto model = random_model(rng, 5, 9, 3, 7, {1, 3});
  const auto bytes = model.to_container().serialize();
  const auto back = ToyModel::from_container(MatrixContainer::deserialize(bytes));
  EXPECT_EQ(back.to_container().serialize(), bytes);
  EXPECT_EQ(back.edit_layers(), model.edit_layers());
  const Vector x = rng.normal_vector(5);
  EXPECT_EQ(back.output(x), model.output(x));
}
