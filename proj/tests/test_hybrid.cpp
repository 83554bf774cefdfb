#include <gtest/gtest.h>

#include <cmath>
#include <numbers>

#include "diglm/datagen.hpp"
#include "diglm/hybrid.hpp"
#include "oracles.hpp"

using namespace diglm;

namespace {

Matrix random_matrix(Eigen::Index r, Eigen::Index c, Rng& rng, double sd = 1.0) {
  Matrix m(r, c);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = rng.normal(0.0, sd);
  return m;
}

Vector random_labels(Eigen::Index n, std::size_t classes, Rng& rng) {
  Vector y(n);
  for (Eigen::Index i = 0; i < n; ++i) y[i] = static_cast<double>(rng.below(classes));
  return y;
}

HybridModel classifier(std::size_t dim, std::size_t classes, std::uint64_t seed, double lambda = 1.0) {
  Rng rng(seed);
  const std::vector<std::size_t> hidden = {8};
  HybridModel m{make_coupling_stack(dim, 2, hidden, Activation::tanh, rng, true, 0.2), LatentPrior::standard(dim),
                SoftmaxHead::build(dim, classes, rng, 0.5), lambda, 0.0};
  m.prior.log_variance = random_matrix(static_cast<Eigen::Index>(dim), 1, rng, 0.2).col(0);
  return m;
}

HybridModel uniform_identity_model(std::size_t dim, std::size_t classes) {
  return {FlowStack(dim, {}), LatentPrior::standard(dim), SoftmaxHead::zeros(dim, classes), 1.0, 0.0};
}

double naive_sum(const Vector& v) {
  double s = 0.0;
  for (Eigen::Index i = 0; i < v.size(); ++i) s += v[i];
  return s;
}

}  // namespace

TEST(JointLogLik, IdentityFlowUniformSoftmax) {
  const auto m = uniform_identity_model(2, 10);
  EXPECT_NEAR(joint_log_lik(m, Vector(Vector::Zero(2)), 3.0), -4.140462, 1e-6);
  EXPECT_NEAR(joint_log_lik(m, Vector(Vector::Zero(2)), 3.0), std::log(0.1) - std::log(2 * std::numbers::pi), 1e-14);
}

TEST(JointLogLik, DecomposesIntoDensityAndPredictiveTerms) {
  const auto m = classifier(3, 4, 1);
  Rng rng(2);
  for (int k = 0; k < 100; ++k) {
    const Vector x = random_matrix(3, 1, rng).col(0);
    const double y = static_cast<double>(rng.below(4));
    const double expected = log_px(m.flow, m.prior, x) + prediction_log_prob(model_outputs(m, x.transpose()).predictions[0], y);
    EXPECT_NEAR(joint_log_lik(m, x, y), expected, 1e-12);
  }
}

TEST(JointLogLik, BatchMatchesPerExample) {
  const auto m = classifier(4, 3, 5);
  Rng rng(6);
  const Matrix x = random_matrix(50, 4, rng);
  const Vector y = random_labels(50, 3, rng);
  const Vector batch = joint_log_lik(m, x, y);
  double per = 0.0;
  for (Eigen::Index i = 0; i < 50; ++i) per += joint_log_lik(m, Vector(x.row(i).transpose()), y[i]);
  EXPECT_NEAR(naive_sum(batch), per, 1e-10);
  EXPECT_NEAR(weighted_objective(m, x, y), per, 1e-10);
}

TEST(WeightedObjective, ReducesToPredictiveAtZeroLambda) {
  auto m = classifier(2, 3, 7, 0.0);
  Rng rng(8);
  const Matrix x = random_matrix(30, 2, rng);
  const Vector y = random_labels(30, 3, rng);
  EXPECT_NEAR(weighted_objective(m, x, y), naive_sum(head_log_lik(m.head, m.flow.forward(x).z, y)), 1e-10);
}

TEST(WeightedObjective, IsAffineInLambdaAndMatchesJacobianRegularizerForm) {
  auto m = classifier(3, 2, 9);
  Rng rng(10);
  const Matrix x = random_matrix(25, 3, rng);
  const Vector y = random_labels(25, 2, rng);
  m.lambda_gen = 0.0;
  const double j_pred = weighted_objective(m, x, y);
  m.lambda_gen = 1.0;
  const double j1 = weighted_objective(m, x, y);
  const double sum_lpx = naive_sum(model_log_px(m, x));
  for (double lam : {0.0, 0.5, 1.0, 2.0}) {
    m.lambda_gen = lam;
    const double j = weighted_objective(m, x, y);
    EXPECT_NEAR(j, j_pred + lam * sum_lpx, 1e-10);
    EXPECT_NEAR(j, j1 - (1.0 - lam) * sum_lpx, 1e-10);
  }
}

TEST(WeightedObjective, PerDimensionLambdaConvention) {
  TrainConfig cfg;
  cfg.lambda_gen = 0.01;
  cfg.lambda_per_dim = true;
  EXPECT_DOUBLE_EQ(cfg.effective_lambda(4), 0.0025);
  cfg.lambda_per_dim = false;
  EXPECT_DOUBLE_EQ(cfg.effective_lambda(4), 0.01);
}

TEST(SslObjective, Reductions) {
  auto m = classifier(2, 3, 11, 0.7);
  Rng rng(12);
  const Matrix xl = random_matrix(10, 2, rng), xu = random_matrix(15, 2, rng);
  const Vector yl = random_labels(10, 3, rng);
  const Matrix none(0, 2);
  EXPECT_NEAR(ssl_objective(m, {xl, yl, none}, 0.7, 2.0), weighted_objective(m, xl, yl), 1e-10);
  EXPECT_NEAR(ssl_objective(m, {none, Vector(), xu}, 0.7, 0.0), 0.7 * naive_sum(model_log_px(m, xu)), 1e-10);
  EXPECT_THROW(ssl_objective(m, {none, Vector(), none}, 0.7, 0.0), DataError);

  const auto u = uniform_identity_model(2, 5);
  const double no_em = ssl_objective(u, {none, Vector(), xu}, 1.0, 0.0);
  const double em = ssl_objective(u, {none, Vector(), xu}, 1.0, 0.3);
  EXPECT_NEAR(no_em - em, 15 * 0.3 * std::log(5.0), 1e-10);
}

TEST(SslObjective, EntropyNeedsClassifier) {
  HybridModel m{FlowStack(2, {}), LatentPrior::standard(2), GaussianHead::zeros(2), 1.0, 0.0};
  Rng rng(1);
  EXPECT_THROW(ssl_objective(m, {Matrix(0, 2), Vector(), random_matrix(3, 2, rng)}, 1.0, 0.5), ShapeError);
}

TEST(ObjectiveGradient, MatchesCentralDifferencesForEveryHead) {
  Rng rng(13);
  const std::vector<std::size_t> hidden = {6};
  const Matrix xl = random_matrix(7, 3, rng), xu = random_matrix(5, 3, rng);
  const Vector ycat = random_labels(7, 3, rng);
  const Vector yreal = random_matrix(7, 1, rng).col(0);
  std::vector<std::pair<GlmHead, bool>> heads;
  heads.emplace_back(SoftmaxHead::build(3, 3, rng, 0.5), true);
  heads.emplace_back(GaussianHead{random_matrix(3, 1, rng).col(0), 0.2, 0.1}, false);
  heads.emplace_back(HeteroscedasticHead{random_matrix(3, 1, rng).col(0), random_matrix(3, 1, rng).col(0), 0.1, 0.3},
                     false);
  heads.emplace_back(BayesLinearHead::isotropic(3, 1.5, 0.5, true), false);
  for (auto& [head, is_cls] : heads) {
    Rng frng(21);
    HybridModel m{make_coupling_stack(3, 2, hidden, Activation::tanh, frng, true, 0.2), LatentPrior::standard(3), head,
                  0.6, 0.0};
    m.prior.log_variance << 0.1, -0.2, 0.3;
    GradientOptions opt;
    opt.lambda_gen = 0.6;
    opt.lambda_em = is_cls ? 0.4 : 0.0;
    opt.labeled_scale = 0.3;
    opt.unlabeled_scale = 0.2;
    const SslBatch batch{xl, is_cls ? ycat : yreal, xu};
    auto grads = m.zeros_like();
    const auto terms = objective_gradient(m, batch, opt, grads);
    auto f = [&](const Vector& p) {
      auto q = m;
      assign_params(q, p);
      auto g = q.zeros_like();
      return objective_gradient(q, batch, opt, g).total;
    };
    EXPECT_LT(oracle::max_rel_error(flatten_params(grads), oracle::central_gradient(f, flatten_params(m))), 1e-4)
        << head_kind(head);
    const auto full = ssl_objective_terms(m, batch, 0.6, opt.lambda_em);
    EXPECT_NEAR(terms.total,
                0.3 * (full.predictive + 0.6 * naive_sum(model_log_px(m, xl))) +
                    0.2 * (0.6 * naive_sum(model_log_px(m, xu)) - opt.lambda_em * full.entropy),
                1e-9);
  }
}

TEST(ObjectiveGradient, PriorVarianceGetsNoGradientWithoutGenerativeTerm) {
  auto m = classifier(3, 2, 15, 0.0);
  Rng rng(16);
  GradientOptions opt;
  opt.lambda_gen = 0.0;
  auto grads = m.zeros_like();
  objective_gradient(m, {random_matrix(9, 3, rng), random_labels(9, 2, rng), Matrix(0, 3)}, opt, grads);
  EXPECT_EQ(grads.prior.log_variance, Vector::Zero(3));
  EXPECT_GT(flatten_params(grads.flow).cwiseAbs().maxCoeff(), 0.0);
}

TEST(Train, ZeroLearningRateLeavesModelAndTraceConstant) {
  auto m = classifier(2, 2, 17);
  Rng rng(18);
  const Dataset d = gen_half_moons(40, 0.1, rng);
  TrainConfig cfg;
  cfg.epochs = 3;
  cfg.batch_size = 16;
  cfg.learning_rate = 0.0;
  const auto r = train(m, d, cfg);
  EXPECT_EQ(flatten_params(r.model), flatten_params(m));
  ASSERT_EQ(r.trace.size(), 4u);
  for (const auto& row : r.trace) EXPECT_EQ(row.objective, r.trace[0].objective);
}

TEST(Train, SameSeedGivesBitIdenticalTraces) {
  Rng rng(19);
  const Dataset d = gen_half_moons(60, 0.1, rng);
  TrainConfig cfg;
  cfg.epochs = 5;
  cfg.batch_size = 16;
  cfg.learning_rate = 1e-2;
  cfg.seed = 3;
  auto m = classifier(2, 2, 20);
  m.dropout_rate = 0.2;
  const auto a = train(m, d, cfg), b = train(m, d, cfg);
  ASSERT_EQ(a.trace.size(), b.trace.size());
  for (std::size_t i = 0; i < a.trace.size(); ++i) EXPECT_EQ(a.trace[i].objective, b.trace[i].objective);
  EXPECT_EQ(flatten_params(a.model), flatten_params(b.model));
  EXPECT_GT(a.trace.back().objective, a.trace.front().objective);
}

TEST(Train, PlanarBayesModelImprovesOnCubicData) {
  Rng rng(21);
  const Dataset d = gen_gmm_cubic(200, rng);
  const Standardizer sx = Standardizer::fit(d.features), sy = Standardizer::fit(Matrix(d.labels));
  Dataset ds = d;
  ds.features = sx.transform(d.features);
  ds.labels = sy.transform(Matrix(d.labels)).col(0);
  Rng mrng(22);
  HybridModel m{make_planar_stack(1, 3, mrng, 0.5), LatentPrior::standard(1), BayesLinearHead::isotropic(1), 1.0, 0.0};
  TrainConfig cfg;
  cfg.epochs = 20;
  cfg.batch_size = 32;
  cfg.learning_rate = 1e-2;
  const double before = naive_sum(joint_log_lik(
      HybridModel{m.flow, m.prior, bayes_posterior_update(std::get<BayesLinearHead>(m.head), ds.features, ds.labels), 1.0, 0.0},
      ds.features, ds.labels)) / 200.0;
  const auto r = train(m, ds, cfg);
  const double after = naive_sum(joint_log_lik(r.model, ds.features, ds.labels)) / 200.0;
  EXPECT_GT(after, before);
  EXPECT_GT(r.trace.back().objective, r.trace.front().objective);
}

TEST(Train, NonFiniteObjectiveRaisesDivergedError) {
  auto m = classifier(2, 2, 23);
  Rng rng(24);
  Dataset d = gen_half_moons(10, 0.1, rng);
  d.features(3, 1) = std::numeric_limits<double>::quiet_NaN();
  TrainConfig cfg;
  cfg.epochs = 2;
  try {
    train(m, d, cfg);
    FAIL() << "expected DivergedError";
  } catch (const DivergedError& e) {
    EXPECT_EQ(e.epoch(), 0u);
  }
}

TEST(Train, DropoutDoesNotAffectEvaluation) {
  auto m = classifier(2, 3, 25);
  auto md = m;
  md.dropout_rate = 0.5;
  Rng rng(26);
  const Matrix x = random_matrix(10, 2, rng);
  const auto a = model_outputs(m, x), b = model_outputs(md, x);
  EXPECT_EQ(a.log_px, b.log_px);
  for (std::size_t i = 0; i < 10; ++i)
    EXPECT_EQ(std::get<Categorical>(a.predictions[i]).probs, std::get<Categorical>(b.predictions[i]).probs);
}

TEST(Evaluate, UnitBitsPerDimension) {
  const std::vector<Prediction> preds(4, Categorical{Vector::Constant(2, 0.5)});
  const auto m = metrics_from(preds, Vector(), Vector::Constant(4, -3.0 * std::numbers::ln2), 3);
  EXPECT_NEAR(m.bits_per_dim, 1.0, 1e-15);
  EXPECT_FALSE(m.error_rate.has_value());
  EXPECT_FALSE(m.mean_nll.has_value());
}

TEST(Evaluate, UniformClassifierBaseline) {
  const auto model = uniform_identity_model(2, 10);
  Dataset d;
  d.features = Matrix::Zero(100, 2);
  d.labels.resize(100);
  for (Eigen::Index i = 0; i < 100; ++i) d.labels[i] = static_cast<double>(i % 10);
  d.label_kind = LabelKind::categorical;
  d.class_count = 10;
  const auto m = evaluate(model, d);
  EXPECT_NEAR(*m.mean_nll, std::log(10.0), 1e-12);
  EXPECT_NEAR(m.mean_entropy, std::log(10.0), 1e-12);
  EXPECT_NEAR(*m.error_rate, 0.9, 1e-12);
  EXPECT_NEAR(m.bits_per_dim, std::log(2 * std::numbers::pi) / (2 * std::numbers::ln2), 1e-12);
}

TEST(Evaluate, HandBuiltThreePointCase) {
  Vector p0(2), p1(2), p2(2);
  p0 << 0.7, 0.3;
  p1 << 0.2, 0.8;
  p2 << 0.6, 0.4;
  const std::vector<Prediction> preds = {Categorical{p0}, Categorical{p1}, Categorical{p2}};
  Vector y(3), lpx(3);
  y << 0, 0, 1;
  lpx << -1.0, -2.0, -3.0;
  const auto m = metrics_from(preds, y, lpx, 2);
  auto h = [](double a) { return -a * std::log(a) - (1 - a) * std::log(1 - a); };
  EXPECT_NEAR(*m.error_rate, 2.0 / 3.0, 1e-15);
  EXPECT_NEAR(*m.mean_nll, -(std::log(0.7) + std::log(0.2) + std::log(0.4)) / 3.0, 1e-15);
  EXPECT_NEAR(m.mean_entropy, (h(0.7) + h(0.2) + h(0.6)) / 3.0, 1e-15);
  EXPECT_NEAR(m.bits_per_dim, 2.0 / (2.0 * std::numbers::ln2), 1e-15);

  const std::vector<Prediction> reg = {GaussianPrediction{1.0, 1.0}, GaussianPrediction{0.0, 4.0}};
  Vector yr(2);
  yr << 2.0, 2.0;
  const auto mr = metrics_from(reg, yr, Vector::Zero(2), 1);
  EXPECT_NEAR(*mr.rmse, std::sqrt(2.5), 1e-15);
  EXPECT_NEAR(*mr.mean_nll, 0.5 * (0.5 * oracle::kLog2Pi + 0.5 + 0.5 * (oracle::kLog2Pi + std::log(4.0)) + 0.5), 1e-14);
}
