#include <doctest.h>

#include <filesystem>

#include "motionbook/error.hpp"
#include "motionbook/metrics.hpp"
#include "motionbook/rng.hpp"

using namespace motionbook;
using namespace motionbook::metrics;
using features::JointPositions;
using kinematics::Vec3;

namespace {

JointPositions random_positions(Rng& rng, std::size_t T, std::size_t J) {
  JointPositions p(T);
  for (auto& f : p) {
    for (std::size_t j = 0; j < J; ++j) f.emplace_back(rng.normal(), rng.normal(), rng.normal());
  }
  return p;
}

Eigen::MatrixXd gaussian_samples(Rng& rng, std::size_t n, const Eigen::VectorXd& mean, const Eigen::MatrixXd& chol) {
  Eigen::MatrixXd x(n, mean.size());
  for (std::size_t i = 0; i < n; ++i) {
    Eigen::VectorXd z(mean.size());
    for (Eigen::Index k = 0; k < z.size(); ++k) z[k] = rng.normal();
    x.row(static_cast<Eigen::Index>(i)) = (mean + chol * z).transpose();
  }
  return x;
}

GaussianStats stats(Eigen::VectorXd mean, Eigen::MatrixXd cov) { return {std::move(mean), std::move(cov), 100}; }

Eigen::MatrixXd random_spd(Rng& rng, int F) {
  Eigen::MatrixXd a(F, F);
  for (int i = 0; i < F * F; ++i) a.data()[i] = rng.normal();
  return a * a.transpose() / F + 0.1 * Eigen::MatrixXd::Identity(F, F);
}

Eigen::MatrixXd random_orthogonal(Rng& rng, int F) {
  Eigen::MatrixXd a(F, F);
  for (int i = 0; i < F * F; ++i) a.data()[i] = rng.normal();
  return Eigen::HouseholderQR<Eigen::MatrixXd>(a).householderQ();
}

}  // namespace

TEST_CASE("mpjpe") {
  Rng rng(30);
  auto gt = random_positions(rng, 12, 22);
  CHECK(mpjpe(gt, gt) == 0.0);
  auto shifted = gt;
  for (auto& f : shifted) for (auto& p : f) p += Vec3(0.05, 0, 0);
  CHECK(mpjpe(shifted, gt) == doctest::Approx(50.0).epsilon(1e-12));

  auto pred = random_positions(rng, 12, 22);
  double ref = 0;
  for (std::size_t t = 0; t < 12; ++t) {
    for (std::size_t j = 0; j < 22; ++j) {
      double s = 0;
      for (int k = 0; k < 3; ++k) s += (pred[t][j][k] - gt[t][j][k]) * (pred[t][j][k] - gt[t][j][k]);
      ref += std::sqrt(s);
    }
  }
  CHECK(std::abs(mpjpe(pred, gt) - 1000.0 * ref / (12 * 22)) < 1e-9);

  // jointly permuting frames leaves the value unchanged
  auto pp = pred, gp = gt;
  std::reverse(pp.begin(), pp.end());
  std::reverse(gp.begin(), gp.end());
  CHECK(std::abs(mpjpe(pp, gp) - mpjpe(pred, gt)) < 1e-9);

  gt.pop_back();
  CHECK_THROWS_AS(mpjpe(pred, gt), Error);
}

TEST_CASE("fit_gaussian") {
  Eigen::MatrixXd two(2, 3);
  two << 1, 2, 3, 3, 0, 5;
  auto s = fit_gaussian(two);
  Eigen::Vector3d diff(-2, 2, -2);
  CHECK((s.mean - Eigen::Vector3d(2, 1, 4)).norm() < 1e-15);
  CHECK((s.cov - diff * diff.transpose() / 2).cwiseAbs().maxCoeff() < 1e-15);

  Eigen::MatrixXd constant = Eigen::MatrixXd::Constant(10, 4, 2.5);
  CHECK(fit_gaussian(constant).cov.cwiseAbs().maxCoeff() == 0.0);

  Rng rng(31);
  const int F = 5;
  auto x = gaussian_samples(rng, 100000, Eigen::VectorXd::Zero(F), Eigen::MatrixXd::Identity(F, F));
  s = fit_gaussian(x);
  CHECK(s.mean.cwiseAbs().maxCoeff() < 0.02);
  CHECK((s.cov - Eigen::MatrixXd::Identity(F, F)).cwiseAbs().maxCoeff() < 0.05);

  try {
    fit_gaussian(Eigen::MatrixXd::Zero(1, 3));
    FAIL("expected TooFewSamples");
  } catch (const Error& e) {
    CHECK(e.kind() == ErrorKind::kTooFewSamples);
  }
}

TEST_CASE("fid closed forms") {
  Rng rng(32);
  const int F = 8;
  auto a = stats(Eigen::VectorXd::Random(F), random_spd(rng, F));
  CHECK(std::abs(fid(a, a)) < 1e-8);

  Eigen::VectorXd mu(F);
  for (int i = 0; i < F; ++i) mu[i] = rng.normal();
  const auto I = Eigen::MatrixXd::Identity(F, F);
  CHECK(std::abs(fid(stats(Eigen::VectorXd::Zero(F), I), stats(mu, I)) - mu.squaredNorm()) < 1e-8);
  CHECK(std::abs(fid(stats(Eigen::VectorXd::Zero(F), 4 * I), stats(Eigen::VectorXd::Zero(F), I)) - F) < 1e-8);

  auto b = stats(Eigen::VectorXd::Random(F), random_spd(rng, F));
  CHECK(std::abs(fid(a, b) - fid(b, a)) < 1e-6);
  CHECK(fid(a, b) > 0);

  const auto Q = random_orthogonal(rng, F);
  auto ra = stats(Q * a.mean, Q * a.cov * Q.transpose());
  auto rb = stats(Q * b.mean, Q * b.cov * Q.transpose());
  CHECK(std::abs(fid(ra, rb) - fid(a, b)) < 1e-6);
}

TEST_CASE("fid errors") {
  const auto I3 = Eigen::MatrixXd::Identity(3, 3);
  CHECK_THROWS_AS(fid(stats(Eigen::VectorXd::Zero(3), I3), stats(Eigen::VectorXd::Zero(2), Eigen::MatrixXd::Identity(2, 2))), Error);
  Eigen::MatrixXd bad = I3;
  bad(2, 2) = -0.5;
  try {
    fid(stats(Eigen::VectorXd::Zero(3), bad), stats(Eigen::VectorXd::Zero(3), I3));
    FAIL("expected IndefiniteCovariance");
  } catch (const Error& e) {
    CHECK(e.kind() == ErrorKind::kIndefiniteCovariance);
  }
  // tiny negative eigenvalues are tolerated
  Eigen::MatrixXd almost = Eigen::MatrixXd::Zero(3, 3);
  almost(0, 0) = -1e-10;
  CHECK_NOTHROW(fid(stats(Eigen::VectorXd::Zero(3), almost), stats(Eigen::VectorXd::Zero(3), I3)));
}

TEST_CASE("sampled fid of one distribution is small") {
  Rng rng(33);
  const int F = 16;
  const Eigen::MatrixXd L = random_spd(rng, F).llt().matrixL();
  Eigen::VectorXd mu = Eigen::VectorXd::Random(F);
  auto g1 = rng.fork("a"), g2 = rng.fork("b");
  const double v = fid(fit_gaussian(gaussian_samples(g1, 10000, mu, L)), fit_gaussian(gaussian_samples(g2, 10000, mu, L)));
  CHECK(v < 0.5);
}

TEST_CASE("retrieval examples") {
  Rng rng(34);
  const int F = 6;
  Eigen::MatrixXd motion(32, F);
  for (int i = 0; i < 32 * F; ++i) motion.data()[i] = rng.normal() * 100;
  auto m = retrieval_metrics(make_retrieval_batches(motion, motion));
  CHECK(m.r1 == 1.0);
  CHECK(m.r2 == 1.0);
  CHECK(m.r3 == 1.0);
  CHECK(m.mm_dist == 0.0);

  {
    // Pairs (2q, 2q+1): motion 2q has text 2q+1 at distance 1 and its own text at 2;
    // motion 2q+1 has text 2q at distance 1 and its own at 2.
    Eigen::MatrixXd M(32, 2), T(32, 2);
    for (int q = 0; q < 16; ++q) {
      const double x = 100.0 * q;
      M.row(2 * q) << x, 0.0;
      M.row(2 * q + 1) << x, 3.0;
      T.row(2 * q) << x, 2.0;      // own text of motion 2q (distance 2), distance 1 from motion 2q+1
      T.row(2 * q + 1) << x, 1.0;  // own text of motion 2q+1 (distance 2), distance 1 from motion 2q
    }
    auto s = retrieval_metrics({RetrievalBatch{M, T}});
    CHECK(s.r1 == 0.0);
    CHECK(s.r2 == 1.0);
    CHECK(s.r3 == 1.0);
    CHECK(s.mm_dist == doctest::Approx(2.0));
  }
}

TEST_CASE("random embeddings give R@k near k/32") {
  Rng rng(35);
  const int F = 8;
  std::vector<RetrievalBatch> batches;
  for (int b = 0; b < 1000; ++b) {
    RetrievalBatch rb{Eigen::MatrixXd(32, F), Eigen::MatrixXd(32, F)};
    for (int i = 0; i < 32 * F; ++i) {
      rb.motion.data()[i] = rng.normal();
      rb.text.data()[i] = rng.normal();
    }
    batches.push_back(std::move(rb));
  }
  auto m = retrieval_metrics(batches);
  CHECK(std::abs(m.r1 - 1.0 / 32) < 0.01);
  CHECK(std::abs(m.r2 - 2.0 / 32) < 0.01);
  CHECK(std::abs(m.r3 - 3.0 / 32) < 0.01);
}

TEST_CASE("retrieval batch errors") {
  try {
    retrieval_metrics({RetrievalBatch{Eigen::MatrixXd::Zero(31, 2), Eigen::MatrixXd::Zero(31, 2)}});
    FAIL("expected BadBatchSize");
  } catch (const Error& e) {
    CHECK(e.kind() == ErrorKind::kBadBatchSize);
  }
  CHECK(make_retrieval_batches(Eigen::MatrixXd::Zero(70, 2), Eigen::MatrixXd::Zero(70, 2)).size() == 2);
  CHECK_THROWS_AS(retrieval_metrics({}), Error);
}

TEST_CASE("embedding file roundtrip") {
  const auto path = std::filesystem::temp_directory_path() / "mb_test.memb";
  Eigen::MatrixXf m(3, 4);
  for (int i = 0; i < 12; ++i) m.data()[i] = 0.5f * static_cast<float>(i) - 1.0f;
  write_embeddings(path, m);
  CHECK(read_embeddings(path) == m);
  std::filesystem::resize_file(path, 20);
  CHECK_THROWS_AS(read_embeddings(path), Error);
  std::filesystem::remove(path);
}
