#include "motionbook/metrics.hpp"

#include <algorithm>
#include <cstring>
#include <fstream>
#include <numeric>

#include "motionbook/binary_io.hpp"
#include "motionbook/error.hpp"

namespace motionbook::metrics {

double mpjpe(const features::JointPositions& pred, const features::JointPositions& gt) {
  require(pred.size() == gt.size(), ErrorKind::kShapeMismatch,
          "mpjpe: frame counts differ (" + std::to_string(pred.size()) + " vs " + std::to_string(gt.size()) + ")");
  double total = 0;
  std::size_t count = 0;
  for (std::size_t t = 0; t < pred.size(); ++t) {
    require(pred[t].size() == gt[t].size(), ErrorKind::kShapeMismatch, "mpjpe: joint counts differ");
    for (std::size_t j = 0; j < pred[t].size(); ++j) {
      total += (pred[t][j] - gt[t][j]).norm();
      ++count;
    }
  }
  require(count > 0, ErrorKind::kShapeMismatch, "mpjpe: no joints");
  return 1000.0 * total / static_cast<double>(count);
}

GaussianStats fit_gaussian(const Eigen::MatrixXd& features) {
  const auto n = features.rows();
  if (n < 2) fail(ErrorKind::kTooFewSamples, "fit_gaussian needs at least 2 samples, got " + std::to_string(n));
  GaussianStats s;
  s.count = static_cast<std::size_t>(n);
  s.mean = features.colwise().mean().transpose();
  const Eigen::MatrixXd centered = features.rowwise() - s.mean.transpose();
  s.cov = (centered.transpose() * centered) / static_cast<double>(n - 1);
  s.cov = 0.5 * (s.cov + s.cov.transpose());
  if (!s.cov.allFinite() || !s.mean.allFinite()) fail(ErrorKind::kNonFiniteValue, "fit_gaussian: non-finite features");
  return s;
}

namespace {

constexpr double kPsdTolerance = 1e-8;

Eigen::MatrixXd psd_sqrt(const Eigen::MatrixXd& m, const char* which) {
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(0.5 * (m + m.transpose()));
  Eigen::VectorXd ev = es.eigenvalues();
  if (ev.size() > 0 && ev.minCoeff() < -kPsdTolerance) {
    fail(ErrorKind::kIndefiniteCovariance,
         std::string(which) + " has eigenvalue " + std::to_string(ev.minCoeff()));
  }
  ev = ev.cwiseMax(0.0).cwiseSqrt();
  return es.eigenvectors() * ev.asDiagonal() * es.eigenvectors().transpose();
}

}  // namespace

double fid(const GaussianStats& a, const GaussianStats& b) {
  const auto F = a.mean.size();
  if (b.mean.size() != F || a.cov.rows() != F || a.cov.cols() != F || b.cov.rows() != F || b.cov.cols() != F) {
    fail(ErrorKind::kDimensionMismatch, "fid: feature dimensions differ");
  }
  const Eigen::MatrixXd sa = psd_sqrt(a.cov, "covariance a");
  psd_sqrt(b.cov, "covariance b");
  Eigen::MatrixXd cross = sa * b.cov * sa;
  cross = 0.5 * (cross + cross.transpose());
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(cross, Eigen::EigenvaluesOnly);
  const double tr_sqrt = es.eigenvalues().cwiseMax(0.0).cwiseSqrt().sum();
  return (a.mean - b.mean).squaredNorm() + a.cov.trace() + b.cov.trace() - 2.0 * tr_sqrt;
}

std::vector<RetrievalBatch> make_retrieval_batches(const Eigen::MatrixXd& motion, const Eigen::MatrixXd& text) {
  require(motion.rows() == text.rows(), ErrorKind::kShapeMismatch, "retrieval: motion/text counts differ");
  require(motion.cols() == text.cols(), ErrorKind::kDimensionMismatch, "retrieval: embedding widths differ");
  const auto B = static_cast<Eigen::Index>(kRetrievalBatch);
  std::vector<RetrievalBatch> out;
  for (Eigen::Index start = 0; start + B <= motion.rows(); start += B) {
    out.push_back({motion.middleRows(start, B), text.middleRows(start, B)});
  }
  return out;
}

RetrievalMetrics retrieval_metrics(const std::vector<RetrievalBatch>& batches) {
  const auto B = static_cast<Eigen::Index>(kRetrievalBatch);
  if (batches.empty()) fail(ErrorKind::kBadBatchSize, "retrieval needs at least one full batch of 32");
  RetrievalMetrics r;
  std::size_t hits[3] = {0, 0, 0};
  double dist_total = 0;
  std::vector<Eigen::Index> order(static_cast<std::size_t>(B));
  for (const auto& batch : batches) {
    if (batch.motion.rows() != B || batch.text.rows() != B) {
      fail(ErrorKind::kBadBatchSize, "retrieval batch has " + std::to_string(batch.motion.rows()) + " pairs, need 32");
    }
    require(batch.motion.cols() == batch.text.cols(), ErrorKind::kDimensionMismatch, "retrieval: widths differ");
    for (Eigen::Index i = 0; i < B; ++i) {
      Eigen::VectorXd d(B);
      for (Eigen::Index j = 0; j < B; ++j) d[j] = (batch.motion.row(i) - batch.text.row(j)).norm();
      dist_total += d[i];
      std::iota(order.begin(), order.end(), Eigen::Index{0});
      std::stable_sort(order.begin(), order.end(), [&](Eigen::Index x, Eigen::Index y) { return d[x] < d[y]; });
      const auto rank = static_cast<std::size_t>(std::find(order.begin(), order.end(), i) - order.begin());
      for (std::size_t k = 0; k < 3; ++k) hits[k] += rank <= k;
    }
  }
  const double pairs = static_cast<double>(batches.size() * kRetrievalBatch);
  r.r1 = static_cast<double>(hits[0]) / pairs;
  r.r2 = static_cast<double>(hits[1]) / pairs;
  r.r3 = static_cast<double>(hits[2]) / pairs;
  r.mm_dist = dist_total / pairs;
  r.batches = batches.size();
  return r;
}

void write_embeddings(const std::filesystem::path& path, const Eigen::MatrixXf& rows) {
  std::ofstream out(path, std::ios::binary);
  if (!out) fail(ErrorKind::kIo, "cannot write " + path.string());
  out.write("MEMB", 4);
  io::write_u32(out, static_cast<std::uint32_t>(rows.rows()));
  io::write_u32(out, static_cast<std::uint32_t>(rows.cols()));
  const Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor> rm = rows;
  io::write_f32s(out, std::span<const float>(rm.data(), static_cast<std::size_t>(rm.size())));
  if (!out) fail(ErrorKind::kIo, "failed writing " + path.string());
}

Eigen::MatrixXf read_embeddings(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) fail(ErrorKind::kIo, "cannot read " + path.string());
  char magic[4] = {};
  if (!in.read(magic, 4) || std::memcmp(magic, "MEMB", 4) != 0) fail(ErrorKind::kBadMagic, path.string() + " is not a MEMB file");
  std::uint32_t n = 0, f = 0;
  if (!io::read_u32(in, n) || !io::read_u32(in, f)) fail(ErrorKind::kTruncatedFile, path.string() + ": truncated header");
  Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor> rm(n, f);
  if (!io::read_array(in, std::span<float>(rm.data(), static_cast<std::size_t>(rm.size())))) {
    fail(ErrorKind::kTruncatedFile, path.string() + ": truncated payload");
  }
  return rm;
}

}  // namespace motionbook::metrics
