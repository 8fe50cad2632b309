#pragma once

#include <filesystem>
#include <vector>

#include <Eigen/Dense>

#include "motionbook/features.hpp"

namespace motionbook::metrics {

// Mean joint position error in millimeters (positions in meters).
double mpjpe(const features::JointPositions& pred, const features::JointPositions& gt);

struct GaussianStats {
  Eigen::VectorXd mean;
  Eigen::MatrixXd cov;
  std::size_t count = 0;
};

// Rows are samples. Covariance uses the N-1 divisor.
GaussianStats fit_gaussian(const Eigen::MatrixXd& features);

double fid(const GaussianStats& a, const GaussianStats& b);

struct RetrievalBatch {
  Eigen::MatrixXd motion;  // 32 x F
  Eigen::MatrixXd text;    // 32 x F, row i matches motion row i
};

inline constexpr std::size_t kRetrievalBatch = 32;

// Splits aligned embeddings into batches of 32, dropping the partial tail.
std::vector<RetrievalBatch> make_retrieval_batches(const Eigen::MatrixXd& motion, const Eigen::MatrixXd& text);

struct RetrievalMetrics {
  double r1 = 0, r2 = 0, r3 = 0;
  double mm_dist = 0;
  std::size_t batches = 0;
};

RetrievalMetrics retrieval_metrics(const std::vector<RetrievalBatch>& batches);

// MEMB embedding files: "MEMB", u32 N, u32 F, N*F f32.
void write_embeddings(const std::filesystem::path& path, const Eigen::MatrixXf& rows);
Eigen::MatrixXf read_embeddings(const std::filesystem::path& path);

}  // namespace motionbook::metrics
