#pragma once

#include <filesystem>
#include <map>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "dualsr/image.hpp"
#include "dualsr/params.hpp"
#include "json.hpp"

namespace dualsr::evaluation {

class EvaluationError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

constexpr double kPsnrCap = 100.0;

// 10 log10(1 / MSE) over all pixels and channels; capped at 100 dB.
double psnr(const Image& r, const Image& y);

// Mean local SSIM of the luminance images over valid 11x11 Gaussian windows
// (sigma 1.5, K1 0.01, K2 0.03, L 1).
double ssim(const Image& r, const Image& y);

double perceptual_distance(const ParamStore<float>& net, const Image& r, const Image& y);

struct GaussianStats {
  Eigen::VectorXd mean;
  Eigen::MatrixXd cov;
};

// Rows of `features` are samples. Needs at least two rows.
GaussianStats gaussian_stats(const Eigen::MatrixXd& features);

// ||mu_a - mu_b||^2 + Tr(S_a + S_b - 2 (S_a S_b)^(1/2)).
double frechet_distance(const GaussianStats& a, const GaussianStats& b);
double frechet_distance(const Eigen::MatrixXd& features_a, const Eigen::MatrixXd& features_b);

struct MetricReport {
  std::string dataset_id;
  std::string model_id;
  int iteration = 0;
  std::vector<std::map<std::string, double>> per_image;
  std::map<std::string, double> aggregate;
  std::optional<double> fid;  // set-level, needs >= 2 images
};

// Metric names in report/table order, and whether larger is better.
const std::vector<std::string>& metric_names();
bool higher_is_better(const std::string& metric);

MetricReport evaluate_images(const std::vector<Image>& predictions, const std::vector<Image>& targets,
                             const ParamStore<float>& perceptual_net, std::string dataset_id, std::string model_id);

// Runs the checkpointed model on every LR image of the dataset and scores R1
// against HR. With hr_sanity the HR images are scored against themselves.
MetricReport evaluate(const std::filesystem::path& checkpoint, const std::filesystem::path& dataset,
                      bool hr_sanity = false);

nlohmann::json to_json(const MetricReport& r);
MetricReport report_from_json(const nlohmann::json& j);
void write_report(const std::filesystem::path& path, const MetricReport& r);
MetricReport read_report(const std::filesystem::path& path);

struct RadarTable {
  std::vector<std::string> metrics;
  std::vector<std::string> models;
  std::vector<std::vector<double>> raw;         // [model][metric]
  std::vector<std::vector<double>> normalized;  // [model][metric], 1 = best
};

// Per-metric min-max normalisation across reports with lower-is-better
// metrics flipped. A degenerate range (or a single report) maps to 0.5.
RadarTable export_radar(const std::vector<MetricReport>& reports);
std::string radar_to_tsv(const RadarTable& t);
// Raw aggregates side by side, one row per model.
std::string aggregate_to_tsv(const RadarTable& t);

}  // namespace dualsr::evaluation
