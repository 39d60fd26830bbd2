#include "dualsr/evaluation.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <sstream>

#include "dualsr/checkpoint.hpp"
#include "dualsr/model.hpp"
#include "dualsr/training.hpp"

namespace dualsr::evaluation {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

std::vector<double> luminance(const Image& img) {
  const std::size_t plane = static_cast<std::size_t>(img.dim(1)) * img.dim(2);
  std::vector<double> y(plane);
  for (std::size_t p = 0; p < plane; ++p) {
    y[p] = 0.299 * img[p] + 0.587 * img[plane + p] + 0.114 * img[2 * plane + p];
  }
  return y;
}

// Valid-mode separable filtering of an H x W map.
std::vector<double> filter_valid(const std::vector<double>& src, int H, int W, const std::vector<double>& k) {
  const int K = static_cast<int>(k.size());
  const int oh = H - K + 1, ow = W - K + 1;
  std::vector<double> rows(static_cast<std::size_t>(H) * ow);
  for (int y = 0; y < H; ++y)
    for (int x = 0; x < ow; ++x) {
      double acc = 0.0;
      for (int i = 0; i < K; ++i) acc += k[i] * src[static_cast<std::size_t>(y) * W + x + i];
      rows[static_cast<std::size_t>(y) * ow + x] = acc;
    }
  std::vector<double> out(static_cast<std::size_t>(oh) * ow);
  for (int y = 0; y < oh; ++y)
    for (int x = 0; x < ow; ++x) {
      double acc = 0.0;
      for (int i = 0; i < K; ++i) acc += k[i] * rows[static_cast<std::size_t>(y + i) * ow + x];
      out[static_cast<std::size_t>(y) * ow + x] = acc;
    }
  return out;
}

Eigen::MatrixXd psd_sqrt(const Eigen::MatrixXd& m) {
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(m);
  Eigen::VectorXd ev = es.eigenvalues();
  for (int i = 0; i < ev.size(); ++i) ev[i] = ev[i] < 1e-8 ? 0.0 : std::sqrt(ev[i]);
  return es.eigenvectors() * ev.asDiagonal() * es.eigenvectors().transpose();
}

double min_eigenvalue(const Eigen::MatrixXd& m) {
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(m, Eigen::EigenvaluesOnly);
  return es.eigenvalues().minCoeff();
}

Eigen::MatrixXd to_matrix(const Tensor<double>& t) {
  Eigen::MatrixXd m(t.dim(0), t.dim(1));
  for (int i = 0; i < t.dim(0); ++i)
    for (int j = 0; j < t.dim(1); ++j) m(i, j) = t[static_cast<std::size_t>(i) * t.dim(1) + j];
  return m;
}

std::string fmt(double v) {
  std::ostringstream os;
  os << std::setprecision(10) << v;
  return os.str();
}

}  // namespace

double psnr(const Image& r, const Image& y) {
  require_same_shape(r, y, "psnr");
  if (r.size() == 0) throw EvaluationError("psnr of empty images");
  double se = 0.0;
  for (std::size_t i = 0; i < r.size(); ++i) {
    const double d = static_cast<double>(r[i]) - static_cast<double>(y[i]);
    se += d * d;
  }
  const double mse = se / static_cast<double>(r.size());
  if (mse == 0.0) return kPsnrCap;
  return std::min(kPsnrCap, 10.0 * std::log10(1.0 / mse));
}

double ssim(const Image& r, const Image& y) {
  require_same_shape(r, y, "ssim");
  if (r.rank() != 3 || r.dim(0) != 3) throw EvaluationError("ssim expects RGB images");
  constexpr int kWin = 11;
  constexpr double kSigma = 1.5, C1 = 0.01 * 0.01, C2 = 0.03 * 0.03;
  const int H = r.dim(1), W = r.dim(2);
  if (H < kWin || W < kWin) throw EvaluationError("ssim needs images of at least 11x11");

  std::vector<double> k(kWin);
  double ks = 0.0;
  for (int i = 0; i < kWin; ++i) {
    const double d = i - kWin / 2;
    k[i] = std::exp(-d * d / (2 * kSigma * kSigma));
    ks += k[i];
  }
  for (auto& v : k) v /= ks;

  const auto a = luminance(r), b = luminance(y);
  std::vector<double> aa(a.size()), bb(a.size()), ab(a.size());
  for (std::size_t i = 0; i < a.size(); ++i) {
    aa[i] = a[i] * a[i];
    bb[i] = b[i] * b[i];
    ab[i] = a[i] * b[i];
  }
  const auto mu_a = filter_valid(a, H, W, k), mu_b = filter_valid(b, H, W, k);
  const auto m_aa = filter_valid(aa, H, W, k), m_bb = filter_valid(bb, H, W, k), m_ab = filter_valid(ab, H, W, k);
  double total = 0.0;
  for (std::size_t i = 0; i < mu_a.size(); ++i) {
    const double va = m_aa[i] - mu_a[i] * mu_a[i];
    const double vb = m_bb[i] - mu_b[i] * mu_b[i];
    const double cov = m_ab[i] - mu_a[i] * mu_b[i];
    total += ((2 * mu_a[i] * mu_b[i] + C1) * (2 * cov + C2)) /
             ((mu_a[i] * mu_a[i] + mu_b[i] * mu_b[i] + C1) * (va + vb + C2));
  }
  return total / static_cast<double>(mu_a.size());
}

double perceptual_distance(const ParamStore<float>& net, const Image& r, const Image& y) {
  require_same_shape(r, y, "perceptual_distance");
  NoGradScope<float> no_grad(net);
  return training::lpips_loss(net, Var<float>(as_batch<float>(r)), Var<float>(as_batch<float>(y))).item();
}

GaussianStats gaussian_stats(const Eigen::MatrixXd& features) {
  if (features.rows() < 2) throw EvaluationError("Frechet distance needs at least two samples per set");
  GaussianStats s;
  s.mean = features.colwise().mean().transpose();
  const Eigen::MatrixXd centered = features.rowwise() - s.mean.transpose();
  s.cov = centered.transpose() * centered / static_cast<double>(features.rows() - 1);
  return s;
}

double frechet_distance(const GaussianStats& a, const GaussianStats& b) {
  if (a.mean.size() != b.mean.size() || a.cov.rows() != b.cov.rows()) {
    throw EvaluationError("Frechet distance between feature sets of different dimension");
  }
  Eigen::MatrixXd ca = a.cov, cb = b.cov;
  if (min_eigenvalue(ca) < 1e-12 || min_eigenvalue(cb) < 1e-12) {
    const auto eye = Eigen::MatrixXd::Identity(ca.rows(), ca.cols());
    ca += 1e-6 * eye;
    cb += 1e-6 * eye;
  }
  const Eigen::MatrixXd sa = psd_sqrt(ca);
  const Eigen::MatrixXd inner = sa * cb * sa;
  const Eigen::MatrixXd covmean = psd_sqrt(0.5 * (inner + inner.transpose()));
  const double d = (a.mean - b.mean).squaredNorm() + ca.trace() + cb.trace() - 2.0 * covmean.trace();
  return std::max(d, 0.0);
}

double frechet_distance(const Eigen::MatrixXd& features_a, const Eigen::MatrixXd& features_b) {
  return frechet_distance(gaussian_stats(features_a), gaussian_stats(features_b));
}

const std::vector<std::string>& metric_names() {
  static const std::vector<std::string> names{"psnr", "ssim", "lpips", "fid"};
  return names;
}

bool higher_is_better(const std::string& metric) { return metric == "psnr" || metric == "ssim"; }

MetricReport evaluate_images(const std::vector<Image>& predictions, const std::vector<Image>& targets,
                             const ParamStore<float>& perceptual_net, std::string dataset_id, std::string model_id) {
  if (predictions.size() != targets.size()) throw EvaluationError("prediction/target count mismatch");
  if (predictions.empty()) throw EvaluationError("nothing to evaluate");
  MetricReport rep;
  rep.dataset_id = std::move(dataset_id);
  rep.model_id = std::move(model_id);
  for (std::size_t i = 0; i < predictions.size(); ++i) {
    rep.per_image.push_back({{"psnr", psnr(predictions[i], targets[i])},
                             {"ssim", ssim(predictions[i], targets[i])},
                             {"lpips", perceptual_distance(perceptual_net, predictions[i], targets[i])}});
  }
  for (const auto& name : {"psnr", "ssim", "lpips"}) {
    double total = 0.0;
    for (const auto& m : rep.per_image) total += m.at(name);
    rep.aggregate[name] = total / static_cast<double>(rep.per_image.size());
  }
  if (predictions.size() >= 2) {
    const int n = static_cast<int>(predictions.size());
    Eigen::MatrixXd fa, fb;
    for (int i = 0; i < n; ++i) {
      const auto a = to_matrix(training::pooled_features(perceptual_net, as_batch<float>(predictions[i])));
      const auto b = to_matrix(training::pooled_features(perceptual_net, as_batch<float>(targets[i])));
      if (i == 0) {
        fa.resize(n, a.cols());
        fb.resize(n, b.cols());
      }
      fa.row(i) = a.row(0);
      fb.row(i) = b.row(0);
    }
    rep.fid = frechet_distance(fa, fb);
  }
  return rep;
}

MetricReport evaluate(const fs::path& checkpoint, const fs::path& dataset, bool hr_sanity) {
  const Checkpoint ckpt = load_checkpoint(checkpoint);
  const auto pairs = training::load_pairs(dataset, ckpt.model.upscale_factor);
  std::vector<Image> preds, targets;
  for (const auto& p : pairs) {
    targets.push_back(p.target);
    if (hr_sanity) {
      preds.push_back(p.target);
      continue;
    }
    const int multiple = ckpt.model.spatial_multiple();
    if (p.input.dim(1) % multiple != 0 || p.input.dim(2) % multiple != 0) {
      const Image padded = pad_reflect_to_multiple(p.input, multiple);
      preds.push_back(crop(run_inference(ckpt.generator, ckpt.model, padded).r1, 0, 0, p.input.dim(1), p.input.dim(2)));
    } else {
      preds.push_back(run_inference(ckpt.generator, ckpt.model, p.input).r1);
    }
  }
  fs::path run = checkpoint.parent_path();
  if (run.filename() == "ckpt") run = run.parent_path();
  const std::string model_id = (run.empty() ? std::string("model") : run.filename().string()) + "/" +
                               checkpoint.stem().string();
  const std::string dataset_id = fs::absolute(dataset).lexically_normal().filename().string();
  auto rep = evaluate_images(preds, targets, training::build_perceptual_net<float>(ckpt.model), dataset_id,
                             hr_sanity ? "hr-sanity" : model_id);
  rep.iteration = ckpt.iteration;
  return rep;
}

json to_json(const MetricReport& r) {
  json per = json::array();
  for (const auto& m : r.per_image) per.push_back(m);
  return json{{"dataset_id", r.dataset_id},
              {"model_id", r.model_id},
              {"iteration", r.iteration},
              {"per_image", per},
              {"aggregate", r.aggregate},
              {"fid", r.fid ? json(*r.fid) : json(nullptr)}};
}

MetricReport report_from_json(const json& j) {
  MetricReport r;
  try {
    r.dataset_id = j.at("dataset_id").get<std::string>();
    r.model_id = j.at("model_id").get<std::string>();
    r.iteration = j.value("iteration", 0);
    for (const auto& m : j.at("per_image")) r.per_image.push_back(m.get<std::map<std::string, double>>());
    r.aggregate = j.at("aggregate").get<std::map<std::string, double>>();
    if (j.contains("fid") && !j.at("fid").is_null()) r.fid = j.at("fid").get<double>();
  } catch (const json::exception& e) {
    throw EvaluationError(std::string("malformed metric report: ") + e.what());
  }
  return r;
}

void write_report(const fs::path& path, const MetricReport& r) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw EvaluationError("cannot write " + path.string());
  out << to_json(r).dump(2) << '\n';
}

MetricReport read_report(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw EvaluationError("cannot open report " + path.string());
  try {
    return report_from_json(json::parse(in));
  } catch (const json::parse_error& e) {
    throw EvaluationError("malformed metric report " + path.string() + ": " + e.what());
  }
}

RadarTable export_radar(const std::vector<MetricReport>& reports) {
  if (reports.empty()) throw EvaluationError("radar export needs at least one report");
  RadarTable t;
  const bool all_fid = std::all_of(reports.begin(), reports.end(), [](const MetricReport& r) { return r.fid.has_value(); });
  for (const auto& name : metric_names()) {
    if (name == "fid" ? all_fid : reports.front().aggregate.count(name) != 0) t.metrics.push_back(name);
  }
  for (const auto& r : reports) {
    t.models.push_back(r.model_id);
    std::vector<double> row;
    for (const auto& m : t.metrics) {
      if (m == "fid") {
        row.push_back(*r.fid);
      } else {
        const auto it = r.aggregate.find(m);
        if (it == r.aggregate.end()) throw EvaluationError("report " + r.model_id + " lacks metric " + m);
        row.push_back(it->second);
      }
    }
    t.raw.push_back(row);
  }
  t.normalized.assign(reports.size(), std::vector<double>(t.metrics.size(), 0.5));
  for (std::size_t j = 0; j < t.metrics.size(); ++j) {
    double lo = t.raw[0][j], hi = t.raw[0][j];
    for (const auto& row : t.raw) {
      lo = std::min(lo, row[j]);
      hi = std::max(hi, row[j]);
    }
    if (reports.size() < 2 || !(hi > lo)) continue;
    for (std::size_t i = 0; i < reports.size(); ++i) {
      const double v = (t.raw[i][j] - lo) / (hi - lo);
      t.normalized[i][j] = higher_is_better(t.metrics[j]) ? v : 1.0 - v;
    }
  }
  return t;
}

namespace {

std::string table_tsv(const RadarTable& t, const std::vector<std::vector<double>>& values) {
  std::ostringstream os;
  os << "model";
  for (const auto& m : t.metrics) os << '\t' << m;
  os << '\n';
  for (std::size_t i = 0; i < t.models.size(); ++i) {
    os << t.models[i];
    for (double v : values[i]) os << '\t' << fmt(v);
    os << '\n';
  }
  return os.str();
}

}  // namespace

std::string radar_to_tsv(const RadarTable& t) { return table_tsv(t, t.normalized); }
std::string aggregate_to_tsv(const RadarTable& t) { return table_tsv(t, t.raw); }

}  // namespace dualsr::evaluation
