#include "shapesig/anomaly.hpp"

#include <algorithm>
#include <cmath>
#include <set>
#include <stdexcept>

namespace shapesig {

void NormalModel::validate() const {
  as_hyperparams().validate();
  if (source_lots.empty())
    throw std::domain_error("NormalModel: no source lots");
}

Hyperparams NormalModel::as_hyperparams() const {
  Hyperparams h;
  h.sigma = sigma_star;
  h.mu = mu_star;
  h.sigma_s = sigma_star_s;
  return h;
}

NormalModel fit_normal_model(const std::vector<TraceSeries>& initial_traces,
                             const FitConfig& cfg, LotFit* diagnostics) {
  if (initial_traces.size() < 8)
    throw std::invalid_argument(
        "fit_normal_model: need at least 8 wafers for the initial fit, got " +
        std::to_string(initial_traces.size()));
  const LotFit fit = fit_lot(initial_traces, cfg);
  if (diagnostics) *diagnostics = fit;

  NormalModel nm;
  nm.sigma_star = fit.hyper.sigma;
  nm.mu_star = fit.hyper.mu;
  nm.sigma_star_s = fit.hyper.sigma_s;
  nm.tool = initial_traces.front().tool_id;
  nm.sensor = initial_traces.front().sensor_id;
  nm.step = initial_traces.front().step_id;
  nm.prior_exponent = cfg.prior_exponent;
  std::set<std::string> lots;
  for (const TraceSeries& tr : initial_traces) lots.insert(tr.lot_id);
  nm.source_lots.assign(lots.begin(), lots.end());
  return nm;
}

double score(const ShapeSignature& s, const TraceSeries& trace,
             const NormalModel& nm) {
  return wafer_objective(s, trace, nm.as_hyperparams(), nm.prior_exponent);
}

Vec7 score_gradient(const ShapeSignature& s, const TraceSeries& trace,
                    const NormalModel& nm) {
  return wafer_objective_gradient(s, trace, nm.as_hyperparams(),
                                  nm.prior_exponent);
}

Mat7 score_hessian(const ShapeSignature& s, const TraceSeries& trace,
                   const NormalModel& nm) {
  return wafer_objective_hessian(s, trace, nm.as_hyperparams(),
                                 nm.prior_exponent);
}

Vec7 changepoint_gradient(const ShapeSignature& s_bef,
                          const ShapeSignature& s_aft,
                          const TraceSeries& trace_bef,
                          const NormalModel& nm) {
  const Vec7 step = 0.5 * (s_aft.to_vec() - s_bef.to_vec());
  return score_gradient(s_bef, trace_bef, nm) +
         score_hessian(s_bef, trace_bef, nm) * step;
}

Eigen::MatrixXd standardize(const Eigen::MatrixXd& values) {
  if (values.rows() < 2)
    throw std::domain_error("standardize: need at least 2 rows");
  const double n = static_cast<double>(values.rows());
  Eigen::MatrixXd z = values;
  for (Eigen::Index col = 0; col < values.cols(); ++col) {
    const double mean = values.col(col).mean();
    const double var =
        (values.col(col).array() - mean).square().sum() / n;
    const double sd = std::sqrt(var);
    if (sd < 1e-12)
      z.col(col).setZero();
    else
      z.col(col) = (values.col(col).array() - mean) / sd;
  }
  return z;
}

namespace {

std::vector<double> zscores(const std::vector<double>& series) {
  const double n = static_cast<double>(series.size());
  double mean = 0.0;
  for (double v : series) mean += v;
  mean /= n;
  double var = 0.0;
  for (double v : series) var += (v - mean) * (v - mean);
  var /= n;
  const double sd = std::sqrt(var);
  std::vector<double> z(series.size(), 0.0);
  if (sd >= 1e-12)
    for (std::size_t i = 0; i < series.size(); ++i)
      z[i] = (series[i] - mean) / sd;
  return z;
}

}  // namespace

std::vector<int> detect_spikes(const std::vector<double>& scores,
                               double z_threshold) {
  if (scores.size() < 5)
    throw std::domain_error("detect_spikes: series shorter than 5");
  const std::vector<double> z = zscores(scores);
  const int n = static_cast<int>(z.size());
  const auto quiet = [&](int i) {
    return i < 0 || i >= n || z[i] < 0.5 * z_threshold;
  };
  std::vector<int> out;
  for (int i = 0; i < n; ++i)
    if (z[i] > z_threshold && quiet(i - 1) && quiet(i + 1)) out.push_back(i);
  return out;
}

std::vector<int> detect_changepoints(const std::vector<double>& scores,
                                     int window, double z_threshold) {
  if (window < 1) throw std::domain_error("detect_changepoints: window < 1");
  const int n = static_cast<int>(scores.size());
  if (n < 2 * window)
    throw std::domain_error("detect_changepoints: series shorter than 2*window");

  const auto window_stats = [&](int begin, int end, double& mean,
                                double& var) {
    mean = 0.0;
    for (int i = begin; i < end; ++i) mean += scores[i];
    mean /= static_cast<double>(end - begin);
    var = 0.0;
    for (int i = begin; i < end; ++i)
      var += (scores[i] - mean) * (scores[i] - mean);
    var /= static_cast<double>(end - begin);
  };

  // Shift statistic at i = first index of the "after" window.
  std::vector<double> stat(n, 0.0);
  double scale = 0.0;
  for (double v : scores) scale = std::max(scale, std::fabs(v));
  const double eps = 1e-12 * std::max(scale, 1.0);
  for (int i = window; i + window <= n; ++i) {
    double mb, vb, ma, va;
    window_stats(i - window, i, mb, vb);
    window_stats(i, i + window, ma, va);
    const double pooled = std::sqrt(0.5 * (vb + va));
    stat[i] = std::fabs(ma - mb) / std::max(pooled, eps);
  }

  // Strongest shift first, suppressing anything within `window` of it.
  std::vector<int> out;
  std::vector<bool> suppressed(n, false);
  for (;;) {
    int best = -1;
    for (int i = window; i + window <= n; ++i)
      if (!suppressed[i] && stat[i] > z_threshold &&
          (best < 0 || stat[i] > stat[best]))
        best = i;
    if (best < 0) break;
    out.push_back(best);
    for (int i = std::max(0, best - window);
         i <= std::min(n - 1, best + window); ++i)
      suppressed[i] = true;
  }
  std::sort(out.begin(), out.end());
  return out;
}

std::vector<Contribution> rank_contributors(const Vec7& gradient) {
  std::vector<Contribution> out;
  out.reserve(7);
  for (int d = 0; d < 7; ++d) out.push_back({kParamNames[d], gradient[d]});
  std::stable_sort(out.begin(), out.end(),
                   [](const Contribution& a, const Contribution& b) {
                     return std::fabs(a.value) > std::fabs(b.value);
                   });
  return out;
}

}  // namespace shapesig
