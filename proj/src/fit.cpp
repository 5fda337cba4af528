#include "shapesig/fit.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>
#include <sstream>

#include <Eigen/Cholesky>

#include "shapesig/parallel.hpp"

namespace shapesig {

namespace {

constexpr double kHalfPi = std::numbers::pi / 2.0;
constexpr int kFree = 6;  // gamma, R, omega, y, phi, c; x stays fixed

Vec7 prior_weights(const Hyperparams& h, PriorExponent pe) {
  Vec7 w;
  for (int d = 0; d < 7; ++d) {
    const double sd = h.sigma_s[d];
    w[d] = pe == PriorExponent::variance ? 1.0 / (sd * sd) : 1.0 / sd;
  }
  return w;
}

double log_prior_constant(const Hyperparams& h) {
  double sum = 0.0;
  for (int d = 0; d < 7; ++d) sum += std::log(h.sigma_s[d]);
  return sum;
}

ShapeSignature project_to_box(ShapeSignature s) {
  s.omega = std::max(s.omega, 0.0);
  s.phi = std::clamp(s.phi, -kHalfPi, kHalfPi);
  return s;
}

// Objective, gradient, and Hessian of one wafer's negative log joint in a
// single pass over the trace.
struct WaferEval {
  double f = 0.0;
  Vec7 g = Vec7::Zero();
  Mat7 h = Mat7::Zero();
};

WaferEval eval_wafer(const ShapeSignature& s, const TraceSeries& trace,
                     const Hyperparams& hyper, PriorExponent pe,
                     bool want_derivs) {
  WaferEval out;
  const double inv_var = 1.0 / (hyper.sigma * hyper.sigma);
  const std::size_t n = trace.times.size();

  double ssr_acc = 0.0;
  Vec7 jr = Vec7::Zero();
  Mat7 gn = Mat7::Zero();
  for (std::size_t i = 0; i < n; ++i) {
    double v;
    Vec7 gi;
    Mat7 hi;
    eval_with_derivatives(s, trace.times[i], &v, want_derivs ? &gi : nullptr,
                          want_derivs ? &hi : nullptr);
    const double r = trace.values[i] - v;
    ssr_acc += r * r;
    if (want_derivs) {
      jr += r * gi;
      gn += gi * gi.transpose() - r * hi;
    }
  }

  const Vec7 w = prior_weights(hyper, pe);
  const Vec7 dev = s.to_vec() - hyper.mu;
  out.f = 0.5 * std::log(hyper.sigma * hyper.sigma) * static_cast<double>(n) +
          0.5 * inv_var * ssr_acc + log_prior_constant(hyper) +
          0.5 * dev.cwiseProduct(w.cwiseProduct(dev)).sum();
  if (want_derivs) {
    out.g = -inv_var * jr + w.cwiseProduct(dev);
    out.h = inv_var * gn + Mat7(w.asDiagonal());
  }
  return out;
}

}  // namespace

void Hyperparams::validate() const {
  if (!(sigma > 0.0) || !std::isfinite(sigma))
    throw std::domain_error("Hyperparams: sigma must be positive");
  for (int d = 0; d < 7; ++d) {
    if (!std::isfinite(mu[d]))
      throw std::domain_error("Hyperparams: non-finite prior mean");
    if (!(sigma_s[d] > 0.0) || !std::isfinite(sigma_s[d]))
      throw std::domain_error("Hyperparams: prior stds must be positive");
  }
}

void FitConfig::validate() const {
  if (!(newton_tol > 0.0) || !(bcd_tol > 0.0) || !(damping_init > 0.0) ||
      !(sigma_floor > 0.0) || !(sigma_s_floor > 0.0))
    throw std::domain_error("FitConfig: tolerances and floors must be positive");
  if (newton_max_iters < 1 || bcd_max_rounds < 1 || multistart_count < 0 ||
      threads < 1)
    throw std::domain_error("FitConfig: invalid iteration counts");
}

double wafer_objective(const ShapeSignature& s, const TraceSeries& trace,
                       const Hyperparams& hyper, PriorExponent pe) {
  return eval_wafer(s, trace, hyper, pe, false).f;
}

Vec7 wafer_objective_gradient(const ShapeSignature& s,
                              const TraceSeries& trace,
                              const Hyperparams& hyper, PriorExponent pe) {
  return eval_wafer(s, trace, hyper, pe, true).g;
}

Mat7 wafer_objective_hessian(const ShapeSignature& s, const TraceSeries& trace,
                             const Hyperparams& hyper, PriorExponent pe) {
  return eval_wafer(s, trace, hyper, pe, true).h;
}

double neg_log_joint(const std::vector<ShapeSignature>& signatures,
                     const Hyperparams& hyper,
                     const std::vector<TraceSeries>& traces,
                     PriorExponent pe) {
  hyper.validate();
  if (signatures.size() != traces.size())
    throw std::domain_error("neg_log_joint: signatures/traces size mismatch");
  if (signatures.empty())
    throw std::domain_error("neg_log_joint: empty lot");
  double total = 0.0;
  for (std::size_t m = 0; m < signatures.size(); ++m)
    total += wafer_objective(signatures[m], traces[m], hyper, pe);
  return total;
}

// ---------------------------------------------------------------------------
// Initialization
// ---------------------------------------------------------------------------

namespace {

struct Periodogram {
  // (power, refined omega) of local maxima, strongest first.
  std::vector<std::pair<double, double>> peaks;
  double median_power = 0.0;
};

Periodogram periodogram_peaks(const std::vector<double>& times,
                              const std::vector<double>& resid) {
  Periodogram out;
  const int n = static_cast<int>(times.size());
  if (n < 4) return out;
  const double t0 = times.front();
  const double span = times.back() - t0;
  if (!(span > 0.0)) return out;
  const int bins = std::min(n / 2, 512);
  if (bins < 1) return out;

  // Direct evaluation handles non-uniform sampling.
  std::vector<double> power(static_cast<std::size_t>(bins) + 1, 0.0);
  for (int j = 1; j <= bins; ++j) {
    const double w = 2.0 * std::numbers::pi * j / span;
    double re = 0.0, im = 0.0;
    for (int i = 0; i < n; ++i) {
      const double ph = w * (times[i] - t0);
      re += resid[i] * std::cos(ph);
      im += resid[i] * std::sin(ph);
    }
    power[j] = re * re + im * im;
  }

  std::vector<double> sorted(power.begin() + 1, power.end());
  std::nth_element(sorted.begin(), sorted.begin() + sorted.size() / 2,
                   sorted.end());
  out.median_power = sorted[sorted.size() / 2];

  for (int j = 1; j <= bins; ++j) {
    const double left = j > 1 ? power[j - 1] : 0.0;
    const double right = j < bins ? power[j + 1] : 0.0;
    if (power[j] <= 0.0 || power[j] < left || power[j] < right) continue;
    // Parabolic refinement of the peak location.
    double delta = 0.0;
    if (j > 1 && j < bins) {
      const double denom = power[j - 1] - 2.0 * power[j] + power[j + 1];
      if (denom < 0.0)
        delta = std::clamp(0.5 * (power[j - 1] - power[j + 1]) / denom, -0.5,
                           0.5);
    }
    out.peaks.emplace_back(power[j],
                           2.0 * std::numbers::pi * (j + delta) / span);
  }
  std::stable_sort(out.peaks.begin(), out.peaks.end(),
                   [](const auto& a, const auto& b) { return a.first > b.first; });
  return out;
}

struct LinearFit {
  double slope = 0.0;
  double intercept = 0.0;
};

LinearFit ols_line(const std::vector<double>& xs, const std::vector<double>& zs,
                   std::size_t start) {
  const std::size_t n = xs.size() - start;
  double mx = 0.0, mz = 0.0;
  for (std::size_t i = start; i < xs.size(); ++i) {
    mx += xs[i];
    mz += zs[i];
  }
  mx /= static_cast<double>(n);
  mz /= static_cast<double>(n);
  double sxx = 0.0, sxz = 0.0;
  for (std::size_t i = start; i < xs.size(); ++i) {
    sxx += (xs[i] - mx) * (xs[i] - mx);
    sxz += (xs[i] - mx) * (zs[i] - mz);
  }
  LinearFit fit;
  fit.slope = sxx > 0.0 ? sxz / sxx : 0.0;
  fit.intercept = mz - fit.slope * mx;
  return fit;
}

}  // namespace

std::vector<double> oscillation_candidates(const std::vector<double>& times,
                                           const std::vector<double>& resid,
                                           int max_count) {
  std::vector<double> out;
  if (max_count < 1 || times.size() != resid.size()) return out;
  const Periodogram pg = periodogram_peaks(times, resid);
  for (const auto& [power, omega] : pg.peaks) {
    if (power < 2.0 * pg.median_power) break;
    out.push_back(omega);
    if (static_cast<int>(out.size()) >= max_count) break;
  }
  return out;
}

ShapeSignature init_signature(const TraceSeries& trace,
                              const Hyperparams* prior) {
  trace.validate();
  const std::size_t n = trace.size();
  const double x0 = trace.times.front();

  if (n < 2) {
    if (!prior)
      throw std::domain_error(
          "init_signature: trace too short and no prior available");
    ShapeSignature s = project_to_box(ShapeSignature::from_vec(prior->mu));
    s.x = x0;
    return s;
  }

  std::vector<double> tau(n);
  for (std::size_t i = 0; i < n; ++i) tau[i] = trace.times[i] - x0;

  // Trend from the trailing half, where the oscillation has mostly decayed.
  std::size_t start = n / 2;
  if (n - start < 2) start = 0;
  const LinearFit line = ols_line(tau, trace.values, start);

  std::vector<double> detrended(n);
  double max_abs = 0.0, max_val = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    detrended[i] = trace.values[i] - (line.slope * tau[i] + line.intercept);
    max_abs = std::max(max_abs, std::fabs(detrended[i]));
    max_val = std::max(max_val, std::fabs(trace.values[i]));
  }

  ShapeSignature s;
  s.x = x0;
  s.c = line.slope;
  s.y = line.intercept;
  s.R = detrended[0];
  s.phi = 0.0;

  // Damping from the decay of successive envelope peaks of |detrended|.
  s.gamma = 0.1;
  if (max_abs > 1e-12 * std::max(1.0, max_val)) {
    std::vector<std::pair<double, double>> peaks;  // (t, |value|)
    for (std::size_t i = 1; i + 1 < n; ++i) {
      const double a = std::fabs(detrended[i]);
      if (a >= std::fabs(detrended[i - 1]) &&
          a >= std::fabs(detrended[i + 1]) && a > 0.05 * max_abs)
        peaks.emplace_back(trace.times[i], a);
    }
    if (peaks.size() >= 2) {
      double acc = 0.0;
      int count = 0;
      for (std::size_t i = 0; i + 1 < peaks.size(); ++i) {
        const double dt = peaks[i + 1].first - peaks[i].first;
        if (dt > 0.0 && peaks[i].second > 0.0 && peaks[i + 1].second > 0.0) {
          acc += 2.0 * std::log(peaks[i].second / peaks[i + 1].second) / dt;
          ++count;
        }
      }
      if (count > 0 && std::isfinite(acc)) s.gamma = acc / count;
    }
  }

  // Frequency from the dominant periodogram bin, zero when nothing stands
  // clear of the noise floor.
  s.omega = 0.0;
  const Periodogram pg = periodogram_peaks(trace.times, detrended);
  if (!pg.peaks.empty() &&
      pg.peaks.front().first >= 10.0 * pg.median_power)
    s.omega = pg.peaks.front().second;

  return project_to_box(s);
}

// ---------------------------------------------------------------------------
// Newton refinement
// ---------------------------------------------------------------------------

ShapeSignature newton_refine(const ShapeSignature& s0,
                             const TraceSeries& trace,
                             const Hyperparams& hyper, const FitConfig& cfg) {
  cfg.validate();
  hyper.validate();
  trace.validate();
  s0.validate();
  const PriorExponent pe = cfg.prior_exponent;

  ShapeSignature s = s0;
  double f = wafer_objective(s, trace, hyper, pe);
  if (!std::isfinite(f)) {
    std::ostringstream msg;
    msg << "newton_refine: non-finite objective at the starting point "
        << "(gamma=" << s.gamma << ", R=" << s.R << ", omega=" << s.omega
        << ", y=" << s.y << ", phi=" << s.phi << ", c=" << s.c
        << ", x=" << s.x << ")";
    throw NewtonFailure(msg.str(), s);
  }

  using Vec6 = Eigen::Matrix<double, kFree, 1>;
  using Mat6 = Eigen::Matrix<double, kFree, kFree>;

  for (int iter = 0; iter < cfg.newton_max_iters; ++iter) {
    const WaferEval cur = eval_wafer(s, trace, hyper, pe, true);
    if (!cur.g.head<kFree>().allFinite() ||
        !cur.h.topLeftCorner<kFree, kFree>().allFinite()) {
      std::ostringstream msg;
      msg << "newton_refine: non-finite derivatives at iteration " << iter
          << "; last good objective " << f;
      throw NewtonFailure(msg.str(), s);
    }
    const Vec6 g = cur.g.head<kFree>();
    Mat6 h = cur.h.topLeftCorner<kFree, kFree>();

    // Modify the Hessian until positive definite.
    Vec6 dir;
    bool have_dir = false;
    double lambda = 0.0;
    for (int attempt = 0; attempt < 40; ++attempt) {
      Mat6 hmod = h + lambda * Mat6::Identity();
      Eigen::LLT<Mat6> llt(hmod);
      if (llt.info() == Eigen::Success) {
        dir = llt.solve(-g);
        if (dir.allFinite()) {
          have_dir = true;
          break;
        }
      }
      lambda = lambda == 0.0 ? cfg.damping_init : lambda * 10.0;
    }

    const Vec7 s_vec = s.to_vec();
    ShapeSignature accepted;
    double f_accepted = f;
    bool have_step = false;

    const auto try_direction = [&](const Vec6& d, bool armijo) {
      double step = 1.0;
      for (int halvings = 0; halvings < 60; ++halvings, step *= 0.5) {
        Vec7 cand_vec = s_vec;
        cand_vec.head<kFree>() += step * d;
        const ShapeSignature cand =
            project_to_box(ShapeSignature::from_vec(cand_vec));
        const double fc = wafer_objective(cand, trace, hyper, pe);
        if (!std::isfinite(fc)) continue;
        const double moved = cur.g.dot(cand.to_vec() - s_vec);
        const double bound =
            armijo ? f + 1e-4 * std::min(moved, 0.0) : f;
        if (fc <= bound && fc <= f) {
          accepted = cand;
          f_accepted = fc;
          have_step = true;
          return;
        }
      }
    };

    if (have_dir) try_direction(dir, true);
    if (!have_step) {
      // Projected-gradient fallback; scale so the first trial is modest.
      const double gnorm = g.norm();
      if (gnorm > 0.0) try_direction(Vec6(-g / std::max(1.0, gnorm)), false);
    }
    if (!have_step) break;  // stationary within the box

    const double progress = f - f_accepted;
    s = accepted;
    f = f_accepted;
    if (progress <= cfg.newton_tol * (std::fabs(f) + 1.0)) break;
  }
  return s;
}

// ---------------------------------------------------------------------------
// Hyperparameter updates and the BCD driver
// ---------------------------------------------------------------------------

Hyperparams update_hyperparams(const std::vector<ShapeSignature>& signatures,
                               const std::vector<TraceSeries>& traces,
                               const FitConfig& cfg) {
  if (signatures.empty() || signatures.size() != traces.size())
    throw std::domain_error("update_hyperparams: need matching nonempty lists");
  const double m = static_cast<double>(signatures.size());

  Hyperparams h;
  double total_ssr = 0.0;
  double total_n = 0.0;
  for (std::size_t i = 0; i < signatures.size(); ++i) {
    total_ssr += ssr(signatures[i], traces[i]);
    total_n += static_cast<double>(traces[i].size());
  }
  h.sigma = std::max(cfg.sigma_floor, std::sqrt(total_ssr / total_n));

  h.mu = Vec7::Zero();
  for (const ShapeSignature& s : signatures) h.mu += s.to_vec();
  h.mu /= m;

  for (int d = 0; d < 7; ++d) {
    double q = 0.0;
    for (const ShapeSignature& s : signatures) {
      const double dev = s[d] - h.mu[d];
      q += dev * dev;
    }
    const double fitted = cfg.prior_exponent == PriorExponent::variance
                              ? std::sqrt(q / m)
                              : q / (2.0 * m);
    h.sigma_s[d] = std::max(cfg.sigma_s_floor, fitted);
  }
  return h;
}

namespace {

// First-round hyperparameters derived from the heuristic signatures. The
// prior stds are widened to loose data-driven scales so the first signature
// block is effectively a maximum-likelihood refinement even when the
// heuristic signatures are (near-)identical; later rounds tighten them with
// the closed-form update.
Hyperparams initial_hyperparams(const std::vector<ShapeSignature>& signatures,
                                const std::vector<TraceSeries>& traces,
                                const FitConfig& cfg) {
  const double m = static_cast<double>(signatures.size());
  Hyperparams h;

  double range = 0.0, span = 0.0;
  std::size_t longest = 0;
  double total_ssr = 0.0, total_n = 0.0;
  for (std::size_t i = 0; i < traces.size(); ++i) {
    const TraceSeries& tr = traces[i];
    const auto [lo, hi] = std::minmax_element(tr.values.begin(),
                                              tr.values.end());
    range = std::max(range, *hi - *lo);
    span = std::max(span, tr.times.back() - tr.times.front());
    longest = std::max(longest, tr.size());
    total_ssr += ssr(signatures[i], traces[i]);
    total_n += static_cast<double>(tr.size());
  }
  range = std::max(range, 1e-3);
  span = std::max(span, 1e-3);

  h.mu = Vec7::Zero();
  for (const ShapeSignature& s : signatures) h.mu += s.to_vec();
  h.mu /= m;

  Vec7 scale;
  scale[0] = std::max(1.0, 8.0 / span);                               // gamma
  scale[1] = range;                                                   // R
  scale[2] = std::numbers::pi * static_cast<double>(longest) / span;  // omega
  scale[3] = range;                                                   // y
  scale[4] = kHalfPi;                                                 // phi
  scale[5] = 2.0 * range / span;                                      // c
  scale[6] = span;                                                    // x
  for (int d = 0; d < 7; ++d) {
    double q = 0.0;
    for (const ShapeSignature& s : signatures) {
      const double dev = s[d] - h.mu[d];
      q += dev * dev;
    }
    h.sigma_s[d] = std::max({std::sqrt(q / m), scale[d], cfg.sigma_s_floor});
  }
  h.sigma = std::max(cfg.sigma_floor, std::sqrt(total_ssr / total_n));
  return h;
}

double relative_change(const Hyperparams& a, const Hyperparams& b) {
  const auto rel = [](double prev, double next) {
    return std::fabs(next - prev) / std::max(std::fabs(prev), 1e-8);
  };
  double worst = rel(a.sigma, b.sigma);
  for (int d = 0; d < 7; ++d) {
    worst = std::max(worst, rel(a.mu[d], b.mu[d]));
    worst = std::max(worst, rel(a.sigma_s[d], b.sigma_s[d]));
  }
  return worst;
}

// Best-of refinement: the current signature always competes, so the result
// never has a worse objective than plain refinement from it.
ShapeSignature refine_multistart(const ShapeSignature& s,
                                 const TraceSeries& trace,
                                 const Hyperparams& hyper,
                                 const FitConfig& cfg) {
  ShapeSignature best = newton_refine(s, trace, hyper, cfg);
  double f_best = wafer_objective(best, trace, hyper, cfg.prior_exponent);
  if (cfg.multistart_count > 0 && trace.size() >= 4) {
    std::vector<double> resid(trace.size());
    for (std::size_t i = 0; i < trace.size(); ++i)
      resid[i] = trace.values[i] -
                 (s.c * (trace.times[i] - s.x) + s.y);
    for (double omega :
         oscillation_candidates(trace.times, resid, cfg.multistart_count)) {
      if (std::fabs(omega - s.omega) < 1e-9) continue;
      ShapeSignature alt = s;
      alt.omega = omega;
      alt.phi = 0.0;
      const ShapeSignature refined = newton_refine(alt, trace, hyper, cfg);
      const double f =
          wafer_objective(refined, trace, hyper, cfg.prior_exponent);
      if (f < f_best) {
        best = refined;
        f_best = f;
      }
    }
  }
  return best;
}

}  // namespace

LotFit fit_lot(const std::vector<TraceSeries>& traces, const FitConfig& cfg,
               const Hyperparams* warm_hyper) {
  cfg.validate();
  if (traces.empty()) throw std::domain_error("fit_lot: empty lot");
  for (const TraceSeries& tr : traces) {
    tr.validate();
    if (tr.tool_id != traces.front().tool_id ||
        tr.sensor_id != traces.front().sensor_id ||
        tr.step_id != traces.front().step_id)
      throw std::domain_error("fit_lot: traces span multiple triples");
  }
  const int n_wafers = static_cast<int>(traces.size());
  const PriorExponent pe = cfg.prior_exponent;

  LotFit out;
  out.signatures.resize(traces.size());
  for (int i = 0; i < n_wafers; ++i)
    out.signatures[i] = init_signature(traces[i], warm_hyper);

  Hyperparams hyper = warm_hyper
                          ? *warm_hyper
                          : initial_hyperparams(out.signatures, traces, cfg);
  hyper.validate();

  out.objective_history.push_back(
      neg_log_joint(out.signatures, hyper, traces, pe));

  for (int round = 0; round < cfg.bcd_max_rounds; ++round) {
    parallel_for(n_wafers, cfg.threads, [&](int i) {
      out.signatures[i] =
          round == 0
              ? refine_multistart(out.signatures[i], traces[i], hyper, cfg)
              : newton_refine(out.signatures[i], traces[i], hyper, cfg);
    });
    out.objective_history.push_back(
        neg_log_joint(out.signatures, hyper, traces, pe));

    const Hyperparams next = update_hyperparams(out.signatures, traces, cfg);
    out.objective_history.push_back(
        neg_log_joint(out.signatures, next, traces, pe));

    const double rel = relative_change(hyper, next);
    hyper = next;
    if (rel < cfg.bcd_tol) {
      out.converged = true;
      break;
    }
  }

  out.hyper = hyper;
  out.per_wafer_ssr.resize(traces.size());
  for (int i = 0; i < n_wafers; ++i)
    out.per_wafer_ssr[i] = ssr(out.signatures[i], traces[i]);
  return out;
}

}  // namespace shapesig
