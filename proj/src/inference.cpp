#include "vbsim/inference.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <limits>
#include <random>
#include <set>

#include "vbsim/errors.hpp"

namespace vbsim {

namespace {

constexpr double kInf = std::numeric_limits<double>::infinity();

// Internal optimization coordinate: either the natural value or its log.
struct Coord {
  bool log = false;
  double lo = -kInf;  // natural-unit bounds
  double hi = kInf;
};

double to_internal(const Coord& c, double natural) {
  return c.log ? std::log(natural) : natural;
}
double to_natural(const Coord& c, double u) {
  return c.log ? std::exp(u) : u;
}
double dnatural_du(const Coord& c, double natural) {
  return c.log ? natural : 1.0;
}

}  // namespace

LMDiagnostics lm_minimize(LeastSquaresProblem& problem, Eigen::VectorXd& u,
                          const Eigen::VectorXd& lower,
                          const Eigen::VectorXd& upper,
                          const LMOptions& opts) {
  const Eigen::Index n = u.size();
  if (lower.size() != n || upper.size() != n)
    throw ValidationError("lm_minimize: bounds size mismatch");
  for (Eigen::Index j = 0; j < n; ++j)
    if (!(lower[j] <= upper[j]))
      throw ValidationError("lm_minimize: lower bound above upper bound");
  const int m = problem.n_residuals();
  if (m <= 0) throw ValidationError("lm_minimize: no residuals");

  auto clamp = [&](Eigen::VectorXd& v) {
    v = v.cwiseMax(lower).cwiseMin(upper);
  };
  clamp(u);

  LMDiagnostics diag;
  Eigen::VectorXd r(m), r_try(m), r_acc(m);
  Eigen::MatrixXd jac(m, n);

  auto try_eval = [&](const Eigen::VectorXd& x, Eigen::VectorXd& out) {
    ++diag.n_evaluations;
    try {
      problem.eval(x, out);
    } catch (const NumericalError&) {
      out.setConstant(m, kInf);
    }
    const double c = out.squaredNorm();
    return std::isfinite(c) ? c : kInf;
  };

  problem.eval_with_jacobian(u, r, jac);
  ++diag.n_evaluations;
  double chi2 = r.squaredNorm();
  if (!std::isfinite(chi2))
    throw NumericalError("lm_minimize: non-finite chi2 at the start point");

  double lambda = opts.lambda0;
  double nu = opts.lambda_up;  // reject multiplier, doubles on each reject
  // plateau detector: cumulative decrease over a window of iterations, so
  // a lambda-dance crawl (tiny accepted steps that individually never hit
  // a per-step tolerance) still counts as converged once it stops paying
  constexpr int kWindow = 5;
  double window_chi2 = chi2;
  int window_len = 0;
  diag.stop_reason = "max iterations reached";

  for (int iter = 0; iter < opts.max_iterations; ++iter) {
    diag.iterations = iter + 1;
    const Eigen::VectorXd g = jac.transpose() * r;
    diag.gradient_inf = g.lpNorm<Eigen::Infinity>();
    if (diag.gradient_inf <= opts.gtol) {
      diag.converged = true;
      diag.stop_reason = "gradient below gtol";
      break;
    }

    const Eigen::MatrixXd jtj = jac.transpose() * jac;
    const Eigen::VectorXd scale_diag = jtj.diagonal().cwiseMax(1e-12);

    // active set: a coordinate parked on a bound with the gradient still
    // pushing outward is frozen for this iteration, so the others get a
    // clean reduced Newton step instead of a clipped full-space one (the
    // clip otherwise degrades every step into a crawl along the face)
    std::vector<Eigen::Index> act;
    for (Eigen::Index j = 0; j < n; ++j) {
      const bool lo = u[j] - lower[j] <= 1e-12 && g[j] > 0.0;
      const bool hi = upper[j] - u[j] <= 1e-12 && g[j] < 0.0;
      if (!lo && !hi) act.push_back(j);
    }
    if (act.empty()) {
      diag.converged = true;
      diag.stop_reason = "all coordinates pinned at bounds";
      break;
    }
    const auto nf = static_cast<Eigen::Index>(act.size());
    Eigen::MatrixXd jtj_f(nf, nf);
    Eigen::VectorXd g_f(nf), sd_f(nf);
    for (Eigen::Index a = 0; a < nf; ++a) {
      g_f[a] = g[act[static_cast<size_t>(a)]];
      sd_f[a] = scale_diag[act[static_cast<size_t>(a)]];
      for (Eigen::Index b = 0; b < nf; ++b)
        jtj_f(a, b) = jtj(act[static_cast<size_t>(a)], act[static_cast<size_t>(b)]);
    }
    auto scatter = [&](const Eigen::VectorXd& df) {
      Eigen::VectorXd full = Eigen::VectorXd::Zero(n);
      for (Eigen::Index a = 0; a < nf; ++a) full[act[static_cast<size_t>(a)]] = df[a];
      return full;
    };

    bool accepted = false;
    bool step_vanished = false;
    while (lambda <= opts.lambda_max) {
      Eigen::MatrixXd a = jtj_f;
      a.diagonal() += lambda * sd_f;
      const Eigen::LDLT<Eigen::MatrixXd> fact(a);
      Eigen::VectorXd delta_f = fact.solve(-g_f);
      if (!delta_f.allFinite()) {
        lambda *= nu;
        nu = std::min(2.0 * nu, 1e6);
        continue;
      }
      Eigen::VectorXd delta = scatter(delta_f);
      if (opts.acceleration) {
        // geodesic acceleration: second directional derivative of the
        // residual along the step, by finite difference, corrects the step
        // for model-manifold curvature.  Ridged problems (nearly degenerate
        // rate splits) crawl without this and converge in tens of
        // iterations with it.
        const double h = 0.1;
        const double c_acc = try_eval(u + h * delta, r_acc);
        if (std::isfinite(c_acc)) {
          const Eigen::VectorXd d2 =
              (2.0 / (h * h)) * (r_acc - r - h * (jac * delta));
          const Eigen::VectorXd rhs = jac.transpose() * d2;
          Eigen::VectorXd rhs_f(nf);
          for (Eigen::Index a2 = 0; a2 < nf; ++a2)
            rhs_f[a2] = rhs[act[static_cast<size_t>(a2)]];
          const Eigen::VectorXd delta2_f = fact.solve(-rhs_f);
          if (delta2_f.allFinite() && delta2_f.norm() <= 0.75 * delta_f.norm())
            delta += 0.5 * scatter(delta2_f);
        }
      }
      Eigen::VectorXd u_try = u + delta;
      clamp(u_try);
      delta = u_try - u;  // respect the bounds in the model decrease below
      const double step_norm = delta.norm();
      if (step_norm <= opts.xtol * (u.norm() + opts.xtol)) {
        step_vanished = true;
        break;
      }
      const double chi2_try = try_eval(u_try, r_try);
      if (chi2_try < chi2) {
        // gain ratio: actual decrease over the damped quadratic model's
        // prediction.  Shrink lambda only as far as the agreement earns —
        // a barely-modeled accept keeps (or raises) the damping, which is
        // what lets narrow curved valleys converge instead of zigzagging.
        const double pred =
            delta.dot(lambda * scale_diag.cwiseProduct(delta) - g);
        const double rho = pred > 0.0 ? (chi2 - chi2_try) / pred : 1.0;
        const double cube = 1.0 - std::pow(2.0 * rho - 1.0, 3.0);
        lambda *= std::clamp(cube, opts.lambda_down, 2.0);
        lambda = std::max(lambda, 1e-14);
        u = u_try;
        chi2 = chi2_try;
        nu = opts.lambda_up;
        accepted = true;
        break;
      }
      lambda *= nu;
      nu = std::min(2.0 * nu, 1e6);
    }

    if (step_vanished) {
      diag.converged = true;
      diag.stop_reason = "projected step below xtol";
      break;
    }
    if (!accepted) {
      diag.converged = false;
      diag.stop_reason = "no chi2-decreasing step found";
      break;
    }

    if (++window_len >= kWindow) {
      const double drop =
          (window_chi2 - chi2) / std::max(window_chi2, 1e-300);
      if (drop <= kWindow * opts.ftol) {
        diag.converged = true;
        diag.stop_reason = "chi2 plateau";
        break;
      }
      window_chi2 = chi2;
      window_len = 0;
    }

    problem.eval_with_jacobian(u, r, jac);
    ++diag.n_evaluations;
    chi2 = r.squaredNorm();
  }

  diag.chi2 = chi2;
  return diag;
}

// --- templates ----------------------------------------------------------

namespace {

std::vector<FitParameter> span_around(
    const std::vector<std::pair<std::string, double>>& refs) {
  std::vector<FitParameter> out;
  out.reserve(refs.size());
  for (const auto& [name, ref] : refs)
    out.push_back({name, ref, ref / 50.0, ref * 50.0, true, false});
  return out;
}

}  // namespace

std::vector<FitParameter> SevenLevelTemplate::parameters() const {
  const SevenLevelRates r = reference_seven_level_rates();
  return span_around({{"k_p0", r.k_p0},
                      {"k_r", r.k_r},
                      {"gamma0", r.gamma0},
                      {"gamma1", r.gamma1},
                      {"kappa0", r.kappa0},
                      {"kappa1", r.kappa1}});
}

LevelGraph SevenLevelTemplate::build(std::span<const double> v) const {
  if (v.size() != 6)
    throw ValidationError("7level template expects 6 parameters");
  SevenLevelRates r;
  r.k_p0 = v[0];
  r.k_r = v[1];
  r.gamma0 = v[2];
  r.gamma1 = v[3];
  r.kappa0 = v[4];
  r.kappa1 = v[5];
  r.t1_us = t1_us_;
  return build_preset_7level(r);
}

LevelGraph SevenLevelTemplate::derivative_graph(int j) const {
  if (j < 0 || j >= 6)
    throw ValidationError("7level template: parameter index out of range");
  double v[6] = {0, 0, 0, 0, 0, 0};
  v[j] = 1.0;
  SevenLevelRates r;
  r.k_p0 = v[0];
  r.k_r = v[1];
  r.gamma0 = v[2];
  r.gamma1 = v[3];
  r.kappa0 = v[4];
  r.kappa1 = v[5];
  // T1 mixing is not a fitted rate; it has no place in the derivatives.
  return build_preset_7level(r);
}

std::vector<FitParameter> NineLevelTemplate::parameters() const {
  const NineLevelRates r = reference_nine_level_rates();
  return span_around({{"k_p0", r.base.k_p0},
                      {"k_r", r.base.k_r},
                      {"gamma0", r.base.gamma0},
                      {"gamma1", r.base.gamma1},
                      {"kappa0", r.base.kappa0},
                      {"kappa1", r.base.kappa1},
                      {"k_di", r.k_di},
                      {"k_dr", r.k_dr},
                      {"k_p2_0", r.k_p2_0},
                      {"k_i1_0", r.k_i1_0},
                      {"k_i2_0", r.k_i2_0},
                      {"k_r2", r.k_r2},
                      {"k_nr", r.k_nr}});
}

namespace {

NineLevelRates nine_from(std::span<const double> v,
                         std::optional<double> t1_us, double aux_factor) {
  NineLevelRates r;
  r.base.k_p0 = v[0];
  r.base.k_r = v[1];
  r.base.gamma0 = v[2];
  r.base.gamma1 = v[3];
  r.base.kappa0 = v[4];
  r.base.kappa1 = v[5];
  r.base.t1_us = t1_us;
  r.k_di = v[6];
  r.k_dr = v[7];
  r.k_p2_0 = v[8];
  r.k_i1_0 = v[9];
  r.k_i2_0 = v[10];
  r.k_r2 = v[11];
  r.k_nr = v[12];
  r.aux_detection_factor = aux_factor;
  return r;
}

}  // namespace

LevelGraph NineLevelTemplate::build(std::span<const double> v) const {
  if (v.size() != 13)
    throw ValidationError("9level template expects 13 parameters");
  return build_preset_9level(nine_from(v, t1_us_, aux_factor_));
}

LevelGraph NineLevelTemplate::derivative_graph(int j) const {
  if (j < 0 || j >= 13)
    throw ValidationError("9level template: parameter index out of range");
  double v[13] = {};
  v[j] = 1.0;
  return build_preset_9level(nine_from(v, {}, aux_factor_));
}

std::unique_ptr<RateModelTemplate> make_template(std::string_view name,
                                                 std::optional<double> t1_us) {
  if (name == "7level") return std::make_unique<SevenLevelTemplate>(t1_us);
  if (name == "9level") return std::make_unique<NineLevelTemplate>(t1_us);
  throw ValidationError("unknown model template: " + std::string(name));
}

std::string_view to_string(JacobianMode m) {
  switch (m) {
    case JacobianMode::ForwardSensitivity: return "forward-sensitivity";
    case JacobianMode::ForwardDiff: return "forward-diff";
    case JacobianMode::CentralDiff: return "central-diff";
  }
  return "?";
}

JacobianMode jacobian_mode_from_string(std::string_view s) {
  if (s == "forward-sensitivity") return JacobianMode::ForwardSensitivity;
  if (s == "forward-diff") return JacobianMode::ForwardDiff;
  if (s == "central-diff") return JacobianMode::CentralDiff;
  throw ValidationError("unknown jacobian mode: " + std::string(s));
}

// --- joint trace fit ------------------------------------------------------

namespace {

class TraceFitProblem final : public LeastSquaresProblem {
 public:
  TraceFitProblem(const RateModelTemplate& tmpl,
                  std::vector<FitParameter> params,
                  const std::vector<FitDataset>& datasets,
                  const FitOptions& opts)
      : tmpl_(&tmpl),
        params_(std::move(params)),
        datasets_(&datasets),
        mode_(opts.jacobian),
        fit_bg_(opts.fit_background) {
    for (int j = 0; j < static_cast<int>(params_.size()); ++j)
      if (!params_[static_cast<size_t>(j)].fixed) free_.push_back(j);
    if (free_.empty()) throw ValidationError("fit has no free parameters");

    for (int j : free_) dgraphs_.push_back(tmpl_->derivative_graph(j));
    for (const auto& g : dgraphs_) dgraph_ptrs_.push_back(&g);

    n_data_ = static_cast<int>(datasets.size());
    m_ = 0;
    for (const auto& d : datasets) {
      d.data.validate();
      const auto n = static_cast<Eigen::Index>(d.data.size());
      Eigen::VectorXd y(n), w(n);
      for (Eigen::Index i = 0; i < n; ++i) {
        y[i] = d.data.values[static_cast<size_t>(i)];
        w[i] = d.data.has_sigma()
                   ? 1.0 / d.data.sigma[static_cast<size_t>(i)]
                   : 1.0;
      }
      y_.push_back(std::move(y));
      w_.push_back(std::move(w));
      m_ += static_cast<int>(n);
    }

    // coordinate layout: free physics, then ln-amplitudes, then backgrounds
    for (int j : free_) {
      const auto& p = params_[static_cast<size_t>(j)];
      coords_.push_back({p.log_scale, p.lower, p.upper});
    }
    const Eigen::VectorXd k0 = physics_at_initial();
    std::vector<Eigen::VectorXd> rates;
    predict_rates(k0, rates);
    for (int d = 0; d < n_data_; ++d) {
      const double a0 = amplitude_guess(d, rates[static_cast<size_t>(d)]);
      amp_ref_.push_back(a0);
      coords_.push_back({true, a0 * 1e-10, a0 * 1e10});
    }
    if (fit_bg_)
      for (int d = 0; d < n_data_; ++d)
        coords_.push_back(
            {false, 0.0, 2.0 * y_[static_cast<size_t>(d)].cwiseAbs().maxCoeff() + 1.0});

    const auto nu = static_cast<Eigen::Index>(coords_.size());
    lo_u_.resize(nu);
    hi_u_.resize(nu);
    for (Eigen::Index j = 0; j < nu; ++j) {
      lo_u_[j] = to_internal(coords_[static_cast<size_t>(j)],
                             coords_[static_cast<size_t>(j)].lo);
      hi_u_[j] = to_internal(coords_[static_cast<size_t>(j)],
                             coords_[static_cast<size_t>(j)].hi);
    }
  }

  int n_residuals() const override { return m_; }
  int n_free_physics() const { return static_cast<int>(free_.size()); }
  int n_internal() const { return static_cast<int>(coords_.size()); }
  const Eigen::VectorXd& lower_u() const { return lo_u_; }
  const Eigen::VectorXd& upper_u() const { return hi_u_; }
  const std::vector<int>& free_indices() const { return free_; }
  const Coord& coord(int j) const { return coords_[static_cast<size_t>(j)]; }
  int amp_index(int d) const { return n_free_physics() + d; }
  int bg_index(int d) const { return n_free_physics() + n_data_ + d; }
  int n_datasets() const { return n_data_; }

  Eigen::VectorXd physics_at_initial() const {
    Eigen::VectorXd k(params_.size());
    for (size_t j = 0; j < params_.size(); ++j) k[static_cast<Eigen::Index>(j)] = params_[j].initial;
    return k;
  }

  Eigen::VectorXd physics_from(const Eigen::VectorXd& u) const {
    Eigen::VectorXd k = physics_at_initial();
    for (size_t fj = 0; fj < free_.size(); ++fj)
      k[free_[fj]] = to_natural(coords_[fj], u[static_cast<Eigen::Index>(fj)]);
    return k;
  }

  // Start vector: user initials for start 0, log-uniform physics draws
  // afterwards; nuisances re-estimated from the data either way.
  Eigen::VectorXd start_vector(int start, std::mt19937_64& rng) const {
    Eigen::VectorXd u(n_internal());
    for (size_t fj = 0; fj < free_.size(); ++fj) {
      const auto& p = params_[static_cast<size_t>(free_[fj])];
      if (start == 0) {
        u[static_cast<Eigen::Index>(fj)] = to_internal(coords_[fj], p.initial);
      } else {
        std::uniform_real_distribution<double> dist(
            lo_u_[static_cast<Eigen::Index>(fj)],
            hi_u_[static_cast<Eigen::Index>(fj)]);
        u[static_cast<Eigen::Index>(fj)] = dist(rng);
      }
    }
    std::vector<Eigen::VectorXd> rates;
    predict_rates(physics_from(u), rates);
    for (int d = 0; d < n_data_; ++d) {
      const double a0 = amplitude_guess(d, rates[static_cast<size_t>(d)]);
      const auto j = static_cast<Eigen::Index>(amp_index(d));
      u[j] = std::clamp(std::log(a0), lo_u_[j], hi_u_[j]);
    }
    if (fit_bg_)
      for (int d = 0; d < n_data_; ++d)
        u[bg_index(d)] = 0.0;
    return u;
  }

  void eval(const Eigen::VectorXd& u, Eigen::VectorXd& r) override {
    std::vector<Eigen::VectorXd> rates;
    predict_rates(physics_from(u), rates);
    assemble(u, rates, r);
    last_rates_ = std::move(rates);
  }

  void eval_with_jacobian(const Eigen::VectorXd& u, Eigen::VectorXd& r,
                          Eigen::MatrixXd& jac) override {
    const int nu = n_internal();
    r.resize(m_);
    jac.setZero(m_, nu);
    if (mode_ == JacobianMode::ForwardSensitivity) {
      exact_jacobian(u, r, jac);
    } else {
      eval(u, r);
      finite_difference_physics(u, r, jac);
    }
    nuisance_columns(u, jac);
  }

 private:
  void predict_rates(const Eigen::VectorXd& k,
                     std::vector<Eigen::VectorXd>& rates) const {
    const LevelGraph graph = tmpl_->build({k.data(), static_cast<size_t>(k.size())});
    ModelPredictor pred(graph, {});
    rates.resize(static_cast<size_t>(n_data_));
    Eigen::MatrixXd unused;
    for (int d = 0; d < n_data_; ++d) {
      const auto& ds = (*datasets_)[static_cast<size_t>(d)];
      pred.predict(ds.sequence, ds.data, rates[static_cast<size_t>(d)], unused);
    }
  }

  double amplitude_guess(int d, const Eigen::VectorXd& rate) const {
    const auto& y = y_[static_cast<size_t>(d)];
    const auto& w = w_[static_cast<size_t>(d)];
    const Eigen::VectorXd w2 = w.cwiseProduct(w);
    const double den = rate.cwiseProduct(rate).dot(w2);
    double a = den > 0.0 ? y.cwiseProduct(rate).dot(w2) / den : 0.0;
    if (!(a > 0.0)) {
      const double rs = rate.cwiseAbs().sum();
      a = rs > 0.0 ? y.cwiseAbs().sum() / rs : 1.0;
    }
    return std::max(a, 1e-15);
  }

  void assemble(const Eigen::VectorXd& u,
                const std::vector<Eigen::VectorXd>& rates,
                Eigen::VectorXd& r) const {
    r.resize(m_);
    int off = 0;
    for (int d = 0; d < n_data_; ++d) {
      const auto& y = y_[static_cast<size_t>(d)];
      const auto& w = w_[static_cast<size_t>(d)];
      const double a = std::exp(u[amp_index(d)]);
      const double b = fit_bg_ ? u[bg_index(d)] : 0.0;
      const auto n = y.size();
      r.segment(off, n) =
          (((a * rates[static_cast<size_t>(d)]).array() + b - y.array()) *
           w.array())
              .matrix();
      off += static_cast<int>(n);
    }
  }

  void exact_jacobian(const Eigen::VectorXd& u, Eigen::VectorXd& r,
                      Eigen::MatrixXd& jac) {
    const Eigen::VectorXd k = physics_from(u);
    const LevelGraph graph =
        tmpl_->build({k.data(), static_cast<size_t>(k.size())});
    ModelPredictor pred(graph, dgraph_ptrs_);
    std::vector<Eigen::VectorXd> rates(static_cast<size_t>(n_data_));
    int off = 0;
    for (int d = 0; d < n_data_; ++d) {
      const auto& ds = (*datasets_)[static_cast<size_t>(d)];
      Eigen::MatrixXd drate;
      pred.predict(ds.sequence, ds.data, rates[static_cast<size_t>(d)], drate);
      const auto& w = w_[static_cast<size_t>(d)];
      const double a = std::exp(u[amp_index(d)]);
      const auto n = w.size();
      for (size_t fj = 0; fj < free_.size(); ++fj) {
        const double chain =
            dnatural_du(coords_[fj], k[free_[fj]]);  // d k / d u
        jac.block(off, static_cast<Eigen::Index>(fj), n, 1) =
            (a * chain) * drate.col(static_cast<Eigen::Index>(fj))
                              .cwiseProduct(w);
      }
      off += static_cast<int>(n);
    }
    assemble(u, rates, r);
    last_rates_ = std::move(rates);
  }

  void finite_difference_physics(const Eigen::VectorXd& u,
                                 const Eigen::VectorXd& r0,
                                 Eigen::MatrixXd& jac) {
    const std::vector<Eigen::VectorXd> base_rates = last_rates_;
    const bool central = mode_ == JacobianMode::CentralDiff;
    const double href = central ? 6e-6 : 1.5e-8;
    Eigen::VectorXd rp(m_), rm(m_);
    for (size_t fj = 0; fj < free_.size(); ++fj) {
      const auto j = static_cast<Eigen::Index>(fj);
      double h = href * (1.0 + std::abs(u[j]));
      Eigen::VectorXd up = u;
      if (central) {
        // stay inside the box, shrinking symmetrically when pinched
        h = std::min({h, hi_u_[j] - u[j] > 0 ? hi_u_[j] - u[j] : h,
                      u[j] - lo_u_[j] > 0 ? u[j] - lo_u_[j] : h});
        if (!(h > 0.0)) h = href;
        up[j] = u[j] + h;
        eval_rates_residual(up, rp);
        up[j] = u[j] - h;
        eval_rates_residual(up, rm);
        jac.col(j) = (rp - rm) / (2.0 * h);
      } else {
        if (u[j] + h > hi_u_[j]) h = -h;  // step into the box
        up[j] = u[j] + h;
        eval_rates_residual(up, rp);
        jac.col(j) = (rp - r0) / h;
      }
    }
    last_rates_ = base_rates;
  }

  void eval_rates_residual(const Eigen::VectorXd& u, Eigen::VectorXd& r) const {
    std::vector<Eigen::VectorXd> rates;
    predict_rates(physics_from(u), rates);
    assemble(u, rates, r);
  }

  void nuisance_columns(const Eigen::VectorXd& u, Eigen::MatrixXd& jac) const {
    int off = 0;
    for (int d = 0; d < n_data_; ++d) {
      const auto& w = w_[static_cast<size_t>(d)];
      const double a = std::exp(u[amp_index(d)]);
      const auto n = w.size();
      jac.block(off, amp_index(d), n, 1) =
          (a * last_rates_[static_cast<size_t>(d)]).cwiseProduct(w);
      if (fit_bg_) jac.block(off, bg_index(d), n, 1) = w;
      off += static_cast<int>(n);
    }
  }

  const RateModelTemplate* tmpl_;
  std::vector<FitParameter> params_;
  const std::vector<FitDataset>* datasets_;
  JacobianMode mode_;
  bool fit_bg_;
  std::vector<int> free_;
  std::vector<LevelGraph> dgraphs_;
  std::vector<const LevelGraph*> dgraph_ptrs_;
  std::vector<Eigen::VectorXd> y_, w_;
  std::vector<double> amp_ref_;
  std::vector<Coord> coords_;
  Eigen::VectorXd lo_u_, hi_u_;
  std::vector<Eigen::VectorXd> last_rates_;
  int n_data_ = 0;
  int m_ = 0;
};

void check_parameters(const RateModelTemplate& tmpl,
                      const std::vector<FitParameter>& params) {
  const auto defaults = tmpl.parameters();
  if (params.size() != defaults.size())
    throw ValidationError("parameter list does not match the template");
  std::set<std::string> seen;
  for (size_t j = 0; j < params.size(); ++j) {
    const auto& p = params[j];
    if (p.name != defaults[j].name)
      throw ValidationError("parameter order mismatch: expected '" +
                            defaults[j].name + "', got '" + p.name + "'");
    if (!seen.insert(p.name).second)
      throw ValidationError("duplicate parameter: " + p.name);
    if (!std::isfinite(p.initial) || !std::isfinite(p.lower) ||
        !std::isfinite(p.upper))
      throw ValidationError("non-finite parameter spec: " + p.name);
    if (!(p.lower < p.upper))
      throw ValidationError("empty bound interval for " + p.name);
    if (p.log_scale && !(p.lower > 0.0))
      throw ValidationError("log-scale parameter needs a positive lower bound: " +
                            p.name);
    if (p.initial < p.lower || p.initial > p.upper)
      throw ValidationError("initial value outside bounds: " + p.name);
  }
}

}  // namespace

double FitResult::value_of(std::string_view name) const {
  return values[index_of(name)];
}
double FitResult::sigma_of(std::string_view name) const {
  return sigma[index_of(name)];
}
int FitResult::index_of(std::string_view name) const {
  for (size_t j = 0; j < names.size(); ++j)
    if (names[j] == name) return static_cast<int>(j);
  throw ValidationError("no such fit parameter: " + std::string(name));
}

FitResult fit_model(const RateModelTemplate& tmpl,
                    const std::vector<FitParameter>& params,
                    const std::vector<FitDataset>& datasets,
                    const FitOptions& opts) {
  if (datasets.empty()) throw ValidationError("fit needs at least one dataset");
  if (opts.n_starts < 1) throw ValidationError("n_starts must be >= 1");
  check_parameters(tmpl, params);

  TraceFitProblem problem(tmpl, params, datasets, opts);
  std::mt19937_64 rng(opts.seed);

  struct StartOutcome {
    Eigen::VectorXd u;
    LMDiagnostics diag;
    bool evaluated = false;
  };
  std::vector<StartOutcome> outcomes;
  std::vector<double> start_chi2;

  for (int s = 0; s < opts.n_starts; ++s) {
    StartOutcome out;
    try {
      out.u = problem.start_vector(s, rng);
      out.diag = lm_minimize(problem, out.u, problem.lower_u(),
                             problem.upper_u(), opts.lm);
      out.evaluated = true;
    } catch (const NumericalError&) {
      out.diag.converged = false;
      out.diag.chi2 = kInf;
      out.diag.stop_reason = "numerical failure";
    }
    start_chi2.push_back(out.diag.chi2);
    outcomes.push_back(std::move(out));
  }

  int best = -1;
  for (int s = 0; s < opts.n_starts; ++s) {
    if (!outcomes[static_cast<size_t>(s)].evaluated) continue;
    if (!outcomes[static_cast<size_t>(s)].diag.converged) continue;
    if (best < 0 || outcomes[static_cast<size_t>(s)].diag.chi2 <
                        outcomes[static_cast<size_t>(best)].diag.chi2)
      best = s;
  }
  if (best < 0) {
    std::string why = "fit did not converge from any start";
    for (const auto& o : outcomes)
      if (o.evaluated) {
        why += "; last stop: " + o.diag.stop_reason;
        break;
      }
    throw FitError(why);
  }

  const Eigen::VectorXd& u = outcomes[static_cast<size_t>(best)].u;
  const int nu = problem.n_internal();
  Eigen::VectorXd r;
  Eigen::MatrixXd jac;
  problem.eval_with_jacobian(u, r, jac);
  const double chi2 = r.squaredNorm();

  const int dof = problem.n_residuals() - nu;
  const double scale = dof > 0 ? chi2 / dof : 1.0;
  const Eigen::MatrixXd jtj = jac.transpose() * jac;
  Eigen::MatrixXd cov_u =
      jtj.completeOrthogonalDecomposition().pseudoInverse() * scale;

  // internal -> natural units
  Eigen::VectorXd dmap(nu);
  Eigen::VectorXd natural(nu);
  for (int j = 0; j < nu; ++j) {
    natural[j] = to_natural(problem.coord(j), u[j]);
    dmap[j] = dnatural_du(problem.coord(j), natural[j]);
  }
  const Eigen::MatrixXd cov_nat =
      dmap.asDiagonal() * cov_u * dmap.asDiagonal();

  const auto n_phys = static_cast<int>(params.size());
  const int n_data = problem.n_datasets();
  const int n_total = n_phys + n_data * (opts.fit_background ? 2 : 1);

  FitResult res;
  res.n_physics = n_phys;
  res.names.reserve(static_cast<size_t>(n_total));
  for (const auto& p : params) res.names.push_back(p.name);
  for (int d = 0; d < n_data; ++d) {
    const auto& lbl = datasets[static_cast<size_t>(d)].label;
    res.names.push_back("amp:" + (lbl.empty() ? "trace" + std::to_string(d) : lbl));
  }
  if (opts.fit_background)
    for (int d = 0; d < n_data; ++d) {
      const auto& lbl = datasets[static_cast<size_t>(d)].label;
      res.names.push_back("bg:" + (lbl.empty() ? "trace" + std::to_string(d) : lbl));
    }

  // scatter the free-coordinate results into the full parameter list
  std::vector<int> full_of(static_cast<size_t>(nu));
  {
    const auto& free = problem.free_indices();
    for (size_t fj = 0; fj < free.size(); ++fj)
      full_of[fj] = free[fj];
    for (int d = 0; d < n_data; ++d)
      full_of[static_cast<size_t>(problem.amp_index(d))] = n_phys + d;
    if (opts.fit_background)
      for (int d = 0; d < n_data; ++d)
        full_of[static_cast<size_t>(problem.bg_index(d))] = n_phys + n_data + d;
  }

  res.values.setZero(n_total);
  res.sigma.setZero(n_total);
  res.covariance.setZero(n_total, n_total);
  for (int j = 0; j < n_phys; ++j)
    res.values[j] = params[static_cast<size_t>(j)].initial;  // fixed defaults
  for (int j = 0; j < nu; ++j) {
    res.values[full_of[static_cast<size_t>(j)]] = natural[j];
    res.sigma[full_of[static_cast<size_t>(j)]] =
        std::sqrt(std::max(cov_nat(j, j), 0.0));
    for (int l = 0; l < nu; ++l)
      res.covariance(full_of[static_cast<size_t>(j)],
                     full_of[static_cast<size_t>(l)]) = cov_nat(j, l);
  }

  res.chi2 = chi2;
  res.dof = dof;
  res.reduced_chi2 = dof > 0 ? chi2 / dof : 0.0;
  res.residuals = std::move(r);
  res.diagnostics = outcomes[static_cast<size_t>(best)].diag;
  res.start_chi2 = std::move(start_chi2);
  res.best_start = best;
  return res;
}

Eigen::MatrixXd fit_jacobian(const RateModelTemplate& tmpl,
                             const std::vector<FitParameter>& params,
                             const std::vector<FitDataset>& datasets,
                             JacobianMode mode, bool fit_background) {
  if (datasets.empty()) throw ValidationError("fit needs at least one dataset");
  check_parameters(tmpl, params);
  FitOptions opts;
  opts.jacobian = mode;
  opts.fit_background = fit_background;
  TraceFitProblem problem(tmpl, params, datasets, opts);
  std::mt19937_64 rng(0);  // start 0 ignores the rng
  const Eigen::VectorXd u = problem.start_vector(0, rng);
  Eigen::VectorXd r;
  Eigen::MatrixXd jac;
  problem.eval_with_jacobian(u, r, jac);
  return jac;
}

// --- recovery fit -----------------------------------------------------

namespace {

class RecoveryProblem final : public LeastSquaresProblem {
 public:
  RecoveryProblem(const RecoveryCurve& curve) {
    const auto n = static_cast<Eigen::Index>(curve.ratios.size());
    t_.resize(n);
    y_.resize(n);
    w_.resize(n);
    for (Eigen::Index i = 0; i < n; ++i) {
      t_[i] = curve.dark_times_ns[static_cast<size_t>(i)];
      y_[i] = curve.ratios[static_cast<size_t>(i)];
      w_[i] = curve.sigma.empty() ? 1.0 : 1.0 / curve.sigma[static_cast<size_t>(i)];
    }
  }

  // u = [r_inf, r0, ln tau]
  int n_residuals() const override { return static_cast<int>(t_.size()); }

  void eval(const Eigen::VectorXd& u, Eigen::VectorXd& r) override {
    const double tau = std::exp(u[2]);
    const Eigen::ArrayXd e = (-t_.array() / tau).exp();
    r = ((u[0] - (u[0] - u[1]) * e - y_.array()) * w_.array()).matrix();
  }

  void eval_with_jacobian(const Eigen::VectorXd& u, Eigen::VectorXd& r,
                          Eigen::MatrixXd& jac) override {
    const double tau = std::exp(u[2]);
    const Eigen::ArrayXd e = (-t_.array() / tau).exp();
    r = ((u[0] - (u[0] - u[1]) * e - y_.array()) * w_.array()).matrix();
    jac.resize(t_.size(), 3);
    jac.col(0) = ((1.0 - e) * w_.array()).matrix();
    jac.col(1) = (e * w_.array()).matrix();
    jac.col(2) = ((-(u[0] - u[1])) * e * (t_.array() / tau) * w_.array()).matrix();
  }

 private:
  Eigen::VectorXd t_, y_, w_;
};

}  // namespace

RecoveryFit fit_recovery(const RecoveryCurve& curve, const LMOptions& lm) {
  curve.validate();
  const auto n = curve.ratios.size();
  if (n < 4)
    throw FitError(
        "degenerate recovery fit: need at least 4 dark-time points for a "
        "3-parameter exponential");

  const double ymax = *std::max_element(curve.ratios.begin(), curve.ratios.end());
  const double ymin = *std::min_element(curve.ratios.begin(), curve.ratios.end());
  if (ymax - ymin <= 1e-6 * std::max(ymax, 1e-12))
    throw FitError("recovery curve is flat; lifetime not identifiable");

  const double tmax =
      *std::max_element(curve.dark_times_ns.begin(), curve.dark_times_ns.end());
  // ratio at the largest dark time approximates the recovered plateau
  const size_t i_last = static_cast<size_t>(
      std::max_element(curve.dark_times_ns.begin(), curve.dark_times_ns.end()) -
      curve.dark_times_ns.begin());
  const size_t i_first = static_cast<size_t>(
      std::min_element(curve.dark_times_ns.begin(), curve.dark_times_ns.end()) -
      curve.dark_times_ns.begin());

  RecoveryProblem problem(curve);
  Eigen::VectorXd lo(3), hi(3);
  lo << 1e-4, 1e-6, std::log(1e-2);
  hi << 2.0, 2.0, std::log(1e7);

  const double tau0 = std::max(tmax / 3.0, 0.1);
  const double scales[] = {1.0, 0.2, 5.0, 0.04, 25.0};

  RecoveryFit best;
  bool have = false;
  Eigen::VectorXd u_best;
  for (double s : scales) {
    Eigen::VectorXd u(3);
    u << std::clamp(curve.ratios[i_last], 1e-4, 2.0),
        std::clamp(curve.ratios[i_first], 1e-6, 2.0),
        std::clamp(std::log(tau0 * s), lo[2], hi[2]);
    LMDiagnostics diag;
    try {
      diag = lm_minimize(problem, u, lo, hi, lm);
    } catch (const NumericalError&) {
      continue;
    }
    if (!diag.converged) continue;
    if (!have || diag.chi2 < best.diagnostics.chi2) {
      best.diagnostics = diag;
      u_best = u;
      have = true;
    }
  }
  if (!have) throw FitError("recovery fit did not converge");

  const double tau = std::exp(u_best[2]);
  const double edge = 1e-3;
  if (u_best[2] <= lo[2] + edge || u_best[2] >= hi[2] - edge)
    throw FitError("recovery time ran into the fit bounds");

  Eigen::VectorXd r;
  Eigen::MatrixXd jac;
  problem.eval_with_jacobian(u_best, r, jac);
  const double chi2 = r.squaredNorm();
  const int dof = static_cast<int>(n) - 3;
  const double scale = dof > 0 ? chi2 / dof : 1.0;
  const Eigen::MatrixXd cov_u =
      (jac.transpose() * jac).completeOrthogonalDecomposition().pseudoInverse() *
      scale;
  Eigen::Vector3d dmap(1.0, 1.0, tau);
  const Eigen::Matrix3d cov = dmap.asDiagonal() * cov_u * dmap.asDiagonal();

  best.r_inf = u_best[0];
  best.r0 = u_best[1];
  best.tau_ns = tau;
  best.covariance = cov;
  best.r_inf_sigma = std::sqrt(std::max(cov(0, 0), 0.0));
  best.r0_sigma = std::sqrt(std::max(cov(1, 1), 0.0));
  best.tau_sigma = std::sqrt(std::max(cov(2, 2), 0.0));
  best.chi2 = chi2;
  best.dof = dof;
  return best;
}

// --- derived quantities -------------------------------------------------

LifetimeEstimate propagate_lifetime(double kappa0_mhz, double kappa1_mhz,
                                    const Eigen::Matrix2d& covariance) {
  const double s = kappa0_mhz + 2.0 * kappa1_mhz;
  if (!(s > 0.0))
    throw ValidationError("singlet decay rates must be positive");
  LifetimeEstimate out;
  out.tau_ns = analytic_singlet_lifetime(kappa0_mhz, kappa1_mhz);
  // gradient of 1000/s with respect to (kappa0, kappa1)
  Eigen::Vector2d g(-1000.0 / (s * s), -2000.0 / (s * s));
  const double var = g.dot(covariance * g);
  out.sigma_ns = std::sqrt(std::max(var, 0.0));
  return out;
}

LifetimeEstimate lifetime_from_fit(const FitResult& fit) {
  const int i0 = fit.index_of("kappa0");
  const int i1 = fit.index_of("kappa1");
  Eigen::Matrix2d cov;
  cov << fit.covariance(i0, i0), fit.covariance(i0, i1),
      fit.covariance(i1, i0), fit.covariance(i1, i1);
  return propagate_lifetime(fit.values[i0], fit.values[i1], cov);
}

RunsTest runs_test(std::span<const double> residuals) {
  RunsTest out;
  if (residuals.size() < 2)
    throw ValidationError("runs test needs at least 2 residuals");
  int prev_sign = 0;
  for (double r : residuals) {
    if (!std::isfinite(r)) throw ValidationError("non-finite residual");
    const int sign = r >= 0.0 ? 1 : -1;
    (sign > 0 ? out.n_positive : out.n_negative) += 1;
    if (sign != prev_sign) ++out.n_runs;
    prev_sign = sign;
  }
  const double n1 = out.n_positive, n2 = out.n_negative;
  const double n = n1 + n2;
  if (out.n_positive == 0 || out.n_negative == 0) {
    // one run of a single sign: degenerate, but a gross mismatch when long
    out.z = 0.0;
    out.p_value = n > 20 ? 0.0 : 1.0;
    return out;
  }
  const double mu = 2.0 * n1 * n2 / n + 1.0;
  const double var = (mu - 1.0) * (mu - 2.0) / (n - 1.0);
  if (var <= 0.0) {
    out.z = 0.0;
    out.p_value = 1.0;
    return out;
  }
  out.z = (out.n_runs - mu) / std::sqrt(var);
  out.p_value = 0.5 * std::erfc(-out.z / std::sqrt(2.0));  // Phi(z)
  return out;
}

std::string format_value_uncertainty(double value, double sigma) {
  char buf[64];
  if (!std::isfinite(value)) return "nan";
  if (!(sigma > 0.0) || !std::isfinite(sigma)) {
    std::snprintf(buf, sizeof buf, "%g", value);
    return buf;
  }
  int e = static_cast<int>(std::floor(std::log10(sigma)));
  int s1 = static_cast<int>(std::lround(sigma / std::pow(10.0, e)));
  if (s1 >= 10) {
    s1 = 1;
    ++e;
  }
  if (e < 0) {
    std::snprintf(buf, sizeof buf, "%.*f(%d)", -e, value, s1);
  } else {
    const double step = std::pow(10.0, e);
    const double vr = std::round(value / step) * step;
    const auto paren = static_cast<long long>(std::llround(s1 * step));
    std::snprintf(buf, sizeof buf, "%.0f(%lld)", vr, paren);
  }
  return buf;
}

}  // namespace vbsim
