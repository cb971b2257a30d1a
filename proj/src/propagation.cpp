#include "vbsim/propagation.hpp"

#include <algorithm>
#include <cmath>

#include <unsupported/Eigen/MatrixFunctions>

namespace vbsim {

namespace {
// Power deviation fraction below which a segment's rise is treated as
// complete; exp(-t/tau) < 1e-3 after t = tau * ln(1000).
constexpr double rise_complete_fraction = 1e-3;
}  // namespace

double PowerProfile::total_duration_ns() const {
  double t = 0.0;
  for (const auto& s : segments) t += s.duration_ns;
  return t;
}

void PowerProfile::validate() const {
  if (segments.empty()) throw ValidationError("PowerProfile: no segments");
  for (const auto& s : segments) {
    if (!(s.duration_ns > 0.0))
      throw ValidationError("PowerProfile: segment durations must be > 0");
    if (!(s.target_power_mw >= 0.0))
      throw ValidationError("PowerProfile: powers must be >= 0");
  }
  if (!(rise_time_ns >= 0.0) || (fall_time_ns && !(*fall_time_ns >= 0.0)))
    throw ValidationError("PowerProfile: rise/fall time must be >= 0");
  if (!(initial_power_mw >= 0.0))
    throw ValidationError("PowerProfile: initial power must be >= 0");
}

Eigen::VectorXd propagate_constant(const Eigen::MatrixXd& generator_mhz,
                                   const Eigen::VectorXd& p0, double t_ns) {
  if (!(t_ns >= 0.0))
    throw ValidationError("propagate_constant: t must be >= 0");
  if (t_ns == 0.0) return p0;
  const Eigen::MatrixXd a = generator_mhz * (t_ns * rate_time_scale);
  const Eigen::VectorXd out = a.exp() * p0;
  if (!out.allFinite())
    throw NumericalError("propagate_constant: non-finite result");
  return out;
}

Propagator::Propagator(const LevelGraph& graph) : graph_(&graph) {}

Propagator::Propagator(const LevelGraph& graph,
                       std::span<const LevelGraph* const> derivative_graphs)
    : graph_(&graph) {
  deriv_pieces_.reserve(derivative_graphs.size());
  for (const LevelGraph* dg : derivative_graphs) {
    if (dg->size() != graph.size())
      throw ValidationError("Propagator: derivative graph size mismatch");
    deriv_pieces_.push_back(dg->generator_pieces());
  }
}

void Propagator::reset(const Eigen::VectorXd& p0) {
  p_ = p0;
  dp_.assign(deriv_pieces_.size(), Eigen::VectorXd::Zero(p0.size()));
}

const Propagator::Step& Propagator::step_for(double power_mw, double dt_ns) {
  const auto key = std::make_pair(power_mw, dt_ns);
  auto it = cache_.find(key);
  if (it != cache_.end()) return it->second;

  const double scale = dt_ns * rate_time_scale;
  const auto& gp = graph_->generator_pieces();
  const Eigen::MatrixXd a =
      (gp[0] + power_mw * gp[1] + power_mw * power_mw * gp[2]) * scale;

  Step step;
  step.propagator = a.exp();
  const int n = graph_->size();
  step.frechet.reserve(deriv_pieces_.size());
  for (const auto& dgp : deriv_pieces_) {
    const Eigen::MatrixXd e =
        (dgp[0] + power_mw * dgp[1] + power_mw * power_mw * dgp[2]) * scale;
    // Frechet derivative of expm via the block identity
    // expm([[A,E],[0,A]]) = [[expm(A), L(A,E)],[0, expm(A)]].
    Eigen::MatrixXd block = Eigen::MatrixXd::Zero(2 * n, 2 * n);
    block.topLeftCorner(n, n) = a;
    block.bottomRightCorner(n, n) = a;
    block.topRightCorner(n, n) = e;
    step.frechet.push_back(block.exp().topRightCorner(n, n));
  }
  return cache_.emplace(key, std::move(step)).first->second;
}

void Propagator::advance(double power_mw, double dt_ns) {
  if (dt_ns <= 0.0) return;
  const Step& s = step_for(power_mw, dt_ns);
  for (size_t j = 0; j < dp_.size(); ++j)
    dp_[j] = s.propagator * dp_[j] + s.frechet[j] * p_;
  p_ = s.propagator * p_;
  if (!p_.allFinite())
    throw NumericalError("Propagator: non-finite population");
}

namespace {

struct PowerState {
  double start = 0.0;   // power at segment entry
  double target = 0.0;  // segment target
  double tau = 0.0;     // exponential time constant (0 = step)

  double at(double t_in_segment) const {
    if (tau <= 0.0) return target;
    return target + (start - target) * std::exp(-t_in_segment / tau);
  }
  // Exact mean power over [t0, t1] within the segment.
  double mean(double t0, double t1) const {
    if (tau <= 0.0 || t1 <= t0) return at(t1);
    const double w =
        tau / (t1 - t0) * (std::exp(-t0 / tau) - std::exp(-t1 / tau));
    return target + (start - target) * w;
  }
};

}  // namespace

void propagate_events(Propagator& prop, const LevelGraph& graph,
                      const PowerProfile& profile,
                      std::span<const double> reset_times_ns,
                      const Eigen::VectorXd& p0, double sample_dt_ns,
                      const SampleSink& sink) {
  profile.validate();
  if (!(sample_dt_ns > 0.0))
    throw ValidationError("propagate_events: sample_dt must be > 0");
  if (p0.size() != graph.size())
    throw ValidationError("propagate_events: p0 size mismatch");
  if (!std::is_sorted(reset_times_ns.begin(), reset_times_ns.end()))
    throw ValidationError("propagate_events: reset times must be sorted");

  const Eigen::VectorXd thermal = thermal_state(graph);
  const double total = profile.total_duration_ns();
  const double time_eps = 1e-9;

  prop.reset(p0);

  size_t reset_idx = 0;
  auto apply_resets_at = [&](double t) {
    while (reset_idx < reset_times_ns.size() &&
           reset_times_ns[reset_idx] <= t + time_eps) {
      prop.reset(thermal);
      ++reset_idx;
    }
  };

  long long sample_idx = 0;
  double current_power = profile.initial_power_mw;
  auto emit = [&](double t, double power) {
    sink(StepSample{t, power, prop.population(), prop.sensitivities()});
    ++sample_idx;
  };

  apply_resets_at(0.0);
  emit(0.0, current_power);

  double seg_start = 0.0;
  for (const auto& seg : profile.segments) {
    const double seg_end = seg_start + seg.duration_ns;
    PowerState ps;
    ps.start = current_power;
    ps.target = seg.target_power_mw;
    ps.tau = seg.target_power_mw >= current_power ? profile.rise_time_ns
                                                  : profile.fall_ns();
    if (ps.start == ps.target) ps.tau = 0.0;

    // Segment-local time after which power is within 0.1% of the target
    // and treated as constant.
    const double settle =
        ps.tau > 0.0 ? std::min(seg.duration_ns,
                                ps.tau * std::log(1.0 / rise_complete_fraction))
                     : 0.0;
    const bool settles_inside = ps.tau > 0.0 && settle < seg.duration_ns;
    const double substep = std::min(sample_dt_ns, ps.tau / 5.0);

    auto power_at_local = [&](double local) {
      if (ps.tau == 0.0) return ps.target;
      if (settles_inside && local >= settle - time_eps) return ps.target;
      return ps.at(local);
    };

    double t = seg_start;
    while (seg_end - t > time_eps) {
      const double local = t - seg_start;
      // Next stop: segment end, rise substep boundary, or sample time.
      double next = seg_end;
      if (ps.tau > 0.0 && local + time_eps < settle)
        next = std::min(next, seg_start + std::min(settle, local + substep));
      const double next_sample = static_cast<double>(sample_idx) * sample_dt_ns;
      bool sample_here = false;
      if (next_sample <= next + time_eps) {
        next = std::min(next, next_sample);
        sample_here = true;
      }
      if (next - t > time_eps) {
        const double local_next = next - seg_start;
        const double pbar = (ps.tau > 0.0 && local < settle - time_eps)
                                ? ps.mean(local, local_next)
                                : power_at_local(local_next);
        prop.advance(pbar, next - t);
      }
      t = next;
      current_power = power_at_local(t - seg_start);
      apply_resets_at(t);
      if (sample_here) emit(next_sample, current_power);
    }
    current_power = power_at_local(seg.duration_ns);
    seg_start = seg_end;
  }
  // Final sample when total duration lands on the grid but floating-point
  // drift pushed it just past the last segment.
  if (static_cast<double>(sample_idx) * sample_dt_ns <= total + time_eps)
    emit(static_cast<double>(sample_idx) * sample_dt_ns, current_power);
}

Trajectory propagate_profile(const LevelGraph& graph, const PowerProfile& profile,
                             const Eigen::VectorXd& p0, double sample_dt_ns) {
  Propagator prop(graph);
  Trajectory traj;
  const double total = profile.total_duration_ns();
  traj.times_ns.reserve(static_cast<size_t>(total / sample_dt_ns) + 2);
  propagate_events(prop, graph, profile, {}, p0, sample_dt_ns,
                   [&](const StepSample& s) {
                     Eigen::VectorXd p = s.population;
                     const double neg = p.minCoeff();
                     if (neg < 0.0) {
                       traj.max_negative = std::max(traj.max_negative, -neg);
                       p = p.cwiseMax(0.0);
                     }
                     traj.max_sum_deviation = std::max(
                         traj.max_sum_deviation, std::abs(s.population.sum() - 1.0));
                     traj.times_ns.push_back(s.t_ns);
                     traj.populations.push_back(std::move(p));
                     traj.power_mw.push_back(s.power_mw);
                   });
  return traj;
}

}  // namespace vbsim
