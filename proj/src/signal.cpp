#include "vbsim/signal.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>

#include "vbsim/errors.hpp"
#include "vbsim/propagation.hpp"

namespace vbsim {

std::string_view to_string(TraceMode m) {
  return m == TraceMode::Rate ? "rate" : "counts";
}

TraceMode trace_mode_from_string(std::string_view s) {
  if (s == "rate") return TraceMode::Rate;
  if (s == "counts") return TraceMode::Counts;
  throw ValidationError("unknown trace mode: " + std::string(s));
}

void PLTrace::validate() const {
  if (!(bin_width_ns > 0.0) || !std::isfinite(bin_width_ns))
    throw ValidationError("bin width must be positive");
  if (!std::isfinite(t_start_ns)) throw ValidationError("non-finite t_start");
  if (values.empty()) throw ValidationError("empty trace");
  for (double v : values)
    if (!std::isfinite(v)) throw ValidationError("non-finite trace value");
  if (!sigma.empty()) {
    if (sigma.size() != values.size())
      throw ValidationError("sigma length mismatch");
    for (double s : sigma)
      if (!(s > 0.0) || !std::isfinite(s))
        throw ValidationError("sigma must be positive");
  }
  if (meta.mode == TraceMode::Counts)
    for (double v : values)
      if (v < 0.0) throw ValidationError("negative photon count");
}

PLTrace synthesize_trace(const LevelGraph& graph, const CompiledSequence& seq,
                         const SynthesisOptions& opts) {
  if (!(opts.bin_width_ns > 0.0) || !std::isfinite(opts.bin_width_ns))
    throw ValidationError("bin width must be positive");
  if (!(opts.rate_scale > 0.0)) throw ValidationError("rate_scale must be positive");
  if (opts.background_rate_mhz < 0.0)
    throw ValidationError("background rate must be >= 0");
  if (!graph.has_emitter())
    throw ValidationError("level graph has no emitting state");

  const double w = opts.bin_width_ns;
  const auto n_bins =
      static_cast<std::size_t>(std::floor(seq.total_duration_ns / w + 1e-9));
  if (n_bins == 0) throw ValidationError("sequence shorter than one bin");

  const Eigen::VectorXd& em = graph.emission_vector();
  std::vector<double> edge_rate;
  edge_rate.reserve(n_bins + 1);

  Propagator prop(graph);
  propagate_events(prop, graph, seq.profile, seq.reset_times_ns,
                   thermal_state(graph), w, [&](const StepSample& s) {
                     if (edge_rate.size() <= n_bins)
                       edge_rate.push_back(em.dot(s.population) *
                                               opts.rate_scale +
                                           opts.background_rate_mhz);
                   });
  if (edge_rate.size() < n_bins + 1)
    throw NumericalError("propagation produced too few samples");

  PLTrace tr;
  tr.t_start_ns = 0.0;
  tr.bin_width_ns = w;
  tr.values.resize(n_bins);
  for (std::size_t k = 0; k < n_bins; ++k)
    tr.values[k] = 0.5 * (edge_rate[k] + edge_rate[k + 1]);

  tr.meta.id = opts.id;
  tr.meta.mode = TraceMode::Rate;
  tr.meta.pulse_onsets_ns = seq.pulse_onsets_ns;
  tr.meta.pulse_durations_ns = seq.pulse_durations_ns;
  tr.meta.period_ns = seq.total_duration_ns;
  tr.meta.rate_scale = opts.rate_scale;
  double pmax = 0.0;
  for (const auto& s : seq.profile.segments)
    pmax = std::max(pmax, s.target_power_mw);
  tr.meta.power_mw = pmax;
  return tr;
}

PLTrace add_shot_noise(const PLTrace& rate_trace, const NoiseOptions& opts) {
  rate_trace.validate();
  if (rate_trace.meta.mode != TraceMode::Rate)
    throw ValidationError("shot noise applies to rate traces");
  if (!(opts.efficiency > 0.0) || opts.efficiency > 1.0)
    throw ValidationError("efficiency must be in (0, 1]");
  if (!(opts.averaging_s > 0.0))
    throw ValidationError("averaging time must be positive");
  if (!(rate_trace.meta.period_ns > 0.0))
    throw ValidationError("trace has no repetition period");

  const double reps_f =
      std::floor(opts.averaging_s * 1e9 / rate_trace.meta.period_ns);
  if (reps_f < 1.0)
    throw ValidationError("averaging time shorter than one period");
  const auto reps = static_cast<long long>(reps_f);

  PLTrace out = rate_trace;
  out.meta.mode = TraceMode::Counts;
  out.meta.efficiency = opts.efficiency;
  out.meta.repetitions = reps;
  out.meta.seed = opts.seed;
  out.sigma.resize(out.values.size());

  std::mt19937_64 rng(opts.seed);
  const double photon_per_rep =
      rate_trace.bin_width_ns * rate_time_scale * opts.efficiency;
  for (std::size_t k = 0; k < out.values.size(); ++k) {
    const double mean =
        std::max(0.0, rate_trace.values[k]) * photon_per_rep * reps_f;
    std::poisson_distribution<long long> pois(mean);
    const double n = mean > 0.0 ? static_cast<double>(pois(rng)) : 0.0;
    out.values[k] = n;
    // quote the true Poisson variance, not sqrt(n): weighting by observed
    // counts biases later fits low wherever bins are nearly empty
    out.sigma[k] = std::sqrt(std::max(mean, 1.0));
  }
  return out;
}

PLTrace slice_trace(const PLTrace& trace, double t0_ns, double t1_ns) {
  trace.validate();
  if (!(t1_ns > t0_ns)) throw ValidationError("empty slice window");
  std::size_t first = trace.size(), last = trace.size();
  for (std::size_t i = 0; i < trace.size(); ++i) {
    const double c = trace.time_at(i);
    if (first == trace.size() && c >= t0_ns) first = i;
    if (c < t1_ns) last = i + 1;
  }
  if (first >= last) throw ValidationError("slice window contains no bins");

  PLTrace out;
  out.t_start_ns = trace.t_start_ns + trace.bin_width_ns * static_cast<double>(first);
  out.bin_width_ns = trace.bin_width_ns;
  out.values.assign(trace.values.begin() + first, trace.values.begin() + last);
  if (trace.has_sigma())
    out.sigma.assign(trace.sigma.begin() + first, trace.sigma.begin() + last);
  out.meta = trace.meta;
  return out;
}

PeakEstimate peak_height(const PLTrace& trace, double onset_ns,
                         double window_ns) {
  trace.validate();
  if (!(window_ns > 0.0)) throw ValidationError("peak window must be positive");

  PeakEstimate best;
  bool found = false;
  for (std::size_t i = 0; i < trace.size(); ++i) {
    const double c = trace.time_at(i);
    if (c < onset_ns || c > onset_ns + window_ns) continue;
    // 3-bin moving average, shrinking at trace edges
    const std::size_t lo = i > 0 ? i - 1 : i;
    const std::size_t hi = i + 1 < trace.size() ? i + 1 : i;
    double acc = 0.0, var = 0.0;
    for (std::size_t j = lo; j <= hi; ++j) {
      acc += trace.values[j];
      if (trace.has_sigma()) var += trace.sigma[j] * trace.sigma[j];
    }
    const auto m = static_cast<double>(hi - lo + 1);
    const double v = acc / m;
    if (!found || v > best.value) {
      best.value = v;
      best.time_ns = c;
      if (trace.has_sigma()) best.sigma = std::sqrt(var) / m;
      found = true;
    }
  }
  if (!found)
    throw ValidationError("peak window contains no bins");
  return best;
}

double steady_level(const PLTrace& trace, double onset_ns, double duration_ns,
                    double tail_fraction) {
  trace.validate();
  if (!(duration_ns > 0.0)) throw ValidationError("pulse duration must be positive");
  if (!(tail_fraction > 0.0) || tail_fraction > 1.0)
    throw ValidationError("tail fraction must be in (0, 1]");
  const double t0 = onset_ns + (1.0 - tail_fraction) * duration_ns;
  const double t1 = onset_ns + duration_ns;
  double acc = 0.0;
  std::size_t n = 0;
  for (std::size_t i = 0; i < trace.size(); ++i) {
    const double c = trace.time_at(i);
    if (c >= t0 && c < t1) {
      acc += trace.values[i];
      ++n;
    }
  }
  if (n == 0) throw ValidationError("steady window contains no bins");
  return acc / static_cast<double>(n);
}

double pulse_contrast(const PLTrace& trace, double onset_ns,
                      double duration_ns) {
  const PeakEstimate pk = peak_height(trace, onset_ns);
  const double steady = steady_level(trace, onset_ns, duration_ns);
  if (!(pk.value > 0.0)) throw NumericalError("non-positive pulse peak");
  return (pk.value - steady) / pk.value;
}

void RecoveryCurve::validate() const {
  if (dark_times_ns.size() != ratios.size() || ratios.empty())
    throw ValidationError("recovery curve size mismatch");
  if (!sigma.empty() && sigma.size() != ratios.size())
    throw ValidationError("recovery sigma length mismatch");
  for (std::size_t i = 0; i < ratios.size(); ++i) {
    if (!(dark_times_ns[i] >= 0.0) || !std::isfinite(dark_times_ns[i]))
      throw ValidationError("dark times must be >= 0");
    // the second peak can top the thermal one well past unity (strong
    // spin contrast, fast singlet return), so the sanity ceiling is loose
    if (!(ratios[i] > 0.0) || ratios[i] > 2.0)
      throw ValidationError("recovery ratio outside (0, 2]");
    if (!sigma.empty() && !(sigma[i] > 0.0))
      throw ValidationError("recovery sigma must be positive");
  }
}

PeakEstimate recovery_ratio(const PLTrace& trace) {
  const auto& on = trace.meta.pulse_onsets_ns;
  const auto& dur = trace.meta.pulse_durations_ns;
  if (on.size() < 2 || dur.size() < 2)
    throw ValidationError("recovery ratio needs a two-pulse trace");
  const PeakEstimate p1 = peak_height(trace, on[0]);
  const PeakEstimate p2 = peak_height(trace, on[1]);
  if (!(p1.value > 0.0)) throw NumericalError("non-positive reference peak");

  PeakEstimate out;
  out.value = p2.value / p1.value;
  out.time_ns = on[1] - (on[0] + dur[0]);  // dark interval
  if (p1.sigma && p2.sigma) {
    const double r1 = *p1.sigma / p1.value;
    const double r2 = *p2.sigma / std::max(p2.value, 1e-300);
    out.sigma = out.value * std::sqrt(r1 * r1 + r2 * r2);
  }
  return out;
}

RecoveryCurve build_recovery_curve(const std::vector<PLTrace>& traces) {
  if (traces.empty()) throw ValidationError("no traces");
  struct Pt {
    double td, r;
    std::optional<double> s;
  };
  std::vector<Pt> pts;
  pts.reserve(traces.size());
  bool all_sigma = true;
  for (const auto& tr : traces) {
    const PeakEstimate e = recovery_ratio(tr);
    if (!e.sigma) all_sigma = false;
    pts.push_back({e.time_ns, e.value, e.sigma});
  }
  std::sort(pts.begin(), pts.end(),
            [](const Pt& a, const Pt& b) { return a.td < b.td; });

  RecoveryCurve out;
  out.power_mw = traces.front().meta.power_mw;
  out.id = traces.front().meta.id;
  for (const auto& p : pts) {
    out.dark_times_ns.push_back(p.td);
    out.ratios.push_back(p.r);
    if (all_sigma) out.sigma.push_back(*p.s);
  }
  out.validate();
  return out;
}

}  // namespace vbsim
