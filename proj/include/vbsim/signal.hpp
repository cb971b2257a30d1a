#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "vbsim/kinetics.hpp"
#include "vbsim/sequences.hpp"

namespace vbsim {

enum class TraceMode { Rate, Counts };

std::string_view to_string(TraceMode m);
TraceMode trace_mode_from_string(std::string_view s);

struct TraceMeta {
  std::string id;
  double power_mw = 0.0;
  TraceMode mode = TraceMode::Rate;
  std::vector<double> pulse_onsets_ns;
  std::vector<double> pulse_durations_ns;
  double period_ns = 0.0;        // repetition period of the source sequence
  double efficiency = 1.0;       // collection+detection, counts mode
  long long repetitions = 0;     // averaging repetitions, counts mode
  double rate_scale = 1.0;       // emitter-count / optics lumped factor
  std::optional<std::uint64_t> seed;
};

// Uniformly binned photoluminescence trace. `values` are mean emission
// rates (MHz) or photon counts per bin depending on meta.mode; `sigma`
// (same length when present) is the per-bin standard deviation used by
// weighted fits and is never recomputed from values downstream.
struct PLTrace {
  double t_start_ns = 0.0;
  double bin_width_ns = 0.0;
  std::vector<double> values;
  std::vector<double> sigma;
  TraceMeta meta;

  std::size_t size() const { return values.size(); }
  double time_at(std::size_t i) const {  // bin center
    return t_start_ns + (static_cast<double>(i) + 0.5) * bin_width_ns;
  }
  double t_end_ns() const {
    return t_start_ns + bin_width_ns * static_cast<double>(values.size());
  }
  bool has_sigma() const { return !sigma.empty(); }
  void validate() const;
};

struct SynthesisOptions {
  double bin_width_ns = 0.5;
  double rate_scale = 1.0;          // scales emission (ensemble size, optics)
  double background_rate_mhz = 0.0; // uniform additive rate
  std::string id;
};

// Propagate a compiled sequence from thermal equilibrium and integrate the
// emission rate over uniform bins (trapezoid on bin edges). Values in MHz.
PLTrace synthesize_trace(const LevelGraph& graph, const CompiledSequence& seq,
                         const SynthesisOptions& opts);

struct NoiseOptions {
  double efficiency = 0.05;    // photons detected per photon emitted
  double averaging_s = 300.0;  // wall-clock integration time
  std::uint64_t seed = 1;
};

// Convert a rate trace to accumulated photon counts with Poisson shot
// noise. Repetitions = floor(averaging / period). sigma = sqrt(max(n,1)).
PLTrace add_shot_noise(const PLTrace& rate_trace, const NoiseOptions& opts);

// Sub-trace covering bins whose centers fall in [t0, t1).
PLTrace slice_trace(const PLTrace& trace, double t0_ns, double t1_ns);

struct PeakEstimate {
  double value = 0.0;
  double time_ns = 0.0;
  std::optional<double> sigma;
};

// Peak PL after a pulse edge: maximum of a 3-bin moving average over
// window_ns past the onset. Robust against single-bin shot noise.
PeakEstimate peak_height(const PLTrace& trace, double onset_ns,
                         double window_ns = 50.0);

// Mean of the last `tail_fraction` of a pulse, the quasi-steady level.
double steady_level(const PLTrace& trace, double onset_ns, double duration_ns,
                    double tail_fraction = 0.2);

// (peak - steady) / peak for one pulse.
double pulse_contrast(const PLTrace& trace, double onset_ns,
                      double duration_ns);

// Normalized pulse-recovery data: second-pulse peak over first-pulse peak
// as a function of the dark interval between the pulses.
struct RecoveryCurve {
  std::vector<double> dark_times_ns;
  std::vector<double> ratios;
  std::vector<double> sigma;  // empty or same length
  double power_mw = 0.0;
  std::string id;

  void validate() const;
};

// Ratio of second to first pulse peak for a two-pulse trace.
PeakEstimate recovery_ratio(const PLTrace& trace);

// Assemble a recovery curve from two-pulse traces (one per dark time).
// Dark time is inferred from the gap between the pulse landmarks.
RecoveryCurve build_recovery_curve(const std::vector<PLTrace>& traces);

}  // namespace vbsim
