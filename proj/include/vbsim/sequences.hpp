#pragma once

#include <optional>
#include <string>
#include <vector>

#include "vbsim/propagation.hpp"

namespace vbsim {

enum class ElementKind { Pulse, Dark, Wait, ResetThermal };

std::string_view to_string(ElementKind k);
ElementKind element_kind_from_string(std::string_view s);

// One protocol element. ResetThermal has no duration: it marks an
// instantaneous re-thermalization of the spin populations, substituting
// for a wait much longer than T1.
struct SequenceElement {
  ElementKind kind = ElementKind::Wait;
  double duration_ns = 0.0;
  double power_mw = 0.0;  // pulse only
};

struct PulseSequence {
  std::vector<SequenceElement> elements;
  int repeat_count = 1;
  std::string id;
  // Experimental repetition period when it differs from the simulated
  // duration (a reset stands in for a long wait). Drives shot-noise
  // repetition counting.
  std::optional<double> nominal_period_ns;

  double total_duration_ns() const;  // simulated: sum of durations x repeats
  double period_ns() const;          // nominal, or one repeat's duration
  void validate() const;
};

inline SequenceElement pulse(double duration_ns, double power_mw) {
  return {ElementKind::Pulse, duration_ns, power_mw};
}
inline SequenceElement dark(double duration_ns) {
  return {ElementKind::Dark, duration_ns, 0.0};
}
inline SequenceElement wait(double duration_ns) {
  return {ElementKind::Wait, duration_ns, 0.0};
}
inline SequenceElement reset_thermal() {
  return {ElementKind::ResetThermal, 0.0, 0.0};
}

// Pulse-pair scan over dark times, used for the singlet-lifetime
// pulse-recovery measurement.
struct RecoveryScan {
  double pulse_duration_ns = 1000.0;
  double power_mw = 13.6;
  std::vector<double> dark_times_ns;
  double inter_pair_wait_ns = 100.0;

  void validate() const;
};

// Uniform grid over [0, t_max], count points.
std::vector<double> uniform_dark_times(double t_max_ns, int count);

// One sequence per dark time: [pulse, dark(t_D), pulse, wait].
std::vector<PulseSequence> build_recovery_scan(const RecoveryScan& scan);

// [reset-thermal?, pulse, dark, pulse, wait]. With reset the trailing
// wait is truncated to truncated_wait_ns (the reset substitutes for the
// long depolarization wait); the full period is kept as nominal_period_ns.
PulseSequence build_pump_probe(double pulse_ns, double dark_ns, double wait_ns,
                               double power_mw, bool reset,
                               double truncated_wait_ns = 200.0);

// Lossless compilation to a power profile plus reset markers and pulse
// landmarks (repeats unrolled).
struct CompiledSequence {
  PowerProfile profile;
  std::vector<double> reset_times_ns;
  std::vector<double> pulse_onsets_ns;
  std::vector<double> pulse_durations_ns;
  double total_duration_ns = 0.0;
};

CompiledSequence compile(const PulseSequence& seq, double rise_ns,
                         std::optional<double> fall_ns = {});

}  // namespace vbsim
