#pragma once

#include <cstdint>
#include <string>
#include <string_view>

#include <json.hpp>

#include "vbsim/inference.hpp"
#include "vbsim/kinetics.hpp"
#include "vbsim/sequences.hpp"
#include "vbsim/signal.hpp"

namespace vbsim {

using json = nlohmann::json;

json graph_to_json(const LevelGraph& graph);
LevelGraph graph_from_json(const json& j);

json sequence_to_json(const PulseSequence& seq);
PulseSequence sequence_from_json(const json& j);

json trace_meta_to_json(const TraceMeta& meta);
TraceMeta trace_meta_from_json(const json& j);

// Trace files: CSV of bin centers ("time_ns,value[,sigma]") plus a JSON
// sidecar at <path>.meta.json carrying binning and provenance. Doubles
// are printed with 17 significant digits so ingestion round-trips
// exactly.
void save_trace(const PLTrace& trace, const std::string& csv_path);
PLTrace load_trace(const std::string& csv_path);

void save_recovery_curve(const RecoveryCurve& curve,
                         const std::string& csv_path);
RecoveryCurve load_recovery_curve(const std::string& csv_path);

json fit_result_to_json(const FitResult& fit);
json recovery_fit_to_json(const RecoveryFit& fit);

// Write via a temporary file in the same directory + rename, creating
// parent directories as needed.
void write_text_atomic(const std::string& path, std::string_view content);
void write_json_atomic(const std::string& path, const json& j);
std::string read_text(const std::string& path);
json read_json(const std::string& path);

// FNV-1a (64-bit)
std::uint64_t fnv1a_hash(std::string_view data);
std::string hash_hex(std::uint64_t h);

}  // namespace vbsim
