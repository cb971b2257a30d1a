#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cstdio>
#include <filesystem>
#include <random>
#include <string>

#include "support/oracles.hpp"
#include "vbsim/errors.hpp"
#include "vbsim/pipeline.hpp"
#include "vbsim/serialize.hpp"

using namespace vbsim;
namespace fs = std::filesystem;

namespace {

struct TempDir {
  fs::path path;
  TempDir() {
    path = fs::temp_directory_path() /
           ("vbsim_ser_" + std::to_string(std::random_device{}()));
    fs::create_directories(path);
  }
  ~TempDir() { std::error_code ec; fs::remove_all(path, ec); }
  std::string file(const char* name) const { return (path / name).string(); }
};

}  // namespace

TEST_CASE("level graphs round-trip through JSON") {
  std::mt19937_64 rng(21);
  for (int rep = 0; rep < 10; ++rep) {
    const LevelGraph g = oracles::random_graph(rng, {});
    const LevelGraph back = graph_from_json(graph_to_json(g));
    REQUIRE(back.size() == g.size());
    for (int i = 0; i < g.size(); ++i) {
      CHECK(back.states()[static_cast<size_t>(i)].label ==
            g.states()[static_cast<size_t>(i)].label);
      CHECK(back.states()[static_cast<size_t>(i)].manifold ==
            g.states()[static_cast<size_t>(i)].manifold);
      CHECK(back.states()[static_cast<size_t>(i)].spin ==
            g.states()[static_cast<size_t>(i)].spin);
    }
    REQUIRE(back.edges().size() == g.edges().size());
    for (std::size_t e = 0; e < g.edges().size(); ++e) {
      CHECK(back.edges()[e].from == g.edges()[e].from);
      CHECK(back.edges()[e].to == g.edges()[e].to);
      CHECK(back.edges()[e].coefficient == g.edges()[e].coefficient);
      CHECK(back.edges()[e].power_exponent == g.edges()[e].power_exponent);
    }
    CHECK(back.emission_weights() == g.emission_weights());
    for (int k = 0; k < 3; ++k)
      CHECK((back.generator_pieces()[static_cast<size_t>(k)] -
             g.generator_pieces()[static_cast<size_t>(k)])
                .cwiseAbs()
                .maxCoeff() == 0.0);
  }
}

TEST_CASE("preset graphs survive serialization") {
  const auto g = build_preset_9level(reference_nine_level_rates());
  const auto back = graph_from_json(graph_to_json(g));
  const Eigen::MatrixXd a = build_rate_matrix(g, 13.6);
  const Eigen::MatrixXd b = build_rate_matrix(back, 13.6);
  CHECK((a - b).cwiseAbs().maxCoeff() == 0.0);
}

TEST_CASE("malformed graph JSON is rejected") {
  json j = graph_to_json(build_preset_7level(reference_seven_level_rates()));
  j["edges"][0]["from"] = "nowhere";
  CHECK_THROWS_AS(graph_from_json(j), ValidationError);
}

TEST_CASE("sequences round-trip through JSON") {
  const auto s = build_pump_probe(1000, 100, 100000, 13.6, true);
  const auto back = sequence_from_json(sequence_to_json(s));
  CHECK(back.id == s.id);
  CHECK(back.repeat_count == s.repeat_count);
  CHECK(back.nominal_period_ns == s.nominal_period_ns);
  REQUIRE(back.elements.size() == s.elements.size());
  for (std::size_t i = 0; i < s.elements.size(); ++i) {
    CHECK(back.elements[i].kind == s.elements[i].kind);
    CHECK(back.elements[i].duration_ns == s.elements[i].duration_ns);
    CHECK(back.elements[i].power_mw == s.elements[i].power_mw);
  }

  PulseSequence rep;
  rep.elements = {pulse(12.5, 3.71), dark(5.0), wait(30.0)};
  rep.repeat_count = 4;
  rep.id = "burst";
  const auto rb = sequence_from_json(sequence_to_json(rep));
  CHECK(rb.repeat_count == 4);
  CHECK(rb.total_duration_ns() == doctest::Approx(rep.total_duration_ns()));
}

TEST_CASE("traces round-trip exactly through CSV + sidecar") {
  TempDir tmp;
  const auto g = build_preset_7level(reference_seven_level_rates());
  PulseSequence s;
  s.elements = {pulse(150, 13.6), wait(40)};
  s.id = "rt";
  SimulateOptions so;
  so.bin_width_ns = 0.5;
  PLTrace tr = simulate_sequence(g, s, so);
  NoiseOptions no;
  no.efficiency = 0.21;
  no.averaging_s = 2.0;
  no.seed = 77;
  tr.meta.period_ns = 1000.0;
  const PLTrace counts = add_shot_noise(tr, no);

  const std::string path = tmp.file("trace.csv");
  save_trace(counts, path);
  const PLTrace back = load_trace(path);

  CHECK(back.t_start_ns == counts.t_start_ns);
  CHECK(back.bin_width_ns == counts.bin_width_ns);
  CHECK(back.values == counts.values);  // bitwise: %.17g round-trip
  CHECK(back.sigma == counts.sigma);
  CHECK(back.meta.mode == TraceMode::Counts);
  CHECK(back.meta.power_mw == counts.meta.power_mw);
  CHECK(back.meta.period_ns == counts.meta.period_ns);
  CHECK(back.meta.efficiency == counts.meta.efficiency);
  CHECK(back.meta.repetitions == counts.meta.repetitions);
  CHECK(back.meta.rate_scale == counts.meta.rate_scale);
  CHECK(back.meta.seed == counts.meta.seed);
  CHECK(back.meta.pulse_onsets_ns == counts.meta.pulse_onsets_ns);
  CHECK(back.meta.pulse_durations_ns == counts.meta.pulse_durations_ns);
}

TEST_CASE("bare CSV without a sidecar still loads") {
  TempDir tmp;
  const std::string path = tmp.file("bare.csv");
  write_text_atomic(path,
                    "time_ns,value,sigma\n"
                    "1.0,10,3.1622776601683795\n"
                    "3.0,12,3.4641016151377544\n"
                    "5.0,7,2.6457513110645907\n");
  const PLTrace tr = load_trace(path);
  CHECK(tr.bin_width_ns == doctest::Approx(2.0));  // inferred from spacing
  CHECK(tr.t_start_ns == doctest::Approx(0.0));
  REQUIRE(tr.size() == 3);
  CHECK(tr.values[1] == 12.0);
  CHECK(tr.sigma[2] == 2.6457513110645907);
}

TEST_CASE("trace loading rejects a missing file") {
  CHECK_THROWS_AS(load_trace("/nonexistent/dir/x.csv"), ValidationError);
}

TEST_CASE("recovery curves round-trip") {
  TempDir tmp;
  RecoveryCurve c;
  c.dark_times_ns = uniform_dark_times(54.8, 15);
  for (double t : c.dark_times_ns)
    c.ratios.push_back(1.0 - 0.4 * std::exp(-t / 17.6));
  c.sigma.assign(15, 0.01);
  c.power_mw = 13.6;
  c.id = "flake00";

  const std::string path = tmp.file("curve.csv");
  save_recovery_curve(c, path);
  const RecoveryCurve back = load_recovery_curve(path);
  CHECK(back.dark_times_ns == c.dark_times_ns);
  CHECK(back.ratios == c.ratios);
  CHECK(back.sigma == c.sigma);
  CHECK(back.power_mw == 13.6);
  CHECK(back.id == "flake00");
}

TEST_CASE("atomic writes land complete and leave no temporaries") {
  TempDir tmp;
  const std::string path = (tmp.path / "deep" / "nested" / "out.json").string();
  write_json_atomic(path, json{{"a", 1}, {"b", "two"}});
  const json j = read_json(path);
  CHECK(j["a"] == 1);
  CHECK(j["b"] == "two");
  int entries = 0;
  for ([[maybe_unused]] const auto& e :
       fs::directory_iterator(tmp.path / "deep" / "nested"))
    ++entries;
  CHECK(entries == 1);  // the file itself, no stray tmp
}

TEST_CASE("fnv1a matches the reference vectors") {
  CHECK(fnv1a_hash("") == 0xcbf29ce484222325ULL);
  CHECK(fnv1a_hash("a") == 0xaf63dc4c8601ec8cULL);
  CHECK(fnv1a_hash("foobar") == 0x85944171f73967e8ULL);
  CHECK(hash_hex(0xcbf29ce484222325ULL) == "cbf29ce484222325");
}

TEST_CASE("fit reports carry the physics and the uncertainties") {
  const auto g = build_preset_7level(reference_seven_level_rates());
  PulseSequence s;
  s.elements = {pulse(150, 13.6), wait(40)};
  s.id = "r";
  const auto cs = compile(s, 2.5);
  SynthesisOptions so;
  so.bin_width_ns = 2.0;
  const PLTrace tr = synthesize_trace(g, cs, so);

  SevenLevelTemplate tmpl;
  const auto fit =
      fit_model(tmpl, tmpl.parameters(), {{slice_trace(tr, 0, 150), cs, "r"}},
                {});
  const json j = fit_result_to_json(fit);
  REQUIRE(j.contains("parameters"));
  bool saw_kappa0 = false;
  for (const auto& p : j["parameters"]) {
    REQUIRE(p.contains("name"));
    REQUIRE(p.contains("value"));
    REQUIRE(p.contains("sigma"));
    REQUIRE(p.contains("formatted"));
    if (p["name"] == "kappa0") saw_kappa0 = true;
  }
  CHECK(saw_kappa0);
  CHECK(j.contains("chi2"));
  CHECK(j.contains("dof"));
  CHECK(j.contains("reduced_chi2"));
  CHECK(j.contains("converged"));

  RecoveryFit rf;
  rf.tau_ns = 17.66;
  rf.tau_sigma = 0.3;
  rf.r0 = 0.6;
  rf.r_inf = 1.0;
  rf.chi2 = 10.0;
  rf.dof = 12;
  const json rj = recovery_fit_to_json(rf);
  CHECK(rj["tau_s_ns"] == 17.66);
  CHECK(rj["tau_s"] == "17.7(3)");
}
