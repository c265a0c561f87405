// hjsampler: run HJ-sampler experiments from JSON configs or builtin setups.
//
// Exit codes: 0 success, 1 compare violation, 2 config/schema error, 3 numerical failure.

#include <CLI11.hpp>

#include <fstream>
#include <iostream>

#include "hjs/experiments.hpp"

namespace {

int report(const hjs::RunReport& r) {
  std::cout << "output: " << r.output_dir << '\n';
  for (const auto& [k, v] : r.metrics.at("metrics").items())
    std::cout << k << ' ' << v.at("name").get<std::string>() << ' ' << v.at("value").get<double>() << '\n';
  return 0;
}

nlohmann::json read_json(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw hjs::ConfigError("cannot open '" + path + "'");
  try {
    return nlohmann::json::parse(in);
  } catch (const nlohmann::json::parse_error& e) {
    throw hjs::ConfigError("'" + path + "' is not valid JSON: " + e.what());
  }
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"HJ-sampler experiments"};
  app.require_subcommand(1);
  bool verbose = false;
  app.add_flag("-v,--verbose", verbose, "Progress on stderr");

  auto* run = app.add_subcommand("run", "Run an experiment config");
  std::string config_path;
  bool paper_scale = false;
  run->add_option("config", config_path, "JSON config file")->required()->check(CLI::ExistingFile);
  run->add_flag("--paper-scale", paper_scale, "Restore full-scale sample counts");

  auto* builtin = app.add_subcommand("builtin", "Run or print a builtin experiment");
  std::string name;
  bool emit = false;
  double epsilon = 0;
  std::string backend, variant = "a";
  builtin->add_option("name", name, "Builtin name")->required();
  builtin->add_flag("--emit-config", emit, "Print the config instead of running it");
  builtin->add_option("--epsilon", epsilon, "Override epsilon");
  builtin->add_option("--backend", backend, "Override backend (analytic, riccati, sgm)");
  builtin->add_option("--variant", variant, "Misspecification case for ode_misspec_nonlinear (a or b)");
  builtin->add_flag("--paper-scale", paper_scale, "Restore full-scale sample counts");

  auto* compare = app.add_subcommand("compare", "Compare a candidate metrics.json against a baseline");
  std::string base_path, cand_path, tol_spec;
  compare->add_option("baseline", base_path)->required();
  compare->add_option("candidate", cand_path)->required();
  compare->add_option("--tol", tol_spec, "Slack per metric, e.g. w1=0.01,obs0_t0=0.002,*=0");

  CLI11_PARSE(app, argc, argv);

  try {
    const hjs::RunOptions opts{paper_scale, verbose};
    if (*run) return report(hjs::run(hjs::load_config(config_path), opts));
    if (*builtin) {
      hjs::BuiltinOptions bo;
      if (epsilon > 0) bo.epsilon = epsilon;
      if (!backend.empty()) bo.backend = hjs::backend_from_string(backend);
      if (variant.size() != 1) throw hjs::ConfigError("--variant must be a single letter");
      bo.variant = variant[0];
      auto cfg = hjs::builtin_experiment(name, bo);
      if (emit) {
        std::cout << hjs::to_json(paper_scale ? hjs::with_paper_scale(cfg) : cfg).dump(2) << '\n';
        return 0;
      }
      return report(hjs::run(cfg, opts));
    }
    const auto res =
        hjs::compare_reports(read_json(base_path), read_json(cand_path), hjs::parse_tolerances(tol_spec));
    for (const auto& l : res.lines) std::cout << l << '\n';
    std::cout << (res.pass ? "PASS" : "FAIL") << '\n';
    return res.pass ? 0 : 1;
  } catch (const hjs::ConfigError& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 2;
  } catch (const hjs::PreconditionError& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 2;
  } catch (const hjs::NumericalError& e) {
    std::cerr << "numerical failure: " << e.what() << '\n';
    return 3;
  }
}
