// Command-line front end: dataset generation, training, evaluation,
// ablations and the two standalone solvers.

#include <cstdio>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "otfpf/dataset.hpp"
#include "otfpf/experiment.hpp"
#include "otfpf/metrics.hpp"
#include "otfpf/model.hpp"
#include "otfpf/ot.hpp"
#include "otfpf/otem.hpp"
#include "otfpf/tensor_io.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace otfpf;

namespace {

enum Exit { kOk = 0, kFailure = 1, kConfig = 2, kData = 3, kNumerical = 4 };

json read_json_file(const fs::path& p) {
  std::ifstream in(p);
  if (!in) throw ConfigError("cannot read " + p.string());
  try {
    return json::parse(in);
  } catch (const json::exception& e) {
    throw ConfigError("malformed JSON in " + p.string() + ": " + e.what());
  }
}

OtfpfConfig read_config(const std::string& path) {
  OtfpfConfig c;
  if (!path.empty()) c = read_json_file(path).get<OtfpfConfig>();
  c.validate();
  return c;
}

void write_json(const fs::path& p, const json& j) {
  std::ofstream out(p);
  if (!out) throw DataError("cannot write " + p.string());
  out << j.dump(2) << "\n";
}

ot::DenseMatrix as_matrix(const Tensor& t, const char* what) {
  if (t.rank() != 2) throw ShapeError(std::string(what) + ": expected a 2-D tensor, got " +
                                      to_string(t.shape()));
  ot::DenseMatrix m(t.extent(0), t.extent(1));
  for (std::size_t i = 0; i < t.numel(); ++i) m.values[i] = t[i];
  return m;
}

ot::DiscreteMeasure as_measure(const Tensor& t, const char* what) {
  ot::DiscreteMeasure m;
  for (std::size_t i = 0; i < t.numel(); ++i) m.weights.push_back(t[i]);
  // Stored as f32, so renormalise the rounding away before validating.
  double s = 0.0;
  for (double w : m.weights) s += w;
  if (std::abs(s - 1.0) > 1e-5) {
    throw ConfigError(std::string(what) + ": weights sum to " + std::to_string(s));
  }
  for (auto& w : m.weights) w /= s;
  return m;
}

// Matrices in the OTEM config are either inline nested arrays or tensor
// file paths relative to the config file.
Tensor read_matrix(const json& j, const fs::path& dir, const char* key) {
  if (!j.contains(key)) throw ConfigError(std::string("otem config: missing '") + key + "'");
  const auto& v = j.at(key);
  if (v.is_string()) return io::load_tensor(dir / v.get<std::string>());
  std::vector<std::vector<double>> rows;
  try {
    rows = v.get<std::vector<std::vector<double>>>();
  } catch (const json::exception& e) {
    throw ConfigError(std::string("otem config: bad '") + key + "': " + e.what());
  }
  if (rows.empty() || rows[0].empty()) throw ConfigError(std::string("otem config: empty '") + key + "'");
  Tensor t({rows.size(), rows[0].size()});
  for (std::size_t i = 0; i < rows.size(); ++i) {
    if (rows[i].size() != rows[0].size()) {
      throw ConfigError(std::string("otem config: ragged '") + key + "'");
    }
    for (std::size_t k = 0; k < rows[i].size(); ++k) {
      t[i * rows[0].size() + k] = static_cast<float>(rows[i][k]);
    }
  }
  return t;
}

OtemConfig read_otem_config(const fs::path& path) {
  const json j = read_json_file(path);
  detail::reject_unknown(j, {"sigma", "anchors", "references", "sinkhorn"}, "otem config");
  OtemConfig c;
  detail::read_field(j, "sigma", c.kernel.sigma);
  const auto dir = path.parent_path();
  c.anchors = read_matrix(j, dir, "anchors");
  c.references = read_matrix(j, dir, "references");
  if (j.contains("sinkhorn")) {
    const auto& s = j.at("sinkhorn");
    detail::reject_unknown(s, {"epsilon", "max_iterations", "tolerance", "log_domain"},
                           "otem config sinkhorn");
    detail::read_field(s, "epsilon", c.sinkhorn.epsilon);
    detail::read_field(s, "max_iterations", c.sinkhorn.max_iterations);
    detail::read_field(s, "tolerance", c.sinkhorn.tolerance);
    detail::read_field(s, "log_domain", c.sinkhorn.log_domain);
  }
  c.validate();
  return c;
}

int run(int argc, char** argv) {
  CLI::App app{"OT feature-pyramid brain-age network"};
  app.require_subcommand(1);

  auto* gen = app.add_subcommand("generate", "write a synthetic dataset and manifest");
  std::size_t n = 200, size = 24;
  std::uint64_t seed = 7;
  std::string out;
  gen->add_option("--n", n, "number of subjects")->capture_default_str();
  gen->add_option("--size", size, "voxels per axis")->capture_default_str();
  gen->add_option("--seed", seed)->capture_default_str();
  gen->add_option("--out", out, "output directory")->required();

  auto* train = app.add_subcommand("train", "train on a manifest and report test metrics");
  std::string config, manifest;
  train->add_option("--config", config, "model config JSON (defaults when omitted)");
  train->add_option("--manifest", manifest)->required();
  train->add_option("--out", out, "output directory")->required();

  auto* eval = app.add_subcommand("eval", "score a checkpoint on one split");
  std::string ckpt, split = "test", scatter;
  eval->add_option("--ckpt", ckpt, "checkpoint base path (model.json / model.bin)")->required();
  eval->add_option("--manifest", manifest)->required();
  eval->add_option("--split", split)->capture_default_str();
  eval->add_option("--scatter", scatter, "optional two-column age/prediction output");

  auto* abl = app.add_subcommand("ablate", "train the six ablation variants");
  std::size_t epochs = 1;
  abl->add_option("--config", config, "full model config JSON");
  abl->add_option("--manifest", manifest)->required();
  abl->add_option("--out", out)->required();
  abl->add_option("--epochs", epochs)->capture_default_str();

  auto* sk = app.add_subcommand("sinkhorn-solve", "entropic OT between two tensors' measures");
  std::string cost_path, a_path, b_path;
  ot::SinkhornConfig scfg;
  sk->add_option("--cost", cost_path, "n x m cost tensor")->required();
  sk->add_option("--a", a_path, "source weights")->required();
  sk->add_option("--b", b_path, "target weights")->required();
  sk->add_option("--epsilon", scfg.epsilon)->capture_default_str();
  sk->add_option("--max-iter", scfg.max_iterations)->capture_default_str();
  sk->add_option("--tol", scfg.tolerance)->capture_default_str();
  sk->add_option("--out", out, "plan tensor base path")->default_val("plan");

  auto* oe = app.add_subcommand("otem-embed", "embed an m x C feature set");
  std::string input;
  oe->add_option("--input", input, "m x C feature tensor")->required();
  oe->add_option("--config", config, "OTEM config JSON")->required();
  oe->add_option("--out", out, "n x p output tensor base path")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return kConfig;
  }

  if (*gen) {
    const auto m = generate_synthetic_dataset(n, size, seed, out);
    std::cout << "wrote " << m.records.size() << " subjects to " << out << "\n";
  } else if (*train) {
    const auto cfg = read_config(config);
    const auto d = Dataset::from_manifest(read_manifest(manifest));
    const auto r = run_experiment(cfg, d, out, &std::cout);
    std::cout << "test MAE " << format_metric(r.test.mae) << "  PCC " << format_metric(r.test.pcc) << "  SRCC "
              << format_metric(r.test.srcc) << "  (baseline MAE " << format_metric(r.baseline.mae) << ")\n";
  } else if (*eval) {
    const auto which = parse_split(split);
    const auto model = load_checkpoint(ckpt);
    const auto m = read_manifest(manifest);
    std::vector<SubjectSample> samples;
    for (std::size_t i = 0; i < m.records.size(); ++i) {
      if (m.records[i].split == which) samples.push_back(load_subject(m, i));
    }
    if (samples.empty()) throw DataError("split '" + split + "' is empty");
    const auto preds = predict_batch(model, pointers(samples));
    const auto ages = ages_of(samples);
    if (!scatter.empty()) write_scatter(ages, preds, scatter);
    std::cout << to_json(compute_metrics(preds, ages)).dump(2) << "\n";
  } else if (*abl) {
    const auto cfg = read_config(config);
    const auto d = Dataset::from_manifest(read_manifest(manifest));
    const auto r = ablate(cfg, d, fs::path(out), epochs, &std::cout);
    std::cout << "full model parameters " << r.full_parameters << "\n";
  } else if (*sk) {
    const auto c = as_matrix(io::load_tensor(cost_path), "cost");
    const auto a = as_measure(io::load_tensor(a_path), "a");
    const auto b = as_measure(io::load_tensor(b_path), "b");
    const auto p = ot::sinkhorn(a, b, c, scfg);
    Tensor plan({p.plan.rows, p.plan.cols});
    for (std::size_t i = 0; i < plan.numel(); ++i) plan[i] = static_cast<float>(p.plan.values[i]);
    io::save_tensor(out, plan);
    const json rep{{"cost", p.achieved_cost},
                   {"entropy", p.entropy},
                   {"iterations", p.iterations_used},
                   {"marginal_violation", p.marginal_violation},
                   {"converged", p.converged()},
                   {"log_domain", p.log_domain_used}};
    fs::path rp = io::tensor_paths(out).header;
    rp.replace_filename(rp.stem().string() + ".report.json");
    write_json(rp, rep);
    std::cout << rep.dump(2) << "\n";
    if (!p.converged()) return kNumerical;
  } else if (*oe) {
    const auto cfg = read_otem_config(config);
    OtemDiagnostics diag;
    const auto e = otem_embed(io::load_tensor(input), cfg, &diag);
    io::save_tensor(out, e);
    std::cout << json{{"shape", e.shape()},
                      {"sinkhorn_iterations", diag.sinkhorn_iterations},
                      {"marginal_violation", diag.marginal_violation},
                      {"converged", diag.sinkhorn_converged},
                      {"clamped_eigenvalues", diag.clamped_eigenvalues}}
                     .dump(2)
              << "\n";
  }
  return kOk;
}

}  // namespace

int main(int argc, char** argv) {
  try {
    return run(argc, argv);
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return kConfig;
  } catch (const ShapeError& e) {
    std::cerr << "data error: " << e.what() << "\n";
    return kData;
  } catch (const DataError& e) {
    std::cerr << "data error: " << e.what() << "\n";
    return kData;
  } catch (const NumericalError& e) {
    std::cerr << "numerical error: " << e.what() << "\n";
    return kNumerical;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kFailure;
  }
}
