#pragma once

// Training with early stopping, test evaluation, scatter/metrics artifacts
// and the ablation sweep.

#include <chrono>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <ostream>
#include <random>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "otfpf/dataset.hpp"
#include "otfpf/metrics.hpp"
#include "otfpf/model.hpp"

namespace otfpf {

/// Subjects of a manifest grouped by split.
struct Dataset {
  std::vector<SubjectSample> train, val, test;

  static Dataset from_manifest(const DatasetManifest& m) {
    Dataset d;
    for (std::size_t i = 0; i < m.records.size(); ++i) {
      auto s = load_subject(m, i);
      switch (m.records[i].split) {
        case Split::train: d.train.push_back(std::move(s)); break;
        case Split::val: d.val.push_back(std::move(s)); break;
        case Split::test: d.test.push_back(std::move(s)); break;
      }
    }
    if (d.train.empty()) throw DataError("dataset: empty training split");
    if (d.test.empty()) throw DataError("dataset: empty test split");
    return d;
  }
};

inline std::vector<const SubjectSample*> pointers(const std::vector<SubjectSample>& v) {
  std::vector<const SubjectSample*> out;
  out.reserve(v.size());
  for (const auto& s : v) out.push_back(&s);
  return out;
}

inline std::vector<double> ages_of(const std::vector<SubjectSample>& v) {
  std::vector<double> out;
  out.reserve(v.size());
  for (const auto& s : v) out.push_back(s.age);
  return out;
}

inline double mean_age(const std::vector<SubjectSample>& v) {
  double s = 0.0;
  for (const auto& x : v) s += x.age;
  return v.empty() ? 0.0 : s / double(v.size());
}

/// Constant predictor at the training-split mean, scored on the test split.
inline MetricsReport mean_predictor_baseline(const Dataset& d) {
  const double mu = mean_age(d.train);
  return compute_metrics(std::vector<double>(d.test.size(), mu), ages_of(d.test));
}

inline void write_scatter(const std::vector<double>& ages, const std::vector<double>& preds,
                          const fs::path& path) {
  if (ages.size() != preds.size()) throw ShapeError("scatter: length mismatch");
  std::ofstream out(path);
  if (!out) throw DataError("cannot write " + path.string());
  out << "# age prediction\n" << std::setprecision(9);
  for (std::size_t i = 0; i < ages.size(); ++i) out << ages[i] << ' ' << preds[i] << '\n';
}

struct EpochLog {
  std::size_t epoch = 0;
  double train_loss = 0.0;
  double val_mae = 0.0;
  double seconds = 0.0;
};

struct ExperimentResult {
  MetricsReport test;
  MetricsReport baseline;
  std::vector<EpochLog> epochs;
  std::size_t best_epoch = 0;
  std::size_t parameters = 0;
  double seconds = 0.0;
  /// Set when training stopped on a non-finite loss; best weights are kept.
  std::string aborted;
};

inline nlohmann::json to_json(const ExperimentResult& r) {
  nlohmann::json ep = nlohmann::json::array();
  for (const auto& e : r.epochs) {
    ep.push_back({{"epoch", e.epoch},
                  {"train_loss", e.train_loss},
                  {"val_mae", e.val_mae},
                  {"seconds", e.seconds}});
  }
  nlohmann::json j = {{"test", to_json(r.test)},
                      {"baseline", to_json(r.baseline)},
                      {"best_epoch", r.best_epoch},
                      {"parameters", r.parameters},
                      {"seconds", r.seconds},
                      {"epochs", ep}};
  if (!r.aborted.empty()) j["aborted"] = r.aborted;
  return j;
}

namespace detail {

inline std::vector<Tensor> snapshot(const Model& m) {
  std::vector<Tensor> out;
  for (const auto& p : m.params()) out.push_back(p.value);
  return out;
}

inline void restore(Model& m, const std::vector<Tensor>& snap) {
  std::size_t i = 0;
  for (auto& p : m.params()) p.value = snap.at(i++);
}

}  // namespace detail

/// Trains `model` on the train split with early stopping on validation MAE
/// and restores the best weights. Returns per-epoch logs.
inline std::vector<EpochLog> fit(Model& model, const Dataset& d, std::size_t& best_epoch,
                                 std::string& aborted, std::ostream* log = nullptr) {
  const auto& tc = model.config().train;
  model.set_head_bias(mean_age(d.train));
  {
    auto calib = pointers(d.train);
    calib.resize(std::min(calib.size(), std::max<std::size_t>(1, tc.calibration_samples)));
    model.calibrate_sigma(calib);
  }
  const auto& val = d.val.empty() ? d.train : d.val;
  const auto val_ptrs = pointers(val);
  const auto val_ages = ages_of(val);

  AdamW<float> opt(tc);
  std::mt19937_64 rng(model.config().seed ^ 0xa5a5a5a5ull);
  std::vector<std::size_t> order(d.train.size());
  std::iota(order.begin(), order.end(), 0);

  auto best = detail::snapshot(model);
  double best_mae = compute_metrics(predict_batch(model, val_ptrs), val_ages).mae;
  best_epoch = 0;
  std::vector<EpochLog> logs;
  std::size_t since_best = 0;
  for (std::size_t epoch = 1; epoch <= tc.max_epochs; ++epoch) {
    const auto t0 = std::chrono::steady_clock::now();
    std::shuffle(order.begin(), order.end(), rng);
    double loss_sum = 0.0;
    std::size_t batches = 0;
    try {
      for (std::size_t b = 0; b < order.size(); b += tc.batch_size) {
        std::vector<const SubjectSample*> batch;
        for (std::size_t i = b; i < std::min(order.size(), b + tc.batch_size); ++i) {
          batch.push_back(&d.train[order[i]]);
        }
        loss_sum += train_step(model, batch, opt);
        ++batches;
      }
    } catch (const NumericalError& e) {
      aborted = e.what();
      if (log) *log << "training aborted at epoch " << epoch << ": " << e.what() << "\n";
      break;
    }
    const double val_mae = compute_metrics(predict_batch(model, val_ptrs), val_ages).mae;
    EpochLog el{epoch, loss_sum / double(std::max<std::size_t>(1, batches)), val_mae,
                std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count()};
    logs.push_back(el);
    if (log) {
      *log << "epoch " << epoch << "  train_l1 " << std::fixed << std::setprecision(3)
           << el.train_loss << "  val_mae " << val_mae << "  (" << std::setprecision(1)
           << el.seconds << " s)\n"
           << std::defaultfloat;
    }
    if (val_mae < best_mae) {
      best_mae = val_mae;
      best_epoch = epoch;
      best = detail::snapshot(model);
      since_best = 0;
    } else if (++since_best >= tc.patience) {
      break;
    }
  }
  detail::restore(model, best);
  return logs;
}

/// Full run: fit, score the test split, write scatter.txt, metrics.json and
/// the best checkpoint (model.json / model.bin) into `out_dir`.
inline ExperimentResult run_experiment(const OtfpfConfig& cfg, const Dataset& d,
                                       const fs::path& out_dir, std::ostream* log = nullptr) {
  const auto t0 = std::chrono::steady_clock::now();
  std::error_code ec;
  fs::create_directories(out_dir, ec);
  if (ec || !fs::is_directory(out_dir)) {
    throw DataError("cannot create output directory " + out_dir.string());
  }
  Model model(cfg);
  ExperimentResult r;
  r.parameters = model.parameter_count();
  r.epochs = fit(model, d, r.best_epoch, r.aborted, log);
  save_checkpoint(out_dir / "model", model);

  const auto preds = predict_batch(model, pointers(d.test));
  const auto ages = ages_of(d.test);
  r.test = compute_metrics(preds, ages);
  r.baseline = mean_predictor_baseline(d);
  r.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  write_scatter(ages, preds, out_dir / "scatter.txt");
  std::ofstream(out_dir / "metrics.json") << to_json(r).dump(2) << "\n";
  if (!r.aborted.empty()) throw NumericalError("training diverged: " + r.aborted);
  return r;
}

// ---------------------------------------------------------------------------
// Ablation

struct AblationVariant {
  std::string name;
  OtfpfConfig config;
  /// Whether the variant removes a component (and so must shrink the model).
  bool removal = true;
};

/// The six reduced configurations compared against the full model.
inline std::vector<AblationVariant> ablation_variants(const OtfpfConfig& full) {
  std::vector<AblationVariant> v;
  auto c = full;
  c.use_otem = false;
  v.push_back({"w/o OTEM", c, true});
  c.use_fpfn = false;
  v.push_back({"w/o (OTEM and FPFN)", c, true});
  c.multi_pathway = false;
  v.push_back({"w/o (OTEM, FPFN and multi-pathway)", c, true});
  c = full;
  c.use_sex = false;
  v.push_back({"w/o sex label", c, true});
  c = full;
  c.blocks = {3, 3, 9, 3};
  v.push_back({"classical stages (3,3,9,3)", c, false});
  c = full;
  c.downsample_mode = DownsampleMode::patchify;
  v.push_back({"w/o 3D OL-ConvNeXt", c, true});
  return v;
}

struct AblationRow {
  std::string name;
  std::size_t parameters = 0;
  bool removal = true;
  MetricsReport test;
  double seconds = 0.0;
};

struct AblationResult {
  std::size_t full_parameters = 0;
  std::vector<AblationRow> rows;
};

/// Trains every variant for `epochs` epochs (default: one) and scores it on
/// the test split. Writes ablation.tsv and ablation.json when `out_dir` is set.
inline AblationResult ablate(const OtfpfConfig& full, const Dataset& d,
                             const std::optional<fs::path>& out_dir, std::size_t epochs = 1,
                             std::ostream* log = nullptr) {
  AblationResult res;
  res.full_parameters = Model(full).parameter_count();
  for (auto& v : ablation_variants(full)) {
    const auto t0 = std::chrono::steady_clock::now();
    v.config.train.max_epochs = epochs;
    Model m(v.config);
    AblationRow row{v.name, m.parameter_count(), v.removal, {}, 0.0};
    std::size_t best = 0;
    std::string aborted;
    fit(m, d, best, aborted, nullptr);
    if (!aborted.empty()) throw NumericalError(v.name + ": " + aborted);
    row.test = compute_metrics(predict_batch(m, pointers(d.test)), ages_of(d.test));
    row.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    if (log) {
      *log << std::left << std::setw(38) << v.name << " params " << row.parameters << "  MAE "
           << std::fixed << std::setprecision(3) << row.test.mae << std::defaultfloat << "\n";
    }
    res.rows.push_back(std::move(row));
  }
  if (out_dir) {
    fs::create_directories(*out_dir);
    std::ofstream tsv(*out_dir / "ablation.tsv");
    if (!tsv) throw DataError("cannot write " + (*out_dir / "ablation.tsv").string());
    tsv << "# full model parameters: " << res.full_parameters << "\n";
    tsv << "config\tparameters\tmae\tpcc\tsrcc\n";
    nlohmann::json rows = nlohmann::json::array();
    for (const auto& r : res.rows) {
      tsv << r.name << '\t' << r.parameters << '\t' << r.test.mae << '\t'
          << format_metric(r.test.pcc) << '\t' << format_metric(r.test.srcc) << '\n';
      rows.push_back({{"config", r.name},
                      {"parameters", r.parameters},
                      {"removal", r.removal},
                      {"metrics", to_json(r.test)},
                      {"seconds", r.seconds}});
    }
    std::ofstream(*out_dir / "ablation.json")
        << nlohmann::json{{"full_parameters", res.full_parameters}, {"rows", rows}}.dump(2)
        << "\n";
  }
  return res;
}

}  // namespace otfpf
