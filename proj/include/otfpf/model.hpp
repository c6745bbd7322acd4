#pragma once

// The four-pathway brain-age regressor: T1 backbone with stage-wise gray and
// white matter fusion, pyramid fusion plus transport embedding, sex
// embedding and an MLP head. Also the L1 loss, AdamW and training step.

#include <algorithm>
#include <array>
#include <atomic>
#include <cmath>
#include <cstdlib>
#include <exception>
#include <filesystem>
#include <fstream>
#include <optional>
#include <thread>
#include <vector>

#include <nlohmann/json.hpp>

#include "otfpf/convnext3d.hpp"
#include "otfpf/pyramid.hpp"
#include "otfpf/tensor_io.hpp"

namespace otfpf {

/// Cohort mean age used to initialise the head bias when no training data
/// is available.
inline constexpr double kDefaultHeadBias = 44.19;

struct SubjectSample {
  Tensor t1;
  Tensor gm;
  Tensor wm;
  int sex = 0;
  double age = 0.0;

  void validate() const {
    if (t1.rank() != 4 || t1.channels() != 1) {
      throw ShapeError("sample: T1 must be a single-channel volume [D,W,H,1], got " +
                       to_string(t1.shape()));
    }
    if (gm.shape() != t1.shape() || wm.shape() != t1.shape()) {
      throw ShapeError("sample: T1, GM and WM volumes must share one shape");
    }
    if (sex != 0 && sex != 1) throw DataError("sample: sex label must be 0 or 1");
    if (!(age > 0.0) || !std::isfinite(age)) throw DataError("sample: age must be > 0");
  }
};

struct TrainConfig {
  double lr = 5e-4;
  double weight_decay = 5e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double adam_eps = 1e-8;
  std::size_t batch_size = 16;
  std::size_t max_epochs = 30;
  std::size_t patience = 10;
  /// Training samples used to calibrate the kernel bandwidths.
  std::size_t calibration_samples = 8;

  void validate() const {
    if (!(lr > 0.0)) throw ConfigError("train: lr must be > 0");
    if (weight_decay < 0.0) throw ConfigError("train: weight_decay must be >= 0");
    if (!(beta1 >= 0.0 && beta1 < 1.0) || !(beta2 >= 0.0 && beta2 < 1.0)) {
      throw ConfigError("train: betas must lie in [0, 1)");
    }
    if (!(adam_eps > 0.0)) throw ConfigError("train: adam_eps must be > 0");
    if (batch_size == 0) throw ConfigError("train: batch_size must be >= 1");
    if (max_epochs == 0) throw ConfigError("train: max_epochs must be >= 1");
  }
};

struct OtfpfConfig {
  bool use_otem = true;
  bool use_fpfn = true;
  bool multi_pathway = true;
  bool use_sex = true;
  DownsampleMode downsample_mode = DownsampleMode::overlapped;
  std::size_t ds_kernel = 3;
  std::array<std::size_t, 4> blocks{1, 1, 3, 1};
  std::size_t width_divisor = 1;
  std::size_t otem_references = kDefaultReferences;
  double otem_epsilon = 0.1;
  std::size_t otem_max_iterations = 100;
  double otem_tolerance = 1e-6;
  /// Kernel bandwidth; 0 means calibrate from training features.
  double otem_sigma = 0.0;
  std::vector<std::size_t> mlp_hidden{256, 64};
  std::size_t sex_embedding = 8;
  double head_bias = kDefaultHeadBias;
  std::uint64_t seed = 0;
  TrainConfig train;

  StageConfig stages() const {
    StageConfig s;
    s.blocks = blocks;
    s.mode = downsample_mode;
    s.ds_kernel = ds_kernel;
    s.width_divisor = width_divisor;
    return s;
  }
  std::array<std::size_t, 4> stage_channels() const {
    const auto s = stages();
    return {s.channels(0), s.channels(1), s.channels(2), s.channels(3)};
  }
  std::size_t unified_channels() const { return kUnifiedChannels / width_divisor; }

  std::size_t backbone_length() const {
    if (use_otem) return 4 * otem_references * unified_channels();
    if (use_fpfn) return 4 * unified_channels();
    return stage_channels()[3];
  }
  std::size_t descriptor_length() const {
    std::size_t n = backbone_length();
    if (multi_pathway) n += 2 * stage_channels()[3];
    if (use_sex) n += sex_embedding;
    return n;
  }

  void validate() const {
    stages().validate();
    train.validate();
    if (use_otem && !use_fpfn) {
      throw ConfigError("config: use_otem requires use_fpfn (the embedding consumes fused levels)");
    }
    if (otem_references == 0) throw ConfigError("config: otem_references must be >= 1");
    ot::SinkhornConfig{otem_epsilon, otem_max_iterations, otem_tolerance}.validate();
    if (otem_sigma < 0.0) throw ConfigError("config: otem_sigma must be >= 0 (0 = calibrate)");
    for (auto w : mlp_hidden) {
      if (w == 0) throw ConfigError("config: MLP widths must be >= 1");
    }
    if (use_sex && sex_embedding == 0) throw ConfigError("config: sex_embedding must be >= 1");
    if (!std::isfinite(head_bias)) throw ConfigError("config: head_bias must be finite");
  }
};

// ---------------------------------------------------------------------------
// JSON

inline void to_json(nlohmann::json& j, const TrainConfig& t) {
  j = {{"lr", t.lr},
       {"weight_decay", t.weight_decay},
       {"beta1", t.beta1},
       {"beta2", t.beta2},
       {"adam_eps", t.adam_eps},
       {"batch_size", t.batch_size},
       {"max_epochs", t.max_epochs},
       {"patience", t.patience},
       {"calibration_samples", t.calibration_samples}};
}

inline void to_json(nlohmann::json& j, const OtfpfConfig& c) {
  j = {{"use_otem", c.use_otem},
       {"use_fpfn", c.use_fpfn},
       {"multi_pathway", c.multi_pathway},
       {"use_sex", c.use_sex},
       {"downsample_mode", to_string(c.downsample_mode)},
       {"ds_kernel", c.ds_kernel},
       {"blocks", c.blocks},
       {"width_divisor", c.width_divisor},
       {"otem_references", c.otem_references},
       {"otem_epsilon", c.otem_epsilon},
       {"otem_max_iterations", c.otem_max_iterations},
       {"otem_tolerance", c.otem_tolerance},
       {"otem_sigma", c.otem_sigma},
       {"mlp_hidden", c.mlp_hidden},
       {"sex_embedding", c.sex_embedding},
       {"head_bias", c.head_bias},
       {"seed", c.seed},
       {"train", c.train}};
}

namespace detail {

template <typename V>
void read_field(const nlohmann::json& j, const char* key, V& out) {
  if (!j.contains(key)) return;
  try {
    out = j.at(key).get<V>();
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("config: bad value for '") + key + "': " + e.what());
  }
}

inline void reject_unknown(const nlohmann::json& j, std::initializer_list<const char*> keys,
                           const char* what) {
  if (!j.is_object()) throw ConfigError(std::string(what) + ": expected a JSON object");
  for (auto it = j.begin(); it != j.end(); ++it) {
    if (std::none_of(keys.begin(), keys.end(), [&](const char* k) { return it.key() == k; })) {
      throw ConfigError(std::string(what) + ": unknown key '" + it.key() + "'");
    }
  }
}

}  // namespace detail

inline void from_json(const nlohmann::json& j, TrainConfig& t) {
  detail::reject_unknown(j,
                         {"lr", "weight_decay", "beta1", "beta2", "adam_eps", "batch_size",
                          "max_epochs", "patience", "calibration_samples"},
                         "train config");
  detail::read_field(j, "lr", t.lr);
  detail::read_field(j, "weight_decay", t.weight_decay);
  detail::read_field(j, "beta1", t.beta1);
  detail::read_field(j, "beta2", t.beta2);
  detail::read_field(j, "adam_eps", t.adam_eps);
  detail::read_field(j, "batch_size", t.batch_size);
  detail::read_field(j, "max_epochs", t.max_epochs);
  detail::read_field(j, "patience", t.patience);
  detail::read_field(j, "calibration_samples", t.calibration_samples);
}

inline void from_json(const nlohmann::json& j, OtfpfConfig& c) {
  detail::reject_unknown(
      j,
      {"use_otem", "use_fpfn", "multi_pathway", "use_sex", "downsample_mode", "ds_kernel",
       "blocks", "width_divisor", "otem_references", "otem_epsilon", "otem_max_iterations",
       "otem_tolerance", "otem_sigma", "mlp_hidden", "sex_embedding", "head_bias", "seed",
       "train"},
      "config");
  detail::read_field(j, "use_otem", c.use_otem);
  detail::read_field(j, "use_fpfn", c.use_fpfn);
  detail::read_field(j, "multi_pathway", c.multi_pathway);
  detail::read_field(j, "use_sex", c.use_sex);
  if (j.contains("downsample_mode")) {
    std::string m;
    detail::read_field(j, "downsample_mode", m);
    c.downsample_mode = parse_downsample_mode(m);
  }
  detail::read_field(j, "ds_kernel", c.ds_kernel);
  detail::read_field(j, "blocks", c.blocks);
  detail::read_field(j, "width_divisor", c.width_divisor);
  detail::read_field(j, "otem_references", c.otem_references);
  detail::read_field(j, "otem_epsilon", c.otem_epsilon);
  detail::read_field(j, "otem_max_iterations", c.otem_max_iterations);
  detail::read_field(j, "otem_tolerance", c.otem_tolerance);
  detail::read_field(j, "otem_sigma", c.otem_sigma);
  detail::read_field(j, "mlp_hidden", c.mlp_hidden);
  detail::read_field(j, "sex_embedding", c.sex_embedding);
  detail::read_field(j, "head_bias", c.head_bias);
  detail::read_field(j, "seed", c.seed);
  if (j.contains("train")) c.train = j.at("train").get<TrainConfig>();
}

// ---------------------------------------------------------------------------
// Model

template <typename T>
struct ForwardResult {
  Var<T> prediction;            // [1,1]
  Pyramid<T> pyramid;           // backbone stage outputs after fusion additions
  std::optional<Pyramid<T>> fused;
  Var<T> backbone;              // [1, backbone_length]
  Var<T> descriptor;            // [1, descriptor_length]
  std::array<OtemDiagnostics, 4> otem{};
};

template <typename T>
class BasicModel {
 public:
  explicit BasicModel(OtfpfConfig cfg) : cfg_(std::move(cfg)) {
    cfg_.validate();
    settings_.references = cfg_.otem_references;
    settings_.sinkhorn = {cfg_.otem_epsilon, cfg_.otem_max_iterations, cfg_.otem_tolerance};
    const double sigma = cfg_.otem_sigma > 0.0 ? cfg_.otem_sigma : 1.0;
    settings_.sigma = {sigma, sigma, sigma, sigma};
    build();
  }

  const OtfpfConfig& config() const { return cfg_; }
  ParameterStore<T>& params() { return params_; }
  const ParameterStore<T>& params() const { return params_; }
  const OtfpfSettings& otem_settings() const { return settings_; }
  void set_sigma(const std::array<double, 4>& s) {
    for (double v : s) KernelSpec{v}.validate();
    settings_.sigma = s;
  }

  /// Number of learnable scalars.
  std::size_t parameter_count() const {
    std::size_t n = 0;
    for (const auto& p : params_) n += p.requires_grad ? p.value.numel() : 0;
    return n;
  }

  void set_head_bias(double b) { params_.at(head_bias_name()).value[0] = static_cast<T>(b); }
  std::string head_bias_name() const { return "head.out.bias"; }

  ForwardResult<T> forward(Graph<T>& g, const SubjectSample& sample) const {
    return forward_impl(g, sample, cfg_.use_otem);
  }

  double predict(const SubjectSample& sample) const {
    Graph<T> g;
    return double(forward(g, sample).prediction.value()[0]);
  }

  /// Fused pyramid levels (requires use_fpfn) as m x C sets.
  std::array<BasicTensor<T>, 4> fused_sets(const SubjectSample& sample) const {
    if (!cfg_.use_fpfn) throw ConfigError("fused_sets: model has no pyramid fusion");
    Graph<T> g;
    auto r = forward_impl(g, sample, /*embed=*/false, /*head=*/false);
    std::array<BasicTensor<T>, 4> out;
    for (std::size_t i = 0; i < 4; ++i) out[i] = level_as_set((*r.fused)[i]).value();
    return out;
  }

  /// Sets each level's bandwidth to the median distance between the fused
  /// features of `samples` and that level's anchors. Leaves an explicitly
  /// configured bandwidth untouched.
  void calibrate_sigma(const std::vector<const SubjectSample*>& samples) {
    if (!cfg_.use_otem || cfg_.otem_sigma > 0.0 || samples.empty()) return;
    const std::size_t width = cfg_.unified_channels();
    std::array<std::vector<T>, 4> pooled;
    for (const auto* smp : samples) {
      auto sets = fused_sets(*smp);
      for (std::size_t i = 0; i < 4; ++i) {
        pooled[i].insert(pooled[i].end(), sets[i].data().begin(), sets[i].data().end());
      }
    }
    std::array<double, 4> sigma{};
    for (std::size_t i = 0; i < 4; ++i) {
      const std::size_t rows = pooled[i].size() / width;
      BasicTensor<T> feats({rows, width}, std::move(pooled[i]));
      const auto& anchors = params_.at("otfpf.level" + std::to_string(i + 1) + ".anchors").value;
      sigma[i] = median_cross_distance(feats, anchors);
      if (!(sigma[i] > 0.0) || !std::isfinite(sigma[i])) sigma[i] = 1.0;
    }
    set_sigma(sigma);
  }

 private:
  ForwardResult<T> forward_impl(Graph<T>& g, const SubjectSample& sample, bool embed,
                                bool with_head = true) const {
    sample.validate();
    const auto stages = cfg_.stages();
    check_pathway_input<T>(sample.t1.shape(), stages);
    Scope<T> s(g, params_);
    ForwardResult<T> r;

    auto t1 = g.constant(cast_volume(sample.t1));
    Var<T> gm_out, wm_out;
    if (cfg_.multi_pathway) {
      Var<T> h = t1, hg = g.constant(cast_volume(sample.gm)), hw = g.constant(cast_volume(sample.wm));
      for (std::size_t st = 0; st < 4; ++st) {
        h = pathway_stage(s.sub("t1"), h, stages, st);
        hg = pathway_stage(s.sub("gm"), hg, stages, st);
        hw = pathway_stage(s.sub("wm"), hw, stages, st);
        h = add(h, fusion_module(s.sub("fusion" + std::to_string(st + 1)), hg, hw));
        r.pyramid[st] = h;
      }
      gm_out = hg;
      wm_out = hw;
    } else {
      r.pyramid = pathway(s.sub("t1"), t1, stages);
    }

    if (cfg_.use_fpfn) {
      r.fused = fpfn(s.sub("fpfn"), r.pyramid, cfg_.stage_channels());
      if (embed) {
        r.backbone = otfpf_module(s.sub("otfpf"), *r.fused, settings_, &r.otem);
      } else {
        std::vector<Var<T>> pooled;
        for (const auto& lv : *r.fused) pooled.push_back(global_avg_pool(lv));
        r.backbone = concat_channels(pooled);
      }
    } else {
      r.backbone = global_avg_pool(r.pyramid[3]);
    }
    if (!with_head) return r;

    std::vector<Var<T>> parts{r.backbone};
    if (cfg_.multi_pathway) {
      parts.push_back(global_avg_pool(gm_out));
      parts.push_back(global_avg_pool(wm_out));
    }
    if (cfg_.use_sex) {
      BasicTensor<T> onehot({1, 2});
      onehot[static_cast<std::size_t>(sample.sex)] = T{1};
      auto sx = s.sub("sex");
      parts.push_back(linear(g.constant(std::move(onehot)), sx("weight"), sx("bias")));
    }
    r.descriptor = parts.size() == 1 ? parts[0] : concat_channels(parts);

    auto head = s.sub("head");
    Var<T> h = r.descriptor;
    for (std::size_t i = 0; i < cfg_.mlp_hidden.size(); ++i) {
      const std::string fc = "fc" + std::to_string(i + 1);
      h = gelu(linear(h, head(fc + ".weight"), head(fc + ".bias")));
    }
    r.prediction = linear(h, head("out.weight"), head("out.bias"));
    return r;
  }

  static BasicTensor<T> cast_volume(const Tensor& v) {
    if constexpr (std::is_same_v<T, float>) {
      return v;
    } else {
      return v.template cast<T>();
    }
  }

  void build() {
    std::mt19937_64 rng(cfg_.seed);
    Initializer<T> in(params_, rng);
    const auto stages = cfg_.stages();
    const auto ch = cfg_.stage_channels();
    init_pathway(in.sub("t1"), stages);
    if (cfg_.multi_pathway) {
      init_pathway(in.sub("gm"), stages);
      init_pathway(in.sub("wm"), stages);
      for (std::size_t st = 0; st < 4; ++st) {
        init_fusion(in.sub("fusion" + std::to_string(st + 1)), ch[st]);
      }
    }
    if (cfg_.use_fpfn) init_fpfn(in.sub("fpfn"), ch, cfg_.unified_channels());
    if (cfg_.use_otem) init_otfpf(in.sub("otfpf"), cfg_.unified_channels(), cfg_.otem_references);
    if (cfg_.use_sex) {
      auto sx = in.sub("sex");
      sx.trunc_normal("weight", {2, cfg_.sex_embedding});
      sx.zeros("bias", {cfg_.sex_embedding});
    }
    auto head = in.sub("head");
    std::size_t width = cfg_.descriptor_length();
    for (std::size_t i = 0; i < cfg_.mlp_hidden.size(); ++i) {
      const std::string fc = "fc" + std::to_string(i + 1);
      head.trunc_normal(fc + ".weight", {width, cfg_.mlp_hidden[i]});
      head.zeros(fc + ".bias", {cfg_.mlp_hidden[i]});
      width = cfg_.mlp_hidden[i];
    }
    head.trunc_normal("out.weight", {width, 1});
    head.constant("out.bias", {1}, cfg_.head_bias);
  }

  OtfpfConfig cfg_;
  OtfpfSettings settings_;
  // Forward binds parameters into graphs by address without mutating them.
  mutable ParameterStore<T> params_;
};

using Model = BasicModel<float>;

// ---------------------------------------------------------------------------
// Loss and optimisation

/// |pred - age| as a one-element tensor.
template <typename T>
Var<T> l1_loss(const Var<T>& pred, double age) {
  return abs_diff(pred, age);
}

/// Adam with decoupled weight decay applied to every learnable parameter.
template <typename T>
class AdamW {
 public:
  explicit AdamW(const TrainConfig& cfg) : cfg_(cfg) { cfg_.validate(); }

  void step(ParameterStore<T>& params) {
    if (m_.empty()) {
      for (const auto& p : params) {
        m_.emplace_back(p.value.numel(), 0.0);
        v_.emplace_back(p.value.numel(), 0.0);
      }
    }
    if (m_.size() != params.size()) throw ConfigError("adamw: parameter set changed");
    ++t_;
    const double bc1 = 1.0 - std::pow(cfg_.beta1, double(t_));
    const double bc2 = 1.0 - std::pow(cfg_.beta2, double(t_));
    std::size_t k = 0;
    for (auto& p : params) {
      auto& m = m_[k];
      auto& v = v_[k];
      ++k;
      if (!p.requires_grad) continue;
      const bool has_grad = p.grad.shape() == p.value.shape();
      for (std::size_t i = 0; i < p.value.numel(); ++i) {
        const double g = has_grad ? double(p.grad[i]) : 0.0;
        double theta = double(p.value[i]) * (1.0 - cfg_.lr * cfg_.weight_decay);
        m[i] = cfg_.beta1 * m[i] + (1.0 - cfg_.beta1) * g;
        v[i] = cfg_.beta2 * v[i] + (1.0 - cfg_.beta2) * g * g;
        theta -= cfg_.lr * (m[i] / bc1) / (std::sqrt(v[i] / bc2) + cfg_.adam_eps);
        p.value[i] = static_cast<T>(theta);
      }
    }
  }

  std::size_t steps() const { return t_; }

 private:
  TrainConfig cfg_;
  std::vector<std::vector<double>> m_, v_;
  std::size_t t_ = 0;
};

/// Worker count: OTFPF_THREADS when set, otherwise hardware concurrency.
inline std::size_t worker_count() {
  std::size_t n = std::max(1u, std::thread::hardware_concurrency());
  if (const char* env = std::getenv("OTFPF_THREADS")) {
    char* end = nullptr;
    const long v = std::strtol(env, &end, 10);
    if (end != env && v > 0) n = std::size_t(v);
  }
  return n;
}

/// Samples of a batch are striped over this many partial gradient sums, which
/// are reduced in slot order. The result therefore does not depend on the
/// number of worker threads.
inline constexpr std::size_t kGradientSlots = 4;

/// One AdamW step on the mean L1 loss of `batch`. Returns the mean loss. On a
/// non-finite loss or gradient nothing is updated and NumericalError is thrown.
template <typename T>
double train_step(BasicModel<T>& model, const std::vector<const SubjectSample*>& batch,
                  AdamW<T>& opt) {
  if (batch.empty()) throw ConfigError("train_step: empty batch");
  auto& params = model.params();
  const T seed = static_cast<T>(1.0 / double(batch.size()));
  const std::size_t slots = std::min(kGradientSlots, batch.size());
  std::vector<typename Graph<T>::GradSink> sinks(slots);
  std::vector<double> losses(batch.size(), 0.0);
  std::vector<std::exception_ptr> errors(slots);
  auto run_slot = [&](std::size_t slot) {
    try {
      for (std::size_t i = slot; i < batch.size(); i += slots) {
        Graph<T> g;
        auto r = model.forward(g, *batch[i]);
        auto loss = l1_loss(r.prediction, batch[i]->age);
        losses[i] = double(loss.value()[0]);
        if (!std::isfinite(losses[i])) return;
        g.backward(loss, seed, &sinks[slot]);
      }
    } catch (...) {
      errors[slot] = std::current_exception();
    }
  };
  const std::size_t workers = std::min(worker_count(), slots);
  if (workers <= 1) {
    for (std::size_t k = 0; k < slots; ++k) run_slot(k);
  } else {
    std::atomic<std::size_t> next{0};
    std::vector<std::thread> pool;
    for (std::size_t w = 0; w < workers; ++w) {
      pool.emplace_back([&] {
        for (std::size_t k = next++; k < slots; k = next++) run_slot(k);
      });
    }
    for (auto& t : pool) t.join();
  }
  for (auto& e : errors) {
    if (e) std::rethrow_exception(e);
  }
  double total = 0.0;
  for (double l : losses) {
    if (!std::isfinite(l)) throw NumericalError("train_step: non-finite loss");
    total += l;
  }
  params.zero_grad();
  for (auto& p : params) {
    for (auto& sink : sinks) {
      auto it = sink.find(&p);
      if (it == sink.end()) continue;
      for (std::size_t k = 0; k < p.grad.numel(); ++k) p.grad[k] += it->second[k];
    }
    if (p.requires_grad && !p.grad.all_finite()) {
      params.zero_grad();
      throw NumericalError("train_step: non-finite gradient in " + p.name);
    }
  }
  opt.step(params);
  return total / double(batch.size());
}

/// Per-sample predictions in input order.
template <typename T>
std::vector<double> predict_batch(const BasicModel<T>& model,
                                  const std::vector<const SubjectSample*>& samples) {
  std::vector<double> out(samples.size(), 0.0);
  const std::size_t workers = std::min(worker_count(), samples.size());
  if (workers <= 1) {
    for (std::size_t i = 0; i < samples.size(); ++i) {
      try {
        out[i] = model.predict(*samples[i]);
      } catch (const ShapeError& e) {
        throw ShapeError("sample " + std::to_string(i) + ": " + e.what());
      } catch (const DataError& e) {
        throw DataError("sample " + std::to_string(i) + ": " + e.what());
      }
    }
    return out;
  }
  std::atomic<std::size_t> next{0};
  std::vector<std::exception_ptr> errors(samples.size());
  std::vector<std::thread> pool;
  for (std::size_t w = 0; w < workers; ++w) {
    pool.emplace_back([&] {
      for (std::size_t i = next++; i < samples.size(); i = next++) {
        try {
          out[i] = model.predict(*samples[i]);
        } catch (...) {
          errors[i] = std::current_exception();
        }
      }
    });
  }
  for (auto& t : pool) t.join();
  for (std::size_t i = 0; i < errors.size(); ++i) {
    if (!errors[i]) continue;
    try {
      std::rethrow_exception(errors[i]);
    } catch (const ShapeError& e) {
      throw ShapeError("sample " + std::to_string(i) + ": " + e.what());
    } catch (const DataError& e) {
      throw DataError("sample " + std::to_string(i) + ": " + e.what());
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Checkpoints: <base>.json manifest plus <base>.bin little-endian f32 blob.

inline constexpr const char* kCheckpointFormat = "otfpf-ckpt-v1";

inline void save_checkpoint(const std::filesystem::path& base, const Model& model) {
  nlohmann::json params = nlohmann::json::array();
  std::vector<float> blob;
  for (const auto& p : model.params()) {
    params.push_back({{"name", p.name},
                      {"shape", p.value.shape()},
                      {"offset", blob.size()},
                      {"trainable", p.requires_grad}});
    blob.insert(blob.end(), p.value.data().begin(), p.value.data().end());
  }
  nlohmann::json manifest = {{"format", kCheckpointFormat},
                             {"config", model.config()},
                             {"sigma", model.otem_settings().sigma},
                             {"parameters", params},
                             {"count", blob.size()}};
  auto paths = io::tensor_paths(base);
  {
    std::ofstream out(paths.header);
    if (!out) throw DataError("cannot write checkpoint manifest " + paths.header.string());
    out << manifest.dump(2) << "\n";
  }
  std::ofstream bin(paths.payload, std::ios::binary);
  if (!bin) throw DataError("cannot write checkpoint blob " + paths.payload.string());
  io::write_le_f32(bin, blob);
  if (!bin) throw DataError("write failed: " + paths.payload.string());
}

inline Model load_checkpoint(const std::filesystem::path& base) {
  auto paths = io::tensor_paths(base);
  std::ifstream in(paths.header);
  if (!in) throw DataError("cannot read checkpoint manifest " + paths.header.string());
  nlohmann::json manifest;
  try {
    in >> manifest;
  } catch (const nlohmann::json::exception& e) {
    throw DataError("checkpoint manifest is not valid JSON: " + std::string(e.what()));
  }
  if (manifest.value("format", "") != kCheckpointFormat) {
    throw DataError("checkpoint: unsupported format tag (expected " +
                    std::string(kCheckpointFormat) + ")");
  }
  Model model(manifest.at("config").get<OtfpfConfig>());
  model.set_sigma(manifest.at("sigma").get<std::array<double, 4>>());
  std::ifstream bin(paths.payload, std::ios::binary);
  if (!bin) throw DataError("cannot read checkpoint blob " + paths.payload.string());
  const auto blob = io::read_le_f32(bin, manifest.at("count").get<std::size_t>());
  const auto& entries = manifest.at("parameters");
  if (entries.size() != model.params().size()) {
    throw DataError("checkpoint: parameter count does not match the configured model");
  }
  for (const auto& e : entries) {
    auto& p = model.params().at(e.at("name").get<std::string>());
    const auto shape = e.at("shape").get<Shape>();
    if (shape != p.value.shape()) {
      throw DataError("checkpoint: shape mismatch for " + p.name);
    }
    const auto off = e.at("offset").get<std::size_t>();
    if (off + p.value.numel() > blob.size()) throw DataError("checkpoint: truncated blob");
    std::copy_n(blob.begin() + std::ptrdiff_t(off), p.value.numel(), p.value.data().begin());
  }
  return model;
}

}  // namespace otfpf
