#pragma once

// Synthetic ellipsoidal "brain" volumes whose morphology encodes age, and
// the JSON manifest that lists subjects, file paths and split tags.

#include <algorithm>
#include <array>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <random>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include <nlohmann/json.hpp>

#include "otfpf/model.hpp"
#include "otfpf/tensor_io.hpp"

namespace otfpf {

namespace fs = std::filesystem;

inline constexpr double kMinAge = 3.0;
inline constexpr double kMaxAge = 97.0;
inline constexpr double kSyntheticNoise = 0.05;
inline constexpr const char* kManifestFormat = "otfpf-manifest-v1";

enum class Split { train, val, test };

inline std::string to_string(Split s) {
  switch (s) {
    case Split::train: return "train";
    case Split::val: return "val";
    case Split::test: return "test";
  }
  return "train";
}

inline Split parse_split(std::string_view s) {
  if (s == "train") return Split::train;
  if (s == "val") return Split::val;
  if (s == "test") return Split::test;
  throw DataError("unknown split '" + std::string(s) + "' (expected train, val or test)");
}

struct ManifestRecord {
  std::string t1_path, gm_path, wm_path;  // relative to the manifest directory
  int sex = 0;
  double age = 0.0;
  Split split = Split::train;
};

struct DatasetManifest {
  std::array<double, 3> ratios{0.8, 0.1, 0.1};
  std::vector<ManifestRecord> records;
  /// Directory the record paths are relative to; not serialised.
  fs::path root;

  void validate() const {
    double sum = 0.0;
    for (double r : ratios) {
      if (r < 0.0) throw DataError("manifest: negative split ratio");
      sum += r;
    }
    if (std::abs(sum - 1.0) > 1e-9) throw DataError("manifest: split ratios must sum to 1");
    for (const auto& r : records) {
      if (r.sex != 0 && r.sex != 1) throw DataError("manifest: sex must be 0 or 1");
      if (!(r.age > 0.0)) throw DataError("manifest: age must be > 0");
    }
  }

  std::vector<std::size_t> indices(Split s) const {
    std::vector<std::size_t> out;
    for (std::size_t i = 0; i < records.size(); ++i) {
      if (records[i].split == s) out.push_back(i);
    }
    return out;
  }
};

inline nlohmann::json manifest_json(const DatasetManifest& m) {
  nlohmann::json recs = nlohmann::json::array();
  for (const auto& r : m.records) {
    recs.push_back({{"t1_path", r.t1_path},
                    {"gm_path", r.gm_path},
                    {"wm_path", r.wm_path},
                    {"sex", r.sex},
                    {"age", r.age},
                    {"split", to_string(r.split)}});
  }
  return {{"format", kManifestFormat},
          {"split_ratios", {{"train", m.ratios[0]}, {"val", m.ratios[1]}, {"test", m.ratios[2]}}},
          {"records", recs}};
}

inline void write_manifest(const DatasetManifest& m, const fs::path& path) {
  m.validate();
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot write manifest " + path.string());
  out << manifest_json(m).dump(2) << "\n";
  if (!out) throw DataError("write failed: " + path.string());
}

/// Parses a manifest and checks that every referenced tensor file exists.
inline DatasetManifest read_manifest(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot read manifest " + path.string());
  nlohmann::json j;
  try {
    in >> j;
    if (j.value("format", "") != kManifestFormat) {
      throw DataError("manifest " + path.string() + ": unsupported format tag");
    }
    DatasetManifest m;
    m.root = path.parent_path();
    const auto& sr = j.at("split_ratios");
    m.ratios = {sr.at("train").get<double>(), sr.at("val").get<double>(),
                sr.at("test").get<double>()};
    for (const auto& r : j.at("records")) {
      ManifestRecord rec;
      rec.t1_path = r.at("t1_path").get<std::string>();
      rec.gm_path = r.at("gm_path").get<std::string>();
      rec.wm_path = r.at("wm_path").get<std::string>();
      rec.sex = r.at("sex").get<int>();
      rec.age = r.at("age").get<double>();
      rec.split = parse_split(r.at("split").get<std::string>());
      for (const auto* p : {&rec.t1_path, &rec.gm_path, &rec.wm_path}) {
        const auto paths = io::tensor_paths(m.root / *p);
        if (!fs::exists(paths.header) || !fs::exists(paths.payload)) {
          throw DataError("manifest " + path.string() + ": missing tensor " + (m.root / *p).string());
        }
      }
      m.records.push_back(std::move(rec));
    }
    m.validate();
    return m;
  } catch (const nlohmann::json::exception& e) {
    throw DataError("malformed manifest " + path.string() + ": " + e.what());
  }
}

inline SubjectSample load_subject(const DatasetManifest& m, std::size_t i) {
  const auto& r = m.records.at(i);
  SubjectSample s;
  s.t1 = io::load_tensor(m.root / r.t1_path);
  s.gm = io::load_tensor(m.root / r.gm_path);
  s.wm = io::load_tensor(m.root / r.wm_path);
  s.sex = r.sex;
  s.age = r.age;
  s.validate();
  return s;
}

/// Every subject of the manifest, in record order.
inline std::vector<SubjectSample> load_subjects(const DatasetManifest& m) {
  std::vector<SubjectSample> out(m.records.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = load_subject(m, i);
  return out;
}

// ---------------------------------------------------------------------------
// Synthetic generator

/// Cortical shell thickness as a fraction of the ellipsoid radius: linear
/// from 0.36 at age 3 down to 0.12 at age 97.
inline double shell_fraction(double age) {
  const double t = std::clamp((age - kMinAge) / (kMaxAge - kMinAge), 0.0, 1.0);
  return 0.36 - 0.24 * t;
}

/// Interior intensity: linear from 0.45 at age 3 up to 0.95 at age 97.
inline double interior_intensity(double age) {
  const double t = std::clamp((age - kMinAge) / (kMaxAge - kMinAge), 0.0, 1.0);
  return 0.45 + 0.5 * t;
}

inline constexpr double kShellIntensity = 0.6;

struct SyntheticSubject {
  double age = 0.0;
  int sex = 0;
  SubjectSample sample;
};

/// One subject drawn from its own generator (seeded from the dataset seed and
/// the subject index) so that output does not depend on thread scheduling.
inline SyntheticSubject synthesize_subject(std::size_t size, std::uint64_t seed,
                                           std::size_t index, std::optional<double> age = {},
                                           std::optional<int> sex = {}) {
  std::seed_seq seq{std::uint32_t(seed), std::uint32_t(seed >> 32), std::uint32_t(index),
                    std::uint32_t(index >> 32), 0x5eedu};
  std::mt19937_64 rng(seq);
  std::uniform_real_distribution<double> uage(kMinAge, kMaxAge);
  std::bernoulli_distribution usex(0.5);
  std::uniform_real_distribution<double> jitter(-0.03, 0.03);
  std::normal_distribution<double> noise(0.0, kSyntheticNoise);

  SyntheticSubject out;
  out.age = age.value_or(uage(rng));
  out.sex = sex.value_or(usex(rng) ? 1 : 0);
  const double scale = out.sex == 1 ? 1.03 : 0.97;
  std::array<double, 3> radius{0.42, 0.36, 0.40};
  for (auto& r : radius) r = r * double(size) * scale * (1.0 + jitter(rng));
  const double tau = shell_fraction(out.age);
  const double wm_int = interior_intensity(out.age);
  const double c = 0.5 * double(size - 1);

  const Shape shape{size, size, size, 1};
  Tensor t1(shape), gm(shape), wm(shape);
  for (std::size_t d = 0; d < size; ++d) {
    for (std::size_t w = 0; w < size; ++w) {
      for (std::size_t h = 0; h < size; ++h) {
        const double x = (double(d) - c) / radius[0];
        const double y = (double(w) - c) / radius[1];
        const double z = (double(h) - c) / radius[2];
        const double rho = std::sqrt(x * x + y * y + z * z);
        const std::size_t i = (d * size + w) * size + h;
        double v = 0.0;
        if (rho <= 1.0 - tau) {
          wm[i] = float(wm_int);
          v = wm_int;
        } else if (rho <= 1.0) {
          gm[i] = float(kShellIntensity);
          v = kShellIntensity;
        }
        t1[i] = float(v + noise(rng));
      }
    }
  }
  out.sample.t1 = std::move(t1);
  out.sample.gm = std::move(gm);
  out.sample.wm = std::move(wm);
  out.sample.sex = out.sex;
  out.sample.age = out.age;
  return out;
}

/// Writes n subjects (t1/gm/wm tensor pairs) plus manifest.json into `out`.
/// Subjects are shuffled with the seed and cut 80/10/10 into splits.
inline DatasetManifest generate_synthetic_dataset(std::size_t n, std::size_t size,
                                                  std::uint64_t seed, const fs::path& out) {
  if (size < 16) throw ConfigError("generate: size must be >= 16 voxels per axis");
  if (n < 10) throw ConfigError("generate: n must be >= 10");
  std::error_code ec;
  fs::create_directories(out, ec);
  if (ec || !fs::is_directory(out)) {
    throw DataError("generate: cannot create output directory " + out.string());
  }
  {
    const auto probe = out / ".write_probe";
    std::ofstream p(probe);
    if (!p) throw DataError("generate: output directory is not writable: " + out.string());
    p.close();
    fs::remove(probe, ec);
  }

  DatasetManifest m;
  m.root = out;
  m.records.resize(n);
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::mt19937_64 split_rng(seed ^ 0x9e3779b97f4a7c15ull);
  std::shuffle(order.begin(), order.end(), split_rng);
  const auto n_train = static_cast<std::size_t>(std::llround(m.ratios[0] * double(n)));
  const auto n_val = static_cast<std::size_t>(std::llround(m.ratios[1] * double(n)));
  for (std::size_t r = 0; r < n; ++r) {
    m.records[order[r]].split = r < n_train ? Split::train
                                : r < n_train + n_val ? Split::val
                                                      : Split::test;
  }

  std::vector<std::exception_ptr> errors(n);
  std::atomic<std::size_t> next{0};
  auto work = [&] {
    for (std::size_t i = next++; i < n; i = next++) {
      try {
        auto subj = synthesize_subject(size, seed, i);
        char stem[32];
        std::snprintf(stem, sizeof stem, "sub-%04zu", i);
        auto& rec = m.records[i];
        rec.t1_path = std::string(stem) + "_t1";
        rec.gm_path = std::string(stem) + "_gm";
        rec.wm_path = std::string(stem) + "_wm";
        rec.sex = subj.sex;
        rec.age = subj.age;
        io::save_tensor(out / rec.t1_path, subj.sample.t1);
        io::save_tensor(out / rec.gm_path, subj.sample.gm);
        io::save_tensor(out / rec.wm_path, subj.sample.wm);
      } catch (...) {
        errors[i] = std::current_exception();
      }
    }
  };
  const std::size_t workers = std::min(worker_count(), n);
  std::vector<std::thread> pool;
  for (std::size_t w = 1; w < workers; ++w) pool.emplace_back(work);
  work();
  for (auto& t : pool) t.join();
  for (auto& e : errors) {
    if (e) std::rethrow_exception(e);
  }
  write_manifest(m, out / "manifest.json");
  return m;
}

}  // namespace otfpf
