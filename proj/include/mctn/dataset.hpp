#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "json.hpp"
#include "mctn/errors.hpp"
#include "mctn/random.hpp"

namespace mctn {

// One modality of one sample: a zero-padded L_max x d matrix plus the true
// (pre-padding) length. Rows at and beyond true_length are exactly zero.
struct FeatureSequence {
  std::size_t dim = 0;
  std::size_t true_length = 0;
  std::size_t max_length = 0;
  std::vector<double> data;  // max_length * dim, row-major

  const double* row(std::size_t t) const { return data.data() + t * dim; }
  double* row(std::size_t t) { return data.data() + t * dim; }

  std::vector<double> row_vec(std::size_t t) const {
    return std::vector<double>(row(t), row(t) + dim);
  }

  bool padding_is_zero() const {
    for (std::size_t i = true_length * dim; i < data.size(); ++i)
      if (data[i] != 0.0) return false;
    return true;
  }
};

// Pads an L x d matrix with zero rows up to max_length.
inline FeatureSequence zero_pad(const std::vector<std::vector<double>>& rows, std::size_t max_length) {
  if (rows.empty()) throw ValueError("zero_pad: zero-length sequence");
  if (rows.size() > max_length)
    throw ShapeError(cat("zero_pad: length ", rows.size(), " exceeds max ", max_length));
  FeatureSequence fs;
  fs.dim = rows[0].size();
  fs.true_length = rows.size();
  fs.max_length = max_length;
  fs.data.assign(max_length * fs.dim, 0.0);
  for (std::size_t t = 0; t < rows.size(); ++t) {
    if (rows[t].size() != fs.dim)
      throw ShapeError(cat("zero_pad: row ", t, " has ", rows[t].size(), " columns, expected ", fs.dim));
    std::copy(rows[t].begin(), rows[t].end(), fs.row(t));
  }
  return fs;
}

struct Sample {
  std::string id;
  double label = 0.0;
  std::string split;  // train | valid | test
  std::size_t true_length = 0;
  std::map<std::string, FeatureSequence> modalities;

  int label_class() const { return static_cast<int>(std::lround(label)); }
};

struct MultimodalDataset {
  std::string name;
  std::string task;  // regression | classification
  std::vector<std::pair<std::string, std::size_t>> modalities;
  std::vector<Sample> samples;
  std::size_t max_length = 0;
  std::size_t alignment_warnings = 0;  // empty intervals seen while aligning

  bool has_modality(const std::string& m) const {
    for (const auto& [n, d] : modalities)
      if (n == m) return true;
    return false;
  }

  std::size_t dim_of(const std::string& m) const {
    for (const auto& [n, d] : modalities)
      if (n == m) return d;
    throw ConfigError(cat("dataset: unknown modality '", m, "'"));
  }

  std::vector<std::size_t> split_indices(const std::string& split) const {
    std::vector<std::size_t> out;
    for (std::size_t i = 0; i < samples.size(); ++i)
      if (samples[i].split == split) out.push_back(i);
    return out;
  }

  int num_classes() const {
    int k = 0;
    for (const auto& s : samples) k = std::max(k, s.label_class() + 1);
    return k;
  }

  double label_range() const {
    double lo = samples.empty() ? 0.0 : samples[0].label;
    double hi = lo;
    for (const auto& s : samples) {
      lo = std::min(lo, s.label);
      hi = std::max(hi, s.label);
    }
    return hi - lo;
  }
};

// ---------------------------------------------------------------------------
// CSV I/O — headerless, comma-separated decimal floats, rows = timesteps.
// ---------------------------------------------------------------------------

inline std::vector<std::vector<double>> read_csv_matrix(const std::filesystem::path& path) {
  std::ifstream f(path);
  if (!f) throw IoError(cat("csv: cannot open ", path.string()));
  std::vector<std::vector<double>> rows;
  std::string line;
  while (std::getline(f, line)) {
    if (line.empty()) continue;
    std::vector<double> row;
    std::stringstream ss(line);
    std::string cell;
    while (std::getline(ss, cell, ',')) {
      try {
        row.push_back(std::stod(cell));
      } catch (const std::exception&) {
        throw IoError(cat("csv: bad number '", cell, "' in ", path.string()));
      }
    }
    rows.push_back(std::move(row));
  }
  return rows;
}

inline void write_csv_matrix(const std::filesystem::path& path,
                             const std::vector<std::vector<double>>& rows) {
  std::ofstream f(path);
  if (!f) throw IoError(cat("csv: cannot write ", path.string()));
  f.precision(17);
  for (const auto& row : rows) {
    for (std::size_t i = 0; i < row.size(); ++i) {
      if (i) f << ',';
      f << row[i];
    }
    f << '\n';
  }
}

// ---------------------------------------------------------------------------
// Word-interval alignment
// ---------------------------------------------------------------------------

// (start, end) per word, seconds; must be non-overlapping and non-decreasing.
using IntervalTable = std::vector<std::pair<double, double>>;

inline void validate_intervals(const IntervalTable& iv) {
  for (std::size_t i = 0; i < iv.size(); ++i) {
    if (iv[i].second < iv[i].first)
      throw ValueError(cat("intervals: row ", i, " ends before it starts"));
    if (i > 0 && iv[i].first < iv[i - 1].second)
      throw ValueError(cat("intervals: row ", i, " overlaps previous"));
  }
}

// Averages fixed-rate frames over each word interval. Frame t carries
// timestamp t/rate; frames with start <= t/rate < end contribute to that
// word's row. Words covering no frame become zero rows (counted via
// empty_count when given).
inline std::vector<std::vector<double>> align_by_intervals(
    const std::vector<std::vector<double>>& frames, double rate, const IntervalTable& intervals,
    std::size_t* empty_count = nullptr) {
  if (rate <= 0.0) throw ValueError("align: rate must be positive");
  validate_intervals(intervals);
  const std::size_t d = frames.empty() ? 0 : frames[0].size();
  std::vector<std::vector<double>> out;
  out.reserve(intervals.size());
  for (const auto& [start, end] : intervals) {
    std::vector<double> acc(d, 0.0);
    std::size_t count = 0;
    for (std::size_t t = 0; t < frames.size(); ++t) {
      const double ts = static_cast<double>(t) / rate;
      if (ts >= start && ts < end) {
        for (std::size_t j = 0; j < d; ++j) acc[j] += frames[t][j];
        ++count;
      }
    }
    if (count == 0) {
      if (empty_count) ++*empty_count;
    } else {
      for (auto& v : acc) v /= static_cast<double>(count);
    }
    out.push_back(std::move(acc));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Manifest load/save
// ---------------------------------------------------------------------------
// manifest.json: {name, task, modalities:[{name,dim}],
//                 samples:[{id,label,split,length,files:{modality:path}}]}
// Frame CSVs hold exactly `length` rows; padding happens in memory.

inline MultimodalDataset load_dataset(const std::filesystem::path& manifest_path,
                                      const std::vector<std::string>* only_modalities = nullptr) {
  std::ifstream f(manifest_path);
  if (!f) throw IoError(cat("dataset: cannot open manifest ", manifest_path.string()));
  nlohmann::json j;
  try {
    f >> j;
  } catch (const std::exception& e) {
    throw IoError(cat("dataset: bad manifest JSON: ", e.what()));
  }
  for (const char* field : {"name", "task", "modalities", "samples"})
    if (!j.contains(field)) throw IoError(cat("dataset: manifest missing field '", field, "'"));

  MultimodalDataset ds;
  ds.name = j["name"].get<std::string>();
  ds.task = j["task"].get<std::string>();
  if (ds.task != "regression" && ds.task != "classification")
    throw IoError(cat("dataset: unknown task '", ds.task, "'"));

  std::set<std::string> wanted;
  if (only_modalities)
    wanted.insert(only_modalities->begin(), only_modalities->end());
  for (const auto& m : j["modalities"]) {
    if (!m.contains("name") || !m.contains("dim"))
      throw IoError("dataset: modality entry missing field 'name' or 'dim'");
    const auto name = m["name"].get<std::string>();
    if (!wanted.empty() && !wanted.count(name)) continue;
    ds.modalities.emplace_back(name, m["dim"].get<std::size_t>());
  }
  if (!wanted.empty())
    for (const auto& w : wanted)
      if (!ds.has_modality(w))
        throw ConfigError(cat("dataset: requested modality '", w, "' not declared in manifest"));

  const auto base = manifest_path.parent_path();
  std::size_t max_len = 0;
  for (const auto& s : j["samples"]) max_len = std::max(max_len, s.at("length").get<std::size_t>());
  ds.max_length = max_len;

  for (const auto& s : j["samples"]) {
    for (const char* field : {"id", "label", "split", "length", "files"})
      if (!s.contains(field))
        throw IoError(cat("dataset: sample entry missing field '", field, "'"));
    Sample sample;
    sample.id = s["id"].get<std::string>();
    sample.label = s["label"].get<double>();
    sample.split = s["split"].get<std::string>();
    sample.true_length = s["length"].get<std::size_t>();
    if (sample.true_length == 0)
      throw ValueError(cat("dataset: sample ", sample.id, " has zero length"));
    for (const auto& [mod_name, dim] : ds.modalities) {
      if (!s["files"].contains(mod_name))
        throw IoError(cat("dataset: sample ", sample.id, " missing file for modality '", mod_name, "'"));
      const auto path = base / s["files"][mod_name].get<std::string>();
      auto rows = read_csv_matrix(path);
      if (rows.size() != sample.true_length)
        throw ValueError(cat("dataset: sample ", sample.id, " modality '", mod_name, "' has ", rows.size(),
                             " rows, expected length ", sample.true_length));
      for (std::size_t t = 0; t < rows.size(); ++t) {
        if (rows[t].size() != dim)
          throw ShapeError(cat("dataset: sample ", sample.id, " modality '", mod_name, "' row ", t, " has ",
                               rows[t].size(), " columns, declared dim ", dim));
        for (double v : rows[t])
          if (!std::isfinite(v))
            throw ValueError(cat("dataset: sample ", sample.id, " modality '", mod_name,
                                 "' contains a non-finite value"));
      }
      sample.modalities[mod_name] = zero_pad(rows, max_len);
    }
    ds.samples.push_back(std::move(sample));
  }
  return ds;
}

// Writes manifest + per-sample per-modality CSVs under dir.
inline void save_dataset(const MultimodalDataset& ds, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir / "frames");
  nlohmann::json j;
  j["name"] = ds.name;
  j["task"] = ds.task;
  j["modalities"] = nlohmann::json::array();
  for (const auto& [n, d] : ds.modalities) j["modalities"].push_back({{"name", n}, {"dim", d}});
  j["samples"] = nlohmann::json::array();
  for (const auto& s : ds.samples) {
    nlohmann::json files;
    for (const auto& [mod, fs] : s.modalities) {
      const std::string rel = "frames/" + s.id + "." + mod + ".csv";
      std::vector<std::vector<double>> rows;
      for (std::size_t t = 0; t < fs.true_length; ++t) rows.push_back(fs.row_vec(t));
      write_csv_matrix(dir / rel, rows);
      files[mod] = rel;
    }
    j["samples"].push_back({{"id", s.id},
                            {"label", s.label},
                            {"split", s.split},
                            {"length", s.true_length},
                            {"files", files}});
  }
  std::ofstream f(dir / "manifest.json");
  if (!f) throw IoError(cat("dataset: cannot write manifest under ", dir.string()));
  f << j.dump(2) << "\n";
}

// ---------------------------------------------------------------------------
// Synthetic data
// ---------------------------------------------------------------------------

struct SynthSpec {
  std::size_t n = 500;
  std::size_t max_length = 10;
  std::vector<std::size_t> dims = {8, 6};  // one entry per modality
  double sigma = 0.1;
  std::uint64_t seed = 0;
  std::string task = "regression";
  std::size_t latent_dim = 3;
};

// Every modality is a fixed linear view of a shared smooth latent sequence,
// and the label is a bounded nonlinear readout of the pooled latent state.
// Translation between modalities is therefore learnable, and each modality
// alone is informative (but not linearly perfect) about the label.
inline MultimodalDataset synth_generate(const SynthSpec& spec) {
  if (spec.n < 5) throw ConfigError("synth: need at least 5 samples");
  if (spec.dims.empty() || spec.dims.size() > 3)
    throw ConfigError("synth: dims must list 1..3 modalities");
  if (spec.max_length < 2) throw ConfigError("synth: max_length must be >= 2");

  static const char* kNames[] = {"text", "visual", "acoustic"};
  Rng rng(spec.seed);

  MultimodalDataset ds;
  ds.name = cat("synth-", spec.dims.size(), "mod-n", spec.n, "-seed", spec.seed);
  ds.task = spec.task;
  ds.max_length = spec.max_length;
  for (std::size_t m = 0; m < spec.dims.size(); ++m)
    ds.modalities.emplace_back(kNames[m], spec.dims[m]);

  const std::size_t k = spec.latent_dim;
  // Fixed mixing maps and label readout for the whole dataset.
  std::vector<std::vector<double>> maps(spec.dims.size());
  std::vector<std::vector<double>> offsets(spec.dims.size());
  for (std::size_t m = 0; m < spec.dims.size(); ++m) {
    maps[m].resize(spec.dims[m] * k);
    for (auto& v : maps[m]) v = rng.normal(0.0, 1.0 / std::sqrt(static_cast<double>(k)));
    offsets[m].resize(spec.dims[m]);
    for (auto& v : offsets[m]) v = rng.normal(0.0, 0.1);
  }
  std::vector<double> readout(k);
  for (auto& v : readout) v = rng.normal(0.0, 1.0);

  const std::size_t min_len = std::max<std::size_t>(2, spec.max_length / 2);
  for (std::size_t i = 0; i < spec.n; ++i) {
    const std::size_t len = min_len + static_cast<std::size_t>(rng.below(spec.max_length - min_len + 1));
    // Smooth latent walk.
    std::vector<std::vector<double>> z(len, std::vector<double>(k, 0.0));
    for (std::size_t t = 0; t < len; ++t)
      for (std::size_t c = 0; c < k; ++c)
        z[t][c] = (t == 0 ? rng.normal() : 0.7 * z[t - 1][c] + 0.3 * rng.normal());

    Sample s;
    s.id = cat("s", i);
    s.true_length = len;
    for (std::size_t m = 0; m < spec.dims.size(); ++m) {
      std::vector<std::vector<double>> rows(len, std::vector<double>(spec.dims[m], 0.0));
      for (std::size_t t = 0; t < len; ++t)
        for (std::size_t r = 0; r < spec.dims[m]; ++r) {
          double v = offsets[m][r];
          for (std::size_t c = 0; c < k; ++c) v += maps[m][r * k + c] * z[t][c];
          rows[t][r] = v + (spec.sigma > 0.0 ? rng.normal(0.0, spec.sigma) : 0.0);
        }
      s.modalities[kNames[m]] = zero_pad(rows, spec.max_length);
    }
    std::vector<double> pooled(k, 0.0);
    for (std::size_t t = 0; t < len; ++t)
      for (std::size_t c = 0; c < k; ++c) pooled[c] += z[t][c] / static_cast<double>(len);
    double u = 0.0;
    for (std::size_t c = 0; c < k; ++c) u += readout[c] * pooled[c];
    const double y = 3.0 * std::tanh(1.5 * u);
    s.label = (spec.task == "classification") ? (y >= 0.0 ? 1.0 : 0.0) : y;
    ds.samples.push_back(std::move(s));
  }

  // 70/10/20 split by seeded shuffle.
  std::vector<std::size_t> order(spec.n);
  for (std::size_t i = 0; i < spec.n; ++i) order[i] = i;
  rng.shuffle(order);
  const std::size_t n_train = (spec.n * 7) / 10;
  const std::size_t n_valid = spec.n / 10;
  for (std::size_t pos = 0; pos < spec.n; ++pos) {
    auto& s = ds.samples[order[pos]];
    s.split = pos < n_train ? "train" : (pos < n_train + n_valid ? "valid" : "test");
  }
  return ds;
}

// Feature-axis concatenation of two aligned sequences (same true length).
inline FeatureSequence concat_features(const FeatureSequence& a, const FeatureSequence& b) {
  if (a.true_length != b.true_length || a.max_length != b.max_length)
    throw ShapeError(cat("concat_features: lengths differ (", a.true_length, " vs ", b.true_length, ")"));
  FeatureSequence out;
  out.dim = a.dim + b.dim;
  out.true_length = a.true_length;
  out.max_length = a.max_length;
  out.data.assign(out.max_length * out.dim, 0.0);
  for (std::size_t t = 0; t < a.true_length; ++t) {
    std::copy(a.row(t), a.row(t) + a.dim, out.row(t));
    std::copy(b.row(t), b.row(t) + b.dim, out.row(t) + a.dim);
  }
  return out;
}

}  // namespace mctn
