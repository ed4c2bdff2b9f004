#pragma once

// Experiment runners behind the kmc command-line tool. Each run reads a
// JSON config, writes CSV files plus manifest.json into its output
// directory, and reports an exit status.

#include "kmc/check_suite.hpp"
#include "kmc/cost_family.hpp"
#include "kmc/gaussian_algebra.hpp"
#include "kmc/mdn_trainer.hpp"
#include "kmc/patch_gauss_classifier.hpp"
#include "kmc/spectral_diagnostics.hpp"

#include <json.hpp>

#include <chrono>
#include <cstdio>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

namespace kmc::cli {

using nlohmann::json;

inline constexpr const char* kLibraryVersion = "0.1.0";

enum ExitCode : int { kExitOk = 0, kExitCheckFailed = 1, kExitUsage = 2 };

enum class Experiment { Sweep, FitMdn, IdentityMap, SingularGrid, Classify, CheckSuite };

inline std::string_view to_string(Experiment e) {
  switch (e) {
    case Experiment::Sweep: return "sweep";
    case Experiment::FitMdn: return "fit_mdn";
    case Experiment::IdentityMap: return "identity_map";
    case Experiment::SingularGrid: return "singular_grid";
    case Experiment::Classify: return "classify";
    case Experiment::CheckSuite: return "check_suite";
  }
  return "unknown";
}

/// Accepts both fit_mdn and fit-mdn spellings.
inline Experiment experiment_from_string(std::string s) {
  for (auto& ch : s)
    if (ch == '-') ch = '_';
  for (auto e : {Experiment::Sweep, Experiment::FitMdn, Experiment::IdentityMap, Experiment::SingularGrid,
                 Experiment::Classify, Experiment::CheckSuite})
    if (to_string(e) == s) return e;
  throw InvalidArgument("unknown experiment '" + s + "'");
}

/// Config problem; line() is 1-based, 0 when no position is known.
class ConfigError : public InvalidArgument {
 public:
  ConfigError(const std::string& source, std::size_t line, const std::string& msg)
      : InvalidArgument(source + (line > 0 ? ":" + std::to_string(line) : std::string()) + ": " + msg), line_(line) {}
  std::size_t line() const { return line_; }

 private:
  std::size_t line_;
};

struct ExperimentConfig {
  Experiment experiment = Experiment::Sweep;
  std::uint64_t seed = 0;
  std::string output_dir;
  json params;  ///< fully resolved: defaults merged with the file

  /// Canonical form hashed into the manifest. output_dir is left out so the
  /// same experiment hashes equally wherever it is written.
  json canonical() const { return {{"experiment", std::string(to_string(experiment))}, {"seed", seed}, {"params", params}}; }
};

inline std::uint64_t fnv1a64(std::string_view bytes) {
  std::uint64_t h = 14695981039346656037ULL;
  for (unsigned char c : bytes) {
    h ^= c;
    h *= 1099511628211ULL;
  }
  return h;
}

inline std::string hex64(std::uint64_t v) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(v));
  return buf;
}

inline std::string config_hash(const ExperimentConfig& c) { return hex64(fnv1a64(c.canonical().dump())); }

// ------------------------------------------------------------------ defaults

namespace detail {

inline json mixture_json(const std::vector<double>& weights, const std::vector<std::vector<double>>& means,
                         const std::vector<double>& variances) {
  return {{"weights", weights}, {"means", means}, {"variances", variances}};
}

inline GaussianMixture mixture_from_json(const json& j, const std::string& where) {
  const auto w = j.at("weights").get<std::vector<double>>();
  const auto m = j.at("means").get<std::vector<std::vector<double>>>();
  const auto v = j.at("variances").get<std::vector<double>>();
  kmc::detail::require(w.size() == m.size() && w.size() == v.size() && !w.empty(),
                       where + ": weights, means and variances must have the same nonzero length");
  std::vector<GaussianComponent> cs;
  for (std::size_t k = 0; k < m.size(); ++k)
    cs.emplace_back(Eigen::Map<const Vector>(m[k].data(), static_cast<Index>(m[k].size())), v[k]);
  return {Eigen::Map<const Vector>(w.data(), static_cast<Index>(w.size())), std::move(cs)};
}

inline json default_train_json() {
  TrainConfig t;
  t.cost = CostKind::SvdNuclear;
  t.steps = 3000;
  json j = train_config_to_json(t);
  j.erase("seed");
  return j;
}

}  // namespace detail

inline std::uint64_t default_seed(Experiment e) {
  switch (e) {
    case Experiment::FitMdn: return 3;
    case Experiment::IdentityMap: return 7;
    default: return 0;
  }
}

/// Default params per experiment. Every key a config may set appears here;
/// the defaults double as the schema for validation.
inline json default_params(Experiment e) {
  const json two_bumps = detail::mixture_json({0.5, 0.5}, {{-0.3}, {0.4}}, {0.01, 0.01});
  switch (e) {
    case Experiment::Sweep:
      return {{"p", two_bumps},
              {"q", nullptr},
              {"n", 200},
              {"bandwidth", 0.01},
              {"shift_lo", -1.0},
              {"shift_hi", 1.0},
              {"shift_step", 0.05},
              {"jitter_rel", RegularizationPolicy{}.jitter_rel},
              {"symmetry_tolerance", 0.02}};
    case Experiment::FitMdn:
      return {{"dataset",
               {{"kind", "gauss_mixture_10"},
                {"seed", 1},
                {"component_std", 0.05},
                {"mean_range", 1.0},
                {"min_separation", 0.3},
                {"moon_noise", 0.05}}},
              {"train", detail::default_train_json()},
              {"data_samples", 1000},
              {"coverage_threshold", nullptr},
              {"save_checkpoint", true}};
    case Experiment::IdentityMap:
      return {{"mixture", two_bumps},
              {"n", 200},
              {"bandwidths", {0.001, 0.01}},
              {"shifts", {0.0, 0.5, 1.0}},
              {"grid_points", 200}};
    case Experiment::SingularGrid:
      return {{"p", detail::mixture_json({1.0, 1.0, 1.0}, {{-0.5, -0.3}, {0.4, -0.2}, {0.0, 0.5}}, {0.02, 0.02, 0.02})},
              {"q", nullptr},
              {"shift", {0.0, 0.0}},
              {"n", 150},
              {"bandwidth", 0.01},
              {"grid", {{"x_lo", -1.0}, {"x_hi", 1.0}, {"y_lo", -1.0}, {"y_hi", 1.0}, {"nx", 60}, {"ny", 60}}},
              {"top_k", 4}};
    case Experiment::Classify: {
      const PatchNetConfig n;
      const ClassifierTrainConfig t;
      return {{"dataset", "mnist"},
              {"data_dir", "data/mnist"},
              {"train_limit", 10000},
              {"test_limit", 2000},
              {"patch_sizes", {1, 3, 5}},
              {"net",
               {{"layer_widths", {32, 32}},
                {"projection_dim", 8},
                {"final_anchors", 128},
                {"alpha", n.alpha},
                {"bn_epsilon", n.bn_epsilon},
                {"bn_momentum", n.bn_momentum}}},
              {"train",
               {{"epochs", 8},
                {"batch_size", t.batch_size},
                {"learning_rate", 3e-2},
                {"lr_decay", 0.75},
                {"beta1", t.beta1},
                {"beta2", t.beta2},
                {"adam_epsilon", t.adam_epsilon},
                {"anchors_from_data", t.anchors_from_data},
                {"bn_recompute_images", t.bn_recompute_images}}},
              {"eval_every_epoch", true},
              {"epoch_train_eval_images", 2000},
              {"save_checkpoint", false}};
    }
    case Experiment::CheckSuite: return {{"inject_zero_jitter", false}};
  }
  return json::object();
}

// --------------------------------------------------------------- validation

namespace detail {

inline std::size_t line_at(const std::string& text, std::size_t offset) {
  offset = std::min(offset, text.size());
  return 1 + static_cast<std::size_t>(std::count(text.begin(), text.begin() + static_cast<std::ptrdiff_t>(offset), '\n'));
}

/// Line of the last key on `path`, found by scanning for each quoted key
/// in turn. Returns 0 when the text does not contain the path.
inline std::size_t locate(const std::string& text, const std::vector<std::string>& path) {
  std::size_t pos = 0;
  for (const auto& key : path) {
    if (!key.empty() && key.front() == '[') continue;
    const auto hit = text.find("\"" + key + "\"", pos);
    if (hit == std::string::npos) return 0;
    pos = hit + 1;
  }
  return pos == 0 ? 0 : line_at(text, pos - 1);
}

inline std::string join(const std::vector<std::string>& path) {
  std::string s;
  for (const auto& p : path) s += (p.front() == '[' || s.empty()) ? p : "." + p;
  return s.empty() ? "<root>" : s;
}

inline const char* kind_name(const json& j) {
  if (j.is_boolean()) return "boolean";
  if (j.is_number_integer()) return "integer";
  if (j.is_number()) return "number";
  if (j.is_string()) return "string";
  if (j.is_array()) return "array";
  if (j.is_object()) return "object";
  return "null";
}

inline bool compatible(const json& value, const json& schema) {
  if (schema.is_null()) return true;
  if (schema.is_number_float()) return value.is_number();
  if (schema.is_number_integer()) return value.is_number_integer();
  if (schema.is_boolean()) return value.is_boolean();
  if (schema.is_string()) return value.is_string();
  if (schema.is_array()) return value.is_array();
  if (schema.is_object()) return value.is_object();
  return false;
}

/// Rejects keys the schema does not have and values of the wrong JSON type.
inline void check_schema(const json& value, const json& schema, std::vector<std::string>& path, const std::string& text,
                         const std::string& source) {
  if (!compatible(value, schema))
    throw ConfigError(source, locate(text, path),
                      "'" + join(path) + "' must be " + kind_name(schema) + ", got " + kind_name(value));
  if (schema.is_object()) {
    for (auto it = value.begin(); it != value.end(); ++it) {
      path.push_back(it.key());
      if (!schema.contains(it.key())) throw ConfigError(source, locate(text, path), "unknown key '" + join(path) + "'");
      check_schema(it.value(), schema.at(it.key()), path, text, source);
      path.pop_back();
    }
  } else if (schema.is_array() && !schema.empty()) {
    for (std::size_t i = 0; i < value.size(); ++i) {
      path.push_back("[" + std::to_string(i) + "]");
      check_schema(value[i], schema.front(), path, text, source);
      path.pop_back();
    }
  }
}

/// Object members of `over` replace those of `base`, recursively; arrays and
/// scalars are replaced whole.
inline json merge(json base, const json& over) {
  if (!base.is_object() || !over.is_object()) return over;
  for (auto it = over.begin(); it != over.end(); ++it)
    base[it.key()] = base.contains(it.key()) ? merge(base[it.key()], it.value()) : it.value();
  return base;
}

}  // namespace detail

inline std::string default_output_dir(Experiment e) { return "kmc_results/" + std::string(to_string(e)); }

inline ExperimentConfig default_config(Experiment e) {
  return {e, default_seed(e), default_output_dir(e), default_params(e)};
}

/// Parses a config for `expected`. Top-level keys: experiment (optional,
/// must match), seed, output_dir, params.
inline ExperimentConfig parse_config(const std::string& text, Experiment expected, const std::string& source = "config") {
  json j;
  try {
    j = json::parse(text);
  } catch (const json::parse_error& e) {
    throw ConfigError(source, detail::line_at(text, e.byte == 0 ? 0 : e.byte - 1), "malformed JSON: " + std::string(e.what()));
  }
  if (!j.is_object()) throw ConfigError(source, 1, "top level must be an object");
  ExperimentConfig c = default_config(expected);
  const json top_schema = {{"experiment", ""}, {"seed", 0}, {"output_dir", ""}, {"params", c.params}};
  std::vector<std::string> path;
  detail::check_schema(j, top_schema, path, text, source);
  if (j.contains("experiment")) {
    Experiment named;
    try {
      named = experiment_from_string(j.at("experiment").get<std::string>());
    } catch (const InvalidArgument& e) {
      throw ConfigError(source, detail::locate(text, {"experiment"}), e.what());
    }
    if (named != expected)
      throw ConfigError(source, detail::locate(text, {"experiment"}),
                        "config is for '" + std::string(to_string(named)) + "', not '" +
                            std::string(to_string(expected)) + "'");
  }
  if (j.contains("seed")) {
    if (j.at("seed").is_number_unsigned() == false)
      throw ConfigError(source, detail::locate(text, {"seed"}), "'seed' must be a nonnegative integer");
    c.seed = j.at("seed").get<std::uint64_t>();
  }
  if (j.contains("output_dir")) c.output_dir = j.at("output_dir").get<std::string>();
  if (j.contains("params")) c.params = detail::merge(c.params, j.at("params"));
  return c;
}

inline ExperimentConfig load_config(const std::string& path, Experiment expected) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ConfigError(path, 0, "cannot open config file");
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_config(ss.str(), expected, path);
}

// ------------------------------------------------------------------- output

inline std::string format_number(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

/// Comma-separated text with a header row; numbers use 17 significant
/// digits so values round-trip exactly.
class CsvWriter {
 public:
  CsvWriter(const std::filesystem::path& path, const std::vector<std::string>& header) : out_(path, std::ios::binary) {
    if (!out_) throw InvalidArgument("cannot write " + path.string());
    write_fields(header);
  }

  void row(const std::vector<double>& values) {
    std::vector<std::string> f;
    for (double v : values) f.push_back(format_number(v));
    write_fields(f);
  }

  void row_text(const std::vector<std::string>& fields) { write_fields(fields); }

 private:
  void write_fields(const std::vector<std::string>& fields) {
    for (std::size_t i = 0; i < fields.size(); ++i) {
      if (i) out_ << ',';
      const bool quote = fields[i].find_first_of(",\"\n") != std::string::npos;
      if (!quote) {
        out_ << fields[i];
        continue;
      }
      out_ << '"';
      for (char ch : fields[i]) out_ << (ch == '"' ? "\"\"" : std::string(1, ch));
      out_ << '"';
    }
    out_ << '\n';
  }

  std::ofstream out_;
};

inline void write_matrix_csv(const std::filesystem::path& path, const Matrix& m, const std::string& prefix = "c") {
  std::vector<std::string> header;
  for (Index j = 0; j < m.cols(); ++j) header.push_back(prefix + std::to_string(j));
  CsvWriter w(path, header);
  std::vector<double> row(static_cast<std::size_t>(m.cols()));
  for (Index i = 0; i < m.rows(); ++i) {
    for (Index j = 0; j < m.cols(); ++j) row[static_cast<std::size_t>(j)] = m(i, j);
    w.row(row);
  }
}

struct OutputFile {
  std::string path;  ///< relative to the output directory
  std::string role;  ///< trace, grid, samples, metrics, model, report, table
};

struct NamedCheck {
  std::string name;
  bool passed = false;
  std::string detail;
};

struct RunResult {
  std::vector<OutputFile> files;
  json metrics = json::object();
  std::vector<NamedCheck> checks;
  std::string error;  ///< set when the run aborted

  bool ok() const {
    if (!error.empty()) return false;
    for (const auto& c : checks)
      if (!c.passed) return false;
    return true;
  }
};

namespace detail {

inline std::string utc_now() {
  const std::time_t t = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  gmtime_r(&t, &tm);
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

inline std::string file_hash(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return hex64(fnv1a64(ss.str()));
}

inline void add_check(RunResult& r, std::string name, bool passed, std::string detail = {}) {
  r.checks.push_back({std::move(name), passed, std::move(detail)});
}

/// Writes the metrics object as name,value rows in key order.
inline void write_metrics(const std::filesystem::path& dir, RunResult& r) {
  CsvWriter w(dir / "metrics.csv", {"name", "value"});
  for (auto it = r.metrics.begin(); it != r.metrics.end(); ++it) {
    if (it.value().is_number()) w.row_text({it.key(), format_number(it.value().get<double>())});
    else if (it.value().is_boolean()) w.row_text({it.key(), it.value().get<bool>() ? "1" : "0"});
  }
  r.files.push_back({"metrics.csv", "metrics"});
}

inline Vector shift_grid(double lo, double hi, double step) {
  kmc::detail::require(step > 0.0 && hi >= lo, "sweep: shift grid needs step > 0 and shift_hi >= shift_lo");
  const double a = lo / step;
  const double b = hi / step;
  kmc::detail::require(std::abs(a - std::round(a)) < 1e-9 && std::abs(b - std::round(b)) < 1e-9,
                       "sweep: shift_lo and shift_hi must be multiples of shift_step");
  const auto first = static_cast<long long>(std::llround(a));
  const auto last = static_cast<long long>(std::llround(b));
  Vector s(last - first + 1);
  for (long long i = first; i <= last; ++i) s[i - first] = static_cast<double>(i) * step;
  return s;
}

}  // namespace detail

// ------------------------------------------------------------------ runners

/// Fig. 2 style sweep: the model batch is the data batch (or an independent
/// draw from q when given) shifted by each grid value.
inline RunResult run_sweep(const ExperimentConfig& cfg, const std::filesystem::path& dir) {
  const json& p = cfg.params;
  const GaussianMixture mp = detail::mixture_from_json(p.at("p"), "params.p");
  kmc::detail::require(mp.dim() == 1, "sweep: mixtures must be one-dimensional");
  const Index n = p.at("n").get<Index>();
  kmc::detail::require(n >= 2, "sweep: n must be >= 2");
  const double v = p.at("bandwidth").get<double>();
  RegularizationPolicy reg;
  reg.jitter_rel = p.at("jitter_rel").get<double>();
  const Vector shifts = detail::shift_grid(p.at("shift_lo").get<double>(), p.at("shift_hi").get<double>(),
                                           p.at("shift_step").get<double>());

  std::mt19937_64 rng(cfg.seed);
  const Matrix x = sample_mixture(mp, n, rng);
  const bool same = p.at("q").is_null();
  const Matrix y = same ? x : sample_mixture(detail::mixture_from_json(p.at("q"), "params.q"), n, rng);
  kmc::detail::require(y.cols() == 1, "sweep: mixtures must be one-dimensional");
  const SampleBatch data(x, v);

  const std::vector<std::string> names{"scalar", "vector_matrix", "matrix_matrix", "svd"};
  Matrix values(shifts.size(), 4);
  for (Index i = 0; i < shifts.size(); ++i) {
    const SampleBatch model(Matrix(y.array() + shifts[i]), v);
    values(i, 0) = scalar_cost(data, model).value;
    values(i, 1) = vector_matrix_cost(data, model, reg).value;
    values(i, 2) = matrix_matrix_cost(data, model, reg, MatrixCostVariant::TraceNoRg).value;
    values(i, 3) = svd_cost(data, model, reg).value;
  }
  Matrix normalized = values;
  for (Index k = 0; k < 4; ++k) normalized.col(k) /= values.col(k).maxCoeff();

  RunResult r;
  std::vector<std::string> header{"shift"};
  for (const auto& s : names) header.push_back(s);
  for (const auto& s : names) header.push_back(s + "_normalized");
  {
    CsvWriter w(dir / "sweep.csv", header);
    for (Index i = 0; i < shifts.size(); ++i) {
      std::vector<double> row{shifts[i]};
      for (Index k = 0; k < 4; ++k) row.push_back(values(i, k));
      for (Index k = 0; k < 4; ++k) row.push_back(normalized(i, k));
      w.row(row);
    }
  }
  r.files.push_back({"sweep.csv", "table"});

  Index zero = -1;
  for (Index i = 0; i < shifts.size(); ++i)
    if (shifts[i] == 0.0) zero = i;
  for (Index k = 0; k < 4; ++k) {
    Index arg = 0;
    const double peak = normalized.col(k).maxCoeff(&arg);
    const auto& name = names[static_cast<std::size_t>(k)];
    r.metrics[name + "_argmax_shift"] = shifts[arg];
    detail::add_check(r, name + "_peak_is_one", peak == 1.0, "peak=" + format_number(peak));
    if (zero >= 0) detail::add_check(r, name + "_argmax_at_zero", arg == zero, "argmax_shift=" + format_number(shifts[arg]));
  }
  // Largest |c(s) - c(-s)| relative to the peak, over mirrored grid pairs.
  auto asymmetry = [&](Index k) {
    double worst = 0.0;
    for (Index i = 0; i < shifts.size(); ++i)
      for (Index j = 0; j < shifts.size(); ++j)
        if (std::abs(shifts[i] + shifts[j]) < 1e-12)
          worst = std::max(worst, std::abs(normalized(i, k) - normalized(j, k)));
    return worst;
  };
  for (Index k = 0; k < 4; ++k) r.metrics[names[static_cast<std::size_t>(k)] + "_asymmetry"] = asymmetry(k);
  if (same) {
    const double tol = p.at("symmetry_tolerance").get<double>();
    detail::add_check(r, "svd_symmetric", asymmetry(3) <= tol, "asymmetry=" + format_number(asymmetry(3)));
  }
  return r;
}

inline RunResult run_fit_mdn(const ExperimentConfig& cfg, const std::filesystem::path& dir) {
  const json& p = cfg.params;
  const json& d = p.at("dataset");
  ToyDatasetSpec spec;
  spec.kind = toy_dataset_kind_from_string(d.at("kind").get<std::string>());
  kmc::detail::require(spec.kind != ToyDatasetKind::CustomMixture,
                       "fit_mdn: custom_mixture datasets are not configurable from the CLI");
  spec.seed = d.at("seed").get<std::uint64_t>();
  spec.component_std = d.at("component_std").get<double>();
  spec.mean_range = d.at("mean_range").get<double>();
  spec.min_separation = d.at("min_separation").get<double>();
  spec.moon_noise = d.at("moon_noise").get<double>();
  TrainConfig tc = train_config_from_json(p.at("train"));
  tc.seed = cfg.seed;
  const Index n_data = p.at("data_samples").get<Index>();
  kmc::detail::require(n_data >= 1, "fit_mdn: data_samples must be >= 1");

  RunResult r;
  FitResult fit_result;
  try {
    fit_result = fit(spec, tc);
  } catch (const TrainingDiverged& e) {
    CsvWriter w(dir / "trace.csv", {"step", "cost"});
    for (std::size_t i = 0; i < e.partial_trace.size(); ++i) w.row({static_cast<double>(i), e.partial_trace[i]});
    r.files.push_back({"trace.csv", "trace"});
    r.error = std::string("training diverged: ") + e.what();
    return r;
  }
  {
    CsvWriter w(dir / "trace.csv", {"step", "cost"});
    for (std::size_t i = 0; i < fit_result.cost_trace.size(); ++i)
      w.row({static_cast<double>(i), fit_result.cost_trace[i]});
  }
  r.files.push_back({"trace.csv", "trace"});
  write_matrix_csv(dir / "samples.csv", fit_result.final_centers, "x");
  r.files.push_back({"samples.csv", "samples"});
  ToyDataset fresh(spec);
  write_matrix_csv(dir / "data.csv", fresh.sample(n_data), "x");
  r.files.push_back({"data.csv", "samples"});
  if (fresh.has_components()) {
    write_matrix_csv(dir / "component_means.csv", fresh.component_means(), "x");
    r.files.push_back({"component_means.csv", "samples"});
  }
  if (p.at("save_checkpoint").get<bool>()) {
    std::ofstream out(dir / "model.json", std::ios::binary);
    out << checkpoint_to_json(fit_result.final_model, tc).dump() << '\n';
    r.files.push_back({"model.json", "model"});
  }
  r.metrics["final_cost"] = fit_result.cost_trace.back();
  r.metrics["initial_cost"] = fit_result.cost_trace.front();
  r.metrics["steps"] = static_cast<double>(tc.steps);
  if (!std::isnan(fit_result.mode_coverage)) {
    r.metrics["mode_coverage"] = fit_result.mode_coverage;
    const json& t = p.at("coverage_threshold");
    const double threshold = t.is_null() ? (tc.cost == CostKind::SvdNuclear ? 0.9 : 0.8) : t.get<double>();
    r.metrics["coverage_threshold"] = threshold;
    detail::add_check(r, "mode_coverage", fit_result.mode_coverage >= threshold,
                      "coverage=" + format_number(fit_result.mode_coverage));
  }
  return r;
}

inline RunResult run_identity_map(const ExperimentConfig& cfg, const std::filesystem::path& dir) {
  const json& p = cfg.params;
  const GaussianMixture mix = detail::mixture_from_json(p.at("mixture"), "params.mixture");
  kmc::detail::require(mix.dim() == 1, "identity_map: the mixture must be one-dimensional");
  const Index n = p.at("n").get<Index>();
  kmc::detail::require(n >= 2, "identity_map: n must be >= 2");
  const auto bandwidths = p.at("bandwidths").get<std::vector<double>>();
  const auto shifts = p.at("shifts").get<std::vector<double>>();
  kmc::detail::require(!bandwidths.empty() && !shifts.empty(), "identity_map: bandwidths and shifts must be nonempty");
  const Index points = p.at("grid_points").get<Index>();

  std::mt19937_64 rng(cfg.seed);
  const Matrix x = sample_mixture(mix, n, rng);

  RunResult r;
  CsvWriter table(dir / "ratios.csv", {"bandwidth", "shift", "diagonal_mass_ratio", "row_argmax_on_diagonal"});
  r.files.push_back({"ratios.csv", "metrics"});
  Matrix ratio(static_cast<Index>(bandwidths.size()), static_cast<Index>(shifts.size()));
  for (std::size_t b = 0; b < bandwidths.size(); ++b) {
    const SampleBatch data(x, bandwidths[b]);
    const Vector grid = default_identity_grid(data, points);
    if (b == 0) {
      write_matrix_csv(dir / "grid.csv", Matrix(grid), "x");
      r.files.push_back({"grid.csv", "grid"});
    }
    for (std::size_t s = 0; s < shifts.size(); ++s) {
      const SampleBatch model(Matrix(x.array() + shifts[s]), bandwidths[b]);
      const IdentityMap map = identity_approximation(data, model, default_identity_grid(data, points));
      const std::string name = "identity_v" + std::to_string(b) + "_s" + std::to_string(s) + ".csv";
      write_matrix_csv(dir / name, map.matrix, "x");
      r.files.push_back({name, "grid"});
      ratio(static_cast<Index>(b), static_cast<Index>(s)) = map.diagonal_mass_ratio;
      table.row({bandwidths[b], shifts[s], map.diagonal_mass_ratio, row_argmax_on_diagonal(map)});
    }
  }
  // Ratios should fall as |shift| grows and as the bandwidth grows.
  for (std::size_t b = 0; b < bandwidths.size(); ++b)
    for (std::size_t s = 0; s + 1 < shifts.size(); ++s)
      if (std::abs(shifts[s]) < std::abs(shifts[s + 1]))
        detail::add_check(r, "ratio_falls_with_shift_v" + std::to_string(b) + "_s" + std::to_string(s),
                          ratio(static_cast<Index>(b), static_cast<Index>(s)) >
                              ratio(static_cast<Index>(b), static_cast<Index>(s + 1)));
  for (std::size_t s = 0; s < shifts.size(); ++s)
    if (shifts[s] == 0.0)
      for (std::size_t b = 0; b + 1 < bandwidths.size(); ++b)
        if (bandwidths[b] < bandwidths[b + 1])
          detail::add_check(r, "ratio_falls_with_bandwidth_v" + std::to_string(b),
                            ratio(static_cast<Index>(b), static_cast<Index>(s)) >
                                ratio(static_cast<Index>(b + 1), static_cast<Index>(s)));
  return r;
}

inline RunResult run_singular_grid(const ExperimentConfig& cfg, const std::filesystem::path& dir) {
  const json& p = cfg.params;
  const GaussianMixture mp = detail::mixture_from_json(p.at("p"), "params.p");
  kmc::detail::require(mp.dim() == 2, "singular_grid: mixtures must be two-dimensional");
  const Index n = p.at("n").get<Index>();
  const double v = p.at("bandwidth").get<double>();
  const auto shift = p.at("shift").get<std::vector<double>>();
  kmc::detail::require(shift.size() == 2, "singular_grid: shift must have two entries");
  const json& g = p.at("grid");
  Grid2d grid;
  grid.x_lo = g.at("x_lo").get<double>();
  grid.x_hi = g.at("x_hi").get<double>();
  grid.y_lo = g.at("y_lo").get<double>();
  grid.y_hi = g.at("y_hi").get<double>();
  grid.nx = g.at("nx").get<Index>();
  grid.ny = g.at("ny").get<Index>();
  const Index top_k = p.at("top_k").get<Index>();

  std::mt19937_64 rng(cfg.seed);
  const Matrix x = sample_mixture(mp, n, rng);
  Matrix y = p.at("q").is_null() ? x : sample_mixture(detail::mixture_from_json(p.at("q"), "params.q"), n, rng);
  kmc::detail::require(y.cols() == 2, "singular_grid: mixtures must be two-dimensional");
  y.col(0).array() += shift[0];
  y.col(1).array() += shift[1];
  const SingularFunctionGrids out = singular_function_grid(SampleBatch(x, v), SampleBatch(y, v), grid, top_k);

  RunResult r;
  write_matrix_csv(dir / "singular_values.csv", Matrix(out.singular_values), "s");
  r.files.push_back({"singular_values.csv", "metrics"});
  bool identical = true;
  for (Index k = 0; k < top_k; ++k) {
    const std::string l = "left_" + std::to_string(k) + ".csv";
    const std::string rt = "right_" + std::to_string(k) + ".csv";
    write_matrix_csv(dir / l, out.left[static_cast<std::size_t>(k)], "x");
    write_matrix_csv(dir / rt, out.right[static_cast<std::size_t>(k)], "x");
    r.files.push_back({l, "grid"});
    r.files.push_back({rt, "grid"});
    identical = identical && out.left[static_cast<std::size_t>(k)] == out.right[static_cast<std::size_t>(k)];
  }
  r.metrics["left_equals_right"] = identical;
  if (p.at("q").is_null() && shift[0] == 0.0 && shift[1] == 0.0)
    detail::add_check(r, "hermitian_left_equals_right", identical);
  return r;
}

namespace detail {

inline std::pair<ImageSet, ImageSet> load_images(const json& p) {
  const auto kind = p.at("dataset").get<std::string>();
  const std::filesystem::path root = p.at("data_dir").get<std::string>();
  const Index train_limit = p.at("train_limit").get<Index>();
  const Index test_limit = p.at("test_limit").get<Index>();
  auto need = [](const std::filesystem::path& f) {
    if (!std::filesystem::exists(f)) throw InvalidArgument("dataset file not found: " + f.string());
    return f.string();
  };
  if (kind == "mnist")
    return {read_idx(need(root / "train-images-idx3-ubyte"), need(root / "train-labels-idx1-ubyte"), train_limit),
            read_idx(need(root / "t10k-images-idx3-ubyte"), need(root / "t10k-labels-idx1-ubyte"), test_limit)};
  if (kind == "cifar") {
    ImageSet train;
    for (int b = 1; b <= 5 && (train.size() < train_limit); ++b) {
      ImageSet part = read_cifar_binary(need(root / ("data_batch_" + std::to_string(b) + ".bin")),
                                        train_limit - train.size());
      if (train.size() == 0) {
        train = std::move(part);
      } else {
        Matrix px(train.size() + part.size(), train.pixels.cols());
        px << train.pixels, part.pixels;
        train.pixels = std::move(px);
        train.labels.insert(train.labels.end(), part.labels.begin(), part.labels.end());
      }
    }
    return {train, read_cifar_binary(need(root / "test_batch.bin"), test_limit)};
  }
  throw InvalidArgument("classify: dataset must be 'mnist' or 'cifar', got '" + kind + "'");
}

}  // namespace detail

inline RunResult run_classify(const ExperimentConfig& cfg, const std::filesystem::path& dir) {
  const json& p = cfg.params;
  const auto patch_sizes = p.at("patch_sizes").get<std::vector<Index>>();
  kmc::detail::require(!patch_sizes.empty(), "classify: patch_sizes must be nonempty");
  const json& n = p.at("net");
  const json& t = p.at("train");
  PatchNetConfig net;
  net.layer_widths = n.at("layer_widths").get<std::vector<Index>>();
  net.projection_dim = n.at("projection_dim").get<Index>();
  net.final_anchors = n.at("final_anchors").get<Index>();
  net.alpha = n.at("alpha").get<double>();
  net.bn_epsilon = n.at("bn_epsilon").get<double>();
  net.bn_momentum = n.at("bn_momentum").get<double>();
  net.seed = cfg.seed;
  ClassifierTrainConfig tc;
  tc.epochs = t.at("epochs").get<Index>();
  tc.batch_size = t.at("batch_size").get<Index>();
  tc.learning_rate = t.at("learning_rate").get<double>();
  tc.lr_decay = t.at("lr_decay").get<double>();
  tc.beta1 = t.at("beta1").get<double>();
  tc.beta2 = t.at("beta2").get<double>();
  tc.adam_epsilon = t.at("adam_epsilon").get<double>();
  tc.anchors_from_data = t.at("anchors_from_data").get<bool>();
  tc.bn_recompute_images = t.at("bn_recompute_images").get<Index>();
  tc.shuffle_seed = cfg.seed;
  const bool per_epoch = p.at("eval_every_epoch").get<bool>();
  const Index epoch_train_images = p.at("epoch_train_eval_images").get<Index>();

  const auto [train, test] = detail::load_images(p);
  const ImageSet train_probe = train.subset(0, std::min(epoch_train_images, train.size()));

  RunResult r;
  CsvWriter epochs(dir / "epochs.csv", {"patch_size", "epoch", "loss", "train_subset_acc", "test_acc"});
  r.files.push_back({"epochs.csv", "trace"});
  CsvWriter finals(dir / "accuracy.csv", {"patch_size", "train_acc", "test_acc"});
  r.files.push_back({"accuracy.csv", "metrics"});
  std::vector<double> test_accs;
  for (Index ps : patch_sizes) {
    PatchNetConfig c = net;
    c.patch_size = ps;
    auto on_epoch = [&](Index e, double loss, const PatchNet& model) {
      double tr = std::numeric_limits<double>::quiet_NaN();
      double te = tr;
      if (per_epoch) {
        PatchNet probe = model;
        if (tc.bn_recompute_images > 0) recompute_bn_statistics(probe, train, tc.batch_size, tc.bn_recompute_images);
        tr = accuracy(probe, train_probe);
        te = accuracy(probe, test);
      }
      epochs.row({static_cast<double>(ps), static_cast<double>(e), loss, tr, te});
    };
    ClassifierResult res = train_classifier(train, test, c, tc, on_epoch);
    finals.row({static_cast<double>(ps), res.train_acc, res.test_acc});
    r.metrics["train_acc_p" + std::to_string(ps)] = res.train_acc;
    r.metrics["test_acc_p" + std::to_string(ps)] = res.test_acc;
    test_accs.push_back(res.test_acc);
    if (p.at("save_checkpoint").get<bool>()) {
      const std::string name = "model_p" + std::to_string(ps) + ".json";
      std::ofstream out(dir / name, std::ios::binary);
      out << classifier_checkpoint_to_json(res.model).dump() << '\n';
      r.files.push_back({name, "model"});
    }
  }
  if (patch_sizes.size() > 1) {
    bool ordered = true;
    for (std::size_t i = 0; i + 1 < test_accs.size(); ++i)
      ordered = ordered && (patch_sizes[i] >= patch_sizes[i + 1] || test_accs[i] <= test_accs[i + 1]);
    detail::add_check(r, "test_acc_non_decreasing_in_patch_size", ordered);
  }
  return r;
}

inline RunResult run_check_suite_experiment(const ExperimentConfig& cfg, const std::filesystem::path& dir) {
  CheckSuiteOptions opt;
  opt.seed = cfg.seed;
  opt.inject_zero_jitter = cfg.params.at("inject_zero_jitter").get<bool>();
  RunResult r;
  CsvWriter w(dir / "report.csv", {"check", "status", "detail"});
  for (const auto& c : run_check_suite(opt)) {
    w.row_text({c.name, c.passed ? "PASS" : "FAIL", c.detail});
    detail::add_check(r, c.name, c.passed, c.detail);
  }
  r.files.push_back({"report.csv", "report"});
  return r;
}

// ----------------------------------------------------------------- manifest

inline json manifest_json(const ExperimentConfig& cfg, const RunResult& r, const std::filesystem::path& dir,
                          const std::string& started, const std::string& finished) {
  json files = json::array();
  for (const auto& f : r.files)
    files.push_back({{"path", f.path}, {"role", f.role}, {"fnv1a64", detail::file_hash(dir / f.path)}});
  json checks = json::array();
  for (const auto& c : r.checks) checks.push_back({{"name", c.name}, {"passed", c.passed}, {"detail", c.detail}});
  json m = {{"experiment", std::string(to_string(cfg.experiment))},
            {"config_hash", config_hash(cfg)},
            {"config", cfg.canonical()},
            {"seed", cfg.seed},
            {"started_utc", started},
            {"finished_utc", finished},
            {"library_version", kLibraryVersion},
            {"status", !r.error.empty() ? "error" : (r.ok() ? "ok" : "check_failed")},
            {"files", files},
            {"checks", checks},
            {"metrics", r.metrics}};
  if (!r.error.empty()) m["error"] = r.error;
  return m;
}

/// Problems found in dir/manifest.json: missing files, hash mismatches, or
/// a config hash that differs from the re-serialized config. Empty when the
/// manifest validates.
inline std::vector<std::string> validate_manifest(const std::filesystem::path& dir) {
  std::vector<std::string> problems;
  std::ifstream in(dir / "manifest.json");
  if (!in) return {"manifest.json missing"};
  json m;
  try {
    m = json::parse(in);
  } catch (const json::exception& e) {
    return {std::string("manifest.json unreadable: ") + e.what()};
  }
  if (hex64(fnv1a64(m.at("config").dump())) != m.at("config_hash").get<std::string>())
    problems.push_back("config_hash does not match the stored config");
  for (const auto& f : m.at("files")) {
    const auto p = dir / f.at("path").get<std::string>();
    if (!std::filesystem::exists(p)) problems.push_back("missing file " + p.string());
    else if (detail::file_hash(p) != f.at("fnv1a64").get<std::string>())
      problems.push_back("hash mismatch for " + p.string());
  }
  return problems;
}

/// Runs one experiment into cfg.output_dir and writes the manifest. Returns
/// kExitOk, or kExitCheckFailed when a built-in check fails or the run
/// aborts with a numerical error. Invalid parameters raise InvalidArgument.
inline int run_experiment(const ExperimentConfig& cfg, RunResult* result = nullptr) {
  const std::filesystem::path dir = cfg.output_dir;
  kmc::detail::require(!dir.empty(), "output_dir must not be empty");
  std::filesystem::create_directories(dir);
  const std::string started = detail::utc_now();
  RunResult r;
  try {
    switch (cfg.experiment) {
      case Experiment::Sweep: r = run_sweep(cfg, dir); break;
      case Experiment::FitMdn: r = run_fit_mdn(cfg, dir); break;
      case Experiment::IdentityMap: r = run_identity_map(cfg, dir); break;
      case Experiment::SingularGrid: r = run_singular_grid(cfg, dir); break;
      case Experiment::Classify: r = run_classify(cfg, dir); break;
      case Experiment::CheckSuite: r = run_check_suite_experiment(cfg, dir); break;
    }
  } catch (const NumericalError& e) {
    r.error = e.what();
  } catch (const json::exception& e) {
    throw InvalidArgument(std::string("bad params: ") + e.what());
  }
  if (r.error.empty() || !r.metrics.empty()) detail::write_metrics(dir, r);
  std::ofstream(dir / "manifest.json", std::ios::binary)
      << manifest_json(cfg, r, dir, started, detail::utc_now()).dump(2) << '\n';
  const bool ok = r.ok();
  if (result) *result = std::move(r);
  return ok ? kExitOk : kExitCheckFailed;
}

}  // namespace kmc::cli
