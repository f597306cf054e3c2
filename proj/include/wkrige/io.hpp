#pragma once

// JSON interchange: datasets, fitted models, prediction targets and
// prediction files, plus tab-separated plot tables.

#include <Eigen/Dense>
#include <json.hpp>

#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "wkrige/error.hpp"
#include "wkrige/kriging.hpp"
#include "wkrige/measures.hpp"
#include "wkrige/variogram.hpp"

namespace wkrige::io {

using json = nlohmann::json;

/// Locations paired with quantile curves on one grid.
struct Dataset {
  std::size_t dim = 0;
  QuantileGrid grid;
  std::vector<Eigen::VectorXd> locations;
  std::vector<QuantileCurve> curves;

  [[nodiscard]] std::size_t size() const noexcept { return curves.size(); }

  [[nodiscard]] Eigen::MatrixXd location_matrix() const {
    Eigen::MatrixXd m(static_cast<Eigen::Index>(locations.size()), static_cast<Eigen::Index>(dim));
    for (std::size_t i = 0; i < locations.size(); ++i) m.row(static_cast<Eigen::Index>(i)) = locations[i].transpose();
    return m;
  }

  /// Records at `indices`, in that order.
  [[nodiscard]] Dataset subset(const std::vector<std::size_t>& indices) const {
    Dataset out{dim, grid, {}, {}};
    for (std::size_t i : indices) {
      out.locations.push_back(locations.at(i));
      out.curves.push_back(curves.at(i));
    }
    return out;
  }
};

namespace detail {

inline std::optional<std::size_t> positive_integer(const json& doc, const char* key) {
  if (!doc.contains(key) || !doc[key].is_number_integer()) return std::nullopt;
  const auto v = doc[key].get<std::int64_t>();
  if (v <= 0) return std::nullopt;
  return static_cast<std::size_t>(v);
}

/// Parses an array of finite numbers; returns nullopt with `problem` set otherwise.
inline std::optional<std::vector<double>> number_array(const json& node, std::string& problem) {
  if (!node.is_array()) {
    problem = "must be an array of numbers";
    return std::nullopt;
  }
  std::vector<double> out;
  out.reserve(node.size());
  for (const auto& v : node) {
    if (!v.is_number()) {
      problem = "must contain only numbers";
      return std::nullopt;
    }
    const double d = v.get<double>();
    if (!std::isfinite(d)) {
      problem = "must contain only finite numbers";
      return std::nullopt;
    }
    out.push_back(d);
  }
  return out;
}

inline Eigen::VectorXd to_vector(const std::vector<double>& v) {
  return Eigen::Map<const Eigen::VectorXd>(v.data(), static_cast<Eigen::Index>(v.size()));
}

inline json to_json_array(const Eigen::VectorXd& v) { return json(std::vector<double>(v.data(), v.data() + v.size())); }

}  // namespace detail

/// Validates a dataset document. Every offending record is reported in the
/// thrown ValidationError's details.
inline Dataset parse_dataset(const json& doc) {
  std::vector<std::string> problems;
  if (!doc.is_object()) throw ValidationError("invalid dataset", {"document must be a JSON object"});
  const auto dim = detail::positive_integer(doc, "dim");
  const auto grid_size = detail::positive_integer(doc, "grid_size");
  if (!dim) problems.emplace_back("dim must be a positive integer");
  if (!grid_size) problems.emplace_back("grid_size must be a positive integer");
  if (!doc.contains("observations") || !doc["observations"].is_array())
    problems.emplace_back("observations must be an array");
  if (!problems.empty()) throw ValidationError("invalid dataset", problems);

  Dataset out;
  out.dim = *dim;
  out.grid = QuantileGrid(*grid_size);
  const auto& records = doc["observations"];
  std::vector<std::size_t> record_index;
  for (std::size_t i = 0; i < records.size(); ++i) {
    const auto& rec = records[i];
    const std::string where = "observation " + std::to_string(i) + ": ";
    if (!rec.is_object()) {
      problems.push_back(where + "must be an object");
      continue;
    }
    std::string problem;
    std::optional<std::vector<double>> x;
    if (!rec.contains("x")) {
      problems.push_back(where + "missing x");
    } else if (x = detail::number_array(rec["x"], problem); !x) {
      problems.push_back(where + "x " + problem);
    } else if (x->size() != out.dim) {
      problems.push_back(where + "x has " + std::to_string(x->size()) + " coordinates, expected " + std::to_string(out.dim));
      x.reset();
    }

    const bool has_samples = rec.contains("samples");
    const bool has_quantiles = rec.contains("quantiles");
    std::optional<QuantileCurve> curve;
    if (has_samples == has_quantiles) {
      problems.push_back(where + "needs exactly one of samples or quantiles");
    } else if (has_quantiles) {
      auto q = detail::number_array(rec["quantiles"], problem);
      if (!q) {
        problems.push_back(where + "quantiles " + problem);
      } else if (q->size() != out.grid.size()) {
        problems.push_back(where + "quantiles has " + std::to_string(q->size()) + " values, expected grid_size " +
                           std::to_string(out.grid.size()));
      } else if (!std::is_sorted(q->begin(), q->end())) {
        problems.push_back(where + "quantiles must be non-decreasing");
      } else {
        curve.emplace(out.grid, detail::to_vector(*q));
      }
    } else {
      auto s = detail::number_array(rec["samples"], problem);
      if (!s) {
        problems.push_back(where + "samples " + problem);
      } else if (s->empty()) {
        problems.push_back(where + "empty sample set");
      } else {
        curve.emplace(empirical_quantile(*s, out.grid));
      }
    }
    if (x && curve) {
      out.locations.push_back(detail::to_vector(*x));
      out.curves.push_back(std::move(*curve));
      record_index.push_back(i);
    }
  }

  for (std::size_t i = 0; i < out.locations.size(); ++i)
    for (std::size_t j = i + 1; j < out.locations.size(); ++j)
      if (out.locations[i] == out.locations[j])
        problems.push_back("observations " + std::to_string(record_index[i]) + " and " + std::to_string(record_index[j]) +
                           ": duplicate locations");

  if (!problems.empty()) throw ValidationError("invalid dataset", problems);
  return out;
}

/// Canonical document: every record stored as quantiles.
inline json dataset_to_json(const Dataset& data) {
  json obs = json::array();
  for (std::size_t i = 0; i < data.size(); ++i)
    obs.push_back({{"x", detail::to_json_array(data.locations[i])}, {"quantiles", detail::to_json_array(data.curves[i].values())}});
  return {{"dim", data.dim}, {"grid_size", data.grid.size()}, {"observations", std::move(obs)}};
}

inline json read_json_file(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ValidationError("cannot open '" + path.string() + "'");
  try {
    return json::parse(in);
  } catch (const json::parse_error& e) {
    throw ValidationError("malformed JSON in '" + path.string() + "'", {e.what()});
  }
}

/// Writes through a temporary file and renames, so a failed write never
/// leaves a partial document at `path`.
inline void write_text_file(const std::filesystem::path& path, const std::string& text) {
  const auto tmp = std::filesystem::path(path.string() + ".tmp");
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw ValidationError("cannot write '" + path.string() + "'");
    out << text;
    if (!out) throw ValidationError("cannot write '" + path.string() + "'");
  }
  std::error_code ec;
  std::filesystem::rename(tmp, path, ec);
  if (ec) {
    std::filesystem::remove(tmp, ec);
    throw ValidationError("cannot write '" + path.string() + "'");
  }
}

inline void write_json_file(const std::filesystem::path& path, const json& doc) { write_text_file(path, doc.dump(2) + "\n"); }

inline Dataset load_dataset(const std::filesystem::path& path) { return parse_dataset(read_json_file(path)); }

/// FNV-1a 64 of the canonical serialisation, as 16 hex digits.
inline std::string fingerprint(const json& doc) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : doc.dump()) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  std::ostringstream os;
  os << std::hex << std::setw(16) << std::setfill('0') << h;
  return os.str();
}

// ---------------------------------------------------------------------------
// Model files

struct Model {
  std::string method;  // "cv" or "variogram-ls"
  Eigen::MatrixXd locations;
  std::optional<CoordinateScaling> scaling;
  std::vector<QuantileCurve> curves;
  MaternParams params;
  std::string dataset_fingerprint;
  json metadata = json::object();

  [[nodiscard]] SiteSet sites() const { return SiteSet(locations, scaling); }
  [[nodiscard]] QuantileGrid grid() const { return curves.front().grid(); }
  [[nodiscard]] std::size_t dim() const { return static_cast<std::size_t>(locations.cols()); }
  [[nodiscard]] QuantileKriging kriging() const { return {sites(), curves, params}; }
};

inline json model_to_json(const Model& model) {
  json sites = json::array();
  json quantiles = json::array();
  for (Eigen::Index i = 0; i < model.locations.rows(); ++i) {
    sites.push_back(detail::to_json_array(model.locations.row(i).transpose()));
    quantiles.push_back(detail::to_json_array(model.curves[static_cast<std::size_t>(i)].values()));
  }
  json scaling = nullptr;
  if (model.scaling)
    scaling = {{"offset", detail::to_json_array(model.scaling->offset)}, {"factor", detail::to_json_array(model.scaling->factor)}};
  return {
      {"format", "wkrige-model/1"},
      {"method", model.method},
      {"dim", model.dim()},
      {"grid_size", model.grid().size()},
      {"params",
       {{"sigma2", model.params.sigma2},
        {"length_scale", model.params.length_scale},
        {"nu", to_double(model.params.nu)},
        {"nugget", model.params.nugget}}},
      {"scaling", scaling},
      {"sites", std::move(sites)},
      {"quantiles", std::move(quantiles)},
      {"dataset_fingerprint", model.dataset_fingerprint},
      {"metadata", model.metadata},
  };
}

inline Model model_from_json(const json& doc) {
  try {
    if (doc.at("format") != "wkrige-model/1") throw ValidationError("unsupported model format");
    Model m;
    m.method = doc.at("method").get<std::string>();
    const auto dim = doc.at("dim").get<std::size_t>();
    const QuantileGrid grid(doc.at("grid_size").get<std::size_t>());
    const auto& p = doc.at("params");
    m.params = {p.at("sigma2").get<double>(), p.at("length_scale").get<double>(),
                smoothness_from_double(p.at("nu").get<double>()), p.value("nugget", 0.0)};
    m.params.validate();
    const auto& sites = doc.at("sites");
    const auto& quantiles = doc.at("quantiles");
    if (sites.size() != quantiles.size() || sites.empty()) throw ValidationError("model sites and quantiles differ in length");
    m.locations.resize(static_cast<Eigen::Index>(sites.size()), static_cast<Eigen::Index>(dim));
    for (std::size_t i = 0; i < sites.size(); ++i) {
      const auto x = sites[i].get<std::vector<double>>();
      if (x.size() != dim) throw ValidationError("model site has wrong dimension");
      m.locations.row(static_cast<Eigen::Index>(i)) = detail::to_vector(x).transpose();
      m.curves.emplace_back(grid, detail::to_vector(quantiles[i].get<std::vector<double>>()));
    }
    if (!doc.at("scaling").is_null()) {
      const auto& s = doc.at("scaling");
      m.scaling = CoordinateScaling{detail::to_vector(s.at("offset").get<std::vector<double>>()),
                                    detail::to_vector(s.at("factor").get<std::vector<double>>())};
    }
    m.dataset_fingerprint = doc.value("dataset_fingerprint", "");
    m.metadata = doc.value("metadata", json::object());
    return m;
  } catch (const json::exception& e) {
    throw ValidationError("invalid model file", {e.what()});
  }
}

inline Model load_model(const std::filesystem::path& path) { return model_from_json(read_json_file(path)); }

// ---------------------------------------------------------------------------
// Targets and predictions

/// Accepts {"targets": [[x...], ...]} or a dataset document (its x values).
inline std::vector<Eigen::VectorXd> parse_targets(const json& doc, std::size_t dim) {
  std::vector<std::string> problems;
  std::vector<Eigen::VectorXd> out;
  if (!doc.is_object()) throw ValidationError("invalid targets", {"document must be a JSON object"});
  json points = json::array();
  if (doc.contains("targets")) {
    points = doc["targets"];
  } else if (doc.contains("observations") && doc["observations"].is_array()) {
    for (const auto& rec : doc["observations"]) points.push_back(rec.is_object() && rec.contains("x") ? rec["x"] : json());
  } else {
    throw ValidationError("invalid targets", {"expected a 'targets' array or a dataset document"});
  }
  if (!points.is_array()) throw ValidationError("invalid targets", {"'targets' must be an array"});
  for (std::size_t i = 0; i < points.size(); ++i) {
    std::string problem;
    auto x = detail::number_array(points[i], problem);
    if (!x) {
      problems.push_back("target " + std::to_string(i) + ": " + problem);
    } else if (x->size() != dim) {
      problems.push_back("target " + std::to_string(i) + ": dimension " + std::to_string(x->size()) +
                         " does not match model dimension " + std::to_string(dim));
    } else {
      out.push_back(detail::to_vector(*x));
    }
  }
  if (!problems.empty()) throw ValidationError("invalid targets", problems);
  return out;
}

// ---------------------------------------------------------------------------
// Tab-separated tables

class Table {
 public:
  explicit Table(std::vector<std::string> columns) : columns_(std::move(columns)) {}

  void add_comment(const std::string& line) { comments_.push_back(line); }

  template <class... Ts>
  void add_row(const Ts&... cells) {
    std::vector<std::string> row;
    (row.push_back(format(cells)), ...);
    if (row.size() != columns_.size()) throw ValidationError("table row has wrong number of cells");
    rows_.push_back(std::move(row));
  }

  [[nodiscard]] std::string str() const {
    std::ostringstream os;
    for (const auto& c : comments_) os << "# " << c << '\n';
    write_row(os, columns_);
    for (const auto& r : rows_) write_row(os, r);
    return os.str();
  }

  [[nodiscard]] std::size_t rows() const noexcept { return rows_.size(); }

 private:
  static std::string format(const std::string& s) { return s; }
  static std::string format(const char* s) { return s; }
  static std::string format(double v) {
    std::ostringstream os;
    os << std::setprecision(17) << v;
    return os.str();
  }
  template <class T>
    requires std::is_integral_v<T>
  static std::string format(T v) {
    return std::to_string(v);
  }

  static void write_row(std::ostringstream& os, const std::vector<std::string>& row) {
    for (std::size_t k = 0; k < row.size(); ++k) os << (k ? "\t" : "") << row[k];
    os << '\n';
  }

  std::vector<std::string> columns_;
  std::vector<std::string> comments_;
  std::vector<std::vector<std::string>> rows_;
};

}  // namespace wkrige::io
