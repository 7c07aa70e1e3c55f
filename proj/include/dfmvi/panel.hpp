#pragma once

#include <charconv>
#include <cmath>
#include <fstream>
#include <limits>
#include <sstream>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include <Eigen/Dense>
#include "json.hpp"

#include "dfmvi/errors.hpp"

namespace dfmvi {

using Mask = Eigen::Array<bool, Eigen::Dynamic, Eigen::Dynamic>;
using MaskRow = Eigen::Array<bool, 1, Eigen::Dynamic>;

/// Sentinel stored in missing cells. Only the mask drives computations.
inline constexpr double kMissing = std::numeric_limits<double>::quiet_NaN();

/// T x n panel of observations with a per-cell availability mask.
/// Rows are time steps t = 1..T, columns are variables.
class TimeSeriesPanel {
 public:
  TimeSeriesPanel() = default;

  /// Builds a panel; cells with mask == false get the missing sentinel.
  TimeSeriesPanel(Eigen::MatrixXd values, Mask mask, std::vector<std::string> names)
      : values_(std::move(values)), mask_(std::move(mask)), names_(std::move(names)) {
    if (values_.rows() < 1 || values_.cols() < 1)
      throw StructuralError("panel needs T >= 1 and n >= 1");
    if (mask_.rows() != values_.rows() || mask_.cols() != values_.cols())
      throw StructuralError("mask shape does not match values");
    if (names_.empty()) {
      for (Eigen::Index i = 0; i < values_.cols(); ++i) names_.push_back("y" + std::to_string(i + 1));
    }
    if (static_cast<Eigen::Index>(names_.size()) != values_.cols())
      throw StructuralError("number of names does not match number of columns");
    for (Eigen::Index t = 0; t < values_.rows(); ++t)
      for (Eigen::Index i = 0; i < values_.cols(); ++i) {
        if (!mask_(t, i)) {
          values_(t, i) = kMissing;
        } else if (!std::isfinite(values_(t, i))) {
          throw DomainError("available cell (" + std::to_string(t) + ", " + std::to_string(i) +
                            ") is not finite");
        }
      }
  }

  /// Panel from values where NaN marks a missing cell.
  static TimeSeriesPanel from_nan(const Eigen::MatrixXd& values, std::vector<std::string> names = {}) {
    Mask mask = values.array().isNaN() == false;
    return TimeSeriesPanel(values, mask, std::move(names));
  }

  Eigen::Index T() const { return values_.rows(); }
  Eigen::Index n() const { return values_.cols(); }
  const Eigen::MatrixXd& values() const { return values_; }
  const Mask& mask() const { return mask_; }
  const std::vector<std::string>& names() const { return names_; }
  bool available(Eigen::Index t, Eigen::Index i) const { return mask_(t, i); }
  double value(Eigen::Index t, Eigen::Index i) const { return values_(t, i); }

  /// Row t with missing cells replaced by zero.
  Eigen::VectorXd row_zero_filled(Eigen::Index t) const {
    Eigen::VectorXd y(n());
    for (Eigen::Index i = 0; i < n(); ++i) y(i) = mask_(t, i) ? values_(t, i) : 0.0;
    return y;
  }

  Eigen::Index column_index(const std::string& name) const {
    for (std::size_t i = 0; i < names_.size(); ++i)
      if (names_[i] == name) return static_cast<Eigen::Index>(i);
    throw DomainError("unknown variable name: " + name);
  }

 private:
  Eigen::MatrixXd values_;
  Mask mask_;
  std::vector<std::string> names_;
};

struct AvailabilitySummary {
  Eigen::VectorXi counts;                    // T_i per variable
  std::vector<std::vector<int>> available;   // per t, indices with a_{i,t} = 1
};

inline AvailabilitySummary availability_summary(const TimeSeriesPanel& panel) {
  AvailabilitySummary out;
  out.counts = Eigen::VectorXi::Zero(panel.n());
  out.available.resize(panel.T());
  for (Eigen::Index t = 0; t < panel.T(); ++t)
    for (Eigen::Index i = 0; i < panel.n(); ++i)
      if (panel.available(t, i)) {
        out.counts(i) += 1;
        out.available[t].push_back(static_cast<int>(i));
      }
  return out;
}

namespace detail {

inline std::string_view trim(std::string_view s) {
  while (!s.empty() && (s.front() == ' ' || s.front() == '\t')) s.remove_prefix(1);
  while (!s.empty() && (s.back() == ' ' || s.back() == '\t' || s.back() == '\r')) s.remove_suffix(1);
  return s;
}

inline std::vector<std::string_view> split_commas(std::string_view line) {
  std::vector<std::string_view> cells;
  std::size_t start = 0;
  while (true) {
    auto pos = line.find(',', start);
    if (pos == std::string_view::npos) {
      cells.push_back(trim(line.substr(start)));
      break;
    }
    cells.push_back(trim(line.substr(start, pos - start)));
    start = pos + 1;
  }
  return cells;
}

inline std::string format_double(double x) {
  char buf[64];
  auto res = std::to_chars(buf, buf + sizeof(buf), x);
  return std::string(buf, res.ptr);
}

}  // namespace detail

/// Reads a comma-separated panel with a header row of variable names.
/// Cells equal to missing_token (after trimming) are missing.
inline TimeSeriesPanel load_csv(const std::string& path, const std::string& missing_token = "") {
  std::ifstream in(path);
  if (!in) throw ParseError("cannot open panel file: " + path);
  std::string line;
  if (!std::getline(in, line)) throw StructuralError("panel file is empty: " + path);
  if (line.size() >= 3 && static_cast<unsigned char>(line[0]) == 0xEF) line.erase(0, 3);  // UTF-8 BOM
  std::vector<std::string> names;
  for (auto cell : detail::split_commas(line)) names.emplace_back(cell);
  const std::size_t n = names.size();

  std::vector<std::vector<double>> rows;
  std::vector<std::vector<bool>> avail;
  std::size_t row_no = 1;
  while (std::getline(in, line)) {
    ++row_no;
    // A blank line is a fully missing row only for a single empty-token column.
    if (detail::trim(line).empty() && !(n == 1 && missing_token.empty())) continue;
    auto cells = detail::split_commas(line);
    if (cells.size() != n)
      throw StructuralError("row " + std::to_string(row_no) + " has " + std::to_string(cells.size()) +
                            " fields, expected " + std::to_string(n));
    std::vector<double> vals(n);
    std::vector<bool> ok(n);
    for (std::size_t j = 0; j < n; ++j) {
      if (cells[j] == missing_token) {
        vals[j] = kMissing;
        ok[j] = false;
        continue;
      }
      double v = 0.0;
      auto first = cells[j].data();
      auto last = first + cells[j].size();
      if (first != last && *first == '+') ++first;
      auto res = std::from_chars(first, last, v);
      if (res.ec != std::errc() || res.ptr != last || !std::isfinite(v))
        throw ParseError("malformed numeric cell at row " + std::to_string(row_no) + ", column " +
                         std::to_string(j + 1) + " (" + names[j] + "): '" + std::string(cells[j]) + "'");
      vals[j] = v;
      ok[j] = true;
    }
    rows.push_back(std::move(vals));
    avail.push_back(std::move(ok));
  }
  if (rows.empty()) throw StructuralError("panel file has no data rows: " + path);
  Eigen::MatrixXd values(rows.size(), n);
  Mask mask(rows.size(), n);
  for (std::size_t t = 0; t < rows.size(); ++t)
    for (std::size_t j = 0; j < n; ++j) {
      values(t, j) = rows[t][j];
      mask(t, j) = avail[t][j];
    }
  return TimeSeriesPanel(std::move(values), std::move(mask), std::move(names));
}

/// Writes the panel in the format load_csv reads. Values use the shortest
/// round-trip representation, so write -> load is bit-exact.
inline void write_csv(const TimeSeriesPanel& panel, const std::string& path,
                      const std::string& missing_token = "") {
  std::ofstream out(path);
  if (!out) throw ParseError("cannot write panel file: " + path);
  for (Eigen::Index i = 0; i < panel.n(); ++i) out << (i ? "," : "") << panel.names()[i];
  out << '\n';
  for (Eigen::Index t = 0; t < panel.T(); ++t) {
    for (Eigen::Index i = 0; i < panel.n(); ++i) {
      if (i) out << ',';
      out << (panel.available(t, i) ? detail::format_double(panel.value(t, i)) : missing_token);
    }
    out << '\n';
  }
}

/// Per-column affine transform applied by standardize.
struct StandardizationRecord {
  std::vector<std::string> names;
  Eigen::VectorXd mean;
  Eigen::VectorXd stdev;
  std::vector<bool> passthrough;  // T_i <= 1: identity scaling, flagged

  double to_original(Eigen::Index i, double z) const { return mean(i) + stdev(i) * z; }
};

inline void to_json(nlohmann::json& j, const StandardizationRecord& rec) {
  j = nlohmann::json::object();
  j["names"] = rec.names;
  j["mean"] = std::vector<double>(rec.mean.data(), rec.mean.data() + rec.mean.size());
  j["stdev"] = std::vector<double>(rec.stdev.data(), rec.stdev.data() + rec.stdev.size());
  j["passthrough"] = rec.passthrough;
}

inline void from_json(const nlohmann::json& j, StandardizationRecord& rec) {
  rec.names = j.at("names").get<std::vector<std::string>>();
  auto mean = j.at("mean").get<std::vector<double>>();
  auto sd = j.at("stdev").get<std::vector<double>>();
  rec.mean = Eigen::Map<Eigen::VectorXd>(mean.data(), mean.size());
  rec.stdev = Eigen::Map<Eigen::VectorXd>(sd.data(), sd.size());
  rec.passthrough = j.at("passthrough").get<std::vector<bool>>();
}

/// Centers and scales each column over its available cells (sample stdev,
/// denominator T_i - 1). Columns with T_i <= 1 pass through unchanged with a warning.
inline std::pair<TimeSeriesPanel, StandardizationRecord> standardize(const TimeSeriesPanel& panel) {
  StandardizationRecord rec;
  rec.names = panel.names();
  rec.mean = Eigen::VectorXd::Zero(panel.n());
  rec.stdev = Eigen::VectorXd::Ones(panel.n());
  rec.passthrough.assign(panel.n(), false);
  Eigen::MatrixXd out = panel.values();
  for (Eigen::Index i = 0; i < panel.n(); ++i) {
    double sum = 0.0;
    Eigen::Index count = 0;
    for (Eigen::Index t = 0; t < panel.T(); ++t)
      if (panel.available(t, i)) {
        sum += panel.value(t, i);
        ++count;
      }
    if (count <= 1) {
      rec.passthrough[i] = true;
      warn("column '" + panel.names()[i] + "' has " + std::to_string(count) +
           " available cells; passed through unscaled");
      continue;
    }
    const double mean = sum / static_cast<double>(count);
    double ss = 0.0;
    for (Eigen::Index t = 0; t < panel.T(); ++t)
      if (panel.available(t, i)) ss += (panel.value(t, i) - mean) * (panel.value(t, i) - mean);
    const double sd = std::sqrt(ss / static_cast<double>(count - 1));
    if (!(sd > 0.0)) throw DomainError("column '" + panel.names()[i] + "' has zero variance");
    rec.mean(i) = mean;
    rec.stdev(i) = sd;
    for (Eigen::Index t = 0; t < panel.T(); ++t)
      if (panel.available(t, i)) out(t, i) = (panel.value(t, i) - mean) / sd;
  }
  return {TimeSeriesPanel(std::move(out), panel.mask(), panel.names()), std::move(rec)};
}

inline TimeSeriesPanel unstandardize(const TimeSeriesPanel& panel, const StandardizationRecord& rec) {
  if (rec.mean.size() != panel.n()) throw StructuralError("standardization record does not match panel");
  Eigen::MatrixXd out = panel.values();
  for (Eigen::Index t = 0; t < panel.T(); ++t)
    for (Eigen::Index i = 0; i < panel.n(); ++i)
      if (panel.available(t, i)) out(t, i) = rec.to_original(i, panel.value(t, i));
  return TimeSeriesPanel(std::move(out), panel.mask(), panel.names());
}

}  // namespace dfmvi
