#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include "abisim/io.hpp"

namespace abisim {

/// Column-named numeric table, written as CSV.
struct MetricLog {
  std::vector<std::string> columns;
  std::vector<std::vector<double>> rows;

  MetricLog() = default;
  explicit MetricLog(std::vector<std::string> cols) : columns(std::move(cols)) {}

  void add(std::vector<double> row) { rows.push_back(std::move(row)); }
  bool empty() const { return rows.empty(); }
  std::size_t column(const std::string& name) const {
    for (std::size_t i = 0; i < columns.size(); ++i) {
      if (columns[i] == name) return i;
    }
    throw Error("no column '" + name + "'");
  }
  double last(const std::string& name) const { return rows.back()[column(name)]; }

  void save(const std::filesystem::path& path) const {
    CsvWriter w(columns);
    for (const auto& r : rows) w.add_row(r);
    w.save(path);
  }
};

/// Relative-loss divergence guard: trips once the loss stays above `factor` x the initial
/// loss for `window` consecutive updates.
class DivergenceGuard {
public:
  DivergenceGuard(double factor, int window) : factor_(factor), window_(window) {}

  /// Returns true when training should be declared diverged.
  bool update(double loss) {
    if (!have_initial_) {
      initial_ = loss;
      have_initial_ = true;
      return false;
    }
    run_ = loss > factor_ * initial_ ? run_ + 1 : 0;
    return run_ >= window_;
  }

private:
  double factor_;
  int window_;
  double initial_ = 0.0;
  bool have_initial_ = false;
  int run_ = 0;
};

}  // namespace abisim
