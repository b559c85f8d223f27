#pragma once

#include <Eigen/Core>
#include "json.hpp"

#include <filesystem>
#include <string>
#include <vector>

namespace abisim {

std::string sha256_hex(const void* data, std::size_t size);
std::string sha256_hex(const std::string& s);

/// SHA-256 of a file, or of every regular file below a directory (sorted by relative path,
/// hashing path and content hash of each).
std::string hash_path(const std::filesystem::path& path);

void write_text(const std::filesystem::path& path, const std::string& text);
std::string read_text(const std::filesystem::path& path);

void write_json(const std::filesystem::path& path, const nlohmann::json& j);
nlohmann::json read_json(const std::filesystem::path& path);

/// Minimal CSV writer: header row then numeric rows.
class CsvWriter {
public:
  explicit CsvWriter(std::vector<std::string> header);
  void add_row(const std::vector<double>& row);
  std::string str() const;
  void save(const std::filesystem::path& path) const;

private:
  std::vector<std::string> header_;
  std::vector<std::vector<double>> rows_;
};

/// Writes a matrix as CSV (no header); NaN entries are written as empty fields.
void write_matrix_csv(const std::filesystem::path& path, const Eigen::MatrixXd& m);

/// Renders a nonnegative matrix as an 8-bit grayscale heat map PNG, each entry scaled to
/// `scale` x `scale` pixels. NaN entries are drawn as a checker mark.
void write_heatmap_png(const std::filesystem::path& path, const Eigen::MatrixXd& m, int scale = 16);

}  // namespace abisim
