#pragma once

#include <filesystem>
#include <string>
#include <string_view>
#include <vector>

namespace hatdiag {

/// Shortest decimal form that parses back to the same double. Non-finite values
/// are spelled "nan", "inf" and "-inf".
std::string format_number(double v);

/// Quotes a field when it contains a comma, quote, CR or LF (quotes doubled).
std::string csv_field(std::string_view s);

/// RFC-4180 table: header row first, CRLF record terminators.
class CsvWriter {
 public:
  explicit CsvWriter(std::vector<std::string> header);

  void add_row(std::vector<std::string> fields);
  std::size_t rows() const noexcept { return rows_.size(); }
  std::string str() const;

 private:
  std::vector<std::string> header_;
  std::vector<std::vector<std::string>> rows_;
};

/// Lower-case hex SHA-256 digest.
std::string sha256_hex(std::string_view data);

std::string read_text_file(const std::filesystem::path& path);
/// Writes in binary mode, creating parent directories.
void write_text_file(const std::filesystem::path& path, std::string_view content);

}  // namespace hatdiag
