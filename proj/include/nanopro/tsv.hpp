#pragma once

#include <filesystem>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

namespace nanopro::tsv {

struct Row {
  std::size_t line = 0;  // 1-based line number in the source file
  std::vector<std::string> cells;
};

struct Table {
  std::vector<std::string> header;
  std::vector<Row> rows;

  // Column index by name, if present.
  std::optional<std::size_t> column(std::string_view name) const;
};

std::vector<std::string> split(std::string_view line, char sep = '\t');

// Reads a header plus data rows. Blank lines are skipped; a trailing '\r' is
// stripped. Throws Error(Io) when the file cannot be opened.
Table read(const std::filesystem::path& path);
Table parse(std::string_view text);

std::string join(const std::vector<std::string>& cells, char sep = '\t');

// Writes text atomically enough for our purposes: truncate and write.
void write_text(const std::filesystem::path& path, std::string_view text);
std::string read_text(const std::filesystem::path& path);

// Shortest decimal text that parses back to the same double.
std::string format_double(double value);
// Strict full-string parse; nullopt on any leftover characters.
std::optional<double> parse_double(std::string_view text);

std::string_view trim(std::string_view text);

}  // namespace nanopro::tsv
