#pragma once

#include <iosfwd>
#include <string>
#include <string_view>
#include <vector>

namespace cdua::csv {

// Minimal comma-separated reader/writer. Fields never contain quotes or
// commas in the formats this project uses, so no quoting is handled.

std::vector<std::string> split_line(std::string_view line);

struct Table {
  std::vector<std::string> header;
  std::vector<std::vector<std::string>> rows;

  /// Column index by name, or -1.
  int column(std::string_view name) const;
};

/// Reads a whole file. Throws ErrorKind::io when it cannot be opened.
Table read_file(const std::string& path);

bool parse_double(std::string_view field, double& out);
bool parse_int64(std::string_view field, long long& out);

/// Shortest round-trip representation of a double.
std::string format_double(double value);

void write_row(std::ostream& os, const std::vector<std::string>& fields);

}  // namespace cdua::csv
