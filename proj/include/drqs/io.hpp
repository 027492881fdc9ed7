#pragma once

// Time indices and minimal CSV reading/writing.

#include "drqs/core.hpp"

#include <charconv>
#include <cstdio>
#include <fstream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

namespace drqs {

/// Quarterly times are stored as an integer quarter count (year * 4 + quarter - 1);
/// plain integer indices are stored as is.
struct TimeIndex {
  std::int64_t value = 0;
  bool quarterly = false;
};

inline std::optional<std::int64_t> parse_int(std::string_view s) {
  std::int64_t out = 0;
  const auto* end = s.data() + s.size();
  auto [ptr, ec] = std::from_chars(s.data(), end, out);
  if (ec != std::errc() || ptr != end || s.empty()) return std::nullopt;
  return out;
}

inline std::optional<double> parse_double(std::string_view s) {
  if (s.empty()) return std::nullopt;
  std::string tmp(s);
  char* end = nullptr;
  const double v = std::strtod(tmp.c_str(), &end);
  if (end != tmp.c_str() + tmp.size()) return std::nullopt;
  return v;
}

inline std::optional<TimeIndex> parse_time(std::string_view s) {
  const auto q = s.find_first_of("Qq");
  if (q != std::string_view::npos) {
    const auto year = parse_int(s.substr(0, q));
    const auto quarter = parse_int(s.substr(q + 1));
    if (!year || !quarter || *quarter < 1 || *quarter > 4) return std::nullopt;
    return TimeIndex{*year * 4 + (*quarter - 1), true};
  }
  if (auto i = parse_int(s)) return TimeIndex{*i, false};
  return std::nullopt;
}

inline std::string format_time(std::int64_t value, bool quarterly) {
  if (!quarterly) return std::to_string(value);
  const auto year = value >= 0 ? value / 4 : (value - 3) / 4;
  return std::to_string(year) + "Q" + std::to_string(value - year * 4 + 1);
}

// Shortest round-trip representation; identical inputs give identical text.
inline std::string format_double(double x) {
  char buf[64];
  auto [ptr, ec] = std::to_chars(buf, buf + sizeof(buf), x);
  return std::string(buf, ptr);
}

inline std::string trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t\r\n");
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(" \t\r\n");
  std::string out(s.substr(b, e - b + 1));
  if (out.size() >= 2 && out.front() == '"' && out.back() == '"') out = out.substr(1, out.size() - 2);
  return out;
}

inline std::vector<std::string> split_csv_line(std::string_view line) {
  std::vector<std::string> out;
  std::size_t start = 0;
  while (true) {
    const auto comma = line.find(',', start);
    out.push_back(trim(line.substr(start, comma == std::string_view::npos ? std::string_view::npos : comma - start)));
    if (comma == std::string_view::npos) break;
    start = comma + 1;
  }
  return out;
}

struct CsvTable {
  std::vector<std::string> header;
  std::vector<std::vector<std::string>> rows;
  std::vector<long> line_numbers;  // 1-based file line of each row

  std::optional<std::size_t> column(std::string_view name) const {
    for (std::size_t i = 0; i < header.size(); ++i)
      if (header[i] == name) return i;
    return std::nullopt;
  }
  std::size_t require_column(std::string_view name) const {
    if (auto c = column(name)) return *c;
    throw SchemaError("missing column '" + std::string(name) + "'", 1);
  }
};

inline CsvTable read_csv(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw SchemaError("cannot open " + path);
  CsvTable table;
  std::string line;
  long lineno = 0;
  bool have_header = false;
  while (std::getline(in, line)) {
    ++lineno;
    if (trim(line).empty()) continue;
    auto cells = split_csv_line(line);
    if (!have_header) {
      if (!cells.empty() && cells[0].size() >= 3 && static_cast<unsigned char>(cells[0][0]) == 0xEF) {
        cells[0] = cells[0].substr(3);  // UTF-8 BOM
      }
      table.header = std::move(cells);
      have_header = true;
      continue;
    }
    if (cells.size() != table.header.size()) {
      throw SchemaError("expected " + std::to_string(table.header.size()) + " cells, found " +
                            std::to_string(cells.size()),
                        lineno);
    }
    table.rows.push_back(std::move(cells));
    table.line_numbers.push_back(lineno);
  }
  if (!have_header) throw SchemaError("empty file " + path);
  return table;
}

class CsvWriter {
 public:
  CsvWriter(const std::string& path, const std::vector<std::string>& header) : out_(path) {
    if (!out_) throw std::runtime_error("cannot write " + path);
    row(header);
  }
  void row(const std::vector<std::string>& cells) {
    for (std::size_t i = 0; i < cells.size(); ++i) {
      if (i) out_ << ',';
      out_ << cells[i];
    }
    out_ << '\n';
  }

 private:
  std::ofstream out_;
};

}  // namespace drqs
