#pragma once

// Line/number helpers shared by the text format parsers.

#include <algorithm>
#include <charconv>
#include <cmath>
#include <string>
#include <string_view>
#include <vector>

#include "fdet/data.hpp"

namespace fdet::text {

inline std::string fmt_num(double v) {
  char buf[64];
  auto res = std::to_chars(buf, buf + sizeof(buf), v);
  return std::string(buf, res.ptr);
}

struct Line {
  std::size_t number;
  std::string_view text;
};

// Non-blank lines with surrounding whitespace trimmed, 1-based numbering.
inline std::vector<Line> split_lines(std::string_view text) {
  std::vector<Line> out;
  std::size_t pos = 0, lineno = 0;
  while (pos <= text.size()) {
    std::size_t end = text.find('\n', pos);
    if (end == std::string_view::npos) end = text.size();
    std::string_view line = text.substr(pos, end - pos);
    ++lineno;
    while (!line.empty() && (line.back() == '\r' || line.back() == ' ' || line.back() == '\t'))
      line.remove_suffix(1);
    while (!line.empty() && (line.front() == ' ' || line.front() == '\t')) line.remove_prefix(1);
    if (!line.empty()) out.push_back({lineno, line});
    if (end == text.size()) break;
    pos = end + 1;
  }
  return out;
}

inline std::size_t eof_line(std::string_view text) {
  return static_cast<std::size_t>(std::count(text.begin(), text.end(), '\n')) + 1;
}

inline std::vector<double> parse_numbers(std::string_view line, std::size_t lineno) {
  std::vector<double> out;
  std::size_t i = 0;
  while (i < line.size()) {
    while (i < line.size() && (line[i] == ' ' || line[i] == '\t')) ++i;
    if (i >= line.size()) break;
    std::size_t j = i;
    while (j < line.size() && line[j] != ' ' && line[j] != '\t') ++j;
    double v = 0;
    const auto res = std::from_chars(line.data() + i, line.data() + j, v);
    if (res.ec != std::errc() || res.ptr != line.data() + j)
      throw ParseError(lineno, "expected a number, got '" + std::string(line.substr(i, j - i)) + "'");
    out.push_back(v);
    i = j;
  }
  return out;
}

inline int parse_count(std::string_view line, std::size_t lineno) {
  const auto nums = parse_numbers(line, lineno);
  if (nums.size() != 1 || nums[0] < 0 || nums[0] != std::floor(nums[0]))
    throw ParseError(lineno, "expected a face count, got '" + std::string(line) + "'");
  return static_cast<int>(nums[0]);
}

}  // namespace fdet::text
