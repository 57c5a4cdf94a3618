#pragma once

// Flat line-oriented config text: [section] headers, key = value lines,
// '#' comments. Shared by the mollifier serializer and the scenario loader.

#include <cctype>
#include <sstream>
#include <string>
#include <vector>

#include "gensec/errors.hpp"

namespace gensec {

struct KVLine {
  std::string key, value;
  int line = -1;
};

struct TextSection {
  std::string name;  // full header text inside brackets, e.g. "dist f"
  int line = -1;
  std::vector<KVLine> kv;

  bool has(const std::string& k) const {
    for (const auto& e : kv)
      if (e.key == k) return true;
    return false;
  }
  const KVLine* find(const std::string& k) const {
    for (const auto& e : kv)
      if (e.key == k) return &e;
    return nullptr;
  }
  std::string get(const std::string& k) const {
    if (const KVLine* e = find(k)) return e->value;
    throw ConfigError("missing key '" + k + "' in section [" + name + "]", line, 1);
  }
  std::string get_or(const std::string& k, const std::string& def) const {
    if (const KVLine* e = find(k)) return e->value;
    return def;
  }
};

inline std::string trim_ws(const std::string& s) {
  size_t a = s.find_first_not_of(" \t\r");
  if (a == std::string::npos) return "";
  size_t b = s.find_last_not_of(" \t\r");
  return s.substr(a, b - a + 1);
}

inline std::vector<TextSection> parse_sections(const std::string& text) {
  std::vector<TextSection> out;
  std::istringstream is(text);
  std::string raw;
  int lineno = 0;
  while (std::getline(is, raw)) {
    ++lineno;
    std::string line = raw;
    size_t hash = line.find('#');
    if (hash != std::string::npos) line = line.substr(0, hash);
    line = trim_ws(line);
    if (line.empty()) continue;
    if (line.front() == '[') {
      if (line.back() != ']')
        throw ConfigError("unterminated section header", lineno,
                          int(raw.find('[')) + 1);
      TextSection s;
      s.name = trim_ws(line.substr(1, line.size() - 2));
      s.line = lineno;
      if (s.name.empty()) throw ConfigError("empty section name", lineno, 1);
      out.push_back(std::move(s));
      continue;
    }
    size_t eq = line.find('=');
    if (eq == std::string::npos)
      throw ConfigError("expected 'key = value'", lineno,
                        int(raw.find_first_not_of(" \t")) + 1);
    if (out.empty())
      throw ConfigError("key outside of any [section]", lineno, 1);
    KVLine e;
    e.key = trim_ws(line.substr(0, eq));
    e.value = trim_ws(line.substr(eq + 1));
    e.line = lineno;
    if (e.key.empty()) throw ConfigError("empty key", lineno, 1);
    out.back().kv.push_back(std::move(e));
  }
  return out;
}

inline double parse_double(const std::string& s, int line = -1) {
  try {
    size_t used = 0;
    double v = std::stod(s, &used);
    while (used < s.size() && std::isspace(static_cast<unsigned char>(s[used]))) ++used;
    if (used != s.size()) throw std::invalid_argument(s);
    return v;
  } catch (const std::exception&) {
    throw ConfigError("bad number '" + s + "'", line, 1);
  }
}

inline int parse_int(const std::string& s, int line = -1) {
  double v = parse_double(s, line);
  int i = int(v);
  if (double(i) != v) throw ConfigError("expected integer, got '" + s + "'", line, 1);
  return i;
}

inline std::vector<std::string> split_list(const std::string& s, char sep = ',') {
  std::vector<std::string> out;
  std::string cur;
  int depth = 0;
  for (char c : s) {
    if (c == '(') ++depth;
    if (c == ')') --depth;
    if (c == sep && depth == 0) {
      out.push_back(trim_ws(cur));
      cur.clear();
    } else {
      cur += c;
    }
  }
  if (!trim_ws(cur).empty() || !out.empty()) out.push_back(trim_ws(cur));
  return out;
}

}  // namespace gensec
