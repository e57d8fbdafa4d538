#pragma once

// Reader/writer for the flat TOML subset used by experiment configs:
// [section] and [[array-of-tables]] headers, key = value lines, '#' comments,
// strings, integers, floats, booleans and single-line arrays of scalars.

#include <cctype>
#include <charconv>
#include <cstdint>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "diffkd/errors.hpp"

namespace diffkd::toml {

struct Value {
  enum class Type { boolean, integer, floating, string, array };
  Type type = Type::string;
  bool b = false;
  int64_t i = 0;
  double d = 0.0;
  std::string s;
  std::vector<Value> items;

  double as_number() const {
    if (type == Type::integer) return static_cast<double>(i);
    if (type == Type::floating) return d;
    throw ConfigError("expected a number");
  }
};

using Table = std::map<std::string, Value>;

struct Document {
  std::map<std::string, Table> tables;              // "" holds top-level keys
  std::map<std::string, std::vector<Table>> arrays;  // [[name]] entries in order
};

namespace detail {

inline std::string trim(const std::string& s) {
  size_t a = 0, b = s.size();
  while (a < b && std::isspace(static_cast<unsigned char>(s[a]))) ++a;
  while (b > a && std::isspace(static_cast<unsigned char>(s[b - 1]))) --b;
  return s.substr(a, b - a);
}

inline std::string strip_comment(const std::string& line) {
  bool in_string = false;
  for (size_t k = 0; k < line.size(); ++k) {
    if (line[k] == '"' && (k == 0 || line[k - 1] != '\\')) in_string = !in_string;
    if (line[k] == '#' && !in_string) return line.substr(0, k);
  }
  return line;
}

inline Value parse_scalar(const std::string& raw, int line_no) {
  const std::string text = trim(raw);
  auto fail = [&](const std::string& why) {
    return ConfigError("line " + std::to_string(line_no) + ": " + why + " '" + text + "'");
  };
  Value v;
  if (text.empty()) throw fail("missing value");
  if (text.front() == '"') {
    if (text.size() < 2 || text.back() != '"') throw fail("unterminated string");
    v.type = Value::Type::string;
    for (size_t k = 1; k + 1 < text.size(); ++k) {
      if (text[k] == '\\' && k + 2 < text.size()) {
        const char c = text[++k];
        v.s += c == 'n' ? '\n' : c == 't' ? '\t' : c;
      } else {
        v.s += text[k];
      }
    }
    return v;
  }
  if (text == "true" || text == "false") {
    v.type = Value::Type::boolean;
    v.b = text == "true";
    return v;
  }
  const bool looks_float = text.find_first_of(".eE") != std::string::npos &&
                           text.find("inf") == std::string::npos;
  if (!looks_float) {
    int64_t i = 0;
    auto [p, ec] = std::from_chars(text.data(), text.data() + text.size(), i);
    if (ec == std::errc() && p == text.data() + text.size()) {
      v.type = Value::Type::integer;
      v.i = i;
      return v;
    }
  }
  double d = 0.0;
  auto [p, ec] = std::from_chars(text.data(), text.data() + text.size(), d);
  if (ec != std::errc() || p != text.data() + text.size()) throw fail("cannot parse value");
  v.type = Value::Type::floating;
  v.d = d;
  return v;
}

inline Value parse_value(const std::string& raw, int line_no) {
  const std::string text = trim(raw);
  if (!text.empty() && text.front() == '[') {
    if (text.back() != ']') {
      throw ConfigError("line " + std::to_string(line_no) + ": unterminated array");
    }
    Value v;
    v.type = Value::Type::array;
    std::string body = trim(text.substr(1, text.size() - 2));
    std::string item;
    bool in_string = false;
    for (char c : body) {
      if (c == '"') in_string = !in_string;
      if (c == ',' && !in_string) {
        if (!trim(item).empty()) v.items.push_back(parse_scalar(item, line_no));
        item.clear();
      } else {
        item += c;
      }
    }
    if (!trim(item).empty()) v.items.push_back(parse_scalar(item, line_no));
    return v;
  }
  return parse_scalar(text, line_no);
}

}  // namespace detail

inline Document parse(const std::string& text) {
  Document doc;
  doc.tables[""];
  Table* current = &doc.tables[""];
  std::istringstream in(text);
  std::string line;
  int line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    line = detail::trim(detail::strip_comment(line));
    if (line.empty()) continue;
    if (line.rfind("[[", 0) == 0) {
      if (line.size() < 5 || line.substr(line.size() - 2) != "]]") {
        throw ConfigError("line " + std::to_string(line_no) + ": malformed table array header");
      }
      auto name = detail::trim(line.substr(2, line.size() - 4));
      auto& list = doc.arrays[name];
      list.emplace_back();
      current = &list.back();
      continue;
    }
    if (line.front() == '[') {
      if (line.back() != ']') {
        throw ConfigError("line " + std::to_string(line_no) + ": malformed section header");
      }
      current = &doc.tables[detail::trim(line.substr(1, line.size() - 2))];
      continue;
    }
    const auto eq = line.find('=');
    if (eq == std::string::npos) {
      throw ConfigError("line " + std::to_string(line_no) + ": expected key = value");
    }
    const auto key = detail::trim(line.substr(0, eq));
    if (key.empty()) throw ConfigError("line " + std::to_string(line_no) + ": empty key");
    if (current->count(key)) {
      throw ConfigError("line " + std::to_string(line_no) + ": duplicate key '" + key + "'");
    }
    (*current)[key] = detail::parse_value(line.substr(eq + 1), line_no);
  }
  return doc;
}

inline std::string format_value(const Value& v) {
  std::ostringstream os;
  switch (v.type) {
    case Value::Type::boolean: os << (v.b ? "true" : "false"); break;
    case Value::Type::integer: os << v.i; break;
    case Value::Type::floating: {
      char buf[64];
      auto [p, ec] = std::to_chars(buf, buf + sizeof(buf), v.d);
      std::string s(buf, p);
      if (s.find_first_of(".eE") == std::string::npos && s.find("inf") == std::string::npos &&
          s.find("nan") == std::string::npos) {
        s += ".0";
      }
      os << s;
      break;
    }
    case Value::Type::string: {
      os << '"';
      for (char c : v.s) {
        if (c == '"' || c == '\\') os << '\\';
        os << c;
      }
      os << '"';
      break;
    }
    case Value::Type::array: {
      os << '[';
      for (size_t k = 0; k < v.items.size(); ++k) os << (k ? ", " : "") << format_value(v.items[k]);
      os << ']';
      break;
    }
  }
  return os.str();
}

inline Value make(bool b) { Value v; v.type = Value::Type::boolean; v.b = b; return v; }
inline Value make(int64_t i) { Value v; v.type = Value::Type::integer; v.i = i; return v; }
inline Value make(int i) { return make(static_cast<int64_t>(i)); }
inline Value make(double d) { Value v; v.type = Value::Type::floating; v.d = d; return v; }
inline Value make(const std::string& s) { Value v; v.type = Value::Type::string; v.s = s; return v; }
inline Value make(const char* s) { return make(std::string(s)); }

}  // namespace diffkd::toml
