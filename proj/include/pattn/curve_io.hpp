#pragma once

// CurveSeries <-> CSV ("x,y", NaN as an empty field) plus a sibling
// "<stem>.meta.json" carrying label and params.

#include <charconv>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <limits>
#include <sstream>
#include <stdexcept>
#include <string>

#include <nlohmann/json.hpp>

#include "pattn/analysis.hpp"

namespace pattn {

inline std::string format_double(double v) {
  if (std::isnan(v)) return {};
  char buf[32];
  auto [end, ec] = std::to_chars(buf, buf + sizeof buf, v);
  return ec == std::errc{} ? std::string(buf, end) : std::string{};
}

inline double parse_double_field(const std::string& field) {
  if (field.empty()) return std::numeric_limits<double>::quiet_NaN();
  return std::stod(field);
}

/// "<dir>/<stem>.meta.json" for a CSV path "<dir>/<stem>.csv".
inline std::filesystem::path meta_path_for(const std::filesystem::path& csv) {
  auto p = csv;
  p.replace_extension();
  p += ".meta.json";
  return p;
}

inline void write_curve_csv(const CurveSeries& curve, const std::filesystem::path& csv_path) {
  std::ofstream out(csv_path);
  if (!out) throw std::runtime_error("cannot open " + csv_path.string() + " for writing");
  out << "x,y\n";
  for (std::size_t i = 0; i < curve.x_values.size(); ++i)
    out << format_double(curve.x_values[i]) << ',' << format_double(curve.y_values[i]) << '\n';

  nlohmann::json meta;
  meta["label"] = curve.label;
  meta["params"] = nlohmann::json::object();
  for (const auto& [k, v] : curve.params) meta["params"][k] = v;
  std::ofstream mout(meta_path_for(csv_path));
  if (!mout) throw std::runtime_error("cannot write curve metadata");
  mout << meta.dump(2) << '\n';
}

inline CurveSeries read_curve_csv(const std::filesystem::path& csv_path) {
  std::ifstream in(csv_path);
  if (!in) throw std::runtime_error("cannot open " + csv_path.string());
  std::string line;
  if (!std::getline(in, line) || line != "x,y")
    throw std::runtime_error("curve CSV must start with header x,y");
  CurveSeries c;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    const auto comma = line.find(',');
    if (comma == std::string::npos) throw std::runtime_error("malformed curve row: " + line);
    c.x_values.push_back(parse_double_field(line.substr(0, comma)));
    c.y_values.push_back(parse_double_field(line.substr(comma + 1)));
  }
  const auto meta_file = meta_path_for(csv_path);
  if (std::filesystem::exists(meta_file)) {
    std::ifstream min(meta_file);
    const auto meta = nlohmann::json::parse(min);
    c.label = meta.value("label", "");
    for (const auto& [k, v] : meta.at("params").items()) c.params[k] = v.get<double>();
  }
  return c;
}

}  // namespace pattn
