#include "alertgraph/alerts.hpp"

#include <algorithm>
#include <fstream>
#include <map>
#include <set>
#include <sstream>

#include <json.hpp>

namespace alertgraph {

using nlohmann::json;

std::size_t ToolProfile::category_ordinal(const std::string& category) const {
  auto it = std::lower_bound(category_registry.begin(), category_registry.end(), category);
  if (it == category_registry.end() || *it != category)
    throw std::runtime_error("unknown category '" + category + "' for tool '" + tool_id + "'");
  return static_cast<std::size_t>(it - category_registry.begin());
}

RawAlert parse_alert_line(const std::string& line, std::size_t line_no) {
  json j;
  try {
    j = json::parse(line);
  } catch (const json::exception& e) {
    throw ParseError(line_no, "record", std::string("invalid JSON: ") + e.what());
  }
  if (!j.is_object()) throw ParseError(line_no, "record", "not an object");

  auto need = [&](const char* key) -> const json& {
    auto it = j.find(key);
    if (it == j.end()) throw ParseError(line_no, key, "missing");
    return *it;
  };
  auto as_string = [&](const char* key) {
    const json& v = need(key);
    if (!v.is_string() || v.get<std::string>().empty())
      throw ParseError(line_no, key, "expected non-empty string");
    return v.get<std::string>();
  };
  auto as_number = [&](const char* key) {
    const json& v = need(key);
    if (!v.is_number()) throw ParseError(line_no, key, "expected number");
    return v.get<double>();
  };

  RawAlert a;
  a.tool_id = as_string("tool");
  const json& ts = need("ts");
  if (!ts.is_number_integer() && !ts.is_number_unsigned())
    throw ParseError(line_no, "ts", "expected integer seconds");
  a.timestamp = ts.get<std::int64_t>();
  if (a.timestamp < 0) throw ParseError(line_no, "timestamp", "negative");
  a.risk_score = as_number("risk");
  a.severity_score = as_number("severity");
  a.category = as_string("category");
  a.source_host = as_string("src");
  if (auto it = j.find("dst"); it != j.end() && !it->is_null()) {
    if (!it->is_string()) throw ParseError(line_no, "dst", "expected string or null");
    std::string dst = it->get<std::string>();
    // a self-referential destination carries no cross-host information
    if (!dst.empty() && dst != a.source_host) a.destination_host = std::move(dst);
  }
  return a;
}

std::vector<RawAlert> read_alert_stream(std::istream& in) {
  std::vector<RawAlert> alerts;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    alerts.push_back(parse_alert_line(line, line_no));
  }
  return alerts;
}

std::vector<RawAlert> read_alert_stream_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open alert stream: " + path);
  return read_alert_stream(in);
}

std::string alert_to_line(const RawAlert& a) {
  json j;
  j["tool"] = a.tool_id;
  j["ts"] = a.timestamp;
  j["risk"] = a.risk_score;
  j["severity"] = a.severity_score;
  j["category"] = a.category;
  j["src"] = a.source_host;
  j["dst"] = a.destination_host ? json(*a.destination_host) : json(nullptr);
  return j.dump();
}

void write_alert_stream(std::ostream& out, const std::vector<RawAlert>& alerts) {
  for (const auto& a : alerts) out << alert_to_line(a) << "\n";
}

void write_alert_stream_file(const std::string& path, const std::vector<RawAlert>& alerts) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write alert stream: " + path);
  write_alert_stream(out, alerts);
}

std::vector<ToolProfile> fit_tool_profiles(std::span<const RawAlert> alerts) {
  if (alerts.empty()) throw std::invalid_argument("no alerts");
  std::map<std::string, ToolProfile> by_tool;
  std::map<std::string, std::set<std::string>> categories;
  for (const auto& a : alerts) {
    auto [it, fresh] = by_tool.try_emplace(a.tool_id);
    ToolProfile& p = it->second;
    if (fresh) {
      p.tool_id = a.tool_id;
      p.risk_min = p.risk_max = a.risk_score;
      p.severity_min = p.severity_max = a.severity_score;
    } else {
      p.risk_min = std::min(p.risk_min, a.risk_score);
      p.risk_max = std::max(p.risk_max, a.risk_score);
      p.severity_min = std::min(p.severity_min, a.severity_score);
      p.severity_max = std::max(p.severity_max, a.severity_score);
    }
    categories[a.tool_id].insert(a.category);
  }
  std::vector<ToolProfile> out;
  out.reserve(by_tool.size());
  for (auto& [tool, p] : by_tool) {
    const auto& cats = categories[tool];
    p.category_registry.assign(cats.begin(), cats.end());
    out.push_back(std::move(p));
  }
  return out;  // sorted by tool_id via map order
}

const ToolProfile& profile_for(const std::vector<ToolProfile>& profiles, const std::string& tool_id) {
  for (const auto& p : profiles)
    if (p.tool_id == tool_id) return p;
  throw std::runtime_error("no profile for tool '" + tool_id + "'");
}

namespace {

double minmax(double v, double lo, double hi) {
  if (hi > lo) return (v - lo) / (hi - lo);
  return 0.5;  // degenerate range
}

}  // namespace

UnifiedAlert normalize_alert(const RawAlert& raw, const ToolProfile& profile,
                             std::int64_t campaign_start, double horizon_seconds,
                             std::size_t arrival_index) {
  if (profile.tool_id != raw.tool_id)
    throw std::invalid_argument("profile/alert tool mismatch: " + profile.tool_id + " vs " + raw.tool_id);
  if (raw.timestamp < campaign_start)
    throw std::invalid_argument("alert timestamp precedes campaign start");
  if (horizon_seconds <= 0.0) throw std::invalid_argument("horizon must be positive");

  UnifiedAlert u;
  u.risk_norm = minmax(raw.risk_score, profile.risk_min, profile.risk_max);
  u.severity_norm = minmax(raw.severity_score, profile.severity_min, profile.severity_max);
  std::size_t ord = profile.category_ordinal(raw.category);
  std::size_t n = profile.category_registry.size();
  u.category_norm = n > 1 ? static_cast<double>(ord) / static_cast<double>(n - 1) : 0.5;
  u.time_feature = std::min(1.0, static_cast<double>(raw.timestamp - campaign_start) / horizon_seconds);
  u.source_host = raw.source_host;
  u.destination_host = raw.destination_host;
  u.tool_id = raw.tool_id;
  u.arrival_index = arrival_index;
  return u;
}

std::vector<UnifiedAlert> normalize_stream(std::span<const RawAlert> alerts,
                                           const std::vector<ToolProfile>& profiles,
                                           double horizon_seconds) {
  std::vector<UnifiedAlert> out;
  out.reserve(alerts.size());
  if (alerts.empty()) return out;
  std::int64_t start = alerts.front().timestamp;
  for (std::size_t i = 0; i < alerts.size(); ++i)
    out.push_back(normalize_alert(alerts[i], profile_for(profiles, alerts[i].tool_id), start,
                                  horizon_seconds, i));
  return out;
}

void write_profiles_file(const std::string& path, const std::vector<ToolProfile>& profiles) {
  json j;
  j["version"] = 1;
  json arr = json::array();
  for (const auto& p : profiles) {
    json e;
    e["tool"] = p.tool_id;
    e["risk_min"] = p.risk_min;
    e["risk_max"] = p.risk_max;
    e["severity_min"] = p.severity_min;
    e["severity_max"] = p.severity_max;
    e["categories"] = p.category_registry;
    arr.push_back(std::move(e));
  }
  j["profiles"] = std::move(arr);
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write profiles: " + path);
  out << j.dump(2) << "\n";
}

std::vector<ToolProfile> read_profiles_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open profiles: " + path);
  json j = json::parse(in);
  if (!j.contains("version") || j["version"].get<int>() != 1)
    throw std::runtime_error("unsupported profiles version in " + path);
  std::vector<ToolProfile> out;
  for (const auto& e : j.at("profiles")) {
    ToolProfile p;
    p.tool_id = e.at("tool").get<std::string>();
    p.risk_min = e.at("risk_min").get<double>();
    p.risk_max = e.at("risk_max").get<double>();
    p.severity_min = e.at("severity_min").get<double>();
    p.severity_max = e.at("severity_max").get<double>();
    p.category_registry = e.at("categories").get<std::vector<std::string>>();
    if (!std::is_sorted(p.category_registry.begin(), p.category_registry.end()))
      throw std::runtime_error("profiles file has unsorted category registry");
    out.push_back(std::move(p));
  }
  return out;
}

}  // namespace alertgraph
