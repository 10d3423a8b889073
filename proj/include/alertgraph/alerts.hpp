#pragma once

#include <cstdint>
#include <istream>
#include <optional>
#include <ostream>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace alertgraph {

// A malformed record in an alert stream. line_no is 1-based; field names the
// offending field when it is known.
struct ParseError : std::runtime_error {
  ParseError(std::size_t line, std::string fld, const std::string& msg)
      : std::runtime_error("line " + std::to_string(line) + ", field '" + fld + "': " + msg),
        line_no(line),
        field(std::move(fld)) {}
  std::size_t line_no;
  std::string field;
};

// One detection event as emitted by a tool, before normalization.
struct RawAlert {
  std::string tool_id;
  std::int64_t timestamp = 0;  // seconds since epoch
  double risk_score = 0.0;     // tool-native scale
  double severity_score = 0.0;
  std::string category;
  std::string source_host;
  std::optional<std::string> destination_host;
};

// Per-tool normalization statistics fit from a training corpus.
struct ToolProfile {
  std::string tool_id;
  double risk_min = 0.0, risk_max = 0.0;
  double severity_min = 0.0, severity_max = 0.0;
  std::vector<std::string> category_registry;  // sorted; index is the ordinal code

  std::size_t category_ordinal(const std::string& category) const;  // throws on unknown
};

// The unified representation: four [0,1] node features plus routing metadata.
struct UnifiedAlert {
  double time_feature = 0.0;
  double risk_norm = 0.0;
  double severity_norm = 0.0;
  double category_norm = 0.0;
  std::string source_host;
  std::optional<std::string> destination_host;
  std::string tool_id;
  std::size_t arrival_index = 0;
};

// Parses one JSON-line record: {"tool","ts","risk","severity","category","src","dst"}.
// dst may be null or absent. A destination equal to the source is dropped.
RawAlert parse_alert_line(const std::string& line, std::size_t line_no = 0);

// Reads a whole stream (one record per line; blank lines skipped).
std::vector<RawAlert> read_alert_stream(std::istream& in);
std::vector<RawAlert> read_alert_stream_file(const std::string& path);

std::string alert_to_line(const RawAlert& a);
void write_alert_stream(std::ostream& out, const std::vector<RawAlert>& alerts);
void write_alert_stream_file(const std::string& path, const std::vector<RawAlert>& alerts);

// One profile per distinct tool_id; min/max are observed extrema and the
// registry is the sorted set of observed categories. Throws on empty input.
std::vector<ToolProfile> fit_tool_profiles(std::span<const RawAlert> alerts);

const ToolProfile& profile_for(const std::vector<ToolProfile>& profiles, const std::string& tool_id);

// MinMax normalization against the tool profile. Degenerate ranges map to
// 0.5; the time feature is (timestamp - campaign_start) / horizon clamped to 1.
UnifiedAlert normalize_alert(const RawAlert& raw, const ToolProfile& profile,
                             std::int64_t campaign_start, double horizon_seconds,
                             std::size_t arrival_index);

// Normalizes a whole stream in order, assigning arrival indices from 0.
// campaign_start is the first alert's timestamp.
std::vector<UnifiedAlert> normalize_stream(std::span<const RawAlert> alerts,
                                           const std::vector<ToolProfile>& profiles,
                                           double horizon_seconds);

// Versioned sidecar file for fitted profiles.
void write_profiles_file(const std::string& path, const std::vector<ToolProfile>& profiles);
std::vector<ToolProfile> read_profiles_file(const std::string& path);

inline constexpr double kDefaultHorizonSeconds = 7.0 * 24 * 3600;

}  // namespace alertgraph
