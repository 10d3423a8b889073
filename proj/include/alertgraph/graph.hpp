#pragma once

#include <array>
#include <cstdint>
#include <istream>
#include <map>
#include <optional>
#include <ostream>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "alertgraph/alerts.hpp"

namespace alertgraph {

using Edge = std::pair<std::uint32_t, std::uint32_t>;  // (from, to)

struct AlertNode {
  std::uint32_t node_id = 0;  // global arrival order
  std::array<double, 4> features{};  // [time, risk, severity, category]
  std::string host;
  std::uint32_t host_seq = 0;  // per-host arrival index

  bool operator==(const AlertNode&) const = default;
};

// Immutable graph state after one alert. Edges are kept sorted and unique.
struct AlertGraphSnapshot {
  std::string campaign_id;
  std::string campaign_class;  // metric-learning class
  bool label_is_ransomware = false;
  std::uint64_t snapshot_index = 0;  // == nodes.size() - 1
  std::vector<AlertNode> nodes;
  std::vector<Edge> edges;

  bool operator==(const AlertGraphSnapshot&) const = default;
};

// Structural validation; chain-edge checks are waived for augmented views.
void validate_snapshot(const AlertGraphSnapshot& s, bool require_chain_edges = true);

// Incremental single-writer builder: one node per alert, a temporal chain
// edge within each host, and a cross edge toward the destination host's most
// recent node (deferred to that host's first node when it does not exist yet).
class GraphBuilder {
 public:
  GraphBuilder(std::string campaign_id, bool label_is_ransomware, std::string campaign_class);

  AlertGraphSnapshot add_alert(const UnifiedAlert& alert);

  std::size_t node_count() const { return nodes_.size(); }
  const std::vector<Edge>& edges() const { return edges_; }
  AlertGraphSnapshot snapshot() const;  // current state

 private:
  std::string campaign_id_;
  std::string campaign_class_;
  bool label_ = false;
  std::vector<AlertNode> nodes_;
  std::vector<Edge> edges_;  // sorted unique
  std::map<std::string, std::uint32_t> last_node_;   // host -> latest node id
  std::map<std::string, std::uint32_t> host_count_;  // host -> node count
  std::map<std::string, std::vector<std::uint32_t>> pending_;  // host with no nodes yet -> waiting sources
};

// Per-snapshot delta; replaying deltas 0..k reconstructs snapshot k.
struct SnapshotDelta {
  AlertNode node;
  std::vector<Edge> new_edges;
};

// A campaign's snapshot sequence, stored as deltas. `retained` lists the
// snapshot indices kept by the build stride (always includes the last one).
class CampaignGraphSeries {
 public:
  CampaignGraphSeries() = default;
  CampaignGraphSeries(std::string campaign_id, bool label, std::string campaign_class,
                      std::vector<SnapshotDelta> deltas, std::vector<std::uint64_t> retained);

  const std::string& campaign_id() const { return campaign_id_; }
  const std::string& campaign_class() const { return campaign_class_; }
  bool label_is_ransomware() const { return label_; }
  std::size_t alert_count() const { return deltas_.size(); }
  const std::vector<std::uint64_t>& retained() const { return retained_; }
  const std::vector<SnapshotDelta>& deltas() const { return deltas_; }

  AlertGraphSnapshot materialize(std::uint64_t snapshot_index) const;
  std::vector<AlertGraphSnapshot> materialize_retained() const;

  bool operator==(const CampaignGraphSeries&) const = default;

 private:
  std::string campaign_id_;
  std::string campaign_class_;
  bool label_ = false;
  std::vector<SnapshotDelta> deltas_;
  std::vector<std::uint64_t> retained_;
};

// Batch construction; equals a fold of GraphBuilder::add_alert. stride keeps
// every stride-th snapshot (1-based positions stride, 2*stride, ...); the
// final snapshot is always retained.
CampaignGraphSeries build_series(std::span<const UnifiedAlert> alerts, const std::string& campaign_id,
                                 bool label_is_ransomware, const std::string& campaign_class,
                                 std::uint64_t stride = 1);

// First ceil(fraction * n) retained snapshots, 0 < fraction <= 1.
CampaignGraphSeries prefix(const CampaignGraphSeries& series, double fraction);

// --- serialization (versioned, little-endian binary) ---

void write_snapshot(std::ostream& out, const AlertGraphSnapshot& s);
AlertGraphSnapshot read_snapshot(std::istream& in);
std::string snapshot_bytes(const AlertGraphSnapshot& s);

// meta is a free-form JSON string echoing the effective build configuration.
void write_series(std::ostream& out, const CampaignGraphSeries& series, const std::string& meta = "{}");
CampaignGraphSeries read_series(std::istream& in, std::string* meta = nullptr);
void write_series_file(const std::string& path, const CampaignGraphSeries& series,
                       const std::string& meta = "{}");
CampaignGraphSeries read_series_file(const std::string& path, std::string* meta = nullptr);

}  // namespace alertgraph
