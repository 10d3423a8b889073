#include "alertgraph/graph.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <set>
#include <sstream>

#include "alertgraph/binio.hpp"

namespace alertgraph {

namespace {

void insert_edge_sorted(std::vector<Edge>& edges, Edge e) {
  auto it = std::lower_bound(edges.begin(), edges.end(), e);
  if (it != edges.end() && *it == e) return;
  edges.insert(it, e);
}

}  // namespace

void validate_snapshot(const AlertGraphSnapshot& s, bool require_chain_edges) {
  if (s.nodes.empty()) throw std::runtime_error("snapshot has no nodes");
  if (s.snapshot_index != s.nodes.size() - 1 && require_chain_edges)
    throw std::runtime_error("snapshot_index does not match node count");
  std::map<std::string, std::uint32_t> host_counts;
  for (std::size_t i = 0; i < s.nodes.size(); ++i) {
    const AlertNode& n = s.nodes[i];
    if (require_chain_edges && n.node_id != i) throw std::runtime_error("node ids not contiguous");
    for (double f : n.features)
      if (f < 0.0 || f > 1.0) throw std::runtime_error("node feature outside [0,1]");
    std::uint32_t expect = host_counts[n.host]++;
    if (n.host_seq != expect) throw std::runtime_error("host_seq not contiguous per host");
  }
  std::set<Edge> seen;
  for (const Edge& e : s.edges) {
    if (e.first == e.second) throw std::runtime_error("self-loop edge");
    if (e.first >= s.nodes.size() || e.second >= s.nodes.size())
      throw std::runtime_error("edge endpoint out of range");
    if (!seen.insert(e).second) throw std::runtime_error("duplicate edge");
  }
  if (require_chain_edges) {
    // each non-first node of a host has exactly one chain edge from its predecessor
    std::map<std::string, std::uint32_t> last;
    for (const AlertNode& n : s.nodes) {
      if (n.host_seq > 0) {
        Edge chain{last.at(n.host), n.node_id};
        if (!seen.count(chain)) throw std::runtime_error("missing intra-host chain edge");
      }
      last[n.host] = n.node_id;
    }
  }
}

GraphBuilder::GraphBuilder(std::string campaign_id, bool label_is_ransomware, std::string campaign_class)
    : campaign_id_(std::move(campaign_id)),
      campaign_class_(std::move(campaign_class)),
      label_(label_is_ransomware) {}

AlertGraphSnapshot GraphBuilder::add_alert(const UnifiedAlert& alert) {
  if (alert.arrival_index != nodes_.size())
    throw std::runtime_error("sequencing error: expected arrival_index " +
                             std::to_string(nodes_.size()) + ", got " +
                             std::to_string(alert.arrival_index));
  const std::uint32_t id = static_cast<std::uint32_t>(nodes_.size());
  const std::string& host = alert.source_host;

  AlertNode node;
  node.node_id = id;
  node.features = {alert.time_feature, alert.risk_norm, alert.severity_norm, alert.category_norm};
  node.host = host;
  node.host_seq = host_count_[host]++;
  nodes_.push_back(node);

  // intra-host temporal chain
  if (node.host_seq > 0) insert_edge_sorted(edges_, {last_node_.at(host), id});

  // cross edge toward the destination host's most recent node; deferred when
  // that host has no nodes yet
  if (alert.destination_host && *alert.destination_host != host) {
    const std::string& dst = *alert.destination_host;
    auto it = last_node_.find(dst);
    if (it != last_node_.end())
      insert_edge_sorted(edges_, {id, it->second});
    else
      pending_[dst].push_back(id);
  }

  // this node is its host's first: resolve links that were waiting for it
  if (node.host_seq == 0) {
    if (auto it = pending_.find(host); it != pending_.end()) {
      for (std::uint32_t from : it->second)
        if (from != id) insert_edge_sorted(edges_, {from, id});
      pending_.erase(it);
    }
  }

  last_node_[host] = id;
  return snapshot();
}

AlertGraphSnapshot GraphBuilder::snapshot() const {
  AlertGraphSnapshot s;
  s.campaign_id = campaign_id_;
  s.campaign_class = campaign_class_;
  s.label_is_ransomware = label_;
  s.snapshot_index = nodes_.empty() ? 0 : nodes_.size() - 1;
  s.nodes = nodes_;
  s.edges = edges_;
  return s;
}

CampaignGraphSeries::CampaignGraphSeries(std::string campaign_id, bool label, std::string campaign_class,
                                         std::vector<SnapshotDelta> deltas,
                                         std::vector<std::uint64_t> retained)
    : campaign_id_(std::move(campaign_id)),
      campaign_class_(std::move(campaign_class)),
      label_(label),
      deltas_(std::move(deltas)),
      retained_(std::move(retained)) {}

AlertGraphSnapshot CampaignGraphSeries::materialize(std::uint64_t snapshot_index) const {
  if (snapshot_index >= deltas_.size()) throw std::out_of_range("snapshot index out of range");
  AlertGraphSnapshot s;
  s.campaign_id = campaign_id_;
  s.campaign_class = campaign_class_;
  s.label_is_ransomware = label_;
  s.snapshot_index = snapshot_index;
  s.nodes.reserve(snapshot_index + 1);
  for (std::uint64_t k = 0; k <= snapshot_index; ++k) {
    s.nodes.push_back(deltas_[k].node);
    for (const Edge& e : deltas_[k].new_edges) s.edges.push_back(e);
  }
  std::sort(s.edges.begin(), s.edges.end());
  return s;
}

std::vector<AlertGraphSnapshot> CampaignGraphSeries::materialize_retained() const {
  std::vector<AlertGraphSnapshot> out;
  out.reserve(retained_.size());
  for (std::uint64_t k : retained_) out.push_back(materialize(k));
  return out;
}

CampaignGraphSeries build_series(std::span<const UnifiedAlert> alerts, const std::string& campaign_id,
                                 bool label_is_ransomware, const std::string& campaign_class,
                                 std::uint64_t stride) {
  if (stride == 0) throw std::invalid_argument("stride must be >= 1");
  for (std::size_t i = 0; i < alerts.size(); ++i)
    if (alerts[i].arrival_index != i) throw std::runtime_error("sequencing error: alerts not in arrival order");

  GraphBuilder builder(campaign_id, label_is_ransomware, campaign_class);
  std::vector<SnapshotDelta> deltas;
  deltas.reserve(alerts.size());
  std::size_t edges_before = 0;
  for (const UnifiedAlert& a : alerts) {
    AlertGraphSnapshot snap = builder.add_alert(a);
    SnapshotDelta d;
    d.node = snap.nodes.back();
    // edges_ grows monotonically; the delta is everything beyond the previous count
    std::vector<Edge> sorted_now = snap.edges;
    if (sorted_now.size() > edges_before) {
      // recover the newly inserted edges by set difference against the prefix state
      // (cheap: at most 2 inserts plus pending resolutions per alert)
      static thread_local std::vector<Edge> prev;
      d.new_edges.clear();
      std::set_difference(sorted_now.begin(), sorted_now.end(), prev.begin(), prev.end(),
                          std::back_inserter(d.new_edges));
      prev = std::move(sorted_now);
    } else {
      static thread_local std::vector<Edge> prev;
      prev = std::move(sorted_now);
    }
    edges_before = builder.edges().size();
    deltas.push_back(std::move(d));
  }

  std::vector<std::uint64_t> retained;
  for (std::uint64_t pos = stride; pos <= deltas.size(); pos += stride) retained.push_back(pos - 1);
  if (!deltas.empty() && (retained.empty() || retained.back() != deltas.size() - 1))
    retained.push_back(deltas.size() - 1);
  return CampaignGraphSeries(campaign_id, label_is_ransomware, campaign_class, std::move(deltas),
                             std::move(retained));
}

CampaignGraphSeries prefix(const CampaignGraphSeries& series, double fraction) {
  if (!(fraction > 0.0) || fraction > 1.0) throw std::invalid_argument("fraction must be in (0, 1]");
  std::size_t n = series.retained().size();
  std::size_t keep = static_cast<std::size_t>(std::ceil(fraction * static_cast<double>(n)));
  if (keep > n) keep = n;
  std::vector<std::uint64_t> retained(series.retained().begin(), series.retained().begin() + keep);
  std::size_t alerts_needed = retained.empty() ? 0 : static_cast<std::size_t>(retained.back()) + 1;
  std::vector<SnapshotDelta> deltas(series.deltas().begin(), series.deltas().begin() + alerts_needed);
  return CampaignGraphSeries(series.campaign_id(), series.label_is_ransomware(),
                             series.campaign_class(), std::move(deltas), std::move(retained));
}

// --- serialization ---

namespace {

constexpr char kSnapshotMagic[5] = "AGSS";
constexpr char kSeriesMagic[5] = "AGSR";
constexpr std::uint32_t kFormatVersion = 1;

void write_node(std::ostream& out, const AlertNode& n, const std::map<std::string, std::uint32_t>& hosts) {
  binio::put<std::uint32_t>(out, n.node_id);
  binio::put<std::uint32_t>(out, hosts.at(n.host));
  binio::put<std::uint32_t>(out, n.host_seq);
  for (double f : n.features) binio::put<double>(out, f);
}

AlertNode read_node(std::istream& in, const std::vector<std::string>& hosts) {
  AlertNode n;
  n.node_id = binio::get<std::uint32_t>(in);
  n.host = hosts.at(binio::get<std::uint32_t>(in));
  n.host_seq = binio::get<std::uint32_t>(in);
  for (double& f : n.features) f = binio::get<double>(in);
  return n;
}

template <class NodeRange>
std::map<std::string, std::uint32_t> host_table(const NodeRange& nodes) {
  std::map<std::string, std::uint32_t> hosts;
  for (const auto& n : nodes) hosts.emplace(n.host, 0);
  std::uint32_t next = 0;
  for (auto& [_, idx] : hosts) idx = next++;
  return hosts;
}

void write_host_table(std::ostream& out, const std::map<std::string, std::uint32_t>& hosts) {
  binio::put<std::uint32_t>(out, static_cast<std::uint32_t>(hosts.size()));
  for (const auto& [name, _] : hosts) binio::put_string(out, name);
}

std::vector<std::string> read_host_table(std::istream& in) {
  auto n = binio::get<std::uint32_t>(in);
  std::vector<std::string> hosts(n);
  for (auto& h : hosts) h = binio::get_string(in);
  return hosts;
}

}  // namespace

void write_snapshot(std::ostream& out, const AlertGraphSnapshot& s) {
  binio::put_bytes(out, kSnapshotMagic, 4);
  binio::put<std::uint32_t>(out, kFormatVersion);
  binio::put_string(out, s.campaign_id);
  binio::put_string(out, s.campaign_class);
  binio::put<std::uint8_t>(out, s.label_is_ransomware ? 1 : 0);
  binio::put<std::uint64_t>(out, s.snapshot_index);
  auto hosts = host_table(s.nodes);
  write_host_table(out, hosts);
  binio::put<std::uint64_t>(out, s.nodes.size());
  for (const AlertNode& n : s.nodes) write_node(out, n, hosts);
  binio::put<std::uint64_t>(out, s.edges.size());
  for (const Edge& e : s.edges) {
    binio::put<std::uint32_t>(out, e.first);
    binio::put<std::uint32_t>(out, e.second);
  }
}

AlertGraphSnapshot read_snapshot(std::istream& in) {
  binio::expect_magic(in, kSnapshotMagic, "snapshot");
  if (binio::get<std::uint32_t>(in) != kFormatVersion)
    throw std::runtime_error("unsupported snapshot format version");
  AlertGraphSnapshot s;
  s.campaign_id = binio::get_string(in);
  s.campaign_class = binio::get_string(in);
  s.label_is_ransomware = binio::get<std::uint8_t>(in) != 0;
  s.snapshot_index = binio::get<std::uint64_t>(in);
  auto hosts = read_host_table(in);
  auto n_nodes = binio::get<std::uint64_t>(in);
  s.nodes.reserve(n_nodes);
  for (std::uint64_t i = 0; i < n_nodes; ++i) s.nodes.push_back(read_node(in, hosts));
  auto n_edges = binio::get<std::uint64_t>(in);
  s.edges.reserve(n_edges);
  for (std::uint64_t i = 0; i < n_edges; ++i) {
    auto a = binio::get<std::uint32_t>(in);
    auto b = binio::get<std::uint32_t>(in);
    s.edges.emplace_back(a, b);
  }
  return s;
}

std::string snapshot_bytes(const AlertGraphSnapshot& s) {
  std::ostringstream os(std::ios::binary);
  write_snapshot(os, s);
  return os.str();
}

void write_series(std::ostream& out, const CampaignGraphSeries& series, const std::string& meta) {
  binio::put_bytes(out, kSeriesMagic, 4);
  binio::put<std::uint32_t>(out, kFormatVersion);
  binio::put_string(out, series.campaign_id());
  binio::put_string(out, series.campaign_class());
  binio::put<std::uint8_t>(out, series.label_is_ransomware() ? 1 : 0);
  binio::put_string(out, meta);
  std::vector<AlertNode> all_nodes;
  all_nodes.reserve(series.deltas().size());
  for (const auto& d : series.deltas()) all_nodes.push_back(d.node);
  auto hosts = host_table(all_nodes);
  write_host_table(out, hosts);
  binio::put<std::uint64_t>(out, series.deltas().size());
  for (const auto& d : series.deltas()) {
    write_node(out, d.node, hosts);
    binio::put<std::uint32_t>(out, static_cast<std::uint32_t>(d.new_edges.size()));
    for (const Edge& e : d.new_edges) {
      binio::put<std::uint32_t>(out, e.first);
      binio::put<std::uint32_t>(out, e.second);
    }
  }
  binio::put<std::uint64_t>(out, series.retained().size());
  for (std::uint64_t k : series.retained()) binio::put<std::uint64_t>(out, k);
}

CampaignGraphSeries read_series(std::istream& in, std::string* meta) {
  binio::expect_magic(in, kSeriesMagic, "series");
  if (binio::get<std::uint32_t>(in) != kFormatVersion)
    throw std::runtime_error("unsupported series format version");
  std::string campaign_id = binio::get_string(in);
  std::string campaign_class = binio::get_string(in);
  bool label = binio::get<std::uint8_t>(in) != 0;
  std::string m = binio::get_string(in);
  if (meta) *meta = m;
  auto hosts = read_host_table(in);
  auto n = binio::get<std::uint64_t>(in);
  std::vector<SnapshotDelta> deltas;
  deltas.reserve(n);
  for (std::uint64_t i = 0; i < n; ++i) {
    SnapshotDelta d;
    d.node = read_node(in, hosts);
    auto ne = binio::get<std::uint32_t>(in);
    d.new_edges.reserve(ne);
    for (std::uint32_t j = 0; j < ne; ++j) {
      auto a = binio::get<std::uint32_t>(in);
      auto b = binio::get<std::uint32_t>(in);
      d.new_edges.emplace_back(a, b);
    }
    deltas.push_back(std::move(d));
  }
  auto nr = binio::get<std::uint64_t>(in);
  std::vector<std::uint64_t> retained(nr);
  for (auto& k : retained) k = binio::get<std::uint64_t>(in);
  return CampaignGraphSeries(std::move(campaign_id), label, std::move(campaign_class),
                             std::move(deltas), std::move(retained));
}

void write_series_file(const std::string& path, const CampaignGraphSeries& series, const std::string& meta) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write series: " + path);
  write_series(out, series, meta);
}

CampaignGraphSeries read_series_file(const std::string& path, std::string* meta) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open series: " + path);
  return read_series(in, meta);
}

}  // namespace alertgraph
