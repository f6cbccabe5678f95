#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <set>
#include <span>
#include <string>
#include <tuple>
#include <vector>

#include "selfinject/common.hpp"
#include "selfinject/lexicon.hpp"

namespace selfinject {

/// Weighted undirected object graph. Edge weight counts the responses in
/// which both tags occur; node frequency counts responses containing a tag.
class CooccurrenceGraph {
 public:
  using Adjacency = std::map<std::string, std::map<std::string, std::uint64_t>>;

  /// Counts one response: each unordered pair of distinct tags once.
  void add_response(const TagSet& tags) {
    ++corpus_size_;
    for (const auto& tag : tags) {
      adjacency_[tag];
      ++node_frequency_[tag];
    }
    for (auto a = tags.begin(); a != tags.end(); ++a) {
      for (auto b = std::next(a); b != tags.end(); ++b) {
        ++adjacency_[*a][*b];
        ++adjacency_[*b][*a];
      }
    }
  }

  [[nodiscard]] std::uint64_t weight(const std::string& a, const std::string& b) const {
    if (a == b) return 0;
    auto it = adjacency_.find(a);
    if (it == adjacency_.end()) return 0;
    auto jt = it->second.find(b);
    return jt == it->second.end() ? 0 : jt->second;
  }

  [[nodiscard]] std::uint64_t frequency(const std::string& tag) const {
    auto it = node_frequency_.find(tag);
    return it == node_frequency_.end() ? 0 : it->second;
  }

  [[nodiscard]] bool contains(const std::string& tag) const { return adjacency_.count(tag) > 0; }

  [[nodiscard]] TagSet nodes() const {
    TagSet out;
    for (const auto& [tag, _] : adjacency_) out.insert(tag);
    return out;
  }

  /// Edges keyed by (smaller tag, larger tag).
  [[nodiscard]] std::map<std::pair<std::string, std::string>, std::uint64_t> edge_weights() const {
    std::map<std::pair<std::string, std::string>, std::uint64_t> out;
    for (const auto& [a, row] : adjacency_) {
      for (const auto& [b, w] : row) {
        if (a < b) out.emplace(std::make_pair(a, b), w);
      }
    }
    return out;
  }

  [[nodiscard]] const Adjacency& adjacency() const noexcept { return adjacency_; }
  [[nodiscard]] const std::map<std::string, std::uint64_t>& node_frequency() const noexcept {
    return node_frequency_;
  }
  [[nodiscard]] std::size_t node_count() const noexcept { return adjacency_.size(); }
  [[nodiscard]] std::size_t edge_count() const noexcept {
    std::size_t twice = 0;
    for (const auto& [_, row] : adjacency_) twice += row.size();
    return twice / 2;
  }
  [[nodiscard]] std::uint64_t corpus_size() const noexcept { return corpus_size_; }
  [[nodiscard]] bool empty() const noexcept { return adjacency_.empty(); }

  friend bool operator==(const CooccurrenceGraph&, const CooccurrenceGraph&) = default;

 private:
  friend CooccurrenceGraph read_graph_text(std::string_view, const std::string&);

  Adjacency adjacency_;
  std::map<std::string, std::uint64_t> node_frequency_;
  std::uint64_t corpus_size_ = 0;
};

inline CooccurrenceGraph build_graph(std::span<const TagSet> corpus) {
  if (corpus.empty()) throw InputError("cannot build a co-occurrence graph from an empty corpus");
  CooccurrenceGraph graph;
  for (const auto& tags : corpus) graph.add_response(tags);
  return graph;
}

inline CooccurrenceGraph build_graph(std::span<const ObjectTagSet> corpus) {
  std::vector<TagSet> tags;
  tags.reserve(corpus.size());
  for (const auto& o : corpus) tags.push_back(o.tags);
  return build_graph(std::span<const TagSet>(tags));
}

// ---------------------------------------------------------------------------
// Queries.

namespace detail {

struct ScoredTag {
  std::string tag;
  std::uint64_t score;
  std::uint64_t frequency;
};

// Higher score, then higher node frequency, then lexicographically smaller.
inline bool ranks_before(const ScoredTag& a, const ScoredTag& b) {
  return std::tie(b.score, b.frequency, a.tag) < std::tie(a.score, a.frequency, b.tag);
}

inline std::map<std::string, std::uint64_t> context_scores(const CooccurrenceGraph& graph, const TagSet& context,
                                                           const TagSet& exclude) {
  std::map<std::string, std::uint64_t> scores;
  for (const auto& t : context) {
    auto it = graph.adjacency().find(t);
    if (it == graph.adjacency().end()) continue;
    for (const auto& [candidate, w] : it->second) {
      if (!exclude.count(candidate)) scores[candidate] += w;
    }
  }
  return scores;
}

}  // namespace detail

/// Picks the tag outside `exclude` that co-occurs most with `context`
/// (sum of edge weights). Ties go to node frequency, then lexicographic
/// order. With no positive score, falls back to the most frequent
/// non-excluded tag. Returns nullopt when every tag is excluded.
inline std::optional<std::string> query_hallucinated_object(const CooccurrenceGraph& graph, const TagSet& context,
                                                            const TagSet& exclude) {
  std::optional<detail::ScoredTag> best;
  for (const auto& [tag, score] : detail::context_scores(graph, context, exclude)) {
    detail::ScoredTag cand{tag, score, graph.frequency(tag)};
    if (score > 0 && (!best || detail::ranks_before(cand, *best))) best = cand;
  }
  if (!best) {
    for (const auto& [tag, freq] : graph.node_frequency()) {
      if (exclude.count(tag)) continue;
      detail::ScoredTag cand{tag, 0, freq};
      if (!best || detail::ranks_before(cand, *best)) best = cand;
    }
  }
  if (!best) return std::nullopt;
  return best->tag;
}

/// 1-based position of `candidate` among all non-anchor tags ordered as in
/// query_hallucinated_object. nullopt if the candidate never co-occurs with
/// any anchor.
inline std::optional<std::size_t> cooccurrence_rank(const CooccurrenceGraph& graph, const TagSet& anchors,
                                                    const std::string& candidate) {
  if (anchors.count(candidate)) return std::nullopt;
  const auto scores = detail::context_scores(graph, anchors, anchors);
  auto it = scores.find(candidate);
  if (it == scores.end() || it->second == 0) return std::nullopt;
  const detail::ScoredTag target{candidate, it->second, graph.frequency(candidate)};
  std::size_t rank = 1;
  for (const auto& [tag, score] : scores) {
    if (tag != candidate && detail::ranks_before({tag, score, graph.frequency(tag)}, target)) ++rank;
  }
  return rank;
}

/// Tags ordered by neighbor count (descending), ties lexicographic.
inline std::vector<std::pair<std::string, std::size_t>> top_degree_tags(const CooccurrenceGraph& graph,
                                                                        std::size_t limit) {
  std::vector<std::pair<std::string, std::size_t>> out;
  for (const auto& [tag, row] : graph.adjacency()) out.emplace_back(tag, row.size());
  std::stable_sort(out.begin(), out.end(), [](const auto& a, const auto& b) { return a.second > b.second; });
  if (out.size() > limit) out.resize(limit);
  return out;
}

// ---------------------------------------------------------------------------
// Graph file:
//   # cooccurrence-graph v1 N=<corpus size>
//   tag<TAB>frequency<TAB>neighbor:count,neighbor:count,...
// Tags and neighbors in lexicographic order.

inline constexpr std::string_view kGraphFormatVersion = "v1";

namespace detail {
inline void check_graph_tag(const std::string& tag) {
  if (tag.empty() || tag.find_first_of("\t\n\r:,") != std::string::npos) {
    throw InputError("tag '" + tag + "' cannot be stored in a graph file");
  }
}

inline std::uint64_t parse_count(std::string_view s, const std::string& where) {
  if (s.empty() || s.find_first_not_of("0123456789") != std::string_view::npos) {
    throw InputError(where + ": expected a non-negative integer, got '" + std::string(s) + "'");
  }
  return std::stoull(std::string(s));
}
}  // namespace detail

inline std::string write_graph_text(const CooccurrenceGraph& graph) {
  std::ostringstream out;
  out << "# cooccurrence-graph " << kGraphFormatVersion << " N=" << graph.corpus_size() << '\n';
  for (const auto& [tag, row] : graph.adjacency()) {
    detail::check_graph_tag(tag);
    out << tag << '\t' << graph.frequency(tag) << '\t';
    bool first = true;
    for (const auto& [nb, w] : row) {
      if (!first) out << ',';
      out << nb << ':' << w;
      first = false;
    }
    out << '\n';
  }
  return out.str();
}

inline CooccurrenceGraph read_graph_text(std::string_view text, const std::string& source = "<memory>") {
  CooccurrenceGraph graph;
  auto lines = split(text, '\n');
  if (!lines.empty() && lines.back().empty()) lines.pop_back();
  if (lines.empty()) throw InputError(source + ": missing graph header");
  const std::string expected_prefix = "# cooccurrence-graph " + std::string(kGraphFormatVersion) + " N=";
  if (lines[0].rfind(expected_prefix, 0) != 0) {
    throw InputError(source + ":1: unsupported graph header '" + lines[0] + "'");
  }
  graph.corpus_size_ = detail::parse_count(std::string_view(lines[0]).substr(expected_prefix.size()), source + ":1");

  for (std::size_t i = 1; i < lines.size(); ++i) {
    const std::string where = source + ":" + std::to_string(i + 1);
    const auto fields = split(lines[i], '\t');
    if (fields.size() != 3) throw InputError(where + ": expected 3 tab-separated fields");
    const std::string& tag = fields[0];
    detail::check_graph_tag(tag);
    if (graph.adjacency_.count(tag)) throw InputError(where + ": duplicate tag '" + tag + "'");
    graph.node_frequency_[tag] = detail::parse_count(fields[1], where);
    auto& row = graph.adjacency_[tag];
    if (fields[2].empty()) continue;
    for (const auto& item : split(fields[2], ',')) {
      const auto colon = item.rfind(':');
      if (colon == std::string::npos) throw InputError(where + ": malformed neighbor '" + item + "'");
      const std::string nb = item.substr(0, colon);
      detail::check_graph_tag(nb);
      if (nb == tag) throw InputError(where + ": self edge on '" + tag + "'");
      const auto w = detail::parse_count(std::string_view(item).substr(colon + 1), where);
      if (w == 0) throw InputError(where + ": zero edge weight");
      row[nb] = w;
    }
  }
  for (const auto& [a, row] : graph.adjacency_) {
    for (const auto& [b, w] : row) {
      auto it = graph.adjacency_.find(b);
      if (it == graph.adjacency_.end() || it->second.count(a) == 0 || it->second.at(a) != w) {
        throw InputError(source + ": asymmetric edge " + a + " - " + b);
      }
    }
  }
  return graph;
}

}  // namespace selfinject
