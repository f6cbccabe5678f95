#include <gtest/gtest.h>

#include <algorithm>

#include "selfinject/cooccurrence.hpp"
#include "selfinject/dataset_io.hpp"
#include "test_util.hpp"

using namespace selfinject;

namespace {

CooccurrenceGraph graph_of(const std::vector<TagSet>& corpus) { return build_graph(std::span<const TagSet>(corpus)); }

std::vector<TagSet> random_corpus(Rng& rng, std::size_t max_responses, std::size_t tag_count) {
  std::vector<TagSet> corpus(1 + rng.below(max_responses));
  for (auto& tags : corpus) {
    const std::size_t n = rng.below(tag_count + 1);
    for (std::size_t i = 0; i < n; ++i) tags.insert("t" + std::to_string(rng.below(tag_count)));
  }
  return corpus;
}

// Brute force: for every ordered pair (a < b) of distinct tags, count the
// responses holding both.
std::map<std::pair<std::string, std::string>, std::uint64_t> brute_force_edges(const std::vector<TagSet>& corpus) {
  TagSet all;
  for (const auto& t : corpus) all.insert(t.begin(), t.end());
  std::map<std::pair<std::string, std::string>, std::uint64_t> out;
  for (const auto& a : all) {
    for (const auto& b : all) {
      if (!(a < b)) continue;
      std::uint64_t n = 0;
      for (const auto& r : corpus) n += (r.count(a) && r.count(b)) ? 1 : 0;
      if (n > 0) out[{a, b}] = n;
    }
  }
  return out;
}

// Exhaustive scan over every node; returns the best tag by (score, freq, name).
std::optional<std::string> oracle_query(const CooccurrenceGraph& g, const TagSet& context, const TagSet& exclude) {
  struct Row {
    std::string tag;
    std::uint64_t score, freq;
  };
  std::vector<Row> rows;
  for (const auto& tag : g.nodes()) {
    if (exclude.count(tag)) continue;
    std::uint64_t score = 0;
    for (const auto& c : context) score += g.weight(tag, c);
    rows.push_back({tag, score, g.frequency(tag)});
  }
  if (rows.empty()) return std::nullopt;
  std::sort(rows.begin(), rows.end(), [](const Row& a, const Row& b) {
    if (a.score != b.score) return a.score > b.score;
    if (a.freq != b.freq) return a.freq > b.freq;
    return a.tag < b.tag;
  });
  return rows.front().tag;
}

}  // namespace

TEST(Graph, DirectCounts) {
  const auto g = graph_of({{"dog", "frisbee"}, {"dog", "frisbee"}, {"dog"}});
  EXPECT_EQ(g.weight("dog", "frisbee"), 2u);
  EXPECT_EQ(g.weight("frisbee", "dog"), 2u);
  EXPECT_EQ(g.frequency("dog"), 3u);
  EXPECT_EQ(g.frequency("frisbee"), 2u);
  EXPECT_EQ(g.corpus_size(), 3u);
}

TEST(Graph, SingleTagResponsesHaveNoEdges) {
  const auto g = graph_of({{"a"}, {"b"}, {"c"}});
  EXPECT_EQ(g.node_count(), 3u);
  EXPECT_EQ(g.edge_count(), 0u);
}

TEST(Graph, EmptyCorpusIsError) {
  EXPECT_THROW(graph_of({}), InputError);
}

TEST(Graph, FromObjectTagSets) {
  std::vector<ObjectTagSet> corpus(2);
  corpus[0].tags = {"a", "b"};
  corpus[1].tags = {"b", "c"};
  EXPECT_EQ(build_graph(std::span<const ObjectTagSet>(corpus)), graph_of({{"a", "b"}, {"b", "c"}}));
}

TEST(Graph, MatchesBruteForcePairCounter) {
  Rng rng(100);
  for (int trial = 0; trial < 20; ++trial) {
    auto corpus = random_corpus(rng, 100, 15);
    const auto g = graph_of(corpus);
    EXPECT_EQ(g.edge_weights(), brute_force_edges(corpus));
    for (const auto& [a, row] : g.adjacency()) {
      EXPECT_FALSE(row.count(a));
      for (const auto& [b, w] : row) EXPECT_EQ(g.weight(b, a), w);
    }
  }
}

TEST(Graph, PermutationInvariance) {
  Rng rng(11);
  auto corpus = random_corpus(rng, 60, 10);
  const auto g = graph_of(corpus);
  for (int i = 0; i < 10; ++i) {
    for (std::size_t j = corpus.size(); j > 1; --j) std::swap(corpus[j - 1], corpus[rng.below(j)]);
    EXPECT_EQ(graph_of(corpus), g);
  }
}

TEST(Graph, Monotonicity) {
  Rng rng(12);
  auto corpus = random_corpus(rng, 40, 8);
  auto before = graph_of(corpus);
  for (int i = 0; i < 20; ++i) {
    corpus.push_back(random_corpus(rng, 1, 8).front());
    const auto after = graph_of(corpus);
    for (const auto& [edge, w] : before.edge_weights()) EXPECT_GE(after.weight(edge.first, edge.second), w);
    for (const auto& [tag, f] : before.node_frequency()) EXPECT_GE(after.frequency(tag), f);
    before = after;
  }
}

TEST(Query, OnlyCandidate) {
  const auto g = graph_of({{"dog", "frisbee"}, {"dog", "frisbee"}, {"dog", "frisbee"}});
  EXPECT_EQ(query_hallucinated_object(g, {"dog"}, {"dog"}), "frisbee");
}

TEST(Query, ExhaustedCandidates) {
  const auto g = graph_of({{"dog", "frisbee"}});
  EXPECT_EQ(query_hallucinated_object(g, {}, g.nodes()), std::nullopt);
}

TEST(Query, FallsBackToMostFrequent) {
  const auto g = graph_of({{"a", "b"}, {"c"}, {"c"}, {"d"}});
  // Nothing co-occurs with "d"; the most frequent non-excluded tag wins.
  EXPECT_EQ(query_hallucinated_object(g, {"d"}, {"d"}), "c");
  EXPECT_EQ(query_hallucinated_object(g, {}, {}), "c");
}

TEST(Query, TieBreaksByFrequencyThenName) {
  // b and c both score 1 with a; c is more frequent.
  auto g = graph_of({{"a", "b"}, {"a", "c"}, {"c"}});
  EXPECT_EQ(query_hallucinated_object(g, {"a"}, {"a"}), "c");
  g = graph_of({{"a", "c"}, {"a", "b"}});
  EXPECT_EQ(query_hallucinated_object(g, {"a"}, {"a"}), "b");
}

TEST(Query, SumsOverContext) {
  // x co-occurs once with each of a, b; y twice with a only.
  const auto g = graph_of({{"a", "b", "x"}, {"a", "y"}, {"a", "y"}, {"b", "z"}});
  EXPECT_EQ(query_hallucinated_object(g, {"a", "b"}, {"a", "b"}), "y");
  EXPECT_EQ(query_hallucinated_object(g, {"a", "b"}, {"a", "b", "y"}), "x");
}

TEST(Query, MatchesExhaustiveScanOn50TagGraphs) {
  Rng rng(50);
  for (int trial = 0; trial < 50; ++trial) {
    const auto corpus = random_corpus(rng, 200, 50);
    const auto g = graph_of(corpus);
    for (int q = 0; q < 20; ++q) {
      TagSet context, exclude;
      for (std::size_t i = rng.below(5); i > 0; --i) context.insert("t" + std::to_string(rng.below(50)));
      for (std::size_t i = rng.below(30); i > 0; --i) exclude.insert("t" + std::to_string(rng.below(50)));
      if (rng.below(2)) exclude.insert(context.begin(), context.end());
      const auto got = query_hallucinated_object(g, context, exclude);
      ASSERT_EQ(got, oracle_query(g, context, exclude));
      if (got) {
        EXPECT_FALSE(exclude.count(*got));
      }
      EXPECT_EQ(query_hallucinated_object(g, context, exclude), got);
    }
  }
}

TEST(Rank, UniqueAndAbsent) {
  const auto g = graph_of({{"a", "b"}, {"c"}});
  EXPECT_EQ(cooccurrence_rank(g, {"a"}, "b"), 1u);
  EXPECT_EQ(cooccurrence_rank(g, {"a"}, "c"), std::nullopt);
  EXPECT_EQ(cooccurrence_rank(g, {"a"}, "missing"), std::nullopt);
}

TEST(Rank, MatchesFullSortOracle) {
  Rng rng(77);
  for (int trial = 0; trial < 30; ++trial) {
    const auto g = graph_of(random_corpus(rng, 80, 20));
    TagSet anchors;
    for (std::size_t i = 1 + rng.below(4); i > 0; --i) anchors.insert("t" + std::to_string(rng.below(20)));
    struct Row {
      std::string tag;
      std::uint64_t score, freq;
    };
    std::vector<Row> table;
    for (const auto& tag : g.nodes()) {
      if (anchors.count(tag)) continue;
      std::uint64_t s = 0;
      for (const auto& a : anchors) s += g.weight(tag, a);
      table.push_back({tag, s, g.frequency(tag)});
    }
    std::sort(table.begin(), table.end(), [](const Row& a, const Row& b) {
      return std::tie(b.score, b.freq, a.tag) < std::tie(a.score, a.freq, b.tag);
    });
    for (std::size_t i = 0; i < table.size(); ++i) {
      const auto expected = table[i].score == 0 ? std::nullopt : std::optional<std::size_t>(i + 1);
      EXPECT_EQ(cooccurrence_rank(g, anchors, table[i].tag), expected) << table[i].tag;
    }
  }
}

TEST(GraphFile, RoundTripIsExact) {
  Rng rng(5);
  selfinject::testing::TempDir dir;
  for (int trial = 0; trial < 10; ++trial) {
    const auto g = graph_of(random_corpus(rng, 50, 12));
    const auto text = write_graph_text(g);
    EXPECT_EQ(read_graph_text(text), g);
    write_graph(g, dir.file("g.tsv"));
    EXPECT_EQ(read_file(dir.file("g.tsv")), text);
    EXPECT_EQ(read_graph(dir.file("g.tsv")), g);
  }
}

TEST(GraphFile, LayoutIsSortedAndVersioned) {
  const auto g = graph_of({{"dog", "frisbee"}, {"dog", "frisbee"}, {"dog", "traffic light"}});
  EXPECT_EQ(write_graph_text(g),
            "# cooccurrence-graph v1 N=3\n"
            "dog\t3\tfrisbee:2,traffic light:1\n"
            "frisbee\t2\tdog:2\n"
            "traffic light\t1\tdog:1\n");
}

TEST(GraphFile, RejectsMalformedInput) {
  EXPECT_THROW(read_graph_text(""), InputError);
  EXPECT_THROW(read_graph_text("# cooccurrence-graph v9 N=1\n"), InputError);
  EXPECT_THROW(read_graph_text("# cooccurrence-graph v1 N=1\na\t1\n"), InputError);
  EXPECT_THROW(read_graph_text("# cooccurrence-graph v1 N=1\na\t1\tb:1\n"), InputError);  // asymmetric
  EXPECT_THROW(read_graph_text("# cooccurrence-graph v1 N=1\na\t1\ta:1\n"), InputError);  // self edge
  EXPECT_THROW(read_graph_text("# cooccurrence-graph v1 N=1\na\tx\t\n"), InputError);
}

TEST(TopDegree, OrdersByDegreeThenName) {
  const auto g = graph_of({{"a", "b", "c"}, {"c", "d"}});
  const auto top = top_degree_tags(g, 2);
  ASSERT_EQ(top.size(), 2u);
  EXPECT_EQ(top[0], (std::pair<std::string, std::size_t>{"c", 3}));
  EXPECT_EQ(top[1], (std::pair<std::string, std::size_t>{"a", 2}));
}
