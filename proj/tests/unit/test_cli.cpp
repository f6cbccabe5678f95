#include <gtest/gtest.h>

#include <cmath>
#include <set>
#include <sstream>

#include <json.hpp>

#include "selfinject/selfinject.hpp"
#include "test_util.hpp"

using namespace selfinject;
using selfinject::testing::data_file;
using selfinject::testing::run_command;
using selfinject::testing::shell_quote;
using selfinject::testing::TempDir;
using selfinject::testing::write_text;

namespace {

std::string cli(const std::string& args) {
  return shell_quote(SELFINJECT_CLI) + " --lexicon " + shell_quote(data_file("lexicon.txt")) + " " + args;
}

std::string q(const std::string& s) { return shell_quote(s); }

// First word after `key ` on a line that starts with it.
std::string field(const std::string& output, const std::string& key) {
  std::istringstream in(output);
  for (std::string line; std::getline(in, line);) {
    if (line.rfind(key + " ", 0) == 0) {
      std::istringstream rest(line.substr(key.size() + 1));
      std::string word;
      rest >> word;
      return word;
    }
  }
  return "";
}

nlohmann::json last_json_line(const std::string& path) {
  const auto text = read_file(path);
  auto end = text.find_last_not_of('\n');
  auto begin = text.rfind('\n', end);
  return nlohmann::json::parse(text.substr(begin == std::string::npos ? 0 : begin + 1, end + 1));
}

std::string response_line(const std::string& id, const std::string& text) {
  return nlohmann::ordered_json{{"sample_id", id}, {"image_ref", "img/" + id}, {"prompt", "Describe."}, {"response", text}}
             .dump() +
         "\n";
}

}  // namespace

TEST(Cli, HelpListsSubcommands) {
  const auto [rc, out] = run_command(q(SELFINJECT_CLI) + " --help");
  EXPECT_EQ(rc, 0);
  for (const char* sub : {"generate", "build-graph", "inject", "iterate", "eval", "toy-dpo", "export"}) {
    EXPECT_NE(out.find(sub), std::string::npos) << sub;
  }
}

TEST(Cli, ExitCodes) {
  TempDir dir;
  EXPECT_EQ(run_command(q(SELFINJECT_CLI)).first, 2);  // no subcommand
  EXPECT_EQ(run_command(q(SELFINJECT_CLI) + " frobnicate").first, 2);
  EXPECT_EQ(run_command(q(SELFINJECT_CLI) + " --config " + q(dir.file("missing.toml")) + " export --dataset a --out b")
                .first,
            2);
  EXPECT_EQ(run_command(cli("build-graph --corpus " + q(dir.file("nope.jsonl")) + " --out " + q(dir.file("g"))))
                .first,
            2);
  write_text(dir.file("bad.jsonl"), "{not json\n");
  EXPECT_EQ(run_command(cli("build-graph --corpus " + q(dir.file("bad.jsonl")) + " --out " + q(dir.file("g")))).first,
            3);
  // Output directory that cannot exist.
  write_text(dir.file("blocker"), "");
  write_text(dir.file("r.jsonl"), response_line("a", "A dog runs. A cat sleeps."));
  EXPECT_EQ(run_command(cli("build-graph --corpus " + q(dir.file("r.jsonl")) + " --out " +
                            q(dir.file("blocker") + "/sub/g.tsv")))
                .first,
            4);
}

TEST(Cli, BuildGraphCountsMatchBruteForceAndRerunsAreIdentical) {
  TempDir dir;
  const auto responses = dir.file("r.jsonl");
  ASSERT_EQ(run_command(cli("generate --samples " + q(data_file("samples.jsonl")) + " --out " + q(responses))).first, 0);
  const auto [rc, out] = run_command(cli("build-graph --corpus " + q(responses) + " --out " + q(dir.file("g1.tsv"))));
  ASSERT_EQ(rc, 0) << out;

  // Brute force: distinct tags, and distinct unordered pairs seen in one response.
  const auto lexicon = load_lexicon(data_file("lexicon.txt"));
  std::set<std::string> nodes;
  std::set<std::pair<std::string, std::string>> edges;
  for (const auto& r : read_records<ResponseRecord>(responses)) {
    const auto tags = parse_objects(segment_sentences(r.response), lexicon).tags;
    const std::vector<std::string> v(tags.begin(), tags.end());
    nodes.insert(v.begin(), v.end());
    for (std::size_t i = 0; i < v.size(); ++i) {
      for (std::size_t j = i + 1; j < v.size(); ++j) edges.emplace(std::min(v[i], v[j]), std::max(v[i], v[j]));
    }
  }
  EXPECT_EQ(field(out, "nodes"), std::to_string(nodes.size()));
  EXPECT_EQ(field(out, "edges"), std::to_string(edges.size()));
  EXPECT_NE(out.find("top tags by degree"), std::string::npos);

  ASSERT_EQ(run_command(cli("build-graph --corpus " + q(responses) + " --out " + q(dir.file("g2.tsv")))).first, 0);
  EXPECT_EQ(read_file(dir.file("g1.tsv")), read_file(dir.file("g2.tsv")));
}

TEST(Cli, BuildGraphOnEmptyCorpusIsInputError) {
  TempDir dir;
  write_text(dir.file("empty.jsonl"), "");
  const auto [rc, out] = run_command(cli("build-graph --corpus " + q(dir.file("empty.jsonl")) + " --out " +
                                         q(dir.file("g.tsv"))));
  EXPECT_EQ(rc, 3);
  EXPECT_FALSE(std::filesystem::exists(dir.file("g.tsv")));
}

TEST(Cli, InjectIsDeterministicAndDefaultsToRateOneFifth) {
  TempDir dir;
  const auto responses = dir.file("r.jsonl"), graph = dir.file("g.tsv");
  ASSERT_EQ(run_command(cli("generate --samples " + q(data_file("samples.jsonl")) + " --out " + q(responses))).first, 0);
  ASSERT_EQ(run_command(cli("build-graph --corpus " + q(responses) + " --out " + q(graph))).first, 0);
  std::string outputs[2];
  for (int run = 0; run < 2; ++run) {
    const auto out = dir.file("d" + std::to_string(run) + ".jsonl");
    const auto workers = run == 0 ? " --workers 1" : " --workers 7";
    const auto [rc, text] = run_command(cli(std::string(workers) + " inject --corpus " + q(responses) + " --graph " +
                                            q(graph) + " --out " + q(out)));
    ASSERT_EQ(rc, 0) << text;
    EXPECT_EQ(field(text, "rho"), "0.2");
    outputs[run] = read_file(out);
  }
  EXPECT_EQ(outputs[0], outputs[1]);
  for (const auto& r : read_records<PreferenceRecord>(dir.file("d0.jsonl"))) {
    EXPECT_EQ(r.rho, 0.2);
    const auto L = segment_sentences(r.dispreferred_text).size();
    EXPECT_EQ(r.replace_indices.size(), std::min<std::size_t>(static_cast<std::size_t>(std::floor(0.2 * L + 0.5 + 1e-9)), L - 1));
  }
}

TEST(Cli, ShortResponsesAtLowRateAreAllDiscardedWithWarning) {
  TempDir dir;
  const auto responses = dir.file("r.jsonl"), graph = dir.file("g.tsv");
  write_text(responses, response_line("a", "A dog runs. A cat sleeps. A car waits.") +
                            response_line("b", "A dog sits on a bench. A tree stands.") +
                            response_line("c", "A bus stops. A person waits. A bench is empty. A tree sways."));
  ASSERT_EQ(run_command(cli("build-graph --corpus " + q(responses) + " --out " + q(graph))).first, 0);
  const auto [rc, out] = run_command(cli("inject --rho 0.1 --corpus " + q(responses) + " --graph " + q(graph) +
                                         " --out " + q(dir.file("d.jsonl")) + " --discards " + q(dir.file("x.tsv"))));
  EXPECT_EQ(rc, 0) << out;
  EXPECT_EQ(field(out, "emitted"), "0");
  EXPECT_EQ(field(out, "discarded"), "3");
  EXPECT_NE(out.find("zero-count\t3"), std::string::npos) << out;
  EXPECT_NE(out.find("[warning]"), std::string::npos) << out;
  EXPECT_EQ(read_file(dir.file("d.jsonl")), "");
  EXPECT_EQ(read_records<PreferenceRecord>(dir.file("d.jsonl")).size(), 0u);
}

TEST(Cli, InjectRejectsRateOutsideUnitInterval) {
  TempDir dir;
  write_text(dir.file("r.jsonl"), response_line("a", "A dog runs. A cat sleeps."));
  ASSERT_EQ(run_command(cli("build-graph --corpus " + q(dir.file("r.jsonl")) + " --out " + q(dir.file("g")))).first, 0);
  for (const char* rho : {"0", "1.5", "-0.2"}) {
    EXPECT_EQ(run_command(cli(std::string("inject --rho ") + rho + " --corpus " + q(dir.file("r.jsonl")) +
                              " --graph " + q(dir.file("g")) + " --out " + q(dir.file("d"))))
                  .first,
              2)
        << rho;
  }
}

TEST(Cli, IterateDefaultScheduleWritesThreeIterations) {
  TempDir dir;
  const auto [rc, out] = run_command(cli("iterate --samples " + q(data_file("samples.jsonl")) + " --runs-root " +
                                         q(dir.path().string()) + " --run-id r"));
  ASSERT_EQ(rc, 0) << out;
  const double expected[] = {0.6, 0.4, 0.2};
  for (int t = 1; t <= 3; ++t) {
    const auto iter = dir.path() / "r" / ("iter-" + std::to_string(t));
    ASSERT_TRUE(std::filesystem::exists(iter / "dataset.jsonl")) << t;
    for (const auto& r : read_records<PreferenceRecord>((iter / "dataset.jsonl").string())) {
      EXPECT_EQ(r.iteration, t);
      EXPECT_EQ(r.rho, expected[t - 1]);
    }
  }
  EXPECT_FALSE(std::filesystem::exists(dir.path() / "r" / "iter-4"));
  // Reusing a run directory without --resume is refused.
  EXPECT_EQ(run_command(cli("iterate --samples " + q(data_file("samples.jsonl")) + " --runs-root " +
                            q(dir.path().string()) + " --run-id r"))
                .first,
            2);
}

TEST(Cli, ConfigFileSuppliesSubcommandOptions) {
  TempDir dir;
  const auto cfg = dir.file("run.toml");
  write_text(cfg, "lexicon = " + nlohmann::json(data_file("lexicon.txt")).dump() + "\nseed = 7\n[iterate]\nsamples = " +
                      nlohmann::json(data_file("samples.jsonl")).dump() + "\nruns-root = " +
                      nlohmann::json(dir.path().string()).dump() +
                      "\nrun-id = \"cfg\"\nschedule = \"constant\"\nrho-start = 0.5\niterations = 2\n");
  const auto [rc, out] = run_command(q(SELFINJECT_CLI) + " --config " + q(cfg) + " iterate");
  ASSERT_EQ(rc, 0) << out;
  EXPECT_TRUE(std::filesystem::exists(dir.path() / "cfg" / "iter-2" / "dataset.jsonl"));
  EXPECT_FALSE(std::filesystem::exists(dir.path() / "cfg" / "iter-3"));
  for (const auto& r : read_records<PreferenceRecord>((dir.path() / "cfg" / "iter-2" / "dataset.jsonl").string())) {
    EXPECT_EQ(r.rho, 0.5);
  }
}

TEST(Cli, EvalChairOnDefinitionalExample) {
  TempDir dir;
  write_text(dir.file("r.jsonl"), response_line("a", "A dog sits on a couch."));
  write_annotations({{"a", {"dog"}}}, dir.file("ann.tsv"));
  const auto [rc, out] = run_command(cli("eval chair --responses " + q(dir.file("r.jsonl")) + " --annotations " +
                                         q(dir.file("ann.tsv")) + " --out " + q(dir.file("c.jsonl"))));
  ASSERT_EQ(rc, 0) << out;
  EXPECT_EQ(field(out, "chair_i"), "0.500000");
  EXPECT_EQ(field(out, "chair_s"), "1.000000");
  const auto summary = last_json_line(dir.file("c.jsonl"));
  EXPECT_EQ(summary["chair_i"], 0.5);
  EXPECT_EQ(summary["chair_s"], 1.0);
}

TEST(Cli, EvalPdmhWithMockBackendIsZero) {
  TempDir dir;
  const auto responses = dir.file("r.jsonl");
  ASSERT_EQ(run_command(cli("generate --samples " + q(data_file("samples.jsonl")) + " --out " + q(responses))).first, 0);
  const auto [rc, out] =
      run_command(cli("eval pdmh --max-steps 8 --responses " + q(responses) + " --out " + q(dir.file("p.jsonl"))));
  ASSERT_EQ(rc, 0) << out;
  EXPECT_EQ(field(out, "max_pdmh"), "0.000000");
  EXPECT_EQ(last_json_line(dir.file("p.jsonl"))["max"], 0.0);
}

TEST(Cli, EvalGapWithToyModelMatchesHandComputedLogprobs) {
  TempDir dir;
  // Tokens a, b and unknown; scoring conditions on the prompt plus a
  // newline, which is outside printable ASCII and lands on the unknown row.
  // Rows: after a, after b, after unknown, start.
  const std::vector<std::vector<double>> rows = {{0.0, 1.0, -2.0}, {2.0, -1.0, 0.0}, {0.5, 0.5, -1.0}, {0, 0, 0}};
  nlohmann::json model{{"vocabulary", {"a", "b", std::string(kUnknownToken)}}, {"logits", rows}};
  write_text(dir.file("toy.json"), model.dump());
  auto lp = [&](std::size_t row, std::size_t tok) {
    double z = 0.0;
    for (double x : rows[row]) z += std::exp(x);
    return rows[row][tok] - std::log(z);
  };
  auto seq = [&](const std::string& text) {
    double total = 0.0;
    std::size_t prev = 2;
    for (char c : text) {
      const std::size_t id = c == 'a' ? 0 : 1;
      total += lp(prev, id);
      prev = id;
    }
    return total;
  };
  const std::vector<std::pair<std::string, std::string>> sides = {{"bab", "bba"}, {"aaab", "abbb"}, {"b", "a"}};
  std::string lines;
  double oracle = 0.0;
  for (std::size_t i = 0; i < sides.size(); ++i) {
    PreferenceRecord r;
    r.sample_id = "p" + std::to_string(i);
    r.prompt = "a";
    r.preferred_text = sides[i].first;
    r.dispreferred_text = sides[i].second;
    r.replace_indices = {1};
    r.hallucinated_objects = {"x"};
    r.template_ids = {0};
    r.rho = 0.5;
    lines += RecordCodec<PreferenceRecord>::to_json(r).dump() + "\n";
    oracle += seq(sides[i].first) - seq(sides[i].second);
  }
  oracle /= static_cast<double>(sides.size());
  write_text(dir.file("d.jsonl"), lines);
  const auto [rc, out] = run_command(q(SELFINJECT_CLI) + " --backend toy --toy-model " + q(dir.file("toy.json")) +
                                     " eval gap --bins 3 --dataset " + q(dir.file("d.jsonl")) + " --out " +
                                     q(dir.file("gap.jsonl")));
  ASSERT_EQ(rc, 0) << out;
  const auto summary = last_json_line(dir.file("gap.jsonl"));
  EXPECT_EQ(summary["pairs"], 3);
  EXPECT_NEAR(summary["mean_gap"].get<double>(), oracle, 1e-12);
}

TEST(Cli, ToyModelFileErrorsAreInputErrors) {
  TempDir dir;
  write_text(dir.file("toy.json"), R"({"vocabulary": ["a", "b"], "logits": [[0, 1], [0]]})");
  write_text(dir.file("d.jsonl"), "");
  EXPECT_EQ(run_command(q(SELFINJECT_CLI) + " --backend toy --toy-model " + q(dir.file("toy.json")) +
                        " eval gap --dataset " + q(dir.file("d.jsonl")))
                .first,
            3);
  EXPECT_EQ(run_command(q(SELFINJECT_CLI) + " --backend toy eval gap --dataset " + q(dir.file("d.jsonl"))).first, 2);
}

TEST(Cli, ToyDpoPrintsOneLinePerEpochWithFallingLoss) {
  const auto [rc, out] = run_command(q(SELFINJECT_CLI) + " --seed 3 toy-dpo --epochs 40");
  ASSERT_EQ(rc, 0);
  std::vector<double> losses;
  std::size_t pos = 0;
  while (pos < out.size()) {
    const auto end = out.find('\n', pos);
    const auto line = out.substr(pos, end - pos);
    pos = end + 1;
    if (line.empty() || line[0] != '{') continue;  // stderr summary
    const auto j = nlohmann::json::parse(line);
    EXPECT_EQ(j["epoch"], losses.size());
    losses.push_back(j["mean_loss"]);
  }
  ASSERT_EQ(losses.size(), 41u);
  EXPECT_NEAR(losses.front(), std::log(2.0), 1e-12);
  EXPECT_LT(losses.back(), losses.front());
}

TEST(Cli, ExportWritesTrainingLines) {
  TempDir dir;
  const auto [rc, out] = run_command(cli("export --dataset " + q(selfinject::testing::fixture_file("preference_pairs.jsonl")) +
                                         " --out " + q(dir.file("e.jsonl"))));
  ASSERT_EQ(rc, 0) << out;
  EXPECT_NE(out.find("exported 3 records"), std::string::npos);
  const auto first = nlohmann::json::parse(read_file(dir.file("e.jsonl")).substr(0, read_file(dir.file("e.jsonl")).find('\n')));
  EXPECT_TRUE(first.contains("chosen"));
  EXPECT_TRUE(first.contains("rejected"));
}

TEST(Cli, EvalPositionalFromDatasetCountsEveryReplacedSentence) {
  TempDir dir;
  const auto responses = dir.file("r.jsonl"), graph = dir.file("g.tsv"), dataset = dir.file("d.jsonl");
  ASSERT_EQ(run_command(cli("generate --samples " + q(data_file("samples.jsonl")) + " --out " + q(responses))).first, 0);
  ASSERT_EQ(run_command(cli("build-graph --corpus " + q(responses) + " --out " + q(graph))).first, 0);
  ASSERT_EQ(run_command(cli("inject --rho 0.6 --corpus " + q(responses) + " --graph " + q(graph) + " --out " +
                            q(dataset)))
                .first,
            0);
  const auto [rc, out] = run_command(cli("eval positional --bins 4 --dataset " + q(dataset) + " --out " +
                                         q(dir.file("p.jsonl"))));
  ASSERT_EQ(rc, 0) << out;
  std::size_t sentences = 0, flagged = 0;
  for (const auto& r : read_records<PreferenceRecord>(dataset)) {
    sentences += segment_sentences(r.dispreferred_text).size();
    flagged += r.replace_indices.size();
  }
  std::size_t got_sentences = 0, got_flagged = 0;
  std::istringstream lines(read_file(dir.file("p.jsonl")));
  for (std::string line; std::getline(lines, line);) {
    const auto j = nlohmann::json::parse(line);
    got_sentences += j["sentences"].get<std::size_t>();
    got_flagged += j["hallucinated"].get<std::size_t>();
  }
  EXPECT_EQ(got_sentences, sentences);
  EXPECT_EQ(got_flagged, flagged);
}

TEST(Cli, EvalCooccurStatsCountsHallucinatedObjects) {
  TempDir dir;
  write_text(dir.file("r.jsonl"), response_line("a", "A dog chases a frisbee. A cat sleeps.") +
                                      response_line("b", "A dog plays with a frisbee on the grass."));
  write_annotations({{"a", {"dog"}}, {"b", {"dog", "frisbee"}}}, dir.file("ann.tsv"));
  const auto [rc, out] = run_command(cli("eval cooccur-stats --responses " + q(dir.file("r.jsonl")) +
                                         " --annotations " + q(dir.file("ann.tsv"))));
  ASSERT_EQ(rc, 0) << out;
  // Response a mentions frisbee and cat without them being present.
  EXPECT_EQ(field(out, "hallucinated"), "2");
}
