// selfinject: command-line front end for the preference-data pipeline.

#include <cstdio>
#include <filesystem>
#include <iomanip>
#include <iostream>
#include <memory>
#include <sstream>

#include <CLI11.hpp>

#include "selfinject/selfinject.hpp"

namespace fs = std::filesystem;
using namespace selfinject;

namespace {

enum ExitCode : int { kOk = 0, kFailure = 1, kConfig = 2, kInputData = 3, kIo = 4, kBackendBudget = 5 };

class BudgetExceeded : public Error {
 public:
  using Error::Error;
};

struct Globals {
  std::string lexicon;
  std::string templates;
  std::string abbreviations;
  bool strict_lexicon = false;
  std::uint64_t seed = 0;
  std::size_t workers = 8;
  std::size_t top_k = 5;
  std::string backend = "mock";
  std::string toy_model;
  int response_max_tokens = 512;
  double response_temperature = 0.0;
  int completion_max_tokens = 48;
  double completion_temperature = 0.0;
  HttpBackendConfig http;
  int http_retries = 3;
  int http_backoff_ms = 200;
};

void require_file(const std::string& path, const std::string& what) {
  if (path.empty()) throw ConfigError(what + " path is required");
  std::error_code ec;
  if (!fs::is_regular_file(path, ec)) throw ConfigError(what + " '" + path + "' does not exist");
}

SynonymLexicon lexicon_of(const Globals& g) {
  require_file(g.lexicon, "lexicon");
  return load_lexicon(g.lexicon, SynonymLexicon::Options{g.strict_lexicon});
}

AbbreviationList abbreviations_of(const Globals& g) {
  if (g.abbreviations.empty()) return default_abbreviations();
  require_file(g.abbreviations, "abbreviations");
  return load_abbreviations(g.abbreviations);
}

std::vector<GuidingTemplate> templates_of(const Globals& g) {
  if (g.templates.empty()) return default_templates();
  require_file(g.templates, "templates");
  return load_templates(g.templates);
}

std::unique_ptr<Backend> backend_of(const Globals& g) {
  if (g.backend == "mock") return std::make_unique<MockBackend>();
  if (g.backend == "toy") {
    require_file(g.toy_model, "toy model");
    return std::make_unique<ToyBackend>(load_toy_backend(g.toy_model));
  }
  if (g.backend == "http") {
    HttpBackendConfig cfg = g.http;
    cfg.retry.max_attempts = g.http_retries;
    cfg.retry.initial_backoff = std::chrono::milliseconds(g.http_backoff_ms);
    return std::make_unique<HttpBackend>(cfg);
  }
  throw ConfigError("unknown backend '" + g.backend + "'");
}

template <typename R>
std::vector<R> read_input(const std::string& path, const std::string& what) {
  require_file(path, what);
  return read_records<R>(path);
}

std::string fixed(double v, int digits = 6) {
  std::ostringstream s;
  s << std::fixed << std::setprecision(digits) << v;
  return s.str();
}

void write_lines(const std::string& path, const std::vector<OrderedJson>& lines) {
  std::string out;
  for (const auto& j : lines) out += j.dump() + "\n";
  write_text_atomic(path, out);
}

std::vector<TaggedResponse> tag_responses(const std::vector<ResponseRecord>& responses, const SynonymLexicon& lexicon,
                                          const AbbreviationList& abbreviations) {
  std::vector<TaggedResponse> out;
  out.reserve(responses.size());
  for (const auto& r : responses) {
    out.push_back({r.sample_id, parse_objects(segment_sentences(r.response, abbreviations), lexicon)});
  }
  return out;
}

// Preference datasets can stand in for response files: pick one side.
std::vector<ResponseRecord> responses_from(const std::string& responses_path, const std::string& dataset_path,
                                           const std::string& side) {
  if (!responses_path.empty() && !dataset_path.empty()) throw ConfigError("give --responses or --dataset, not both");
  if (!responses_path.empty()) return read_input<ResponseRecord>(responses_path, "responses");
  if (dataset_path.empty()) throw ConfigError("one of --responses or --dataset is required");
  if (side != "preferred" && side != "dispreferred") throw ConfigError("--side must be preferred or dispreferred");
  std::vector<ResponseRecord> out;
  for (const auto& p : read_input<PreferenceRecord>(dataset_path, "dataset")) {
    out.push_back({p.sample_id, p.image_ref, p.prompt, side == "preferred" ? p.preferred_text : p.dispreferred_text});
  }
  return out;
}

// ---------------------------------------------------------------------------
// Subcommands

struct GenerateArgs {
  std::string samples, out;
  int iteration = 0;
};

int cmd_generate(const Globals& g, const GenerateArgs& a) {
  const auto samples = read_input<UnannotatedSample>(a.samples, "samples");
  const auto backend = backend_of(g);
  std::vector<ResponseRecord> out(samples.size());
  parallel_for(samples.size(), g.workers, [&](std::size_t i) {
    const auto& s = samples[i];
    GenerationRequest req;
    req.prompt = s.prompt;
    req.image_ref = s.image_ref;
    req.max_tokens = g.response_max_tokens;
    req.temperature = g.response_temperature;
    req.seed = derive_seed(g.seed, s.sample_id, static_cast<std::uint64_t>(a.iteration));
    out[i] = {s.sample_id, s.image_ref, s.prompt, backend->generate(req).text};
  });
  write_records(out, a.out);
  std::cout << "generated " << out.size() << " responses -> " << a.out << "\n";
  return kOk;
}

struct BuildGraphArgs {
  std::string corpus, out;
};

int cmd_build_graph(const Globals& g, const BuildGraphArgs& a) {
  const auto responses = read_input<ResponseRecord>(a.corpus, "corpus");
  const auto tags = corpus_tags(responses, lexicon_of(g), abbreviations_of(g));
  if (tags.empty()) throw InputError("corpus '" + a.corpus + "' has no non-empty responses");
  const auto graph = build_graph(std::span<const TagSet>(tags));
  write_graph(graph, a.out);
  std::cout << "responses " << graph.corpus_size() << "\n"
            << "nodes " << graph.node_count() << "\n"
            << "edges " << graph.edge_count() << "\n"
            << "top tags by degree:\n";
  for (const auto& [tag, degree] : top_degree_tags(graph, 10)) {
    std::cout << "  " << tag << "\t" << degree << "\n";
  }
  return kOk;
}

struct InjectArgs {
  std::string corpus, graph, out, discards;
  double rho = 0.2;
  int iteration = 0;
  double max_failure_fraction = 0.1;
};

int cmd_inject(const Globals& g, const InjectArgs& a) {
  const auto responses = read_input<ResponseRecord>(a.corpus, "corpus");
  require_file(a.graph, "graph");
  const auto graph = read_graph(a.graph);
  const auto lexicon = lexicon_of(g);
  const auto abbreviations = abbreviations_of(g);
  const auto templates = templates_of(g);
  if (!(a.rho > 0.0 && a.rho <= 1.0)) throw ConfigError("--rho must lie in (0, 1], got " + fixed(a.rho, 3));

  TagSet corpus_space;
  for (const auto& t : corpus_tags(responses, lexicon, abbreviations)) corpus_space.insert(t.begin(), t.end());
  const auto nodes = graph.nodes();
  if (std::none_of(corpus_space.begin(), corpus_space.end(), [&](const auto& t) { return nodes.count(t) > 0; })) {
    log_warning("corpus tags and graph tags do not overlap; was the graph built from this corpus?");
  }

  const auto backend = backend_of(g);
  InjectionSettings settings{a.rho, a.iteration, g.seed, g.completion_max_tokens, g.completion_temperature, g.workers};
  const auto outcomes = inject_corpus(responses, graph, lexicon, abbreviations, templates, *backend, settings);

  std::vector<PreferenceRecord> dataset;
  std::map<std::string, std::size_t> reasons;
  std::string discard_log;
  std::size_t backend_failures = 0;
  for (const auto& o : outcomes) {
    if (const auto* p = std::get_if<PreferencePair>(&o.result)) {
      dataset.push_back(to_record(*p));
    } else {
      const auto& d = std::get<Discard>(o.result);
      ++reasons[std::string(to_string(d.reason))];
      if (d.reason == DiscardReason::kBackendFailure) ++backend_failures;
      discard_log += o.sample_id + '\t' + std::string(to_string(d.reason)) + '\t' + collapse_whitespace(d.detail) + '\n';
    }
  }
  write_records(dataset, a.out);
  if (!a.discards.empty()) write_text_atomic(a.discards, discard_log);

  std::cout << "rho " << a.rho << "\n"
            << "emitted " << dataset.size() << "\n"
            << "discarded " << outcomes.size() - dataset.size() << "\n";
  for (const auto& [reason, n] : reasons) std::cout << "  " << reason << "\t" << n << "\n";
  if (dataset.empty() && !outcomes.empty()) log_warning("every sample was discarded");

  const double fraction =
      outcomes.empty() ? 0.0 : static_cast<double>(backend_failures) / static_cast<double>(outcomes.size());
  if (fraction > a.max_failure_fraction) {
    throw BudgetExceeded(std::to_string(backend_failures) + " of " + std::to_string(outcomes.size()) +
                         " samples hit backend failures (budget " + fixed(a.max_failure_fraction, 3) + ")");
  }
  return kOk;
}

struct IterateArgs {
  std::string samples, runs_root = "runs", run_id, schedule = "linear_decreasing", hook;
  double rho_start = 0.8, rho_step = 0.2;
  int iterations = 3;
  bool resume = false;
  std::size_t fail_after_generations = 0;  // 0 = off
};

int cmd_iterate(const Globals& g, const IterateArgs& a) {
  if (a.run_id.empty()) throw ConfigError("--run-id is required");
  PipelineConfig config;
  config.samples = read_input<UnannotatedSample>(a.samples, "samples");
  config.lexicon = lexicon_of(g);
  config.abbreviations = abbreviations_of(g);
  config.templates = templates_of(g);
  config.schedule = {parse_schedule_kind(a.schedule), a.rho_start, a.rho_step, a.iterations};
  config.master_seed = g.seed;
  config.response_max_tokens = g.response_max_tokens;
  config.response_temperature = g.response_temperature;
  config.completion_max_tokens = g.completion_max_tokens;
  config.completion_temperature = g.completion_temperature;
  config.workers = g.workers;
  config.run_dir = fs::path(a.runs_root) / a.run_id;
  config.hook_command = a.hook;
  if (a.fail_after_generations > 0) config.fail_after_generations = a.fail_after_generations;
  config.schedule.validate();

  const auto backend = backend_of(g);
  const auto records = run_pipeline(config, *backend, a.resume);
  std::cout << "run " << config.run_dir.string() << "\n";
  std::cout << "t\trho\temitted\tdiscarded\tmean_replaced\n";
  for (const auto& r : records) {
    std::cout << r.t << "\t" << fixed(r.rho, 3) << "\t" << r.n_emitted << "\t" << r.n_discarded << "\t"
              << fixed(r.mean_replaced_count, 3) << "\n";
  }
  return kOk;
}

struct EvalArgs {
  std::string responses, dataset, side = "preferred", annotations, graph, out;
  std::size_t bins = 0;  // 0 = subcommand default
  std::size_t max_steps = 0;
};

AnnotationMap annotations_of(const EvalArgs& a) {
  require_file(a.annotations, "annotations");
  return index_annotations(read_annotations(a.annotations));
}

int cmd_eval_chair(const Globals& g, const EvalArgs& a) {
  const auto responses = responses_from(a.responses, a.dataset, a.side);
  const auto truth = annotations_of(a);
  const auto tagged = tag_responses(responses, lexicon_of(g), abbreviations_of(g));
  const auto result = chair(tagged, truth);
  if (!a.out.empty()) {
    std::vector<OrderedJson> lines;
    for (const auto& t : tagged) {
      const auto& present = truth.at(t.sample_id).present_tags;
      std::vector<std::string> hallucinated;
      for (const auto& tag : t.objects.tags) {
        if (!present.count(tag)) hallucinated.push_back(tag);
      }
      lines.push_back({{"sample_id", t.sample_id}, {"objects", t.objects.tags}, {"hallucinated", hallucinated}});
    }
    lines.push_back({{"summary", "chair"},
                     {"chair_i", result.chair_i},
                     {"chair_s", result.chair_s},
                     {"n_objects", result.n_objects},
                     {"n_hallucinated_objects", result.n_hallucinated_objects},
                     {"n_responses", result.n_responses},
                     {"n_hallucinated_responses", result.n_hallucinated_responses}});
    write_lines(a.out, lines);
  }
  std::cout << "chair_i " << fixed(result.chair_i) << "  (" << result.n_hallucinated_objects << "/"
            << result.n_objects << " objects)\n"
            << "chair_s " << fixed(result.chair_s) << "  (" << result.n_hallucinated_responses << "/"
            << result.n_responses << " responses)\n";
  return kOk;
}

int cmd_eval_pdmh(const Globals& g, const EvalArgs& a) {
  const auto responses = responses_from(a.responses, a.dataset, a.side);
  const auto backend = backend_of(g);
  std::vector<OrderedJson> lines(responses.size());
  std::vector<std::vector<std::optional<double>>> curves(responses.size());
  parallel_for(responses.size(), g.workers, [&](std::size_t i) {
    const auto& r = responses[i];
    auto tokens = backend->tokenize(r.response);
    if (a.max_steps > 0 && tokens.size() > a.max_steps) tokens.resize(a.max_steps);
    curves[i] = pdm_h_curve(*backend, r.prompt, r.image_ref, tokens, g.top_k);
  });
  double total = 0.0, peak = 0.0;
  std::size_t steps = 0, skipped = 0;
  for (std::size_t i = 0; i < responses.size(); ++i) {
    OrderedJson curve = OrderedJson::array();
    double sum = 0.0;
    std::size_t n = 0;
    for (const auto& v : curves[i]) {
      if (v) {
        curve.push_back(*v);
        sum += *v;
        ++n;
        peak = std::max(peak, *v);
      } else {
        curve.push_back(nullptr);
        ++skipped;
      }
    }
    total += sum;
    steps += n;
    lines[i] = {{"sample_id", responses[i].sample_id},
                {"steps", curves[i].size()},
                {"mean", n ? sum / static_cast<double>(n) : 0.0},
                {"curve", curve}};
  }
  const double mean = steps ? total / static_cast<double>(steps) : 0.0;
  if (!a.out.empty()) {
    lines.push_back({{"summary", "pdmh"}, {"top_k", g.top_k}, {"steps", steps}, {"skipped", skipped},
                     {"mean", mean}, {"max", peak}});
    write_lines(a.out, lines);
  }
  std::cout << "responses " << responses.size() << "\n"
            << "steps " << steps << " (skipped " << skipped << ")\n"
            << "mean_pdmh " << fixed(mean) << "\n"
            << "max_pdmh " << fixed(peak) << "\n";
  return kOk;
}

int cmd_eval_gap(const Globals& g, const EvalArgs& a) {
  const auto dataset = read_input<PreferenceRecord>(a.dataset, "dataset");
  const auto backend = backend_of(g);
  const auto report = pair_gap_report(dataset, *backend, a.bins ? a.bins : 20);
  if (!a.out.empty()) {
    std::vector<OrderedJson> lines;
    for (const auto& p : report.pairs) {
      lines.push_back(
          {{"sample_id", p.sample_id}, {"logp_plus", p.logp_plus}, {"logp_minus", p.logp_minus}, {"gap", p.gap()}});
    }
    lines.push_back({{"summary", "gap"},
                     {"pairs", report.pairs.size()},
                     {"skipped", report.skipped},
                     {"mean_gap", report.mean_gap},
                     {"histogram",
                      {{"lower", report.histogram.lower},
                       {"upper", report.histogram.upper},
                       {"plus", report.histogram.plus},
                       {"minus", report.histogram.minus}}}});
    write_lines(a.out, lines);
  }
  std::cout << "pairs " << report.pairs.size() << " (skipped " << report.skipped.size() << ")\n"
            << "mean_gap " << fixed(report.mean_gap, 9) << "\n";
  if (!report.pairs.empty()) {
    const auto& h = report.histogram;
    const double width = (h.upper - h.lower) / static_cast<double>(h.plus.size());
    std::cout << "bin_lower\tpreferred\tdispreferred\n";
    for (std::size_t b = 0; b < h.plus.size(); ++b) {
      std::cout << fixed(h.lower + width * static_cast<double>(b), 3) << "\t" << h.plus[b] << "\t" << h.minus[b]
                << "\n";
    }
  }
  return kOk;
}

int cmd_eval_positional(const Globals& g, const EvalArgs& a) {
  std::vector<FlaggedResponse> items;
  if (!a.annotations.empty()) {
    // Flags from ground truth: a sentence is flagged when it names an absent object.
    const auto responses = responses_from(a.responses, a.dataset, a.side);
    const auto truth = annotations_of(a);
    const auto lexicon = lexicon_of(g);
    const auto abbreviations = abbreviations_of(g);
    for (const auto& t : tag_responses(responses, lexicon, abbreviations)) {
      if (!truth.count(t.sample_id)) throw InputError("missing annotation for " + t.sample_id);
      if (t.objects.per_sentence.empty()) continue;
      items.push_back(flag_sentences(t.objects, truth.at(t.sample_id)));
    }
  } else {
    // Flags from injection metadata: the replaced sentences of y-.
    if (a.dataset.empty()) throw ConfigError("positional needs --dataset, or --annotations with responses");
    for (const auto& p : read_input<PreferenceRecord>(a.dataset, "dataset")) {
      const auto L = segment_sentences(p.dispreferred_text, abbreviations_of(g)).size();
      FlaggedResponse f{L, std::vector<bool>(L, false)};
      for (auto k : p.replace_indices) {
        if (k < 1 || k > L) throw InputError("record " + p.sample_id + ": replace index out of range");
        f.flags[k - 1] = true;
      }
      items.push_back(std::move(f));
    }
  }
  const auto bins = positional_profile(items, a.bins ? a.bins : 10);
  if (!a.out.empty()) {
    std::vector<OrderedJson> lines;
    for (const auto& b : bins) {
      lines.push_back({{"lower", b.lower}, {"upper", b.upper}, {"sentences", b.sentences},
                       {"hallucinated", b.hallucinated}, {"rate", b.rate}});
    }
    write_lines(a.out, lines);
  }
  std::cout << "responses " << items.size() << "\n" << "position\tsentences\tflagged\trate\n";
  for (const auto& b : bins) {
    std::cout << "(" << fixed(b.lower, 2) << "," << fixed(b.upper, 2) << "]\t" << b.sentences << "\t"
              << b.hallucinated << "\t" << fixed(b.rate, 4) << "\n";
  }
  return kOk;
}

int cmd_eval_cooccur(const Globals& g, const EvalArgs& a) {
  const auto responses = responses_from(a.responses, a.dataset, a.side);
  const auto truth = annotations_of(a);
  const auto lexicon = lexicon_of(g);
  const auto abbreviations = abbreviations_of(g);
  CooccurrenceGraph graph;
  if (!a.graph.empty()) {
    require_file(a.graph, "graph");
    graph = read_graph(a.graph);
  } else {
    const auto tags = corpus_tags(responses, lexicon, abbreviations);
    if (tags.empty()) throw InputError("no non-empty responses to build a graph from");
    graph = build_graph(std::span<const TagSet>(tags));
  }
  const auto s = cooccur_stats(tag_responses(responses, lexicon, abbreviations), truth, graph);
  if (!a.out.empty()) {
    write_lines(a.out, {{{"summary", "cooccur-stats"},
                         {"hallucinated", s.hallucinated},
                         {"cooccurring", s.cooccurring},
                         {"top1", s.top1},
                         {"top5", s.top5},
                         {"cooccurring_fraction", s.cooccurring_fraction},
                         {"top1_fraction", s.top1_fraction},
                         {"top5_fraction", s.top5_fraction}}});
  }
  std::cout << "hallucinated " << s.hallucinated << "\n"
            << "cooccurring_fraction " << fixed(s.cooccurring_fraction) << "\n"
            << "top1_fraction " << fixed(s.top1_fraction) << "\n"
            << "top5_fraction " << fixed(s.top5_fraction) << "\n";
  return kOk;
}

struct ToyDpoArgs {
  std::size_t pairs = 50, length = 3, vocab = 6;
  double init_scale = 0.5;
  DpoConfig dpo;
  std::string out;
};

int cmd_toy_dpo(const Globals& g, const ToyDpoArgs& a) {
  a.dpo.validate();
  if (a.vocab < 2 || a.vocab > 26) throw ConfigError("--vocab must lie in 2..26");
  if (a.pairs == 0 || a.length == 0) throw ConfigError("--pairs and --length must be >= 1");
  std::vector<std::string> vocabulary;
  for (std::size_t i = 0; i < a.vocab; ++i) vocabulary.emplace_back(1, static_cast<char>('a' + i));
  Rng rng(g.seed);
  const auto initial = random_toy_model(vocabulary, a.init_scale, rng);
  const auto data = synthetic_toy_dataset(initial, a.pairs, a.length, rng);
  const auto result = train_toy_dpo(initial, data, a.dpo);
  std::vector<OrderedJson> lines;
  for (const auto& s : result.stats) {
    lines.push_back(s.to_json());
    std::cout << s.to_json().dump() << "\n";
  }
  if (!a.out.empty()) write_lines(a.out, lines);
  std::size_t improved = 0;
  for (const auto& p : data) {
    if (toy_dpo_loss(result.model, initial, p, a.dpo.beta).margin >= 0.0) ++improved;
  }
  std::cerr << "initial_loss " << fixed(result.stats.front().mean_loss) << " final_loss "
            << fixed(result.stats.back().mean_loss) << " pairs_with_non_negative_margin " << improved << "/"
            << data.size() << "\n";
  return kOk;
}

struct ExportArgs {
  std::string dataset, out;
};

int cmd_export(const Globals&, const ExportArgs& a) {
  const auto n = export_training_format(read_input<PreferenceRecord>(a.dataset, "dataset"), a.out);
  std::cout << "exported " << n << " records -> " << a.out << "\n";
  return kOk;
}

// ---------------------------------------------------------------------------

void add_eval_inputs(CLI::App* sub, EvalArgs& a, bool annotations, bool graph) {
  sub->add_option("--responses", a.responses, "Responses file (line-delimited JSON)");
  sub->add_option("--dataset", a.dataset, "Preference dataset, used instead of --responses");
  sub->add_option("--side", a.side, "Side of the preference dataset to evaluate")
      ->check(CLI::IsMember({"preferred", "dispreferred"}))
      ->capture_default_str();
  if (annotations) sub->add_option("--annotations", a.annotations, "Annotation file (sample_id<TAB>tag,tag,...)");
  if (graph) sub->add_option("--graph", a.graph, "Co-occurrence graph; built from the responses when omitted");
  sub->add_option("--out", a.out, "Write per-item records and a summary line here");
}

int run(int argc, char** argv) {
  CLI::App app{"Self-injected preference data: graph building, injection, curriculum runs and metrics."};
  app.set_version_flag("--version", std::string(kPipelineVersion));
  app.set_config("--config", "", "TOML config file; keys mirror long flag names, flags win");
  app.require_subcommand(1);
  app.fallthrough();

  Globals g;
  app.add_option("--lexicon", g.lexicon, "Synonym lexicon file");
  app.add_option("--templates", g.templates, "Guiding templates file (default: built-in list)");
  app.add_option("--abbreviations", g.abbreviations, "Abbreviation list (default: built-in list)");
  app.add_flag("--strict-lexicon", g.strict_lexicon, "Treat conflicting lexicon forms as errors");
  app.add_option("--seed", g.seed, "Master seed")->capture_default_str();
  app.add_option("--workers", g.workers, "Worker threads")->check(CLI::PositiveNumber)->capture_default_str();
  app.add_option("--top-k", g.top_k, "Top-k for next-token distributions")
      ->check(CLI::PositiveNumber)
      ->capture_default_str();
  app.add_option("--backend", g.backend, "Text backend")
      ->check(CLI::IsMember({"mock", "toy", "http"}))
      ->capture_default_str();
  app.add_option("--toy-model", g.toy_model, "Toy model JSON for --backend toy");
  app.add_option("--response-max-tokens", g.response_max_tokens, "Token cap for preferred responses")
      ->capture_default_str();
  app.add_option("--response-temperature", g.response_temperature, "Sampling temperature for preferred responses")
      ->capture_default_str();
  app.add_option("--completion-max-tokens", g.completion_max_tokens, "Token cap for injected completions")
      ->capture_default_str();
  app.add_option("--completion-temperature", g.completion_temperature, "Sampling temperature for completions")
      ->capture_default_str();
  app.add_option("--http-url", g.http.base_url, "Completions server base URL")->capture_default_str();
  app.add_option("--http-endpoint", g.http.endpoint, "Completions endpoint path")->capture_default_str();
  app.add_option("--http-model", g.http.model_name, "Model name sent with each request")->capture_default_str();
  app.add_option("--http-api-key-env", g.http.api_key_env, "Environment variable holding the API key");
  app.add_option("--http-timeout-ms", g.http.timeout_ms, "Per-request timeout")->capture_default_str();
  app.add_option("--http-max-in-flight", g.http.max_in_flight, "Concurrent request cap")->capture_default_str();
  app.add_option("--http-retries", g.http_retries, "Attempts per request, including the first")->capture_default_str();
  app.add_option("--http-backoff-ms", g.http_backoff_ms, "Initial retry backoff")->capture_default_str();
  app.add_option("--http-image-field", g.http.image_field, "Request field carrying the image reference")
      ->capture_default_str();

  std::function<int()> action;

  GenerateArgs gen;
  auto* generate = app.add_subcommand("generate", "Generate preferred responses for a sample file");
  generate->add_option("--samples", gen.samples, "Unannotated samples file")->required();
  generate->add_option("--out", gen.out, "Responses output file")->required();
  generate->add_option("--iteration", gen.iteration, "Iteration index mixed into seeds")->capture_default_str();
  generate->callback([&] { action = [&] { return cmd_generate(g, gen); }; });

  BuildGraphArgs bg;
  auto* build = app.add_subcommand("build-graph", "Build the object co-occurrence graph from a responses file");
  build->add_option("--corpus", bg.corpus, "Responses file")->required();
  build->add_option("--out", bg.out, "Graph output file")->required();
  build->callback([&] { action = [&] { return cmd_build_graph(g, bg); }; });

  InjectArgs inj;
  auto* inject_cmd = app.add_subcommand("inject", "Build preference pairs by injecting hallucinated sentences");
  inject_cmd->add_option("--corpus", inj.corpus, "Responses file")->required();
  inject_cmd->add_option("--graph", inj.graph, "Co-occurrence graph file")->required();
  inject_cmd->add_option("--out", inj.out, "Preference dataset output file")->required();
  inject_cmd->add_option("--rho", inj.rho, "Injection rate in (0, 1]")->capture_default_str();
  inject_cmd->add_option("--iteration", inj.iteration, "Iteration index recorded and mixed into seeds")
      ->capture_default_str();
  inject_cmd->add_option("--discards", inj.discards, "Write discarded samples with reasons here (TSV)");
  inject_cmd->add_option("--max-failure-fraction", inj.max_failure_fraction,
                         "Exit 5 when more than this share of samples hit backend failures")
      ->check(CLI::Range(0.0, 1.0))
      ->capture_default_str();
  inject_cmd->callback([&] { action = [&] { return cmd_inject(g, inj); }; });

  IterateArgs it;
  auto* iterate = app.add_subcommand("iterate", "Run the curriculum: generate, build graph, inject, hook; repeat");
  iterate->add_option("--samples", it.samples, "Unannotated samples file")->required();
  iterate->add_option("--runs-root", it.runs_root, "Directory holding run directories")->capture_default_str();
  iterate->add_option("--run-id", it.run_id, "Run directory name")->required();
  iterate->add_option("--schedule", it.schedule, "Schedule kind")
      ->check(CLI::IsMember({"linear_decreasing", "linear_increasing", "constant"}))
      ->capture_default_str();
  iterate->add_option("--rho-start", it.rho_start, "Schedule start value")->capture_default_str();
  iterate->add_option("--rho-step", it.rho_step, "Schedule step per iteration")->capture_default_str();
  iterate->add_option("--iterations", it.iterations, "Number of iterations")->capture_default_str();
  iterate->add_option("--hook", it.hook, "Shell command run after each iteration's dataset is written");
  iterate->add_flag("--resume", it.resume, "Continue an existing run directory");
  iterate->add_option("--fail-after-generations", it.fail_after_generations)->group("");
  iterate->callback([&] { action = [&] { return cmd_iterate(g, it); }; });

  EvalArgs ev;
  auto* eval = app.add_subcommand("eval", "Metrics and diagnostics");
  eval->require_subcommand(1);
  eval->fallthrough();
  auto* chair_cmd = eval->add_subcommand("chair", "CHAIR-i and CHAIR-s against annotations");
  add_eval_inputs(chair_cmd, ev, true, false);
  chair_cmd->callback([&] { action = [&] { return cmd_eval_chair(g, ev); }; });
  auto* pdmh = eval->add_subcommand("pdmh", "Per-step Hellinger distance between image and text-only predictions");
  add_eval_inputs(pdmh, ev, false, false);
  pdmh->add_option("--max-steps", ev.max_steps, "Only score the first N tokens of each response (0 = all)");
  pdmh->callback([&] { action = [&] { return cmd_eval_pdmh(g, ev); }; });
  auto* gap = eval->add_subcommand("gap", "Log-probability gap between preferred and dis-preferred responses");
  gap->add_option("--dataset", ev.dataset, "Preference dataset")->required();
  gap->add_option("--bins", ev.bins, "Histogram bins (default 20)");
  gap->add_option("--out", ev.out, "Write per-pair records and a summary line here");
  gap->callback([&] { action = [&] { return cmd_eval_gap(g, ev); }; });
  auto* positional = eval->add_subcommand("positional", "Hallucination rate by relative sentence position");
  add_eval_inputs(positional, ev, true, false);
  positional->add_option("--bins", ev.bins, "Position bins (default 10)");
  positional->callback([&] { action = [&] { return cmd_eval_positional(g, ev); }; });
  auto* cooccur = eval->add_subcommand("cooccur-stats", "How hallucinated objects rank among co-occurring tags");
  add_eval_inputs(cooccur, ev, true, true);
  cooccur->callback([&] { action = [&] { return cmd_eval_cooccur(g, ev); }; });

  ToyDpoArgs td;
  auto* toy = app.add_subcommand("toy-dpo", "Train a bigram toy model with DPO and print per-epoch stats");
  toy->add_option("--pairs", td.pairs, "Synthetic preference pairs")->capture_default_str();
  toy->add_option("--length", td.length, "Tokens per response")->capture_default_str();
  toy->add_option("--vocab", td.vocab, "Vocabulary size (2..26)")->capture_default_str();
  toy->add_option("--init-scale", td.init_scale, "Initial logits are uniform in [-s, s]")->capture_default_str();
  toy->add_option("--beta", td.dpo.beta, "DPO temperature")->capture_default_str();
  toy->add_option("--lr", td.dpo.learning_rate, "Learning rate")->capture_default_str();
  toy->add_option("--epochs", td.dpo.epochs, "Full-batch epochs")->capture_default_str();
  toy->add_option("--out", td.out, "Also write the per-epoch records here");
  toy->callback([&] { action = [&] { return cmd_toy_dpo(g, td); }; });

  ExportArgs ex;
  auto* exp = app.add_subcommand("export", "Export a preference dataset as prompt/chosen/rejected lines");
  exp->add_option("--dataset", ex.dataset, "Preference dataset")->required();
  exp->add_option("--out", ex.out, "Output file")->required();
  exp->callback([&] { action = [&] { return cmd_export(g, ex); }; });

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForVersion& e) {
    return app.exit(e);
  } catch (const CLI::FileError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return kConfig;
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return kConfig;
  }
  return action ? action() : kOk;
}

}  // namespace

int main(int argc, char** argv) {
  try {
    return run(argc, argv);
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return kConfig;
  } catch (const InputError& e) {
    std::cerr << "input error: " << e.what() << "\n";
    return kInputData;
  } catch (const IoError& e) {
    std::cerr << "i/o error: " << e.what() << "\n";
    return kIo;
  } catch (const BudgetExceeded& e) {
    std::cerr << "backend failure budget exceeded: " << e.what() << "\n";
    return kBackendBudget;
  } catch (const BackendError& e) {
    std::cerr << "backend error: " << e.what() << "\n";
    return kBackendBudget;
  } catch (const std::filesystem::filesystem_error& e) {
    std::cerr << "i/o error: " << e.what() << "\n";
    return kIo;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kFailure;
  }
}
