#pragma once

#include <atomic>
#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "selfinject/backend.hpp"
#include "selfinject/common.hpp"
#include "selfinject/cooccurrence.hpp"
#include "selfinject/dataset_io.hpp"
#include "selfinject/injector.hpp"
#include "selfinject/lexicon.hpp"

namespace selfinject {

// ---------------------------------------------------------------------------
// Curriculum

enum class ScheduleKind { kLinearDecreasing, kLinearIncreasing, kConstant };

inline std::string_view to_string(ScheduleKind k) {
  switch (k) {
    case ScheduleKind::kLinearDecreasing: return "linear_decreasing";
    case ScheduleKind::kLinearIncreasing: return "linear_increasing";
    case ScheduleKind::kConstant: return "constant";
  }
  return "constant";
}

inline ScheduleKind parse_schedule_kind(std::string_view s) {
  if (s == "linear_decreasing") return ScheduleKind::kLinearDecreasing;
  if (s == "linear_increasing") return ScheduleKind::kLinearIncreasing;
  if (s == "constant") return ScheduleKind::kConstant;
  throw ConfigError("unknown schedule kind '" + std::string(s) + "'");
}

/// Defaults give rho(t) = 0.8 - 0.2 t over three iterations.
struct CurriculumSchedule {
  ScheduleKind kind = ScheduleKind::kLinearDecreasing;
  double rho_start = 0.8;
  double rho_step = 0.2;
  int iterations = 3;

  void validate() const;
};

/// Rate for iteration t (1-based). Values are rounded to nine decimals so
/// decimal schedules land exactly on 0.6, 0.4, 0.2 rather than on their
/// nearest binary neighbours.
inline double schedule_rho(const CurriculumSchedule& s, int t) {
  if (t < 1 || t > s.iterations) {
    throw ConfigError("iteration " + std::to_string(t) + " outside 1.." + std::to_string(s.iterations));
  }
  double rho = s.rho_start;
  switch (s.kind) {
    case ScheduleKind::kLinearDecreasing: rho = s.rho_start - s.rho_step * t; break;
    case ScheduleKind::kLinearIncreasing: rho = s.rho_start + s.rho_step * t; break;
    case ScheduleKind::kConstant: break;
  }
  rho = std::round(rho * 1e9) / 1e9;
  if (!(rho > 0.0 && rho <= 1.0)) {
    throw ConfigError("schedule yields rho = " + std::to_string(rho) + " at t = " + std::to_string(t) +
                      ", outside (0, 1]");
  }
  return rho;
}

inline void CurriculumSchedule::validate() const {
  if (iterations < 1) throw ConfigError("schedule needs at least one iteration");
  for (int t = 1; t <= iterations; ++t) schedule_rho(*this, t);
}

// ---------------------------------------------------------------------------
// Pipeline

struct PipelineConfig {
  std::vector<UnannotatedSample> samples;
  SynonymLexicon lexicon;
  AbbreviationList abbreviations = default_abbreviations();
  std::vector<GuidingTemplate> templates = default_templates();
  CurriculumSchedule schedule;
  std::uint64_t master_seed = 0;
  int response_max_tokens = 512;
  double response_temperature = 0.0;
  int completion_max_tokens = 48;
  double completion_temperature = 0.0;
  std::size_t workers = 8;
  std::filesystem::path run_dir;
  std::string hook_command;  // run after each iteration's dataset is written; empty = no-op
  /// Test hook: abort after this many fresh generations in this process.
  std::optional<std::size_t> fail_after_generations;
};

class SimulatedCrash : public Error {
 public:
  using Error::Error;
};

struct IterationRecord {
  int t = 0;
  double rho = 0.0;
  std::size_t n_input = 0;
  std::size_t n_emitted = 0;
  std::size_t n_discarded = 0;
  std::string dataset_path;  // relative to the run directory
  std::string graph_path;
  double mean_sentence_count = 0.0;  // over emitted pairs
  double mean_replaced_count = 0.0;
  std::map<std::string, std::size_t> discards_by_reason;

  [[nodiscard]] OrderedJson to_json() const {
    OrderedJson reasons = OrderedJson::object();
    for (const auto& [k, v] : discards_by_reason) reasons[k] = v;
    return {{"t", t},
            {"rho", rho},
            {"n_input", n_input},
            {"n_emitted", n_emitted},
            {"n_discarded", n_discarded},
            {"dataset_path", dataset_path},
            {"graph_path", graph_path},
            {"mean_sentence_count", mean_sentence_count},
            {"mean_replaced_count", mean_replaced_count},
            {"discards_by_reason", reasons}};
  }

  static IterationRecord from_json(const OrderedJson& j) {
    IterationRecord r;
    r.t = j.at("t").get<int>();
    r.rho = j.at("rho").get<double>();
    r.n_input = j.at("n_input").get<std::size_t>();
    r.n_emitted = j.at("n_emitted").get<std::size_t>();
    r.n_discarded = j.at("n_discarded").get<std::size_t>();
    r.dataset_path = j.at("dataset_path").get<std::string>();
    r.graph_path = j.at("graph_path").get<std::string>();
    r.mean_sentence_count = j.at("mean_sentence_count").get<double>();
    r.mean_replaced_count = j.at("mean_replaced_count").get<double>();
    for (const auto& [k, v] : j.at("discards_by_reason").items()) r.discards_by_reason[k] = v.get<std::size_t>();
    return r;
  }
};

inline PreferenceRecord to_record(const PreferencePair& pair) {
  PreferenceRecord r;
  r.sample_id = pair.sample_id;
  r.image_ref = pair.image_ref;
  r.prompt = pair.prompt;
  r.preferred_text = pair.preferred.text();
  r.dispreferred_text = pair.dispreferred.text();
  r.replace_indices = pair.plan.replace_indices;
  r.hallucinated_objects = pair.plan.objects;
  r.template_ids = pair.plan.template_ids;
  r.iteration = pair.iteration;
  r.rho = pair.plan.rho;
  return r;
}

struct SampleOutcome {
  std::string sample_id;
  Outcome<PreferencePair> result;
};

struct InjectionSettings {
  double rho = 0.2;
  int iteration = 0;
  std::uint64_t master_seed = 0;
  int completion_max_tokens = 48;
  double completion_temperature = 0.0;
  std::size_t workers = 8;
};

/// Parses, plans and injects every response. Seeds derive from
/// (master seed, sample id, iteration), so results do not depend on
/// worker scheduling. Output order follows the input order.
inline std::vector<SampleOutcome> inject_corpus(const std::vector<ResponseRecord>& responses,
                                                const CooccurrenceGraph& graph, const SynonymLexicon& lexicon,
                                                const AbbreviationList& abbreviations,
                                                const std::vector<GuidingTemplate>& templates,
                                                const Backend& backend, const InjectionSettings& s) {
  check_rate(s.rho);
  std::vector<SampleOutcome> out(responses.size());
  parallel_for(responses.size(), s.workers, [&](std::size_t i) {
    const auto& rec = responses[i];
    out[i].sample_id = rec.sample_id;
    if (trim(rec.response).empty()) {
      out[i].result = Discard{DiscardReason::kInvalidCompletion, "empty preferred response"};
      return;
    }
    const auto y_plus = segment_sentences(rec.response, abbreviations);
    const auto objects = parse_objects(y_plus, lexicon);
    const std::uint64_t seed = derive_seed(s.master_seed, rec.sample_id, static_cast<std::uint64_t>(s.iteration));
    Rng rng(splitmix64(seed ^ 0x696e6a656374ULL));
    auto plan = build_injection_plan(y_plus, objects, graph, templates, s.rho, rng);
    if (auto* d = std::get_if<Discard>(&plan)) {
      out[i].result = *d;
      return;
    }
    CompletionOptions opts{s.completion_max_tokens, s.completion_temperature, seed};
    auto pair = inject(std::get<InjectionPlan>(plan), y_plus, rec.sample_id, rec.image_ref, rec.prompt, templates,
                       backend, opts, abbreviations);
    if (auto* p = std::get_if<PreferencePair>(&pair)) {
      p->iteration = s.iteration;
      if (auto bad = pair_violations(*p, templates, &lexicon); !bad.empty()) {
        out[i].result = Discard{DiscardReason::kInvalidCompletion, join(bad, "; ")};
        return;
      }
    }
    out[i].result = std::move(pair);
  });
  return out;
}

/// Corpus tag sets for every non-empty response.
inline std::vector<TagSet> corpus_tags(const std::vector<ResponseRecord>& responses, const SynonymLexicon& lexicon,
                                       const AbbreviationList& abbreviations) {
  std::vector<TagSet> out;
  for (const auto& r : responses) {
    if (trim(r.response).empty()) continue;
    out.push_back(parse_objects(segment_sentences(r.response, abbreviations), lexicon).tags);
  }
  return out;
}

namespace detail {

inline std::string iteration_dir_name(int t) { return "iter-" + std::to_string(t); }

inline std::string cache_file_name(const std::string& sample_id) {
  std::ostringstream s;
  s << std::hex;
  s.width(16);
  s.fill('0');
  s << fnv1a64(sample_id) << ".json";
  return s.str();
}

inline std::optional<std::string> read_cached_response(const std::filesystem::path& file,
                                                       const std::string& sample_id) {
  std::error_code ec;
  if (!std::filesystem::exists(file, ec)) return std::nullopt;
  try {
    const auto j = OrderedJson::parse(read_file(file.string()));
    if (j.at("sample_id").get<std::string>() != sample_id) return std::nullopt;
    return j.at("response").get<std::string>();
  } catch (const std::exception&) {
    return std::nullopt;  // torn or foreign file: regenerate
  }
}

inline std::atomic<std::size_t>& fresh_generation_counter() {
  static std::atomic<std::size_t> counter{0};
  return counter;
}

}  // namespace detail

/// Step 1 of an iteration: preferred responses for every sample, cached
/// per (iteration, sample) under `cache_dir`.
inline std::vector<ResponseRecord> generate_responses(const PipelineConfig& config, const Backend& backend, int t,
                                                      const std::filesystem::path& cache_dir) {
  std::vector<ResponseRecord> out(config.samples.size());
  parallel_for(config.samples.size(), config.workers, [&](std::size_t i) {
    const auto& sample = config.samples[i];
    const auto file = cache_dir / detail::cache_file_name(sample.sample_id);
    out[i] = {sample.sample_id, sample.image_ref, sample.prompt, {}};
    if (auto cached = detail::read_cached_response(file, sample.sample_id)) {
      out[i].response = std::move(*cached);
      return;
    }
    if (config.fail_after_generations &&
        detail::fresh_generation_counter().fetch_add(1) >= *config.fail_after_generations) {
      throw SimulatedCrash("simulated crash before generating " + sample.sample_id);
    }
    GenerationRequest req;
    req.prompt = sample.prompt;
    req.image_ref = sample.image_ref;
    req.max_tokens = config.response_max_tokens;
    req.temperature = config.response_temperature;
    req.seed = derive_seed(config.master_seed, sample.sample_id, static_cast<std::uint64_t>(t));
    out[i].response = backend.generate(req).text;
    OrderedJson j{{"sample_id", sample.sample_id}, {"response", out[i].response}};
    write_text_atomic(file.string(), detail::dump_line(j) + "\n");
  });
  return out;
}

/// One pass of generate -> parse + graph -> inject -> write. Outputs go to
/// `<run_dir>/iter-<t>/`: cache/, responses.jsonl, graph.tsv,
/// dataset.jsonl, discards.tsv. The graph always comes from this
/// iteration's responses.
inline IterationRecord run_iteration(const PipelineConfig& config, const Backend& backend, int t) {
  const double rho = schedule_rho(config.schedule, t);
  const std::string iter_name = detail::iteration_dir_name(t);
  const auto iter_dir = config.run_dir / iter_name;

  const auto responses = generate_responses(config, backend, t, iter_dir / "cache");
  write_records(responses, (iter_dir / "responses.jsonl").string());

  const auto tags = corpus_tags(responses, config.lexicon, config.abbreviations);
  const auto graph = build_graph(std::span<const TagSet>(tags));
  write_text_atomic((iter_dir / "graph.tsv").string(), write_graph_text(graph));

  InjectionSettings settings{rho,
                             t,
                             config.master_seed,
                             config.completion_max_tokens,
                             config.completion_temperature,
                             config.workers};
  const auto outcomes =
      inject_corpus(responses, graph, config.lexicon, config.abbreviations, config.templates, backend, settings);

  IterationRecord record;
  record.t = t;
  record.rho = rho;
  record.n_input = config.samples.size();
  record.dataset_path = iter_name + "/dataset.jsonl";
  record.graph_path = iter_name + "/graph.tsv";
  std::vector<PreferenceRecord> dataset;
  std::string discard_log;
  double sentences = 0.0, replaced = 0.0;
  for (const auto& o : outcomes) {
    if (const auto* pair = std::get_if<PreferencePair>(&o.result)) {
      dataset.push_back(to_record(*pair));
      sentences += static_cast<double>(pair->preferred.size());
      replaced += static_cast<double>(pair->plan.replace_indices.size());
    } else {
      const auto& d = std::get<Discard>(o.result);
      ++record.discards_by_reason[std::string(to_string(d.reason))];
      discard_log += o.sample_id + '\t' + std::string(to_string(d.reason)) + '\t' + collapse_whitespace(d.detail) + '\n';
    }
  }
  record.n_emitted = dataset.size();
  record.n_discarded = record.n_input - record.n_emitted;
  if (!dataset.empty()) {
    record.mean_sentence_count = sentences / static_cast<double>(dataset.size());
    record.mean_replaced_count = replaced / static_cast<double>(dataset.size());
  }
  write_records(dataset, (config.run_dir / record.dataset_path).string());
  write_text_atomic((iter_dir / "discards.tsv").string(), discard_log);
  return record;
}

namespace detail {
inline void run_hook(const PipelineConfig& config, const IterationRecord& record) {
  if (config.hook_command.empty()) return;
  ::setenv("SELFINJECT_RUN_DIR", config.run_dir.c_str(), 1);
  ::setenv("SELFINJECT_ITERATION", std::to_string(record.t).c_str(), 1);
  ::setenv("SELFINJECT_DATASET", (config.run_dir / record.dataset_path).c_str(), 1);
  const int rc = std::system(config.hook_command.c_str());
  if (rc != 0) throw IoError("training hook exited with status " + std::to_string(rc));
}
}  // namespace detail

/// Runs iterations 1..T in order. An iteration counts as complete once its
/// record.json exists (written after the hook succeeds); with `resume`,
/// complete iterations are skipped and cached generations reused.
inline std::vector<IterationRecord> run_pipeline(const PipelineConfig& config, const Backend& backend,
                                                 bool resume = false) {
  namespace fs = std::filesystem;
  config.schedule.validate();
  if (config.samples.empty()) throw InputError("unannotated dataset is empty");
  std::error_code ec;
  if (!resume && fs::exists(config.run_dir, ec) && !fs::is_empty(config.run_dir, ec)) {
    throw ConfigError("run directory '" + config.run_dir.string() + "' already exists; pass resume to continue it");
  }
  detail::fresh_generation_counter() = 0;
  fs::create_directories(config.run_dir, ec);
  if (ec) throw IoError("cannot create run directory '" + config.run_dir.string() + "': " + ec.message());

  OrderedJson manifest{{"pipeline_version", kPipelineVersion},
                       {"master_seed", config.master_seed},
                       {"samples", config.samples.size()},
                       {"schedule",
                        {{"kind", to_string(config.schedule.kind)},
                         {"rho_start", config.schedule.rho_start},
                         {"rho_step", config.schedule.rho_step},
                         {"iterations", config.schedule.iterations}}},
                       {"backend", backend.name()}};
  write_text_atomic((config.run_dir / "run.json").string(), manifest.dump(2) + "\n");

  std::vector<IterationRecord> records;
  for (int t = 1; t <= config.schedule.iterations; ++t) {
    const auto record_file = config.run_dir / detail::iteration_dir_name(t) / "record.json";
    if (resume && fs::exists(record_file, ec)) {
      records.push_back(IterationRecord::from_json(OrderedJson::parse(read_file(record_file.string()))));
      log_info("iteration " + std::to_string(t) + " already complete, skipping");
      continue;
    }
    auto record = run_iteration(config, backend, t);
    detail::run_hook(config, record);
    write_text_atomic(record_file.string(), record.to_json().dump(2) + "\n");
    records.push_back(std::move(record));
  }
  return records;
}

// ---------------------------------------------------------------------------
// Pair log-probability gap

struct PairGap {
  std::string sample_id;
  double logp_plus = 0.0;
  double logp_minus = 0.0;
  [[nodiscard]] double gap() const { return logp_plus - logp_minus; }
};

struct Histogram {
  double lower = 0.0;
  double upper = 0.0;
  std::vector<std::size_t> plus;
  std::vector<std::size_t> minus;
};

struct GapReport {
  std::vector<PairGap> pairs;
  std::vector<std::string> skipped;
  double mean_gap = 0.0;
  Histogram histogram;
};

/// Context used when scoring a response to `prompt`.
inline std::string scoring_context(std::string_view prompt) { return std::string(prompt) + "\n"; }

/// Scores both sides of each pair under `backend` and summarizes the gap
/// logp(y+) - logp(y-). Histogram bins share one range over both sides.
inline GapReport pair_gap_report(const std::vector<PreferenceRecord>& dataset, const Backend& backend,
                                 std::size_t bins = 20) {
  if (bins == 0) throw InputError("histogram needs at least one bin");
  GapReport report;
  for (const auto& r : dataset) {
    try {
      const auto ctx = scoring_context(r.prompt);
      const std::optional<std::string> image = r.image_ref;
      PairGap g{r.sample_id, backend.score_sequence(ctx, image, r.preferred_text).total_logprob,
                backend.score_sequence(ctx, image, r.dispreferred_text).total_logprob};
      report.pairs.push_back(g);
    } catch (const Error& e) {
      log_warning("gap report: skipping " + r.sample_id + ": " + e.what());
      report.skipped.push_back(r.sample_id);
    }
  }
  auto& h = report.histogram;
  h.plus.assign(bins, 0);
  h.minus.assign(bins, 0);
  if (report.pairs.empty()) return report;
  h.lower = std::numeric_limits<double>::infinity();
  h.upper = -std::numeric_limits<double>::infinity();
  double total = 0.0;
  for (const auto& p : report.pairs) {
    total += p.gap();
    h.lower = std::min({h.lower, p.logp_plus, p.logp_minus});
    h.upper = std::max({h.upper, p.logp_plus, p.logp_minus});
  }
  report.mean_gap = total / static_cast<double>(report.pairs.size());
  const double width = (h.upper - h.lower) / static_cast<double>(bins);
  auto bin_of = [&](double v) {
    if (width <= 0.0) return std::size_t{0};
    return std::min(bins - 1, static_cast<std::size_t>((v - h.lower) / width));
  };
  for (const auto& p : report.pairs) {
    ++h.plus[bin_of(p.logp_plus)];
    ++h.minus[bin_of(p.logp_minus)];
  }
  return report;
}

}  // namespace selfinject
