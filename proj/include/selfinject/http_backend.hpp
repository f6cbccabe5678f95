#pragma once

#include <atomic>
#include <chrono>
#include <cstdlib>
#include <functional>
#include <optional>
#include <semaphore>
#include <string>
#include <string_view>
#include <thread>
#include <vector>

#include <httplib.h>
#include <json.hpp>

#include "selfinject/backend.hpp"
#include "selfinject/common.hpp"

namespace selfinject {

struct RetryPolicy {
  int max_attempts = 3;
  std::chrono::milliseconds initial_backoff{200};
  double multiplier = 2.0;
  std::chrono::milliseconds max_backoff{5000};

  /// Delay before attempt `attempt + 1` (attempt is 1-based).
  [[nodiscard]] std::chrono::milliseconds backoff(int attempt) const {
    double ms = static_cast<double>(initial_backoff.count());
    for (int i = 1; i < attempt; ++i) ms *= multiplier;
    return std::chrono::milliseconds(
        static_cast<std::int64_t>(std::min(ms, static_cast<double>(max_backoff.count()))));
  }
};

struct HttpBackendConfig {
  std::string base_url = "http://127.0.0.1:8000";
  std::string endpoint = "/v1/completions";
  std::string api_key_env;  // name of the environment variable holding the key
  std::string model_name = "default";
  int timeout_ms = 60000;
  std::size_t max_in_flight = 8;
  RetryPolicy retry;
  std::string image_field = "image";
};

/// Client for a completions endpoint speaking the common JSON shape:
///
///   POST <base_url><endpoint>
///   {"model", "prompt", "max_tokens", "temperature", "logprobs", "echo",
///    "stop", "seed", <image_field>}
///
/// and reading `choices[0].{text, finish_reason, logprobs}` back, where
/// logprobs carries parallel `tokens`, `token_logprobs`, `top_logprobs`
/// and `text_offset` arrays. Scoring uses `echo` over prompt+continuation;
/// next-token distributions use a one-token request with `logprobs=k`.
///
/// Transport failures (connection errors, 408, 429, 5xx) are retried with
/// exponential backoff. Every logical request carries one Idempotency-Key
/// header, reused across its retries. At most `max_in_flight` requests are
/// outstanding per handle.
class HttpBackend : public Backend {
 public:
  using Json = nlohmann::ordered_json;
  using Sleeper = std::function<void(std::chrono::milliseconds)>;

  explicit HttpBackend(HttpBackendConfig config, Sleeper sleeper = {})
      : config_(std::move(config)),
        sleeper_(sleeper ? std::move(sleeper) : [](std::chrono::milliseconds d) { std::this_thread::sleep_for(d); }),
        slots_(static_cast<std::ptrdiff_t>(std::max<std::size_t>(1, config_.max_in_flight))) {
    if (config_.max_in_flight == 0) throw ConfigError("max_in_flight must be >= 1");
    if (config_.retry.max_attempts < 1) throw ConfigError("retry attempts must be >= 1");
    if (config_.timeout_ms <= 0) throw ConfigError("timeout_ms must be positive");
    split_base_url();
    if (!config_.api_key_env.empty()) {
      if (const char* key = std::getenv(config_.api_key_env.c_str())) api_key_ = key;
    }
  }

  GenerationResult generate(const GenerationRequest& req) const override {
    req.validate();
    Json body = base_body(req.prompt, req.image_ref);
    body["max_tokens"] = req.max_tokens;
    body["temperature"] = req.temperature;
    body["logprobs"] = static_cast<int>(ToyBackend::kReportedTopK);
    if (!req.stop_sequences.empty()) body["stop"] = req.stop_sequences;
    if (req.seed) body["seed"] = *req.seed;

    const Json response = post(body);
    const Json& choice = first_choice(response);
    GenerationResult result;
    result.text = choice.value("text", "");
    const std::string finish = choice.contains("finish_reason") && choice["finish_reason"].is_string()
                                   ? choice["finish_reason"].get<std::string>()
                                   : "stop";
    result.finish_reason = finish == "length" ? FinishReason::kLength : FinishReason::kStop;
    // Servers do not always strip the stop match.
    if (auto cut = detail::find_stop(result.text, req.stop_sequences); cut != std::string::npos) {
      result.text.resize(cut);
    }
    if (choice.contains("logprobs") && choice["logprobs"].is_object()) {
      result.token_logprobs = parse_token_logprobs(choice["logprobs"]);
    }
    return result;
  }

  SequenceScore score_sequence(std::string_view prompt, const std::optional<std::string>& image_ref,
                               std::string_view continuation) const override {
    if (continuation.empty()) throw InputError("continuation must contain at least one token");
    const std::string full = std::string(prompt) + std::string(continuation);
    const auto entries = echo_logprobs(full, image_ref);
    SequenceScore score;
    for (const auto& e : entries) {
      if (e.offset < prompt.size() || e.offset >= full.size()) continue;
      if (!e.logprob) throw BackendError(BackendError::Kind::kCapability, "server returned a null token logprob");
      score.per_token.push_back(*e.logprob);
      score.total_logprob += *e.logprob;
    }
    if (score.per_token.empty()) {
      throw BackendError(BackendError::Kind::kCapability, "server did not echo continuation logprobs");
    }
    return score;
  }

  TokenDistribution next_token_distribution(std::string_view prompt, const std::optional<std::string>& image_ref,
                                            std::size_t top_k) const override {
    if (top_k == 0) throw InputError("top_k must be >= 1");
    Json body = base_body(std::string(prompt), image_ref);
    body["max_tokens"] = 1;
    body["temperature"] = 0.0;
    body["logprobs"] = top_k;
    const Json response = post(body);
    const Json& choice = first_choice(response);
    const Json* top = nullptr;
    if (choice.contains("logprobs") && choice["logprobs"].is_object()) {
      const auto& lp = choice["logprobs"];
      if (lp.contains("top_logprobs") && lp["top_logprobs"].is_array() && !lp["top_logprobs"].empty()) {
        top = &lp["top_logprobs"][0];
      }
    }
    if (!top || !top->is_object()) {
      throw BackendError(BackendError::Kind::kCapability, "server did not return top_logprobs");
    }
    TokenLogprobs entries;
    for (const auto& [tok, lp] : top->items()) entries.emplace_back(tok, lp.get<double>());
    return TokenDistribution::from_logprobs(std::move(entries), top_k);
  }

  std::vector<std::string> tokenize(std::string_view text) const override {
    std::vector<std::string> tokens;
    if (text.empty()) return tokens;
    for (const auto& e : echo_logprobs(std::string(text), std::nullopt)) {
      if (e.offset < text.size()) tokens.push_back(e.token);
    }
    return tokens;
  }

  [[nodiscard]] std::string name() const override { return "http:" + config_.model_name; }

  [[nodiscard]] const HttpBackendConfig& config() const noexcept { return config_; }

  /// Sends one JSON body with retry and in-flight limiting.
  Json post(const Json& body) const {
    const std::string payload = body.dump();
    const std::string key = idempotency_key(payload);
    slots_.acquire();
    struct Release {
      std::counting_semaphore<>& s;
      ~Release() { s.release(); }
    } release{slots_};

    for (int attempt = 1;; ++attempt) {
      try {
        return post_once(payload, key);
      } catch (const BackendError& e) {
        if (!e.retryable() || attempt >= config_.retry.max_attempts) throw;
        log_warning("transient backend failure (attempt " + std::to_string(attempt) + "): " + e.what());
        sleeper_(config_.retry.backoff(attempt));
      }
    }
  }

 private:
  struct EchoEntry {
    std::string token;
    std::optional<double> logprob;
    std::size_t offset;
  };

  Json base_body(const std::string& prompt, const std::optional<std::string>& image_ref) const {
    Json body;
    body["model"] = config_.model_name;
    body["prompt"] = prompt;
    if (image_ref) body[config_.image_field] = *image_ref;
    return body;
  }

  std::vector<EchoEntry> echo_logprobs(const std::string& text, const std::optional<std::string>& image_ref) const {
    Json body = base_body(text, image_ref);
    body["max_tokens"] = 1;
    body["temperature"] = 0.0;
    body["logprobs"] = 1;
    body["echo"] = true;
    const Json response = post(body);
    const Json& choice = first_choice(response);
    if (!choice.contains("logprobs") || !choice["logprobs"].is_object()) {
      throw BackendError(BackendError::Kind::kCapability, "server does not support echo logprobs");
    }
    const auto& lp = choice["logprobs"];
    if (!lp.contains("tokens") || !lp.contains("token_logprobs") || !lp.contains("text_offset")) {
      throw BackendError(BackendError::Kind::kCapability, "echo logprobs lack tokens/token_logprobs/text_offset");
    }
    const auto& tokens = lp["tokens"];
    const auto& lps = lp["token_logprobs"];
    const auto& offsets = lp["text_offset"];
    if (tokens.size() != lps.size() || tokens.size() != offsets.size()) {
      throw BackendError(BackendError::Kind::kCapability, "echo logprob arrays differ in length");
    }
    std::vector<EchoEntry> out;
    for (std::size_t i = 0; i < tokens.size(); ++i) {
      EchoEntry e{tokens[i].get<std::string>(), std::nullopt, offsets[i].get<std::size_t>()};
      if (!lps[i].is_null()) e.logprob = lps[i].get<double>();
      out.push_back(std::move(e));
    }
    return out;
  }

  static std::vector<TokenLogprob> parse_token_logprobs(const Json& lp) {
    std::vector<TokenLogprob> out;
    if (!lp.contains("tokens") || !lp.contains("token_logprobs")) return out;
    const auto& tokens = lp["tokens"];
    const auto& lps = lp["token_logprobs"];
    const Json* tops = lp.contains("top_logprobs") && lp["top_logprobs"].is_array() ? &lp["top_logprobs"] : nullptr;
    for (std::size_t i = 0; i < tokens.size() && i < lps.size(); ++i) {
      TokenLogprob tl{tokens[i].get<std::string>(), lps[i].is_null() ? 0.0 : lps[i].get<double>(), {}};
      bool has_chosen = false;
      if (tops && i < tops->size() && (*tops)[i].is_object()) {
        for (const auto& [tok, v] : (*tops)[i].items()) {
          tl.top.emplace_back(tok, v.get<double>());
          has_chosen = has_chosen || tok == tl.token;
        }
      }
      if (!has_chosen) tl.top.emplace_back(tl.token, tl.logprob);
      std::stable_sort(tl.top.begin(), tl.top.end(), [](const auto& a, const auto& b) { return a.second > b.second; });
      out.push_back(std::move(tl));
    }
    return out;
  }

  static const Json& first_choice(const Json& response) {
    if (!response.contains("choices") || !response["choices"].is_array() || response["choices"].empty()) {
      throw BackendError(BackendError::Kind::kRejection, "response has no choices");
    }
    return response["choices"][0];
  }

  std::string idempotency_key(const std::string& payload) const {
    std::ostringstream key;
    key << std::hex << fnv1a64(payload) << '-' << std::dec << request_counter_.fetch_add(1);
    return key.str();
  }

  Json post_once(const std::string& payload, const std::string& key) const {
    httplib::Client client(host_);
    const auto timeout = std::chrono::milliseconds(config_.timeout_ms);
    client.set_connection_timeout(timeout);
    client.set_read_timeout(timeout);
    client.set_write_timeout(timeout);
    httplib::Headers headers{{"Idempotency-Key", key}};
    if (!api_key_.empty()) headers.emplace("Authorization", "Bearer " + api_key_);

    const auto started = std::chrono::steady_clock::now();
    auto res = client.Post(path_, headers, payload, "application/json");
    if (!res) {
      const auto err = res.error();
      const bool timed_out = err == httplib::Error::ConnectionTimeout ||
                             (err == httplib::Error::Read && std::chrono::steady_clock::now() - started >= timeout);
      throw BackendError(timed_out ? BackendError::Kind::kTimeout : BackendError::Kind::kTransport,
                         "request to " + host_ + path_ + " failed: " + httplib::to_string(err));
    }
    const int status = res->status;
    if (status == 408 || status == 429 || status >= 500) {
      throw BackendError(BackendError::Kind::kTransport, "server returned HTTP " + std::to_string(status));
    }
    if (status < 200 || status >= 300) {
      throw BackendError(BackendError::Kind::kRejection,
                         "server rejected request with HTTP " + std::to_string(status) + ": " + res->body);
    }
    try {
      return Json::parse(res->body);
    } catch (const nlohmann::json::exception& e) {
      throw BackendError(BackendError::Kind::kRejection, std::string("malformed JSON response: ") + e.what());
    }
  }

  void split_base_url() {
    const auto scheme = config_.base_url.find("://");
    if (scheme == std::string::npos) throw ConfigError("base_url must include a scheme: " + config_.base_url);
    const auto path_start = config_.base_url.find('/', scheme + 3);
    host_ = config_.base_url.substr(0, path_start);
    std::string prefix = path_start == std::string::npos ? "" : config_.base_url.substr(path_start);
    while (!prefix.empty() && prefix.back() == '/') prefix.pop_back();
    path_ = prefix + config_.endpoint;
  }

  HttpBackendConfig config_;
  Sleeper sleeper_;
  std::string host_;
  std::string path_;
  std::string api_key_;
  mutable std::counting_semaphore<> slots_;
  mutable std::atomic<std::uint64_t> request_counter_{0};
};

}  // namespace selfinject
