#pragma once

#include <map>
#include <optional>
#include <set>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "selfinject/common.hpp"

namespace selfinject {

using TagSet = std::set<std::string>;

// Word tokenizer shared by lexicon keys and response text: a word is a
// maximal run of ASCII alphanumerics or non-ASCII bytes. Lowercases.
inline std::vector<std::string> tokenize_words(std::string_view text) {
  std::vector<std::string> words;
  std::string current;
  for (char ch : text) {
    const auto c = static_cast<unsigned char>(ch);
    if (std::isalnum(c) || c >= 0x80) {
      current.push_back(static_cast<char>(std::tolower(c)));
    } else if (!current.empty()) {
      words.push_back(std::move(current));
      current.clear();
    }
  }
  if (!current.empty()) words.push_back(std::move(current));
  return words;
}

/// Maps surface forms onto canonical object tags. Every surface form has
/// exactly one tag and every tag is one of its own forms. Immutable once
/// built; share freely across threads.
class SynonymLexicon {
 public:
  struct Options {
    bool strict = false;
  };

  SynonymLexicon() = default;

  /// Adds `forms` (plus `tag` itself) under `tag`. A form already owned by a
  /// different tag is a conflict: strict mode throws InputError, otherwise
  /// the first mapping is kept and a warning is logged.
  void add_entry(std::string_view tag_in, const std::vector<std::string>& forms_in, Options opts,
                 std::string_view where = {}) {
    const std::string tag = normalize_form(tag_in);
    if (tag.empty()) throw InputError(std::string(where) + ": empty canonical tag");
    if (auto it = form_to_tag_.find(tag); it != form_to_tag_.end() && it->second != tag) {
      report_conflict(tag, it->second, tag, opts, where);
      return;  // the tag name itself is taken; drop the entry
    }
    auto& forms = entries_[tag];
    claim(tag, tag, forms);
    for (const auto& raw : forms_in) {
      const std::string form = normalize_form(raw);
      if (form.empty()) continue;
      if (auto it = form_to_tag_.find(form); it != form_to_tag_.end() && it->second != tag) {
        report_conflict(form, it->second, tag, opts, where);
        continue;
      }
      claim(form, tag, forms);
    }
  }

  [[nodiscard]] std::optional<std::string> lookup(std::string_view form) const {
    if (auto it = form_to_tag_.find(std::string(form)); it != form_to_tag_.end()) return it->second;
    return std::nullopt;
  }

  [[nodiscard]] const std::map<std::string, std::set<std::string>>& entries() const noexcept {
    return entries_;
  }
  [[nodiscard]] TagSet tags() const {
    TagSet out;
    for (const auto& [tag, _] : entries_) out.insert(tag);
    return out;
  }
  [[nodiscard]] bool empty() const noexcept { return entries_.empty(); }
  [[nodiscard]] std::size_t max_form_words() const noexcept { return max_form_words_; }

  std::string source_name;

  /// Canonical key for a surface form: lowercase words joined by one space.
  static std::string normalize_form(std::string_view form) { return join(tokenize_words(form), " "); }

 private:
  void claim(const std::string& form, const std::string& tag, std::set<std::string>& forms) {
    form_to_tag_.emplace(form, tag);
    forms.insert(form);
    max_form_words_ = std::max(max_form_words_, tokenize_words(form).size());
  }

  static void report_conflict(const std::string& form, const std::string& owner, const std::string& tag,
                              Options opts, std::string_view where) {
    std::string msg = std::string(where) + ": surface form '" + form + "' already maps to '" + owner +
                      "', ignoring mapping to '" + tag + "'";
    if (opts.strict) throw InputError(msg);
    log_warning(msg);
  }

  std::map<std::string, std::set<std::string>> entries_;
  std::unordered_map<std::string, std::string> form_to_tag_;
  std::size_t max_form_words_ = 0;
};

/// Parses `canonical_tag: form1, form2, ...` lines. `#` starts a comment;
/// repeated canonical tags merge.
inline SynonymLexicon parse_lexicon(std::string_view text, std::string source_name = "<memory>",
                                    SynonymLexicon::Options opts = {}) {
  SynonymLexicon lex;
  lex.source_name = std::move(source_name);
  std::size_t line_no = 0;
  for (const auto& raw_line : split(text, '\n')) {
    ++line_no;
    std::string_view line = raw_line;
    if (auto hash = line.find('#'); hash != std::string_view::npos) line = line.substr(0, hash);
    line = trim(line);
    if (line.empty()) continue;
    const std::string where = lex.source_name + ":" + std::to_string(line_no);
    const auto colon = line.find(':');
    if (colon == std::string_view::npos) throw InputError(where + ": expected 'tag: form, form, ...'");
    const auto tag = trim(line.substr(0, colon));
    if (tag.empty()) throw InputError(where + ": empty canonical tag");
    std::vector<std::string> forms;
    for (const auto& f : split(line.substr(colon + 1), ',')) forms.emplace_back(trim(f));
    lex.add_entry(tag, forms, opts, where);
  }
  return lex;
}

inline SynonymLexicon load_lexicon(const std::string& path, SynonymLexicon::Options opts = {}) {
  return parse_lexicon(read_file(path), path, opts);
}

// ---------------------------------------------------------------------------
// Sentence segmentation.

/// A response split into sentences. Joining with single spaces reproduces
/// the whitespace-normalized response.
struct SegmentedResponse {
  std::vector<std::string> sentences;

  [[nodiscard]] std::size_t size() const noexcept { return sentences.size(); }
  [[nodiscard]] std::string text() const { return join(sentences, " "); }

  friend bool operator==(const SegmentedResponse&, const SegmentedResponse&) = default;
};

/// Abbreviations that do not end a sentence, stored lowercase without the
/// final period ("dr", "e.g").
using AbbreviationList = std::set<std::string>;

inline const AbbreviationList& default_abbreviations() {
  static const AbbreviationList list = {"approx", "dr", "e.g", "i.e", "jr", "mr",
                                        "mrs",    "ms", "mt",  "prof", "sr", "st", "vs"};
  return list;
}

inline AbbreviationList parse_abbreviations(std::string_view text) {
  AbbreviationList out;
  for (const auto& raw : split(text, '\n')) {
    std::string_view line = raw;
    if (auto hash = line.find('#'); hash != std::string_view::npos) line = line.substr(0, hash);
    line = trim(line);
    while (!line.empty() && line.back() == '.') line.remove_suffix(1);
    if (!line.empty()) out.insert(to_lower(line));
  }
  return out;
}

inline AbbreviationList load_abbreviations(const std::string& path) {
  return parse_abbreviations(read_file(path));
}

namespace detail {
inline bool is_terminator(char c) noexcept { return c == '.' || c == '!' || c == '?'; }
inline bool is_closer(char c) noexcept { return c == '"' || c == '\'' || c == ')' || c == ']'; }
}  // namespace detail

/// Splits on `.`, `!` or `?` (plus any trailing terminators and closing
/// quotes/brackets) when followed by whitespace or end of text. A single
/// period after a listed abbreviation does not split, nor does an ellipsis
/// followed by a lowercase word.
inline SegmentedResponse segment_sentences(std::string_view response,
                                           const AbbreviationList& abbreviations = default_abbreviations()) {
  const std::string text = collapse_whitespace(response);
  if (text.empty()) throw InputError("cannot segment an empty response");

  SegmentedResponse out;
  std::size_t start = 0;
  std::size_t i = 0;
  while (i < text.size()) {
    if (!detail::is_terminator(text[i])) {
      ++i;
      continue;
    }
    std::size_t end = i;
    while (end + 1 < text.size() && detail::is_terminator(text[end + 1])) ++end;
    const bool single_period = text[i] == '.' && end == i;
    const bool ellipsis = end > i && text.find_first_not_of('.', i) > end;
    while (end + 1 < text.size() && detail::is_closer(text[end + 1])) ++end;
    const bool at_boundary = end + 1 == text.size() || text[end + 1] == ' ';
    bool no_split = false;
    if (at_boundary && single_period) {
      std::size_t word_start = i;
      while (word_start > start && text[word_start - 1] != ' ') --word_start;
      while (word_start < i && (text[word_start] == '(' || text[word_start] == '"' || text[word_start] == '\'')) {
        ++word_start;
      }
      no_split = abbreviations.count(to_lower(std::string_view(text).substr(word_start, i - word_start))) > 0;
    }
    // "Wait... is it?" keeps going when the ellipsis runs into lowercase.
    if (at_boundary && ellipsis && end + 2 < text.size() &&
        std::islower(static_cast<unsigned char>(text[end + 2]))) {
      no_split = true;
    }
    if (at_boundary && !no_split) {
      out.sentences.emplace_back(text.substr(start, end + 1 - start));
      start = end + 2;
      i = start;
    } else {
      i = end + 1;
    }
  }
  if (start < text.size()) out.sentences.emplace_back(text.substr(start));
  return out;
}

// ---------------------------------------------------------------------------
// Object extraction.

struct ObjectTagSet {
  TagSet tags;
  std::vector<TagSet> per_sentence;

  friend bool operator==(const ObjectTagSet&, const ObjectTagSet&) = default;
};

namespace detail {
inline std::optional<std::string> match_with_plural(const SynonymLexicon& lex, std::vector<std::string> words) {
  const std::string exact = join(words, " ");
  if (auto tag = lex.lookup(exact)) return tag;
  std::string& last = words.back();
  if (last.size() > 1 && last.back() == 's') {
    last.pop_back();
    if (auto tag = lex.lookup(join(words, " "))) return tag;
    if (last.size() > 1 && last.back() == 'e') {
      last.pop_back();
      if (auto tag = lex.lookup(join(words, " "))) return tag;
    }
  }
  return std::nullopt;
}
}  // namespace detail

/// Tags mentioned in one sentence: longest-match-first over lexicon forms at
/// word boundaries, case-insensitive, with an optional plural "s"/"es".
inline TagSet parse_sentence_objects(std::string_view sentence, const SynonymLexicon& lexicon) {
  TagSet found;
  if (lexicon.empty()) return found;
  const auto words = tokenize_words(sentence);
  std::size_t i = 0;
  while (i < words.size()) {
    const std::size_t longest = std::min(lexicon.max_form_words(), words.size() - i);
    std::size_t matched = 0;
    for (std::size_t n = longest; n >= 1; --n) {
      std::vector<std::string> window(words.begin() + static_cast<std::ptrdiff_t>(i),
                                      words.begin() + static_cast<std::ptrdiff_t>(i + n));
      if (auto tag = detail::match_with_plural(lexicon, std::move(window))) {
        found.insert(*tag);
        matched = n;
        break;
      }
    }
    i += matched == 0 ? 1 : matched;
  }
  return found;
}

inline ObjectTagSet parse_objects(const SegmentedResponse& response, const SynonymLexicon& lexicon) {
  ObjectTagSet out;
  out.per_sentence.reserve(response.size());
  for (const auto& sentence : response.sentences) {
    auto tags = parse_sentence_objects(sentence, lexicon);
    out.tags.insert(tags.begin(), tags.end());
    out.per_sentence.push_back(std::move(tags));
  }
  return out;
}

}  // namespace selfinject
