#pragma once

#include <cstddef>
#include <cstdint>
#include <optional>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include "icft/types.hpp"

namespace icft::prompt {

/// Byte-level vocabulary: ids 0..255 are raw bytes, followed by three reserved ids.
inline constexpr TokenId kBos = 256;
inline constexpr TokenId kEos = 257;
inline constexpr TokenId kPad = 258;
inline constexpr int kVocabSize = 259;

inline Tokens tokenize(std::string_view text) {
  Tokens out;
  out.reserve(text.size());
  for (unsigned char c : text) out.push_back(static_cast<TokenId>(c));
  return out;
}

/// Reserved ids are dropped; byte ids are emitted verbatim.
inline std::string detokenize(const Tokens& ids) {
  std::string out;
  out.reserve(ids.size());
  for (TokenId t : ids)
    if (t >= 0 && t < 256) out.push_back(static_cast<char>(static_cast<unsigned char>(t)));
  return out;
}

struct Example {
  std::string x;
  std::string y;

  friend bool operator==(const Example&, const Example&) = default;
};

struct Template {
  std::string separator = "\n== Next Example ==\n";
  std::string query_suffix;
  std::optional<std::string> instruction;

  void validate() const {
    if (separator.empty()) throw std::invalid_argument("template separator must not be empty");
  }

  friend bool operator==(const Template&, const Template&) = default;
};

class SequenceTooLongError : public std::length_error {
 public:
  using std::length_error::length_error;
};

struct PromptMeta {
  std::size_t n_context = 0;
  std::size_t target_begin = 0;  // first token of the final response
  std::size_t target_end = 0;    // one past the EOS that closes it
};

/// Tokens plus a per-token loss mask (1 = response token that carries loss).
struct PromptSequence {
  Tokens tokens;
  std::vector<std::uint8_t> loss_mask;
  PromptMeta meta;

  std::size_t masked_count() const {
    std::size_t n = 0;
    for (auto m : loss_mask) n += m;
    return n;
  }

  /// Same tokens with loss only on the final response and its EOS.
  PromptSequence target_only() const {
    PromptSequence out = *this;
    for (std::size_t i = 0; i < out.loss_mask.size(); ++i)
      out.loss_mask[i] = (i >= meta.target_begin && i < meta.target_end) ? 1 : 0;
    return out;
  }
};

namespace detail {

inline void append(PromptSequence& s, std::string_view text, bool loss) {
  for (unsigned char c : text) {
    s.tokens.push_back(static_cast<TokenId>(c));
    s.loss_mask.push_back(loss ? 1 : 0);
  }
}

/// [instruction] x1 suffix y1 sep ... xk suffix yk sep x suffix
inline PromptSequence assemble_prefix(const std::vector<Example>& ctx, std::string_view x, const Template& tpl) {
  tpl.validate();
  PromptSequence s;
  if (tpl.instruction) append(s, *tpl.instruction, false);
  for (const auto& ex : ctx) {
    append(s, ex.x, false);
    append(s, tpl.query_suffix, false);
    append(s, ex.y, true);
    append(s, tpl.separator, false);
  }
  append(s, x, false);
  append(s, tpl.query_suffix, false);
  s.meta.n_context = ctx.size();
  return s;
}

inline void check_length(const PromptSequence& s, std::size_t max_len, std::size_t n_ctx) {
  if (s.tokens.size() > max_len) {
    throw SequenceTooLongError("prompt of " + std::to_string(s.tokens.size()) + " tokens (" + std::to_string(n_ctx) +
                               " context examples) exceeds the limit of " + std::to_string(max_len) + " tokens");
  }
}

}  // namespace detail

/// [instruction] x1 y1 sep ... xk yk sep x y EOS, with loss on every y_i, y and the final EOS.
inline PromptSequence build_training_sequence(const std::vector<Example>& ctx, const Example& target,
                                              const Template& tpl, std::size_t max_len) {
  if (target.y.empty()) throw std::invalid_argument("target response must not be empty");
  PromptSequence s = detail::assemble_prefix(ctx, target.x, tpl);
  s.meta.target_begin = s.tokens.size();
  detail::append(s, target.y, true);
  s.tokens.push_back(kEos);
  s.loss_mask.push_back(1);
  s.meta.target_end = s.tokens.size();
  detail::check_length(s, max_len, ctx.size());
  return s;
}

/// The training layout truncated after the final query (ready for scoring or decoding).
inline Tokens build_eval_prompt(const std::vector<Example>& ctx, std::string_view x, const Template& tpl,
                                std::size_t max_len) {
  PromptSequence s = detail::assemble_prefix(ctx, x, tpl);
  detail::check_length(s, max_len, ctx.size());
  return std::move(s.tokens);
}

}  // namespace icft::prompt
