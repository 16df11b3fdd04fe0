#pragma once

#include <algorithm>
#include <cstddef>
#include <cstdint>
#include <vector>

#include "glossmt/error.hpp"

namespace glossmt {

// Reserved vocabulary ids.
inline constexpr std::int32_t kPadId = 0;
inline constexpr std::int32_t kBosId = 1;
inline constexpr std::int32_t kEosId = 2;
inline constexpr std::int32_t kUnkId = 3;
inline constexpr std::size_t kNumReserved = 4;

using TokenIds = std::vector<std::int32_t>;

// Padded source/target id matrices (row-major, one row per sentence).
// Decoder input is [BOS, w1..wn] and the expected output is [w1..wn, EOS].
struct SequenceBatch {
  std::size_t batch = 0;
  std::size_t src_len = 0;
  std::size_t tgt_len = 0;  // 0 for source-only batches
  std::vector<std::int32_t> src_ids;
  std::vector<std::int32_t> tgt_in_ids;
  std::vector<std::int32_t> tgt_out_ids;
  std::vector<std::uint8_t> src_pad;  // 1 marks padding
  std::vector<std::uint8_t> tgt_pad;
  std::vector<std::size_t> indices;   // corpus positions of the rows

  // `tgts` may be empty for a source-only batch. Widths smaller than the
  // longest sequence are raised to fit it.
  static SequenceBatch build(const std::vector<TokenIds>& srcs, const std::vector<TokenIds>& tgts,
                             std::size_t src_width = 0, std::size_t tgt_width = 0) {
    if (srcs.empty()) throw ContractError("SequenceBatch: no sentences");
    if (!tgts.empty() && tgts.size() != srcs.size()) {
      throw ContractError("SequenceBatch: " + std::to_string(srcs.size()) + " sources vs " +
                          std::to_string(tgts.size()) + " targets");
    }
    SequenceBatch b;
    b.batch = srcs.size();
    b.src_len = src_width;
    for (const auto& s : srcs) {
      if (s.empty()) throw DataError("SequenceBatch: empty source sentence");
      b.src_len = std::max(b.src_len, s.size());
    }
    b.src_ids.assign(b.batch * b.src_len, kPadId);
    b.src_pad.assign(b.batch * b.src_len, 1);
    for (std::size_t r = 0; r < b.batch; ++r) {
      for (std::size_t j = 0; j < srcs[r].size(); ++j) {
        b.src_ids[r * b.src_len + j] = srcs[r][j];
        b.src_pad[r * b.src_len + j] = 0;
      }
    }
    if (!tgts.empty()) {
      b.tgt_len = tgt_width;
      for (const auto& t : tgts) b.tgt_len = std::max(b.tgt_len, t.size() + 1);
      b.tgt_in_ids.assign(b.batch * b.tgt_len, kPadId);
      b.tgt_out_ids.assign(b.batch * b.tgt_len, kPadId);
      b.tgt_pad.assign(b.batch * b.tgt_len, 1);
      for (std::size_t r = 0; r < b.batch; ++r) {
        const auto& t = tgts[r];
        const std::size_t base = r * b.tgt_len;
        b.tgt_in_ids[base] = kBosId;
        for (std::size_t j = 0; j < t.size(); ++j) {
          b.tgt_in_ids[base + j + 1] = t[j];
          b.tgt_out_ids[base + j] = t[j];
        }
        b.tgt_out_ids[base + t.size()] = kEosId;
        for (std::size_t j = 0; j <= t.size(); ++j) b.tgt_pad[base + j] = 0;
      }
    }
    b.indices.resize(b.batch);
    for (std::size_t r = 0; r < b.batch; ++r) b.indices[r] = r;
    return b;
  }

  std::size_t target_tokens() const {
    return static_cast<std::size_t>(std::count(tgt_pad.begin(), tgt_pad.end(), std::uint8_t{0}));
  }
};

}  // namespace glossmt
