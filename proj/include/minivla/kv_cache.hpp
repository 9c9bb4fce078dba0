#pragma once

#include "minivla/substrate.hpp"

#include <cstdint>
#include <vector>

namespace minivla {

enum class KvStrategy { Dynamic, Static };

const char* kv_strategy_name(KvStrategy s);

struct KvLayout {
    std::int64_t num_blocks = 1;
    std::int64_t batch = 1;
    std::int64_t kv_dim = 32;
    std::int64_t action_len = 64;
    // Static strategy: maximum reasoning tokens, fixed up front (the
    // offline-profiled bound). Ignored by the dynamic strategy.
    std::int64_t reasoning_capacity = 0;
};

// Pure sizing formula; elem_bytes parameterized so full-scale deployments
// (2-byte elements) can be sized without instantiating anything.
std::int64_t kv_footprint_bytes(std::int64_t blocks, std::int64_t batch,
                                std::int64_t tokens, std::int64_t kv_dim,
                                std::int64_t elem_bytes);

// Read-only window over one block's keys and values spanning
// reasoning + action tokens. Rows within a lane are contiguous, so slices
// need no copying.
struct KvView {
    BufferId buffer = kInvalidBuffer;
    std::int64_t batch = 0;
    std::int64_t tokens = 0; // reasoning_len + action_len
    std::int64_t kv_dim = 0;
    std::int64_t k_base = 0;
    std::int64_t v_base = 0;
    std::int64_t lane_stride = 0;

    TensorView k_slice(std::int64_t lane, std::int64_t col_offset,
                       std::int64_t col_count) const {
        return {k_base + lane * lane_stride + col_offset, tokens, col_count, kv_dim};
    }
    TensorView v_slice(std::int64_t lane, std::int64_t col_offset,
                       std::int64_t col_count) const {
        return {v_base + lane * lane_stride + col_offset, tokens, col_count, kv_dim};
    }
};

// Per-block key/value storage. Each block owns one buffer shaped
// [2(K,V), batch, tokens, kv_dim]. Dynamic strategy: every append copies the
// accumulated content plus the new rows into a freshly allocated buffer.
// Static strategy: the buffer is preallocated once and all writes are
// in-place at a per-block cursor; no allocation ever happens past init.
class KvCache {
public:
    KvCache(Substrate& substrate, KvStrategy strategy, KvLayout layout);
    ~KvCache();

    KvCache(KvCache&&) noexcept;
    KvCache& operator=(KvCache&&) noexcept;
    KvCache(const KvCache&) = delete;
    KvCache& operator=(const KvCache&) = delete;

    // keys/values: dense [batch*tokens, kv_dim] buffers, lane-major rows.
    void append_reasoning(std::int64_t block, BufferId keys, BufferId values,
                          std::int64_t tokens);
    void seal_reasoning();
    void write_action_kv(std::int64_t block, std::int64_t iteration, BufferId keys,
                         BufferId values);
    KvView attend_view(std::int64_t block) const;
    // Reasoning tokens only; usable during prefill/decode before sealing.
    KvView reasoning_view(std::int64_t block) const;

    KvCache replicate_for_batch(std::int64_t n) const;

    std::uint64_t content_fingerprint() const;
    std::uint64_t reasoning_fingerprint() const;
    std::uint64_t lane_fingerprint(std::int64_t lane) const;
    std::int64_t footprint_bytes() const;

    KvStrategy strategy() const { return strategy_; }
    const KvLayout& layout() const { return layout_; }
    bool sealed() const { return sealed_; }
    std::int64_t reasoning_len(std::int64_t block = 0) const { return lens_.at(block); }
    std::int64_t write_cursor(std::int64_t block) const { return lens_.at(block); }
    std::int64_t current_iteration() const { return current_iteration_; }
    BufferId block_buffer(std::int64_t block) const { return blocks_.at(block); }

    // Frees all owned buffers still alive; safe to call more than once.
    void release();

private:
    KvCache(Substrate& substrate, KvStrategy strategy, KvLayout layout, int);

    std::int64_t cap_tokens(std::int64_t block) const;
    std::int64_t live_tokens(std::int64_t block) const;
    void fingerprint_block(std::int64_t block, std::int64_t lane_begin,
                           std::int64_t lane_end, std::int64_t token_count,
                           Fnv1a& hash) const;
    void check_block(std::int64_t block) const;

    Substrate* sub_ = nullptr;
    KvStrategy strategy_ = KvStrategy::Dynamic;
    KvLayout layout_;
    std::vector<BufferId> blocks_;          // kInvalidBuffer until first content
    std::vector<std::int64_t> lens_;        // reasoning tokens per block
    std::vector<std::int64_t> action_iter_; // last action iteration, -1 if none
    std::int64_t current_iteration_ = -1;
    bool sealed_ = false;
};

} // namespace minivla
