#include "minivla/kv_cache.hpp"

#include <utility>

namespace minivla {

namespace {

// Element offset of (source, lane, token, 0) in a block buffer with
// per-lane capacity `cap`.
std::int64_t region_offset(std::int64_t source, std::int64_t batch, std::int64_t lane,
                           std::int64_t cap, std::int64_t token, std::int64_t kv_dim) {
    return ((source * batch + lane) * cap + token) * kv_dim;
}

} // namespace

const char* kv_strategy_name(KvStrategy s) {
    return s == KvStrategy::Dynamic ? "dynamic" : "static";
}

std::int64_t kv_footprint_bytes(std::int64_t blocks, std::int64_t batch,
                                std::int64_t tokens, std::int64_t kv_dim,
                                std::int64_t elem_bytes) {
    return blocks * batch * tokens * kv_dim * 2 * elem_bytes;
}

KvCache::KvCache(Substrate& substrate, KvStrategy strategy, KvLayout layout)
    : KvCache(substrate, strategy, layout, 0) {
    if (strategy_ == KvStrategy::Static) {
        if (layout_.reasoning_capacity < 1) {
            throw ConfigError("static kv cache requires a positive reasoning_capacity");
        }
        const std::int64_t cap = layout_.reasoning_capacity + layout_.action_len;
        for (std::int64_t b = 0; b < layout_.num_blocks; ++b) {
            blocks_[b] = sub_->alloc({2, layout_.batch, cap, layout_.kv_dim});
        }
    }
}

KvCache::KvCache(Substrate& substrate, KvStrategy strategy, KvLayout layout, int)
    : sub_(&substrate), strategy_(strategy), layout_(layout) {
    if (layout_.num_blocks < 1 || layout_.batch < 1 || layout_.kv_dim < 1 ||
        layout_.action_len < 1) {
        throw ConfigError("kv layout dimensions must be positive");
    }
    blocks_.assign(layout_.num_blocks, kInvalidBuffer);
    lens_.assign(layout_.num_blocks, 0);
    action_iter_.assign(layout_.num_blocks, -1);
}

KvCache::~KvCache() {
    try {
        release();
    } catch (const Error&) {
        // Never throw from a destructor; leaked buffers die with the substrate.
    }
}

KvCache::KvCache(KvCache&& other) noexcept
    : sub_(other.sub_),
      strategy_(other.strategy_),
      layout_(other.layout_),
      blocks_(std::move(other.blocks_)),
      lens_(std::move(other.lens_)),
      action_iter_(std::move(other.action_iter_)),
      current_iteration_(other.current_iteration_),
      sealed_(other.sealed_) {
    other.blocks_.clear();
    other.sub_ = nullptr;
}

KvCache& KvCache::operator=(KvCache&& other) noexcept {
    if (this != &other) {
        try {
            release();
        } catch (const Error&) {
        }
        sub_ = other.sub_;
        strategy_ = other.strategy_;
        layout_ = other.layout_;
        blocks_ = std::move(other.blocks_);
        lens_ = std::move(other.lens_);
        action_iter_ = std::move(other.action_iter_);
        current_iteration_ = other.current_iteration_;
        sealed_ = other.sealed_;
        other.blocks_.clear();
        other.sub_ = nullptr;
    }
    return *this;
}

void KvCache::release() {
    if (!sub_) return;
    for (BufferId& id : blocks_) {
        if (id != kInvalidBuffer && sub_->alive(id)) sub_->free_buffer(id);
        id = kInvalidBuffer;
    }
}

void KvCache::check_block(std::int64_t block) const {
    if (block < 0 || block >= layout_.num_blocks) {
        throw InternalError("kv cache: block index " + std::to_string(block) +
                            " out of range");
    }
}

std::int64_t KvCache::cap_tokens(std::int64_t block) const {
    if (strategy_ == KvStrategy::Static) {
        return layout_.reasoning_capacity + layout_.action_len;
    }
    if (blocks_[block] == kInvalidBuffer) return 0;
    return sub_->shape(blocks_[block])[2];
}

std::int64_t KvCache::live_tokens(std::int64_t block) const {
    return lens_[block] + (action_iter_[block] >= 1 ? layout_.action_len : 0);
}

void KvCache::append_reasoning(std::int64_t block, BufferId keys, BufferId values,
                               std::int64_t tokens) {
    check_block(block);
    if (sealed_) throw InternalError("kv cache: append after reasoning sealed");
    if (tokens < 1) throw InternalError("kv cache: append of zero tokens");

    const std::int64_t batch = layout_.batch;
    const std::int64_t kd = layout_.kv_dim;
    const std::int64_t old = lens_[block];
    const BufferId src[2] = {keys, values};

    if (strategy_ == KvStrategy::Static) {
        if (old + tokens > layout_.reasoning_capacity) {
            throw InternalError("kv cache: capacity exceeded on block " +
                                std::to_string(block) + " (" +
                                std::to_string(old + tokens) + " > " +
                                std::to_string(layout_.reasoning_capacity) + ")");
        }
        const std::int64_t cap = cap_tokens(block);
        for (int s = 0; s < 2; ++s) {
            for (std::int64_t lane = 0; lane < batch; ++lane) {
                OpCommand cmd;
                cmd.kind = OpKind::WriteSlice;
                cmd.inputs = {src[s]};
                cmd.output = blocks_[block];
                cmd.attrs.in = {{lane * tokens * kd, tokens, kd, kd}};
                cmd.attrs.out = {region_offset(s, batch, lane, cap, old, kd), tokens, kd,
                                 kd};
                sub_->dispatch(cmd);
            }
        }
    } else {
        const std::int64_t total = old + tokens;
        const BufferId fresh = sub_->alloc({2, batch, total, kd});
        const BufferId previous = blocks_[block];
        for (int s = 0; s < 2; ++s) {
            for (std::int64_t lane = 0; lane < batch; ++lane) {
                OpCommand cmd;
                cmd.output = fresh;
                cmd.attrs.out = {region_offset(s, batch, lane, total, 0, kd), total, kd,
                                 kd};
                if (old == 0) {
                    cmd.kind = OpKind::WriteSlice;
                    cmd.inputs = {src[s]};
                    cmd.attrs.in = {{lane * tokens * kd, tokens, kd, kd}};
                } else {
                    cmd.kind = OpKind::Concat;
                    cmd.inputs = {previous, src[s]};
                    cmd.attrs.in = {
                        {region_offset(s, batch, lane, old, 0, kd), old, kd, kd},
                        {lane * tokens * kd, tokens, kd, kd}};
                }
                sub_->dispatch(cmd);
            }
        }
        if (previous != kInvalidBuffer) sub_->free_buffer(previous);
        blocks_[block] = fresh;
    }
    lens_[block] += tokens;
}

void KvCache::seal_reasoning() {
    if (sealed_) return;
    for (std::int64_t b = 1; b < layout_.num_blocks; ++b) {
        if (lens_[b] != lens_[0]) {
            throw InternalError("kv cache: uneven reasoning lengths across blocks");
        }
    }
    if (lens_[0] < 1) throw InternalError("kv cache: sealing an empty reasoning region");
    sealed_ = true;
}

void KvCache::write_action_kv(std::int64_t block, std::int64_t iteration, BufferId keys,
                              BufferId values) {
    check_block(block);
    if (!sealed_) throw InternalError("kv cache: action KV write before reasoning sealed");
    if (iteration < 1) throw InternalError("kv cache: iteration index must be >= 1");

    const std::int64_t batch = layout_.batch;
    const std::int64_t kd = layout_.kv_dim;
    const std::int64_t r = lens_[block];
    const std::int64_t alen = layout_.action_len;
    const BufferId src[2] = {keys, values};

    if (strategy_ == KvStrategy::Static) {
        const std::int64_t cap = cap_tokens(block);
        for (int s = 0; s < 2; ++s) {
            for (std::int64_t lane = 0; lane < batch; ++lane) {
                OpCommand cmd;
                cmd.kind = OpKind::WriteSlice;
                cmd.inputs = {src[s]};
                cmd.output = blocks_[block];
                cmd.attrs.in = {{lane * alen * kd, alen, kd, kd}};
                cmd.attrs.out = {region_offset(s, batch, lane, cap, r, kd), alen, kd,
                                 kd};
                sub_->dispatch(cmd);
            }
        }
    } else {
        // Full copy of the accumulated reasoning KV plus the fresh action KV
        // into a new allocation; the previous iteration's buffer is released,
        // keeping the logical footprint constant across iterations.
        const std::int64_t total = r + alen;
        const std::int64_t old_cap = cap_tokens(block);
        const BufferId fresh = sub_->alloc({2, batch, total, kd});
        const BufferId previous = blocks_[block];
        for (int s = 0; s < 2; ++s) {
            for (std::int64_t lane = 0; lane < batch; ++lane) {
                OpCommand cmd;
                cmd.kind = OpKind::Concat;
                cmd.inputs = {previous, src[s]};
                cmd.output = fresh;
                cmd.attrs.in = {
                    {region_offset(s, batch, lane, old_cap, 0, kd), r, kd, kd},
                    {lane * alen * kd, alen, kd, kd}};
                cmd.attrs.out = {region_offset(s, batch, lane, total, 0, kd), total, kd,
                                 kd};
                sub_->dispatch(cmd);
            }
        }
        sub_->free_buffer(previous);
        blocks_[block] = fresh;
    }
    action_iter_[block] = iteration;
    if (iteration > current_iteration_) current_iteration_ = iteration;
}

KvView KvCache::attend_view(std::int64_t block) const {
    check_block(block);
    if (!sealed_) throw InternalError("kv cache: attend before reasoning sealed");
    if (action_iter_[block] < 1 || action_iter_[block] != current_iteration_) {
        throw InternalError("kv cache: action region not yet written this iteration");
    }
    const std::int64_t cap = cap_tokens(block);
    KvView view;
    view.buffer = blocks_[block];
    view.batch = layout_.batch;
    view.tokens = lens_[block] + layout_.action_len;
    view.kv_dim = layout_.kv_dim;
    view.k_base = 0;
    view.v_base = layout_.batch * cap * layout_.kv_dim;
    view.lane_stride = cap * layout_.kv_dim;
    return view;
}

KvView KvCache::reasoning_view(std::int64_t block) const {
    check_block(block);
    if (lens_[block] < 1) throw InternalError("kv cache: reasoning region is empty");
    const std::int64_t cap = cap_tokens(block);
    KvView view;
    view.buffer = blocks_[block];
    view.batch = layout_.batch;
    view.tokens = lens_[block];
    view.kv_dim = layout_.kv_dim;
    view.k_base = 0;
    view.v_base = layout_.batch * cap * layout_.kv_dim;
    view.lane_stride = cap * layout_.kv_dim;
    return view;
}

KvCache KvCache::replicate_for_batch(std::int64_t n) const {
    if (layout_.batch != 1) {
        throw InternalError("replicate_for_batch: source cache must have batch 1");
    }
    if (!sealed_) throw InternalError("replicate_for_batch: reasoning not sealed");
    if (n < 1) throw InternalError("replicate_for_batch: n must be >= 1");

    KvLayout lay = layout_;
    lay.batch = n;
    const std::int64_t kd = layout_.kv_dim;
    const std::int64_t r = lens_[0];

    KvCache out(*sub_, strategy_, lay, 0);
    out.sealed_ = true;
    out.lens_.assign(lay.num_blocks, r);
    for (std::int64_t b = 0; b < lay.num_blocks; ++b) {
        const std::int64_t src_cap = cap_tokens(b);
        std::int64_t dst_cap;
        if (strategy_ == KvStrategy::Static) {
            dst_cap = lay.reasoning_capacity + lay.action_len;
            out.blocks_[b] = sub_->alloc({2, n, dst_cap, kd});
        } else {
            dst_cap = r;
            out.blocks_[b] = sub_->alloc({2, n, r, kd});
        }
        for (int s = 0; s < 2; ++s) {
            for (std::int64_t lane = 0; lane < n; ++lane) {
                OpCommand cmd;
                cmd.kind = OpKind::Copy;
                cmd.inputs = {blocks_[b]};
                cmd.output = out.blocks_[b];
                cmd.attrs.in = {{region_offset(s, 1, 0, src_cap, 0, kd), r, kd, kd}};
                cmd.attrs.out = {region_offset(s, n, lane, dst_cap, 0, kd), r, kd, kd};
                sub_->dispatch(cmd);
            }
        }
    }
    return out;
}

void KvCache::fingerprint_block(std::int64_t block, std::int64_t lane_begin,
                                std::int64_t lane_end, std::int64_t token_count,
                                Fnv1a& hash) const {
    if (token_count == 0 || blocks_[block] == kInvalidBuffer) return;
    const std::span<const float> data = sub_->read(blocks_[block]);
    const std::int64_t cap = cap_tokens(block);
    const std::int64_t kd = layout_.kv_dim;
    for (std::int64_t lane = lane_begin; lane < lane_end; ++lane) {
        for (std::int64_t t = 0; t < token_count; ++t) {
            for (int s = 0; s < 2; ++s) {
                const std::int64_t off =
                    region_offset(s, layout_.batch, lane, cap, t, kd);
                hash.update(data.data() + off, static_cast<std::size_t>(kd) * 4);
            }
        }
    }
}

std::uint64_t KvCache::content_fingerprint() const {
    Fnv1a hash;
    for (std::int64_t b = 0; b < layout_.num_blocks; ++b) {
        fingerprint_block(b, 0, layout_.batch, live_tokens(b), hash);
    }
    return hash.digest();
}

std::uint64_t KvCache::reasoning_fingerprint() const {
    Fnv1a hash;
    for (std::int64_t b = 0; b < layout_.num_blocks; ++b) {
        fingerprint_block(b, 0, layout_.batch, lens_[b], hash);
    }
    return hash.digest();
}

std::uint64_t KvCache::lane_fingerprint(std::int64_t lane) const {
    if (lane < 0 || lane >= layout_.batch) {
        throw InternalError("lane_fingerprint: lane out of range");
    }
    Fnv1a hash;
    for (std::int64_t b = 0; b < layout_.num_blocks; ++b) {
        fingerprint_block(b, lane, lane + 1, live_tokens(b), hash);
    }
    return hash.digest();
}

std::int64_t KvCache::footprint_bytes() const {
    std::int64_t total = 0;
    for (std::int64_t b = 0; b < layout_.num_blocks; ++b) {
        total += kv_footprint_bytes(1, layout_.batch, live_tokens(b), layout_.kv_dim,
                                    sizeof(float));
    }
    return total;
}

} // namespace minivla
