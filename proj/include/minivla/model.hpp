#pragma once

#include "minivla/common.hpp"
#include "minivla/kv_cache.hpp"
#include "minivla/substrate.hpp"

#include <span>
#include <vector>

namespace minivla {

struct ModelConfig {
    std::int64_t vision_blocks = 4;
    std::int64_t decoder_blocks = 6; // shared by language and action decoders
    std::int64_t hidden_dim = 64;
    std::int64_t action_hidden_dim = 32;
    std::int64_t kv_dim = 32; // one KV width for both decoders
    std::int64_t heads = 4;
    std::int64_t vocab_size = 512;
    std::int64_t patch_size = 14;
    std::int64_t action_steps = 64;
    std::int64_t diffusion_iters = 10;
    float update_scale = 0.1f;
    std::int64_t max_new_tokens = 256;
    std::uint64_t weight_seed = 1234;

    std::int64_t head_dim() const { return kv_dim / heads; }
    void validate() const; // throws ConfigError
};

struct ActionStep {
    float accel = 0.0f;
    float curvature = 0.0f;
};

// 64 (acceleration, curvature) pairs at 10 Hz; the unit the diffusion loop
// refines.
struct ActionSequence {
    std::vector<ActionStep> steps;
};

enum class SampleMode { Greedy, Stochastic };
enum class ExecMode { Eager, Graph };

const char* exec_mode_name(ExecMode m);

// Greedy: argmax, lowest index on ties. Stochastic: one draw from
// softmax(logits) on the seeded generator. NaN logits are rejected.
std::int64_t sample_token(std::span<const float> logits, SampleMode mode, Rng& rng);

// pos x dim sinusoidal table, host-side.
std::vector<float> sinusoidal_table(std::int64_t positions, std::int64_t dim);

struct LinearWeights {
    std::int64_t in = 0;
    std::int64_t out = 0;
    std::vector<float> w; // [in, out] row-major
    std::vector<float> b; // [out]
};

struct NormWeights {
    std::vector<float> gamma;
    std::vector<float> beta;
};

struct BlockWeights {
    NormWeights ln1, ln2;
    LinearWeights q, k, v, o;
    LinearWeights mlp1, mlp2;
};

// Host-side weights, drawn uniform [-0.05, 0.05] from weight_seed in a fixed
// order. Norm scales start at 1, shifts at 0. Immutable once a Model is
// built from them; shareable across engines.
struct ModelWeights {
    ModelConfig cfg;
    LinearWeights patch_proj; // [patch*patch*3 -> hidden]
    std::vector<BlockWeights> vision;
    std::vector<float> token_embed; // [vocab, hidden]
    std::vector<BlockWeights> language;
    NormWeights language_final_ln;
    LinearWeights lm_head; // [hidden -> vocab]
    LinearWeights action_in;   // [2 -> action_hidden]
    LinearWeights action_mlp1; // [action_hidden -> 4*action_hidden]
    LinearWeights action_mlp2; // [4*action_hidden -> action_hidden]
    std::vector<BlockWeights> action;
    NormWeights action_final_ln;
    LinearWeights action_head; // [action_hidden -> 2]

    static ModelWeights build(const ModelConfig& cfg);
};

// The three transformer stacks bound to a substrate, weights uploaded once.
// All math flows through dispatched commands so counters and capture see it.
class Model {
public:
    Model(Substrate& substrate, const ModelWeights& weights);

    const ModelConfig& config() const { return cfg_; }
    Substrate& substrate() { return *sub_; }

    // patch_rows: [lanes*patches_per_lane, patch_size*patch_size*3].
    // Returns [lanes*patches_per_lane, hidden]; positions applied internally.
    BufferId vision_encode(BufferId patch_rows, std::int64_t lanes,
                           std::int64_t patches_per_lane);

    // ids uploaded as floats; returns [ids.size(), hidden], no positions.
    BufferId embed_tokens(const std::vector<std::int64_t>& ids);

    // ctx: [lanes*tokens, hidden] with positions already added. Populates the
    // empty cache's reasoning region and returns the final-norm last-position
    // hidden state [lanes, hidden].
    BufferId prefill(BufferId ctx, std::int64_t lanes, std::int64_t tokens,
                     KvCache& kv);

    struct DecodeWorkspace {
        std::int64_t lanes = 0;
        std::int64_t max_tokens = 0;
        BufferId xn, q, k, v, scores, ctx, attn, h1, h2, out;
    };
    DecodeWorkspace make_decode_workspace(std::int64_t lanes, std::int64_t max_tokens);

    // x: [lanes, hidden] embeddings of the tokens being processed (positions
    // added by the caller). Appends one KV row per lane per block; returns the
    // final-norm hidden state [lanes, hidden].
    BufferId decode_step(BufferId x, KvCache& kv, DecodeWorkspace& ws);

    BufferId logits_head(BufferId hidden, std::int64_t lanes); // [lanes, vocab]

    // --- action generation ---

    BufferId alloc_action_buffer(std::int64_t lanes); // [lanes*64, 2]

    struct ActionWorkspace {
        std::int64_t lanes = 0;
        std::int64_t kv_tokens = 0; // reasoning + action
        BufferId actions;           // [lanes*64, 2]
        BufferId pos;               // [lanes*64, action_hidden], tiled table
        BufferId e0, e, xn, attn, h2;
        BufferId q, k, v, ctx;
        BufferId h1;
        BufferId scores;
        BufferId delta, delta_scaled;
    };
    // Preallocates every buffer the iteration body touches, so capture sees
    // fixed addresses and iterations allocate nothing.
    ActionWorkspace make_action_workspace(BufferId actions, std::int64_t lanes,
                                          const KvCache& kv);

    void emit_action_encode(ActionWorkspace& ws);
    void emit_action_decoder(ActionWorkspace& ws, KvCache& kv, std::int64_t iteration);
    void emit_action_update(ActionWorkspace& ws);
    void run_action_iteration(ActionWorkspace& ws, KvCache& kv, std::int64_t iteration);

    struct DiffusionResult {
        std::vector<ActionSequence> actions;    // one per lane
        std::vector<double> iter_ms;            // one per iteration
        std::vector<DispatchStats> iter_stats;  // per-iteration deltas
        std::int64_t graph_commands = 0;        // 0 in eager mode
    };
    // Graph mode: iteration 1 runs eagerly (warm-up), capture happens during
    // iteration 2, every later iteration is a single replay.
    DiffusionResult diffusion_refine(BufferId actions, std::int64_t lanes, KvCache& kv,
                                     ExecMode mode);

    std::vector<ActionSequence> read_actions(BufferId actions, std::int64_t lanes) const;

private:
    struct DeviceLinear {
        BufferId w = kInvalidBuffer;
        BufferId b = kInvalidBuffer;
        std::int64_t in = 0, out = 0;
    };
    struct DeviceNorm {
        BufferId gamma = kInvalidBuffer;
        BufferId beta = kInvalidBuffer;
        std::int64_t width = 0;
    };
    struct DeviceBlock {
        DeviceNorm ln1, ln2;
        DeviceLinear q, k, v, o, mlp1, mlp2;
    };

    struct AttendSpec {
        BufferId k_buf, v_buf;
        std::int64_t tokens;
        std::int64_t k_base, v_base;
        std::int64_t lane_stride;
        std::int64_t row_stride;
        bool causal = false;
        std::int64_t causal_offset = 0;
    };

    DeviceLinear upload(const LinearWeights& w);
    DeviceNorm upload(const NormWeights& n, std::int64_t width);
    DeviceBlock upload(const BlockWeights& b, std::int64_t width);

    void emit_linear(BufferId x, std::int64_t rows, const DeviceLinear& lin,
                     BufferId out);
    void emit_norm(BufferId x, std::int64_t rows, const DeviceNorm& norm, BufferId out);
    void emit_unary(OpKind kind, BufferId x, std::int64_t rows, std::int64_t cols,
                    BufferId out, float alpha = 1.0f);
    void emit_add(BufferId a, BufferId b, std::int64_t rows, std::int64_t cols,
                  BufferId out, std::int64_t b_rows = 0);
    void emit_attention(BufferId q, std::int64_t lanes, std::int64_t q_tokens,
                        const AttendSpec& spec, BufferId scores, BufferId ctx);
    static AttendSpec spec_from_view(const KvView& view, bool causal,
                                     std::int64_t causal_offset);

    ModelConfig cfg_;
    Substrate* sub_;
    DeviceLinear patch_proj_;
    std::vector<DeviceBlock> vision_;
    BufferId token_embed_ = kInvalidBuffer;
    std::vector<DeviceBlock> language_;
    DeviceNorm language_final_ln_;
    DeviceLinear lm_head_;
    DeviceLinear action_in_, action_mlp1_, action_mlp2_;
    std::vector<DeviceBlock> action_;
    DeviceNorm action_final_ln_;
    DeviceLinear action_head_;
};

} // namespace minivla
