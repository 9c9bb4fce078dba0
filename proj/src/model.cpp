#include "minivla/model.hpp"

#include <chrono>
#include <cmath>
#include <cstring>

namespace minivla {

void ModelConfig::validate() const {
    if (decoder_blocks < 1) throw ConfigError("decoder_blocks must be >= 1");
    if (vision_blocks < 0) throw ConfigError("vision_blocks must be >= 0");
    if (hidden_dim < 1 || action_hidden_dim < 1) {
        throw ConfigError("hidden dimensions must be positive");
    }
    if (heads < 1 || kv_dim < 1 || kv_dim % heads != 0) {
        throw ConfigError("kv_dim must be a positive multiple of heads");
    }
    if (vocab_size < 128) throw ConfigError("vocab_size must be >= 128");
    if (patch_size < 1) throw ConfigError("patch_size must be >= 1");
    if (action_steps != 64) throw ConfigError("action_steps must be 64");
    if (diffusion_iters < 1) throw ConfigError("diffusion_iters must be >= 1");
    if (!(update_scale > 0.0f)) throw ConfigError("update_scale must be > 0");
    if (max_new_tokens < 1) throw ConfigError("max_new_tokens must be >= 1");
}

const char* exec_mode_name(ExecMode m) {
    return m == ExecMode::Eager ? "eager" : "graph";
}

std::int64_t sample_token(std::span<const float> logits, SampleMode mode, Rng& rng) {
    if (logits.empty()) throw InternalError("sample_token: empty logits");
    for (float v : logits) {
        if (std::isnan(v)) throw InternalError("sample_token: NaN logits");
    }
    if (mode == SampleMode::Greedy) {
        std::int64_t best = 0;
        for (std::int64_t i = 1; i < static_cast<std::int64_t>(logits.size()); ++i) {
            if (logits[i] > logits[best]) best = i;
        }
        return best;
    }
    // Temperature-1 softmax over the full vocabulary, one CDF walk.
    double mx = logits[0];
    for (float v : logits) mx = std::max(mx, static_cast<double>(v));
    double sum = 0.0;
    for (float v : logits) sum += std::exp(static_cast<double>(v) - mx);
    const double u = static_cast<double>(rng.next_float()) * sum;
    double acc = 0.0;
    for (std::int64_t i = 0; i < static_cast<std::int64_t>(logits.size()); ++i) {
        acc += std::exp(static_cast<double>(logits[i]) - mx);
        if (u < acc) return i;
    }
    return static_cast<std::int64_t>(logits.size()) - 1;
}

std::vector<float> sinusoidal_table(std::int64_t positions, std::int64_t dim) {
    std::vector<float> table(positions * dim);
    for (std::int64_t p = 0; p < positions; ++p) {
        for (std::int64_t i = 0; i < dim; ++i) {
            const double exponent = static_cast<double>(2 * (i / 2)) / dim;
            const double freq = std::pow(10000.0, exponent);
            const double angle = static_cast<double>(p) / freq;
            table[p * dim + i] =
                static_cast<float>((i % 2 == 0) ? std::sin(angle) : std::cos(angle));
        }
    }
    return table;
}

namespace {

LinearWeights draw_linear(Rng& rng, std::int64_t in, std::int64_t out) {
    LinearWeights lin;
    lin.in = in;
    lin.out = out;
    lin.w.resize(in * out);
    lin.b.resize(out);
    for (auto& v : lin.w) v = rng.uniform(-0.05f, 0.05f);
    for (auto& v : lin.b) v = rng.uniform(-0.05f, 0.05f);
    return lin;
}

NormWeights make_norm(std::int64_t width) {
    NormWeights n;
    n.gamma.assign(width, 1.0f);
    n.beta.assign(width, 0.0f);
    return n;
}

BlockWeights draw_block(Rng& rng, std::int64_t width, std::int64_t kv_dim) {
    BlockWeights b;
    b.ln1 = make_norm(width);
    b.ln2 = make_norm(width);
    b.q = draw_linear(rng, width, kv_dim);
    b.k = draw_linear(rng, width, kv_dim);
    b.v = draw_linear(rng, width, kv_dim);
    b.o = draw_linear(rng, kv_dim, width);
    b.mlp1 = draw_linear(rng, width, 4 * width);
    b.mlp2 = draw_linear(rng, 4 * width, width);
    return b;
}

double now_ms() {
    return std::chrono::duration<double, std::milli>(
               std::chrono::steady_clock::now().time_since_epoch())
        .count();
}

DispatchStats stats_delta(const DispatchStats& a, const DispatchStats& b) {
    DispatchStats d;
    d.dispatch_count = b.dispatch_count - a.dispatch_count;
    d.replay_count = b.replay_count - a.replay_count;
    d.alloc_count = b.alloc_count - a.alloc_count;
    d.bytes_allocated = b.bytes_allocated - a.bytes_allocated;
    return d;
}

} // namespace

ModelWeights ModelWeights::build(const ModelConfig& cfg) {
    cfg.validate();
    ModelWeights w;
    w.cfg = cfg;
    Rng rng(cfg.weight_seed);
    const std::int64_t patch_dim = cfg.patch_size * cfg.patch_size * 3;

    w.patch_proj = draw_linear(rng, patch_dim, cfg.hidden_dim);
    w.vision.reserve(cfg.vision_blocks);
    for (std::int64_t i = 0; i < cfg.vision_blocks; ++i) {
        w.vision.push_back(draw_block(rng, cfg.hidden_dim, cfg.kv_dim));
    }
    w.token_embed.resize(cfg.vocab_size * cfg.hidden_dim);
    for (auto& v : w.token_embed) v = rng.uniform(-0.05f, 0.05f);
    w.language.reserve(cfg.decoder_blocks);
    for (std::int64_t i = 0; i < cfg.decoder_blocks; ++i) {
        w.language.push_back(draw_block(rng, cfg.hidden_dim, cfg.kv_dim));
    }
    w.language_final_ln = make_norm(cfg.hidden_dim);
    w.lm_head = draw_linear(rng, cfg.hidden_dim, cfg.vocab_size);

    w.action_in = draw_linear(rng, 2, cfg.action_hidden_dim);
    w.action_mlp1 = draw_linear(rng, cfg.action_hidden_dim, 4 * cfg.action_hidden_dim);
    w.action_mlp2 = draw_linear(rng, 4 * cfg.action_hidden_dim, cfg.action_hidden_dim);
    w.action.reserve(cfg.decoder_blocks);
    for (std::int64_t i = 0; i < cfg.decoder_blocks; ++i) {
        w.action.push_back(draw_block(rng, cfg.action_hidden_dim, cfg.kv_dim));
    }
    w.action_final_ln = make_norm(cfg.action_hidden_dim);
    w.action_head = draw_linear(rng, cfg.action_hidden_dim, 2);
    return w;
}

Model::DeviceLinear Model::upload(const LinearWeights& w) {
    DeviceLinear d;
    d.in = w.in;
    d.out = w.out;
    d.w = sub_->alloc({w.in, w.out});
    sub_->write(d.w, w.w);
    d.b = sub_->alloc({w.out});
    sub_->write(d.b, w.b);
    return d;
}

Model::DeviceNorm Model::upload(const NormWeights& n, std::int64_t width) {
    DeviceNorm d;
    d.width = width;
    d.gamma = sub_->alloc({width});
    sub_->write(d.gamma, n.gamma);
    d.beta = sub_->alloc({width});
    sub_->write(d.beta, n.beta);
    return d;
}

Model::DeviceBlock Model::upload(const BlockWeights& b, std::int64_t width) {
    DeviceBlock d;
    d.ln1 = upload(b.ln1, width);
    d.ln2 = upload(b.ln2, width);
    d.q = upload(b.q);
    d.k = upload(b.k);
    d.v = upload(b.v);
    d.o = upload(b.o);
    d.mlp1 = upload(b.mlp1);
    d.mlp2 = upload(b.mlp2);
    return d;
}

Model::Model(Substrate& substrate, const ModelWeights& weights)
    : cfg_(weights.cfg), sub_(&substrate) {
    cfg_.validate();
    patch_proj_ = upload(weights.patch_proj);
    for (const auto& b : weights.vision) vision_.push_back(upload(b, cfg_.hidden_dim));
    token_embed_ = sub_->alloc({cfg_.vocab_size, cfg_.hidden_dim});
    sub_->write(token_embed_, weights.token_embed);
    for (const auto& b : weights.language) {
        language_.push_back(upload(b, cfg_.hidden_dim));
    }
    language_final_ln_ = upload(weights.language_final_ln, cfg_.hidden_dim);
    lm_head_ = upload(weights.lm_head);
    action_in_ = upload(weights.action_in);
    action_mlp1_ = upload(weights.action_mlp1);
    action_mlp2_ = upload(weights.action_mlp2);
    for (const auto& b : weights.action) {
        action_.push_back(upload(b, cfg_.action_hidden_dim));
    }
    action_final_ln_ = upload(weights.action_final_ln, cfg_.action_hidden_dim);
    action_head_ = upload(weights.action_head);
}

void Model::emit_linear(BufferId x, std::int64_t rows, const DeviceLinear& lin,
                        BufferId out) {
    OpCommand mm;
    mm.kind = OpKind::Matmul;
    mm.inputs = {x, lin.w};
    mm.output = out;
    mm.attrs.in = {{0, rows, lin.in, lin.in}, {0, lin.in, lin.out, lin.out}};
    mm.attrs.out = {0, rows, lin.out, lin.out};
    sub_->dispatch(mm);

    OpCommand bias;
    bias.kind = OpKind::Add;
    bias.inputs = {out, lin.b};
    bias.output = out;
    bias.attrs.in = {{0, rows, lin.out, lin.out}, {0, 1, lin.out, lin.out}};
    bias.attrs.out = {0, rows, lin.out, lin.out};
    sub_->dispatch(bias);
}

void Model::emit_norm(BufferId x, std::int64_t rows, const DeviceNorm& norm,
                      BufferId out) {
    OpCommand cmd;
    cmd.kind = OpKind::Layernorm;
    cmd.inputs = {x, norm.gamma, norm.beta};
    cmd.output = out;
    cmd.attrs.in = {{0, rows, norm.width, norm.width},
                    {0, 1, norm.width, norm.width},
                    {0, 1, norm.width, norm.width}};
    cmd.attrs.out = {0, rows, norm.width, norm.width};
    sub_->dispatch(cmd);
}

void Model::emit_unary(OpKind kind, BufferId x, std::int64_t rows, std::int64_t cols,
                       BufferId out, float alpha) {
    OpCommand cmd;
    cmd.kind = kind;
    cmd.inputs = {x};
    cmd.output = out;
    cmd.attrs.alpha = alpha;
    cmd.attrs.in = {{0, rows, cols, cols}};
    cmd.attrs.out = {0, rows, cols, cols};
    sub_->dispatch(cmd);
}

void Model::emit_add(BufferId a, BufferId b, std::int64_t rows, std::int64_t cols,
                     BufferId out, std::int64_t b_rows) {
    OpCommand cmd;
    cmd.kind = OpKind::Add;
    cmd.inputs = {a, b};
    cmd.output = out;
    cmd.attrs.in = {{0, rows, cols, cols},
                    {0, b_rows == 0 ? rows : b_rows, cols, cols}};
    cmd.attrs.out = {0, rows, cols, cols};
    sub_->dispatch(cmd);
}

Model::AttendSpec Model::spec_from_view(const KvView& view, bool causal,
                                        std::int64_t causal_offset) {
    AttendSpec spec;
    spec.k_buf = view.buffer;
    spec.v_buf = view.buffer;
    spec.tokens = view.tokens;
    spec.k_base = view.k_base;
    spec.v_base = view.v_base;
    spec.lane_stride = view.lane_stride;
    spec.row_stride = view.kv_dim;
    spec.causal = causal;
    spec.causal_offset = causal_offset;
    return spec;
}

void Model::emit_attention(BufferId q, std::int64_t lanes, std::int64_t q_tokens,
                           const AttendSpec& spec, BufferId scores, BufferId ctx) {
    const std::int64_t kd = cfg_.kv_dim;
    const std::int64_t hd = cfg_.head_dim();
    const float inv_sqrt = 1.0f / std::sqrt(static_cast<float>(hd));
    for (std::int64_t lane = 0; lane < lanes; ++lane) {
        for (std::int64_t head = 0; head < cfg_.heads; ++head) {
            const TensorView qv{(lane * q_tokens) * kd + head * hd, q_tokens, hd, kd};
            const TensorView kv{spec.k_base + lane * spec.lane_stride + head * hd,
                                spec.tokens, hd, spec.row_stride};
            const TensorView vv{spec.v_base + lane * spec.lane_stride + head * hd,
                                spec.tokens, hd, spec.row_stride};
            const TensorView sv{0, q_tokens, spec.tokens, spec.tokens};
            const TensorView cv{(lane * q_tokens) * kd + head * hd, q_tokens, hd, kd};

            OpCommand mm;
            mm.kind = OpKind::Matmul;
            mm.inputs = {q, spec.k_buf};
            mm.output = scores;
            mm.attrs.in = {qv, kv};
            mm.attrs.out = sv;
            mm.attrs.transpose_b = true;
            mm.attrs.alpha = inv_sqrt;
            sub_->dispatch(mm);

            OpCommand sm;
            sm.kind = OpKind::Softmax;
            sm.inputs = {scores};
            sm.output = scores;
            sm.attrs.in = {sv};
            sm.attrs.out = sv;
            sm.attrs.causal = spec.causal;
            sm.attrs.causal_offset = spec.causal_offset;
            sub_->dispatch(sm);

            OpCommand av;
            av.kind = OpKind::Matmul;
            av.inputs = {scores, spec.v_buf};
            av.output = ctx;
            av.attrs.in = {sv, vv};
            av.attrs.out = cv;
            sub_->dispatch(av);
        }
    }
}

BufferId Model::vision_encode(BufferId patch_rows, std::int64_t lanes,
                              std::int64_t patches_per_lane) {
    const std::int64_t h = cfg_.hidden_dim;
    const std::int64_t kd = cfg_.kv_dim;
    const std::int64_t rows = lanes * patches_per_lane;

    const BufferId x = sub_->alloc({rows, h});
    emit_linear(patch_rows, rows, patch_proj_, x);

    const BufferId pos = sub_->alloc({patches_per_lane, h});
    sub_->write(pos, sinusoidal_table(patches_per_lane, h));
    for (std::int64_t lane = 0; lane < lanes; ++lane) {
        OpCommand cmd;
        cmd.kind = OpKind::Add;
        cmd.inputs = {x, pos};
        cmd.output = x;
        cmd.attrs.in = {{lane * patches_per_lane * h, patches_per_lane, h, h},
                        {0, patches_per_lane, h, h}};
        cmd.attrs.out = {lane * patches_per_lane * h, patches_per_lane, h, h};
        sub_->dispatch(cmd);
    }

    if (!vision_.empty()) {
        const BufferId xn = sub_->alloc({rows, h});
        const BufferId q = sub_->alloc({rows, kd});
        const BufferId k = sub_->alloc({rows, kd});
        const BufferId v = sub_->alloc({rows, kd});
        const BufferId scores =
            sub_->alloc({patches_per_lane, patches_per_lane});
        const BufferId ctx = sub_->alloc({rows, kd});
        const BufferId attn = sub_->alloc({rows, h});
        const BufferId h1 = sub_->alloc({rows, 4 * h});
        const BufferId h2 = sub_->alloc({rows, h});

        for (const DeviceBlock& block : vision_) {
            emit_norm(x, rows, block.ln1, xn);
            emit_linear(xn, rows, block.q, q);
            emit_linear(xn, rows, block.k, k);
            emit_linear(xn, rows, block.v, v);
            AttendSpec spec;
            spec.k_buf = k;
            spec.v_buf = v;
            spec.tokens = patches_per_lane;
            spec.k_base = 0;
            spec.v_base = 0;
            spec.lane_stride = patches_per_lane * kd;
            spec.row_stride = kd;
            spec.causal = false;
            emit_attention(q, lanes, patches_per_lane, spec, scores, ctx);
            emit_linear(ctx, rows, block.o, attn);
            emit_add(x, attn, rows, h, x);
            emit_norm(x, rows, block.ln2, xn);
            emit_linear(xn, rows, block.mlp1, h1);
            emit_unary(OpKind::Gelu, h1, rows, 4 * h, h1);
            emit_linear(h1, rows, block.mlp2, h2);
            emit_add(x, h2, rows, h, x);
        }
    }
    return x;
}

BufferId Model::embed_tokens(const std::vector<std::int64_t>& ids) {
    if (ids.empty()) throw InternalError("embed_tokens: empty id list");
    const auto n = static_cast<std::int64_t>(ids.size());
    const BufferId id_buf = sub_->alloc({n});
    std::vector<float> as_float(ids.size());
    for (std::size_t i = 0; i < ids.size(); ++i) {
        as_float[i] = static_cast<float>(ids[i]);
    }
    sub_->write(id_buf, as_float);
    const BufferId out = sub_->alloc({n, cfg_.hidden_dim});
    OpCommand cmd;
    cmd.kind = OpKind::EmbedLookup;
    cmd.inputs = {token_embed_, id_buf};
    cmd.output = out;
    cmd.attrs.in = {{0, cfg_.vocab_size, cfg_.hidden_dim, cfg_.hidden_dim},
                    {0, 1, n, n}};
    cmd.attrs.out = {0, n, cfg_.hidden_dim, cfg_.hidden_dim};
    sub_->dispatch(cmd);
    return out;
}

BufferId Model::prefill(BufferId ctx, std::int64_t lanes, std::int64_t tokens,
                        KvCache& kv) {
    if (kv.sealed() || kv.reasoning_len() != 0) {
        throw InternalError("prefill requires an empty, unsealed kv cache");
    }
    if (tokens < 1) throw InternalError("prefill: need at least one token");
    const std::int64_t h = cfg_.hidden_dim;
    const std::int64_t kd = cfg_.kv_dim;
    const std::int64_t rows = lanes * tokens;

    const BufferId xn = sub_->alloc({rows, h});
    const BufferId q = sub_->alloc({rows, kd});
    const BufferId k = sub_->alloc({rows, kd});
    const BufferId v = sub_->alloc({rows, kd});
    const BufferId scores = sub_->alloc({tokens, tokens});
    const BufferId ctxb = sub_->alloc({rows, kd});
    const BufferId attn = sub_->alloc({rows, h});
    const BufferId h1 = sub_->alloc({rows, 4 * h});
    const BufferId h2 = sub_->alloc({rows, h});

    for (std::int64_t b = 0; b < cfg_.decoder_blocks; ++b) {
        const DeviceBlock& block = language_[b];
        emit_norm(ctx, rows, block.ln1, xn);
        emit_linear(xn, rows, block.q, q);
        emit_linear(xn, rows, block.k, k);
        emit_linear(xn, rows, block.v, v);
        kv.append_reasoning(b, k, v, tokens);
        const AttendSpec spec = spec_from_view(kv.reasoning_view(b), true, 0);
        emit_attention(q, lanes, tokens, spec, scores, ctxb);
        emit_linear(ctxb, rows, block.o, attn);
        emit_add(ctx, attn, rows, h, ctx);
        emit_norm(ctx, rows, block.ln2, xn);
        emit_linear(xn, rows, block.mlp1, h1);
        emit_unary(OpKind::Gelu, h1, rows, 4 * h, h1);
        emit_linear(h1, rows, block.mlp2, h2);
        emit_add(ctx, h2, rows, h, ctx);
    }
    emit_norm(ctx, rows, language_final_ln_, xn);

    const BufferId hidden = sub_->alloc({lanes, h});
    for (std::int64_t lane = 0; lane < lanes; ++lane) {
        OpCommand cmd;
        cmd.kind = OpKind::ReadSlice;
        cmd.inputs = {xn};
        cmd.output = hidden;
        cmd.attrs.in = {{(lane * tokens + tokens - 1) * h, 1, h, h}};
        cmd.attrs.out = {lane * h, 1, h, h};
        sub_->dispatch(cmd);
    }
    return hidden;
}

Model::DecodeWorkspace Model::make_decode_workspace(std::int64_t lanes,
                                                    std::int64_t max_tokens) {
    const std::int64_t h = cfg_.hidden_dim;
    const std::int64_t kd = cfg_.kv_dim;
    DecodeWorkspace ws;
    ws.lanes = lanes;
    ws.max_tokens = max_tokens;
    ws.xn = sub_->alloc({lanes, h});
    ws.q = sub_->alloc({lanes, kd});
    ws.k = sub_->alloc({lanes, kd});
    ws.v = sub_->alloc({lanes, kd});
    ws.scores = sub_->alloc({max_tokens});
    ws.ctx = sub_->alloc({lanes, kd});
    ws.attn = sub_->alloc({lanes, h});
    ws.h1 = sub_->alloc({lanes, 4 * h});
    ws.h2 = sub_->alloc({lanes, h});
    ws.out = sub_->alloc({lanes, h});
    return ws;
}

BufferId Model::decode_step(BufferId x, KvCache& kv, DecodeWorkspace& ws) {
    const std::int64_t h = cfg_.hidden_dim;
    const std::int64_t lanes = ws.lanes;

    for (std::int64_t b = 0; b < cfg_.decoder_blocks; ++b) {
        const DeviceBlock& block = language_[b];
        emit_norm(x, lanes, block.ln1, ws.xn);
        emit_linear(ws.xn, lanes, block.q, ws.q);
        emit_linear(ws.xn, lanes, block.k, ws.k);
        emit_linear(ws.xn, lanes, block.v, ws.v);
        kv.append_reasoning(b, ws.k, ws.v, 1);
        // Single query row; the whole cached prefix is visible.
        const AttendSpec spec = spec_from_view(kv.reasoning_view(b), false, 0);
        if (spec.tokens > ws.max_tokens) {
            throw InternalError("decode workspace too small for cache length");
        }
        emit_attention(ws.q, lanes, 1, spec, ws.scores, ws.ctx);
        emit_linear(ws.ctx, lanes, block.o, ws.attn);
        emit_add(x, ws.attn, lanes, h, x);
        emit_norm(x, lanes, block.ln2, ws.xn);
        emit_linear(ws.xn, lanes, block.mlp1, ws.h1);
        emit_unary(OpKind::Gelu, ws.h1, lanes, 4 * h, ws.h1);
        emit_linear(ws.h1, lanes, block.mlp2, ws.h2);
        emit_add(x, ws.h2, lanes, h, x);
    }
    emit_norm(x, lanes, language_final_ln_, ws.out);
    return ws.out;
}

BufferId Model::logits_head(BufferId hidden, std::int64_t lanes) {
    const BufferId logits = sub_->alloc({lanes, cfg_.vocab_size});
    emit_linear(hidden, lanes, lm_head_, logits);
    return logits;
}

BufferId Model::alloc_action_buffer(std::int64_t lanes) {
    return sub_->alloc({lanes * cfg_.action_steps, 2});
}

Model::ActionWorkspace Model::make_action_workspace(BufferId actions,
                                                    std::int64_t lanes,
                                                    const KvCache& kv) {
    const std::int64_t ah = cfg_.action_hidden_dim;
    const std::int64_t kd = cfg_.kv_dim;
    const std::int64_t steps = cfg_.action_steps;
    const std::int64_t rows = lanes * steps;

    ActionWorkspace ws;
    ws.lanes = lanes;
    ws.kv_tokens = kv.reasoning_len() + kv.layout().action_len;
    ws.actions = actions;
    ws.pos = sub_->alloc({rows, ah});
    const std::vector<float> table = sinusoidal_table(steps, ah);
    std::vector<float> tiled(rows * ah);
    for (std::int64_t lane = 0; lane < lanes; ++lane) {
        std::memcpy(tiled.data() + lane * steps * ah, table.data(),
                    static_cast<std::size_t>(steps) * ah * sizeof(float));
    }
    sub_->write(ws.pos, tiled);
    ws.e0 = sub_->alloc({rows, ah});
    ws.e = sub_->alloc({rows, ah});
    ws.xn = sub_->alloc({rows, ah});
    ws.attn = sub_->alloc({rows, ah});
    ws.h2 = sub_->alloc({rows, ah});
    ws.q = sub_->alloc({rows, kd});
    ws.k = sub_->alloc({rows, kd});
    ws.v = sub_->alloc({rows, kd});
    ws.ctx = sub_->alloc({rows, kd});
    ws.h1 = sub_->alloc({rows, 4 * ah});
    ws.scores = sub_->alloc({steps, ws.kv_tokens});
    ws.delta = sub_->alloc({rows, 2});
    ws.delta_scaled = sub_->alloc({rows, 2});
    return ws;
}

void Model::emit_action_encode(ActionWorkspace& ws) {
    const std::int64_t ah = cfg_.action_hidden_dim;
    const std::int64_t rows = ws.lanes * cfg_.action_steps;
    emit_linear(ws.actions, rows, action_in_, ws.e0);
    emit_add(ws.e0, ws.pos, rows, ah, ws.e0);
    emit_linear(ws.e0, rows, action_mlp1_, ws.h1);
    emit_unary(OpKind::Gelu, ws.h1, rows, 4 * ah, ws.h1);
    emit_linear(ws.h1, rows, action_mlp2_, ws.e);
}

void Model::emit_action_decoder(ActionWorkspace& ws, KvCache& kv,
                                std::int64_t iteration) {
    const std::int64_t ah = cfg_.action_hidden_dim;
    const std::int64_t steps = cfg_.action_steps;
    const std::int64_t rows = ws.lanes * steps;

    for (std::int64_t b = 0; b < cfg_.decoder_blocks; ++b) {
        const DeviceBlock& block = action_[b];
        emit_norm(ws.e, rows, block.ln1, ws.xn);
        emit_linear(ws.xn, rows, block.q, ws.q);
        emit_linear(ws.xn, rows, block.k, ws.k);
        emit_linear(ws.xn, rows, block.v, ws.v);
        kv.write_action_kv(b, iteration, ws.k, ws.v);
        // Dual-source attention: the view spans the reasoning region plus this
        // iteration's action region; every query sees all of it.
        const AttendSpec spec = spec_from_view(kv.attend_view(b), false, 0);
        emit_attention(ws.q, ws.lanes, steps, spec, ws.scores, ws.ctx);
        emit_linear(ws.ctx, rows, block.o, ws.attn);
        emit_add(ws.e, ws.attn, rows, ah, ws.e);
        emit_norm(ws.e, rows, block.ln2, ws.xn);
        emit_linear(ws.xn, rows, block.mlp1, ws.h1);
        emit_unary(OpKind::Gelu, ws.h1, rows, 4 * ah, ws.h1);
        emit_linear(ws.h1, rows, block.mlp2, ws.h2);
        emit_add(ws.e, ws.h2, rows, ah, ws.e);
    }
    emit_norm(ws.e, rows, action_final_ln_, ws.xn);
    emit_linear(ws.xn, rows, action_head_, ws.delta);
}

void Model::emit_action_update(ActionWorkspace& ws) {
    const std::int64_t rows = ws.lanes * cfg_.action_steps;
    emit_unary(OpKind::Scale, ws.delta, rows, 2, ws.delta_scaled, cfg_.update_scale);
    emit_add(ws.actions, ws.delta_scaled, rows, 2, ws.actions);
}

void Model::run_action_iteration(ActionWorkspace& ws, KvCache& kv,
                                 std::int64_t iteration) {
    emit_action_encode(ws);
    emit_action_decoder(ws, kv, iteration);
    emit_action_update(ws);
}

Model::DiffusionResult Model::diffusion_refine(BufferId actions, std::int64_t lanes,
                                               KvCache& kv, ExecMode mode) {
    if (mode == ExecMode::Graph && kv.strategy() == KvStrategy::Dynamic) {
        throw ConfigError("graph execution requires the static kv strategy");
    }
    ActionWorkspace ws = make_action_workspace(actions, lanes, kv);

    DiffusionResult result;
    ExecGraph graph;
    bool have_graph = false;
    for (std::int64_t iter = 1; iter <= cfg_.diffusion_iters; ++iter) {
        const DispatchStats before = sub_->stats();
        const double t0 = now_ms();
        if (mode == ExecMode::Graph && iter == 2) {
            const auto token = sub_->begin_capture(iter);
            run_action_iteration(ws, kv, iter);
            graph = sub_->end_capture(token);
            have_graph = true;
        } else if (mode == ExecMode::Graph && have_graph) {
            sub_->replay(graph);
        } else {
            run_action_iteration(ws, kv, iter);
        }
        result.iter_ms.push_back(now_ms() - t0);
        result.iter_stats.push_back(stats_delta(before, sub_->stats()));
    }
    result.graph_commands = static_cast<std::int64_t>(graph.command_count());
    result.actions = read_actions(actions, lanes);
    return result;
}

std::vector<ActionSequence> Model::read_actions(BufferId actions,
                                                std::int64_t lanes) const {
    const std::span<const float> data = sub_->read(actions);
    std::vector<ActionSequence> out(lanes);
    for (std::int64_t lane = 0; lane < lanes; ++lane) {
        out[lane].steps.resize(cfg_.action_steps);
        for (std::int64_t i = 0; i < cfg_.action_steps; ++i) {
            const std::int64_t base = (lane * cfg_.action_steps + i) * 2;
            out[lane].steps[i] = {data[base], data[base + 1]};
        }
    }
    return out;
}

} // namespace minivla
