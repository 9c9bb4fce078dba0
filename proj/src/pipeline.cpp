#include "minivla/pipeline.hpp"

#include <chrono>
#include <cmath>
#include <cstring>
#include <numbers>
#include <sstream>

namespace minivla {

namespace {

double now_ms() {
    return std::chrono::duration<double, std::milli>(
               std::chrono::steady_clock::now().time_since_epoch())
        .count();
}

constexpr float kYawRange = std::numbers::pi_v<float>;
constexpr double kDt = 0.1;

// Rethrows stage failures with the stage name prepended, preserving the
// error class (and with it the CLI exit code).
template <typename Fn>
void run_stage(const char* stage, Fn&& fn) {
    auto tag = [stage](const char* what) {
        return std::string(stage) + ": " + what;
    };
    try {
        fn();
    } catch (const ConfigError& e) {
        throw ConfigError(tag(e.what()));
    } catch (const IoError& e) {
        throw IoError(tag(e.what()));
    } catch (const InternalError& e) {
        throw InternalError(tag(e.what()));
    }
}

} // namespace

const char* topology_name(Topology t) {
    return t == Topology::Multi ? "multi" : "single";
}

Tokenizer::Tokenizer(std::int64_t vocab_size) : vocab_(vocab_size) {
    const std::int64_t traj_ids = kBins * kTrajComponents;
    text_space_ = vocab_ - 1 - traj_ids;
    if (text_space_ < 16) throw ConfigError("vocab too small for the token layout");
}

std::int64_t Tokenizer::text_id(const std::string& word) const {
    return 1 + static_cast<std::int64_t>(fnv1a(word) % text_space_);
}

std::int64_t Tokenizer::trajectory_token(std::int64_t component,
                                         std::int64_t bin) const {
    return 1 + text_space_ + component * kBins + bin;
}

TokenSequence Tokenizer::tokenize_text(const std::string& text) {
    TokenSequence seq;
    std::istringstream stream(text);
    std::string word;
    while (stream >> word) {
        const std::int64_t id = text_id(word);
        seq.ids.push_back(id);
        seq.kinds.push_back(TokenKind::Text);
        reverse_.emplace(id, word);
    }
    return seq;
}

std::int64_t Tokenizer::quantize(float v, float lo, float hi) {
    const float width = (hi - lo) / static_cast<float>(kBins);
    auto bin = static_cast<std::int64_t>(std::floor((v - lo) / width));
    if (bin < 0) bin = 0;
    if (bin >= kBins) bin = kBins - 1;
    return bin;
}

float Tokenizer::dequantize(std::int64_t bin, float lo, float hi) {
    const float width = (hi - lo) / static_cast<float>(kBins);
    return lo + (static_cast<float>(bin) + 0.5f) * width;
}

TokenSequence Tokenizer::tokenize_trajectory(const PoseHistory& history) const {
    TokenSequence seq;
    for (const Pose& pose : history.poses) {
        const float comps[3] = {pose.x, pose.y, pose.yaw};
        const float lows[3] = {-kXyRange, -kXyRange, -kYawRange};
        const float highs[3] = {kXyRange, kXyRange, kYawRange};
        for (int c = 0; c < 3; ++c) {
            if (comps[c] < lows[c] || comps[c] > highs[c]) {
                log_warn("trajectory component out of range; clamped to edge bin");
            }
            const std::int64_t bin = quantize(comps[c], lows[c], highs[c]);
            seq.ids.push_back(trajectory_token(c, bin));
            seq.kinds.push_back(TokenKind::Trajectory);
        }
    }
    return seq;
}

std::string Tokenizer::detokenize(std::span<const std::int64_t> ids) const {
    std::string out;
    for (std::int64_t id : ids) {
        if (!out.empty()) out.push_back(' ');
        if (id == termination_token()) {
            out += "<end>";
        } else if (id > text_space_) {
            const std::int64_t rel = id - 1 - text_space_;
            out += "<traj-" + std::to_string(rel / kBins) + ":" +
                   std::to_string(rel % kBins) + ">";
        } else if (auto it = reverse_.find(id); it != reverse_.end()) {
            out += it->second;
        } else {
            out += "<tok-" + std::to_string(id) + ">";
        }
    }
    return out;
}

Trajectory actions_to_trajectory(const ActionSequence& actions, float initial_speed) {
    if (initial_speed < 0.0f || !std::isfinite(initial_speed)) {
        throw InternalError("actions_to_trajectory: invalid initial speed");
    }
    Trajectory traj;
    traj.poses.reserve(actions.steps.size());
    double x = 0.0, y = 0.0, yaw = 0.0;
    double v = initial_speed;
    for (const ActionStep& step : actions.steps) {
        if (!std::isfinite(step.accel) || !std::isfinite(step.curvature)) {
            throw InternalError("actions_to_trajectory: non-finite action");
        }
        const double nx = x + v * std::cos(yaw) * kDt;
        const double ny = y + v * std::sin(yaw) * kDt;
        const double nyaw = yaw + step.curvature * v * kDt;
        const double nv = v + step.accel * kDt;
        x = nx;
        y = ny;
        yaw = nyaw;
        v = nv;
        traj.poses.push_back({static_cast<float>(x), static_cast<float>(y),
                              static_cast<float>(yaw)});
    }
    return traj;
}

float initial_speed_from_history(const PoseHistory& history) {
    const Pose& last = history.poses[15];
    const Pose& prev = history.poses[14];
    const double dx = static_cast<double>(last.x) - prev.x;
    const double dy = static_cast<double>(last.y) - prev.y;
    return static_cast<float>(std::sqrt(dx * dx + dy * dy) / kDt);
}

std::int64_t patches_per_frame(const Frames& frames, std::int64_t patch_size) {
    return (frames.height / patch_size) * (frames.width / patch_size);
}

std::vector<float> patchify(const Frames& frames, std::int64_t patch_size) {
    if (frames.height % patch_size != 0 || frames.width % patch_size != 0) {
        throw IoError("frame dimensions must be divisible by the patch size");
    }
    const std::int64_t ph = frames.height / patch_size;
    const std::int64_t pw = frames.width / patch_size;
    const std::int64_t patch_dim = patch_size * patch_size * 3;
    const std::int64_t per_frame = ph * pw;
    std::vector<float> rows(frames.frame_count() * per_frame * patch_dim);

    const std::int64_t frame_stride = frames.height * frames.width * 3;
    for (std::int64_t f = 0; f < frames.frame_count(); ++f) {
        const float* frame = frames.data.data() + f * frame_stride;
        for (std::int64_t py = 0; py < ph; ++py) {
            for (std::int64_t px = 0; px < pw; ++px) {
                float* row = rows.data() +
                             ((f * per_frame + py * pw + px) * patch_dim);
                std::int64_t k = 0;
                for (std::int64_t dy = 0; dy < patch_size; ++dy) {
                    const std::int64_t yy = py * patch_size + dy;
                    for (std::int64_t dx = 0; dx < patch_size; ++dx) {
                        const std::int64_t xx = px * patch_size + dx;
                        const float* px3 = frame + (yy * frames.width + xx) * 3;
                        row[k++] = px3[0];
                        row[k++] = px3[1];
                        row[k++] = px3[2];
                    }
                }
            }
        }
    }
    return rows;
}

Engine::Engine(const ModelConfig& cfg, SubstrateOptions opts)
    : substrate_(opts),
      weights_(ModelWeights::build(cfg)),
      model_(substrate_, weights_),
      tokenizer_(cfg.vocab_size) {}

void Engine::validate_request(const InferenceRequest& request) {
    if (request.num_trajectories < 1) {
        throw ConfigError("num_trajectories must be >= 1");
    }
    if (request.executor == ExecMode::Graph &&
        request.kv_strategy == KvStrategy::Dynamic) {
        throw ConfigError("graph executor requires the static kv strategy "
                          "(fixed buffer addresses)");
    }
    if (request.frames.cams != 4 || request.frames.steps != 4) {
        throw IoError("frames must cover 4 cameras x 4 timesteps");
    }
    if (request.frames.height < 1 || request.frames.width < 1 ||
        static_cast<std::int64_t>(request.frames.data.size()) !=
            request.frames.pixel_count()) {
        throw IoError("frame data does not match the declared shape");
    }
    const Pose& last = request.pose_history.poses[15];
    if (std::fabs(last.x) > 1e-4f || std::fabs(last.y) > 1e-4f ||
        std::fabs(last.yaw) > 1e-4f) {
        throw IoError("pose history must end at the origin with zero yaw");
    }
}

Engine::Preprocessed Engine::preprocess(const InferenceRequest& request) {
    const ModelConfig& cfg = model_.config();
    Preprocessed pre;
    // Input order: camera images, system prompt, past trajectory, user prompt.
    pre.prompt = tokenizer_.tokenize_text(request.system_prompt);
    const TokenSequence traj = tokenizer_.tokenize_trajectory(request.pose_history);
    pre.prompt.ids.insert(pre.prompt.ids.end(), traj.ids.begin(), traj.ids.end());
    pre.prompt.kinds.insert(pre.prompt.kinds.end(), traj.kinds.begin(),
                            traj.kinds.end());
    const TokenSequence user = tokenizer_.tokenize_text(request.user_prompt);
    pre.prompt.ids.insert(pre.prompt.ids.end(), user.ids.begin(), user.ids.end());
    pre.prompt.kinds.insert(pre.prompt.kinds.end(), user.kinds.begin(),
                            user.kinds.end());

    pre.patch_rows = patchify(request.frames, cfg.patch_size);
    pre.patch_dim = cfg.patch_size * cfg.patch_size * 3;
    pre.patches =
        request.frames.frame_count() * patches_per_frame(request.frames, cfg.patch_size);
    return pre;
}

ReasoningOutput Engine::reasoning_pass(const InferenceRequest& request,
                                       const Preprocessed& pre, SectionProfiler* prof) {
    const ModelConfig& cfg = model_.config();
    const std::int64_t lanes =
        request.topology == Topology::Multi ? request.num_trajectories : 1;
    const std::int64_t P = pre.patches;
    const std::int64_t h = cfg.hidden_dim;
    const auto prompt_text_len = static_cast<std::int64_t>(pre.prompt.ids.size());
    const std::int64_t T = P + prompt_text_len;

    auto timed = [&](LatencyComponent c, const std::function<void()>& fn) {
        if (prof) {
            prof->time_section(c, fn);
        } else {
            fn();
        }
    };

    // Vision: input replication to the lane batch happens here, after
    // preprocessing, so preprocessing cost stays independent of N.
    BufferId vis = kInvalidBuffer;
    timed(LatencyComponent::ReasoningVision, [&] {
        const BufferId patch_buf = substrate_.alloc({lanes * P, pre.patch_dim});
        std::vector<float> tiled(lanes * P * pre.patch_dim);
        for (std::int64_t lane = 0; lane < lanes; ++lane) {
            std::memcpy(tiled.data() + lane * P * pre.patch_dim, pre.patch_rows.data(),
                        pre.patch_rows.size() * sizeof(float));
        }
        substrate_.write(patch_buf, tiled);
        vis = model_.vision_encode(patch_buf, lanes, P);
    });

    // Static capacity comes from the known prompt length plus the generation
    // cap; this is the offline-profiled maximum at desk scale.
    KvLayout layout;
    layout.num_blocks = cfg.decoder_blocks;
    layout.batch = lanes;
    layout.kv_dim = cfg.kv_dim;
    layout.action_len = cfg.action_steps;
    layout.reasoning_capacity = T + cfg.max_new_tokens;

    std::optional<KvCache> kv;
    BufferId hidden = kInvalidBuffer;
    BufferId pos_table = kInvalidBuffer;
    const std::int64_t pos_rows = T + cfg.max_new_tokens + 1;
    timed(LatencyComponent::ReasoningPrefill, [&] {
        kv.emplace(substrate_, request.kv_strategy, layout);
        pos_table = substrate_.alloc({pos_rows, h});
        substrate_.write(pos_table, sinusoidal_table(pos_rows, h));

        const BufferId ctx = substrate_.alloc({lanes * T, h});
        BufferId prompt_emb = kInvalidBuffer;
        if (prompt_text_len > 0) prompt_emb = model_.embed_tokens(pre.prompt.ids);
        for (std::int64_t lane = 0; lane < lanes; ++lane) {
            OpCommand cp;
            cp.kind = OpKind::Copy;
            cp.inputs = {vis};
            cp.output = ctx;
            cp.attrs.in = {{lane * P * h, P, h, h}};
            cp.attrs.out = {lane * T * h, P, h, h};
            substrate_.dispatch(cp);
            if (prompt_text_len > 0) {
                OpCommand ce;
                ce.kind = OpKind::Copy;
                ce.inputs = {prompt_emb};
                ce.output = ctx;
                ce.attrs.in = {{0, prompt_text_len, h, h}};
                ce.attrs.out = {(lane * T + P) * h, prompt_text_len, h, h};
                substrate_.dispatch(ce);
            }
            OpCommand ap;
            ap.kind = OpKind::Add;
            ap.inputs = {ctx, pos_table};
            ap.output = ctx;
            ap.attrs.in = {{lane * T * h, T, h, h}, {0, T, h, h}};
            ap.attrs.out = {lane * T * h, T, h, h};
            substrate_.dispatch(ap);
        }
        hidden = model_.prefill(ctx, lanes, T, *kv);
    });

    ReasoningOutput out{{}, 0, T, std::move(*kv), hidden};
    out.cot_tokens.assign(lanes, {});

    timed(LatencyComponent::ReasoningDecode, [&] {
        BufferId logits = model_.logits_head(hidden, lanes);
        std::vector<Rng> samplers;
        samplers.reserve(lanes);
        for (std::int64_t lane = 0; lane < lanes; ++lane) {
            samplers.emplace_back(request.sampler_seed + static_cast<std::uint64_t>(lane));
        }
        auto ws = model_.make_decode_workspace(lanes, layout.reasoning_capacity);
        const BufferId x = substrate_.alloc({lanes, h});
        std::vector<bool> done(lanes, false);
        const bool forced = request.forced_cot_tokens > 0;
        const std::int64_t max_m =
            forced ? std::min(request.forced_cot_tokens, cfg.max_new_tokens)
                   : cfg.max_new_tokens;

        std::int64_t m = 0;
        while (m < max_m) {
            bool all_done = true;
            for (std::int64_t lane = 0; lane < lanes; ++lane) {
                if (!done[lane]) all_done = false;
            }
            if (all_done && !forced) break;

            const std::span<const float> logit_data = substrate_.read(logits);
            std::vector<std::int64_t> ids(lanes);
            for (std::int64_t lane = 0; lane < lanes; ++lane) {
                const std::span<const float> row =
                    logit_data.subspan(lane * cfg.vocab_size, cfg.vocab_size);
                ids[lane] = sample_token(row, request.sampler_mode, samplers[lane]);
                if (!done[lane]) {
                    if (!forced && ids[lane] == tokenizer_.termination_token()) {
                        done[lane] = true;
                    } else {
                        out.cot_tokens[lane].push_back(ids[lane]);
                    }
                }
            }
            m += 1;

            // Process the sampled tokens: append their KV, produce next logits.
            const BufferId emb = model_.embed_tokens(ids);
            OpCommand cp;
            cp.kind = OpKind::Copy;
            cp.inputs = {emb};
            cp.output = x;
            substrate_.dispatch(cp);
            OpCommand ap;
            ap.kind = OpKind::Add;
            ap.inputs = {x, pos_table};
            ap.output = x;
            ap.attrs.in = {{0, lanes, h, h}, {(T + m - 1) * h, 1, h, h}};
            ap.attrs.out = {0, lanes, h, h};
            substrate_.dispatch(ap);
            const BufferId step_hidden = model_.decode_step(x, out.kv, ws);
            logits = model_.logits_head(step_hidden, lanes);
        }
        out.token_count = m;
        out.kv.seal_reasoning();
    });
    return out;
}

ReasoningOutput Engine::run_reasoning(const InferenceRequest& request) {
    validate_request(request);
    const Preprocessed pre = preprocess(request);
    return reasoning_pass(request, pre, nullptr);
}

std::vector<ActionSequence> Engine::run_action_generation(
    ReasoningOutput& reasoning, const InferenceRequest& request,
    Model::DiffusionResult* diff, std::int64_t* kv_bytes) {
    const ModelConfig& cfg = model_.config();
    const std::int64_t n = request.num_trajectories;

    std::optional<KvCache> batched;
    KvCache* use = &reasoning.kv;
    if (request.topology == Topology::Single && n > 1) {
        batched.emplace(reasoning.kv.replicate_for_batch(n));
        use = &*batched;
    }
    if (use->layout().batch != n) {
        throw InternalError("kv batch does not match the requested trajectory count");
    }

    const BufferId actions = model_.alloc_action_buffer(n);
    std::vector<float> init(n * cfg.action_steps * 2);
    for (std::int64_t lane = 0; lane < n; ++lane) {
        Rng rng(request.action_init_seed +
                static_cast<std::uint64_t>(lane) * request.action_seed_stride);
        for (std::int64_t i = 0; i < cfg.action_steps * 2; ++i) {
            init[lane * cfg.action_steps * 2 + i] = rng.normal();
        }
    }
    substrate_.write(actions, init);

    Model::DiffusionResult result =
        model_.diffusion_refine(actions, n, *use, request.executor);
    if (kv_bytes) *kv_bytes = use->footprint_bytes();
    std::vector<ActionSequence> out = std::move(result.actions);
    if (diff) {
        diff->iter_ms = std::move(result.iter_ms);
        diff->iter_stats = std::move(result.iter_stats);
        diff->graph_commands = result.graph_commands;
    }
    return out;
}

InferenceResult Engine::infer(const InferenceRequest& request) {
    validate_request(request);
    const std::size_t mark = substrate_.alloc_mark();
    const DispatchStats stats_before = substrate_.stats();

    InferenceResult result;
    SectionProfiler prof(result.latency);
    const double t0 = now_ms();

    try {
        Preprocessed pre;
        run_stage("preprocessing", [&] {
            prof.time_section(LatencyComponent::Preprocessing,
                              [&] { pre = preprocess(request); });
        });

        std::optional<ReasoningOutput> reasoning;
        run_stage("reasoning", [&] {
            reasoning.emplace(reasoning_pass(request, pre, &prof));
        });

        Model::DiffusionResult diff;
        std::int64_t kv_bytes = 0;
        std::vector<ActionSequence> actions;
        run_stage("action-generation", [&] {
            prof.time_section(LatencyComponent::ActionGen, [&] {
                actions = run_action_generation(*reasoning, request, &diff, &kv_bytes);
            });
        });

        run_stage("postprocessing", [&] {
            prof.time_postprocessing([&] {
                const float v0 = initial_speed_from_history(request.pose_history);
                for (const ActionSequence& a : actions) {
                    result.trajectories.push_back(actions_to_trajectory(a, v0));
                }
                for (const auto& lane_tokens : reasoning->cot_tokens) {
                    result.reasonings.push_back(tokenizer_.detokenize(lane_tokens));
                }
                result.actions = std::move(actions);
            });
        });

        result.latency.action_gen_iter_ms = diff.iter_ms;
        result.latency.kv_bytes = kv_bytes;
        result.latency.cot_tokens = reasoning->token_count;
    } catch (const Error&) {
        substrate_.free_allocated_since(mark);
        throw;
    }

    result.latency.total_ms = now_ms() - t0;
    const DispatchStats stats_after = substrate_.stats();
    result.latency.alloc_count = stats_after.alloc_count - stats_before.alloc_count;
    result.latency.dispatch_count =
        stats_after.dispatch_count - stats_before.dispatch_count;
    result.latency.replay_count = stats_after.replay_count - stats_before.replay_count;
    result.latency.bytes_allocated =
        stats_after.bytes_allocated - stats_before.bytes_allocated;

    substrate_.free_allocated_since(mark);
    return result;
}

} // namespace minivla
