#pragma once

#include "minivla/common.hpp"
#include "minivla/kv_cache.hpp"
#include "minivla/model.hpp"
#include "minivla/profiler.hpp"
#include "minivla/substrate.hpp"

#include <array>
#include <optional>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

namespace minivla {

struct Pose {
    float x = 0.0f;
    float y = 0.0f;
    float yaw = 0.0f;
};

// 16 poses at 10 Hz over the past 1.6 s, ego frame: the last pose is the
// origin with zero yaw.
struct PoseHistory {
    std::array<Pose, 16> poses{};
};

// 64 poses at 0.1 s per step (6.4 s horizon), ego frame.
struct Trajectory {
    std::vector<Pose> poses;
};

// [cam][step][h][w][3] float pixels.
struct Frames {
    std::int64_t cams = 4;
    std::int64_t steps = 4;
    std::int64_t height = 0;
    std::int64_t width = 0;
    std::vector<float> data;

    std::int64_t frame_count() const { return cams * steps; }
    std::int64_t pixel_count() const { return cams * steps * height * width * 3; }
};

enum class Topology { Multi, Single };
const char* topology_name(Topology t);

enum class TokenKind { Text, ImagePlaceholder, Trajectory };

struct TokenSequence {
    std::vector<std::int64_t> ids;
    std::vector<TokenKind> kinds;

    std::size_t size() const { return ids.size(); }
};

// Toy preprocessing vocabulary: whitespace words hash into a text id range;
// trajectory components quantize into 32 bins per component with dedicated
// ids above the text range; id 0 terminates generation.
class Tokenizer {
public:
    static constexpr std::int64_t kBins = 32;
    static constexpr std::int64_t kTrajComponents = 3;
    static constexpr float kXyRange = 50.0f;

    explicit Tokenizer(std::int64_t vocab_size);

    TokenSequence tokenize_text(const std::string& text);
    TokenSequence tokenize_trajectory(const PoseHistory& history) const;
    std::string detokenize(std::span<const std::int64_t> ids) const;

    std::int64_t termination_token() const { return 0; }
    std::int64_t vocab_size() const { return vocab_; }
    std::int64_t text_id(const std::string& word) const;
    std::int64_t trajectory_token(std::int64_t component, std::int64_t bin) const;

    static std::int64_t quantize(float v, float lo, float hi);
    static float dequantize(std::int64_t bin, float lo, float hi);

private:
    std::int64_t vocab_;
    std::int64_t text_space_; // word ids live in [1, text_space_]
    std::unordered_map<std::int64_t, std::string> reverse_;
};

// Explicit-Euler unicycle rollout at dt = 0.1 s from the origin at the given
// speed; pose i is the state after step i.
Trajectory actions_to_trajectory(const ActionSequence& actions, float initial_speed);

// Finite difference over the last two history poses.
float initial_speed_from_history(const PoseHistory& history);

struct InferenceRequest {
    Frames frames;
    std::string system_prompt;
    std::string user_prompt;
    PoseHistory pose_history;
    std::int64_t num_trajectories = 1;
    Topology topology = Topology::Multi;
    KvStrategy kv_strategy = KvStrategy::Dynamic;
    ExecMode executor = ExecMode::Eager;
    std::uint64_t sampler_seed = 1;
    std::uint64_t action_init_seed = 2;
    // Per-lane action-init streams use action_init_seed + lane * stride;
    // stride 0 gives every lane the same initialization.
    std::uint64_t action_seed_stride = 1;
    SampleMode sampler_mode = SampleMode::Stochastic;
    std::int64_t forced_cot_tokens = 0; // 0 = stop at termination or max
};

struct InferenceResult {
    std::vector<std::string> reasonings;      // N for multi, 1 for single
    std::vector<Trajectory> trajectories;     // N
    std::vector<ActionSequence> actions;      // N
    LatencyReport latency;
};

struct ReasoningOutput {
    std::vector<std::vector<std::int64_t>> cot_tokens; // per lane, no terminator
    std::int64_t token_count = 0;                      // decode steps executed
    std::int64_t prompt_tokens = 0;
    KvCache kv;                                        // sealed
    BufferId prefill_hidden = kInvalidBuffer;
};

// One inference engine: substrate + uploaded weights + tokenizer. Requests
// run one at a time; independent engines run independently.
class Engine {
public:
    explicit Engine(const ModelConfig& cfg, SubstrateOptions opts = {});

    InferenceResult infer(const InferenceRequest& request);

    struct Preprocessed {
        TokenSequence prompt;          // system + trajectory + user tokens
        std::vector<float> patch_rows; // [patches, patch_dim], one copy
        std::int64_t patches = 0;
        std::int64_t patch_dim = 0;
    };
    Preprocessed preprocess(const InferenceRequest& request);

    ReasoningOutput run_reasoning(const InferenceRequest& request);
    std::vector<ActionSequence> run_action_generation(ReasoningOutput& reasoning,
                                                      const InferenceRequest& request,
                                                      Model::DiffusionResult* diff = nullptr,
                                                      std::int64_t* kv_bytes = nullptr);

    const ModelConfig& config() const { return model_.config(); }
    Substrate& substrate() { return substrate_; }
    Model& model() { return model_; }
    Tokenizer& tokenizer() { return tokenizer_; }

    static void validate_request(const InferenceRequest& request);

private:
    ReasoningOutput reasoning_pass(const InferenceRequest& request,
                                   const Preprocessed& pre, SectionProfiler* prof);

    Substrate substrate_;
    ModelWeights weights_;
    Model model_;
    Tokenizer tokenizer_;
};

// [frames.frame_count() * patches_per_frame, patch_size^2 * 3] rows, frame
// then patch row-major. The image-tokenizer half of preprocessing.
std::vector<float> patchify(const Frames& frames, std::int64_t patch_size);
std::int64_t patches_per_frame(const Frames& frames, std::int64_t patch_size);

} // namespace minivla
