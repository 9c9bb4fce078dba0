#pragma once

#include "minivla/common.hpp"
#include "minivla/kernels.hpp"

#include <cstdint>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

namespace minivla {

using BufferId = std::uint64_t;
inline constexpr BufferId kInvalidBuffer = 0;

enum class OpKind {
    Matmul,
    Add,
    Scale,
    Softmax,
    Layernorm,
    Gelu,
    Copy,
    WriteSlice,
    ReadSlice,
    EmbedLookup,
    Concat,
};

const char* op_kind_name(OpKind kind);

// Logical 2D window into a buffer: `rows` runs of `cols` elements, starting at
// element `offset`, successive rows `row_stride` elements apart (0 means
// densely packed, i.e. row_stride == cols). rows == 0 leaves the view unset;
// it resolves to the whole buffer as a single flat row.
struct TensorView {
    std::int64_t offset = 0;
    std::int64_t rows = 0;
    std::int64_t cols = 1;
    std::int64_t row_stride = 0;

    std::int64_t stride() const { return row_stride == 0 ? cols : row_stride; }
    std::int64_t count() const { return rows * cols; }
};

// Static attributes; together with the input views these fully determine the
// output shape, so a recorded command can be replayed without re-derivation.
struct OpAttrs {
    std::vector<TensorView> in; // one per input; empty = whole buffers, flat
    TensorView out;             // default = whole output buffer, flat
    float alpha = 1.0f;         // Scale factor; Matmul result scaling
    bool transpose_b = false;   // Matmul: b supplied as [n,k]
    bool causal = false;        // Softmax masking
    std::int64_t causal_offset = 0;
    float eps = 1e-5f;          // Layernorm
};

struct OpCommand {
    OpKind kind;
    std::vector<BufferId> inputs;
    BufferId output = kInvalidBuffer;
    OpAttrs attrs;
};

struct DispatchStats {
    std::uint64_t dispatch_count = 0;
    std::uint64_t replay_count = 0;
    std::uint64_t alloc_count = 0;
    std::uint64_t bytes_allocated = 0;
};

class Substrate;

// Immutable recording of the commands dispatched inside one capture window,
// with buffer bindings resolved to fixed addresses at capture end. Valid only
// while every bound buffer stays alive (buffers never resize).
class ExecGraph {
public:
    std::size_t command_count() const { return commands_.size(); }
    const std::vector<OpCommand>& commands() const { return commands_; }
    const std::vector<BufferId>& bound_buffers() const { return bound_; }
    std::int64_t capture_iteration() const { return capture_iteration_; }

private:
    friend class Substrate;

    struct ResolvedOp {
        OpKind kind;
        std::vector<kernels::ConstView> in;
        kernels::MutView out;
        float alpha;
        bool transpose_b;
        bool causal;
        std::int64_t causal_offset;
        float eps;
        // Concat executes as two copies; second source pre-resolved here.
        kernels::ConstView in1{nullptr, 0, 0, 0};
        kernels::MutView out1{nullptr, 0, 0, 0};
    };

    std::vector<OpCommand> commands_;
    std::vector<ResolvedOp> resolved_;
    std::vector<BufferId> bound_;
    std::int64_t capture_iteration_ = -1;
    const Substrate* owner_ = nullptr;
};

struct SubstrateOptions {
    bool parallel_kernels = true;          // OpenMP drivers vs serial reference
    std::uint64_t dispatch_delay_ns = 0;   // synthetic per-dispatch launch cost
};

// Dense f32 compute substrate. Single-owner: one logical stream may
// dispatch/capture/replay at a time; independent instances share nothing.
class Substrate {
public:
    explicit Substrate(SubstrateOptions opts = {});

    Substrate(const Substrate&) = delete;
    Substrate& operator=(const Substrate&) = delete;

    // Empty shape allocates a 1-element scalar.
    BufferId alloc(const std::vector<std::int64_t>& shape);
    void free_buffer(BufferId id);
    bool alive(BufferId id) const;

    std::span<const float> read(BufferId id) const;
    void write(BufferId id, std::span<const float> values);
    const std::vector<std::int64_t>& shape(BufferId id) const;
    std::int64_t element_count(BufferId id) const;
    std::uint64_t generation(BufferId id) const;

    // Validates ids/shapes, executes, bumps dispatch_count by 1. While a
    // capture is open the command is also recorded. Returns cmd.output.
    BufferId dispatch(const OpCommand& cmd);

    std::uint64_t begin_capture(std::int64_t capture_iteration = -1);
    ExecGraph end_capture(std::uint64_t token);
    bool capturing() const { return capturing_; }

    // Re-executes the recorded commands against their fixed buffers. Counts
    // as a single dispatch regardless of graph size.
    void replay(const ExecGraph& graph);

    DispatchStats stats() const { return stats_; }

    // Scope helper: free every still-live buffer allocated after the mark.
    std::size_t alloc_mark() const { return alloc_log_.size(); }
    void free_allocated_since(std::size_t mark);

    const SubstrateOptions& options() const { return opts_; }

private:
    struct Buffer {
        std::vector<std::int64_t> shape;
        std::vector<float> elems;
        std::uint64_t generation;
    };

    const Buffer& get(BufferId id) const;
    Buffer& get(BufferId id);
    void validate(const OpCommand& cmd, std::vector<kernels::ConstView>& in,
                  kernels::MutView& out) const;
    void execute(OpKind kind, const OpAttrs& attrs,
                 const std::vector<kernels::ConstView>& in, const kernels::MutView& out,
                 const kernels::ConstView* concat_b) const;
    kernels::ConstView resolve_const(BufferId id, const TensorView& v,
                                     const char* what) const;
    kernels::MutView resolve_mut(BufferId id, const TensorView& v, const char* what);
    void apply_dispatch_delay() const;

    SubstrateOptions opts_;
    std::unordered_map<BufferId, Buffer> buffers_;
    std::vector<BufferId> alloc_log_;
    BufferId next_id_ = 1;
    DispatchStats stats_;

    bool capturing_ = false;
    std::uint64_t capture_token_ = 0;
    std::uint64_t next_token_ = 1;
    std::int64_t capture_iteration_ = -1;
    std::vector<OpCommand> capture_cmds_;
};

} // namespace minivla
