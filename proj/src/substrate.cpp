#include "minivla/substrate.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <set>
#include <sstream>

namespace minivla {

namespace {

std::size_t op_arity(OpKind kind) {
    switch (kind) {
        case OpKind::Matmul: return 2;
        case OpKind::Add: return 2;
        case OpKind::Scale: return 1;
        case OpKind::Softmax: return 1;
        case OpKind::Layernorm: return 3;
        case OpKind::Gelu: return 1;
        case OpKind::Copy: return 1;
        case OpKind::WriteSlice: return 1;
        case OpKind::ReadSlice: return 1;
        case OpKind::EmbedLookup: return 2;
        case OpKind::Concat: return 2;
    }
    return 0;
}

[[noreturn]] void fail(OpKind kind, const std::string& detail) {
    throw InternalError(std::string(op_kind_name(kind)) + ": " + detail);
}

void check_ids_in_range(const kernels::ConstView& table, const kernels::ConstView& ids) {
    const std::int64_t n = ids.rows * ids.cols;
    for (std::int64_t i = 0; i < n; ++i) {
        const float v = ids.data[(i / ids.cols) * ids.row_stride + (i % ids.cols)];
        const auto id = static_cast<std::int64_t>(std::llround(static_cast<double>(v)));
        if (!(id >= 0 && id < table.rows)) {
            std::ostringstream os;
            os << "embed_lookup: id " << v << " outside table of " << table.rows
               << " rows";
            throw InternalError(os.str());
        }
    }
}

} // namespace

const char* op_kind_name(OpKind kind) {
    switch (kind) {
        case OpKind::Matmul: return "matmul";
        case OpKind::Add: return "add";
        case OpKind::Scale: return "scale";
        case OpKind::Softmax: return "softmax";
        case OpKind::Layernorm: return "layernorm";
        case OpKind::Gelu: return "gelu";
        case OpKind::Copy: return "copy";
        case OpKind::WriteSlice: return "write_slice";
        case OpKind::ReadSlice: return "read_slice";
        case OpKind::EmbedLookup: return "embed_lookup";
        case OpKind::Concat: return "concat";
    }
    return "?";
}

Substrate::Substrate(SubstrateOptions opts) : opts_(opts) {}

BufferId Substrate::alloc(const std::vector<std::int64_t>& shape) {
    if (capturing_) {
        throw InternalError("allocation during capture: buffer addresses must be "
                            "fixed before capture begins");
    }
    std::int64_t count = 1;
    for (std::int64_t d : shape) {
        if (d < 0) throw InternalError("alloc: negative dimension");
        count *= d;
    }
    if (count == 0) throw InternalError("alloc: zero-sized buffer");
    stats_.alloc_count += 1;
    stats_.bytes_allocated += static_cast<std::uint64_t>(count) * sizeof(float);
    Buffer buf;
    buf.shape = shape;
    buf.elems.assign(static_cast<std::size_t>(count), 0.0f);
    buf.generation = stats_.alloc_count;
    const BufferId id = next_id_++;
    buffers_.emplace(id, std::move(buf));
    alloc_log_.push_back(id);
    return id;
}

void Substrate::free_buffer(BufferId id) {
    if (capturing_) throw InternalError("free during capture");
    if (buffers_.erase(id) == 0) {
        throw InternalError("free of unknown buffer id " + std::to_string(id));
    }
}

bool Substrate::alive(BufferId id) const { return buffers_.count(id) != 0; }

const Substrate::Buffer& Substrate::get(BufferId id) const {
    auto it = buffers_.find(id);
    if (it == buffers_.end()) {
        throw InternalError("unknown buffer id " + std::to_string(id));
    }
    return it->second;
}

Substrate::Buffer& Substrate::get(BufferId id) {
    return const_cast<Buffer&>(static_cast<const Substrate*>(this)->get(id));
}

std::span<const float> Substrate::read(BufferId id) const {
    const Buffer& b = get(id);
    return {b.elems.data(), b.elems.size()};
}

void Substrate::write(BufferId id, std::span<const float> values) {
    Buffer& b = get(id);
    if (values.size() != b.elems.size()) {
        throw InternalError("write: size mismatch for buffer " + std::to_string(id));
    }
    std::copy(values.begin(), values.end(), b.elems.begin());
}

const std::vector<std::int64_t>& Substrate::shape(BufferId id) const {
    return get(id).shape;
}

std::int64_t Substrate::element_count(BufferId id) const {
    return static_cast<std::int64_t>(get(id).elems.size());
}

std::uint64_t Substrate::generation(BufferId id) const { return get(id).generation; }

kernels::ConstView Substrate::resolve_const(BufferId id, const TensorView& v,
                                            const char* what) const {
    const Buffer& b = get(id);
    const auto elems = static_cast<std::int64_t>(b.elems.size());
    TensorView view = v;
    if (view.rows == 0) view = TensorView{0, 1, elems, elems};
    const std::int64_t stride = view.stride();
    if (view.offset < 0 || view.cols < 1 || view.rows < 1 || stride < view.cols ||
        view.offset + (view.rows - 1) * stride + view.cols > elems) {
        std::ostringstream os;
        os << what << ": view [" << view.rows << "x" << view.cols << " stride " << stride
           << " at " << view.offset << "] does not fit buffer " << id << " of " << elems
           << " elements";
        throw InternalError(os.str());
    }
    return {b.elems.data() + view.offset, view.rows, view.cols, stride};
}

kernels::MutView Substrate::resolve_mut(BufferId id, const TensorView& v,
                                        const char* what) {
    const kernels::ConstView c = resolve_const(id, v, what);
    return {const_cast<float*>(c.data), c.rows, c.cols, c.row_stride};
}

void Substrate::validate(const OpCommand& cmd, std::vector<kernels::ConstView>& in,
                         kernels::MutView& out) const {
    const std::size_t need = op_arity(cmd.kind);
    if (cmd.inputs.size() != need) {
        fail(cmd.kind, "expected " + std::to_string(need) + " inputs, got " +
                           std::to_string(cmd.inputs.size()));
    }
    if (!cmd.attrs.in.empty() && cmd.attrs.in.size() != need) {
        fail(cmd.kind, "attrs.in size mismatch");
    }
    in.clear();
    in.reserve(need);
    for (std::size_t i = 0; i < need; ++i) {
        const TensorView v = cmd.attrs.in.empty() ? TensorView{} : cmd.attrs.in[i];
        in.push_back(resolve_const(cmd.inputs[i], v, op_kind_name(cmd.kind)));
    }
    out = const_cast<Substrate*>(this)->resolve_mut(cmd.output, cmd.attrs.out,
                                                    op_kind_name(cmd.kind));

    const auto same_dims = [](const kernels::ConstView& a, const kernels::MutView& o) {
        return a.rows == o.rows && a.cols == o.cols;
    };

    switch (cmd.kind) {
        case OpKind::Matmul: {
            const std::int64_t bk = cmd.attrs.transpose_b ? in[1].cols : in[1].rows;
            const std::int64_t bn = cmd.attrs.transpose_b ? in[1].rows : in[1].cols;
            if (in[0].cols != bk) fail(cmd.kind, "inner dimensions disagree");
            if (out.rows != in[0].rows || out.cols != bn) {
                fail(cmd.kind, "output shape disagrees with operands");
            }
            if (cmd.output == cmd.inputs[0] || cmd.output == cmd.inputs[1]) {
                fail(cmd.kind, "output aliases an input");
            }
            break;
        }
        case OpKind::Add:
            if (in[1].cols != in[0].cols ||
                (in[1].rows != in[0].rows && in[1].rows != 1)) {
                fail(cmd.kind, "operand shapes incompatible");
            }
            if (!same_dims(in[0], out)) fail(cmd.kind, "output shape mismatch");
            break;
        case OpKind::Scale:
        case OpKind::Gelu:
        case OpKind::Softmax:
            if (!same_dims(in[0], out)) fail(cmd.kind, "output shape mismatch");
            break;
        case OpKind::Layernorm:
            if (in[1].rows != 1 || in[1].cols != in[0].cols || in[2].rows != 1 ||
                in[2].cols != in[0].cols) {
                fail(cmd.kind, "gamma/beta must be [1 x width]");
            }
            if (!same_dims(in[0], out)) fail(cmd.kind, "output shape mismatch");
            if (cmd.output == cmd.inputs[1] || cmd.output == cmd.inputs[2]) {
                fail(cmd.kind, "output aliases gamma/beta");
            }
            break;
        case OpKind::Copy:
        case OpKind::WriteSlice:
        case OpKind::ReadSlice:
            if (in[0].rows * in[0].cols != out.rows * out.cols) {
                fail(cmd.kind, "element counts differ");
            }
            break;
        case OpKind::EmbedLookup:
            if (out.rows != in[1].rows * in[1].cols || out.cols != in[0].cols) {
                fail(cmd.kind, "output must be [num_ids x table_width]");
            }
            if (cmd.output == cmd.inputs[0] || cmd.output == cmd.inputs[1]) {
                fail(cmd.kind, "output aliases an input");
            }
            break;
        case OpKind::Concat:
            if (in[0].cols != in[1].cols || out.cols != in[0].cols ||
                out.rows != in[0].rows + in[1].rows) {
                fail(cmd.kind, "row counts must add up at equal width");
            }
            if (cmd.output == cmd.inputs[0] || cmd.output == cmd.inputs[1]) {
                fail(cmd.kind, "output aliases an input");
            }
            break;
    }
}

void Substrate::apply_dispatch_delay() const {
    if (opts_.dispatch_delay_ns == 0) return;
    const auto start = std::chrono::steady_clock::now();
    const auto target = std::chrono::nanoseconds(opts_.dispatch_delay_ns);
    while (std::chrono::steady_clock::now() - start < target) {
    }
}

void Substrate::execute(OpKind kind, const OpAttrs& attrs,
                        const std::vector<kernels::ConstView>& in,
                        const kernels::MutView& out,
                        const kernels::ConstView* concat_b) const {
    const bool par = opts_.parallel_kernels;
#define MINIVLA_RUN(fn, ...) \
    (par ? kernels::parallel::fn(__VA_ARGS__) : kernels::serial::fn(__VA_ARGS__))
    switch (kind) {
        case OpKind::Matmul:
            MINIVLA_RUN(matmul, in[0], in[1], attrs.transpose_b, attrs.alpha, out);
            break;
        case OpKind::Add:
            MINIVLA_RUN(add, in[0], in[1], out);
            break;
        case OpKind::Scale:
            MINIVLA_RUN(scale, in[0], attrs.alpha, out);
            break;
        case OpKind::Softmax:
            MINIVLA_RUN(softmax, in[0], attrs.causal, attrs.causal_offset, out);
            break;
        case OpKind::Layernorm:
            MINIVLA_RUN(layernorm, in[0], in[1], in[2], attrs.eps, out);
            break;
        case OpKind::Gelu:
            MINIVLA_RUN(gelu, in[0], out);
            break;
        case OpKind::Copy:
        case OpKind::WriteSlice:
        case OpKind::ReadSlice:
            MINIVLA_RUN(copy, in[0], out);
            break;
        case OpKind::EmbedLookup:
            check_ids_in_range(in[0], in[1]);
            MINIVLA_RUN(embed_lookup, in[0], in[1], out);
            break;
        case OpKind::Concat: {
            const kernels::ConstView& b = concat_b ? *concat_b : in[1];
            const kernels::MutView out0{out.data, in[0].rows, out.cols, out.row_stride};
            const kernels::MutView out1{out.data + in[0].rows * out.row_stride, b.rows,
                                        out.cols, out.row_stride};
            MINIVLA_RUN(copy, in[0], out0);
            MINIVLA_RUN(copy, b, out1);
            break;
        }
    }
#undef MINIVLA_RUN
}

BufferId Substrate::dispatch(const OpCommand& cmd) {
    std::vector<kernels::ConstView> in;
    kernels::MutView out{nullptr, 0, 0, 0};
    validate(cmd, in, out);
    stats_.dispatch_count += 1;
    apply_dispatch_delay();
    execute(cmd.kind, cmd.attrs, in, out, nullptr);
    if (capturing_) capture_cmds_.push_back(cmd);
    return cmd.output;
}

std::uint64_t Substrate::begin_capture(std::int64_t capture_iteration) {
    if (capturing_) throw InternalError("nested capture attempt");
    capturing_ = true;
    capture_token_ = next_token_++;
    capture_iteration_ = capture_iteration;
    capture_cmds_.clear();
    return capture_token_;
}

ExecGraph Substrate::end_capture(std::uint64_t token) {
    if (!capturing_) throw InternalError("end_capture without an active capture");
    if (token != capture_token_) throw InternalError("end_capture token mismatch");
    capturing_ = false;

    ExecGraph graph;
    graph.commands_ = std::move(capture_cmds_);
    capture_cmds_.clear();
    graph.capture_iteration_ = capture_iteration_;
    graph.owner_ = this;

    std::set<BufferId> bound;
    graph.resolved_.reserve(graph.commands_.size());
    for (const OpCommand& cmd : graph.commands_) {
        for (BufferId id : cmd.inputs) bound.insert(id);
        bound.insert(cmd.output);

        std::vector<kernels::ConstView> in;
        kernels::MutView out{nullptr, 0, 0, 0};
        validate(cmd, in, out);
        ExecGraph::ResolvedOp op;
        op.kind = cmd.kind;
        op.alpha = cmd.attrs.alpha;
        op.transpose_b = cmd.attrs.transpose_b;
        op.causal = cmd.attrs.causal;
        op.causal_offset = cmd.attrs.causal_offset;
        op.eps = cmd.attrs.eps;
        if (cmd.kind == OpKind::Concat) {
            op.in = {in[0]};
            op.in1 = in[1];
            op.out = {out.data, in[0].rows, out.cols, out.row_stride};
            op.out1 = {out.data + in[0].rows * out.row_stride, in[1].rows, out.cols,
                       out.row_stride};
        } else {
            op.in = std::move(in);
            op.out = out;
        }
        graph.resolved_.push_back(std::move(op));
    }
    graph.bound_.assign(bound.begin(), bound.end());
    return graph;
}

void Substrate::replay(const ExecGraph& graph) {
    if (graph.owner_ != this) {
        throw InternalError("replay: graph was captured on a different substrate");
    }
    if (capturing_) throw InternalError("replay during capture");
    for (BufferId id : graph.bound_) {
        if (!alive(id)) {
            throw InternalError("stale graph: bound buffer " + std::to_string(id) +
                                " is no longer alive");
        }
    }
    stats_.dispatch_count += 1;
    stats_.replay_count += 1;
    apply_dispatch_delay();

    const bool par = opts_.parallel_kernels;
#define MINIVLA_RUN(fn, ...) \
    (par ? kernels::parallel::fn(__VA_ARGS__) : kernels::serial::fn(__VA_ARGS__))
    for (const ExecGraph::ResolvedOp& op : graph.resolved_) {
        switch (op.kind) {
            case OpKind::Matmul:
                MINIVLA_RUN(matmul, op.in[0], op.in[1], op.transpose_b, op.alpha,
                            op.out);
                break;
            case OpKind::Add:
                MINIVLA_RUN(add, op.in[0], op.in[1], op.out);
                break;
            case OpKind::Scale:
                MINIVLA_RUN(scale, op.in[0], op.alpha, op.out);
                break;
            case OpKind::Softmax:
                MINIVLA_RUN(softmax, op.in[0], op.causal, op.causal_offset, op.out);
                break;
            case OpKind::Layernorm:
                MINIVLA_RUN(layernorm, op.in[0], op.in[1], op.in[2], op.eps, op.out);
                break;
            case OpKind::Gelu:
                MINIVLA_RUN(gelu, op.in[0], op.out);
                break;
            case OpKind::Copy:
            case OpKind::WriteSlice:
            case OpKind::ReadSlice:
                MINIVLA_RUN(copy, op.in[0], op.out);
                break;
            case OpKind::EmbedLookup:
                check_ids_in_range(op.in[0], op.in[1]);
                MINIVLA_RUN(embed_lookup, op.in[0], op.in[1], op.out);
                break;
            case OpKind::Concat:
                MINIVLA_RUN(copy, op.in[0], op.out);
                MINIVLA_RUN(copy, op.in1, op.out1);
                break;
        }
    }
#undef MINIVLA_RUN
}

void Substrate::free_allocated_since(std::size_t mark) {
    if (mark > alloc_log_.size()) return;
    for (std::size_t i = mark; i < alloc_log_.size(); ++i) {
        if (alive(alloc_log_[i])) free_buffer(alloc_log_[i]);
    }
    alloc_log_.resize(mark);
}

} // namespace minivla
