#pragma once

#include <cstdint>

namespace minivla::kernels {

// Strided 2D views over f32 storage. row_stride >= cols; rows are contiguous
// runs of `cols` elements starting every `row_stride` elements.
struct ConstView {
    const float* data;
    std::int64_t rows;
    std::int64_t cols;
    std::int64_t row_stride;
};

struct MutView {
    float* data;
    std::int64_t rows;
    std::int64_t cols;
    std::int64_t row_stride;
};

// Every kernel exists in two implementations with bit-identical results:
// `serial` is the reference; `parallel` distributes independent output rows
// across OpenMP threads while keeping each row's reduction order fixed
// (ascending index, f32 accumulators). Reductions never cross threads.
//
// matmul: out[m,n] = alpha * a[m,k] x b[k,n]; with transpose_b, b is given
// as an [n,k] view and used transposed.
// add: elementwise; b with rows==1 broadcasts across a's rows.
// softmax: row-wise; in causal mode row i sees columns [0, causal_offset+i].
// Masked-out columns are written as 0.
// copy: row-major element stream from in to out; element counts must match,
// shapes may differ.
// embed_lookup: ids holds row indices (as floats) into table.

#define MINIVLA_KERNEL_SET(ns)                                                          \
    namespace ns {                                                                      \
    void matmul(ConstView a, ConstView b, bool transpose_b, float alpha, MutView out);  \
    void add(ConstView a, ConstView b, MutView out);                                    \
    void scale(ConstView a, float alpha, MutView out);                                  \
    void softmax(ConstView a, bool causal, std::int64_t causal_offset, MutView out);    \
    void layernorm(ConstView x, ConstView gamma, ConstView beta, float eps,             \
                   MutView out);                                                        \
    void gelu(ConstView a, MutView out);                                                \
    void copy(ConstView a, MutView out);                                                \
    void embed_lookup(ConstView table, ConstView ids, MutView out);                     \
    }

MINIVLA_KERNEL_SET(serial)
MINIVLA_KERNEL_SET(parallel)

#undef MINIVLA_KERNEL_SET

namespace detail {

// Row-level primitives shared by both drivers. Keeping the per-element math in
// one place guarantees the serial and parallel paths agree bitwise.

inline float dot(const float* a, const float* b, std::int64_t n) {
    float acc = 0.0f;
    for (std::int64_t i = 0; i < n; ++i) acc += a[i] * b[i];
    return acc;
}

// Column j of a [k,n] row-major view, dotted with a k-vector.
inline float dot_col(const float* a, const float* b_col0, std::int64_t k,
                     std::int64_t b_stride) {
    float acc = 0.0f;
    for (std::int64_t i = 0; i < k; ++i) acc += a[i] * b_col0[i * b_stride];
    return acc;
}

void matmul_row(ConstView a, ConstView b, bool transpose_b, float alpha, MutView out,
                std::int64_t i);
void add_row(ConstView a, ConstView b, MutView out, std::int64_t i);
void scale_row(ConstView a, float alpha, MutView out, std::int64_t i);
void softmax_row(ConstView a, bool causal, std::int64_t causal_offset, MutView out,
                 std::int64_t i);
void layernorm_row(ConstView x, ConstView gamma, ConstView beta, float eps, MutView out,
                   std::int64_t i);
void gelu_row(ConstView a, MutView out, std::int64_t i);
void copy_row(ConstView a, MutView out, std::int64_t i);
void embed_lookup_row(ConstView table, ConstView ids, MutView out, std::int64_t i);

} // namespace detail

} // namespace minivla::kernels
