#include "minivla/kernels.hpp"

#ifdef _OPENMP
#include <omp.h>
#endif

// OpenMP drivers. Work is split across output rows only; each row runs the
// same detail:: routine as the serial reference, so results match it bitwise.

namespace minivla::kernels::parallel {

void matmul(ConstView a, ConstView b, bool transpose_b, float alpha, MutView out) {
#pragma omp parallel for schedule(static)
    for (std::int64_t i = 0; i < out.rows; ++i) {
        detail::matmul_row(a, b, transpose_b, alpha, out, i);
    }
}

void add(ConstView a, ConstView b, MutView out) {
#pragma omp parallel for schedule(static)
    for (std::int64_t i = 0; i < a.rows; ++i) detail::add_row(a, b, out, i);
}

void scale(ConstView a, float alpha, MutView out) {
#pragma omp parallel for schedule(static)
    for (std::int64_t i = 0; i < a.rows; ++i) detail::scale_row(a, alpha, out, i);
}

void softmax(ConstView a, bool causal, std::int64_t causal_offset, MutView out) {
#pragma omp parallel for schedule(static)
    for (std::int64_t i = 0; i < a.rows; ++i) {
        detail::softmax_row(a, causal, causal_offset, out, i);
    }
}

void layernorm(ConstView x, ConstView gamma, ConstView beta, float eps, MutView out) {
#pragma omp parallel for schedule(static)
    for (std::int64_t i = 0; i < x.rows; ++i) {
        detail::layernorm_row(x, gamma, beta, eps, out, i);
    }
}

void gelu(ConstView a, MutView out) {
#pragma omp parallel for schedule(static)
    for (std::int64_t i = 0; i < a.rows; ++i) detail::gelu_row(a, out, i);
}

void copy(ConstView a, MutView out) {
#pragma omp parallel for schedule(static)
    for (std::int64_t i = 0; i < out.rows; ++i) detail::copy_row(a, out, i);
}

void embed_lookup(ConstView table, ConstView ids, MutView out) {
    const std::int64_t n = ids.rows * ids.cols;
#pragma omp parallel for schedule(static)
    for (std::int64_t i = 0; i < n; ++i) detail::embed_lookup_row(table, ids, out, i);
}

} // namespace minivla::kernels::parallel
