#include "minivla/kernels.hpp"

#include "minivla/common.hpp"

#include <cmath>

namespace minivla::kernels {

namespace detail {

void matmul_row(ConstView a, ConstView b, bool transpose_b, float alpha, MutView out,
                std::int64_t i) {
    const float* arow = a.data + i * a.row_stride;
    float* orow = out.data + i * out.row_stride;
    const std::int64_t k = a.cols;
    for (std::int64_t j = 0; j < out.cols; ++j) {
        float acc;
        if (transpose_b) {
            // b given as [n,k]; row j of b is column j of b^T.
            acc = dot(arow, b.data + j * b.row_stride, k);
        } else {
            acc = dot_col(arow, b.data + j, k, b.row_stride);
        }
        orow[j] = alpha * acc;
    }
}

void add_row(ConstView a, ConstView b, MutView out, std::int64_t i) {
    const float* arow = a.data + i * a.row_stride;
    const float* brow = b.data + (b.rows == 1 ? 0 : i) * b.row_stride;
    float* orow = out.data + i * out.row_stride;
    for (std::int64_t j = 0; j < a.cols; ++j) orow[j] = arow[j] + brow[j];
}

void scale_row(ConstView a, float alpha, MutView out, std::int64_t i) {
    const float* arow = a.data + i * a.row_stride;
    float* orow = out.data + i * out.row_stride;
    for (std::int64_t j = 0; j < a.cols; ++j) orow[j] = alpha * arow[j];
}

void softmax_row(ConstView a, bool causal, std::int64_t causal_offset, MutView out,
                 std::int64_t i) {
    const float* arow = a.data + i * a.row_stride;
    float* orow = out.data + i * out.row_stride;
    std::int64_t valid = a.cols;
    if (causal) {
        valid = causal_offset + i + 1;
        if (valid > a.cols) valid = a.cols;
        if (valid < 1) valid = 1;
    }
    float mx = arow[0];
    for (std::int64_t j = 1; j < valid; ++j) {
        if (arow[j] > mx) mx = arow[j];
    }
    float sum = 0.0f;
    for (std::int64_t j = 0; j < valid; ++j) {
        const float e = std::exp(arow[j] - mx);
        orow[j] = e;
        sum += e;
    }
    const float inv = 1.0f / sum;
    for (std::int64_t j = 0; j < valid; ++j) orow[j] *= inv;
    for (std::int64_t j = valid; j < a.cols; ++j) orow[j] = 0.0f;
}

void layernorm_row(ConstView x, ConstView gamma, ConstView beta, float eps, MutView out,
                   std::int64_t i) {
    const float* xrow = x.data + i * x.row_stride;
    float* orow = out.data + i * out.row_stride;
    const std::int64_t n = x.cols;
    float mean = 0.0f;
    for (std::int64_t j = 0; j < n; ++j) mean += xrow[j];
    mean /= static_cast<float>(n);
    float var = 0.0f;
    for (std::int64_t j = 0; j < n; ++j) {
        const float d = xrow[j] - mean;
        var += d * d;
    }
    var /= static_cast<float>(n);
    const float inv = 1.0f / std::sqrt(var + eps);
    for (std::int64_t j = 0; j < n; ++j) {
        orow[j] = (xrow[j] - mean) * inv * gamma.data[j] + beta.data[j];
    }
}

void gelu_row(ConstView a, MutView out, std::int64_t i) {
    const float* arow = a.data + i * a.row_stride;
    float* orow = out.data + i * out.row_stride;
    for (std::int64_t j = 0; j < a.cols; ++j) {
        const float x = arow[j];
        orow[j] = 0.5f * x * (1.0f + std::erf(x * 0.70710678118654752440f));
    }
}

void copy_row(ConstView a, MutView out, std::int64_t i) {
    // Rows indexed over the flattened element stream: row i of the stream maps
    // to source row (i / 1)... callers guarantee equal element counts; here we
    // copy by output row, reading the matching flat range of the input.
    float* orow = out.data + i * out.row_stride;
    const std::int64_t flat_base = i * out.cols;
    for (std::int64_t j = 0; j < out.cols; ++j) {
        const std::int64_t f = flat_base + j;
        const std::int64_t sr = f / a.cols;
        const std::int64_t sc = f % a.cols;
        orow[j] = a.data[sr * a.row_stride + sc];
    }
}

void embed_lookup_row(ConstView table, ConstView ids, MutView out, std::int64_t i) {
    const std::int64_t flat_count = ids.rows * ids.cols;
    (void)flat_count;
    const std::int64_t r = i / ids.cols;
    const std::int64_t c = i % ids.cols;
    const auto id = static_cast<std::int64_t>(std::llround(
        static_cast<double>(ids.data[r * ids.row_stride + c])));
    const float* trow = table.data + id * table.row_stride;
    float* orow = out.data + i * out.row_stride;
    for (std::int64_t j = 0; j < table.cols; ++j) orow[j] = trow[j];
}

} // namespace detail

namespace serial {

void matmul(ConstView a, ConstView b, bool transpose_b, float alpha, MutView out) {
    for (std::int64_t i = 0; i < out.rows; ++i) {
        detail::matmul_row(a, b, transpose_b, alpha, out, i);
    }
}

void add(ConstView a, ConstView b, MutView out) {
    for (std::int64_t i = 0; i < a.rows; ++i) detail::add_row(a, b, out, i);
}

void scale(ConstView a, float alpha, MutView out) {
    for (std::int64_t i = 0; i < a.rows; ++i) detail::scale_row(a, alpha, out, i);
}

void softmax(ConstView a, bool causal, std::int64_t causal_offset, MutView out) {
    for (std::int64_t i = 0; i < a.rows; ++i) {
        detail::softmax_row(a, causal, causal_offset, out, i);
    }
}

void layernorm(ConstView x, ConstView gamma, ConstView beta, float eps, MutView out) {
    for (std::int64_t i = 0; i < x.rows; ++i) {
        detail::layernorm_row(x, gamma, beta, eps, out, i);
    }
}

void gelu(ConstView a, MutView out) {
    for (std::int64_t i = 0; i < a.rows; ++i) detail::gelu_row(a, out, i);
}

void copy(ConstView a, MutView out) {
    for (std::int64_t i = 0; i < out.rows; ++i) detail::copy_row(a, out, i);
}

void embed_lookup(ConstView table, ConstView ids, MutView out) {
    const std::int64_t n = ids.rows * ids.cols;
    for (std::int64_t i = 0; i < n; ++i) detail::embed_lookup_row(table, ids, out, i);
}

} // namespace serial

} // namespace minivla::kernels
