#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <vector>

namespace ffkv {

using Vector = std::vector<float>;

/// Dense row-major float matrix.
class Matrix {
public:
    Matrix() = default;
    Matrix(std::size_t rows, std::size_t cols, float fill = 0.0f);
    Matrix(std::size_t rows, std::size_t cols, std::vector<float> data);

    static Matrix identity(std::size_t n);

    std::size_t rows() const noexcept { return rows_; }
    std::size_t cols() const noexcept { return cols_; }
    std::size_t size() const noexcept { return data_.size(); }
    bool empty() const noexcept { return data_.empty(); }

    float& operator()(std::size_t r, std::size_t c) { return data_[r * cols_ + c]; }
    float operator()(std::size_t r, std::size_t c) const { return data_[r * cols_ + c]; }

    std::span<float> row(std::size_t r) { return {data_.data() + r * cols_, cols_}; }
    std::span<const float> row(std::size_t r) const { return {data_.data() + r * cols_, cols_}; }

    std::span<float> values() noexcept { return data_; }
    std::span<const float> values() const noexcept { return data_; }

    void fill(float v);

    bool operator==(const Matrix&) const = default;

private:
    std::size_t rows_ = 0;
    std::size_t cols_ = 0;
    std::vector<float> data_;
};

// Dot products accumulate in double; results round to float once.
double dot(std::span<const float> a, std::span<const float> b);

/// a · b
Matrix matmul(const Matrix& a, const Matrix& b);
/// a · bᵀ (both operands row-major; rows of a against rows of b)
Matrix matmul_nt(const Matrix& a, const Matrix& b);
/// aᵀ · b
Matrix matmul_tn(const Matrix& a, const Matrix& b);

/// out_j = x · w_j + bias_j for every row j of w. bias may be empty.
void matvec_nt(std::span<const float> x, const Matrix& w, std::span<const float> bias, std::span<float> out);
/// Same product kept in double, used wherever rankings over the vocabulary matter.
void matvec_nt_f64(std::span<const float> x, const Matrix& w, std::span<double> out);
/// out = x · w + bias (x has w.rows() entries)
void vecmat(std::span<const float> x, const Matrix& w, std::span<const float> bias, std::span<float> out);

Vector softmax(std::span<const float> v);
std::vector<double> softmax(std::span<const double> v);
void softmax_inplace(std::span<float> v);

Vector relu(std::span<const float> v);

inline constexpr float kLayerNormEps = 1e-5f;

Vector layernorm(std::span<const float> v, std::span<const float> gain, std::span<const float> bias,
                 float eps = kLayerNormEps);

/// Layernorm writing into `out`; optionally also the normalized input and 1/std,
/// which the backward pass needs.
void layernorm_into(std::span<const float> v, std::span<const float> gain, std::span<const float> bias,
                    std::span<float> out, std::span<float> normalized = {}, float* rstd = nullptr,
                    float eps = kLayerNormEps);

/// Index of the maximum; ties go to the lowest index.
std::size_t argmax_tiebreak(std::span<const float> v);
std::size_t argmax_tiebreak(std::span<const double> v);

struct ScoredId {
    std::uint64_t id = 0;
    float score = 0.0f;
    bool operator==(const ScoredId&) const = default;
};

/// Total order used by every top-k: higher score first, then lower id.
constexpr bool ranks_before(const ScoredId& a, const ScoredId& b) noexcept {
    return a.score > b.score || (a.score == b.score && a.id < b.id);
}

/// Streaming top-k: keeps the k best items seen so far in a bounded heap.
class TopKSelector {
public:
    explicit TopKSelector(std::size_t k);

    std::size_t capacity() const noexcept { return k_; }
    std::size_t size() const noexcept { return heap_.size(); }

    void push(std::uint64_t id, float score);
    void push(const ScoredId& item) { push(item.id, item.score); }
    void merge(const TopKSelector& other);

    /// Best-first copy of the current contents.
    std::vector<ScoredId> sorted() const;

private:
    std::size_t k_;
    std::vector<ScoredId> heap_;  // worst retained item at front
};

std::vector<ScoredId> top_k_select(std::span<const ScoredId> items, std::size_t k);

}  // namespace ffkv
