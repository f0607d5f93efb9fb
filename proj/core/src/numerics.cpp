#include "ffkv/numerics.hpp"

#include <algorithm>
#include <cmath>
#include <string>

#include "ffkv/error.hpp"

namespace ffkv {

namespace {

void require(bool ok, const char* what) {
    if (!ok) {
        throw InputError(what);
    }
}

}  // namespace

Matrix::Matrix(std::size_t rows, std::size_t cols, float fill)
    : rows_(rows), cols_(cols), data_(rows * cols, fill) {}

Matrix::Matrix(std::size_t rows, std::size_t cols, std::vector<float> data)
    : rows_(rows), cols_(cols), data_(std::move(data)) {
    if (data_.size() != rows_ * cols_) {
        throw InputError("matrix data length " + std::to_string(data_.size()) + " != " +
                         std::to_string(rows_) + "x" + std::to_string(cols_));
    }
}

Matrix Matrix::identity(std::size_t n) {
    Matrix m(n, n);
    for (std::size_t i = 0; i < n; ++i) {
        m(i, i) = 1.0f;
    }
    return m;
}

void Matrix::fill(float v) { std::fill(data_.begin(), data_.end(), v); }

double dot(std::span<const float> a, std::span<const float> b) {
    const std::size_t n = a.size();
    double s0 = 0.0, s1 = 0.0, s2 = 0.0, s3 = 0.0;
    std::size_t k = 0;
    for (; k + 4 <= n; k += 4) {
        s0 += static_cast<double>(a[k]) * b[k];
        s1 += static_cast<double>(a[k + 1]) * b[k + 1];
        s2 += static_cast<double>(a[k + 2]) * b[k + 2];
        s3 += static_cast<double>(a[k + 3]) * b[k + 3];
    }
    for (; k < n; ++k) {
        s0 += static_cast<double>(a[k]) * b[k];
    }
    return (s0 + s1) + (s2 + s3);
}

Matrix matmul(const Matrix& a, const Matrix& b) {
    require(a.cols() == b.rows(), "matmul: a.cols != b.rows");
    Matrix out(a.rows(), b.cols());
    std::vector<double> acc(b.cols());
    for (std::size_t i = 0; i < a.rows(); ++i) {
        std::fill(acc.begin(), acc.end(), 0.0);
        const auto arow = a.row(i);
        for (std::size_t k = 0; k < a.cols(); ++k) {
            const double aik = arow[k];
            if (aik == 0.0) {
                continue;
            }
            const auto brow = b.row(k);
            for (std::size_t j = 0; j < b.cols(); ++j) {
                acc[j] += aik * brow[j];
            }
        }
        auto orow = out.row(i);
        for (std::size_t j = 0; j < b.cols(); ++j) {
            orow[j] = static_cast<float>(acc[j]);
        }
    }
    return out;
}

Matrix matmul_nt(const Matrix& a, const Matrix& b) {
    require(a.cols() == b.cols(), "matmul_nt: a.cols != b.cols");
    Matrix out(a.rows(), b.rows());
    for (std::size_t i = 0; i < a.rows(); ++i) {
        const auto arow = a.row(i);
        auto orow = out.row(i);
        for (std::size_t j = 0; j < b.rows(); ++j) {
            orow[j] = static_cast<float>(dot(arow, b.row(j)));
        }
    }
    return out;
}

Matrix matmul_tn(const Matrix& a, const Matrix& b) {
    require(a.rows() == b.rows(), "matmul_tn: a.rows != b.rows");
    std::vector<double> acc(a.cols() * b.cols(), 0.0);
    for (std::size_t k = 0; k < a.rows(); ++k) {
        const auto arow = a.row(k);
        const auto brow = b.row(k);
        for (std::size_t i = 0; i < a.cols(); ++i) {
            const double aki = arow[i];
            if (aki == 0.0) {
                continue;
            }
            double* dst = acc.data() + i * b.cols();
            for (std::size_t j = 0; j < b.cols(); ++j) {
                dst[j] += aki * brow[j];
            }
        }
    }
    Matrix out(a.cols(), b.cols());
    auto vals = out.values();
    for (std::size_t i = 0; i < acc.size(); ++i) {
        vals[i] = static_cast<float>(acc[i]);
    }
    return out;
}

void matvec_nt(std::span<const float> x, const Matrix& w, std::span<const float> bias, std::span<float> out) {
    require(x.size() == w.cols(), "matvec_nt: x length != w.cols");
    require(out.size() == w.rows(), "matvec_nt: out length != w.rows");
    require(bias.empty() || bias.size() == w.rows(), "matvec_nt: bias length != w.rows");
    for (std::size_t j = 0; j < w.rows(); ++j) {
        double s = dot(x, w.row(j));
        if (!bias.empty()) {
            s += bias[j];
        }
        out[j] = static_cast<float>(s);
    }
}

void matvec_nt_f64(std::span<const float> x, const Matrix& w, std::span<double> out) {
    require(x.size() == w.cols(), "matvec_nt_f64: x length != w.cols");
    require(out.size() == w.rows(), "matvec_nt_f64: out length != w.rows");
    for (std::size_t j = 0; j < w.rows(); ++j) {
        out[j] = dot(x, w.row(j));
    }
}

void vecmat(std::span<const float> x, const Matrix& w, std::span<const float> bias, std::span<float> out) {
    require(x.size() == w.rows(), "vecmat: x length != w.rows");
    require(out.size() == w.cols(), "vecmat: out length != w.cols");
    require(bias.empty() || bias.size() == w.cols(), "vecmat: bias length != w.cols");
    std::vector<double> acc(w.cols(), 0.0);
    for (std::size_t k = 0; k < w.rows(); ++k) {
        const double xk = x[k];
        if (xk == 0.0) {
            continue;
        }
        const auto wrow = w.row(k);
        for (std::size_t j = 0; j < w.cols(); ++j) {
            acc[j] += xk * wrow[j];
        }
    }
    for (std::size_t j = 0; j < w.cols(); ++j) {
        out[j] = static_cast<float>(bias.empty() ? acc[j] : acc[j] + bias[j]);
    }
}

void softmax_inplace(std::span<float> v) {
    require(!v.empty(), "softmax: empty input");
    const float mx = *std::max_element(v.begin(), v.end());
    double total = 0.0;
    for (float& x : v) {
        x = std::exp(x - mx);
        total += x;
    }
    const double inv = 1.0 / total;
    for (float& x : v) {
        x = static_cast<float>(x * inv);
    }
}

Vector softmax(std::span<const float> v) {
    Vector out(v.begin(), v.end());
    softmax_inplace(out);
    return out;
}

std::vector<double> softmax(std::span<const double> v) {
    require(!v.empty(), "softmax: empty input");
    const double mx = *std::max_element(v.begin(), v.end());
    std::vector<double> out(v.size());
    double total = 0.0;
    for (std::size_t i = 0; i < v.size(); ++i) {
        out[i] = std::exp(v[i] - mx);
        total += out[i];
    }
    for (double& x : out) {
        x /= total;
    }
    return out;
}

Vector relu(std::span<const float> v) {
    Vector out(v.size());
    std::transform(v.begin(), v.end(), out.begin(), [](float x) { return x > 0.0f ? x : 0.0f; });
    return out;
}

void layernorm_into(std::span<const float> v, std::span<const float> gain, std::span<const float> bias,
                    std::span<float> out, std::span<float> normalized, float* rstd, float eps) {
    require(v.size() == gain.size() && v.size() == bias.size() && v.size() == out.size(),
            "layernorm: length mismatch");
    require(!v.empty(), "layernorm: empty input");
    require(eps > 0.0f, "layernorm: eps must be positive");
    const double n = static_cast<double>(v.size());
    double mean = 0.0;
    for (float x : v) {
        mean += x;
    }
    mean /= n;
    double var = 0.0;
    for (float x : v) {
        var += (x - mean) * (x - mean);
    }
    var /= n;
    const double inv_std = 1.0 / std::sqrt(var + eps);
    for (std::size_t i = 0; i < v.size(); ++i) {
        const double xhat = (v[i] - mean) * inv_std;
        if (!normalized.empty()) {
            normalized[i] = static_cast<float>(xhat);
        }
        out[i] = static_cast<float>(xhat * gain[i] + bias[i]);
    }
    if (rstd != nullptr) {
        *rstd = static_cast<float>(inv_std);
    }
}

Vector layernorm(std::span<const float> v, std::span<const float> gain, std::span<const float> bias, float eps) {
    Vector out(v.size());
    layernorm_into(v, gain, bias, out, {}, nullptr, eps);
    return out;
}

namespace {

template <typename T>
std::size_t argmax_impl(std::span<const T> v) {
    require(!v.empty(), "argmax: empty input");
    std::size_t best = 0;
    for (std::size_t i = 1; i < v.size(); ++i) {
        if (v[i] > v[best]) {
            best = i;
        }
    }
    return best;
}

// std heap algorithms with this comparator keep the worst retained item at front.
struct WorstFirst {
    bool operator()(const ScoredId& a, const ScoredId& b) const noexcept { return ranks_before(a, b); }
};

}  // namespace

std::size_t argmax_tiebreak(std::span<const float> v) { return argmax_impl(v); }
std::size_t argmax_tiebreak(std::span<const double> v) { return argmax_impl(v); }

TopKSelector::TopKSelector(std::size_t k) : k_(k) {
    require(k >= 1, "top-k: k must be at least 1");
    heap_.reserve(k);
}

void TopKSelector::push(std::uint64_t id, float score) {
    const ScoredId item{id, score};
    if (heap_.size() < k_) {
        heap_.push_back(item);
        std::push_heap(heap_.begin(), heap_.end(), WorstFirst{});
        return;
    }
    if (!ranks_before(item, heap_.front())) {
        return;
    }
    std::pop_heap(heap_.begin(), heap_.end(), WorstFirst{});
    heap_.back() = item;
    std::push_heap(heap_.begin(), heap_.end(), WorstFirst{});
}

void TopKSelector::merge(const TopKSelector& other) {
    for (const auto& item : other.heap_) {
        push(item);
    }
}

std::vector<ScoredId> TopKSelector::sorted() const {
    std::vector<ScoredId> out = heap_;
    std::sort(out.begin(), out.end(), ranks_before);
    return out;
}

std::vector<ScoredId> top_k_select(std::span<const ScoredId> items, std::size_t k) {
    TopKSelector sel(k);
    for (const auto& item : items) {
        sel.push(item);
    }
    return sel.sorted();
}

}  // namespace ffkv
