#include "rcm/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <sstream>

namespace rcm {

Tensor::Tensor(std::vector<int64_t> s, Precision p) : shape(std::move(s)), prec(p) {
    data.assign(static_cast<size_t>(numel()), 0.0);
}

std::string shape_str(const std::vector<int64_t>& s) {
    std::ostringstream os;
    os << "[";
    for (size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
    os << "]";
    return os.str();
}

Tensor make_tensor(std::vector<int64_t> shape, const std::vector<double>& vals, Precision p) {
    Tensor t(std::move(shape), p);
    if (static_cast<int64_t>(vals.size()) != t.numel())
        throw std::invalid_argument("make_tensor: " + std::to_string(vals.size()) +
                                    " values for shape " + shape_str(t.shape));
    for (size_t i = 0; i < vals.size(); ++i) t.data[i] = quantize(vals[i], p);
    return t;
}

Tensor zeros_like(const Tensor& t) { return Tensor(t.shape, t.prec); }

Tensor full_like(const Tensor& t, double v) {
    Tensor r(t.shape, t.prec);
    std::fill(r.data.begin(), r.data.end(), quantize(v, t.prec));
    return r;
}

Tensor to_precision(const Tensor& t, Precision p) {
    Tensor r(t.shape, p);
    for (size_t i = 0; i < t.data.size(); ++i) r.data[i] = quantize(t.data[i], p);
    return r;
}

void check_same_shape(const Tensor& a, const Tensor& b, const char* op) {
    if (a.shape != b.shape)
        throw std::invalid_argument(std::string(op) + ": shape mismatch " + shape_str(a.shape) +
                                    " vs " + shape_str(b.shape));
}

void check_same_prec(const Tensor& a, const Tensor& b, const char* op) {
    if (a.prec != b.prec)
        throw std::invalid_argument(std::string(op) + ": precision mismatch");
}

namespace {

template <typename T, typename F>
Tensor binary_op(const Tensor& a, const Tensor& b, F f) {
    Tensor c(a.shape, a.prec);
    for (size_t i = 0; i < a.data.size(); ++i)
        c.data[i] = static_cast<double>(f(static_cast<T>(a.data[i]), static_cast<T>(b.data[i])));
    return c;
}

template <typename T>
void matmul_kernel(const double* a, const double* b, double* c, int64_t m, int64_t k, int64_t n) {
    for (int64_t i = 0; i < m; ++i)
        for (int64_t j = 0; j < n; ++j) {
            T acc = T(0);
            for (int64_t p = 0; p < k; ++p)
                acc += static_cast<T>(a[i * k + p]) * static_cast<T>(b[p * n + j]);
            c[i * n + j] = static_cast<double>(acc);
        }
}

}  // namespace

Tensor add(const Tensor& a, const Tensor& b) {
    check_same_shape(a, b, "add");
    check_same_prec(a, b, "add");
    if (a.prec == Precision::Single)
        return binary_op<float>(a, b, [](float x, float y) { return x + y; });
    return binary_op<double>(a, b, [](double x, double y) { return x + y; });
}

Tensor sub(const Tensor& a, const Tensor& b) {
    check_same_shape(a, b, "sub");
    check_same_prec(a, b, "sub");
    if (a.prec == Precision::Single)
        return binary_op<float>(a, b, [](float x, float y) { return x - y; });
    return binary_op<double>(a, b, [](double x, double y) { return x - y; });
}

Tensor mul(const Tensor& a, const Tensor& b) {
    check_same_shape(a, b, "mul");
    check_same_prec(a, b, "mul");
    if (a.prec == Precision::Single)
        return binary_op<float>(a, b, [](float x, float y) { return x * y; });
    return binary_op<double>(a, b, [](double x, double y) { return x * y; });
}

Tensor scale(const Tensor& a, double s) {
    Tensor c(a.shape, a.prec);
    if (a.prec == Precision::Single) {
        float fs = static_cast<float>(s);
        for (size_t i = 0; i < a.data.size(); ++i)
            c.data[i] = static_cast<double>(static_cast<float>(a.data[i]) * fs);
    } else {
        for (size_t i = 0; i < a.data.size(); ++i) c.data[i] = a.data[i] * s;
    }
    return c;
}

Tensor axpy(const Tensor& a, double s, const Tensor& b) {
    check_same_shape(a, b, "axpy");
    check_same_prec(a, b, "axpy");
    Tensor c(a.shape, a.prec);
    if (a.prec == Precision::Single) {
        float fs = static_cast<float>(s);
        for (size_t i = 0; i < a.data.size(); ++i)
            c.data[i] = static_cast<double>(static_cast<float>(a.data[i]) +
                                            fs * static_cast<float>(b.data[i]));
    } else {
        for (size_t i = 0; i < a.data.size(); ++i) c.data[i] = a.data[i] + s * b.data[i];
    }
    return c;
}

Tensor matmul(const Tensor& a, const Tensor& b) {
    if (a.ndim() != 2 || b.ndim() != 2)
        throw std::invalid_argument("matmul: expected 2-D operands, got " + shape_str(a.shape) +
                                    " and " + shape_str(b.shape));
    if (a.shape[1] != b.shape[0])
        throw std::invalid_argument("matmul: inner dimensions disagree, " + shape_str(a.shape) +
                                    " x " + shape_str(b.shape));
    check_same_prec(a, b, "matmul");
    Tensor c({a.shape[0], b.shape[1]}, a.prec);
    if (a.prec == Precision::Single)
        matmul_kernel<float>(a.data.data(), b.data.data(), c.data.data(), a.shape[0], a.shape[1],
                             b.shape[1]);
    else
        matmul_kernel<double>(a.data.data(), b.data.data(), c.data.data(), a.shape[0], a.shape[1],
                              b.shape[1]);
    return c;
}

Tensor transpose2d(const Tensor& a) {
    if (a.ndim() != 2) throw std::invalid_argument("transpose2d: expected 2-D tensor");
    Tensor c({a.shape[1], a.shape[0]}, a.prec);
    for (int64_t i = 0; i < a.shape[0]; ++i)
        for (int64_t j = 0; j < a.shape[1]; ++j) c.at(j, i) = a.at(i, j);
    return c;
}

double max_abs(const Tensor& a) {
    double m = 0.0;
    for (double v : a.data) m = std::max(m, std::abs(v));
    return m;
}

double max_abs_diff(const Tensor& a, const Tensor& b) {
    check_same_shape(a, b, "max_abs_diff");
    double m = 0.0;
    for (size_t i = 0; i < a.data.size(); ++i) m = std::max(m, std::abs(a.data[i] - b.data[i]));
    return m;
}

double l2_norm(const Tensor& a) {
    double s = 0.0;
    for (double v : a.data) s += v * v;
    return std::sqrt(s);
}

double dot(const Tensor& a, const Tensor& b) {
    check_same_shape(a, b, "dot");
    double s = 0.0;
    for (size_t i = 0; i < a.data.size(); ++i) s += a.data[i] * b.data[i];
    return s;
}

bool bitwise_equal(const Tensor& a, const Tensor& b) {
    if (a.shape != b.shape || a.prec != b.prec) return false;
    return std::memcmp(a.data.data(), b.data.data(), a.data.size() * sizeof(double)) == 0;
}

double Rng::uniform() {
    // 53-bit mantissa in [0,1)
    return static_cast<double>(gen() >> 11) * 0x1.0p-53;
}

double Rng::normal() {
    double u1 = uniform();
    while (u1 <= 0.0) u1 = uniform();
    double u2 = uniform();
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * M_PI * u2);
}

int64_t Rng::uniform_int(int64_t lo, int64_t hi) {
    uint64_t span = static_cast<uint64_t>(hi - lo + 1);
    return lo + static_cast<int64_t>(gen() % span);
}

Tensor Rng::normal_tensor(std::vector<int64_t> shape, Precision p) {
    Tensor t(std::move(shape), p);
    for (auto& v : t.data) v = quantize(normal(), p);
    return t;
}

Tensor Rng::uniform_tensor(std::vector<int64_t> shape, double lo, double hi, Precision p) {
    Tensor t(std::move(shape), p);
    for (auto& v : t.data) v = quantize(lo + (hi - lo) * uniform(), p);
    return t;
}

}  // namespace rcm
