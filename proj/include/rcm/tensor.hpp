#pragma once

#include <cstdint>
#include <functional>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

namespace rcm {

// Runtime element precision. Values are always stored as doubles; tensors
// tagged Single hold float-representable values and all arithmetic on them
// is carried out in float, so the two paths share one code base.
enum class Precision { Single, Double };

inline const char* precision_name(Precision p) {
    return p == Precision::Single ? "single" : "double";
}

struct Tensor {
    std::vector<int64_t> shape;
    Precision prec = Precision::Double;
    std::vector<double> data;

    Tensor() = default;
    Tensor(std::vector<int64_t> s, Precision p = Precision::Double);

    int64_t numel() const {
        int64_t n = 1;
        for (int64_t d : shape) n *= d;
        return n;
    }
    int64_t dim(int i) const { return shape[static_cast<size_t>(i)]; }
    int ndim() const { return static_cast<int>(shape.size()); }

    double& at(int64_t i) { return data[static_cast<size_t>(i)]; }
    double at(int64_t i) const { return data[static_cast<size_t>(i)]; }

    // 2-D accessors (row-major).
    double& at(int64_t r, int64_t c) { return data[static_cast<size_t>(r * shape[1] + c)]; }
    double at(int64_t r, int64_t c) const { return data[static_cast<size_t>(r * shape[1] + c)]; }

    bool same_shape(const Tensor& o) const { return shape == o.shape; }
};

std::string shape_str(const std::vector<int64_t>& s);

// Rounds v to the storage grid of the precision (identity for Double).
inline double quantize(double v, Precision p) {
    return p == Precision::Single ? static_cast<double>(static_cast<float>(v)) : v;
}

Tensor make_tensor(std::vector<int64_t> shape, const std::vector<double>& vals,
                   Precision p = Precision::Double);
Tensor zeros_like(const Tensor& t);
Tensor full_like(const Tensor& t, double v);
Tensor to_precision(const Tensor& t, Precision p);

void check_same_shape(const Tensor& a, const Tensor& b, const char* op);
void check_same_prec(const Tensor& a, const Tensor& b, const char* op);

// Elementwise ops, executed at the tensors' precision.
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, double s);
// c = a + s * b, fused at the working precision.
Tensor axpy(const Tensor& a, double s, const Tensor& b);

// Row-major matmul [m,k]x[k,n] with fixed left-to-right accumulation.
Tensor matmul(const Tensor& a, const Tensor& b);
Tensor transpose2d(const Tensor& a);

double max_abs(const Tensor& a);
double max_abs_diff(const Tensor& a, const Tensor& b);
double l2_norm(const Tensor& a);
double dot(const Tensor& a, const Tensor& b);
bool bitwise_equal(const Tensor& a, const Tensor& b);

// Deterministic RNG: mt19937_64 with a hand-rolled Box-Muller so streams are
// identical across standard library implementations.
struct Rng {
    explicit Rng(uint64_t seed) : gen(seed) {}
    double uniform();                 // [0, 1)
    double normal();                  // N(0, 1)
    int64_t uniform_int(int64_t lo, int64_t hi);  // inclusive bounds
    Tensor normal_tensor(std::vector<int64_t> shape, Precision p = Precision::Double);
    Tensor uniform_tensor(std::vector<int64_t> shape, double lo, double hi,
                          Precision p = Precision::Double);

private:
    std::mt19937_64 gen;
};

}  // namespace rcm
