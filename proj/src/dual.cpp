#include "rcm/dual.hpp"

#include <cmath>

namespace rcm {

DualTensor::DualTensor(Tensor p, Tensor t) : primal(std::move(p)), tangent(std::move(t)) {
    check_same_shape(primal, tangent, "DualTensor");
    check_same_prec(primal, tangent, "DualTensor");
}

Activation activation_from_name(const std::string& name) {
    if (name == "identity") return Activation::Identity;
    if (name == "silu") return Activation::Silu;
    if (name == "gelu-tanh") return Activation::GeluTanh;
    throw std::invalid_argument("unknown activation: " + name);
}

DualTensor dual_matmul(const DualTensor& a, const DualTensor& b) {
    Tensor p = matmul(a.primal, b.primal);
    Tensor t = add(matmul(a.tangent, b.primal), matmul(a.primal, b.tangent));
    return DualTensor(std::move(p), std::move(t));
}

namespace {

template <typename T>
void softmax_rows_kernel(const Tensor& s, const Tensor& ts, Tensor& p, Tensor& tp) {
    int64_t rows = s.shape[0], cols = s.shape[1];
    std::vector<T> prow(static_cast<size_t>(cols));
    for (int64_t i = 0; i < rows; ++i) {
        T m = static_cast<T>(s.at(i, 0));
        for (int64_t j = 1; j < cols; ++j) m = std::max(m, static_cast<T>(s.at(i, j)));
        T l = T(0);
        for (int64_t j = 0; j < cols; ++j) {
            prow[static_cast<size_t>(j)] = std::exp(static_cast<T>(s.at(i, j)) - m);
            l += prow[static_cast<size_t>(j)];
        }
        for (int64_t j = 0; j < cols; ++j) prow[static_cast<size_t>(j)] /= l;
        // tangent: P(.)tS - P * rowsum(P(.)tS)
        T h = T(0);
        for (int64_t j = 0; j < cols; ++j)
            h += prow[static_cast<size_t>(j)] * static_cast<T>(ts.at(i, j));
        for (int64_t j = 0; j < cols; ++j) {
            T pj = prow[static_cast<size_t>(j)];
            p.at(i, j) = static_cast<double>(pj);
            tp.at(i, j) = static_cast<double>(pj * static_cast<T>(ts.at(i, j)) - pj * h);
        }
    }
}

template <typename T>
void rmsnorm_kernel(const Tensor& x, const Tensor& tx, const Tensor& w, double eps, Tensor& y,
                    Tensor& ty) {
    int64_t n = x.shape.back();
    int64_t rows = x.numel() / n;
    const T e = static_cast<T>(eps);
    for (int64_t i = 0; i < rows; ++i) {
        const double* xr = x.data.data() + i * n;
        const double* txr = tx.data.data() + i * n;
        double* yr = y.data.data() + i * n;
        double* tyr = ty.data.data() + i * n;
        T ms = T(0);
        for (int64_t j = 0; j < n; ++j) {
            T v = static_cast<T>(xr[j]);
            ms += v * v;
        }
        ms = ms / static_cast<T>(n);
        T r = T(1) / std::sqrt(ms + e);
        // d(ms)/d(eps direction): 2/n sum(x tx); dr = -r^3/2 * dms
        T dms = T(0);
        for (int64_t j = 0; j < n; ++j) dms += static_cast<T>(xr[j]) * static_cast<T>(txr[j]);
        dms = dms * T(2) / static_cast<T>(n);
        T dr = -T(0.5) * r * r * r * dms;
        for (int64_t j = 0; j < n; ++j) {
            T xv = static_cast<T>(xr[j]);
            T wv = static_cast<T>(w.at(j));
            yr[j] = static_cast<double>(xv * r * wv);
            tyr[j] = static_cast<double>((static_cast<T>(txr[j]) * r + xv * dr) * wv);
        }
    }
}

template <typename T>
void pointwise_kernel(const Tensor& x, const Tensor& tx, Activation k, Tensor& y, Tensor& ty) {
    for (size_t i = 0; i < x.data.size(); ++i) {
        T v = static_cast<T>(x.data[i]);
        T tv = static_cast<T>(tx.data[i]);
        T out, dout;
        switch (k) {
            case Activation::Identity:
                out = v;
                dout = T(1);
                break;
            case Activation::Silu: {
                T s = T(1) / (T(1) + std::exp(-v));
                out = v * s;
                dout = s * (T(1) + v * (T(1) - s));
                break;
            }
            case Activation::GeluTanh: {
                const T c = static_cast<T>(0.7978845608028654);  // sqrt(2/pi)
                const T a = static_cast<T>(0.044715);
                T u = c * (v + a * v * v * v);
                T th = std::tanh(u);
                out = T(0.5) * v * (T(1) + th);
                T du = c * (T(1) + T(3) * a * v * v);
                dout = T(0.5) * (T(1) + th) + T(0.5) * v * (T(1) - th * th) * du;
                break;
            }
        }
        y.data[i] = static_cast<double>(out);
        ty.data[i] = static_cast<double>(dout * tv);
    }
}

}  // namespace

DualTensor dual_softmax_rows(const DualTensor& s) {
    if (s.primal.ndim() != 2) throw std::invalid_argument("dual_softmax_rows: expected 2-D input");
    Tensor p(s.primal.shape, s.primal.prec), tp(s.primal.shape, s.primal.prec);
    if (s.primal.prec == Precision::Single)
        softmax_rows_kernel<float>(s.primal, s.tangent, p, tp);
    else
        softmax_rows_kernel<double>(s.primal, s.tangent, p, tp);
    return DualTensor(std::move(p), std::move(tp));
}

DualTensor dual_rmsnorm(const DualTensor& x, const Tensor& weight, double eps) {
    if (eps < 0) throw std::invalid_argument("dual_rmsnorm: eps must be >= 0");
    if (weight.numel() != x.primal.shape.back())
        throw std::invalid_argument("dual_rmsnorm: weight length " +
                                    std::to_string(weight.numel()) + " != last dim " +
                                    std::to_string(x.primal.shape.back()));
    Tensor y(x.primal.shape, x.primal.prec), ty(x.primal.shape, x.primal.prec);
    if (x.primal.prec == Precision::Single)
        rmsnorm_kernel<float>(x.primal, x.tangent, weight, eps, y, ty);
    else
        rmsnorm_kernel<double>(x.primal, x.tangent, weight, eps, y, ty);
    return DualTensor(std::move(y), std::move(ty));
}

DualTensor dual_pointwise(const DualTensor& x, Activation kind) {
    Tensor y(x.primal.shape, x.primal.prec), ty(x.primal.shape, x.primal.prec);
    if (x.primal.prec == Precision::Single)
        pointwise_kernel<float>(x.primal, x.tangent, kind, y, ty);
    else
        pointwise_kernel<double>(x.primal, x.tangent, kind, y, ty);
    return DualTensor(std::move(y), std::move(ty));
}

DualTensor dual_add(const DualTensor& a, const DualTensor& b) {
    return DualTensor(add(a.primal, b.primal), add(a.tangent, b.tangent));
}

DualTensor dual_sub(const DualTensor& a, const DualTensor& b) {
    return DualTensor(sub(a.primal, b.primal), sub(a.tangent, b.tangent));
}

DualTensor dual_mul(const DualTensor& a, const DualTensor& b) {
    return DualTensor(mul(a.primal, b.primal),
                      add(mul(a.tangent, b.primal), mul(a.primal, b.tangent)));
}

DualTensor dual_scale(const DualTensor& a, double s) {
    return DualTensor(scale(a.primal, s), scale(a.tangent, s));
}

Tensor finite_difference_jvp(const std::function<Tensor(const Tensor&)>& f, const Tensor& x,
                             const Tensor& v, double eps) {
    if (eps <= 0) throw std::invalid_argument("finite_difference_jvp: eps must be > 0");
    Tensor hi = f(axpy(x, eps, v));
    Tensor lo = f(axpy(x, -eps, v));
    return scale(sub(hi, lo), 1.0 / (2.0 * eps));
}

double activation_value(Activation k, double x) {
    Tensor t = make_tensor({1}, {x});
    return dual_pointwise(DualTensor::constant(t), k).primal.at(0);
}

double activation_deriv(Activation k, double x) {
    Tensor t = make_tensor({1}, {x});
    Tensor one = make_tensor({1}, {1.0});
    return dual_pointwise(DualTensor(t, one), k).tangent.at(0);
}

}  // namespace rcm
