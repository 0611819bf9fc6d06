#include "clner/num/ops.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>
#include <string>

namespace clner::num {

namespace {

[[noreturn]] void shape_error(const char* op, const Shape& a, const Shape& b) {
    throw std::invalid_argument(std::string(op) + ": incompatible shapes " + shape_str(a) + " and " + shape_str(b));
}

void require_matrix(const char* op, const Tensor& a) {
    if (a.dim() != 2) throw std::invalid_argument(std::string(op) + ": expected a matrix, got shape " + shape_str(a.shape()));
}

void require_axis(const char* op, int axis) {
    if (axis != 0 && axis != 1) throw std::invalid_argument(std::string(op) + ": axis must be 0 or 1");
}

// Row broadcast: b has a.cols() elements laid out as [c] or [1, c].
bool is_row_of(const Tensor& b, const Tensor& a) {
    if (a.dim() != 2) return false;
    const Shape& s = b.shape();
    return (s.size() == 1 && s[0] == a.cols()) || (s.size() == 2 && s[0] == 1 && s[1] == a.cols());
}

template <class Fwd, class Deriv>
Tensor unary(const Tensor& a, Fwd fwd, Deriv deriv_from_in_out) {
    auto in = a.values();
    std::vector<double> out(in.size());
    for (std::size_t i = 0; i < in.size(); ++i) out[i] = fwd(in[i]);
    if (!a.requires_grad() || !grad_enabled()) return Tensor::make_op(a.shape(), std::move(out), {a}, nullptr);
    std::vector<double> saved = out;
    return Tensor::make_op(a.shape(), std::move(out), {a}, [a, saved = std::move(saved), deriv_from_in_out](std::span<const double> g) mutable {
        auto x = a.values();
        std::vector<double> da(g.size());
        for (std::size_t i = 0; i < g.size(); ++i) da[i] = g[i] * deriv_from_in_out(x[i], saved[i]);
        a.accumulate_grad(da);
    });
}

}  // namespace

Tensor matmul(const Tensor& a, const Tensor& b) {
    if (a.dim() != 2 || b.dim() != 2 || a.cols() != b.rows()) shape_error("matmul", a.shape(), b.shape());
    const std::size_t n = a.rows(), k = a.cols(), m = b.cols();
    std::vector<double> c(n * m, 0.0);
    auto av = a.values();
    auto bv = b.values();
    for (std::size_t i = 0; i < n; ++i) {
        double* crow = &c[i * m];
        for (std::size_t p = 0; p < k; ++p) {
            const double aip = av[i * k + p];
            if (aip == 0.0) continue;
            const double* brow = &bv[p * m];
            for (std::size_t j = 0; j < m; ++j) crow[j] += aip * brow[j];
        }
    }
    return Tensor::make_op({n, m}, std::move(c), {a, b}, [a, b, n, k, m](std::span<const double> g) mutable {
        auto av = a.values();
        auto bv = b.values();
        if (a.requires_grad()) {
            std::vector<double> da(n * k, 0.0);
            for (std::size_t i = 0; i < n; ++i) {
                for (std::size_t p = 0; p < k; ++p) {
                    double s = 0.0;
                    for (std::size_t j = 0; j < m; ++j) s += g[i * m + j] * bv[p * m + j];
                    da[i * k + p] = s;
                }
            }
            a.accumulate_grad(da);
        }
        if (b.requires_grad()) {
            std::vector<double> db(k * m, 0.0);
            for (std::size_t i = 0; i < n; ++i) {
                for (std::size_t p = 0; p < k; ++p) {
                    const double aip = av[i * k + p];
                    if (aip == 0.0) continue;
                    for (std::size_t j = 0; j < m; ++j) db[p * m + j] += aip * g[i * m + j];
                }
            }
            b.accumulate_grad(db);
        }
    });
}

namespace {

Tensor add_scaled(const char* op, const Tensor& a, const Tensor& b, double sb) {
    auto av = a.values();
    auto bv = b.values();
    if (a.shape() == b.shape()) {
        std::vector<double> out(av.size());
        for (std::size_t i = 0; i < av.size(); ++i) out[i] = av[i] + sb * bv[i];
        return Tensor::make_op(a.shape(), std::move(out), {a, b}, [a, b, sb](std::span<const double> g) mutable {
            a.accumulate_grad(g);
            if (b.requires_grad()) {
                std::vector<double> db(g.begin(), g.end());
                if (sb != 1.0) {
                    for (double& x : db) x *= sb;
                }
                b.accumulate_grad(db);
            }
        });
    }
    if (!is_row_of(b, a)) shape_error(op, a.shape(), b.shape());
    const std::size_t r = a.rows(), c = a.cols();
    std::vector<double> out(av.size());
    for (std::size_t i = 0; i < r; ++i) {
        for (std::size_t j = 0; j < c; ++j) out[i * c + j] = av[i * c + j] + sb * bv[j];
    }
    return Tensor::make_op(a.shape(), std::move(out), {a, b}, [a, b, sb, r, c](std::span<const double> g) mutable {
        a.accumulate_grad(g);
        if (b.requires_grad()) {
            std::vector<double> db(c, 0.0);
            for (std::size_t i = 0; i < r; ++i) {
                for (std::size_t j = 0; j < c; ++j) db[j] += sb * g[i * c + j];
            }
            b.accumulate_grad(db);
        }
    });
}

}  // namespace

Tensor add(const Tensor& a, const Tensor& b) { return add_scaled("add", a, b, 1.0); }
Tensor sub(const Tensor& a, const Tensor& b) { return add_scaled("sub", a, b, -1.0); }

Tensor mul(const Tensor& a, const Tensor& b) {
    if (a.shape() != b.shape()) shape_error("mul", a.shape(), b.shape());
    auto av = a.values();
    auto bv = b.values();
    std::vector<double> out(av.size());
    for (std::size_t i = 0; i < av.size(); ++i) out[i] = av[i] * bv[i];
    return Tensor::make_op(a.shape(), std::move(out), {a, b}, [a, b](std::span<const double> g) mutable {
        auto av = a.values();
        auto bv = b.values();
        if (a.requires_grad()) {
            std::vector<double> da(g.size());
            for (std::size_t i = 0; i < g.size(); ++i) da[i] = g[i] * bv[i];
            a.accumulate_grad(da);
        }
        if (b.requires_grad()) {
            std::vector<double> db(g.size());
            for (std::size_t i = 0; i < g.size(); ++i) db[i] = g[i] * av[i];
            b.accumulate_grad(db);
        }
    });
}

Tensor scale(const Tensor& a, double s) {
    return unary(a, [s](double x) { return s * x; }, [s](double, double) { return s; });
}

Tensor sigmoid(const Tensor& a) {
    return unary(
        a,
        [](double x) {
            if (x >= 0) return 1.0 / (1.0 + std::exp(-x));
            const double e = std::exp(x);
            return e / (1.0 + e);
        },
        [](double, double y) { return y * (1.0 - y); });
}

Tensor log(const Tensor& a) {
    return unary(a, [](double x) { return std::log(x); }, [](double x, double) { return 1.0 / x; });
}

Tensor exp(const Tensor& a) {
    return unary(a, [](double x) { return std::exp(x); }, [](double, double y) { return y; });
}

Tensor tanh(const Tensor& a) {
    return unary(a, [](double x) { return std::tanh(x); }, [](double, double y) { return 1.0 - y * y; });
}

namespace {

// Visits each softmax lane (a row for axis 1, a column for axis 0) as a
// strided view: start offset, stride, length.
template <class F>
void for_each_lane(std::size_t r, std::size_t c, int axis, F f) {
    if (axis == 1) {
        for (std::size_t i = 0; i < r; ++i) f(i * c, std::size_t{1}, c);
    } else {
        for (std::size_t j = 0; j < c; ++j) f(j, c, r);
    }
}

}  // namespace

Tensor softmax(const Tensor& a, int axis) {
    require_matrix("softmax", a);
    require_axis("softmax", axis);
    const std::size_t r = a.rows(), c = a.cols();
    auto av = a.values();
    std::vector<double> out(av.size());
    for_each_lane(r, c, axis, [&](std::size_t off, std::size_t stride, std::size_t len) {
        double mx = -INFINITY;
        for (std::size_t t = 0; t < len; ++t) mx = std::max(mx, av[off + t * stride]);
        double z = 0.0;
        for (std::size_t t = 0; t < len; ++t) {
            double e = std::exp(av[off + t * stride] - mx);
            out[off + t * stride] = e;
            z += e;
        }
        for (std::size_t t = 0; t < len; ++t) out[off + t * stride] /= z;
    });
    std::vector<double> y = out;
    return Tensor::make_op(a.shape(), std::move(out), {a}, [a, y = std::move(y), r, c, axis](std::span<const double> g) mutable {
        std::vector<double> da(g.size());
        for_each_lane(r, c, axis, [&](std::size_t off, std::size_t stride, std::size_t len) {
            double dot = 0.0;
            for (std::size_t t = 0; t < len; ++t) dot += g[off + t * stride] * y[off + t * stride];
            for (std::size_t t = 0; t < len; ++t) {
                const std::size_t idx = off + t * stride;
                da[idx] = y[idx] * (g[idx] - dot);
            }
        });
        a.accumulate_grad(da);
    });
}

Tensor log_softmax(const Tensor& a, int axis) {
    require_matrix("log_softmax", a);
    require_axis("log_softmax", axis);
    const std::size_t r = a.rows(), c = a.cols();
    auto av = a.values();
    std::vector<double> out(av.size());
    for_each_lane(r, c, axis, [&](std::size_t off, std::size_t stride, std::size_t len) {
        double mx = -INFINITY;
        for (std::size_t t = 0; t < len; ++t) mx = std::max(mx, av[off + t * stride]);
        double z = 0.0;
        for (std::size_t t = 0; t < len; ++t) z += std::exp(av[off + t * stride] - mx);
        const double lz = mx + std::log(z);
        for (std::size_t t = 0; t < len; ++t) out[off + t * stride] = av[off + t * stride] - lz;
    });
    std::vector<double> y = out;
    return Tensor::make_op(a.shape(), std::move(out), {a}, [a, y = std::move(y), r, c, axis](std::span<const double> g) mutable {
        std::vector<double> da(g.size());
        for_each_lane(r, c, axis, [&](std::size_t off, std::size_t stride, std::size_t len) {
            double gs = 0.0;
            for (std::size_t t = 0; t < len; ++t) gs += g[off + t * stride];
            for (std::size_t t = 0; t < len; ++t) {
                const std::size_t idx = off + t * stride;
                da[idx] = g[idx] - std::exp(y[idx]) * gs;
            }
        });
        a.accumulate_grad(da);
    });
}

Tensor transpose(const Tensor& a) {
    require_matrix("transpose", a);
    const std::size_t r = a.rows(), c = a.cols();
    auto av = a.values();
    std::vector<double> out(av.size());
    for (std::size_t i = 0; i < r; ++i) {
        for (std::size_t j = 0; j < c; ++j) out[j * r + i] = av[i * c + j];
    }
    return Tensor::make_op({c, r}, std::move(out), {a}, [a, r, c](std::span<const double> g) mutable {
        std::vector<double> da(g.size());
        for (std::size_t i = 0; i < r; ++i) {
            for (std::size_t j = 0; j < c; ++j) da[i * c + j] = g[j * r + i];
        }
        a.accumulate_grad(da);
    });
}

Tensor slice(const Tensor& a, int axis, std::size_t begin, std::size_t end) {
    require_matrix("slice", a);
    require_axis("slice", axis);
    const std::size_t r = a.rows(), c = a.cols();
    const std::size_t extent = axis == 0 ? r : c;
    if (begin >= end || end > extent) {
        throw std::invalid_argument("slice: range [" + std::to_string(begin) + ", " + std::to_string(end) +
                                    ") out of bounds for shape " + shape_str(a.shape()));
    }
    const std::size_t orows = axis == 0 ? end - begin : r;
    const std::size_t ocols = axis == 1 ? end - begin : c;
    auto av = a.values();
    std::vector<double> out(orows * ocols);
    for (std::size_t i = 0; i < orows; ++i) {
        for (std::size_t j = 0; j < ocols; ++j) {
            const std::size_t si = axis == 0 ? i + begin : i;
            const std::size_t sj = axis == 1 ? j + begin : j;
            out[i * ocols + j] = av[si * c + sj];
        }
    }
    return Tensor::make_op({orows, ocols}, std::move(out), {a}, [a, axis, begin, orows, ocols, r, c](std::span<const double> g) mutable {
        std::vector<double> da(r * c, 0.0);
        for (std::size_t i = 0; i < orows; ++i) {
            for (std::size_t j = 0; j < ocols; ++j) {
                const std::size_t si = axis == 0 ? i + begin : i;
                const std::size_t sj = axis == 1 ? j + begin : j;
                da[si * c + sj] = g[i * ocols + j];
            }
        }
        a.accumulate_grad(da);
    });
}

Tensor concat(const std::vector<Tensor>& parts, int axis) {
    if (parts.empty()) throw std::invalid_argument("concat: no inputs");
    require_axis("concat", axis);
    for (const auto& p : parts) require_matrix("concat", p);
    const std::size_t r0 = parts[0].rows(), c0 = parts[0].cols();
    std::size_t total = 0;
    for (const auto& p : parts) {
        if ((axis == 0 && p.cols() != c0) || (axis == 1 && p.rows() != r0)) {
            shape_error("concat", parts[0].shape(), p.shape());
        }
        total += axis == 0 ? p.rows() : p.cols();
    }
    const std::size_t orows = axis == 0 ? total : r0;
    const std::size_t ocols = axis == 1 ? total : c0;
    std::vector<double> out(orows * ocols);
    std::size_t offset = 0;
    for (const auto& p : parts) {
        auto pv = p.values();
        const std::size_t pr = p.rows(), pc = p.cols();
        for (std::size_t i = 0; i < pr; ++i) {
            for (std::size_t j = 0; j < pc; ++j) {
                const std::size_t oi = axis == 0 ? i + offset : i;
                const std::size_t oj = axis == 1 ? j + offset : j;
                out[oi * ocols + oj] = pv[i * pc + j];
            }
        }
        offset += axis == 0 ? pr : pc;
    }
    return Tensor::make_op({orows, ocols}, std::move(out), parts, [parts, axis, ocols](std::span<const double> g) mutable {
        std::size_t offset = 0;
        for (auto& p : parts) {
            const std::size_t pr = p.rows(), pc = p.cols();
            if (p.requires_grad()) {
                std::vector<double> dp(pr * pc);
                for (std::size_t i = 0; i < pr; ++i) {
                    for (std::size_t j = 0; j < pc; ++j) {
                        const std::size_t oi = axis == 0 ? i + offset : i;
                        const std::size_t oj = axis == 1 ? j + offset : j;
                        dp[i * pc + j] = g[oi * ocols + oj];
                    }
                }
                p.accumulate_grad(dp);
            }
            offset += axis == 0 ? pr : pc;
        }
    });
}

Tensor sum(const Tensor& a) {
    double s = 0.0;
    for (double x : a.values()) s += x;
    return Tensor::make_op({}, {s}, {a}, [a](std::span<const double> g) mutable {
        std::vector<double> da(a.size(), g[0]);
        a.accumulate_grad(da);
    });
}

Tensor sum(const Tensor& a, int axis) {
    require_matrix("sum", a);
    require_axis("sum", axis);
    const std::size_t r = a.rows(), c = a.cols();
    auto av = a.values();
    Shape os = axis == 0 ? Shape{1, c} : Shape{r, 1};
    std::vector<double> out(axis == 0 ? c : r, 0.0);
    for (std::size_t i = 0; i < r; ++i) {
        for (std::size_t j = 0; j < c; ++j) out[axis == 0 ? j : i] += av[i * c + j];
    }
    return Tensor::make_op(os, std::move(out), {a}, [a, r, c, axis](std::span<const double> g) mutable {
        std::vector<double> da(r * c);
        for (std::size_t i = 0; i < r; ++i) {
            for (std::size_t j = 0; j < c; ++j) da[i * c + j] = g[axis == 0 ? j : i];
        }
        a.accumulate_grad(da);
    });
}

Tensor mean(const Tensor& a) {
    if (a.size() == 0) throw std::invalid_argument("mean: empty tensor");
    return scale(sum(a), 1.0 / static_cast<double>(a.size()));
}

Tensor dropout(const Tensor& a, double rate, bool train, Rng& rng) {
    if (rate < 0.0 || rate >= 1.0) throw std::invalid_argument("dropout: rate must lie in [0, 1)");
    if (!train || rate == 0.0) return a;
    const double keep_scale = 1.0 / (1.0 - rate);
    std::vector<double> mask(a.size());
    for (double& m : mask) m = rng.uniform() < rate ? 0.0 : keep_scale;
    return mul(a, Tensor::from(a.shape(), std::move(mask)));
}

Tensor embedding(const Tensor& table, std::span<const std::size_t> ids) {
    require_matrix("embedding", table);
    const std::size_t v = table.rows(), d = table.cols();
    auto tv = table.values();
    std::vector<double> out(ids.size() * d);
    for (std::size_t t = 0; t < ids.size(); ++t) {
        if (ids[t] >= v) {
            throw std::invalid_argument("embedding: id " + std::to_string(ids[t]) + " out of range for table " +
                                        shape_str(table.shape()));
        }
        std::copy_n(tv.begin() + static_cast<std::ptrdiff_t>(ids[t] * d), d, out.begin() + static_cast<std::ptrdiff_t>(t * d));
    }
    std::vector<std::size_t> saved(ids.begin(), ids.end());
    return Tensor::make_op({ids.size(), d}, std::move(out), {table}, [table, saved = std::move(saved), d](std::span<const double> g) mutable {
        auto dst = table.mutable_grad();
        for (std::size_t t = 0; t < saved.size(); ++t) {
            for (std::size_t j = 0; j < d; ++j) dst[saved[t] * d + j] += g[t * d + j];
        }
    });
}

Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps) {
    require_matrix("layer_norm", x);
    if (!is_row_of(gamma, x)) shape_error("layer_norm", x.shape(), gamma.shape());
    if (!is_row_of(beta, x)) shape_error("layer_norm", x.shape(), beta.shape());
    const std::size_t r = x.rows(), c = x.cols();
    auto xv = x.values();
    auto gv = gamma.values();
    auto bv = beta.values();
    std::vector<double> xhat(r * c), inv_std(r), out(r * c);
    for (std::size_t i = 0; i < r; ++i) {
        double mu = 0.0;
        for (std::size_t j = 0; j < c; ++j) mu += xv[i * c + j];
        mu /= static_cast<double>(c);
        double var = 0.0;
        for (std::size_t j = 0; j < c; ++j) {
            const double d = xv[i * c + j] - mu;
            var += d * d;
        }
        var /= static_cast<double>(c);
        inv_std[i] = 1.0 / std::sqrt(var + eps);
        for (std::size_t j = 0; j < c; ++j) {
            xhat[i * c + j] = (xv[i * c + j] - mu) * inv_std[i];
            out[i * c + j] = xhat[i * c + j] * gv[j] + bv[j];
        }
    }
    return Tensor::make_op(x.shape(), std::move(out), {x, gamma, beta},
                           [x, gamma, beta, xhat = std::move(xhat), inv_std = std::move(inv_std), r, c](std::span<const double> g) mutable {
        auto gv = gamma.values();
        if (gamma.requires_grad() || beta.requires_grad()) {
            std::vector<double> dg(c, 0.0), db(c, 0.0);
            for (std::size_t i = 0; i < r; ++i) {
                for (std::size_t j = 0; j < c; ++j) {
                    dg[j] += g[i * c + j] * xhat[i * c + j];
                    db[j] += g[i * c + j];
                }
            }
            gamma.accumulate_grad(dg);
            beta.accumulate_grad(db);
        }
        if (x.requires_grad()) {
            std::vector<double> dx(r * c);
            const double inv_c = 1.0 / static_cast<double>(c);
            for (std::size_t i = 0; i < r; ++i) {
                double s1 = 0.0, s2 = 0.0;
                for (std::size_t j = 0; j < c; ++j) {
                    const double dxh = g[i * c + j] * gv[j];
                    s1 += dxh;
                    s2 += dxh * xhat[i * c + j];
                }
                for (std::size_t j = 0; j < c; ++j) {
                    const double dxh = g[i * c + j] * gv[j];
                    dx[i * c + j] = inv_std[i] * (dxh - inv_c * s1 - xhat[i * c + j] * inv_c * s2);
                }
            }
            x.accumulate_grad(dx);
        }
    });
}

Tensor pick(const Tensor& a, std::span<const std::size_t> index) {
    require_matrix("pick", a);
    const std::size_t r = a.rows(), c = a.cols();
    if (index.size() != r) {
        throw std::invalid_argument("pick: " + std::to_string(index.size()) + " indices for shape " + shape_str(a.shape()));
    }
    auto av = a.values();
    std::vector<double> out(r);
    for (std::size_t i = 0; i < r; ++i) {
        if (index[i] >= c) throw std::invalid_argument("pick: column " + std::to_string(index[i]) + " out of range for shape " + shape_str(a.shape()));
        out[i] = av[i * c + index[i]];
    }
    std::vector<std::size_t> saved(index.begin(), index.end());
    return Tensor::make_op({r}, std::move(out), {a}, [a, saved = std::move(saved), r, c](std::span<const double> g) mutable {
        std::vector<double> da(r * c, 0.0);
        for (std::size_t i = 0; i < r; ++i) da[i * c + saved[i]] = g[i];
        a.accumulate_grad(da);
    });
}

}  // namespace clner::num
