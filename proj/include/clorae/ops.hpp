// SPDX-License-Identifier: Apache-2.0
//
// Differentiable operations over clorae::Tensor. Each op computes its forward
// value eagerly and registers a backward closure that accumulates into the
// gradients of inputs that require one. Dense products go through Eigen.

#pragma once

#include <Eigen/Core>

#include <cmath>
#include <cstdint>
#include <limits>
#include <span>
#include <vector>

#include "clorae/errors.hpp"
#include "clorae/random.hpp"
#include "clorae/tensor.hpp"

namespace clorae {

namespace detail {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using ConstMap = Eigen::Map<const RowMat>;
using MutMap = Eigen::Map<RowMat>;
using ConstStrided = Eigen::Map<const RowMat, 0, Eigen::OuterStride<>>;
using MutStrided = Eigen::Map<RowMat, 0, Eigen::OuterStride<>>;

inline ConstMap cmap(const Node& n) { return ConstMap(n.value.data(), n.rows, n.cols); }
inline ConstMap cmap(const Tensor& t) { return ConstMap(t.data(), t.rows(), t.cols()); }
inline ConstMap gmap(const Node& n) { return ConstMap(n.grad.data(), n.rows, n.cols); }
inline MutMap gmut(Node& n) { return MutMap(n.grad_data(), n.rows, n.cols); }

inline void check_same_shape(const Tensor& a, const Tensor& b, const char* op) {
    require(a.rows() == b.rows() && a.cols() == b.cols(), ErrorCategory::dimension,
            std::string(op) + ": shape mismatch " + a.shape_str() + " vs " + b.shape_str());
}

template <class F>
std::vector<double> map_values(const Tensor& a, F f) {
    std::vector<double> out(a.size());
    const double* x = a.data();
    for (std::size_t i = 0; i < out.size(); ++i) {
        out[i] = f(x[i]);
    }
    return out;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Products

inline Tensor matmul(const Tensor& a, const Tensor& b) {
    require(a.cols() == b.rows(), ErrorCategory::dimension,
            "matmul: inner dimensions differ, " + a.shape_str() + " x " + b.shape_str());
    const std::size_t m = a.rows();
    const std::size_t n = b.cols();
    std::vector<double> out(m * n);
    detail::MutMap(out.data(), m, n).noalias() = detail::cmap(a) * detail::cmap(b);
    return detail::make_result(m, n, std::move(out), {a.node(), b.node()}, [](detail::Node& self) {
        auto& pa = *self.parents[0];
        auto& pb = *self.parents[1];
        const auto g = detail::gmap(self);
        if (pa.requires_grad) {
            detail::gmut(pa).noalias() += g * detail::cmap(pb).transpose();
        }
        if (pb.requires_grad) {
            detail::gmut(pb).noalias() += detail::cmap(pa).transpose() * g;
        }
    });
}

// a · bᵀ, the shape of a linear layer applied to row vectors.
inline Tensor matmul_nt(const Tensor& a, const Tensor& b) {
    require(a.cols() == b.cols(), ErrorCategory::dimension,
            "matmul_nt: inner dimensions differ, " + a.shape_str() + " x " + b.shape_str() + "^T");
    const std::size_t m = a.rows();
    const std::size_t n = b.rows();
    std::vector<double> out(m * n);
    detail::MutMap(out.data(), m, n).noalias() = detail::cmap(a) * detail::cmap(b).transpose();
    return detail::make_result(m, n, std::move(out), {a.node(), b.node()}, [](detail::Node& self) {
        auto& pa = *self.parents[0];
        auto& pb = *self.parents[1];
        const auto g = detail::gmap(self);
        if (pa.requires_grad) {
            detail::gmut(pa).noalias() += g * detail::cmap(pb);
        }
        if (pb.requires_grad) {
            detail::gmut(pb).noalias() += g.transpose() * detail::cmap(pa);
        }
    });
}

// ---------------------------------------------------------------------------
// Elementwise and broadcasting arithmetic

inline Tensor add(const Tensor& a, const Tensor& b) {
    detail::check_same_shape(a, b, "add");
    std::vector<double> out(a.size());
    for (std::size_t i = 0; i < out.size(); ++i) {
        out[i] = a.data()[i] + b.data()[i];
    }
    return detail::make_result(a.rows(), a.cols(), std::move(out), {a.node(), b.node()}, [](detail::Node& self) {
        for (auto& p : self.parents) {
            if (p->requires_grad) {
                detail::gmut(*p) += detail::gmap(self);
            }
        }
    });
}

inline Tensor sub(const Tensor& a, const Tensor& b) {
    detail::check_same_shape(a, b, "sub");
    std::vector<double> out(a.size());
    for (std::size_t i = 0; i < out.size(); ++i) {
        out[i] = a.data()[i] - b.data()[i];
    }
    return detail::make_result(a.rows(), a.cols(), std::move(out), {a.node(), b.node()}, [](detail::Node& self) {
        if (self.parents[0]->requires_grad) {
            detail::gmut(*self.parents[0]) += detail::gmap(self);
        }
        if (self.parents[1]->requires_grad) {
            detail::gmut(*self.parents[1]) -= detail::gmap(self);
        }
    });
}

inline Tensor mul(const Tensor& a, const Tensor& b) {
    detail::check_same_shape(a, b, "mul");
    std::vector<double> out(a.size());
    for (std::size_t i = 0; i < out.size(); ++i) {
        out[i] = a.data()[i] * b.data()[i];
    }
    return detail::make_result(a.rows(), a.cols(), std::move(out), {a.node(), b.node()}, [](detail::Node& self) {
        auto& pa = *self.parents[0];
        auto& pb = *self.parents[1];
        const std::size_t n = self.value.size();
        if (pa.requires_grad) {
            double* ga = pa.grad_data();
            for (std::size_t i = 0; i < n; ++i) {
                ga[i] += self.grad[i] * pb.value[i];
            }
        }
        if (pb.requires_grad) {
            double* gb = pb.grad_data();
            for (std::size_t i = 0; i < n; ++i) {
                gb[i] += self.grad[i] * pa.value[i];
            }
        }
    });
}

inline Tensor scale(const Tensor& a, double s) {
    auto out = detail::map_values(a, [s](double x) { return x * s; });
    return detail::make_result(a.rows(), a.cols(), std::move(out), {a.node()}, [s](detail::Node& self) {
        detail::gmut(*self.parents[0]) += s * detail::gmap(self);
    });
}

// a + r with r a [1 x cols] row broadcast over every row of a.
inline Tensor add_row(const Tensor& a, const Tensor& r) {
    require(r.rows() == 1 && r.cols() == a.cols(), ErrorCategory::dimension,
            "add_row: " + a.shape_str() + " + " + r.shape_str());
    std::vector<double> out(a.size());
    const std::size_t c = a.cols();
    for (std::size_t i = 0; i < a.rows(); ++i) {
        for (std::size_t j = 0; j < c; ++j) {
            out[i * c + j] = a.data()[i * c + j] + r.data()[j];
        }
    }
    return detail::make_result(a.rows(), c, std::move(out), {a.node(), r.node()}, [](detail::Node& self) {
        auto& pa = *self.parents[0];
        auto& pr = *self.parents[1];
        const auto g = detail::gmap(self);
        if (pa.requires_grad) {
            detail::gmut(pa) += g;
        }
        if (pr.requires_grad) {
            detail::gmut(pr) += g.colwise().sum();
        }
    });
}

// a ⊙ r with r a [1 x cols] row broadcast over rows.
inline Tensor mul_row(const Tensor& a, const Tensor& r) {
    require(r.rows() == 1 && r.cols() == a.cols(), ErrorCategory::dimension,
            "mul_row: " + a.shape_str() + " * " + r.shape_str());
    std::vector<double> out(a.size());
    const std::size_t c = a.cols();
    for (std::size_t i = 0; i < a.rows(); ++i) {
        for (std::size_t j = 0; j < c; ++j) {
            out[i * c + j] = a.data()[i * c + j] * r.data()[j];
        }
    }
    return detail::make_result(a.rows(), c, std::move(out), {a.node(), r.node()}, [](detail::Node& self) {
        auto& pa = *self.parents[0];
        auto& pr = *self.parents[1];
        const std::size_t rows = self.rows;
        const std::size_t cols = self.cols;
        if (pa.requires_grad) {
            double* ga = pa.grad_data();
            for (std::size_t i = 0; i < rows; ++i) {
                for (std::size_t j = 0; j < cols; ++j) {
                    ga[i * cols + j] += self.grad[i * cols + j] * pr.value[j];
                }
            }
        }
        if (pr.requires_grad) {
            double* gr = pr.grad_data();
            for (std::size_t i = 0; i < rows; ++i) {
                for (std::size_t j = 0; j < cols; ++j) {
                    gr[j] += self.grad[i * cols + j] * pa.value[i * cols + j];
                }
            }
        }
    });
}

// a ⊙ c with c a [rows x 1] column broadcast over columns.
inline Tensor mul_col(const Tensor& a, const Tensor& c) {
    require(c.cols() == 1 && c.rows() == a.rows(), ErrorCategory::dimension,
            "mul_col: " + a.shape_str() + " * " + c.shape_str());
    std::vector<double> out(a.size());
    const std::size_t cols = a.cols();
    for (std::size_t i = 0; i < a.rows(); ++i) {
        const double s = c.data()[i];
        for (std::size_t j = 0; j < cols; ++j) {
            out[i * cols + j] = a.data()[i * cols + j] * s;
        }
    }
    return detail::make_result(a.rows(), cols, std::move(out), {a.node(), c.node()}, [](detail::Node& self) {
        auto& pa = *self.parents[0];
        auto& pc = *self.parents[1];
        const std::size_t rows = self.rows;
        const std::size_t cols = self.cols;
        if (pa.requires_grad) {
            double* ga = pa.grad_data();
            for (std::size_t i = 0; i < rows; ++i) {
                const double s = pc.value[i];
                for (std::size_t j = 0; j < cols; ++j) {
                    ga[i * cols + j] += self.grad[i * cols + j] * s;
                }
            }
        }
        if (pc.requires_grad) {
            double* gc = pc.grad_data();
            for (std::size_t i = 0; i < rows; ++i) {
                double acc = 0.0;
                for (std::size_t j = 0; j < cols; ++j) {
                    acc += self.grad[i * cols + j] * pa.value[i * cols + j];
                }
                gc[i] += acc;
            }
        }
    });
}

// ---------------------------------------------------------------------------
// Reductions

inline Tensor sum(const Tensor& a) {
    double s = 0.0;
    for (double v : a.values()) {
        s += v;
    }
    return detail::make_result(1, 1, {s}, {a.node()}, [](detail::Node& self) {
        auto& p = *self.parents[0];
        const double g = self.grad[0];
        double* gp = p.grad_data();
        for (std::size_t i = 0; i < p.value.size(); ++i) {
            gp[i] += g;
        }
    });
}

inline Tensor mean(const Tensor& a) { return scale(sum(a), 1.0 / static_cast<double>(a.size())); }

// ---------------------------------------------------------------------------
// Pointwise nonlinearities

inline Tensor relu(const Tensor& a) {
    auto out = detail::map_values(a, [](double x) { return x > 0.0 ? x : 0.0; });
    return detail::make_result(a.rows(), a.cols(), std::move(out), {a.node()}, [](detail::Node& self) {
        auto& p = *self.parents[0];
        double* gp = p.grad_data();
        for (std::size_t i = 0; i < p.value.size(); ++i) {
            if (p.value[i] > 0.0) {
                gp[i] += self.grad[i];
            }
        }
    });
}

inline Tensor square(const Tensor& a) {
    auto out = detail::map_values(a, [](double x) { return x * x; });
    return detail::make_result(a.rows(), a.cols(), std::move(out), {a.node()}, [](detail::Node& self) {
        auto& p = *self.parents[0];
        double* gp = p.grad_data();
        for (std::size_t i = 0; i < p.value.size(); ++i) {
            gp[i] += 2.0 * p.value[i] * self.grad[i];
        }
    });
}

inline Tensor log(const Tensor& a) {
    auto out = detail::map_values(a, [](double x) { return std::log(x); });
    return detail::make_result(a.rows(), a.cols(), std::move(out), {a.node()}, [](detail::Node& self) {
        auto& p = *self.parents[0];
        double* gp = p.grad_data();
        for (std::size_t i = 0; i < p.value.size(); ++i) {
            gp[i] += self.grad[i] / p.value[i];
        }
    });
}

inline Tensor exp(const Tensor& a) {
    auto out = detail::map_values(a, [](double x) { return std::exp(x); });
    return detail::make_result(a.rows(), a.cols(), std::move(out), {a.node()}, [](detail::Node& self) {
        auto& p = *self.parents[0];
        double* gp = p.grad_data();
        for (std::size_t i = 0; i < p.value.size(); ++i) {
            gp[i] += self.grad[i] * self.value[i];
        }
    });
}

inline Tensor reciprocal(const Tensor& a) {
    auto out = detail::map_values(a, [](double x) { return 1.0 / x; });
    return detail::make_result(a.rows(), a.cols(), std::move(out), {a.node()}, [](detail::Node& self) {
        auto& p = *self.parents[0];
        double* gp = p.grad_data();
        for (std::size_t i = 0; i < p.value.size(); ++i) {
            gp[i] -= self.grad[i] * self.value[i] * self.value[i];
        }
    });
}

[[nodiscard]] inline double softplus_value(double x) {
    return x > 0.0 ? x + std::log1p(std::exp(-x)) : std::log1p(std::exp(x));
}

[[nodiscard]] inline double sigmoid_value(double x) {
    if (x >= 0.0) {
        return 1.0 / (1.0 + std::exp(-x));
    }
    const double e = std::exp(x);
    return e / (1.0 + e);
}

inline Tensor softplus(const Tensor& a) {
    auto out = detail::map_values(a, softplus_value);
    return detail::make_result(a.rows(), a.cols(), std::move(out), {a.node()}, [](detail::Node& self) {
        auto& p = *self.parents[0];
        double* gp = p.grad_data();
        for (std::size_t i = 0; i < p.value.size(); ++i) {
            gp[i] += self.grad[i] * sigmoid_value(p.value[i]);
        }
    });
}

// ---------------------------------------------------------------------------
// Softmax family

// Softmax along axis 1 (each row) or axis 0 (each column), max-subtracted.
inline Tensor softmax(const Tensor& a, int axis = 1) {
    require(axis == 0 || axis == 1, ErrorCategory::contract, "softmax: axis must be 0 or 1");
    const std::size_t rows = a.rows();
    const std::size_t cols = a.cols();
    // Walk "lines" along the reduced axis: stride between elements and between lines.
    const std::size_t lines = axis == 1 ? rows : cols;
    const std::size_t len = axis == 1 ? cols : rows;
    const std::size_t elem_stride = axis == 1 ? 1 : cols;
    const std::size_t line_stride = axis == 1 ? cols : 1;
    std::vector<double> out(a.size());
    for (std::size_t l = 0; l < lines; ++l) {
        const double* x = a.data() + l * line_stride;
        double* y = out.data() + l * line_stride;
        double mx = -std::numeric_limits<double>::infinity();
        for (std::size_t k = 0; k < len; ++k) {
            mx = std::max(mx, x[k * elem_stride]);
        }
        double z = 0.0;
        for (std::size_t k = 0; k < len; ++k) {
            y[k * elem_stride] = std::exp(x[k * elem_stride] - mx);
            z += y[k * elem_stride];
        }
        for (std::size_t k = 0; k < len; ++k) {
            y[k * elem_stride] /= z;
        }
    }
    return detail::make_result(rows, cols, std::move(out), {a.node()},
                               [lines, len, elem_stride, line_stride](detail::Node& self) {
                                   auto& p = *self.parents[0];
                                   double* gp = p.grad_data();
                                   for (std::size_t l = 0; l < lines; ++l) {
                                       const std::size_t base = l * line_stride;
                                       double dot = 0.0;
                                       for (std::size_t k = 0; k < len; ++k) {
                                           const std::size_t i = base + k * elem_stride;
                                           dot += self.grad[i] * self.value[i];
                                       }
                                       for (std::size_t k = 0; k < len; ++k) {
                                           const std::size_t i = base + k * elem_stride;
                                           gp[i] += self.value[i] * (self.grad[i] - dot);
                                       }
                                   }
                               });
}

// Mean negative log-likelihood of `targets` under row-wise softmax(logits).
// Positions equal to ignore_index are skipped; with nothing left the loss is
// 0 and no gradient flows.
inline Tensor cross_entropy(const Tensor& logits, std::span<const std::int64_t> targets,
                            std::int64_t ignore_index = -1) {
    const std::size_t n = logits.rows();
    const std::size_t v = logits.cols();
    require(targets.size() == n, ErrorCategory::dimension,
            "cross_entropy: " + std::to_string(targets.size()) + " targets for logits " + logits.shape_str());
    std::vector<double> probs(n * v);
    std::vector<std::int64_t> tgt(targets.begin(), targets.end());
    double total = 0.0;
    std::size_t count = 0;
    for (std::size_t i = 0; i < n; ++i) {
        const double* x = logits.data() + i * v;
        double* p = probs.data() + i * v;
        double mx = -std::numeric_limits<double>::infinity();
        for (std::size_t k = 0; k < v; ++k) {
            mx = std::max(mx, x[k]);
        }
        double z = 0.0;
        for (std::size_t k = 0; k < v; ++k) {
            p[k] = std::exp(x[k] - mx);
            z += p[k];
        }
        for (std::size_t k = 0; k < v; ++k) {
            p[k] /= z;
        }
        if (tgt[i] == ignore_index) {
            continue;
        }
        require(tgt[i] >= 0 && static_cast<std::size_t>(tgt[i]) < v, ErrorCategory::contract,
                "cross_entropy: target id " + std::to_string(tgt[i]) + " outside vocabulary of " +
                    std::to_string(v));
        total += -(x[tgt[i]] - mx - std::log(z));
        ++count;
    }
    if (count == 0) {
        return Tensor::scalar(0.0);
    }
    const double inv = 1.0 / static_cast<double>(count);
    return detail::make_result(1, 1, {total * inv}, {logits.node()},
                               [probs = std::move(probs), tgt = std::move(tgt), inv, ignore_index, v](detail::Node& self) {
                                   auto& p = *self.parents[0];
                                   double* gp = p.grad_data();
                                   const double g = self.grad[0] * inv;
                                   for (std::size_t i = 0; i < tgt.size(); ++i) {
                                       if (tgt[i] == ignore_index) {
                                           continue;
                                       }
                                       for (std::size_t k = 0; k < v; ++k) {
                                           gp[i * v + k] += g * probs[i * v + k];
                                       }
                                       gp[i * v + static_cast<std::size_t>(tgt[i])] -= g;
                                   }
                               });
}

// ---------------------------------------------------------------------------
// Normalization

// Per-row standardization without affine parameters.
inline Tensor layer_norm(const Tensor& a, double eps = 1e-5) {
    const std::size_t rows = a.rows();
    const std::size_t cols = a.cols();
    std::vector<double> out(a.size());
    std::vector<double> inv_std(rows);
    for (std::size_t i = 0; i < rows; ++i) {
        const double* x = a.data() + i * cols;
        double mu = 0.0;
        for (std::size_t j = 0; j < cols; ++j) {
            mu += x[j];
        }
        mu /= static_cast<double>(cols);
        double var = 0.0;
        for (std::size_t j = 0; j < cols; ++j) {
            var += (x[j] - mu) * (x[j] - mu);
        }
        var /= static_cast<double>(cols);
        inv_std[i] = 1.0 / std::sqrt(var + eps);
        for (std::size_t j = 0; j < cols; ++j) {
            out[i * cols + j] = (x[j] - mu) * inv_std[i];
        }
    }
    return detail::make_result(rows, cols, std::move(out), {a.node()}, [inv_std = std::move(inv_std)](detail::Node& self) {
        auto& p = *self.parents[0];
        double* gp = p.grad_data();
        const std::size_t cols = self.cols;
        const double n = static_cast<double>(cols);
        for (std::size_t i = 0; i < self.rows; ++i) {
            const double* y = self.value.data() + i * cols;
            const double* g = self.grad.data() + i * cols;
            double mean_g = 0.0;
            double mean_gy = 0.0;
            for (std::size_t j = 0; j < cols; ++j) {
                mean_g += g[j];
                mean_gy += g[j] * y[j];
            }
            mean_g /= n;
            mean_gy /= n;
            for (std::size_t j = 0; j < cols; ++j) {
                gp[i * cols + j] += inv_std[i] * (g[j] - mean_g - y[j] * mean_gy);
            }
        }
    });
}

// ---------------------------------------------------------------------------
// Indexing and layout

// Rows of `table` selected by `ids`.
inline Tensor embedding(const Tensor& table, std::span<const std::int64_t> ids) {
    const std::size_t d = table.cols();
    require(!ids.empty(), ErrorCategory::dimension, "embedding: empty id list");
    std::vector<double> out(ids.size() * d);
    std::vector<std::int64_t> idx(ids.begin(), ids.end());
    for (std::size_t i = 0; i < idx.size(); ++i) {
        require(idx[i] >= 0 && static_cast<std::size_t>(idx[i]) < table.rows(), ErrorCategory::contract,
                "embedding: id " + std::to_string(idx[i]) + " outside table of " + std::to_string(table.rows()) +
                    " rows");
        std::copy_n(table.data() + idx[i] * d, d, out.data() + i * d);
    }
    return detail::make_result(ids.size(), d, std::move(out), {table.node()}, [idx = std::move(idx)](detail::Node& self) {
        auto& p = *self.parents[0];
        double* gp = p.grad_data();
        const std::size_t d = self.cols;
        for (std::size_t i = 0; i < idx.size(); ++i) {
            double* dst = gp + idx[i] * d;
            const double* src = self.grad.data() + i * d;
            for (std::size_t j = 0; j < d; ++j) {
                dst[j] += src[j];
            }
        }
    });
}

inline Tensor concat_rows(const std::vector<Tensor>& parts) {
    require(!parts.empty(), ErrorCategory::dimension, "concat_rows: nothing to concatenate");
    const std::size_t cols = parts.front().cols();
    std::size_t rows = 0;
    std::vector<std::shared_ptr<detail::Node>> inputs;
    for (const auto& t : parts) {
        require(t.cols() == cols, ErrorCategory::dimension,
                "concat_rows: column mismatch " + parts.front().shape_str() + " vs " + t.shape_str());
        rows += t.rows();
        inputs.push_back(t.node());
    }
    std::vector<double> out;
    out.reserve(rows * cols);
    for (const auto& t : parts) {
        out.insert(out.end(), t.values().begin(), t.values().end());
    }
    return detail::make_result(rows, cols, std::move(out), std::move(inputs), [](detail::Node& self) {
        std::size_t offset = 0;
        for (auto& p : self.parents) {
            const std::size_t n = p->value.size();
            if (p->requires_grad) {
                double* gp = p->grad_data();
                for (std::size_t i = 0; i < n; ++i) {
                    gp[i] += self.grad[offset + i];
                }
            }
            offset += n;
        }
    });
}

// Rows [begin, begin + count).
inline Tensor slice_rows(const Tensor& a, std::size_t begin, std::size_t count) {
    require(count > 0 && begin + count <= a.rows(), ErrorCategory::dimension,
            "slice_rows: [" + std::to_string(begin) + ", " + std::to_string(begin + count) + ") of " + a.shape_str());
    const std::size_t cols = a.cols();
    std::vector<double> out(a.data() + begin * cols, a.data() + (begin + count) * cols);
    return detail::make_result(count, cols, std::move(out), {a.node()}, [begin](detail::Node& self) {
        auto& p = *self.parents[0];
        double* gp = p.grad_data() + begin * self.cols;
        for (std::size_t i = 0; i < self.value.size(); ++i) {
            gp[i] += self.grad[i];
        }
    });
}

// Arbitrary row gather; rows may repeat.
inline Tensor gather_rows(const Tensor& a, std::span<const std::size_t> rows) {
    const std::size_t cols = a.cols();
    std::vector<double> out(rows.size() * cols);
    std::vector<std::size_t> idx(rows.begin(), rows.end());
    for (std::size_t i = 0; i < idx.size(); ++i) {
        require(idx[i] < a.rows(), ErrorCategory::dimension, "gather_rows: row out of range");
        std::copy_n(a.data() + idx[i] * cols, cols, out.data() + i * cols);
    }
    return detail::make_result(rows.size(), cols, std::move(out), {a.node()}, [idx = std::move(idx)](detail::Node& self) {
        auto& p = *self.parents[0];
        double* gp = p.grad_data();
        const std::size_t cols = self.cols;
        for (std::size_t i = 0; i < idx.size(); ++i) {
            for (std::size_t j = 0; j < cols; ++j) {
                gp[idx[i] * cols + j] += self.grad[i * cols + j];
            }
        }
    });
}

inline Tensor column(const Tensor& a, std::size_t j) {
    require(j < a.cols(), ErrorCategory::dimension, "column: index out of range for " + a.shape_str());
    const std::size_t cols = a.cols();
    std::vector<double> out(a.rows());
    for (std::size_t i = 0; i < a.rows(); ++i) {
        out[i] = a.data()[i * cols + j];
    }
    return detail::make_result(a.rows(), 1, std::move(out), {a.node()}, [j](detail::Node& self) {
        auto& p = *self.parents[0];
        double* gp = p.grad_data();
        const std::size_t cols = p.cols;
        for (std::size_t i = 0; i < self.rows; ++i) {
            gp[i * cols + j] += self.grad[i];
        }
    });
}

// Constant copy; gradients stop here.
inline Tensor detach(const Tensor& a) { return a.clone(); }

// Inverted dropout. Identity when not training or p == 0; otherwise draws
// one Bernoulli keep-mask element per entry from `rng`.
inline Tensor dropout(const Tensor& a, double p, Rng& rng, bool training) {
    require(p >= 0.0 && p < 1.0, ErrorCategory::config, "dropout probability must lie in [0, 1)");
    if (!training || p == 0.0) {
        return a;
    }
    const double keep_scale = 1.0 / (1.0 - p);
    std::vector<double> mask(a.size());
    for (auto& m : mask) {
        m = rng.bernoulli(p) ? 0.0 : keep_scale;
    }
    return mul(a, Tensor(a.rows(), a.cols(), std::move(mask)));
}

// ---------------------------------------------------------------------------
// Attention

// Multi-head scaled dot-product attention over `batch` independent sequences.
// q is [batch*tq x d]; k and v are [batch*tk x d]; rows of each sequence are
// contiguous. With `causal`, query i of a sequence sees keys j <= i + (tk - tq)
// so that a suffix of queries can attend over a longer cached prefix.
inline Tensor attention(const Tensor& q, const Tensor& k, const Tensor& v, std::size_t batch, std::size_t heads,
                        bool causal) {
    const std::size_t d = q.cols();
    require(k.cols() == d && v.cols() == d, ErrorCategory::dimension,
            "attention: width mismatch " + q.shape_str() + " " + k.shape_str() + " " + v.shape_str());
    require(heads > 0 && d % heads == 0, ErrorCategory::dimension, "attention: width not divisible by heads");
    require(batch > 0 && q.rows() % batch == 0 && k.rows() % batch == 0 && k.rows() == v.rows(),
            ErrorCategory::dimension, "attention: rows not divisible by batch");
    const std::size_t tq = q.rows() / batch;
    const std::size_t tk = k.rows() / batch;
    require(!causal || tk >= tq, ErrorCategory::dimension, "attention: causal needs tk >= tq");
    const std::size_t dh = d / heads;
    const double scl = 1.0 / std::sqrt(static_cast<double>(dh));
    const std::size_t offset = tk - tq;

    std::vector<double> probs(batch * heads * tq * tk);
    std::vector<double> out(q.rows() * d);
    for (std::size_t b = 0; b < batch; ++b) {
        for (std::size_t h = 0; h < heads; ++h) {
            detail::ConstStrided qm(q.data() + b * tq * d + h * dh, tq, dh, Eigen::OuterStride<>(d));
            detail::ConstStrided km(k.data() + b * tk * d + h * dh, tk, dh, Eigen::OuterStride<>(d));
            detail::ConstStrided vm(v.data() + b * tk * d + h * dh, tk, dh, Eigen::OuterStride<>(d));
            detail::MutMap pm(probs.data() + (b * heads + h) * tq * tk, tq, tk);
            pm.noalias() = scl * (qm * km.transpose());
            for (std::size_t i = 0; i < tq; ++i) {
                const std::size_t visible = causal ? i + offset + 1 : tk;
                double mx = -std::numeric_limits<double>::infinity();
                for (std::size_t j = 0; j < visible; ++j) {
                    mx = std::max(mx, pm(i, j));
                }
                double z = 0.0;
                for (std::size_t j = 0; j < visible; ++j) {
                    pm(i, j) = std::exp(pm(i, j) - mx);
                    z += pm(i, j);
                }
                for (std::size_t j = 0; j < visible; ++j) {
                    pm(i, j) /= z;
                }
                for (std::size_t j = visible; j < tk; ++j) {
                    pm(i, j) = 0.0;
                }
            }
            detail::MutStrided om(out.data() + b * tq * d + h * dh, tq, dh, Eigen::OuterStride<>(d));
            om.noalias() = pm * vm;
        }
    }
    return detail::make_result(
        q.rows(), d, std::move(out), {q.node(), k.node(), v.node()},
        [probs = std::move(probs), batch, heads, tq, tk, dh, d, scl](detail::Node& self) {
            auto& pq = *self.parents[0];
            auto& pk = *self.parents[1];
            auto& pv = *self.parents[2];
            double* gq = pq.requires_grad ? pq.grad_data() : nullptr;
            double* gk = pk.requires_grad ? pk.grad_data() : nullptr;
            double* gv = pv.requires_grad ? pv.grad_data() : nullptr;
            detail::RowMat dp(tq, tk);
            for (std::size_t b = 0; b < batch; ++b) {
                for (std::size_t h = 0; h < heads; ++h) {
                    detail::ConstMap pm(probs.data() + (b * heads + h) * tq * tk, tq, tk);
                    detail::ConstStrided go(self.grad.data() + b * tq * d + h * dh, tq, dh, Eigen::OuterStride<>(d));
                    detail::ConstStrided qm(pq.value.data() + b * tq * d + h * dh, tq, dh, Eigen::OuterStride<>(d));
                    detail::ConstStrided km(pk.value.data() + b * tk * d + h * dh, tk, dh, Eigen::OuterStride<>(d));
                    detail::ConstStrided vm(pv.value.data() + b * tk * d + h * dh, tk, dh, Eigen::OuterStride<>(d));
                    if (gv) {
                        detail::MutStrided gvm(gv + b * tk * d + h * dh, tk, dh, Eigen::OuterStride<>(d));
                        gvm.noalias() += pm.transpose() * go;
                    }
                    if (!gq && !gk) {
                        continue;
                    }
                    dp.noalias() = go * vm.transpose();
                    for (std::size_t i = 0; i < tq; ++i) {
                        double dot = 0.0;
                        for (std::size_t j = 0; j < tk; ++j) {
                            dot += dp(i, j) * pm(i, j);
                        }
                        for (std::size_t j = 0; j < tk; ++j) {
                            dp(i, j) = pm(i, j) * (dp(i, j) - dot) * scl;
                        }
                    }
                    if (gq) {
                        detail::MutStrided gqm(gq + b * tq * d + h * dh, tq, dh, Eigen::OuterStride<>(d));
                        gqm.noalias() += dp * km;
                    }
                    if (gk) {
                        detail::MutStrided gkm(gk + b * tk * d + h * dh, tk, dh, Eigen::OuterStride<>(d));
                        gkm.noalias() += dp.transpose() * qm;
                    }
                }
            }
        });
}

}  // namespace clorae
