// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cmath>
#include <cstddef>
#include <functional>
#include <memory>
#include <numeric>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "dns/errors.hpp"
#include "dns/mat.hpp"
#include "dns/rng.hpp"
#include "dns/simplex.hpp"

// Minimal reverse-mode automatic differentiation over dense 64-bit tensors.
// A Tape records one node per primitive op, in execution order; backward
// walks the list once in reverse. Leaf tensors (parameters, inputs) keep
// accumulating gradients across backward calls; gradients of op outputs are
// scratch state re-zeroed at the start of every backward pass.

namespace dns::ad {

namespace detail {

struct Storage {
    std::vector<std::size_t> shape;
    std::vector<double> data;
    std::vector<double> grad;
    bool requires_grad = false;

    std::size_t numel() const { return data.size(); }
    void ensure_grad() {
        if (grad.size() != data.size()) grad.assign(data.size(), 0.0);
    }
};

inline std::size_t shape_numel(const std::vector<std::size_t>& shape) {
    std::size_t n = 1;
    for (std::size_t d : shape) n *= d;
    return n;
}

} // namespace detail

class Tensor {
public:
    Tensor() = default;

    static Tensor zeros(std::vector<std::size_t> shape, bool requires_grad = false) {
        auto st = std::make_shared<detail::Storage>();
        st->shape = std::move(shape);
        st->data.assign(detail::shape_numel(st->shape), 0.0);
        st->requires_grad = requires_grad;
        if (requires_grad) st->ensure_grad();
        return Tensor(std::move(st));
    }

    static Tensor from_data(std::vector<std::size_t> shape, std::vector<double> data,
                            bool requires_grad = false) {
        if (detail::shape_numel(shape) != data.size())
            throw DimensionError("Tensor::from_data: shape does not match data length");
        auto st = std::make_shared<detail::Storage>();
        st->shape = std::move(shape);
        st->data = std::move(data);
        st->requires_grad = requires_grad;
        if (requires_grad) st->ensure_grad();
        return Tensor(std::move(st));
    }

    static Tensor from_mat(const Mat& m, bool requires_grad = false) {
        return from_data({m.rows, m.cols}, m.a, requires_grad);
    }

    static Tensor scalar(double v) { return from_data({1}, {v}); }

    bool defined() const { return static_cast<bool>(st_); }
    const std::vector<std::size_t>& shape() const { return st_->shape; }
    std::size_t numel() const { return st_->numel(); }
    std::size_t rows() const { return st_->shape.at(0); }
    std::size_t cols() const { return st_->shape.at(1); }
    bool requires_grad() const { return st_->requires_grad; }

    std::vector<double>& data() { return st_->data; }
    const std::vector<double>& data() const { return st_->data; }
    std::vector<double>& grad() {
        st_->ensure_grad();
        return st_->grad;
    }
    const std::vector<double>& grad() const { return st_->grad; }

    double value() const {
        if (numel() != 1) throw ContractError("Tensor::value: tensor is not scalar");
        return st_->data[0];
    }

    void zero_grad() { st_->grad.assign(st_->data.size(), 0.0); }

    void fill_uniform(Rng& rng, double lo, double hi) {
        for (double& v : st_->data) v = rng.uniform(lo, hi);
    }

    Mat to_mat() const {
        if (st_->shape.size() != 2) throw ContractError("Tensor::to_mat: rank-2 required");
        Mat m(rows(), cols());
        m.a = st_->data;
        return m;
    }

    std::shared_ptr<detail::Storage> storage() const { return st_; }

private:
    explicit Tensor(std::shared_ptr<detail::Storage> st) : st_(std::move(st)) {}
    std::shared_ptr<detail::Storage> st_;

    friend class Tape;
};

class Tape {
public:
    Tape() = default;
    Tape(const Tape&) = delete;
    Tape& operator=(const Tape&) = delete;

    std::size_t size() const { return nodes_.size(); }

    // Populates grad on every tensor reachable from loss; leaf gradients
    // accumulate, so calling twice without zeroing doubles them.
    void backward(const Tensor& loss) {
        if (loss.numel() != 1) throw ContractError("backward: loss must be scalar");
        if (nodes_.empty()) throw ContractError("backward: empty tape");
        for (auto& n : nodes_) {
            n.out->ensure_grad();
            std::fill(n.out->grad.begin(), n.out->grad.end(), 0.0);
        }
        loss.st_->ensure_grad();
        loss.st_->grad[0] = 1.0;
        for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it)
            if (it->backward) it->backward();
    }

    // --- primitive ops ------------------------------------------------

    Tensor add(const Tensor& a, const Tensor& b) { return binary_pointwise(a, b, +1.0); }
    Tensor sub(const Tensor& a, const Tensor& b) { return binary_pointwise(a, b, -1.0); }

    Tensor hadamard(const Tensor& a, const Tensor& b) {
        require_same_shape(a, b, "hadamard");
        Tensor out = make_like(a.st_->shape, a.requires_grad() || b.requires_grad());
        for (std::size_t i = 0; i < out.numel(); ++i)
            out.st_->data[i] = a.st_->data[i] * b.st_->data[i];
        record(out, [as = a.st_, bs = b.st_, os = out.st_]() {
            if (as->requires_grad) {
                as->ensure_grad();
                for (std::size_t i = 0; i < os->numel(); ++i)
                    as->grad[i] += os->grad[i] * bs->data[i];
            }
            if (bs->requires_grad) {
                bs->ensure_grad();
                for (std::size_t i = 0; i < os->numel(); ++i)
                    bs->grad[i] += os->grad[i] * as->data[i];
            }
        });
        return out;
    }

    Tensor scale(const Tensor& a, double c) {
        Tensor out = make_like(a.st_->shape, a.requires_grad());
        for (std::size_t i = 0; i < out.numel(); ++i) out.st_->data[i] = c * a.st_->data[i];
        record(out, [as = a.st_, os = out.st_, c]() {
            if (!as->requires_grad) return;
            as->ensure_grad();
            for (std::size_t i = 0; i < os->numel(); ++i) as->grad[i] += c * os->grad[i];
        });
        return out;
    }

    Tensor matmul(const Tensor& a, const Tensor& b) {
        if (a.st_->shape.size() != 2 || b.st_->shape.size() != 2)
            throw DimensionError("matmul: rank-2 operands required");
        const std::size_t r = a.rows(), k = a.cols(), c = b.cols();
        if (b.rows() != k) throw DimensionError("matmul: inner extents disagree");
        Tensor out = make_like({r, c}, a.requires_grad() || b.requires_grad());
        const double* pa = a.st_->data.data();
        const double* pb = b.st_->data.data();
        double* po = out.st_->data.data();
        for (std::size_t i = 0; i < r; ++i)
            for (std::size_t kk = 0; kk < k; ++kk) {
                const double aik = pa[i * k + kk];
                const double* brow = pb + kk * c;
                double* orow = po + i * c;
                for (std::size_t j = 0; j < c; ++j) orow[j] += aik * brow[j];
            }
        record(out, [as = a.st_, bs = b.st_, os = out.st_, r, k, c]() {
            const double* g = os->grad.data();
            if (as->requires_grad) {
                as->ensure_grad();
                double* da = as->grad.data();
                const double* pb = bs->data.data();
                for (std::size_t i = 0; i < r; ++i)
                    for (std::size_t kk = 0; kk < k; ++kk) {
                        double acc = 0.0;
                        const double* grow = g + i * c;
                        const double* brow = pb + kk * c;
                        for (std::size_t j = 0; j < c; ++j) acc += grow[j] * brow[j];
                        da[i * k + kk] += acc;
                    }
            }
            if (bs->requires_grad) {
                bs->ensure_grad();
                double* db = bs->grad.data();
                const double* pa = as->data.data();
                for (std::size_t i = 0; i < r; ++i)
                    for (std::size_t kk = 0; kk < k; ++kk) {
                        const double aik = pa[i * k + kk];
                        const double* grow = g + i * c;
                        double* dbrow = db + kk * c;
                        for (std::size_t j = 0; j < c; ++j) dbrow[j] += aik * grow[j];
                    }
            }
        });
        return out;
    }

    Tensor transpose(const Tensor& a) {
        if (a.st_->shape.size() != 2) throw DimensionError("transpose: rank-2 required");
        const std::size_t r = a.rows(), c = a.cols();
        Tensor out = make_like({c, r}, a.requires_grad());
        for (std::size_t i = 0; i < r; ++i)
            for (std::size_t j = 0; j < c; ++j)
                out.st_->data[j * r + i] = a.st_->data[i * c + j];
        record(out, [as = a.st_, os = out.st_, r, c]() {
            if (!as->requires_grad) return;
            as->ensure_grad();
            for (std::size_t i = 0; i < r; ++i)
                for (std::size_t j = 0; j < c; ++j)
                    as->grad[i * c + j] += os->grad[j * r + i];
        });
        return out;
    }

    // Affine rows: out = x Wᵀ + 1 bᵀ with x of shape r x i, weight o x i,
    // bias {o}. Equivalent to add_bias(matmul(x, transpose(w)), b) without
    // materializing the transpose.
    Tensor linear(const Tensor& x, const Tensor& w, const Tensor& b) {
        if (x.st_->shape.size() != 2 || w.st_->shape.size() != 2 || b.st_->shape.size() != 1)
            throw DimensionError("linear: need rank-2 input/weight and rank-1 bias");
        const std::size_t r = x.rows(), in = x.cols(), out_dim = w.rows();
        if (w.cols() != in || b.numel() != out_dim)
            throw DimensionError("linear: dimension chain broken");
        Tensor out =
            make_like({r, out_dim}, x.requires_grad() || w.requires_grad() || b.requires_grad());
        const double* px = x.st_->data.data();
        const double* pw = w.st_->data.data();
        const double* pb = b.st_->data.data();
        double* po = out.st_->data.data();
        for (std::size_t s = 0; s < r; ++s)
            for (std::size_t o = 0; o < out_dim; ++o) {
                double acc = 0.0;
                const double* xrow = px + s * in;
                const double* wrow = pw + o * in;
                for (std::size_t i = 0; i < in; ++i) acc += xrow[i] * wrow[i];
                po[s * out_dim + o] = acc + pb[o];
            }
        record(out, [xs = x.st_, ws = w.st_, bs = b.st_, os = out.st_, r, in, out_dim]() {
            const double* g = os->grad.data();
            if (xs->requires_grad) {
                xs->ensure_grad();
                double* dx = xs->grad.data();
                const double* pw = ws->data.data();
                for (std::size_t s = 0; s < r; ++s)
                    for (std::size_t o = 0; o < out_dim; ++o) {
                        const double gv = g[s * out_dim + o];
                        const double* wrow = pw + o * in;
                        double* dxrow = dx + s * in;
                        for (std::size_t i = 0; i < in; ++i) dxrow[i] += gv * wrow[i];
                    }
            }
            if (ws->requires_grad) {
                ws->ensure_grad();
                double* dw = ws->grad.data();
                const double* px = xs->data.data();
                for (std::size_t s = 0; s < r; ++s)
                    for (std::size_t o = 0; o < out_dim; ++o) {
                        const double gv = g[s * out_dim + o];
                        const double* xrow = px + s * in;
                        double* dwrow = dw + o * in;
                        for (std::size_t i = 0; i < in; ++i) dwrow[i] += gv * xrow[i];
                    }
            }
            if (bs->requires_grad) {
                bs->ensure_grad();
                for (std::size_t s = 0; s < r; ++s)
                    for (std::size_t o = 0; o < out_dim; ++o) bs->grad[o] += g[s * out_dim + o];
            }
        });
        return out;
    }

    // out = x + 1 bᵀ, with x of shape r x c and bias of shape {c}.
    Tensor add_bias(const Tensor& x, const Tensor& b) {
        if (x.st_->shape.size() != 2 || b.st_->shape.size() != 1)
            throw DimensionError("add_bias: need rank-2 input and rank-1 bias");
        const std::size_t r = x.rows(), c = x.cols();
        if (b.numel() != c) throw DimensionError("add_bias: bias length mismatch");
        Tensor out = make_like({r, c}, x.requires_grad() || b.requires_grad());
        for (std::size_t i = 0; i < r; ++i)
            for (std::size_t j = 0; j < c; ++j)
                out.st_->data[i * c + j] = x.st_->data[i * c + j] + b.st_->data[j];
        record(out, [xs = x.st_, bs = b.st_, os = out.st_, r, c]() {
            if (xs->requires_grad) {
                xs->ensure_grad();
                for (std::size_t i = 0; i < r * c; ++i) xs->grad[i] += os->grad[i];
            }
            if (bs->requires_grad) {
                bs->ensure_grad();
                for (std::size_t i = 0; i < r; ++i)
                    for (std::size_t j = 0; j < c; ++j) bs->grad[j] += os->grad[i * c + j];
            }
        });
        return out;
    }

    Tensor tanh(const Tensor& a) {
        Tensor out = make_like(a.st_->shape, a.requires_grad());
        for (std::size_t i = 0; i < out.numel(); ++i) out.st_->data[i] = std::tanh(a.st_->data[i]);
        record(out, [as = a.st_, os = out.st_]() {
            if (!as->requires_grad) return;
            as->ensure_grad();
            for (std::size_t i = 0; i < os->numel(); ++i) {
                const double y = os->data[i];
                as->grad[i] += os->grad[i] * (1.0 - y * y);
            }
        });
        return out;
    }

    Tensor relu(const Tensor& a) {
        Tensor out = make_like(a.st_->shape, a.requires_grad());
        for (std::size_t i = 0; i < out.numel(); ++i)
            out.st_->data[i] = a.st_->data[i] > 0.0 ? a.st_->data[i] : 0.0;
        record(out, [as = a.st_, os = out.st_]() {
            if (!as->requires_grad) return;
            as->ensure_grad();
            // subgradient at 0 is 0
            for (std::size_t i = 0; i < os->numel(); ++i)
                if (as->data[i] > 0.0) as->grad[i] += os->grad[i];
        });
        return out;
    }

    Tensor sigmoid(const Tensor& a) {
        Tensor out = make_like(a.st_->shape, a.requires_grad());
        for (std::size_t i = 0; i < out.numel(); ++i) {
            const double x = a.st_->data[i];
            out.st_->data[i] = x >= 0.0 ? 1.0 / (1.0 + std::exp(-x))
                                        : std::exp(x) / (1.0 + std::exp(x));
        }
        record(out, [as = a.st_, os = out.st_]() {
            if (!as->requires_grad) return;
            as->ensure_grad();
            for (std::size_t i = 0; i < os->numel(); ++i) {
                const double y = os->data[i];
                as->grad[i] += os->grad[i] * y * (1.0 - y);
            }
        });
        return out;
    }

    Tensor reshape(const Tensor& a, std::vector<std::size_t> shape) {
        if (detail::shape_numel(shape) != a.numel())
            throw DimensionError("reshape: element count mismatch");
        Tensor out = make_like(std::move(shape), a.requires_grad());
        out.st_->data = a.st_->data;
        record(out, [as = a.st_, os = out.st_]() {
            if (!as->requires_grad) return;
            as->ensure_grad();
            for (std::size_t i = 0; i < os->numel(); ++i) as->grad[i] += os->grad[i];
        });
        return out;
    }

    Tensor take_row(const Tensor& x, std::size_t row) {
        if (x.st_->shape.size() != 2) throw DimensionError("take_row: rank-2 required");
        if (row >= x.rows()) throw DimensionError("take_row: row out of range");
        const std::size_t c = x.cols();
        Tensor out = make_like({1, c}, x.requires_grad());
        std::copy(x.st_->data.begin() + row * c, x.st_->data.begin() + (row + 1) * c,
                  out.st_->data.begin());
        record(out, [xs = x.st_, os = out.st_, row, c]() {
            if (!xs->requires_grad) return;
            xs->ensure_grad();
            for (std::size_t j = 0; j < c; ++j) xs->grad[row * c + j] += os->grad[j];
        });
        return out;
    }

    Tensor sum(const Tensor& a) { return reduce(a, 1.0); }
    Tensor mean(const Tensor& a) { return reduce(a, 1.0 / static_cast<double>(a.numel())); }

    Tensor sum_abs(const Tensor& a) {
        Tensor out = make_like({1}, a.requires_grad());
        double s = 0.0;
        for (double v : a.st_->data) s += std::abs(v);
        out.st_->data[0] = s;
        record(out, [as = a.st_, os = out.st_]() {
            if (!as->requires_grad) return;
            as->ensure_grad();
            const double g = os->grad[0];
            for (std::size_t i = 0; i < as->numel(); ++i) {
                const double v = as->data[i];
                if (v > 0.0)
                    as->grad[i] += g;
                else if (v < 0.0)
                    as->grad[i] -= g;
            }
        });
        return out;
    }

    // Row-wise entropic projection; the Jacobian diag(y) - y yᵀ is symmetric,
    // so the backward pass reuses the jvp form.
    Tensor softmax_rows(const Tensor& a) {
        if (a.st_->shape.size() != 2) throw DimensionError("softmax_rows: rank-2 required");
        const std::size_t r = a.rows(), c = a.cols();
        Tensor out = make_like({r, c}, a.requires_grad());
        for (std::size_t i = 0; i < r; ++i) {
            const auto y = dns::softmax(std::span<const double>(a.st_->data.data() + i * c, c));
            std::copy(y.begin(), y.end(), out.st_->data.begin() + i * c);
        }
        record(out, [as = a.st_, os = out.st_, r, c]() {
            if (!as->requires_grad) return;
            as->ensure_grad();
            for (std::size_t i = 0; i < r; ++i) {
                const double* y = os->data.data() + i * c;
                const double* g = os->grad.data() + i * c;
                double dot = 0.0;
                for (std::size_t j = 0; j < c; ++j) dot += y[j] * g[j];
                for (std::size_t j = 0; j < c; ++j) as->grad[i * c + j] += y[j] * (g[j] - dot);
            }
        });
        return out;
    }

    // Row-wise Euclidean projection. At splitting points the backward rule
    // uses the support produced by the forward max-criterion.
    Tensor sparsemax_rows(const Tensor& a) {
        if (a.st_->shape.size() != 2) throw DimensionError("sparsemax_rows: rank-2 required");
        const std::size_t r = a.rows(), c = a.cols();
        Tensor out = make_like({r, c}, a.requires_grad());
        auto support = std::make_shared<std::vector<char>>(r * c, 0);
        for (std::size_t i = 0; i < r; ++i) {
            const auto y = dns::sparsemax(std::span<const double>(a.st_->data.data() + i * c, c));
            for (std::size_t j = 0; j < c; ++j) {
                out.st_->data[i * c + j] = y[j];
                (*support)[i * c + j] = y[j] > 0.0 ? 1 : 0;
            }
        }
        record(out, [as = a.st_, os = out.st_, support, r, c]() {
            if (!as->requires_grad) return;
            as->ensure_grad();
            for (std::size_t i = 0; i < r; ++i) {
                const char* s = support->data() + i * c;
                const double* g = os->grad.data() + i * c;
                double ghat = 0.0;
                std::size_t ns = 0;
                for (std::size_t j = 0; j < c; ++j)
                    if (s[j]) {
                        ghat += g[j];
                        ++ns;
                    }
                ghat /= static_cast<double>(ns);
                for (std::size_t j = 0; j < c; ++j)
                    if (s[j]) as->grad[i * c + j] += g[j] - ghat;
            }
        });
        return out;
    }

    // Batched matrix-vector product with packed matrices: fields is n x (q*m)
    // where row i packs a q x m matrix row-major, controls is n x m, output
    // is n x q with out[i,a] = sum_b fields[i, a*m+b] * controls[i,b].
    Tensor field_apply(const Tensor& fields, const Tensor& controls, std::size_t q) {
        if (fields.st_->shape.size() != 2 || controls.st_->shape.size() != 2)
            throw DimensionError("field_apply: rank-2 operands required");
        const std::size_t n = fields.rows(), m = controls.cols();
        if (controls.rows() != n || fields.cols() != q * m)
            throw DimensionError("field_apply: shape mismatch");
        Tensor out = make_like({n, q}, fields.requires_grad() || controls.requires_grad());
        for (std::size_t i = 0; i < n; ++i) {
            const double* gi = fields.st_->data.data() + i * q * m;
            const double* ui = controls.st_->data.data() + i * m;
            double* oi = out.st_->data.data() + i * q;
            for (std::size_t a = 0; a < q; ++a) {
                double acc = 0.0;
                for (std::size_t b = 0; b < m; ++b) acc += gi[a * m + b] * ui[b];
                oi[a] = acc;
            }
        }
        record(out, [fs = fields.st_, cs = controls.st_, os = out.st_, n, q, m]() {
            for (std::size_t i = 0; i < n; ++i) {
                const double* g = os->grad.data() + i * q;
                if (fs->requires_grad) {
                    fs->ensure_grad();
                    double* df = fs->grad.data() + i * q * m;
                    const double* u = cs->data.data() + i * m;
                    for (std::size_t a = 0; a < q; ++a)
                        for (std::size_t b = 0; b < m; ++b) df[a * m + b] += g[a] * u[b];
                }
                if (cs->requires_grad) {
                    cs->ensure_grad();
                    double* du = cs->grad.data() + i * m;
                    const double* f = fs->data.data() + i * q * m;
                    for (std::size_t a = 0; a < q; ++a)
                        for (std::size_t b = 0; b < m; ++b) du[b] += g[a] * f[a * m + b];
                }
            }
        });
        return out;
    }

    // Horizontal concatenation of rank-2 tensors with equal row counts.
    Tensor concat_cols(const std::vector<Tensor>& parts) {
        if (parts.empty()) throw DimensionError("concat_cols: no operands");
        const std::size_t r = parts.front().rows();
        std::size_t total = 0;
        bool rg = false;
        for (const auto& p : parts) {
            if (p.st_->shape.size() != 2 || p.rows() != r)
                throw DimensionError("concat_cols: row counts disagree");
            total += p.cols();
            rg = rg || p.requires_grad();
        }
        Tensor out = make_like({r, total}, rg);
        std::size_t off = 0;
        for (const auto& p : parts) {
            const std::size_t c = p.cols();
            for (std::size_t i = 0; i < r; ++i)
                std::copy(p.st_->data.begin() + i * c, p.st_->data.begin() + (i + 1) * c,
                          out.st_->data.begin() + i * total + off);
            off += c;
        }
        std::vector<std::shared_ptr<detail::Storage>> srcs;
        for (const auto& p : parts) srcs.push_back(p.st_);
        record(out, [srcs, os = out.st_, r, total]() {
            std::size_t off = 0;
            for (const auto& s : srcs) {
                const std::size_t c = s->data.size() / r;
                if (s->requires_grad) {
                    s->ensure_grad();
                    for (std::size_t i = 0; i < r; ++i)
                        for (std::size_t j = 0; j < c; ++j)
                            s->grad[i * c + j] += os->grad[i * total + off + j];
                }
                off += c;
            }
        });
        return out;
    }

    // Mean binary cross-entropy over logits, numerically stable form.
    // labels are constants in {0,1}.
    Tensor bce_with_logits(const Tensor& logits, const std::vector<double>& labels) {
        if (logits.numel() != labels.size())
            throw DimensionError("bce_with_logits: label count mismatch");
        const std::size_t n = logits.numel();
        Tensor out = make_like({1}, logits.requires_grad());
        double loss = 0.0;
        for (std::size_t i = 0; i < n; ++i) {
            const double x = logits.st_->data[i];
            const double z = labels[i];
            loss += std::max(x, 0.0) - x * z + std::log1p(std::exp(-std::abs(x)));
        }
        out.st_->data[0] = loss / static_cast<double>(n);
        record(out, [ls = logits.st_, os = out.st_, labels, n]() {
            if (!ls->requires_grad) return;
            ls->ensure_grad();
            const double g = os->grad[0] / static_cast<double>(n);
            for (std::size_t i = 0; i < n; ++i) {
                const double x = ls->data[i];
                const double sig = x >= 0.0 ? 1.0 / (1.0 + std::exp(-x))
                                            : std::exp(x) / (1.0 + std::exp(x));
                ls->grad[i] += g * (sig - labels[i]);
            }
        });
        return out;
    }

private:
    struct Node {
        std::shared_ptr<detail::Storage> out;
        std::function<void()> backward;
    };
    std::vector<Node> nodes_;

    static void require_same_shape(const Tensor& a, const Tensor& b, const char* who) {
        if (a.st_->shape != b.st_->shape)
            throw DimensionError(std::string(who) + ": operand shapes disagree");
    }

    Tensor make_like(std::vector<std::size_t> shape, bool requires_grad) {
        auto st = std::make_shared<detail::Storage>();
        st->shape = std::move(shape);
        st->data.assign(detail::shape_numel(st->shape), 0.0);
        st->requires_grad = requires_grad;
        return Tensor(std::move(st));
    }

    void record(const Tensor& out, std::function<void()> backward) {
        if (out.requires_grad()) nodes_.push_back({out.st_, std::move(backward)});
    }

    Tensor binary_pointwise(const Tensor& a, const Tensor& b, double sign_b) {
        require_same_shape(a, b, sign_b > 0 ? "add" : "sub");
        Tensor out = make_like(a.st_->shape, a.requires_grad() || b.requires_grad());
        for (std::size_t i = 0; i < out.numel(); ++i)
            out.st_->data[i] = a.st_->data[i] + sign_b * b.st_->data[i];
        record(out, [as = a.st_, bs = b.st_, os = out.st_, sign_b]() {
            if (as->requires_grad) {
                as->ensure_grad();
                for (std::size_t i = 0; i < os->numel(); ++i) as->grad[i] += os->grad[i];
            }
            if (bs->requires_grad) {
                bs->ensure_grad();
                for (std::size_t i = 0; i < os->numel(); ++i) bs->grad[i] += sign_b * os->grad[i];
            }
        });
        return out;
    }

    Tensor reduce(const Tensor& a, double w) {
        Tensor out = make_like({1}, a.requires_grad());
        double s = 0.0;
        for (double v : a.st_->data) s += v;
        out.st_->data[0] = s * w;
        record(out, [as = a.st_, os = out.st_, w]() {
            if (!as->requires_grad) return;
            as->ensure_grad();
            const double g = os->grad[0] * w;
            for (std::size_t i = 0; i < as->numel(); ++i) as->grad[i] += g;
        });
        return out;
    }
};

// --- small composite layers ------------------------------------------------

enum class Activation { none, tanh, relu };

struct MlpLayer {
    Tensor weight; // out x in
    Tensor bias;   // {out}
    Activation act = Activation::none;
};

// Applies (x Wᵀ + b, activation) per layer; x has one row per batch element.
inline Tensor mlp_forward(Tape& tape, const std::vector<MlpLayer>& layers, const Tensor& input) {
    Tensor h = input;
    for (const auto& layer : layers) {
        if (h.cols() != layer.weight.cols())
            throw DimensionError("mlp_forward: layer dimension chain broken");
        h = tape.linear(h, layer.weight, layer.bias);
        switch (layer.act) {
            case Activation::none: break;
            case Activation::tanh: h = tape.tanh(h); break;
            case Activation::relu: h = tape.relu(h); break;
        }
    }
    return h;
}

// Mean squared error against a constant target.
inline Tensor mse_loss(Tape& tape, const Tensor& pred, const Tensor& target) {
    Tensor d = tape.sub(pred, target);
    return tape.mean(tape.hadamard(d, d));
}

} // namespace dns::ad
