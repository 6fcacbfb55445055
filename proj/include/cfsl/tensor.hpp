#pragma once

// Reverse-mode autodiff on dense double tensors.
//
// A Graph owns an append-only tape of operations. Every op validates its
// inputs eagerly, computes the forward value immediately, and records a
// closure that scatters gradients back to its inputs. backward() replays the
// tape in reverse. Gradients of leaf tensors accumulate across calls, which
// is what mini-batch training relies on; intermediate gradients are zeroed at
// the start of every backward pass.
//
// Matrix products (matmul and the im2col formulation of conv2d) are evaluated
// through Eigen for throughput; everything else is plain loops.

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <functional>
#include <map>
#include <memory>
#include <numeric>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "cfsl/util.hpp"

namespace cfsl {

using MatRM = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapM = Eigen::Map<MatRM>;
using MapCM = Eigen::Map<const MatRM>;

class Tensor {
   public:
    Tensor() = default;

    static Tensor zeros(std::vector<int> shape) {
        Tensor t;
        t.node_ = std::make_shared<Node>();
        t.node_->shape = std::move(shape);
        t.node_->values.assign(t.check_shape_numel(), 0.0);
        return t;
    }

    static Tensor from_values(std::vector<int> shape, std::vector<double> values) {
        Tensor t = zeros(std::move(shape));
        if (values.size() != t.numel())
            throw std::invalid_argument("Tensor::from_values: got " + std::to_string(values.size()) +
                                        " values for shape " + t.shape_str());
        t.node_->values = std::move(values);
        return t;
    }

    static Tensor scalar(double v) { return from_values({}, {v}); }

    bool defined() const { return node_ != nullptr; }

    const std::vector<int>& shape() const { return node_->shape; }
    int rank() const { return static_cast<int>(node_->shape.size()); }
    size_t numel() const { return node_->values.size(); }

    std::vector<double>& values() { return node_->values; }
    const std::vector<double>& values() const { return node_->values; }
    double* data() { return node_->values.data(); }
    const double* data() const { return node_->values.data(); }

    double item() const {
        if (numel() != 1) throw std::invalid_argument("Tensor::item: tensor has " + std::to_string(numel()) + " elements");
        return node_->values[0];
    }

    bool grad_enabled() const { return node_->grad_enabled; }

    void set_grad_enabled(bool on) {
        node_->grad_enabled = on;
        if (on && node_->grad.size() != numel()) node_->grad.assign(numel(), 0.0);
    }

    std::vector<double>& grad() {
        if (!node_->grad_enabled) throw std::logic_error("Tensor::grad: gradient not enabled");
        return node_->grad;
    }
    const std::vector<double>& grad() const {
        if (!node_->grad_enabled) throw std::logic_error("Tensor::grad: gradient not enabled");
        return node_->grad;
    }

    void zero_grad() {
        if (node_->grad_enabled) std::fill(node_->grad.begin(), node_->grad.end(), 0.0);
    }

    std::string shape_str() const {
        std::ostringstream os;
        os << '[';
        for (size_t i = 0; i < node_->shape.size(); ++i) {
            if (i) os << ',';
            os << node_->shape[i];
        }
        os << ']';
        return os.str();
    }

    // Identity of the underlying storage, used as a stable key by the optimizer.
    const void* id() const { return node_.get(); }

   private:
    struct Node {
        std::vector<int> shape;
        std::vector<double> values;
        std::vector<double> grad;
        bool grad_enabled = false;
    };

    size_t check_shape_numel() const {
        size_t n = 1;
        for (int d : node_->shape) {
            if (d <= 0) throw std::invalid_argument("Tensor: non-positive dimension in shape " + shape_str());
            n *= static_cast<size_t>(d);
        }
        return n;
    }

    std::shared_ptr<Node> node_;

    friend class Graph;
};

class Graph {
   public:
    // --- discrete trace ------------------------------------------------------
    // When enabled, every operation with data-dependent discrete structure
    // (relu/abs sign patterns, externally noted top-k selections) appends a
    // hash to the trace. The gradient checker compares traces of the two
    // perturbed evaluations and skips coordinates where the structure changed,
    // since the loss is not differentiable across those boundaries.

    void set_trace_discrete(bool on) { trace_enabled_ = on; }
    bool trace_discrete() const { return trace_enabled_; }
    const std::vector<uint64_t>& discrete_trace() const { return trace_; }

    void note_discrete(uint64_t h) {
        if (trace_enabled_) trace_.push_back(h);
    }

    void note_discrete_indices(const std::vector<int>& idx) {
        if (trace_enabled_) trace_.push_back(fnv1a64(idx.data(), idx.size() * sizeof(int)));
    }

    // --- elementwise ---------------------------------------------------------

    Tensor add(Tensor a, Tensor b) {
        require_same_shape("add", a, b);
        require_finite("add", a);
        require_finite("add", b);
        Tensor out = make_output(a.shape());
        const size_t n = out.numel();
        for (size_t i = 0; i < n; ++i) out.data()[i] = a.data()[i] + b.data()[i];
        record(out, [a, b, out]() mutable {
            const size_t n = out.numel();
            if (a.grad_enabled())
                for (size_t i = 0; i < n; ++i) a.grad()[i] += out.grad()[i];
            if (b.grad_enabled())
                for (size_t i = 0; i < n; ++i) b.grad()[i] += out.grad()[i];
        });
        return out;
    }

    Tensor mul(Tensor a, Tensor b) {
        require_same_shape("mul", a, b);
        require_finite("mul", a);
        require_finite("mul", b);
        Tensor out = make_output(a.shape());
        const size_t n = out.numel();
        for (size_t i = 0; i < n; ++i) out.data()[i] = a.data()[i] * b.data()[i];
        record(out, [a, b, out]() mutable {
            const size_t n = out.numel();
            if (a.grad_enabled())
                for (size_t i = 0; i < n; ++i) a.grad()[i] += out.grad()[i] * b.data()[i];
            if (b.grad_enabled())
                for (size_t i = 0; i < n; ++i) b.grad()[i] += out.grad()[i] * a.data()[i];
        });
        return out;
    }

    Tensor scale(Tensor a, double c) {
        if (!std::isfinite(c)) throw std::invalid_argument("scale: non-finite factor");
        require_finite("scale", a);
        Tensor out = make_output(a.shape());
        const size_t n = out.numel();
        for (size_t i = 0; i < n; ++i) out.data()[i] = c * a.data()[i];
        record(out, [a, out, c]() mutable {
            if (!a.grad_enabled()) return;
            const size_t n = out.numel();
            for (size_t i = 0; i < n; ++i) a.grad()[i] += c * out.grad()[i];
        });
        return out;
    }

    Tensor abs(Tensor a) {
        require_finite("abs", a);
        Tensor out = make_output(a.shape());
        const size_t n = out.numel();
        for (size_t i = 0; i < n; ++i) out.data()[i] = std::fabs(a.data()[i]);
        if (trace_enabled_) {
            uint64_t h = 0xcbf29ce484222325ULL;
            for (size_t i = 0; i < n; ++i) {
                const unsigned char s = a.data()[i] > 0.0 ? 1 : (a.data()[i] < 0.0 ? 2 : 0);
                h = fnv1a64(&s, 1, h);
            }
            trace_.push_back(h);
        }
        record(out, [a, out]() mutable {
            if (!a.grad_enabled()) return;
            const size_t n = out.numel();
            for (size_t i = 0; i < n; ++i) {
                const double x = a.data()[i];
                const double s = x > 0.0 ? 1.0 : (x < 0.0 ? -1.0 : 0.0);
                a.grad()[i] += s * out.grad()[i];
            }
        });
        return out;
    }

    Tensor relu(Tensor a) {
        require_finite("relu", a);
        Tensor out = make_output(a.shape());
        const size_t n = out.numel();
        for (size_t i = 0; i < n; ++i) out.data()[i] = a.data()[i] > 0.0 ? a.data()[i] : 0.0;
        if (trace_enabled_) {
            uint64_t h = 0xcbf29ce484222325ULL;
            for (size_t i = 0; i < n; ++i) {
                const unsigned char s = a.data()[i] > 0.0 ? 1 : 0;
                h = fnv1a64(&s, 1, h);
            }
            trace_.push_back(h);
        }
        record(out, [a, out]() mutable {
            if (!a.grad_enabled()) return;
            const size_t n = out.numel();
            for (size_t i = 0; i < n; ++i)
                if (a.data()[i] > 0.0) a.grad()[i] += out.grad()[i];
        });
        return out;
    }

    // --- linear algebra ------------------------------------------------------

    // Matrix product with rank-1 promotion: a rank-1 lhs acts as a row vector,
    // a rank-1 rhs as a column vector, and promoted dimensions are dropped
    // from the output (so vec x vec is a rank-0 dot product).
    Tensor matmul(Tensor a, Tensor b) {
        require_finite("matmul", a);
        require_finite("matmul", b);
        int m, k, k2, n;
        bool a_vec = false, b_vec = false;
        if (a.rank() == 2) {
            m = a.shape()[0];
            k = a.shape()[1];
        } else if (a.rank() == 1) {
            m = 1;
            k = a.shape()[0];
            a_vec = true;
        } else {
            throw std::invalid_argument("matmul: lhs must be rank 1 or 2, got " + a.shape_str());
        }
        if (b.rank() == 2) {
            k2 = b.shape()[0];
            n = b.shape()[1];
        } else if (b.rank() == 1) {
            k2 = b.shape()[0];
            n = 1;
            b_vec = true;
        } else {
            throw std::invalid_argument("matmul: rhs must be rank 1 or 2, got " + b.shape_str());
        }
        if (k != k2)
            throw std::invalid_argument("matmul: inner dimensions disagree, " + a.shape_str() + " x " + b.shape_str());

        std::vector<int> out_shape;
        if (!a_vec) out_shape.push_back(m);
        if (!b_vec) out_shape.push_back(n);
        Tensor out = make_output(out_shape);

        MapCM A(a.data(), m, k), B(b.data(), k, n);
        MapM C(out.data(), m, n);
        C.noalias() = A * B;
        record(out, [a, b, out, m, k, n]() mutable {
            MapCM A(a.data(), m, k), B(b.data(), k, n), G(out.grad().data(), m, n);
            if (a.grad_enabled()) {
                MapM GA(a.grad().data(), m, k);
                GA.noalias() += G * B.transpose();
            }
            if (b.grad_enabled()) {
                MapM GB(b.grad().data(), k, n);
                GB.noalias() += A.transpose() * G;
            }
        });
        return out;
    }

    // Same-padded stride-1 convolution. x is [H,W,Ci], kernel is [kh,kw,Ci,Co]
    // with odd kh and kw, output is [H,W,Co]. Internally lowered to a single
    // GEMM over an im2col buffer; the buffer is kept alive for the backward
    // pass of the same graph.
    Tensor conv2d(Tensor x, Tensor kernel) {
        require_finite("conv2d", x);
        require_finite("conv2d", kernel);
        if (x.rank() != 3) throw std::invalid_argument("conv2d: input must be [H,W,C], got " + x.shape_str());
        if (kernel.rank() != 4)
            throw std::invalid_argument("conv2d: kernel must be [kh,kw,Cin,Cout], got " + kernel.shape_str());
        const int H = x.shape()[0], W = x.shape()[1], Ci = x.shape()[2];
        const int kh = kernel.shape()[0], kw = kernel.shape()[1];
        const int Kci = kernel.shape()[2], Co = kernel.shape()[3];
        if (Kci != Ci)
            throw std::invalid_argument("conv2d: kernel expects " + std::to_string(Kci) + " input channels, input has " +
                                        std::to_string(Ci));
        if (kh % 2 == 0 || kw % 2 == 0) throw std::invalid_argument("conv2d: kernel size must be odd for same padding");
        const int ph = kh / 2, pw = kw / 2;
        const int patch = kh * kw * Ci;

        auto col = std::make_shared<std::vector<double>>(static_cast<size_t>(H) * W * patch, 0.0);
        {
            double* cp = col->data();
            for (int i = 0; i < H; ++i) {
                for (int j = 0; j < W; ++j) {
                    double* row = cp + (static_cast<size_t>(i) * W + j) * patch;
                    for (int di = 0; di < kh; ++di) {
                        const int si = i + di - ph;
                        if (si < 0 || si >= H) continue;
                        for (int dj = 0; dj < kw; ++dj) {
                            const int sj = j + dj - pw;
                            if (sj < 0 || sj >= W) continue;
                            const double* src = x.data() + (static_cast<size_t>(si) * W + sj) * Ci;
                            double* dst = row + (di * kw + dj) * Ci;
                            for (int c = 0; c < Ci; ++c) dst[c] = src[c];
                        }
                    }
                }
            }
        }

        Tensor out = make_output({H, W, Co});
        MapCM Cm(col->data(), H * W, patch), Km(kernel.data(), patch, Co);
        MapM Om(out.data(), H * W, Co);
        Om.noalias() = Cm * Km;

        record(out, [x, kernel, out, col, H, W, Ci, kh, kw, Co, ph, pw, patch]() mutable {
            MapCM G(out.grad().data(), H * W, Co);
            if (kernel.grad_enabled()) {
                MapCM Cm(col->data(), H * W, patch);
                MapM GK(kernel.grad().data(), patch, Co);
                GK.noalias() += Cm.transpose() * G;
            }
            if (x.grad_enabled()) {
                MatRM Gcol(H * W, patch);
                MapCM Km(kernel.data(), patch, Co);
                Gcol.noalias() = G * Km.transpose();
                double* gx = x.grad().data();
                for (int i = 0; i < H; ++i) {
                    for (int j = 0; j < W; ++j) {
                        const double* row = Gcol.data() + (static_cast<size_t>(i) * W + j) * patch;
                        for (int di = 0; di < kh; ++di) {
                            const int si = i + di - ph;
                            if (si < 0 || si >= H) continue;
                            for (int dj = 0; dj < kw; ++dj) {
                                const int sj = j + dj - pw;
                                if (sj < 0 || sj >= W) continue;
                                double* dst = gx + (static_cast<size_t>(si) * W + sj) * Ci;
                                const double* src = row + (di * kw + dj) * Ci;
                                for (int c = 0; c < Ci; ++c) dst[c] += src[c];
                            }
                        }
                    }
                }
            }
        });
        return out;
    }

    // 2x2 average pooling with stride 2; spatial dimensions must be even.
    Tensor avg_pool2(Tensor x) {
        require_finite("avg_pool2", x);
        if (x.rank() != 3) throw std::invalid_argument("avg_pool2: input must be [H,W,C], got " + x.shape_str());
        const int H = x.shape()[0], W = x.shape()[1], C = x.shape()[2];
        if (H % 2 != 0 || W % 2 != 0)
            throw std::invalid_argument("avg_pool2: spatial dimensions must be even, got " + x.shape_str());
        const int Ho = H / 2, Wo = W / 2;
        Tensor out = make_output({Ho, Wo, C});
        for (int i = 0; i < Ho; ++i)
            for (int j = 0; j < Wo; ++j)
                for (int c = 0; c < C; ++c) {
                    const auto at = [&](int r, int s) { return x.data()[(static_cast<size_t>(r) * W + s) * C + c]; };
                    out.data()[(static_cast<size_t>(i) * Wo + j) * C + c] =
                        0.25 * (at(2 * i, 2 * j) + at(2 * i, 2 * j + 1) + at(2 * i + 1, 2 * j) + at(2 * i + 1, 2 * j + 1));
                }
        record(out, [x, out, H, W, C, Ho, Wo]() mutable {
            if (!x.grad_enabled()) return;
            for (int i = 0; i < Ho; ++i)
                for (int j = 0; j < Wo; ++j)
                    for (int c = 0; c < C; ++c) {
                        const double g = 0.25 * out.grad()[(static_cast<size_t>(i) * Wo + j) * C + c];
                        for (int di = 0; di < 2; ++di)
                            for (int dj = 0; dj < 2; ++dj)
                                x.grad()[(static_cast<size_t>(2 * i + di) * W + (2 * j + dj)) * C + c] += g;
                    }
        });
        return out;
    }

    // [H,W,C] -> [C], mean over all spatial positions.
    Tensor global_avg_pool(Tensor x) {
        require_finite("global_avg_pool", x);
        if (x.rank() != 3) throw std::invalid_argument("global_avg_pool: input must be [H,W,C], got " + x.shape_str());
        const int H = x.shape()[0], W = x.shape()[1], C = x.shape()[2];
        const double inv = 1.0 / (static_cast<double>(H) * W);
        Tensor out = make_output({C});
        for (int c = 0; c < C; ++c) {
            double s = 0.0;
            for (int p = 0; p < H * W; ++p) s += x.data()[static_cast<size_t>(p) * C + c];
            out.data()[c] = s * inv;
        }
        record(out, [x, out, H, W, C, inv]() mutable {
            if (!x.grad_enabled()) return;
            for (int c = 0; c < C; ++c) {
                const double g = out.grad()[c] * inv;
                for (int p = 0; p < H * W; ++p) x.grad()[static_cast<size_t>(p) * C + c] += g;
            }
        });
        return out;
    }

    // Rank 1: whole-vector L2 normalization. Rank 2: each column normalized
    // independently. An epsilon of 1e-12 inside the square root keeps the op
    // defined everywhere; exact zero inputs map to zero outputs.
    Tensor l2_normalize(Tensor a) {
        require_finite("l2_normalize", a);
        static constexpr double kEps = 1e-12;
        if (a.rank() == 1) {
            const int n = a.shape()[0];
            Tensor out = make_output({n});
            double ss = 0.0;
            for (int i = 0; i < n; ++i) ss += a.data()[i] * a.data()[i];
            const double s = std::sqrt(ss + kEps);
            for (int i = 0; i < n; ++i) out.data()[i] = a.data()[i] / s;
            record(out, [a, out, n, s]() mutable {
                if (!a.grad_enabled()) return;
                double dot = 0.0;
                for (int i = 0; i < n; ++i) dot += out.grad()[i] * a.data()[i];
                const double s3 = s * s * s;
                for (int i = 0; i < n; ++i) a.grad()[i] += out.grad()[i] / s - a.data()[i] * dot / s3;
            });
            return out;
        }
        if (a.rank() == 2) {
            const int R = a.shape()[0], Ccols = a.shape()[1];
            Tensor out = make_output({R, Ccols});
            std::vector<double> norms(static_cast<size_t>(Ccols));
            for (int j = 0; j < Ccols; ++j) {
                double ss = 0.0;
                for (int i = 0; i < R; ++i) {
                    const double v = a.data()[static_cast<size_t>(i) * Ccols + j];
                    ss += v * v;
                }
                norms[static_cast<size_t>(j)] = std::sqrt(ss + kEps);
                for (int i = 0; i < R; ++i)
                    out.data()[static_cast<size_t>(i) * Ccols + j] =
                        a.data()[static_cast<size_t>(i) * Ccols + j] / norms[static_cast<size_t>(j)];
            }
            record(out, [a, out, R, Ccols, norms = std::move(norms)]() mutable {
                if (!a.grad_enabled()) return;
                for (int j = 0; j < Ccols; ++j) {
                    const double s = norms[static_cast<size_t>(j)];
                    double dot = 0.0;
                    for (int i = 0; i < R; ++i)
                        dot += out.grad()[static_cast<size_t>(i) * Ccols + j] * a.data()[static_cast<size_t>(i) * Ccols + j];
                    const double s3 = s * s * s;
                    for (int i = 0; i < R; ++i) {
                        const size_t ix = static_cast<size_t>(i) * Ccols + j;
                        a.grad()[ix] += out.grad()[ix] / s - a.data()[ix] * dot / s3;
                    }
                }
            });
            return out;
        }
        throw std::invalid_argument("l2_normalize: input must be rank 1 or 2, got " + a.shape_str());
    }

    // Concatenation of rank-1 tensors.
    Tensor concat(std::vector<Tensor> parts) {
        if (parts.empty()) throw std::invalid_argument("concat: empty input list");
        int total = 0;
        for (const Tensor& p : parts) {
            require_finite("concat", p);
            if (p.rank() != 1) throw std::invalid_argument("concat: all inputs must be rank 1, got " + p.shape_str());
            total += p.shape()[0];
        }
        Tensor out = make_output({total});
        int off = 0;
        for (const Tensor& p : parts) {
            std::copy(p.data(), p.data() + p.shape()[0], out.data() + off);
            off += p.shape()[0];
        }
        record(out, [parts, out]() mutable {
            int off = 0;
            for (Tensor& p : parts) {
                const int n = p.shape()[0];
                if (p.grad_enabled())
                    for (int i = 0; i < n; ++i) p.grad()[i] += out.grad()[off + i];
                off += n;
            }
        });
        return out;
    }

    // Sum of all elements, rank-0 output.
    Tensor sum(Tensor a) {
        require_finite("sum", a);
        Tensor out = make_output({});
        double s = 0.0;
        const size_t n = a.numel();
        for (size_t i = 0; i < n; ++i) s += a.data()[i];
        out.data()[0] = s;
        record(out, [a, out]() mutable {
            if (!a.grad_enabled()) return;
            const double g = out.grad()[0];
            const size_t n = a.numel();
            for (size_t i = 0; i < n; ++i) a.grad()[i] += g;
        });
        return out;
    }

    // Sum over an index set of a rank-1 tensor. Indices must be in range and
    // distinct; an empty set sums to zero.
    Tensor masked_sum(Tensor a, const std::vector<int>& indices) {
        require_finite("masked_sum", a);
        if (a.rank() != 1) throw std::invalid_argument("masked_sum: input must be rank 1, got " + a.shape_str());
        const int n = a.shape()[0];
        std::vector<char> seen(static_cast<size_t>(n), 0);
        for (int ix : indices) {
            if (ix < 0 || ix >= n)
                throw std::invalid_argument("masked_sum: index " + std::to_string(ix) + " out of range for " + a.shape_str());
            if (seen[static_cast<size_t>(ix)]) throw std::invalid_argument("masked_sum: duplicate index " + std::to_string(ix));
            seen[static_cast<size_t>(ix)] = 1;
        }
        Tensor out = make_output({});
        double s = 0.0;
        for (int ix : indices) s += a.data()[ix];
        out.data()[0] = s;
        record(out, [a, out, indices]() mutable {
            if (!a.grad_enabled()) return;
            const double g = out.grad()[0];
            for (int ix : indices) a.grad()[ix] += g;
        });
        return out;
    }

    // Numerically stable cross-entropy with softmax folded in. logits is
    // rank 1, label indexes into it, output is the rank-0 loss.
    Tensor softmax_cross_entropy(Tensor logits, int label) {
        require_finite("softmax_cross_entropy", logits);
        if (logits.rank() != 1)
            throw std::invalid_argument("softmax_cross_entropy: logits must be rank 1, got " + logits.shape_str());
        const int n = logits.shape()[0];
        if (label < 0 || label >= n)
            throw std::invalid_argument("softmax_cross_entropy: label " + std::to_string(label) + " out of range for " +
                                        std::to_string(n) + " classes");
        double mx = logits.data()[0];
        for (int i = 1; i < n; ++i) mx = std::max(mx, logits.data()[i]);
        double se = 0.0;
        for (int i = 0; i < n; ++i) se += std::exp(logits.data()[i] - mx);
        const double lse = mx + std::log(se);
        Tensor out = make_output({});
        out.data()[0] = lse - logits.data()[label];
        record(out, [logits, out, label, mx, se]() mutable {
            if (!logits.grad_enabled()) return;
            const double g = out.grad()[0];
            const int n = logits.shape()[0];
            for (int i = 0; i < n; ++i) {
                const double p = std::exp(logits.data()[i] - mx) / se;
                logits.grad()[i] += g * (p - (i == label ? 1.0 : 0.0));
            }
        });
        return out;
    }

    // --- backward ------------------------------------------------------------

    void backward(const Tensor& loss) {
        if (loss.numel() != 1) throw std::invalid_argument("backward: loss must be scalar, got " + loss.shape_str());
        for (Step& s : steps_) s.out.zero_grad();
        Tensor l = loss;
        l.set_grad_enabled(true);
        l.grad()[0] = 1.0;
        for (auto it = steps_.rbegin(); it != steps_.rend(); ++it) it->back();
    }

    size_t n_steps() const { return steps_.size(); }

   private:
    struct Step {
        Tensor out;
        std::function<void()> back;
    };

    Tensor make_output(std::vector<int> shape) {
        Tensor t = Tensor::zeros(std::move(shape));
        t.set_grad_enabled(true);
        return t;
    }

    void record(Tensor out, std::function<void()> back) { steps_.push_back({std::move(out), std::move(back)}); }

    static void require_same_shape(const char* op, const Tensor& a, const Tensor& b) {
        if (a.shape() != b.shape())
            throw std::invalid_argument(std::string(op) + ": shape mismatch " + a.shape_str() + " vs " + b.shape_str());
    }

    static void require_finite(const char* op, const Tensor& t) {
        const size_t n = t.numel();
        for (size_t i = 0; i < n; ++i)
            if (!std::isfinite(t.data()[i]))
                throw std::invalid_argument(std::string(op) + ": non-finite input value at flat index " + std::to_string(i));
    }

    std::vector<Step> steps_;
    bool trace_enabled_ = false;
    std::vector<uint64_t> trace_;
};

// --- gradient checking -------------------------------------------------------

struct GradCheckReport {
    double max_rel_error = 0.0;
    int n_checked = 0;
    std::vector<int> excluded;  // coordinates where every probe step changed the discrete trace
    bool pass = false;
};

// Central-difference check of d(loss)/d(leaf). build_loss must rebuild the
// full forward computation on the given graph from the current leaf values;
// it is evaluated twice up front and rejected if the two scalar results are
// not bit-identical. Each coordinate is probed at `step` and, when needed, at
// a few larger and smaller steps, keeping the best agreement. On return,
// leaf.grad() holds the analytic gradient.
inline GradCheckReport check_gradient(const std::function<Tensor(Graph&)>& build_loss, Tensor leaf, double step = 1e-5,
                                      double tol = 1e-4) {
    if (!(step > 0.0)) throw std::invalid_argument("check_gradient: step must be positive");

    const auto eval = [&](std::vector<uint64_t>* trace_out) {
        Graph g;
        g.set_trace_discrete(trace_out != nullptr);
        Tensor loss = build_loss(g);
        if (trace_out) *trace_out = g.discrete_trace();
        return loss.item();
    };

    std::vector<uint64_t> trace_a, trace_b;
    const double base_a = eval(&trace_a);
    const double base_b = eval(&trace_b);
    if (std::memcmp(&base_a, &base_b, sizeof(double)) != 0 || trace_a != trace_b)
        throw std::runtime_error("check_gradient: loss function is not deterministic across evaluations");

    leaf.set_grad_enabled(true);
    leaf.zero_grad();
    {
        Graph g;
        Tensor loss = build_loss(g);
        g.backward(loss);
    }
    std::vector<double> analytic = leaf.grad();

    GradCheckReport rep;
    const size_t n = leaf.numel();
    for (size_t i = 0; i < n; ++i) {
        const double saved = leaf.values()[i];
        const double a = analytic[i];

        // No single step suits every coordinate: a stiff path wants a small
        // step (truncation), a near-dead one wants a large step (roundoff).
        // A coordinate counts as confirmed once any step agrees.
        double rel = std::numeric_limits<double>::infinity();
        bool measured = false;
        for (const double h : {step, step * 10.0, step * 0.1, step * 100.0}) {
            std::vector<uint64_t> tp, tm;
            leaf.values()[i] = saved + h;
            const double lp = eval(&tp);
            leaf.values()[i] = saved - h;
            const double lm = eval(&tm);
            leaf.values()[i] = saved;
            if (tp != tm) continue;
            const double fd = (lp - lm) / (2.0 * h);
            // The floor makes the comparison absolute for near-dead
            // coordinates, which central differences cannot resolve
            // relative to the loss scale.
            const double denom = std::max({std::fabs(a), std::fabs(fd), 1e-6});
            rel = std::min(rel, std::fabs(a - fd) / denom);
            measured = true;
            if (rel <= tol) break;
        }
        if (!measured) {
            rep.excluded.push_back(static_cast<int>(i));
            continue;
        }
        rep.max_rel_error = std::max(rep.max_rel_error, rel);
        ++rep.n_checked;
    }
    rep.pass = rep.max_rel_error <= tol;
    return rep;
}

// --- optimizer ---------------------------------------------------------------

// SGD with Nesterov momentum and decoupled-free (classic) L2 weight decay:
//   g = grad + wd * p;  v = mu * v + g;  p -= lr * (g + mu * v)
class SgdNesterov {
   public:
    SgdNesterov(double lr, double momentum, double weight_decay)
        : lr_(lr), momentum_(momentum), weight_decay_(weight_decay) {
        if (!(lr > 0.0)) throw std::invalid_argument("SgdNesterov: learning rate must be positive");
        if (momentum < 0.0 || momentum >= 1.0) throw std::invalid_argument("SgdNesterov: momentum must be in [0, 1)");
        if (weight_decay < 0.0) throw std::invalid_argument("SgdNesterov: weight decay must be non-negative");
    }

    double lr() const { return lr_; }

    void set_lr(double lr) {
        if (!(lr > 0.0)) throw std::invalid_argument("SgdNesterov: learning rate must be positive");
        lr_ = lr;
    }

    void step(std::vector<Tensor>& params) {
        for (Tensor& p : params) {
            std::vector<double>& vel = velocity_[p.id()];
            if (vel.size() != p.numel()) vel.assign(p.numel(), 0.0);
            const size_t n = p.numel();
            for (size_t i = 0; i < n; ++i) {
                const double g = p.grad()[i] + weight_decay_ * p.values()[i];
                vel[i] = momentum_ * vel[i] + g;
                p.values()[i] -= lr_ * (g + momentum_ * vel[i]);
            }
        }
    }

   private:
    double lr_, momentum_, weight_decay_;
    std::map<const void*, std::vector<double>> velocity_;
};

}  // namespace cfsl
