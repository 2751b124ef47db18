#pragma once

#include <cstddef>
#include <functional>
#include <memory>
#include <string>
#include <utility>
#include <vector>

#include "osseg/common.hpp"
#include "osseg/tensor.hpp"

namespace osseg {

// A named trainable tensor plus its optimizer state.
struct Parameter {
    std::string name;
    Tensor value;
    Tensor adam_m;
    Tensor adam_v;

    Parameter(std::string n, Tensor v)
        : name(std::move(n)), value(std::move(v)), adam_m(Tensor::zeros(value.shape)), adam_v(Tensor::zeros(value.shape)) {}
};

// Reverse-mode tape. Records a DAG of fp64 tensor ops during the forward
// pass; backward() visits nodes once in reverse order and accumulates
// gradients (shared subexpressions sum). Single-threaded during recording.
class Tape {
  public:
    struct Value {
        std::size_t id = static_cast<std::size_t>(-1);
    };

    explicit Tape(bool check_finite = true) : check_finite_(check_finite) {}

    // --- low-level extension API (used by fused ops such as the selective scan)

    using BackFn = std::function<void(Tape&, std::size_t)>;

    Value make_node(Tensor val, BackFn back) {
        if (check_finite_ && !val.all_finite()) throw numeric_error("forward pass produced a non-finite value");
        nodes_.push_back(Node{std::move(val), Tensor(), std::move(back)});
        return Value{nodes_.size() - 1};
    }

    const Tensor& val(Value v) const { return nodes_[v.id].val; }
    const Tensor& val(std::size_t id) const { return nodes_[id].val; }
    Tensor& grad_buf(std::size_t id) { return nodes_[id].grad; }
    const Tensor& grad(Value v) const { return nodes_[v.id].grad; }

    // --- leaves

    Value input(Tensor v) { return make_node(std::move(v), nullptr); }

    Value param(Parameter& p) {
        for (const auto& [par, id] : bindings_)
            if (par == &p) return Value{id};
        Value v = make_node(p.value, nullptr);
        bindings_.emplace_back(&p, v.id);
        return v;
    }

    const std::vector<std::pair<Parameter*, std::size_t>>& bindings() const { return bindings_; }

    const Tensor& grad_of(const Parameter& p) const {
        for (const auto& [par, id] : bindings_)
            if (par == &p) return nodes_[id].grad;
        throw contract_error("grad_of: parameter not bound to this tape");
    }

    // --- core ops

    Value matmul(Value a, Value b) {
        const Tensor& A = val(a);
        const Tensor& B = val(b);
        require(A.ndim() == 2 && B.ndim() == 2 && A.shape[1] == B.shape[0], "matmul: shape mismatch");
        const std::size_t m = A.shape[0], k = A.shape[1], n = B.shape[1];
        Tensor Y = Tensor::zeros({m, n});
        for (std::size_t i = 0; i < m; ++i) {
            const double* arow = &A.data[i * k];
            double* yrow = &Y.data[i * n];
            for (std::size_t kk = 0; kk < k; ++kk) {
                const double c = arow[kk];
                if (c == 0.0) continue;
                const double* brow = &B.data[kk * n];
                for (std::size_t j = 0; j < n; ++j) yrow[j] += c * brow[j];
            }
        }
        return make_node(std::move(Y), [a, b, m, k, n](Tape& t, std::size_t self) {
            const Tensor& g = t.grad_buf(self);
            const Tensor& A = t.val(a);
            const Tensor& B = t.val(b);
            Tensor& ga = t.grad_buf(a.id);
            Tensor& gb = t.grad_buf(b.id);
            for (std::size_t i = 0; i < m; ++i) {
                const double* grow = &g.data[i * n];
                double* garow = &ga.data[i * k];
                const double* arow = &A.data[i * k];
                for (std::size_t kk = 0; kk < k; ++kk) {
                    const double* brow = &B.data[kk * n];
                    double acc = 0.0;
                    for (std::size_t j = 0; j < n; ++j) acc += grow[j] * brow[j];
                    garow[kk] += acc;
                    const double c = arow[kk];
                    if (c == 0.0) continue;
                    double* gbrow = &gb.data[kk * n];
                    for (std::size_t j = 0; j < n; ++j) gbrow[j] += c * grow[j];
                }
            }
        });
    }

    Value add(Value a, Value b) {
        const Tensor& A = val(a);
        const Tensor& B = val(b);
        require(A.same_shape(B), "add: shape mismatch");
        Tensor Y = A;
        for (std::size_t i = 0; i < Y.size(); ++i) Y.data[i] += B.data[i];
        return make_node(std::move(Y), [a, b](Tape& t, std::size_t self) {
            const Tensor& g = t.grad_buf(self);
            Tensor& ga = t.grad_buf(a.id);
            Tensor& gb = t.grad_buf(b.id);
            for (std::size_t i = 0; i < g.size(); ++i) {
                ga.data[i] += g.data[i];
                gb.data[i] += g.data[i];
            }
        });
    }

    Value sub(Value a, Value b) {
        const Tensor& A = val(a);
        const Tensor& B = val(b);
        require(A.same_shape(B), "sub: shape mismatch");
        Tensor Y = A;
        for (std::size_t i = 0; i < Y.size(); ++i) Y.data[i] -= B.data[i];
        return make_node(std::move(Y), [a, b](Tape& t, std::size_t self) {
            const Tensor& g = t.grad_buf(self);
            Tensor& ga = t.grad_buf(a.id);
            Tensor& gb = t.grad_buf(b.id);
            for (std::size_t i = 0; i < g.size(); ++i) {
                ga.data[i] += g.data[i];
                gb.data[i] -= g.data[i];
            }
        });
    }

    // [m,n] + [n] broadcast over rows
    Value add_rowvec(Value a, Value bias) {
        const Tensor& A = val(a);
        const Tensor& B = val(bias);
        require(A.ndim() == 2 && B.size() == A.shape[1], "add_rowvec: shape mismatch");
        const std::size_t m = A.shape[0], n = A.shape[1];
        Tensor Y = A;
        for (std::size_t i = 0; i < m; ++i)
            for (std::size_t j = 0; j < n; ++j) Y.data[i * n + j] += B.data[j];
        return make_node(std::move(Y), [a, bias, m, n](Tape& t, std::size_t self) {
            const Tensor& g = t.grad_buf(self);
            Tensor& ga = t.grad_buf(a.id);
            Tensor& gb = t.grad_buf(bias.id);
            for (std::size_t i = 0; i < m; ++i)
                for (std::size_t j = 0; j < n; ++j) {
                    ga.data[i * n + j] += g.data[i * n + j];
                    gb.data[j] += g.data[i * n + j];
                }
        });
    }

    Value mul(Value a, Value b) {
        const Tensor& A = val(a);
        const Tensor& B = val(b);
        require(A.same_shape(B), "mul: shape mismatch");
        Tensor Y = A;
        for (std::size_t i = 0; i < Y.size(); ++i) Y.data[i] *= B.data[i];
        return make_node(std::move(Y), [a, b](Tape& t, std::size_t self) {
            const Tensor& g = t.grad_buf(self);
            const Tensor& A = t.val(a);
            const Tensor& B = t.val(b);
            Tensor& ga = t.grad_buf(a.id);
            Tensor& gb = t.grad_buf(b.id);
            for (std::size_t i = 0; i < g.size(); ++i) {
                ga.data[i] += g.data[i] * B.data[i];
                gb.data[i] += g.data[i] * A.data[i];
            }
        });
    }

    Value scale(Value a, double c) {
        Tensor Y = val(a);
        for (double& v : Y.data) v *= c;
        return make_node(std::move(Y), [a, c](Tape& t, std::size_t self) {
            const Tensor& g = t.grad_buf(self);
            Tensor& ga = t.grad_buf(a.id);
            for (std::size_t i = 0; i < g.size(); ++i) ga.data[i] += c * g.data[i];
        });
    }

    Value sigmoid(Value a) {
        Tensor Y = val(a);
        for (double& v : Y.data) v = sigmoid_scalar(v);
        return make_node(std::move(Y), [a](Tape& t, std::size_t self) {
            const Tensor& g = t.grad_buf(self);
            const Tensor& Y = t.val(self);
            Tensor& ga = t.grad_buf(a.id);
            for (std::size_t i = 0; i < g.size(); ++i) ga.data[i] += g.data[i] * Y.data[i] * (1.0 - Y.data[i]);
        });
    }

    Value tanh_op(Value a) {
        Tensor Y = val(a);
        for (double& v : Y.data) v = std::tanh(v);
        return make_node(std::move(Y), [a](Tape& t, std::size_t self) {
            const Tensor& g = t.grad_buf(self);
            const Tensor& Y = t.val(self);
            Tensor& ga = t.grad_buf(a.id);
            for (std::size_t i = 0; i < g.size(); ++i) ga.data[i] += g.data[i] * (1.0 - Y.data[i] * Y.data[i]);
        });
    }

    Value softplus(Value a) {
        Tensor Y = val(a);
        for (double& v : Y.data) v = softplus_scalar(v);
        return make_node(std::move(Y), [a](Tape& t, std::size_t self) {
            const Tensor& g = t.grad_buf(self);
            const Tensor& X = t.val(a);
            Tensor& ga = t.grad_buf(a.id);
            for (std::size_t i = 0; i < g.size(); ++i) ga.data[i] += g.data[i] * sigmoid_scalar(X.data[i]);
        });
    }

    Value exp_op(Value a) {
        Tensor Y = val(a);
        for (double& v : Y.data) v = std::exp(v);
        return make_node(std::move(Y), [a](Tape& t, std::size_t self) {
            const Tensor& g = t.grad_buf(self);
            const Tensor& Y = t.val(self);
            Tensor& ga = t.grad_buf(a.id);
            for (std::size_t i = 0; i < g.size(); ++i) ga.data[i] += g.data[i] * Y.data[i];
        });
    }

    Value silu(Value a) {
        Tensor Y = val(a);
        for (double& v : Y.data) v = v * sigmoid_scalar(v);
        return make_node(std::move(Y), [a](Tape& t, std::size_t self) {
            const Tensor& g = t.grad_buf(self);
            const Tensor& X = t.val(a);
            Tensor& ga = t.grad_buf(a.id);
            for (std::size_t i = 0; i < g.size(); ++i) {
                const double s = sigmoid_scalar(X.data[i]);
                ga.data[i] += g.data[i] * s * (1.0 + X.data[i] * (1.0 - s));
            }
        });
    }

    // row-wise softmax, numerically shifted by the row max
    Value softmax_rows(Value a) {
        const Tensor& A = val(a);
        require(A.ndim() == 2, "softmax_rows: rank-2 input required");
        const std::size_t m = A.shape[0], n = A.shape[1];
        Tensor Y = A;
        for (std::size_t i = 0; i < m; ++i) {
            double* row = &Y.data[i * n];
            double mx = row[0];
            for (std::size_t j = 1; j < n; ++j) mx = std::max(mx, row[j]);
            double sum = 0.0;
            for (std::size_t j = 0; j < n; ++j) {
                row[j] = std::exp(row[j] - mx);
                sum += row[j];
            }
            for (std::size_t j = 0; j < n; ++j) row[j] /= sum;
        }
        return make_node(std::move(Y), [a, m, n](Tape& t, std::size_t self) {
            const Tensor& g = t.grad_buf(self);
            const Tensor& Y = t.val(self);
            Tensor& ga = t.grad_buf(a.id);
            for (std::size_t i = 0; i < m; ++i) {
                const double* grow = &g.data[i * n];
                const double* yrow = &Y.data[i * n];
                double dot = 0.0;
                for (std::size_t j = 0; j < n; ++j) dot += grow[j] * yrow[j];
                for (std::size_t j = 0; j < n; ++j) ga.data[i * n + j] += (grow[j] - dot) * yrow[j];
            }
        });
    }

    Value concat_cols(const std::vector<Value>& parts) {
        require(!parts.empty(), "concat_cols: empty input list");
        const std::size_t m = val(parts[0]).rows();
        std::size_t total = 0;
        for (Value p : parts) {
            require(val(p).ndim() == 2 && val(p).rows() == m, "concat_cols: row mismatch");
            total += val(p).shape[1];
        }
        Tensor Y = Tensor::zeros({m, total});
        std::size_t off = 0;
        std::vector<std::size_t> offsets;
        for (Value p : parts) {
            const Tensor& P = val(p);
            const std::size_t n = P.shape[1];
            offsets.push_back(off);
            for (std::size_t i = 0; i < m; ++i)
                for (std::size_t j = 0; j < n; ++j) Y.data[i * total + off + j] = P.data[i * n + j];
            off += n;
        }
        auto parts_copy = parts;
        return make_node(std::move(Y), [parts_copy, offsets, m, total](Tape& t, std::size_t self) {
            const Tensor& g = t.grad_buf(self);
            for (std::size_t pi = 0; pi < parts_copy.size(); ++pi) {
                Tensor& gp = t.grad_buf(parts_copy[pi].id);
                const std::size_t n = gp.cols();
                const std::size_t off = offsets[pi];
                for (std::size_t i = 0; i < m; ++i)
                    for (std::size_t j = 0; j < n; ++j) gp.data[i * n + j] += g.data[i * total + off + j];
            }
        });
    }

    Value slice_cols(Value a, std::size_t c0, std::size_t c1) {
        const Tensor& A = val(a);
        require(A.ndim() == 2 && c0 < c1 && c1 <= A.shape[1], "slice_cols: bad range");
        const std::size_t m = A.shape[0], n = A.shape[1], w = c1 - c0;
        Tensor Y = Tensor::zeros({m, w});
        for (std::size_t i = 0; i < m; ++i)
            for (std::size_t j = 0; j < w; ++j) Y.data[i * w + j] = A.data[i * n + c0 + j];
        return make_node(std::move(Y), [a, c0, m, n, w](Tape& t, std::size_t self) {
            const Tensor& g = t.grad_buf(self);
            Tensor& ga = t.grad_buf(a.id);
            for (std::size_t i = 0; i < m; ++i)
                for (std::size_t j = 0; j < w; ++j) ga.data[i * n + c0 + j] += g.data[i * w + j];
        });
    }

    // Row gather; index -1 yields a zero row. Backward scatter-adds.
    Value gather_rows(Value a, std::vector<std::ptrdiff_t> idx) {
        const Tensor& A = val(a);
        require(A.ndim() == 2, "gather_rows: rank-2 input required");
        const std::size_t n = A.shape[1];
        const std::size_t m = idx.size();
        Tensor Y = Tensor::zeros({m, n});
        for (std::size_t i = 0; i < m; ++i) {
            const std::ptrdiff_t s = idx[i];
            if (s < 0) continue;
            require(static_cast<std::size_t>(s) < A.shape[0], "gather_rows: index out of range");
            for (std::size_t j = 0; j < n; ++j) Y.data[i * n + j] = A.data[static_cast<std::size_t>(s) * n + j];
        }
        auto idx_ptr = std::make_shared<std::vector<std::ptrdiff_t>>(std::move(idx));
        return make_node(std::move(Y), [a, idx_ptr, n](Tape& t, std::size_t self) {
            const Tensor& g = t.grad_buf(self);
            Tensor& ga = t.grad_buf(a.id);
            for (std::size_t i = 0; i < idx_ptr->size(); ++i) {
                const std::ptrdiff_t s = (*idx_ptr)[i];
                if (s < 0) continue;
                for (std::size_t j = 0; j < n; ++j) ga.data[static_cast<std::size_t>(s) * n + j] += g.data[i * n + j];
            }
        });
    }

    // Per-segment mean of rows. Uses the shifted form base + sum(f_i - base)/k
    // so that a segment of identical rows pools to that row bit-exactly.
    Value segment_mean(Value a, std::vector<std::size_t> seg_of_row, std::size_t n_seg) {
        const Tensor& A = val(a);
        require(A.ndim() == 2 && seg_of_row.size() == A.shape[0], "segment_mean: row/segment mismatch");
        const std::size_t n = A.shape[1];
        std::vector<std::size_t> count(n_seg, 0);
        std::vector<std::ptrdiff_t> base(n_seg, -1);
        for (std::size_t r = 0; r < seg_of_row.size(); ++r) {
            const std::size_t s = seg_of_row[r];
            require(s < n_seg, "segment_mean: segment id out of range");
            if (base[s] < 0) base[s] = static_cast<std::ptrdiff_t>(r);
            ++count[s];
        }
        for (std::size_t s = 0; s < n_seg; ++s) require(count[s] > 0, "segment_mean: empty segment");
        Tensor Y = Tensor::zeros({n_seg, n});
        for (std::size_t r = 0; r < seg_of_row.size(); ++r) {
            const std::size_t s = seg_of_row[r];
            const double* arow = &A.data[r * n];
            const double* brow = &A.data[static_cast<std::size_t>(base[s]) * n];
            for (std::size_t j = 0; j < n; ++j) Y.data[s * n + j] += arow[j] - brow[j];
        }
        for (std::size_t s = 0; s < n_seg; ++s) {
            const double* brow = &A.data[static_cast<std::size_t>(base[s]) * n];
            const double k = static_cast<double>(count[s]);
            for (std::size_t j = 0; j < n; ++j) Y.data[s * n + j] = brow[j] + Y.data[s * n + j] / k;
        }
        auto seg_ptr = std::make_shared<std::vector<std::size_t>>(std::move(seg_of_row));
        auto cnt_ptr = std::make_shared<std::vector<std::size_t>>(std::move(count));
        return make_node(std::move(Y), [a, seg_ptr, cnt_ptr, n](Tape& t, std::size_t self) {
            const Tensor& g = t.grad_buf(self);
            Tensor& ga = t.grad_buf(a.id);
            for (std::size_t r = 0; r < seg_ptr->size(); ++r) {
                const std::size_t s = (*seg_ptr)[r];
                const double inv = 1.0 / static_cast<double>((*cnt_ptr)[s]);
                for (std::size_t j = 0; j < n; ++j) ga.data[r * n + j] += g.data[s * n + j] * inv;
            }
        });
    }

    // y = x / sqrt(mean(x^2) + eps) * gain, per row
    Value rms_norm(Value x, Value gain, double eps = 1e-6) {
        const Tensor& X = val(x);
        const Tensor& G = val(gain);
        require(X.ndim() == 2 && G.size() == X.shape[1], "rms_norm: shape mismatch");
        const std::size_t m = X.shape[0], n = X.shape[1];
        Tensor Y = Tensor::zeros({m, n});
        auto rinv = std::make_shared<std::vector<double>>(m);
        for (std::size_t i = 0; i < m; ++i) {
            double ms = 0.0;
            for (std::size_t j = 0; j < n; ++j) ms += X.data[i * n + j] * X.data[i * n + j];
            ms = ms / static_cast<double>(n) + eps;
            const double r = 1.0 / std::sqrt(ms);
            (*rinv)[i] = r;
            for (std::size_t j = 0; j < n; ++j) Y.data[i * n + j] = X.data[i * n + j] * r * G.data[j];
        }
        return make_node(std::move(Y), [x, gain, rinv, m, n](Tape& t, std::size_t self) {
            const Tensor& g = t.grad_buf(self);
            const Tensor& X = t.val(x);
            const Tensor& G = t.val(gain);
            Tensor& gx = t.grad_buf(x.id);
            Tensor& gg = t.grad_buf(gain.id);
            for (std::size_t i = 0; i < m; ++i) {
                const double r = (*rinv)[i];
                double dot = 0.0;
                for (std::size_t j = 0; j < n; ++j) {
                    const double gy = g.data[i * n + j];
                    gg.data[j] += gy * X.data[i * n + j] * r;
                    dot += gy * G.data[j] * X.data[i * n + j];
                }
                const double c = dot * r * r * r / static_cast<double>(n);
                for (std::size_t j = 0; j < n; ++j)
                    gx.data[i * n + j] += g.data[i * n + j] * G.data[j] * r - X.data[i * n + j] * c;
            }
        });
    }

    Value reduce_sum(Value a) {
        const Tensor& A = val(a);
        double s = 0.0;
        for (double v : A.data) s += v;
        return make_node(Tensor::scalar(s), [a](Tape& t, std::size_t self) {
            const double g = t.grad_buf(self).data[0];
            Tensor& ga = t.grad_buf(a.id);
            for (double& v : ga.data) v += g;
        });
    }

    Value reduce_mean(Value a) {
        const Tensor& A = val(a);
        const double n = static_cast<double>(A.size());
        double s = 0.0;
        for (double v : A.data) s += v;
        return make_node(Tensor::scalar(s / n), [a, n](Tape& t, std::size_t self) {
            const double g = t.grad_buf(self).data[0] / n;
            Tensor& ga = t.grad_buf(a.id);
            for (double& v : ga.data) v += g;
        });
    }

    // --- losses

    // mean over rows of -log softmax(logits)[target]; rows with mask=0 are
    // excluded. Throws if no row participates.
    Value cross_entropy(Value logits, const std::vector<int>& targets, const std::vector<char>* mask = nullptr) {
        const Tensor& L = val(logits);
        require(L.ndim() == 2 && targets.size() == L.shape[0], "cross_entropy: target/logit mismatch");
        if (mask) require(mask->size() == targets.size(), "cross_entropy: mask length mismatch");
        const std::size_t m = L.shape[0], k = L.shape[1];
        auto probs = std::make_shared<Tensor>(Tensor::zeros({m, k}));
        std::size_t active = 0;
        double loss = 0.0;
        for (std::size_t i = 0; i < m; ++i) {
            if (mask && !(*mask)[i]) continue;
            require(targets[i] >= 0 && static_cast<std::size_t>(targets[i]) < k, "cross_entropy: target out of range");
            const double* row = &L.data[i * k];
            double mx = row[0];
            for (std::size_t j = 1; j < k; ++j) mx = std::max(mx, row[j]);
            double sum = 0.0;
            for (std::size_t j = 0; j < k; ++j) {
                probs->data[i * k + j] = std::exp(row[j] - mx);
                sum += probs->data[i * k + j];
            }
            for (std::size_t j = 0; j < k; ++j) probs->data[i * k + j] /= sum;
            loss -= std::log(probs->data[i * k + static_cast<std::size_t>(targets[i])]);
            ++active;
        }
        require(active > 0, "cross_entropy: no rows selected");
        loss /= static_cast<double>(active);
        auto tgt = std::make_shared<std::vector<int>>(targets);
        auto msk = std::make_shared<std::vector<char>>(mask ? *mask : std::vector<char>());
        return make_node(Tensor::scalar(loss), [logits, probs, tgt, msk, m, k, active](Tape& t, std::size_t self) {
            const double g = t.grad_buf(self).data[0] / static_cast<double>(active);
            Tensor& gl = t.grad_buf(logits.id);
            for (std::size_t i = 0; i < m; ++i) {
                if (!msk->empty() && !(*msk)[i]) continue;
                for (std::size_t j = 0; j < k; ++j) {
                    double p = probs->data[i * k + j];
                    if (j == static_cast<std::size_t>((*tgt)[i])) p -= 1.0;
                    gl.data[i * k + j] += g * p;
                }
            }
        });
    }

    // mean of -[t ln s + (1-t) ln(1-s)] with scores clamped to
    // [1e-12, 1-1e-12]; gradient is zero where the clamp is active.
    Value binary_cross_entropy(Value scores, const std::vector<char>& targets) {
        const Tensor& S = val(scores);
        require(S.size() == targets.size(), "binary_cross_entropy: target length mismatch");
        const std::size_t m = S.size();
        require(m > 0, "binary_cross_entropy: empty input");
        constexpr double kEps = 1e-12;
        double loss = 0.0;
        for (std::size_t i = 0; i < m; ++i) {
            const double s = std::min(std::max(S.data[i], kEps), 1.0 - kEps);
            loss -= targets[i] ? std::log(s) : std::log(1.0 - s);
        }
        loss /= static_cast<double>(m);
        auto tgt = std::make_shared<std::vector<char>>(targets);
        return make_node(Tensor::scalar(loss), [scores, tgt, m](Tape& t, std::size_t self) {
            const double g = t.grad_buf(self).data[0] / static_cast<double>(m);
            const Tensor& S = t.val(scores);
            Tensor& gs = t.grad_buf(scores.id);
            constexpr double kEps = 1e-12;
            for (std::size_t i = 0; i < m; ++i) {
                const double raw = S.data[i];
                if (raw < kEps || raw > 1.0 - kEps) continue;
                gs.data[i] += g * ((*tgt)[i] ? -1.0 / raw : 1.0 / (1.0 - raw));
            }
        });
    }

    // mean squared error over all channels of the selected rows (all rows
    // when row_mask is null).
    Value mse(Value pred, Value target, const std::vector<char>* row_mask = nullptr) {
        const Tensor& P = val(pred);
        const Tensor& T = val(target);
        require(P.same_shape(T), "mse: shape mismatch");
        const std::size_t m = P.rows(), n = P.cols();
        if (row_mask) require(row_mask->size() == m, "mse: mask length mismatch");
        std::size_t active = 0;
        double loss = 0.0;
        for (std::size_t i = 0; i < m; ++i) {
            if (row_mask && !(*row_mask)[i]) continue;
            for (std::size_t j = 0; j < n; ++j) {
                const double d = P.data[i * n + j] - T.data[i * n + j];
                loss += d * d;
            }
            ++active;
        }
        require(active > 0, "mse: no rows selected");
        const double denom = static_cast<double>(active * n);
        loss /= denom;
        auto msk = std::make_shared<std::vector<char>>(row_mask ? *row_mask : std::vector<char>());
        return make_node(Tensor::scalar(loss), [pred, target, msk, m, n, denom](Tape& t, std::size_t self) {
            const double g = 2.0 * t.grad_buf(self).data[0] / denom;
            const Tensor& P = t.val(pred);
            const Tensor& T = t.val(target);
            Tensor& gp = t.grad_buf(pred.id);
            Tensor& gt = t.grad_buf(target.id);
            for (std::size_t i = 0; i < m; ++i) {
                if (!msk->empty() && !(*msk)[i]) continue;
                for (std::size_t j = 0; j < n; ++j) {
                    const double d = P.data[i * n + j] - T.data[i * n + j];
                    gp.data[i * n + j] += g * d;
                    gt.data[i * n + j] -= g * d;
                }
            }
        });
    }

    // per-channel binary cross-entropy between [0,1] matrices (soft targets)
    Value bce_matrix(Value pred, Value target, const std::vector<char>* row_mask = nullptr) {
        const Tensor& P = val(pred);
        const Tensor& T = val(target);
        require(P.same_shape(T), "bce_matrix: shape mismatch");
        const std::size_t m = P.rows(), n = P.cols();
        if (row_mask) require(row_mask->size() == m, "bce_matrix: mask length mismatch");
        constexpr double kEps = 1e-12;
        std::size_t active = 0;
        double loss = 0.0;
        for (std::size_t i = 0; i < m; ++i) {
            if (row_mask && !(*row_mask)[i]) continue;
            for (std::size_t j = 0; j < n; ++j) {
                const double s = std::min(std::max(P.data[i * n + j], kEps), 1.0 - kEps);
                const double t_ = T.data[i * n + j];
                loss -= t_ * std::log(s) + (1.0 - t_) * std::log(1.0 - s);
            }
            ++active;
        }
        require(active > 0, "bce_matrix: no rows selected");
        const double denom = static_cast<double>(active * n);
        loss /= denom;
        auto msk = std::make_shared<std::vector<char>>(row_mask ? *row_mask : std::vector<char>());
        return make_node(Tensor::scalar(loss), [pred, target, msk, m, n, denom](Tape& t, std::size_t self) {
            const double g = t.grad_buf(self).data[0] / denom;
            const Tensor& P = t.val(pred);
            const Tensor& T = t.val(target);
            Tensor& gp = t.grad_buf(pred.id);
            constexpr double kEps = 1e-12;
            for (std::size_t i = 0; i < m; ++i) {
                if (!msk->empty() && !(*msk)[i]) continue;
                for (std::size_t j = 0; j < n; ++j) {
                    const double s = P.data[i * n + j];
                    if (s < kEps || s > 1.0 - kEps) continue;
                    gp.data[i * n + j] += g * (-T.data[i * n + j] / s + (1.0 - T.data[i * n + j]) / (1.0 - s));
                }
            }
        });
    }

    // --- backward

    void backward(Value loss) {
        require(val(loss).size() == 1, "backward: loss must be scalar");
        for (auto& n : nodes_) n.grad = Tensor::zeros(n.val.shape);
        nodes_[loss.id].grad.data[0] = 1.0;
        for (std::size_t i = nodes_.size(); i-- > 0;) {
            if (i > loss.id) continue;  // nodes after the loss cannot influence it
            if (nodes_[i].back) nodes_[i].back(*this, i);
        }
    }

    std::size_t node_count() const { return nodes_.size(); }

    static double sigmoid_scalar(double x) {
        if (x >= 0.0) {
            const double e = std::exp(-x);
            return 1.0 / (1.0 + e);
        }
        const double e = std::exp(x);
        return e / (1.0 + e);
    }

    static double softplus_scalar(double x) {
        if (x > 30.0) return x;
        return std::log1p(std::exp(x));
    }

  private:
    struct Node {
        Tensor val;
        Tensor grad;
        BackFn back;
    };

    std::vector<Node> nodes_;
    std::vector<std::pair<Parameter*, std::size_t>> bindings_;
    bool check_finite_;
};

using Value = Tape::Value;

}  // namespace osseg
