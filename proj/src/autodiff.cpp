#include "cdit/autodiff.hpp"

#include <atomic>
#include <cmath>
#include <cstring>
#include <limits>
#include <unordered_set>

#include "cdit/kernels.hpp"

namespace cdit {

namespace {

thread_local bool g_grad_enabled = true;

bool want_grad(const Tensor& t) {
    return g_grad_enabled && t.requires_grad;
}

Node& attach(Tensor& out, std::vector<Tensor> parents) {
    out.node = std::make_shared<Node>();
    out.node->parents = std::move(parents);
    return *out.node;
}

}  // namespace

bool grad_enabled() { return g_grad_enabled; }

NoGradGuard::NoGradGuard() : previous_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = previous_; }

void backward(Tensor& loss) {
    require(loss.numel() == 1, "backward: loss must be a scalar");
    require(loss.requires_grad, "backward: loss does not require gradients");
    loss.ensure_grad();
    (*loss.grad)[0] = real(1);

    struct Frame {
        Tensor t;
        bool expanded;
    };
    std::vector<Tensor> topo;
    std::unordered_set<Node*> visited;
    std::vector<Frame> stack;
    stack.push_back({loss, false});
    while (!stack.empty()) {
        Frame f = std::move(stack.back());
        stack.pop_back();
        Node* n = f.t.node.get();
        if (n == nullptr) continue;
        if (f.expanded) {
            topo.push_back(std::move(f.t));
            continue;
        }
        if (visited.count(n)) continue;
        visited.insert(n);
        stack.push_back({f.t, true});
        for (const Tensor& p : n->parents) {
            if (p.node) stack.push_back({p, false});
        }
    }
    for (auto it = topo.rbegin(); it != topo.rend(); ++it) {
        if (it->node->backward) {
            it->node->backward(*it);
        }
    }
}

namespace ops {

Tensor matmul(const Tensor& a, const Tensor& b) {
    require(a.is_matrix() && b.is_matrix(), "matmul: operands must be matrices");
    require(a.cols() == b.rows(), "matmul: inner dimensions differ, " + shape_str(a.shape) +
                                      " vs " + shape_str(b.shape));
    const int m = a.rows(), k = a.cols(), n = b.cols();
    Tensor out = Tensor::zeros({m, n}, want_grad(a) || want_grad(b));
    kern::matmul_nn(a.ptr(), b.ptr(), out.ptr(), m, k, n, false);
    if (out.requires_grad) {
        attach(out, {a, b}).backward = [m, k, n](const Tensor& o) {
            const Tensor& a = o.node->parents[0];
            const Tensor& b = o.node->parents[1];
            if (a.requires_grad) {
                kern::matmul_nt(o.grad_ptr(), b.ptr(), a.grad->data(), m, n, k, true);
            }
            if (b.requires_grad) {
                kern::matmul_tn(a.ptr(), o.grad_ptr(), b.grad->data(), k, m, n, true);
            }
        };
    }
    return out;
}

Tensor matmul_nt(const Tensor& a, const Tensor& b) {
    require(a.is_matrix() && b.is_matrix(), "matmul_nt: operands must be matrices");
    require(a.cols() == b.cols(), "matmul_nt: inner dimensions differ, " + shape_str(a.shape) +
                                      " vs " + shape_str(b.shape));
    const int m = a.rows(), k = a.cols(), n = b.rows();
    Tensor out = Tensor::zeros({m, n}, want_grad(a) || want_grad(b));
    kern::matmul_nt(a.ptr(), b.ptr(), out.ptr(), m, k, n, false);
    if (out.requires_grad) {
        attach(out, {a, b}).backward = [m, k, n](const Tensor& o) {
            const Tensor& a = o.node->parents[0];
            const Tensor& b = o.node->parents[1];
            if (a.requires_grad) {
                kern::matmul_nn(o.grad_ptr(), b.ptr(), a.grad->data(), m, n, k, true);
            }
            if (b.requires_grad) {
                kern::matmul_tn(o.grad_ptr(), a.ptr(), b.grad->data(), n, m, k, true);
            }
        };
    }
    return out;
}

namespace {

Tensor elementwise_binary(const Tensor& a, const Tensor& b, const char* name,
                          void (*fwd)(const real*, const real*, real*, std::size_t),
                          void (*bwd)(const Tensor&)) {
    require(a.shape == b.shape, std::string(name) + ": shape mismatch, " + shape_str(a.shape) +
                                    " vs " + shape_str(b.shape));
    Tensor out = Tensor::zeros(a.shape, want_grad(a) || want_grad(b));
    fwd(a.ptr(), b.ptr(), out.ptr(), a.numel());
    if (out.requires_grad) {
        attach(out, {a, b}).backward = bwd;
    }
    return out;
}

}  // namespace

Tensor add(const Tensor& a, const Tensor& b) {
    return elementwise_binary(a, b, "add", kern::add, [](const Tensor& o) {
        for (int p = 0; p < 2; ++p) {
            const Tensor& t = o.node->parents[p];
            if (t.requires_grad) {
                kern::axpy(real(1), o.grad_ptr(), t.grad->data(), o.numel());
            }
        }
    });
}

Tensor sub(const Tensor& a, const Tensor& b) {
    return elementwise_binary(a, b, "sub", kern::sub, [](const Tensor& o) {
        const Tensor& a = o.node->parents[0];
        const Tensor& b = o.node->parents[1];
        if (a.requires_grad) kern::axpy(real(1), o.grad_ptr(), a.grad->data(), o.numel());
        if (b.requires_grad) kern::axpy(real(-1), o.grad_ptr(), b.grad->data(), o.numel());
    });
}

Tensor mul(const Tensor& a, const Tensor& b) {
    return elementwise_binary(a, b, "mul", kern::mul, [](const Tensor& o) {
        const Tensor& a = o.node->parents[0];
        const Tensor& b = o.node->parents[1];
        const std::size_t n = o.numel();
        if (a.requires_grad) {
            for (std::size_t i = 0; i < n; ++i) {
                (*a.grad)[i] += (*o.grad)[i] * (*b.data)[i];
            }
        }
        if (b.requires_grad) {
            for (std::size_t i = 0; i < n; ++i) {
                (*b.grad)[i] += (*o.grad)[i] * (*a.data)[i];
            }
        }
    });
}

Tensor scale(const Tensor& a, real alpha) {
    Tensor out = Tensor::zeros(a.shape, want_grad(a));
    kern::scale(a.ptr(), alpha, out.ptr(), a.numel());
    if (out.requires_grad) {
        attach(out, {a}).backward = [alpha](const Tensor& o) {
            const Tensor& a = o.node->parents[0];
            if (a.requires_grad) kern::axpy(alpha, o.grad_ptr(), a.grad->data(), o.numel());
        };
    }
    return out;
}

Tensor add_bias_rows(const Tensor& x, const Tensor& bias) {
    require(x.is_matrix() && bias.is_matrix() && bias.rows() == 1 && bias.cols() == x.cols(),
            "add_bias_rows: bias must be (1 x cols)");
    const int rows = x.rows(), cols = x.cols();
    Tensor out = Tensor::zeros(x.shape, want_grad(x) || want_grad(bias));
    for (int r = 0; r < rows; ++r) {
        kern::add(x.ptr() + static_cast<std::size_t>(r) * cols, bias.ptr(),
                  out.ptr() + static_cast<std::size_t>(r) * cols, cols);
    }
    if (out.requires_grad) {
        attach(out, {x, bias}).backward = [rows, cols](const Tensor& o) {
            const Tensor& x = o.node->parents[0];
            const Tensor& bias = o.node->parents[1];
            if (x.requires_grad) {
                kern::axpy(real(1), o.grad_ptr(), x.grad->data(), o.numel());
            }
            if (bias.requires_grad) {
                for (int r = 0; r < rows; ++r) {
                    kern::axpy(real(1), o.grad_ptr() + static_cast<std::size_t>(r) * cols,
                               bias.grad->data(), cols);
                }
            }
        };
    }
    return out;
}

Tensor gelu(const Tensor& x) {
    Tensor out = Tensor::zeros(x.shape, want_grad(x));
    kern::gelu(x.ptr(), out.ptr(), x.numel());
    if (out.requires_grad) {
        attach(out, {x}).backward = [](const Tensor& o) {
            const Tensor& x = o.node->parents[0];
            if (x.requires_grad) {
                kern::gelu_backward(x.ptr(), o.grad_ptr(), x.grad->data(), o.numel());
            }
        };
    }
    return out;
}

Tensor rmsnorm_rows(const Tensor& x, real eps) {
    require(x.is_matrix(), "rmsnorm: expected a matrix");
    Tensor out = Tensor::zeros(x.shape, want_grad(x));
    kern::rmsnorm_rows(x.ptr(), out.ptr(), x.rows(), x.cols(), eps);
    if (out.requires_grad) {
        attach(out, {x}).backward = [eps](const Tensor& o) {
            const Tensor& x = o.node->parents[0];
            if (x.requires_grad) {
                kern::rmsnorm_rows_backward(x.ptr(), o.grad_ptr(), x.grad->data(), x.rows(),
                                            x.cols(), eps);
            }
        };
    }
    return out;
}

namespace {

// Shared masked-softmax forward; is_masked decides which entries are
// sentinels. Masked entries never reach exp() and come out exactly 0.
template <class MaskedFn>
Tensor softmax_forward(const Tensor& logits, MaskedFn is_masked, bool grad) {
    const int rows = logits.rows(), cols = logits.cols();
    Tensor out = Tensor::zeros(logits.shape, grad);
    std::atomic<int> degenerate{-1};
    const real* x = logits.ptr();
    real* y = out.ptr();
#pragma omp parallel for schedule(static) if (kern::parallel() && rows > 1)
    for (int r = 0; r < rows; ++r) {
        const real* xr = x + static_cast<std::size_t>(r) * cols;
        real* yr = y + static_cast<std::size_t>(r) * cols;
        real mx = -std::numeric_limits<real>::infinity();
        bool any = false;
        for (int j = 0; j < cols; ++j) {
            if (!is_masked(r, j, xr[j])) {
                any = true;
                if (xr[j] > mx) mx = xr[j];
            }
        }
        if (!any) {
            degenerate.store(r);
            continue;
        }
        real sum = 0;
        for (int j = 0; j < cols; ++j) {
            if (is_masked(r, j, xr[j])) {
                yr[j] = real(0);
            } else {
                const real e = std::exp(xr[j] - mx);
                yr[j] = e;
                sum += e;
            }
        }
        const real inv = real(1) / sum;
        for (int j = 0; j < cols; ++j) {
            yr[j] *= inv;
        }
    }
    if (degenerate.load() >= 0) {
        throw std::domain_error("softmax: row " + std::to_string(degenerate.load()) +
                                " has no admissible entry");
    }
    return out;
}

void softmax_backward(const real* p, const real* dy, real* dx, int rows, int cols) {
#pragma omp parallel for schedule(static) if (kern::parallel() && rows > 1)
    for (int r = 0; r < rows; ++r) {
        const real* pr = p + static_cast<std::size_t>(r) * cols;
        const real* dyr = dy + static_cast<std::size_t>(r) * cols;
        real* dxr = dx + static_cast<std::size_t>(r) * cols;
        real dot = 0;
        for (int j = 0; j < cols; ++j) {
            dot += dyr[j] * pr[j];
        }
        for (int j = 0; j < cols; ++j) {
            dxr[j] += pr[j] * (dyr[j] - dot);
        }
    }
}

}  // namespace

Tensor softmax_rows(const Tensor& logits) {
    require(logits.is_matrix(), "softmax: expected a matrix");
    auto sentinel = [](int, int, real v) {
        return std::isinf(v) && v < 0;
    };
    Tensor out = softmax_forward(logits, sentinel, want_grad(logits));
    if (out.requires_grad) {
        attach(out, {logits}).backward = [](const Tensor& o) {
            const Tensor& logits = o.node->parents[0];
            if (logits.requires_grad) {
                softmax_backward(o.ptr(), o.grad_ptr(), logits.grad->data(), o.rows(), o.cols());
            }
        };
    }
    return out;
}

Tensor softmax_rows_masked(const Tensor& logits, const BranchMask& mask) {
    require(logits.is_matrix(), "softmax: expected a matrix");
    require(logits.cols() == mask.total(),
            "softmax: key count does not match mask layout");
    require(logits.rows() <= mask.total(), "softmax: more query rows than layout tokens");
    auto structural = [&mask](int r, int j, real) { return mask.masked(r, j); };
    Tensor out = softmax_forward(logits, structural, want_grad(logits));
    if (out.requires_grad) {
        attach(out, {logits}).backward = [](const Tensor& o) {
            const Tensor& logits = o.node->parents[0];
            if (logits.requires_grad) {
                softmax_backward(o.ptr(), o.grad_ptr(), logits.grad->data(), o.rows(), o.cols());
            }
        };
    }
    return out;
}

Tensor rope_rotate(const Tensor& x, const PositionGrid& grid, const RopeParams& params) {
    require(x.is_matrix(), "rope: expected a matrix");
    require(x.cols() == params.head_dim, "rope: feature width does not match head_dim");
    require(static_cast<std::size_t>(x.rows()) == grid.size(),
            "rope: token count does not match grid length");
    Tensor out = Tensor::zeros(x.shape, want_grad(x));
    rope_rotate_raw(x.ptr(), out.ptr(), x.rows(), grid, params, false);
    if (out.requires_grad) {
        PositionGrid g = grid;
        RopeParams p = params;
        attach(out, {x}).backward = [g, p](const Tensor& o) {
            const Tensor& x = o.node->parents[0];
            if (x.requires_grad) {
                Tensor tmp = Tensor::zeros(o.shape);
                rope_rotate_raw(o.grad_ptr(), tmp.ptr(), o.rows(), g, p, true);
                kern::axpy(real(1), tmp.ptr(), x.grad->data(), o.numel());
            }
        };
    }
    return out;
}

Tensor slice_rows(const Tensor& x, int begin, int count) {
    require(x.is_matrix(), "slice_rows: expected a matrix");
    require(begin >= 0 && count >= 0 && begin + count <= x.rows(), "slice_rows: range out of bounds");
    const int cols = x.cols();
    Tensor out = Tensor::zeros({count, cols}, want_grad(x));
    std::memcpy(out.ptr(), x.ptr() + static_cast<std::size_t>(begin) * cols,
                static_cast<std::size_t>(count) * cols * sizeof(real));
    if (out.requires_grad) {
        attach(out, {x}).backward = [begin, cols](const Tensor& o) {
            const Tensor& x = o.node->parents[0];
            if (x.requires_grad) {
                kern::axpy(real(1), o.grad_ptr(),
                           x.grad->data() + static_cast<std::size_t>(begin) * cols, o.numel());
            }
        };
    }
    return out;
}

Tensor slice_cols(const Tensor& x, int begin, int count) {
    require(x.is_matrix(), "slice_cols: expected a matrix");
    require(begin >= 0 && count >= 0 && begin + count <= x.cols(), "slice_cols: range out of bounds");
    const int rows = x.rows(), cols = x.cols();
    Tensor out = Tensor::zeros({rows, count}, want_grad(x));
    for (int r = 0; r < rows; ++r) {
        std::memcpy(out.ptr() + static_cast<std::size_t>(r) * count,
                    x.ptr() + static_cast<std::size_t>(r) * cols + begin,
                    static_cast<std::size_t>(count) * sizeof(real));
    }
    if (out.requires_grad) {
        attach(out, {x}).backward = [begin, rows, cols, count](const Tensor& o) {
            const Tensor& x = o.node->parents[0];
            if (!x.requires_grad) return;
            for (int r = 0; r < rows; ++r) {
                real* dst = x.grad->data() + static_cast<std::size_t>(r) * cols + begin;
                const real* src = o.grad_ptr() + static_cast<std::size_t>(r) * count;
                for (int j = 0; j < count; ++j) {
                    dst[j] += src[j];
                }
            }
        };
    }
    return out;
}

Tensor concat_rows(const std::vector<Tensor>& parts) {
    require(!parts.empty(), "concat_rows: no parts");
    const int cols = parts.front().cols();
    int rows = 0;
    bool grad = false;
    for (const Tensor& p : parts) {
        require(p.cols() == cols, "concat_rows: column mismatch");
        rows += p.rows();
        grad = grad || want_grad(p);
    }
    Tensor out = Tensor::zeros({rows, cols}, grad);
    std::size_t offset = 0;
    for (const Tensor& p : parts) {
        std::memcpy(out.ptr() + offset, p.ptr(), p.numel() * sizeof(real));
        offset += p.numel();
    }
    if (out.requires_grad) {
        attach(out, parts).backward = [](const Tensor& o) {
            std::size_t offset = 0;
            for (const Tensor& p : o.node->parents) {
                if (p.requires_grad) {
                    kern::axpy(real(1), o.grad_ptr() + offset, p.grad->data(), p.numel());
                }
                offset += p.numel();
            }
        };
    }
    return out;
}

Tensor concat_cols(const std::vector<Tensor>& parts) {
    require(!parts.empty(), "concat_cols: no parts");
    const int rows = parts.front().rows();
    int cols = 0;
    bool grad = false;
    for (const Tensor& p : parts) {
        require(p.rows() == rows, "concat_cols: row mismatch");
        cols += p.cols();
        grad = grad || want_grad(p);
    }
    Tensor out = Tensor::zeros({rows, cols}, grad);
    int col_offset = 0;
    for (const Tensor& p : parts) {
        const int pc = p.cols();
        for (int r = 0; r < rows; ++r) {
            std::memcpy(out.ptr() + static_cast<std::size_t>(r) * cols + col_offset,
                        p.ptr() + static_cast<std::size_t>(r) * pc,
                        static_cast<std::size_t>(pc) * sizeof(real));
        }
        col_offset += pc;
    }
    if (out.requires_grad) {
        attach(out, parts).backward = [rows, cols](const Tensor& o) {
            int col_offset = 0;
            for (const Tensor& p : o.node->parents) {
                const int pc = p.cols();
                if (p.requires_grad) {
                    for (int r = 0; r < rows; ++r) {
                        real* dst = p.grad->data() + static_cast<std::size_t>(r) * pc;
                        const real* src =
                            o.grad_ptr() + static_cast<std::size_t>(r) * cols + col_offset;
                        for (int j = 0; j < pc; ++j) {
                            dst[j] += src[j];
                        }
                    }
                }
                col_offset += pc;
            }
        };
    }
    return out;
}

Tensor embed_rows(const Tensor& table, const std::vector<int>& ids) {
    require(table.is_matrix(), "embed_rows: table must be a matrix");
    const int vocab = table.rows(), d = table.cols();
    for (int id : ids) {
        if (id < 0 || id >= vocab) {
            throw std::domain_error("embed_rows: id " + std::to_string(id) +
                                    " outside vocabulary of size " + std::to_string(vocab));
        }
    }
    Tensor out = Tensor::zeros({static_cast<int>(ids.size()), d}, want_grad(table));
    for (std::size_t i = 0; i < ids.size(); ++i) {
        std::memcpy(out.ptr() + i * d, table.ptr() + static_cast<std::size_t>(ids[i]) * d,
                    static_cast<std::size_t>(d) * sizeof(real));
    }
    if (out.requires_grad) {
        std::vector<int> captured = ids;
        attach(out, {table}).backward = [captured, d](const Tensor& o) {
            const Tensor& table = o.node->parents[0];
            if (!table.requires_grad) return;
            for (std::size_t i = 0; i < captured.size(); ++i) {
                kern::axpy(real(1), o.grad_ptr() + i * d,
                           table.grad->data() + static_cast<std::size_t>(captured[i]) * d, d);
            }
        };
    }
    return out;
}

Tensor modulate_rows(const Tensor& x, const Tensor& s, const Tensor& b, int row_begin,
                     int row_end) {
    require(x.is_matrix(), "modulate_rows: expected a matrix");
    const int rows = x.rows(), cols = x.cols();
    require(s.is_matrix() && s.rows() == 1 && s.cols() == cols, "modulate_rows: bad scale shape");
    require(b.is_matrix() && b.rows() == 1 && b.cols() == cols, "modulate_rows: bad shift shape");
    require(0 <= row_begin && row_begin <= row_end && row_end <= rows,
            "modulate_rows: row range out of bounds");
    Tensor out = Tensor::zeros(x.shape, want_grad(x) || want_grad(s) || want_grad(b));
    const real* sv = s.ptr();
    const real* bv = b.ptr();
    for (int r = 0; r < rows; ++r) {
        const real* xr = x.ptr() + static_cast<std::size_t>(r) * cols;
        real* yr = out.ptr() + static_cast<std::size_t>(r) * cols;
        if (r >= row_begin && r < row_end) {
            for (int j = 0; j < cols; ++j) {
                yr[j] = xr[j] * (real(1) + sv[j]) + bv[j];
            }
        } else {
            std::memcpy(yr, xr, static_cast<std::size_t>(cols) * sizeof(real));
        }
    }
    if (out.requires_grad) {
        attach(out, {x, s, b}).backward = [row_begin, row_end, rows, cols](const Tensor& o) {
            const Tensor& x = o.node->parents[0];
            const Tensor& s = o.node->parents[1];
            const Tensor& b = o.node->parents[2];
            for (int r = 0; r < rows; ++r) {
                const real* dyr = o.grad_ptr() + static_cast<std::size_t>(r) * cols;
                const bool inside = r >= row_begin && r < row_end;
                if (x.requires_grad) {
                    real* dxr = x.grad->data() + static_cast<std::size_t>(r) * cols;
                    if (inside) {
                        const real* sv = s.ptr();
                        for (int j = 0; j < cols; ++j) {
                            dxr[j] += dyr[j] * (real(1) + sv[j]);
                        }
                    } else {
                        for (int j = 0; j < cols; ++j) {
                            dxr[j] += dyr[j];
                        }
                    }
                }
                if (inside) {
                    const real* xr = x.ptr() + static_cast<std::size_t>(r) * cols;
                    if (s.requires_grad) {
                        real* ds = s.grad->data();
                        for (int j = 0; j < cols; ++j) {
                            ds[j] += dyr[j] * xr[j];
                        }
                    }
                    if (b.requires_grad) {
                        real* db = b.grad->data();
                        for (int j = 0; j < cols; ++j) {
                            db[j] += dyr[j];
                        }
                    }
                }
            }
        };
    }
    return out;
}

Tensor mean_sq_diff(const Tensor& a, const Tensor& b) {
    require(a.shape == b.shape, "mean_sq_diff: shape mismatch, " + shape_str(a.shape) + " vs " +
                                    shape_str(b.shape));
    const std::size_t n = a.numel();
    require(n > 0, "mean_sq_diff: empty tensors");
    double acc = 0;
    for (std::size_t i = 0; i < n; ++i) {
        const double d = double((*a.data)[i]) - double((*b.data)[i]);
        acc += d * d;
    }
    Tensor out = Tensor::zeros({1}, want_grad(a) || want_grad(b));
    (*out.data)[0] = static_cast<real>(acc / static_cast<double>(n));
    if (out.requires_grad) {
        attach(out, {a, b}).backward = [n](const Tensor& o) {
            const Tensor& a = o.node->parents[0];
            const Tensor& b = o.node->parents[1];
            const real g = (*o.grad)[0] * real(2) / static_cast<real>(n);
            for (std::size_t i = 0; i < n; ++i) {
                const real d = (*a.data)[i] - (*b.data)[i];
                if (a.requires_grad) (*a.grad)[i] += g * d;
                if (b.requires_grad) (*b.grad)[i] -= g * d;
            }
        };
    }
    return out;
}

}  // namespace ops

}  // namespace cdit
