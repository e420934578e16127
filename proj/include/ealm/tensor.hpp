#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <memory>
#include <string>
#include <unordered_set>
#include <vector>

#include "ealm/errors.hpp"
#include "ealm/rng.hpp"

namespace ealm {

// Dense row-major tensor participating in a reverse-mode gradient tape.
// A Tensor is a value-semantic handle onto a graph node; ops return new
// handles whose nodes keep their inputs alive, so a computation graph is
// freed as soon as the last handle to its result goes away. Parameters are
// leaf nodes with requires_grad=true; frozen parameters are plain leaves
// with requires_grad=false and therefore never receive gradient storage.
//
// Rank 1 and 2 are supported. Ops treat a rank-1 tensor of n elements as a
// 1 x n row where a matrix is expected, and preserve the input rank where
// the output shape matches.
template <class Real>
class Tensor {
    struct Node {
        std::vector<int> shape;
        std::vector<Real> value;
        std::vector<Real> grad;  // empty until first accumulation
        bool requires_grad = false;
        bool backward_consumed = false;
        std::string name;
        std::vector<std::shared_ptr<Node>> parents;
        std::function<void(Node&)> backfn;

        std::vector<Real>& ensure_grad() {
            if (grad.empty()) grad.assign(value.size(), Real(0));
            return grad;
        }
    };

    std::shared_ptr<Node> n_;

    explicit Tensor(std::shared_ptr<Node> n) : n_(std::move(n)) {}

    static std::shared_ptr<Node> make_node(std::vector<int> shape, std::string name) {
        auto n = std::make_shared<Node>();
        n->shape = std::move(shape);
        size_t total = 1;
        for (int d : n->shape) {
            if (d < 0) throw UsageError("tensor '" + name + "': negative dimension");
            total *= static_cast<size_t>(d);
        }
        n->value.assign(total, Real(0));
        n->name = std::move(name);
        return n;
    }

public:
    Tensor() = default;

    // ---- factories ----

    static Tensor zeros(std::vector<int> shape, std::string name = "zeros") {
        return Tensor(make_node(std::move(shape), std::move(name)));
    }

    static Tensor full(std::vector<int> shape, Real v, std::string name = "full") {
        Tensor t(make_node(std::move(shape), std::move(name)));
        std::fill(t.n_->value.begin(), t.n_->value.end(), v);
        return t;
    }

    static Tensor from_data(std::vector<int> shape, std::vector<Real> data,
                            std::string name = "const") {
        Tensor t(make_node(std::move(shape), std::move(name)));
        if (data.size() != t.n_->value.size())
            throw UsageError("tensor '" + t.n_->name + "': data length does not match shape");
        t.n_->value = std::move(data);
        return t;
    }

    static Tensor scalar(Real v, std::string name = "scalar") {
        return from_data({1}, {v}, std::move(name));
    }

    // trainable leaf, gaussian init
    static Tensor param(std::vector<int> shape, std::string name, Rng& rng, double stddev) {
        Tensor t(make_node(std::move(shape), std::move(name)));
        for (auto& v : t.n_->value) v = static_cast<Real>(rng.gaussian(0.0, stddev));
        t.n_->requires_grad = true;
        return t;
    }

    static Tensor param_zeros(std::vector<int> shape, std::string name) {
        Tensor t(make_node(std::move(shape), std::move(name)));
        t.n_->requires_grad = true;
        return t;
    }

    static Tensor param_from(std::vector<int> shape, std::vector<Real> data, std::string name) {
        Tensor t = from_data(std::move(shape), std::move(data), std::move(name));
        t.n_->requires_grad = true;
        return t;
    }

    // ---- accessors ----

    bool defined() const { return n_ != nullptr; }
    const std::vector<int>& shape() const { return n_->shape; }
    size_t size() const { return n_->value.size(); }
    int rank() const { return static_cast<int>(n_->shape.size()); }
    int rows() const { return rank() <= 1 ? 1 : n_->shape[0]; }
    int cols() const { return rank() == 0 ? 1 : n_->shape[rank() - 1]; }
    const std::string& name() const { return n_->name; }
    void set_name(std::string s) { n_->name = std::move(s); }
    bool requires_grad() const { return n_->requires_grad; }
    void set_requires_grad(bool b) { n_->requires_grad = b; }

    std::vector<Real>& value() { return n_->value; }
    const std::vector<Real>& value() const { return n_->value; }
    std::vector<Real>& grad() { return n_->grad; }
    const std::vector<Real>& grad() const { return n_->grad; }
    bool has_grad() const { return !n_->grad.empty(); }

    Real item() const {
        if (size() != 1) throw UsageError("item(): tensor '" + name() + "' is not a scalar");
        return n_->value[0];
    }
    Real at(int i, int j) const { return n_->value[static_cast<size_t>(i) * cols() + j]; }
    Real& at(int i, int j) { return n_->value[static_cast<size_t>(i) * cols() + j]; }

    void zero_grad() { n_->grad.clear(); }

    // identity of the underlying node; two handles compare equal iff they
    // alias the same storage
    bool same_node(const Tensor& o) const { return n_ == o.n_; }

    void check_finite(const char* ctx) const {
        for (Real v : n_->value) {
            if (!std::isfinite(static_cast<double>(v)))
                throw NumericError(std::string(ctx) + ": non-finite value in tensor '" + name() +
                                   "'");
        }
    }

    // ---- autodiff ----

    // Reverse pass from a scalar loss. Populates grad on every reachable
    // node with requires_grad. A node can seed a backward pass once.
    friend void backward(const Tensor& loss) {
        if (loss.size() != 1) throw UsageError("backward: loss '" + loss.name() + "' is not a scalar");
        if (loss.n_->backward_consumed)
            throw UsageError("backward: tape rooted at '" + loss.name() + "' already consumed");
        loss.n_->backward_consumed = true;
        if (!loss.n_->requires_grad) return;  // nothing trainable reachable

        // iterative post-order DFS over parents
        std::vector<Node*> order;
        std::unordered_set<Node*> seen;
        std::vector<std::pair<Node*, size_t>> stack;
        stack.push_back({loss.n_.get(), 0});
        seen.insert(loss.n_.get());
        while (!stack.empty()) {
            auto& [node, idx] = stack.back();
            if (idx < node->parents.size()) {
                Node* p = node->parents[idx].get();
                idx++;
                if (p->requires_grad && seen.insert(p).second) stack.push_back({p, 0});
            } else {
                order.push_back(node);
                stack.pop_back();
            }
        }
        loss.n_->ensure_grad()[0] = Real(1);
        for (auto it = order.rbegin(); it != order.rend(); ++it) {
            Node* node = *it;
            if (node->backfn && !node->grad.empty()) node->backfn(*node);
        }
    }

    // ---- ops ----

private:
    static Tensor op_node(std::vector<int> shape, std::string name,
                          std::vector<Tensor> inputs) {
        Tensor out(make_node(std::move(shape), std::move(name)));
        bool rg = false;
        for (auto& t : inputs) rg = rg || t.n_->requires_grad;
        out.n_->requires_grad = rg;
        if (rg) {
            out.n_->parents.reserve(inputs.size());
            for (auto& t : inputs) out.n_->parents.push_back(t.n_);
        }
        return out;
    }

    static void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
        if (a.shape() != b.shape())
            throw UsageError(std::string(op) + ": shape mismatch between '" + a.name() + "' and '" +
                             b.name() + "'");
    }

public:
    friend Tensor add(const Tensor& a, const Tensor& b) {
        require_same_shape(a, b, "add");
        Tensor out = op_node(a.shape(), "add", {a, b});
        const size_t n = a.size();
        for (size_t i = 0; i < n; i++) out.n_->value[i] = a.n_->value[i] + b.n_->value[i];
        if (out.n_->requires_grad) {
            out.n_->backfn = [](Node& nd) {
                for (int p = 0; p < 2; p++) {
                    if (!nd.parents[p]->requires_grad) continue;
                    auto& g = nd.parents[p]->ensure_grad();
                    for (size_t i = 0; i < g.size(); i++) g[i] += nd.grad[i];
                }
            };
        }
        return out;
    }

    friend Tensor sub(const Tensor& a, const Tensor& b) {
        require_same_shape(a, b, "sub");
        Tensor out = op_node(a.shape(), "sub", {a, b});
        const size_t n = a.size();
        for (size_t i = 0; i < n; i++) out.n_->value[i] = a.n_->value[i] - b.n_->value[i];
        if (out.n_->requires_grad) {
            out.n_->backfn = [](Node& nd) {
                if (nd.parents[0]->requires_grad) {
                    auto& g = nd.parents[0]->ensure_grad();
                    for (size_t i = 0; i < g.size(); i++) g[i] += nd.grad[i];
                }
                if (nd.parents[1]->requires_grad) {
                    auto& g = nd.parents[1]->ensure_grad();
                    for (size_t i = 0; i < g.size(); i++) g[i] -= nd.grad[i];
                }
            };
        }
        return out;
    }

    friend Tensor mul(const Tensor& a, const Tensor& b) {
        require_same_shape(a, b, "mul");
        Tensor out = op_node(a.shape(), "mul", {a, b});
        const size_t n = a.size();
        for (size_t i = 0; i < n; i++) out.n_->value[i] = a.n_->value[i] * b.n_->value[i];
        if (out.n_->requires_grad) {
            out.n_->backfn = [](Node& nd) {
                if (nd.parents[0]->requires_grad) {
                    auto& g = nd.parents[0]->ensure_grad();
                    const auto& bv = nd.parents[1]->value;
                    for (size_t i = 0; i < g.size(); i++) g[i] += nd.grad[i] * bv[i];
                }
                if (nd.parents[1]->requires_grad) {
                    auto& g = nd.parents[1]->ensure_grad();
                    const auto& av = nd.parents[0]->value;
                    for (size_t i = 0; i < g.size(); i++) g[i] += nd.grad[i] * av[i];
                }
            };
        }
        return out;
    }

    friend Tensor scale(const Tensor& a, double c) {
        Tensor out = op_node(a.shape(), "scale", {a});
        const size_t n = a.size();
        const Real rc = static_cast<Real>(c);
        for (size_t i = 0; i < n; i++) out.n_->value[i] = a.n_->value[i] * rc;
        if (out.n_->requires_grad) {
            out.n_->backfn = [rc](Node& nd) {
                auto& g = nd.parents[0]->ensure_grad();
                for (size_t i = 0; i < g.size(); i++) g[i] += nd.grad[i] * rc;
            };
        }
        return out;
    }

    // broadcast a row vector over every row of a
    friend Tensor add_rowvec(const Tensor& a, const Tensor& b) {
        const int m = a.rows(), n = a.cols();
        if (b.size() != static_cast<size_t>(n))
            throw UsageError("add_rowvec: '" + b.name() + "' does not match columns of '" +
                             a.name() + "'");
        Tensor out = op_node(a.shape(), "add_rowvec", {a, b});
        for (int i = 0; i < m; i++)
            for (int j = 0; j < n; j++)
                out.n_->value[static_cast<size_t>(i) * n + j] =
                    a.n_->value[static_cast<size_t>(i) * n + j] + b.n_->value[j];
        if (out.n_->requires_grad) {
            out.n_->backfn = [m, n](Node& nd) {
                if (nd.parents[0]->requires_grad) {
                    auto& g = nd.parents[0]->ensure_grad();
                    for (size_t i = 0; i < g.size(); i++) g[i] += nd.grad[i];
                }
                if (nd.parents[1]->requires_grad) {
                    auto& g = nd.parents[1]->ensure_grad();
                    for (int i = 0; i < m; i++)
                        for (int j = 0; j < n; j++)
                            g[j] += nd.grad[static_cast<size_t>(i) * n + j];
                }
            };
        }
        return out;
    }

    // C = A * B, or A * B^T with trans_b
    friend Tensor matmul(const Tensor& a, const Tensor& b, bool trans_b = false) {
        const int m = a.rows(), k = a.cols();
        const int bk = trans_b ? b.cols() : b.rows();
        const int n = trans_b ? b.rows() : b.cols();
        if (bk != k)
            throw UsageError("matmul: inner dimensions of '" + a.name() + "' and '" + b.name() +
                             "' do not match");
        Tensor out = op_node({m, n}, "matmul", {a, b});
        gemm(a.n_->value.data(), b.n_->value.data(), out.n_->value.data(), m, k, n, trans_b);
        if (out.n_->requires_grad) {
            out.n_->backfn = [m, k, n, trans_b](Node& nd) {
                const Real* gv = nd.grad.data();
                const Real* av = nd.parents[0]->value.data();
                const Real* bv = nd.parents[1]->value.data();
                if (nd.parents[0]->requires_grad) {
                    auto& ga = nd.parents[0]->ensure_grad();
                    // dA = dC * B^T (trans_b: dC * B)
                    if (!trans_b)
                        gemm_acc_nt(gv, bv, ga.data(), m, n, k);
                    else
                        gemm_acc(gv, bv, ga.data(), m, n, k);
                }
                if (nd.parents[1]->requires_grad) {
                    auto& gb = nd.parents[1]->ensure_grad();
                    // dB = A^T * dC (trans_b: dC^T * A)
                    if (!trans_b)
                        gemm_acc_tn(av, gv, gb.data(), k, m, n);
                    else
                        gemm_acc_tn(gv, av, gb.data(), n, m, k);
                }
            };
        }
        return out;
    }

    friend Tensor gelu(const Tensor& a) {
        Tensor out = op_node(a.shape(), "gelu", {a});
        const size_t n = a.size();
        for (size_t i = 0; i < n; i++) {
            double x = static_cast<double>(a.n_->value[i]);
            out.n_->value[i] = static_cast<Real>(x * 0.5 * (1.0 + std::erf(x * 0.7071067811865476)));
        }
        if (out.n_->requires_grad) {
            out.n_->backfn = [](Node& nd) {
                auto& g = nd.parents[0]->ensure_grad();
                const auto& xv = nd.parents[0]->value;
                for (size_t i = 0; i < g.size(); i++) {
                    double x = static_cast<double>(xv[i]);
                    double cdf = 0.5 * (1.0 + std::erf(x * 0.7071067811865476));
                    double pdf = 0.3989422804014327 * std::exp(-0.5 * x * x);
                    g[i] += nd.grad[i] * static_cast<Real>(cdf + x * pdf);
                }
            };
        }
        return out;
    }

    // rows of e selected by ids; backward scatter-adds into e
    friend Tensor gather_rows(const Tensor& e, const std::vector<int>& ids) {
        const int v = e.rows(), d = e.cols();
        for (int id : ids)
            if (id < 0 || id >= v)
                throw UsageError("gather_rows: index out of range for '" + e.name() + "'");
        Tensor out = op_node({static_cast<int>(ids.size()), d}, "gather", {e});
        for (size_t i = 0; i < ids.size(); i++)
            std::copy_n(e.n_->value.data() + static_cast<size_t>(ids[i]) * d, d,
                        out.n_->value.data() + i * d);
        if (out.n_->requires_grad) {
            out.n_->backfn = [ids, d](Node& nd) {
                auto& g = nd.parents[0]->ensure_grad();
                for (size_t i = 0; i < ids.size(); i++)
                    for (int j = 0; j < d; j++)
                        g[static_cast<size_t>(ids[i]) * d + j] += nd.grad[i * d + j];
            };
        }
        return out;
    }

    // per-row normalization: (x - mean) / sqrt(var + eps) * gain + bias
    friend Tensor layer_norm(const Tensor& a, const Tensor& gain, const Tensor& bias,
                             double eps = 1e-5) {
        const int m = a.rows(), n = a.cols();
        if (gain.size() != static_cast<size_t>(n) || bias.size() != static_cast<size_t>(n))
            throw UsageError("layer_norm: gain/bias do not match columns of '" + a.name() + "'");
        Tensor out = op_node(a.shape(), "layer_norm", {a, gain, bias});
        std::vector<Real> inv_std(m), xhat(a.size());
        for (int i = 0; i < m; i++) {
            const Real* x = a.n_->value.data() + static_cast<size_t>(i) * n;
            double mean = 0;
            for (int j = 0; j < n; j++) mean += x[j];
            mean /= n;
            double var = 0;
            for (int j = 0; j < n; j++) var += (x[j] - mean) * (x[j] - mean);
            var /= n;
            double is = 1.0 / std::sqrt(var + eps);
            inv_std[i] = static_cast<Real>(is);
            for (int j = 0; j < n; j++) {
                Real xh = static_cast<Real>((x[j] - mean) * is);
                xhat[static_cast<size_t>(i) * n + j] = xh;
                out.n_->value[static_cast<size_t>(i) * n + j] =
                    xh * gain.n_->value[j] + bias.n_->value[j];
            }
        }
        if (out.n_->requires_grad) {
            out.n_->backfn = [m, n, inv_std = std::move(inv_std),
                              xhat = std::move(xhat)](Node& nd) {
                const auto& gv = nd.grad;
                const auto& gainv = nd.parents[1]->value;
                for (int i = 0; i < m; i++) {
                    const size_t off = static_cast<size_t>(i) * n;
                    if (nd.parents[0]->requires_grad) {
                        auto& gx = nd.parents[0]->ensure_grad();
                        double sum_dy = 0, sum_dy_xhat = 0;
                        for (int j = 0; j < n; j++) {
                            double dxh = gv[off + j] * gainv[j];
                            sum_dy += dxh;
                            sum_dy_xhat += dxh * xhat[off + j];
                        }
                        for (int j = 0; j < n; j++) {
                            double dxh = gv[off + j] * gainv[j];
                            gx[off + j] += static_cast<Real>(
                                inv_std[i] * (dxh - sum_dy / n - xhat[off + j] * sum_dy_xhat / n));
                        }
                    }
                    if (nd.parents[1]->requires_grad) {
                        auto& gg = nd.parents[1]->ensure_grad();
                        for (int j = 0; j < n; j++) gg[j] += gv[off + j] * xhat[off + j];
                    }
                    if (nd.parents[2]->requires_grad) {
                        auto& gb = nd.parents[2]->ensure_grad();
                        for (int j = 0; j < n; j++) gb[j] += gv[off + j];
                    }
                }
            };
        }
        return out;
    }

    // numerically stabilized softmax along an axis (rank <= 2; axis counted
    // over the 2-D view, and a rank-1 tensor is normalized over its single
    // dimension). Slices along the axis sum to 1.
    friend Tensor softmax(const Tensor& a, int axis = -1) {
        a.check_finite("softmax");
        const int m = a.rows(), n = a.cols();
        if (a.rank() <= 1) {
            if (axis != 0 && axis != -1) throw UsageError("softmax: axis out of range");
            axis = 1;
        } else {
            if (axis < 0) axis += 2;
            if (axis != 0 && axis != 1) throw UsageError("softmax: axis out of range");
        }
        Tensor out = op_node(a.shape(), "softmax", {a});
        const int outer = (axis == 1) ? m : n;
        const int inner = (axis == 1) ? n : m;
        // stride pattern: element (o, i) of the normalized slice
        const size_t ostride = (axis == 1) ? static_cast<size_t>(n) : 1;
        const size_t istride = (axis == 1) ? 1 : static_cast<size_t>(n);
        for (int o = 0; o < outer; o++) {
            const size_t base = o * ostride;
            double mx = -1e300;
            for (int i = 0; i < inner; i++)
                mx = std::max(mx, static_cast<double>(a.n_->value[base + i * istride]));
            double sum = 0;
            for (int i = 0; i < inner; i++) {
                double e = std::exp(static_cast<double>(a.n_->value[base + i * istride]) - mx);
                out.n_->value[base + i * istride] = static_cast<Real>(e);
                sum += e;
            }
            double inv = 1.0 / sum;
            for (int i = 0; i < inner; i++)
                out.n_->value[base + i * istride] =
                    static_cast<Real>(out.n_->value[base + i * istride] * inv);
        }
        if (out.n_->requires_grad) {
            out.n_->backfn = [outer, inner, ostride, istride](Node& nd) {
                auto& g = nd.parents[0]->ensure_grad();
                const auto& y = nd.value;
                for (int o = 0; o < outer; o++) {
                    const size_t base = o * ostride;
                    double dot = 0;
                    for (int i = 0; i < inner; i++)
                        dot += nd.grad[base + i * istride] * y[base + i * istride];
                    for (int i = 0; i < inner; i++)
                        g[base + i * istride] += static_cast<Real>(
                            y[base + i * istride] * (nd.grad[base + i * istride] - dot));
                }
            };
        }
        return out;
    }

    // Mean negative log-likelihood over unmasked rows. Targets index the
    // columns. With from_logits the loss fuses a stable log-softmax; with
    // probabilities the values are clamped to [1e-7, 1] before the log.
    friend Tensor cross_entropy(const Tensor& x, const std::vector<int>& targets,
                                const std::vector<uint8_t>& mask = {}, bool from_logits = true) {
        x.check_finite("cross_entropy");
        const int m = x.rows(), n = x.cols();
        if (static_cast<int>(targets.size()) != m)
            throw UsageError("cross_entropy: target count does not match rows of '" + x.name() +
                             "'");
        if (!mask.empty() && static_cast<int>(mask.size()) != m)
            throw UsageError("cross_entropy: mask length does not match rows");
        for (int t : targets)
            if (t < 0 || t >= n) throw UsageError("cross_entropy: target id out of range");
        int live = 0;
        for (int i = 0; i < m; i++)
            if (mask.empty() || mask[i]) live++;
        if (live == 0) throw UsageError("cross_entropy: all rows masked (empty batch)");

        Tensor out = op_node({1}, "cross_entropy", {x});
        double total = 0;
        std::vector<Real> probs;  // row-softmax, kept for the backward pass
        if (from_logits) probs.resize(x.size());
        for (int i = 0; i < m; i++) {
            if (!mask.empty() && !mask[i]) continue;
            const Real* row = x.n_->value.data() + static_cast<size_t>(i) * n;
            if (from_logits) {
                double mx = -1e300;
                for (int j = 0; j < n; j++) mx = std::max(mx, static_cast<double>(row[j]));
                double sum = 0;
                for (int j = 0; j < n; j++) sum += std::exp(static_cast<double>(row[j]) - mx);
                double logz = mx + std::log(sum);
                total += logz - static_cast<double>(row[targets[i]]);
                double inv = 1.0 / sum;
                for (int j = 0; j < n; j++)
                    probs[static_cast<size_t>(i) * n + j] =
                        static_cast<Real>(std::exp(static_cast<double>(row[j]) - mx) * inv);
            } else {
                double p = std::min(1.0, std::max(1e-7, static_cast<double>(row[targets[i]])));
                total += -std::log(p);
            }
        }
        out.n_->value[0] = static_cast<Real>(total / live);
        if (out.n_->requires_grad) {
            out.n_->backfn = [m, n, targets, mask, live, from_logits,
                              probs = std::move(probs)](Node& nd) {
                auto& g = nd.parents[0]->ensure_grad();
                const Real gscale = nd.grad[0] / static_cast<Real>(live);
                for (int i = 0; i < m; i++) {
                    if (!mask.empty() && !mask[i]) continue;
                    const size_t off = static_cast<size_t>(i) * n;
                    if (from_logits) {
                        for (int j = 0; j < n; j++) g[off + j] += gscale * probs[off + j];
                        g[off + targets[i]] -= gscale;
                    } else {
                        // no gradient where the clamp is active
                        double p = static_cast<double>(nd.parents[0]->value[off + targets[i]]);
                        if (p > 1e-7 && p < 1.0)
                            g[off + targets[i]] += gscale * static_cast<Real>(-1.0 / p);
                    }
                }
            };
        }
        return out;
    }

    friend Tensor row_slice(const Tensor& a, int r0, int r1) {
        const int m = a.rows(), n = a.cols();
        if (r0 < 0 || r1 > m || r0 >= r1) throw UsageError("row_slice: bad range");
        Tensor out = op_node({r1 - r0, n}, "row_slice", {a});
        std::copy_n(a.n_->value.data() + static_cast<size_t>(r0) * n,
                    static_cast<size_t>(r1 - r0) * n, out.n_->value.data());
        if (out.n_->requires_grad) {
            out.n_->backfn = [r0, n](Node& nd) {
                auto& g = nd.parents[0]->ensure_grad();
                for (size_t i = 0; i < nd.grad.size(); i++)
                    g[static_cast<size_t>(r0) * n + i] += nd.grad[i];
            };
        }
        return out;
    }

    friend Tensor col_slice(const Tensor& a, int c0, int c1) {
        const int m = a.rows(), n = a.cols();
        if (c0 < 0 || c1 > n || c0 >= c1) throw UsageError("col_slice: bad range");
        const int w = c1 - c0;
        Tensor out = op_node({m, w}, "col_slice", {a});
        for (int i = 0; i < m; i++)
            std::copy_n(a.n_->value.data() + static_cast<size_t>(i) * n + c0, w,
                        out.n_->value.data() + static_cast<size_t>(i) * w);
        if (out.n_->requires_grad) {
            out.n_->backfn = [m, n, c0, w](Node& nd) {
                auto& g = nd.parents[0]->ensure_grad();
                for (int i = 0; i < m; i++)
                    for (int j = 0; j < w; j++)
                        g[static_cast<size_t>(i) * n + c0 + j] +=
                            nd.grad[static_cast<size_t>(i) * w + j];
            };
        }
        return out;
    }

    friend Tensor concat_rows(const std::vector<Tensor>& parts) {
        if (parts.empty()) throw UsageError("concat_rows: no inputs");
        const int n = parts[0].cols();
        int m = 0;
        for (const auto& p : parts) {
            if (p.cols() != n) throw UsageError("concat_rows: column mismatch");
            m += p.rows();
        }
        Tensor out = op_node({m, n}, "concat_rows", {});
        bool rg = false;
        for (const auto& p : parts) rg = rg || p.requires_grad();
        out.n_->requires_grad = rg;
        if (rg)
            for (const auto& p : parts) out.n_->parents.push_back(p.n_);
        size_t off = 0;
        std::vector<int> row_counts;
        for (const auto& p : parts) {
            std::copy_n(p.n_->value.data(), p.size(), out.n_->value.data() + off);
            off += p.size();
            row_counts.push_back(p.rows());
        }
        if (rg) {
            out.n_->backfn = [row_counts, n](Node& nd) {
                size_t off = 0;
                for (size_t p = 0; p < nd.parents.size(); p++) {
                    size_t len = static_cast<size_t>(row_counts[p]) * n;
                    if (nd.parents[p]->requires_grad) {
                        auto& g = nd.parents[p]->ensure_grad();
                        for (size_t i = 0; i < len; i++) g[i] += nd.grad[off + i];
                    }
                    off += len;
                }
            };
        }
        return out;
    }

    friend Tensor concat_cols(const std::vector<Tensor>& parts) {
        if (parts.empty()) throw UsageError("concat_cols: no inputs");
        const int m = parts[0].rows();
        int n = 0;
        for (const auto& p : parts) {
            if (p.rows() != m) throw UsageError("concat_cols: row mismatch");
            n += p.cols();
        }
        Tensor out = op_node({m, n}, "concat_cols", {});
        bool rg = false;
        for (const auto& p : parts) rg = rg || p.requires_grad();
        out.n_->requires_grad = rg;
        if (rg)
            for (const auto& p : parts) out.n_->parents.push_back(p.n_);
        std::vector<int> widths;
        int c0 = 0;
        for (const auto& p : parts) {
            const int w = p.cols();
            for (int i = 0; i < m; i++)
                std::copy_n(p.n_->value.data() + static_cast<size_t>(i) * w, w,
                            out.n_->value.data() + static_cast<size_t>(i) * n + c0);
            c0 += w;
            widths.push_back(w);
        }
        if (rg) {
            out.n_->backfn = [widths, m, n](Node& nd) {
                int c0 = 0;
                for (size_t p = 0; p < nd.parents.size(); p++) {
                    const int w = widths[p];
                    if (nd.parents[p]->requires_grad) {
                        auto& g = nd.parents[p]->ensure_grad();
                        for (int i = 0; i < m; i++)
                            for (int j = 0; j < w; j++)
                                g[static_cast<size_t>(i) * w + j] +=
                                    nd.grad[static_cast<size_t>(i) * n + c0 + j];
                    }
                    c0 += w;
                }
            };
        }
        return out;
    }

    // tile a row vector m times; backward sums over the tiles
    friend Tensor repeat_row(const Tensor& v, int m) {
        const int n = v.cols();
        if (v.rows() != 1) throw UsageError("repeat_row: input '" + v.name() + "' is not a row");
        Tensor out = op_node({m, n}, "repeat_row", {v});
        for (int i = 0; i < m; i++)
            std::copy_n(v.n_->value.data(), n, out.n_->value.data() + static_cast<size_t>(i) * n);
        if (out.n_->requires_grad) {
            out.n_->backfn = [m, n](Node& nd) {
                auto& g = nd.parents[0]->ensure_grad();
                for (int i = 0; i < m; i++)
                    for (int j = 0; j < n; j++) g[j] += nd.grad[static_cast<size_t>(i) * n + j];
            };
        }
        return out;
    }

    friend Tensor reshape(const Tensor& a, std::vector<int> shape) {
        size_t total = 1;
        for (int d : shape) total *= static_cast<size_t>(d);
        if (total != a.size()) throw UsageError("reshape: element count mismatch");
        Tensor out = op_node(std::move(shape), "reshape", {a});
        out.n_->value = a.n_->value;
        if (out.n_->requires_grad) {
            out.n_->backfn = [](Node& nd) {
                auto& g = nd.parents[0]->ensure_grad();
                for (size_t i = 0; i < g.size(); i++) g[i] += nd.grad[i];
            };
        }
        return out;
    }

    friend Tensor sum_all(const Tensor& a) {
        Tensor out = op_node({1}, "sum", {a});
        double s = 0;
        for (Real v : a.n_->value) s += v;
        out.n_->value[0] = static_cast<Real>(s);
        if (out.n_->requires_grad) {
            out.n_->backfn = [](Node& nd) {
                auto& g = nd.parents[0]->ensure_grad();
                for (size_t i = 0; i < g.size(); i++) g[i] += nd.grad[0];
            };
        }
        return out;
    }

    friend Tensor mean_all(const Tensor& a) { return scale(sum_all(a), 1.0 / a.size()); }

    // inverted dropout; identity when train==false or p==0
    friend Tensor dropout(const Tensor& a, double p, bool train, Rng& rng) {
        if (!train || p <= 0.0) return a;
        if (p >= 1.0) throw UsageError("dropout: rate must be < 1");
        std::vector<Real> mask(a.size());
        const Real keep = static_cast<Real>(1.0 / (1.0 - p));
        for (auto& v : mask) v = (rng.uniform() < p) ? Real(0) : keep;
        return mul(a, from_data(a.shape(), std::move(mask), "dropout_mask"));
    }

private:
    // C = A(mxk) * B(kxn), or A * B^T when trans_b (B is n x k)
    static void gemm(const Real* a, const Real* b, Real* c, int m, int k, int n, bool trans_b) {
        if (!trans_b) {
            for (int i = 0; i < m; i++) {
                Real* crow = c + static_cast<size_t>(i) * n;
                const Real* arow = a + static_cast<size_t>(i) * k;
                for (int kk = 0; kk < k; kk++) {
                    const Real av = arow[kk];
                    const Real* brow = b + static_cast<size_t>(kk) * n;
                    for (int j = 0; j < n; j++) crow[j] += av * brow[j];
                }
            }
        } else {
            for (int i = 0; i < m; i++) {
                const Real* arow = a + static_cast<size_t>(i) * k;
                Real* crow = c + static_cast<size_t>(i) * n;
                for (int j = 0; j < n; j++) {
                    const Real* brow = b + static_cast<size_t>(j) * k;
                    Real s = 0;
                    for (int kk = 0; kk < k; kk++) s += arow[kk] * brow[kk];
                    crow[j] += s;
                }
            }
        }
    }
    // C += A(mxk) * B(kxn)
    static void gemm_acc(const Real* a, const Real* b, Real* c, int m, int k, int n) {
        gemm(a, b, c, m, k, n, false);
    }
    // C += A(mxk) * B(nxk)^T
    static void gemm_acc_nt(const Real* a, const Real* b, Real* c, int m, int k, int n) {
        gemm(a, b, c, m, k, n, true);
    }
    // C += A(kxm)^T * B(kxn), C is m x n
    static void gemm_acc_tn(const Real* a, const Real* b, Real* c, int m, int k, int n) {
        for (int kk = 0; kk < k; kk++) {
            const Real* arow = a + static_cast<size_t>(kk) * m;
            const Real* brow = b + static_cast<size_t>(kk) * n;
            for (int i = 0; i < m; i++) {
                const Real av = arow[i];
                Real* crow = c + static_cast<size_t>(i) * n;
                for (int j = 0; j < n; j++) crow[j] += av * brow[j];
            }
        }
    }
};

using TensorF = Tensor<float>;
using TensorD = Tensor<double>;

}  // namespace ealm
