#pragma once

#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "segtrain/common.hpp"
#include "segtrain/graph.hpp"
#include "segtrain/matrix.hpp"

namespace segtrain {

inline Mat apply_neighbor_mean(const Mat& x, const Csr& adj);

// Reverse-mode tape. Values are computed eagerly through the shared kernels
// in matrix.hpp; backward() replays the recorded ops once, newest first.
// Leaves with an external grad pointer (parameters) receive their accumulated
// gradient when backward() finishes.
//
// The tape also carries the activation budget: grad-enabled segment forwards
// register their node counts through note_retained, and exceeding the budget
// throws before more activations are allocated.
class Tape {
public:
    using Id = int;

    explicit Tape(std::optional<long long> budget_nodes = std::nullopt)
        : budget_(budget_nodes) {}

    Id constant(Mat v) { return push(std::move(v), false, nullptr, {}); }

    Id param(const Mat& value, Mat* external_grad) {
        Id id = push(value, true, external_grad, {});
        return id;
    }

    Id matmul(Id x, Id w) {
        Mat v = segtrain::matmul(val(x), val(w));
        return push(std::move(v), needs(x) || needs(w), nullptr, [this, x, w](Id self) {
            const Mat& g = nodes_[static_cast<std::size_t>(self)].grad;
            if (needs(x)) matmul_back_x(g, val(w), grad_buf(x));
            if (needs(w)) matmul_back_w(val(x), g, grad_buf(w));
        });
    }

    Id add_row(Id x, Id b) {
        Mat v = segtrain::add_row(val(x), val(b));
        return push(std::move(v), needs(x) || needs(b), nullptr, [this, x, b](Id self) {
            const Mat& g = nodes_[static_cast<std::size_t>(self)].grad;
            if (needs(x)) {
                Mat& gx = grad_buf(x);
                for (std::size_t i = 0; i < g.a.size(); ++i) gx.a[i] += g.a[i];
            }
            if (needs(b)) {
                Mat& gb = grad_buf(b);
                for (int i = 0; i < g.rows; ++i)
                    for (int j = 0; j < g.cols; ++j) gb.a[static_cast<std::size_t>(j)] += g.at(i, j);
            }
        });
    }

    Id relu(Id x) {
        Mat v = segtrain::relu(val(x));
        return push(std::move(v), needs(x), nullptr, [this, x](Id self) {
            if (needs(x)) relu_back(val(x), nodes_[static_cast<std::size_t>(self)].grad, grad_buf(x));
        });
    }

    Id hconcat(Id a, Id b) {
        Mat v = segtrain::hconcat(val(a), val(b));
        int ac = val(a).cols;
        return push(std::move(v), needs(a) || needs(b), nullptr, [this, a, b, ac](Id self) {
            const Mat& g = nodes_[static_cast<std::size_t>(self)].grad;
            if (needs(a)) {
                Mat& ga = grad_buf(a);
                for (int i = 0; i < ga.rows; ++i)
                    for (int j = 0; j < ga.cols; ++j) ga.at(i, j) += g.at(i, j);
            }
            if (needs(b)) {
                Mat& gb = grad_buf(b);
                for (int i = 0; i < gb.rows; ++i)
                    for (int j = 0; j < gb.cols; ++j) gb.at(i, j) += g.at(i, ac + j);
            }
        });
    }

    // adj outlives the tape (owned by the segment being forwarded)
    Id neighbor_mean(Id x, const Csr* adj) {
        Mat v = apply_neighbor_mean(val(x), *adj);
        return push(std::move(v), needs(x), nullptr, [this, x, adj](Id self) {
            if (!needs(x)) return;
            const Mat& g = nodes_[static_cast<std::size_t>(self)].grad;
            Mat& gx = grad_buf(x);
            for (int i = 0; i < g.rows; ++i) {
                int deg = adj->degree(i);
                if (deg == 0) continue;
                double inv = 1.0 / deg;
                for (int nb : adj->neighbors(i)) {
                    double* gr = gx.row(nb);
                    const double* gi = g.row(i);
                    for (int j = 0; j < g.cols; ++j) gr[j] += gi[j] * inv;
                }
            }
        });
    }

    Id row_mean(Id x) {
        Mat v = segtrain::row_mean(val(x));
        int rows = val(x).rows;
        return push(std::move(v), needs(x), nullptr, [this, x, rows](Id self) {
            if (!needs(x)) return;
            const Mat& g = nodes_[static_cast<std::size_t>(self)].grad;
            Mat& gx = grad_buf(x);
            double inv = 1.0 / rows;
            for (int i = 0; i < gx.rows; ++i)
                for (int j = 0; j < gx.cols; ++j) gx.at(i, j) += g.at(0, j) * inv;
        });
    }

    // post_scale * sum_k weights[k] * inputs[k]; all inputs same shape.
    // Call sites skip zero weights, so the sum never sees dropped terms.
    Id weighted_sum(std::vector<Id> inputs, std::vector<double> weights, double post_scale) {
        if (inputs.empty()) throw ConfigError("weighted_sum: no inputs");
        Mat v = zeros_like(val(inputs[0]));
        for (std::size_t k = 0; k < inputs.size(); ++k) axpy(weights[k], val(inputs[k]), v);
        if (post_scale != 1.0) v = segtrain::scale(v, post_scale);
        bool ng = false;
        for (Id i : inputs) ng = ng || needs(i);
        return push(std::move(v), ng, nullptr,
                    [this, inputs = std::move(inputs), weights = std::move(weights),
                     post_scale](Id self) {
                        const Mat& g = nodes_[static_cast<std::size_t>(self)].grad;
                        for (std::size_t k = 0; k < inputs.size(); ++k) {
                            if (!needs(inputs[k])) continue;
                            axpy(post_scale * weights[k], g, grad_buf(inputs[k]));
                        }
                    });
    }

    // mean of 1x1 scalars (batch loss reduction)
    Id mean_scalar(std::vector<Id> inputs) {
        if (inputs.empty()) throw ConfigError("mean_scalar: no inputs");
        Mat v(1, 1);
        for (Id i : inputs) v.a[0] += val(i).a[0];
        v.a[0] /= static_cast<double>(inputs.size());
        bool ng = false;
        for (Id i : inputs) ng = ng || needs(i);
        double inv = 1.0 / static_cast<double>(inputs.size());
        return push(std::move(v), ng, nullptr, [this, inputs = std::move(inputs), inv](Id self) {
            double g = nodes_[static_cast<std::size_t>(self)].grad.a[0];
            for (Id i : inputs)
                if (needs(i)) grad_buf(i).a[0] += g * inv;
        });
    }

    Id scale(Id x, double s) {
        Mat v = segtrain::scale(val(x), s);
        return push(std::move(v), needs(x), nullptr, [this, x, s](Id self) {
            if (needs(x)) axpy(s, nodes_[static_cast<std::size_t>(self)].grad, grad_buf(x));
        });
    }

    const Mat& value(Id id) const { return nodes_[static_cast<std::size_t>(id)].value; }

    // Generic hook for ops defined outside the class (losses live with the
    // metric code). value is already computed; pull receives this tape + the
    // new node's id and must accumulate into grad_buf of its inputs.
    Id custom(Mat value, bool needs_grad, std::function<void(Tape&, Id)> pull) {
        return push(std::move(value), needs_grad, nullptr,
                    [this, pull = std::move(pull)](Id self) { pull(*this, self); });
    }

    bool needs(Id id) const { return nodes_[static_cast<std::size_t>(id)].needs_grad; }

    Mat& grad_buf(Id id) {
        Node& n = nodes_[static_cast<std::size_t>(id)];
        if (n.grad.size() == 0) n.grad = zeros_like(n.value);
        return n.grad;
    }

    // One reverse sweep; each op's pull runs exactly once. Parameter leaves
    // flush into their external buffers at the end.
    void backward(Id loss) {
        if (val(loss).rows != 1 || val(loss).cols != 1)
            throw ConfigError("backward expects a scalar loss");
        for (auto& n : nodes_) n.grad = Mat();
        grad_buf(loss).a[0] = 1.0;
        for (Id id = static_cast<Id>(nodes_.size()) - 1; id >= 0; --id) {
            Node& n = nodes_[static_cast<std::size_t>(id)];
            if (!n.needs_grad || n.grad.size() == 0) continue;
            if (n.pull) n.pull(id);
        }
        for (auto& n : nodes_)
            if (n.external_grad && n.grad.size() != 0) {
                for (std::size_t i = 0; i < n.grad.a.size(); ++i)
                    n.external_grad->a[i] += n.grad.a[i];
            }
    }

    // Activation budget: counts graph nodes whose activations this tape keeps.
    void note_retained(int node_count, const std::string& what) {
        retained_nodes_ += node_count;
        peak_retained_ = std::max(peak_retained_, retained_nodes_);
        if (budget_ && retained_nodes_ > *budget_)
            throw BudgetError("activation budget exceeded: " + std::to_string(retained_nodes_) +
                              " retained nodes > budget " + std::to_string(*budget_) + " (" + what +
                              ")");
    }

    long long retained_nodes() const { return retained_nodes_; }
    long long peak_retained() const { return peak_retained_; }
    std::size_t op_count() const { return nodes_.size(); }

private:
    struct Node {
        Mat value;
        Mat grad;
        bool needs_grad = false;
        Mat* external_grad = nullptr;
        std::function<void(Id)> pull;
    };

    const Mat& val(Id id) const { return nodes_[static_cast<std::size_t>(id)].value; }

    Id push(Mat v, bool needs_grad, Mat* ext, std::function<void(Id)> pull) {
        nodes_.push_back(Node{std::move(v), Mat(), needs_grad, ext, std::move(pull)});
        return static_cast<Id>(nodes_.size()) - 1;
    }

    std::vector<Node> nodes_;
    std::optional<long long> budget_;
    long long retained_nodes_ = 0;
    long long peak_retained_ = 0;
};

// value-path neighbor mean shared by tape and plain evaluation
inline Mat apply_neighbor_mean(const Mat& x, const Csr& adj) {
    Mat out(x.rows, x.cols);
    for (int i = 0; i < x.rows; ++i) {
        int deg = adj.degree(i);
        if (deg == 0) continue;
        double* oi = out.row(i);
        for (int nb : adj.neighbors(i)) {
            const double* xr = x.row(nb);
            for (int j = 0; j < x.cols; ++j) oi[j] += xr[j];
        }
        double inv = 1.0 / deg;
        for (int j = 0; j < x.cols; ++j) oi[j] *= inv;
    }
    return out;
}

}  // namespace segtrain
