#pragma once

#include <atomic>
#include <cstdint>
#include <functional>
#include <memory>
#include <map>
#include <optional>
#include <stdexcept>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "rcmp/ops.hpp"
#include "rcmp/tensor.hpp"

namespace rcmp {

/// Raised when backward is requested for a value that was not produced by a
/// recorded primitive on the same tape.
class TapeError : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

template <class T>
struct TapeOptions {
  // Called on every gradient a primitive hands to one of its inputs, before
  // accumulation. Used for instrumentation and mutation testing.
  std::function<void(std::string_view kind, std::size_t input_slot, Tensor<T>& grad)> grad_hook;
};

template <class T>
struct BatchStats {
  Tensor<T> mean, var;  // biased batch variance
  std::int64_t count = 0;
};

/// Records executed primitives and replays them in reverse to produce
/// gradients for named parameter leaves.
template <class T>
class GradTape {
 public:
  struct Var {
    std::size_t id = static_cast<std::size_t>(-1);
    std::uint64_t tape = 0;
  };

  explicit GradTape(TapeOptions<T> options = {}) : options_(std::move(options)), tape_id_(next_id()) {}

  GradTape(const GradTape&) = delete;
  GradTape& operator=(const GradTape&) = delete;

  Var constant(Tensor<T> value) { return push_value(std::move(value), {}); }

  Var parameter(std::string name, Tensor<T> value) {
    if (params_.count(name)) throw std::invalid_argument("duplicate parameter leaf '" + name + "'");
    Var v = push_value(std::move(value), name);
    params_.emplace(std::move(name), v.id);
    return v;
  }

  const Tensor<T>& value(Var v) const { return values_.at(check(v)); }

  std::size_t node_count() const { return nodes_.size(); }

  /// Kinds of the recorded primitives in execution order.
  std::vector<std::string> execution_order() const {
    std::vector<std::string> out;
    for (const auto& n : nodes_) out.emplace_back(n.kind);
    return out;
  }

  /// Node indices visited by the most recent backward().
  const std::vector<std::size_t>& last_backward_order() const { return visited_; }

  // ---- primitives ---------------------------------------------------------

  Var conv2d(Var x, Var w, std::optional<Var> b, std::int64_t stride, std::int64_t padding) {
    const auto xi = check(x), wi = check(w);
    std::optional<std::size_t> bi;
    if (b) bi = check(*b);
    Tensor<T> y = ops::conv2d(values_[xi], values_[wi], bi ? &values_[*bi] : nullptr, stride, padding);
    std::vector<std::size_t> ins{xi, wi};
    if (bi) ins.push_back(*bi);
    return record("conv2d", std::move(ins), std::move(y), [=](GradTape& t, const Tensor<T>& dy) {
      auto g = ops::conv2d_backward(t.values_[xi], t.values_[wi], bi.has_value(), stride, padding, dy);
      t.accumulate("conv2d", 0, xi, std::move(g.input));
      t.accumulate("conv2d", 1, wi, std::move(g.weight));
      if (bi) t.accumulate("conv2d", 2, *bi, std::move(*g.bias));
    });
  }

  Var batchnorm2d(Var x, Var gamma, Var beta, const Tensor<T>& running_mean,
                  const Tensor<T>& running_var, ops::BnMode mode, BatchStats<T>* stats = nullptr,
                  double eps = ops::kBatchNormEps) {
    const auto xi = check(x), gi = check(gamma), bi = check(beta);
    auto f = ops::batchnorm2d(values_[xi], values_[gi], values_[bi], running_mean, running_var, mode, eps);
    if (stats) {
      const auto& s = values_[xi].shape();
      *stats = BatchStats<T>{f.batch_mean, f.batch_var, s[0] * s[2] * s[3]};
    }
    auto saved_norm = std::make_shared<Tensor<T>>(std::move(f.normalized));
    auto saved_inv = std::make_shared<Tensor<T>>(std::move(f.inv_std));
    return record("batchnorm2d", {xi, gi, bi}, std::move(f.output),
                  [=](GradTape& t, const Tensor<T>& dy) {
                    auto g = ops::batchnorm2d_backward(*saved_norm, *saved_inv, t.values_[gi], mode, dy);
                    t.accumulate("batchnorm2d", 0, xi, std::move(g.input));
                    t.accumulate("batchnorm2d", 1, gi, std::move(g.gamma));
                    t.accumulate("batchnorm2d", 2, bi, std::move(g.beta));
                  });
  }

  Var relu(Var x) {
    const auto xi = check(x);
    return record("relu", {xi}, ops::relu(values_[xi]), [=](GradTape& t, const Tensor<T>& dy) {
      t.accumulate("relu", 0, xi, ops::relu_backward(t.values_[xi], dy));
    });
  }

  Var maxpool2d(Var x, std::int64_t k = 3, std::int64_t stride = 2, std::int64_t pad = 1) {
    const auto xi = check(x);
    auto f = ops::maxpool2d(values_[xi], k, stride, pad);
    auto argmax = std::make_shared<std::vector<std::int64_t>>(std::move(f.argmax));
    return record("maxpool2d", {xi}, std::move(f.output), [=](GradTape& t, const Tensor<T>& dy) {
      t.accumulate("maxpool2d", 0, xi, ops::maxpool2d_backward(t.values_[xi].shape(), *argmax, dy));
    });
  }

  Var global_avgpool(Var x) {
    const auto xi = check(x);
    return record("global_avgpool", {xi}, ops::global_avgpool(values_[xi]),
                  [=](GradTape& t, const Tensor<T>& dy) {
                    t.accumulate("global_avgpool", 0, xi,
                                 ops::global_avgpool_backward(t.values_[xi].shape(), dy));
                  });
  }

  Var linear(Var x, Var w, Var b) {
    const auto xi = check(x), wi = check(w), bi = check(b);
    return record("linear", {xi, wi, bi}, ops::linear(values_[xi], values_[wi], &values_[bi]),
                  [=](GradTape& t, const Tensor<T>& dy) {
                    auto g = ops::linear_backward(t.values_[xi], t.values_[wi], dy);
                    t.accumulate("linear", 0, xi, std::move(g.input));
                    t.accumulate("linear", 1, wi, std::move(g.weight));
                    t.accumulate("linear", 2, bi, std::move(g.bias));
                  });
  }

  Var add(Var a, Var b) {
    const auto ai = check(a), bi = check(b);
    return record("add", {ai, bi}, ops::add(values_[ai], values_[bi]),
                  [=](GradTape& t, const Tensor<T>& dy) {
                    t.accumulate("add", 0, ai, Tensor<T>(dy));
                    t.accumulate("add", 1, bi, Tensor<T>(dy));
                  });
  }

  Var mul(Var a, Var b) {
    const auto ai = check(a), bi = check(b);
    return record("mul", {ai, bi}, ops::mul(values_[ai], values_[bi]),
                  [=](GradTape& t, const Tensor<T>& dy) {
                    t.accumulate("mul", 0, ai, ops::mul(dy, t.values_[bi]));
                    t.accumulate("mul", 1, bi, ops::mul(dy, t.values_[ai]));
                  });
  }

  Var sum(Var x) {
    const auto xi = check(x);
    return record("sum", {xi}, Tensor<T>::scalar(ops::sum(values_[xi])),
                  [=](GradTape& t, const Tensor<T>& dy) {
                    t.accumulate("sum", 0, xi, Tensor<T>(t.values_[xi].shape(), dy[0]));
                  });
  }

  Var softmax(Var z) {
    const auto zi = check(z);
    auto p = ops::softmax(values_[zi]);
    auto saved = std::make_shared<Tensor<T>>(p);
    return record("softmax", {zi}, std::move(p), [=](GradTape& t, const Tensor<T>& dy) {
      t.accumulate("softmax", 0, zi, ops::softmax_backward(*saved, dy));
    });
  }

  /// Fused softmax + mean negative log-likelihood; yields a scalar.
  Var cross_entropy(Var logits, std::vector<int> labels) {
    const auto zi = check(logits);
    const T loss = ops::cross_entropy(values_[zi], labels);
    return record("cross_entropy", {zi}, Tensor<T>::scalar(loss),
                  [=, labels = std::move(labels)](GradTape& t, const Tensor<T>& dy) {
                    t.accumulate("cross_entropy", 0, zi,
                                 ops::cross_entropy_backward(t.values_[zi], labels, dy[0]));
                  });
  }

  // ---- reverse pass -------------------------------------------------------

  /// Gradient of a scalar loss with respect to every parameter leaf, keyed by
  /// parameter name. Parameters the loss does not depend on get zeros.
  std::map<std::string, Tensor<T>> backward(Var loss) {
    if (loss.tape != tape_id_) throw TapeError("backward: loss was not produced on this tape");
    const auto li = check(loss);
    if (producer_[li] < 0) throw TapeError("backward: loss is a leaf, not connected to any recorded primitive");
    if (values_[li].size() != 1) throw TapeError("backward: loss must be a scalar, got " + shape_str(values_[li].shape()));

    grads_.assign(values_.size(), std::nullopt);
    grads_[li] = Tensor<T>(values_[li].shape(), T(1));
    visited_.clear();
    for (std::size_t k = static_cast<std::size_t>(producer_[li]) + 1; k-- > 0;) {
      const auto& node = nodes_[k];
      if (!grads_[node.output]) continue;
      visited_.push_back(k);
      node.backward(*this, *grads_[node.output]);
    }
    std::map<std::string, Tensor<T>> out;
    for (const auto& [name, id] : params_)
      out.emplace(name, grads_[id] ? std::move(*grads_[id]) : Tensor<T>(values_[id].shape()));
    grads_.clear();
    return out;
  }

 private:
  using Backward = std::function<void(GradTape&, const Tensor<T>&)>;
  struct Node {
    std::string_view kind;
    std::vector<std::size_t> inputs;
    std::size_t output;
    Backward backward;
  };

  static std::uint64_t next_id() {
    static std::atomic<std::uint64_t> counter{1};
    return counter++;
  }

  std::size_t check(Var v) const {
    if (v.tape != tape_id_ || v.id >= values_.size())
      throw TapeError("value does not belong to this tape");
    return v.id;
  }

  Var push_value(Tensor<T> value, const std::string&) {
    values_.push_back(std::move(value));
    producer_.push_back(-1);
    return Var{values_.size() - 1, tape_id_};
  }

  Var record(std::string_view kind, std::vector<std::size_t> inputs, Tensor<T> out, Backward bw) {
    values_.push_back(std::move(out));
    const std::size_t oid = values_.size() - 1;
    producer_.push_back(static_cast<std::ptrdiff_t>(nodes_.size()));
    nodes_.push_back(Node{kind, std::move(inputs), oid, std::move(bw)});
    return Var{oid, tape_id_};
  }

  void accumulate(std::string_view kind, std::size_t slot, std::size_t id, Tensor<T> g) {
    if (options_.grad_hook) options_.grad_hook(kind, slot, g);
    auto& dst = grads_[id];
    if (!dst) {
      dst = std::move(g);
      return;
    }
    require_same_shape(*dst, g, "gradient accumulation");
    for (std::size_t i = 0; i < g.size(); ++i) (*dst)[i] += g[i];
  }

  TapeOptions<T> options_;
  std::uint64_t tape_id_;
  std::vector<Tensor<T>> values_;
  std::vector<std::ptrdiff_t> producer_;
  std::vector<Node> nodes_;
  std::map<std::string, std::size_t> params_;
  std::vector<std::optional<Tensor<T>>> grads_;
  std::vector<std::size_t> visited_;
};

}  // namespace rcmp
