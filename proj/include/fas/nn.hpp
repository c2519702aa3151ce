#pragma once

#include <cmath>
#include <string>
#include <tuple>
#include <unordered_map>
#include <vector>

#include "fas/autograd.hpp"
#include "fas/rng.hpp"

namespace fas::nn {

using ag::Var;

/// Ordered collection of named tensors: trainable parameters plus
/// non-trainable buffers (normalisation statistics). Modules keep integer
/// handles into the store; order of registration is the checkpoint order.
template <typename T>
class ParamStore {
 public:
  int add(std::string name, Tensor<T> init, bool trainable = true) {
    require(index_.find(name) == index_.end(), ErrorCode::InvalidConfig, "duplicate parameter " + name);
    index_.emplace(name, static_cast<int>(values_.size()));
    names_.push_back(std::move(name));
    values_.push_back(std::move(init));
    trainable_.push_back(trainable);
    return static_cast<int>(values_.size()) - 1;
  }

  std::size_t count() const { return values_.size(); }

  /// Number of trainable scalars.
  std::size_t numel() const {
    std::size_t n = 0;
    for (std::size_t i = 0; i < values_.size(); ++i)
      if (trainable_[i]) n += values_[i].size();
    return n;
  }

  bool trainable(int id) const { return trainable_[static_cast<std::size_t>(id)]; }

  Tensor<T>& value(int id) { return values_[static_cast<std::size_t>(id)]; }
  const Tensor<T>& value(int id) const { return values_[static_cast<std::size_t>(id)]; }
  const std::string& name(int id) const { return names_[static_cast<std::size_t>(id)]; }
  int find(const std::string& name) const {
    auto it = index_.find(name);
    return it == index_.end() ? -1 : it->second;
  }

  std::vector<Tensor<T>>& values() { return values_; }
  const std::vector<Tensor<T>>& values() const { return values_; }

  /// Zero tensors shaped like every parameter.
  std::vector<Tensor<T>> zeros() const {
    std::vector<Tensor<T>> z;
    z.reserve(values_.size());
    for (const auto& v : values_) z.emplace_back(v.shape);
    return z;
  }

  template <typename U>
  ParamStore<U> cast() const {
    ParamStore<U> out;
    for (std::size_t i = 0; i < values_.size(); ++i) out.add(names_[i], values_[i].template cast<U>(), trainable_[i]);
    return out;
  }

  bool operator==(const ParamStore& other) const {
    return names_ == other.names_ && values_ == other.values_ && trainable_ == other.trainable_;
  }

 private:
  std::vector<std::string> names_;
  std::vector<Tensor<T>> values_;
  std::vector<bool> trainable_;
  std::unordered_map<std::string, int> index_;
};

/// Per-forward view of a ParamStore: hands out one graph leaf per parameter
/// and, after backward, exposes their gradients. With `batch_stats` set,
/// normalisation layers use batch statistics and log them for a later
/// running-average update.
template <typename T>
class Binder {
 public:
  Binder(const ParamStore<T>& store, bool track_grad, bool batch_stats = false)
      : store_(&store), track_(track_grad), batch_stats_(batch_stats), leaves_(store.count()) {}

  Var<T> operator()(int id) {
    auto& leaf = leaves_[static_cast<std::size_t>(id)];
    if (!leaf) leaf = ag::borrow(store_->value(id), track_ && store_->trainable(id));
    return leaf;
  }

  const Tensor<T>& buffer(int id) const { return store_->value(id); }
  bool tracking() const { return track_; }
  bool batch_stats() const { return batch_stats_; }

  struct StatUpdate {
    int mean_id, var_id;
    std::vector<T> mean, var;  // var is the unbiased batch variance
  };

  void record_stats(StatUpdate u) { stats_.push_back(std::move(u)); }

  /// running = (1 - momentum) * running + momentum * batch, for every logged layer.
  void apply_stats(ParamStore<T>& store, double momentum) const {
    const T mom = static_cast<T>(momentum);
    for (const auto& u : stats_) {
      auto& m = store.value(u.mean_id);
      auto& v = store.value(u.var_id);
      for (std::size_t i = 0; i < m.size(); ++i) {
        m[i] = (T(1) - mom) * m[i] + mom * u.mean[i];
        v[i] = (T(1) - mom) * v[i] + mom * u.var[i];
      }
    }
  }

  /// Adds the gradient of every touched parameter into `grads`.
  void accumulate(std::vector<Tensor<T>>& grads) const {
    for (std::size_t i = 0; i < leaves_.size(); ++i) {
      const auto& leaf = leaves_[i];
      if (!leaf || !leaf->has_grad()) continue;
      auto& dst = grads[i];
      for (std::size_t j = 0; j < dst.size(); ++j) dst[j] += leaf->grad[j];
    }
  }

 private:
  const ParamStore<T>* store_;
  bool track_;
  bool batch_stats_;
  std::vector<Var<T>> leaves_;
  std::vector<StatUpdate> stats_;
};

template <typename T>
Tensor<T> he_normal(Shape shape, int fan_in, Rng& rng) {
  Tensor<T> t(std::move(shape));
  const double sd = std::sqrt(2.0 / std::max(fan_in, 1));
  for (auto& v : t.data) v = static_cast<T>(rng.normal() * sd);
  return t;
}

template <typename T>
Tensor<T> uniform_init(Shape shape, double bound, Rng& rng) {
  Tensor<T> t(std::move(shape));
  for (auto& v : t.data) v = static_cast<T>(rng.uniform(-bound, bound));
  return t;
}

/// Dense or depthwise 2-D convolution with bias.
struct Conv {
  int weight = -1;
  int bias = -1;
  int stride = 1;
  int pad = 0;
  bool depthwise = false;

  template <typename T>
  static Conv create(ParamStore<T>& store, const std::string& name, int in_ch, int out_ch, int kernel, int stride,
                     Rng& rng, bool depthwise = false, double gain = 1.0, bool with_bias = true) {
    Conv c;
    c.stride = stride;
    c.pad = kernel / 2;
    c.depthwise = depthwise;
    const int fan_in = depthwise ? kernel * kernel : in_ch * kernel * kernel;
    Shape shape = depthwise ? Shape{out_ch, 1, kernel, kernel} : Shape{out_ch, in_ch, kernel, kernel};
    auto w = he_normal<T>(shape, fan_in, rng);
    for (auto& v : w.data) v = static_cast<T>(v * gain);
    c.weight = store.add(name + ".weight", std::move(w));
    if (with_bias) c.bias = store.add(name + ".bias", Tensor<T>({out_ch}));
    return c;
  }

  template <typename T>
  Var<T> operator()(Binder<T>& p, const Var<T>& x) const {
    const Var<T> b = bias >= 0 ? p(bias) : Var<T>{};
    return depthwise ? ag::depthwise_conv2d(x, p(weight), b, stride, pad) : ag::conv2d(x, p(weight), b, stride, pad);
  }
};

/// Batch normalisation with running statistics kept as store buffers.
struct BatchNorm {
  int gamma = -1, beta = -1, mean = -1, var = -1;
  double eps = 1e-5;

  template <typename T>
  static BatchNorm create(ParamStore<T>& store, const std::string& name, int channels, double gamma_init = 1.0) {
    BatchNorm n;
    n.gamma = store.add(name + ".gamma", Tensor<T>({channels}, static_cast<T>(gamma_init)));
    n.beta = store.add(name + ".beta", Tensor<T>({channels}));
    n.mean = store.add(name + ".running_mean", Tensor<T>({channels}), false);
    n.var = store.add(name + ".running_var", Tensor<T>({channels}, T(1)), false);
    return n;
  }

  template <typename T>
  Var<T> operator()(Binder<T>& p, const Var<T>& x) const {
    const T e = static_cast<T>(eps);
    if (!p.batch_stats()) return ag::batch_norm(x, p(gamma), p(beta), e, &p.buffer(mean), &p.buffer(var));
    typename Binder<T>::StatUpdate u{mean, var, {}, {}};
    auto y = ag::batch_norm<T>(x, p(gamma), p(beta), e, nullptr, nullptr, &u.mean, &u.var);
    const double m = static_cast<double>(x->val().size() / static_cast<std::size_t>(x->val().shape[3]));
    if (m > 1)
      for (auto& v : u.var) v = static_cast<T>(v * m / (m - 1));
    p.record_stats(std::move(u));
    return y;
  }
};

struct Linear {
  int weight = -1;
  int bias = -1;

  template <typename T>
  static Linear create(ParamStore<T>& store, const std::string& name, int in_features, int out_features, Rng& rng) {
    Linear l;
    const double bound = 1.0 / std::sqrt(static_cast<double>(in_features));
    l.weight = store.add(name + ".weight", uniform_init<T>({out_features, in_features}, bound, rng));
    l.bias = store.add(name + ".bias", Tensor<T>({out_features}));
    return l;
  }

  template <typename T>
  Var<T> operator()(Binder<T>& p, const Var<T>& x) const {
    return ag::linear(x, p(weight), p(bias));
  }
};

/// Single-layer LSTM, gate order (input, forget, cell, output).
struct Lstm {
  int w_ih = -1;
  int w_hh = -1;
  int bias = -1;
  int hidden = 0;

  template <typename T>
  static Lstm create(ParamStore<T>& store, const std::string& name, int input, int hidden, Rng& rng) {
    Lstm l;
    l.hidden = hidden;
    const double bound = 1.0 / std::sqrt(static_cast<double>(hidden));
    l.w_ih = store.add(name + ".w_ih", uniform_init<T>({4 * hidden, input}, bound, rng));
    l.w_hh = store.add(name + ".w_hh", uniform_init<T>({4 * hidden, hidden}, bound, rng));
    l.bias = store.add(name + ".bias", uniform_init<T>({4 * hidden}, bound, rng));
    return l;
  }

  /// One cell update from (h, c); returns (h', c').
  template <typename T>
  std::pair<Var<T>, Var<T>> step(Binder<T>& p, const Var<T>& x_proj, const Var<T>& h, const Var<T>& c) const {
    auto gates = ag::add(x_proj, ag::linear(h, p(w_hh), Var<T>{}));
    auto i = ag::sigmoid(ag::slice_last(gates, 0, hidden));
    auto f = ag::sigmoid(ag::slice_last(gates, hidden, hidden));
    auto g = ag::tanh(ag::slice_last(gates, 2 * hidden, hidden));
    auto o = ag::sigmoid(ag::slice_last(gates, 3 * hidden, hidden));
    auto c_next = ag::add(ag::mul(f, c), ag::mul(i, g));
    auto h_next = ag::mul(o, ag::tanh(c_next));
    return {h_next, c_next};
  }

  /// Runs over the rows of `seq` [T, D] in the given direction, starting
  /// from zero state; returns the final hidden state [1, hidden].
  template <typename T>
  Var<T> final_hidden(Binder<T>& p, const Var<T>& seq, bool reverse) const {
    const int steps = seq->val().shape[0];
    auto proj = ag::linear(seq, p(w_ih), p(bias));
    auto h = ag::constant(Tensor<T>({1, hidden}));
    auto c = ag::constant(Tensor<T>({1, hidden}));
    for (int s = 0; s < steps; ++s) {
      const int t = reverse ? steps - 1 - s : s;
      std::tie(h, c) = step(p, ag::row(proj, t), h, c);
    }
    return h;
  }
};

}  // namespace fas::nn
