#pragma once

#include <functional>
#include <initializer_list>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "vtcd/rng.hpp"
#include "vtcd/tensor.hpp"

namespace vtcd::nn {

struct Param {
  std::string name;
  Tensor value;
  Tensor grad;
  bool trainable = true;

  Param() = default;
  Param(std::string n, Tensor v) : name(std::move(n)), value(std::move(v)) {}

  void zero_grad();
};

/// Conv weights are stored (cout, cin, k*k); He-style uniform init.
Param conv_weight(const std::string& name, int cout, int cin, int k, Rng& rng, double gain = 1.0);
Param zeros(const std::string& name, int c, int h = 1, int w = 1);

/// Tape of tensor-valued nodes with reverse-mode differentiation. Nodes that do not
/// depend on a tracked parameter or input carry no backward closure.
class Graph {
 public:
  using Id = int;
  using BackFn = std::function<void(const Tensor& gout)>;

  Graph() = default;
  Graph(const Graph&) = delete;
  Graph& operator=(const Graph&) = delete;

  Id constant(Tensor t);
  /// Leaf whose gradient is kept (read with grad()).
  Id variable(Tensor t);
  /// Tracked when p.trainable, otherwise a constant view of its value.
  Id param(Param& p);
  /// Never tracked: gradients still flow to other inputs of the ops using it.
  Id frozen(const Param& p);

  const Tensor& value(Id id) const { return nodes_[id].value; }
  bool tracked(Id id) const { return nodes_[id].tracked; }
  /// Gradient accumulated at a node after backward(); zeros if none reached it.
  Tensor grad(Id id) const;
  double scalar(Id id) const { return nodes_[id].value.v.at(0); }
  std::size_t size() const { return nodes_.size(); }

  /// Seeds d(root)/d(root) = 1 and propagates; parameter gradients are added to Param::grad.
  void backward(Id root);

  /// Registers an op result. `fn` receives the output gradient and must route it to
  /// the inputs via acc().
  Id push(Tensor value, std::initializer_list<Id> inputs, BackFn fn);
  Id push(Tensor value, const std::vector<Id>& inputs, BackFn fn);
  /// Gradient buffer of a node for accumulation inside backward closures.
  Tensor& acc(Id id);

  // Layers.
  Id conv2d(Id x, Id w, std::optional<Id> b, int k);
  Id add(Id a, Id b);
  Id sub(Id a, Id b);
  Id mul(Id a, Id b);
  Id scale(Id a, double s);
  Id add_scalar(Id a, double s);
  Id lrelu(Id a, double slope = 0.2);
  Id tanh(Id a);
  /// gb holds (gamma_0..gamma_{c-1}, beta_0..beta_{c-1}); out = x (1 + gamma) + beta.
  Id film(Id x, Id gb);
  Id avgpool2(Id x);
  Id upsample_nearest(Id x, int h, int w);
  Id concat(const std::vector<Id>& xs);
  Id channel(Id x, int c);
  Id reshape(Id x, int c, int h, int w);
  Id detach(Id x);
  Id mean(Id x);
  /// Weighted sum of scalar nodes.
  Id weighted_sum(const std::vector<std::pair<double, Id>>& terms);

 private:
  struct Node {
    Tensor value;
    Tensor grad;
    bool tracked = false;
    bool keep_grad = false;
    Param* param = nullptr;
    BackFn back;
  };
  std::vector<Node> nodes_;
};

struct AdamConfig {
  double lr = 5e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 1e-5;
  bool amsgrad = true;
};

/// Adam with L2 weight decay added to the gradient; per-parameter step counters so
/// parameters idle in a phase keep their state untouched.
class Adam {
 public:
  struct State {
    Tensor m, v, vmax;
    long step = 0;
  };

  explicit Adam(AdamConfig cfg = {}) : cfg_(cfg) {}

  void step(const std::vector<Param*>& params);
  const AdamConfig& config() const { return cfg_; }
  std::map<std::string, State>& states() { return states_; }
  const std::map<std::string, State>& states() const { return states_; }

 private:
  AdamConfig cfg_;
  std::map<std::string, State> states_;
};

/// Scales all gradients so their joint L2 norm is at most max_norm; returns the pre-clip norm.
double clip_grad_norm(const std::vector<Param*>& params, double max_norm);

}  // namespace vtcd::nn
