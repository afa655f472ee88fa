#pragma once

#include <map>
#include <optional>
#include <span>
#include <string>
#include <string_view>

#include "json.hpp"
#include "vtcd/nn.hpp"
#include "vtcd/tensor.hpp"

namespace vtcd {

enum class Phase { Denoise = 0, Sr = 1, Joint = 2 };

std::string_view to_string(Phase p);
Phase parse_phase(std::string_view s);

struct WeightOverride {
  std::optional<double> w_adv, w_cyc, w_id, w_tv, w_content, w_diff;
};

struct LossWeights {
  double w_adv = 1.0;
  double w_cyc = 10.0;
  double w_id = 5.0;
  double w_tv = 0.1;
  double w_content = 1.0;
  double w_diff = 1.0;
  std::map<Phase, WeightOverride> phase_schedule;

  void validate() const;
  /// Base weights with the phase's overrides applied (schedule cleared).
  LossWeights active(Phase p) const;
};

struct LossBreakdown {
  double adv_g = 0.0, adv_d = 0.0, cyc = 0.0, id = 0.0, tv = 0.0, content = 0.0, diff = 0.0;
  double total = 0.0;
};

/// Differentiable feature extractor used by the content loss.
class FeatureMap {
 public:
  virtual ~FeatureMap() = default;
  virtual Tensor forward(const Tensor& x) const = 0;
  /// Vector-Jacobian product: (d forward / d x)^T gout evaluated at x.
  virtual Tensor vjp(const Tensor& x, const Tensor& gout) const = 0;
};

class IdentityFeatureMap final : public FeatureMap {
 public:
  Tensor forward(const Tensor& x) const override { return x; }
  Tensor vjp(const Tensor&, const Tensor& gout) const override { return gout; }
};

// Each loss returns its value; when gradient spans are non-empty they receive
// (overwrite) the partial derivatives with respect to the matching input.

/// mean((d_real - 1)^2) + mean(d_fake^2)
double adversarial_d(std::span<const double> d_real, std::span<const double> d_fake,
                     std::span<double> g_real = {}, std::span<double> g_fake = {});
/// mean((d_fake - 1)^2)
double adversarial_g(std::span<const double> d_fake, std::span<double> g_fake = {});
/// Mean absolute difference.
double cycle_consistency(const Tensor& x, const Tensor& x_rec, std::span<double> g_x = {},
                         std::span<double> g_rec = {});
double identity_loss(const Tensor& x, const Tensor& g_of_x, std::span<double> g_x = {},
                     std::span<double> g_gx = {});
/// Interior 2D gradient magnitude per channel, normalised by h*w*c.
double tv_loss(const Tensor& img, std::span<double> g = {});
/// (1/N) || phi(pred) - phi(ref) ||_2 with N the feature element count.
double content_loss(const Tensor& pred, const Tensor& ref, const FeatureMap& phi, Tensor* g_pred = nullptr,
                    Tensor* g_ref = nullptr);
/// Mean squared difference.
double diffusion_loss(const Tensor& eps_true, const Tensor& eps_pred, std::span<double> g_true = {},
                      std::span<double> g_pred = {});

LossBreakdown total_loss(const LossBreakdown& parts, const LossWeights& w, Phase phase);

nlohmann::json to_json(const LossWeights& w);
LossWeights loss_weights_from_json(const nlohmann::json& j);
nlohmann::json to_json(const LossBreakdown& b);

/// Graph nodes for the same objectives; results are scalar nodes.
namespace loss_ops {
using nn::Graph;
Graph::Id adversarial_d(Graph& g, Graph::Id d_real, Graph::Id d_fake);
Graph::Id adversarial_g(Graph& g, Graph::Id d_fake);
Graph::Id mae(Graph& g, Graph::Id a, Graph::Id b);
Graph::Id mse(Graph& g, Graph::Id a, Graph::Id b);
Graph::Id tv(Graph& g, Graph::Id img);
/// Feature-space distance between two already-encoded feature nodes.
Graph::Id feature_distance(Graph& g, Graph::Id fa, Graph::Id fb);
}  // namespace loss_ops

}  // namespace vtcd
