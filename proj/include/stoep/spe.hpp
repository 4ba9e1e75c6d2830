#pragma once

// Space-informed parameter estimation: lift observations, fuse a dynamic
// attention dependency with a learnable static prior, enhance the features,
// run a gated dilated temporal-convolution / graph-convolution backbone and
// emit beta and gamma through sigmoid heads.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <stdexcept>
#include <tuple>
#include <utility>
#include <vector>

#include "stoep/autodiff.hpp"
#include "stoep/domain.hpp"
#include "stoep/random.hpp"

namespace stoep::spe {

struct SpeConfig {
  std::size_t regions = 0;
  std::size_t channels = 4;  // C
  std::size_t lifted = 8;    // C_c
  std::size_t heads = 4;
  std::size_t hidden = 16;
  std::size_t skip = 32;
  std::size_t out_dim = 16;  // d
  std::size_t kernel = 2;
  std::vector<std::size_t> dilations{1, 2, 4, 8};
  std::size_t t_in = 14;
  std::size_t t_out = 14;

  std::size_t receptive_field() const {
    std::size_t rf = 1;
    for (std::size_t d : dilations) rf += (kernel - 1) * d;
    return rf;
  }

  void check() const {
    if (heads == 0 || lifted % heads != 0) throw ConfigError("spe: heads must divide lifted channels");
    if (kernel != 2) throw ConfigError("spe: only kernel size 2 is supported");
    if (dilations.empty()) throw ConfigError("spe: dilation schedule is empty");
    if (receptive_field() < t_in)
      throw ConfigError("spe: dilation schedule's receptive field " + std::to_string(receptive_field()) +
                        " does not cover t_in = " + std::to_string(t_in));
  }
};

// 1x1 convolution over channels, shared across regions and time.
struct FeatureLift {
  ad::Var weight;  // [C, C_c]
  ad::Var bias;    // [C_c]
};

struct DependencyAttention {
  ad::Var query;  // [C_c, C_c]
  ad::Var key;    // [C_c, C_c]
};

struct SpatialPrior {
  ad::Var scores;    // S [N, N], starts at the identity
  ad::Var gate_w;    // [2, 1], phi over stacked (A_node, A_struct)
  ad::Var gate_b;    // [1]
  ad::Var residual;  // epsilon [1] in [0, 1], starts at 0

  void clamp_residual() {
    double& e = residual.mutable_value()[0];
    e = std::clamp(e, 0.0, 1.0);
  }
};

struct BackboneLayer {
  std::size_t dilation = 1;
  ad::Var filter_past, filter_now, filter_b;  // [h, h], [h, h], [h]
  ad::Var gate_past, gate_now, gate_b;
  ad::Var skip_w, skip_b;                     // [h, skip], [skip]
  ad::Var graph_self, graph_mix, graph_b;     // [h, h], [h, h], [h]
};

struct Backbone {
  ad::Var start_w, start_b;  // [C_c, h], [h]
  std::vector<BackboneLayer> layers;
  ad::Var end_w, end_b;    // [skip, d], [d]
  ad::Var time_w, time_b;  // [T_in, T_out], [T_out]
};

struct ParamHeads {
  ad::Var beta_w, beta_b;    // [d, 1], [1]
  ad::Var gamma_w, gamma_b;  // [d, 1], [1]
};

struct SpeParams {
  FeatureLift lift;
  DependencyAttention attention;
  SpatialPrior prior;
  Backbone backbone;
  ParamHeads heads;

  static SpeParams init(const SpeConfig& cfg, Rng& rng) {
    cfg.check();
    auto param = [](Tensor t) { return ad::Var::parameter(std::move(t)); };
    const std::size_t h = cfg.hidden;
    SpeParams p;
    p.lift = {param(xavier(cfg.channels, cfg.lifted, rng)), param(Tensor({cfg.lifted}))};
    p.attention = {param(xavier(cfg.lifted, cfg.lifted, rng)), param(xavier(cfg.lifted, cfg.lifted, rng))};
    Tensor eye({cfg.regions, cfg.regions});
    for (std::size_t i = 0; i < cfg.regions; ++i) eye(i, i) = 1.0;
    p.prior = {param(std::move(eye)), param(Tensor({2, 1}, {0.5, 0.5})), param(Tensor({1})), param(Tensor({1}))};

    Backbone& b = p.backbone;
    b.start_w = param(xavier(cfg.lifted, h, rng));
    b.start_b = param(Tensor({h}));
    for (std::size_t d : cfg.dilations) {
      BackboneLayer l;
      l.dilation = d;
      l.filter_past = param(xavier(h, h, rng));
      l.filter_now = param(xavier(h, h, rng));
      l.filter_b = param(Tensor({h}));
      l.gate_past = param(xavier(h, h, rng));
      l.gate_now = param(xavier(h, h, rng));
      l.gate_b = param(Tensor({h}));
      l.skip_w = param(xavier(h, cfg.skip, rng));
      l.skip_b = param(Tensor({cfg.skip}));
      l.graph_self = param(xavier(h, h, rng));
      l.graph_mix = param(xavier(h, h, rng));
      l.graph_b = param(Tensor({h}));
      b.layers.push_back(std::move(l));
    }
    b.end_w = param(xavier(cfg.skip, cfg.out_dim, rng));
    b.end_b = param(Tensor({cfg.out_dim}));
    b.time_w = param(xavier(cfg.t_in, cfg.t_out, rng));
    b.time_b = param(Tensor({cfg.t_out}));

    p.heads = {param(xavier(cfg.out_dim, 1, rng)), param(Tensor({1})), param(xavier(cfg.out_dim, 1, rng)),
               param(Tensor({1}))};
    return p;
  }
};

// X [N, T, C] -> X_c [N, T, C_c].
inline ad::Var lift_features(const ad::Var& x, const FeatureLift& lift) {
  return ad::linear(x, lift.weight, lift.bias);
}

// Mean over time steps and heads of region-to-region self-attention maps.
inline ad::Var dynamic_dependency(const ad::Var& xc, const DependencyAttention& att, std::size_t heads) {
  return ad::attention_average(ad::linear(xc, att.query), ad::linear(xc, att.key), heads);
}

inline ad::Var static_dependency(const SpatialPrior& prior) { return ad::softmax_rows(prior.scores); }

// sigma(Gamma) * A_node + (1 - sigma(Gamma)) * A_struct with Gamma = phi([A_node; A_struct]).
inline ad::Var fuse_dependencies(const ad::Var& node, const ad::Var& structural, const SpatialPrior& prior) {
  ad::Var w_node = ad::reshape(ad::slice_cols(ad::reshape(prior.gate_w, {1, 2}), 0, 1), {1});
  ad::Var w_struct = ad::reshape(ad::slice_cols(ad::reshape(prior.gate_w, {1, 2}), 1, 1), {1});
  ad::Var gate = ad::sigmoid(ad::shift_by(ad::add(ad::scale_by(node, w_node), ad::scale_by(structural, w_struct)),
                                          prior.gate_b));
  return ad::add(ad::mul(gate, node), ad::mul(ad::one_minus(gate), structural));
}

// Symmetrize, clamp at zero, and row-normalize with a 1e-8 guard.
inline ad::Var regularize_dependency(const ad::Var& fused) {
  ad::Var sym = ad::scale(ad::add(fused, ad::transpose(fused)), 0.5);
  return ad::row_normalize(ad::relu(sym), 1e-8);
}

// (1 - eps) X_c + eps * (A X_c), mixing over the region axis.
inline ad::Var enhance_features(const ad::Var& xc, const ad::Var& normalized, const SpatialPrior& prior) {
  return ad::lerp(xc, ad::matmul(normalized, xc), prior.residual);
}

namespace detail {

inline ad::Var dilated_conv(const ad::Var& x, std::size_t dilation, const ad::Var& past, const ad::Var& now,
                            const ad::Var& bias) {
  return ad::add(ad::linear(ad::time_shift(x, dilation), past), ad::linear(x, now, bias));
}

}  // namespace detail

// O [N, T_in, C_c] and adjacency [N, N] -> Z [N, T_out, d].
//
// Each layer: gated causal dilated convolution (tanh * sigmoid), a skip
// projection, then a graph convolution with row-normalized |A| plus a learned
// self term, and a residual connection. The summed skips pass through a
// channel map to d and a time map from T_in to T_out.
inline ad::Var backbone(const ad::Var& features, const ad::Var& adjacency, const Backbone& net) {
  const Shape& s = features.shape();
  if (s.size() != 3 || adjacency.shape() != Shape{s[0], s[0]})
    throw std::invalid_argument("backbone: features " + shape_string(s) + " vs adjacency " +
                                shape_string(adjacency.shape()));
  ad::Var support = ad::row_normalize(ad::abs(adjacency), 1e-8);
  ad::Var x = ad::linear(features, net.start_w, net.start_b);
  ad::Var skip;
  for (const BackboneLayer& l : net.layers) {
    ad::Var filter = ad::tanh(detail::dilated_conv(x, l.dilation, l.filter_past, l.filter_now, l.filter_b));
    ad::Var gate = ad::sigmoid(detail::dilated_conv(x, l.dilation, l.gate_past, l.gate_now, l.gate_b));
    ad::Var h = ad::mul(filter, gate);
    ad::Var s_out = ad::linear(h, l.skip_w, l.skip_b);
    skip = skip ? ad::add(skip, s_out) : s_out;
    ad::Var mixed = ad::matmul(support, h);
    ad::Var graph = ad::add(ad::linear(h, l.graph_self), ad::linear(mixed, l.graph_mix, l.graph_b));
    x = ad::add(graph, x);
  }
  ad::Var z = ad::linear(skip, net.end_w, net.end_b);           // [N, T_in, d]
  z = ad::linear(ad::swap_last(z), net.time_w, net.time_b);     // [N, d, T_out]
  return ad::swap_last(z);                                      // [N, T_out, d]
}

// Z [N, T_out, d] -> (beta, gamma), each [N, T_out] in (0, 1).
inline std::pair<ad::Var, ad::Var> estimate_params(const ad::Var& z, const ParamHeads& heads) {
  const Shape& s = z.shape();
  ad::Var beta = ad::sigmoid(ad::reshape(ad::linear(z, heads.beta_w, heads.beta_b), {s[0], s[1]}));
  ad::Var gamma = ad::sigmoid(ad::reshape(ad::linear(z, heads.gamma_w, heads.gamma_b), {s[0], s[1]}));
  return {beta, gamma};
}

struct SpeOutput {
  ad::Var lifted;
  ad::Var node_dependency;
  ad::Var static_dependency;
  ad::Var fused;
  ad::Var normalized;
  ad::Var enhanced;
  ad::Var hidden;
  ad::Var beta;
  ad::Var gamma;
};

inline SpeOutput run(const ad::Var& features, const ad::Var& adjacency, const SpeParams& p, const SpeConfig& cfg) {
  SpeOutput o;
  o.lifted = lift_features(features, p.lift);
  o.node_dependency = dynamic_dependency(o.lifted, p.attention, cfg.heads);
  o.static_dependency = static_dependency(p.prior);
  o.fused = fuse_dependencies(o.node_dependency, o.static_dependency, p.prior);
  o.normalized = regularize_dependency(o.fused);
  o.enhanced = enhance_features(o.lifted, o.normalized, p.prior);
  o.hidden = backbone(o.enhanced, adjacency, p.backbone);
  std::tie(o.beta, o.gamma) = estimate_params(o.hidden, p.heads);
  return o;
}

}  // namespace stoep::spe
