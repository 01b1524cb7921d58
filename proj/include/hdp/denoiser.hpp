#pragma once

#include <cmath>
#include <cstdint>
#include <numeric>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "hdp/error.hpp"
#include "hdp/numcore/graph.hpp"
#include "hdp/numcore/ops.hpp"
#include "hdp/numcore/params.hpp"
#include "hdp/numcore/tensor.hpp"

// x0-prediction network: per-field condition MLPs and a max-pooled point
// encoder produce a context vector; a temporal Conv1D U-Net with three
// down-sampling and three up-sampling residual blocks maps the noisy
// trajectory to a clean estimate. Context and step embedding are added to the
// features of every residual block.

namespace hdp::den {

using nc::Shape;
using nc::Tensor;
using nc::Var;

struct DenoiserConfig {
  int channels = 7;
  int horizon = 64;
  std::vector<int> widths{64, 128, 256};
  int kernel = 5;
  int groups = 8;
  int context_width = 256;
  std::vector<int> cond_hidden{128, 512};
  int field_width = 64;
  std::vector<int> point_hidden{64, 128};
  int step_features = 32;
  int step_width = 64;
  int state_dim = 11;
};

inline nlohmann::json to_json(const DenoiserConfig& c) {
  return {{"channels", c.channels}, {"horizon", c.horizon}, {"widths", c.widths}, {"kernel", c.kernel},
          {"groups", c.groups}, {"context_width", c.context_width}, {"cond_hidden", c.cond_hidden},
          {"field_width", c.field_width}, {"point_hidden", c.point_hidden}, {"step_features", c.step_features},
          {"step_width", c.step_width}, {"state_dim", c.state_dim}};
}

inline DenoiserConfig denoiser_config_from_json(const nlohmann::json& j) {
  DenoiserConfig c;
  c.channels = j.value("channels", c.channels);
  c.horizon = j.value("horizon", c.horizon);
  c.widths = j.value("widths", c.widths);
  c.kernel = j.value("kernel", c.kernel);
  c.groups = j.value("groups", c.groups);
  c.context_width = j.value("context_width", c.context_width);
  c.cond_hidden = j.value("cond_hidden", c.cond_hidden);
  c.field_width = j.value("field_width", c.field_width);
  c.point_hidden = j.value("point_hidden", c.point_hidden);
  c.step_features = j.value("step_features", c.step_features);
  c.step_width = j.value("step_width", c.step_width);
  c.state_dim = j.value("state_dim", c.state_dim);
  return c;
}

/// Batched conditioning inputs. Vector fields are [B, F]; points are
/// [B, M, 3] with M possibly 0. `drop[b]` replaces sample b's context with the
/// learned null embedding.
template <typename T>
struct ConditionBatch {
  Tensor<T> start_pose;  // [B, 7]
  Tensor<T> goal_pose;   // [B, 7]
  Tensor<T> state;       // [B, S]
  Tensor<T> gripper;     // [B, 1]
  Tensor<T> rank;        // [B, 1]
  Tensor<T> points;      // [B, M, 3]
  std::vector<bool> drop;

  std::int64_t batch() const { return start_pose.dim(0); }

  template <typename U>
  ConditionBatch<U> cast() const {
    return {start_pose.template cast<U>(), goal_pose.template cast<U>(), state.template cast<U>(),
            gripper.template cast<U>(), rank.template cast<U>(), points.template cast<U>(), drop};
  }
};

/// Sinusoidal features of the diffusion step, [B, features].
template <typename T>
Tensor<T> step_features(const std::vector<int>& steps, int features) {
  const int half = features / 2;
  Tensor<T> out(Shape{static_cast<std::int64_t>(steps.size()), features});
  for (std::size_t b = 0; b < steps.size(); ++b) {
    for (int i = 0; i < half; ++i) {
      const double freq = std::exp(-std::log(10000.0) * i / std::max(1, half - 1));
      const double a = steps[b] * freq;
      out[static_cast<std::int64_t>(b) * features + i] = static_cast<T>(std::sin(a));
      out[static_cast<std::int64_t>(b) * features + half + i] = static_cast<T>(std::cos(a));
    }
  }
  return out;
}

template <typename T>
class DenoiserModel {
 public:
  static constexpr int kVectorFields = 5;

  DenoiserModel() = default;

  DenoiserModel(DenoiserConfig cfg, std::uint64_t seed) : cfg_(std::move(cfg)) {
    if (cfg_.widths.size() != 3) throw ArgumentError("denoiser expects exactly three widths");
    std::mt19937_64 rng(seed);
    const int field_in[kVectorFields] = {7, 7, cfg_.state_dim, 1, 1};
    const char* field_name[kVectorFields] = {"start", "goal", "state", "grip", "rank"};
    for (int f = 0; f < kVectorFields; ++f) {
      std::vector<int> dims{field_in[f]};
      dims.insert(dims.end(), cfg_.cond_hidden.begin(), cfg_.cond_hidden.end());
      dims.push_back(cfg_.field_width);
      fields_.push_back(mlp(std::string("cond.") + field_name[f], dims, rng));
    }
    std::vector<int> pdims{3};
    pdims.insert(pdims.end(), cfg_.point_hidden.begin(), cfg_.point_hidden.end());
    points_ = mlp("cond.points", pdims, rng);
    const int concat_width = kVectorFields * cfg_.field_width + pdims.back();
    context_ = lin("cond.proj", concat_width, cfg_.context_width, rng);
    null_ = params_.add("cond.null", Tensor<T>(Shape{cfg_.context_width}, T{0}));
    step_ = mlp("step", {cfg_.step_features, cfg_.step_width, cfg_.step_width}, rng);

    const int cond_dim = cfg_.context_width + cfg_.step_width;
    const auto& w = cfg_.widths;
    int in = cfg_.channels;
    for (int l = 0; l < 3; ++l) {
      down_.push_back(res("down" + std::to_string(l), in, w[static_cast<std::size_t>(l)], cond_dim, rng));
      downsample_.push_back(conv("down" + std::to_string(l) + ".pool", w[static_cast<std::size_t>(l)],
                                 w[static_cast<std::size_t>(l)], 3, rng));
      in = w[static_cast<std::size_t>(l)];
    }
    mid_ = res("mid", w[2], w[2], cond_dim, rng);
    const int up_out[3] = {w[1], w[0], w[0]};
    int cur = w[2];
    for (int l = 0; l < 3; ++l) {
      const int skip = w[static_cast<std::size_t>(2 - l)];
      upsample_.push_back(conv("up" + std::to_string(l) + ".unpool", cur, cur, 3, rng));
      up_.push_back(res("up" + std::to_string(l), cur + skip, up_out[l], cond_dim, rng));
      cur = up_out[l];
    }
    head_ = conv("head", cur, cfg_.channels, 1, rng);
  }

  const DenoiserConfig& config() const { return cfg_; }
  nc::ParamStore<T>& params() { return params_; }
  const nc::ParamStore<T>& params() const { return params_; }

  /// Context vector [B, context_width] (the null embedding for dropped rows).
  Var<T> encode_conditions(nc::Graph<T>& g, const nc::BoundParams<T>& p, const ConditionBatch<T>& c) const {
    const std::int64_t batch = c.batch();
    const Tensor<T>* inputs[kVectorFields] = {&c.start_pose, &c.goal_pose, &c.state, &c.gripper, &c.rank};
    std::vector<Var<T>> parts;
    for (int f = 0; f < kVectorFields; ++f) {
      if (inputs[f]->rank() != 2 || inputs[f]->dim(0) != batch) throw ShapeError("condition field batch mismatch");
      parts.push_back(apply_mlp(g, p, fields_[static_cast<std::size_t>(f)], g.constant(*inputs[f]), false));
    }
    const std::int64_t feat = cfg_.point_hidden.back();
    if (c.points.rank() == 3 && c.points.dim(1) > 0) {
      const std::int64_t m = c.points.dim(1);
      if (c.points.dim(0) != batch || c.points.dim(2) != 3) throw ShapeError("points must be [B, M, 3]");
      Var<T> flat = g.constant(c.points.reshaped(Shape{batch * m, 3}));
      Var<T> h = apply_mlp(g, p, points_, flat, true);
      parts.push_back(nc::max_axis(nc::reshape(h, Shape{batch, m, feat}), 1));
    } else {
      parts.push_back(g.constant(Tensor<T>(Shape{batch, feat}, T{0})));
    }
    Var<T> ctx = apply_linear(g, p, context_, nc::concat(parts, 1));
    std::vector<bool> drop = c.drop;
    drop.resize(static_cast<std::size_t>(batch), false);
    return nc::select_rows(ctx, p[null_], std::move(drop));
  }

  /// x0 estimate [B, C, T] for noisy input x [B, C, T] at per-sample steps.
  Var<T> forward(nc::Graph<T>& g, const nc::BoundParams<T>& p, Var<T> x, const std::vector<int>& steps,
                 const ConditionBatch<T>& c) const {
    const auto& xs = x.shape();
    if (xs.size() != 3 || xs[1] != cfg_.channels) throw ShapeError("denoiser input must be [B, C, T]");
    if (xs[2] % 8 != 0) throw ShapeError("trajectory length must be a multiple of 8");
    if (static_cast<std::int64_t>(steps.size()) != xs[0] || c.batch() != xs[0]) throw ShapeError("batch mismatch");
    Var<T> ctx = encode_conditions(g, p, c);
    Var<T> temb = apply_mlp(g, p, step_, g.constant(step_features<T>(steps, cfg_.step_features)), false);
    Var<T> cond = nc::gelu(nc::concat(std::vector<Var<T>>{ctx, temb}, 1));

    std::vector<Var<T>> skips;
    Var<T> h = x;
    for (std::size_t l = 0; l < 3; ++l) {
      h = apply_res(g, p, down_[l], h, cond);
      skips.push_back(h);
      h = apply_conv(p, downsample_[l], h, 2, 1);
    }
    h = apply_res(g, p, mid_, h, cond);
    for (std::size_t l = 0; l < 3; ++l) {
      h = apply_conv(p, upsample_[l], nc::upsample_nearest(h, 2), 1, 1);
      h = nc::concat(std::vector<Var<T>>{h, skips[2 - l]}, 1);
      h = apply_res(g, p, up_[l], h, cond);
    }
    return apply_conv(p, head_, h, 1, 0);
  }

  /// Parameter-group prefixes, used by gradient coverage checks.
  static std::vector<std::string> parameter_groups() {
    return {"cond.start", "cond.goal", "cond.state", "cond.grip", "cond.rank", "cond.points", "cond.proj",
            "step", "down0", "down1", "down2", "mid", "up0", "up1", "up2", "head"};
  }

 private:
  struct LinearIdx {
    std::size_t w, b;
  };
  struct ConvIdx {
    std::size_t w, b;
    int kernel;
  };
  struct ResIdx {
    ConvIdx conv1, conv2;
    std::size_t gn1_g, gn1_b, gn2_g, gn2_b;
    LinearIdx inject;
    std::optional<ConvIdx> skip;
    int groups;
  };

  LinearIdx lin(const std::string& name, int in, int out, std::mt19937_64& rng) {
    return {params_.add_uniform(name + ".w", Shape{out, in}, in, rng),
            params_.add_uniform(name + ".b", Shape{out}, in, rng)};
  }
  std::vector<LinearIdx> mlp(const std::string& name, const std::vector<int>& dims, std::mt19937_64& rng) {
    std::vector<LinearIdx> layers;
    for (std::size_t i = 0; i + 1 < dims.size(); ++i) {
      layers.push_back(lin(name + "." + std::to_string(i), dims[i], dims[i + 1], rng));
    }
    return layers;
  }
  ConvIdx conv(const std::string& name, int in, int out, int k, std::mt19937_64& rng) {
    return {params_.add_uniform(name + ".w", Shape{out, in, k}, in * k, rng),
            params_.add_uniform(name + ".b", Shape{out}, in * k, rng), k};
  }
  ResIdx res(const std::string& name, int in, int out, int cond_dim, std::mt19937_64& rng) {
    ResIdx r;
    r.conv1 = conv(name + ".conv1", in, out, cfg_.kernel, rng);
    r.gn1_g = params_.add(name + ".gn1.g", Tensor<T>(Shape{out}, T{1}));
    r.gn1_b = params_.add(name + ".gn1.b", Tensor<T>(Shape{out}, T{0}));
    r.inject = lin(name + ".inject", cond_dim, out, rng);
    r.conv2 = conv(name + ".conv2", out, out, cfg_.kernel, rng);
    r.gn2_g = params_.add(name + ".gn2.g", Tensor<T>(Shape{out}, T{1}));
    r.gn2_b = params_.add(name + ".gn2.b", Tensor<T>(Shape{out}, T{0}));
    if (in != out) r.skip = conv(name + ".res", in, out, 1, rng);
    r.groups = std::gcd(cfg_.groups, out);
    return r;
  }

  Var<T> apply_linear(nc::Graph<T>&, const nc::BoundParams<T>& p, const LinearIdx& l, Var<T> x) const {
    return nc::linear(x, p[l.w], p[l.b]);
  }
  /// GELU between layers; after the last layer only when `final_act`.
  Var<T> apply_mlp(nc::Graph<T>& g, const nc::BoundParams<T>& p, const std::vector<LinearIdx>& layers, Var<T> x,
                   bool final_act) const {
    for (std::size_t i = 0; i < layers.size(); ++i) {
      x = apply_linear(g, p, layers[i], x);
      if (i + 1 < layers.size() || final_act) x = nc::gelu(x);
    }
    return x;
  }
  Var<T> apply_conv(const nc::BoundParams<T>& p, const ConvIdx& c, Var<T> x, int stride, int pad) const {
    return nc::bias_add(nc::conv1d(x, p[c.w], stride, pad), p[c.b], 1);
  }
  Var<T> apply_res(nc::Graph<T>& g, const nc::BoundParams<T>& p, const ResIdx& r, Var<T> x, Var<T> cond) const {
    const int pad = r.conv1.kernel / 2;
    Var<T> h = apply_conv(p, r.conv1, x, 1, pad);
    h = nc::gelu(nc::group_norm(h, p[r.gn1_g], p[r.gn1_b], r.groups));
    h = nc::add_prefix(h, apply_linear(g, p, r.inject, cond));
    h = apply_conv(p, r.conv2, h, 1, pad);
    h = nc::gelu(nc::group_norm(h, p[r.gn2_g], p[r.gn2_b], r.groups));
    Var<T> skip = r.skip ? apply_conv(p, *r.skip, x, 1, 0) : x;
    return nc::add(h, skip);
  }

  DenoiserConfig cfg_;
  nc::ParamStore<T> params_;
  std::vector<std::vector<LinearIdx>> fields_;
  std::vector<LinearIdx> points_;
  LinearIdx context_{};
  std::size_t null_ = 0;
  std::vector<LinearIdx> step_;
  std::vector<ResIdx> down_;
  std::vector<ConvIdx> downsample_;
  ResIdx mid_{};
  std::vector<ConvIdx> upsample_;
  std::vector<ResIdx> up_;
  ConvIdx head_{};
};

/// Converts [T, C] rows into the network's [1, C, T] layout and back.
template <typename T>
Tensor<T> to_channels_first(const Tensor<T>& rows_by_channel) {
  const std::int64_t len = rows_by_channel.dim(0), ch = rows_by_channel.dim(1);
  Tensor<T> out(Shape{1, ch, len});
  for (std::int64_t t = 0; t < len; ++t) {
    for (std::int64_t c = 0; c < ch; ++c) out[c * len + t] = rows_by_channel[t * ch + c];
  }
  return out;
}

template <typename T>
Tensor<T> from_channels_first(const Tensor<T>& x, std::int64_t batch_index = 0) {
  const std::int64_t ch = x.dim(1), len = x.dim(2);
  Tensor<T> out(Shape{len, ch});
  for (std::int64_t t = 0; t < len; ++t) {
    for (std::int64_t c = 0; c < ch; ++c) out[t * ch + c] = x[(batch_index * ch + c) * len + t];
  }
  return out;
}

}  // namespace hdp::den
