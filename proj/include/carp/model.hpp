#pragma once

#include <cmath>
#include <cstddef>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "carp/numerics.hpp"

namespace carp {

/// Fully connected layer computing y = x * weight + bias, weight stored in x out.
struct Dense {
  Matrix weight;
  std::vector<double> bias;

  std::size_t in_dim() const { return weight.rows(); }
  std::size_t out_dim() const { return weight.cols(); }

  friend bool operator==(const Dense&, const Dense&) = default;
};

/// Layer widths. encoder = {in, h1, ..., feat}, projector = {feat, ..., d}.
struct ModelDims {
  std::vector<std::size_t> encoder{16, 64, 64};
  std::vector<std::size_t> projector{64, 32, 16};
  std::size_t k = 64;

  std::size_t in_dim() const { return encoder.front(); }
  std::size_t feature_dim() const { return encoder.back(); }
  std::size_t embed_dim() const { return projector.back(); }

  void validate() const {
    require(encoder.size() >= 2, "model: encoder needs at least one layer");
    require(projector.size() >= 2, "model: projector needs at least one layer");
    require(encoder.back() == projector.front(),
            "model: projector input width must equal encoder output width");
    for (auto w : encoder) require(w >= 1, "model: zero-width encoder layer");
    for (auto w : projector) require(w >= 1, "model: zero-width projector layer");
    require(k >= 1, "model: need at least one prototype");
  }

  friend bool operator==(const ModelDims&, const ModelDims&) = default;
};

/// Encoder f, projector g and prototype matrix C (K x d). The same tree type
/// doubles as the gradient container.
struct ModelParams {
  std::vector<Dense> encoder;
  std::vector<Dense> projector;
  Matrix prototypes;

  ModelDims dims() const {
    ModelDims d;
    d.encoder = {encoder.front().in_dim()};
    for (const auto& l : encoder) d.encoder.push_back(l.out_dim());
    d.projector = {projector.front().in_dim()};
    for (const auto& l : projector) d.projector.push_back(l.out_dim());
    d.k = prototypes.rows();
    return d;
  }

  std::size_t num_layers() const { return encoder.size() + projector.size(); }

  const Dense& layer(std::size_t i) const {
    return i < encoder.size() ? encoder[i] : projector[i - encoder.size()];
  }
  Dense& layer(std::size_t i) {
    return i < encoder.size() ? encoder[i] : projector[i - encoder.size()];
  }

  friend bool operator==(const ModelParams&, const ModelParams&) = default;
};

using Gradients = ModelParams;

/// Named view of one parameter leaf, in a fixed traversal order.
struct LeafView {
  std::string name;
  std::size_t rows;
  std::size_t cols;
  std::span<double> values;
};

struct ConstLeafView {
  std::string name;
  std::size_t rows;
  std::size_t cols;
  std::span<const double> values;
};

inline std::vector<LeafView> leaves(ModelParams& p) {
  std::vector<LeafView> out;
  auto add_stack = [&out](std::vector<Dense>& stack, const std::string& prefix) {
    for (std::size_t i = 0; i < stack.size(); ++i) {
      auto& l = stack[i];
      const std::string base = prefix + "." + std::to_string(i);
      out.push_back({base + ".weight", l.weight.rows(), l.weight.cols(), l.weight.data()});
      out.push_back({base + ".bias", 1, l.bias.size(), l.bias});
    }
  };
  add_stack(p.encoder, "encoder");
  add_stack(p.projector, "projector");
  out.push_back({"prototypes", p.prototypes.rows(), p.prototypes.cols(), p.prototypes.data()});
  return out;
}

inline std::vector<ConstLeafView> leaves(const ModelParams& p) {
  std::vector<ConstLeafView> out;
  for (auto& leaf : leaves(const_cast<ModelParams&>(p)))
    out.push_back({leaf.name, leaf.rows, leaf.cols, leaf.values});
  return out;
}

inline bool same_structure(const ModelParams& a, const ModelParams& b) {
  if (a.encoder.size() != b.encoder.size() || a.projector.size() != b.projector.size())
    return false;
  const auto la = leaves(a);
  const auto lb = leaves(b);
  for (std::size_t i = 0; i < la.size(); ++i)
    if (la[i].rows != lb[i].rows || la[i].cols != lb[i].cols) return false;
  return true;
}

inline ModelParams zeros_like(const ModelParams& p) {
  ModelParams z = p;
  for (auto& leaf : leaves(z))
    for (double& v : leaf.values) v = 0.0;
  return z;
}

inline std::size_t parameter_count(const ModelParams& p) {
  std::size_t n = 0;
  for (const auto& leaf : leaves(p)) n += leaf.values.size();
  return n;
}

/// Glorot-uniform weights, zero biases, unit-norm Gaussian prototype rows.
inline ModelParams init_model(Rng& rng, const ModelDims& dims) {
  dims.validate();
  auto make_stack = [&rng](const std::vector<std::size_t>& widths) {
    std::vector<Dense> stack;
    for (std::size_t i = 0; i + 1 < widths.size(); ++i) {
      const std::size_t fan_in = widths[i];
      const std::size_t fan_out = widths[i + 1];
      const double a = std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
      Dense layer{Matrix(fan_in, fan_out), std::vector<double>(fan_out, 0.0)};
      for (double& w : layer.weight.data()) w = rng.uniform(-a, a);
      stack.push_back(std::move(layer));
    }
    return stack;
  };
  ModelParams p;
  p.encoder = make_stack(dims.encoder);
  p.projector = make_stack(dims.projector);
  p.prototypes = Matrix(dims.k, dims.embed_dim());
  for (std::size_t r = 0; r < dims.k; ++r) {
    auto row = p.prototypes.row(r);
    double n = 0.0;
    while (n == 0.0) {
      for (double& v : row) v = rng.gaussian();
      n = norm2(row);
    }
    for (double& v : row) v /= n;
  }
  return p;
}

/// Everything backward needs. Layer i maps inputs[i] -> pre[i] -> act[i];
/// ReLU is applied after every layer except the last projector layer.
struct ForwardTrace {
  std::vector<Matrix> inputs;
  std::vector<Matrix> pre;
  std::vector<Matrix> act;
  std::size_t encoder_layers = 0;

  const Matrix& features() const { return act[encoder_layers - 1]; }
  const Matrix& embeddings() const { return act.back(); }
  Matrix logits;
};

inline bool relu_after(const ModelParams& p, std::size_t layer) {
  return layer + 1 < p.num_layers();
}

inline ForwardTrace forward(const ModelParams& params, const Matrix& batch) {
  require(!params.encoder.empty() && !params.projector.empty(), "forward: empty model");
  require(batch.cols() == params.encoder.front().in_dim(),
          "forward: batch width " + std::to_string(batch.cols()) + " != model input width " +
              std::to_string(params.encoder.front().in_dim()));
  ForwardTrace trace;
  trace.encoder_layers = params.encoder.size();
  const std::size_t layers = params.num_layers();
  trace.inputs.reserve(layers);
  trace.pre.reserve(layers);
  trace.act.reserve(layers);

  const Matrix* x = &batch;
  for (std::size_t i = 0; i < layers; ++i) {
    const Dense& layer = params.layer(i);
    require(x->cols() == layer.in_dim(), "forward: layer width chain broken");
    trace.inputs.push_back(*x);
    Matrix pre = matmul(*x, layer.weight);
    for (std::size_t r = 0; r < pre.rows(); ++r) {
      auto row = pre.row(r);
      for (std::size_t c = 0; c < row.size(); ++c) row[c] += layer.bias[c];
    }
    Matrix act = pre;
    if (relu_after(params, i))
      for (double& v : act.data()) v = v > 0.0 ? v : 0.0;
    trace.pre.push_back(std::move(pre));
    trace.act.push_back(std::move(act));
    x = &trace.act.back();
  }
  require(trace.embeddings().cols() == params.prototypes.cols(),
          "forward: embedding width != prototype width");
  trace.logits = matmul_transpose_b(trace.embeddings(), params.prototypes);
  return trace;
}

inline Gradients backward(const ModelParams& params, const ForwardTrace& trace,
                          const Matrix& dloss_dlogits) {
  const std::size_t layers = params.num_layers();
  require(trace.pre.size() == layers && trace.encoder_layers == params.encoder.size(),
          "backward: trace was not produced by these params");
  require(dloss_dlogits.same_shape(trace.logits), "backward: dloss_dlogits shape mismatch");
  for (std::size_t i = 0; i < layers; ++i)
    require(trace.pre[i].cols() == params.layer(i).out_dim(),
            "backward: trace/params layer width mismatch");

  Gradients grads = zeros_like(params);
  const Matrix& z = trace.embeddings();
  grads.prototypes = matmul_transpose_a(dloss_dlogits, z);
  Matrix upstream = matmul(dloss_dlogits, params.prototypes);

  for (std::size_t step = 0; step < layers; ++step) {
    const std::size_t i = layers - 1 - step;
    const Dense& layer = params.layer(i);
    Dense& g = grads.layer(i);
    if (relu_after(params, i)) {
      const auto& pre = trace.pre[i].data();
      auto& d = upstream.data();
      for (std::size_t e = 0; e < d.size(); ++e)
        if (pre[e] <= 0.0) d[e] = 0.0;
    }
    g.weight = matmul_transpose_a(trace.inputs[i], upstream);
    for (std::size_t r = 0; r < upstream.rows(); ++r) {
      auto row = upstream.row(r);
      for (std::size_t c = 0; c < row.size(); ++c) g.bias[c] += row[c];
    }
    if (i > 0) upstream = matmul_transpose_b(upstream, layer.weight);
  }
  return grads;
}

/// dst += src, leaf by leaf.
inline void accumulate(Gradients& dst, const Gradients& src) {
  require(same_structure(dst, src), "accumulate: structure mismatch");
  auto d = leaves(dst);
  const auto s = leaves(src);
  for (std::size_t i = 0; i < d.size(); ++i)
    for (std::size_t e = 0; e < d[i].values.size(); ++e) d[i].values[e] += s[i].values[e];
}

}  // namespace carp
