#include "refine3d/nn.hpp"

#include <cmath>

#include "refine3d/ops.hpp"

namespace refine3d {

Tensor& ParamStore::add(const std::string& path, Tensor value) {
  if (params_.count(path)) throw ContractError("duplicate parameter path " + path);
  if (!value.is_leaf() || !value.requires_grad()) {
    throw ContractError("parameter " + path + " must be a requires_grad leaf");
  }
  return params_.emplace(path, std::move(value)).first->second;
}

Tensor& ParamStore::get(const std::string& path) {
  auto it = params_.find(path);
  if (it == params_.end()) throw ContractError("unknown parameter " + path);
  return it->second;
}

const Tensor& ParamStore::get(const std::string& path) const {
  auto it = params_.find(path);
  if (it == params_.end()) throw ContractError("unknown parameter " + path);
  return it->second;
}

bool ParamStore::contains(const std::string& path) const {
  return params_.count(path) > 0;
}

std::size_t ParamStore::scalar_count() const {
  std::size_t n = 0;
  for (const auto& [_, t] : params_) n += t.numel();
  return n;
}

void ParamStore::zero_grad() {
  for (auto& [_, t] : params_) t.zero_grad();
}

Tensor Initializer::uniform(Shape shape, std::size_t fan_in) {
  const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
  std::uniform_real_distribution<double> dist(-bound, bound);
  std::vector<double> values(shape_size(shape));
  for (auto& v : values) v = dist(rng_);
  return Tensor(std::move(shape), std::move(values), true);
}

LinearLayer LinearLayer::create(ParamStore& store, const std::string& path,
                                std::size_t in, std::size_t out,
                                Initializer& init) {
  LinearLayer layer;
  layer.weight = store.add(path + ".weight", init.uniform({out, in}, in));
  layer.bias = store.add(path + ".bias", init.uniform({out}, in));
  return layer;
}

Tensor LinearLayer::forward(const Tensor& x) const {
  return ops::linear(x, weight, bias);
}

Mlp Mlp::create(ParamStore& store, const std::string& path,
                const std::vector<std::size_t>& dims, Initializer& init) {
  if (dims.size() < 2) throw ConfigError("Mlp needs at least input and output dims");
  Mlp mlp;
  for (std::size_t i = 0; i + 1 < dims.size(); ++i) {
    mlp.layers.push_back(LinearLayer::create(
        store, path + "." + std::to_string(i), dims[i], dims[i + 1], init));
  }
  return mlp;
}

Tensor Mlp::forward(const Tensor& x) const {
  Tensor h = x;
  for (std::size_t i = 0; i < layers.size(); ++i) {
    h = layers[i].forward(h);
    if (i + 1 < layers.size()) h = ops::relu(h);
  }
  return h;
}

NormKind parse_norm_kind(const std::string& name) {
  if (name == "layer") return NormKind::kLayer;
  if (name == "batch") return NormKind::kBatch;
  throw ConfigError("unknown norm kind '" + name + "' (expected layer|batch)");
}

std::string to_string(NormKind kind) {
  return kind == NormKind::kLayer ? "layer" : "batch";
}

NormLayer NormLayer::create(ParamStore& store, const std::string& path,
                            std::size_t channels, NormKind kind) {
  NormLayer norm;
  norm.kind = kind;
  norm.scale = store.add(path + ".scale", Tensor::full({channels}, 1.0, true));
  norm.shift = store.add(path + ".shift", Tensor::zeros({channels}, true));
  norm.running_mean.assign(channels, 0.0);
  norm.running_var.assign(channels, 1.0);
  return norm;
}

Tensor NormLayer::forward(const Tensor& x, bool training) {
  if (kind == NormKind::kLayer) return ops::layer_norm(x, scale, shift, eps);
  if (!training) {
    return ops::batch_norm_fixed(x, scale, shift, running_mean, running_var, eps);
  }
  const auto m = x.size(0), c = x.size(1);
  auto X = x.data();
  for (std::size_t j = 0; j < c; ++j) {
    double mu = 0.0, var = 0.0;
    for (std::size_t i = 0; i < m; ++i) mu += X[i * c + j];
    mu /= static_cast<double>(m);
    for (std::size_t i = 0; i < m; ++i) var += (X[i * c + j] - mu) * (X[i * c + j] - mu);
    var /= static_cast<double>(m);
    running_mean[j] = (1.0 - momentum) * running_mean[j] + momentum * mu;
    running_var[j] = (1.0 - momentum) * running_var[j] + momentum * var;
  }
  return ops::batch_norm(x, scale, shift, eps);
}

void adam_update(std::span<double> param, std::span<const double> grad,
                 std::vector<double>& m, std::vector<double>& v,
                 std::uint64_t step, const AdamConfig& cfg) {
  if (!(cfg.lr > 0.0)) throw ConfigError("adam: learning rate must be positive");
  if (grad.size() != param.size()) throw DimensionError("adam: grad/param size mismatch");
  if (m.empty()) m.assign(param.size(), 0.0);
  if (v.empty()) v.assign(param.size(), 0.0);
  if (m.size() != param.size() || v.size() != param.size()) {
    throw DimensionError("adam: moment/param size mismatch");
  }
  const double bc1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(step));
  const double bc2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(step));
  for (std::size_t i = 0; i < param.size(); ++i) {
    m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * grad[i];
    v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * grad[i] * grad[i];
    const double mhat = m[i] / bc1;
    const double vhat = v[i] / bc2;
    param[i] -= cfg.lr * mhat / (std::sqrt(vhat) + cfg.eps);
  }
}

void adam_step(ParamStore& params, AdamState& state, const AdamConfig& cfg) {
  if (!(cfg.lr > 0.0)) throw ConfigError("adam: learning rate must be positive");
  ++state.step;
  for (auto& [path, t] : params) {
    const auto g = t.grad();
    adam_update(t.mutable_data(), g, state.m[path], state.v[path], state.step, cfg);
  }
}

}  // namespace refine3d
