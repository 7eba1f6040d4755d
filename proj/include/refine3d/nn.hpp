#pragma once

#include <cstdint>
#include <map>
#include <random>
#include <string>
#include <vector>

#include "refine3d/tensor.hpp"

namespace refine3d {

/// Ordered registry of learnable tensors keyed by dotted path.
class ParamStore {
 public:
  /// Registers a leaf tensor; the path must be new.
  Tensor& add(const std::string& path, Tensor value);
  Tensor& get(const std::string& path);
  const Tensor& get(const std::string& path) const;
  bool contains(const std::string& path) const;

  auto begin() { return params_.begin(); }
  auto end() { return params_.end(); }
  auto begin() const { return params_.begin(); }
  auto end() const { return params_.end(); }
  std::size_t size() const { return params_.size(); }
  std::size_t scalar_count() const;

  void zero_grad();

 private:
  std::map<std::string, Tensor> params_;
};

/// Uniform in [-1/√fan_in, 1/√fan_in].
class Initializer {
 public:
  explicit Initializer(std::uint64_t seed) : rng_(seed) {}
  Tensor uniform(Shape shape, std::size_t fan_in);

 private:
  std::mt19937_64 rng_;
};

struct LinearLayer {
  Tensor weight;  // [out, in]
  Tensor bias;    // [out]

  static LinearLayer create(ParamStore& store, const std::string& path,
                            std::size_t in, std::size_t out, Initializer& init);
  /// x: [m, in] -> [m, out]
  Tensor forward(const Tensor& x) const;
  std::size_t in_features() const { return weight.size(1); }
  std::size_t out_features() const { return weight.size(0); }
};

/// Linear layers with ReLU between them and nothing after the last.
struct Mlp {
  std::vector<LinearLayer> layers;

  /// dims = {in, hidden..., out}
  static Mlp create(ParamStore& store, const std::string& path,
                    const std::vector<std::size_t>& dims, Initializer& init);
  Tensor forward(const Tensor& x) const;
};

enum class NormKind { kLayer, kBatch };

NormKind parse_norm_kind(const std::string& name);
std::string to_string(NormKind kind);

struct NormLayer {
  NormKind kind = NormKind::kLayer;
  Tensor scale;
  Tensor shift;
  double eps = 1e-5;
  double momentum = 0.1;
  // Running statistics, only used by kBatch in eval mode. These are state,
  // not parameters, and are kept outside the gradient graph.
  std::vector<double> running_mean;
  std::vector<double> running_var;

  static NormLayer create(ParamStore& store, const std::string& path,
                          std::size_t channels, NormKind kind);
  /// x: [m, C]. Batch kind in training mode also updates running statistics.
  Tensor forward(const Tensor& x, bool training);
};

struct AdamConfig {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

struct AdamState {
  std::map<std::string, std::vector<double>> m;
  std::map<std::string, std::vector<double>> v;
  std::uint64_t step = 0;
};

/// One bias-corrected Adam update over every parameter in the store, using
/// the accumulated gradients. Parameters without gradients count as zero
/// gradient.
void adam_step(ParamStore& params, AdamState& state, const AdamConfig& cfg);

/// Single-tensor form used by tests and the store-wide step.
void adam_update(std::span<double> param, std::span<const double> grad,
                 std::vector<double>& m, std::vector<double>& v,
                 std::uint64_t step, const AdamConfig& cfg);

}  // namespace refine3d
