#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "refine3d/config.hpp"
#include "refine3d/model.hpp"
#include "refine3d/nn.hpp"
#include "refine3d/scene.hpp"
#include "refine3d/tensor.hpp"

namespace refine3d {

struct GradcheckConfig {
  /// Central-difference steps tried in order; an entry passes on the first
  /// step that agrees, so a step that straddles a ReLU or max kink gets a
  /// second chance with a smaller one.
  std::vector<double> steps{1e-5, 1e-6, 1e-7};
  double tolerance = 1e-4;
  /// Denominator floor of the relative error, multiplied by max(1, |loss|)
  /// since central-difference rounding noise grows with the loss value.
  double floor = 1e-6;
  std::size_t samples_per_tensor = 4;
  /// Parameter path prefixes to check; empty checks everything.
  std::vector<std::string> include;

  static GradcheckConfig from_config(const Config& cfg);
};

/// |analytic - numeric| / max(|analytic|, |numeric|, floor).
double relative_error(double analytic, double numeric, double floor);

struct GradcheckGroup {
  std::string name;
  std::size_t checked = 0;
  std::size_t nonzero = 0;  // checked entries with a nonzero analytic gradient
  double max_rel_error = 0.0;
  std::string worst;  // path[index] of the worst entry
  bool pass = true;
};

struct GradcheckReport {
  std::vector<GradcheckGroup> groups;

  bool pass() const;
  std::string to_text() const;
  void merge(const GradcheckReport& other, const std::string& prefix = {});
};

/// Hook applied to the analytic gradients before comparison.
using GradientFault = std::function<void(ParamStore&)>;

/// Compares backward() of `loss_fn` with central differences on sampled
/// entries of every parameter in `store`, grouped by parameter path without
/// its last component. `loss_fn` must be deterministic. No parameters (or
/// none matching cfg.include) gives an empty, passing report.
GradcheckReport gradcheck_params(ParamStore& store, const std::function<Tensor()>& loss_fn,
                                 const GradcheckConfig& cfg, std::uint64_t seed,
                                 const GradientFault& fault = {});

/// One group per differentiable tensor op on random inputs.
GradcheckReport gradcheck_ops(const GradcheckConfig& cfg, std::uint64_t seed,
                              const GradientFault& fault = {});

/// Fixture: one small generated scene with two ROIs jittered from its boxes,
/// close enough that both pass the regression gate.
struct GradcheckFixture {
  Scene scene;
  std::vector<Roi> rois;
};
GradcheckFixture make_gradcheck_fixture(std::uint64_t seed);

/// Total loss of a freshly initialized model on the fixture.
GradcheckReport gradcheck_model(const ModelConfig& model_cfg, const GradcheckConfig& cfg,
                                std::uint64_t seed, const GradientFault& fault = {});

}  // namespace refine3d
