#pragma once

#include <optional>
#include <string>
#include <vector>

#include "featflow/common.hpp"
#include "featflow/lm.hpp"
#include "featflow/train.hpp"

namespace featflow::merge {

struct ManifestEntry {
  std::string name;
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::size_t offset = 0;
  bool operator==(const ManifestEntry&) const = default;
};

using Manifest = std::vector<ManifestEntry>;

template <typename Scalar>
struct FlatParams {
  lm::LMConfig config;
  Manifest manifest;
  Vector<Scalar> values;
};

template <typename Scalar>
FlatParams<Scalar> flatten(const lm::LMParams<Scalar>& params);

/// Throws MergeCompatibilityError if the manifest does not match the config.
template <typename Scalar>
lm::LMParams<Scalar> unflatten(const FlatParams<Scalar>& flat);

/// Tensor layout implied by a config, in the LMParams manifest order.
Manifest manifest_for(const lm::LMConfig& cfg);

/// Throws MergeCompatibilityError naming the first differing tensor.
void check_compatible(const Manifest& a, const Manifest& b);
void check_compatible(const lm::LMConfig& a, const lm::LMConfig& b);

/// Spherical interpolation of two flat vectors, computed in double. Falls
/// back to (1-t)a + tb when the angle is below 1e-6 rad. t=0 and t=1 return
/// the endpoints exactly.
template <typename Scalar>
Vector<Scalar> slerp(const Vector<Scalar>& a, const Vector<Scalar>& b, double t);

enum class MergeMode { kWholeVector, kPerTensor };

template <typename Scalar>
lm::LMParams<Scalar> merge_models(const lm::LMParams<Scalar>& a, const lm::LMParams<Scalar>& b,
                                  double t, MergeMode mode = MergeMode::kWholeVector);

/// {0, 1/(n-1), ..., 1}; the default 21 points step by 0.05.
std::vector<double> uniform_grid(std::size_t n_points = 21);

struct SweepResult {
  std::vector<double> grid;
  std::vector<double> acc_a;
  std::vector<double> acc_b;
  std::vector<double> loss_a;
  std::vector<double> loss_b;
  std::optional<double> base_acc_a;
  std::optional<double> base_acc_b;

  /// Throws ContractViolation when the grid or accuracies break their invariants.
  void validate() const;
};

/// Evaluates one merged model per grid point on both domain streams.
template <typename Scalar>
SweepResult sweep(const lm::LMParams<Scalar>& model_a, const lm::LMParams<Scalar>& model_b,
                  const std::vector<double>& grid, const train::EvalStream& eval_a,
                  const train::EvalStream& eval_b, std::size_t n_eval_tokens,
                  const lm::LMParams<Scalar>* base = nullptr,
                  MergeMode mode = MergeMode::kWholeVector);

struct MergeSelection {
  double t_star = 0.0;
  std::size_t index = 0;
  double acc_a = 0.0;
  double acc_b = 0.0;
  double gap = 0.0;
};

/// argmin |acc_a - acc_b|; ties go to the higher mean accuracy, then smaller t.
MergeSelection select_equilibrium(const SweepResult& sweep);

}  // namespace featflow::merge
