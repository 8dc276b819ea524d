#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "dsmr/tensor.hpp"

namespace dsmr {

struct GradcheckOptions {
  double step = 1e-4;       ///< central-difference step
  double tolerance = 1e-4;  ///< max allowed relative error
  /// Denominator floor of the relative error, multiplied by max(1, |loss|),
  /// so that entries whose true derivative is ~0 are judged on absolute error.
  double floor = 1e-6;
  std::uint64_t seed = 0;
  /// Swap conv2d for a copy whose backward is deliberately wrong. Used to show
  /// that the checker catches a broken gradient.
  bool corrupt_conv = false;
};

struct GradcheckResult {
  std::string op;
  double max_rel_error = 0.0;
  std::size_t checked = 0;  ///< scalar entries compared
  std::size_t skipped = 0;  ///< entries whose perturbation crossed a kink
  bool passed = false;
};

/// A scalar function of some leaf tensors, rebuilt on every evaluation.
struct Probe {
  std::vector<Tensor<double>> leaves;
  std::function<Tensor<double>(Graph<double>&)> loss;
};

/// Compares reverse-mode gradients of probe.loss with respect to every leaf
/// entry against central differences. When a perturbation changes a branch
/// decision (activation sign, pooling winner, |x| sign) the entry is retried
/// with steps 10x and 100x smaller, then skipped.
GradcheckResult check_gradients(const std::string& name, Probe& probe,
                                const GradcheckOptions& options);

struct GradcheckEntry {
  std::string op;
  std::function<Probe(std::uint64_t seed, const GradcheckOptions&)> make;
};

/// Every differentiable operation plus the model and the composite loss, each
/// listed once.
std::vector<GradcheckEntry> gradcheck_registry();

std::vector<GradcheckResult> run_gradcheck(const GradcheckOptions& options);

/// conv2d forward with a backward that is off by a few percent.
Tensor<double> corrupted_conv2d(Graph<double>& g, const Tensor<double>& input,
                                const Tensor<double>& kernel, const Tensor<double>& bias,
                                Padding pad);

}  // namespace dsmr
