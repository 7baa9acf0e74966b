#pragma once

// Oracle suites shared by the `check` command and the acceptance runner.

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "hapnet/autograd.hpp"
#include "hapnet/attention.hpp"
#include "hapnet/losses.hpp"
#include "hapnet/rng.hpp"

namespace hapnet::checks {

struct CheckResult {
  std::string name;
  bool passed = false;
  std::string detail;
};

struct GradCheckReport {
  std::size_t checked = 0;
  double max_rel_error = 0.0;
  std::string worst;  // "<tensor index>[<element>]: analytic vs numeric"
};

// Compares d(loss)/d(p) for `samples` randomly chosen scalar entries of
// `params` (tensor picked uniformly, then element) against central
// differences with step h. Relative error is |a - n| / max(|a|, |n|, floor).
GradCheckReport grad_check(const std::function<ag::Tensor()>& loss, const std::vector<ag::Tensor>& params,
                           std::size_t samples, Rng& rng, double h = 1e-5, double floor = 1e-5);

// Fixed random projection of a tensor to a scalar: sum(x * R).
ag::Tensor random_projection(const ag::Tensor& x, Rng& rng);

ag::Tensor random_tensor(ag::Shape shape, Rng& rng, double scale = 1.0);

// Reference attention with explicit loops (q/k/v/out projections included).
std::vector<double> naive_attention(const MultiHeadAttention& attn, const ag::Tensor& query, const ag::Tensor& kv);

// Reference bilinear read of an HWC map at a normalized (x, y) point, pixel
// centers at (i + 0.5) / size, zero outside.
std::vector<double> naive_bilinear(const ag::Tensor& map, double x, double y);

// Exhaustive minimum over injective gt -> query maps; total summed in gt order.
double brute_force_assignment(const std::vector<double>& costs, std::size_t queries, std::size_t gts);

// Acceptance criteria. The training-based ones write under work_dir.
CheckResult shape_suite();
CheckResult identity_at_init();
CheckResult gradient_suite();
CheckResult matching_oracle();
CheckResult attention_oracle();
CheckResult metrics_oracle();
CheckResult loss_arithmetic();
CheckResult overfit_trainability(const std::string& work_dir);
CheckResult ablation_direction(const std::string& work_dir);
CheckResult determinism(const std::string& work_dir);

// Fast oracle suites (criteria 1-7).
std::vector<CheckResult> run_fast_suites();

}  // namespace hapnet::checks
