#pragma once

#include "supergseg/common.hpp"

#include <filesystem>
#include <map>
#include <span>
#include <string>
#include <vector>

namespace supergseg {

/// lr_initial * (lr_final / lr_initial)^(step / total).
double lr_schedule(long step, long total, double lr_initial, double lr_final);

struct AdamMoments {
  std::vector<double> m;
  std::vector<double> v;
  bool operator==(const AdamMoments&) const = default;
};

struct OptimizerState {
  std::map<std::string, AdamMoments> slots;
  long step = 0;
  bool operator==(const OptimizerState&) const = default;
};

/// One named parameter block with its gradient.
struct ParamBlock {
  std::string name;
  std::span<double> values;
  std::span<const double> grads;
};

/// Adam with beta = (0.9, 0.999), eps = 1e-8 and bias correction.
class Adam {
 public:
  static constexpr double kBeta1 = 0.9;
  static constexpr double kBeta2 = 0.999;
  static constexpr double kEpsilon = 1e-8;

  Adam() = default;
  explicit Adam(OptimizerState state) : state_(std::move(state)) {}

  /// Applies one step to every block. If any gradient is non-finite, nothing
  /// changes (including the step counter) and false is returned.
  bool step(const std::vector<ParamBlock>& blocks, double lr);

  const OptimizerState& state() const { return state_; }
  OptimizerState& state() { return state_; }

 private:
  OptimizerState state_;
};

/// Single-block convenience wrapper used by tests and small callers.
bool adam_update(std::span<double> params, std::span<const double> grads, OptimizerState& state, double lr,
                 const std::string& slot = "params");

// "supergseg-opt/1" JSON with base64 f64 moment arrays.
void save_optimizer_state(const OptimizerState& state, const std::filesystem::path& path);
OptimizerState load_optimizer_state(const std::filesystem::path& path);

}  // namespace supergseg
