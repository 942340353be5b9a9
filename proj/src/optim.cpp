#include "supergseg/optim.hpp"

#include "supergseg/binary_io.hpp"

#include <json.hpp>

#include <cmath>

namespace supergseg {

double lr_schedule(long step, long total, double lr_initial, double lr_final) {
  if (total <= 0) return lr_initial;
  if (step < 0 || step > total) throw ContractError("lr_schedule: step outside [0, total]");
  if (!(lr_initial > 0.0) || !(lr_final > 0.0)) throw ConfigError("learning rates must be positive");
  const double t = static_cast<double>(step) / static_cast<double>(total);
  return lr_initial * std::pow(lr_final / lr_initial, t);
}

bool Adam::step(const std::vector<ParamBlock>& blocks, double lr) {
  for (const auto& b : blocks) {
    if (b.values.size() != b.grads.size()) throw ContractError("adam: parameter/gradient size mismatch in " + b.name);
    for (double g : b.grads) {
      if (!std::isfinite(g)) return false;
    }
  }
  state_.step += 1;
  const double t = static_cast<double>(state_.step);
  const double c1 = 1.0 - std::pow(kBeta1, t);
  const double c2 = 1.0 - std::pow(kBeta2, t);
  for (const auto& b : blocks) {
    auto& mom = state_.slots[b.name];
    if (mom.m.empty()) {
      mom.m.assign(b.values.size(), 0.0);
      mom.v.assign(b.values.size(), 0.0);
    }
    if (mom.m.size() != b.values.size()) throw ContractError("adam: slot '" + b.name + "' changed size");
    for (std::size_t i = 0; i < b.values.size(); ++i) {
      const double g = b.grads[i];
      mom.m[i] = kBeta1 * mom.m[i] + (1.0 - kBeta1) * g;
      mom.v[i] = kBeta2 * mom.v[i] + (1.0 - kBeta2) * g * g;
      const double m_hat = mom.m[i] / c1;
      const double v_hat = mom.v[i] / c2;
      b.values[i] -= lr * m_hat / (std::sqrt(v_hat) + kEpsilon);
    }
  }
  return true;
}

bool adam_update(std::span<double> params, std::span<const double> grads, OptimizerState& state, double lr,
                 const std::string& slot) {
  Adam adam(std::move(state));
  const bool ok = adam.step({ParamBlock{slot, params, grads}}, lr);
  state = std::move(adam.state());
  return ok;
}

void save_optimizer_state(const OptimizerState& state, const std::filesystem::path& path) {
  nlohmann::json j;
  j["schema"] = "supergseg-opt/1";
  j["step"] = state.step;
  j["slots"] = nlohmann::json::object();
  for (const auto& [name, mom] : state.slots) {
    j["slots"][name] = {{"m", base64_encode(pack_f64(mom.m))}, {"v", base64_encode(pack_f64(mom.v))}};
  }
  write_file(path, j.dump());
}

OptimizerState load_optimizer_state(const std::filesystem::path& path) {
  const std::string text = read_file(path);
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(text);
  } catch (const nlohmann::json::parse_error& e) {
    throw ParseError(std::string("optimizer state: ") + e.what(), e.byte);
  }
  try {
    if (j.at("schema") != "supergseg-opt/1") throw ParseError("optimizer state: unsupported schema", 0);
    OptimizerState s;
    s.step = j.at("step").get<long>();
    for (const auto& [name, slot] : j.at("slots").items()) {
      AdamMoments mom;
      mom.m = unpack_f64(base64_decode(slot.at("m").get<std::string>()));
      mom.v = unpack_f64(base64_decode(slot.at("v").get<std::string>()));
      if (mom.m.size() != mom.v.size()) throw ParseError("optimizer state: moment sizes differ in " + name, 0);
      s.slots.emplace(name, std::move(mom));
    }
    return s;
  } catch (const nlohmann::json::exception& e) {
    throw ParseError(std::string("optimizer state: ") + e.what(), text.size());
  }
}

}  // namespace supergseg
