#pragma once

#include "supergseg/common.hpp"

#include <random>
#include <span>
#include <string>
#include <vector>

namespace supergseg {

enum class Activation { identity, relu };

std::string to_string(Activation a);
Activation activation_from_string(const std::string& name);

struct DenseLayer {
  MatX weight;  // out x in
  VecX bias;    // out
  Activation activation = Activation::identity;

  int input_dim() const { return static_cast<int>(weight.cols()); }
  int output_dim() const { return static_cast<int>(weight.rows()); }
};

/// Gradient buffers shaped like the layers of a TinyMLP.
struct MlpGradient {
  std::vector<MatX> weight;
  std::vector<VecX> bias;

  void set_zero();
  /// Flattened view in the same order as TinyMLP::parameters().
  std::vector<double> flatten() const;
};

/// Small fully connected network evaluated on row batches (one sample per row).
/// Hidden layers use ReLU and the output layer is linear unless configured
/// otherwise.
class TinyMLP {
 public:
  /// Activations recorded during forward(); backward() consumes them.
  struct Tape {
    std::vector<MatX> inputs;   // input to each layer
    std::vector<MatX> preacts;  // pre-activation output of each layer
  };

  TinyMLP() = default;
  explicit TinyMLP(std::vector<DenseLayer> layers);

  /// He-initialised network with the given layer widths, e.g. {32, 32, 15}.
  static TinyMLP random(const std::vector<int>& dims, std::mt19937_64& rng, double output_scale = 1.0);
  static TinyMLP zeros(const std::vector<int>& dims);

  int input_dim() const;
  int output_dim() const;
  std::vector<int> dims() const;
  bool empty() const { return layers_.empty(); }

  MatX forward(const MatX& x) const;
  MatX forward(const MatX& x, Tape& tape) const;

  /// Accumulates parameter gradients into `grad` and returns dL/dx.
  MatX backward(const Tape& tape, const MatX& d_out, MlpGradient& grad) const;

  MlpGradient make_gradient() const;

  std::vector<DenseLayer>& layers() { return layers_; }
  const std::vector<DenseLayer>& layers() const { return layers_; }

  std::size_t parameter_count() const;
  /// Copies all weights and biases, layer by layer (weight row-major, then bias).
  std::vector<double> parameters() const;
  void set_parameters(std::span<const double> values);

  bool operator==(const TinyMLP& other) const;

 private:
  void validate() const;

  std::vector<DenseLayer> layers_;
};

}  // namespace supergseg
