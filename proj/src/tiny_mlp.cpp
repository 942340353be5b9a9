#include "supergseg/tiny_mlp.hpp"

#include <cmath>

namespace supergseg {

std::string to_string(Activation a) { return a == Activation::relu ? "relu" : "identity"; }

Activation activation_from_string(const std::string& name) {
  if (name == "relu") return Activation::relu;
  if (name == "identity") return Activation::identity;
  throw ConfigError("unknown activation '" + name + "'");
}

void MlpGradient::set_zero() {
  for (auto& w : weight) w.setZero();
  for (auto& b : bias) b.setZero();
}

std::vector<double> MlpGradient::flatten() const {
  std::vector<double> out;
  for (std::size_t l = 0; l < weight.size(); ++l) {
    out.insert(out.end(), weight[l].data(), weight[l].data() + weight[l].size());
    out.insert(out.end(), bias[l].data(), bias[l].data() + bias[l].size());
  }
  return out;
}

TinyMLP::TinyMLP(std::vector<DenseLayer> layers) : layers_(std::move(layers)) { validate(); }

void TinyMLP::validate() const {
  for (std::size_t l = 0; l < layers_.size(); ++l) {
    const auto& layer = layers_[l];
    if (layer.bias.size() != layer.weight.rows()) throw ConfigError("layer bias size does not match weight rows");
    if (l > 0 && layers_[l - 1].output_dim() != layer.input_dim()) {
      throw ConfigError("incompatible consecutive layer dimensions");
    }
  }
}

TinyMLP TinyMLP::random(const std::vector<int>& dims, std::mt19937_64& rng, double output_scale) {
  if (dims.size() < 2) throw ConfigError("an MLP needs at least input and output widths");
  std::vector<DenseLayer> layers;
  for (std::size_t l = 0; l + 1 < dims.size(); ++l) {
    const bool last = l + 2 == dims.size();
    DenseLayer layer;
    layer.weight.resize(dims[l + 1], dims[l]);
    layer.bias = VecX::Zero(dims[l + 1]);
    layer.activation = last ? Activation::identity : Activation::relu;
    std::normal_distribution<double> normal(0.0, std::sqrt(2.0 / dims[l]) * (last ? output_scale : 1.0));
    for (Eigen::Index i = 0; i < layer.weight.size(); ++i) layer.weight.data()[i] = normal(rng);
    layers.push_back(std::move(layer));
  }
  return TinyMLP(std::move(layers));
}

TinyMLP TinyMLP::zeros(const std::vector<int>& dims) {
  if (dims.size() < 2) throw ConfigError("an MLP needs at least input and output widths");
  std::vector<DenseLayer> layers;
  for (std::size_t l = 0; l + 1 < dims.size(); ++l) {
    DenseLayer layer;
    layer.weight = MatX::Zero(dims[l + 1], dims[l]);
    layer.bias = VecX::Zero(dims[l + 1]);
    layer.activation = l + 2 == dims.size() ? Activation::identity : Activation::relu;
    layers.push_back(std::move(layer));
  }
  return TinyMLP(std::move(layers));
}

int TinyMLP::input_dim() const { return layers_.empty() ? 0 : layers_.front().input_dim(); }
int TinyMLP::output_dim() const { return layers_.empty() ? 0 : layers_.back().output_dim(); }

std::vector<int> TinyMLP::dims() const {
  std::vector<int> d;
  if (layers_.empty()) return d;
  d.push_back(input_dim());
  for (const auto& layer : layers_) d.push_back(layer.output_dim());
  return d;
}

namespace {
void apply(Activation a, MatX& m) {
  if (a == Activation::relu) m = m.cwiseMax(0.0);
}
}  // namespace

MatX TinyMLP::forward(const MatX& x) const {
  if (x.cols() != input_dim()) throw ConfigError("MLP input has " + std::to_string(x.cols()) + " columns, expected " + std::to_string(input_dim()));
  MatX h = x;
  for (const auto& layer : layers_) {
    MatX z = h * layer.weight.transpose();
    z.rowwise() += layer.bias.transpose();
    apply(layer.activation, z);
    h = std::move(z);
  }
  return h;
}

MatX TinyMLP::forward(const MatX& x, Tape& tape) const {
  if (x.cols() != input_dim()) throw ConfigError("MLP input has " + std::to_string(x.cols()) + " columns, expected " + std::to_string(input_dim()));
  tape.inputs.clear();
  tape.preacts.clear();
  MatX h = x;
  for (const auto& layer : layers_) {
    tape.inputs.push_back(h);
    MatX z = h * layer.weight.transpose();
    z.rowwise() += layer.bias.transpose();
    tape.preacts.push_back(z);
    apply(layer.activation, z);
    h = std::move(z);
  }
  return h;
}

MatX TinyMLP::backward(const Tape& tape, const MatX& d_out, MlpGradient& grad) const {
  if (tape.inputs.size() != layers_.size()) throw ContractError("MLP tape does not match network depth");
  MatX d = d_out;
  for (std::size_t l = layers_.size(); l-- > 0;) {
    const auto& layer = layers_[l];
    if (layer.activation == Activation::relu) {
      d = d.cwiseProduct((tape.preacts[l].array() > 0.0).cast<double>().matrix());
    }
    grad.weight[l].noalias() += d.transpose() * tape.inputs[l];
    grad.bias[l] += d.colwise().sum().transpose();
    MatX d_in = d * layer.weight;
    d = std::move(d_in);
  }
  return d;
}

MlpGradient TinyMLP::make_gradient() const {
  MlpGradient g;
  for (const auto& layer : layers_) {
    g.weight.push_back(MatX::Zero(layer.weight.rows(), layer.weight.cols()));
    g.bias.push_back(VecX::Zero(layer.bias.size()));
  }
  return g;
}

std::size_t TinyMLP::parameter_count() const {
  std::size_t n = 0;
  for (const auto& layer : layers_) n += layer.weight.size() + layer.bias.size();
  return n;
}

std::vector<double> TinyMLP::parameters() const {
  std::vector<double> out;
  out.reserve(parameter_count());
  for (const auto& layer : layers_) {
    out.insert(out.end(), layer.weight.data(), layer.weight.data() + layer.weight.size());
    out.insert(out.end(), layer.bias.data(), layer.bias.data() + layer.bias.size());
  }
  return out;
}

void TinyMLP::set_parameters(std::span<const double> values) {
  if (values.size() != parameter_count()) throw ContractError("parameter vector size mismatch");
  std::size_t k = 0;
  for (auto& layer : layers_) {
    std::copy_n(values.begin() + k, layer.weight.size(), layer.weight.data());
    k += layer.weight.size();
    std::copy_n(values.begin() + k, layer.bias.size(), layer.bias.data());
    k += layer.bias.size();
  }
}

bool TinyMLP::operator==(const TinyMLP& other) const {
  if (layers_.size() != other.layers_.size()) return false;
  for (std::size_t l = 0; l < layers_.size(); ++l) {
    const auto& a = layers_[l];
    const auto& b = other.layers_[l];
    if (a.activation != b.activation) return false;
    if (a.weight.rows() != b.weight.rows() || a.weight.cols() != b.weight.cols() || a.bias.size() != b.bias.size()) return false;
    if (a.weight != b.weight || a.bias != b.bias) return false;
  }
  return true;
}

}  // namespace supergseg
