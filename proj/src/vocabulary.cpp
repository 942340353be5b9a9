#include "supergseg/vocabulary.hpp"

#include "supergseg/binary_io.hpp"
#include "supergseg/scene_io.hpp"

#include <cmath>
#include <numeric>

namespace supergseg {

EmbeddingVocabulary::EmbeddingVocabulary(int dim, std::vector<std::string> labels, MatX vectors)
    : dim_(dim), labels_(std::move(labels)), vectors_(std::move(vectors)) {
  if (static_cast<std::size_t>(vectors_.rows()) != labels_.size() || (vectors_.rows() > 0 && vectors_.cols() != dim_)) {
    throw ConfigError("vocabulary vectors do not match labels/dimension");
  }
  // keep labels sorted
  std::vector<std::size_t> order(labels_.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return labels_[a] < labels_[b]; });
  std::vector<std::string> sorted;
  MatX v(labels_.size(), dim_);
  for (std::size_t i = 0; i < order.size(); ++i) {
    sorted.push_back(labels_[order[i]]);
    v.row(i) = vectors_.row(order[i]);
  }
  for (std::size_t i = 1; i < sorted.size(); ++i) {
    if (sorted[i] == sorted[i - 1]) throw ConfigError("duplicate vocabulary label '" + sorted[i] + "'");
  }
  labels_ = std::move(sorted);
  vectors_ = std::move(v);
  validate();
}

EmbeddingVocabulary EmbeddingVocabulary::orthogonal(int dim, std::vector<std::string> labels, std::mt19937_64& rng) {
  if (labels.size() > static_cast<std::size_t>(dim)) throw GenerationError("more vocabulary labels than embedding dimensions");
  std::normal_distribution<double> normal(0.0, 1.0);
  MatX v(labels.size(), dim);
  for (std::size_t i = 0; i < labels.size(); ++i) {
    for (int attempt = 0;; ++attempt) {
      VecX x(dim);
      for (int d = 0; d < dim; ++d) x[d] = normal(rng);
      for (std::size_t j = 0; j < i; ++j) x -= v.row(j).transpose() * v.row(j).dot(x.transpose());
      if (x.norm() > 1e-6 || attempt > 100) {
        v.row(i) = (x / x.norm()).transpose();
        break;
      }
    }
  }
  return EmbeddingVocabulary(dim, std::move(labels), std::move(v));
}

std::optional<int> EmbeddingVocabulary::index_of(const std::string& label) const {
  auto it = std::lower_bound(labels_.begin(), labels_.end(), label);
  if (it == labels_.end() || *it != label) return std::nullopt;
  return static_cast<int>(it - labels_.begin());
}

void EmbeddingVocabulary::validate() const {
  for (Eigen::Index i = 0; i < vectors_.rows(); ++i) {
    if (std::abs(vectors_.row(i).norm() - 1.0) > 1e-6) {
      throw ConfigError("vocabulary vector for '" + labels_[i] + "' is not unit norm");
    }
  }
}

void save_vocabulary(const EmbeddingVocabulary& vocab, const std::filesystem::path& path) {
  nlohmann::json j;
  j["dim"] = vocab.dim();
  j["entries"] = nlohmann::json::object();
  for (std::size_t i = 0; i < vocab.size(); ++i) {
    std::vector<double> v(vocab.vectors().row(i).data(), vocab.vectors().row(i).data() + vocab.dim());
    j["entries"][vocab.labels()[i]] = v;
  }
  write_file(path, j.dump(2));
}

EmbeddingVocabulary load_vocabulary(const std::filesystem::path& path) {
  const std::string text = read_file(path);
  const auto j = parse_json(text, "vocabulary");
  try {
    const int dim = j.at("dim").get<int>();
    std::vector<std::string> labels;
    std::vector<std::vector<double>> rows;
    for (const auto& [label, values] : j.at("entries").items()) {
      auto v = values.get<std::vector<double>>();
      if (static_cast<int>(v.size()) != dim) throw ParseError("vocabulary entry '" + label + "' has wrong dimension", 0);
      labels.push_back(label);
      rows.push_back(std::move(v));
    }
    MatX m(labels.size(), dim);
    for (std::size_t i = 0; i < rows.size(); ++i) {
      VecX v = Eigen::Map<const VecX>(rows[i].data(), dim);
      // JSON decimal round trip can leave ~1e-16 error; renormalise
      m.row(i) = (v / v.norm()).transpose();
    }
    return EmbeddingVocabulary(dim, std::move(labels), std::move(m));
  } catch (const nlohmann::json::exception& e) {
    throw ParseError(std::string("vocabulary: ") + e.what(), text.size());
  }
}

}  // namespace supergseg
