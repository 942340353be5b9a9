#pragma once

#include "supergseg/common.hpp"

#include <filesystem>
#include <optional>
#include <random>
#include <string>
#include <vector>

namespace supergseg {

/// Label -> unit embedding. Labels are kept sorted; a label's class index is
/// its position in that order.
class EmbeddingVocabulary {
 public:
  EmbeddingVocabulary() = default;
  EmbeddingVocabulary(int dim, std::vector<std::string> labels, MatX vectors);

  /// Random unit vectors with pairwise cosine 0 (Gram-Schmidt); needs labels <= dim.
  static EmbeddingVocabulary orthogonal(int dim, std::vector<std::string> labels, std::mt19937_64& rng);

  int dim() const { return dim_; }
  std::size_t size() const { return labels_.size(); }
  bool empty() const { return labels_.empty(); }
  const std::vector<std::string>& labels() const { return labels_; }
  const MatX& vectors() const { return vectors_; }  // size() x dim
  std::optional<int> index_of(const std::string& label) const;
  VecX vector(int index) const { return vectors_.row(index).transpose(); }

  void validate() const;

 private:
  int dim_ = 0;
  std::vector<std::string> labels_;
  MatX vectors_;
};

// {"dim": D, "entries": {label: [floats]}}
void save_vocabulary(const EmbeddingVocabulary& vocab, const std::filesystem::path& path);
EmbeddingVocabulary load_vocabulary(const std::filesystem::path& path);

}  // namespace supergseg
