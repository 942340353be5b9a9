#include "supergseg/language.hpp"

#include "supergseg/binary_io.hpp"
#include "supergseg/scene_io.hpp"

#include <cmath>
#include <limits>

namespace supergseg {

namespace {

constexpr double kTiny = 1e-12;

MatX language_inputs(const LanguageField& field, const std::vector<SuperGaussian>& supergs) {
  if (field.size() != supergs.size()) throw ConfigError("language field size does not match the Super-Gaussians");
  MatX in(field.size(), kLatentDim + 3);
  in.leftCols(kLatentDim) = field.latents;
  for (std::size_t j = 0; j < supergs.size(); ++j) in.row(j).tail(3) = supergs[j].x_hat.transpose();
  return in;
}

MatX normalize_rows(const MatX& y) {
  MatX out = y;
  for (Eigen::Index j = 0; j < y.rows(); ++j) {
    const double n = y.row(j).norm();
    if (n > kTiny) out.row(j) /= n;
  }
  return out;
}

}  // namespace

LanguageField LanguageField::random(std::size_t S, int dim, std::mt19937_64& rng) {
  if (dim < 1) throw ConfigError("language dimension must be positive");
  LanguageField f;
  f.latents.resize(static_cast<Eigen::Index>(S), kLatentDim);
  std::normal_distribution<double> normal(0.0, 0.1);
  for (Eigen::Index i = 0; i < f.latents.size(); ++i) f.latents.data()[i] = normal(rng);
  f.decoder = TinyMLP::random({kLatentDim + 3, 32, dim}, rng);
  return f;
}

void LanguageField::validate() const {
  if (decoder.input_dim() != kLatentDim + 3) throw ConfigError("language decoder must take 35 inputs");
  if (latents.cols() != kLatentDim) throw ConfigError("language latents must be 32-d");
  if (!latents.allFinite()) throw ConfigError("language latents must be finite");
}

MatX decode_language(const LanguageField& field, const std::vector<SuperGaussian>& supergs) {
  field.validate();
  return normalize_rows(field.decoder.forward(language_inputs(field, supergs)));
}

FeatureImage render_language_map(const BlendState& state, const std::vector<int>& gaussian_superg,
                                 const MatX& decoded) {
  if (gaussian_superg.size() != state.gaussian_count) {
    throw StageOrderError("language rendering needs a hard assignment for every anchor");
  }
  MatX per_gaussian(static_cast<Eigen::Index>(gaussian_superg.size()), decoded.cols());
  for (std::size_t g = 0; g < gaussian_superg.size(); ++g) {
    const int j = gaussian_superg[g];
    if (j < 0 || j >= decoded.rows()) throw StageOrderError("anchor without a Super-Gaussian assignment");
    per_gaussian.row(static_cast<Eigen::Index>(g)) = decoded.row(j);
  }
  return blend(state, per_gaussian);
}

CosineLossResult cosine_loss(const FeatureImage& rendered, const FeatureImage& target,
                             const std::vector<std::uint8_t>& valid) {
  if (rendered.width != target.width || rendered.height != target.height || rendered.channels != target.channels ||
      valid.size() != rendered.pixel_count()) {
    throw ContractError("cosine_loss: image dimensions differ");
  }
  CosineLossResult out;
  out.grad = FeatureImage(rendered.width, rendered.height, rendered.channels);
  const int c = rendered.channels;
  std::vector<std::size_t> used;
  for (std::size_t p = 0; p < valid.size(); ++p) {
    if (!valid[p]) continue;
    const Eigen::Map<const VecX> l(rendered.pixel(p).data(), c);
    const Eigen::Map<const VecX> t(target.pixel(p).data(), c);
    if (l.norm() < kTiny || t.norm() < kTiny) {
      ++out.skipped;
      continue;
    }
    used.push_back(p);
  }
  if (used.empty()) return out;
  const double inv = 1.0 / static_cast<double>(used.size());
  for (std::size_t p : used) {
    const Eigen::Map<const VecX> l(rendered.pixel(p).data(), c);
    const Eigen::Map<const VecX> t(target.pixel(p).data(), c);
    const double ln = l.norm();
    const VecX u = l / ln;
    const VecX tu = t / t.norm();
    const double cos = u.dot(tu);
    out.value += inv * (1.0 - cos);
    const VecX d = -inv * (tu - cos * u) / ln;
    for (int k = 0; k < c; ++k) out.grad.at(p, k) = d[k];
  }
  return out;
}

LanguageView prepare_language_view(const BlendState& state, int camera_index, const MaskSet& masks,
                                   const std::vector<std::optional<VecX>>& embeddings, int dim) {
  if (embeddings.size() != masks.masks.size()) throw IngestionError("one embedding slot per mask is required");
  const PatchDecomposition d = build_decomposition(masks);
  LanguageView v;
  v.camera_index = camera_index;
  v.state = state;
  v.target = FeatureImage(masks.width, masks.height, dim);
  v.valid.assign(static_cast<std::size_t>(masks.width) * masks.height, 0);
  std::vector<bool> has(d.instance_count(), false);
  for (int i = 0; i < d.instance_count(); ++i) {
    const auto& e = embeddings[d.instance_masks[i]];
    has[i] = e.has_value();
    if (!has[i]) {
      ++v.excluded_masks;
    } else if (e->size() != dim) {
      throw IngestionError("mask embedding dimension does not match the vocabulary");
    }
  }
  if (v.excluded_masks > 0) {
    log_info("view " + std::to_string(masks.view_id) + ": " + std::to_string(v.excluded_masks) +
             " instance mask(s) without an embedding excluded");
  }
  for (std::size_t p = 0; p < v.valid.size(); ++p) {
    const int inst = d.instance_map.ids[p];
    if (inst < 0 || !has[inst]) continue;
    const VecX& e = *embeddings[d.instance_masks[inst]];
    for (int k = 0; k < dim; ++k) v.target.at(p, k) = e[k];
    v.valid[p] = 1;
  }
  return v;
}

std::vector<LanguageView> prepare_language_views(const Dataset& dataset) {
  std::vector<LanguageView> out;
  const auto gaussians = spawn_all(dataset.scene);
  for (int i : dataset.train_view_indices()) {
    const ViewData& v = dataset.views[i];
    out.push_back(prepare_language_view(build_blend_state(gaussians, dataset.scene.cameras[v.camera_index]),
                                        v.camera_index, v.masks, v.mask_embeddings, dataset.vocab.dim()));
  }
  return out;
}

void Stage3Config::validate() const {
  if (iterations < 0) throw ConfigError("iterations must be non-negative");
  if (!(lr_initial > 0.0) || !(lr_final > 0.0)) throw ConfigError("learning rates must be positive");
}

Stage3Evaluation evaluate_stage3(const LanguageField& field, const ClusterModel& model, const LanguageView& view,
                                 int k_spawn) {
  field.validate();
  if (model.assoc.hard.empty()) throw StageOrderError("stage 3 needs the stage-2 hard assignment");
  const MatX in = language_inputs(field, model.supergs);
  TinyMLP::Tape tape;
  const MatX y = field.decoder.forward(in, tape);
  const MatX decoded = normalize_rows(y);
  const auto g_sg = model.gaussian_superg(k_spawn);
  const FeatureImage rendered = render_language_map(view.state, g_sg, decoded);
  const CosineLossResult loss = cosine_loss(rendered, view.target, view.valid);

  Stage3Evaluation ev;
  ev.loss = loss.value;
  const MatX d_gauss = blend_gradient(view.state, loss.grad);
  MatX d_decoded = MatX::Zero(decoded.rows(), decoded.cols());
  for (std::size_t g = 0; g < g_sg.size(); ++g) d_decoded.row(g_sg[g]) += d_gauss.row(static_cast<Eigen::Index>(g));
  MatX d_y = MatX::Zero(y.rows(), y.cols());
  for (Eigen::Index j = 0; j < y.rows(); ++j) {
    const double n = y.row(j).norm();
    if (n <= kTiny) continue;
    const double proj = decoded.row(j).dot(d_decoded.row(j));
    d_y.row(j) = (d_decoded.row(j) - proj * decoded.row(j)) / n;
  }
  ev.d_decoder = field.decoder.make_gradient();
  const MatX d_in = field.decoder.backward(tape, d_y, ev.d_decoder);
  ev.d_latents = d_in.leftCols(kLatentDim);
  return ev;
}

void train_stage3(LanguageField& field, const ClusterModel& model, const std::vector<LanguageView>& views,
                  int k_spawn, const Stage3Config& cfg, const std::function<void(const Stage3StepLog&)>& on_step) {
  cfg.validate();
  if (cfg.iterations == 0) return;
  if (views.empty()) throw ContractError("stage 3 needs at least one training view");
  Adam opt;
  for (long step = 0; step < cfg.iterations; ++step) {
    const LanguageView& view = views[static_cast<std::size_t>(step) % views.size()];
    const Stage3Evaluation ev = evaluate_stage3(field, model, view, k_spawn);
    const double lr = lr_schedule(step, cfg.iterations, cfg.lr_initial, cfg.lr_final);
    std::vector<double> dec = field.decoder.parameters();
    const std::vector<double> g_dec = ev.d_decoder.flatten();
    std::vector<double> lat(field.latents.data(), field.latents.data() + field.latents.size());
    const bool applied = opt.step({{"F_L", dec, g_dec},
                                   {"latents", lat, std::span<const double>(ev.d_latents.data(), ev.d_latents.size())}},
                                  lr);
    if (applied) {
      field.decoder.set_parameters(dec);
      std::copy(lat.begin(), lat.end(), field.latents.data());
    }
    if (on_step) on_step({step, ev.loss, lr});
  }
}

int default_top_m(std::size_t S) { return std::max(1, static_cast<int>(S / 20)); }

TextQueryResult text_query_3d(const VecX& query, const MatX& decoded, const std::vector<int>& instance_labels,
                              int top_m) {
  if (decoded.rows() == 0) throw ContractError("text query on an empty language field");
  if (query.size() != decoded.cols()) throw ConfigError("query dimension does not match the language field");
  if (static_cast<Eigen::Index>(instance_labels.size()) != decoded.rows()) {
    throw ContractError("instance labels do not match the language field");
  }
  if (top_m < 1) throw ConfigError("top_m must be positive");
  if (std::abs(query.norm() - 1.0) > 1e-6) throw ConfigError("query vector must be unit-norm");
  std::vector<std::pair<double, int>> scored;
  int labels = 0;
  for (Eigen::Index j = 0; j < decoded.rows(); ++j) {
    if (instance_labels[j] < 0) continue;
    labels = std::max(labels, instance_labels[j] + 1);
    scored.emplace_back(-decoded.row(j).dot(query.transpose()), static_cast<int>(j));
  }
  TextQueryResult out;
  out.relevancy.assign(labels, 0.0);
  if (scored.empty()) return out;
  const std::size_t m = std::min<std::size_t>(static_cast<std::size_t>(top_m), scored.size());
  std::partial_sort(scored.begin(), scored.begin() + m, scored.end());
  std::vector<int> total(labels, 0), votes(labels, 0);
  for (int l : instance_labels) {
    if (l >= 0) ++total[l];
  }
  for (std::size_t i = 0; i < m; ++i) {
    out.selected.push_back(scored[i].second);
    ++votes[instance_labels[scored[i].second]];
  }
  for (int l = 0; l < labels; ++l) {
    out.relevancy[l] = total[l] > 0 ? static_cast<double>(votes[l]) / total[l] : 0.0;
    if (out.winner < 0 || out.relevancy[l] > out.relevancy[out.winner]) out.winner = l;
  }
  return out;
}

LabelMap semantic_map(const EmbeddingVocabulary& vocab, const FeatureImage& language_map) {
  if (vocab.empty()) throw ConfigError("semantic map needs a non-empty vocabulary");
  if (language_map.channels != vocab.dim()) throw ConfigError("language map dimension does not match the vocabulary");
  LabelMap out(language_map.width, language_map.height, -1);
  const MatX& v = vocab.vectors();
  for (std::size_t p = 0; p < language_map.pixel_count(); ++p) {
    const Eigen::Map<const VecX> l(language_map.pixel(p).data(), language_map.channels);
    if (l.norm() < kTiny) continue;
    const VecX scores = v * l;
    int best = 0;
    for (Eigen::Index c = 1; c < scores.size(); ++c) {
      if (scores[c] > scores[best]) best = static_cast<int>(c);
    }
    out.ids[p] = best;
  }
  return out;
}

void save_language_field(const LanguageField& field, const std::filesystem::path& path) {
  nlohmann::json j = {{"schema", "supergseg-language/1"},
                      {"dim", field.dim()},
                      {"latents", matrix_to_json(field.latents)},
                      {"decoder", mlp_to_json(field.decoder)}};
  write_file(path, j.dump());
}

LanguageField load_language_field(const std::filesystem::path& path) {
  const std::string text = read_file(path);
  const auto j = parse_json(text, "language file");
  try {
    if (j.at("schema").get<std::string>() != "supergseg-language/1") throw ParseError("unsupported language schema", 0);
    LanguageField f;
    f.latents = matrix_from_json(j.at("latents"), "latents");
    f.decoder = mlp_from_json(j.at("decoder"));
    if (f.dim() != j.at("dim").get<int>()) throw ParseError("language decoder width does not match 'dim'", 0);
    f.validate();
    return f;
  } catch (const nlohmann::json::exception& e) {
    throw ParseError(std::string("language file: ") + e.what(), text.size());
  } catch (const ConfigError& e) {
    throw ParseError(std::string("language file: ") + e.what(), text.size());
  }
}

}  // namespace supergseg
