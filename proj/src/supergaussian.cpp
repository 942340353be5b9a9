#include "supergseg/supergaussian.hpp"

#include "supergseg/binary_io.hpp"
#include "supergseg/scene_io.hpp"

#include <cmath>
#include <limits>
#include <map>
#include <numeric>
#include <sstream>

namespace supergseg {

using nlohmann::json;

namespace {

constexpr double kTiny = 1e-12;

std::vector<double> row_vector(const MatX& m) { return {m.data(), m.data() + m.size()}; }

struct UnionFind {
  std::vector<int> parent;
  explicit UnionFind(std::size_t n) : parent(n) { std::iota(parent.begin(), parent.end(), 0); }
  int find(int x) {
    while (parent[x] != x) {
      parent[x] = parent[parent[x]];
      x = parent[x];
    }
    return x;
  }
  void unite(int a, int b) {
    a = find(a);
    b = find(b);
    if (a == b) return;
    // smaller root wins so roots are the lowest member
    if (a < b) {
      parent[b] = a;
    } else {
      parent[a] = b;
    }
  }
};

/// Nearest `k` members of `ids` to `ids[self]` by position, excluding itself.
std::vector<int> nearest_within(const MatX& positions, const std::vector<int>& ids, int self, int k) {
  std::vector<std::pair<double, int>> d;
  d.reserve(ids.size());
  for (int j : ids) {
    if (j == self) continue;
    d.emplace_back((positions.row(j) - positions.row(self)).squaredNorm(), j);
  }
  const std::size_t take = std::min<std::size_t>(static_cast<std::size_t>(std::max(k, 0)), d.size());
  std::partial_sort(d.begin(), d.begin() + take, d.end());
  std::vector<int> out;
  for (std::size_t i = 0; i < take; ++i) out.push_back(d[i].second);
  return out;
}

double cosine(const MatX& f, int a, int b) {
  const double na = f.row(a).norm(), nb = f.row(b).norm();
  if (na < kTiny || nb < kTiny) return 0.0;
  return f.row(a).dot(f.row(b)) / (na * nb);
}

/// Unites graph edges among `ids` into `uf`.
void link_components(UnionFind& uf, const MatX& positions, const MatX& features, const std::vector<int>& ids, int k,
                     double tau) {
  for (int j : ids) {
    for (int m : nearest_within(positions, ids, j, k)) {
      if (cosine(features, j, m) > tau) uf.unite(j, m);
    }
  }
}

/// Weighted means of `attr` rows under the soft rows; orphans keep `previous`.
MatX weighted_update(const MatX& attr, const AssociationMap& assoc, const MatX& previous, std::vector<double>& weight,
                     std::vector<bool>& orphan) {
  const Eigen::Index S = previous.rows();
  MatX sum = MatX::Zero(S, attr.cols());
  weight.assign(S, 0.0);
  for (std::size_t i = 0; i < assoc.anchor_count(); ++i) {
    for (int s = 0; s < assoc.k_nn; ++s) {
      const int j = assoc.neighbor(i, s);
      const double a = assoc.soft(i, s);
      weight[j] += a;
      sum.row(j) += a * attr.row(i);
    }
  }
  orphan.assign(S, false);
  MatX out(S, attr.cols());
  for (Eigen::Index j = 0; j < S; ++j) {
    if (weight[j] > 0.0) {
      out.row(j) = sum.row(j) / weight[j];
    } else {
      out.row(j) = previous.row(j);
      orphan[j] = true;
    }
  }
  return out;
}

MatX softmax_backward(const MatX& soft, const MatX& d_soft) {
  MatX d = MatX::Zero(soft.rows(), soft.cols());
  for (Eigen::Index i = 0; i < soft.rows(); ++i) {
    const double dot = soft.row(i).dot(d_soft.row(i));
    d.row(i) = soft.row(i).cwiseProduct((d_soft.row(i).array() - dot).matrix());
  }
  return d;
}

const MatX& attribute_of(const AnchorAttributes& a, Attribute which) {
  switch (which) {
    case Attribute::position: return a.x;
    case Attribute::f_s: return a.f_s;
    default: return a.f_g;
  }
}

const MatX& attribute_of(const SuperAttributes& a, Attribute which) {
  switch (which) {
    case Attribute::position: return a.x;
    case Attribute::f_s: return a.f_s;
    default: return a.f_g;
  }
}

struct AssocForward {
  MatX d_x, d_s, d_g;
  TinyMLP::Tape phi, phi_s, psi, sg;
  MatX logits;  // n*k x 1
};

AssocForward forward_association(const AnchorAttributes& anchors, const SuperAttributes& supergs,
                                 const AssociationNets& nets, const std::vector<int>& neighbors, int k,
                                 bool coords_only) {
  const Eigen::Index n = anchors.size();
  const Eigen::Index rows = n * k;
  AssocForward f;
  f.d_x.resize(rows, 3);
  f.d_s = MatX::Zero(rows, kAnchorFeatureDim);
  f.d_g = MatX::Zero(rows, kAnchorFeatureDim);
  for (Eigen::Index i = 0; i < n; ++i) {
    for (int s = 0; s < k; ++s) {
      const Eigen::Index r = i * k + s;
      const int j = neighbors[r];
      f.d_x.row(r) = anchors.x.row(i) - supergs.x.row(j);
      if (!coords_only) {
        f.d_s.row(r) = anchors.f_s.row(i) - supergs.f_s.row(j);
        f.d_g.row(r) = anchors.f_g.row(i) - supergs.f_g.row(j);
      }
    }
  }
  MatX cat(rows, 3 * kEmbedDim);
  cat.leftCols(kEmbedDim) = nets.phi.forward(f.d_x, f.phi);
  cat.middleCols(kEmbedDim, kEmbedDim) = nets.phi_s.forward(f.d_s, f.phi_s);
  cat.rightCols(kEmbedDim) = nets.psi.forward(f.d_g, f.psi);
  f.logits = nets.sg.forward(cat, f.sg);
  return f;
}

void check_neighbors(const std::vector<int>& neighbors, Eigen::Index n, int k, Eigen::Index S) {
  if (k < 1) throw ConfigError("k_nn must be at least 1");
  if (k > S) throw ConfigError("k_nn exceeds the Super-Gaussian count");
  if (static_cast<Eigen::Index>(neighbors.size()) != n * k) throw ContractError("neighbour table has the wrong size");
  for (int j : neighbors) {
    if (j < 0 || j >= S) throw ContractError("neighbour id out of range");
  }
}

}  // namespace

void ClusterConfig::validate() const {
  if (S < 1) throw ConfigError("S must be positive");
  if (k_nn < 1 || k_nn > S) throw ConfigError("need S >= k_nn >= 1");
  if (iterations < 0) throw ConfigError("iterations must be non-negative");
  if (knn_refresh_period < 1) throw ConfigError("knn_refresh_period must be positive");
  if (!(tau_ins > 0.0 && tau_ins <= 1.0) || !(tau_hier > 0.0 && tau_hier <= 1.0)) {
    throw ConfigError("grouping thresholds must be in (0, 1]");
  }
  if (w_recon < 0.0 || w_compact < 0.0) throw ConfigError("loss weights must be non-negative");
  if (graph_k < 1) throw ConfigError("graph_k must be positive");
  if (!(lr_initial > 0.0) || !(lr_final > 0.0)) throw ConfigError("learning rates must be positive");
}

void ClusterConfig::validate(std::size_t anchor_count) const {
  validate();
  if (static_cast<std::size_t>(S) > anchor_count) {
    throw ConfigError("S (" + std::to_string(S) + ") exceeds the anchor count (" + std::to_string(anchor_count) + ")");
  }
}

AnchorAttributes AnchorAttributes::from(const std::vector<Anchor>& anchors) {
  AnchorAttributes a;
  const Eigen::Index n = static_cast<Eigen::Index>(anchors.size());
  a.x.resize(n, 3);
  a.f_s.resize(n, kAnchorFeatureDim);
  a.f_g.resize(n, kAnchorFeatureDim);
  for (Eigen::Index i = 0; i < n; ++i) {
    a.x.row(i) = anchors[i].position.transpose();
    a.f_s.row(i) = anchors[i].f_s.transpose();
    a.f_g.row(i) = anchors[i].f_g.transpose();
  }
  return a;
}

SuperAttributes SuperAttributes::from(const std::vector<SuperGaussian>& supergs) {
  SuperAttributes a;
  const Eigen::Index S = static_cast<Eigen::Index>(supergs.size());
  a.x.resize(S, 3);
  a.f_s.resize(S, kAnchorFeatureDim);
  a.f_g.resize(S, kAnchorFeatureDim);
  a.weight.assign(S, 0.0);
  a.orphan.assign(S, false);
  for (Eigen::Index j = 0; j < S; ++j) {
    a.x.row(j) = supergs[j].x_hat.transpose();
    a.f_s.row(j) = supergs[j].f_s_hat.transpose();
    a.f_g.row(j) = supergs[j].f_g_hat.transpose();
    a.orphan[j] = supergs[j].orphan;
  }
  return a;
}

AssociationNets AssociationNets::random(std::mt19937_64& rng) {
  AssociationNets n;
  n.phi = TinyMLP::random({3, 32, kEmbedDim}, rng);
  n.phi_s = TinyMLP::random({kAnchorFeatureDim, 32, kEmbedDim}, rng);
  n.psi = TinyMLP::random({kAnchorFeatureDim, 32, kEmbedDim}, rng);
  n.sg = TinyMLP::random({3 * kEmbedDim, 32, 1}, rng);
  n.sg.layers().back().weight.setZero();
  return n;
}

void AssociationNets::validate() const {
  auto check = [](const TinyMLP& m, int in, int out, const char* name) {
    if (m.input_dim() != in || m.output_dim() != out) {
      throw ConfigError(std::string("association net ") + name + " has wrong dimensions");
    }
  };
  check(phi, 3, kEmbedDim, "F_phi");
  check(phi_s, kAnchorFeatureDim, kEmbedDim, "F_phi'");
  check(psi, kAnchorFeatureDim, kEmbedDim, "F_psi");
  check(sg, 3 * kEmbedDim, 1, "F_sg");
}

std::vector<int> farthest_point_sample(const MatX& positions, int S, std::uint64_t seed) {
  if (positions.rows() == 0) return farthest_point_sample_from(positions, S, 0);
  std::mt19937_64 rng(seed);
  std::uniform_int_distribution<Eigen::Index> pick(0, positions.rows() - 1);
  return farthest_point_sample_from(positions, S, static_cast<int>(pick(rng)));
}

std::vector<int> farthest_point_sample_from(const MatX& positions, int S, int first) {
  const Eigen::Index n = positions.rows();
  if (S < 0 || S > n) throw ConfigError("cannot sample " + std::to_string(S) + " of " + std::to_string(n) + " points");
  std::vector<int> out;
  if (S == 0) return out;
  if (first < 0 || first >= n) throw ContractError("FPS start index out of range");
  out.push_back(first);
  std::vector<double> dist(n, std::numeric_limits<double>::infinity());
  while (static_cast<int>(out.size()) < S) {
    const Eigen::Index last = out.back();
    Eigen::Index best = -1;
    double best_d = -1.0;
    for (Eigen::Index i = 0; i < n; ++i) {
      dist[i] = std::min(dist[i], (positions.row(i) - positions.row(last)).squaredNorm());
      if (dist[i] > best_d) {
        best_d = dist[i];
        best = i;
      }
    }
    out.push_back(static_cast<int>(best));
  }
  return out;
}

std::vector<int> nearest_centers(const MatX& points, const MatX& centers, int k, const std::vector<bool>* skip) {
  const Eigen::Index n = points.rows(), S = centers.rows();
  std::vector<int> out(static_cast<std::size_t>(n * k));
  std::vector<std::pair<double, int>> d;
  for (Eigen::Index i = 0; i < n; ++i) {
    d.clear();
    for (Eigen::Index j = 0; j < S; ++j) {
      if (skip && (*skip)[j]) continue;
      d.emplace_back((points.row(i) - centers.row(j)).squaredNorm(), static_cast<int>(j));
    }
    if (static_cast<int>(d.size()) < k) throw ConfigError("fewer centres than k_nn");
    std::partial_sort(d.begin(), d.begin() + k, d.end());
    for (int s = 0; s < k; ++s) out[i * k + s] = d[s].second;
  }
  return out;
}

std::vector<SuperGaussian> init_supergs(const AnchorAttributes& anchors, const std::vector<int>& seeds) {
  std::vector<SuperGaussian> out(seeds.size());
  for (std::size_t j = 0; j < seeds.size(); ++j) {
    out[j].id = static_cast<int>(j);
    out[j].x_hat = anchors.x.row(seeds[j]).transpose();
    out[j].f_s_hat = anchors.f_s.row(seeds[j]).transpose();
    out[j].f_g_hat = anchors.f_g.row(seeds[j]).transpose();
  }
  return out;
}

MatX softmax_rows(const MatX& logits) {
  MatX out(logits.rows(), logits.cols());
  for (Eigen::Index i = 0; i < logits.rows(); ++i) {
    const double mx = logits.row(i).maxCoeff();
    out.row(i) = (logits.row(i).array() - mx).exp().matrix();
    out.row(i) /= out.row(i).sum();
  }
  return out;
}

AssociationMap associate(const AnchorAttributes& anchors, const SuperAttributes& supergs, const AssociationNets& nets,
                         std::vector<int> neighbors, int k_nn, bool coords_only) {
  nets.validate();
  check_neighbors(neighbors, anchors.size(), k_nn, supergs.size());
  AssocForward f = forward_association(anchors, supergs, nets, neighbors, k_nn, coords_only);
  AssociationMap m;
  m.k_nn = k_nn;
  m.neighbors = std::move(neighbors);
  m.logits = Eigen::Map<const MatX>(f.logits.data(), anchors.size(), k_nn);
  m.soft = softmax_rows(m.logits);
  return m;
}

SuperAttributes update_supergs(const AnchorAttributes& anchors, const AssociationMap& assoc,
                               const SuperAttributes& previous) {
  SuperAttributes out;
  std::vector<double> w;
  std::vector<bool> o;
  out.x = weighted_update(anchors.x, assoc, previous.x, out.weight, out.orphan);
  out.f_s = weighted_update(anchors.f_s, assoc, previous.f_s, w, o);
  out.f_g = weighted_update(anchors.f_g, assoc, previous.f_g, w, o);
  return out;
}

AssociationLoss reconstruction_loss(const AnchorAttributes& anchors, const SuperAttributes& previous,
                                    const AssociationMap& assoc, Attribute attribute) {
  const MatX& a = attribute_of(anchors, attribute);
  std::vector<double> weight;
  std::vector<bool> orphan;
  const MatX a_hat = weighted_update(a, assoc, attribute_of(previous, attribute), weight, orphan);
  const Eigen::Index n = a.rows();
  const int k = assoc.k_nn;
  AssociationLoss out;
  out.d_logits = MatX::Zero(n, k);
  if (n == 0) return out;
  MatX d_soft = MatX::Zero(n, k);
  MatX d_hat = MatX::Zero(a_hat.rows(), a_hat.cols());
  const double inv_n = 1.0 / static_cast<double>(n);
  for (Eigen::Index i = 0; i < n; ++i) {
    VecX recon = VecX::Zero(a.cols());
    for (int s = 0; s < k; ++s) recon += assoc.soft(i, s) * a_hat.row(assoc.neighbor(i, s)).transpose();
    const VecX r = a.row(i).transpose() - recon;
    const double norm = r.norm();
    out.value += inv_n * norm;
    if (norm < kTiny) continue;
    const VecX g = r * (inv_n / norm);  // dL/dr_i
    for (int s = 0; s < k; ++s) {
      const int j = assoc.neighbor(i, s);
      d_soft(i, s) -= g.dot(a_hat.row(j).transpose());
      d_hat.row(j) -= assoc.soft(i, s) * g.transpose();
    }
  }
  // a_hat_j = sum_i A_ij a_i / W_j  =>  d a_hat_j / d A_ij = (a_i - a_hat_j) / W_j
  for (Eigen::Index i = 0; i < n; ++i) {
    for (int s = 0; s < k; ++s) {
      const int j = assoc.neighbor(i, s);
      if (orphan[j]) continue;
      d_soft(i, s) += d_hat.row(j).dot(a.row(i) - a_hat.row(j)) / weight[j];
    }
  }
  out.d_logits = softmax_backward(assoc.soft, d_soft);
  return out;
}

AssociationLoss compactness_loss(const AnchorAttributes& anchors, const SuperAttributes& previous,
                                 const AssociationMap& assoc) {
  std::vector<double> weight;
  std::vector<bool> orphan;
  const MatX x_hat = weighted_update(anchors.x, assoc, previous.x, weight, orphan);
  const Eigen::Index n = anchors.size(), S = x_hat.rows();
  const int k = assoc.k_nn;
  AssociationLoss out;
  out.d_logits = MatX::Zero(n, k);
  if (S == 0 || n == 0) return out;

  std::vector<int> count(S, 0);
  for (int j : assoc.neighbors) ++count[j];
  const double inv_S = 1.0 / static_cast<double>(S);
  MatX d_hat = MatX::Zero(S, 3);
  for (Eigen::Index i = 0; i < n; ++i) {
    for (int s = 0; s < k; ++s) {
      const int j = assoc.neighbor(i, s);
      const Vec3 diff = (anchors.x.row(i) - x_hat.row(j)).transpose();
      const double dist = diff.norm();
      const double c = inv_S / count[j];
      out.value += c * dist;
      if (dist > kTiny) d_hat.row(j) -= c * diff.transpose() / dist;
    }
  }
  MatX d_soft = MatX::Zero(n, k);
  for (Eigen::Index i = 0; i < n; ++i) {
    for (int s = 0; s < k; ++s) {
      const int j = assoc.neighbor(i, s);
      if (orphan[j]) continue;
      d_soft(i, s) += d_hat.row(j).dot(anchors.x.row(i) - x_hat.row(j)) / weight[j];
    }
  }
  out.d_logits = softmax_backward(assoc.soft, d_soft);
  return out;
}

std::vector<int> harden(const AssociationMap& assoc) {
  std::vector<int> hard(assoc.anchor_count());
  for (std::size_t i = 0; i < assoc.anchor_count(); ++i) {
    int best = 0;
    for (int s = 1; s < assoc.k_nn; ++s) {
      const double a = assoc.soft(i, s), b = assoc.soft(i, best);
      if (a > b || (a == b && assoc.neighbor(i, s) < assoc.neighbor(i, best))) best = s;
    }
    hard[i] = assoc.neighbor(i, best);
  }
  return hard;
}

void apply_hard_assignment(std::vector<SuperGaussian>& supergs, const AnchorAttributes& anchors,
                           const std::vector<int>& hard) {
  if (static_cast<Eigen::Index>(hard.size()) != anchors.size()) throw ContractError("hard assignment size mismatch");
  for (auto& sg : supergs) sg.members.clear();
  for (std::size_t i = 0; i < hard.size(); ++i) {
    if (hard[i] < 0 || hard[i] >= static_cast<int>(supergs.size())) throw ContractError("hard assignment out of range");
    supergs[hard[i]].members.push_back(static_cast<int>(i));
  }
  for (auto& sg : supergs) {
    sg.orphan = sg.members.empty();
    if (sg.orphan) continue;
    Vec3 x = Vec3::Zero();
    VecX fs = VecX::Zero(kAnchorFeatureDim), fg = VecX::Zero(kAnchorFeatureDim);
    for (int i : sg.members) {
      x += anchors.x.row(i).transpose();
      fs += anchors.f_s.row(i).transpose();
      fg += anchors.f_g.row(i).transpose();
    }
    const double inv = 1.0 / static_cast<double>(sg.members.size());
    sg.x_hat = x * inv;
    sg.f_s_hat = fs * inv;
    sg.f_g_hat = fg * inv;
  }
}

Stage2Evaluation evaluate_stage2(const AnchorAttributes& anchors, const SuperAttributes& previous,
                                 const AssociationNets& nets, const std::vector<int>& neighbors,
                                 const ClusterConfig& cfg) {
  nets.validate();
  const int k = cfg.k_nn;
  check_neighbors(neighbors, anchors.size(), k, previous.size());
  Stage2Evaluation ev;
  AssocForward f = forward_association(anchors, previous, nets, neighbors, k, cfg.coords_only);
  ev.assoc.k_nn = k;
  ev.assoc.neighbors = neighbors;
  ev.assoc.logits = Eigen::Map<const MatX>(f.logits.data(), anchors.size(), k);
  ev.assoc.soft = softmax_rows(ev.assoc.logits);
  ev.updated = update_supergs(anchors, ev.assoc, previous);

  const AssociationLoss rx = reconstruction_loss(anchors, previous, ev.assoc, Attribute::position);
  const AssociationLoss rs = reconstruction_loss(anchors, previous, ev.assoc, Attribute::f_s);
  const AssociationLoss rg = reconstruction_loss(anchors, previous, ev.assoc, Attribute::f_g);
  const AssociationLoss cp = compactness_loss(anchors, previous, ev.assoc);
  ev.recon_x = rx.value;
  ev.recon_f_s = rs.value;
  ev.recon_f_g = rg.value;
  ev.compact = cp.value;
  ev.total = cfg.w_recon * (rx.value + rs.value + rg.value) + cfg.w_compact * cp.value;

  const MatX d_logits = cfg.w_recon * (rx.d_logits + rs.d_logits + rg.d_logits) + cfg.w_compact * cp.d_logits;
  ev.phi = nets.phi.make_gradient();
  ev.phi_s = nets.phi_s.make_gradient();
  ev.psi = nets.psi.make_gradient();
  ev.sg = nets.sg.make_gradient();
  const MatX d_out = Eigen::Map<const MatX>(d_logits.data(), d_logits.size(), 1);
  const MatX d_cat = nets.sg.backward(f.sg, d_out, ev.sg);
  nets.phi.backward(f.phi, d_cat.leftCols(kEmbedDim), ev.phi);
  nets.phi_s.backward(f.phi_s, d_cat.middleCols(kEmbedDim, kEmbedDim), ev.phi_s);
  nets.psi.backward(f.psi, d_cat.rightCols(kEmbedDim), ev.psi);
  return ev;
}

int ClusterModel::instance_count() const {
  int m = -1;
  for (int l : instance_labels) m = std::max(m, l);
  return m + 1;
}

std::vector<int> ClusterModel::gaussian_superg(int k_spawn) const {
  std::vector<int> out(assoc.hard.size() * static_cast<std::size_t>(k_spawn));
  for (std::size_t g = 0; g < out.size(); ++g) out[g] = assoc.hard[g / k_spawn];
  return out;
}

ClusterModel train_stage2(const Scene& scene, const ClusterConfig& cfg,
                          const std::function<void(const Stage2StepLog&)>& on_step) {
  cfg.validate(scene.anchors.size());
  const AnchorAttributes anchors = AnchorAttributes::from(scene.anchors);
  ClusterModel model;
  model.config = cfg;
  model.supergs = init_supergs(anchors, farthest_point_sample(anchors.x, cfg.S, cfg.seed));
  std::mt19937_64 rng(cfg.seed ^ 0x5eed5eed5eedULL);
  model.nets = AssociationNets::random(rng);

  SuperAttributes current = SuperAttributes::from(model.supergs);
  std::vector<int> neighbors;
  Adam opt;
  for (long step = 0; step < cfg.iterations; ++step) {
    if (step % cfg.knn_refresh_period == 0) neighbors = nearest_centers(anchors.x, current.x, cfg.k_nn);
    Stage2Evaluation ev = evaluate_stage2(anchors, current, model.nets, neighbors, cfg);
    if (!std::isfinite(ev.total) || ev.total > 1e6) {
      std::ostringstream msg;
      msg << "stage 2 diverged at step " << step << ": recon_x=" << ev.recon_x << " recon_f_s=" << ev.recon_f_s
          << " recon_f_g=" << ev.recon_f_g << " compact=" << ev.compact;
      throw NumericError(msg.str());
    }
    const double lr = lr_schedule(step, cfg.iterations, cfg.lr_initial, cfg.lr_final);
    std::vector<double> p_phi = model.nets.phi.parameters(), p_phi_s = model.nets.phi_s.parameters(),
                        p_psi = model.nets.psi.parameters(), p_sg = model.nets.sg.parameters();
    const auto g_phi = ev.phi.flatten(), g_phi_s = ev.phi_s.flatten(), g_psi = ev.psi.flatten(), g_sg = ev.sg.flatten();
    const bool applied = opt.step({{"F_phi", p_phi, g_phi}, {"F_phi_s", p_phi_s, g_phi_s}, {"F_psi", p_psi, g_psi},
                                   {"F_sg", p_sg, g_sg}},
                                  lr);
    if (applied) {
      model.nets.phi.set_parameters(p_phi);
      model.nets.phi_s.set_parameters(p_phi_s);
      model.nets.psi.set_parameters(p_psi);
      model.nets.sg.set_parameters(p_sg);
    }
    current = std::move(ev.updated);
    if (on_step) {
      on_step({step, ev.recon_x + ev.recon_f_s + ev.recon_f_g, ev.compact, ev.total, lr});
    }
  }

  neighbors = nearest_centers(anchors.x, current.x, cfg.k_nn);
  model.assoc = associate(anchors, current, model.nets, neighbors, cfg.k_nn, cfg.coords_only);
  for (std::size_t j = 0; j < model.supergs.size(); ++j) {
    model.supergs[j].x_hat = current.x.row(j).transpose();
    model.supergs[j].f_s_hat = current.f_s.row(j).transpose();
    model.supergs[j].f_g_hat = current.f_g.row(j).transpose();
  }
  model.assoc.hard = harden(model.assoc);
  apply_hard_assignment(model.supergs, anchors, model.assoc.hard);
  group_supergs(model, scene);
  return model;
}

KMeansResult kmeans_baseline(const AnchorAttributes& anchors, int S, std::uint64_t seed, int max_iterations) {
  const Eigen::Index n = anchors.size();
  if (S < 1 || S > n) throw ConfigError("kmeans: need 1 <= S <= anchor count");
  const Eigen::Index dim = 3 + 2 * kAnchorFeatureDim;
  MatX z(n, dim);
  z.leftCols(3) = anchors.x;
  z.middleCols(3, kAnchorFeatureDim) = anchors.f_s;
  z.rightCols(kAnchorFeatureDim) = anchors.f_g;
  for (Eigen::Index c = 0; c < dim; ++c) {
    const double mean = z.col(c).mean();
    const double sd = std::sqrt((z.col(c).array() - mean).square().mean());
    z.col(c) = (z.col(c).array() - mean) / (sd > kTiny ? sd : 1.0);
  }

  // k-means++ seeding
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> uni(0.0, 1.0);
  KMeansResult out;
  out.centroids.resize(S, dim);
  std::vector<double> d2(n, std::numeric_limits<double>::infinity());
  Eigen::Index first = std::min<Eigen::Index>(static_cast<Eigen::Index>(uni(rng) * n), n - 1);
  out.centroids.row(0) = z.row(first);
  for (int c = 1; c < S; ++c) {
    double total = 0.0;
    for (Eigen::Index i = 0; i < n; ++i) {
      d2[i] = std::min(d2[i], (z.row(i) - out.centroids.row(c - 1)).squaredNorm());
      total += d2[i];
    }
    Eigen::Index pick = n - 1;
    if (total > 0.0) {
      double u = uni(rng) * total;
      for (Eigen::Index i = 0; i < n; ++i) {
        u -= d2[i];
        if (u < 0.0 && d2[i] > 0.0) {
          pick = i;
          break;
        }
      }
    } else {
      pick = c % n;
    }
    out.centroids.row(c) = z.row(pick);
  }

  out.assignment.assign(n, 0);
  std::vector<double> dist(n);
  for (int it = 0; it < max_iterations; ++it) {
    double objective = 0.0;
    for (Eigen::Index i = 0; i < n; ++i) {
      int best = 0;
      double bd = std::numeric_limits<double>::infinity();
      for (int c = 0; c < S; ++c) {
        const double d = (z.row(i) - out.centroids.row(c)).squaredNorm();
        if (d < bd) {
          bd = d;
          best = c;
        }
      }
      out.assignment[i] = best;
      dist[i] = bd;
      objective += bd;
    }
    out.objective.push_back(objective);
    out.iterations = it + 1;

    MatX next = MatX::Zero(S, dim);
    std::vector<int> count(S, 0);
    for (Eigen::Index i = 0; i < n; ++i) {
      next.row(out.assignment[i]) += z.row(i);
      ++count[out.assignment[i]];
    }
    std::vector<bool> taken(n, false);
    for (int c = 0; c < S; ++c) {
      if (count[c] > 0) {
        next.row(c) /= count[c];
        continue;
      }
      // empty cluster: move it onto the point farthest from its centroid
      Eigen::Index far = 0;
      double fd = -1.0;
      for (Eigen::Index i = 0; i < n; ++i) {
        if (!taken[i] && dist[i] > fd) {
          fd = dist[i];
          far = i;
        }
      }
      taken[far] = true;
      dist[far] = 0.0;
      next.row(c) = z.row(far);
    }
    const double shift = (next - out.centroids).rowwise().norm().maxCoeff();
    out.centroids = std::move(next);
    if (shift < 1e-6) break;
  }
  // final assignment against the last centroids
  for (Eigen::Index i = 0; i < n; ++i) {
    int best = 0;
    double bd = std::numeric_limits<double>::infinity();
    for (int c = 0; c < S; ++c) {
      const double d = (z.row(i) - out.centroids.row(c)).squaredNorm();
      if (d < bd) {
        bd = d;
        best = c;
      }
    }
    out.assignment[i] = best;
  }
  return out;
}

ClusterModel cluster_from_kmeans(const Scene& scene, const ClusterConfig& cfg) {
  cfg.validate(scene.anchors.size());
  const AnchorAttributes anchors = AnchorAttributes::from(scene.anchors);
  const KMeansResult km = kmeans_baseline(anchors, cfg.S, cfg.seed);
  ClusterModel model;
  model.config = cfg;
  model.method = "kmeans";
  model.supergs.resize(cfg.S);
  for (int j = 0; j < cfg.S; ++j) model.supergs[j].id = j;
  std::mt19937_64 rng(cfg.seed ^ 0x5eed5eed5eedULL);
  model.nets = AssociationNets::random(rng);
  model.assoc.k_nn = 1;
  model.assoc.neighbors = km.assignment;
  model.assoc.logits = MatX::Zero(anchors.size(), 1);
  model.assoc.soft = MatX::Ones(anchors.size(), 1);
  model.assoc.hard = km.assignment;
  apply_hard_assignment(model.supergs, anchors, model.assoc.hard);
  group_supergs(model, scene);
  return model;
}

MatX superg_features(const MatX& gaussian_features, const std::vector<int>& gaussian_superg, std::size_t S) {
  if (static_cast<std::size_t>(gaussian_features.rows()) != gaussian_superg.size()) {
    throw ContractError("feature rows do not match the Gaussian assignment");
  }
  MatX out = MatX::Zero(static_cast<Eigen::Index>(S), gaussian_features.cols());
  for (std::size_t g = 0; g < gaussian_superg.size(); ++g) out.row(gaussian_superg[g]) += gaussian_features.row(g);
  for (Eigen::Index j = 0; j < out.rows(); ++j) {
    const double n = out.row(j).norm();
    if (n > kTiny) out.row(j) /= n;
  }
  return out;
}

std::vector<int> group_instances_graph(const MatX& positions, const MatX& features, int k, double tau,
                                       const std::vector<bool>& skip) {
  const std::size_t S = static_cast<std::size_t>(positions.rows());
  if (features.rows() != positions.rows() || skip.size() != S) throw ContractError("grouping inputs differ in size");
  std::vector<int> ids;
  for (std::size_t j = 0; j < S; ++j) {
    if (!skip[j]) ids.push_back(static_cast<int>(j));
  }
  UnionFind uf(S);
  link_components(uf, positions, features, ids, k, tau);
  std::vector<int> label(S, -1);
  std::map<int, int> root_label;
  for (int j : ids) {
    const auto [it, inserted] = root_label.try_emplace(uf.find(j), static_cast<int>(root_label.size()));
    label[j] = it->second;
  }
  return label;
}

std::vector<int> group_parts_graph(const MatX& positions, const MatX& features, const std::vector<int>& instance,
                                   int k, double tau) {
  const std::size_t S = static_cast<std::size_t>(positions.rows());
  if (features.rows() != positions.rows() || instance.size() != S) throw ContractError("grouping inputs differ in size");
  std::map<int, std::vector<int>> by_instance;
  for (std::size_t j = 0; j < S; ++j) {
    if (instance[j] >= 0) by_instance[instance[j]].push_back(static_cast<int>(j));
  }
  UnionFind uf(S);
  for (const auto& [inst, ids] : by_instance) link_components(uf, positions, features, ids, k, tau);
  std::vector<int> label(S, -1);
  std::map<int, int> root_label;
  for (std::size_t j = 0; j < S; ++j) {
    if (instance[j] < 0) continue;
    const auto [it, inserted] = root_label.try_emplace(uf.find(static_cast<int>(j)), static_cast<int>(root_label.size()));
    label[j] = it->second;
  }
  return label;
}

void group_supergs(ClusterModel& model, const Scene& scene) {
  const std::size_t S = model.supergs.size();
  const auto gaussians = spawn_all(scene);
  const auto g_sg = model.gaussian_superg(scene.config.k_spawn);
  model.instance_features = superg_features(gaussian_instance_features(gaussians), g_sg, S);
  model.hier_features = superg_features(gaussian_hier_features(gaussians), g_sg, S);
  MatX positions(S, 3);
  std::vector<bool> skip(S);
  for (std::size_t j = 0; j < S; ++j) {
    positions.row(j) = model.supergs[j].x_hat.transpose();
    skip[j] = model.supergs[j].orphan;
  }
  model.instance_labels =
      group_instances_graph(positions, model.instance_features, model.config.graph_k, model.config.tau_ins, skip);
  model.part_labels = group_parts_graph(positions, model.hier_features, model.instance_labels, model.config.graph_k,
                                        model.config.tau_hier);
}

std::string to_string(ClickMode m) { return m == ClickMode::part ? "part" : "instance"; }

ClickMode click_mode_from_string(const std::string& s) {
  if (s == "part") return ClickMode::part;
  if (s == "instance") return ClickMode::instance;
  throw ConfigError("unknown click mode '" + s + "'");
}

ClickResult click_query(std::size_t pixel, const BlendState& state, const FeatureImage& h_map,
                        const FeatureImage& g_map, const ClusterModel& model, ClickMode mode) {
  if (pixel >= state.pixel_count()) throw ContractError("click outside the image");
  if (h_map.pixel_count() != state.pixel_count() || g_map.pixel_count() != state.pixel_count()) {
    throw ContractError("feature maps do not match the blend state");
  }
  ClickResult out;
  if (state.pixel(pixel).empty()) return out;
  VecX uh = Eigen::Map<const VecX>(h_map.pixel(pixel).data(), h_map.channels);
  VecX ug = Eigen::Map<const VecX>(g_map.pixel(pixel).data(), g_map.channels);
  if (uh.norm() < kTiny || ug.norm() < kTiny) return out;
  uh.normalize();
  ug.normalize();

  const std::size_t S = model.size();
  std::vector<int> part;
  int best = -1;
  double best_cos = -std::numeric_limits<double>::infinity();
  for (std::size_t j = 0; j < S; ++j) {
    if (model.supergs[j].orphan) continue;
    const double ch = model.hier_features.row(j).dot(uh.transpose());
    const double cg = model.instance_features.row(j).dot(ug.transpose());
    if (ch > model.config.tau_hier && cg > model.config.tau_ins) part.push_back(static_cast<int>(j));
    if (ch > best_cos) {
      best_cos = ch;
      best = static_cast<int>(j);
    }
  }
  if (best < 0) return out;
  if (part.empty()) part.push_back(best);

  std::map<int, int> votes;
  for (int j : part) {
    if (model.instance_labels[j] >= 0) ++votes[model.instance_labels[j]];
  }
  int top = 0;
  for (const auto& [label, count] : votes) {
    if (count > top) {
      top = count;
      out.instance = label;
    }
  }
  out.empty = false;
  if (mode == ClickMode::part) {
    out.selected = std::move(part);
    return out;
  }
  std::set<int> labels;
  for (int j : part) labels.insert(model.instance_labels[j]);
  for (std::size_t j = 0; j < S; ++j) {
    if (model.instance_labels[j] >= 0 && labels.count(model.instance_labels[j])) out.selected.push_back(static_cast<int>(j));
  }
  return out;
}

std::vector<std::uint8_t> selection_mask(const BlendState& state, const std::vector<int>& gaussian_superg,
                                         const std::vector<int>& selected, std::size_t S) {
  if (gaussian_superg.size() != state.gaussian_count) throw ContractError("assignment does not match the blend state");
  std::vector<bool> chosen(S, false);
  for (int j : selected) chosen.at(j) = true;
  std::vector<std::uint8_t> mask(state.pixel_count(), 0);
  for (std::size_t p = 0; p < state.pixel_count(); ++p) {
    double total = 0.0, sel = 0.0;
    for (const auto& c : state.pixel(p)) {
      total += c.weight;
      if (chosen[gaussian_superg[c.gaussian]]) sel += c.weight;
    }
    mask[p] = total >= 0.5 && sel > 0.5 * total ? 1 : 0;
  }
  return mask;
}

double cluster_purity(const ClusterModel& model, const std::vector<int>& anchor_labels, double threshold) {
  int counted = 0, pure = 0;
  for (const auto& sg : model.supergs) {
    if (sg.members.empty()) continue;
    std::map<int, int> votes;
    for (int i : sg.members) ++votes[anchor_labels.at(i)];
    int top = 0;
    for (const auto& [l, c] : votes) top = std::max(top, c);
    ++counted;
    if (top >= threshold * static_cast<double>(sg.members.size())) ++pure;
  }
  return counted == 0 ? 0.0 : static_cast<double>(pure) / counted;
}

json cluster_to_json(const ClusterModel& model) {
  const std::size_t S = model.size();
  MatX x(S, 3), fs(S, kAnchorFeatureDim), fg(S, kAnchorFeatureDim), fl(S, kLatentDim);
  std::vector<int> orphan(S);
  for (std::size_t j = 0; j < S; ++j) {
    x.row(j) = model.supergs[j].x_hat.transpose();
    fs.row(j) = model.supergs[j].f_s_hat.transpose();
    fg.row(j) = model.supergs[j].f_g_hat.transpose();
    fl.row(j) = model.supergs[j].f_l.transpose();
    orphan[j] = model.supergs[j].orphan ? 1 : 0;
  }
  const ClusterConfig& c = model.config;
  json j;
  j["schema"] = "supergseg-cluster/1";
  j["method"] = model.method;
  j["config"] = {{"S", c.S},
                 {"k_nn", c.k_nn},
                 {"iterations", c.iterations},
                 {"knn_refresh_period", c.knn_refresh_period},
                 {"w_recon", c.w_recon},
                 {"w_compact", c.w_compact},
                 {"tau_ins", c.tau_ins},
                 {"tau_hier", c.tau_hier},
                 {"graph_k", c.graph_k},
                 {"lr_initial", c.lr_initial},
                 {"lr_final", c.lr_final},
                 {"coords_only", c.coords_only},
                 {"seed", c.seed}};
  j["supergaussians"] = {{"count", S},
                         {"x_hat", f32_array(row_vector(x))},
                         {"f_s_hat", f32_array(row_vector(fs))},
                         {"f_g_hat", f32_array(row_vector(fg))},
                         {"f_l", f32_array(row_vector(fl))},
                         {"orphan", orphan}};
  j["association"] = {{"k_nn", model.assoc.k_nn},
                      {"anchor_count", model.assoc.anchor_count()},
                      {"neighbors", base64_encode(pack_i32(model.assoc.neighbors))},
                      {"logits", f32_array(row_vector(model.assoc.logits))},
                      {"hard", base64_encode(pack_i32(model.assoc.hard))}};
  j["instance_labels"] = model.instance_labels;
  j["part_labels"] = model.part_labels;
  j["instance_features"] = matrix_to_json(model.instance_features);
  j["hier_features"] = matrix_to_json(model.hier_features);
  j["nets"] = {{"phi", mlp_to_json(model.nets.phi)},
               {"phi_s", mlp_to_json(model.nets.phi_s)},
               {"psi", mlp_to_json(model.nets.psi)},
               {"sg", mlp_to_json(model.nets.sg)}};
  return j;
}

ClusterModel cluster_from_json(const json& j) {
  try {
    if (j.at("schema").get<std::string>() != "supergseg-cluster/1") throw ParseError("unsupported cluster schema", 0);
    ClusterModel m;
    m.method = j.at("method").get<std::string>();
    const json& c = j.at("config");
    m.config.S = c.at("S").get<int>();
    m.config.k_nn = c.at("k_nn").get<int>();
    m.config.iterations = c.at("iterations").get<long>();
    m.config.knn_refresh_period = c.at("knn_refresh_period").get<int>();
    m.config.w_recon = c.at("w_recon").get<double>();
    m.config.w_compact = c.at("w_compact").get<double>();
    m.config.tau_ins = c.at("tau_ins").get<double>();
    m.config.tau_hier = c.at("tau_hier").get<double>();
    m.config.graph_k = c.at("graph_k").get<int>();
    m.config.lr_initial = c.at("lr_initial").get<double>();
    m.config.lr_final = c.at("lr_final").get<double>();
    m.config.coords_only = c.at("coords_only").get<bool>();
    m.config.seed = c.at("seed").get<std::uint64_t>();
    m.config.validate();

    const json& s = j.at("supergaussians");
    const std::size_t S = s.at("count").get<std::size_t>();
    const auto x = f32_array(s.at("x_hat"), 3 * S, "x_hat");
    const auto fs = f32_array(s.at("f_s_hat"), kAnchorFeatureDim * S, "f_s_hat");
    const auto fg = f32_array(s.at("f_g_hat"), kAnchorFeatureDim * S, "f_g_hat");
    const auto fl = f32_array(s.at("f_l"), kLatentDim * S, "f_l");
    const auto orphan = s.at("orphan").get<std::vector<int>>();
    if (orphan.size() != S) throw ParseError("orphan flag count mismatch", 0);
    m.supergs.resize(S);
    for (std::size_t i = 0; i < S; ++i) {
      SuperGaussian& sg = m.supergs[i];
      sg.id = static_cast<int>(i);
      sg.x_hat = Vec3(x[3 * i], x[3 * i + 1], x[3 * i + 2]);
      sg.f_s_hat = Eigen::Map<const VecX>(fs.data() + kAnchorFeatureDim * i, kAnchorFeatureDim);
      sg.f_g_hat = Eigen::Map<const VecX>(fg.data() + kAnchorFeatureDim * i, kAnchorFeatureDim);
      sg.f_l = Eigen::Map<const VecX>(fl.data() + kLatentDim * i, kLatentDim);
      sg.orphan = orphan[i] != 0;
    }

    const json& a = j.at("association");
    m.assoc.k_nn = a.at("k_nn").get<int>();
    const std::size_t n = a.at("anchor_count").get<std::size_t>();
    m.assoc.neighbors = unpack_i32(base64_decode(a.at("neighbors").get<std::string>()));
    m.assoc.hard = unpack_i32(base64_decode(a.at("hard").get<std::string>()));
    if (m.assoc.k_nn < 1 || m.assoc.neighbors.size() != n * m.assoc.k_nn || m.assoc.hard.size() != n) {
      throw ParseError("association arrays have inconsistent sizes", 0);
    }
    const auto logits = f32_array(a.at("logits"), n * m.assoc.k_nn, "logits");
    m.assoc.logits = Eigen::Map<const MatX>(logits.data(), n, m.assoc.k_nn);
    m.assoc.soft = softmax_rows(m.assoc.logits);
    for (std::size_t i = 0; i < n; ++i) {
      if (m.assoc.hard[i] < 0 || m.assoc.hard[i] >= static_cast<int>(S)) throw ParseError("hard assignment out of range", 0);
      m.supergs[m.assoc.hard[i]].members.push_back(static_cast<int>(i));
    }
    for (int nb : m.assoc.neighbors) {
      if (nb < 0 || nb >= static_cast<int>(S)) throw ParseError("neighbour id out of range", 0);
    }

    m.instance_labels = j.at("instance_labels").get<std::vector<int>>();
    m.part_labels = j.at("part_labels").get<std::vector<int>>();
    if (m.instance_labels.size() != S || m.part_labels.size() != S) throw ParseError("label arrays have wrong size", 0);
    m.instance_features = matrix_from_json(j.at("instance_features"), "instance_features");
    m.hier_features = matrix_from_json(j.at("hier_features"), "hier_features");
    if (static_cast<std::size_t>(m.instance_features.rows()) != S || static_cast<std::size_t>(m.hier_features.rows()) != S) {
      throw ParseError("feature tables have wrong size", 0);
    }
    const json& nets = j.at("nets");
    m.nets.phi = mlp_from_json(nets.at("phi"));
    m.nets.phi_s = mlp_from_json(nets.at("phi_s"));
    m.nets.psi = mlp_from_json(nets.at("psi"));
    m.nets.sg = mlp_from_json(nets.at("sg"));
    m.nets.validate();
    return m;
  } catch (const json::exception& e) {
    throw ParseError(std::string("cluster file: ") + e.what(), 0);
  } catch (const ConfigError& e) {
    throw ParseError(std::string("cluster file: ") + e.what(), 0);
  }
}

void save_cluster(const ClusterModel& model, const std::filesystem::path& path) {
  write_file(path, cluster_to_json(model).dump());
}

ClusterModel load_cluster(const std::filesystem::path& path) {
  const std::string text = read_file(path);
  return cluster_from_json(parse_json(text, "cluster file"));
}

}  // namespace supergseg
