#include "test_support.hpp"

#include "supergseg/binary_io.hpp"
#include "supergseg/optim.hpp"
#include "supergseg/scene_io.hpp"
#include "supergseg/tiny_mlp.hpp"

#include <Eigen/Eigenvalues>
#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <limits>

using namespace supergseg;
using namespace supergseg::testing;

namespace {

std::filesystem::path temp_dir(const std::string& name) {
  auto dir = std::filesystem::temp_directory_path() / ("supergseg_" + name);
  std::filesystem::remove_all(dir);
  std::filesystem::create_directories(dir);
  return dir;
}

}  // namespace

TEST(TinyMlp, ForwardMatchesManualLayers) {
  Rng rng(3);
  const TinyMLP mlp = TinyMLP::random({4, 6, 3}, rng);
  MatX x = MatX::Random(5, 4);
  const auto& l0 = mlp.layers()[0];
  const auto& l1 = mlp.layers()[1];
  MatX h = ((x * l0.weight.transpose()).rowwise() + l0.bias.transpose()).cwiseMax(0.0);
  MatX y = (h * l1.weight.transpose()).rowwise() + l1.bias.transpose();
  EXPECT_LT((mlp.forward(x) - y).cwiseAbs().maxCoeff(), 1e-12);
}

TEST(TinyMlp, BackwardMatchesFiniteDifferences) {
  Rng rng(5);
  for (int trial = 0; trial < 20; ++trial) {
    TinyMLP mlp = TinyMLP::random({3, 8, 8, 2}, rng);
    for (auto& l : mlp.layers()) l.bias = VecX::Random(l.output_dim()) * 0.3;
    const MatX x = MatX::Random(4, 3);
    const MatX w = MatX::Random(4, 2);
    TinyMLP::Tape tape;
    mlp.forward(x, tape);
    MlpGradient grad = mlp.make_gradient();
    const MatX dx = mlp.backward(tape, w, grad);

    const auto loss_params = [&](const std::vector<double>& p) {
      TinyMLP m = mlp;
      m.set_parameters(p);
      return m.forward(x).cwiseProduct(w).sum();
    };
    const auto numeric = central_difference(loss_params, mlp.parameters(), {});
    EXPECT_LT(relative_error(grad.flatten(), numeric), 1e-6);

    const auto loss_x = [&](const std::vector<double>& v) {
      return mlp.forward(Eigen::Map<const MatX>(v.data(), 4, 3)).cwiseProduct(w).sum();
    };
    const std::vector<double> x0(x.data(), x.data() + x.size());
    const std::vector<double> dxv(dx.data(), dx.data() + dx.size());
    EXPECT_LT(relative_error(dxv, central_difference(loss_x, x0, {})), 1e-6);
  }
}

TEST(TinyMlp, ParameterRoundTripAndSizeCheck) {
  Rng rng(1);
  const TinyMLP a = TinyMLP::random({5, 4, 2}, rng);
  TinyMLP b = TinyMLP::zeros({5, 4, 2});
  b.set_parameters(a.parameters());
  EXPECT_TRUE(a == b);
  EXPECT_EQ(a.parameter_count(), 5u * 4 + 4 + 4 * 2 + 2);
  std::vector<double> short_params(3, 0.0);
  EXPECT_THROW(b.set_parameters(short_params), Error);
}

TEST(Optim, LrScheduleEndpointsAndMonotone) {
  EXPECT_DOUBLE_EQ(lr_schedule(0, 2000, 0.01, 0.001), 0.01);
  EXPECT_NEAR(lr_schedule(2000, 2000, 0.01, 0.001), 0.001, 1e-15);
  EXPECT_NEAR(lr_schedule(1000, 2000, 0.01, 0.001), std::sqrt(0.01 * 0.001), 1e-15);
  double prev = 1.0;
  for (long s = 0; s <= 100; ++s) {
    const double lr = lr_schedule(s, 100, 0.01, 0.001);
    EXPECT_LT(lr, prev);
    prev = lr;
  }
  EXPECT_THROW(lr_schedule(101, 100, 0.01, 0.001), ContractError);
}

TEST(Optim, AdamFirstStepIsSignedLearningRate) {
  std::vector<double> p = {1.0, -2.0, 0.5};
  const std::vector<double> g = {0.3, -4.0, 1e-3};
  OptimizerState st;
  ASSERT_TRUE(adam_update(p, g, st, 0.1));
  // Bias-corrected moments equal g and g^2 after one step.
  EXPECT_NEAR(p[0], 1.0 - 0.1 * 0.3 / (0.3 + 1e-8), 1e-12);
  EXPECT_NEAR(p[1], -2.0 + 0.1 * 4.0 / (4.0 + 1e-8), 1e-12);
  EXPECT_NEAR(p[2], 0.5 - 0.1 * 1e-3 / (1e-3 + 1e-8), 1e-12);
  EXPECT_EQ(st.step, 1);
}

TEST(Optim, AdamSecondStepMatchesReference) {
  std::vector<double> p = {0.0};
  OptimizerState st;
  adam_update(p, std::vector<double>{1.0}, st, 0.01);
  adam_update(p, std::vector<double>{-2.0}, st, 0.01);
  const double m = 0.9 * (0.1 * 1.0) + 0.1 * -2.0;
  const double v = 0.999 * (0.001 * 1.0) + 0.001 * 4.0;
  const double mh = m / (1 - 0.81), vh = v / (1 - 0.999 * 0.999);
  EXPECT_NEAR(p[0], -0.01 / (1.0 + 1e-8) - 0.01 * mh / (std::sqrt(vh) + 1e-8), 1e-12);
}

TEST(Optim, NonFiniteGradientLeavesEverythingUntouched) {
  std::vector<double> p = {1.0, 2.0};
  OptimizerState st;
  adam_update(p, std::vector<double>{0.1, 0.1}, st, 0.01);
  const auto before = p;
  const auto state_before = st;
  EXPECT_FALSE(adam_update(p, std::vector<double>{0.1, std::numeric_limits<double>::quiet_NaN()}, st, 0.01));
  EXPECT_EQ(p, before);
  EXPECT_TRUE(st == state_before);
}

TEST(Optim, StateFileRoundTripIsExact) {
  std::vector<double> p = {0.3, -0.7, 1.1};
  OptimizerState st;
  for (int i = 0; i < 3; ++i) adam_update(p, std::vector<double>{0.1 * i + 1e-9, -1.0 / 3.0, 2.0}, st, 0.01);
  const auto path = temp_dir("opt") / "opt.json";
  save_optimizer_state(st, path);
  EXPECT_TRUE(load_optimizer_state(path) == st);
}

TEST(BinaryIo, Base64RoundTripAndBadInput) {
  Rng rng(9);
  for (int n = 0; n < 40; ++n) {
    std::string bytes(n, '\0');
    for (char& c : bytes) c = static_cast<char>(rng() & 0xff);
    EXPECT_EQ(base64_decode(base64_encode(bytes)), bytes);
  }
  EXPECT_EQ(base64_encode("foobar"), "Zm9vYmFy");
  try {
    base64_decode("Zm9v*mFy");
    FAIL() << "expected ParseError";
  } catch (const ParseError& e) {
    EXPECT_EQ(e.byte_offset(), 4u);
  }
}

TEST(BinaryIo, PackedArraysRoundTrip) {
  const std::vector<double> f = {0.5, -1.25, 3.0};
  EXPECT_EQ(unpack_f32(pack_f32(f)), f);
  const std::vector<double> d = {1.0 / 3.0, -1e-300};
  EXPECT_EQ(unpack_f64(pack_f64(d)), d);
  const std::vector<int> i = {-1, 0, 7, 1 << 30};
  EXPECT_EQ(unpack_i32(pack_i32(i)), i);
}

TEST(SceneIo, RoundTripIsStableAfterFloatRounding) {
  const Dataset ds = tiny_dataset(11);
  const std::string once = encode_scene(ds.scene);
  const Scene back = decode_scene(once);
  EXPECT_EQ(encode_scene(back), once);
  ASSERT_EQ(back.anchors.size(), ds.scene.anchors.size());
  for (std::size_t a = 0; a < back.anchors.size(); ++a) {
    EXPECT_LT((back.anchors[a].position - ds.scene.anchors[a].position).norm(), 1e-6);
  }
  EXPECT_EQ(back.cameras.size(), ds.scene.cameras.size());
}

TEST(SceneIo, MalformedInputRaisesParseError) {
  const std::string good = encode_scene(tiny_dataset(2).scene);
  EXPECT_THROW(decode_scene(good.substr(0, good.size() / 2)), ParseError);
  EXPECT_THROW(decode_scene("{\"schema\": \"other/1\"}"), ParseError);
  EXPECT_THROW(decode_scene(""), ParseError);
}

TEST(Scene, CovarianceIsSymmetricPositiveDefinite) {
  Rng rng(4);
  for (const auto& g : random_gaussians(30, rng)) {
    const Mat3 c = build_covariance(g.scale, g.rotation);
    EXPECT_LT((c - c.transpose()).norm(), 1e-12);
    Eigen::SelfAdjointEigenSolver<Mat3> es(c);
    EXPECT_GT(es.eigenvalues().minCoeff(), 0.0);
    // Eigenvalues are the squared scales in some order.
    std::vector<double> ev(es.eigenvalues().data(), es.eigenvalues().data() + 3);
    std::vector<double> sq = {g.scale.x() * g.scale.x(), g.scale.y() * g.scale.y(), g.scale.z() * g.scale.z()};
    std::sort(ev.begin(), ev.end());
    std::sort(sq.begin(), sq.end());
    for (int i = 0; i < 3; ++i) EXPECT_NEAR(ev[i], sq[i], 1e-10);
  }
}

TEST(Scene, SpawnAllMatchesPerAnchorSpawn) {
  const Dataset ds = tiny_dataset(6);
  const auto all = spawn_all(ds.scene);
  ASSERT_EQ(all.size(), ds.scene.gaussian_count());
  const int k = ds.scene.config.k_spawn;
  for (std::size_t a = 0; a < ds.scene.anchors.size(); ++a) {
    const auto one = spawn_neural_gaussians(ds.scene.anchors[a], ds.scene.decoders, k);
    for (int i = 0; i < k; ++i) {
      const auto& g = all[a * k + i];
      EXPECT_LT((g.mean - one[i].mean).norm(), 1e-12);
      EXPECT_LT((g.instance - one[i].instance).norm(), 1e-12);
      EXPECT_NEAR(g.opacity, one[i].opacity, 1e-12);
      EXPECT_GT(g.opacity, 0.0);
      EXPECT_LT(g.opacity, 1.0);
      EXPECT_NEAR(g.rotation.norm(), 1.0, 1e-12);
    }
  }
}
