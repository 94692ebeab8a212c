#include <doctest.h>

#include <cmath>
#include <set>

#include "gradient_check.hpp"
#include "voxstreams/losses.hpp"
#include "voxstreams/nn.hpp"

using namespace voxstreams;

TEST_CASE("apply_input_mask: identity, full mask, exact count") {
  std::vector<double> v(1000);
  Rng rng(1);
  for (auto& x : v) x = rng.normal() + 5.0;

  const auto same = nn::apply_input_mask(v, {.mask_ratio = 0.0, .mask_value = 0.0}, 42);
  CHECK(same == v);

  const auto zeroed = nn::apply_input_mask(v, {.mask_ratio = 1.0, .mask_value = 0.0}, 42);
  for (double x : zeroed) CHECK(x == 0.0);

  const auto masked = nn::apply_input_mask(v, {.mask_ratio = 0.3, .mask_value = 0.0}, 7);
  std::size_t changed = 0;
  for (std::size_t i = 0; i < v.size(); ++i) {
    if (masked[i] != v[i]) {
      ++changed;
      CHECK(masked[i] == 0.0);
    } else {
      CHECK(masked[i] == v[i]);  // unmasked coordinates preserved exactly
    }
  }
  CHECK(changed == 300);

  CHECK(nn::apply_input_mask(v, {.mask_ratio = 0.3, .mask_value = 0.0}, 7) == masked);
  CHECK(nn::apply_input_mask(v, {.mask_ratio = 0.3, .mask_value = 0.0}, 8) != masked);
}

TEST_CASE("mlp config validation") {
  nn::MlpBackboneConfig cfg;
  cfg.input_dim = 4;
  cfg.output_dim = 3;
  CHECK_THROWS_AS(cfg.validate(), ValidationError);  // empty hidden_dims
  cfg.hidden_dims = {8};
  CHECK_NOTHROW(cfg.validate());
  cfg.dropout_rate = 1.0;
  CHECK_THROWS_AS(cfg.validate(), ValidationError);
  cfg.dropout_rate = 0.0;
  cfg.mask_ratio = 1.5;
  CHECK_THROWS_AS(cfg.validate(), ValidationError);
}

TEST_CASE("mlp_forward: zero parameters give zero output") {
  nn::MlpBackboneConfig cfg;
  cfg.input_dim = 4;
  cfg.hidden_dims = {6};
  cfg.output_dim = 3;
  nn::MlpBackbone mlp(cfg, 5);
  for (auto& p : mlp.params()) {
    if (p.name.find("gamma") == std::string::npos) {
      for (auto& v : p.value->data) v = 0.0;
    }
  }
  Rng rng(2);
  const Tensor x = Tensor::gaussian({2, 4}, rng);
  const Tensor y = mlp.forward(x);
  CHECK(y.shape == std::vector<std::int64_t>{2, 3});
  for (double v : y.data) CHECK(v == 0.0);
}

TEST_CASE("mlp_forward: identity-initialized square layers pass input through") {
  nn::MlpBackboneConfig cfg;
  cfg.input_dim = 5;
  cfg.hidden_dims = {5};
  cfg.output_dim = 5;
  cfg.layer_norm = false;
  cfg.activation = nn::Activation::Identity;
  nn::MlpBackbone mlp(cfg, 5);
  auto set_identity = [](nn::Linear& lin) {
    for (auto& v : lin.weight().data) v = 0.0;
    for (std::int64_t i = 0; i < lin.weight().shape[0]; ++i) lin.weight().at2(i, i) = 1.0;
    for (auto& v : lin.bias().data) v = 0.0;
  };
  set_identity(mlp.hidden_layer(0));
  set_identity(mlp.output_layer());
  Rng rng(3);
  const Tensor x = Tensor::gaussian({3, 5}, rng);
  CHECK(max_abs_diff(mlp.forward(x), x) == 0.0);
}

TEST_CASE("mlp_forward: random tiny net matches a hand-rolled trace") {
  nn::MlpBackboneConfig cfg;
  cfg.input_dim = 4;
  cfg.hidden_dims = {8};
  cfg.output_dim = 3;
  nn::MlpBackbone mlp(cfg, 17);
  Rng rng(4);
  const Tensor x = Tensor::gaussian({1, 4}, rng);
  const Tensor y = mlp.forward(x);

  // Hand-rolled oracle: Linear -> LayerNorm -> GELU -> Linear, recomputed
  // with explicit loops from the raw parameter tensors.
  auto params = mlp.params();
  auto find = [&](const std::string& name) -> const Tensor& {
    for (const auto& p : params) {
      if (p.name == name) return *p.value;
    }
    FAIL("missing param ", name);
    return *params[0].value;
  };
  const Tensor &W0 = find("lin0.W"), &b0 = find("lin0.b");
  const Tensor &gamma = find("ln0.gamma"), &beta = find("ln0.beta");
  const Tensor &W1 = find("out.W"), &b1 = find("out.b");

  std::vector<double> h(8, 0.0);
  for (int j = 0; j < 8; ++j) {
    double acc = b0[j];
    for (int i = 0; i < 4; ++i) acc += x[i] * W0.at2(i, j);
    h[static_cast<std::size_t>(j)] = acc;
  }
  double mean = 0.0;
  for (double v : h) mean += v / 8.0;
  double var = 0.0;
  for (double v : h) var += (v - mean) * (v - mean) / 8.0;
  for (int j = 0; j < 8; ++j) {
    const double xh = (h[static_cast<std::size_t>(j)] - mean) / std::sqrt(var + 1e-8);
    const double ln = gamma[j] * xh + beta[j];
    h[static_cast<std::size_t>(j)] = 0.5 * ln * (1.0 + std::erf(ln / std::sqrt(2.0)));
  }
  for (int j = 0; j < 3; ++j) {
    double acc = b1[j];
    for (int i = 0; i < 8; ++i) acc += h[static_cast<std::size_t>(i)] * W1.at2(i, j);
    CHECK(y[j] == doctest::Approx(acc).epsilon(1e-12));
  }
}

TEST_CASE("mlp: dimension mismatch is an error") {
  nn::MlpBackboneConfig cfg;
  cfg.input_dim = 4;
  cfg.hidden_dims = {8};
  cfg.output_dim = 3;
  nn::MlpBackbone mlp(cfg, 1);
  CHECK_THROWS_AS(mlp.forward(Tensor({1, 5})), ValidationError);
}

TEST_CASE("mlp: full-network gradient check through LayerNorm and GELU") {
  nn::MlpBackboneConfig cfg;
  cfg.input_dim = 5;
  cfg.hidden_dims = {7, 6};
  cfg.output_dim = 4;
  nn::MlpBackbone mlp(cfg, 23);
  Rng rng(6);
  const Tensor x = Tensor::gaussian({3, 5}, rng);
  const Tensor target = Tensor::gaussian({3, 4}, rng);

  auto params = mlp.params();
  for (auto& p : params) {
    for (auto& g : p.grad->data) g = 0.0;
  }
  const Tensor pred = mlp.forward(x);
  mlp.backward(losses::mse_grad(pred, target));

  // Check a few coordinates of every parameter tensor against FD on the
  // end-to-end loss.
  for (std::size_t pi = 0; pi < params.size(); ++pi) {
    Tensor& value = *params[pi].value;
    const Tensor& grad = *params[pi].grad;
    Rng pick(100 + pi);
    for (int probe = 0; probe < 3; ++probe) {
      const auto idx = static_cast<std::int64_t>(
          pick.uniform_int(static_cast<std::uint64_t>(value.numel())));
      const double keep = value[idx];
      const double step = 1e-6;
      value[idx] = keep + step;
      const double up = losses::mse(mlp.forward(x), target);
      value[idx] = keep - step;
      const double down = losses::mse(mlp.forward(x), target);
      value[idx] = keep;
      const double fd = (up - down) / (2.0 * step);
      const double denom = std::max({std::abs(fd), std::abs(grad[idx]), 1e-8});
      CHECK(std::abs(fd - grad[idx]) / denom < 1e-4);
    }
  }
}

TEST_CASE("conv2d: 1x1 kernel closed form") {
  Rng rng(7);
  nn::Conv2d conv(2, 3, 1, rng);
  for (std::int64_t c = 0; c < 2; ++c) {
    for (std::int64_t o = 0; o < 3; ++o) {
      conv.weight().at3(0, 0, c * 3 + o) = 0.0;  // overwritten below via data layout
    }
  }
  // weight shape (1,1,2,3): set W[0][0][c][o] = c + 10*o, b[o] = o
  for (std::int64_t c = 0; c < 2; ++c) {
    for (std::int64_t o = 0; o < 3; ++o) {
      conv.weight().data[static_cast<std::size_t>(c * 3 + o)] = static_cast<double>(c + 10 * o);
    }
  }
  for (std::int64_t o = 0; o < 3; ++o) conv.bias()[o] = static_cast<double>(o);
  Tensor x = Tensor::gaussian({4, 5, 2}, rng);
  const Tensor y = conv.forward(x);
  REQUIRE(y.shape == std::vector<std::int64_t>{4, 5, 3});
  for (std::int64_t yy = 0; yy < 4; ++yy) {
    for (std::int64_t xx = 0; xx < 5; ++xx) {
      for (std::int64_t o = 0; o < 3; ++o) {
        const double expected = static_cast<double>(o) + x.at3(yy, xx, 0) * (0 + 10.0 * o) +
                                x.at3(yy, xx, 1) * (1 + 10.0 * o);
        CHECK(y.at3(yy, xx, o) == doctest::Approx(expected).epsilon(1e-12));
      }
    }
  }
}

TEST_CASE("conv2d: gradient check for weights, bias, and input") {
  Rng rng(8);
  nn::Conv2d conv(2, 2, 3, rng);
  const Tensor x = Tensor::gaussian({5, 4, 2}, rng);
  const Tensor target = Tensor::gaussian({5, 4, 2}, rng);

  auto params = std::vector<nn::ParamRef>{};
  conv.collect_params("conv", params);
  for (auto& p : params) {
    for (auto& g : p.grad->data) g = 0.0;
  }
  const Tensor y = conv.forward(x);
  const Tensor grad_in = conv.backward(losses::mse_grad(y, target));

  auto loss_at = [&](const Tensor& input) { return losses::mse(conv.forward(input), target); };
  const auto rep_x = vxs_test::finite_diff_check(loss_at, x, grad_in, 1e-6, 12);
  CHECK(rep_x.max_rel_err < 1e-6);

  for (auto& p : params) {
    Tensor& value = *p.value;
    Rng pick(200);
    for (int probe = 0; probe < 4; ++probe) {
      const auto idx = static_cast<std::int64_t>(
          pick.uniform_int(static_cast<std::uint64_t>(value.numel())));
      const double keep = value[idx];
      value[idx] = keep + 1e-6;
      const double up = losses::mse(conv.forward(x), target);
      value[idx] = keep - 1e-6;
      const double down = losses::mse(conv.forward(x), target);
      value[idx] = keep;
      const double fd = (up - down) / 2e-6;
      const double an = (*p.grad)[idx];
      CHECK(std::abs(fd - an) / std::max({std::abs(fd), std::abs(an), 1e-8}) < 1e-5);
    }
  }
}

TEST_CASE("cnn decoder: shape contract and zero propagation") {
  nn::CnnDecoderConfig cfg;
  nn::CnnDecoder dec(cfg, 31);
  for (auto& p : dec.params()) {
    if (p.name.find(".b") != std::string::npos) {
      for (auto& v : p.value->data) v = 0.0;
    }
  }
  const Tensor zero({16, 16, 64});
  const Tensor out = dec.forward(zero);
  CHECK(out.shape == std::vector<std::int64_t>{64, 64, 4});
  for (double v : out.data) CHECK(v == 0.0);

  Rng rng(9);
  const Tensor any = Tensor::gaussian({16, 16, 64}, rng);
  CHECK(dec.forward(any).shape == std::vector<std::int64_t>{64, 64, 4});
  CHECK_THROWS_AS(dec.forward(Tensor({8, 8, 64})), ValidationError);
}

TEST_CASE("losses: mse closed forms and oracle") {
  const Tensor a = Tensor::from_vector({0, 0});
  const Tensor b = Tensor::from_vector({1, 1});
  CHECK(losses::mse(a, b) == doctest::Approx(1.0));
  CHECK(losses::mse(b, b) == 0.0);

  Rng rng(10);
  const Tensor p = Tensor::gaussian({6, 5}, rng);
  const Tensor t = Tensor::gaussian({6, 5}, rng);
  double acc = 0.0;
  for (std::int64_t i = 0; i < p.numel(); ++i) acc += (p[i] - t[i]) * (p[i] - t[i]);
  CHECK(losses::mse(p, t) == doctest::Approx(acc / 30.0).epsilon(1e-12));
  CHECK_THROWS_AS(losses::mse(p, Tensor({6, 4})), ValidationError);
}

TEST_CASE("losses: huber closed forms, piecewise oracle, mse agreement inside delta") {
  const Tensor zero = Tensor::from_vector({0.0});
  const Tensor two = Tensor::from_vector({2.0});
  CHECK(losses::huber(two, zero, 1.0) == doctest::Approx(1.5));
  CHECK(losses::huber(two, two, 1.0) == 0.0);
  CHECK_THROWS_AS(losses::huber(two, zero, 0.0), ValidationError);

  Rng rng(11);
  const Tensor p = Tensor::gaussian({40}, rng);
  const Tensor t = Tensor::gaussian({40}, rng);
  double acc = 0.0;
  for (std::int64_t i = 0; i < 40; ++i) {
    const double e = std::abs(p[i] - t[i]);
    acc += e <= 1.0 ? 0.5 * e * e : 1.0 * (e - 0.5);
  }
  CHECK(losses::huber(p, t, 1.0) == doctest::Approx(acc / 40.0).epsilon(1e-12));

  // inside |e| <= delta the per-element value equals 0.5 e^2 (mse/2 slope)
  Tensor small_p = p, small_t = t;
  for (std::int64_t i = 0; i < 40; ++i) small_p[i] = small_t[i] + 0.3 * std::sin(double(i));
  CHECK(losses::huber(small_p, small_t, 1.0) ==
        doctest::Approx(0.5 * losses::mse(small_p, small_t)).epsilon(1e-12));
}

TEST_CASE("losses: info_nce closed forms") {
  // B=1: softmax over a single class
  const Tensor one_p = Tensor::from_vector({1.0, 2.0}).reshaped({1, 2});
  const Tensor one_t = Tensor::from_vector({0.5, -1.0}).reshaped({1, 2});
  CHECK(losses::info_nce(one_p, one_t, 1.0) == doctest::Approx(0.0));

  // B=2 orthogonal matched pairs, tau=1: -log(e / (e + 1))
  Tensor p({2, 2}), t({2, 2});
  p.at2(0, 0) = 1.0;
  p.at2(1, 1) = 1.0;
  t.at2(0, 0) = 2.0;  // same direction as p row 0
  t.at2(1, 1) = 0.5;  // same direction as p row 1
  const double expected = std::log(1.0 + std::exp(-1.0));
  CHECK(losses::info_nce(p, t, 1.0) == doctest::Approx(expected).epsilon(1e-9));

  CHECK_THROWS_AS(losses::info_nce(p, t, 0.0), ValidationError);
  Tensor zero_row({2, 2});
  zero_row.at2(1, 0) = 1.0;  // row 0 all zero
  CHECK_THROWS_AS(losses::info_nce(zero_row, t, 1.0), ValidationError);
}

// Brute-force InfoNCE oracle: explicit cosine matrix and double-loop
// softmax cross-entropy in both directions.
static double nce_oracle(const Tensor& p, const Tensor& t, double tau) {
  const std::int64_t batch = p.shape[0], d = p.shape[1];
  std::vector<std::vector<double>> s(static_cast<std::size_t>(batch),
                                     std::vector<double>(static_cast<std::size_t>(batch)));
  for (std::int64_t i = 0; i < batch; ++i) {
    for (std::int64_t j = 0; j < batch; ++j) {
      double ab = 0, aa = 0, bb = 0;
      for (std::int64_t k = 0; k < d; ++k) {
        ab += p.at2(i, k) * t.at2(j, k);
        aa += p.at2(i, k) * p.at2(i, k);
        bb += t.at2(j, k) * t.at2(j, k);
      }
      s[static_cast<std::size_t>(i)][static_cast<std::size_t>(j)] =
          ab / (std::sqrt(aa) * std::sqrt(bb) * tau);
    }
  }
  double row_total = 0.0, col_total = 0.0;
  for (std::int64_t i = 0; i < batch; ++i) {
    double denom_row = 0.0, denom_col = 0.0;
    for (std::int64_t j = 0; j < batch; ++j) {
      denom_row += std::exp(s[static_cast<std::size_t>(i)][static_cast<std::size_t>(j)]);
      denom_col += std::exp(s[static_cast<std::size_t>(j)][static_cast<std::size_t>(i)]);
    }
    row_total += -std::log(
        std::exp(s[static_cast<std::size_t>(i)][static_cast<std::size_t>(i)]) / denom_row);
    col_total += -std::log(
        std::exp(s[static_cast<std::size_t>(i)][static_cast<std::size_t>(i)]) / denom_col);
  }
  return 0.5 * (row_total + col_total) / static_cast<double>(batch);
}

TEST_CASE("losses: info_nce matches the brute-force oracle on random batches") {
  Rng rng(12);
  for (int trial = 0; trial < 10; ++trial) {
    const Tensor p = Tensor::gaussian({8, 11}, rng);
    const Tensor t = Tensor::gaussian({8, 11}, rng);
    const double tau = 0.05 + 0.5 * rng.uniform();
    CHECK(losses::info_nce(p, t, tau) == doctest::Approx(nce_oracle(p, t, tau)).epsilon(1e-10));
  }
}

TEST_CASE("losses: info_nce invariant to positive row rescaling") {
  Rng rng(13);
  const Tensor p = Tensor::gaussian({6, 9}, rng);
  const Tensor t = Tensor::gaussian({6, 9}, rng);
  const double base = losses::info_nce(p, t, 0.1);
  Tensor scaled = p;
  for (std::int64_t i = 0; i < 6; ++i) {
    const double s = 0.05 + 4.0 * rng.uniform();
    for (std::int64_t j = 0; j < 9; ++j) scaled.at2(i, j) *= s;
  }
  CHECK(losses::info_nce(scaled, t, 0.1) == doctest::Approx(base).epsilon(1e-10));
}

TEST_CASE("losses: gradients match central finite differences") {
  Rng rng(14);

  SUBCASE("mse") {
    const Tensor p = Tensor::gaussian({5, 4}, rng);
    const Tensor t = Tensor::gaussian({5, 4}, rng);
    const auto rep = vxs_test::finite_diff_check(
        [&](const Tensor& x) { return losses::mse(x, t); }, p, losses::mse_grad(p, t));
    CHECK(rep.max_rel_err < 1e-4);
  }

  SUBCASE("huber away from the kink") {
    Tensor p = Tensor::gaussian({30}, rng);
    Tensor t = Tensor::gaussian({30}, rng);
    for (std::int64_t i = 0; i < 30; ++i) {
      // keep |e| at least 0.05 away from delta = 1
      double e = p[i] - t[i];
      if (std::abs(std::abs(e) - 1.0) < 0.05) p[i] = t[i] + (e > 0 ? 1.2 : -1.2);
    }
    const auto rep = vxs_test::finite_diff_check(
        [&](const Tensor& x) { return losses::huber(x, t, 1.0); }, p,
        losses::huber_grad(p, t, 1.0));
    CHECK(rep.max_rel_err < 1e-4);
  }

  SUBCASE("info_nce") {
    const Tensor p = Tensor::gaussian({5, 7}, rng);
    const Tensor t = Tensor::gaussian({5, 7}, rng);
    const auto result = losses::info_nce_with_grad(p, t, 0.2);
    CHECK(result.value == doctest::Approx(losses::info_nce(p, t, 0.2)));
    const auto rep = vxs_test::finite_diff_check(
        [&](const Tensor& x) { return losses::info_nce(x, t, 0.2); }, p, result.grad_pred);
    CHECK(rep.max_rel_err < 1e-4);
  }
}

TEST_CASE("adam: converges on a quadratic") {
  Tensor w = Tensor::from_vector({-4.0});
  Tensor g({1});
  nn::Adam opt({{"w", &w, &g}}, {.lr = 0.05});
  for (int step = 0; step < 500; ++step) {
    opt.zero_grad();
    g[0] = 2.0 * (w[0] - 3.0);
    opt.step();
  }
  CHECK(w[0] == doctest::Approx(3.0).epsilon(1e-3));
  CHECK(opt.step_count() == 500);
}

TEST_CASE("dropout: inverted scaling keeps expectation, eval mode is identity") {
  nn::Dropout drop(0.5);
  Rng rng(15);
  Tensor x = Tensor::full({1, 10000}, 1.0);
  const Tensor out = drop.forward(x, &rng);
  double mean = 0.0;
  for (double v : out.data) mean += v / 10000.0;
  CHECK(mean == doctest::Approx(1.0).epsilon(0.05));
  const Tensor eval_out = drop.forward(x, nullptr);
  CHECK(max_abs_diff(eval_out, x) == 0.0);
}
