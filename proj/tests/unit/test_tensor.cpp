#include <cmath>
#include <vector>

#include "doctest.h"
#include "glyphdiff/gradcheck.hpp"
#include "glyphdiff/nn.hpp"
#include "glyphdiff/rng.hpp"
#include "glyphdiff/tensor.hpp"

using namespace glyphdiff;

namespace {

using T64 = Tensor<double>;

T64 random_tensor(Shape shape, Rng& rng, double lo = -1.0, double hi = 1.0) {
  std::vector<double> v(static_cast<std::size_t>(numel(shape)));
  for (auto& x : v) x = rng.uniform(lo, hi);
  return T64::from_data(std::move(shape), std::move(v));
}

// scalar loss that is sensitive to every output element
T64 probe_loss(const T64& out, Rng& rng) {
  std::vector<double> w(static_cast<std::size_t>(out.size()));
  for (auto& x : w) x = rng.uniform(0.25, 1.75);
  return sum_all(mul(out, T64::from_data(out.shape(), std::move(w))));
}

// run gradcheck for a graph builder over several seeds
void check_grads(const std::function<void(ParamStore<double>&, Rng&)>& setup,
                 const std::function<T64(ParamStore<double>&, Rng&)>& build, int seeds = 3,
                 double tol = 1e-5) {
  for (int s = 0; s < seeds; ++s) {
    Rng rng(1000 + static_cast<std::uint64_t>(s));
    ParamStore<double> params;
    setup(params, rng);
    Rng probe_rng(77 + static_cast<std::uint64_t>(s));
    auto fn = [&]() {
      Rng r2(probe_rng);  // a copy so every evaluation sees the same weights
      return build(params, r2);
    };
    auto res = gradcheck(params, fn, {tol, 60, static_cast<std::uint64_t>(s)});
    CAPTURE(res.worst_param);
    CAPTURE(res.max_rel_error);
    CHECK(res.passed);
  }
}

}  // namespace

TEST_CASE("matmul identity and hand arithmetic") {
  auto eye = T64::from_data({3, 3}, {1, 0, 0, 0, 1, 0, 0, 0, 1});
  Rng rng(7);
  auto b = random_tensor({3, 4}, rng);
  auto out = matmul(eye, b);
  for (std::size_t i = 0; i < b.data().size(); ++i) CHECK(out.data()[i] == doctest::Approx(b.data()[i]));

  auto a = T64::from_data({1, 2}, {1, 2});
  auto c = T64::from_data({2, 1}, {3, 4});
  CHECK(matmul(a, c).item() == doctest::Approx(11.0));

  CHECK_THROWS_AS(matmul(T64::zeros({2, 3}), T64::zeros({2, 3})), std::invalid_argument);
}

TEST_CASE("matmul gradcheck 5x7 * 7x3") {
  check_grads(
      [](ParamStore<double>& p, Rng& rng) {
        p.add("a", random_tensor({5, 7}, rng));
        p.add("b", random_tensor({7, 3}, rng));
      },
      [](ParamStore<double>& p, Rng& rng) { return probe_loss(matmul(p.at("a"), p.at("b")), rng); });
}

TEST_CASE("conv2d forward examples") {
  auto x = T64::filled({1, 3, 3}, 1.0);
  auto w = T64::filled({1, 1, 2, 2}, 1.0);
  auto out = conv2d(x, w, 1, 0);
  CHECK(out.shape() == Shape{1, 2, 2});
  for (double v : out.data()) CHECK(v == doctest::Approx(4.0));

  Rng rng(3);
  auto y = random_tensor({2, 4, 5}, rng);
  auto ident = T64::from_data({2, 2, 1, 1}, {1, 0, 0, 1});
  auto out2 = conv2d(y, ident, 1, 0);
  for (std::size_t i = 0; i < y.data().size(); ++i) CHECK(out2.data()[i] == doctest::Approx(y.data()[i]));

  // kernel larger than padded input is rejected
  CHECK_THROWS_AS(conv2d(T64::zeros({1, 2, 2}), T64::zeros({1, 1, 3, 3}), 1, 0),
                  std::invalid_argument);
}

TEST_CASE("conv2d output extents follow the floor rule") {
  Rng rng(5);
  auto x = random_tensor({1, 7, 9}, rng);
  auto w = random_tensor({2, 1, 3, 3}, rng);
  auto out = conv2d(x, w, 2, 1);
  CHECK(out.shape() == Shape{2, (7 + 2 - 3) / 2 + 1, (9 + 2 - 3) / 2 + 1});
}

TEST_CASE("conv2d gradcheck x, w, bias") {
  check_grads(
      [](ParamStore<double>& p, Rng& rng) {
        p.add("x", random_tensor({2, 8, 8}, rng));
        p.add("w", random_tensor({3, 2, 3, 3}, rng));
        p.add("b", random_tensor({3}, rng));
      },
      [](ParamStore<double>& p, Rng& rng) {
        return probe_loss(conv2d(p.at("x"), p.at("w"), p.at("b"), 2, 1), rng);
      });
}

TEST_CASE("upsample_bilinear identity and constants") {
  Rng rng(11);
  auto x = random_tensor({2, 3, 5}, rng);
  auto same = upsample_bilinear(x, 3, 5);
  for (std::size_t i = 0; i < x.data().size(); ++i) CHECK(same.data()[i] == doctest::Approx(x.data()[i]));

  auto c = T64::filled({1, 2, 2}, 0.7);
  auto up = upsample_bilinear(c, 5, 7);
  for (double v : up.data()) CHECK(v == doctest::Approx(0.7));
}

TEST_CASE("upsample_bilinear matches scalar reference") {
  // independent per-pixel interpolator (align-corners-false)
  auto ref = [](const std::vector<double>& src, int h, int w, int y2, int x2, int oy, int ox) {
    double sy = (oy + 0.5) * (static_cast<double>(h) / y2) - 0.5;
    double sx = (ox + 0.5) * (static_cast<double>(w) / x2) - 0.5;
    sy = std::min(std::max(sy, 0.0), static_cast<double>(h - 1));
    sx = std::min(std::max(sx, 0.0), static_cast<double>(w - 1));
    int y0 = static_cast<int>(std::floor(sy)), x0 = static_cast<int>(std::floor(sx));
    int y1 = std::min(y0 + 1, h - 1), x1 = std::min(x0 + 1, w - 1);
    double fy = sy - y0, fx = sx - x0;
    return src[y0 * w + x0] * (1 - fy) * (1 - fx) + src[y0 * w + x1] * (1 - fy) * fx +
           src[y1 * w + x0] * fy * (1 - fx) + src[y1 * w + x1] * fy * fx;
  };
  std::vector<double> src{1, 2, 3, 5};
  auto x = T64::from_data({1, 2, 2}, src);
  auto out = upsample_bilinear(x, 4, 4);
  for (int oy = 0; oy < 4; ++oy)
    for (int ox = 0; ox < 4; ++ox)
      CHECK(out.data()[oy * 4 + ox] == doctest::Approx(ref(src, 2, 2, 4, 4, oy, ox)).epsilon(1e-6));
}

TEST_CASE("upsample_bilinear gradcheck") {
  check_grads(
      [](ParamStore<double>& p, Rng& rng) { p.add("x", random_tensor({2, 3, 4}, rng)); },
      [](ParamStore<double>& p, Rng& rng) {
        return probe_loss(upsample_bilinear(p.at("x"), 5, 9), rng);
      });
}

TEST_CASE("layer_norm trivial rows") {
  auto gain = T64::filled({4}, 1.0);
  auto bias = T64::zeros({4});
  auto x = T64::filled({2, 4}, 3.25);
  auto out = layer_norm(x, gain, bias, 1e-5);
  for (double v : out.data()) CHECK(std::abs(v) < 1e-6);

  auto g2 = T64::filled({2}, 1.0);
  auto b2 = T64::zeros({2});
  auto x2 = T64::from_data({1, 2}, {1, 3});
  auto out2 = layer_norm(x2, g2, b2, 1e-12);
  CHECK(out2.data()[0] == doctest::Approx(-1.0).epsilon(1e-5));
  CHECK(out2.data()[1] == doctest::Approx(1.0).epsilon(1e-5));
}

TEST_CASE("layer_norm pre-affine statistics") {
  Rng rng(23);
  auto x = random_tensor({6, 16}, rng);
  auto out = layer_norm(x, T64::filled({16}, 1.0), T64::zeros({16}), 1e-9);
  for (int r = 0; r < 6; ++r) {
    double m = 0, var = 0;
    for (int i = 0; i < 16; ++i) m += out.data()[r * 16 + i];
    m /= 16;
    for (int i = 0; i < 16; ++i) {
      double d = out.data()[r * 16 + i] - m;
      var += d * d;
    }
    var /= 16;
    CHECK(std::abs(m) < 1e-6);
    CHECK(std::abs(var - 1.0) < 1e-4);
  }
}

TEST_CASE("layer_norm gradcheck") {
  check_grads(
      [](ParamStore<double>& p, Rng& rng) {
        p.add("x", random_tensor({4, 16}, rng));
        p.add("gain", random_tensor({16}, rng, 0.5, 1.5));
        p.add("bias", random_tensor({16}, rng));
      },
      [](ParamStore<double>& p, Rng& rng) {
        return probe_loss(layer_norm(p.at("x"), p.at("gain"), p.at("bias"), 1e-5), rng);
      });
}

TEST_CASE("softmax examples") {
  auto u = T64::filled({1, 5}, 0.3);
  auto out = softmax(u);
  for (double v : out.data()) CHECK(v == doctest::Approx(0.2));

  auto big = T64::from_data({1, 2}, {1000.0, 0.0});
  auto sb = softmax(big);
  CHECK(sb.data()[0] == doctest::Approx(1.0).epsilon(1e-12));
  CHECK(sb.data()[1] == doctest::Approx(0.0).epsilon(1e-12));
  CHECK(std::isfinite(sb.data()[0]));

  Rng rng(31);
  auto x = random_tensor({3, 7}, rng, -4.0, 4.0);
  auto s = softmax(x);
  // naive high-precision oracle
  for (int r = 0; r < 3; ++r) {
    double mx = -1e300;
    for (int i = 0; i < 7; ++i) mx = std::max(mx, x.data()[r * 7 + i]);
    double z = 0;
    for (int i = 0; i < 7; ++i) z += std::exp(x.data()[r * 7 + i] - mx);
    double total = 0;
    for (int i = 0; i < 7; ++i) {
      double expect = std::exp(x.data()[r * 7 + i] - mx) / z;
      CHECK(std::abs(s.data()[r * 7 + i] - expect) < 1e-7);
      total += s.data()[r * 7 + i];
    }
    CHECK(std::abs(total - 1.0) < 1e-6);
  }
}

TEST_CASE("softmax gradcheck") {
  check_grads(
      [](ParamStore<double>& p, Rng& rng) { p.add("x", random_tensor({3, 6}, rng, -2, 2)); },
      [](ParamStore<double>& p, Rng& rng) { return probe_loss(softmax(p.at("x")), rng); });
}

TEST_CASE("elementwise trivial values") {
  auto r = relu(T64::from_data({3}, {-1, 0, 2}));
  CHECK(r.data() == std::vector<double>{0, 0, 2});

  auto c = T64::filled({4, 3}, 2.5);
  auto m = mean_pool(c, 0);
  CHECK(m.shape() == Shape{3});
  for (double v : m.data()) CHECK(v == doctest::Approx(2.5));

  CHECK_THROWS_AS(add(T64::zeros({2, 3}), T64::zeros({3, 2})), std::invalid_argument);
}

TEST_CASE("elementwise suite gradcheck") {
  check_grads(
      [](ParamStore<double>& p, Rng& rng) {
        p.add("a", random_tensor({3, 4}, rng));
        p.add("b", random_tensor({3, 4}, rng));
        p.add("bias", random_tensor({4}, rng));
        p.add("table", random_tensor({5, 4}, rng));
      },
      [](ParamStore<double>& p, Rng& rng) {
        auto a = p.at("a");
        auto b = p.at("b");
        auto x = add(mul(a, b), p.at("bias"));  // broadcast add
        x = gelu(x);
        x = add(x, relu(sub(a, b)));
        auto looked = embedding_lookup(p.at("table"), {1, 4, 0});
        auto cat = concat<double>({x, looked}, 0);
        auto cut = narrow(cat, 0, 1, 4);
        auto t = transpose(cut);
        auto pooled = mean_pool(t, 1);
        auto rot = rotate_pairs(reshape(cat, {6, 4}));
        return add(probe_loss(pooled, rng), probe_loss(rot, rng));
      });
}

TEST_CASE("adaptive_avg_pool2d and permute gradcheck") {
  check_grads(
      [](ParamStore<double>& p, Rng& rng) { p.add("x", random_tensor({2, 4, 6}, rng)); },
      [](ParamStore<double>& p, Rng& rng) {
        auto pooled = adaptive_avg_pool2d(p.at("x"), 2, 3);
        auto perm = permute(p.at("x"), {2, 0, 1});
        return add(probe_loss(pooled, rng), probe_loss(perm, rng));
      });
}

TEST_CASE("backward on quadratic and constant") {
  auto theta = T64::parameter({4}, {0.5, -1.0, 2.0, 0.25});
  auto loss = sum_all(mul(theta, theta));
  backward(loss);
  for (int i = 0; i < 4; ++i) CHECK(theta.grad()[i] == doctest::Approx(2.0 * theta.data()[i]));

  // accumulation: second backward doubles
  backward(loss);
  for (int i = 0; i < 4; ++i) CHECK(theta.grad()[i] == doctest::Approx(4.0 * theta.data()[i]));

  // loss independent of theta leaves gradient zero
  auto theta2 = T64::parameter({3}, {1, 2, 3});
  auto unrelated = T64::parameter({2}, {5, 6});
  auto loss2 = sum_all(mul(unrelated, unrelated));
  theta2.zero_grad();
  backward(loss2);
  for (double g : theta2.grad()) CHECK(g == 0.0);

  CHECK_THROWS_AS(backward(theta), std::invalid_argument);
}

TEST_CASE("composed graph gradcheck: matmul -> layer_norm -> softmax -> cross-entropy") {
  check_grads(
      [](ParamStore<double>& p, Rng& rng) {
        p.add("x", random_tensor({4, 6}, rng));
        p.add("w", random_tensor({6, 5}, rng));
        p.add("gain", random_tensor({5}, rng, 0.5, 1.5));
        p.add("bias", random_tensor({5}, rng));
      },
      [](ParamStore<double>& p, Rng&) {
        auto h = matmul(p.at("x"), p.at("w"));
        h = layer_norm(h, p.at("gain"), p.at("bias"), 1e-5);
        auto probs = softmax(h);
        return cross_entropy(probs, {1, 3, 0, 2});
      });
}

TEST_CASE("forward determinism is bitwise in single-threaded mode") {
  set_num_threads(1);
  Rng rng1(99), rng2(99);
  auto a1 = random_tensor({8, 8}, rng1);
  auto a2 = random_tensor({8, 8}, rng2);
  auto w1 = random_tensor({8, 8}, rng1);
  auto w2 = random_tensor({8, 8}, rng2);
  auto o1 = softmax(matmul(gelu(a1), w1));
  auto o2 = softmax(matmul(gelu(a2), w2));
  CHECK(o1.data() == o2.data());
}

TEST_CASE("rotate_pairs is a quarter turn") {
  auto x = T64::from_data({1, 4}, {1, 2, 3, 4});
  auto r = rotate_pairs(x);
  CHECK(r.data() == std::vector<double>{-2, 1, -4, 3});
  CHECK_THROWS_AS(rotate_pairs(T64::zeros({1, 3})), std::invalid_argument);
}

TEST_CASE("adam minimizes a quadratic") {
  ParamStore<double> params;
  params.add("theta", T64::from_data({3}, {2.0, -3.0, 1.5}));
  Adam<double> opt(0.05);
  for (int i = 0; i < 400; ++i) {
    params.zero_grad();
    auto theta = params.at("theta");
    auto loss = sum_all(mul(theta, theta));
    backward(loss);
    opt.step(params);
  }
  for (double v : params.at("theta").data()) CHECK(std::abs(v) < 1e-2);
}

TEST_CASE("xavier init variance near 2/(fan_in+fan_out)") {
  Rng rng(123);
  const int fan_in = 48, fan_out = 16;
  auto v = xavier_uniform<double>(4000, fan_in, fan_out, rng);
  double mean = 0;
  for (double x : v) mean += x;
  mean /= static_cast<double>(v.size());
  double var = 0;
  for (double x : v) var += (x - mean) * (x - mean);
  var /= static_cast<double>(v.size());
  const double expect = 2.0 / (fan_in + fan_out);
  CHECK(std::abs(var - expect) / expect < 0.2);
}
