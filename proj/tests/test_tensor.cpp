#include <doctest.h>

#include <cmath>
#include <vector>

#include "acvae/rng.hpp"
#include "acvae/tensor.hpp"
#include "gradcheck.hpp"

using namespace acvae;
using namespace acvae::ad;
using gradcheck::rel_err;

namespace {

Param<double> random_param(const char* name, std::vector<int64_t> shape, SplitMix64& rng,
                           double lo = -1.0, double hi = 1.0) {
  Param<double> p(name, std::move(shape));
  for (auto& v : p.value) v = rng.uniform(lo, hi);
  return p;
}

}  // namespace

TEST_CASE("matmul forward: identity and 1x2 * 2x1") {
  Tape<double> tp;
  std::vector<double> I2{1, 0, 0, 1}, A{1, 2, 3, 4};
  auto r = tp.matmul(tp.constant(I2, 2, 2), tp.constant(A, 2, 2));
  CHECK(r.values()[0] == 1);
  CHECK(r.values()[1] == 2);
  CHECK(r.values()[2] == 3);
  CHECK(r.values()[3] == 4);

  std::vector<double> a{1, 2}, b{3, 4};
  auto s = tp.matmul(tp.constant(a, 1, 2), tp.constant(b, 2, 1));
  CHECK(s.values()[0] == doctest::Approx(11.0));
}

TEST_CASE("matmul rejects mismatched inner dimensions") {
  Tape<double> tp;
  std::vector<double> a(6, 1.0), b(6, 1.0);
  auto ta = tp.constant(a, 2, 3);
  auto tb = tp.constant(b, 2, 3);
  CHECK_THROWS_AS(tp.matmul(ta, tb), ShapeError);
  CHECK_THROWS_WITH_AS(tp.matmul(ta, tb), doctest::Contains("[2x3]"), ShapeError);
}

TEST_CASE("matmul gradient of sum(A*B) matches finite differences on random 3x3") {
  auto rng = make_stream(99, RngStream::init);
  auto A = random_param("A", {3, 3}, rng);
  auto B = random_param("B", {3, 3}, rng);
  auto loss = [&](bool with_grad) {
    Tape<double> tp;
    auto a = tp.leaf(A.value.data(), 3, 3, A.grad.data());
    auto b = tp.leaf(B.value.data(), 3, 3, B.grad.data());
    auto l = tp.sum(tp.matmul(a, b));
    if (with_grad) tp.backward(l);
    return l.scalar();
  };
  gradcheck::check_against_tape({&A, &B}, loss, 1e-5, 1e-6);
}

TEST_CASE("softplus values and derivative") {
  Tape<double> tp;
  std::vector<double> x{0.0, 100.0, -40.0};
  auto y = tp.softplus(tp.constant(x, 1, 3));
  CHECK(y.values()[0] == doctest::Approx(std::log(2.0)).epsilon(1e-12));
  CHECK(y.values()[1] == doctest::Approx(100.0).epsilon(1e-12));
  CHECK(std::isfinite(y.values()[2]));

  // derivative at 1.3 equals sigmoid(1.3)
  Param<double> p("p", {1, 1});
  p.value[0] = 1.3;
  auto loss = [&](bool with_grad) {
    Tape<double> t2;
    auto l = t2.sum(t2.softplus(t2.leaf(p.value.data(), 1, 1, p.grad.data())));
    if (with_grad) t2.backward(l);
    return l.scalar();
  };
  loss(true);
  CHECK(rel_err(p.grad[0], 1.0 / (1.0 + std::exp(-1.3))) < 1e-12);
  gradcheck::check_against_tape({&p}, loss, 1e-5, 1e-6);
}

TEST_CASE("sigmoid values and backward vs finite differences") {
  Tape<double> tp;
  std::vector<double> x{0.0, 1.0};
  auto y = tp.sigmoid(tp.constant(x, 1, 2));
  CHECK(y.values()[0] == doctest::Approx(0.5).epsilon(1e-12));
  CHECK(y.values()[1] == doctest::Approx(0.731059).epsilon(1e-5));

  auto rng = make_stream(7, RngStream::init);
  auto p = random_param("v", {1, 4}, rng, -2, 2);
  auto loss = [&](bool with_grad) {
    Tape<double> t2;
    // weight the outputs so each coordinate's gradient is distinct
    std::vector<double> w{0.3, -1.2, 2.0, 0.7};
    auto l = t2.sum(t2.mul(t2.sigmoid(t2.leaf(p.value.data(), 1, 4, p.grad.data())),
                           t2.constant(w, 1, 4)));
    if (with_grad) t2.backward(l);
    return l.scalar();
  };
  gradcheck::check_against_tape({&p}, loss, 1e-5, 1e-6);
}

// independent scalar reference for one GRU step
static std::vector<double> gru_reference(const std::vector<double>& x, const std::vector<double>& h,
                                         const Param<double>& Wz, const Param<double>& Uz,
                                         const Param<double>& bz, const Param<double>& Wr,
                                         const Param<double>& Ur, const Param<double>& br,
                                         const Param<double>& Wh, const Param<double>& Uh,
                                         const Param<double>& bh, int b, int e, int d) {
  auto mm = [](const std::vector<double>& a, const std::vector<double>& w, int n, int k, int m) {
    std::vector<double> out(size_t(n) * m, 0.0);
    for (int i = 0; i < n; ++i)
      for (int kk = 0; kk < k; ++kk)
        for (int j = 0; j < m; ++j) out[i * m + j] += a[i * k + kk] * w[kk * m + j];
    return out;
  };
  auto xz = mm(x, Wz.value, b, e, d), hz = mm(h, Uz.value, b, d, d);
  auto xr = mm(x, Wr.value, b, e, d), hr = mm(h, Ur.value, b, d, d);
  std::vector<double> z(size_t(b) * d), r(size_t(b) * d), out(size_t(b) * d);
  for (int i = 0; i < b * d; ++i) {
    z[i] = 1.0 / (1.0 + std::exp(-(xz[i] + hz[i] + bz.value[i % d])));
    r[i] = 1.0 / (1.0 + std::exp(-(xr[i] + hr[i] + br.value[i % d])));
  }
  std::vector<double> rh(size_t(b) * d);
  for (int i = 0; i < b * d; ++i) rh[i] = r[i] * h[i];
  auto xh = mm(x, Wh.value, b, e, d), hh = mm(rh, Uh.value, b, d, d);
  for (int i = 0; i < b * d; ++i) {
    double hc = std::tanh(xh[i] + hh[i] + bh.value[i % d]);
    out[i] = (1.0 - z[i]) * h[i] + z[i] * hc;
  }
  return out;
}

TEST_CASE("gru_cell: zero parameters and zero state stay at the fixed point") {
  const int b = 2, e = 3, d = 4;
  Param<double> Wz("Wz", {e, d}), Uz("Uz", {d, d}), bz("bz", {1, d});
  Param<double> Wr("Wr", {e, d}), Ur("Ur", {d, d}), br("br", {1, d});
  Param<double> Wh("Wh", {e, d}), Uh("Uh", {d, d}), bh("bh", {1, d});
  Tape<double> tp;
  std::vector<double> x(size_t(b) * e, 0.7), h0(size_t(b) * d, 0.0);
  GruGates<double> g{tp.leaf(Wz.value.data(), e, d), tp.leaf(Uz.value.data(), d, d),
                     tp.leaf(bz.value.data(), 1, d), tp.leaf(Wr.value.data(), e, d),
                     tp.leaf(Ur.value.data(), d, d), tp.leaf(br.value.data(), 1, d),
                     tp.leaf(Wh.value.data(), e, d), tp.leaf(Uh.value.data(), d, d),
                     tp.leaf(bh.value.data(), 1, d)};
  auto h1 = gru_cell(tp, tp.constant(x, b, e), tp.constant(h0, b, d), g);
  for (double v : h1.values()) CHECK(v == 0.0);
}

TEST_CASE("gru_cell forward matches scalar reference and composes over two steps") {
  const int b = 2, e = 3, d = 4;
  auto rng = make_stream(21, RngStream::init);
  auto Wz = random_param("Wz", {e, d}, rng), Uz = random_param("Uz", {d, d}, rng),
       bz = random_param("bz", {1, d}, rng);
  auto Wr = random_param("Wr", {e, d}, rng), Ur = random_param("Ur", {d, d}, rng),
       br = random_param("br", {1, d}, rng);
  auto Wh = random_param("Wh", {e, d}, rng), Uh = random_param("Uh", {d, d}, rng),
       bh = random_param("bh", {1, d}, rng);
  std::vector<double> x1(size_t(b) * e), x2(size_t(b) * e), h0(size_t(b) * d, 0.0);
  for (auto& v : x1) v = rng.uniform(-1, 1);
  for (auto& v : x2) v = rng.uniform(-1, 1);

  Tape<double> tp;
  GruGates<double> g{tp.leaf(Wz.value.data(), e, d), tp.leaf(Uz.value.data(), d, d),
                     tp.leaf(bz.value.data(), 1, d), tp.leaf(Wr.value.data(), e, d),
                     tp.leaf(Ur.value.data(), d, d), tp.leaf(br.value.data(), 1, d),
                     tp.leaf(Wh.value.data(), e, d), tp.leaf(Uh.value.data(), d, d),
                     tp.leaf(bh.value.data(), 1, d)};
  auto h1 = gru_cell(tp, tp.constant(x1, b, e), tp.constant(h0, b, d), g);
  auto h2 = gru_cell(tp, tp.constant(x2, b, e), h1, g);

  auto ref1 = gru_reference(x1, h0, Wz, Uz, bz, Wr, Ur, br, Wh, Uh, bh, b, e, d);
  auto ref2 = gru_reference(x2, ref1, Wz, Uz, bz, Wr, Ur, br, Wh, Uh, bh, b, e, d);
  for (int i = 0; i < b * d; ++i) {
    CHECK(rel_err(h1.values()[i], ref1[i]) < 1e-12);
    CHECK(rel_err(h2.values()[i], ref2[i]) < 1e-12);
  }
}

TEST_CASE("gru_cell gradient w.r.t. every gate weight matches finite differences") {
  const int b = 2, e = 3, d = 4;
  auto rng = make_stream(22, RngStream::init);
  auto Wz = random_param("Wz", {e, d}, rng), Uz = random_param("Uz", {d, d}, rng),
       bz = random_param("bz", {1, d}, rng);
  auto Wr = random_param("Wr", {e, d}, rng), Ur = random_param("Ur", {d, d}, rng),
       br = random_param("br", {1, d}, rng);
  auto Wh = random_param("Wh", {e, d}, rng), Uh = random_param("Uh", {d, d}, rng),
       bh = random_param("bh", {1, d}, rng);
  std::vector<double> x(size_t(b) * e), h0(size_t(b) * d), w(size_t(b) * d);
  for (auto& v : x) v = rng.uniform(-1, 1);
  for (auto& v : h0) v = rng.uniform(-1, 1);
  for (auto& v : w) v = rng.uniform(-1, 1);

  auto loss = [&](bool with_grad) {
    Tape<double> tp;
    GruGates<double> g{tp.leaf(Wz.value.data(), e, d, Wz.grad.data()),
                       tp.leaf(Uz.value.data(), d, d, Uz.grad.data()),
                       tp.leaf(bz.value.data(), 1, d, bz.grad.data()),
                       tp.leaf(Wr.value.data(), e, d, Wr.grad.data()),
                       tp.leaf(Ur.value.data(), d, d, Ur.grad.data()),
                       tp.leaf(br.value.data(), 1, d, br.grad.data()),
                       tp.leaf(Wh.value.data(), e, d, Wh.grad.data()),
                       tp.leaf(Uh.value.data(), d, d, Uh.grad.data()),
                       tp.leaf(bh.value.data(), 1, d, bh.grad.data())};
    auto h1 = gru_cell(tp, tp.constant(x, b, e), tp.constant(h0, b, d), g);
    auto l = tp.sum(tp.mul(h1, tp.constant(w, b, d)));
    if (with_grad) tp.backward(l);
    return l.scalar();
  };
  gradcheck::check_against_tape({&Wz, &Uz, &bz, &Wr, &Ur, &br, &Wh, &Uh, &bh}, loss, 1e-5, 1e-4);
}

TEST_CASE("causal_conv: identity filter, hand-convolved delays, bad filter height") {
  const int64_t T = 3, b = 1, d = 1;
  Tape<double> tp;
  std::vector<double> h{2.0, 5.0, -3.0};
  auto x = tp.constant(h, T * b, d);

  std::vector<double> f1{1.0};
  auto y1 = tp.causal_conv(x, tp.constant(f1, 1, 1), T, b);
  for (int i = 0; i < 3; ++i) CHECK(y1.values()[i] == h[size_t(i)]);

  std::vector<double> f01{0.0, 1.0};  // current row weight 1, previous 0
  auto y2 = tp.causal_conv(x, tp.constant(f01, 2, 1), T, b);
  for (int i = 0; i < 3; ++i) CHECK(y2.values()[i] == h[size_t(i)]);

  std::vector<double> f10{1.0, 0.0};  // pure one-step delay
  auto y3 = tp.causal_conv(x, tp.constant(f10, 2, 1), T, b);
  CHECK(y3.values()[0] == 0.0);
  CHECK(y3.values()[1] == 2.0);
  CHECK(y3.values()[2] == 5.0);

  // m > T allowed: just extra padding
  std::vector<double> f5(5, 0.5);
  CHECK_NOTHROW(tp.causal_conv(x, tp.constant(f5, 5, 1), T, b));

  std::vector<double> fempty;
  CHECK_THROWS_AS(tp.causal_conv(x, tp.constant(fempty, 0, 1), T, b), ShapeError);
}

TEST_CASE("causal_conv: output at t is exactly invariant to future rows") {
  const int64_t T = 6, b = 2, d = 3;
  auto rng = make_stream(5, RngStream::init);
  std::vector<double> h(size_t(T * b * d));
  for (auto& v : h) v = rng.uniform(-1, 1);
  std::vector<double> f{0.3, -0.8, 1.7};

  auto run = [&](const std::vector<double>& input) {
    Tape<double> tp;
    auto y = tp.causal_conv(tp.constant(input, T * b, d), tp.constant(f, 3, 1), T, b);
    return std::vector<double>(y.values().begin(), y.values().end());
  };
  auto base = run(h);
  for (int64_t t = 0; t < T - 1; ++t) {
    auto perturbed = h;
    for (int64_t i = (t + 1) * b * d; i < T * b * d; ++i) perturbed[size_t(i)] += 17.5;
    auto out = run(perturbed);
    for (int64_t i = 0; i <= t; ++i)
      for (int64_t j = 0; j < b * d; ++j)
        CHECK(out[size_t(i * b * d + j)] == base[size_t(i * b * d + j)]);
  }
}

TEST_CASE("causal_conv gradients match finite differences") {
  const int64_t T = 5, b = 2, d = 3;
  auto rng = make_stream(6, RngStream::init);
  auto H = random_param("H", {T * b, d}, rng);
  auto F = random_param("f", {3, 1}, rng);
  std::vector<double> w(size_t(T * b * d));
  for (auto& v : w) v = rng.uniform(-1, 1);
  auto loss = [&](bool with_grad) {
    Tape<double> tp;
    auto y = tp.causal_conv(tp.leaf(H.value.data(), T * b, d, H.grad.data()),
                            tp.leaf(F.value.data(), 3, 1, F.grad.data()), T, b);
    auto l = tp.sum(tp.mul(y, tp.constant(w, T * b, d)));
    if (with_grad) tp.backward(l);
    return l.scalar();
  };
  gradcheck::check_against_tape({&H, &F}, loss, 1e-5, 1e-6);
}

TEST_CASE("softmax_cross_entropy: uniform, saturated, empty mask, bad target") {
  Tape<double> tp;
  {
    std::vector<double> logits(8, 0.25);  // 2 rows, V=4, all equal
    std::vector<int32_t> tgt{1, 3};
    auto l = tp.softmax_xent(tp.constant(logits, 2, 4), tgt.data(), nullptr);
    CHECK(l.scalar() == doctest::Approx(std::log(4.0)).epsilon(1e-12));
  }
  {
    std::vector<double> logits(5, 0.0);
    logits[2] = 1000.0;
    std::vector<int32_t> tgt{2};
    auto l = tp.softmax_xent(tp.constant(logits, 1, 5), tgt.data(), nullptr);
    CHECK(l.scalar() == doctest::Approx(0.0).epsilon(1e-9));
  }
  {
    std::vector<double> logits(4, 0.0);
    std::vector<int32_t> tgt{0};
    std::vector<uint8_t> mask{0};
    auto lt = tp.constant(logits, 1, 4);
    CHECK_THROWS_WITH_AS(tp.softmax_xent(lt, tgt.data(), mask.data()), doctest::Contains("empty batch"),
                         ShapeError);
  }
  {
    std::vector<double> logits(4, 0.0);
    std::vector<int32_t> tgt{4};
    auto lt = tp.constant(logits, 1, 4);
    CHECK_THROWS_AS(tp.softmax_xent(lt, tgt.data(), nullptr), ShapeError);
  }
}

TEST_CASE("softmax_cross_entropy gradient matches finite differences (b=1,T=2,V=5)") {
  auto rng = make_stream(11, RngStream::init);
  auto L = random_param("logits", {2, 5}, rng, -2, 2);
  std::vector<int32_t> tgt{4, 1};
  std::vector<uint8_t> mask{1, 1};
  auto loss = [&](bool with_grad) {
    Tape<double> tp;
    auto l = tp.softmax_xent(tp.leaf(L.value.data(), 2, 5, L.grad.data()), tgt.data(), mask.data());
    if (with_grad) tp.backward(l);
    return l.scalar();
  };
  gradcheck::check_against_tape({&L}, loss, 1e-5, 1e-4);
}

TEST_CASE("backward: sum and sum of squares, non-scalar rejected") {
  Param<double> p("p", {1, 2});
  p.value = {3.0, -1.0};
  {
    Tape<double> tp;
    auto l = tp.sum(tp.leaf(p.value.data(), 1, 2, p.grad.data()));
    tp.backward(l);
    CHECK(p.grad[0] == 1.0);
    CHECK(p.grad[1] == 1.0);
  }
  {
    Tape<double> tp;
    auto t = tp.leaf(p.value.data(), 1, 2, p.grad.data());
    auto l = tp.sum(tp.mul(t, t));
    tp.backward(l);
    CHECK(p.grad[0] == 6.0);
    CHECK(p.grad[1] == -2.0);
  }
  {
    Tape<double> tp;
    auto t = tp.leaf(p.value.data(), 1, 2, p.grad.data());
    CHECK_THROWS_AS(tp.backward(t), ShapeError);
  }
}

TEST_CASE("backward leaves unreachable parameters with zero grad") {
  Param<double> used("used", {1, 2}), unused("unused", {1, 2});
  used.value = {1.0, 2.0};
  unused.value = {5.0, 6.0};
  unused.grad = {9.0, 9.0};  // stale values must be cleared
  Tape<double> tp;
  auto a = tp.leaf(used.value.data(), 1, 2, used.grad.data());
  tp.leaf(unused.value.data(), 1, 2, unused.grad.data());
  tp.backward(tp.sum(a));
  CHECK(unused.grad[0] == 0.0);
  CHECK(unused.grad[1] == 0.0);
}

TEST_CASE("property: every differentiable op agrees with finite differences on random shapes") {
  auto rng = make_stream(12345, RngStream::init);
  for (int trial = 0; trial < 100; ++trial) {
    int which = int(rng.next_below(9));
    int64_t n = 1 + int64_t(rng.next_below(4));
    int64_t k = 1 + int64_t(rng.next_below(4));
    int64_t m = 1 + int64_t(rng.next_below(4));
    auto A = random_param("A", {n, k}, rng);
    auto B = random_param("B", {k, m}, rng);
    auto C = random_param("C", {n, k}, rng);
    auto bias = random_param("bias", {1, k}, rng);
    std::vector<double> w(size_t(n * k));
    for (auto& v : w) v = rng.uniform(-1, 1);
    std::vector<double> wm(size_t(n * m));
    for (auto& v : wm) v = rng.uniform(-1, 1);

    auto loss = [&](bool with_grad) {
      Tape<double> tp;
      auto a = tp.leaf(A.value.data(), n, k, A.grad.data());
      auto b = tp.leaf(B.value.data(), k, m, B.grad.data());
      auto c = tp.leaf(C.value.data(), n, k, C.grad.data());
      auto bb = tp.leaf(bias.value.data(), 1, k, bias.grad.data());
      Tensor<double> out;
      switch (which) {
        case 0: out = tp.mul(tp.matmul(a, b), tp.constant(wm, n, m)); break;
        case 1: out = tp.mul(tp.softplus(a), tp.constant(w, n, k)); break;
        case 2: out = tp.mul(tp.sigmoid(a), tp.constant(w, n, k)); break;
        case 3: out = tp.mul(tp.tanh(a), tp.constant(w, n, k)); break;
        case 4: out = tp.mul(tp.leaky_relu(a, 0.2), tp.constant(w, n, k)); break;
        case 5: out = tp.mul(tp.mul(a, c), tp.constant(w, n, k)); break;
        case 6: out = tp.mul(tp.add_bias(a, bb), tp.constant(w, n, k)); break;
        case 7: out = tp.mul(tp.sub(a, c), tp.constant(w, n, k)); break;
        case 8: {
          auto cc = tp.concat_cols(a, c);
          std::vector<double> w2(size_t(n * 2 * k));
          SplitMix64 r2(uint64_t(trial) * 77 + 1);
          for (auto& v : w2) v = r2.uniform(-1, 1);
          out = tp.mul(cc, tp.constant(w2, n, 2 * k));
          break;
        }
      }
      auto l = tp.sum(out);
      if (with_grad) tp.backward(l);
      return l.scalar();
    };
    gradcheck::check_against_tape({&A, &B, &C, &bias}, loss, 1e-5, 1e-4);
  }
}

TEST_CASE("softmax rows sum to one and cross-entropy is non-negative") {
  auto rng = make_stream(31, RngStream::init);
  std::vector<double> logits(7 * 9);
  for (auto& v : logits) v = rng.uniform(-8, 8);
  auto probs = logits;
  softmax_rows<double>(probs, 7, 9);
  for (int r = 0; r < 7; ++r) {
    double s = 0;
    for (int c = 0; c < 9; ++c) s += probs[size_t(r * 9 + c)];
    CHECK(std::abs(s - 1.0) < 1e-12);
  }
  Tape<double> tp;
  std::vector<int32_t> tgt(7);
  for (auto& t : tgt) t = int32_t(rng.next_below(9));
  auto l = tp.softmax_xent(tp.constant(logits, 7, 9), tgt.data(), nullptr);
  CHECK(l.scalar() >= 0.0);
}

TEST_CASE("tape replay determinism: identical inputs give bit-identical losses") {
  auto run = [] {
    auto rng = make_stream(777, RngStream::epsilon, 3, 9);
    std::vector<double> x(40);
    fill_gaussian<double>(rng, x);
    Tape<double> tp;
    auto t = tp.constant(x, 8, 5);
    auto y = tp.softplus(tp.mul(tp.sigmoid(t), tp.tanh(t)));
    std::vector<int32_t> tgt{0, 1, 2, 3, 4, 0, 1, 2};
    auto l = tp.softmax_xent(y, tgt.data(), nullptr);
    return l.scalar();
  };
  CHECK(run() == run());
}

TEST_CASE("gather_rows and stack_rows round values and gradients correctly") {
  auto rng = make_stream(8, RngStream::init);
  auto A = random_param("A", {4, 3}, rng);
  std::vector<int32_t> idx{2, 0, 2};
  std::vector<double> w(9);
  for (auto& v : w) v = rng.uniform(-1, 1);
  auto loss = [&](bool with_grad) {
    Tape<double> tp;
    auto a = tp.leaf(A.value.data(), 4, 3, A.grad.data());
    auto g = tp.gather_rows(a, idx.data(), 3);
    auto l = tp.sum(tp.mul(g, tp.constant(w, 3, 3)));
    if (with_grad) tp.backward(l);
    return l.scalar();
  };
  gradcheck::check_against_tape({&A}, loss, 1e-5, 1e-6);

  Tape<double> tp;
  std::vector<double> r0{1, 2}, r1{3, 4};
  auto s = tp.stack_rows({tp.constant(r0, 1, 2), tp.constant(r1, 1, 2)});
  CHECK(s.rows() == 2);
  CHECK(s.values()[2] == 3.0);
}
