#include <catch_amalgamated.hpp>

#include <cmath>
#include <random>

#include "cas/grad_check.hpp"
#include "cas/objectives.hpp"
#include "oracles.hpp"

using namespace cas;
using Catch::Matchers::WithinAbs;
using Catch::Matchers::WithinRel;

namespace {

std::vector<int> random_labels(std::size_t n, std::size_t c, std::mt19937_64& rng) {
  std::uniform_int_distribution<int> d(0, static_cast<int>(c) - 1);
  std::vector<int> y(n);
  for (int& v : y) v = d(rng);
  return y;
}

double ce_of(const Tensor<double>& z, const std::vector<int>& y) {
  Tape<double> tape;
  return cross_entropy(tape.borrow(z), std::span<const int>(y)).item();
}

struct Instance {
  std::size_t n, c, s;
  Tensor<double> nat, adv;
  std::vector<Tensor<double>> nat_aux, adv_aux;
  std::vector<int> y;
};

Instance random_instance(std::mt19937_64& rng, double scale = 3.0) {
  std::uniform_int_distribution<std::size_t> dn(1, 6), dc(2, 10), ds(1, 3);
  Instance in{dn(rng), dc(rng), ds(rng), {}, {}, {}, {}, {}};
  in.nat = oracle::random_tensor(Shape{in.n, in.c}, rng, -scale, scale);
  in.adv = oracle::random_tensor(Shape{in.n, in.c}, rng, -scale, scale);
  for (std::size_t k = 0; k < in.s; ++k) {
    in.nat_aux.push_back(oracle::random_tensor(Shape{in.n, in.c}, rng, -scale, scale));
    in.adv_aux.push_back(oracle::random_tensor(Shape{in.n, in.c}, rng, -scale, scale));
  }
  in.y = random_labels(in.n, in.c, rng);
  return in;
}

template <typename F>
double on_tape(const Instance& in, const LossConfig& cfg, F loss) {
  Tape<double> tape;
  std::vector<Var<double>> na, aa;
  for (const auto& t : in.nat_aux) na.push_back(tape.borrow(t));
  for (const auto& t : in.adv_aux) aa.push_back(tape.borrow(t));
  return loss(tape.borrow(in.nat), tape.borrow(in.adv), std::span<const Var<double>>(na),
              std::span<const Var<double>>(aa), std::span<const int>(in.y), cfg)
      .item();
}

std::vector<oracle::Vec> data_of(const std::vector<Tensor<double>>& ts) {
  std::vector<oracle::Vec> out;
  for (const auto& t : ts) out.push_back(t.data);
  return out;
}

}  // namespace

TEST_CASE("cross_entropy examples", "[objectives]") {
  std::vector<int> y{3, 7};
  CHECK_THAT(ce_of(Tensor<double>(Shape{2, 10}, 0.0), y), WithinAbs(std::log(10.0), 1e-12));

  Tensor<double> z(Shape{1, 10}, 0.0);
  z[3] = 1e4;
  CHECK_THAT(ce_of(z, {3}), WithinAbs(0.0, 1e-12));

  std::mt19937_64 rng(11);
  auto r = oracle::random_tensor(Shape{3, 4}, rng, -2, 2);
  std::vector<int> yr{0, 3, 2};
  CHECK_THAT(ce_of(r, yr), WithinRel(oracle::ce(r.data, yr, 4), 1e-6));

  Tape<double> tape;
  std::vector<int> bad{4};
  CHECK_THROWS_AS(cross_entropy(tape.borrow(Tensor<double>(Shape{1, 4}, 0.0)), std::span<const int>(bad)), Error);
  std::vector<int> neg{-1};
  CHECK_THROWS_AS(cross_entropy(tape.borrow(Tensor<double>(Shape{1, 4}, 0.0)), std::span<const int>(neg)), Error);
}

TEST_CASE("cas_loss shares the cross-entropy definition", "[objectives]") {
  std::vector<int> y{1, 9, 0};
  Tape<double> tape;
  Tensor<double> zeros(Shape{3, 10}, 0.0);
  CHECK_THAT(cas_loss(tape.borrow(zeros), std::span<const int>(y)).item(), WithinAbs(std::log(10.0), 1e-12));
  std::mt19937_64 rng(3);
  for (int i = 0; i < 10; ++i) {
    auto z = oracle::random_tensor(Shape{3, 10}, rng, -5, 5);
    CHECK(cas_loss(tape.borrow(z), std::span<const int>(y)).item() ==
          cross_entropy(tape.borrow(z), std::span<const int>(y)).item());
  }
}

TEST_CASE("combined_loss examples", "[objectives]") {
  std::mt19937_64 rng(5);
  auto z = oracle::random_tensor(Shape{4, 6}, rng, -3, 3);
  std::vector<int> y{0, 5, 2, 2};
  Tape<double> tape;
  auto logits = tape.borrow(z);
  std::vector<Var<double>> one{logits};

  LossConfig zero{Variant::at, 0.0, 6.0, 1};
  CHECK(combined_loss(logits, std::span<const Var<double>>(one), std::span<const int>(y), zero).item() ==
        cross_entropy(logits, std::span<const int>(y)).item());

  LossConfig unit{Variant::at, 1.0, 6.0, 1};
  CHECK_THAT(combined_loss(logits, std::span<const Var<double>>(one), std::span<const int>(y), unit).item(),
             WithinRel(2.0 * oracle::ce(z.data, y, 6), 1e-12));

  auto a1 = oracle::random_tensor(Shape{4, 6}, rng, -3, 3), a2 = oracle::random_tensor(Shape{4, 6}, rng, -3, 3);
  std::vector<Var<double>> two{tape.borrow(a1), tape.borrow(a2)};
  LossConfig four{Variant::at, 4.0, 6.0, 2};
  const double expect = oracle::ce(z.data, y, 6) + 4.0 / 2.0 * (oracle::ce(a1.data, y, 6) + oracle::ce(a2.data, y, 6));
  CHECK_THAT(combined_loss(logits, std::span<const Var<double>>(two), std::span<const int>(y), four).item(),
             WithinRel(expect, 1e-12));

  try {
    combined_loss(logits, std::span<const Var<double>>(one), std::span<const int>(y), four);
    FAIL("S mismatch accepted");
  } catch (const Error& e) {
    CHECK(e.code() == ErrorCode::shape);
  }
}

TEST_CASE("combined_loss is nondecreasing in beta", "[objectives][property]") {
  std::mt19937_64 rng(8);
  for (int i = 0; i < 50; ++i) {
    auto z = oracle::random_tensor(Shape{3, 5}, rng, -4, 4), a = oracle::random_tensor(Shape{3, 5}, rng, -4, 4);
    auto y = random_labels(3, 5, rng);
    Tape<double> tape;
    std::vector<Var<double>> aux{tape.borrow(a)};
    double prev = -INFINITY;
    for (double beta : {0.0, 0.5, 1.0, 2.0, 5.0, 10.0, 20.0}) {
      double v = combined_loss(tape.borrow(z), std::span<const Var<double>>(aux), std::span<const int>(y),
                               LossConfig{Variant::at, beta, 6.0, 1})
                     .item();
      CHECK(v >= prev);
      prev = v;
    }
  }
}

TEST_CASE("kl_div examples", "[objectives]") {
  std::mt19937_64 rng(13);
  Tape<double> tape;
  auto p = oracle::random_tensor(Shape{2, 3}, rng, -2, 2), q = oracle::random_tensor(Shape{2, 3}, rng, -2, 2);
  CHECK(kl_div(tape.borrow(p), tape.borrow(p)).item() == 0.0);
  CHECK_THAT(kl_div(tape.borrow(p), tape.borrow(q)).item(), WithinRel(oracle::kl(p.data, q.data, 2, 3), 1e-6));
  for (int i = 0; i < 200; ++i) {
    auto a = oracle::random_tensor(Shape{4, 7}, rng, -20, 20), b = oracle::random_tensor(Shape{4, 7}, rng, -20, 20);
    CHECK(kl_div(tape.borrow(a), tape.borrow(b)).item() >= -1e-9);
  }
}

TEST_CASE("bce_mart examples", "[objectives]") {
  Tape<double> tape;
  std::vector<int> y{4};
  CHECK_THAT(bce_mart(tape.borrow(Tensor<double>(Shape{1, 10}, 0.0)), std::span<const int>(y)).item(),
             WithinAbs(std::log(10.0) + std::log(1.0 / 0.9), 1e-9));
  CHECK_THAT(bce_mart(tape.borrow(Tensor<double>(Shape{1, 10}, 0.0)), std::span<const int>(y)).item(),
             WithinAbs(2.407946, 1e-6));

  Tensor<double> sat(Shape{1, 10}, 0.0);
  sat[4] = 60.0;
  CHECK(bce_mart(tape.borrow(sat), std::span<const int>(y)).item() < 1e-20);

  std::mt19937_64 rng(17);
  for (int i = 0; i < 100; ++i) {
    auto z = oracle::random_tensor(Shape{3, 6}, rng, -6, 6);
    auto yy = random_labels(3, 6, rng);
    const double b = bce_mart(tape.borrow(z), std::span<const int>(yy)).item();
    CHECK(b >= ce_of(z, yy));
    CHECK_THAT(b, WithinRel(oracle::bce(z.data, yy, 6), 1e-9));
  }

  // huge wrong-class logit: the clamp keeps the value finite
  Tensor<double> wrong(Shape{1, 3}, 0.0);
  wrong[1] = 1e4;
  std::vector<int> y0{0};
  CHECK(std::isfinite(bce_mart(tape.borrow(wrong), std::span<const int>(y0)).item()));
}

TEST_CASE("cw_margin examples", "[objectives]") {
  Tape<double> tape;
  std::vector<int> y{0};
  CHECK(cw_margin(tape.borrow(Tensor<double>(Shape{1, 2}, {2.0, 5.0})), std::span<const int>(y)).item() == 3.0);
  CHECK(cw_margin(tape.borrow(Tensor<double>(Shape{1, 4}, {50.0, 0.0, -1.0, 1.0})), std::span<const int>(y)).item() ==
        -49.0);
  Tensor<double> a(Shape{1, 4}, {0.3, -1.0, 2.0, 0.5}), b(Shape{1, 4}, {0.3, 2.0, 0.5, -1.0});
  CHECK(cw_margin(tape.borrow(a), std::span<const int>(y)).item() ==
        cw_margin(tape.borrow(b), std::span<const int>(y)).item());
  std::mt19937_64 rng(19);
  auto z = oracle::random_tensor(Shape{5, 7}, rng);
  auto yy = random_labels(5, 7, rng);
  CHECK_THAT(cw_margin(tape.borrow(z), std::span<const int>(yy)).item(), WithinRel(oracle::cw(z.data, yy, 7), 1e-12));
}

TEST_CASE("trades_cas_loss examples", "[objectives]") {
  std::mt19937_64 rng(23);
  auto in = random_instance(rng);
  auto trades = [](auto&&... a) { return trades_cas_loss<double>(a...); };
  LossConfig cfg{Variant::trades, 0.0, 6.0, in.s};
  const double plain = oracle::ce(in.nat.data, in.y, in.c) + 6.0 * oracle::kl(in.nat.data, in.adv.data, in.n, in.c);
  CHECK_THAT(on_tape(in, cfg, trades), WithinRel(plain, 1e-12));

  Instance same = in;
  same.adv = same.nat;
  same.adv_aux = same.nat_aux;
  cfg.beta = 2.0;
  double ce_terms = oracle::ce(same.nat.data, same.y, same.c);
  for (const auto& a : same.nat_aux) ce_terms += 2.0 / static_cast<double>(same.s) * oracle::ce(a.data, same.y, same.c);
  CHECK_THAT(on_tape(same, cfg, trades), WithinRel(ce_terms, 1e-12));

  cfg.beta = 1.0;
  CHECK_THAT(on_tape(in, cfg, trades),
             WithinRel(oracle::trades_cas(in.nat.data, in.adv.data, data_of(in.nat_aux), data_of(in.adv_aux), in.y, in.c,
                                          1.0, 6.0),
                       1e-6));
}

TEST_CASE("mart_cas_loss examples", "[objectives]") {
  std::mt19937_64 rng(29);
  auto in = random_instance(rng);
  auto mart = [](auto&&... a) { return mart_cas_loss<double>(a...); };
  LossConfig cfg{Variant::mart, 0.0, 6.0, in.s};
  const double plain =
      oracle::bce(in.adv.data, in.y, in.c) + 6.0 * oracle::weighted_kl(in.nat.data, in.adv.data, in.y, in.c);
  CHECK_THAT(on_tape(in, cfg, mart), WithinRel(plain, 1e-12));

  // confident natural predictions zero every KL weight
  Instance sure = in;
  for (std::size_t i = 0; i < sure.n; ++i) {
    sure.nat[i * sure.c + sure.y[i]] = 1e4;
    for (auto& a : sure.nat_aux) a[i * sure.c + sure.y[i]] = 1e4;
  }
  cfg.beta = 3.0;
  double bce_terms = oracle::bce(sure.adv.data, sure.y, sure.c);
  for (const auto& a : sure.adv_aux) bce_terms += 3.0 / static_cast<double>(sure.s) * oracle::bce(a.data, sure.y, sure.c);
  CHECK_THAT(on_tape(sure, cfg, mart), WithinRel(bce_terms, 1e-12));

  cfg.beta = 1.0;
  CHECK_THAT(on_tape(in, cfg, mart),
             WithinRel(oracle::mart_cas(in.nat.data, in.adv.data, data_of(in.nat_aux), data_of(in.adv_aux), in.y, in.c,
                                        1.0, 6.0),
                       1e-6));
}

TEST_CASE("variant losses match the scalar references", "[objectives][property]") {
  std::mt19937_64 rng(31);
  auto trades = [](auto&&... a) { return trades_cas_loss<double>(a...); };
  auto mart = [](auto&&... a) { return mart_cas_loss<double>(a...); };
  for (int i = 0; i < 100; ++i) {
    auto in = random_instance(rng);
    std::uniform_real_distribution<double> db(0.0, 20.0), dl(0.0, 10.0);
    const double beta = db(rng), lambda = dl(rng);
    const auto na = data_of(in.nat_aux), aa = data_of(in.adv_aux);
    CHECK_THAT(on_tape(in, LossConfig{Variant::trades, beta, lambda, in.s}, trades),
               WithinRel(oracle::trades_cas(in.nat.data, in.adv.data, na, aa, in.y, in.c, beta, lambda), 1e-6));
    CHECK_THAT(on_tape(in, LossConfig{Variant::mart, beta, lambda, in.s}, mart),
               WithinRel(oracle::mart_cas(in.nat.data, in.adv.data, na, aa, in.y, in.c, beta, lambda), 1e-6));
  }
}

TEST_CASE("beta zero is bit-equal to the base loss", "[objectives][property]") {
  std::mt19937_64 rng(37);
  for (int i = 0; i < 20; ++i) {
    auto in = random_instance(rng);
    Instance bare = in;
    bare.nat_aux.clear();
    bare.adv_aux.clear();
    auto trades = [](auto&&... a) { return trades_cas_loss<double>(a...); };
    auto mart = [](auto&&... a) { return mart_cas_loss<double>(a...); };
    CHECK(on_tape(in, LossConfig{Variant::trades, 0.0, 6.0, in.s}, trades) ==
          on_tape(bare, LossConfig{Variant::trades, 1.0, 6.0, 0}, trades));
    CHECK(on_tape(in, LossConfig{Variant::mart, 0.0, 6.0, in.s}, mart) ==
          on_tape(bare, LossConfig{Variant::mart, 1.0, 6.0, 0}, mart));
  }
}

TEST_CASE("variant losses reject auxiliary count mismatch", "[objectives]") {
  std::mt19937_64 rng(41);
  auto in = random_instance(rng);
  auto trades = [](auto&&... a) { return trades_cas_loss<double>(a...); };
  auto mart = [](auto&&... a) { return mart_cas_loss<double>(a...); };
  CHECK_THROWS_AS(on_tape(in, LossConfig{Variant::trades, 1.0, 6.0, in.s + 1}, trades), Error);
  CHECK_THROWS_AS(on_tape(in, LossConfig{Variant::mart, 1.0, 6.0, in.s + 1}, mart), Error);
}

TEST_CASE("loss gradients match finite differences", "[objectives][grad]") {
  std::mt19937_64 rng(43);
  for (int seed = 0; seed < 5; ++seed) {
    auto z = oracle::random_tensor(Shape{3, 5}, rng, -3, 3);
    auto other = oracle::random_tensor(Shape{3, 5}, rng, -3, 3);
    auto y = random_labels(3, 5, rng);
    std::span<const int> ys(y);
    CHECK(grad_check<double>([&](Tape<double>&, Var<double> v) { return cross_entropy(v, ys); }, z) < 1e-4);
    CHECK(grad_check<double>([&](Tape<double>&, Var<double> v) { return cas_loss(v, ys); }, z) < 1e-4);
    CHECK(grad_check<double>([&](Tape<double>&, Var<double> v) { return bce_mart(v, ys); }, z) < 1e-4);
    CHECK(grad_check<double>([&](Tape<double>&, Var<double> v) { return cw_margin(v, ys); }, z) < 1e-4);
    CHECK(grad_check<double>([&](Tape<double>& t, Var<double> v) { return kl_div(v, t.borrow(other)); }, z) < 1e-4);
    CHECK(grad_check<double>([&](Tape<double>& t, Var<double> v) { return kl_div(t.borrow(other), v); }, z) < 1e-4);

    LossConfig cfg{Variant::trades, 1.5, 6.0, 1};
    auto through_trades = [&](Tape<double>& t, Var<double> v) {
      std::vector<Var<double>> na{v}, aa{t.borrow(other)};
      return trades_cas_loss(v, t.borrow(other), std::span<const Var<double>>(na), std::span<const Var<double>>(aa), ys,
                             cfg);
    };
    CHECK(grad_check<double>(through_trades, z) < 1e-4);
    cfg.variant = Variant::mart;
    auto through_mart = [&](Tape<double>& t, Var<double> v) {
      std::vector<Var<double>> na{t.borrow(other)}, aa{v};
      return mart_cas_loss(t.borrow(other), v, std::span<const Var<double>>(na), std::span<const Var<double>>(aa), ys,
                           cfg);
    };
    CHECK(grad_check<double>(through_mart, z) < 1e-4);
  }
}
