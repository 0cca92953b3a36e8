#include <catch_amalgamated.hpp>

#include <sys/wait.h>

#include <cmath>
#include <cstdlib>
#include <fstream>
#include <random>
#include <sstream>

#include "cas/cas.hpp"
#include "desk.hpp"
#include "oracles.hpp"

using namespace cas;
namespace fs = std::filesystem;

namespace {

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream s;
  s << in.rdbuf();
  return s.str();
}

void spit(const fs::path& p, const std::string& text) {
  std::ofstream out(p, std::ios::binary | std::ios::trunc);
  out << text;
}

bool same_bytes(const fs::path& a, const fs::path& b) { return slurp(a) == slurp(b); }

std::vector<std::string> lines(const std::string& s) {
  std::vector<std::string> out;
  std::istringstream in(s);
  for (std::string l; std::getline(in, l);) out.push_back(l);
  return out;
}

std::vector<std::string> split(const std::string& s, char sep = ',') {
  std::vector<std::string> out;
  std::istringstream in(s);
  for (std::string f; std::getline(in, f, sep);) out.push_back(f);
  return out;
}

struct Run {
  int status;
  std::string out, err;
};

Run casctl(const std::string& args, const fs::path& dir) {
  const auto out = dir / "stdout.txt", err = dir / "stderr.txt";
  const std::string cmd = std::string(CASCTL_PATH) + " " + args + " > " + out.string() + " 2> " + err.string();
  const int raw = std::system(cmd.c_str());
  return {WIFEXITED(raw) ? WEXITSTATUS(raw) : -1, slurp(out), slurp(err)};
}

ErrorCode code_of(auto&& f) {
  try {
    f();
  } catch (const Error& e) {
    return e.code();
  }
  FAIL("no error raised");
  return ErrorCode::io;
}

ExperimentConfig tiny_config(const fs::path& out) {
  auto cfg = desk::recipe(true, true, 4, 2, 20, 5, out);
  cfg.train_attack.steps = 3;
  return cfg;
}

}  // namespace

TEST_CASE("config text round trip", "[cli][config]") {
  ExperimentConfig cfg;
  cfg.loss.beta = 2.5;
  cfg.optimizer.lr_drop_epochs = {3, 9};
  cfg.data.train_files = {"a", "b"};
  cfg.data.test_files = {"c", "d"};
  cfg.seed = 12345678901ULL;
  cfg.train_attack.epsilon = 8.0 / 255.0;
  cfg.model.layers.insert(cfg.model.layers.begin(), LayerSpec::normalize({0.1307}, {0.3081}));
  for (auto& p : cfg.model.cas_points) ++p;
  const auto text = config_to_text(cfg);
  auto back = config_from_text(text);
  CHECK(back == cfg);
  CHECK(config_to_text(back) == text);

  auto j = nlohmann::json::parse(text);
  j["optimizer"]["learning_rate"] = 0.1;
  CHECK(code_of([&] { config_from_text(j.dump()); }) == ErrorCode::config);
  CHECK(code_of([&] { config_from_text("{not json"); }) == ErrorCode::config);

  for (const char* name : {"mnist_at_cas.json", "mnist_at.json", "mnist_std.json"}) {
    auto shipped = load_config(fs::path(CAS_SOURCE_DIR) / "configs" / name);
    CHECK_NOTHROW(shipped.validate());
    CHECK(config_from_text(config_to_text(shipped)) == shipped);
  }
  CHECK(code_of([] { load_config("/nonexistent/run.json"); }) == ErrorCode::io);
}

TEST_CASE("checkpoint bytes round trip and reject damage", "[cli][checkpoint]") {
  auto dir = desk::scratch("ckpt");
  ExperimentConfig cfg;
  auto params = init_params<float>(cfg.model, 3);
  save_checkpoint(dir / "a.ckpt", make_checkpoint(cfg, 7, params));
  auto loaded = load_checkpoint(dir / "a.ckpt");
  CHECK(loaded.epoch == 7);
  CHECK(config_from_text(loaded.config_text) == cfg);
  for (const auto& [name, t] : params) CHECK(loaded.params.at(name).data == t.data);
  save_checkpoint(dir / "b.ckpt", loaded);
  CHECK(same_bytes(dir / "a.ckpt", dir / "b.ckpt"));

  auto good = slurp(dir / "a.ckpt");
  CHECK(good.substr(0, 8) == "CASCKPT1");

  auto magic = good;
  magic[3] ^= 0x20;
  spit(dir / "magic.ckpt", magic);
  CHECK(code_of([&] { load_checkpoint(dir / "magic.ckpt"); }) == ErrorCode::bad_magic);

  auto version = good;
  version[8] = 2;
  spit(dir / "version.ckpt", version);
  CHECK(code_of([&] { load_checkpoint(dir / "version.ckpt"); }) == ErrorCode::bad_version);

  spit(dir / "trunc.ckpt", good.substr(0, good.size() - 4));
  CHECK(code_of([&] { load_checkpoint(dir / "trunc.ckpt"); }) == ErrorCode::truncated);

  spit(dir / "trail.ckpt", good + "x");
  CHECK(code_of([&] { load_checkpoint(dir / "trail.ckpt"); }) == ErrorCode::format);

  auto plain = cfg;
  plain.model.cas_points.clear();
  plain.loss.cas_points = 0;
  save_checkpoint(dir / "mismatch.ckpt", make_checkpoint(plain, 0, params));
  CHECK(code_of([&] { load_checkpoint(dir / "mismatch.ckpt"); }) == ErrorCode::shape_mismatch);

  CHECK(code_of([&] { load_checkpoint(dir / "absent.ckpt"); }) == ErrorCode::io);
}

TEST_CASE("learning rate schedule", "[cli][train]") {
  OptimizerConfig o;
  o.lr = 0.1;
  o.lr_drop_epochs = {15, 18};
  CHECK(learning_rate(o, 1) == 0.1);
  CHECK(learning_rate(o, 15) == 0.1);
  CHECK(learning_rate(o, 16) == 0.1 / 10.0);
  CHECK(learning_rate(o, 19) == 0.1 / 10.0 / 10.0);
}

TEST_CASE("sgd matches the momentum update by hand", "[cli][train]") {
  Parameters<float> p;
  p["w"] = Tensor<float>(Shape{2}, {1.0f, -2.0f});
  p["w"].grad = std::vector<float>{0.5f, 0.25f};
  Sgd opt;
  opt.step(p, 0.1, 0.9, 0.01);
  CHECK(p["w"][0] == 1.0f - 0.1f * (0.5f + 0.01f * 1.0f));
  const float v1 = 0.25f + 0.01f * -2.0f;
  CHECK(p["w"][1] == -2.0f - 0.1f * v1);
  const float w1 = p["w"][1];
  opt.step(p, 0.1, 0.9, 0.01);
  CHECK(p["w"][1] == w1 - 0.1f * (0.9f * v1 + (0.25f + 0.01f * w1)));
}

TEST_CASE("training runs on the mnist subset", "[cli][train][slow]") {
  if (!desk::have_mnist()) SKIP("MNIST subset not found in " + desk::mnist_dir());

  SECTION("zero epochs writes the initial parameters") {
    auto dir = desk::scratch("epochs0");
    auto cfg = tiny_config(dir);
    cfg.optimizer.epochs = 0;
    auto data = load_train_data(cfg);
    auto r = train(cfg, data.train, data.heldout);
    REQUIRE(r.metrics.size() == 1);
    auto init = load_checkpoint(dir / "init.ckpt");
    auto fresh = init_params<float>(cfg.model, cfg.seed);
    for (const auto& [name, t] : fresh) CHECK(init.params.at(name).data == t.data);
    CHECK(same_bytes(dir / "init.ckpt", dir / "last.ckpt"));

    // the logged epoch-0 loss is CE + beta * CAS recomputed from the checkpoint
    const auto plan = training_plan(cfg);
    double total = 0.0;
    std::size_t seen = 0, b = 0;
    for (const auto& idx : epoch_batches(data.train, plan, 0)) {
      Batch batch = gather(data.train, idx);
      std::span<const int> y(batch.labels);
      auto x_adv = pgd(cfg.model, init.params, batch.images, y, training_attack(cfg, 0, b++));
      Tape<float> tape;
      auto fwd = model_forward(tape, tape.borrow(x_adv), std::as_const(init.params), cfg.model,
                               ForwardOptions{Phase::train, y, false});
      oracle::Vec z(fwd.logits.value().begin(), fwd.logits.value().end());
      oracle::Vec a(fwd.aux[0].value().begin(), fwd.aux[0].value().end());
      const double loss = oracle::ce(z, batch.labels, 10) + cfg.loss.beta * oracle::ce(a, batch.labels, 10);
      total += loss * static_cast<double>(idx.size());
      seen += idx.size();
    }
    const double offline = total / static_cast<double>(seen);
    auto rows = lines(slurp(dir / "metrics.csv"));
    REQUIRE(rows.size() == 2);
    CHECK(rows[0] == "epoch,lr,train_loss,nat_acc,pgd_acc");
    const double logged = std::stod(split(rows[1])[2]);
    INFO("logged " << logged << " offline " << offline);
    CHECK(std::abs(logged - offline) <= 1e-6 * std::abs(offline));
  }

  SECTION("two epochs reduce the loss and are reproducible") {
    auto dir_a = desk::scratch("smoke_a"), dir_b = desk::scratch("smoke_b");
    auto cfg = tiny_config(dir_a);
    auto data = load_train_data(cfg);
    REQUIRE(data.train.size() == 200);
    auto r = train(cfg, data.train, data.heldout);
    REQUIRE(r.metrics.size() == 3);
    CHECK(r.metrics[2].train_loss < r.metrics[0].train_loss);

    // the checkpoint embeds the config, output_dir included, so rerun in place
    fs::copy_file(dir_a / "last.ckpt", dir_b / "last.ckpt");
    fs::copy_file(dir_a / "metrics.csv", dir_b / "metrics.csv");
    train(cfg, data.train, data.heldout);
    CHECK(same_bytes(dir_a / "last.ckpt", dir_b / "last.ckpt"));
    CHECK(slurp(dir_a / "metrics.csv") == slurp(dir_b / "metrics.csv"));

    auto rows = lines(slurp(dir_a / "metrics.csv"));
    REQUIRE(rows.size() == 4);
    double best = -1.0;
    for (std::size_t i = 1; i < rows.size(); ++i) best = std::max(best, std::stod(split(rows[i])[4]));
    CHECK(std::stod(split(rows[1 + r.best_epoch])[4]) == best);
    CHECK(best >= std::stod(split(rows.back())[4]));
    CHECK(load_checkpoint(dir_a / "best.ckpt").epoch == r.best_epoch);
    for (const auto& [name, t] : r.best) CHECK(load_checkpoint(dir_a / "best.ckpt").params.at(name).data == t.data);
  }

  SECTION("beta is inert without CAS points") {
    auto dir_a = desk::scratch("nocas_a"), dir_b = desk::scratch("nocas_b");
    auto cfg = desk::recipe(false, true, 1, 1, 10, 5, dir_a);
    cfg.train_attack.steps = 3;
    cfg.loss.beta = 0.0;
    auto data = load_train_data(cfg);
    train(cfg, data.train, data.heldout);
    auto other = cfg;
    other.loss.beta = 1.0;
    other.output_dir = dir_b.string();
    train(other, data.train, data.heldout);
    auto a = load_checkpoint(dir_a / "last.ckpt"), b = load_checkpoint(dir_b / "last.ckpt");
    for (const auto& [name, t] : a.params) CHECK(b.params.at(name).data == t.data);
    CHECK(slurp(dir_a / "metrics.csv") == slurp(dir_b / "metrics.csv"));
  }

  SECTION("stronger attacks never raise accuracy") {
    auto dir = desk::scratch("monotone");
    auto cfg = desk::recipe(false, false, 2, 2, 50, 20, dir);
    auto data = load_train_data(cfg);
    auto r = train(cfg, data.train, data.heldout);
    for (std::uint64_t seed = 0; seed < 3; ++seed) {
      auto fg = evaluate(cfg.model, r.last, data.heldout, EvalAttack{AttackKind::fgsm, 0.1, 0.1, 1, false, true, 1.0, seed});
      auto p10 = pgd20(0.1, seed);
      p10.steps = 10;
      auto a10 = evaluate(cfg.model, r.last, data.heldout, p10);
      auto a20 = evaluate(cfg.model, r.last, data.heldout, pgd20(0.1, seed));
      INFO("seed " << seed << ": fgsm " << fg.correct << " pgd10 " << a10.correct << " pgd20 " << a20.correct);
      CHECK(a20.correct <= a10.correct);
      CHECK(a10.correct <= fg.correct);
    }
  }
}

TEST_CASE("report csv format", "[cli][eval]") {
  std::vector<EvalRow> rows{{"none", 0.0, 0, "none", 7, 8}, {"pgd", 0.1, 20, "CE+CAS", 3, 8}};
  std::ostringstream out;
  write_report_csv(out, rows);
  auto ls = lines(out.str());
  REQUIRE(ls.size() == 3);
  CHECK(ls[0] == "attack,epsilon,steps,objective,correct,total,accuracy_pct");
  CHECK(ls[1] == "none,0,0,none,7,8,87.5");
  CHECK(ls[2] == "pgd,0.1,20,CE+CAS,3,8,37.5");
  CHECK(parse_attack_kind("joint") == AttackKind::joint);
  CHECK(code_of([] { parse_attack_kind("deepfool"); }) == ErrorCode::unknown_attack);
}

TEST_CASE("casctl commands", "[cli][casctl][slow]") {
  auto dir = desk::scratch("casctl");

  auto usage = casctl("", dir);
  CHECK(usage.status == 2);
  auto bogus = casctl("frobnicate", dir);
  CHECK(bogus.status == 2);
  CHECK(bogus.err.find("error: usage") != std::string::npos);

  auto missing = casctl("eval --checkpoint " + (dir / "none.ckpt").string(), dir);
  CHECK(missing.status == exit_code(ErrorCode::io));
  CHECK(missing.err.find("error: io:") != std::string::npos);

  auto grad = casctl("grad-check --seed 3", dir);
  CHECK(grad.status == 0);
  CHECK(grad.out.find("(ok)") != std::string::npos);

  if (!desk::have_mnist()) SKIP("MNIST subset not found in " + desk::mnist_dir());
  auto cfg = tiny_config(dir / "run");
  cfg.optimizer.epochs = 1;
  spit(dir / "run.json", config_to_text(cfg));

  auto trained = casctl("train --config " + (dir / "run.json").string(), dir);
  REQUIRE(trained.status == 0);
  CHECK(lines(trained.out).front() == "epoch,lr,train_loss,nat_acc,pgd_acc");
  for (const char* f : {"init.ckpt", "last.ckpt", "best.ckpt", "metrics.csv"}) CHECK(fs::exists(dir / "run" / f));
  const std::string ckpt = (dir / "run" / "last.ckpt").string();

  auto ev = casctl("eval --checkpoint " + ckpt + " --attack pgd --attack fgsm --eps 0 --eps 0.1 --out " +
                       (dir / "eval").string(),
                   dir);
  REQUIRE(ev.status == 0);
  auto rows = lines(slurp(dir / "eval" / "report.csv"));
  REQUIRE(rows.size() == 6);
  CHECK(rows[0] == "attack,epsilon,steps,objective,correct,total,accuracy_pct");
  auto nat = split(rows[1]);
  CHECK(nat[0] == "none");
  CHECK(nat[5] == "50");
  auto pgd0 = split(rows[2]), fgsm0 = split(rows[4]);
  CHECK(pgd0[3] == "CE+CAS");
  CHECK(pgd0[4] == nat[4]);
  CHECK(fgsm0[4] == nat[4]);
  CHECK(std::stoi(split(rows[3])[4]) <= std::stoi(nat[4]));

  auto bad_attack = casctl("eval --checkpoint " + ckpt + " --attack deepfool", dir);
  CHECK(bad_attack.status == exit_code(ErrorCode::unknown_attack));
  CHECK(bad_attack.err.find("fgsm") != std::string::npos);

  auto an = casctl("analyze --checkpoint " + ckpt + " --class 2 --eps 0 --out " + (dir / "an").string(), dir);
  REQUIRE(an.status == 0);
  for (const char* t : {"0.005", "0.01", "0.05"}) {
    auto f = lines(slurp(dir / "an" / ("frequency_" + std::string(t) + ".csv")));
    REQUIRE(f.size() == 65);
    for (std::size_t i = 1; i < f.size(); ++i) {
      auto c = split(f[i]);
      CHECK(c[2] == c[3]);
    }
  }
  auto uni = lines(slurp(dir / "an" / "uniformity.csv"));
  REQUIRE(uni.size() == 7);
  CHECK(uni[0] == "threshold,population,uniformity");
  {
    // recompute the 1% summary from the emitted frequency CSV
    auto f = lines(slurp(dir / "an" / "frequency_0.01.csv"));
    oracle::Vec freq;
    for (std::size_t i = 1; i < f.size(); ++i) freq.push_back(std::stod(split(f[i])[2]));
    auto row = split(uni[3]);
    CHECK(row[0] == "0.01");
    CHECK(row[1] == "natural");
    CHECK(std::abs(std::stod(row[2]) - oracle::uniformity(freq)) < 1e-8);
  }
  CHECK(casctl("analyze --checkpoint " + ckpt + " --class 10 --out " + (dir / "an").string(), dir).status ==
        exit_code(ErrorCode::invalid_argument));

  const auto feat_path = dir / "features.csv";
  auto ex = casctl("export-features --checkpoint " + ckpt + " --out " + feat_path.string(), dir);
  REQUIRE(ex.status == 0);
  auto feats = lines(slurp(feat_path));
  REQUIRE(feats.size() == 51);
  CHECK(split(feats[0]).size() == 65);
  auto loaded = load_checkpoint(ckpt);
  auto data = load_train_data(cfg);
  auto table = export_features(cfg.model, loaded.params, data.heldout.images, data.heldout.labels,
                               cfg.model.penultimate_layer());
  std::ostringstream expect;
  write_features_csv(expect, table);
  CHECK(slurp(feat_path) == expect.str());
}
