#include <catch_amalgamated.hpp>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <random>
#include <set>

#include "cas/datasets.hpp"
#include "desk.hpp"

using namespace cas;
namespace fs = std::filesystem;

namespace {

void write_raw(const fs::path& p, const std::vector<unsigned char>& bytes) {
  std::ofstream out(p, std::ios::binary);
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
}

void be32(std::vector<unsigned char>& b, std::uint32_t v) {
  for (int s = 24; s >= 0; s -= 8) b.push_back(static_cast<unsigned char>(v >> s));
}

std::vector<unsigned char> idx_images(std::uint32_t n, std::uint32_t rows, std::uint32_t cols,
                                      const std::vector<unsigned char>& pixels, std::uint32_t magic = 0x803) {
  std::vector<unsigned char> b;
  be32(b, magic);
  be32(b, n);
  be32(b, rows);
  be32(b, cols);
  b.insert(b.end(), pixels.begin(), pixels.end());
  return b;
}

std::vector<unsigned char> idx_labels(const std::vector<unsigned char>& labels, std::uint32_t magic = 0x801) {
  std::vector<unsigned char> b;
  be32(b, magic);
  be32(b, static_cast<std::uint32_t>(labels.size()));
  b.insert(b.end(), labels.begin(), labels.end());
  return b;
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

Dataset synthetic(std::size_t n, std::size_t c, std::size_t h, std::size_t w, std::mt19937_64& rng) {
  std::uniform_int_distribution<int> byte(0, 255), label(0, 9);
  Dataset ds;
  ds.images = Tensor<float>(Shape{n, c, h, w});
  for (float& v : ds.images.data) v = static_cast<float>(byte(rng)) / 255.0f;
  for (std::size_t i = 0; i < n; ++i) ds.labels.push_back(label(rng));
  return ds;
}

Dataset labelled(std::vector<int> labels) {
  Dataset ds;
  ds.images = Tensor<float>(Shape{labels.size(), 1, 2, 2});
  for (std::size_t i = 0; i < ds.images.size(); ++i) ds.images[i] = static_cast<float>(i % 256) / 255.0f;
  ds.labels = std::move(labels);
  return ds;
}

}  // namespace

TEST_CASE("cifar10 binary fixtures", "[datasets]") {
  auto dir = desk::scratch("cifar");
  std::vector<unsigned char> rec(kCifarRecord, 255);
  rec[0] = 7;
  write_raw(dir / "one.bin", rec);
  std::vector<fs::path> one{dir / "one.bin"};
  auto ds = load_cifar10_binary(one);
  REQUIRE(ds.size() == 1);
  CHECK(ds.labels[0] == 7);
  CHECK(ds.images.shape == Shape{1, 3, 32, 32});
  for (float v : ds.images.data) CHECK(v == 1.0f);

  write_raw(dir / "short.bin", std::vector<unsigned char>(rec.begin(), rec.end() - 1));
  std::vector<fs::path> short_file{dir / "short.bin"};
  CHECK(code_of([&] { load_cifar10_binary(short_file); }) == ErrorCode::format);

  auto bad = rec;
  bad[0] = 10;
  write_raw(dir / "label.bin", bad);
  std::vector<fs::path> bad_label{dir / "label.bin"};
  CHECK(code_of([&] { load_cifar10_binary(bad_label); }) == ErrorCode::format);

  // two records: plane order R, G, B, each 32x32 row-major
  std::vector<unsigned char> two;
  for (int r = 0; r < 2; ++r) {
    two.push_back(static_cast<unsigned char>(r + 3));
    for (std::size_t i = 0; i < 3072; ++i) two.push_back(static_cast<unsigned char>((i / 1024) * 100 + r));
  }
  write_raw(dir / "two.bin", two);
  std::vector<fs::path> both{dir / "two.bin"};
  auto pair = load_cifar10_binary(both);
  REQUIRE(pair.size() == 2);
  CHECK(pair.labels == std::vector<int>{3, 4});
  CHECK(pair.images[0] == 0.0f);
  CHECK(pair.images[1024] == 100.0f / 255.0f);
  CHECK(pair.images[3072 + 2048 + 5] == 201.0f / 255.0f);

  std::vector<fs::path> joined{dir / "one.bin", dir / "two.bin"};
  auto cat = load_cifar10_binary(joined);
  CHECK(cat.labels == std::vector<int>{7, 3, 4});

  std::vector<fs::path> missing{dir / "nope.bin"};
  CHECK(code_of([&] { load_cifar10_binary(missing); }) == ErrorCode::io);
}

TEST_CASE("mnist idx fixtures", "[datasets]") {
  auto dir = desk::scratch("mnist");
  std::vector<unsigned char> pixels(784);
  for (std::size_t i = 0; i < 784; ++i) pixels[i] = static_cast<unsigned char>(i % 256);
  write_raw(dir / "img", idx_images(1, 28, 28, pixels));
  write_raw(dir / "lab", idx_labels({5}));
  auto ds = load_mnist_idx(dir / "img", dir / "lab");
  REQUIRE(ds.size() == 1);
  CHECK(ds.images.shape == Shape{1, 1, 28, 28});
  CHECK(ds.labels[0] == 5);
  for (std::size_t i = 0; i < 784; ++i) CHECK(ds.images[i] == static_cast<float>(i % 256) / 255.0f);

  CHECK(code_of([&] { load_mnist_idx(dir / "lab", dir / "img"); }) == ErrorCode::format);

  write_raw(dir / "lab2", idx_labels({5, 6}));
  CHECK(code_of([&] { load_mnist_idx(dir / "img", dir / "lab2"); }) == ErrorCode::format);

  write_raw(dir / "trunc", idx_images(2, 28, 28, pixels));
  CHECK(code_of([&] { load_mnist_idx(dir / "trunc", dir / "lab2"); }) == ErrorCode::format);

  write_raw(dir / "lab11", idx_labels({11}));
  CHECK(code_of([&] { load_mnist_idx(dir / "img", dir / "lab11"); }) == ErrorCode::format);
}

TEST_CASE("format round trips are value-exact", "[datasets][property]") {
  auto dir = desk::scratch("roundtrip");
  std::mt19937_64 rng(1);
  for (int trial = 0; trial < 5; ++trial) {
    auto cifar = synthetic(3 + static_cast<std::size_t>(trial), 3, 32, 32, rng);
    write_cifar10_binary(dir / "c.bin", cifar);
    std::vector<fs::path> files{dir / "c.bin"};
    auto back = load_cifar10_binary(files);
    CHECK(back.images.data == cifar.images.data);
    CHECK(back.labels == cifar.labels);
    CHECK(fs::file_size(dir / "c.bin") == cifar.size() * kCifarRecord);

    auto mnist = synthetic(4 + static_cast<std::size_t>(trial), 1, 28, 28, rng);
    write_mnist_idx(dir / "i", dir / "l", mnist);
    auto m = load_mnist_idx(dir / "i", dir / "l");
    CHECK(m.images.data == mnist.images.data);
    CHECK(m.labels == mnist.labels);
    for (float p : m.images.data) {
      const double scaled = static_cast<double>(p) * 255.0;
      CHECK(std::abs(scaled - std::round(scaled)) < 1e-4);
      CHECK(p >= 0.0f);
      CHECK(p <= 1.0f);
    }
  }
}

TEST_CASE("subsets and batching", "[datasets]") {
  std::vector<int> labels;
  for (int r = 0; r < 12; ++r)
    for (int c = 0; c < 10; ++c) labels.push_back((c * 7 + r) % 10);
  auto ds = labelled(labels);

  auto idx = per_class_indices(ds, 10);
  CHECK(idx.size() == 100);
  std::vector<int> counts(10, 0);
  for (auto i : idx) ++counts[static_cast<std::size_t>(ds.labels[i])];
  for (int c : counts) CHECK(c == 10);
  CHECK(std::is_sorted(idx.begin(), idx.end()));
  CHECK_THROWS_AS(per_class_indices(ds, 13), Error);

  BatchPlan plan;
  plan.batch_size = 32;
  plan.shuffle_seed = 9;
  plan.per_class = 10;
  auto a = epoch_batches(ds, plan, 1), b = epoch_batches(ds, plan, 1);
  CHECK(a == b);
  CHECK(a != epoch_batches(ds, plan, 2));
  REQUIRE(a.size() == 4);
  CHECK(a.back().size() == 4);
  std::multiset<std::size_t> seen;
  for (const auto& batch : a) seen.insert(batch.begin(), batch.end());
  CHECK(seen == std::multiset<std::size_t>(idx.begin(), idx.end()));

  BatchPlan whole;
  whole.batch_size = ds.size();
  auto single = epoch_batches(ds, whole, 0);
  REQUIRE(single.size() == 1);
  auto sorted = single[0];
  std::sort(sorted.begin(), sorted.end());
  for (std::size_t i = 0; i < sorted.size(); ++i) CHECK(sorted[i] == i);

  auto batch = gather(ds, a[0]);
  CHECK(batch.images.dim(0) == 32);
  for (std::size_t i = 0; i < 32; ++i) {
    CHECK(batch.labels[i] == ds.labels[a[0][i]]);
    for (std::size_t p = 0; p < 4; ++p) CHECK(batch.images[i * 4 + p] == ds.images[a[0][i] * 4 + p]);
  }

  BatchPlan dup;
  dup.indices = {1, 2, 2};
  CHECK_THROWS_AS(epoch_batches(ds, dup, 0), Error);
  BatchPlan far;
  far.indices = {1, 500};
  CHECK_THROWS_AS(epoch_batches(ds, far, 0), Error);
  BatchPlan zero;
  zero.batch_size = 0;
  CHECK_THROWS_AS(epoch_batches(ds, zero, 0), Error);
  CHECK_THROWS_AS(take(ds, std::vector<std::size_t>{}), Error);
}

TEST_CASE("bundled mnist subset loads", "[datasets]") {
  if (!desk::have_mnist()) SKIP("MNIST subset not found in " + desk::mnist_dir());
  const fs::path d = desk::mnist_dir();
  auto train = load_mnist_idx(d / "train-images-idx3-ubyte", d / "train-labels-idx1-ubyte");
  CHECK(train.images.dim(1) == 1);
  CHECK(train.images.dim(2) == 28);
  auto idx = per_class_indices(train, 200);
  CHECK(idx.size() == 2000);
}
