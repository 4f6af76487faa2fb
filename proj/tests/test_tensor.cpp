#include <doctest.h>

#include <unistd.h>

#include <cstdio>
#include <filesystem>

#include "vbsd/checkpoint.hpp"
#include "vbsd/rng.hpp"
#include "vbsd/stats.hpp"
#include "vbsd/tensor.hpp"

using namespace vbsd;

namespace {

std::filesystem::path temp_file(const char* stem) {
  auto dir = std::filesystem::temp_directory_path();
  return dir / (std::string(stem) + "_" + std::to_string(::getpid()) + ".bin");
}

}  // namespace

TEST_CASE("tensor shape and indexing") {
  Tensor t({2, 3});
  CHECK(t.size() == 6);
  CHECK(t.rank() == 2);
  t.at(1, 2) = 5.0;
  CHECK(t[5] == 5.0);
  CHECK(Tensor::scalar(3.5).scalar_value() == 3.5);
  CHECK_THROWS_AS(Tensor({2, 2}, {1.0, 2.0}), Error);
  CHECK(Tensor::shape_str({4, 7}) == "[4,7]");
}

TEST_CASE("rng streams are deterministic and split-independent") {
  RngStream a(42), b(42);
  for (int i = 0; i < 100; ++i) CHECK(a.next_u64() == b.next_u64());

  // A child stream does not perturb or depend on the parent's position.
  RngStream p(7);
  RngStream c1 = p.split(3);
  (void)p.next_double();
  RngStream c2 = RngStream(7).split(3);
  for (int i = 0; i < 10; ++i) CHECK(c1.next_u64() == c2.next_u64());

  RngStream g(1);
  double m = 0, m2 = 0;
  const int n = 20000;
  for (int i = 0; i < n; ++i) {
    double z = g.next_gaussian();
    m += z;
    m2 += z * z;
  }
  m /= n;
  m2 /= n;
  CHECK(std::abs(m) < 0.03);
  CHECK(std::abs(m2 - 1.0) < 0.05);
}

TEST_CASE("rng categorical draws follow the weights") {
  RngStream rng(11);
  std::vector<double> w = {1.0, 3.0, 0.0, 6.0};
  std::vector<std::size_t> counts(4, 0);
  const int n = 50000;
  for (int i = 0; i < n; ++i) counts[rng.next_categorical(w)]++;
  CHECK(counts[2] == 0);
  CHECK(std::abs(double(counts[0]) / n - 0.1) < 0.01);
  CHECK(std::abs(double(counts[1]) / n - 0.3) < 0.015);
  CHECK(std::abs(double(counts[3]) / n - 0.6) < 0.015);
}

TEST_CASE("uniform draws pass a KS test against U(0,1)") {
  RngStream rng(5);
  std::vector<double> xs(4000);
  for (double& x : xs) x = rng.next_double();
  CHECK(stats::ks_uniform_pass(xs, 0.0, 1.0, 0.01));
}

TEST_CASE("checkpoint round-trips parameters byte-exactly") {
  ParameterStore store;
  RngStream rng(3);
  store.add("w", Tensor::random_uniform({4, 3}, -2, 2, rng));
  store.add("b", Tensor::random_uniform({4}, -1, 1, rng));
  store.add("scalar", Tensor::scalar(0x1.fffffffffffffp-2));

  auto path = temp_file("ckpt_roundtrip");
  checkpoint::save(store, path.string());

  ParameterStore loaded;
  loaded.add("w", Tensor({4, 3}));
  loaded.add("b", Tensor({4}));
  loaded.add("scalar", Tensor::scalar(0));
  checkpoint::load(loaded, path.string());
  for (std::size_t i = 0; i < store.count(); ++i)
    for (std::size_t k = 0; k < store.value(i).size(); ++k)
      CHECK(loaded.get(store.name(i))[k] == store.value(i)[k]);

  // Two saves of the same store produce identical bytes.
  auto path2 = temp_file("ckpt_roundtrip2");
  checkpoint::save(store, path2.string());
  std::ifstream f1(path, std::ios::binary), f2(path2, std::ios::binary);
  std::string b1((std::istreambuf_iterator<char>(f1)), std::istreambuf_iterator<char>());
  std::string b2((std::istreambuf_iterator<char>(f2)), std::istreambuf_iterator<char>());
  CHECK(b1 == b2);
  CHECK(b1.substr(0, 4) == "VBSD");

  std::filesystem::remove(path);
  std::filesystem::remove(path2);
}

TEST_CASE("checkpoint rejects bad files") {
  ParameterStore store;
  store.add("w", Tensor({2}));

  auto path = temp_file("ckpt_bad");
  {
    std::ofstream os(path, std::ios::binary);
    os << "NOPE";
  }
  CHECK_THROWS_WITH_AS(checkpoint::load(store, path.string()),
                       doctest::Contains("bad magic"), Error);

  // Shape mismatch.
  checkpoint::save(store, path.string());
  ParameterStore other;
  other.add("w", Tensor({3}));
  CHECK_THROWS_WITH_AS(checkpoint::load(other, path.string()),
                       doctest::Contains("shape mismatch"), Error);

  // Missing parameter.
  ParameterStore bigger;
  bigger.add("w", Tensor({2}));
  bigger.add("extra", Tensor({1}));
  CHECK_THROWS_WITH_AS(checkpoint::load(bigger, path.string()),
                       doctest::Contains("missing parameter"), Error);
  std::filesystem::remove(path);
}

TEST_CASE("parameter store flatten/unflatten preserves order") {
  ParameterStore store;
  store.add("a", Tensor::vector({1, 2}));
  store.add("b", Tensor::vector({3}));
  Tensor flat = store.flatten();
  CHECK(flat.size() == 3);
  CHECK(flat[2] == 3);
  flat[0] = 9;
  store.unflatten(flat);
  CHECK(store.get("a")[0] == 9);
}

TEST_CASE("stats helpers behave on known cases") {
  // Chi-square critical near the textbook value for df=9, alpha=0.01 (21.67).
  double crit = stats::chi_square_critical(9, 0.01);
  CHECK(crit > 20.5);
  CHECK(crit < 22.5);

  // Mann-Whitney: clearly increasing samples => small p for "greater".
  std::vector<double> lo = {1, 2, 3, 4, 5, 6, 7, 8};
  std::vector<double> hi = {11, 12, 13, 14, 15, 16, 17, 18};
  CHECK(stats::mann_whitney_p_greater(lo, hi) < 0.01);
  CHECK(stats::mann_whitney_p_greater(hi, lo) > 0.95);
}
