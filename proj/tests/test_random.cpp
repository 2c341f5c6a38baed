#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <vector>

#include "coinlab/random.hpp"

using namespace coinlab;

TEST_CASE("same seed reproduces the stream") {
  RandomStream a(123), b(123);
  for (int i = 0; i < 100; ++i) CHECK(a.next_u64() == b.next_u64());
}

TEST_CASE("forked streams are independent of parent consumption") {
  RandomStream root(9);
  RandomStream f1 = root.fork(5);
  root.next_u64();
  root.next_u64();
  RandomStream f2 = root.fork(5);  // fork depends only on key and label
  CHECK(f1.next_u64() == f2.next_u64());
  CHECK(RandomStream(9).fork(5).next_u64() != RandomStream(9).fork(6).next_u64());
}

TEST_CASE("uniform lies in the half-open unit interval") {
  RandomStream rs(42);
  for (int i = 0; i < 10000; ++i) {
    const double u = rs.uniform();
    CHECK(u >= 0.0);
    CHECK(u < 1.0);
  }
}

TEST_CASE("bernoulli frequency matches p") {
  RandomStream rs(7);
  int heads = 0;
  const int n = 100000;
  for (int i = 0; i < n; ++i) heads += rs.bernoulli(0.2) ? 1 : 0;
  CHECK(std::abs(heads / static_cast<double>(n) - 0.2) < 0.005);
}

TEST_CASE("normal has near standard moments") {
  RandomStream rs(13);
  const int n = 100000;
  double s = 0.0, s2 = 0.0;
  for (int i = 0; i < n; ++i) {
    const double x = rs.normal();
    s += x;
    s2 += x * x;
  }
  CHECK(std::abs(s / n) < 0.02);
  CHECK(std::abs(s2 / n - 1.0) < 0.03);
}

TEST_CASE("truncated normal stays within two standard deviations") {
  RandomStream rs(17);
  for (int i = 0; i < 20000; ++i) CHECK(std::abs(rs.truncated_normal(0.5)) <= 1.0 + 1e-12);
}

TEST_CASE("beta moments match") {
  RandomStream rs(19);
  const int n = 200000;
  double s = 0.0;
  for (int i = 0; i < n; ++i) s += rs.beta(2.0, 5.0);
  CHECK(std::abs(s / n - 2.0 / 7.0) < 0.005);

  double su = 0.0;
  for (int i = 0; i < n; ++i) su += rs.beta(1.0, 1.0);
  CHECK(std::abs(su / n - 0.5) < 0.005);
}

TEST_CASE("categorical respects weights") {
  RandomStream rs(23);
  const std::vector<double> w = {0.1, 0.6, 0.3};
  std::vector<int> counts(3, 0);
  const int n = 100000;
  for (int i = 0; i < n; ++i) counts[rs.categorical(w)]++;
  for (size_t j = 0; j < 3; ++j)
    CHECK(std::abs(counts[j] / static_cast<double>(n) - w[j]) < 0.01);
}
