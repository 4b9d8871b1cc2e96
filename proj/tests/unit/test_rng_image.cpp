#include "doctest.h"

#include <set>

#include "helpers.hpp"
#include "illusion/errors.hpp"
#include "illusion/hash.hpp"
#include "illusion/image.hpp"
#include "illusion/parallel.hpp"
#include "illusion/rng.hpp"

using namespace illusion;

TEST_SUITE("support") {
  TEST_CASE("derived seeds separate every coordinate") {
    std::set<std::uint64_t> seen;
    for (auto tag : {Stream::prototype, Stream::eot, Stream::consensus})
      for (std::uint64_t s = 0; s < 10; ++s)
        for (std::uint64_t d = 0; d < 10; ++d) seen.insert(derive_seed(7, tag, s, d));
    CHECK(seen.size() == 300);
    CHECK(derive_seed(7, Stream::eta, 3, 4) == derive_seed(7, Stream::eta, 3, 4));
    CHECK(derive_seed(7, Stream::eta, 3, 4) != derive_seed(8, Stream::eta, 3, 4));
  }

  TEST_CASE("fnv1a matches the reference vectors") {
    Fnv1a empty;
    CHECK(empty.digest() == 0xcbf29ce484222325ULL);
    Fnv1a a;
    a.update("a");
    CHECK(a.digest() == 0xaf63dc4c8601ec8cULL);
    Fnv1a foobar;
    foobar.update("foobar");
    CHECK(foobar.hex() == "85944171f73967e8");
  }

  TEST_CASE("parallel_map keeps index order and rethrows") {
    const auto out = parallel_map(4, 100, [](std::size_t i) { return static_cast<int>(i * i); });
    for (std::size_t i = 0; i < out.size(); ++i) CHECK(out[i] == static_cast<int>(i * i));
    CHECK_THROWS_AS(parallel_map(3, 10,
                                 [](std::size_t i) -> int {
                                   if (i == 7) throw Error("boom");
                                   return 0;
                                 }),
                    Error);
  }

  TEST_CASE("hflip is an involution") {
    std::mt19937_64 rng(1);
    const GridShape g{4, 6};
    const Vec x = testing::random_vec(rng, 24, 0.0, 1.0);
    CHECK(horizontal_flip(horizontal_flip(x, g), g) == x);
    CHECK(horizontal_flip(x, g)[0] == x[5]);
  }

  TEST_CASE("blur with a vanishing kernel is the identity") {
    std::mt19937_64 rng(2);
    const GridShape g{8, 8};
    const Vec x = testing::random_vec(rng, 64, 0.0, 1.0);
    CHECK(gaussian_blur(x, g, 0.0) == x);
    CHECK((gaussian_blur(x, g, 1e-13) - x).cwiseAbs().maxCoeff() == 0.0);
  }

  TEST_CASE("blur preserves constants and total mass under reflection") {
    const GridShape g{8, 8};
    const Vec c = Vec::Constant(64, 0.4);
    CHECK((gaussian_blur(c, g, 1.5) - c).cwiseAbs().maxCoeff() < 1e-12);
  }

  TEST_CASE("translate shifts with zero fill") {
    const GridShape g{3, 3};
    Vec x(9);
    x << 1, 2, 3, 4, 5, 6, 7, 8, 9;
    Vec right(9);
    right << 0, 1, 2, 0, 4, 5, 0, 7, 8;
    CHECK(translate(x, g, 1, 0) == right);
    Vec down(9);
    down << 0, 0, 0, 1, 2, 3, 4, 5, 6;
    CHECK(translate(x, g, 0, 1) == down);
    CHECK(translate(x, g, 0, 0) == x);
  }

  TEST_CASE("block DCT is orthonormal") {
    std::mt19937_64 rng(3);
    const GridShape g{16, 8};
    const Vec x = testing::random_vec(rng, 128);
    const Vec c = block_dct8(x, g);
    CHECK(std::abs(c.norm() - x.norm()) < 1e-12);
    CHECK((block_idct8(c, g) - x).cwiseAbs().maxCoeff() < 1e-12);
    CHECK_THROWS_AS(block_dct8(Vec::Zero(36), GridShape{6, 6}), ShapeError);
  }

  TEST_CASE("grid mismatch is a shape error") {
    CHECK_THROWS_AS(horizontal_flip(Vec::Zero(10), GridShape{3, 3}), ShapeError);
  }
}
