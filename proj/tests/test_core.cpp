#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <set>

#include "voxstreams/image.hpp"
#include "voxstreams/png.hpp"
#include "voxstreams/rng.hpp"
#include "voxstreams/serialize.hpp"
#include "voxstreams/tensor.hpp"

using namespace voxstreams;

TEST_CASE("rng: determinism and stream separation") {
  Rng a(42), b(42), c(43);
  for (int i = 0; i < 100; ++i) {
    const auto va = a.next();
    CHECK(va == b.next());
  }
  bool any_diff = false;
  Rng a2(42);
  for (int i = 0; i < 100; ++i) any_diff = any_diff || (a2.next() != c.next());
  CHECK(any_diff);

  CHECK(derive_seed(7, "alpha") != derive_seed(7, "beta"));
  CHECK(derive_seed(7, "alpha", 0) != derive_seed(7, "alpha", 1));
  CHECK(derive_seed(7, "alpha") == derive_seed(7, "alpha"));
}

TEST_CASE("rng: bounded integers stay in range and cover values") {
  Rng rng(5);
  std::set<std::uint64_t> seen;
  for (int i = 0; i < 2000; ++i) {
    const auto v = rng.uniform_int(7);
    CHECK(v < 7);
    seen.insert(v);
  }
  CHECK(seen.size() == 7);
}

TEST_CASE("rng: normal moments") {
  Rng rng(11);
  double sum = 0.0, sq = 0.0;
  const int n = 200000;
  for (int i = 0; i < n; ++i) {
    const double v = rng.normal();
    sum += v;
    sq += v * v;
  }
  const double mean = sum / n;
  const double var = sq / n - mean * mean;
  CHECK(std::abs(mean) < 0.01);
  CHECK(std::abs(var - 1.0) < 0.02);
}

TEST_CASE("rng: sample_without_replacement yields k distinct in-range indices") {
  Rng rng(9);
  const auto picked = rng.sample_without_replacement(50, 20);
  CHECK(picked.size() == 20);
  std::set<std::size_t> uniq(picked.begin(), picked.end());
  CHECK(uniq.size() == 20);
  for (auto i : picked) CHECK(i < 50);
  Rng rng2(9);
  CHECK(picked == rng2.sample_without_replacement(50, 20));
}

TEST_CASE("tensor: matmul family against a direct triple-loop oracle") {
  Rng rng(3);
  const Tensor a = Tensor::gaussian({5, 7}, rng);
  const Tensor b = Tensor::gaussian({7, 4}, rng);
  const Tensor c = matmul(a, b);
  for (std::int64_t i = 0; i < 5; ++i) {
    for (std::int64_t j = 0; j < 4; ++j) {
      double acc = 0.0;
      for (std::int64_t k = 0; k < 7; ++k) acc += a.at2(i, k) * b.at2(k, j);
      CHECK(c.at2(i, j) == doctest::Approx(acc).epsilon(1e-12));
    }
  }

  const Tensor bt = Tensor::gaussian({4, 7}, rng);
  const Tensor cbt = matmul_bt(a, bt);
  for (std::int64_t i = 0; i < 5; ++i) {
    for (std::int64_t j = 0; j < 4; ++j) {
      double acc = 0.0;
      for (std::int64_t k = 0; k < 7; ++k) acc += a.at2(i, k) * bt.at2(j, k);
      CHECK(cbt.at2(i, j) == doctest::Approx(acc).epsilon(1e-12));
    }
  }

  const Tensor at = Tensor::gaussian({7, 5}, rng);
  const Tensor cat = matmul_at(at, b);
  for (std::int64_t i = 0; i < 5; ++i) {
    for (std::int64_t j = 0; j < 4; ++j) {
      double acc = 0.0;
      for (std::int64_t k = 0; k < 7; ++k) acc += at.at2(k, i) * b.at2(k, j);
      CHECK(cat.at2(i, j) == doctest::Approx(acc).epsilon(1e-12));
    }
  }
}

TEST_CASE("tensor: reshape checks element count") {
  Tensor t({2, 3});
  CHECK_NOTHROW(t.reshaped({6}));
  CHECK_THROWS_AS(t.reshaped({5}), ValidationError);
}

// Independent bilinear oracle: recompute each output pixel from first
// principles (align_corners = false sampling).
static double bilinear_oracle(const Tensor& src, std::int64_t oh, std::int64_t ow, std::int64_t y,
                              std::int64_t x, std::int64_t c) {
  const double sy = static_cast<double>(src.shape[0]) / static_cast<double>(oh);
  const double sx = static_cast<double>(src.shape[1]) / static_cast<double>(ow);
  auto sample_pos = [](std::int64_t d, double scale, std::int64_t limit) {
    double p = (static_cast<double>(d) + 0.5) * scale - 0.5;
    if (p < 0) p = 0;
    if (p > static_cast<double>(limit - 1)) p = static_cast<double>(limit - 1);
    return p;
  };
  const double py = sample_pos(y, sy, src.shape[0]);
  const double px = sample_pos(x, sx, src.shape[1]);
  const auto y0 = static_cast<std::int64_t>(std::floor(py));
  const auto x0 = static_cast<std::int64_t>(std::floor(px));
  const std::int64_t y1 = std::min(y0 + 1, src.shape[0] - 1);
  const std::int64_t x1 = std::min(x0 + 1, src.shape[1] - 1);
  const double fy = py - y0, fx = px - x0;
  return src.at3(y0, x0, c) * (1 - fy) * (1 - fx) + src.at3(y0, x1, c) * (1 - fy) * fx +
         src.at3(y1, x0, c) * fy * (1 - fx) + src.at3(y1, x1, c) * fy * fx;
}

TEST_CASE("image: bilinear resize matches independent per-pixel oracle") {
  Rng rng(21);
  Tensor src({100, 80, 3});
  for (auto& v : src.data) v = rng.uniform();
  const Tensor up = img::resize_bilinear(src, 512, 512);
  Rng pick(22);
  for (int trial = 0; trial < 200; ++trial) {
    const auto y = static_cast<std::int64_t>(pick.uniform_int(512));
    const auto x = static_cast<std::int64_t>(pick.uniform_int(512));
    const auto c = static_cast<std::int64_t>(pick.uniform_int(3));
    CHECK(up.at3(y, x, c) == doctest::Approx(bilinear_oracle(src, 512, 512, y, x, c)).epsilon(1e-5));
  }
  const Tensor down = img::resize_bilinear(src, 37, 53);
  for (int trial = 0; trial < 200; ++trial) {
    const auto y = static_cast<std::int64_t>(pick.uniform_int(37));
    const auto x = static_cast<std::int64_t>(pick.uniform_int(53));
    const auto c = static_cast<std::int64_t>(pick.uniform_int(3));
    CHECK(down.at3(y, x, c) ==
          doctest::Approx(bilinear_oracle(src, 37, 53, y, x, c)).epsilon(1e-5));
  }
}

TEST_CASE("image: resize is identity at equal size and preserves constants") {
  Tensor src = img::make(16, 16, 0.37);
  const Tensor same = img::resize_bilinear(src, 16, 16);
  CHECK(max_abs_diff(src, same) == 0.0);
  const Tensor big = img::resize_bilinear(src, 64, 48);
  for (double v : big.data) CHECK(v == doctest::Approx(0.37).epsilon(1e-12));
}

TEST_CASE("image: resize adjoint satisfies the adjoint identity") {
  Rng rng(31);
  Tensor v({13, 9, 3});
  for (auto& x : v.data) x = rng.normal();
  Tensor u({29, 21, 3});
  for (auto& x : u.data) x = rng.normal();
  const Tensor rv = img::resize_bilinear(v, 29, 21);
  const Tensor rtu = img::resize_bilinear_adjoint(u, 13, 9);
  CHECK(dot(u, rv) == doctest::Approx(dot(rtu, v)).epsilon(1e-10));
}

TEST_CASE("png: 8-bit round trip is exact") {
  Rng rng(17);
  Tensor image({23, 31, 3});
  for (auto& v : image.data) {
    v = static_cast<double>(static_cast<int>(rng.uniform_int(256))) / 255.0;
  }
  const auto bytes = png::encode(image);
  const Tensor back = png::decode(bytes);
  REQUIRE(back.shape == image.shape);
  CHECK(max_abs_diff(back, image) == 0.0);
}

TEST_CASE("png: decode rejects garbage and truncation") {
  CHECK_THROWS_AS(png::decode({1, 2, 3}), RuntimeError);
  Tensor image = img::make(8, 8, 0.5);
  auto bytes = png::encode(image);
  bytes.resize(bytes.size() / 2);
  CHECK_THROWS_AS(png::decode(bytes), RuntimeError);
}

TEST_CASE("png: file io") {
  const auto dir = std::filesystem::temp_directory_path() / "vxs_png_test";
  std::filesystem::create_directories(dir);
  Tensor image = img::make(9, 7, 0.0);
  for (std::size_t i = 0; i < image.data.size(); ++i) {
    image.data[i] = static_cast<double>((i * 13) % 256) / 255.0;
  }
  png::write_file(dir / "x.png", image);
  const Tensor back = png::read_file(dir / "x.png");
  CHECK(max_abs_diff(back, image) == 0.0);
  std::filesystem::remove_all(dir);
}

TEST_CASE("serialize: checkpoint container round trip") {
  serialize::Checkpoint ckpt;
  ckpt.meta = {{"kind", "unit"}, {"seed", 7}, {"step", 3}};
  Rng rng(8);
  Tensor w = Tensor::gaussian({3, 4}, rng);
  serialize::round_to_f32(w);
  Tensor b = Tensor::gaussian({4}, rng);
  serialize::round_to_f32(b);
  ckpt.tensors.emplace_back("w", w);
  ckpt.tensors.emplace_back("b", b);

  const auto bytes = serialize::checkpoint_to_bytes(ckpt);
  const auto back = serialize::checkpoint_from_bytes(bytes);
  CHECK(back.meta == ckpt.meta);
  REQUIRE(back.tensors.size() == 2);
  CHECK(back.tensors[0].first == "w");
  CHECK(back.tensor("w").data == w.data);
  CHECK(back.tensor("b").data == b.data);
  CHECK_THROWS_AS(back.tensor("missing"), RuntimeError);
}

TEST_CASE("serialize: corrupt checkpoints are rejected cleanly") {
  serialize::Checkpoint ckpt;
  ckpt.meta = {{"seed", 1}};
  ckpt.tensors.emplace_back("t", Tensor::full({4}, 1.5));
  auto bytes = serialize::checkpoint_to_bytes(ckpt);
  CHECK_THROWS_AS(serialize::checkpoint_from_bytes(bytes.substr(0, bytes.size() - 3)),
                  RuntimeError);
  auto bad_magic = bytes;
  bad_magic[0] = 'X';
  CHECK_THROWS_AS(serialize::checkpoint_from_bytes(bad_magic), RuntimeError);
}

TEST_CASE("serialize: atomic write leaves no temp file") {
  const auto dir = std::filesystem::temp_directory_path() / "vxs_atomic_test";
  std::filesystem::create_directories(dir);
  serialize::atomic_write(dir / "f.bin", "payload");
  CHECK(serialize::read_all(dir / "f.bin") == "payload");
  CHECK_FALSE(std::filesystem::exists(dir / "f.bin.tmp"));
  std::filesystem::remove_all(dir);
}

TEST_CASE("serialize: f32 file round trip") {
  const auto dir = std::filesystem::temp_directory_path() / "vxs_f32_test";
  std::filesystem::create_directories(dir);
  std::vector<float> values = {1.5f, -2.25f, 0.0f, 3e7f};
  serialize::write_f32_file(dir / "a.f32", values);
  CHECK(serialize::read_f32_file(dir / "a.f32") == values);
  std::filesystem::remove_all(dir);
}
