#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "zoomsr/gradcheck.hpp"
#include "zoomsr/io.hpp"
#include "zoomsr/rng.hpp"
#include "zoomsr/tensor.hpp"

using namespace zoomsr;

namespace {

std::vector<double> random_vec(std::size_t n, std::uint64_t seed) {
  Rng rng(seed);
  std::vector<double> v(n);
  for (auto& x : v) x = rng.normal();
  return v;
}

// independent nested-loop convolution oracle
std::vector<double> conv_oracle(const std::vector<double>& in, std::size_t ci, std::size_t h,
                                std::size_t w, const std::vector<double>& ker, std::size_t co,
                                std::size_t k, std::size_t stride, std::size_t pad,
                                std::size_t& oh, std::size_t& ow) {
  oh = (h + 2 * pad - k) / stride + 1;
  ow = (w + 2 * pad - k) / stride + 1;
  std::vector<double> out(co * oh * ow, 0.0);
  for (std::size_t oc = 0; oc < co; ++oc)
    for (std::size_t oy = 0; oy < oh; ++oy)
      for (std::size_t ox = 0; ox < ow; ++ox) {
        double acc = 0.0;
        for (std::size_t ic = 0; ic < ci; ++ic)
          for (std::size_t ky = 0; ky < k; ++ky)
            for (std::size_t kx = 0; kx < k; ++kx) {
              const std::ptrdiff_t iy = std::ptrdiff_t(oy * stride + ky) - std::ptrdiff_t(pad);
              const std::ptrdiff_t ix = std::ptrdiff_t(ox * stride + kx) - std::ptrdiff_t(pad);
              if (iy < 0 || iy >= std::ptrdiff_t(h) || ix < 0 || ix >= std::ptrdiff_t(w)) continue;
              acc += in[(ic * h + iy) * w + ix] * ker[((oc * ci + ic) * k + ky) * k + kx];
            }
        out[(oc * oh + oy) * ow + ox] = acc;
      }
  return out;
}

double cubic_a05(double x) {
  x = std::fabs(x);
  if (x < 1.0) return (1.5 * x - 2.5) * x * x + 1.0;
  if (x < 2.0) return -0.5 * (((x - 5.0) * x + 8.0) * x - 4.0);
  return 0.0;
}

// dense resample matrix built independently of the implementation
std::vector<double> bicubic_matrix_oracle(std::size_t in, std::size_t f) {
  const std::size_t out = in / f;
  std::vector<double> m(out * in, 0.0);
  for (std::size_t i = 0; i < out; ++i) {
    const double c = (double(i) + 0.5) * double(f) - 0.5;
    double sum = 0.0;
    for (std::size_t j = 0; j < in; ++j) {
      const double w = cubic_a05((double(j) - c) / double(f));
      m[i * in + j] = w;
      sum += w;
    }
    for (std::size_t j = 0; j < in; ++j) m[i * in + j] /= sum;
  }
  return m;
}

}  // namespace

TEST_CASE("conv2d all-ones 3x3 sums to 9") {
  Tensor in = Tensor::full({1, 1, 3, 3}, 1.0);
  Tensor ker = Tensor::full({1, 1, 3, 3}, 1.0);
  Tensor out = conv2d(in, ker, 1, 0);
  CHECK(out.shape() == Shape{1, 1, 1, 1});
  CHECK(out.value() == doctest::Approx(9.0).epsilon(1e-15));
}

TEST_CASE("conv2d identity kernel with padding reproduces the input") {
  const auto data = random_vec(2 * 5 * 5, 7);
  Tensor in = Tensor::constant({1, 2, 5, 5}, data);
  std::vector<double> ker(2 * 2 * 3 * 3, 0.0);
  ker[(0 * 2 + 0) * 9 + 4] = 1.0;  // center of (oc=0, ic=0)
  ker[(1 * 2 + 1) * 9 + 4] = 1.0;  // center of (oc=1, ic=1)
  Tensor out = conv2d(in, Tensor::constant({2, 2, 3, 3}, ker), 1, 1);
  REQUIRE(out.shape() == Shape{1, 2, 5, 5});
  for (std::size_t i = 0; i < data.size(); ++i) CHECK(out.at(i) == data[i]);
}

TEST_CASE("conv2d matches the nested-loop oracle") {
  const auto in = random_vec(2 * 5 * 5, 11);
  const auto ker = random_vec(3 * 2 * 3 * 3, 13);
  for (std::size_t stride : {1, 2}) {
    for (std::size_t pad : {0, 1}) {
      Tensor out = conv2d(Tensor::constant({1, 2, 5, 5}, in),
                          Tensor::constant({3, 2, 3, 3}, ker), stride, pad);
      std::size_t oh = 0, ow = 0;
      const auto expect = conv_oracle(in, 2, 5, 5, ker, 3, 3, stride, pad, oh, ow);
      REQUIRE(out.shape() == Shape{1, 3, oh, ow});
      for (std::size_t i = 0; i < expect.size(); ++i) {
        CHECK(out.at(i) == doctest::Approx(expect[i]).epsilon(1e-12));
      }
    }
  }
}

TEST_CASE("conv2d shape mismatch names both shapes") {
  Tensor in = Tensor::zeros({1, 2, 5, 5});
  Tensor ker = Tensor::zeros({4, 3, 3, 3});
  try {
    conv2d(in, ker, 1, 0);
    FAIL("expected DimensionError");
  } catch (const DimensionError& e) {
    const std::string msg = e.what();
    CHECK(msg.find("(1x2x5x5)") != std::string::npos);
    CHECK(msg.find("(4x3x3x3)") != std::string::npos);
  }
}

TEST_CASE("relu forward cases") {
  Tensor out = relu(Tensor::constant({3}, {-1.0, 0.0, 2.0}));
  CHECK(out.at(0) == 0.0);
  CHECK(out.at(1) == 0.0);
  CHECK(out.at(2) == 2.0);

  Tape tape;
  Tensor x = tape.leaf({4}, {-1.0, -2.0, -0.5, -3.0});
  Tensor y = sum(relu(x));
  CHECK(y.value() == 0.0);
  tape.backward(y);
  for (double g : x.grad()) CHECK(g == 0.0);
}

TEST_CASE("pixel_shuffle places channels into a 2x2 tile") {
  Tensor in = Tensor::constant({1, 4, 1, 1}, {1.0, 2.0, 3.0, 4.0});
  Tensor out = pixel_shuffle(in, 2);
  REQUIRE(out.shape() == Shape{1, 1, 2, 2});
  CHECK(out.at(0) == 1.0);  // (0,0)
  CHECK(out.at(1) == 2.0);  // (0,1)
  CHECK(out.at(2) == 3.0);  // (1,0)
  CHECK(out.at(3) == 4.0);  // (1,1)
}

TEST_CASE("pixel_shuffle then pixel_unshuffle is the identity") {
  const auto data = random_vec(1 * 8 * 3 * 5, 17);
  Tensor in = Tensor::constant({1, 8, 3, 5}, data);
  Tensor round = pixel_unshuffle(pixel_shuffle(in, 2), 2);
  REQUIRE(round.shape() == in.shape());
  for (std::size_t i = 0; i < data.size(); ++i) CHECK(round.at(i) == data[i]);
  CHECK_THROWS_AS(pixel_shuffle(Tensor::zeros({1, 3, 2, 2}), 2), DimensionError);
}

TEST_CASE("downsample_bicubic preserves constants and factor 1 is identity") {
  Tensor c = Tensor::full({1, 1, 8, 8}, 0.37);
  Tensor down = downsample_bicubic(c, 4);
  REQUIRE(down.shape() == Shape{1, 1, 2, 2});
  for (std::size_t i = 0; i < down.size(); ++i) {
    CHECK(down.at(i) == doctest::Approx(0.37).epsilon(1e-14));
  }
  const auto data = random_vec(2 * 6 * 6, 19);
  Tensor x = Tensor::constant({1, 2, 6, 6}, data);
  Tensor same = downsample_bicubic(x, 1);
  for (std::size_t i = 0; i < data.size(); ++i) {
    CHECK(same.at(i) == doctest::Approx(data[i]).epsilon(1e-14));
  }
  CHECK_THROWS_AS(downsample_bicubic(Tensor::zeros({1, 1, 6, 6}), 4), DimensionError);
}

TEST_CASE("downsample_bicubic ramp matches the dense matrix oracle") {
  const std::size_t h = 16, w = 12, f = 4;
  std::vector<double> ramp(h * w);
  for (std::size_t y = 0; y < h; ++y)
    for (std::size_t x = 0; x < w; ++x) ramp[y * w + x] = 0.3 * double(x) + 0.1 * double(y);
  Tensor out = downsample_bicubic(Tensor::constant({1, 1, h, w}, ramp), f);

  const auto ah = bicubic_matrix_oracle(h, f);
  const auto aw = bicubic_matrix_oracle(w, f);
  const std::size_t oh = h / f, ow = w / f;
  for (std::size_t oy = 0; oy < oh; ++oy) {
    for (std::size_t ox = 0; ox < ow; ++ox) {
      double acc = 0.0;
      for (std::size_t y = 0; y < h; ++y)
        for (std::size_t x = 0; x < w; ++x)
          acc += ah[oy * h + y] * ramp[y * w + x] * aw[ox * w + x];
      CHECK(out.at(oy * ow + ox) == doctest::Approx(acc).epsilon(1e-10));
    }
  }
}

TEST_CASE("backward of x^2 at x=3 gives 6") {
  Tape tape;
  Tensor x = tape.leaf({1}, {3.0});
  Tensor y = mul(x, x);
  tape.backward(y);
  CHECK(x.grad()[0] == doctest::Approx(6.0).epsilon(1e-15));
}

TEST_CASE("backward contract: scalar root, single run per tape") {
  Tape tape;
  Tensor x = tape.leaf({4}, {1.0, 2.0, 3.0, 4.0});
  Tensor y = mul(x, x);
  CHECK_THROWS_AS(tape.backward(y), ContractError);  // non-scalar root
  Tensor s = sum(y);
  tape.backward(s);
  CHECK_THROWS_AS(tape.backward(s), ContractError);  // double backward
  tape.reset();
  tape.backward(s);
  CHECK(x.grad()[1] == doctest::Approx(4.0));
  CHECK(tape.topology_valid());
}

TEST_CASE("backward on a constant root is a contract error") {
  Tensor c = Tensor::scalar(2.0);
  Tape tape;
  CHECK_THROWS_AS(tape.backward(c), ContractError);
  CHECK_THROWS_AS(c.grad(), ContractError);
}

TEST_CASE("mixing tensors from two tapes is rejected") {
  Tape a, b;
  Tensor x = a.leaf({2}, {1.0, 2.0});
  Tensor y = b.leaf({2}, {3.0, 4.0});
  CHECK_THROWS_AS(add(x, y), ContractError);
}

TEST_CASE("forward evaluation is bit-deterministic") {
  const auto in = random_vec(2 * 6 * 6, 23);
  const auto ker = random_vec(4 * 2 * 3 * 3, 29);
  auto run = [&] {
    Tensor out = conv2d(Tensor::constant({1, 2, 6, 6}, in), Tensor::constant({4, 2, 3, 3}, ker),
                        1, 1);
    return out.data();
  };
  const auto a = run();
  const auto b = run();
  CHECK(a == b);
}

TEST_CASE("row_min breaks ties toward the lowest index") {
  Tensor x = Tensor::constant({1, 4}, {2.0, 1.0, 1.0, 3.0});
  Tensor m = row_min(x);
  CHECK(m.at(0) == 1.0);
  CHECK(m.selection()[0] == 1);
}

TEST_CASE("finite checks flag NaN outputs in debug mode") {
  const bool was = finite_checks_enabled();
  set_finite_checks(true);
  CHECK_THROWS_AS(log(Tensor::constant({1}, {-1.0})), NumericError);
  set_finite_checks(was);
}

TEST_CASE("STNT round trip and format errors") {
  const auto path = std::filesystem::temp_directory_path() / "zoomsr_t.stnt";
  const auto data = random_vec(2 * 3 * 4, 31);
  write_stnt(path, Tensor::constant({2, 3, 4}, data));
  Tensor back = read_stnt(path);
  CHECK(back.shape() == Shape{2, 3, 4});
  CHECK(back.data() == data);

  {
    std::ofstream os(path, std::ios::binary);
    os << "NOPE";
  }
  CHECK_THROWS_AS(read_stnt(path), FormatError);

  write_stnt(path, Tensor::constant({2, 3, 4}, data));
  std::filesystem::resize_file(path, 40);  // chop the payload
  CHECK_THROWS_AS(read_stnt(path), FormatError);
  std::filesystem::remove(path);
}

TEST_CASE("gradient sweep across the full op set") {
  const auto results = run_diffcore_checks({.seed = 20240811, .inject_bad_grad = ""});
  for (const auto& r : results) {
    INFO(r.op, " max_rel_err=", r.max_rel_err, " checked=", r.checked);
    CHECK(r.pass);
    CHECK(r.checked > 0);
  }
  CHECK(all_passed(results));
}

TEST_CASE("sum of conv2d gradient matches finite differences") {
  // covered by the sweep as well; kept as the spec's named example
  const auto results = run_diffcore_checks({.seed = 4, .inject_bad_grad = ""});
  bool found = false;
  for (const auto& r : results) {
    if (r.op == "conv2d.input" || r.op == "conv2d.weights") {
      found = true;
      CHECK(r.max_rel_err < 1e-4);
    }
  }
  CHECK(found);
}

TEST_CASE("injected wrong gradient is reported with the op name") {
  const auto results = run_diffcore_checks({.seed = 5, .inject_bad_grad = "matmul.a"});
  bool saw_fail = false;
  for (const auto& r : results) {
    if (r.op == "matmul.a") {
      saw_fail = true;
      CHECK_FALSE(r.pass);
    } else {
      CHECK(r.pass);
    }
  }
  CHECK(saw_fail);
  CHECK_FALSE(all_passed(results));
}
