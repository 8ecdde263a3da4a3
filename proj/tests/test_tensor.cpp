#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "sgt/rng.hpp"
#include "sgt/tensor.hpp"
#include "sgt/util.hpp"
#include "testutil.hpp"

using namespace sgt;
using testutil::op_gradcheck;
using testutil::random_tensor;

namespace {

// Scalar readout for gradchecking non-scalar op outputs: sum(out * W) with a
// fixed weight tensor so the objective is sensitive to every element.
Tensor readout(const Tensor& out, const Tensor& w) {
  return sum_all(mul(out, w));
}

}  // namespace

TEST_CASE("matmul identity and hand case") {
  Tensor eye({2, 2}, {1, 0, 0, 1});
  Tensor a({2, 2}, {3, -1, 2, 5});
  Tensor r = matmul(eye, a);
  CHECK(r.vec() == a.vec());

  Tensor b({2, 2}, {1, 2, 3, 4});
  Tensor v({2, 1}, {0, 1});
  Tensor p = matmul(b, v);
  CHECK(p.at({0, 0}) == doctest::Approx(2));
  CHECK(p.at({1, 0}) == doctest::Approx(4));
}

TEST_CASE("matmul shape mismatch names both shapes") {
  Tensor a = Tensor::zeros({2, 3});
  Tensor b = Tensor::zeros({4, 2});
  CHECK_THROWS_WITH_AS(matmul(a, b),
                       doctest::Contains("[2x3]"), DimensionError);
}

TEST_CASE("matmul gradcheck 5x7 by 7x3") {
  Rng rng(101);
  Tensor a = random_tensor({5, 7}, rng);
  Tensor b = random_tensor({7, 3}, rng);
  Tensor w = random_tensor({5, 3}, rng);
  auto rep = op_gradcheck({a, b}, [&](const std::vector<Tensor>& in) {
    return readout(matmul(in[0], in[1]), w);
  });
  CHECK(rep.max_rel < 1e-6);
}

TEST_CASE("matmul associativity on random conformable triples") {
  for (uint64_t seed = 0; seed < 5; ++seed) {
    Rng rng(300 + seed);
    int m = 2 + int(rng.below(4)), k = 2 + int(rng.below(4));
    int n = 2 + int(rng.below(4)), q = 2 + int(rng.below(4));
    Tensor a = random_tensor({m, k}, rng);
    Tensor b = random_tensor({k, n}, rng);
    Tensor c = random_tensor({n, q}, rng);
    Tensor l = matmul(matmul(a, b), c);
    Tensor r = matmul(a, matmul(b, c));
    for (int64_t i = 0; i < l.size(); ++i) {
      CHECK(std::fabs(l.vec()[size_t(i)] - r.vec()[size_t(i)]) < 1e-9);
    }
  }
}

TEST_CASE("softmax_clamped symmetric input") {
  Tensor x({3}, {0, 0, 0});
  Tensor y = softmax_clamped(x, 0, -5, 5);
  for (double v : y.vec()) CHECK(v == doctest::Approx(1.0 / 3).epsilon(1e-12));
}

TEST_CASE("softmax_clamped clamps pre-exponent logits") {
  Tensor x({2}, {100, 0});
  Tensor y = softmax_clamped(x, 0, -5, 5);
  double e5 = std::exp(5.0);
  CHECK(y.vec()[0] == doctest::Approx(e5 / (e5 + 1)).epsilon(1e-12));
  CHECK(y.vec()[1] == doctest::Approx(1 / (e5 + 1)).epsilon(1e-12));
}

TEST_CASE("softmax rows sum to one on random tensors and axes") {
  for (uint64_t seed = 0; seed < 10; ++seed) {
    Rng rng(42 + seed);
    Tensor x = random_tensor({3, 4, 5}, rng, 3.0);
    int axis = int(rng.below(3));
    Tensor y = softmax_clamped(x, axis, -5, 5);
    // sum along the softmax axis must be 1 everywhere
    Tensor s = sum_axis(y, axis);
    for (double v : s.vec()) CHECK(std::fabs(v - 1.0) < 1e-12);
  }
}

TEST_CASE("softmax shift invariance away from clamp boundaries") {
  Rng rng(7);
  Tensor x = random_tensor({4}, rng, 0.5);  // well inside [-5,5]
  Tensor y0 = softmax_clamped(x, 0, -5, 5);
  Tensor shifted = add(x, Tensor::full({4}, 0.75));
  Tensor y1 = softmax_clamped(shifted, 0, -5, 5);
  for (size_t i = 0; i < 4; ++i) {
    CHECK(y0.vec()[i] == doctest::Approx(y1.vec()[i]).epsilon(1e-12));
  }
}

TEST_CASE("softmax_clamped gradcheck away from boundaries") {
  Rng rng(55);
  Tensor x = random_tensor({4, 6}, rng, 1.0);
  Tensor w = random_tensor({4, 6}, rng);
  auto rep = op_gradcheck({x}, [&](const std::vector<Tensor>& in) {
    return readout(softmax_clamped(in[0], 1, -5, 5), w);
  });
  CHECK(rep.max_rel < 1e-6);
}

TEST_CASE("layer_norm constant row maps to bias") {
  Tensor x({2, 4}, {3, 3, 3, 3, -1, -1, -1, -1});
  Tensor g = Tensor::full({4}, 1.0);
  Tensor b = Tensor::zeros({4});
  Tensor y = layer_norm(x, g, b, 1e-5);
  for (double v : y.vec()) CHECK(std::fabs(v) < 1e-9);
}

TEST_CASE("layer_norm two point normalization") {
  Tensor x({1, 2}, {1, 3});
  Tensor y = layer_norm(x, Tensor::full({2}, 1.0), Tensor::zeros({2}), 1e-12);
  CHECK(y.vec()[0] == doctest::Approx(-1).epsilon(1e-5));
  CHECK(y.vec()[1] == doctest::Approx(1).epsilon(1e-5));
}

TEST_CASE("layer_norm gradcheck") {
  Rng rng(66);
  Tensor x = random_tensor({3, 8}, rng);
  Tensor g = random_tensor({8}, rng);
  Tensor b = random_tensor({8}, rng);
  Tensor w = random_tensor({3, 8}, rng);
  auto rep = op_gradcheck({x, g, b}, [&](const std::vector<Tensor>& in) {
    return readout(layer_norm(in[0], in[1], in[2], 1e-5), w);
  });
  CHECK(rep.max_rel < 1e-5);
}

TEST_CASE("elementwise examples") {
  Tensor a({2}, {1, 2});
  Tensor b({1}, {3});
  Tensor c = concat({a, b}, 0);
  CHECK(c.vec() == std::vector<double>{1, 2, 3});

  Tensor ones = Tensor::full({2, 3}, 1.0);
  Tensor s = sum_axis(ones, 1);
  CHECK(s.vec() == std::vector<double>{3, 3});

  CHECK_THROWS_AS(add(Tensor::zeros({2}), Tensor::zeros({3})), DimensionError);
}

TEST_CASE("mul backward is the other operand") {
  for (uint64_t seed = 0; seed < 10; ++seed) {
    Rng rng(900 + seed);
    Tensor a = random_tensor({3, 4}, rng);
    Tensor b = random_tensor({3, 4}, rng);
    Tape tape;
    Tensor la = tape.leaf(a);
    Tensor lb = tape.leaf(b);
    Tensor loss = sum_all(mul(la, lb));
    tape.backward(loss);
    Tensor ga = tape.grad(la);
    for (int64_t i = 0; i < a.size(); ++i) {
      CHECK(testutil::rel_err(ga.vec()[size_t(i)], b.vec()[size_t(i)]) < 1e-12);
    }
  }
}

TEST_CASE("backward simple chain and accumulation") {
  {
    Tape tape;
    Tensor x = tape.leaf(Tensor::scalar(3.0));
    Tensor y = mul(x, x);
    tape.backward(y);
    CHECK(tape.grad(x).item() == doctest::Approx(6.0));
  }
  {
    Tape tape;
    Tensor x = tape.leaf(Tensor::scalar(5.0));
    Tensor y = add(x, x);
    tape.backward(y);
    CHECK(tape.grad(x).item() == doctest::Approx(2.0));
  }
}

TEST_CASE("backward rejects non-scalar root") {
  Tape tape;
  Tensor x = tape.leaf(Tensor::zeros({3}));
  Tensor y = relu(x);
  CHECK_THROWS_AS(tape.backward(y), ContractError);
}

TEST_CASE("ops mixing two tapes are rejected") {
  Tape t1, t2;
  Tensor a = t1.leaf(Tensor::zeros({2}));
  Tensor b = t2.leaf(Tensor::zeros({2}));
  CHECK_THROWS_AS(add(a, b), ContractError);
}

TEST_CASE("per-op finite difference suite, 10 seeds") {
  // every differentiable op vs central differences (h=1e-5), rel err < 1e-5
  for (uint64_t seed = 0; seed < 10; ++seed) {
    Rng rng(1000 + seed);
    Tensor x = random_tensor({3, 6}, rng);
    Tensor x2 = random_tensor({3, 6}, rng);
    Tensor w36 = random_tensor({3, 6}, rng);

    auto check = [&](auto build) {
      auto rep = op_gradcheck({x, x2}, build);
      CHECK(rep.max_rel < 1e-5);
    };

    check([&](const std::vector<Tensor>& in) {
      return readout(add(in[0], in[1]), w36);
    });
    check([&](const std::vector<Tensor>& in) {
      return readout(sub(in[0], in[1]), w36);
    });
    check([&](const std::vector<Tensor>& in) {
      return readout(scale(in[0], -1.7), w36);
    });
    check([&](const std::vector<Tensor>& in) {
      return readout(relu(in[0]), w36);
    });
    check([&](const std::vector<Tensor>& in) {
      return readout(exp(scale(in[0], 0.3)), w36);
    });
    check([&](const std::vector<Tensor>& in) {
      // keep the argument positive for log
      return readout(log(add(mul(in[0], in[0]), Tensor::full({3, 6}, 0.5))), w36);
    });
    check([&](const std::vector<Tensor>& in) {
      return readout(pow_const(add(mul(in[0], in[0]), Tensor::full({3, 6}, 0.1)), 1.7), w36);
    });
    check([&](const std::vector<Tensor>& in) {
      return readout(softmax(in[0], 1), w36);
    });

    // shape-moving ops
    Tensor w63 = random_tensor({6, 3}, rng);
    {
      auto rep = op_gradcheck({x}, [&](const std::vector<Tensor>& in) {
        return readout(transpose2(in[0]), w63);
      });
      CHECK(rep.max_rel < 1e-5);
    }
    Tensor w181 = random_tensor({18}, rng);
    {
      auto rep = op_gradcheck({x}, [&](const std::vector<Tensor>& in) {
        return readout(reshape(in[0], {18}), w181);
      });
      CHECK(rep.max_rel < 1e-5);
    }
    Tensor w312 = random_tensor({3, 12}, rng);
    {
      auto rep = op_gradcheck({x, x2}, [&](const std::vector<Tensor>& in) {
        return readout(concat({in[0], in[1]}, -1), w312);
      });
      CHECK(rep.max_rel < 1e-5);
    }
    Tensor w32 = random_tensor({3, 2}, rng);
    {
      auto rep = op_gradcheck({x}, [&](const std::vector<Tensor>& in) {
        return readout(slice_last(in[0], 2, 2), w32);
      });
      CHECK(rep.max_rel < 1e-5);
    }
    Tensor w46 = random_tensor({4, 6}, rng);
    {
      auto rep = op_gradcheck({x}, [&](const std::vector<Tensor>& in) {
        return readout(take_rows(in[0], {2, 0, 2, 1}), w46);
      });
      CHECK(rep.max_rel < 1e-5);
    }
    Tensor w3 = random_tensor({3}, rng);
    {
      auto rep = op_gradcheck({x}, [&](const std::vector<Tensor>& in) {
        return readout(gather_rows(in[0], {5, 0, 3}), w3);
      });
      CHECK(rep.max_rel < 1e-5);
    }
    Tensor w436 = random_tensor({4, 3, 6}, rng);
    {
      auto rep = op_gradcheck({x}, [&](const std::vector<Tensor>& in) {
        return readout(expand_front(in[0], 4), w436);
      });
      CHECK(rep.max_rel < 1e-5);
    }
    Tensor w362 = random_tensor({3, 6, 2}, rng);
    {
      auto rep = op_gradcheck({x}, [&](const std::vector<Tensor>& in) {
        return readout(expand_last(in[0], 2), w362);
      });
      CHECK(rep.max_rel < 1e-5);
    }
    Tensor w6 = random_tensor({6}, rng);
    {
      auto rep = op_gradcheck({x}, [&](const std::vector<Tensor>& in) {
        return readout(sum_axis(in[0], 0), w6);
      });
      CHECK(rep.max_rel < 1e-5);
    }
    {
      auto rep = op_gradcheck({x}, [&](const std::vector<Tensor>& in) {
        return mean_all(mul(in[0], in[0]));
      });
      CHECK(rep.max_rel < 1e-5);
    }
    Tensor b6 = random_tensor({6}, rng);
    {
      auto rep = op_gradcheck({x, b6}, [&](const std::vector<Tensor>& in) {
        return readout(add_bias(in[0], in[1]), w36);
      });
      CHECK(rep.max_rel < 1e-5);
    }
  }
}

TEST_CASE("constants do not receive gradients") {
  Tape tape;
  Tensor frozen = Tensor::full({2, 2}, 2.0);  // never registered as a leaf
  Tensor x = tape.leaf(Tensor::full({2, 2}, 3.0));
  Tensor y = sum_all(mul(x, frozen));
  tape.backward(y);
  CHECK_FALSE(frozen.on_tape());
  CHECK(tape.grad(x).vec() == std::vector<double>{2, 2, 2, 2});
}

TEST_CASE("debug mode flags non-finite results with op name") {
  set_debug_checks(true);
  Tensor x({2}, {-1.0, 2.0});
  CHECK_THROWS_WITH_AS(log(x), doctest::Contains("log"), NumericFault);
  set_debug_checks(false);
  CHECK_NOTHROW(log(x));  // quiet outside debug mode
}

TEST_CASE("scoped op context appears in numeric faults") {
  set_debug_checks(true);
  Tensor x({1}, {-1.0});
  {
    OpContext ctx("gel.attention");
    CHECK_THROWS_WITH_AS(log(x), doctest::Contains("gel.attention"),
                         NumericFault);
  }
  set_debug_checks(false);
}

TEST_CASE("tape leaf gradients match value shapes") {
  Rng rng(3);
  Tape tape;
  Tensor a = tape.leaf(random_tensor({4, 5}, rng));
  Tensor b = tape.leaf(random_tensor({5, 2}, rng));
  Tensor loss = sum_all(matmul(a, b));
  tape.backward(loss);
  CHECK(tape.grad(a).shape() == Shape{4, 5});
  CHECK(tape.grad(b).shape() == Shape{5, 2});
  // unreachable leaf gets zeros of its own shape
  Tensor c = tape.leaf(random_tensor({7}, rng));
  Tensor gc = tape.grad(c);
  CHECK(gc.shape() == Shape{7});
  for (double v : gc.vec()) CHECK(v == 0.0);
}
