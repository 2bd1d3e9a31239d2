#pragma once

// The full adjoint verification sweep: every differentiable tensor op and
// every loss term, checked against central finite differences on several
// random instances. Shared by the gradcheck CLI subcommand and the
// acceptance suite.

#include <functional>
#include <string>
#include <vector>

#include "crowdcount/losses.hpp"
#include "crowdcount/rng.hpp"
#include "crowdcount/tensor.hpp"

namespace crowdcount {

struct GradCheckEntry {
  std::string op;
  double worst = 0.0;
};

inline constexpr double kGradCheckThreshold = 1e-4;
inline constexpr int kGradCheckInstances = 5;

namespace detail {

inline Tensor uniform_tensor(std::vector<int> shape, Rng& rng, double lo, double hi,
                             bool requires_grad = true) {
  Tensor t = Tensor::zeros(std::move(shape), requires_grad);
  for (auto& v : t.data()) v = rng.uniform(lo, hi);
  return t;
}

// magnitudes bounded below by 10x the probe step so kinked ops never
// straddle their kink
inline Tensor off_kink_tensor(std::vector<int> shape, Rng& rng, double min_mag = 0.05) {
  Tensor t = Tensor::zeros(std::move(shape), true);
  for (auto& v : t.data()) {
    const double mag = min_mag + (1.0 - min_mag) * rng.uniform();
    v = rng.bernoulli(0.5) ? mag : -mag;
  }
  return t;
}

// distinct well-separated values so pooling argmaxes are stable under probes
inline Tensor shuffled_grid_tensor(std::vector<int> shape, Rng& rng) {
  Tensor t = Tensor::zeros(shape, true);
  const int n = static_cast<int>(t.numel());
  std::vector<int> perm(static_cast<std::size_t>(n));
  for (int i = 0; i < n; ++i) perm[static_cast<std::size_t>(i)] = i;
  for (int i = n - 1; i > 0; --i)
    std::swap(perm[static_cast<std::size_t>(i)],
              perm[static_cast<std::size_t>(rng.uniform_int(0, i))]);
  for (int i = 0; i < n; ++i) t.data()[static_cast<std::size_t>(i)] = 0.05 * perm[i] - 1.0;
  return t;
}

}  // namespace detail

inline std::vector<GradCheckEntry> run_gradient_suite(std::uint64_t seed) {
  std::vector<GradCheckEntry> results;
  auto check = [&](const std::string& op, const std::function<Tensor()>& f, Tensor leaf) {
    const double err = grad_check(f, leaf);
    for (auto& r : results)
      if (r.op == op) {
        r.worst = std::max(r.worst, err);
        return;
      }
    results.push_back({op, err});
  };
  Rng rng(seed);

  for (int i = 0; i < kGradCheckInstances; ++i) {
    // conv2d: rotate through the dilation set used by the front end
    {
      const int dilation = 1 + i % 4;
      Tensor input = detail::uniform_tensor({2, 7, 7}, rng, -1.0, 1.0);
      Tensor weight = detail::uniform_tensor({2, 2, 3, 3}, rng, -1.0, 1.0);
      Tensor bias = detail::uniform_tensor({2}, rng, -1.0, 1.0);
      auto f = [=]() { return sum(conv2d(input, weight, bias, dilation)); };
      check("conv2d/input", f, input);
      check("conv2d/weight", f, weight);
      check("conv2d/bias", f, bias);
    }
    {
      Tensor x = detail::shuffled_grid_tensor({2, 5, 6}, rng);
      check("maxpool2", [=]() { return sum(maxpool2(x)); }, x);
      check("adaptive_max_pool", [=]() { return sum(adaptive_max_pool(x, 3, 4)); }, x);
      check("avg_pool_all", [=]() { return sum(avg_pool_all(x)); }, x);
    }
    {
      Tensor x = detail::off_kink_tensor({9}, rng);
      check("relu", [=]() { return sum(relu(x)); }, x);
      Tensor slope = detail::uniform_tensor({1}, rng, 0.1, 0.5);
      auto f = [=]() { return sum(prelu(x, slope)); };
      check("prelu/input", f, x);
      check("prelu/slope", f, slope);
    }
    {
      Tensor x = detail::uniform_tensor({8}, rng, -2.0, 2.0);
      check("logistic", [=]() { return sum(logistic(x)); }, x);
    }
    {
      Tensor x = detail::uniform_tensor({4}, rng, -1.0, 1.0);
      Tensor w = detail::uniform_tensor({3, 4}, rng, -1.0, 1.0);
      Tensor b = detail::uniform_tensor({3}, rng, -1.0, 1.0);
      auto f = [=]() { return sum(linear(x, w, b)); };
      check("linear/input", f, x);
      check("linear/weight", f, w);
      check("linear/bias", f, b);
    }
    {
      Tensor a = detail::uniform_tensor({2, 3, 4}, rng, -1.0, 1.0);
      Tensor b = detail::uniform_tensor({3, 3, 4}, rng, -1.0, 1.0);
      auto f = [=]() { return sum(concat_channels(a, b)); };
      check("concat_channels", f, a);
      check("concat_channels", f, b);
    }
    {
      Tensor a = detail::uniform_tensor({3, 4, 4}, rng, -1.0, 1.0);
      Tensor b = detail::uniform_tensor({3, 4, 4}, rng, -1.0, 1.0);
      auto f = [=]() { return sum(mul_elementwise(a, b)); };
      check("mul_elementwise", f, a);
      check("mul_elementwise", f, b);
      Tensor m = detail::uniform_tensor({1, 4, 4}, rng, -1.0, 1.0);
      auto fb = [=]() { return sum(mul_elementwise(a, m)); };
      check("mul_elementwise/broadcast", fb, m);
    }
    {
      Tensor x = detail::uniform_tensor({3, 4, 4}, rng, -1.0, 1.0);
      Tensor factors = detail::uniform_tensor({3}, rng, -2.0, 2.0);
      auto f = [=]() { return sum(scale_channels(x, factors)); };
      check("scale_channels/input", f, x);
      check("scale_channels/factors", f, factors);
    }
    {
      Tensor m = detail::uniform_tensor({4, 5}, rng, -1.0, 1.0);
      const int row = i % 4;
      check("select_row", [=]() { return sum(select_row(m, row)); }, m);
    }
    {
      Tensor a = detail::uniform_tensor({6}, rng, -1.0, 1.0);
      Tensor b = detail::uniform_tensor({6}, rng, -1.0, 1.0);
      check("add", [=]() { return sum(add(a, b)); }, a);
      check("scale", [=]() { return sum(scale(a, -1.7)); }, a);
      check("sum", [=]() { return sum(a); }, a);
    }
    {
      Tensor logits = detail::uniform_tensor({5}, rng, -2.0, 2.0);
      const int target = i % 5;
      check("loss_cross_entropy", [=]() { return loss_cross_entropy(logits, target); },
            logits);
    }
    {
      ConfidenceMask mask;
      mask.h = 3;
      mask.w = 4;
      mask.values.resize(12);
      for (auto& v : mask.values) v = rng.bernoulli(0.4) ? 1.0 : 0.0;
      Tensor conf = detail::uniform_tensor({1, 3, 4}, rng, 0.05, 0.95);
      check("loss_weighted_bce", [=]() { return loss_weighted_bce(conf, mask); }, conf);
    }
    {
      DensityMap target;
      target.h = 3;
      target.w = 4;
      target.values.resize(12);
      for (auto& v : target.values) v = rng.uniform();
      Tensor pred = detail::uniform_tensor({1, 3, 4}, rng, 0.0, 1.0);
      check("loss_euclidean", [=]() { return loss_euclidean(pred, target); }, pred);
    }
  }
  return results;
}

}  // namespace crowdcount
