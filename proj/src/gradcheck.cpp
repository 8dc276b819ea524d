#include "dsmr/gradcheck.hpp"

#include <algorithm>
#include <cmath>
#include <optional>

#include "dsmr/errors.hpp"
#include "dsmr/loss.hpp"
#include "dsmr/model.hpp"
#include "dsmr/random.hpp"

namespace dsmr {
namespace {

constexpr double kKinkMargin = 1e-3;

/// Uniform values in [lo, hi) kept at least kKinkMargin away from zero.
Tensor<double> random_tensor(CounterRng& rng, Shape shape, double lo = -1.0, double hi = 1.0) {
  Tensor<double> t(std::move(shape));
  for (auto& v : t.data()) {
    do v = rng.uniform(lo, hi);
    while (std::abs(v) < kKinkMargin);
  }
  t.set_requires_grad(true);
  return t;
}

/// Distinct values spaced well apart, in random order, so pooling windows never tie.
Tensor<double> spread_tensor(CounterRng& rng, Shape shape) {
  Tensor<double> t(std::move(shape));
  const std::size_t n = t.size();
  std::vector<std::size_t> perm(n);
  for (std::size_t i = 0; i < n; ++i) perm[i] = i;
  for (std::size_t i = n; i > 1; --i) std::swap(perm[i - 1], perm[rng.below(i)]);
  for (std::size_t i = 0; i < n; ++i) t[i] = -1.0 + 2.0 * (double(perm[i]) + 0.5) / double(n);
  t.set_requires_grad(true);
  return t;
}

/// Large random-signed offsets: l1_norm(y + C) is then a fixed signed sum of y.
Tensor<double> projection(CounterRng& rng, const Shape& shape) {
  Tensor<double> c(shape);
  for (auto& v : c.data()) v = (rng.uniform() < 0.5 ? -1.0 : 1.0) * rng.uniform(5.0, 10.0);
  return c;
}

Tensor<double> project(Graph<double>& g, const Tensor<double>& y, const Tensor<double>& c) {
  return ops::l1_norm(g, ops::add(g, y, c));
}

ExtractorConfig small_extractor(std::uint64_t seed) {
  ExtractorConfig cfg;
  cfg.widths = {8, 16, 32, 32, 32};
  cfg.seed = seed;
  return cfg;
}

}  // namespace

Tensor<double> corrupted_conv2d(Graph<double>& g, const Tensor<double>& input,
                                const Tensor<double>& kernel, const Tensor<double>& bias,
                                Padding pad) {
  auto inner = Graph<double>::inference();
  Tensor<double> out = ops::conv2d(inner, input, kernel, bias, pad);
  if (!g.wants_grad({&input, &kernel, &bias})) return out;
  g.record("conv2d_corrupted", out, [input = input, kernel = kernel, bias = bias, out, pad]() mutable {
    const std::size_t n = input.dim(0), ci = input.dim(1), h = input.dim(2), w = input.dim(3);
    const std::size_t co = kernel.dim(0), kh = kernel.dim(2), kw = kernel.dim(3);
    auto dy = out.grad();
    auto dk = kernel.grad();
    auto db = bias.grad();
    auto dx = input.grad();
    for (std::size_t b = 0; b < n; ++b)
      for (std::size_t o = 0; o < co; ++o)
        for (std::size_t i = 0; i < h; ++i)
          for (std::size_t j = 0; j < w; ++j) {
            const double gy = dy[((b * co + o) * h + i) * w + j];
            db[o] += gy;
            for (std::size_t c = 0; c < ci; ++c)
              for (std::size_t u = 0; u < kh; ++u)
                for (std::size_t v = 0; v < kw; ++v) {
                  const long r = long(i + u) - long(pad.top), s = long(j + v) - long(pad.left);
                  if (r < 0 || s < 0 || r >= long(h) || s >= long(w)) continue;
                  const std::size_t xi = ((b * ci + c) * h + std::size_t(r)) * w + std::size_t(s);
                  const std::size_t ki = ((o * ci + c) * kh + u) * kw + v;
                  // The 3% error on the kernel gradient is the planted fault.
                  dk[ki] += 1.03 * gy * input[xi];
                  dx[xi] += gy * kernel[ki];
                }
          }
  });
  return out;
}

GradcheckResult check_gradients(const std::string& name, Probe& probe,
                                const GradcheckOptions& options) {
  GradcheckResult res;
  res.op = name;
  for (auto& leaf : probe.leaves) {
    leaf.set_requires_grad(true);
    leaf.zero_grad();
  }
  Graph<double> g;
  g.set_track_branches(true);
  auto loss = probe.loss(g);
  const auto sig0 = g.branch_signature();
  g.backward(loss);

  const auto eval = [&](std::uint64_t& sig) {
    auto ge = Graph<double>::inference();
    ge.set_track_branches(true);
    const double v = probe.loss(ge).item();
    sig = ge.branch_signature();
    return v;
  };
  // Roundoff in a central difference grows like eps * |f| / h, so the floor
  // scales with the size of the loss value.
  const double floor = options.floor * std::max(1.0, std::abs(loss.item()));
  for (auto& leaf : probe.leaves) {
    const std::vector<double> analytic(leaf.grad().begin(), leaf.grad().end());
    for (std::size_t j = 0; j < leaf.size(); ++j) {
      const double v = leaf[j];
      // A step that crosses a kink is retried at smaller steps before the
      // entry is given up as skipped.
      std::optional<double> numeric;
      for (double h = options.step; h >= options.step * 1e-2 && !numeric; h *= 0.1) {
        std::uint64_t sp, sm;
        leaf[j] = v + h;
        const double fp = eval(sp);
        leaf[j] = v - h;
        const double fm = eval(sm);
        leaf[j] = v;
        if (sp == sig0 && sm == sig0) numeric = (fp - fm) / (2.0 * h);
      }
      if (!numeric) {
        ++res.skipped;
        continue;
      }
      const double a = analytic[j];
      const double denom = std::max({std::abs(a), std::abs(*numeric), floor});
      res.max_rel_error = std::max(res.max_rel_error, std::abs(a - *numeric) / denom);
      ++res.checked;
    }
  }
  res.passed = res.checked > 0 && res.max_rel_error < options.tolerance;
  return res;
}

std::vector<GradcheckEntry> gradcheck_registry() {
  using Opt = GradcheckOptions;
  std::vector<GradcheckEntry> reg;

  reg.push_back({"conv2d", [](std::uint64_t seed, const Opt& opt) {
                   CounterRng rng(seed);
                   auto x = random_tensor(rng, {2, 3, 6, 7});
                   auto k4 = random_tensor(rng, {4, 3, 4, 4});
                   auto b4 = random_tensor(rng, {4});
                   auto k3 = random_tensor(rng, {2, 4, 3, 3});
                   auto b3 = random_tensor(rng, {2});
                   auto c = projection(rng, {2, 2, 6, 7});
                   const bool bad = opt.corrupt_conv;
                   return Probe{{x, k4, b4, k3, b3}, [=](Graph<double>& g) {
                                  const auto conv = bad ? corrupted_conv2d : ops::conv2d<double>;
                                  auto y = conv(g, x, k4, b4, Padding::same4());
                                  return project(g, conv(g, y, k3, b3, Padding::same3()), c);
                                }};
                 }});
  reg.push_back({"maxpool2", [](std::uint64_t seed, const Opt&) {
                   CounterRng rng(seed);
                   auto x = spread_tensor(rng, {2, 3, 6, 8});
                   auto c = projection(rng, {2, 3, 3, 4});
                   return Probe{{x}, [=](Graph<double>& g) { return project(g, ops::maxpool2(g, x), c); }};
                 }});
  reg.push_back({"upsample2", [](std::uint64_t seed, const Opt&) {
                   CounterRng rng(seed);
                   auto x = random_tensor(rng, {2, 2, 3, 4});
                   auto c = projection(rng, {2, 2, 6, 8});
                   return Probe{{x}, [=](Graph<double>& g) { return project(g, ops::upsample2(g, x), c); }};
                 }});
  reg.push_back({"prelu", [](std::uint64_t seed, const Opt&) {
                   CounterRng rng(seed);
                   auto x = random_tensor(rng, {2, 3, 4, 5});
                   auto a = random_tensor(rng, {3}, 0.05, 0.5);
                   auto c = projection(rng, {2, 3, 4, 5});
                   return Probe{{x, a}, [=](Graph<double>& g) { return project(g, ops::prelu(g, x, a), c); }};
                 }});
  reg.push_back({"relu", [](std::uint64_t seed, const Opt&) {
                   CounterRng rng(seed);
                   auto x = random_tensor(rng, {2, 3, 4, 5});
                   auto c = projection(rng, {2, 3, 4, 5});
                   return Probe{{x}, [=](Graph<double>& g) { return project(g, ops::relu(g, x), c); }};
                 }});
  reg.push_back({"add", [](std::uint64_t seed, const Opt&) {
                   CounterRng rng(seed);
                   auto a = random_tensor(rng, {2, 3, 4, 5});
                   auto b = random_tensor(rng, {2, 3, 4, 5});
                   auto c = projection(rng, {2, 3, 4, 5});
                   // a + a exercises gradient accumulation into a shared input.
                   return Probe{{a, b}, [=](Graph<double>& g) {
                                  return project(g, ops::add(g, ops::add(g, a, b), a), c);
                                }};
                 }});
  reg.push_back({"sub", [](std::uint64_t seed, const Opt&) {
                   CounterRng rng(seed);
                   auto a = random_tensor(rng, {2, 3, 4, 5});
                   auto b = random_tensor(rng, {2, 3, 4, 5});
                   auto c = projection(rng, {2, 3, 4, 5});
                   return Probe{{a, b}, [=](Graph<double>& g) { return project(g, ops::sub(g, a, b), c); }};
                 }});
  reg.push_back({"scale", [](std::uint64_t seed, const Opt&) {
                   CounterRng rng(seed);
                   auto a = random_tensor(rng, {2, 3, 4, 5});
                   auto c = projection(rng, {2, 3, 4, 5});
                   return Probe{{a}, [=](Graph<double>& g) { return project(g, ops::scale(g, a, -1.7), c); }};
                 }});
  reg.push_back({"l1_norm", [](std::uint64_t seed, const Opt&) {
                   CounterRng rng(seed);
                   auto a = random_tensor(rng, {2, 3, 4, 5});
                   return Probe{{a}, [=](Graph<double>& g) { return ops::l1_norm(g, a); }};
                 }});
  reg.push_back({"repeat_channels", [](std::uint64_t seed, const Opt&) {
                   CounterRng rng(seed);
                   auto x = random_tensor(rng, {2, 1, 4, 5});
                   auto c = projection(rng, {2, 3, 4, 5});
                   return Probe{{x}, [=](Graph<double>& g) {
                                  return project(g, ops::repeat_channels(g, x, 3), c);
                                }};
                 }});
  reg.push_back({"loss_img", [](std::uint64_t seed, const Opt&) {
                   CounterRng rng(seed);
                   auto pred = random_tensor(rng, {2, 1, 6, 6});
                   auto target = random_tensor(rng, {2, 1, 6, 6});
                   target.set_requires_grad(false);
                   return Probe{{pred}, [=](Graph<double>& g) { return loss_img(g, pred, target, 0.7); }};
                 }});
  reg.push_back({"loss_weights", [](std::uint64_t seed, const Opt&) {
                   ModelConfig cfg{2, {4, 4, 4}, 1, 0.25, seed};
                   auto model = Model<double>::build(cfg);
                   std::vector<Tensor<double>> leaves;
                   for (const auto& p : model.parameters()) leaves.push_back(p.tensor);
                   return Probe{leaves, [=](Graph<double>& g) { return loss_weights(g, model, 0.37); }};
                 }});
  reg.push_back({"loss_activity", [](std::uint64_t seed, const Opt&) {
                   CounterRng rng(seed);
                   auto r = random_tensor(rng, {2, 1, 6, 6});
                   return Probe{{r}, [=](Graph<double>& g) { return loss_activity(g, r, 0.3); }};
                 }});
  reg.push_back({"loss_feat", [](std::uint64_t seed, const Opt&) {
                   CounterRng rng(seed);
                   auto pred = random_tensor(rng, {2, 1, 16, 16});
                   auto target = random_tensor(rng, {2, 1, 16, 16});
                   target.set_requires_grad(false);
                   const auto ext = FeatureExtractor<double>::random(small_extractor(seed ^ 0xFEA7));
                   const std::vector<double> taps{1.0, 0.5, 2.0, 1.0, 0.25};
                   return Probe{{pred}, [=](Graph<double>& g) {
                                  return loss_feat(g, pred, target, ext, 1.3, taps);
                                }};
                 }});
  reg.push_back({"forward_residual", [](std::uint64_t seed, const Opt&) {
                   CounterRng rng(seed);
                   ModelConfig cfg{2, {4, 4, 4}, 1, 0.25, seed};
                   auto model = Model<double>::build(cfg);
                   auto x = random_tensor(rng, {2, 1, 8, 8});
                   auto c = projection(rng, {2, 1, 8, 8});
                   std::vector<Tensor<double>> leaves{x};
                   for (const auto& p : model.parameters()) leaves.push_back(p.tensor);
                   return Probe{leaves, [=](Graph<double>& g) {
                                  return project(g, model.forward_residual(g, x).refined, c);
                                }};
                 }});
  reg.push_back({"loss_total", [](std::uint64_t seed, const Opt&) {
                   // Composite: model plus all four loss terms on 16x16 patches.
                   CounterRng rng(seed);
                   ModelConfig cfg{2, {4, 4, 4}, 1, 0.25, seed};
                   auto model = Model<double>::build(cfg);
                   auto x = random_tensor(rng, {2, 1, 16, 16});
                   x.set_requires_grad(false);
                   Tensor<double> y(x.shape());
                   for (std::size_t i = 0; i < y.size(); ++i) y[i] = x[i] + 3.0 * rng.normal();
                   const auto ext = FeatureExtractor<double>::random(small_extractor(seed ^ 0xFEA7));
                   LossWeights w;
                   w.img = 1.0;
                   w.weights = 1e-2;
                   w.activity = 1e-2;
                   w.feat = 0.5;
                   std::vector<Tensor<double>> leaves;
                   for (const auto& p : model.parameters()) leaves.push_back(p.tensor);
                   return Probe{leaves, [=](Graph<double>& g) {
                                  const auto out = model.forward_residual(g, x);
                                  return loss_total(g, out.refined, y, out.residual, model, w, &ext).total;
                                }};
                 }});
  return reg;
}

std::vector<GradcheckResult> run_gradcheck(const GradcheckOptions& options) {
  std::vector<GradcheckResult> out;
  const auto reg = gradcheck_registry();
  for (std::size_t i = 0; i < reg.size(); ++i) {
    Probe probe = reg[i].make(derive_seed(options.seed, i), options);
    out.push_back(check_gradients(reg[i].op, probe, options));
  }
  return out;
}

}  // namespace dsmr
