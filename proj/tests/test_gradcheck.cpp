#include <doctest.h>

#include <set>

#include "dsmr/gradcheck.hpp"

using namespace dsmr;

TEST_CASE("registry lists every differentiable op once") {
  std::set<std::string> names;
  for (const auto& e : gradcheck_registry()) CHECK(names.insert(e.op).second);
  for (const char* op : {"conv2d", "maxpool2", "upsample2", "prelu", "relu", "add", "sub", "scale",
                         "l1_norm", "repeat_channels", "loss_img", "loss_weights", "loss_activity",
                         "loss_feat", "forward_residual", "loss_total"})
    CHECK(names.count(op) == 1);
}

TEST_CASE("all gradients agree with central differences") {
  GradcheckOptions opt;
  opt.seed = 3;
  for (const auto& r : run_gradcheck(opt)) {
    INFO(r.op, " rel ", r.max_rel_error);
    CHECK(r.passed);
    CHECK(r.checked > 0);
    CHECK(r.skipped * 10 < r.checked + r.skipped);
  }
}

TEST_CASE("a broken conv backward is caught") {
  GradcheckOptions opt;
  opt.corrupt_conv = true;
  const auto results = run_gradcheck(opt);
  bool conv_failed = false;
  for (const auto& r : results)
    if (r.op == "conv2d") conv_failed = !r.passed && r.max_rel_error > 1e-2;
  CHECK(conv_failed);
}

TEST_CASE("check_gradients on a hand-written probe") {
  Probe p;
  p.leaves.push_back(Tensor<double>(Shape{3}, std::vector<double>{1.0, -2.0, 3.0}));
  p.loss = [&](Graph<double>& g) { return ops::l1_norm(g, ops::scale(g, p.leaves[0], 2.5)); };
  const auto r = check_gradients("scale_l1", p, GradcheckOptions{});
  CHECK(r.passed);
  CHECK(r.checked == 3);
  CHECK(r.max_rel_error < 1e-8);
}
