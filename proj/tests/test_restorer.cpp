#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "psg/restorer.hpp"
#include "test_util.hpp"

using namespace psg;
using testutil::random_image;
using testutil::random_tensor;

TEST_CASE("make_mask: degenerate ratios, determinism, concentration") {
  auto all_ones = restore::make_mask(16, 16, 0.0, 7);
  for (int64_t i = 0; i < all_ones.data.size(); ++i) CHECK(all_ones.data.data()[i] == 1.0f);

  auto all_zeros = restore::make_mask(16, 16, 1.0, 7);
  for (int64_t i = 0; i < all_zeros.data.size(); ++i) CHECK(all_zeros.data.data()[i] == 0.0f);

  auto a = restore::make_mask(32, 32, 0.5, 123);
  auto b = restore::make_mask(32, 32, 0.5, 123);
  for (int64_t i = 0; i < a.data.size(); ++i) CHECK(a.data.data()[i] == b.data.data()[i]);
  auto c = restore::make_mask(32, 32, 0.5, 124);
  int64_t diff = 0;
  for (int64_t i = 0; i < a.data.size(); ++i) diff += a.data.data()[i] != c.data.data()[i];
  CHECK(diff > 0);

  // binomial concentration at 256x256
  for (double theta : {0.25, 0.5, 0.75}) {
    const double bound = 3.0 * std::sqrt(theta * (1 - theta)) / 256.0;
    for (uint64_t seed = 0; seed < 20; ++seed) {
      auto m = restore::make_mask(256, 256, theta, seed);
      CHECK(std::fabs(m.zero_fraction() - theta) <= bound);
    }
  }

  CHECK_THROWS_AS(restore::make_mask(8, 8, -0.1, 0), Error);
  CHECK_THROWS_AS(restore::make_mask(8, 8, 1.1, 0), Error);
}

TEST_CASE("transformer_conv: shape, zero paths, gradient through both paths") {
  nn::ParamStore ps(31);
  restore::TransformerConv tc(ps, "tc", 8, 4);

  Var x = Var::leaf(random_tensor({8, 12, 12}, 1), true);
  Var y = tc.forward(x);
  REQUIRE(y.value().shape() == std::vector<int>{8, 12, 12});

  // zero input + zeroed final conv + zeroed attention output projection
  restore::TransformerConv tz(ps, "tz", 8, 4);
  tz.conv2.w.mutable_value().fill(0.0f);
  tz.conv2.b.mutable_value().fill(0.0f);
  tz.axial.wo.w.mutable_value().fill(0.0f);
  tz.axial.wo.b.mutable_value().fill(0.0f);
  Var zero_in = Var::leaf(Tensor::zeros({8, 12, 12}));
  Var zy = tz.forward(zero_in);
  for (int64_t i = 0; i < zy.value().size(); ++i) CHECK(zy.value().data()[i] == 0.0f);

  // zero the attention output projection: conv path must still carry gradient
  restore::TransformerConv ta(ps, "ta", 8, 4);
  ta.axial.wo.w.mutable_value().fill(0.0f);
  GradMap g1 = backward(ops::mean_all(ops::square(ta.forward(x))));
  CHECK(g1.grad_norm(ta.conv1.w) > 0.0);
  CHECK(g1.grad_norm(ta.conv2.w) > 0.0);

  // zero the conv path output: attention path must still carry gradient
  restore::TransformerConv tb(ps, "tb", 8, 4);
  tb.conv2.w.mutable_value().fill(0.0f);
  tb.conv2.b.mutable_value().fill(0.0f);
  GradMap g2 = backward(ops::mean_all(ops::square(tb.forward(x))));
  CHECK(g2.grad_norm(tb.axial.wq.w) > 0.0);
  CHECK(g2.grad_norm(tb.axial.wv.w) > 0.0);
}

TEST_CASE("fuse_block: shape, residual identity, text sensitivity") {
  nn::ParamStore ps(32);
  restore::FuseBlock fuse(ps, "fuse", 8, 64, 4);

  Var x = Var::leaf(random_tensor({8, 10, 10}, 2));
  Var text = Var::leaf(random_tensor({64}, 3));
  Var y = fuse.forward(x, text);
  REQUIRE(y.value().shape() == std::vector<int>{8, 10, 10});

  // zeroed output projection reduces the block to LayerNorm of its input
  restore::FuseBlock fz(ps, "fz", 8, 64, 4);
  fz.cross.wo.w.mutable_value().fill(0.0f);
  fz.cross.wo.b.mutable_value().fill(0.0f);
  Var yz = fz.forward(x, text);
  Var ln_only = ops::tokens_to_chw(fz.ln.forward(ops::chw_to_tokens(x)), 10, 10);
  for (int64_t i = 0; i < yz.value().size(); ++i)
    CHECK(yz.value().data()[i] == ln_only.value().data()[i]);

  // changing the text changes the output once projections are non-zero
  Var text2 = Var::leaf(random_tensor({64}, 4));
  Var y2 = fuse.forward(x, text2);
  double dist = 0;
  for (int64_t i = 0; i < y.value().size(); ++i)
    dist += std::fabs(static_cast<double>(y.value().data()[i]) - y2.value().data()[i]);
  CHECK(dist > 0.0);

  Var bad = Var::leaf(random_tensor({32}, 5));
  try {
    fuse.forward(x, bad);
    FAIL("expected DimMismatch");
  } catch (const Error& e) {
    CHECK(e.code() == ErrorCode::DimMismatch);
  }

  // gradient coverage including the query/key projections
  GradMap g = backward(ops::mean_all(ops::square(fuse.forward(x, text))));
  CHECK(g.grad_norm(fuse.cross.wq.w) > 0.0);
  CHECK(g.grad_norm(fuse.cross.wk.w) > 0.0);
  CHECK(g.grad_norm(fuse.cross.wv.w) > 0.0);
  CHECK(g.grad_norm(fuse.ctx_token) > 0.0);
}

TEST_CASE("cfm: FiLM identities and pooling") {
  nn::ParamStore ps(33);
  restore::CfmBlock cfm(ps, "cfm", 8, 64, 4);

  Var x = Var::leaf(random_tensor({8, 6, 6}, 6), true);
  Var text = Var::leaf(random_tensor({64}, 7));

  // forcing gamma=1, beta=0 makes the block the exact identity
  restore::CfmBlock ci(ps, "ci", 8, 64, 4);
  ci.set_film_identity();
  Var yi = ci.forward(x, text);
  for (int64_t i = 0; i < x.value().size(); ++i)
    CHECK(yi.value().data()[i] == x.value().data()[i]);

  // gamma=0, beta=0 annihilates any input
  restore::CfmBlock cz(ps, "cz", 8, 64, 4);
  cz.mlp2.w.mutable_value().fill(0.0f);
  cz.mlp2.b.mutable_value().fill(0.0f);
  Var yz = cz.forward(x, text);
  for (int64_t i = 0; i < yz.value().size(); ++i) CHECK(yz.value().data()[i] == 0.0f);

  // GAP of a spatially constant map is that constant per channel
  Tensor constmap({8, 6, 6});
  for (int c = 0; c < 8; ++c)
    for (int i = 0; i < 36; ++i) constmap.data()[c * 36 + i] = 0.1f * (c + 1);
  Var pooled = ops::gap_chw(Var::leaf(constmap));
  for (int c = 0; c < 8; ++c)
    CHECK(pooled.value().data()[c] == doctest::Approx(0.1f * (c + 1)).epsilon(1e-6));

  // default init starts near the identity but still trains
  auto [gamma, beta] = cfm.modulation(x, text);
  for (int c = 0; c < 8; ++c) {
    CHECK(std::fabs(gamma.value().data()[c] - 1.0f) < 0.5f);
    CHECK(std::fabs(beta.value().data()[c]) < 0.5f);
  }
  GradMap g = backward(ops::mean_all(ops::square(cfm.forward(x, text))));
  CHECK(g.grad_norm(cfm.cross.wq.w) > 0.0);
  CHECK(g.grad_norm(cfm.cross.wk.w) > 0.0);
  CHECK(g.grad_norm(cfm.mlp1.w) > 0.0);
  CHECK(g.grad_norm(cfm.mlp2.w) > 0.0);
  CHECK(g.grad_norm(x) > 0.0);
}

TEST_CASE("sged: shapes, zeroed final conv, full gradient sweep") {
  nn::ParamStore ps(34);
  restore::RestorerConfig cfg;
  cfg.base_channels = 8;
  cfg.depth = 2;
  cfg.text_dim = 64;
  restore::Sged sged(ps, "sged", cfg);

  Var img = Var::leaf(random_image(32, 32, 8), true);
  Var text = Var::leaf(random_tensor({64}, 9), true);
  Var out = sged.forward(img, text);
  REQUIRE(out.value().shape() == std::vector<int>{3, 32, 32});

  // zeroing the final conv forces a zero output
  nn::ParamStore ps2(34);
  restore::Sged szero(ps2, "sged", cfg);
  szero.conv_out.w.mutable_value().fill(0.0f);
  szero.conv_out.b.mutable_value().fill(0.0f);
  Var zy = szero.forward(img, text);
  for (int64_t i = 0; i < zy.value().size(); ++i) CHECK(zy.value().data()[i] == 0.0f);

  // indivisible spatial dims are rejected
  Var odd = Var::leaf(random_image(30, 30, 10));
  try {
    sged.forward(odd, text);
    FAIL("expected BadShape");
  } catch (const Error& e) {
    CHECK(e.code() == ErrorCode::BadShape);
  }

  // every parameter receives gradient
  Tensor target = random_image(32, 32, 11);
  GradMap g = backward(
      ops::mean_all(ops::square(ops::sub(ops::sigmoid(sged.forward(img, text)), Var::leaf(target)))));
  for (const auto& [name, p] : ps.items()) {
    INFO(name);
    CHECK(g.grad_norm(p) > 0.0);
  }
  CHECK(g.grad_norm(img) > 0.0);
  CHECK(g.grad_norm(text) > 0.0);
}

TEST_CASE("sged gradients match finite differences") {
  nn::ParamStore ps(35);
  restore::RestorerConfig cfg;
  cfg.base_channels = 8;
  cfg.depth = 2;
  cfg.text_dim = 64;
  restore::Sged sged(ps, "sged", cfg);

  Tensor x = random_image(32, 32, 12);
  Tensor text = random_tensor({64}, 13);
  Tensor target = random_image(32, 32, 14);

  auto loss_fn = [&]() {
    Var out = ops::sigmoid(sged.forward(Var::leaf(x), Var::leaf(text)));
    return ops::mean_all(ops::square(ops::sub(out, Var::leaf(target))));
  };
  auto value_fn = [&]() {
    Var out = ops::sigmoid(sged.forward(Var::leaf(x), Var::leaf(text)));
    return testutil::mse_double(out.value(), target);
  };
  auto rep = testutil::module_fd_check(loss_fn, value_fn, ps.items(), 99, 5);
  CHECK(rep.checked >= 5);
  CHECK(rep.max_rel_err < 1e-2);
}

TEST_CASE("restore: range, masking semantics, equal branches, determinism") {
  nn::ParamStore ps(36);
  restore::RestorerConfig cfg;
  cfg.base_channels = 8;
  cfg.depth = 2;
  cfg.text_dim = 64;
  restore::Restorer model(ps, "r", cfg);

  Tensor lit_t = random_image(16, 16, 15);
  Var lit = Var::leaf(lit_t);
  Var text = Var::leaf(random_tensor({64}, 16));
  auto mask = restore::make_mask(16, 16, 0.5, 3);

  auto out = model.restore(lit, text, mask);
  REQUIRE(out.enhanced.value().shape() == std::vector<int>{3, 16, 16});
  for (int64_t i = 0; i < out.enhanced.value().size(); ++i) {
    CHECK(out.enhanced.value().data()[i] > 0.0f);
    CHECK(out.enhanced.value().data()[i] < 1.0f);
  }

  // identical call is bit-identical
  auto out2 = model.restore(lit, text, mask);
  for (int64_t i = 0; i < out.enhanced.value().size(); ++i)
    CHECK(out.enhanced.value().data()[i] == out2.enhanced.value().data()[i]);

  // perturbing a masked-out pixel changes neither branch input semantics:
  // the image branch sees it, the semantics branch does not
  int64_t masked_idx = -1;
  for (int64_t i = 0; i < mask.data.size(); ++i)
    if (mask.data.data()[i] == 0.0f) {
      masked_idx = i;
      break;
    }
  REQUIRE(masked_idx >= 0);
  Tensor lit_mod = lit_t.clone();
  lit_mod.data()[masked_idx] = 1.0f - lit_mod.data()[masked_idx];
  auto out_mod = model.restore(Var::leaf(lit_mod), text, mask);
  double sem_diff = 0, img_diff = 0;
  for (int64_t i = 0; i < out.semantics_out.value().size(); ++i) {
    sem_diff += std::fabs(static_cast<double>(out.semantics_out.value().data()[i]) -
                          out_mod.semantics_out.value().data()[i]);
    img_diff += std::fabs(static_cast<double>(out.image_out.value().data()[i]) -
                          out_mod.image_out.value().data()[i]);
  }
  CHECK(sem_diff == 0.0);
  CHECK(img_diff > 0.0);

  // ratio 0 with shared weights: branch outputs coincide exactly
  restore::RestorerConfig shared_cfg = cfg;
  shared_cfg.share_branch_weights = true;
  nn::ParamStore ps2(37);
  restore::Restorer shared(ps2, "r", shared_cfg);
  auto mask0 = restore::make_mask(16, 16, 0.0, 0);
  auto eq = shared.restore(lit, text, mask0);
  for (int64_t i = 0; i < eq.semantics_out.value().size(); ++i)
    CHECK(eq.semantics_out.value().data()[i] == eq.image_out.value().data()[i]);

  // mismatched mask is rejected
  auto small_mask = restore::make_mask(8, 8, 0.5, 1);
  CHECK_THROWS_AS(model.restore(lit, text, small_mask), Error);
}

TEST_CASE("mha_swap fuse blocks ignore text") {
  nn::ParamStore ps(38);
  restore::FuseBlock swap(ps, "swap", 8, 64, 4, /*self_swap=*/true);
  Var x = Var::leaf(random_tensor({8, 6, 6}, 20));
  Var t1 = Var::leaf(random_tensor({64}, 21));
  Var t2 = Var::leaf(random_tensor({64}, 22));
  Var y1 = swap.forward(x, t1);
  Var y2 = swap.forward(x, t2);
  for (int64_t i = 0; i < y1.value().size(); ++i)
    CHECK(y1.value().data()[i] == y2.value().data()[i]);
}
