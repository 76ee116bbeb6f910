#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "psg/losses.hpp"
#include "test_util.hpp"

using namespace psg;
using testutil::random_image;
using testutil::random_tensor;

TEST_CASE("mse_loss golden values") {
  Var zeros = Var::leaf(Tensor::zeros({3, 8, 8}));
  Var ones = Var::leaf(Tensor::full({3, 8, 8}, 1.0f));
  CHECK(loss::mse_loss(zeros, zeros).value().item() == 0.0f);
  CHECK(loss::mse_loss(zeros, ones).value().item() == doctest::Approx(1.0).epsilon(1e-9));

  Var a = Var::leaf(Tensor::full({3, 8, 8}, 0.3f));
  Var b = Var::leaf(Tensor::full({3, 8, 8}, 0.5f));
  CHECK(loss::mse_loss(a, b).value().item() == doctest::Approx(0.04).epsilon(1e-5));

  CHECK_THROWS_AS(loss::mse_loss(zeros, Var::leaf(Tensor::zeros({3, 4, 4}))), Error);
}

TEST_CASE("ssim_loss: identity, constants, window guard") {
  Tensor x = random_image(16, 16, 1);
  Var vx = Var::leaf(x);
  CHECK(loss::ssim_loss(vx, vx).value().item() == 0.0f);  // SSIM(x,x) == 1 exactly

  // constant 0 vs constant 1: closed form gives C1/(1+C1), loss > 0.99
  Var zeros = Var::leaf(Tensor::zeros({3, 16, 16}));
  Var ones = Var::leaf(Tensor::full({3, 16, 16}, 1.0f));
  const double expected_ssim = 1e-4 / (1.0 + 1e-4);
  const double got = loss::ssim_loss(zeros, ones).value().item();
  CHECK(got > 0.99);
  CHECK(got == doctest::Approx(1.0 - expected_ssim).epsilon(1e-4));

  CHECK_THROWS_AS(loss::ssim_loss(Var::leaf(Tensor::zeros({3, 8, 8})),
                                  Var::leaf(Tensor::zeros({3, 8, 8}))),
                  Error);
  try {
    loss::ssim_loss(Var::leaf(Tensor::zeros({3, 8, 8})), Var::leaf(Tensor::zeros({3, 8, 8})));
  } catch (const Error& e) {
    CHECK(e.code() == ErrorCode::TooSmall);
  }
}

TEST_CASE("ssim is symmetric and bounded") {
  Tensor a = random_image(20, 20, 2);
  Tensor b = random_image(20, 20, 3);
  const double lab = loss::ssim_loss(Var::leaf(a), Var::leaf(b)).value().item();
  const double lba = loss::ssim_loss(Var::leaf(b), Var::leaf(a)).value().item();
  CHECK(lab == doctest::Approx(lba).epsilon(1e-9));
  CHECK(lab >= 0.0);
  CHECK(lab <= 2.0);
}

TEST_CASE("perceptual loss: identity, determinism, symmetry, frozen weights") {
  auto backend = loss::PerceptualBackend::toy();
  Tensor a = random_image(16, 16, 4);
  Tensor b = random_image(16, 16, 5);

  CHECK(loss::perceptual_loss(Var::leaf(a), Var::leaf(a), backend).value().item() == 0.0f);

  const double v1 = loss::perceptual_loss(Var::leaf(a), Var::leaf(b), backend).value().item();
  const double v2 = loss::perceptual_loss(Var::leaf(a), Var::leaf(b), backend).value().item();
  CHECK(v1 == v2);
  auto backend2 = loss::PerceptualBackend::toy();
  const double v3 = loss::perceptual_loss(Var::leaf(a), Var::leaf(b), backend2).value().item();
  CHECK(v1 == v3);

  const double vba = loss::perceptual_loss(Var::leaf(b), Var::leaf(a), backend).value().item();
  CHECK(v1 == doctest::Approx(vba).epsilon(1e-9));
  CHECK(v1 > 0.0);

  // gradient reaches the enhanced image but never the backend weights
  Var enh = Var::leaf(a, /*param=*/true);
  GradMap g = backward(loss::perceptual_loss(enh, Var::leaf(b), backend));
  CHECK(g.grad_norm(enh) > 0.0);
  for (const auto& w : backend.frozen_weights()) CHECK(g.grad_norm(w) == 0.0);
}

TEST_CASE("itss: hand-computed cosines, bounds, rescaling invariance") {
  // phi(enh)=(1,0), phi(ref)=(0,1), phi(T)=(1,0) -> |1 - 0| = 1
  Var e = Var::leaf(Tensor::from({2}, {1.0f, 0.0f}));
  Var r = Var::leaf(Tensor::from({2}, {0.0f, 1.0f}));
  Var t = Var::leaf(Tensor::from({2}, {1.0f, 0.0f}));
  CHECK(loss::itss_from_embeddings(e, r, t).value().item() == doctest::Approx(1.0).epsilon(1e-6));

  // identical embeddings vanish
  CHECK(loss::itss_from_embeddings(e, e, t).value().item() == 0.0f);

  // bounds and positive-rescaling invariance over random triples
  Rng rng(77);
  for (int i = 0; i < 200; ++i) {
    Tensor a = random_tensor({16}, 1000 + i);
    Tensor b = random_tensor({16}, 2000 + i);
    Tensor c = random_tensor({16}, 3000 + i);
    const double v =
        loss::itss_from_embeddings(Var::leaf(a), Var::leaf(b), Var::leaf(c)).value().item();
    CHECK(v >= 0.0);
    CHECK(v <= 2.0);

    Tensor a_scaled = a.clone();
    for (int64_t k = 0; k < a_scaled.size(); ++k) a_scaled.data()[k] *= 7.3f;
    const double vs =
        loss::itss_from_embeddings(Var::leaf(a_scaled), Var::leaf(b), Var::leaf(c)).value().item();
    CHECK(std::fabs(v - vs) < 1e-6);
  }

  CHECK_THROWS_AS(
      loss::itss_from_embeddings(Var::leaf(Tensor::zeros({4})), r, t),
      Error);
}

TEST_CASE("itss_loss through the frozen encoder") {
  text::FrozenImageEncoder enc(64, 8);
  Tensor img = random_image(16, 16, 6);
  Tensor ref = random_image(16, 16, 7);
  text::ToyTextEncoder txt(64);
  Tensor temb = txt.encode("fish over sand");

  // enh == ref vanishes
  CHECK(loss::itss_loss(Var::leaf(img), img, temb, enc).value().item() == 0.0f);

  // gradient flows to enh only
  Var enh = Var::leaf(img, /*param=*/true);
  Var l = loss::itss_loss(enh, ref, temb, enc);
  CHECK(l.value().item() >= 0.0f);
  CHECK(l.value().item() <= 2.0f);
  GradMap g = backward(l);
  CHECK(g.grad_norm(enh) > 0.0);
  for (const auto& w : enc.frozen_weights()) CHECK(g.grad_norm(w) == 0.0);
}

TEST_CASE("total_loss: vanishing, weight degeneration, recombination") {
  auto pb = loss::PerceptualBackend::toy();
  text::FrozenImageEncoder ie(64, 8);
  text::ToyTextEncoder txt(64);
  Tensor temb = txt.encode("An underwater image");

  Tensor img = random_image(16, 16, 8);
  loss::LossWeights w;  // defaults alpha=0.1, beta=1e-4

  auto same = loss::total_loss(Var::leaf(img), Var::leaf(img), temb, w, pb, ie);
  CHECK(same.total_value() < 1e-6);

  Tensor ref = random_image(16, 16, 9);
  auto t = loss::total_loss(Var::leaf(img), Var::leaf(ref), temb, w, pb, ie);
  const double recombined = t.mse + t.ssim + 0.1 * t.perceptual + 1e-4 * t.itss;
  CHECK(t.total_value() == doctest::Approx(recombined).epsilon(1e-6));

  loss::LossWeights zero;
  zero.alpha = 0.0;
  zero.beta_itss = 0.0;
  auto tz = loss::total_loss(Var::leaf(img), Var::leaf(ref), temb, zero, pb, ie);
  CHECK(tz.total_value() == doctest::Approx(tz.mse + tz.ssim).epsilon(1e-7));

  loss::LossWeights bad;
  bad.alpha = -1.0;
  CHECK_THROWS_AS(loss::total_loss(Var::leaf(img), Var::leaf(ref), temb, bad, pb, ie), Error);
}

TEST_CASE("total_loss gradient w.r.t. enh matches finite differences") {
  auto pb = loss::PerceptualBackend::toy();
  text::FrozenImageEncoder ie(64, 8);
  text::ToyTextEncoder txt(64);
  Tensor temb = txt.encode("a diver inspecting a reef");
  Tensor ref = random_image(16, 16, 10);
  Tensor enh0 = random_image(16, 16, 11);
  loss::LossWeights w;

  Var enh = Var::leaf(enh0, /*param=*/true);
  auto loss_fn = [&]() { return loss::total_loss(enh, Var::leaf(ref), temb, w, pb, ie).total; };
  auto value_fn = [&]() { return static_cast<double>(loss_fn().value().item()); };
  std::vector<std::pair<std::string, Var>> params{{"enh", enh}};
  auto rep = testutil::module_fd_check(loss_fn, value_fn, params, 55, 1, 1e-3f);
  CHECK(rep.checked == 1);
  CHECK(rep.max_rel_err < 1e-2);
}

TEST_CASE("all loss terms are non-negative on random pairs") {
  auto pb = loss::PerceptualBackend::toy();
  text::FrozenImageEncoder ie(64, 8);
  text::ToyTextEncoder txt(64);
  loss::LossWeights w;
  for (int i = 0; i < 5; ++i) {
    Tensor a = random_image(16, 16, 100 + i);
    Tensor b = random_image(16, 16, 200 + i);
    Tensor temb = txt.encode("sample " + std::to_string(i));
    auto t = loss::total_loss(Var::leaf(a), Var::leaf(b), temb, w, pb, ie);
    CHECK(t.mse >= 0.0);
    CHECK(t.ssim >= 0.0);
    CHECK(t.perceptual >= 0.0);
    CHECK(t.itss >= 0.0);
    CHECK(t.total_value() >= 0.0);
  }
}
