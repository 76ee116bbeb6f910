#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <filesystem>

#include "psg/text_align.hpp"
#include "test_util.hpp"

using namespace psg;
namespace fs = std::filesystem;

TEST_CASE("toy text encoder is deterministic and unit-norm") {
  text::ToyTextEncoder enc(512);
  Tensor a = enc.encode("An underwater image");
  Tensor b = enc.encode("An underwater image");
  REQUIRE(a.size() == 512);
  for (int i = 0; i < 512; ++i) CHECK(a.data()[i] == b.data()[i]);
  CHECK(std::fabs(a.l2_norm() - 1.0) < 1e-6);

  Tensor c = enc.encode("divers by a coral reef");
  double dist = 0;
  for (int i = 0; i < 512; ++i) dist += std::fabs(a.data()[i] - c.data()[i]);
  CHECK(dist > 1e-3);

  CHECK_THROWS_AS(enc.encode(""), Error);
  // separate instances agree (frozen weights come from a fixed stream)
  text::ToyTextEncoder enc2(512);
  Tensor d = enc2.encode("An underwater image");
  for (int i = 0; i < 512; ++i) CHECK(a.data()[i] == d.data()[i]);
}

TEST_CASE("embedding file round trip and missing lookups") {
  text::ToyTextEncoder enc(64);
  std::vector<std::pair<uint64_t, Tensor>> records;
  records.emplace_back(fnv1a("first text"), enc.encode("first text"));
  records.emplace_back(fnv1a("second text"), enc.encode("second text"));
  const std::string path =
      (fs::temp_directory_path() / ("psg_temb_" + std::to_string(::getpid()) + ".bin")).string();
  text::EmbeddingFile::write(path, records, 64);

  auto backend = text::TextBackend::from_file(path);
  CHECK(backend.dim() == 64);
  Tensor a = backend.encode("first text");
  Tensor ref = enc.encode("first text");
  for (int i = 0; i < 64; ++i) CHECK(a.data()[i] == ref.data()[i]);

  try {
    backend.encode("unseen text");
    FAIL("expected MissingEmbedding");
  } catch (const Error& e) {
    CHECK(e.code() == ErrorCode::MissingEmbedding);
  }
  CHECK_THROWS_AS(backend.encode(""), Error);
  CHECK_THROWS_AS(text::TextBackend::from_file("/nonexistent/file.bin"), Error);
  fs::remove(path);
}

TEST_CASE("image projector shapes and gradient flow") {
  nn::ParamStore ps(3);
  text::ImageProjector proj(ps, "pb", 8, 64);

  Var img = Var::leaf(testutil::random_image(32, 32, 5), /*param=*/true);
  Var emb = proj.forward(img);
  REQUIRE(emb.value().size() == 64);

  GradMap g = backward(ops::mean_all(emb));
  CHECK(g.grad_norm(proj.patch_proj.w) > 0.0);
  CHECK(g.grad_norm(proj.head.w) > 0.0);
  CHECK(g.grad_norm(img) > 0.0);

  // patch divisibility contract
  Var bad = Var::leaf(testutil::random_image(30, 30, 6));
  try {
    proj.forward(bad);
    FAIL("expected BadShape");
  } catch (const Error& e) {
    CHECK(e.code() == ErrorCode::BadShape);
  }
}

TEST_CASE("patchify backward matches finite differences") {
  auto rep = testutil::fd_check(
      [](const std::vector<Var>& v) { return text::ops_ext::patchify(v[0], 4); },
      {testutil::random_tensor({3, 8, 8}, 7)}, 7);
  CHECK(rep.max_rel_err < 1e-2);
}

TEST_CASE("aligner returns both tokens and reacts to text") {
  nn::ParamStore ps(11);
  text::CrossModalAligner aligner(ps, "cmta", 64, 2, 8);
  text::ToyTextEncoder enc(64);

  Var img = Var::leaf(testutil::random_tensor({64}, 21), /*param=*/true);
  Var t1 = Var::leaf(enc.encode("a shipwreck covered in algae"));
  Var t2 = Var::leaf(enc.encode("a school of silver fish"));

  auto out1 = aligner.forward(img, t1);
  auto out2 = aligner.forward(img, t2);
  REQUIRE(out1.image_feature.value().size() == 64);
  REQUIRE(out1.text_feature.value().size() == 64);

  double dist = 0;
  for (int i = 0; i < 64; ++i)
    dist += std::pow(static_cast<double>(out1.text_feature.value().data()[i]) -
                         out2.text_feature.value().data()[i],
                     2);
  CHECK(std::sqrt(dist) > 0.0);

  // fixed parameters + fixed inputs => identical features
  auto out3 = aligner.forward(img, t1);
  for (int i = 0; i < 64; ++i)
    CHECK(out1.text_feature.value().data()[i] == out3.text_feature.value().data()[i]);

  // dim mismatch is rejected
  Var small = Var::leaf(testutil::random_tensor({32}, 22));
  try {
    aligner.forward(img, small);
    FAIL("expected DimMismatch");
  } catch (const Error& e) {
    CHECK(e.code() == ErrorCode::DimMismatch);
  }

  // gradients flow to aligner params and the image side, not to the text leaf
  auto out = aligner.forward(img, t1);
  GradMap g = backward(ops::mean_all(out.text_feature));
  for (const auto& [name, p] : ps.items()) {
    INFO(name);
    CHECK(g.grad_norm(p) > 0.0);
  }
  CHECK(g.grad_norm(img) > 0.0);
  CHECK(g.grad_norm(t1) == 0.0);
}

TEST_CASE("frozen image encoder: differentiable input, frozen weights") {
  text::FrozenImageEncoder enc(64, 8);
  Var img = Var::leaf(testutil::random_image(16, 16, 31), /*param=*/true);
  Var emb = enc.forward(img);
  REQUIRE(emb.value().size() == 64);

  GradMap g = backward(ops::mean_all(emb));
  CHECK(g.grad_norm(img) > 0.0);
  for (const auto& w : enc.frozen_weights()) CHECK(g.grad_norm(w) == 0.0);

  // frozen across instances and calls
  text::FrozenImageEncoder enc2(64, 8);
  Var emb2 = enc2.forward(img);
  for (int i = 0; i < 64; ++i) CHECK(emb.value().data()[i] == emb2.value().data()[i]);
}
