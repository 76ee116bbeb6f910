#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <filesystem>
#include <fstream>
#include <set>

#include "psg/data.hpp"
#include "psg/image_io.hpp"
#include "test_util.hpp"

using namespace psg;
namespace fs = std::filesystem;

namespace {

struct TempDir {
  fs::path path;
  TempDir(const std::string& tag) {
    path = fs::temp_directory_path() / ("psg_test_" + tag + "_" + std::to_string(::getpid()));
    fs::create_directories(path);
  }
  ~TempDir() {
    std::error_code ec;
    fs::remove_all(path, ec);
  }
};

void write_images(const fs::path& dir, int count, int h = 24, int w = 20) {
  for (int i = 0; i < count; ++i) {
    Tensor raw = testutil::random_image(h, w, 100 + i);
    Tensor ref = testutil::random_image(h, w, 200 + i);
    img::write_png((dir / ("raw" + std::to_string(i) + ".png")).string(), raw);
    img::write_png((dir / ("ref" + std::to_string(i) + ".png")).string(), ref);
  }
}

void write_manifest(const fs::path& file, int count, const std::string& text = "a reef scene") {
  std::ofstream out(file);
  for (int i = 0; i < count; ++i)
    out << R"({"id":"u)" << i << R"(","raw":"raw)" << i << R"(.png","ref":"ref)" << i
        << R"(.png","text":")" << text << R"("})" << "\n";
}

}  // namespace

TEST_CASE("png and jpeg round trips") {
  TempDir tmp("img");
  Tensor t = testutil::random_image(17, 23, 7);
  const auto png = (tmp.path / "a.png").string();
  img::write_png(png, t);
  Tensor back = img::decode_image(png);
  REQUIRE(back.dim(1) == 17);
  REQUIRE(back.dim(2) == 23);
  // 8-bit quantization error bound
  for (int64_t i = 0; i < t.size(); ++i)
    CHECK(std::fabs(back.data()[i] - t.data()[i]) <= 0.5f / 255.0f + 1e-6f);

  const auto jpg = (tmp.path / "a.jpg").string();
  img::write_jpeg(jpg, t, 95);
  Tensor jback = img::decode_image(jpg);
  REQUIRE(jback.dim(1) == 17);
  REQUIRE(jback.dim(2) == 23);
  img::validate_image(jback);

  CHECK_THROWS_AS(img::decode_image((tmp.path / "missing.png").string()), Error);
  std::ofstream bad(tmp.path / "bad.png", std::ios::binary);
  bad << "not an image";
  bad.close();
  CHECK_THROWS_AS(img::decode_image((tmp.path / "bad.png").string()), Error);
}

TEST_CASE("load_manifest parses well-formed files") {
  TempDir tmp("manifest");
  write_images(tmp.path, 3);
  write_manifest(tmp.path / "m.jsonl", 3);
  auto m = data::load_manifest((tmp.path / "m.jsonl").string());
  CHECK(m.entries.size() == 3);
  CHECK(m.entries[0].id == "u0");
  CHECK(m.entries[2].text == "a reef scene");
}

TEST_CASE("load_manifest rejects duplicates, missing files, bad schema") {
  TempDir tmp("manifest_bad");
  write_images(tmp.path, 2);

  {
    std::ofstream out(tmp.path / "dup.jsonl");
    out << R"({"id":"u0001","raw":"raw0.png","ref":"ref0.png","text":"x"})" << "\n";
    out << R"({"id":"u0001","raw":"raw1.png","ref":"ref1.png","text":"y"})" << "\n";
  }
  try {
    data::load_manifest((tmp.path / "dup.jsonl").string());
    FAIL("expected DuplicateId");
  } catch (const Error& e) {
    CHECK(e.code() == ErrorCode::DuplicateId);
    CHECK(std::string(e.what()).find("line 2") != std::string::npos);
  }

  {
    std::ofstream out(tmp.path / "missing.jsonl");
    out << R"({"id":"a","raw":"nope.png","ref":"ref0.png","text":"x"})" << "\n";
  }
  try {
    data::load_manifest((tmp.path / "missing.jsonl").string());
    FAIL("expected MissingFile");
  } catch (const Error& e) {
    CHECK(e.code() == ErrorCode::MissingFile);
  }

  {
    std::ofstream out(tmp.path / "schema.jsonl");
    out << R"({"id":"a","raw":"raw0.png"})" << "\n";
  }
  try {
    data::load_manifest((tmp.path / "schema.jsonl").string());
    FAIL("expected SchemaError");
  } catch (const Error& e) {
    CHECK(e.code() == ErrorCode::SchemaError);
    CHECK(std::string(e.what()).find("line 1") != std::string::npos);
  }

  CHECK_THROWS_AS(data::load_manifest((tmp.path / "absent.jsonl").string()), Error);
}

TEST_CASE("load_triplet resizes, defaults text, validates id") {
  TempDir tmp("triplet");
  write_images(tmp.path, 2, 30, 44);  // raw/ref share dims per pair
  {
    std::ofstream out(tmp.path / "m.jsonl");
    out << R"({"id":"u0","raw":"raw0.png","ref":"ref0.png","text":"divers near a wreck"})" << "\n";
    out << R"({"id":"u1","raw":"raw1.png","ref":"ref1.png","text":""})" << "\n";
  }
  auto m = data::load_manifest((tmp.path / "m.jsonl").string());

  auto t = data::load_triplet(m, "u0", 32);
  CHECK(t.raw.shape() == std::vector<int>{3, 32, 32});
  CHECK(t.reference.shape() == std::vector<int>{3, 32, 32});
  CHECK(t.text == "divers near a wreck");
  img::validate_image(t.raw);
  img::validate_image(t.reference);

  auto t1 = data::load_triplet(m, "u1", 32);
  CHECK(t1.text == "An underwater image");

  try {
    data::load_triplet(m, "nope", 32);
    FAIL("expected UnknownId");
  } catch (const Error& e) {
    CHECK(e.code() == ErrorCode::UnknownId);
  }
  CHECK_THROWS_AS(data::load_triplet(m, "u0", 8), Error);
}

TEST_CASE("load_triplet accepts mixed input resolutions and bit layouts") {
  TempDir tmp("mixed");
  Tensor raw = testutil::random_image(40, 28, 5);
  Tensor ref = testutil::random_image(64, 64, 6);
  img::write_png((tmp.path / "raw0.png").string(), raw);
  img::write_jpeg((tmp.path / "ref0.jpg").string(), ref);
  {
    std::ofstream out(tmp.path / "m.jsonl");
    out << R"({"id":"u0","raw":"raw0.png","ref":"ref0.jpg","text":"t"})" << "\n";
  }
  auto m = data::load_manifest((tmp.path / "m.jsonl").string());
  auto t = data::load_triplet(m, "u0", 48);
  CHECK(t.raw.shape() == t.reference.shape());
  img::validate_image(t.raw, "raw");
  img::validate_image(t.reference, "ref");
}

TEST_CASE("select_reference") {
  CHECK(data::select_reference({{10.0, 90.0, 50.0}}) == 1);
  CHECK(data::select_reference({{7.0}}) == 0);
  CHECK(data::select_reference({{5.0, 5.0, 3.0}}) == 0);  // tie -> lowest index
  CHECK_THROWS_AS(data::select_reference({{}}), Error);

  // argmax invariance under shift and positive scale
  data::CandidateScores s{{3.0, 9.5, 9.5, 1.0}};
  const size_t base = data::select_reference(s);
  data::CandidateScores shifted = s, scaled = s;
  for (auto& v : shifted.scores) v += 123.0;
  for (auto& v : scaled.scores) v *= 7.25;
  CHECK(data::select_reference(shifted) == base);
  CHECK(data::select_reference(scaled) == base);
}

TEST_CASE("split_dataset partitions deterministically") {
  TempDir tmp("split");
  write_images(tmp.path, 10);
  write_manifest(tmp.path / "m.jsonl", 10);
  auto m = data::load_manifest((tmp.path / "m.jsonl").string());

  auto s1 = data::split_dataset(m, {0.8, 0.1, 0.1}, 42);
  CHECK(s1.train.entries.size() == 8);
  CHECK(s1.val.entries.size() == 1);
  CHECK(s1.test.entries.size() == 1);
  CHECK(s1.train.split == data::Split::train);
  CHECK(s1.test.split == data::Split::test);

  auto s2 = data::split_dataset(m, {0.8, 0.1, 0.1}, 42);
  for (size_t i = 0; i < 8; ++i) CHECK(s1.train.entries[i].id == s2.train.entries[i].id);
  CHECK(s1.val.entries[0].id == s2.val.entries[0].id);

  auto s3 = data::split_dataset(m, {0.8, 0.1, 0.1}, 43);
  bool any_diff = false;
  for (size_t i = 0; i < 8; ++i) any_diff = any_diff || s1.train.entries[i].id != s3.train.entries[i].id;
  CHECK(any_diff);

  // disjoint cover
  std::set<std::string> all;
  for (const auto* part : {&s1.train, &s1.val, &s1.test})
    for (const auto& e : part->entries) CHECK(all.insert(e.id).second);
  CHECK(all.size() == 10);

  CHECK_THROWS_AS(data::split_dataset(m, {0.5, 0.5, 0.5}, 1), Error);
  try {
    data::split_dataset(m, {0.5, 0.5, 0.5}, 1);
  } catch (const Error& e) {
    CHECK(e.code() == ErrorCode::BadRatios);
  }
}

TEST_CASE("split_dataset covers awkward ratios and sizes") {
  TempDir tmp("split2");
  write_images(tmp.path, 7);
  write_manifest(tmp.path / "m.jsonl", 7);
  auto m = data::load_manifest((tmp.path / "m.jsonl").string());
  auto s = data::split_dataset(m, {0.5, 0.25, 0.25}, 9);
  CHECK(s.train.entries.size() + s.val.entries.size() + s.test.entries.size() == 7);
  std::set<std::string> all;
  for (const auto* part : {&s.train, &s.val, &s.test})
    for (const auto& e : part->entries) all.insert(e.id);
  CHECK(all.size() == 7);
}
