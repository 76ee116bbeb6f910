#pragma once

// Dataset plumbing: JSON-Lines manifests, triplet loading, reference
// selection by subjective score, and deterministic split generation.

#include <json.hpp>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <string>
#include <unordered_set>
#include <vector>

#include "psg/error.hpp"
#include "psg/image_io.hpp"
#include "psg/rng.hpp"
#include "psg/tensor.hpp"

namespace psg {
namespace data {

inline constexpr const char* kDefaultPrompt = "An underwater image";

enum class Split { train, val, test };

struct ManifestEntry {
  std::string id;
  std::string raw_path;  // absolute after loading
  std::string ref_path;
  std::string text;
};

struct DatasetManifest {
  std::vector<ManifestEntry> entries;
  Split split = Split::train;

  const ManifestEntry* find(const std::string& id) const {
    for (const auto& e : entries)
      if (e.id == id) return &e;
    return nullptr;
  }
};

// One training record: raw/reference images at equal size plus a description.
struct Triplet {
  Tensor raw;
  Tensor reference;
  std::string text;
  std::string id;
};

struct CandidateScores {
  std::vector<double> scores;
};

// JSON-Lines, one object per line with keys id / raw / ref / text.
// Paths are relative to the manifest's directory. Images are validated for
// existence here and decoded lazily in load_triplet.
inline DatasetManifest load_manifest(const std::string& path) {
  namespace fs = std::filesystem;
  if (!fs::exists(path)) throw Error(ErrorCode::MissingFile, "manifest: " + path);
  std::ifstream in(path);
  if (!in) throw Error(ErrorCode::MissingFile, "manifest: " + path);

  const fs::path base = fs::path(path).parent_path();
  DatasetManifest m;
  std::unordered_set<std::string> seen;
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty() || line.find_first_not_of(" \t\r") == std::string::npos) continue;
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(line);
    } catch (const nlohmann::json::exception& e) {
      throw Error(ErrorCode::SchemaError,
                  "line " + std::to_string(lineno) + ": " + e.what());
    }
    if (!j.is_object() || !j.contains("id") || !j.contains("raw") || !j.contains("ref") ||
        !j.contains("text") || !j["id"].is_string() || !j["raw"].is_string() ||
        !j["ref"].is_string() || !j["text"].is_string())
      throw Error(ErrorCode::SchemaError,
                  "line " + std::to_string(lineno) + ": expected string keys id/raw/ref/text");
    ManifestEntry e;
    e.id = j["id"].get<std::string>();
    e.raw_path = (base / j["raw"].get<std::string>()).string();
    e.ref_path = (base / j["ref"].get<std::string>()).string();
    e.text = j["text"].get<std::string>();
    if (!seen.insert(e.id).second)
      throw Error(ErrorCode::DuplicateId,
                  "line " + std::to_string(lineno) + ": id \"" + e.id + "\"");
    if (!fs::exists(e.raw_path))
      throw Error(ErrorCode::MissingFile,
                  "line " + std::to_string(lineno) + ": raw image " + e.raw_path);
    if (!fs::exists(e.ref_path))
      throw Error(ErrorCode::MissingFile,
                  "line " + std::to_string(lineno) + ": reference image " + e.ref_path);
    m.entries.push_back(std::move(e));
  }
  return m;
}

inline Triplet load_triplet(const DatasetManifest& manifest, const std::string& id, int size) {
  if (size < 16) throw Error(ErrorCode::BadShape, "triplet size must be >= 16");
  const ManifestEntry* e = manifest.find(id);
  if (!e) throw Error(ErrorCode::UnknownId, id);
  Triplet t;
  t.id = id;
  t.raw = img::resize_bilinear(img::decode_image(e->raw_path), size, size);
  t.reference = img::resize_bilinear(img::decode_image(e->ref_path), size, size);
  t.text = e->text.empty() ? kDefaultPrompt : e->text;
  return t;
}

// index of the highest mean subjective score; ties go to the lowest index
inline size_t select_reference(const CandidateScores& scores) {
  if (scores.scores.empty()) throw Error(ErrorCode::EmptyScores, "no candidates");
  size_t best = 0;
  for (size_t i = 0; i < scores.scores.size(); ++i) {
    const double s = scores.scores[i];
    if (!std::isfinite(s)) throw Error(ErrorCode::EmptyScores, "non-finite score");
    if (s > scores.scores[best]) best = i;
  }
  return best;
}

struct SplitRatios {
  double train = 0.8, val = 0.1, test = 0.1;
};

struct SplitResult {
  DatasetManifest train, val, test;
};

// Deterministic shuffled partition. Counts come from the largest-remainder
// method so they always sum to the entry count.
inline SplitResult split_dataset(const DatasetManifest& manifest, SplitRatios ratios,
                                 uint64_t seed) {
  const double sum = ratios.train + ratios.val + ratios.test;
  if (ratios.train < 0 || ratios.val < 0 || ratios.test < 0 || std::fabs(sum - 1.0) > 1e-9)
    throw Error(ErrorCode::BadRatios, "ratios must be non-negative and sum to 1");

  const size_t n = manifest.entries.size();
  std::vector<size_t> order(n);
  for (size_t i = 0; i < n; ++i) order[i] = i;
  Rng rng(mix_seed(seed, 0x5117));
  for (size_t i = n; i > 1; --i) std::swap(order[i - 1], order[rng.below(i)]);

  const double r[3] = {ratios.train, ratios.val, ratios.test};
  size_t counts[3];
  double rem[3];
  size_t used = 0;
  for (int i = 0; i < 3; ++i) {
    const double exact = r[i] * static_cast<double>(n);
    counts[i] = static_cast<size_t>(std::floor(exact));
    rem[i] = exact - std::floor(exact);
    used += counts[i];
  }
  while (used < n) {
    int best = 0;
    for (int i = 1; i < 3; ++i)
      if (rem[i] > rem[best]) best = i;
    ++counts[best];
    rem[best] = -1.0;
    ++used;
  }

  SplitResult out;
  out.train.split = Split::train;
  out.val.split = Split::val;
  out.test.split = Split::test;
  size_t pos = 0;
  DatasetManifest* dests[3] = {&out.train, &out.val, &out.test};
  for (int i = 0; i < 3; ++i)
    for (size_t k = 0; k < counts[i]; ++k) dests[i]->entries.push_back(manifest.entries[order[pos++]]);
  return out;
}

}  // namespace data
}  // namespace psg
