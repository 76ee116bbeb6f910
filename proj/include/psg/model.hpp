#pragma once

// Full network assembly: illumination estimation, text alignment, dual-branch
// restoration, the ablation variants, and the checkpoint container.

#include <json.hpp>

#include <fstream>
#include <memory>
#include <string>
#include <vector>

#include "psg/error.hpp"
#include "psg/illumination.hpp"
#include "psg/image_io.hpp"
#include "psg/nn.hpp"
#include "psg/restorer.hpp"
#include "psg/text_align.hpp"

namespace psg {
namespace model {

struct AblationFlags {
  bool no_ie = false;     // lit = raw
  bool no_ir = false;     // output = lit
  bool no_ta = false;     // raw text embedding bypasses the aligner
  bool no_cfm = false;    // bottleneck becomes a plain transformer-conv
  bool no_text = false;   // learned constant replaces the text feature
  bool mha_swap = false;  // fuse blocks self-attend over image tokens

  void validate() const {
    if (no_ir && no_cfm)
      throw Error(ErrorCode::InconsistentFlags,
                  "no_ir removes the restorer, which already contains the CFM");
  }

  std::vector<std::string> active() const {
    std::vector<std::string> out;
    if (no_ie) out.push_back("no_ie");
    if (no_ir) out.push_back("no_ir");
    if (no_ta) out.push_back("no_ta");
    if (no_cfm) out.push_back("no_cfm");
    if (no_text) out.push_back("no_text");
    if (mha_swap) out.push_back("mha_swap");
    return out;
  }

  static AblationFlags parse(const std::string& comma_list) {
    AblationFlags f;
    size_t pos = 0;
    while (pos < comma_list.size()) {
      size_t end = comma_list.find(',', pos);
      if (end == std::string::npos) end = comma_list.size();
      const std::string tok = comma_list.substr(pos, end - pos);
      pos = end + 1;
      if (tok.empty()) continue;
      if (tok == "no_ie") f.no_ie = true;
      else if (tok == "no_ir") f.no_ir = true;
      else if (tok == "no_ta") f.no_ta = true;
      else if (tok == "no_cfm") f.no_cfm = true;
      else if (tok == "no_text") f.no_text = true;
      else if (tok == "mha_swap") f.mha_swap = true;
      else throw Error(ErrorCode::InconsistentFlags, "unknown ablation flag: " + tok);
    }
    f.validate();
    return f;
  }
};

struct ModelConfig {
  illum::IlluminationConfig illumination;
  restore::RestorerConfig restorer;
  int text_embed_dim = text::kDefaultEmbedDim;
  int aligner_depth = 2;
  int aligner_heads = 8;
  int projector_patch = 16;
  int image_size = 256;  // training resolution; enhance/eval resize to this
  AblationFlags ablation;
  uint64_t init_seed = 0;

  void validate() const {
    illumination.validate();
    restorer.validate();
    ablation.validate();
    if (restorer.text_dim != text_embed_dim)
      throw Error(ErrorCode::DimMismatch, "restorer text_dim must equal text_embed_dim");
  }

  nlohmann::json to_json() const {
    nlohmann::json j;
    j["illumination"] = {{"scales", illumination.scales},
                         {"embed_dim", illumination.embed_dim},
                         {"attention_heads", illumination.attention_heads},
                         {"ff_hidden", illumination.ff_hidden}};
    j["restorer"] = {{"base_channels", restorer.base_channels},
                     {"depth", restorer.depth},
                     {"mask_ratio", restorer.mask_ratio},
                     {"share_branch_weights", restorer.share_branch_weights},
                     {"attention_heads", restorer.attention_heads},
                     {"text_dim", restorer.text_dim}};
    j["text_embed_dim"] = text_embed_dim;
    j["aligner_depth"] = aligner_depth;
    j["aligner_heads"] = aligner_heads;
    j["projector_patch"] = projector_patch;
    j["image_size"] = image_size;
    j["ablation"] = ablation.active();
    j["init_seed"] = init_seed;
    return j;
  }

  static ModelConfig from_json(const nlohmann::json& j) {
    ModelConfig c;
    const auto& ji = j.at("illumination");
    c.illumination.scales = ji.at("scales").get<std::vector<int>>();
    c.illumination.embed_dim = ji.at("embed_dim").get<int>();
    c.illumination.attention_heads = ji.at("attention_heads").get<int>();
    c.illumination.ff_hidden = ji.at("ff_hidden").get<int>();
    const auto& jr = j.at("restorer");
    c.restorer.base_channels = jr.at("base_channels").get<int>();
    c.restorer.depth = jr.at("depth").get<int>();
    c.restorer.mask_ratio = jr.at("mask_ratio").get<double>();
    c.restorer.share_branch_weights = jr.at("share_branch_weights").get<bool>();
    c.restorer.attention_heads = jr.at("attention_heads").get<int>();
    c.restorer.text_dim = jr.at("text_dim").get<int>();
    c.text_embed_dim = j.at("text_embed_dim").get<int>();
    c.aligner_depth = j.at("aligner_depth").get<int>();
    c.aligner_heads = j.at("aligner_heads").get<int>();
    c.projector_patch = j.at("projector_patch").get<int>();
    c.image_size = j.at("image_size").get<int>();
    for (const auto& flag : j.at("ablation").get<std::vector<std::string>>()) {
      AblationFlags one = AblationFlags::parse(flag);
      c.ablation.no_ie |= one.no_ie;
      c.ablation.no_ir |= one.no_ir;
      c.ablation.no_ta |= one.no_ta;
      c.ablation.no_cfm |= one.no_cfm;
      c.ablation.no_text |= one.no_text;
      c.ablation.mha_swap |= one.mha_swap;
    }
    c.init_seed = j.at("init_seed").get<uint64_t>();
    return c;
  }
};

struct ForwardResult {
  Var enhanced;            // final output in (0,1) (or the lit image for no_ir)
  Var lit;                 // illumination-corrected intermediate
  std::vector<Var> maps;   // per-scale light maps (empty for no_ie)
  Var text_feature;        // guidance vector actually fed to the restorer
};

// The trainable network. Flags prune whole submodules, so a variant's
// parameter set contains exactly what it uses.
class Network {
 public:
  explicit Network(ModelConfig cfg) : cfg_(std::move(cfg)), ps_(cfg_.init_seed) {
    cfg_.restorer.use_cfm = !cfg_.ablation.no_cfm;
    cfg_.restorer.mha_swap = cfg_.ablation.mha_swap;
    cfg_.validate();
    if (!cfg_.ablation.no_ie)
      illum_ = std::make_unique<illum::IlluminationEstimator>(ps_, "illum", cfg_.illumination);
    if (!cfg_.ablation.no_ir) {
      restorer_ = std::make_unique<restore::Restorer>(ps_, "restorer", cfg_.restorer);
      if (cfg_.ablation.no_text) {
        const_text_ = ps_.param("const_text", {cfg_.text_embed_dim}, nn::Init::SmallNormal);
      } else if (!cfg_.ablation.no_ta) {
        projector_ = std::make_unique<text::ImageProjector>(ps_, "pb", cfg_.projector_patch,
                                                            cfg_.text_embed_dim);
        aligner_ = std::make_unique<text::CrossModalAligner>(
            ps_, "cmta", cfg_.text_embed_dim, cfg_.aligner_depth, cfg_.aligner_heads);
      }
    }
  }

  const ModelConfig& config() const { return cfg_; }
  nn::ParamStore& params() { return ps_; }
  const nn::ParamStore& params() const { return ps_; }
  illum::IlluminationEstimator* illumination() { return illum_.get(); }
  restore::Restorer* restorer() { return restorer_.get(); }

  // text_embedding comes from the frozen encoder (unused under no_text)
  ForwardResult forward(const Tensor& raw, const Tensor& text_embedding,
                        const restore::PixelMask& mask) const {
    img::validate_image(raw, "raw");
    ForwardResult out;
    Var raw_v = Var::leaf(raw);

    if (cfg_.ablation.no_ie) {
      out.lit = raw_v;
    } else {
      auto est = illum_->estimate(raw_v);
      out.lit = est.lit;
      out.maps = std::move(est.maps);
    }

    if (cfg_.ablation.no_ir) {
      out.enhanced = out.lit;
      return out;
    }

    if (cfg_.ablation.no_text) {
      out.text_feature = const_text_;
    } else if (cfg_.ablation.no_ta) {
      out.text_feature = Var::leaf(text_embedding);
    } else {
      Var img_emb = projector_->forward(raw_v);
      out.text_feature = aligner_->forward(img_emb, Var::leaf(text_embedding)).text_feature;
    }

    out.enhanced = restorer_->restore(out.lit, out.text_feature, mask).enhanced;
    return out;
  }

 private:
  ModelConfig cfg_;
  nn::ParamStore ps_;
  std::unique_ptr<illum::IlluminationEstimator> illum_;
  std::unique_ptr<text::ImageProjector> projector_;
  std::unique_ptr<text::CrossModalAligner> aligner_;
  std::unique_ptr<restore::Restorer> restorer_;
  Var const_text_;
};

// Checkpoint layout: "PSGC" | u32 version | u64 json_len | config json |
// u32 count | count * (u32 name_len, name, u32 ndim, u32 dims..., f32 data).
inline void save_checkpoint(const std::string& path, const Network& net) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error(ErrorCode::IOError, "cannot write checkpoint: " + path);
  const std::string json = net.config().to_json().dump();
  const uint32_t version = 1;
  const uint64_t json_len = json.size();
  out.write("PSGC", 4);
  out.write(reinterpret_cast<const char*>(&version), 4);
  out.write(reinterpret_cast<const char*>(&json_len), 8);
  out.write(json.data(), static_cast<std::streamsize>(json.size()));
  const auto& items = net.params().items();
  const uint32_t count = static_cast<uint32_t>(items.size());
  out.write(reinterpret_cast<const char*>(&count), 4);
  for (const auto& [name, var] : items) {
    const uint32_t name_len = static_cast<uint32_t>(name.size());
    out.write(reinterpret_cast<const char*>(&name_len), 4);
    out.write(name.data(), name_len);
    const auto& shape = var.value().shape();
    const uint32_t ndim = static_cast<uint32_t>(shape.size());
    out.write(reinterpret_cast<const char*>(&ndim), 4);
    for (int d : shape) {
      const uint32_t ud = static_cast<uint32_t>(d);
      out.write(reinterpret_cast<const char*>(&ud), 4);
    }
    out.write(reinterpret_cast<const char*>(var.value().data()),
              static_cast<std::streamsize>(sizeof(float) * var.value().size()));
  }
  if (!out) throw Error(ErrorCode::IOError, "short checkpoint write: " + path);
}

inline std::unique_ptr<Network> load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(ErrorCode::CheckpointError, "cannot open checkpoint: " + path);
  char magic[4];
  uint32_t version = 0;
  uint64_t json_len = 0;
  in.read(magic, 4);
  in.read(reinterpret_cast<char*>(&version), 4);
  in.read(reinterpret_cast<char*>(&json_len), 8);
  if (!in || std::memcmp(magic, "PSGC", 4) != 0 || version != 1)
    throw Error(ErrorCode::CheckpointError, "not a PSGC v1 checkpoint: " + path);
  std::string json(json_len, '\0');
  in.read(json.data(), static_cast<std::streamsize>(json_len));
  ModelConfig cfg;
  try {
    cfg = ModelConfig::from_json(nlohmann::json::parse(json));
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorCode::CheckpointError, std::string("bad checkpoint config: ") + e.what());
  }

  // config first, weights second: the rebuilt network must expect exactly the
  // parameters stored in the file
  auto net = std::make_unique<Network>(cfg);

  uint32_t count = 0;
  in.read(reinterpret_cast<char*>(&count), 4);
  if (count != net->params().size())
    throw Error(ErrorCode::CheckpointError,
                "parameter count mismatch: file has " + std::to_string(count) + ", model has " +
                    std::to_string(net->params().size()));
  for (uint32_t i = 0; i < count; ++i) {
    uint32_t name_len = 0;
    in.read(reinterpret_cast<char*>(&name_len), 4);
    std::string name(name_len, '\0');
    in.read(name.data(), name_len);
    uint32_t ndim = 0;
    in.read(reinterpret_cast<char*>(&ndim), 4);
    std::vector<int> shape(ndim);
    for (uint32_t d = 0; d < ndim; ++d) {
      uint32_t ud = 0;
      in.read(reinterpret_cast<char*>(&ud), 4);
      shape[d] = static_cast<int>(ud);
    }
    Var* p = net->params().find(name);
    if (!p) throw Error(ErrorCode::CheckpointError, "unexpected parameter in file: " + name);
    if (p->value().shape() != shape)
      throw Error(ErrorCode::CheckpointError, "shape mismatch for parameter: " + name);
    in.read(reinterpret_cast<char*>(p->mutable_value().data()),
            static_cast<std::streamsize>(sizeof(float) * p->value().size()));
    if (!in) throw Error(ErrorCode::CheckpointError, "truncated checkpoint: " + path);
  }
  return net;
}

}  // namespace model
}  // namespace psg
