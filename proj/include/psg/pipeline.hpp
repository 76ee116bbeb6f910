#pragma once

// Training loop (AdamW over the composite loss), run configuration and its
// key/value config-file format, checkpoint selection by validation PSNR,
// single-image enhancement, and embedding export.

#include <algorithm>
#include <atomic>
#include <condition_variable>
#include <mutex>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <optional>
#include <string>
#include <thread>
#include <unordered_map>
#include <vector>

#include "psg/data.hpp"
#include "psg/losses.hpp"
#include "psg/metrics.hpp"
#include "psg/model.hpp"

namespace psg {
namespace pipeline {

struct TrainConfig {
  // recipe
  double lr = 1e-4;
  int batch_size = 4;
  int epochs = 100;
  int image_size = 256;
  uint64_t seed = 0;
  double beta1 = 0.9, beta2 = 0.999, weight_decay = 1e-2;
  double mask_ratio = 0.5;
  loss::LossWeights weights;
  model::AblationFlags ablation;
  // capacity
  int depth = 3;
  int base_channels = 32;
  int attention_heads = 4;
  int embed_dim = 512;
  std::vector<int> scales{16, 32, 64};
  bool share_branch_weights = false;
  // run control
  int val_interval = 1;           // epochs between validation passes
  int threads = 0;                // 0: one worker per batch sample, capped by hardware
  std::string embedding_file;    // empty: deterministic toy text encoder

  void validate() const {
    if (!(lr > 0.0)) throw Error(ErrorCode::BadRatio, "lr must be positive");
    if (batch_size < 1) throw Error(ErrorCode::BadRatio, "batch_size must be >= 1");
    if (epochs < 1) throw Error(ErrorCode::BadRatio, "epochs must be >= 1");
    if (image_size < 16) throw Error(ErrorCode::BadShape, "image_size must be >= 16");
    if (image_size % (1 << depth) != 0)
      throw Error(ErrorCode::BadShape, "image_size must be divisible by 2^depth");
    if (image_size % 8 != 0)
      throw Error(ErrorCode::BadShape, "image_size must be divisible by 8");
    if (val_interval < 1) throw Error(ErrorCode::BadRatio, "val_interval must be >= 1");
    weights.validate();
    ablation.validate();
  }

  model::ModelConfig to_model_config() const {
    model::ModelConfig m;
    m.illumination.scales = scales;
    m.restorer.base_channels = base_channels;
    m.restorer.depth = depth;
    m.restorer.mask_ratio = mask_ratio;
    m.restorer.share_branch_weights = share_branch_weights;
    m.restorer.attention_heads = attention_heads;
    m.restorer.text_dim = embed_dim;
    m.text_embed_dim = embed_dim;
    m.projector_patch = image_size % 16 == 0 ? 16 : 8;
    m.image_size = image_size;
    m.ablation = ablation;
    m.init_seed = mix_seed(seed, fnv1a("init"));
    return m;
  }
};

namespace detail {

inline std::string trim(const std::string& s) {
  const auto a = s.find_first_not_of(" \t\r");
  if (a == std::string::npos) return "";
  const auto b = s.find_last_not_of(" \t\r");
  return s.substr(a, b - a + 1);
}

inline std::string unquote(std::string v) {
  if (v.size() >= 2 && ((v.front() == '"' && v.back() == '"') ||
                        (v.front() == '\'' && v.back() == '\'')))
    return v.substr(1, v.size() - 2);
  return v;
}

inline std::vector<int> parse_int_list(const std::string& s) {
  std::vector<int> out;
  size_t pos = 0;
  while (pos < s.size()) {
    size_t end = s.find(',', pos);
    if (end == std::string::npos) end = s.size();
    const std::string tok = trim(s.substr(pos, end - pos));
    if (!tok.empty()) out.push_back(std::stoi(tok));
    pos = end + 1;
  }
  return out;
}

inline bool parse_bool(const std::string& v, int lineno) {
  if (v == "true" || v == "1") return true;
  if (v == "false" || v == "0") return false;
  throw Error(ErrorCode::SchemaError, "line " + std::to_string(lineno) + ": expected a boolean");
}

}  // namespace detail

// Plain key = value file, one pair per line, # comments. Unknown keys are
// rejected so typos cannot silently fall back to defaults.
inline TrainConfig parse_train_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw Error(ErrorCode::MissingFile, "config: " + path);
  TrainConfig cfg;
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line = line.substr(0, hash);
    line = detail::trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos)
      throw Error(ErrorCode::SchemaError, "line " + std::to_string(lineno) + ": expected key = value");
    const std::string key = detail::trim(line.substr(0, eq));
    const std::string val = detail::unquote(detail::trim(line.substr(eq + 1)));
    try {
      if (key == "lr") cfg.lr = std::stod(val);
      else if (key == "batch_size") cfg.batch_size = std::stoi(val);
      else if (key == "epochs") cfg.epochs = std::stoi(val);
      else if (key == "image_size") cfg.image_size = std::stoi(val);
      else if (key == "seed") cfg.seed = std::stoull(val);
      else if (key == "beta1") cfg.beta1 = std::stod(val);
      else if (key == "beta2") cfg.beta2 = std::stod(val);
      else if (key == "weight_decay") cfg.weight_decay = std::stod(val);
      else if (key == "mask_ratio") cfg.mask_ratio = std::stod(val);
      else if (key == "alpha") cfg.weights.alpha = std::stod(val);
      else if (key == "beta_itss") cfg.weights.beta_itss = std::stod(val);
      else if (key == "ablation") cfg.ablation = model::AblationFlags::parse(val);
      else if (key == "depth") cfg.depth = std::stoi(val);
      else if (key == "base_channels") cfg.base_channels = std::stoi(val);
      else if (key == "attention_heads") cfg.attention_heads = std::stoi(val);
      else if (key == "embed_dim") cfg.embed_dim = std::stoi(val);
      else if (key == "scales") cfg.scales = detail::parse_int_list(val);
      else if (key == "share_branch_weights") cfg.share_branch_weights = detail::parse_bool(val, lineno);
      else if (key == "val_interval") cfg.val_interval = std::stoi(val);
      else if (key == "threads") cfg.threads = std::stoi(val);
      else if (key == "embedding_file") cfg.embedding_file = val;
      else
        throw Error(ErrorCode::SchemaError,
                    "line " + std::to_string(lineno) + ": unknown key \"" + key + "\"");
    } catch (const std::invalid_argument&) {
      throw Error(ErrorCode::SchemaError,
                  "line " + std::to_string(lineno) + ": bad value for \"" + key + "\"");
    } catch (const std::out_of_range&) {
      throw Error(ErrorCode::SchemaError,
                  "line " + std::to_string(lineno) + ": value out of range for \"" + key + "\"");
    }
  }
  return cfg;
}

// Seed precedence: CLI flag > PSG_SEED environment variable > config file.
inline void apply_seed_overrides(TrainConfig& cfg, std::optional<uint64_t> cli_seed) {
  if (const char* env = std::getenv("PSG_SEED")) cfg.seed = std::strtoull(env, nullptr, 10);
  if (cli_seed) cfg.seed = *cli_seed;
}

// Decoupled weight decay Adam. State arrays follow parameter registration
// order, which is stable for a fixed model configuration.
class AdamW {
 public:
  AdamW(nn::ParamStore& params, double lr, double beta1, double beta2, double weight_decay,
        double eps = 1e-8)
      : lr_(lr), b1_(beta1), b2_(beta2), wd_(weight_decay), eps_(eps) {
    for (const auto& [name, v] : params.items()) {
      m_.push_back(Tensor::zeros(v.value().shape()));
      v_.push_back(Tensor::zeros(v.value().shape()));
    }
  }

  // advances the step counter; per-parameter updates may then run in
  // parallel (each parameter is independent and deterministic)
  void begin_step() { ++t_; }

  void update_param(nn::ParamStore& params, size_t i, const Tensor& grad) {
    const float c1 = static_cast<float>(1.0 - std::pow(b1_, t_));
    const float c2 = static_cast<float>(1.0 - std::pow(b2_, t_));
    const float lr = static_cast<float>(lr_);
    const float b1 = static_cast<float>(b1_), b2 = static_cast<float>(b2_);
    const float wd = static_cast<float>(wd_), eps = static_cast<float>(eps_);
    Tensor& w = params.items()[i].second.node()->value;
    const int64_t n = w.size();
    Eigen::Map<Eigen::ArrayXf> m(m_[i].data(), n), v(v_[i].data(), n), pw(w.data(), n);
    Eigen::Map<const Eigen::ArrayXf> gr(grad.data(), n);
    m = b1 * m + (1.0f - b1) * gr;
    v = b2 * v + (1.0f - b2) * gr.square();
    pw -= lr * ((m / c1) / ((v / c2).sqrt() + eps) + wd * pw);
  }

  void step(nn::ParamStore& params, const std::vector<Tensor>& grads) {
    begin_step();
    for (size_t i = 0; i < params.items().size(); ++i) update_param(params, i, grads[i]);
  }

  int64_t steps() const { return t_; }

 private:
  double lr_, b1_, b2_, wd_, eps_;
  int64_t t_ = 0;
  std::vector<Tensor> m_, v_;
};

struct StepLog {
  int64_t step = 0;
  double total = 0.0, mse = 0.0, ssim = 0.0, perceptual = 0.0, itss = 0.0;
};

struct TrainResult {
  std::string last_checkpoint;
  std::string best_checkpoint;
  std::string log_path;
  double best_val_psnr = 0.0;
  int64_t steps = 0;
  std::vector<StepLog> log;
};

namespace detail {

// Persistent workers: thread-local buffer pools stay warm across steps,
// which spawning fresh threads per step would throw away.
class WorkerPool {
 public:
  explicit WorkerPool(int workers) {
    for (int w = 0; w < workers; ++w)
      threads_.emplace_back([this] {
        uint64_t seen = 0;
        while (true) {
          std::function<void(int)> fn;
          int count = 0;
          {
            std::unique_lock<std::mutex> lock(mu_);
            cv_.wait(lock, [&] { return stop_ || generation_ != seen; });
            if (stop_) return;
            seen = generation_;
            fn = fn_;
            count = count_;
          }
          for (int j = next_.fetch_add(1); j < count; j = next_.fetch_add(1)) fn(j);
          if (done_.fetch_add(1) + 1 == static_cast<int>(threads_.size())) {
            std::lock_guard<std::mutex> lock(mu_);
            cv_done_.notify_all();
          }
        }
      });
  }

  ~WorkerPool() {
    {
      std::lock_guard<std::mutex> lock(mu_);
      stop_ = true;
    }
    cv_.notify_all();
    for (auto& t : threads_) t.join();
  }

  // run fn(0..count-1) across the workers and the calling thread
  void run(int count, const std::function<void(int)>& fn) {
    if (threads_.empty() || count <= 1) {
      for (int j = 0; j < count; ++j) fn(j);
      return;
    }
    {
      std::lock_guard<std::mutex> lock(mu_);
      fn_ = fn;
      count_ = count;
      next_.store(0);
      done_.store(0);
      ++generation_;
    }
    cv_.notify_all();
    std::unique_lock<std::mutex> lock(mu_);
    cv_done_.wait(lock, [&] { return done_.load() == static_cast<int>(threads_.size()); });
  }

 private:
  std::vector<std::thread> threads_;
  std::mutex mu_;
  std::condition_variable cv_, cv_done_;
  std::function<void(int)> fn_;
  int count_ = 0;
  std::atomic<int> next_{0};
  std::atomic<int> done_{0};
  uint64_t generation_ = 0;
  bool stop_ = false;
};

struct SampleData {
  Tensor raw, reference, text_embedding;
};

inline uint64_t mask_seed_for(uint64_t run_seed, int64_t step, int sample) {
  return mix_seed(mix_seed(run_seed, fnv1a("mask")), static_cast<uint64_t>(step) * 4096 +
                                                         static_cast<uint64_t>(sample));
}

inline double validation_psnr(const model::Network& net, const std::vector<SampleData>& samples) {
  NoGradGuard ng;
  if (samples.empty()) return 0.0;
  double sum = 0.0;
  for (const auto& s : samples) {
    auto mask = restore::make_mask(s.raw.dim(1), s.raw.dim(2), net.config().restorer.mask_ratio,
                                   /*inference seed*/ 0);
    auto fwd = net.forward(s.raw, s.text_embedding, mask);
    sum += metrics::psnr(fwd.enhanced.value(), s.reference);
  }
  return sum / static_cast<double>(samples.size());
}

}  // namespace detail

inline TrainResult train(const TrainConfig& cfg, const data::DatasetManifest& train_manifest,
                         const data::DatasetManifest& val_manifest, const std::string& out_dir) {
  namespace fs = std::filesystem;
  cfg.validate();
  if (train_manifest.entries.empty()) throw Error(ErrorCode::DataError, "empty training manifest");
  fs::create_directories(out_dir);

  text::TextBackend text_backend = cfg.embedding_file.empty()
                                       ? text::TextBackend::toy(cfg.embed_dim)
                                       : text::TextBackend::from_file(cfg.embedding_file);
  if (text_backend.dim() != cfg.embed_dim)
    throw Error(ErrorCode::DimMismatch, "embedding file dim does not match embed_dim");
  auto perceptual = loss::PerceptualBackend::toy();
  text::FrozenImageEncoder image_encoder(cfg.embed_dim, 8);

  model::Network net(cfg.to_model_config());

  auto load_samples = [&](const data::DatasetManifest& mf) {
    std::vector<detail::SampleData> out;
    out.reserve(mf.entries.size());
    for (const auto& e : mf.entries) {
      data::Triplet t = data::load_triplet(mf, e.id, cfg.image_size);
      detail::SampleData s;
      s.raw = std::move(t.raw);
      s.reference = std::move(t.reference);
      s.text_embedding = text_backend.encode(t.text);
      out.push_back(std::move(s));
    }
    return out;
  };
  const auto train_samples = load_samples(train_manifest);
  const auto val_samples = load_samples(val_manifest);

  AdamW optimizer(net.params(), cfg.lr, cfg.beta1, cfg.beta2, cfg.weight_decay);
  const size_t n_params = net.params().size();
  const size_t n = train_samples.size();
  const int64_t steps_per_epoch = static_cast<int64_t>((n + cfg.batch_size - 1) / cfg.batch_size);

  const unsigned hw = std::max(1u, std::thread::hardware_concurrency());
  const int workers = cfg.threads > 0 ? std::min<int>(cfg.threads, cfg.batch_size)
                                      : std::min<int>(static_cast<int>(hw), cfg.batch_size);
  detail::WorkerPool pool(workers > 1 ? workers : 0);

  TrainResult result;
  result.log_path = (fs::path(out_dir) / "loss_log.csv").string();
  result.best_checkpoint = (fs::path(out_dir) / "best.ckpt").string();
  result.last_checkpoint = (fs::path(out_dir) / "last.ckpt").string();
  result.best_val_psnr = -1.0;

  std::ofstream log(result.log_path, std::ios::binary);
  if (!log) throw Error(ErrorCode::IOError, "cannot write loss log");
  log << "step,total,mse,ssim,perceptual,itss\n";

  std::vector<size_t> order(n);
  for (size_t i = 0; i < n; ++i) order[i] = i;

  int64_t global_step = 0;
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    Rng shuffle_rng(mix_seed(mix_seed(cfg.seed, fnv1a("order")), static_cast<uint64_t>(epoch)));
    for (size_t i = n; i > 1; --i) std::swap(order[i - 1], order[shuffle_rng.below(i)]);

    for (int64_t b = 0; b < steps_per_epoch; ++b) {
      ++global_step;
      const size_t begin = static_cast<size_t>(b) * cfg.batch_size;
      const size_t end = std::min(begin + cfg.batch_size, n);
      const int bsz = static_cast<int>(end - begin);

      std::vector<std::vector<Tensor>> sample_grads(bsz);
      std::vector<loss::LossTerms> sample_terms(bsz);
      std::vector<std::exception_ptr> sample_errors(bsz);

      auto run_sample = [&](int j) {
        try {
          const auto& s = train_samples[order[begin + j]];
          auto mask = restore::make_mask(cfg.image_size, cfg.image_size, cfg.mask_ratio,
                                         detail::mask_seed_for(cfg.seed, global_step, j));
          auto fwd = net.forward(s.raw, s.text_embedding, mask);
          auto terms = loss::total_loss(fwd.enhanced, Var::leaf(s.reference), s.text_embedding,
                                        cfg.weights, perceptual, image_encoder);
          GradMap grads = backward(terms.total);
          std::vector<Tensor> extracted(n_params);
          for (size_t p = 0; p < n_params; ++p) {
            const Tensor* g = grads.find(net.params().items()[p].second);
            if (g) extracted[p] = *g;
          }
          sample_grads[j] = std::move(extracted);
          sample_terms[j] = std::move(terms);
        } catch (...) {
          sample_errors[j] = std::current_exception();
        }
      };

      pool.run(bsz, run_sample);
      for (int j = 0; j < bsz; ++j)
        if (sample_errors[j]) std::rethrow_exception(sample_errors[j]);

      StepLog row;
      row.step = global_step;
      for (int j = 0; j < bsz; ++j) {
        row.total += sample_terms[j].total_value();
        row.mse += sample_terms[j].mse;
        row.ssim += sample_terms[j].ssim;
        row.perceptual += sample_terms[j].perceptual;
        row.itss += sample_terms[j].itss;
      }
      row.total /= bsz;
      row.mse /= bsz;
      row.ssim /= bsz;
      row.perceptual /= bsz;
      row.itss /= bsz;
      if (!std::isfinite(row.total))
        throw Error(ErrorCode::NonFiniteLoss,
                    "loss became non-finite at step " + std::to_string(global_step));

      // deterministic reduction: per-sample buffers summed in sample order,
      // then the Adam update; parameters are independent, so shard them
      // across the same worker count
      const float inv_b = 1.0f / static_cast<float>(bsz);
      optimizer.begin_step();
      const int shards = std::max(1, workers);
      pool.run(shards, [&](int w) {
        const size_t p0 = n_params * w / shards;
        const size_t p1 = n_params * (w + 1) / shards;
        for (size_t p = p0; p < p1; ++p) {
          Tensor acc = Tensor::zeros(net.params().items()[p].second.value().shape());
          for (int j = 0; j < bsz; ++j)
            if (sample_grads[j][p].defined()) acc.add_(sample_grads[j][p], inv_b);
          optimizer.update_param(net.params(), p, acc);
        }
      });

      char buf[192];
      std::snprintf(buf, sizeof(buf), "%lld,%.9g,%.9g,%.9g,%.9g,%.9g\n",
                    static_cast<long long>(row.step), row.total, row.mse, row.ssim,
                    row.perceptual, row.itss);
      log << buf;
      result.log.push_back(row);
    }

    const bool last_epoch = epoch + 1 == cfg.epochs;
    if ((epoch + 1) % cfg.val_interval == 0 || last_epoch) {
      const double vp = detail::validation_psnr(net, val_samples.empty() ? train_samples
                                                                         : val_samples);
      if (vp > result.best_val_psnr) {
        result.best_val_psnr = vp;
        model::save_checkpoint(result.best_checkpoint, net);
      }
    }
  }

  model::save_checkpoint(result.last_checkpoint, net);
  result.steps = global_step;
  log.flush();
  return result;
}

// Full pipeline on one image; writes an 8-bit PNG at the model's resolution.
inline void enhance(const model::Network& net, const std::string& image_path,
                    const std::string& text, const std::string& out_path, uint64_t mask_seed,
                    const text::TextBackend& text_backend,
                    std::vector<Tensor>* debug_maps = nullptr) {
  NoGradGuard ng;
  const int size = net.config().image_size;
  Tensor raw = img::resize_bilinear(img::decode_image(image_path), size, size);
  const std::string prompt = text.empty() ? data::kDefaultPrompt : text;
  Tensor temb = text_backend.encode(prompt);
  auto mask = restore::make_mask(size, size, net.config().restorer.mask_ratio, mask_seed);
  auto fwd = net.forward(raw, temb, mask);
  if (debug_maps) {
    debug_maps->clear();
    for (const auto& m : fwd.maps) debug_maps->push_back(m.value());
  }
  img::write_png(out_path, fwd.enhanced.value());
}

// Writes the TEMB file for every unique line of the input. Only the
// deterministic toy backend can compute vectors offline; exporting real
// pretrained embeddings needs the external encoder and is rejected here.
inline int export_embeddings(const std::string& texts_path, const std::string& backend_name,
                             const std::string& out_path, int embed_dim = text::kDefaultEmbedDim) {
  if (backend_name != "toy") {
    if (backend_name == "export")
      throw Error(ErrorCode::IOError,
                  "the 'export' backend requires an external pretrained encoder; "
                  "only 'toy' embeddings can be generated offline");
    throw Error(ErrorCode::IOError, "unknown embedding backend: " + backend_name);
  }
  std::ifstream in(texts_path);
  if (!in) throw Error(ErrorCode::MissingFile, "texts file: " + texts_path);
  text::ToyTextEncoder enc(embed_dim);
  std::vector<std::pair<uint64_t, Tensor>> records;
  std::unordered_map<uint64_t, bool> seen;
  std::string line;
  while (std::getline(in, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    const uint64_t h = fnv1a(line);
    if (seen.count(h)) continue;
    seen[h] = true;
    records.emplace_back(h, enc.encode(line));
  }
  text::EmbeddingFile::write(out_path, records, embed_dim);
  return static_cast<int>(records.size());
}

}  // namespace pipeline
}  // namespace psg
