#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "hprompt/rng.hpp"
#include "hprompt/serialize.hpp"
#include "hprompt/tensor.hpp"

namespace hprompt {

struct BackboneConfig {
  std::size_t image = 16;  // square side, pixels
  std::size_t channels = 3;
  std::size_t patch = 4;
  std::size_t dim = 64;
  std::size_t depth = 4;
  std::size_t heads = 4;
  std::size_t mlp_ratio = 2;

  std::size_t tokens() const { return (image / patch) * (image / patch); }
  std::size_t patch_dim() const { return patch * patch * channels; }

  json to_json() const {
    return {{"image", image},   {"channels", channels}, {"patch", patch},    {"dim", dim},
            {"depth", depth},   {"heads", heads},       {"mlp_ratio", mlp_ratio}};
  }
  static BackboneConfig from_json(const json& j) {
    BackboneConfig c;
    c.image = j.at("image");
    c.channels = j.at("channels");
    c.patch = j.at("patch");
    c.dim = j.at("dim");
    c.depth = j.at("depth");
    c.heads = j.at("heads");
    c.mlp_ratio = j.at("mlp_ratio");
    return c;
  }
};

/// Per-layer prompt tokens to splice ahead of the sequence embedding. Layers
/// past the injection depth carry the previous layer's prompt outputs forward.
template <typename T>
struct PromptStack {
  std::vector<Tensor<T>> general;  // depth_g entries, each [Lg, D]
  std::vector<Tensor<T>> task;     // depth_t entries, each [Lt, D]

  bool empty() const { return general.empty() && task.empty(); }
  std::size_t lg() const { return general.empty() ? 0 : general[0].rows(); }
  std::size_t lt() const { return task.empty() ? 0 : task[0].rows(); }
};

/// Pre-norm ViT over square images, learned position embeddings, no class
/// token. Two readouts: plain forward mean-pools the sequence; prompted
/// forward takes the first general-prompt token of the last layer's output.
template <typename T>
class Backbone {
 public:
  Backbone() = default;

  Backbone(const BackboneConfig& cfg, Rng& rng) : cfg_(cfg) {
    check(cfg.image % cfg.patch == 0, "backbone: image side not divisible by patch");
    check(cfg.dim % cfg.heads == 0, "backbone: dim not divisible by heads");
    const T s = T(0.02);
    patch_w_ = Tensor<T>::param({cfg.patch_dim(), cfg.dim}, randn_vec(cfg.patch_dim() * cfg.dim, rng, s));
    patch_b_ = Tensor<T>::param({cfg.dim}, std::vector<T>(cfg.dim, T(0)));
    pos_ = Tensor<T>::param({cfg.tokens(), cfg.dim}, randn_vec(cfg.tokens() * cfg.dim, rng, s));
    layers_.resize(cfg.depth);
    for (auto& l : layers_) {
      l.ln1_g = ones({cfg.dim});
      l.ln1_b = zeros_p({cfg.dim});
      l.wq = Tensor<T>::param({cfg.dim, cfg.dim}, randn_vec(cfg.dim * cfg.dim, rng, s));
      l.bq = zeros_p({cfg.dim});
      l.wk = Tensor<T>::param({cfg.dim, cfg.dim}, randn_vec(cfg.dim * cfg.dim, rng, s));
      l.bk = zeros_p({cfg.dim});
      l.wv = Tensor<T>::param({cfg.dim, cfg.dim}, randn_vec(cfg.dim * cfg.dim, rng, s));
      l.bv = zeros_p({cfg.dim});
      l.wo = Tensor<T>::param({cfg.dim, cfg.dim}, randn_vec(cfg.dim * cfg.dim, rng, s));
      l.bo = zeros_p({cfg.dim});
      l.ln2_g = ones({cfg.dim});
      l.ln2_b = zeros_p({cfg.dim});
      std::size_t hidden = cfg.dim * cfg.mlp_ratio;
      l.w1 = Tensor<T>::param({cfg.dim, hidden}, randn_vec(cfg.dim * hidden, rng, s));
      l.b1 = zeros_p({hidden});
      l.w2 = Tensor<T>::param({hidden, cfg.dim}, randn_vec(hidden * cfg.dim, rng, s));
      l.b2 = zeros_p({cfg.dim});
    }
    final_g_ = ones({cfg.dim});
    final_b_ = zeros_p({cfg.dim});
  }

  const BackboneConfig& config() const { return cfg_; }
  std::size_t dim() const { return cfg_.dim; }
  std::size_t tokens() const { return cfg_.tokens(); }

  /// Patch embedding plus position embedding. `pixels` is row-major
  /// (row, col, channel), length image*image*channels.
  Tensor<T> embed(const std::vector<T>& pixels) const {
    check(pixels.size() == cfg_.image * cfg_.image * cfg_.channels, "embed: pixel count mismatch");
    std::size_t per_side = cfg_.image / cfg_.patch;
    std::size_t pd = cfg_.patch_dim();
    std::vector<T> patches(cfg_.tokens() * pd);
    std::size_t idx = 0;
    for (std::size_t py = 0; py < per_side; ++py)
      for (std::size_t px = 0; px < per_side; ++px)
        for (std::size_t dy = 0; dy < cfg_.patch; ++dy)
          for (std::size_t dx = 0; dx < cfg_.patch; ++dx)
            for (std::size_t c = 0; c < cfg_.channels; ++c) {
              std::size_t row = py * cfg_.patch + dy, col = px * cfg_.patch + dx;
              patches[idx++] = pixels[(row * cfg_.image + col) * cfg_.channels + c];
            }
    Tensor<T> pm = Tensor<T>::from({cfg_.tokens(), pd}, std::move(patches));
    return add(add_rowvec(matmul(pm, patch_w_), patch_b_), pos_);
  }

  /// Prompted forward over a sequence embedding [L, D]. Returns the adapted
  /// representation [D]: first general-token row after the final norm. When
  /// layer_outputs is given it receives every layer's full token output.
  Tensor<T> forward_seq(const Tensor<T>& seq, const PromptStack<T>& prompts,
                        std::vector<Tensor<T>>* layer_outputs = nullptr) const {
    check(!prompts.empty(), "forward_seq: prompted forward requires prompts");
    check(!prompts.general.empty(), "forward_seq: general prompt required for the readout position");
    check(prompts.general.size() <= cfg_.depth && prompts.task.size() <= cfg_.depth,
          "forward_seq: prompt depth exceeds layer count");
    Tensor<T> x = seq;
    Tensor<T> g_carry, t_carry;
    std::size_t lg = prompts.lg(), lt = prompts.lt();
    for (std::size_t l = 0; l < cfg_.depth; ++l) {
      Tensor<T> g_in = l < prompts.general.size() ? prompts.general[l] : g_carry;
      std::vector<Tensor<T>> parts;
      parts.push_back(g_in);
      if (lt > 0) parts.push_back(l < prompts.task.size() ? prompts.task[l] : t_carry);
      parts.push_back(x);
      Tensor<T> z = block(layers_[l], concat_rows(parts));
      if (layer_outputs) layer_outputs->push_back(z);
      g_carry = slice_rows(z, std::size_t(0), lg);
      if (lt > 0) t_carry = slice_rows(z, lg, lt);
      x = slice_rows(z, lg + lt, seq.rows());
      if (l + 1 == cfg_.depth) {
        Tensor<T> normed = layer_norm_rows(z, final_g_, final_b_);
        return reshape(slice_rows(normed, std::size_t(0), std::size_t(1)), {cfg_.dim});
      }
    }
    throw std::runtime_error("forward_seq: zero-depth backbone");
  }

  /// Promptless forward: mean-pooled sequence after the final norm.
  Tensor<T> forward_plain_seq(const Tensor<T>& seq) const {
    Tensor<T> x = seq;
    for (std::size_t l = 0; l < cfg_.depth; ++l) x = block(layers_[l], x);
    Tensor<T> normed = layer_norm_rows(x, final_g_, final_b_);
    std::size_t L = seq.rows();
    Tensor<T> acc = slice_rows(normed, std::size_t(0), std::size_t(1));
    for (std::size_t r = 1; r < L; ++r) acc = add(acc, slice_rows(normed, r, std::size_t(1)));
    return reshape(scale(acc, T(1) / static_cast<T>(L)), {cfg_.dim});
  }

  Tensor<T> forward(const std::vector<T>& pixels, const PromptStack<T>& prompts) const {
    return forward_seq(embed(pixels), prompts);
  }

  Tensor<T> forward_plain(const std::vector<T>& pixels) const {
    return forward_plain_seq(embed(pixels));
  }

  template <typename Fn>
  void for_each_param(Fn&& fn) {
    fn("patch_w", patch_w_);
    fn("patch_b", patch_b_);
    fn("pos", pos_);
    for (std::size_t i = 0; i < layers_.size(); ++i) {
      auto& l = layers_[i];
      std::string p = "l" + std::to_string(i) + ".";
      fn(p + "ln1_g", l.ln1_g);
      fn(p + "ln1_b", l.ln1_b);
      fn(p + "wq", l.wq);
      fn(p + "bq", l.bq);
      fn(p + "wk", l.wk);
      fn(p + "bk", l.bk);
      fn(p + "wv", l.wv);
      fn(p + "bv", l.bv);
      fn(p + "wo", l.wo);
      fn(p + "bo", l.bo);
      fn(p + "ln2_g", l.ln2_g);
      fn(p + "ln2_b", l.ln2_b);
      fn(p + "w1", l.w1);
      fn(p + "b1", l.b1);
      fn(p + "w2", l.w2);
      fn(p + "b2", l.b2);
    }
    fn("final_g", final_g_);
    fn("final_b", final_b_);
  }

  std::vector<Tensor<T>> params() {
    std::vector<Tensor<T>> out;
    for_each_param([&](const std::string&, Tensor<T>& t) { out.push_back(t); });
    return out;
  }

  void freeze() {
    for_each_param([](const std::string&, Tensor<T>& t) {
      t.set_requires_grad(false);
      t.clear_grad();
    });
  }

  TensorStore to_store() {
    TensorStore s;
    for_each_param([&](const std::string& name, Tensor<T>& t) { s.put(name, t); });
    return s;
  }

  std::uint64_t checksum() { return to_store().checksum(); }

  void save(const fs::path& dir) {
    fs::create_directories(dir);
    TensorStore s = to_store();
    s.save(dir / "weights.bin");
    json j = cfg_.to_json();
    j["frozen_hash"] = hex64(s.checksum());
    save_json(dir / "backbone.json", j);
  }

  static Backbone load(const fs::path& dir, bool trainable = false) {
    Backbone b;
    json meta = load_json(dir / "backbone.json");
    b.cfg_ = BackboneConfig::from_json(meta);
    b.layers_.resize(b.cfg_.depth);
    TensorStore s = TensorStore::load(dir / "weights.bin");
    if (meta.contains("frozen_hash"))
      check(meta.at("frozen_hash") == hex64(s.checksum()), "backbone: frozen hash mismatch in " + dir.string());
    b.for_each_param([&](const std::string& name, Tensor<T>& t) {
      t = s.template get_tensor<T>(name, trainable);
    });
    return b;
  }

 private:
  struct Layer {
    Tensor<T> ln1_g, ln1_b, wq, bq, wk, bk, wv, bv, wo, bo, ln2_g, ln2_b, w1, b1, w2, b2;
  };

  static std::vector<T> randn_vec(std::size_t n, Rng& rng, T s) {
    std::vector<T> v(n);
    for (auto& x : v) x = s * static_cast<T>(rng.normal());
    return v;
  }
  static Tensor<T> ones(Shape sh) { return Tensor<T>::param(sh, std::vector<T>(shape_numel(sh), T(1))); }
  static Tensor<T> zeros_p(Shape sh) { return Tensor<T>::param(sh, std::vector<T>(shape_numel(sh), T(0))); }

  Tensor<T> block(const Layer& l, const Tensor<T>& x) const {
    std::size_t hd = cfg_.dim / cfg_.heads;
    Tensor<T> h = layer_norm_rows(x, l.ln1_g, l.ln1_b);
    Tensor<T> q = add_rowvec(matmul(h, l.wq), l.bq);
    Tensor<T> k = add_rowvec(matmul(h, l.wk), l.bk);
    Tensor<T> v = add_rowvec(matmul(h, l.wv), l.bv);
    std::vector<Tensor<T>> head_out;
    head_out.reserve(cfg_.heads);
    T inv_sqrt = T(1) / std::sqrt(static_cast<T>(hd));
    for (std::size_t hidx = 0; hidx < cfg_.heads; ++hidx) {
      Tensor<T> qh = slice_cols(q, hidx * hd, hd);
      Tensor<T> kh = slice_cols(k, hidx * hd, hd);
      Tensor<T> vh = slice_cols(v, hidx * hd, hd);
      Tensor<T> attn = softmax_rows(scale(matmul_nt(qh, kh), inv_sqrt));
      head_out.push_back(matmul(attn, vh));
    }
    Tensor<T> att = add_rowvec(matmul(concat_cols(head_out), l.wo), l.bo);
    Tensor<T> x1 = add(x, att);
    Tensor<T> h2 = layer_norm_rows(x1, l.ln2_g, l.ln2_b);
    Tensor<T> m = add_rowvec(matmul(gelu(add_rowvec(matmul(h2, l.w1), l.b1)), l.w2), l.b2);
    return add(x1, m);
  }

  BackboneConfig cfg_;
  Tensor<T> patch_w_, patch_b_, pos_;
  std::vector<Layer> layers_;
  Tensor<T> final_g_, final_b_;
};

}  // namespace hprompt
