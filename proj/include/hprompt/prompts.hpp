#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "hprompt/backbone.hpp"
#include "hprompt/rng.hpp"
#include "hprompt/serialize.hpp"
#include "hprompt/tensor.hpp"

namespace hprompt {

/// Per-class diagonal Gaussian over sequence embeddings [L, D]. The learnable
/// state is the mean and the log of the per-element standard deviation, which
/// keeps the deviation positive by construction.
template <typename T>
class ClassPrompt {
 public:
  ClassPrompt() = default;

  ClassPrompt(std::size_t task_index, std::size_t class_index_global, std::size_t seq_len, std::size_t dim,
              Rng& rng, T init_std, T init_log_sigma)
      : task_index_(task_index), class_index_global_(class_index_global) {
    std::vector<T> m(seq_len * dim);
    for (auto& v : m) v = init_std * static_cast<T>(rng.normal());
    mu_ = Tensor<T>::param({seq_len, dim}, std::move(m));
    log_sigma_ = Tensor<T>::param({seq_len, dim}, std::vector<T>(seq_len * dim, init_log_sigma));
  }

  ClassPrompt(std::size_t task_index, std::size_t class_index_global, Tensor<T> mu, Tensor<T> log_sigma)
      : task_index_(task_index),
        class_index_global_(class_index_global),
        mu_(std::move(mu)),
        log_sigma_(std::move(log_sigma)) {
    check(mu_.shape() == log_sigma_.shape(), "class prompt: mean/log-sigma shape mismatch");
  }

  /// Reparameterized draw: mu + exp(log_sigma) * eps with eps ~ N(0, I).
  /// Gradients reach the mean and log-sigma, never the noise.
  Tensor<T> sample(Rng& rng) const {
    Tensor<T> eps = Tensor<T>::randn(mu_.shape(), rng);
    return gaussian_reparam_sample(mu_, log_sigma_, eps);
  }

  std::size_t task_index() const { return task_index_; }
  std::size_t class_index_global() const { return class_index_global_; }
  const Tensor<T>& mu() const { return mu_; }
  const Tensor<T>& log_sigma() const { return log_sigma_; }
  Tensor<T>& mu() { return mu_; }
  Tensor<T>& log_sigma() { return log_sigma_; }

  std::vector<Tensor<T>> params() { return {mu_, log_sigma_}; }

  void freeze() {
    mu_.set_requires_grad(false);
    mu_.clear_grad();
    log_sigma_.set_requires_grad(false);
    log_sigma_.clear_grad();
  }

 private:
  std::size_t task_index_ = 0, class_index_global_ = 0;
  Tensor<T> mu_, log_sigma_;
};

/// Alias documenting the replay op on a class prompt.
template <typename T>
Tensor<T> sample_virtual_embedding(const ClassPrompt<T>& cp, Rng& rng) {
  return cp.sample(rng);
}

/// Linear classification head that grows by whole classes; each class owns an
/// independent weight row and bias so past rows persist as the head grows.
template <typename T>
class LinearHead {
 public:
  LinearHead() = default;
  explicit LinearHead(std::size_t dim) : dim_(dim) {}

  void add_classes(std::size_t n, Rng& rng, T init_std = T(0.02)) {
    for (std::size_t i = 0; i < n; ++i) {
      std::vector<T> row(dim_);
      for (auto& v : row) v = init_std * static_cast<T>(rng.normal());
      rows_.push_back(Tensor<T>::param({std::size_t(1), dim_}, std::move(row)));
      biases_.push_back(Tensor<T>::param({std::size_t(1), std::size_t(1)}, {T(0)}));
    }
  }

  std::size_t num_classes() const { return rows_.size(); }
  std::size_t dim() const { return dim_; }

  /// [C, D] weight matrix assembled from the per-class rows.
  Tensor<T> weight() const { return concat_rows(rows_); }
  /// [C] bias vector.
  Tensor<T> bias() const { return reshape(concat_rows(biases_), {biases_.size()}); }

  /// features [B, D] -> logits [B, C]
  Tensor<T> logits(const Tensor<T>& features) const {
    check(features.shape().size() == 2 && features.cols() == dim_, "head: feature dim mismatch");
    check(!rows_.empty(), "head: no classes");
    return add_rowvec(matmul_nt(features, weight()), bias());
  }

  /// Same logits but through detached parameters: gradients stop at the head.
  Tensor<T> logits_detached(const Tensor<T>& features) const {
    check(features.shape().size() == 2 && features.cols() == dim_, "head: feature dim mismatch");
    check(!rows_.empty(), "head: no classes");
    return add_rowvec(matmul_nt(features, weight().detach()), bias().detach());
  }

  /// feature [D] -> logits [C]
  Tensor<T> logits_one(const Tensor<T>& feature) const {
    check(feature.shape().size() == 1 && feature.numel() == dim_, "head: feature dim mismatch");
    return reshape(logits(reshape(feature, {std::size_t(1), dim_})), {rows_.size()});
  }

  std::vector<Tensor<T>> params() {
    std::vector<Tensor<T>> out;
    out.reserve(rows_.size() * 2);
    for (auto& r : rows_) out.push_back(r);
    for (auto& b : biases_) out.push_back(b);
    return out;
  }

  void put_into(TensorStore& s, const std::string& prefix) const {
    for (std::size_t i = 0; i < rows_.size(); ++i) {
      s.put(prefix + "w" + std::to_string(i), rows_[i]);
      s.put(prefix + "b" + std::to_string(i), biases_[i]);
    }
  }

  static LinearHead from_store(const TensorStore& s, const std::string& prefix, std::size_t dim,
                               bool trainable) {
    LinearHead h(dim);
    for (std::size_t i = 0; s.has(prefix + "w" + std::to_string(i)); ++i) {
      h.rows_.push_back(s.get_tensor<T>(prefix + "w" + std::to_string(i), trainable));
      h.biases_.push_back(s.get_tensor<T>(prefix + "b" + std::to_string(i), trainable));
    }
    return h;
  }

 private:
  std::size_t dim_ = 0;
  std::vector<Tensor<T>> rows_;
  std::vector<Tensor<T>> biases_;
};

/// Everything one task leaves behind: its prompts, its class Gaussians, its
/// global label range, and the query keys used for task selection at test
/// time (plus the promptless-query variant kept for analysis).
template <typename T>
struct TaskState {
  std::size_t task_index = 0;   // 1-based
  std::size_t class_offset = 0; // first global class id of this task
  std::size_t num_classes = 0;

  std::vector<Tensor<T>> task_prompt;     // depth_t entries [Lt, D]
  std::vector<Tensor<T>> general_prompt;  // depth_g entries [Lg, D]
  std::vector<ClassPrompt<T>> class_prompts;
  Tensor<T> keys;        // [K, D], task-aware queries, set after training
  Tensor<T> naive_keys;  // [K, D], promptless-backbone queries

  PromptStack<T> stack() const { return PromptStack<T>{general_prompt, task_prompt}; }

  /// Prompt stack with gradients blocked, for phases that hold prompts fixed.
  PromptStack<T> stack_detached() const {
    PromptStack<T> s;
    for (const auto& g : general_prompt) s.general.push_back(g.detach());
    for (const auto& t : task_prompt) s.task.push_back(t.detach());
    return s;
  }

  /// Task prompt trainable, general prompt blocked: the BDA/CKE phase view.
  PromptStack<T> stack_task_live() const {
    PromptStack<T> s;
    for (const auto& g : general_prompt) s.general.push_back(g.detach());
    s.task = task_prompt;
    return s;
  }

  /// General prompt trainable, task prompt blocked: the GKE phase view.
  PromptStack<T> stack_general_live() const {
    PromptStack<T> s;
    s.general = general_prompt;
    for (const auto& t : task_prompt) s.task.push_back(t.detach());
    return s;
  }

  void freeze() {
    for (auto& t : task_prompt) {
      t.set_requires_grad(false);
      t.clear_grad();
    }
    freeze_general();
    for (auto& c : class_prompts) c.freeze();
  }

  void freeze_general() {
    for (auto& g : general_prompt) {
      g.set_requires_grad(false);
      g.clear_grad();
    }
  }

  TensorStore to_store() const {
    TensorStore s;
    for (std::size_t l = 0; l < task_prompt.size(); ++l) s.put("t" + std::to_string(l), task_prompt[l]);
    for (std::size_t l = 0; l < general_prompt.size(); ++l) s.put("g" + std::to_string(l), general_prompt[l]);
    for (std::size_t m = 0; m < class_prompts.size(); ++m) {
      s.put("mu" + std::to_string(m), class_prompts[m].mu());
      s.put("logsig" + std::to_string(m), class_prompts[m].log_sigma());
    }
    if (keys.defined()) s.put("keys", keys);
    if (naive_keys.defined()) s.put("keys_naive", naive_keys);
    return s;
  }

  std::uint64_t checksum() const { return to_store().checksum(); }

  void save(const fs::path& dir) const {
    fs::create_directories(dir);
    TensorStore s = to_store();
    s.save(dir / "state.bin");
    json meta;
    meta["task_index"] = task_index;
    meta["class_offset"] = class_offset;
    meta["num_classes"] = num_classes;
    meta["depth_t"] = task_prompt.size();
    meta["depth_g"] = general_prompt.size();
    meta["has_keys"] = keys.defined();
    meta["has_naive_keys"] = naive_keys.defined();
    meta["checksum_fnv1a64"] = hex64(s.checksum());
    save_json(dir / "task.json", meta);
  }

  static TaskState load(const fs::path& dir) {
    TaskState st;
    json meta = load_json(dir / "task.json");
    st.task_index = meta.at("task_index");
    st.class_offset = meta.at("class_offset");
    st.num_classes = meta.at("num_classes");
    TensorStore s = TensorStore::load(dir / "state.bin");
    std::string want = meta.at("checksum_fnv1a64");
    check(want == hex64(s.checksum()), "task state: checksum mismatch in " + dir.string());
    std::size_t dt = meta.at("depth_t"), dg = meta.at("depth_g");
    for (std::size_t l = 0; l < dt; ++l) st.task_prompt.push_back(s.get_tensor<T>("t" + std::to_string(l)));
    for (std::size_t l = 0; l < dg; ++l)
      st.general_prompt.push_back(s.get_tensor<T>("g" + std::to_string(l)));
    for (std::size_t m = 0; s.has("mu" + std::to_string(m)); ++m)
      st.class_prompts.emplace_back(st.task_index, st.class_offset + m,
                                    s.get_tensor<T>("mu" + std::to_string(m)),
                                    s.get_tensor<T>("logsig" + std::to_string(m)));
    if (meta.at("has_keys").template get<bool>()) st.keys = s.get_tensor<T>("keys");
    if (meta.at("has_naive_keys").template get<bool>()) st.naive_keys = s.get_tensor<T>("keys_naive");
    return st;
  }
};

struct PromptDims {
  std::size_t depth_t = 2, len_t = 5, depth_g = 1, len_g = 1;
  double init_std = 0.02, init_log_sigma = -2.0;
};

/// Fresh trainable prompts for a new task.
template <typename T>
TaskState<T> init_task_state(std::size_t task_index, std::size_t class_offset, std::size_t num_classes,
                             const PromptDims& dims, std::size_t seq_len, std::size_t embed_dim, Rng& rng,
                             bool with_class_prompts) {
  TaskState<T> st;
  st.task_index = task_index;
  st.class_offset = class_offset;
  st.num_classes = num_classes;
  auto istd = static_cast<T>(dims.init_std);
  for (std::size_t l = 0; l < dims.depth_t; ++l) {
    st.task_prompt.push_back(Tensor<T>::randn({dims.len_t, embed_dim}, rng, istd));
    st.task_prompt.back().set_requires_grad(true);
  }
  for (std::size_t l = 0; l < dims.depth_g; ++l) {
    st.general_prompt.push_back(Tensor<T>::randn({dims.len_g, embed_dim}, rng, istd));
    st.general_prompt.back().set_requires_grad(true);
  }
  if (with_class_prompts)
    for (std::size_t m = 0; m < num_classes; ++m)
      st.class_prompts.emplace_back(task_index, class_offset + m, seq_len, embed_dim, rng, istd,
                                    static_cast<T>(dims.init_log_sigma));
  return st;
}

}  // namespace hprompt
