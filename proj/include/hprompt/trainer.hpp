#pragma once

#include <numeric>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "hprompt/backbone.hpp"
#include "hprompt/config.hpp"
#include "hprompt/data.hpp"
#include "hprompt/inference.hpp"
#include "hprompt/losses.hpp"
#include "hprompt/metrics.hpp"
#include "hprompt/optim.hpp"
#include "hprompt/prompts.hpp"
#include "hprompt/serialize.hpp"

namespace hprompt {

/// One optimizer step's worth of loss values; absent columns were inactive.
struct StepLog {
  std::size_t task = 0;   // 1-based task position, 0 during backbone pretraining
  std::size_t epoch = 0;  // 1-based within the task schedule
  std::size_t step = 0;   // 1-based batch counter within the epoch
  std::string phase;      // pretrain | gke | bda | cke | ftseq
  std::optional<double> l_cls, l_dis, l_dec, l_rea, l_vir, l_gke;
};

/// End-of-epoch adversarial diagnostics during the alignment phase.
struct EpochTrace {
  std::size_t task = 0, epoch = 0;
  double alignment = 0;        // mean per-class cos(virtual-rep mean, real-rep mean)
  double disc_separation = 0;  // discriminator real/virtual separation accuracy
  double deception_ce = 0;     // generator cross-entropy against true labels
};

namespace detail {

inline std::string csv_num(double v) {
  std::ostringstream os;
  os.precision(12);
  os << v;
  return os.str();
}

inline std::string csv_cell(const std::optional<double>& v) {
  return v ? csv_num(*v) : std::string();
}

inline std::vector<std::size_t> shuffled_indices(std::size_t n, Rng& rng) {
  std::vector<std::size_t> idx(n);
  std::iota(idx.begin(), idx.end(), std::size_t(0));
  for (std::size_t i = n; i > 1; --i) std::swap(idx[i - 1], idx[rng.randint(i)]);
  return idx;
}

inline double cosine(const std::vector<double>& a, const std::vector<double>& b) {
  double dot = 0, na = 0, nb = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    dot += a[i] * b[i];
    na += a[i] * a[i];
    nb += b[i] * b[i];
  }
  if (na == 0 || nb == 0) return 0;
  return dot / (std::sqrt(na) * std::sqrt(nb));
}

}  // namespace detail

inline void write_losses_csv(const fs::path& path, const std::vector<StepLog>& logs) {
  std::ofstream out(path, std::ios::trunc);
  check(out.good(), "cannot write " + path.string());
  out << "task,epoch,step,phase,l_cls,l_dis,l_dec,l_rea,l_vir,l_gke\n";
  for (const auto& s : logs)
    out << s.task << ',' << s.epoch << ',' << s.step << ',' << s.phase << ','
        << detail::csv_cell(s.l_cls) << ',' << detail::csv_cell(s.l_dis) << ','
        << detail::csv_cell(s.l_dec) << ',' << detail::csv_cell(s.l_rea) << ','
        << detail::csv_cell(s.l_vir) << ',' << detail::csv_cell(s.l_gke) << '\n';
  check(out.good(), "failed writing " + path.string());
}

inline void write_alignment_csv(const fs::path& path, const std::vector<EpochTrace>& traces) {
  std::ofstream out(path, std::ios::trunc);
  check(out.good(), "cannot write " + path.string());
  out << "task,epoch,alignment,disc_separation,deception_ce\n";
  for (const auto& t : traces)
    out << t.task << ',' << t.epoch << ',' << detail::csv_num(t.alignment) << ','
        << detail::csv_num(t.disc_separation) << ',' << detail::csv_num(t.deception_ce) << '\n';
  check(out.good(), "failed writing " + path.string());
}

/// Builds the benchmark named by the config: procedural (seeded from the
/// master seed) or the external manifest format. Joint mode collapses the
/// continual sequence into a single task before any training sees it.
inline SplitBenchmark prepare_benchmark(const ExperimentConfig& cfg) {
  SplitBenchmark b;
  if (!cfg.dataset_manifest.empty()) {
    b = load_external_dataset(cfg.dataset_manifest);
  } else {
    BenchmarkSpec s = cfg.data;
    s.seed = derive_seed(cfg.seed, tag_seed("data"));
    s.height = cfg.backbone.image;
    s.width = cfg.backbone.image;
    s.channels = cfg.backbone.channels;
    b = generate_synthetic_benchmark(s);
  }
  b.check_disjoint();
  check(b.height == cfg.backbone.image && b.width == cfg.backbone.image &&
            b.channels == cfg.backbone.channels,
        "benchmark image shape does not match the backbone configuration");
  if (cfg.mode == "joint" && b.tasks.size() > 1) {
    TaskData merged;
    for (const auto& t : b.tasks) {
      merged.class_ids.insert(merged.class_ids.end(), t.class_ids.begin(), t.class_ids.end());
      merged.train.insert(merged.train.end(), t.train.begin(), t.train.end());
      merged.test.insert(merged.test.end(), t.test.begin(), t.test.end());
    }
    b.tasks.assign(1, std::move(merged));
  }
  return b;
}

/// Deterministic metrics payload shared by training and re-evaluation; it
/// must not contain anything run-dependent beyond the numbers themselves.
inline json build_metrics_json(const ExperimentConfig& cfg, const AccuracyMatrix& acc,
                               const std::vector<double>& task_id_acc, std::size_t num_classes,
                               std::optional<double> naive_task_id, std::optional<double> naive_avg,
                               std::optional<double> oracle_avg) {
  json m;
  m["mode"] = cfg.mode;
  m["precision"] = cfg.precision;
  m["seed"] = cfg.seed;
  m["num_tasks"] = acc.num_tasks();
  m["num_classes"] = num_classes;
  m["average_accuracy"] = acc.average_accuracy();
  m["forgetting"] = acc.num_tasks() >= 2 ? json(acc.forgetting()) : json(nullptr);
  std::vector<double> final_row;
  for (std::size_t t = 0; t < acc.num_tasks(); ++t) final_row.push_back(acc.get(acc.num_tasks() - 1, t));
  m["final_per_task_accuracy"] = final_row;
  m["task_id_accuracy_per_task"] = task_id_acc;
  m["task_id_accuracy"] = task_id_acc.empty() ? json(nullptr) : json(task_id_acc.back());
  m["naive_task_id_accuracy"] = naive_task_id ? json(*naive_task_id) : json(nullptr);
  m["naive_average_accuracy"] = naive_avg ? json(*naive_avg) : json(nullptr);
  m["oracle_average_accuracy"] = oracle_avg ? json(*oracle_avg) : json(nullptr);
  return m;
}

/// Sequential continual-learning driver. Owns the frozen backbone, the
/// per-task prompt states, the growing classifier, and every diagnostic the
/// run leaves behind. All randomness flows from the config seed through named
/// substreams, so a config fully determines the result.
template <typename T>
class Trainer {
 public:
  explicit Trainer(ExperimentConfig cfg) : cfg_(std::move(cfg)) { cfg_.validate(); }

  void prepare() {
    check(!prepared_, "trainer: prepare called twice");
    bench_ = prepare_benchmark(cfg_);
    prepare_backbone();
    cc_ = LinearHead<T>(backbone_.dim());
    acc_ = AccuracyMatrix(bench_.tasks.size());
    prepared_ = true;
  }

  void run_sequence() {
    check(prepared_, "trainer: prepare before run_sequence");
    check(!ran_, "trainer: run_sequence called twice");
    for (std::size_t pos = 0; pos < bench_.tasks.size(); ++pos) run_task(pos);
    ran_ = true;
  }

  void run() {
    prepare();
    run_sequence();
  }

  void save_artifacts(const fs::path& dir) {
    check(ran_, "trainer: nothing to save before a run");
    fs::create_directories(dir);
    save_json(dir / "config.json", cfg_.to_json());
    backbone_.save(dir / "backbone");
    for (const auto& st : states_) st.save(dir / ("task_" + std::to_string(st.task_index)));
    TensorStore cs;
    cc_.put_into(cs, "");
    cs.save(dir / "classifier.bin");
    json cmeta;
    cmeta["dim"] = cc_.dim();
    cmeta["num_classes"] = cc_.num_classes();
    cmeta["checksum_fnv1a64"] = hex64(cs.checksum());
    save_json(dir / "classifier.json", cmeta);
    write_losses_csv(dir / "losses.csv", logs_);
    write_alignment_csv(dir / "alignment.csv", traces_);
    save_json(dir / "acc_matrix.json", acc_.to_json());
    save_json(dir / "metrics.json", metrics_json());
    write_predictions_csv(dir / "predictions.csv", final_records_);
  }

  json metrics_json() const {
    check(ran_, "trainer: metrics before a run");
    return build_metrics_json(cfg_, acc_, task_id_acc_, bench_.num_continual_classes(),
                              naive_task_id_acc_, naive_avg_acc_, oracle_avg_acc_);
  }

  const ExperimentConfig& config() const { return cfg_; }
  const SplitBenchmark& benchmark() const { return bench_; }
  Backbone<T>& backbone() { return backbone_; }
  std::uint64_t backbone_hash() const { return backbone_hash_; }
  const std::vector<TaskState<T>>& states() const { return states_; }
  std::vector<TaskState<T>>& states() { return states_; }
  const std::vector<std::uint64_t>& state_hashes() const { return state_hashes_; }
  const std::vector<std::uint64_t>& general_hashes() const { return general_hashes_; }
  LinearHead<T>& classifier() { return cc_; }
  const AccuracyMatrix& accuracy() const { return acc_; }
  const std::vector<double>& task_id_accuracy() const { return task_id_acc_; }
  std::optional<double> naive_task_id_accuracy() const { return naive_task_id_acc_; }
  std::optional<double> naive_average_accuracy() const { return naive_avg_acc_; }
  std::optional<double> oracle_average_accuracy() const { return oracle_avg_acc_; }
  std::optional<double> pretrain_test_accuracy() const { return pretrain_test_accuracy_; }
  const std::vector<StepLog>& step_logs() const { return logs_; }
  const std::vector<EpochTrace>& traces() const { return traces_; }
  const std::vector<EvalRecord>& final_records() const { return final_records_; }

 private:
  // ---- setup ---------------------------------------------------------

  void prepare_backbone() {
    if (!cfg_.backbone_load.empty()) {
      backbone_ = Backbone<T>::load(cfg_.backbone_load, false);
      check(backbone_.config().to_json() == cfg_.backbone.to_json(),
            "backbone checkpoint does not match the configured architecture");
    } else {
      Rng rb(derive_seed(cfg_.seed, tag_seed("backbone")));
      backbone_ = Backbone<T>(cfg_.backbone, rb);
      pretrain_backbone();
    }
    backbone_.freeze();
    backbone_hash_ = backbone_.checksum();
  }

  void pretrain_backbone() {
    const TaskData& pre = bench_.pretrain;
    if (cfg_.pretrain_epochs == 0 || pre.train.empty()) return;
    std::vector<std::size_t> sorted_ids(pre.class_ids);
    std::sort(sorted_ids.begin(), sorted_ids.end());
    auto local_of = [&](std::size_t global) {
      auto it = std::lower_bound(sorted_ids.begin(), sorted_ids.end(), global);
      check(it != sorted_ids.end() && *it == global, "pretraining sample with unknown class id");
      return static_cast<std::size_t>(it - sorted_ids.begin());
    };
    Rng rp(derive_seed(cfg_.seed, tag_seed("pretrain")));
    LinearHead<T> head(backbone_.dim());
    head.add_classes(sorted_ids.size(), rp, static_cast<T>(cfg_.prompts.init_std));
    std::vector<Tensor<T>> params = backbone_.params();
    for (auto& p : head.params()) params.push_back(p);
    Adam<T> opt(params, static_cast<T>(cfg_.pretrain_lr));
    for (std::size_t e = 1; e <= cfg_.pretrain_epochs; ++e) {
      Rng sh(derive_seed(cfg_.seed, tag_seed("pretrain-shuffle"), e));
      auto idx = detail::shuffled_indices(pre.train.size(), sh);
      std::size_t step = 0;
      for (std::size_t at = 0; at < idx.size(); at += cfg_.pretrain_batch) {
        std::size_t bsz = std::min(cfg_.pretrain_batch, idx.size() - at);
        std::vector<Tensor<T>> rows;
        std::vector<std::size_t> labels;
        rows.reserve(bsz);
        for (std::size_t k = 0; k < bsz; ++k) {
          const Sample& s = pre.train[idx[at + k]];
          rows.push_back(reshape(backbone_.forward_plain(to_precision<T>(s.pixels)),
                                 {std::size_t(1), backbone_.dim()}));
          labels.push_back(local_of(s.label));
        }
        Tensor<T> loss = cross_entropy_mean(head.logits(concat_rows(rows)), labels);
        opt.zero_grad();
        loss.backward();
        opt.step();
        StepLog row;
        row.task = 0;
        row.epoch = e;
        row.step = ++step;
        row.phase = "pretrain";
        row.l_rea = static_cast<double>(loss.item());
        logs_.push_back(std::move(row));
      }
    }
    backbone_.freeze();
    if (!pre.test.empty()) {
      std::vector<std::size_t> hits(pre.test.size(), 0);
      parallel_for(pre.test.size(), [&](std::size_t i) {
        Tensor<T> logits = head.logits_one(backbone_.forward_plain(to_precision<T>(pre.test[i].pixels)));
        const auto& lv = logits.value();
        std::size_t arg = 0;
        for (std::size_t c = 1; c < lv.size(); ++c)
          if (lv[c] > lv[arg]) arg = c;
        hits[i] = arg == local_of(pre.test[i].label) ? 1 : 0;
      });
      std::size_t total = std::accumulate(hits.begin(), hits.end(), std::size_t(0));
      pretrain_test_accuracy_ = fraction_correct(total, pre.test.size());
    }
  }

  // ---- batch plumbing --------------------------------------------------

  Tensor<T> batch_reps(const TaskData& td, const std::vector<std::size_t>& idx, std::size_t at,
                       std::size_t bsz, const PromptStack<T>& stack) const {
    std::vector<Tensor<T>> rows;
    rows.reserve(bsz);
    for (std::size_t k = 0; k < bsz; ++k) {
      const Sample& s = td.train[idx[at + k]];
      rows.push_back(
          reshape(backbone_.forward(to_precision<T>(s.pixels), stack), {std::size_t(1), backbone_.dim()}));
    }
    return concat_rows(rows);
  }

  struct VirtBatch {
    Tensor<T> reps;  // [B, D]
    std::vector<std::size_t> locals, globals;
  };

  /// Fresh reparameterized draws from a pool of class Gaussians, pushed
  /// through the backbone under the given prompt view. Labels are uniform
  /// over the pool; every draw uses fresh noise.
  VirtBatch sample_virtual_batch(const std::vector<const ClassPrompt<T>*>& pool, std::size_t count,
                                 const PromptStack<T>& stack, std::size_t local_offset, Rng& rng) const {
    check(!pool.empty(), "virtual batch from an empty class-prompt pool");
    VirtBatch vb;
    std::vector<Tensor<T>> rows;
    rows.reserve(count);
    for (std::size_t k = 0; k < count; ++k) {
      const ClassPrompt<T>* cp = pool[rng.randint(pool.size())];
      Tensor<T> femb = sample_virtual_embedding(*cp, rng);
      rows.push_back(reshape(backbone_.forward_seq(femb, stack), {std::size_t(1), backbone_.dim()}));
      vb.globals.push_back(cp->class_index_global());
      check(cp->class_index_global() >= local_offset, "virtual class below the local offset");
      vb.locals.push_back(cp->class_index_global() - local_offset);
    }
    vb.reps = concat_rows(rows);
    return vb;
  }

  std::uint64_t general_checksum(const TaskState<T>& st) const {
    TensorStore s;
    for (std::size_t l = 0; l < st.general_prompt.size(); ++l)
      s.put("g" + std::to_string(l), st.general_prompt[l]);
    return s.checksum();
  }

  // ---- phases ----------------------------------------------------------

  void gke_phase(const TaskData& td, TaskState<T>& st, Sgd<T>& opt_g, std::size_t pos) {
    PromptStack<T> gstack = st.stack_general_live();
    std::uint64_t aug_counter = 0;
    for (std::size_t e = 1; e <= cfg_.e_gke; ++e) {
      Rng sh(derive_seed(cfg_.seed, tag_seed("shuffle"), pos * 1000000 + e));
      auto idx = detail::shuffled_indices(td.train.size(), sh);
      std::size_t step = 0;
      for (std::size_t at = 0; at < idx.size(); at += cfg_.batch_size) {
        std::size_t bsz = std::min(cfg_.batch_size, idx.size() - at);
        std::vector<Tensor<T>> rows;
        std::vector<std::size_t> labels;
        rows.reserve(2 * bsz);
        for (std::size_t k = 0; k < bsz; ++k) {
          const Sample& s = td.train[idx[at + k]];
          std::uint64_t aseed = derive_seed(cfg_.seed, tag_seed("augseq"),
                                            pos * 100000000ull + aug_counter++);
          auto views = augment_pair(s.pixels, bench_.height, bench_.width, bench_.channels, aseed,
                                    cfg_.augment);
          rows.push_back(reshape(backbone_.forward(to_precision<T>(views.first), gstack),
                                 {std::size_t(1), backbone_.dim()}));
          rows.push_back(reshape(backbone_.forward(to_precision<T>(views.second), gstack),
                                 {std::size_t(1), backbone_.dim()}));
          labels.push_back(s.label);
          labels.push_back(s.label);
        }
        Tensor<T> loss = gke_loss(concat_rows(rows), labels, static_cast<T>(cfg_.tau));
        opt_g.zero_grad();
        loss.backward();
        opt_g.step();
        StepLog row;
        row.task = pos + 1;
        row.epoch = e;
        row.step = ++step;
        row.phase = "gke";
        row.l_gke = static_cast<double>(loss.item());
        logs_.push_back(std::move(row));
      }
    }
  }

  EpochTrace measure_epoch(std::size_t pos, std::size_t epoch, const TaskState<T>& st,
                           const LinearHead<T>& disc, const TaskData& td) const {
    constexpr std::size_t kProbeCap = 32;
    EpochTrace tr;
    tr.task = pos + 1;
    tr.epoch = epoch;
    Rng rng(derive_seed(cfg_.seed, tag_seed("probe"), pos * 1000000 + epoch));
    PromptStack<T> stack = st.stack_detached();
    std::size_t cpt = st.num_classes;
    std::size_t d = backbone_.dim();
    double align_sum = 0;
    std::size_t correct = 0, total = 0;
    std::vector<Tensor<T>> virt_rows;
    std::vector<std::size_t> virt_locals;
    for (std::size_t m = 0; m < cpt; ++m) {
      std::vector<const Sample*> probe;
      for (const auto& s : td.train) {
        if (s.label == st.class_offset + m) probe.push_back(&s);
        if (probe.size() >= kProbeCap) break;
      }
      check(!probe.empty(), "no training samples for a task class");
      std::vector<double> real_mean(d, 0), virt_mean(d, 0);
      for (const Sample* s : probe) {
        Tensor<T> rep = backbone_.forward(to_precision<T>(s->pixels), stack);
        const auto& rv = rep.value();
        for (std::size_t i = 0; i < d; ++i) real_mean[i] += static_cast<double>(rv[i]);
        Tensor<T> logits = disc.logits_one(rep);
        const auto& lv = logits.value();
        std::size_t arg = 0;
        for (std::size_t c = 1; c < lv.size(); ++c)
          if (lv[c] > lv[arg]) arg = c;
        if (arg < cpt) ++correct;
        ++total;
      }
      for (std::size_t k = 0; k < probe.size(); ++k) {
        Tensor<T> femb = st.class_prompts[m].sample(rng).detach();
        Tensor<T> rep = backbone_.forward_seq(femb, stack);
        const auto& rv = rep.value();
        for (std::size_t i = 0; i < d; ++i) virt_mean[i] += static_cast<double>(rv[i]);
        virt_rows.push_back(reshape(rep, {std::size_t(1), d}));
        virt_locals.push_back(m);
        Tensor<T> logits = disc.logits_one(rep);
        const auto& lv = logits.value();
        std::size_t arg = 0;
        for (std::size_t c = 1; c < lv.size(); ++c)
          if (lv[c] > lv[arg]) arg = c;
        if (arg >= cpt) ++correct;
        ++total;
      }
      for (auto& v : real_mean) v /= static_cast<double>(probe.size());
      for (auto& v : virt_mean) v /= static_cast<double>(probe.size());
      align_sum += detail::cosine(real_mean, virt_mean);
    }
    tr.alignment = align_sum / static_cast<double>(cpt);
    tr.disc_separation = static_cast<double>(correct) / static_cast<double>(total);
    tr.deception_ce =
        static_cast<double>(cross_entropy_mean(disc.logits(concat_rows(virt_rows)), virt_locals).item());
    return tr;
  }

  void run_ftseq_task(std::size_t pos) {
    const TaskData& td = bench_.tasks[pos];
    Rng rng_init(derive_seed(cfg_.seed, tag_seed("init"), pos));
    cc_.add_classes(td.class_ids.size(), rng_init, static_cast<T>(cfg_.prompts.init_std));
    Adam<T> opt(cc_.params(), static_cast<T>(cfg_.lr_head));
    std::vector<std::vector<T>> feats(td.train.size());
    parallel_for(td.train.size(), [&](std::size_t i) {
      feats[i] = query_plain(backbone_, td.train[i].pixels);
    });
    std::size_t epochs = cfg_.e_max - cfg_.e_gke;
    for (std::size_t e = 1; e <= epochs; ++e) {
      Rng sh(derive_seed(cfg_.seed, tag_seed("shuffle"), pos * 1000000 + e));
      auto idx = detail::shuffled_indices(td.train.size(), sh);
      std::size_t step = 0;
      for (std::size_t at = 0; at < idx.size(); at += cfg_.batch_size) {
        std::size_t bsz = std::min(cfg_.batch_size, idx.size() - at);
        std::vector<T> flat;
        flat.reserve(bsz * backbone_.dim());
        std::vector<std::size_t> labels;
        for (std::size_t k = 0; k < bsz; ++k) {
          const auto& f = feats[idx[at + k]];
          flat.insert(flat.end(), f.begin(), f.end());
          labels.push_back(td.train[idx[at + k]].label);
        }
        Tensor<T> x = Tensor<T>::from({bsz, backbone_.dim()}, std::move(flat));
        Tensor<T> loss = cross_entropy_mean(cc_.logits(x), labels);
        opt.zero_grad();
        loss.backward();
        opt.step();
        StepLog row;
        row.task = pos + 1;
        row.epoch = e;
        row.step = ++step;
        row.phase = "ftseq";
        row.l_rea = static_cast<double>(loss.item());
        logs_.push_back(std::move(row));
      }
    }
    evaluate_after_task(pos);
  }

  void run_task(std::size_t pos) {
    const TaskData& td = bench_.tasks[pos];
    check(!td.train.empty() && !td.test.empty(), "task without train or test data");
    check(!td.class_ids.empty(), "task without classes");
    std::size_t offset = td.class_ids.front();
    for (std::size_t k = 0; k < td.class_ids.size(); ++k)
      check(td.class_ids[k] == offset + k, "task class ids must be contiguous ascending");
    check(cc_.num_classes() == offset, "classifier width out of sync with class offsets");

    if (cfg_.mode == "ftseq") {
      run_ftseq_task(pos);
      return;
    }

    check(states_.size() == pos, "task initialized twice");
    std::size_t cpt = td.class_ids.size();
    Rng rng_init(derive_seed(cfg_.seed, tag_seed("init"), pos));
    states_.push_back(init_task_state<T>(pos + 1, offset, cpt, cfg_.prompts, backbone_.tokens(),
                                         backbone_.dim(), rng_init, cfg_.uses_class_prompts()));
    TaskState<T>& st = states_.back();
    cc_.add_classes(cpt, rng_init, static_cast<T>(cfg_.prompts.init_std));

    bool use_bda = cfg_.uses_class_prompts();
    LinearHead<T> disc(backbone_.dim());
    if (use_bda) disc.add_classes(2 * cpt, rng_init, static_cast<T>(cfg_.prompts.init_std));

    // fresh optimizer state every task
    Adam<T> opt_task(st.task_prompt, static_cast<T>(cfg_.lr_task));
    Adam<T> opt_cc(cc_.params(), static_cast<T>(cfg_.lr_head));
    std::optional<Adam<T>> opt_class, opt_disc;
    if (use_bda) {
      std::vector<Tensor<T>> cps;
      for (auto& cp : st.class_prompts)
        for (auto& p : cp.params()) cps.push_back(p);
      opt_class.emplace(cps, static_cast<T>(cfg_.lr_class));
      opt_disc.emplace(disc.params(), static_cast<T>(cfg_.lr_head));
    }

    // knowledge-acquisition phase for the general prompt, then freeze it
    if (cfg_.uses_general_training() && cfg_.e_gke > 0) {
      Sgd<T> opt_g(st.general_prompt, static_cast<T>(cfg_.lr_general));
      gke_phase(td, st, opt_g, pos);
    }
    st.freeze_general();
    general_hashes_.push_back(general_checksum(st));

    // adversarial alignment + current/past knowledge phase
    std::vector<const ClassPrompt<T>*> current_pool, past_pool;
    for (const auto& cp : st.class_prompts) current_pool.push_back(&cp);
    for (std::size_t v = 0; v < pos; ++v)
      for (const auto& cp : states_[v].class_prompts) past_pool.push_back(&cp);

    Rng rng_virt(derive_seed(cfg_.seed, tag_seed("virt"), pos));
    // baseline alignment row before any adversarial step, epoch-tagged e_gke
    if (use_bda && cfg_.record_alignment && cfg_.e_gke + 1 <= cfg_.e_max)
      traces_.push_back(measure_epoch(pos, cfg_.e_gke, st, disc, td));
    for (std::size_t e = cfg_.e_gke + 1; e <= cfg_.e_max; ++e) {
      Rng sh(derive_seed(cfg_.seed, tag_seed("shuffle"), pos * 1000000 + e));
      auto idx = detail::shuffled_indices(td.train.size(), sh);
      std::size_t step = 0;
      for (std::size_t at = 0; at < idx.size(); at += cfg_.batch_size) {
        std::size_t bsz = std::min(cfg_.batch_size, idx.size() - at);
        ++step;
        std::vector<std::size_t> locals, globals;
        for (std::size_t k = 0; k < bsz; ++k) {
          std::size_t label = td.train[idx[at + k]].label;
          globals.push_back(label);
          locals.push_back(label - offset);
        }
        Tensor<T> real_live = batch_reps(td, idx, at, bsz, st.stack_task_live());

        if (use_bda) {
          // (A) discriminator step: both sides detached, only the head trains
          VirtBatch va = sample_virtual_batch(current_pool, bsz, st.stack_detached(), offset, rng_virt);
          double l_dis = static_cast<double>(head_orthogonality_loss(disc).item());
          Tensor<T> lcls =
              bda_classifier_loss(real_live.detach(), locals, va.reps.detach(), va.locals, disc);
          opt_disc->zero_grad();
          lcls.backward();
          opt_disc->step();

          // (B) deception step: fresh virtual draws, only class prompts train
          VirtBatch vb = sample_virtual_batch(current_pool, bsz, st.stack_detached(), offset, rng_virt);
          Tensor<T> ldec = bda_deception_loss(vb.reps, vb.locals, disc);
          opt_class->zero_grad();
          ldec.backward();
          opt_class->step();

          StepLog row;
          row.task = pos + 1;
          row.epoch = e;
          row.step = step;
          row.phase = "bda";
          row.l_cls = static_cast<double>(lcls.item()) - l_dis;
          row.l_dis = l_dis;
          row.l_dec = static_cast<double>(ldec.item());
          logs_.push_back(std::move(row));
        }

        // (C) current/past step: task prompt and classifier train together
        Tensor<T> virt_reps;
        std::vector<std::size_t> virt_globals;
        std::optional<double> l_vir;
        if (use_bda && !past_pool.empty()) {
          VirtBatch vc = sample_virtual_batch(past_pool, bsz, st.stack_task_live(), 0, rng_virt);
          virt_reps = vc.reps;
          virt_globals = std::move(vc.globals);
          l_vir = static_cast<double>(
              cross_entropy_mean(cc_.logits(virt_reps), virt_globals).item());
        }
        double l_rea = static_cast<double>(cross_entropy_mean(cc_.logits(real_live), globals).item());
        Tensor<T> lcke =
            cke_loss(real_live, globals, virt_reps, virt_globals, cc_, static_cast<T>(cfg_.lambda));
        opt_task.zero_grad();
        opt_cc.zero_grad();
        lcke.backward();
        opt_task.step();
        opt_cc.step();

        StepLog row;
        row.task = pos + 1;
        row.epoch = e;
        row.step = step;
        row.phase = "cke";
        row.l_rea = l_rea;
        row.l_vir = l_vir;
        logs_.push_back(std::move(row));
      }
      if (use_bda && cfg_.record_alignment)
        traces_.push_back(measure_epoch(pos, e, st, disc, td));
    }

    // freeze, build both key sets, hash, and check nothing else moved
    st.freeze();
    Rng rk(derive_seed(cfg_.seed, tag_seed("keys"), pos));
    st.keys = build_task_keys(backbone_, st, td.train, cfg_.o_per_class, rk, cfg_.kmeans_restarts, false);
    Rng rkn(derive_seed(cfg_.seed, tag_seed("keys-naive"), pos));
    st.naive_keys =
        build_task_keys(backbone_, st, td.train, cfg_.o_per_class, rkn, cfg_.kmeans_restarts, true);
    state_hashes_.push_back(st.to_store().checksum());
    check(general_checksum(st) == general_hashes_[pos], "general prompt moved after its freeze point");
    check(backbone_.checksum() == backbone_hash_, "frozen backbone moved during task training");
    for (std::size_t v = 0; v < pos; ++v)
      check(states_[v].to_store().checksum() == state_hashes_[v], "past task state moved during training");

    evaluate_after_task(pos);
  }

  void evaluate_after_task(std::size_t pos) {
    EvalOptions opts;
    opts.prompted = cfg_.mode != "ftseq";
    opts.mask_to_task = cfg_.mask_to_task;
    opts.normalize_query = cfg_.normalize_query;
    SuiteEval se = evaluate_seen_tasks(backbone_, states_, cc_, bench_, pos + 1, opts);
    for (std::size_t t = 0; t <= pos; ++t) acc_.set(pos, t, se.per_task_accuracy[t]);
    task_id_acc_.push_back(se.task_id_accuracy);
    if (pos + 1 == bench_.tasks.size()) {
      final_records_ = std::move(se.records);
      if (opts.prompted) {
        EvalOptions naive = opts;
        naive.naive_keys = true;
        SuiteEval sn = evaluate_seen_tasks(backbone_, states_, cc_, bench_, pos + 1, naive);
        naive_task_id_acc_ = sn.task_id_accuracy;
        naive_avg_acc_ = std::accumulate(sn.per_task_accuracy.begin(), sn.per_task_accuracy.end(), 0.0) /
                         static_cast<double>(sn.per_task_accuracy.size());
        EvalOptions oracle = opts;
        oracle.oracle_task_id = true;
        SuiteEval so = evaluate_seen_tasks(backbone_, states_, cc_, bench_, pos + 1, oracle);
        oracle_avg_acc_ = std::accumulate(so.per_task_accuracy.begin(), so.per_task_accuracy.end(), 0.0) /
                          static_cast<double>(so.per_task_accuracy.size());
      }
    }
  }

  ExperimentConfig cfg_;
  SplitBenchmark bench_;
  Backbone<T> backbone_;
  std::uint64_t backbone_hash_ = 0;
  std::optional<double> pretrain_test_accuracy_;
  std::vector<TaskState<T>> states_;
  std::vector<std::uint64_t> state_hashes_, general_hashes_;
  LinearHead<T> cc_;
  AccuracyMatrix acc_;
  std::vector<double> task_id_acc_;
  std::optional<double> naive_task_id_acc_, naive_avg_acc_, oracle_avg_acc_;
  std::vector<StepLog> logs_;
  std::vector<EpochTrace> traces_;
  std::vector<EvalRecord> final_records_;
  bool prepared_ = false, ran_ = false;
};

/// Per-class agreement between a trained task's virtual samples and the real
/// data: fraction of fresh virtual draws whose nearest real-representation
/// class centroid carries their own label.
template <typename T>
double virtual_nearest_centroid_accuracy(const Backbone<T>& bb, const TaskState<T>& st,
                                         const TaskData& td, std::size_t samples_per_class, Rng& rng) {
  check(!st.class_prompts.empty(), "no class prompts to sample from");
  std::size_t d = bb.dim();
  PromptStack<T> stack = st.stack_detached();
  std::vector<std::vector<double>> centroids(st.num_classes, std::vector<double>(d, 0));
  std::vector<std::size_t> counts(st.num_classes, 0);
  for (const auto& s : td.train) {
    check(s.label >= st.class_offset && s.label < st.class_offset + st.num_classes,
          "sample outside the task label range");
    std::size_t m = s.label - st.class_offset;
    Tensor<T> rep = bb.forward(to_precision<T>(s.pixels), stack);
    const auto& rv = rep.value();
    for (std::size_t i = 0; i < d; ++i) centroids[m][i] += static_cast<double>(rv[i]);
    ++counts[m];
  }
  for (std::size_t m = 0; m < st.num_classes; ++m) {
    check(counts[m] > 0, "class without training samples");
    for (auto& v : centroids[m]) v /= static_cast<double>(counts[m]);
  }
  std::size_t hit = 0, total = 0;
  for (std::size_t m = 0; m < st.num_classes; ++m) {
    for (std::size_t k = 0; k < samples_per_class; ++k) {
      Tensor<T> femb = st.class_prompts[m].sample(rng).detach();
      Tensor<T> rep = bb.forward_seq(femb, stack);
      const auto& rv = rep.value();
      std::size_t best = 0;
      double best_d = std::numeric_limits<double>::infinity();
      for (std::size_t c = 0; c < st.num_classes; ++c) {
        double s = 0;
        for (std::size_t i = 0; i < d; ++i) {
          double diff = static_cast<double>(rv[i]) - centroids[c][i];
          s += diff * diff;
        }
        if (s < best_d) {
          best_d = s;
          best = c;
        }
      }
      if (best == m) ++hit;
      ++total;
    }
  }
  return static_cast<double>(hit) / static_cast<double>(total);
}

/// Reloads a finished run directory for re-evaluation.
template <typename T>
struct LoadedRun {
  ExperimentConfig cfg;
  SplitBenchmark bench;
  Backbone<T> backbone;
  std::vector<TaskState<T>> states;
  LinearHead<T> cc;
  AccuracyMatrix acc;
};

template <typename T>
LoadedRun<T> load_run(const fs::path& dir) {
  LoadedRun<T> run;
  run.cfg = ExperimentConfig::load(dir / "config.json");
  run.bench = prepare_benchmark(run.cfg);
  run.backbone = Backbone<T>::load(dir / "backbone", false);
  if (run.cfg.mode != "ftseq")
    for (std::size_t i = 1; i <= run.bench.tasks.size(); ++i)
      run.states.push_back(TaskState<T>::load(dir / ("task_" + std::to_string(i))));
  TensorStore cs = TensorStore::load(dir / "classifier.bin");
  json cmeta = load_json(dir / "classifier.json");
  check(cmeta.at("checksum_fnv1a64") == hex64(cs.checksum()), "classifier checksum mismatch");
  run.cc = LinearHead<T>::from_store(cs, "", run.backbone.dim(), false);
  check(run.cc.num_classes() == cmeta.at("num_classes").get<std::size_t>(),
        "classifier class count mismatch");
  run.acc = AccuracyMatrix::from_json(load_json(dir / "acc_matrix.json"));
  check(run.acc.num_tasks() == run.bench.tasks.size(), "accuracy matrix size mismatch");
  return run;
}

}  // namespace hprompt
