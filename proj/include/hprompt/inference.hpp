#pragma once

#include <atomic>
#include <cstdlib>
#include <fstream>
#include <limits>
#include <mutex>
#include <thread>

#include "hprompt/backbone.hpp"
#include "hprompt/data.hpp"
#include "hprompt/kmeans.hpp"
#include "hprompt/prompts.hpp"

namespace hprompt {

template <typename T>
std::vector<T> to_precision(const std::vector<float>& px) {
  return std::vector<T>(px.begin(), px.end());
}

/// Adapted representation of one image under a task's own prompt stack.
/// Pure over frozen state: same image and state always give the same vector.
template <typename T>
std::vector<T> query(const Backbone<T>& bb, const TaskState<T>& state,
                     const std::vector<float>& pixels) {
  return bb.forward(to_precision<T>(pixels), state.stack()).value();
}

/// Promptless mean-pooled representation from the frozen backbone.
template <typename T>
std::vector<T> query_plain(const Backbone<T>& bb, const std::vector<float>& pixels) {
  return bb.forward_plain(to_precision<T>(pixels)).value();
}

namespace detail {

template <typename T>
void normalize_unit(std::vector<T>& v) {
  double n = 0;
  for (T x : v) n += static_cast<double>(x) * static_cast<double>(x);
  n = std::sqrt(n);
  check(n > 0, "normalize_unit: zero-norm vector");
  for (T& x : v) x = static_cast<T>(x / n);
}

template <typename T>
double min_sq_dist_to_rows(const std::vector<T>& q, const Tensor<T>& keys, bool normalize) {
  check(keys.defined() && keys.shape().size() == 2, "task keys missing");
  std::size_t k = keys.shape()[0], d = keys.shape()[1];
  check(q.size() == d, "query/key dimension mismatch");
  const auto& kv = keys.value();
  double best = std::numeric_limits<double>::infinity();
  for (std::size_t j = 0; j < k; ++j) {
    std::vector<T> row(kv.begin() + j * d, kv.begin() + (j + 1) * d);
    if (normalize) normalize_unit(row);
    double s = 0;
    for (std::size_t c = 0; c < d; ++c) {
      double diff = static_cast<double>(q[c]) - static_cast<double>(row[c]);
      s += diff * diff;
    }
    best = std::min(best, s);
  }
  check(std::isfinite(best), "non-finite key distance");
  return best;
}

}  // namespace detail

/// End-of-task key construction: queries every training image under the
/// task's prompts (or the plain backbone for the naive variant) and clusters
/// the results into o_per_class keys per class.
template <typename T>
Tensor<T> build_task_keys(const Backbone<T>& bb, const TaskState<T>& state,
                          const std::vector<Sample>& train, std::size_t o_per_class, Rng& rng,
                          std::size_t restarts, bool naive = false) {
  std::size_t k = o_per_class * state.num_classes;
  check(k >= 1, "build_task_keys: zero keys requested");
  check(train.size() >= k, "build_task_keys: fewer training images than keys");
  std::vector<std::vector<double>> points(train.size());
  for (std::size_t i = 0; i < train.size(); ++i) {
    std::vector<T> q = naive ? query_plain(bb, train[i].pixels) : query(bb, state, train[i].pixels);
    points[i].assign(q.begin(), q.end());
  }
  KMeansResult res = kmeans_best(points, k, rng, restarts);
  std::size_t d = points[0].size();
  std::vector<T> flat;
  flat.reserve(k * d);
  for (const auto& c : res.centers)
    for (double v : c) flat.push_back(static_cast<T>(v));
  return Tensor<T>::from({k, d}, flat);
}

/// Smallest-distance task selection: for each trained task, the image is
/// queried under that task's prompts and compared against that task's keys by
/// Euclidean distance; ties resolve to the lowest task index.
template <typename T>
std::size_t predict_task_identity(const Backbone<T>& bb, const std::vector<TaskState<T>>& states,
                                  const std::vector<float>& pixels, bool naive = false,
                                  bool normalize = false) {
  check(!states.empty(), "predict_task_identity: no trained tasks");
  std::size_t best_task = 0;
  double best = std::numeric_limits<double>::infinity();
  std::vector<T> plain;
  if (naive) {
    plain = query_plain(bb, pixels);
    if (normalize) detail::normalize_unit(plain);
  }
  for (std::size_t i = 0; i < states.size(); ++i) {
    std::vector<T> q;
    if (naive) {
      q = plain;
    } else {
      q = query(bb, states[i], pixels);
      if (normalize) detail::normalize_unit(q);
    }
    const Tensor<T>& keys = naive ? states[i].naive_keys : states[i].keys;
    double d = detail::min_sq_dist_to_rows(q, keys, normalize);
    if (d < best) {
      best = d;
      best_task = i;
    }
  }
  return best_task;
}

struct EvalOptions {
  bool prompted = true;        // false: plain features, no task selection (classifier-only mode)
  bool naive_keys = false;     // select tasks with promptless queries and naive keys
  bool oracle_task_id = false; // use the true task index instead of key lookup
  bool mask_to_task = false;   // restrict the argmax to the selected task's classes
  bool normalize_query = false;
};

struct EvalRecord {
  std::size_t image_id = 0;
  std::size_t true_class = 0;
  std::size_t predicted_task = 0;
  std::size_t predicted_class = 0;
};

/// One image through the full test path: task selection, prompted forward,
/// argmax over every seen class (unless masking is requested).
template <typename T>
EvalRecord predict_one(const Backbone<T>& bb, const std::vector<TaskState<T>>& states,
                       const LinearHead<T>& cc, const Sample& sample, std::size_t true_task,
                       const EvalOptions& opts) {
  EvalRecord rec;
  rec.true_class = sample.label;
  Tensor<T> rep;
  std::size_t chosen = 0;
  if (opts.prompted) {
    chosen = opts.oracle_task_id
                 ? true_task
                 : predict_task_identity(bb, states, sample.pixels, opts.naive_keys,
                                         opts.normalize_query);
    check(chosen < states.size(), "predict_one: task index out of range");
    rep = bb.forward(to_precision<T>(sample.pixels), states[chosen].stack());
  } else {
    rep = bb.forward_plain(to_precision<T>(sample.pixels));
  }
  Tensor<T> logits = cc.logits_one(rep);
  const auto& lv = logits.value();
  std::size_t lo = 0, hi = lv.size();
  if (opts.prompted && opts.mask_to_task) {
    lo = states[chosen].class_offset;
    hi = std::min(hi, lo + states[chosen].num_classes);
  }
  check(lo < hi, "predict_one: empty logit range");
  std::size_t arg = lo;
  for (std::size_t c = lo + 1; c < hi; ++c)
    if (lv[c] > lv[arg]) arg = c;
  rec.predicted_class = arg;
  rec.predicted_task = chosen;
  return rec;
}

inline std::size_t eval_threads() {
  if (const char* s = std::getenv("HPROMPT_THREADS")) {
    char* end = nullptr;
    long v = std::strtol(s, &end, 10);
    if (end != s && v >= 1) return static_cast<std::size_t>(v);
  }
  unsigned hc = std::thread::hardware_concurrency();
  return hc ? std::min<std::size_t>(hc, 8) : 1;
}

/// Index-parallel loop used only for inference, which is pure over frozen
/// state. Output slots are preassigned so the result order is deterministic.
template <typename F>
void parallel_for(std::size_t n, F&& body) {
  std::size_t nt = std::min(eval_threads(), n);
  if (nt <= 1) {
    for (std::size_t i = 0; i < n; ++i) body(i);
    return;
  }
  std::atomic<std::size_t> next{0};
  std::mutex err_mu;
  std::exception_ptr err;
  auto worker = [&] {
    while (true) {
      std::size_t i = next.fetch_add(1);
      if (i >= n) return;
      try {
        body(i);
      } catch (...) {
        std::lock_guard<std::mutex> lock(err_mu);
        if (!err) err = std::current_exception();
        return;
      }
    }
  };
  std::vector<std::thread> pool;
  pool.reserve(nt);
  for (std::size_t t = 0; t < nt; ++t) pool.emplace_back(worker);
  for (auto& th : pool) th.join();
  if (err) std::rethrow_exception(err);
}

struct TaskEval {
  double accuracy = 0;          // exact-match fraction over the split
  double task_id_accuracy = 0;  // fraction routed to the true task
  std::vector<EvalRecord> records;
};

/// Evaluates one test split. `true_task` is the position of the split within
/// the continual sequence; `class_to_task` maps global class ids to task
/// positions so classifier-only runs still report a routed task.
template <typename T>
TaskEval evaluate_split(const Backbone<T>& bb, const std::vector<TaskState<T>>& states,
                        const LinearHead<T>& cc, const std::vector<Sample>& split,
                        std::size_t true_task, const std::vector<std::size_t>& class_to_task,
                        const EvalOptions& opts, std::size_t image_id_base = 0) {
  check(!split.empty(), "evaluate_split: empty test split");
  TaskEval out;
  out.records.resize(split.size());
  parallel_for(split.size(), [&](std::size_t i) {
    EvalRecord rec = predict_one(bb, states, cc, split[i], true_task, opts);
    rec.image_id = image_id_base + i;
    if (!opts.prompted) {
      check(rec.predicted_class < class_to_task.size(), "evaluate_split: class/task map too small");
      rec.predicted_task = class_to_task[rec.predicted_class];
    }
    out.records[i] = rec;
  });
  std::size_t hit = 0, routed = 0;
  for (const auto& r : out.records) {
    if (r.predicted_class == r.true_class) ++hit;
    if (r.predicted_task == true_task) ++routed;
  }
  out.accuracy = static_cast<double>(hit) / static_cast<double>(split.size());
  out.task_id_accuracy = static_cast<double>(routed) / static_cast<double>(split.size());
  return out;
}

struct SuiteEval {
  std::vector<double> per_task_accuracy;
  double task_id_accuracy = 0;  // over all images of all evaluated splits
  std::vector<EvalRecord> records;
};

/// Evaluates every seen task's test split in sequence order. Image ids are
/// consecutive across splits in that order.
template <typename T>
SuiteEval evaluate_seen_tasks(const Backbone<T>& bb, const std::vector<TaskState<T>>& states,
                              const LinearHead<T>& cc, const SplitBenchmark& bench,
                              std::size_t seen_tasks, const EvalOptions& opts) {
  check(seen_tasks >= 1 && seen_tasks <= bench.tasks.size(), "evaluate_seen_tasks: bad task count");
  std::vector<std::size_t> class_to_task(bench.num_continual_classes(), 0);
  for (std::size_t t = 0; t < bench.tasks.size(); ++t)
    for (std::size_t id : bench.tasks[t].class_ids) class_to_task.at(id) = t;
  SuiteEval out;
  std::size_t base = 0, routed = 0, total = 0;
  for (std::size_t t = 0; t < seen_tasks; ++t) {
    TaskEval te = evaluate_split(bb, states, cc, bench.tasks[t].test, t, class_to_task, opts, base);
    out.per_task_accuracy.push_back(te.accuracy);
    for (const auto& r : te.records) {
      out.records.push_back(r);
      if (r.predicted_task == t) ++routed;
    }
    total += te.records.size();
    base += te.records.size();
  }
  out.task_id_accuracy = total ? static_cast<double>(routed) / static_cast<double>(total) : 0.0;
  return out;
}

inline void write_predictions_csv(const fs::path& path, const std::vector<EvalRecord>& records) {
  std::ofstream out(path, std::ios::trunc);
  check(out.good(), "cannot write " + path.string());
  out << "image_id,true_global_class,predicted_task,predicted_class\n";
  for (const auto& r : records)
    out << r.image_id << ',' << r.true_class << ',' << r.predicted_task << ',' << r.predicted_class
        << '\n';
  check(out.good(), "failed writing " + path.string());
}

}  // namespace hprompt
