#include <chrono>
#include <iomanip>
#include <iostream>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "hprompt/hprompt.hpp"

namespace {

constexpr int kOk = 0;
constexpr int kConfigError = 1;
constexpr int kRuntimeError = 2;
constexpr int kCheckFailure = 3;

using namespace hprompt;

// ---------------------------------------------------------------------------
// gradcheck: finite-difference verification of every differentiable primitive
// and of each training objective through the prompt parameters it trains.
// ---------------------------------------------------------------------------

struct CheckCase {
  std::string name;
  bool ok = false;
  double err = 0;
  std::string detail;
};

using D = double;
using TD = Tensor<double>;

TD rand_const(Shape sh, Rng& rng, double scale = 0.5) {
  std::vector<double> v(shape_numel(sh));
  for (auto& x : v) x = scale * rng.normal();
  return TD::from(sh, std::move(v));
}

TD rand_param(Shape sh, Rng& rng, double scale = 0.5) {
  TD t = rand_const(sh, rng, scale);
  t.set_requires_grad(true);
  return t;
}

/// Reduce an op output to a scalar through a fixed random weighting so
/// degenerate upstream gradients (all-ones) cannot mask backward bugs.
TD weighted(const TD& out, const TD& w) { return sum(mul(out, w)); }

template <typename MakeFn>
void run_case(std::vector<CheckCase>& out, const std::string& name, MakeFn&& make) {
  CheckCase c;
  c.name = name;
  try {
    auto [fn, params] = make();
    GradCheckReport rep = finite_diff_check(fn, params);
    c.ok = rep.ok;
    c.err = rep.max_rel_err;
    c.detail = rep.detail;
  } catch (const std::exception& e) {
    c.ok = false;
    c.detail = e.what();
  }
  out.push_back(std::move(c));
}

using CasePair = std::pair<std::function<TD()>, std::vector<TD>>;

std::vector<CheckCase> gradcheck_suite() {
  std::vector<CheckCase> cases;
  Rng rng(20240917);

  run_case(cases, "add", [&]() -> CasePair {
    TD a = rand_param({3, 4}, rng), b = rand_param({3, 4}, rng), w = rand_const({3, 4}, rng);
    return {[=] { return weighted(add(a, b), w); }, {a, b}};
  });
  run_case(cases, "sub", [&]() -> CasePair {
    TD a = rand_param({3, 4}, rng), b = rand_param({3, 4}, rng), w = rand_const({3, 4}, rng);
    return {[=] { return weighted(sub(a, b), w); }, {a, b}};
  });
  run_case(cases, "mul", [&]() -> CasePair {
    TD a = rand_param({3, 4}, rng), b = rand_param({3, 4}, rng), w = rand_const({3, 4}, rng);
    return {[=] { return weighted(mul(a, b), w); }, {a, b}};
  });
  run_case(cases, "scale", [&]() -> CasePair {
    TD a = rand_param({3, 4}, rng), w = rand_const({3, 4}, rng);
    return {[=] { return weighted(scale(a, 0.7), w); }, {a}};
  });
  run_case(cases, "exp", [&]() -> CasePair {
    TD a = rand_param({2, 3}, rng), w = rand_const({2, 3}, rng);
    return {[=] { return weighted(exp_t(a), w); }, {a}};
  });
  run_case(cases, "gelu", [&]() -> CasePair {
    TD a = rand_param({2, 5}, rng, 1.0), w = rand_const({2, 5}, rng);
    return {[=] { return weighted(gelu(a), w); }, {a}};
  });
  run_case(cases, "sum", [&]() -> CasePair {
    TD a = rand_param({3, 4}, rng);
    return {[=] { return sum(a); }, {a}};
  });
  run_case(cases, "mean", [&]() -> CasePair {
    TD a = rand_param({3, 4}, rng);
    return {[=] { return mean(a); }, {a}};
  });
  run_case(cases, "matmul", [&]() -> CasePair {
    TD a = rand_param({3, 4}, rng), b = rand_param({4, 5}, rng), w = rand_const({3, 5}, rng);
    return {[=] { return weighted(matmul(a, b), w); }, {a, b}};
  });
  run_case(cases, "matmul_nt", [&]() -> CasePair {
    TD a = rand_param({3, 4}, rng), b = rand_param({5, 4}, rng), w = rand_const({3, 5}, rng);
    return {[=] { return weighted(matmul_nt(a, b), w); }, {a, b}};
  });
  run_case(cases, "add_rowvec", [&]() -> CasePair {
    TD a = rand_param({3, 4}, rng), v = rand_param({4}, rng), w = rand_const({3, 4}, rng);
    return {[=] { return weighted(add_rowvec(a, v), w); }, {a, v}};
  });
  run_case(cases, "reshape", [&]() -> CasePair {
    TD a = rand_param({3, 4}, rng), w = rand_const({2, 6}, rng);
    return {[=] { return weighted(reshape(a, {2, 6}), w); }, {a}};
  });
  run_case(cases, "slice_rows", [&]() -> CasePair {
    TD a = rand_param({5, 3}, rng), w = rand_const({3, 3}, rng);
    return {[=] { return weighted(slice_rows(a, std::size_t(1), std::size_t(3)), w); }, {a}};
  });
  run_case(cases, "slice_cols", [&]() -> CasePair {
    TD a = rand_param({3, 5}, rng), w = rand_const({3, 2}, rng);
    return {[=] { return weighted(slice_cols(a, std::size_t(2), std::size_t(2)), w); }, {a}};
  });
  run_case(cases, "concat_rows", [&]() -> CasePair {
    TD a = rand_param({2, 3}, rng), b = rand_param({1, 3}, rng), c = rand_param({3, 3}, rng);
    TD w = rand_const({6, 3}, rng);
    return {[=] { return weighted(concat_rows(std::vector<TD>{a, b, c}), w); }, {a, b, c}};
  });
  run_case(cases, "concat_cols", [&]() -> CasePair {
    TD a = rand_param({2, 2}, rng), b = rand_param({2, 3}, rng), w = rand_const({2, 5}, rng);
    return {[=] { return weighted(concat_cols(std::vector<TD>{a, b}), w); }, {a, b}};
  });
  run_case(cases, "softmax_rows", [&]() -> CasePair {
    TD a = rand_param({3, 4}, rng, 1.0), w = rand_const({3, 4}, rng);
    return {[=] { return weighted(softmax_rows(a), w); }, {a}};
  });
  run_case(cases, "layer_norm_rows", [&]() -> CasePair {
    TD x = rand_param({3, 4}, rng, 1.0), g = rand_param({4}, rng), b = rand_param({4}, rng);
    TD w = rand_const({3, 4}, rng);
    return {[=] { return weighted(layer_norm_rows(x, g, b), w); }, {x, g, b}};
  });
  run_case(cases, "normalize_rows", [&]() -> CasePair {
    TD a = rand_param({3, 4}, rng, 1.0), w = rand_const({3, 4}, rng);
    return {[=] { return weighted(normalize_rows(a), w); }, {a}};
  });
  run_case(cases, "logsumexp_rows_offdiag", [&]() -> CasePair {
    TD a = rand_param({4, 4}, rng, 1.0), w = rand_const({4}, rng);
    return {[=] { return weighted(logsumexp_rows_offdiag(a), w); }, {a}};
  });
  run_case(cases, "cross_entropy", [&]() -> CasePair {
    TD a = rand_param({5}, rng, 1.0);
    return {[=] { return scale(cross_entropy(a, std::size_t(2)), 1.3); }, {a}};
  });
  run_case(cases, "cross_entropy_mean", [&]() -> CasePair {
    TD a = rand_param({3, 4}, rng, 1.0);
    std::vector<std::size_t> labels{0, 3, 1};
    return {[=] { return scale(cross_entropy_mean(a, labels), 1.1); }, {a}};
  });
  run_case(cases, "mean_squared", [&]() -> CasePair {
    TD a = rand_param({2, 3}, rng), b = rand_param({2, 3}, rng);
    return {[=] { return scale(mean_squared(a, b), 0.9); }, {a, b}};
  });
  run_case(cases, "cosine_similarity", [&]() -> CasePair {
    TD a = rand_param({4}, rng, 1.0), b = rand_param({4}, rng, 1.0);
    return {[=] { return scale(cosine_similarity(a, b), 1.2); }, {a, b}};
  });
  run_case(cases, "gaussian_reparam_sample", [&]() -> CasePair {
    TD mu = rand_param({2, 3}, rng), ls = rand_param({2, 3}, rng);
    TD eps = rand_const({2, 3}, rng, 1.0), w = rand_const({2, 3}, rng);
    return {[=] { return weighted(gaussian_reparam_sample(mu, ls, eps), w); }, {mu, ls}};
  });

  // objective-through-prompt paths over a tiny frozen backbone
  BackboneConfig bc;
  bc.image = 8;
  bc.channels = 3;
  bc.patch = 4;
  bc.dim = 8;
  bc.depth = 2;
  bc.heads = 2;
  bc.mlp_ratio = 2;
  Rng brng(42);
  Backbone<double> bb(bc, brng);
  bb.freeze();
  PromptDims dims;
  dims.depth_t = 2;
  dims.len_t = 2;
  dims.depth_g = 1;
  dims.len_g = 1;
  dims.init_std = 0.1;
  dims.init_log_sigma = -1.0;
  TaskState<double> st = init_task_state<double>(1, 0, 2, dims, bb.tokens(), bb.dim(), brng, true);
  LinearHead<double> cc(bb.dim());
  cc.add_classes(2, brng, 0.1);
  LinearHead<double> disc(bb.dim());
  disc.add_classes(4, brng, 0.1);
  std::vector<std::vector<double>> images(2);
  for (auto& img : images) {
    img.resize(bc.image * bc.image * bc.channels);
    for (auto& v : img) v = 0.5 + 0.2 * brng.normal();
  }
  auto image_rows = [&](const PromptStack<double>& stack) {
    std::vector<TD> rows;
    for (const auto& img : images)
      rows.push_back(reshape(bb.forward(img, stack), {std::size_t(1), bb.dim()}));
    return concat_rows(rows);
  };

  run_case(cases, "gke_loss/general_prompt", [&]() -> CasePair {
    std::vector<std::size_t> labels{0, 0, 1, 1};
    std::vector<std::vector<double>> views;
    for (const auto& img : images) {
      views.push_back(img);
      std::vector<double> shifted = img;
      for (auto& v : shifted) v += 0.01;
      views.push_back(shifted);
    }
    auto fn = [&bb, &st, views, labels] {
      PromptStack<double> stack = st.stack_general_live();
      std::vector<TD> rows;
      for (const auto& v : views)
        rows.push_back(reshape(bb.forward(v, stack), {std::size_t(1), bb.dim()}));
      return gke_loss(concat_rows(rows), labels, 0.5);
    };
    return {fn, st.general_prompt};
  });

  run_case(cases, "cke_loss/task_prompt", [&]() -> CasePair {
    std::vector<std::size_t> labels{0, 1};
    TD eps0 = rand_const({bb.tokens(), bb.dim()}, rng, 1.0);
    TD eps1 = rand_const({bb.tokens(), bb.dim()}, rng, 1.0);
    auto fn = [&bb, &st, &cc, eps0, eps1, labels, this_images = images] {
      PromptStack<double> stack = st.stack_task_live();
      std::vector<TD> rows;
      for (const auto& img : this_images)
        rows.push_back(reshape(bb.forward(img, stack), {std::size_t(1), bb.dim()}));
      TD real = concat_rows(rows);
      TD f0 = gaussian_reparam_sample(st.class_prompts[0].mu().detach(),
                                      st.class_prompts[0].log_sigma().detach(), eps0);
      TD f1 = gaussian_reparam_sample(st.class_prompts[1].mu().detach(),
                                      st.class_prompts[1].log_sigma().detach(), eps1);
      TD virt = concat_rows(std::vector<TD>{reshape(bb.forward_seq(f0, stack), {std::size_t(1), bb.dim()}),
                                            reshape(bb.forward_seq(f1, stack), {std::size_t(1), bb.dim()})});
      return cke_loss(real, labels, virt, std::vector<std::size_t>{0, 1}, cc, 0.1);
    };
    return {fn, st.task_prompt};
  });

  run_case(cases, "cke_loss/classifier", [&]() -> CasePair {
    std::vector<std::size_t> labels{0, 1};
    auto fn = [&bb, &st, &cc, this_images = images, labels] {
      PromptStack<double> stack = st.stack_detached();
      std::vector<TD> rows;
      for (const auto& img : this_images)
        rows.push_back(reshape(bb.forward(img, stack), {std::size_t(1), bb.dim()}));
      return cke_loss(concat_rows(rows), labels, TD(), std::vector<std::size_t>{}, cc, 0.1);
    };
    return {fn, cc.params()};
  });

  run_case(cases, "bda_deception_loss/class_prompt", [&]() -> CasePair {
    TD eps0 = rand_const({bb.tokens(), bb.dim()}, rng, 1.0);
    TD eps1 = rand_const({bb.tokens(), bb.dim()}, rng, 1.0);
    auto fn = [&bb, &st, &disc, eps0, eps1] {
      PromptStack<double> stack = st.stack_detached();
      TD f0 = gaussian_reparam_sample(st.class_prompts[0].mu(), st.class_prompts[0].log_sigma(), eps0);
      TD f1 = gaussian_reparam_sample(st.class_prompts[1].mu(), st.class_prompts[1].log_sigma(), eps1);
      TD virt = concat_rows(std::vector<TD>{reshape(bb.forward_seq(f0, stack), {std::size_t(1), bb.dim()}),
                                            reshape(bb.forward_seq(f1, stack), {std::size_t(1), bb.dim()})});
      return bda_deception_loss(virt, std::vector<std::size_t>{0, 1}, disc);
    };
    return {fn, st.class_prompts[0].params()};
  });

  run_case(cases, "bda_classifier_loss/discriminator", [&]() -> CasePair {
    TD real = image_rows(st.stack_detached()).detach();
    TD eps0 = rand_const({bb.tokens(), bb.dim()}, rng, 1.0);
    TD f0 = gaussian_reparam_sample(st.class_prompts[0].mu().detach(),
                                    st.class_prompts[0].log_sigma().detach(), eps0);
    TD virt = concat_rows(std::vector<TD>{reshape(bb.forward_seq(f0, st.stack_detached()),
                                                  {std::size_t(1), bb.dim()}),
                                          reshape(bb.forward_seq(f0, st.stack_detached()),
                                                  {std::size_t(1), bb.dim()})})
                  .detach();
    auto fn = [real, virt, &disc] {
      return bda_classifier_loss(real, std::vector<std::size_t>{0, 1}, virt,
                                 std::vector<std::size_t>{0, 0}, disc);
    };
    return {fn, disc.params()};
  });

  return cases;
}

int cmd_gradcheck() {
  auto t0 = std::chrono::steady_clock::now();
  std::vector<CheckCase> cases = gradcheck_suite();
  bool all_ok = true;
  for (const auto& c : cases) {
    if (c.ok) {
      std::cout << "ok   " << c.name << "  max_rel_err=" << c.err << "\n";
    } else {
      all_ok = false;
      std::cout << "FAIL " << c.name << "  " << c.detail << "\n";
    }
  }
  double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  std::cout << (all_ok ? "gradcheck passed" : "gradcheck FAILED") << " (" << cases.size()
            << " cases, " << std::fixed << std::setprecision(2) << secs << " s)\n";
  return all_ok ? kOk : kCheckFailure;
}

// ---------------------------------------------------------------------------
// train
// ---------------------------------------------------------------------------

template <typename T>
void train_with(const ExperimentConfig& cfg, const fs::path& dir) {
  Trainer<T> tr(cfg);
  tr.run();
  tr.save_artifacts(dir);
  if (tr.pretrain_test_accuracy())
    std::cout << "pretrain test accuracy " << *tr.pretrain_test_accuracy() << "\n";
  std::cout << "mode " << cfg.mode << " seed " << cfg.seed
            << "  A_T=" << tr.accuracy().average_accuracy();
  if (tr.accuracy().num_tasks() >= 2) std::cout << "  F_T=" << tr.accuracy().forgetting();
  std::cout << "\n";
}

int cmd_train(const std::string& config_path, const std::string& out, std::optional<std::uint64_t> seed,
              bool force) {
  ExperimentConfig cfg;
  try {
    cfg = ExperimentConfig::load(config_path);
    if (seed) cfg.seed = *seed;
    cfg.validate();
  } catch (const std::exception& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return kConfigError;
  }
  fs::path dir(out);
  std::error_code ec;
  if (fs::exists(dir, ec) && !fs::is_empty(dir, ec) && !force) {
    std::cerr << "config error: output directory " << dir << " is not empty (use --force)\n";
    return kConfigError;
  }
  try {
    fs::create_directories(dir);
    {
      std::ofstream marker(dir / "RUNNING");
      marker << "run in progress\n";
    }
    auto t0 = std::chrono::steady_clock::now();
    if (cfg.precision == "f64")
      train_with<double>(cfg, dir);
    else
      train_with<float>(cfg, dir);
    double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    std::ofstream tim(dir / "timings.txt");
    tim << "train_seconds=" << secs << "\n";
    fs::remove(dir / "RUNNING");
    return kOk;
  } catch (const std::exception& e) {
    std::cerr << "runtime failure: " << e.what() << "\n";
    return kRuntimeError;
  }
}

// ---------------------------------------------------------------------------
// eval
// ---------------------------------------------------------------------------

template <typename T>
int eval_with(const fs::path& dir, bool oracle) {
  LoadedRun<T> run = load_run<T>(dir);
  EvalOptions opts;
  opts.prompted = run.cfg.mode != "ftseq";
  opts.mask_to_task = run.cfg.mask_to_task;
  opts.normalize_query = run.cfg.normalize_query;
  std::size_t t_all = run.bench.tasks.size();
  if (oracle) {
    if (!opts.prompted) {
      std::cerr << "runtime failure: oracle task identity needs a prompted run\n";
      return kRuntimeError;
    }
    opts.oracle_task_id = true;
    SuiteEval se = evaluate_seen_tasks(run.backbone, run.states, run.cc, run.bench, t_all, opts);
    write_predictions_csv(dir / "predictions_oracle.csv", se.records);
    double avg = std::accumulate(se.per_task_accuracy.begin(), se.per_task_accuracy.end(), 0.0) /
                 static_cast<double>(se.per_task_accuracy.size());
    std::cout << "oracle-task-id accuracy " << avg << "\n";
    return kOk;
  }
  SuiteEval se = evaluate_seen_tasks(run.backbone, run.states, run.cc, run.bench, t_all, opts);
  for (std::size_t t = 0; t < t_all; ++t)
    if (se.per_task_accuracy[t] != run.acc.get(t_all - 1, t)) {
      std::cerr << "runtime failure: re-evaluation disagrees with the stored accuracy row (task "
                << t << ": " << se.per_task_accuracy[t] << " vs " << run.acc.get(t_all - 1, t) << ")\n";
      return kRuntimeError;
    }
  write_predictions_csv(dir / "predictions.csv", se.records);

  json old = load_json(dir / "metrics.json");
  auto task_id_acc = old.at("task_id_accuracy_per_task").get<std::vector<double>>();
  check(!task_id_acc.empty() && task_id_acc.back() == se.task_id_accuracy,
        "re-evaluation disagrees with the stored task-identity accuracy");
  std::optional<double> ntid, navg, oavg;
  if (opts.prompted) {
    EvalOptions naive = opts;
    naive.naive_keys = true;
    SuiteEval sn = evaluate_seen_tasks(run.backbone, run.states, run.cc, run.bench, t_all, naive);
    ntid = sn.task_id_accuracy;
    navg = std::accumulate(sn.per_task_accuracy.begin(), sn.per_task_accuracy.end(), 0.0) /
           static_cast<double>(sn.per_task_accuracy.size());
    EvalOptions orc = opts;
    orc.oracle_task_id = true;
    SuiteEval so = evaluate_seen_tasks(run.backbone, run.states, run.cc, run.bench, t_all, orc);
    oavg = std::accumulate(so.per_task_accuracy.begin(), so.per_task_accuracy.end(), 0.0) /
           static_cast<double>(so.per_task_accuracy.size());
  }
  save_json(dir / "metrics.json",
            build_metrics_json(run.cfg, run.acc, task_id_acc, run.bench.num_continual_classes(), ntid,
                               navg, oavg));
  std::cout << "eval ok  A_T=" << run.acc.average_accuracy() << "  predictions=" << se.records.size()
            << "\n";
  return kOk;
}

int cmd_eval(const std::string& run_dir, bool oracle) {
  fs::path dir(run_dir);
  std::string precision = "f32";
  try {
    json cfg = load_json(dir / "config.json");
    if (cfg.contains("precision")) precision = cfg.at("precision").get<std::string>();
  } catch (const std::exception& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return kConfigError;
  }
  try {
    return precision == "f64" ? eval_with<double>(dir, oracle) : eval_with<float>(dir, oracle);
  } catch (const std::exception& e) {
    std::cerr << "runtime failure: " << e.what() << "\n";
    return kRuntimeError;
  }
}

// ---------------------------------------------------------------------------
// report
// ---------------------------------------------------------------------------

struct RunRow {
  std::string mode;
  std::uint64_t seed = 0;
  std::size_t num_tasks = 0;
  double a_t = 0;
  std::optional<double> f_t, task_id, naive_task_id;
};

struct ModeStats {
  std::size_t count = 0;
  double a_t_mean = 0, a_t_std = 0;
  std::optional<double> f_t_mean, f_t_std, delta, task_id_mean, naive_task_id_mean;
};

std::pair<double, double> mean_std(const std::vector<double>& xs) {
  double m = std::accumulate(xs.begin(), xs.end(), 0.0) / static_cast<double>(xs.size());
  if (xs.size() < 2) return {m, 0.0};
  double s = 0;
  for (double x : xs) s += (x - m) * (x - m);
  return {m, std::sqrt(s / static_cast<double>(xs.size() - 1))};
}

int cmd_report(const std::vector<std::string>& run_dirs, const std::string& csv_out) {
  std::vector<RunRow> rows;
  for (const auto& d : run_dirs) {
    try {
      json m = load_json(fs::path(d) / "metrics.json");
      RunRow r;
      r.mode = m.at("mode").get<std::string>();
      r.seed = m.at("seed").get<std::uint64_t>();
      r.num_tasks = m.at("num_tasks").get<std::size_t>();
      r.a_t = m.at("average_accuracy").get<double>();
      if (!m.at("forgetting").is_null()) r.f_t = m.at("forgetting").get<double>();
      if (!m.at("task_id_accuracy").is_null()) r.task_id = m.at("task_id_accuracy").get<double>();
      if (!m.at("naive_task_id_accuracy").is_null())
        r.naive_task_id = m.at("naive_task_id_accuracy").get<double>();
      rows.push_back(std::move(r));
    } catch (const std::exception& e) {
      std::cerr << "runtime failure: cannot read run " << d << ": " << e.what() << "\n";
      return kRuntimeError;
    }
  }
  if (rows.empty()) {
    std::cerr << "config error: no runs given\n";
    return kConfigError;
  }
  for (const auto& r : rows)
    if (r.num_tasks != rows.front().num_tasks && r.mode != "joint")
      std::cerr << "warning: mixing runs with different task counts\n";

  std::map<std::string, std::vector<const RunRow*>> groups;
  for (const auto& r : rows) groups[r.mode].push_back(&r);

  // per-seed upper-bound pairing when joint runs are present
  std::map<std::uint64_t, double> joint_by_seed;
  if (groups.count("joint"))
    for (const RunRow* r : groups["joint"]) joint_by_seed[r->seed] = r->a_t;

  std::map<std::string, ModeStats> stats;
  for (auto& [mode, rs] : groups) {
    ModeStats s;
    s.count = rs.size();
    std::vector<double> at, ft, tid, ntid, deltas;
    for (const RunRow* r : rs) {
      at.push_back(r->a_t);
      if (r->f_t) ft.push_back(*r->f_t);
      if (r->task_id) tid.push_back(*r->task_id);
      if (r->naive_task_id) ntid.push_back(*r->naive_task_id);
      if (mode != "joint" && joint_by_seed.count(r->seed))
        deltas.push_back(upper_bound_gap(joint_by_seed.at(r->seed), r->a_t));
    }
    std::tie(s.a_t_mean, s.a_t_std) = mean_std(at);
    if (!ft.empty()) {
      auto [m, sd] = mean_std(ft);
      s.f_t_mean = m;
      s.f_t_std = sd;
    }
    if (!tid.empty()) s.task_id_mean = mean_std(tid).first;
    if (!ntid.empty()) s.naive_task_id_mean = mean_std(ntid).first;
    if (!deltas.empty()) s.delta = mean_std(deltas).first;
    stats[mode] = s;
  }

  auto pct = [](double v) {
    std::ostringstream os;
    os << std::fixed << std::setprecision(2) << 100.0 * v;
    return os.str();
  };
  auto opt_pct = [&](const std::optional<double>& v) { return v ? pct(*v) : std::string("-"); };

  std::cout << "mode       n   A_T%            F_T%            delta%   task-id%  naive-id%\n";
  for (const auto& [mode, s] : stats) {
    std::ostringstream at;
    at << pct(s.a_t_mean) << " +/- " << pct(s.a_t_std);
    std::ostringstream ft;
    if (s.f_t_mean)
      ft << pct(*s.f_t_mean) << " +/- " << pct(s.f_t_std.value_or(0));
    else
      ft << "-";
    std::cout << std::left << std::setw(10) << mode << ' ' << std::setw(3) << s.count << ' '
              << std::setw(15) << at.str() << ' ' << std::setw(15) << ft.str() << ' ' << std::setw(8)
              << opt_pct(s.delta) << ' ' << std::setw(9) << opt_pct(s.task_id_mean) << ' '
              << opt_pct(s.naive_task_id_mean) << "\n";
  }

  // expected ablation ordering: ftseq < tp <= tgp <= hprompts on accuracy,
  // ftseq forgets more than hprompts
  auto have = [&](const char* m) { return stats.count(m) > 0; };
  std::vector<std::string> violations;
  if (have("ftseq") && have("hprompts") && stats["ftseq"].a_t_mean >= stats["hprompts"].a_t_mean)
    violations.push_back("A_T(ftseq) >= A_T(hprompts)");
  if (have("ftseq") && have("tp") && stats["ftseq"].a_t_mean >= stats["tp"].a_t_mean)
    violations.push_back("A_T(ftseq) >= A_T(tp)");
  if (have("tp") && have("tgp") && stats["tp"].a_t_mean > stats["tgp"].a_t_mean)
    violations.push_back("A_T(tp) > A_T(tgp)");
  if (have("tgp") && have("hprompts") && stats["tgp"].a_t_mean > stats["hprompts"].a_t_mean)
    violations.push_back("A_T(tgp) > A_T(hprompts)");
  if (have("ftseq") && have("hprompts") && stats["ftseq"].f_t_mean && stats["hprompts"].f_t_mean &&
      *stats["ftseq"].f_t_mean <= *stats["hprompts"].f_t_mean)
    violations.push_back("F_T(ftseq) <= F_T(hprompts)");
  for (const auto& v : violations) std::cout << "ordering-violation: " << v << "\n";
  if (violations.empty() && stats.size() > 1) std::cout << "ordering ok\n";

  if (!csv_out.empty()) {
    std::ofstream out(csv_out, std::ios::trunc);
    if (!out.good()) {
      std::cerr << "runtime failure: cannot write " << csv_out << "\n";
      return kRuntimeError;
    }
    out << "mode,count,a_t_mean,a_t_std,f_t_mean,f_t_std,delta,task_id_mean,naive_task_id_mean\n";
    auto cell = [](const std::optional<double>& v) {
      return v ? hprompt::detail::csv_num(*v) : std::string();
    };
    for (const auto& [mode, s] : stats)
      out << mode << ',' << s.count << ',' << hprompt::detail::csv_num(s.a_t_mean) << ','
          << hprompt::detail::csv_num(s.a_t_std) << ',' << cell(s.f_t_mean) << ',' << cell(s.f_t_std)
          << ',' << cell(s.delta) << ',' << cell(s.task_id_mean) << ',' << cell(s.naive_task_id_mean)
          << "\n";
  }
  return kOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"hierarchical-prompt continual learning experiments"};
  app.require_subcommand(1);

  std::string config_path, out_dir, run_dir, csv_out;
  std::vector<std::string> run_dirs;
  std::uint64_t seed_val = 0;
  bool force = false, oracle = false;

  CLI::App* train = app.add_subcommand("train", "train a continual sequence from a config");
  train->add_option("--config", config_path, "experiment config JSON")->required();
  train->add_option("--out", out_dir, "output run directory")->required();
  CLI::Option* seed_opt = train->add_option("--seed", seed_val, "override the config seed");
  train->add_flag("--force", force, "allow a non-empty output directory");

  CLI::App* eval = app.add_subcommand("eval", "re-evaluate a finished run directory");
  eval->add_option("--run", run_dir, "run directory")->required();
  eval->add_flag("--oracle-task-id", oracle, "score with true task identities (diagnostic)");

  CLI::App* report = app.add_subcommand("report", "aggregate metrics across runs");
  report->add_option("--runs", run_dirs, "run directories")->required()->expected(-1);
  report->add_option("--csv", csv_out, "also write the table as CSV");

  CLI::App* gradcheck = app.add_subcommand("gradcheck", "finite-difference gradient verification");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    std::cout << app.help();
    return kOk;
  } catch (const CLI::ParseError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return kConfigError;
  }

  if (*train)
    return cmd_train(config_path, out_dir,
                     seed_opt->count() ? std::optional<std::uint64_t>(seed_val) : std::nullopt, force);
  if (*eval) return cmd_eval(run_dir, oracle);
  if (*report) return cmd_report(run_dirs, csv_out);
  if (*gradcheck) return cmd_gradcheck();
  return kConfigError;
}
