#include <catch2/catch_amalgamated.hpp>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <set>
#include <vector>

#include "hprompt/data.hpp"
#include "hprompt/optim.hpp"
#include "hprompt/prompts.hpp"
#include "hprompt/rng.hpp"
#include "hprompt/trainer.hpp"

using namespace hprompt;
namespace fs = std::filesystem;

namespace {

BenchmarkSpec small_spec(std::uint64_t seed = 1) {
  BenchmarkSpec s;
  s.seed = seed;
  s.num_tasks = 2;
  s.classes_per_task = 2;
  s.n_train = 8;
  s.n_test = 4;
  s.pretrain_classes = 2;
  s.pretrain_per_class = 8;
  s.pretrain_test_per_class = 4;
  return s;
}

fs::path temp_dir(const std::string& tag) {
  fs::path d = fs::temp_directory_path() / ("hp_data_" + tag);
  fs::remove_all(d);
  fs::create_directories(d);
  return d;
}

bool same_samples(const std::vector<Sample>& a, const std::vector<Sample>& b) {
  if (a.size() != b.size()) return false;
  for (std::size_t i = 0; i < a.size(); ++i)
    if (a[i].label != b[i].label || a[i].pixels != b[i].pixels) return false;
  return true;
}

std::vector<float> class_mean(const std::vector<Sample>& samples, std::size_t label,
                              std::size_t n) {
  std::vector<float> m(n, 0.0f);
  std::size_t count = 0;
  for (const auto& s : samples)
    if (s.label == label) {
      ++count;
      for (std::size_t i = 0; i < n; ++i) m[i] += s.pixels[i];
    }
  for (auto& v : m) v /= count;
  return m;
}

}  // namespace

TEST_CASE("same seed generates bitwise-identical benchmarks") {
  auto a = generate_synthetic_benchmark(small_spec(7));
  auto b = generate_synthetic_benchmark(small_spec(7));
  auto c = generate_synthetic_benchmark(small_spec(8));
  REQUIRE(a.tasks.size() == b.tasks.size());
  for (std::size_t t = 0; t < a.tasks.size(); ++t) {
    REQUIRE(same_samples(a.tasks[t].train, b.tasks[t].train));
    REQUIRE(same_samples(a.tasks[t].test, b.tasks[t].test));
  }
  REQUIRE(same_samples(a.pretrain.train, b.pretrain.train));
  bool all_equal = true;
  for (std::size_t t = 0; t < a.tasks.size(); ++t)
    all_equal = all_equal && same_samples(a.tasks[t].train, c.tasks[t].train);
  REQUIRE_FALSE(all_equal);
}

TEST_CASE("task splits carry the configured counts and disjoint labels") {
  BenchmarkSpec spec;  // defaults: 5 tasks x 2 classes
  spec.n_train = 16;
  spec.n_test = 8;
  spec.pretrain_per_class = 16;
  spec.pretrain_test_per_class = 8;
  auto bench = generate_synthetic_benchmark(spec);

  REQUIRE(bench.tasks.size() == 5);
  REQUIRE(bench.num_continual_classes() == 10);
  std::set<std::size_t> seen;
  for (std::size_t t = 0; t < 5; ++t) {
    const auto& td = bench.tasks[t];
    REQUIRE(td.class_ids.size() == 2);
    REQUIRE(td.train.size() == 2 * 16);
    REQUIRE(td.test.size() == 2 * 8);
    for (auto c : td.class_ids) {
      REQUIRE(seen.insert(c).second);  // no class repeats across tasks
    }
    for (const auto& s : td.train)
      REQUIRE(std::find(td.class_ids.begin(), td.class_ids.end(), s.label) != td.class_ids.end());
  }
  for (auto c : bench.pretrain.class_ids) REQUIRE(seen.insert(c).second);
  REQUIRE(bench.pretrain.train.size() == 6 * 16);
  bench.check_disjoint();

  // samples live on the u8 grid inside [0, 1]
  for (const auto& s : bench.tasks[0].train)
    for (float v : s.pixels) {
      REQUIRE(v >= 0.0f);
      REQUIRE(v <= 1.0f);
      REQUIRE(v == Catch::Approx(std::round(v * 255.0f) / 255.0f).margin(1e-6));
    }
}

TEST_CASE("class prototypes stay separated well beyond the pixel noise") {
  auto spec = small_spec(3);
  auto bench = generate_synthetic_benchmark(spec);
  std::size_t n = spec.height * spec.width * spec.channels;
  std::vector<std::vector<float>> means;
  for (const auto& td : bench.tasks)
    for (auto c : td.class_ids) means.push_back(class_mean(td.train, c, n));
  for (std::size_t i = 0; i < means.size(); ++i)
    for (std::size_t j = i + 1; j < means.size(); ++j) {
      double rms = 0;
      for (std::size_t k = 0; k < n; ++k) {
        double d = means[i][k] - means[j][k];
        rms += d * d;
      }
      rms = std::sqrt(rms / n);
      REQUIRE(rms > 2.0 * spec.noise_sigma);
    }
}

TEST_CASE("impossible separation requirements abort generation") {
  auto spec = small_spec(5);
  spec.noise_sigma = 1.0f;  // 3x separation cannot exist on unit-range pixels
  REQUIRE_THROWS(generate_synthetic_benchmark(spec));
}

TEST_CASE("export and reload reproduce the dataset exactly") {
  auto bench = generate_synthetic_benchmark(small_spec(11));
  fs::path d = temp_dir("export");
  export_benchmark(bench, d);
  auto re = load_external_dataset(d / "manifest.json");
  REQUIRE(re.height == bench.height);
  REQUIRE(re.channels == bench.channels);
  REQUIRE(re.tasks.size() == bench.tasks.size());
  for (std::size_t t = 0; t < bench.tasks.size(); ++t) {
    REQUIRE(re.tasks[t].class_ids == bench.tasks[t].class_ids);
    REQUIRE(same_samples(re.tasks[t].train, bench.tasks[t].train));
    REQUIRE(same_samples(re.tasks[t].test, bench.tasks[t].test));
  }
  REQUIRE(same_samples(re.pretrain.train, bench.pretrain.train));
  REQUIRE(same_samples(re.pretrain.test, bench.pretrain.test));
}

TEST_CASE("a manifest with duplicated labels across tasks is rejected") {
  auto bench = generate_synthetic_benchmark(small_spec(13));
  fs::path d = temp_dir("dup");
  export_benchmark(bench, d);
  json manifest = load_json(d / "manifest.json");
  manifest["tasks"][1]["class_ids"] = manifest["tasks"][0]["class_ids"];
  save_json(d / "manifest.json", manifest);
  REQUIRE_THROWS(load_external_dataset(d / "manifest.json"));
}

TEST_CASE("a grayscale ten-class source splits into five two-class tasks") {
  BenchmarkSpec spec = small_spec(17);
  spec.num_tasks = 5;
  spec.classes_per_task = 2;
  spec.channels = 1;
  spec.pretrain_classes = 2;
  auto bench = generate_synthetic_benchmark(spec);
  REQUIRE(bench.channels == 1);
  REQUIRE(bench.num_continual_classes() == 10);

  fs::path d = temp_dir("gray");
  export_benchmark(bench, d);
  auto re = load_external_dataset(d / "manifest.json");
  REQUIRE(re.channels == 1);
  REQUIRE(re.tasks.size() == 5);
  for (std::size_t t = 0; t < 5; ++t) {
    REQUIRE(re.tasks[t].class_ids.size() == 2);
    REQUIRE(re.tasks[t].train.size() == bench.tasks[t].train.size());
    REQUIRE(same_samples(re.tasks[t].train, bench.tasks[t].train));
  }
}

TEST_CASE("augmented views keep the pixel geometry and value range") {
  auto bench = generate_synthetic_benchmark(small_spec(19));
  const auto& img = bench.tasks[0].train[0].pixels;
  AugmentConfig cfg;
  cfg.min_area = 0.3f;
  cfg.noise_sigma = 0.15f;
  auto [v1, v2] = augment_pair(img, 16, 16, 3, 42, cfg);
  REQUIRE(v1.size() == img.size());
  REQUIRE(v2.size() == img.size());
  REQUIRE(v1 != v2);  // two independent draws
  for (float v : v1) {
    REQUIRE(v >= 0.0f);
    REQUIRE(v <= 1.0f);
  }

  // same seed reproduces the exact same pair
  auto [w1, w2] = augment_pair(img, 16, 16, 3, 42, cfg);
  REQUIRE(w1 == v1);
  REQUIRE(w2 == v2);
  auto [u1, u2] = augment_pair(img, 16, 16, 3, 43, cfg);
  REQUIRE(u1 != v1);
}

TEST_CASE("zero-strength augmentation returns the image twice, untouched") {
  auto bench = generate_synthetic_benchmark(small_spec(23));
  const auto& img = bench.tasks[0].train[0].pixels;
  AugmentConfig cfg;
  cfg.min_area = 1.0f;
  cfg.flip_p = 0.0f;
  cfg.noise_sigma = 0.0f;
  auto [v1, v2] = augment_pair(img, 16, 16, 3, 7, cfg);
  REQUIRE(v1 == img);
  REQUIRE(v2 == img);
}

TEST_CASE("frozen pretrained features separate held-out classes far above chance") {
  ExperimentConfig cfg;
  cfg.mode = "tp";
  cfg.precision = "f32";
  cfg.seed = 4;
  cfg.data = small_spec(4);
  cfg.data.n_train = 16;
  cfg.data.n_test = 8;
  cfg.data.pretrain_classes = 4;
  cfg.data.pretrain_per_class = 48;
  cfg.data.pretrain_test_per_class = 16;
  cfg.backbone.image = 16;
  cfg.backbone.channels = 3;
  cfg.backbone.patch = 4;
  cfg.backbone.dim = 16;
  cfg.backbone.depth = 2;
  cfg.backbone.heads = 2;
  cfg.backbone.mlp_ratio = 2;
  cfg.pretrain_epochs = 5;
  cfg.e_gke = 0;
  cfg.e_max = 1;
  cfg.batch_size = 8;
  cfg.validate();

  Trainer<float> tr(cfg);
  tr.prepare();

  // linear probe on the four continual classes the backbone never saw
  const auto& bench = tr.benchmark();
  std::vector<Tensor<float>> feats;
  std::vector<std::size_t> labels;
  for (const auto& td : bench.tasks)
    for (const auto& s : td.train) {
      feats.push_back(tr.backbone().forward_plain(to_precision<float>(s.pixels)));
      labels.push_back(s.label);
    }
  Rng rng(99);
  LinearHead<float> probe(cfg.backbone.dim);
  probe.add_classes(4, rng);
  Adam<float> opt(probe.params(), 0.05);
  for (int epoch = 0; epoch < 30; ++epoch) {
    std::vector<float> flat;
    for (const auto& f : feats) flat.insert(flat.end(), f.value().begin(), f.value().end());
    auto x = Tensor<float>::from({feats.size(), std::size_t(cfg.backbone.dim)}, std::move(flat));
    auto loss = cross_entropy_mean(probe.logits(x), labels);
    opt.zero_grad();
    loss.backward();
    opt.step();
  }
  std::size_t correct = 0, total = 0;
  for (const auto& td : bench.tasks)
    for (const auto& s : td.test) {
      auto f = tr.backbone().forward_plain(to_precision<float>(s.pixels));
      auto lg = probe.logits_one(f);
      std::size_t arg = 0;
      for (std::size_t c = 1; c < 4; ++c)
        if (lg.value()[c] > lg.value()[arg]) arg = c;
      ++total;
      correct += arg == s.label ? 1 : 0;
    }
  double acc = fraction_correct(correct, total);
  REQUIRE(acc > 2.0 * 0.25);
}
