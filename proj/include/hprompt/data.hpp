#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <map>
#include <set>
#include <string>
#include <vector>

#include "hprompt/rng.hpp"
#include "hprompt/serialize.hpp"

namespace hprompt {

struct Sample {
  std::vector<float> pixels;  // row-major (row, col, channel), values on the u8 grid
  std::size_t label = 0;      // global class id
};

struct TaskData {
  std::vector<std::size_t> class_ids;  // global ids, ascending
  std::vector<Sample> train, test;
};

struct SplitBenchmark {
  std::size_t height = 0, width = 0, channels = 0;
  std::vector<TaskData> tasks;
  TaskData pretrain;  // label space disjoint from every task

  std::size_t num_continual_classes() const {
    std::size_t n = 0;
    for (const auto& t : tasks) n += t.class_ids.size();
    return n;
  }

  void check_disjoint() const {
    std::set<std::size_t> seen;
    auto absorb = [&](const std::vector<std::size_t>& ids, const char* what) {
      for (std::size_t id : ids)
        check(seen.insert(id).second,
              std::string("benchmark: class id ") + std::to_string(id) + " duplicated in " + what);
    };
    for (const auto& t : tasks) absorb(t.class_ids, "a task split");
    absorb(pretrain.class_ids, "the pretraining split");
  }
};

namespace detail {

inline float quantize_u8(float v) {
  v = std::min(1.0f, std::max(0.0f, v));
  return static_cast<float>(std::lround(v * 255.0f)) / 255.0f;
}

// procedural class appearance: a base mask, two colors, optional stripes
struct ClassProto {
  int kind = 0;  // 0 disc, 1 bar, 2 cross, 3 ring, 4 checker
  float fg[3] = {0, 0, 0}, bg[3] = {0, 0, 0};
  float cy = 0, cx = 0, radius = 0, inner = 0;
  int bar_pos = 0, bar_width = 0, vertical = 0, cell = 2;
  float stripe_freq = 0, stripe_phase = 0, stripe_amp = 0;

  bool inside(std::size_t y, std::size_t x, std::size_t h, std::size_t w) const {
    float fy = static_cast<float>(y), fx = static_cast<float>(x);
    switch (kind) {
      case 0: {
        float d = std::hypot(fy - cy, fx - cx);
        return d <= radius;
      }
      case 1: {
        int p = vertical ? static_cast<int>(x) : static_cast<int>(y);
        return p >= bar_pos && p < bar_pos + bar_width;
      }
      case 2: {
        float hy = static_cast<float>(h) / 2, hx = static_cast<float>(w) / 2;
        return std::abs(fy - hy) < static_cast<float>(bar_width) ||
               std::abs(fx - hx) < static_cast<float>(bar_width);
      }
      case 3: {
        float d = std::hypot(fy - cy, fx - cx);
        return d <= radius && d >= inner;
      }
      default:
        return ((y / cell) + (x / cell)) % 2 == 0;
    }
  }

  std::vector<float> render(std::size_t h, std::size_t w, std::size_t c) const {
    std::vector<float> img(h * w * c);
    for (std::size_t y = 0; y < h; ++y)
      for (std::size_t x = 0; x < w; ++x) {
        bool in = inside(y, x, h, w);
        float mod = 1.0f;
        if (stripe_freq > 0)
          mod += stripe_amp * std::sin(2.0f * 3.14159265358979f *
                                       (stripe_freq * static_cast<float>(y + x) / static_cast<float>(h + w) +
                                        stripe_phase));
        for (std::size_t ch = 0; ch < c && ch < 3; ++ch)
          img[(y * w + x) * c + ch] = (in ? fg[ch] : bg[ch]) * mod;
      }
    for (auto& v : img) v = std::min(1.0f, std::max(0.0f, v));
    return img;
  }
};

inline ClassProto sample_proto(int kind, std::size_t h, std::size_t w, Rng& rng) {
  ClassProto p;
  p.kind = kind;
  for (int i = 0; i < 3; ++i) p.fg[i] = static_cast<float>(rng.uniform(0.15, 1.0));
  for (int i = 0; i < 3; ++i) p.bg[i] = static_cast<float>(rng.uniform(0.0, 0.85));
  p.cy = static_cast<float>(rng.uniform(h * 0.35, h * 0.65));
  p.cx = static_cast<float>(rng.uniform(w * 0.35, w * 0.65));
  p.radius = static_cast<float>(rng.uniform(h * 0.2, h * 0.4));
  p.inner = p.radius * static_cast<float>(rng.uniform(0.35, 0.6));
  p.bar_width = 2 + static_cast<int>(rng.randint(3));
  p.bar_pos = static_cast<int>(rng.randint(h - static_cast<std::size_t>(p.bar_width)));
  p.vertical = static_cast<int>(rng.randint(2));
  p.cell = 2 + 2 * static_cast<int>(rng.randint(2));
  p.stripe_freq = static_cast<float>(rng.randint(4));
  p.stripe_phase = static_cast<float>(rng.uniform());
  p.stripe_amp = 0.25f;
  return p;
}

inline double proto_rms(const std::vector<float>& a, const std::vector<float>& b) {
  double s = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    double d = static_cast<double>(a[i]) - static_cast<double>(b[i]);
    s += d * d;
  }
  return std::sqrt(s / static_cast<double>(a.size()));
}

}  // namespace detail

struct BenchmarkSpec {
  std::uint64_t seed = 1;
  std::size_t num_tasks = 5;
  std::size_t classes_per_task = 2;
  std::size_t n_train = 64;  // per class
  std::size_t n_test = 32;   // per class
  std::size_t pretrain_classes = 6;
  std::size_t pretrain_per_class = 128;
  std::size_t pretrain_test_per_class = 32;
  std::size_t height = 16, width = 16, channels = 3;
  float noise_sigma = 0.05f;
};

/// Deterministic procedural benchmark. Class prototypes are drawn with a
/// rejection loop keeping every pair at RMS distance > 3x the pixel noise;
/// samples are prototype + Gaussian noise, clipped and quantized to the u8
/// grid so an export/reload round trip is exact.
inline SplitBenchmark generate_synthetic_benchmark(const BenchmarkSpec& spec) {
  check(spec.num_tasks > 0 && spec.classes_per_task > 0 && spec.n_train > 0 && spec.n_test > 0,
        "benchmark: parameters must be positive");
  SplitBenchmark bench;
  bench.height = spec.height;
  bench.width = spec.width;
  bench.channels = spec.channels;

  std::size_t n_cont = spec.num_tasks * spec.classes_per_task;
  std::size_t n_classes = n_cont + spec.pretrain_classes;

  Rng proto_rng(derive_seed(spec.seed, tag_seed("prototypes")));
  std::vector<std::vector<float>> proto_imgs;
  std::vector<detail::ClassProto> protos;
  double min_rms = 3.0 * static_cast<double>(spec.noise_sigma);
  for (std::size_t k = 0; k < n_classes; ++k) {
    bool accepted = false;
    for (int attempt = 0; attempt < 1000 && !accepted; ++attempt) {
      detail::ClassProto p = detail::sample_proto(static_cast<int>(k % 5), spec.height, spec.width, proto_rng);
      auto img = p.render(spec.height, spec.width, spec.channels);
      accepted = true;
      for (const auto& other : proto_imgs)
        if (detail::proto_rms(img, other) <= min_rms) {
          accepted = false;
          break;
        }
      if (accepted) {
        protos.push_back(p);
        proto_imgs.push_back(std::move(img));
      }
    }
    check(accepted, "benchmark: could not place distinct prototype for class " + std::to_string(k));
  }

  auto make_samples = [&](std::size_t cls, std::size_t count, std::uint64_t stream) {
    Rng rng(derive_seed(spec.seed, tag_seed("samples"), derive_seed(cls, stream)));
    std::vector<Sample> out(count);
    for (std::size_t s = 0; s < count; ++s) {
      out[s].label = cls;
      out[s].pixels = proto_imgs[cls];
      for (auto& v : out[s].pixels)
        v = detail::quantize_u8(v + spec.noise_sigma * static_cast<float>(rng.normal()));
    }
    return out;
  };

  for (std::size_t t = 0; t < spec.num_tasks; ++t) {
    TaskData td;
    for (std::size_t c = 0; c < spec.classes_per_task; ++c) {
      std::size_t cls = t * spec.classes_per_task + c;
      td.class_ids.push_back(cls);
      auto tr = make_samples(cls, spec.n_train, 1);
      auto te = make_samples(cls, spec.n_test, 2);
      td.train.insert(td.train.end(), tr.begin(), tr.end());
      td.test.insert(td.test.end(), te.begin(), te.end());
    }
    bench.tasks.push_back(std::move(td));
  }
  for (std::size_t c = 0; c < spec.pretrain_classes; ++c) {
    std::size_t cls = n_cont + c;
    bench.pretrain.class_ids.push_back(cls);
    auto tr = make_samples(cls, spec.pretrain_per_class, 1);
    auto te = make_samples(cls, spec.pretrain_test_per_class, 2);
    bench.pretrain.train.insert(bench.pretrain.train.end(), tr.begin(), tr.end());
    bench.pretrain.test.insert(bench.pretrain.test.end(), te.begin(), te.end());
  }
  bench.check_disjoint();
  return bench;
}

inline SplitBenchmark generate_synthetic_benchmark(std::uint64_t seed, std::size_t num_tasks,
                                                   std::size_t classes_per_task, std::size_t n_train,
                                                   std::size_t n_test) {
  BenchmarkSpec s;
  s.seed = seed;
  s.num_tasks = num_tasks;
  s.classes_per_task = classes_per_task;
  s.n_train = n_train;
  s.n_test = n_test;
  return generate_synthetic_benchmark(s);
}

// ---------------------------------------------------------------------------
// Label-preserving two-view augmentation
// ---------------------------------------------------------------------------

struct AugmentConfig {
  float min_area = 0.6f;   // crop area lower bound; 1.0 disables cropping
  float flip_p = 0.5f;     // 0.0 disables flips
  float noise_sigma = 0.05f;
};

namespace detail {

inline std::vector<float> crop_resize_flip_noise(const std::vector<float>& img, std::size_t h,
                                                 std::size_t w, std::size_t c, const AugmentConfig& cfg,
                                                 Rng& rng) {
  float area = static_cast<float>(rng.uniform(cfg.min_area, 1.0));
  float side_frac = std::sqrt(area);
  auto crop_h = static_cast<std::size_t>(std::max(1l, std::lround(side_frac * static_cast<float>(h))));
  auto crop_w = static_cast<std::size_t>(std::max(1l, std::lround(side_frac * static_cast<float>(w))));
  crop_h = std::min(crop_h, h);
  crop_w = std::min(crop_w, w);
  std::size_t off_y = crop_h < h ? rng.randint(h - crop_h + 1) : 0;
  std::size_t off_x = crop_w < w ? rng.randint(w - crop_w + 1) : 0;
  bool flip = rng.uniform() < cfg.flip_p;

  std::vector<float> out(h * w * c);
  bool identity_geom = crop_h == h && crop_w == w;
  for (std::size_t y = 0; y < h; ++y)
    for (std::size_t x = 0; x < w; ++x) {
      std::size_t xx = flip ? (w - 1 - x) : x;
      for (std::size_t ch = 0; ch < c; ++ch) {
        float v;
        if (identity_geom) {
          v = img[(y * w + xx) * c + ch];
        } else {
          // bilinear sample of the crop window scaled back to full size
          float sy = (static_cast<float>(y) + 0.5f) * static_cast<float>(crop_h) / static_cast<float>(h) -
                     0.5f + static_cast<float>(off_y);
          float sx = (static_cast<float>(xx) + 0.5f) * static_cast<float>(crop_w) / static_cast<float>(w) -
                     0.5f + static_cast<float>(off_x);
          sy = std::min(std::max(sy, 0.0f), static_cast<float>(h - 1));
          sx = std::min(std::max(sx, 0.0f), static_cast<float>(w - 1));
          auto y0 = static_cast<std::size_t>(sy);
          auto x0 = static_cast<std::size_t>(sx);
          std::size_t y1 = std::min(y0 + 1, h - 1), x1 = std::min(x0 + 1, w - 1);
          float fy = sy - static_cast<float>(y0), fx = sx - static_cast<float>(x0);
          float v00 = img[(y0 * w + x0) * c + ch], v01 = img[(y0 * w + x1) * c + ch];
          float v10 = img[(y1 * w + x0) * c + ch], v11 = img[(y1 * w + x1) * c + ch];
          v = v00 * (1 - fy) * (1 - fx) + v01 * (1 - fy) * fx + v10 * fy * (1 - fx) + v11 * fy * fx;
        }
        if (cfg.noise_sigma > 0) v += cfg.noise_sigma * static_cast<float>(rng.normal());
        out[(y * w + x) * c + ch] = std::min(1.0f, std::max(0.0f, v));
      }
    }
  return out;
}

}  // namespace detail

/// Two independently augmented views of one image; deterministic in
/// (image contents aside) the seed. A zero-strength config returns the image
/// unchanged, twice.
inline std::pair<std::vector<float>, std::vector<float>> augment_pair(
    const std::vector<float>& img, std::size_t h, std::size_t w, std::size_t c, std::uint64_t seed,
    const AugmentConfig& cfg = AugmentConfig{}) {
  check(img.size() == h * w * c, "augment_pair: pixel count mismatch");
  if (cfg.min_area >= 1.0f && cfg.flip_p <= 0.0f && cfg.noise_sigma <= 0.0f) return {img, img};
  Rng rng(derive_seed(seed, tag_seed("augment")));
  auto v1 = detail::crop_resize_flip_noise(img, h, w, c, cfg, rng);
  auto v2 = detail::crop_resize_flip_noise(img, h, w, c, cfg, rng);
  return {std::move(v1), std::move(v2)};
}

// ---------------------------------------------------------------------------
// External dataset format: manifest.json + raw u8 blobs with trailing u16
// little-endian labels, one per sample.
// ---------------------------------------------------------------------------

namespace detail {

inline void write_split_file(const fs::path& path, const std::vector<Sample>& samples, std::size_t hwc) {
  std::ofstream out(path, std::ios::binary);
  check(out.good(), "cannot open " + path.string() + " for writing");
  for (const auto& s : samples) {
    check(s.pixels.size() == hwc, "export: sample pixel count mismatch");
    for (float v : s.pixels) {
      auto b = static_cast<std::uint8_t>(std::lround(std::min(1.0f, std::max(0.0f, v)) * 255.0f));
      out.put(static_cast<char>(b));
    }
  }
  for (const auto& s : samples) {
    check(s.label <= 0xffff, "export: label exceeds u16");
    out.put(static_cast<char>(s.label & 0xff));
    out.put(static_cast<char>((s.label >> 8) & 0xff));
  }
}

inline std::vector<Sample> read_split_file(const fs::path& path, std::size_t n, std::size_t hwc) {
  std::ifstream in(path, std::ios::binary);
  check(in.good(), "cannot open " + path.string());
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  check(bytes.size() == n * (hwc + 2),
        "dataset file " + path.string() + " has " + std::to_string(bytes.size()) + " bytes, expected " +
            std::to_string(n * (hwc + 2)));
  std::vector<Sample> out(n);
  for (std::size_t s = 0; s < n; ++s) {
    out[s].pixels.resize(hwc);
    for (std::size_t i = 0; i < hwc; ++i)
      out[s].pixels[i] = static_cast<float>(bytes[s * hwc + i]) / 255.0f;
  }
  std::size_t lbl_off = n * hwc;
  for (std::size_t s = 0; s < n; ++s)
    out[s].label = static_cast<std::size_t>(bytes[lbl_off + 2 * s]) |
                   (static_cast<std::size_t>(bytes[lbl_off + 2 * s + 1]) << 8);
  return out;
}

}  // namespace detail

/// Writes the benchmark in the external directory format. The optional
/// pretraining split is stored under an extra "pretrain" entry.
inline void export_benchmark(const SplitBenchmark& bench, const fs::path& dir) {
  fs::create_directories(dir);
  std::size_t hwc = bench.height * bench.width * bench.channels;
  json manifest;
  manifest["version"] = 1;
  manifest["H"] = bench.height;
  manifest["W"] = bench.width;
  manifest["C"] = bench.channels;
  manifest["dtype"] = "u8";
  manifest["tasks"] = json::array();
  json checksums = json::object();

  auto emit = [&](const TaskData& td, const std::string& stem) {
    std::string train_file = stem + "_train.bin", test_file = stem + "_test.bin";
    detail::write_split_file(dir / train_file, td.train, hwc);
    detail::write_split_file(dir / test_file, td.test, hwc);
    checksums[train_file] = hex64(file_checksum(dir / train_file));
    checksums[test_file] = hex64(file_checksum(dir / test_file));
    json e;
    e["labels"] = td.class_ids;
    e["train_file"] = train_file;
    e["test_file"] = test_file;
    e["counts"] = {{"train", td.train.size()}, {"test", td.test.size()}};
    return e;
  };

  for (std::size_t t = 0; t < bench.tasks.size(); ++t)
    manifest["tasks"].push_back(emit(bench.tasks[t], "task" + std::to_string(t)));
  if (!bench.pretrain.class_ids.empty()) manifest["pretrain"] = emit(bench.pretrain, "pretrain");
  manifest["checksums"] = checksums;
  save_json(dir / "manifest.json", manifest);
}

/// Loads the external format back into a benchmark. External label values are
/// remapped to dense global ids by task order, then sorted label order within
/// each task. Overlapping labels, bad shapes, or bad checksums are rejected.
inline SplitBenchmark load_external_dataset(const fs::path& manifest_path) {
  json manifest = load_json(manifest_path);
  check(manifest.at("dtype") == "u8", "external dataset: unsupported dtype");
  fs::path dir = manifest_path.parent_path();

  SplitBenchmark bench;
  bench.height = manifest.at("H");
  bench.width = manifest.at("W");
  bench.channels = manifest.at("C");
  std::size_t hwc = bench.height * bench.width * bench.channels;
  check(hwc > 0, "external dataset: degenerate geometry");

  const json& checksums = manifest.at("checksums");
  auto verify = [&](const std::string& file) {
    check(checksums.contains(file), "external dataset: no checksum for " + file);
    std::string want = checksums.at(file);
    std::string got = hex64(file_checksum(dir / file));
    check(want == got, "external dataset: checksum mismatch for " + file);
  };

  std::set<std::size_t> seen_labels;
  std::size_t next_id = 0;
  auto ingest = [&](const json& entry) {
    std::vector<std::size_t> ext_labels = entry.at("labels").get<std::vector<std::size_t>>();
    check(!ext_labels.empty(), "external dataset: empty label set");
    std::vector<std::size_t> sorted(ext_labels);
    std::sort(sorted.begin(), sorted.end());
    check(std::adjacent_find(sorted.begin(), sorted.end()) == sorted.end(),
          "external dataset: duplicate label within one split");
    for (std::size_t l : sorted)
      check(seen_labels.insert(l).second,
            "external dataset: label " + std::to_string(l) + " appears in two splits");
    std::map<std::size_t, std::size_t> remap;
    TaskData td;
    for (std::size_t r = 0; r < sorted.size(); ++r) {
      remap[sorted[r]] = next_id + r;
      td.class_ids.push_back(next_id + r);
    }
    next_id += sorted.size();

    std::string train_file = entry.at("train_file"), test_file = entry.at("test_file");
    verify(train_file);
    verify(test_file);
    std::size_t n_train = entry.at("counts").at("train"), n_test = entry.at("counts").at("test");
    td.train = detail::read_split_file(dir / train_file, n_train, hwc);
    td.test = detail::read_split_file(dir / test_file, n_test, hwc);
    for (auto* split : {&td.train, &td.test})
      for (auto& s : *split) {
        auto it = remap.find(s.label);
        check(it != remap.end(), "external dataset: sample label " + std::to_string(s.label) +
                                     " not declared in its split's label set");
        s.label = it->second;
      }
    return td;
  };

  for (const auto& entry : manifest.at("tasks")) bench.tasks.push_back(ingest(entry));
  check(!bench.tasks.empty(), "external dataset: no tasks");
  if (manifest.contains("pretrain")) bench.pretrain = ingest(manifest.at("pretrain"));
  bench.check_disjoint();
  return bench;
}

}  // namespace hprompt
