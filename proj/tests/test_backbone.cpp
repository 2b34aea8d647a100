#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include "hprompt/backbone.hpp"
#include "hprompt/config.hpp"
#include "hprompt/rng.hpp"
#include "hprompt/trainer.hpp"

using namespace hprompt;
namespace fs = std::filesystem;

namespace {

BackboneConfig small_cfg() {
  BackboneConfig c;
  c.image = 16;
  c.channels = 3;
  c.patch = 4;
  c.dim = 16;
  c.depth = 2;
  c.heads = 2;
  c.mlp_ratio = 2;
  return c;
}

std::vector<double> rand_pixels(const BackboneConfig& c, Rng& rng) {
  std::vector<double> px(c.image * c.image * c.channels);
  for (auto& v : px) v = rng.uniform();
  return px;
}

fs::path temp_dir(const std::string& tag) {
  fs::path d = fs::temp_directory_path() / ("hp_bb_" + tag);
  fs::remove_all(d);
  fs::create_directories(d);
  return d;
}

// raw double-loop reference for one pre-norm block plus final norm readouts
struct Flat {
  std::map<std::string, std::vector<double>> w;
  std::map<std::string, Shape> shapes;
};

Flat flatten(Backbone<double>& bb) {
  Flat f;
  bb.for_each_param([&](const std::string& name, Tensor<double>& t) {
    f.w[name] = t.value();
    f.shapes[name] = t.shape();
  });
  return f;
}

std::vector<double> ln_row(const std::vector<double>& row, const std::vector<double>& g,
                           const std::vector<double>& b) {
  std::size_t n = row.size();
  double mu = 0;
  for (double v : row) mu += v;
  mu /= n;
  double var = 0;
  for (double v : row) var += (v - mu) * (v - mu);
  var /= n;
  double is = 1.0 / std::sqrt(var + 1e-5);
  std::vector<double> out(n);
  for (std::size_t j = 0; j < n; ++j) out[j] = (row[j] - mu) * is * g[j] + b[j];
  return out;
}

std::vector<std::vector<double>> matmul_ref(const std::vector<std::vector<double>>& a,
                                            const std::vector<double>& w, std::size_t in,
                                            std::size_t out, const std::vector<double>& bias) {
  std::vector<std::vector<double>> r(a.size(), std::vector<double>(out, 0.0));
  for (std::size_t i = 0; i < a.size(); ++i)
    for (std::size_t k = 0; k < in; ++k)
      for (std::size_t j = 0; j < out; ++j) r[i][j] += a[i][k] * w[k * out + j];
  for (auto& row : r)
    for (std::size_t j = 0; j < out; ++j) row[j] += bias[j];
  return r;
}

}  // namespace

TEST_CASE("patch embedding has one token per patch") {
  BackboneConfig c = small_cfg();
  Rng rng(5);
  Backbone<double> bb(c, rng);
  Rng prng(6);
  auto e = bb.embed(rand_pixels(c, prng));
  REQUIRE(e.shape() == Shape{16, 16});
  REQUIRE(c.tokens() == 16);
}

TEST_CASE("all-zero image embeds to projection bias plus position rows") {
  BackboneConfig c = small_cfg();
  Rng rng(5);
  Backbone<double> bb(c, rng);
  std::vector<double> bias(c.dim), pos;
  bb.for_each_param([&](const std::string& name, Tensor<double>& t) {
    if (name == "patch_b") {
      for (std::size_t i = 0; i < c.dim; ++i) t.mutable_value()[i] = 0.01 * (i + 1);
      bias = t.value();
    }
    if (name == "pos") pos = t.value();
  });
  auto e = bb.embed(std::vector<double>(c.image * c.image * c.channels, 0.0));
  for (std::size_t r = 0; r < c.tokens(); ++r)
    for (std::size_t j = 0; j < c.dim; ++j)
      REQUIRE(e.value()[r * c.dim + j] == bias[j] + pos[r * c.dim + j]);
}

TEST_CASE("same seed builds bitwise-identical backbones and outputs") {
  BackboneConfig c = small_cfg();
  Rng r1(42), r2(42);
  Backbone<double> a(c, r1), b(c, r2);
  REQUIRE(a.checksum() == b.checksum());
  Rng prng(7);
  auto px = rand_pixels(c, prng);
  REQUIRE(a.forward_plain(px).value() == b.forward_plain(px).value());
}

TEST_CASE("prompted forward keeps the extended sequence length at every layer") {
  BackboneConfig c = small_cfg();
  c.depth = 3;
  Rng rng(9);
  Backbone<double> bb(c, rng);
  Rng prng(10);
  auto seq = bb.embed(rand_pixels(c, prng));

  PromptStack<double> ps;
  Rng irng(11);
  ps.general.push_back(Tensor<double>::randn({2, c.dim}, irng, 0.02));
  ps.task.push_back(Tensor<double>::randn({3, c.dim}, irng, 0.02));
  ps.task.push_back(Tensor<double>::randn({3, c.dim}, irng, 0.02));

  std::vector<Tensor<double>> layers;
  auto out = bb.forward_seq(seq, ps, &layers);
  REQUIRE(layers.size() == 3);
  for (const auto& z : layers) REQUIRE(z.shape() == Shape{2 + 3 + 16, c.dim});
  REQUIRE(out.shape() == Shape{c.dim});

  // readout is the first general row of the final normed output
  std::vector<double> fg, fb;
  bb.for_each_param([&](const std::string& name, Tensor<double>& t) {
    if (name == "final_g") fg = t.value();
    if (name == "final_b") fb = t.value();
  });
  const auto& zv = layers.back().value();
  std::vector<double> row0(zv.begin(), zv.begin() + c.dim);
  auto normed = ln_row(row0, fg, fb);
  for (std::size_t j = 0; j < c.dim; ++j)
    REQUIRE(out.value()[j] == Catch::Approx(normed[j]).epsilon(0).margin(1e-12));
}

TEST_CASE("single-layer forward matches a straight-line reference") {
  BackboneConfig c = small_cfg();
  c.depth = 1;
  Rng rng(13);
  Backbone<double> bb(c, rng);
  Rng prng(14);
  auto px = rand_pixels(c, prng);

  Flat f = flatten(bb);
  std::size_t D = c.dim, H = c.heads, hd = D / H, L = c.tokens();

  // embed by hand
  std::size_t per = c.image / c.patch, pd = c.patch_dim();
  std::vector<std::vector<double>> x;
  for (std::size_t py = 0; py < per; ++py)
    for (std::size_t pxi = 0; pxi < per; ++pxi) {
      std::vector<double> patch;
      patch.reserve(pd);
      for (std::size_t dy = 0; dy < c.patch; ++dy)
        for (std::size_t dx = 0; dx < c.patch; ++dx)
          for (std::size_t ch = 0; ch < c.channels; ++ch) {
            std::size_t row = py * c.patch + dy, col = pxi * c.patch + dx;
            patch.push_back(px[(row * c.image + col) * c.channels + ch]);
          }
      std::vector<double> tok(D, 0.0);
      for (std::size_t k = 0; k < pd; ++k)
        for (std::size_t j = 0; j < D; ++j) tok[j] += patch[k] * f.w["patch_w"][k * D + j];
      std::size_t r = x.size();
      for (std::size_t j = 0; j < D; ++j) tok[j] += f.w["patch_b"][j] + f.w["pos"][r * D + j];
      x.push_back(tok);
    }

  // zero prompts ahead of the sequence
  std::size_t lg = 1, lt = 2;
  std::vector<std::vector<double>> z(lg + lt, std::vector<double>(D, 0.0));
  z.insert(z.end(), x.begin(), x.end());
  std::size_t n = z.size();
  REQUIRE(n == lg + lt + L);

  auto pfx = [&](const std::string& s) { return "l0." + s; };
  std::vector<std::vector<double>> h;
  for (const auto& row : z) h.push_back(ln_row(row, f.w[pfx("ln1_g")], f.w[pfx("ln1_b")]));
  auto q = matmul_ref(h, f.w[pfx("wq")], D, D, f.w[pfx("bq")]);
  auto k = matmul_ref(h, f.w[pfx("wk")], D, D, f.w[pfx("bk")]);
  auto v = matmul_ref(h, f.w[pfx("wv")], D, D, f.w[pfx("bv")]);

  std::vector<std::vector<double>> mixed(n, std::vector<double>(D, 0.0));
  double inv = 1.0 / std::sqrt(static_cast<double>(hd));
  for (std::size_t head = 0; head < H; ++head) {
    std::size_t off = head * hd;
    for (std::size_t i = 0; i < n; ++i) {
      std::vector<double> scores(n, 0.0);
      double mx = -1e300;
      for (std::size_t j = 0; j < n; ++j) {
        double s = 0;
        for (std::size_t d = 0; d < hd; ++d) s += q[i][off + d] * k[j][off + d];
        scores[j] = s * inv;
        mx = std::max(mx, scores[j]);
      }
      double zsum = 0;
      for (auto& s : scores) {
        s = std::exp(s - mx);
        zsum += s;
      }
      for (std::size_t j = 0; j < n; ++j)
        for (std::size_t d = 0; d < hd; ++d) mixed[i][off + d] += scores[j] / zsum * v[j][off + d];
    }
  }
  auto att = matmul_ref(mixed, f.w[pfx("wo")], D, D, f.w[pfx("bo")]);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < D; ++j) att[i][j] += z[i][j];

  std::vector<std::vector<double>> h2;
  for (const auto& row : att) h2.push_back(ln_row(row, f.w[pfx("ln2_g")], f.w[pfx("ln2_b")]));
  std::size_t hidden = D * c.mlp_ratio;
  auto m1 = matmul_ref(h2, f.w[pfx("w1")], D, hidden, f.w[pfx("b1")]);
  for (auto& row : m1)
    for (auto& val : row) val = 0.5 * val * (1.0 + std::erf(val * 0.70710678118654752440));
  auto m2 = matmul_ref(m1, f.w[pfx("w2")], hidden, D, f.w[pfx("b2")]);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < D; ++j) m2[i][j] += att[i][j];

  auto readout = ln_row(m2[0], f.w["final_g"], f.w["final_b"]);

  PromptStack<double> ps;
  ps.general.push_back(Tensor<double>::zeros({lg, D}));
  ps.task.push_back(Tensor<double>::zeros({lt, D}));
  auto got = bb.forward(px, ps);
  for (std::size_t j = 0; j < D; ++j)
    REQUIRE(got.value()[j] == Catch::Approx(readout[j]).epsilon(0).margin(1e-10));

  // plain readout mean-pools the final norm over the unprompted sequence
  std::vector<std::vector<double>> zp = x;
  std::vector<std::vector<double>> hz;
  for (const auto& row : zp) hz.push_back(ln_row(row, f.w[pfx("ln1_g")], f.w[pfx("ln1_b")]));
  auto qp = matmul_ref(hz, f.w[pfx("wq")], D, D, f.w[pfx("bq")]);
  auto kp = matmul_ref(hz, f.w[pfx("wk")], D, D, f.w[pfx("bk")]);
  auto vp = matmul_ref(hz, f.w[pfx("wv")], D, D, f.w[pfx("bv")]);
  std::vector<std::vector<double>> mixp(L, std::vector<double>(D, 0.0));
  for (std::size_t head = 0; head < H; ++head) {
    std::size_t off = head * hd;
    for (std::size_t i = 0; i < L; ++i) {
      std::vector<double> scores(L, 0.0);
      double mx = -1e300;
      for (std::size_t j = 0; j < L; ++j) {
        double s = 0;
        for (std::size_t d = 0; d < hd; ++d) s += qp[i][off + d] * kp[j][off + d];
        scores[j] = s * inv;
        mx = std::max(mx, scores[j]);
      }
      double zsum = 0;
      for (auto& s : scores) {
        s = std::exp(s - mx);
        zsum += s;
      }
      for (std::size_t j = 0; j < L; ++j)
        for (std::size_t d = 0; d < hd; ++d) mixp[i][off + d] += scores[j] / zsum * vp[j][off + d];
    }
  }
  auto attp = matmul_ref(mixp, f.w[pfx("wo")], D, D, f.w[pfx("bo")]);
  for (std::size_t i = 0; i < L; ++i)
    for (std::size_t j = 0; j < D; ++j) attp[i][j] += zp[i][j];
  std::vector<std::vector<double>> hp2;
  for (const auto& row : attp) hp2.push_back(ln_row(row, f.w[pfx("ln2_g")], f.w[pfx("ln2_b")]));
  auto mp1 = matmul_ref(hp2, f.w[pfx("w1")], D, hidden, f.w[pfx("b1")]);
  for (auto& row : mp1)
    for (auto& val : row) val = 0.5 * val * (1.0 + std::erf(val * 0.70710678118654752440));
  auto mp2 = matmul_ref(mp1, f.w[pfx("w2")], hidden, D, f.w[pfx("b2")]);
  for (std::size_t i = 0; i < L; ++i)
    for (std::size_t j = 0; j < D; ++j) mp2[i][j] += attp[i][j];
  std::vector<double> pooled(D, 0.0);
  for (std::size_t i = 0; i < L; ++i) {
    auto nr = ln_row(mp2[i], f.w["final_g"], f.w["final_b"]);
    for (std::size_t j = 0; j < D; ++j) pooled[j] += nr[j];
  }
  for (auto& v2 : pooled) v2 /= static_cast<double>(L);
  auto plain = bb.forward_plain(px);
  for (std::size_t j = 0; j < D; ++j)
    REQUIRE(plain.value()[j] == Catch::Approx(pooled[j]).epsilon(0).margin(1e-10));
}

TEST_CASE("save and load round trip preserves the frozen hash and outputs") {
  // weights persist at 32 bits, so a float backbone round-trips bitwise
  BackboneConfig c = small_cfg();
  Rng rng(21);
  Backbone<float> bb(c, rng);
  bb.freeze();
  fs::path d = temp_dir("roundtrip");
  bb.save(d);
  Backbone<float> re = Backbone<float>::load(d);
  REQUIRE(re.checksum() == bb.checksum());
  Rng prng(22);
  auto pxd = rand_pixels(c, prng);
  std::vector<float> px(pxd.begin(), pxd.end());
  REQUIRE(re.forward_plain(px).value() == bb.forward_plain(px).value());

  // loaded weights stay frozen: the forward graph carries no gradients
  REQUIRE_FALSE(re.forward_plain(px).needs_grad());
}

TEST_CASE("tampered stored hash is rejected at load") {
  BackboneConfig c = small_cfg();
  Rng rng(23);
  Backbone<double> bb(c, rng);
  bb.freeze();
  fs::path d = temp_dir("tamper");
  bb.save(d);
  json meta = load_json(d / "backbone.json");
  meta["frozen_hash"] = "0000000000000000";
  save_json(d / "backbone.json", meta);
  REQUIRE_THROWS(Backbone<double>::load(d));
}

TEST_CASE("pretraining lifts holdout accuracy well above chance") {
  ExperimentConfig cfg;
  cfg.mode = "tp";
  cfg.precision = "f32";
  cfg.seed = 1;
  cfg.data.num_tasks = 2;
  cfg.data.n_train = 16;
  cfg.data.n_test = 8;
  cfg.data.pretrain_classes = 4;
  cfg.data.pretrain_per_class = 48;
  cfg.data.pretrain_test_per_class = 16;
  cfg.backbone = small_cfg();
  cfg.pretrain_epochs = 5;
  cfg.e_gke = 0;
  cfg.e_max = 1;
  cfg.batch_size = 8;
  cfg.validate();

  Trainer<float> tr(cfg);
  tr.prepare();
  REQUIRE(tr.pretrain_test_accuracy().has_value());
  REQUIRE(*tr.pretrain_test_accuracy() >= 3.0 * (1.0 / 4.0));
}

TEST_CASE("zero pretraining epochs leaves a usable random frozen backbone") {
  ExperimentConfig cfg;
  cfg.mode = "tp";
  cfg.precision = "f32";
  cfg.seed = 2;
  cfg.data.num_tasks = 2;
  cfg.data.n_train = 8;
  cfg.data.n_test = 4;
  cfg.data.pretrain_classes = 2;
  cfg.data.pretrain_per_class = 8;
  cfg.data.pretrain_test_per_class = 4;
  cfg.backbone = small_cfg();
  cfg.pretrain_epochs = 0;
  cfg.e_gke = 0;
  cfg.e_max = 1;
  cfg.batch_size = 8;
  cfg.validate();

  Trainer<float> tr(cfg);
  tr.prepare();
  REQUIRE_FALSE(tr.pretrain_test_accuracy().has_value());
  const auto& td = tr.benchmark().tasks[0];
  auto rep = tr.backbone().forward_plain(to_precision<float>(td.train[0].pixels));
  REQUIRE(rep.shape() == Shape{cfg.backbone.dim});
  REQUIRE_FALSE(rep.needs_grad());
}
