#include <catch2/catch_amalgamated.hpp>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>

#include "hprompt/serialize.hpp"

using namespace hprompt;
namespace fs = std::filesystem;

namespace {

// Runs the experiment binary with the given arguments, discarding output.
int cli(const std::string& args) {
  std::string cmd = std::string(HPROMPT_CLI_PATH) + " " + args + " > /dev/null 2>&1";
  int rc = std::system(cmd.c_str());
  REQUIRE(rc != -1);
  return WEXITSTATUS(rc);
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  REQUIRE(in.good());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

std::size_t count_lines(const fs::path& p) {
  std::ifstream in(p);
  REQUIRE(in.good());
  std::size_t n = 0;
  std::string line;
  while (std::getline(in, line))
    if (!line.empty()) ++n;
  return n;
}

const char* kTinyConfig = R"({
  "mode": "hprompts", "precision": "f32", "seed": 3,
  "data": {"synthetic": {"num_tasks": 2, "classes_per_task": 2, "n_train": 8, "n_test": 4,
           "pretrain_classes": 2, "pretrain_per_class": 16, "pretrain_test_per_class": 4,
           "noise_sigma": 0.05}},
  "backbone": {"image": 16, "channels": 3, "patch": 4, "dim": 16, "depth": 2, "heads": 2,
               "mlp_ratio": 2, "pretrain_epochs": 1, "pretrain_lr": 0.001, "pretrain_batch": 8},
  "prompts": {"len_t": 3, "depth_t": 2, "len_g": 1, "depth_g": 1,
              "init_std": 0.02, "init_log_sigma": -3.0},
  "schedule": {"e_gke": 1, "e_max": 2, "batch_size": 8},
  "optim": {"lr_class": 0.05, "lr_task": 0.006, "lr_general": 0.02, "lr_head": 0.006},
  "loss": {"lambda": 1.0, "tau": 0.5},
  "inference": {"o_per_class": 1, "kmeans_restarts": 2, "mask_to_task": false,
                "normalize_query": false, "record_alignment": true},
  "augment": {"min_area": 0.3, "flip_p": 0.5, "noise_sigma": 0.15}
})";

struct Workspace {
  fs::path root;
  fs::path cfg;
  Workspace() {
    root = fs::temp_directory_path() / "hprompt_test_harness";
    fs::remove_all(root);
    fs::create_directories(root);
    cfg = root / "tiny.json";
    std::ofstream out(cfg);
    out << kTinyConfig;
  }
};

// One workspace with two finished runs, shared by every case in this binary.
Workspace& ws() {
  static Workspace* w = [] {
    auto* p = new Workspace();
    REQUIRE(cli("train --config " + p->cfg.string() + " --out " + (p->root / "run_a").string()) == 0);
    REQUIRE(cli("train --config " + p->cfg.string() + " --out " + (p->root / "run_b").string()) == 0);
    return p;
  }();
  return *w;
}

}  // namespace

TEST_CASE("bad invocations exit with the configuration code") {
  REQUIRE(cli("") == 1);
  REQUIRE(cli("frobnicate") == 1);
  REQUIRE(cli("train") == 1);  // missing required options
  REQUIRE(cli("--help") == 0);
  REQUIRE(cli("train --config /nonexistent.json --out " + (ws().root / "never").string()) == 1);
  REQUIRE_FALSE(fs::exists(ws().root / "never"));

  fs::path bad = ws().root / "bad.json";
  {
    std::ofstream out(bad);
    out << R"({"mode": "tp", "modee": 1})";
  }
  REQUIRE(cli("train --config " + bad.string() + " --out " + (ws().root / "never2").string()) == 1);
}

TEST_CASE("two identical training invocations produce byte-identical artifacts") {
  Workspace& w = ws();
  REQUIRE(slurp(w.root / "run_a" / "metrics.json") == slurp(w.root / "run_b" / "metrics.json"));
  REQUIRE(slurp(w.root / "run_a" / "acc_matrix.json") == slurp(w.root / "run_b" / "acc_matrix.json"));
  REQUIRE(slurp(w.root / "run_a" / "predictions.csv") == slurp(w.root / "run_b" / "predictions.csv"));
  REQUIRE_FALSE(fs::exists(w.root / "run_a" / "RUNNING"));
}

TEST_CASE("a non-empty output directory needs force") {
  Workspace& w = ws();
  REQUIRE(cli("train --config " + w.cfg.string() + " --out " + (w.root / "run_a").string()) == 1);
  REQUIRE(cli("train --config " + w.cfg.string() + " --out " + (w.root / "run_a").string() +
              " --force") == 0);
}

TEST_CASE("the seed flag overrides the config seed") {
  Workspace& w = ws();
  fs::path dir = w.root / "run_seed9";
  REQUIRE(cli("train --config " + w.cfg.string() + " --out " + dir.string() + " --seed 9") == 0);
  json m = load_json(dir / "metrics.json");
  REQUIRE(m.at("seed").get<std::uint64_t>() == 9);
  REQUIRE(slurp(dir / "metrics.json") != slurp(w.root / "run_a" / "metrics.json"));
}

TEST_CASE("re-evaluation is idempotent and matches the stored matrix") {
  Workspace& w = ws();
  std::string before = slurp(w.root / "run_a" / "metrics.json");
  REQUIRE(cli("eval --run " + (w.root / "run_a").string()) == 0);
  REQUIRE(slurp(w.root / "run_a" / "metrics.json") == before);

  REQUIRE(cli("eval --run " + (w.root / "run_a").string() + " --oracle-task-id") == 0);
  REQUIRE(fs::exists(w.root / "run_a" / "predictions_oracle.csv"));
  REQUIRE(slurp(w.root / "run_a" / "metrics.json") == before);

  REQUIRE(cli("eval --run " + (w.root / "missing").string()) == 1);
}

TEST_CASE("prediction files cover every test image") {
  Workspace& w = ws();
  // 2 tasks x 4 test images, plus the header line
  REQUIRE(count_lines(w.root / "run_a" / "predictions.csv") == 9);
  REQUIRE(count_lines(w.root / "run_a" / "predictions_oracle.csv") == 9);
}

TEST_CASE("reports aggregate runs and can emit csv") {
  Workspace& w = ws();
  fs::path csv = w.root / "table.csv";
  REQUIRE(cli("report --runs " + (w.root / "run_a").string() + " " + (w.root / "run_b").string() +
              " --csv " + csv.string()) == 0);
  REQUIRE(count_lines(csv) == 2);  // header plus one aggregated mode row
  std::string body = slurp(csv);
  REQUIRE(body.find("hprompts,2,") != std::string::npos);
  REQUIRE(cli("report --runs " + (w.root / "missing").string()) == 2);
}

TEST_CASE("runtime failures leave the in-progress marker behind") {
  Workspace& w = ws();
  json cfg = json::parse(kTinyConfig);
  cfg["backbone"]["load_from"] = (w.root / "no_such_backbone").string();
  fs::path bad = w.root / "bad_load.json";
  save_json(bad, cfg);
  fs::path dir = w.root / "run_broken";
  REQUIRE(cli("train --config " + bad.string() + " --out " + dir.string()) == 2);
  REQUIRE(fs::exists(dir / "RUNNING"));
}
