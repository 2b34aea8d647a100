#pragma once

#include <set>
#include <string>

#include "hprompt/backbone.hpp"
#include "hprompt/data.hpp"
#include "hprompt/prompts.hpp"
#include "hprompt/serialize.hpp"

namespace hprompt {

struct ConfigError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

inline void config_check(bool cond, const std::string& msg) {
  if (!cond) throw ConfigError("config: " + msg);
}

struct ExperimentConfig {
  std::string mode = "hprompts";  // hprompts | tgp | tp | ftseq | joint
  std::string precision = "f32";  // f32 | f64
  std::uint64_t seed = 1;

  BenchmarkSpec data;            // synthetic source; seed is derived from the master seed
  std::string dataset_manifest;  // non-empty: load the external format instead

  BackboneConfig backbone;
  std::string backbone_load;  // non-empty: reuse a pretrained checkpoint
  std::size_t pretrain_epochs = 10;
  double pretrain_lr = 1e-3;
  std::size_t pretrain_batch = 32;

  PromptDims prompts;

  std::size_t e_gke = 2;
  std::size_t e_max = 8;
  std::size_t batch_size = 16;

  double lr_class = 0.02;
  double lr_task = 0.006;
  double lr_general = 0.001;
  double lr_head = 0.006;
  double lambda = 0.1;
  double tau = 0.1;

  std::size_t o_per_class = 2;
  std::size_t kmeans_restarts = 8;
  bool mask_to_task = false;
  bool normalize_query = false;
  bool record_alignment = true;

  AugmentConfig augment;

  bool uses_prompts() const { return mode != "ftseq"; }
  bool uses_general_training() const { return mode == "hprompts" || mode == "tgp" || mode == "joint"; }
  bool uses_class_prompts() const { return mode == "hprompts" || mode == "joint"; }

  void validate() const {
    config_check(mode == "hprompts" || mode == "tgp" || mode == "tp" || mode == "ftseq" || mode == "joint",
                 "mode must be one of hprompts, tgp, tp, ftseq, joint");
    config_check(precision == "f32" || precision == "f64", "precision must be f32 or f64");
    config_check(e_gke <= e_max, "schedule requires e_gke <= e_max");
    config_check(batch_size >= 1, "batch_size must be positive");
    config_check(backbone.image > 0 && backbone.patch > 0 && backbone.image % backbone.patch == 0,
                 "backbone image side must be divisible by patch side");
    config_check(backbone.dim > 0 && backbone.heads > 0 && backbone.dim % backbone.heads == 0,
                 "backbone dim must be divisible by heads");
    config_check(backbone.depth >= 1, "backbone needs at least one layer");
    config_check(prompts.len_t >= 1 && prompts.len_g >= 1, "prompt lengths must be positive");
    config_check(prompts.depth_g >= 1 && prompts.depth_g <= prompts.depth_t &&
                     prompts.depth_t <= backbone.depth,
                 "prompt depths require 1 <= depth_g <= depth_t <= backbone depth");
    config_check(lr_class > 0 && lr_task > 0 && lr_general > 0 && lr_head > 0 && pretrain_lr > 0,
                 "learning rates must be positive");
    config_check(lambda >= 0, "lambda must be non-negative");
    config_check(tau > 0, "tau must be positive");
    config_check(o_per_class >= 1, "o_per_class must be positive");
    config_check(kmeans_restarts >= 1, "kmeans_restarts must be positive");
    config_check(augment.min_area > 0 && augment.min_area <= 1.0f, "augment min_area must be in (0, 1]");
    config_check(augment.flip_p >= 0 && augment.flip_p <= 1.0f, "augment flip_p must be in [0, 1]");
    config_check(augment.noise_sigma >= 0, "augment noise_sigma must be non-negative");
    if (dataset_manifest.empty())
      config_check(data.num_tasks > 0 && data.classes_per_task > 0 && data.n_train > 0 && data.n_test > 0,
                   "synthetic dataset parameters must be positive");
  }

  json to_json() const {
    json j;
    j["mode"] = mode;
    j["precision"] = precision;
    j["seed"] = seed;
    if (dataset_manifest.empty()) {
      j["data"] = {{"synthetic",
                    {{"num_tasks", data.num_tasks},
                     {"classes_per_task", data.classes_per_task},
                     {"n_train", data.n_train},
                     {"n_test", data.n_test},
                     {"pretrain_classes", data.pretrain_classes},
                     {"pretrain_per_class", data.pretrain_per_class},
                     {"pretrain_test_per_class", data.pretrain_test_per_class},
                     {"noise_sigma", data.noise_sigma}}}};
    } else {
      j["data"] = {{"manifest", dataset_manifest}};
    }
    json bb = backbone.to_json();
    bb["load_from"] = backbone_load;
    bb["pretrain_epochs"] = pretrain_epochs;
    bb["pretrain_lr"] = pretrain_lr;
    bb["pretrain_batch"] = pretrain_batch;
    j["backbone"] = bb;
    j["prompts"] = {{"len_t", prompts.len_t},
                    {"depth_t", prompts.depth_t},
                    {"len_g", prompts.len_g},
                    {"depth_g", prompts.depth_g},
                    {"init_std", prompts.init_std},
                    {"init_log_sigma", prompts.init_log_sigma}};
    j["schedule"] = {{"e_gke", e_gke}, {"e_max", e_max}, {"batch_size", batch_size}};
    j["optim"] = {{"lr_class", lr_class}, {"lr_task", lr_task}, {"lr_general", lr_general},
                  {"lr_head", lr_head}};
    j["loss"] = {{"lambda", lambda}, {"tau", tau}};
    j["inference"] = {{"o_per_class", o_per_class},
                      {"kmeans_restarts", kmeans_restarts},
                      {"mask_to_task", mask_to_task},
                      {"normalize_query", normalize_query},
                      {"record_alignment", record_alignment}};
    j["augment"] = {{"min_area", augment.min_area},
                    {"flip_p", augment.flip_p},
                    {"noise_sigma", augment.noise_sigma}};
    return j;
  }

  static ExperimentConfig from_json(const json& j) {
    ExperimentConfig c;
    auto reject_unknown = [](const json& obj, const std::set<std::string>& allowed, const std::string& at) {
      for (auto it = obj.begin(); it != obj.end(); ++it)
        config_check(allowed.count(it.key()) > 0, "unknown key '" + it.key() + "' in " + at);
    };
    reject_unknown(j, {"mode", "precision", "seed", "data", "backbone", "prompts", "schedule", "optim",
                       "loss", "inference", "augment"},
                   "top level");
    if (j.contains("mode")) c.mode = j.at("mode");
    if (j.contains("precision")) c.precision = j.at("precision");
    if (j.contains("seed")) c.seed = j.at("seed");
    if (j.contains("data")) {
      const json& d = j.at("data");
      reject_unknown(d, {"synthetic", "manifest"}, "data");
      config_check(!(d.contains("synthetic") && d.contains("manifest")),
                   "data: give either synthetic or manifest, not both");
      if (d.contains("manifest")) {
        c.dataset_manifest = d.at("manifest");
        config_check(!c.dataset_manifest.empty(), "data.manifest must be a path");
      } else if (d.contains("synthetic")) {
        const json& s = d.at("synthetic");
        reject_unknown(s,
                       {"num_tasks", "classes_per_task", "n_train", "n_test", "pretrain_classes",
                        "pretrain_per_class", "pretrain_test_per_class", "noise_sigma"},
                       "data.synthetic");
        if (s.contains("num_tasks")) c.data.num_tasks = s.at("num_tasks");
        if (s.contains("classes_per_task")) c.data.classes_per_task = s.at("classes_per_task");
        if (s.contains("n_train")) c.data.n_train = s.at("n_train");
        if (s.contains("n_test")) c.data.n_test = s.at("n_test");
        if (s.contains("pretrain_classes")) c.data.pretrain_classes = s.at("pretrain_classes");
        if (s.contains("pretrain_per_class")) c.data.pretrain_per_class = s.at("pretrain_per_class");
        if (s.contains("pretrain_test_per_class"))
          c.data.pretrain_test_per_class = s.at("pretrain_test_per_class");
        if (s.contains("noise_sigma")) c.data.noise_sigma = s.at("noise_sigma");
      }
    }
    if (j.contains("backbone")) {
      const json& b = j.at("backbone");
      reject_unknown(b,
                     {"image", "channels", "patch", "dim", "depth", "heads", "mlp_ratio", "load_from",
                      "pretrain_epochs", "pretrain_lr", "pretrain_batch"},
                     "backbone");
      if (b.contains("image")) c.backbone.image = b.at("image");
      if (b.contains("channels")) c.backbone.channels = b.at("channels");
      if (b.contains("patch")) c.backbone.patch = b.at("patch");
      if (b.contains("dim")) c.backbone.dim = b.at("dim");
      if (b.contains("depth")) c.backbone.depth = b.at("depth");
      if (b.contains("heads")) c.backbone.heads = b.at("heads");
      if (b.contains("mlp_ratio")) c.backbone.mlp_ratio = b.at("mlp_ratio");
      if (b.contains("load_from")) c.backbone_load = b.at("load_from");
      if (b.contains("pretrain_epochs")) c.pretrain_epochs = b.at("pretrain_epochs");
      if (b.contains("pretrain_lr")) c.pretrain_lr = b.at("pretrain_lr");
      if (b.contains("pretrain_batch")) c.pretrain_batch = b.at("pretrain_batch");
    }
    if (j.contains("prompts")) {
      const json& p = j.at("prompts");
      reject_unknown(p, {"len_t", "depth_t", "len_g", "depth_g", "init_std", "init_log_sigma"}, "prompts");
      if (p.contains("len_t")) c.prompts.len_t = p.at("len_t");
      if (p.contains("depth_t")) c.prompts.depth_t = p.at("depth_t");
      if (p.contains("len_g")) c.prompts.len_g = p.at("len_g");
      if (p.contains("depth_g")) c.prompts.depth_g = p.at("depth_g");
      if (p.contains("init_std")) c.prompts.init_std = p.at("init_std");
      if (p.contains("init_log_sigma")) c.prompts.init_log_sigma = p.at("init_log_sigma");
    }
    if (j.contains("schedule")) {
      const json& s = j.at("schedule");
      reject_unknown(s, {"e_gke", "e_max", "batch_size"}, "schedule");
      if (s.contains("e_gke")) c.e_gke = s.at("e_gke");
      if (s.contains("e_max")) c.e_max = s.at("e_max");
      if (s.contains("batch_size")) c.batch_size = s.at("batch_size");
    }
    if (j.contains("optim")) {
      const json& o = j.at("optim");
      reject_unknown(o, {"lr_class", "lr_task", "lr_general", "lr_head"}, "optim");
      if (o.contains("lr_class")) c.lr_class = o.at("lr_class");
      if (o.contains("lr_task")) c.lr_task = o.at("lr_task");
      if (o.contains("lr_general")) c.lr_general = o.at("lr_general");
      if (o.contains("lr_head")) c.lr_head = o.at("lr_head");
    }
    if (j.contains("loss")) {
      const json& l = j.at("loss");
      reject_unknown(l, {"lambda", "tau"}, "loss");
      if (l.contains("lambda")) c.lambda = l.at("lambda");
      if (l.contains("tau")) c.tau = l.at("tau");
    }
    if (j.contains("inference")) {
      const json& i = j.at("inference");
      reject_unknown(i, {"o_per_class", "kmeans_restarts", "mask_to_task", "normalize_query",
                         "record_alignment"},
                     "inference");
      if (i.contains("o_per_class")) c.o_per_class = i.at("o_per_class");
      if (i.contains("kmeans_restarts")) c.kmeans_restarts = i.at("kmeans_restarts");
      if (i.contains("mask_to_task")) c.mask_to_task = i.at("mask_to_task");
      if (i.contains("normalize_query")) c.normalize_query = i.at("normalize_query");
      if (i.contains("record_alignment")) c.record_alignment = i.at("record_alignment");
    }
    if (j.contains("augment")) {
      const json& a = j.at("augment");
      reject_unknown(a, {"min_area", "flip_p", "noise_sigma"}, "augment");
      if (a.contains("min_area")) c.augment.min_area = a.at("min_area");
      if (a.contains("flip_p")) c.augment.flip_p = a.at("flip_p");
      if (a.contains("noise_sigma")) c.augment.noise_sigma = a.at("noise_sigma");
    }
    c.validate();
    return c;
  }

  static ExperimentConfig load(const fs::path& path) {
    json j;
    try {
      j = load_json(path);
    } catch (const std::exception& e) {
      throw ConfigError(std::string("config: ") + e.what());
    }
    return from_json(j);
  }
};

}  // namespace hprompt
