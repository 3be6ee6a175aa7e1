#include "ccd/pipeline.hpp"

#include <algorithm>
#include <cstdio>
#include <fstream>
#include <iostream>
#include <map>
#include <set>
#include <sstream>
#include <thread>

#include "ccd/aggregate_fuse.hpp"
#include "ccd/manifest.hpp"
#include "ccd/pseudo_label.hpp"
#include "ccd/rng.hpp"
#include "ccd/view_provider.hpp"

namespace ccd {
namespace {

using nlohmann::json;
namespace fs = std::filesystem;

// --- strict JSON section reader ----------------------------------------------

class Section {
 public:
  Section(const json& doc, std::string name) : doc_(doc), name_(std::move(name)) {
    if (!doc_.is_object()) throw ConfigError("config: \"" + name_ + "\" must be an object");
  }

  template <typename T>
  void get(const char* key, T& out) {
    seen_.insert(key);
    auto it = doc_.find(key);
    if (it == doc_.end() || it->is_null()) return;
    try {
      out = it->get<T>();
    } catch (const json::exception&) {
      throw ConfigError("config: " + name_ + "." + key + " has the wrong type");
    }
  }

  const json* sub(const char* key) {
    seen_.insert(key);
    auto it = doc_.find(key);
    return it == doc_.end() || it->is_null() ? nullptr : &*it;
  }

  void finish() const {
    for (auto it = doc_.begin(); it != doc_.end(); ++it) {
      if (!seen_.count(it.key())) {
        throw ConfigError("config: unknown key \"" + (name_.empty() ? "" : name_ + ".") +
                          it.key() + "\"");
      }
    }
  }

 private:
  const json& doc_;
  std::string name_;
  std::set<std::string> seen_;
};

std::string hex64(std::uint64_t v) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(v));
  return buf;
}

std::string read_text(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw InputError("cannot open " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw InputError("cannot write " + path.string());
  out << text;
  if (!out) throw InputError("write failed: " + path.string());
}

void ensure_dir(const fs::path& dir) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw InputError("cannot create directory " + dir.string() + ": " + ec.message());
}

// --- stage metadata -------------------------------------------------------------

void write_meta(const PipelineConfig& cfg, const fs::path& run_dir, const std::string& stage,
                json extra = json::object()) {
  json meta = {{"stage", stage}, {"config_hash", cfg.hash()}, {"seed", cfg.seed}};
  meta.update(extra);
  write_text(run_dir / (stage + ".meta.json"), meta.dump(2) + "\n");
}

json require_stage(const PipelineConfig& cfg, const fs::path& run_dir, const std::string& stage) {
  const fs::path path = run_dir / (stage + ".meta.json");
  if (!fs::exists(path)) {
    throw InputError("missing " + path.string() + "; run the " + stage + " stage first");
  }
  json meta;
  try {
    meta = json::parse(read_text(path));
  } catch (const json::exception& e) {
    throw InputError(path.string() + ": malformed stage metadata: " + e.what());
  }
  const std::string got = meta.value("config_hash", "");
  if (got != cfg.hash()) {
    throw InputError(path.string() + ": artifacts were produced by config " + got +
                     ", current config is " + cfg.hash() + "; rerun the " + stage + " stage");
  }
  return meta;
}

// --- data loading -----------------------------------------------------------------

FeatureMap read_feature_map(const DatasetManifest& m, const ImageRecord& rec,
                            const std::string& rel) {
  const Tensor t = read_tensor(m.resolve(rel));
  if (t.dims != std::vector<std::uint32_t>{m.feature_channels, m.grid_h, m.grid_w}) {
    throw InputError("feature map for \"" + rec.image_id + "\" has the wrong dims");
  }
  FeatureMap fm;
  fm.image_id = rec.image_id;
  fm.channels = m.feature_channels;
  fm.grid_h = m.grid_h;
  fm.grid_w = m.grid_w;
  fm.width_px = rec.width_px;
  fm.height_px = rec.height_px;
  fm.values = t.data;
  fm.validate();
  return fm;
}

PseudoLabelSet read_labels(const fs::path& path, LabelKind kind, bool calibrated,
                           std::size_t n, std::size_t C) {
  PseudoLabelSet labels = PseudoLabelSet::from_tensor(read_tensor(path), kind, calibrated);
  if (labels.n_images != n || labels.n_classes != C) {
    throw InputError(path.string() + ": label shape does not match the manifest");
  }
  return labels;
}

// --- provider session ---------------------------------------------------------------

class ProviderSession {
 public:
  ProviderSession(const PipelineConfig& cfg, std::uint32_t dim) {
    ProviderOptions opts;
    opts.window = cfg.provider.window;
    opts.timeout = std::chrono::milliseconds(cfg.provider.timeout_ms);
    opts.embedding_dim = dim;
    std::unique_ptr<LineChannel> channel;
    if (cfg.provider.mode == "synthetic") {
      world_ = std::make_unique<SyntheticWorld>(load_world(cfg.resolve(cfg.world)));
      auto [client_end, server_end] = make_channel_pair();
      channel = std::move(client_end);
      server_ = std::thread([this, end = std::move(server_end)]() mutable {
        try {
          serve_synthetic(*end, *world_);
        } catch (const std::exception&) {
          // client went away mid-stream; it reports its own error
        }
      });
    } else if (cfg.provider.mode == "command") {
      channel = std::make_unique<SubprocessChannel>(cfg.provider.command);
    } else {
      channel = connect_tcp(cfg.provider.address);
    }
    try {
      client_ = std::make_unique<ViewProviderClient>(std::move(channel), opts);
    } catch (...) {
      if (server_.joinable()) server_.join();
      throw;
    }
  }

  ~ProviderSession() {
    client_.reset();
    if (server_.joinable()) server_.join();
  }

  ViewProviderClient& client() { return *client_; }

 private:
  std::unique_ptr<SyntheticWorld> world_;
  std::thread server_;
  std::unique_ptr<ViewProviderClient> client_;
};

}  // namespace

// --- config ---------------------------------------------------------------------------

fs::path PipelineConfig::resolve(const std::string& p) const {
  const fs::path path(p);
  return path.is_absolute() ? path : base_dir / path;
}

void PipelineConfig::validate() const {
  if (!(tau > 0.0) || !std::isfinite(tau)) throw ConfigError("config: labels.tau must be positive");
  calibration.validate();
  views.validate();
  train.validate();
  synth.validate();
  if (!(alpha >= 0.0 && alpha <= 1.0)) {
    throw ConfigError("config: fusion.alpha must lie in [0, 1], got " + std::to_string(alpha));
  }
  if (policy_k == 0) throw ConfigError("config: views.policy_k must be positive");
  if (policy == ViewPolicy::kGrid) {
    const auto g = static_cast<std::size_t>(std::llround(std::sqrt(double(policy_k))));
    if (g * g != policy_k) throw ConfigError("config: grid policy needs a square views.policy_k");
  }
  if (resize_long <= 0) throw ConfigError("config: views.resize_long must be positive");
  if (provider.mode != "synthetic" && provider.mode != "command" && provider.mode != "tcp") {
    throw ConfigError("config: provider.mode must be synthetic, command or tcp");
  }
  if (provider.mode == "command" && provider.command.empty()) {
    throw ConfigError("config: provider.command is empty");
  }
  if (provider.mode == "tcp" && provider.address.find(':') == std::string::npos) {
    throw ConfigError("config: provider.address must be host:port");
  }
  if (provider.window == 0) throw ConfigError("config: provider.window must be positive");
  if (provider.timeout_ms <= 0) throw ConfigError("config: provider.timeout_ms must be positive");
  if (!sweep_parameter.empty() && sweep_values.empty()) {
    throw ConfigError("config: sweep.values is empty");
  }
}

json PipelineConfig::to_json() const {
  json j;
  j["seed"] = seed;
  j["data"] = {{"train_manifest", train_manifest},
               {"eval_manifest", eval_manifest},
               {"world", world}};
  j["synth"] = spec_to_json(synth);
  j["labels"] = {{"tau", tau},
                 {"debias", debias},
                 {"entropy_threshold", calibration.entropy_threshold},
                 {"entropy_mode",
                  calibration.entropy_mode == EntropyMode::kRaw ? "raw" : "normalized"},
                 {"floor", calibration.floor}};
  j["views"] = {{"policy", to_string(policy)},
                {"cam_threshold", views.cam_threshold},
                {"classifier_threshold", views.classifier_threshold},
                {"offset_px", views.offset_px},
                {"perturb_k", views.perturb_k},
                {"views_cap", views.views_cap},
                {"policy_k", policy_k},
                {"resize_long", resize_long}};
  j["fusion"] = {{"label_update", label_update}, {"alpha", alpha}};
  j["train"] = {{"learning_rate", train.learning_rate},
                {"batch_size", train.batch_size},
                {"warmup_epochs", train.warmup_epochs},
                {"max_epochs", train.max_epochs},
                {"beta_warmup", train.beta_warmup},
                {"beta_main", train.beta_main},
                {"consistency", train.consistency},
                {"weak_strength", train.weak_strength},
                {"strong_strength", train.strong_strength},
                {"init_scale", train.init_scale},
                {"label_threshold", train.label_threshold},
                {"early_stopping", train.early_stopping}};
  j["provider"] = {{"mode", provider.mode},
                   {"command", provider.command},
                   {"address", provider.address},
                   {"window", provider.window},
                   {"timeout_ms", provider.timeout_ms},
                   {"cache", provider.cache}};
  j["sweep"] = {{"parameter", sweep_parameter}, {"values", sweep_values}};
  return j;
}

std::string PipelineConfig::hash() const { return hex64(fnv1a64(to_json().dump())); }

PipelineConfig config_from_json(const json& doc, const fs::path& base_dir) {
  PipelineConfig c;
  c.base_dir = base_dir;
  Section top(doc, "");
  top.get("seed", c.seed);
  if (const json* d = top.sub("data")) {
    Section s(*d, "data");
    s.get("train_manifest", c.train_manifest);
    s.get("eval_manifest", c.eval_manifest);
    s.get("world", c.world);
    s.finish();
  }
  if (const json* d = top.sub("synth")) c.synth = spec_from_json(*d);
  if (const json* d = top.sub("labels")) {
    Section s(*d, "labels");
    s.get("tau", c.tau);
    s.get("debias", c.debias);
    s.get("entropy_threshold", c.calibration.entropy_threshold);
    std::string mode = "normalized";
    s.get("entropy_mode", mode);
    if (mode == "raw") {
      c.calibration.entropy_mode = EntropyMode::kRaw;
    } else if (mode != "normalized") {
      throw ConfigError("config: labels.entropy_mode must be normalized or raw");
    }
    s.get("floor", c.calibration.floor);
    s.finish();
  }
  if (const json* d = top.sub("views")) {
    Section s(*d, "views");
    std::string policy = "cam";
    s.get("policy", policy);
    c.policy = view_policy_from_string(policy);
    s.get("cam_threshold", c.views.cam_threshold);
    s.get("classifier_threshold", c.views.classifier_threshold);
    s.get("offset_px", c.views.offset_px);
    s.get("perturb_k", c.views.perturb_k);
    s.get("views_cap", c.views.views_cap);
    s.get("policy_k", c.policy_k);
    s.get("resize_long", c.resize_long);
    s.finish();
  }
  if (const json* d = top.sub("fusion")) {
    Section s(*d, "fusion");
    s.get("label_update", c.label_update);
    s.get("alpha", c.alpha);
    s.finish();
  }
  if (const json* d = top.sub("train")) {
    Section s(*d, "train");
    s.get("learning_rate", c.train.learning_rate);
    s.get("batch_size", c.train.batch_size);
    s.get("warmup_epochs", c.train.warmup_epochs);
    s.get("max_epochs", c.train.max_epochs);
    s.get("beta_warmup", c.train.beta_warmup);
    s.get("beta_main", c.train.beta_main);
    s.get("consistency", c.train.consistency);
    s.get("weak_strength", c.train.weak_strength);
    s.get("strong_strength", c.train.strong_strength);
    s.get("init_scale", c.train.init_scale);
    s.get("label_threshold", c.train.label_threshold);
    s.get("early_stopping", c.train.early_stopping);
    s.finish();
  }
  if (const json* d = top.sub("provider")) {
    Section s(*d, "provider");
    s.get("mode", c.provider.mode);
    s.get("command", c.provider.command);
    s.get("address", c.provider.address);
    s.get("window", c.provider.window);
    s.get("timeout_ms", c.provider.timeout_ms);
    s.get("cache", c.provider.cache);
    s.finish();
  }
  if (const json* d = top.sub("sweep")) {
    Section s(*d, "sweep");
    s.get("parameter", c.sweep_parameter);
    s.get("values", c.sweep_values);
    s.finish();
  }
  top.finish();
  c.views.seed = derive_seed(c.seed, "views");
  c.train.seed = derive_seed(c.seed, "train");
  c.validate();
  return c;
}

PipelineConfig load_config(const fs::path& path) {
  json doc;
  try {
    doc = json::parse(read_text(path));
  } catch (const json::exception& e) {
    throw ConfigError(path.string() + ": invalid JSON: " + e.what());
  } catch (const InputError& e) {
    throw ConfigError(e.what());
  }
  try {
    return config_from_json(doc, path.parent_path());
  } catch (const ConfigError& e) {
    throw ConfigError(path.string() + ": " + e.what());
  }
}

void set_config_value(json& doc, const std::string& dotted_key, const json& value) {
  json* node = &doc;
  std::size_t start = 0;
  while (true) {
    const std::size_t dot = dotted_key.find('.', start);
    const std::string part = dotted_key.substr(start, dot - start);
    if (part.empty()) throw ConfigError("bad config key \"" + dotted_key + "\"");
    if (dot == std::string::npos) {
      (*node)[part] = value;
      return;
    }
    if (!node->contains(part)) (*node)[part] = json::object();
    node = &(*node)[part];
    if (!node->is_object()) throw ConfigError("config key \"" + dotted_key + "\" is not a section");
    start = dot + 1;
  }
}

// --- loaders ---------------------------------------------------------------------------

TrainingSet load_training_set(const DatasetManifest& m) {
  TrainingSet ts;
  ts.n_features = m.feature_channels;
  std::size_t with_views = 0;
  for (const auto& rec : m.images) {
    if (rec.weak_feature_path && rec.strong_feature_path) ++with_views;
  }
  const bool use_views = with_views == m.images.size() && !m.images.empty();
  for (const auto& rec : m.images) {
    ts.image_ids.push_back(rec.image_id);
    const auto pooled = read_feature_map(m, rec, rec.feature_map_path).pooled();
    ts.features.insert(ts.features.end(), pooled.begin(), pooled.end());
    if (use_views) {
      const auto w = read_feature_map(m, rec, *rec.weak_feature_path).pooled();
      const auto s = read_feature_map(m, rec, *rec.strong_feature_path).pooled();
      ts.weak.insert(ts.weak.end(), w.begin(), w.end());
      ts.strong.insert(ts.strong.end(), s.begin(), s.end());
    }
  }
  ts.validate();
  return ts;
}

std::vector<std::uint8_t> load_gt_labels(const DatasetManifest& m) {
  std::vector<std::uint8_t> gt;
  gt.reserve(m.images.size() * m.num_classes());
  for (const auto& rec : m.images) {
    if (!rec.gt_label_path) {
      throw InputError("image \"" + rec.image_id + "\" has no gt_label_path");
    }
    const Tensor t = read_tensor(m.resolve(*rec.gt_label_path));
    if (t.size() != m.num_classes()) {
      throw InputError("gt labels for \"" + rec.image_id + "\" have the wrong length");
    }
    for (float v : t.data) gt.push_back(v > 0.5f ? 1 : 0);
  }
  return gt;
}

EmbeddingMatrix load_text_embeddings(const DatasetManifest& m) {
  const Tensor t = read_tensor(m.resolve(m.text_embedding_path));
  EmbeddingMatrix e(m.num_classes(), m.embedding_dim, t.data);
  e.validate("text embeddings");
  return e;
}

EmbeddingMatrix load_global_embeddings(const DatasetManifest& m) {
  std::vector<float> values;
  values.reserve(m.images.size() * m.embedding_dim);
  for (const auto& rec : m.images) {
    const Tensor t = read_tensor(m.resolve(rec.global_embedding_path));
    if (t.size() != m.embedding_dim) {
      throw InputError("global embedding for \"" + rec.image_id + "\" has the wrong length");
    }
    values.insert(values.end(), t.data.begin(), t.data.end());
  }
  EmbeddingMatrix e(m.images.size(), m.embedding_dim, std::move(values));
  e.validate("global embeddings");
  return e;
}

void save_head(const ClassifierHead& head, const fs::path& dir, const std::string& stem) {
  write_tensor(dir / (stem + ".weights.ccdt"), head.weights_tensor());
  write_tensor(dir / (stem + ".biases.ccdt"), head.biases_tensor());
}

ClassifierHead load_head(const fs::path& dir, const std::string& stem) {
  return ClassifierHead::from_tensors(read_tensor(dir / (stem + ".weights.ccdt")),
                                      read_tensor(dir / (stem + ".biases.ccdt")));
}

// --- stages -----------------------------------------------------------------------------

WorldFiles cmd_synth(const PipelineConfig& cfg, const fs::path& out_dir) {
  ensure_dir(out_dir);
  const WorldFiles files = generate_world(cfg.synth, out_dir);
  json doc = cfg.to_json();
  doc["data"] = {{"train_manifest", files.train_manifest.filename().string()},
                 {"eval_manifest", files.test_manifest.filename().string()},
                 {"world", files.world_json.filename().string()}};
  write_text(out_dir / "config.json", doc.dump(2) + "\n");
  return files;
}

void cmd_label_init(const PipelineConfig& cfg, const fs::path& run_dir) {
  ensure_dir(run_dir);
  const DatasetManifest m = load_manifest(cfg.resolve(cfg.train_manifest));
  const EmbeddingMatrix texts = load_text_embeddings(m);
  const EmbeddingMatrix images = load_global_embeddings(m);
  const PseudoLabelSet raw = initial_labels(images, texts, cfg.tau);
  write_tensor(run_dir / artifact::kLabelsInitialRaw, raw.to_tensor());

  BiasVector bias = BiasVector::neutral(m.num_classes());
  bool empty_admission = false;
  try {
    bias = estimate_bias(raw, cfg.calibration);
  } catch (const EmptyAdmissionError&) {
    if (cfg.debias) throw;
    empty_admission = true;
  }
  write_text(run_dir / artifact::kBias, bias_to_json(bias, m.class_names).dump(2) + "\n");

  std::vector<std::uint64_t> gt_counts;
  bool have_gt = std::all_of(m.images.begin(), m.images.end(),
                             [](const ImageRecord& r) { return r.gt_label_path.has_value(); });
  if (have_gt) {
    const auto gt = load_gt_labels(m);
    gt_counts.assign(m.num_classes(), 0);
    for (std::size_t i = 0; i < gt.size(); ++i) gt_counts[i % m.num_classes()] += gt[i];
  }
  const BiasReport report = bias_report(raw, bias, m.class_names, gt_counts);
  write_text(run_dir / "bias_report.json", report.json.dump(2) + "\n");
  write_text(run_dir / "bias_report.csv", report.csv);

  const PseudoLabelSet used = cfg.debias ? calibrate(raw, bias, cfg.calibration) : raw;
  write_tensor(run_dir / artifact::kLabelsInitial, used.to_tensor());
  write_meta(cfg, run_dir, "label_init",
             {{"calibrated", cfg.debias},
              {"n_images", raw.n_images},
              {"n_filtered", bias.n_filtered},
              {"empty_admission", empty_admission}});
}

void cmd_warmup(const PipelineConfig& cfg, const fs::path& run_dir) {
  const json init_meta = require_stage(cfg, run_dir, "label_init");
  const DatasetManifest m = load_manifest(cfg.resolve(cfg.train_manifest));
  const TrainingSet data = load_training_set(m);
  const PseudoLabelSet labels =
      read_labels(run_dir / artifact::kLabelsInitial, LabelKind::kInitial,
                  init_meta.value("calibrated", false), data.size(), m.num_classes());
  const ClassifierHead init = ClassifierHead::initialized(
      m.num_classes(), data.n_features, cfg.train.seed, cfg.train.init_scale);
  const TrainResult r = train(data, labels, cfg.train, TrainPhase::kWarmup, init);
  save_head(r.head, run_dir, artifact::kHeadWarmup);
  write_text(run_dir / artifact::kTrainLogWarmup, r.log.to_jsonl());
  write_meta(cfg, run_dir, "warmup", {{"epochs", r.log.epochs.size()}});
}

void cmd_update_labels(const PipelineConfig& cfg, const fs::path& run_dir) {
  const json init_meta = require_stage(cfg, run_dir, "label_init");
  const DatasetManifest m = load_manifest(cfg.resolve(cfg.train_manifest));
  const std::size_t N = m.images.size(), C = m.num_classes();
  const PseudoLabelSet initial =
      read_labels(run_dir / artifact::kLabelsInitial, LabelKind::kInitial,
                  init_meta.value("calibrated", false), N, C);

  PseudoLabelSet final_labels(N, C, LabelKind::kFinal);
  final_labels.calibrated = initial.calibrated;
  std::vector<float> mask(N, 0.0f);

  if (!cfg.label_update) {
    final_labels.probs = initial.probs;
    write_tensor(run_dir / artifact::kLabelsFinal, final_labels.to_tensor());
    write_tensor(run_dir / artifact::kLocalMask, Tensor({static_cast<std::uint32_t>(N)}, mask));
    write_meta(cfg, run_dir, "update", {{"label_update", false}, {"requests", 0}});
    return;
  }

  BiasVector bias = BiasVector::neutral(C);
  if (cfg.debias) {
    try {
      bias = bias_from_json(json::parse(read_text(run_dir / artifact::kBias)), m.class_names);
    } catch (const json::exception& e) {
      throw InputError(std::string("malformed bias.json: ") + e.what());
    }
  }
  const EmbeddingMatrix texts = load_text_embeddings(m);

  std::optional<ClassifierHead> head;
  if (cfg.policy == ViewPolicy::kCam) {
    require_stage(cfg, run_dir, "warmup");
    head = load_head(run_dir, artifact::kHeadWarmup);
  }

  // Views for every image, then one windowed pass over the provider.
  std::vector<ViewRequest> requests;
  std::vector<std::size_t> first_request(N + 1, 0);
  std::string views_log;
  std::string counts_csv = "image_id,selected_classes,views\n";
  const std::uint64_t policy_seed = derive_seed(cfg.seed, "policy");
  for (std::size_t i = 0; i < N; ++i) {
    const ImageRecord& rec = m.images[i];
    first_request[i] = requests.size();
    json entry;
    std::size_t selected = 0;
    if (cfg.policy == ViewPolicy::kCam) {
      const FeatureMap fm = read_feature_map(m, rec, rec.feature_map_path);
      const ViewSet vs = propose_views(fm, *head, cfg.views);
      std::set<std::size_t> classes;
      for (const auto& pb : vs.boxes) {
        requests.push_back({rec.image_id, pb.box, cfg.resize_long});
        classes.insert(pb.class_index);
      }
      selected = classes.size();
      entry = views_to_json(vs);
    } else {
      std::vector<Box> gt;
      for (const auto& g : rec.gt_boxes) gt.push_back(g.box);
      const auto pv = policy_views(cfg.policy, gt, rec.width_px, rec.height_px, cfg.policy_k,
                                   cfg.views.offset_px, derive_seed(policy_seed, rec.image_id),
                                   cfg.resize_long);
      json boxes = json::array();
      for (const auto& v : pv) {
        requests.push_back({rec.image_id, v.box, v.resize_long});
        boxes.push_back({{"box", v.box.coords()}, {"resize_long", v.resize_long}});
      }
      entry = {{"image_id", rec.image_id}, {"policy", to_string(cfg.policy)}, {"boxes", boxes}};
    }
    views_log += entry.dump() + "\n";
    counts_csv += rec.image_id + "," + std::to_string(selected) + "," +
                  std::to_string(requests.size() - first_request[i]) + "\n";
  }
  first_request[N] = requests.size();

  std::vector<std::vector<float>> embeddings;
  std::uint64_t sent = 0;
  if (!requests.empty()) {
    std::optional<EmbeddingCache> cache;
    if (cfg.provider.cache.empty()) {
      cache.emplace();
    } else {
      cache.emplace(cfg.resolve(cfg.provider.cache));
    }
    ProviderSession session(cfg, m.embedding_dim);
    embeddings = session.client().request_embeddings(requests, &*cache);
    sent = session.client().requests_sent();
  }

  PseudoLabelSet local(N, C, LabelKind::kLocal);
  local.calibrated = cfg.debias;
  std::size_t with_views = 0;
  for (std::size_t i = 0; i < N; ++i) {
    PatchProbs pp{m.images[i].image_id, C, {}};
    for (std::size_t r = first_request[i]; r < first_request[i + 1]; ++r) {
      std::vector<double> p = softmax_probs(class_scores(embeddings[r], texts), cfg.tau);
      if (cfg.debias) p = calibrate(p, bias, cfg.calibration);
      pp.add_patch(p);
    }
    const auto agg = aggregate_patches(pp);
    std::vector<double> init_row(initial.row(i).begin(), initial.row(i).end());
    const auto fused = fuse_labels(init_row, agg, cfg.alpha);
    if (agg) {
      ++with_views;
      mask[i] = 1.0f;
      for (std::size_t c = 0; c < C; ++c) local.row(i)[c] = static_cast<float>((*agg)[c]);
    }
    for (std::size_t c = 0; c < C; ++c) final_labels.row(i)[c] = static_cast<float>(fused[c]);
  }

  write_text(run_dir / artifact::kViews, views_log);
  write_text(run_dir / artifact::kViewCounts, counts_csv);
  write_tensor(run_dir / artifact::kLabelsLocal, local.to_tensor());
  write_tensor(run_dir / artifact::kLocalMask, Tensor({static_cast<std::uint32_t>(N)}, mask));
  write_tensor(run_dir / artifact::kLabelsFinal, final_labels.to_tensor());
  write_meta(cfg, run_dir, "update",
             {{"label_update", true},
              {"policy", to_string(cfg.policy)},
              {"views", requests.size()},
              {"requests", sent},
              {"images_with_views", with_views}});
  std::cerr << "update-labels: " << requests.size() << " views over " << with_views << "/" << N
            << " images, " << sent << " provider requests\n";
}

void cmd_train_main(const PipelineConfig& cfg, const fs::path& run_dir) {
  require_stage(cfg, run_dir, "warmup");
  const json upd = require_stage(cfg, run_dir, "update");
  const DatasetManifest m = load_manifest(cfg.resolve(cfg.train_manifest));
  const TrainingSet data = load_training_set(m);
  const PseudoLabelSet labels = read_labels(run_dir / artifact::kLabelsFinal, LabelKind::kFinal,
                                            cfg.debias, data.size(), m.num_classes());
  const ClassifierHead init = load_head(run_dir, artifact::kHeadWarmup);
  const TrainResult r = train(data, labels, cfg.train, TrainPhase::kMain, init);
  save_head(r.head, run_dir, artifact::kHeadFinal);
  write_text(run_dir / artifact::kTrainLogMain, r.log.to_jsonl());
  write_meta(cfg, run_dir, "train",
             {{"stop_epoch", r.log.stop_epoch}, {"stop_reason", r.log.stop_reason}});
}

void cmd_train_full(const PipelineConfig& cfg, const fs::path& run_dir) {
  cmd_label_init(cfg, run_dir);
  cmd_warmup(cfg, run_dir);
  cmd_update_labels(cfg, run_dir);
  cmd_train_main(cfg, run_dir);
}

EvalResult cmd_eval(const PipelineConfig& cfg, const fs::path& run_dir, Predictor predictor) {
  ensure_dir(run_dir);
  const DatasetManifest m = load_manifest(cfg.resolve(cfg.eval_manifest));
  const auto gt = load_gt_labels(m);
  std::vector<double> scores;
  if (predictor == Predictor::kGroundTruth) {
    scores.assign(gt.begin(), gt.end());
  } else {
    require_stage(cfg, run_dir, "train");
    const ClassifierHead head = load_head(run_dir, artifact::kHeadFinal);
    scores = predict(head, load_training_set(m));
  }
  const EvalResult r = evaluate(scores, gt, m.num_classes());
  write_text(run_dir / artifact::kEvalJson, eval_to_json(r, m.class_names).dump(2) + "\n");
  write_text(run_dir / "eval.csv", eval_to_csv(r, m.class_names));
  write_text(run_dir / "ap_table.txt", format_ap_table(r, m.class_names));
  write_meta(cfg, run_dir, "eval",
             {{"map", r.map},
              {"predictor", predictor == Predictor::kHead ? "head" : "ground_truth"}});
  return r;
}

void cmd_report(const PipelineConfig& cfg, const fs::path& run_dir) {
  require_stage(cfg, run_dir, "label_init");
  std::ostringstream md;
  md << "# Run report\n\nconfig hash `" << cfg.hash() << "`, seed " << cfg.seed << "\n\n";

  const json bias = json::parse(read_text(run_dir / "bias_report.json"));
  md << "## Initial label bias\n\nadmitted " << bias.value("n_filtered", 0) << " of "
     << bias.value("n_images", 0) << " images\n\n"
     << "| class | bias | mean top-1 | top-1 admitted | top-1 all |\n|---|---|---|---|---|\n";
  for (const auto& row : bias.at("classes")) {
    const auto mean = row.at("mean_top1_prob");
    char line[256];
    std::snprintf(line, sizeof line, "| %s | %.4f | %s | %llu | %llu |\n",
                  row.at("class").get<std::string>().c_str(), row.at("bias").get<double>(),
                  mean.is_null() ? "-" : std::to_string(mean.get<double>()).c_str(),
                  static_cast<unsigned long long>(row.at("top1_count_admitted").get<std::uint64_t>()),
                  static_cast<unsigned long long>(row.at("top1_count_all").get<std::uint64_t>()));
    md << line;
  }

  if (fs::exists(run_dir / artifact::kViewCounts)) {
    std::istringstream in(read_text(run_dir / artifact::kViewCounts));
    std::string line;
    std::getline(in, line);
    std::map<std::size_t, std::size_t> hist;
    std::size_t images = 0, views = 0;
    while (std::getline(in, line)) {
      const std::size_t n = std::stoul(line.substr(line.rfind(',') + 1));
      ++hist[n];
      ++images;
      views += n;
    }
    md << "\n## Local views\n\n" << views << " views over " << images << " images\n\n"
       << "| views per image | images |\n|---|---|\n";
    for (const auto& [n, count] : hist) md << "| " << n << " | " << count << " |\n";
  }

  if (fs::exists(run_dir / "ap_table.txt")) {
    md << "\n## Evaluation\n\n```\n" << read_text(run_dir / "ap_table.txt") << "```\n";
  }
  write_text(run_dir / "report.md", md.str());
}

std::string cmd_sweep(const PipelineConfig& cfg, const fs::path& run_dir) {
  if (cfg.sweep_parameter.empty()) throw ConfigError("config: sweep.parameter is not set");
  ensure_dir(run_dir);
  std::ostringstream csv;
  csv.precision(10);
  csv << "parameter,value,map,views,images_with_views\n";
  const json base = cfg.to_json();
  for (std::size_t i = 0; i < cfg.sweep_values.size(); ++i) {
    json doc = base;
    doc["sweep"] = {{"parameter", ""}, {"values", json::array()}};
    set_config_value(doc, cfg.sweep_parameter, cfg.sweep_values[i]);
    const PipelineConfig point = config_from_json(doc, cfg.base_dir);
    const fs::path dir = run_dir / ("sweep_" + std::to_string(i));
    cmd_train_full(point, dir);
    const EvalResult r = cmd_eval(point, dir);
    const json upd = json::parse(read_text(dir / "update.meta.json"));
    csv << cfg.sweep_parameter << "," << cfg.sweep_values[i].dump() << "," << r.map << ","
        << upd.value("views", 0) << "," << upd.value("images_with_views", 0) << "\n";
  }
  write_text(run_dir / "sweep.csv", csv.str());
  return csv.str();
}

}  // namespace ccd
