#include "ccd/synth.hpp"

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <fstream>
#include <set>
#include <sstream>

#include "ccd/error.hpp"
#include "ccd/rng.hpp"
#include "ccd/tensor_store.hpp"

namespace ccd {
namespace {

using nlohmann::json;

constexpr const char* kVocNames[] = {
    "aeroplane", "bicycle", "bird",  "boat",        "bottle", "bus",   "car",
    "cat",       "chair",   "cow",   "diningtable", "dog",    "horse", "motorbike",
    "person",    "pottedplant", "sheep", "sofa",    "train",  "tvmonitor"};

std::vector<std::string> make_class_names(std::size_t n) {
  std::vector<std::string> names;
  for (std::size_t c = 0; c < n; ++c) {
    if (n <= std::size(kVocNames)) {
      names.emplace_back(kVocNames[c]);
    } else {
      std::ostringstream os;
      os << "class_" << c;
      names.push_back(os.str());
    }
  }
  return names;
}

std::string image_name(const char* prefix, std::size_t i) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%s_%05zu", prefix, i);
  return buf;
}

// Unit vectors with prescribed cosines against the class prototypes.
class ScoreEmbedder {
 public:
  explicit ScoreEmbedder(const SyntheticWorld& w) : world_(w) {
    const std::size_t C = w.n_classes();
    const std::size_t D = w.spec.embedding_dim;
    W_.resize(static_cast<Eigen::Index>(C), static_cast<Eigen::Index>(D));
    for (std::size_t c = 0; c < C; ++c) {
      for (std::size_t d = 0; d < D; ++d) W_(c, d) = w.prototypes[c][d];
    }
    gram_.compute(W_ * W_.transpose());
    s0_ = 0.5 / std::sqrt(static_cast<double>(C));
  }

  std::vector<float> embed(const std::vector<double>& logits, Rng& rng) const {
    const std::size_t C = world_.n_classes();
    const std::size_t D = world_.spec.embedding_dim;
    Eigen::VectorXd s(static_cast<Eigen::Index>(C));
    for (std::size_t c = 0; c < C; ++c) {
      s(c) = s0_ + world_.spec.reference_tau * logits[c];
    }
    const Eigen::VectorXd alpha = gram_.solve(s);
    const double q = s.dot(alpha);
    if (!(q < 1.0 - 1e-6)) {
      throw NumericError("synthetic embedding infeasible: designed scores need norm " +
                         std::to_string(q) + " >= 1; lower reference_tau or the logits");
    }
    Eigen::VectorXd f = W_.transpose() * alpha;

    Eigen::VectorXd v(static_cast<Eigen::Index>(D));
    const auto& bg = world_.prototypes[C];
    const double scale = 0.5 / std::sqrt(static_cast<double>(D));
    for (std::size_t d = 0; d < D; ++d) v(d) = bg[d] + scale * rng.normal();
    v -= W_.transpose() * gram_.solve(W_ * v);
    const double vn = v.norm();
    if (!(vn > 1e-9)) throw NumericError("synthetic embedding: degenerate remainder");
    f += std::sqrt(1.0 - q) * (v / vn);

    std::vector<float> out(D);
    for (std::size_t d = 0; d < D; ++d) out[d] = static_cast<float>(f(d));
    return out;
  }

 private:
  const SyntheticWorld& world_;
  Eigen::MatrixXd W_;
  Eigen::LDLT<Eigen::MatrixXd> gram_;
  double s0_ = 0.0;
};

void add_object_logits(const SyntheticWorld& w, std::size_t k, double weight,
                       std::vector<double>& logits) {
  logits[k] += weight * w.class_logit[k];
  logits[w.confuser[k]] += weight * w.confuser_logit;
}

std::vector<std::vector<double>> channel_signatures(const SyntheticWorld& w) {
  const std::size_t C = w.n_classes();
  const std::size_t Q = w.spec.feature_channels;
  Rng rng(derive_seed(w.spec.seed, "channel-signatures"));
  std::vector<std::vector<double>> sig(C, std::vector<double>(Q, 0.0));
  const double mix = w.spec.channel_mixing / std::sqrt(static_cast<double>(Q));
  for (std::size_t c = 0; c < C; ++c) {
    for (std::size_t q = 0; q < Q; ++q) sig[c][q] = mix * rng.normal();
    sig[c][c] += 1.0;
  }
  return sig;
}

void add_blob(const WorldSpec& spec, const Box& box, std::span<const double> signature,
              double amplitude, std::vector<float>& fm) {
  const std::size_t h = spec.grid_h, gw = spec.grid_w;
  const double cell_w = static_cast<double>(spec.width_px) / gw;
  const double cell_h = static_cast<double>(spec.height_px) / h;
  const double cx = 0.5 * (box.x0 + box.x1), cy = 0.5 * (box.y0 + box.y1);
  const double sx = std::max(1.0, box.width() / 4.0), sy = std::max(1.0, box.height() / 4.0);
  std::vector<double> mass(h * gw, 0.0);
  bool any = false;
  for (std::size_t y = 0; y < h; ++y) {
    for (std::size_t x = 0; x < gw; ++x) {
      const double px = (x + 0.5) * cell_w, py = (y + 0.5) * cell_h;
      if (px < box.x0 || px >= box.x1 || py < box.y0 || py >= box.y1) continue;
      const double dx = (px - cx) / sx, dy = (py - cy) / sy;
      mass[y * gw + x] = amplitude * std::exp(-0.5 * (dx * dx + dy * dy));
      any = true;
    }
  }
  if (!any) {
    // box smaller than a cell: put the peak on the cell holding its center
    const auto x = std::min<std::size_t>(gw - 1, static_cast<std::size_t>(cx / cell_w));
    const auto y = std::min<std::size_t>(h - 1, static_cast<std::size_t>(cy / cell_h));
    mass[y * gw + x] = amplitude;
  }
  const std::size_t cells = h * gw;
  for (std::size_t q = 0; q < signature.size(); ++q) {
    if (signature[q] == 0.0) continue;
    for (std::size_t i = 0; i < cells; ++i) {
      fm[q * cells + i] += static_cast<float>(signature[q] * mass[i]);
    }
  }
}

std::vector<float> feature_map(const SyntheticWorld& w,
                               const std::vector<std::vector<double>>& sig,
                               const WorldImage& img) {
  const WorldSpec& spec = w.spec;
  const std::size_t Q = spec.feature_channels;
  const std::size_t cells = std::size_t{spec.grid_h} * spec.grid_w;
  std::vector<float> fm(Q * cells, 0.0f);
  for (const auto& gb : img.gt_boxes) {
    add_blob(spec, gb.box, sig[gb.class_index], spec.blob_amplitude, fm);
  }
  Rng rng(derive_seed(derive_seed(spec.seed, img.image_id), "features"));
  for (std::size_t j = 0; j < spec.distractors; ++j) {
    const auto bw = static_cast<std::int32_t>(rng.uniform(0.1, 0.4) * spec.width_px);
    const auto bh = static_cast<std::int32_t>(rng.uniform(0.1, 0.4) * spec.height_px);
    const auto x0 = static_cast<std::int32_t>(rng.uniform_int(0, spec.width_px - bw));
    const auto y0 = static_cast<std::int32_t>(rng.uniform_int(0, spec.height_px - bh));
    std::vector<double> s(Q);
    for (auto& v : s) v = rng.normal() / std::sqrt(static_cast<double>(Q));
    add_blob(spec, Box{x0, y0, x0 + bw, y0 + bh}, s, spec.distractor_amplitude, fm);
  }
  for (auto& v : fm) v += static_cast<float>(spec.feature_noise * rng.normal());
  return fm;
}

WorldImage make_image(const WorldSpec& spec, const std::string& id, bool test) {
  WorldImage img;
  img.image_id = id;
  img.test = test;
  img.width_px = spec.width_px;
  img.height_px = spec.height_px;
  img.gt_labels.assign(spec.n_classes, 0);
  Rng rng(derive_seed(derive_seed(spec.seed, id), "layout"));
  const auto n_obj = static_cast<std::size_t>(rng.uniform_int(
      static_cast<std::int64_t>(spec.min_objects), static_cast<std::int64_t>(spec.max_objects)));
  std::vector<std::size_t> classes(spec.n_classes);
  for (std::size_t c = 0; c < classes.size(); ++c) classes[c] = c;
  for (std::size_t j = 0; j < n_obj; ++j) {
    const auto r = static_cast<std::size_t>(
        rng.uniform_int(static_cast<std::int64_t>(j), static_cast<std::int64_t>(classes.size() - 1)));
    std::swap(classes[j], classes[r]);
  }
  classes.resize(n_obj);
  for (std::size_t k : classes) {
    const auto bw = std::max<std::int32_t>(
        1, static_cast<std::int32_t>(rng.uniform(spec.min_box_frac, spec.max_box_frac) * spec.width_px));
    const auto bh = std::max<std::int32_t>(
        1, static_cast<std::int32_t>(rng.uniform(spec.min_box_frac, spec.max_box_frac) * spec.height_px));
    const auto x0 = static_cast<std::int32_t>(rng.uniform_int(0, spec.width_px - bw));
    const auto y0 = static_cast<std::int32_t>(rng.uniform_int(0, spec.height_px - bh));
    img.gt_boxes.push_back(GtBox{k, Box{x0, y0, x0 + bw, y0 + bh}});
    img.gt_labels[k] = 1;
  }
  return img;
}

template <typename T>
void read_field(const json& doc, const char* key, T& out) {
  auto it = doc.find(key);
  if (it == doc.end()) return;
  try {
    out = it->get<T>();
  } catch (const json::exception&) {
    throw ConfigError(std::string("world spec field \"") + key + "\" has the wrong type");
  }
}

void write_text(const std::filesystem::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw InputError("cannot write " + path.string());
  out << text;
}

}  // namespace

void WorldSpec::validate() const {
  auto fail = [](const std::string& m) { throw ConfigError("world spec: " + m); };
  if (n_classes < 3) fail("n_classes must be at least 3");
  if (n_images == 0) fail("n_images must be positive");
  if (embedding_dim < n_classes + 2) {
    fail("embedding_dim must exceed n_classes + 1 (got " + std::to_string(embedding_dim) +
         " for " + std::to_string(n_classes) + " classes)");
  }
  if (feature_channels < n_classes) fail("feature_channels must be at least n_classes");
  if (grid_h == 0 || grid_w == 0) fail("feature grid must be non-empty");
  if (width_px <= 0 || height_px <= 0) fail("image size must be positive");
  if (min_objects == 0 || min_objects > max_objects || max_objects > n_classes) {
    fail("need 1 <= min_objects <= max_objects <= n_classes");
  }
  if (!(min_box_frac > 0.0 && min_box_frac <= max_box_frac && max_box_frac <= 1.0)) {
    fail("need 0 < min_box_frac <= max_box_frac <= 1");
  }
  if (!(leak_concentration > 0.0 && leak_concentration < 1.0)) {
    fail("leak_concentration must lie in (0, 1)");
  }
  const double floor_bias = leak_concentration / (1.0 + leak_concentration);
  if (!(unbiased_top1 > floor_bias && unbiased_top1 < 1.0)) {
    fail("unbiased_top1 must lie in (" + std::to_string(floor_bias) + ", 1)");
  }
  if (!planted_bias.empty()) {
    if (planted_bias.size() != n_classes) fail("planted_bias needs one value per class");
    for (double b : planted_bias) {
      if (!(b > floor_bias && b <= 1.0)) {
        fail("planted bias " + std::to_string(b) + " outside (" +
             std::to_string(floor_bias) + ", 1]; lower values cannot stay top-1");
      }
    }
  }
  if (!(reference_tau > 0.0)) fail("reference_tau must be positive");
  if (!(salience_power >= 0.0)) fail("salience_power must be non-negative");
  if (!(crop_full_coverage > 0.0 && crop_full_coverage <= 1.0)) {
    fail("crop_full_coverage must lie in (0, 1]");
  }
  for (double v : {global_logit_noise, crop_logit_noise, prototype_perturbation,
                   blob_amplitude, feature_noise, channel_mixing, distractor_amplitude}) {
    if (!(v >= 0.0) || !std::isfinite(v)) fail("noise and amplitude values must be finite and >= 0");
  }
}

json spec_to_json(const WorldSpec& s) {
  json j;
  j["n_classes"] = s.n_classes;
  j["n_images"] = s.n_images;
  j["n_test_images"] = s.n_test_images;
  j["embedding_dim"] = s.embedding_dim;
  j["feature_channels"] = s.feature_channels;
  j["grid_h"] = s.grid_h;
  j["grid_w"] = s.grid_w;
  j["width_px"] = s.width_px;
  j["height_px"] = s.height_px;
  j["min_objects"] = s.min_objects;
  j["max_objects"] = s.max_objects;
  j["min_box_frac"] = s.min_box_frac;
  j["max_box_frac"] = s.max_box_frac;
  j["planted_bias"] = s.planted_bias;
  j["unbiased_top1"] = s.unbiased_top1;
  j["leak_concentration"] = s.leak_concentration;
  j["salience_power"] = s.salience_power;
  j["reference_tau"] = s.reference_tau;
  j["global_logit_noise"] = s.global_logit_noise;
  j["crop_logit_noise"] = s.crop_logit_noise;
  j["crop_full_coverage"] = s.crop_full_coverage;
  j["prototype_perturbation"] = s.prototype_perturbation;
  j["blob_amplitude"] = s.blob_amplitude;
  j["feature_noise"] = s.feature_noise;
  j["channel_mixing"] = s.channel_mixing;
  j["distractors"] = s.distractors;
  j["distractor_amplitude"] = s.distractor_amplitude;
  j["seed"] = s.seed;
  return j;
}

WorldSpec spec_from_json(const json& doc) {
  if (!doc.is_object()) throw ConfigError("world spec must be a JSON object");
  WorldSpec s;
  const json known = spec_to_json(s);
  for (auto it = doc.begin(); it != doc.end(); ++it) {
    if (!known.contains(it.key())) {
      throw ConfigError("world spec: unknown field \"" + it.key() + "\"");
    }
  }
  read_field(doc, "n_classes", s.n_classes);
  read_field(doc, "n_images", s.n_images);
  read_field(doc, "n_test_images", s.n_test_images);
  read_field(doc, "embedding_dim", s.embedding_dim);
  read_field(doc, "feature_channels", s.feature_channels);
  read_field(doc, "grid_h", s.grid_h);
  read_field(doc, "grid_w", s.grid_w);
  read_field(doc, "width_px", s.width_px);
  read_field(doc, "height_px", s.height_px);
  read_field(doc, "min_objects", s.min_objects);
  read_field(doc, "max_objects", s.max_objects);
  read_field(doc, "min_box_frac", s.min_box_frac);
  read_field(doc, "max_box_frac", s.max_box_frac);
  read_field(doc, "planted_bias", s.planted_bias);
  read_field(doc, "unbiased_top1", s.unbiased_top1);
  read_field(doc, "leak_concentration", s.leak_concentration);
  read_field(doc, "salience_power", s.salience_power);
  read_field(doc, "reference_tau", s.reference_tau);
  read_field(doc, "global_logit_noise", s.global_logit_noise);
  read_field(doc, "crop_logit_noise", s.crop_logit_noise);
  read_field(doc, "crop_full_coverage", s.crop_full_coverage);
  read_field(doc, "prototype_perturbation", s.prototype_perturbation);
  read_field(doc, "blob_amplitude", s.blob_amplitude);
  read_field(doc, "feature_noise", s.feature_noise);
  read_field(doc, "channel_mixing", s.channel_mixing);
  read_field(doc, "distractors", s.distractors);
  read_field(doc, "distractor_amplitude", s.distractor_amplitude);
  read_field(doc, "seed", s.seed);
  return s;
}

const WorldImage* SyntheticWorld::find(const std::string& image_id) const {
  for (const auto& img : images) {
    if (img.image_id == image_id) return &img;
  }
  return nullptr;
}

SyntheticWorld build_world(const WorldSpec& spec) {
  spec.validate();
  SyntheticWorld w;
  w.spec = spec;
  const std::size_t C = spec.n_classes;
  const std::size_t D = spec.embedding_dim;
  w.class_names = make_class_names(C);

  // orthonormal basis, then a small seeded perturbation
  Rng prng(derive_seed(spec.seed, "prototypes"));
  Eigen::MatrixXd A(static_cast<Eigen::Index>(D), static_cast<Eigen::Index>(C + 1));
  for (Eigen::Index j = 0; j < A.cols(); ++j) {
    for (Eigen::Index i = 0; i < A.rows(); ++i) A(i, j) = prng.normal();
  }
  const Eigen::MatrixXd Qm = Eigen::HouseholderQR<Eigen::MatrixXd>(A).householderQ() *
                             Eigen::MatrixXd::Identity(A.rows(), A.cols());
  const double eps = spec.prototype_perturbation / std::sqrt(static_cast<double>(D));
  for (std::size_t j = 0; j <= C; ++j) {
    Eigen::VectorXd p = Qm.col(static_cast<Eigen::Index>(j));
    for (std::size_t i = 0; i < D; ++i) p(i) += eps * prng.normal();
    p.normalize();
    std::vector<float> row(D);
    for (std::size_t i = 0; i < D; ++i) row[i] = static_cast<float>(p(i));
    w.prototypes.push_back(std::move(row));
  }
  for (std::size_t a = 0; a <= C; ++a) {
    for (std::size_t b = a + 1; b <= C; ++b) {
      double dot = 0, na = 0, nb = 0;
      for (std::size_t i = 0; i < D; ++i) {
        dot += double{w.prototypes[a][i]} * w.prototypes[b][i];
        na += double{w.prototypes[a][i]} * w.prototypes[a][i];
        nb += double{w.prototypes[b][i]} * w.prototypes[b][i];
      }
      if (std::abs(dot) / std::sqrt(na * nb) > 0.3) {
        throw ConfigError("world spec: prototype_perturbation too large, prototypes " +
                          std::to_string(a) + " and " + std::to_string(b) +
                          " have cosine above 0.3");
      }
    }
  }

  // Lone object of class k: p_k = b, p_conf = (1-b) r, the rest share (1-b)(1-r).
  const double r = spec.leak_concentration;
  const double others = static_cast<double>(C - 2);
  w.confuser_logit = std::log(r * others / (1.0 - r));
  for (std::size_t k = 0; k < C; ++k) {
    w.confuser.push_back((k + 1) % C);
    const double b = std::min(spec.bias_of(k), spec.unbiased_top1);
    w.class_logit.push_back(std::log(b * others / ((1.0 - b) * (1.0 - r))));
  }

  for (std::size_t i = 0; i < spec.n_images; ++i) {
    w.images.push_back(make_image(spec, image_name("train", i), false));
  }
  for (std::size_t i = 0; i < spec.n_test_images; ++i) {
    w.images.push_back(make_image(spec, image_name("test", i), true));
  }
  return w;
}

std::vector<double> global_logits(const SyntheticWorld& w, const WorldImage& img) {
  std::vector<double> logits(w.n_classes(), 0.0);
  std::int64_t max_area = 0;
  for (const auto& gb : img.gt_boxes) max_area = std::max(max_area, gb.box.area());
  for (const auto& gb : img.gt_boxes) {
    const double sal = std::pow(static_cast<double>(gb.box.area()) / max_area,
                                w.spec.salience_power);
    add_object_logits(w, gb.class_index, sal, logits);
  }
  return logits;
}

std::vector<float> global_embedding(const SyntheticWorld& w, const WorldImage& img) {
  Rng rng(derive_seed(derive_seed(w.spec.seed, img.image_id), "global"));
  std::vector<double> logits = global_logits(w, img);
  for (auto& l : logits) l += w.spec.global_logit_noise * rng.normal();
  return ScoreEmbedder(w).embed(logits, rng);
}

std::vector<float> crop_embedding(const SyntheticWorld& w, const ViewRequest& req) {
  const WorldImage* img = w.find(req.image_id);
  if (!img) throw InputError("unknown image \"" + req.image_id + "\"");
  std::vector<double> logits(w.n_classes(), 0.0);
  const double crop_area = static_cast<double>(req.box.area());
  if (crop_area > 0) {
    for (const auto& gb : img->gt_boxes) {
      const double inter = static_cast<double>(intersection_area(req.box, gb.box));
      const double purity = inter / crop_area;
      const double completeness = inter / static_cast<double>(gb.box.area());
      add_object_logits(w, gb.class_index,
                        std::min(1.0, purity / w.spec.crop_full_coverage) * completeness,
                        logits);
    }
  }
  Rng rng(derive_seed(derive_seed(w.spec.seed, "crop"), EmbeddingCache::key_string(req)));
  for (auto& l : logits) l += w.spec.crop_logit_noise * rng.normal();
  return ScoreEmbedder(w).embed(logits, rng);
}

void serve_synthetic(LineChannel& channel, const SyntheticWorld& world) {
  serve_provider(channel, world.spec.embedding_dim, [&](const ViewRequest& req) {
    const WorldImage* img = world.find(req.image_id);
    if (!img) {
      throw ProviderRequestFailure("unknown_image", "no image \"" + req.image_id + "\"");
    }
    if (!req.box.valid_in(img->width_px, img->height_px)) {
      throw ProviderRequestFailure("bad_box", "box outside image \"" + req.image_id + "\"");
    }
    return crop_embedding(world, req);
  });
}

WorldFiles generate_world(const WorldSpec& spec, const std::filesystem::path& out_dir) {
  const SyntheticWorld w = build_world(spec);
  namespace fs = std::filesystem;
  std::error_code ec;
  fs::create_directories(out_dir / "tensors", ec);
  if (ec) throw InputError("cannot create " + (out_dir / "tensors").string() + ": " + ec.message());

  const std::size_t C = w.n_classes();
  const std::uint32_t D = spec.embedding_dim;
  std::vector<float> text;
  for (std::size_t c = 0; c < C; ++c) {
    text.insert(text.end(), w.prototypes[c].begin(), w.prototypes[c].end());
  }
  write_tensor(out_dir / "text_embeddings.ccdt",
               Tensor({static_cast<std::uint32_t>(C), D}, std::move(text)));

  const auto sig = channel_signatures(w);
  DatasetManifest train, test;
  for (DatasetManifest* m : {&train, &test}) {
    m->base_dir = out_dir;
    m->class_names = w.class_names;
    m->text_embedding_path = "text_embeddings.ccdt";
    m->embedding_dim = D;
    m->feature_channels = spec.feature_channels;
    m->grid_h = spec.grid_h;
    m->grid_w = spec.grid_w;
  }
  for (const auto& img : w.images) {
    ImageRecord rec;
    rec.image_id = img.image_id;
    rec.width_px = img.width_px;
    rec.height_px = img.height_px;
    rec.global_embedding_path = "tensors/" + img.image_id + ".emb.ccdt";
    rec.feature_map_path = "tensors/" + img.image_id + ".fm.ccdt";
    rec.gt_label_path = "tensors/" + img.image_id + ".gt.ccdt";
    rec.gt_boxes = img.gt_boxes;
    write_tensor(out_dir / rec.global_embedding_path, Tensor({D}, global_embedding(w, img)));
    write_tensor(out_dir / rec.feature_map_path,
                 Tensor({spec.feature_channels, spec.grid_h, spec.grid_w},
                        feature_map(w, sig, img)));
    std::vector<float> gt(img.gt_labels.begin(), img.gt_labels.end());
    write_tensor(out_dir / *rec.gt_label_path, Tensor({static_cast<std::uint32_t>(C)}, gt));
    (img.test ? test : train).images.push_back(std::move(rec));
  }

  WorldFiles files{out_dir / "world.json", out_dir / "manifest_train.json",
                   out_dir / "manifest_test.json"};
  write_manifest(files.train_manifest, train);
  if (!test.images.empty()) write_manifest(files.test_manifest, test);
  save_world(w, files.world_json);
  return files;
}

void save_world(const SyntheticWorld& w, const std::filesystem::path& path) {
  json doc;
  doc["format"] = "ccd-synthetic-world";
  doc["version"] = 1;
  doc["spec"] = spec_to_json(w.spec);
  doc["class_names"] = w.class_names;
  doc["prototypes"] = w.prototypes;
  doc["confuser"] = w.confuser;
  doc["class_logit"] = w.class_logit;
  doc["confuser_logit"] = w.confuser_logit;
  json planted = json::array();
  for (std::size_t c = 0; c < w.n_classes(); ++c) planted.push_back(w.spec.bias_of(c));
  doc["planted_bias"] = std::move(planted);
  json images = json::array();
  for (const auto& img : w.images) {
    json boxes = json::array();
    for (const auto& gb : img.gt_boxes) {
      boxes.push_back({{"class", gb.class_index}, {"box", gb.box.coords()}});
    }
    images.push_back({{"image_id", img.image_id},
                      {"split", img.test ? "test" : "train"},
                      {"width_px", img.width_px},
                      {"height_px", img.height_px},
                      {"gt_labels", img.gt_labels},
                      {"gt_boxes", std::move(boxes)}});
  }
  doc["images"] = std::move(images);
  write_text(path, doc.dump(1) + "\n");
}

SyntheticWorld load_world(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw InputError("cannot open world file " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  SyntheticWorld w;
  try {
    const json doc = json::parse(ss.str());
    if (doc.value("format", "") != "ccd-synthetic-world" || doc.value("version", 0) != 1) {
      throw InputError(path.string() + ": not a version 1 synthetic world file");
    }
    w.spec = spec_from_json(doc.at("spec"));
    w.class_names = doc.at("class_names").get<std::vector<std::string>>();
    w.prototypes = doc.at("prototypes").get<std::vector<std::vector<float>>>();
    w.confuser = doc.at("confuser").get<std::vector<std::size_t>>();
    w.class_logit = doc.at("class_logit").get<std::vector<double>>();
    w.confuser_logit = doc.at("confuser_logit").get<double>();
    for (const auto& ij : doc.at("images")) {
      WorldImage img;
      img.image_id = ij.at("image_id").get<std::string>();
      img.test = ij.at("split").get<std::string>() == "test";
      img.width_px = ij.at("width_px").get<std::int32_t>();
      img.height_px = ij.at("height_px").get<std::int32_t>();
      img.gt_labels = ij.at("gt_labels").get<std::vector<std::uint8_t>>();
      for (const auto& bj : ij.at("gt_boxes")) {
        const auto c = bj.at("box").get<std::array<std::int32_t, 4>>();
        img.gt_boxes.push_back(GtBox{bj.at("class").get<std::size_t>(), Box{c[0], c[1], c[2], c[3]}});
      }
      w.images.push_back(std::move(img));
    }
  } catch (const json::exception& e) {
    throw InputError(path.string() + ": malformed world file: " + e.what());
  }
  const std::size_t C = w.class_names.size();
  if (C != w.spec.n_classes || w.prototypes.size() != C + 1 || w.confuser.size() != C ||
      w.class_logit.size() != C) {
    throw InputError(path.string() + ": world file is inconsistent with its spec");
  }
  for (const auto& p : w.prototypes) {
    if (p.size() != w.spec.embedding_dim) {
      throw InputError(path.string() + ": prototype length differs from embedding_dim");
    }
  }
  return w;
}

// --- policies ---------------------------------------------------------------

const char* to_string(ViewPolicy p) {
  switch (p) {
    case ViewPolicy::kCam: return "cam";
    case ViewPolicy::kAroundGt: return "around_gt";
    case ViewPolicy::kGt: return "gt";
    case ViewPolicy::kRandom: return "random";
    case ViewPolicy::kGrid: return "grid";
  }
  return "?";
}

ViewPolicy view_policy_from_string(const std::string& s) {
  for (ViewPolicy p : {ViewPolicy::kCam, ViewPolicy::kAroundGt, ViewPolicy::kGt,
                       ViewPolicy::kRandom, ViewPolicy::kGrid}) {
    if (s == to_string(p)) return p;
  }
  throw ConfigError("unknown view policy \"" + s + "\" (cam, around_gt, gt, random, grid)");
}

std::vector<PolicyView> policy_views(ViewPolicy policy, const std::vector<Box>& gt,
                                     std::int32_t W, std::int32_t H, std::size_t k,
                                     std::int32_t offset_px, std::uint64_t seed,
                                     std::int32_t resize_long) {
  if (W <= 0 || H <= 0) throw InputError("policy_views: image size must be positive");
  if (k == 0) throw ConfigError("policy_views: k must be positive");
  if (offset_px < 0) throw ConfigError("policy_views: offset must be non-negative");
  std::vector<PolicyView> out;
  Rng rng(seed);
  switch (policy) {
    case ViewPolicy::kCam:
      throw ConfigError("policy_views: the cam policy needs a classifier; use propose_views");
    case ViewPolicy::kAroundGt: {
      if (gt.empty()) throw InputError("policy around_gt needs GT boxes, image has none");
      for (std::size_t j = 0; j < k; ++j) {
        const Box& g = gt[j % gt.size()];
        Box b = g;
        for (int attempt = 0; attempt < 8; ++attempt) {
          const Box cand = Box{static_cast<std::int32_t>(g.x0 + rng.uniform_int(-offset_px, offset_px)),
                               static_cast<std::int32_t>(g.y0 + rng.uniform_int(-offset_px, offset_px)),
                               static_cast<std::int32_t>(g.x1 + rng.uniform_int(-offset_px, offset_px)),
                               static_cast<std::int32_t>(g.y1 + rng.uniform_int(-offset_px, offset_px))}
                               .clipped(W, H);
          if (!cand.empty()) {
            b = cand;
            break;
          }
        }
        out.push_back({b, resize_long});
      }
      break;
    }
    case ViewPolicy::kGt: {
      if (gt.empty()) throw InputError("policy gt needs GT boxes, image has none");
      for (std::size_t j = 0; j < std::min(k, gt.size()); ++j) out.push_back({gt[j], resize_long});
      const std::size_t pad = k - out.size();
      for (std::size_t j = 1; j <= pad; ++j) {
        const auto r = static_cast<std::int32_t>(
            std::max<std::int64_t>(32, std::int64_t{resize_long} * static_cast<std::int64_t>(k - j) /
                                           static_cast<std::int64_t>(k)));
        out.push_back({Box{0, 0, W, H}, r});
      }
      break;
    }
    case ViewPolicy::kRandom: {
      auto span = [&](std::int32_t extent) {
        std::int64_t a, b;
        do {
          a = rng.uniform_int(0, extent);
          b = rng.uniform_int(0, extent);
        } while (a == b);
        return std::pair<std::int32_t, std::int32_t>{static_cast<std::int32_t>(std::min(a, b)),
                                                     static_cast<std::int32_t>(std::max(a, b))};
      };
      for (std::size_t j = 0; j < k; ++j) {
        const auto [x0, x1] = span(W);
        const auto [y0, y1] = span(H);
        out.push_back({Box{x0, y0, x1, y1}, resize_long});
      }
      break;
    }
    case ViewPolicy::kGrid: {
      const auto g = static_cast<std::size_t>(std::llround(std::sqrt(static_cast<double>(k))));
      if (g * g != k) throw ConfigError("grid policy needs a square k, got " + std::to_string(k));
      if (g > static_cast<std::size_t>(std::min(W, H))) {
        throw InputError("grid policy: image smaller than the tiling");
      }
      auto edge = [g](std::int32_t extent, std::size_t i) {
        return static_cast<std::int32_t>(std::int64_t{extent} * static_cast<std::int64_t>(i) /
                                         static_cast<std::int64_t>(g));
      };
      for (std::size_t r = 0; r < g; ++r) {
        for (std::size_t c = 0; c < g; ++c) {
          out.push_back({Box{edge(W, c), edge(H, r), edge(W, c + 1), edge(H, r + 1)}, resize_long});
        }
      }
      break;
    }
  }
  return out;
}

}  // namespace ccd
