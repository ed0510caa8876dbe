#include "advex/data.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <numbers>
#include <numeric>
#include <set>
#include <sstream>

#include <json.hpp>

#include "advex/error.hpp"

namespace advex {

using nlohmann::json;
namespace fs = std::filesystem;

Tensor Dataset::batch(std::span<const std::size_t> indices) const {
  Shape s{indices.size()};
  s.insert(s.end(), image_shape.begin(), image_shape.end());
  Tensor out(s);
  const std::size_t n = numel(image_shape);
  for (std::size_t i = 0; i < indices.size(); ++i) {
    const Tensor& img = examples.at(indices[i]).image;
    std::copy(img.data().begin(), img.data().end(), out.data().begin() + std::ptrdiff_t(i * n));
  }
  return out;
}

std::vector<std::size_t> Dataset::labels(std::span<const std::size_t> indices) const {
  std::vector<std::size_t> out;
  out.reserve(indices.size());
  for (auto i : indices) out.push_back(examples.at(i).label);
  return out;
}

std::vector<std::size_t> Dataset::all_labels() const {
  std::vector<std::size_t> out;
  out.reserve(examples.size());
  for (const auto& e : examples) out.push_back(e.label);
  return out;
}

void Dataset::validate() const {
  if (classes < 2) throw ConfigError("dataset '" + name + "': needs at least two classes");
  std::set<std::string> ids;
  for (const auto& e : examples) {
    if (e.image.shape() != image_shape) {
      throw ShapeError("dataset '" + name + "': example " + e.id + " has shape " + shape_str(e.image.shape()) +
                       ", expected " + shape_str(image_shape));
    }
    if (e.label >= classes) throw ConfigError("dataset '" + name + "': example " + e.id + " label out of range");
    for (double v : e.image.data()) {
      if (!(v >= 0.0 && v <= 1.0)) throw NumericError("dataset '" + name + "': example " + e.id + " leaves [0,1]");
    }
    if (!ids.insert(e.id).second) throw FormatError("dataset '" + name + "': duplicate id " + e.id);
  }
}

std::vector<std::size_t> shuffled_indices(std::size_t n, Rng& rng) {
  std::vector<std::size_t> idx(n);
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  for (std::size_t i = n; i > 1; --i) {
    const std::size_t j = std::uniform_int_distribution<std::size_t>(0, i - 1)(rng);
    std::swap(idx[i - 1], idx[j]);
  }
  return idx;
}

// ---------------------------------------------------------------------------
// Synthetic sets

double blob_margin(std::size_t classes, double radius) {
  if (classes < 2) throw ConfigError("blob_margin: need at least two classes");
  return radius * std::sin(std::numbers::pi / double(classes));
}

Dataset gen_blobs(std::size_t classes, std::size_t per_class, double spread, std::uint64_t seed, double radius) {
  if (classes < 2) throw ConfigError("gen_blobs: need at least two classes");
  if (!(spread >= 0.0)) throw ConfigError("gen_blobs: spread must be >= 0");
  Dataset ds;
  ds.name = "blobs";
  ds.classes = classes;
  ds.image_shape = {2};
  Rng rng(seed);
  std::normal_distribution<double> noise(0.0, 1.0);
  for (std::size_t i = 0; i < per_class; ++i) {
    for (std::size_t c = 0; c < classes; ++c) {
      const double angle = 2.0 * std::numbers::pi * double(c) / double(classes);
      double x = 0.5 + radius * std::cos(angle) + spread * noise(rng);
      double y = 0.5 + radius * std::sin(angle) + spread * noise(rng);
      ds.examples.push_back({"blob-" + std::to_string(c) + "-" + std::to_string(i),
                             Tensor({2}, {std::clamp(x, 0.0, 1.0), std::clamp(y, 0.0, 1.0)}), c, Origin::Base});
    }
  }
  return ds;
}

namespace {

// '#' = ink.
constexpr const char* kGlyphs[10][8] = {
    {"..####..", ".##..##.", ".##..##.", ".##..##.", ".##..##.", ".##..##.", "..####..", "........"},
    {"...##...", "..###...", "...##...", "...##...", "...##...", "...##...", "..####..", "........"},
    {"..####..", ".##..##.", ".....##.", "....##..", "...##...", "..##....", ".######.", "........"},
    {"..####..", ".##..##.", ".....##.", "...###..", ".....##.", ".##..##.", "..####..", "........"},
    {"....##..", "...###..", "..####..", ".##.##..", ".######.", "....##..", "....##..", "........"},
    {".######.", ".##.....", ".#####..", ".....##.", ".....##.", ".##..##.", "..####..", "........"},
    {"..####..", ".##.....", ".#####..", ".##..##.", ".##..##.", ".##..##.", "..####..", "........"},
    {".######.", ".....##.", "....##..", "...##...", "..##....", "..##....", "..##....", "........"},
    {"..####..", ".##..##.", ".##..##.", "..####..", ".##..##.", ".##..##.", "..####..", "........"},
    {"..####..", ".##..##.", ".##..##.", "..#####.", ".....##.", "....##..", "..###...", "........"},
};

}  // namespace

Dataset gen_digits(std::size_t classes, std::size_t per_class, double noise, std::uint64_t seed) {
  if (classes < 2 || classes > 10) throw ConfigError("gen_digits: classes must lie in [2, 10]");
  if (!(noise >= 0.0)) throw ConfigError("gen_digits: noise must be >= 0");
  Dataset ds;
  ds.name = "digits";
  ds.classes = classes;
  ds.image_shape = {1, 8, 8};
  Rng rng(seed);
  std::normal_distribution<double> pixel(0.0, 1.0);
  std::uniform_int_distribution<int> shift(-1, 1);
  for (std::size_t i = 0; i < per_class; ++i) {
    for (std::size_t c = 0; c < classes; ++c) {
      const int dy = shift(rng), dx = shift(rng);
      Tensor img({1, 8, 8});
      for (int y = 0; y < 8; ++y) {
        for (int x = 0; x < 8; ++x) {
          const int sy = y - dy, sx = x - dx;
          const bool ink = sy >= 0 && sy < 8 && sx >= 0 && sx < 8 && kGlyphs[c][sy][sx] == '#';
          const double v = (ink ? 0.9 : 0.1) + noise * pixel(rng);
          img[std::size_t(y * 8 + x)] = std::clamp(v, 0.0, 1.0);
        }
      }
      ds.examples.push_back({"digit-" + std::to_string(c) + "-" + std::to_string(i), std::move(img), c, Origin::Base});
    }
  }
  return ds;
}

// ---------------------------------------------------------------------------
// CIFAR-10 binary

namespace {
constexpr std::size_t kCifarPixels = 3 * 32 * 32;
constexpr std::size_t kCifarRecord = 1 + kCifarPixels;
}  // namespace

void parse_cifar(std::string_view bytes, std::size_t per_class, const std::string& source, Dataset& out,
                 std::vector<std::size_t>& counts) {
  if (counts.size() < 10) counts.resize(10, 0);
  if (out.classes == 0) out.classes = 10;
  if (out.image_shape.empty()) out.image_shape = {3, 32, 32};
  const std::size_t whole = bytes.size() / kCifarRecord * kCifarRecord;
  if (whole != bytes.size()) {
    throw FormatError(source + ": truncated record at byte offset " + std::to_string(whole) + " (" +
                      std::to_string(bytes.size() - whole) + " of " + std::to_string(kCifarRecord) + " bytes)");
  }
  for (std::size_t off = 0; off < bytes.size(); off += kCifarRecord) {
    const auto label = static_cast<unsigned char>(bytes[off]);
    if (label >= 10) {
      throw FormatError(source + ": label byte " + std::to_string(label) + " out of range at byte offset " +
                        std::to_string(off));
    }
    if (counts[label] >= per_class) continue;
    ++counts[label];
    Tensor img({3, 32, 32});
    for (std::size_t i = 0; i < kCifarPixels; ++i) {
      img[i] = double(static_cast<unsigned char>(bytes[off + 1 + i])) / 255.0;
    }
    out.examples.push_back({source + "#" + std::to_string(off / kCifarRecord), std::move(img), label, Origin::Base});
  }
}

Dataset load_cifar_subset(const std::vector<std::string>& paths, std::size_t per_class) {
  Dataset ds;
  ds.name = "cifar10";
  ds.classes = 10;
  ds.image_shape = {3, 32, 32};
  std::vector<std::size_t> counts(10, 0);
  for (const auto& p : paths) {
    std::ifstream in(p, std::ios::binary);
    if (!in) throw FormatError("cannot open CIFAR file " + p);
    std::ostringstream buf;
    buf << in.rdbuf();
    parse_cifar(buf.str(), per_class, fs::path(p).filename().string(), ds, counts);
  }
  return ds;
}

// ---------------------------------------------------------------------------
// Augmentation

namespace {
int reflect(int i, int n) {
  while (i < 0 || i >= n) i = i < 0 ? -i : 2 * (n - 1) - i;
  return i;
}
}  // namespace

Tensor flip_horizontal(const Tensor& image) {
  if (image.rank() != 3) throw ShapeError("flip_horizontal: expected [C,H,W], got " + shape_str(image.shape()));
  const std::size_t C = image.dim(0), H = image.dim(1), W = image.dim(2);
  Tensor out(image.shape());
  for (std::size_t c = 0; c < C; ++c)
    for (std::size_t y = 0; y < H; ++y)
      for (std::size_t x = 0; x < W; ++x) out[(c * H + y) * W + x] = image[(c * H + y) * W + (W - 1 - x)];
  return out;
}

Tensor augment(const Tensor& image, const AugmentConfig& cfg, Rng& rng) {
  if (cfg.pad < 0) throw ConfigError("augment: pad must be >= 0");
  if (!(cfg.flip_prob >= 0.0 && cfg.flip_prob <= 1.0)) throw ConfigError("augment: flip probability outside [0,1]");
  if (image.rank() != 3) throw ShapeError("augment: expected [C,H,W], got " + shape_str(image.shape()));
  const int C = int(image.dim(0)), H = int(image.dim(1)), W = int(image.dim(2));
  if (cfg.pad >= H || cfg.pad >= W) throw ConfigError("augment: pad must be smaller than the image");
  Tensor out = image;
  if (cfg.pad > 0) {
    std::uniform_int_distribution<int> off(0, 2 * cfg.pad);
    const int oy = off(rng) - cfg.pad, ox = off(rng) - cfg.pad;
    for (int c = 0; c < C; ++c)
      for (int y = 0; y < H; ++y)
        for (int x = 0; x < W; ++x) {
          out[std::size_t((c * H + y) * W + x)] =
              image[std::size_t((c * H + reflect(y + oy, H)) * W + reflect(x + ox, W))];
        }
  }
  if (cfg.flip_prob > 0.0 && std::uniform_real_distribution<double>(0.0, 1.0)(rng) < cfg.flip_prob) {
    out = flip_horizontal(out);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Annotation merge

Dataset merge_annotations(const Dataset& base, const std::vector<AnnotationRecord>& records,
                          const std::string& base_dir) {
  std::set<std::string> seen;
  for (const auto& r : records) {
    if (!seen.insert(r.id).second) throw FormatError("merge_annotations: duplicate annotation id " + r.id);
  }
  std::set<std::string> present;
  for (const auto& e : base.examples) present.insert(e.id);

  Dataset out = base;
  for (const auto& r : records) {
    if (r.decision != Decision::Unchanged || present.count(r.id)) continue;
    if (r.original_label >= base.classes) throw ConfigError("merge_annotations: " + r.id + " label out of range");
    fs::path p(r.image_path);
    if (p.is_relative()) p = fs::path(base_dir) / p;
    Tensor img = load_aetn(p.string());
    if (img.shape() != base.image_shape) {
      throw ShapeError("merge_annotations: " + r.id + " image " + shape_str(img.shape()) + " does not match " +
                       shape_str(base.image_shape));
    }
    out.examples.push_back({r.id, std::move(img), r.original_label, Origin::Annotation});
  }
  return out;
}

// ---------------------------------------------------------------------------
// Persistence

void save_dataset(const Dataset& ds, const std::string& dir) {
  fs::create_directories(dir);
  json j;
  j["format"] = "advex-dataset";
  j["version"] = 1;
  j["name"] = ds.name;
  j["classes"] = ds.classes;
  j["image_shape"] = ds.image_shape;
  j["merged_annotations"] = ds.merged_annotations;
  json ex = json::array();
  for (const auto& e : ds.examples) {
    ex.push_back({{"id", e.id}, {"label", e.label}, {"origin", e.origin == Origin::Base ? "base" : "annotation"}});
  }
  j["examples"] = std::move(ex);
  std::ofstream(fs::path(dir) / "dataset.json") << j.dump(1) << '\n';

  std::vector<std::size_t> all(ds.size());
  std::iota(all.begin(), all.end(), std::size_t{0});
  if (!ds.examples.empty()) save_aetn((fs::path(dir) / "images.aetn").string(), ds.batch(all));
}

Dataset load_dataset(const std::string& dir) {
  std::ifstream in(fs::path(dir) / "dataset.json");
  if (!in) throw FormatError("cannot open " + (fs::path(dir) / "dataset.json").string());
  json j;
  try {
    in >> j;
  } catch (const json::exception& e) {
    throw FormatError("dataset.json: " + std::string(e.what()));
  }
  Dataset ds;
  try {
    if (j.at("format") != "advex-dataset") throw FormatError("dataset.json: unexpected format tag");
    ds.name = j.at("name").get<std::string>();
    ds.classes = j.at("classes").get<std::size_t>();
    ds.image_shape = j.at("image_shape").get<Shape>();
    ds.merged_annotations = j.value("merged_annotations", std::vector<std::string>{});
    const auto& ex = j.at("examples");
    if (!ex.empty()) {
      const Tensor images = load_aetn((fs::path(dir) / "images.aetn").string());
      if (images.rank() == 0 || images.dim(0) != ex.size()) {
        throw FormatError("images.aetn holds " + shape_str(images.shape()) + " for " + std::to_string(ex.size()) +
                          " examples");
      }
      for (std::size_t i = 0; i < ex.size(); ++i) {
        const auto& e = ex[i];
        ds.examples.push_back({e.at("id").get<std::string>(), slice_row(images, i), e.at("label").get<std::size_t>(),
                               e.at("origin") == "annotation" ? Origin::Annotation : Origin::Base});
      }
    }
  } catch (const json::exception& e) {
    throw FormatError("dataset.json: " + std::string(e.what()));
  }
  ds.validate();
  return ds;
}

// ---------------------------------------------------------------------------
// Annotation records

Decision decision_from_string(const std::string& s) {
  if (s == "unchanged") return Decision::Unchanged;
  if (s == "unsure") return Decision::Unsure;
  if (s == "changed") return Decision::Changed;
  throw FormatError("decision must be unchanged, unsure or changed, got '" + s + "'");
}

std::string to_string(Decision d) {
  switch (d) {
    case Decision::Unchanged: return "unchanged";
    case Decision::Unsure: return "unsure";
    case Decision::Changed: return "changed";
  }
  return "unsure";
}

std::string to_json_line(const AnnotationRecord& r) {
  json j{{"v", AnnotationRecord::kVersion},
         {"id", r.id},
         {"source_id", r.source_id},
         {"image", r.image_path},
         {"original_label", r.original_label},
         {"predicted_class", r.predicted_class},
         {"decision", to_string(r.decision)},
         {"annotator", r.annotator},
         {"timestamp", r.timestamp}};
  return j.dump();
}

AnnotationRecord parse_annotation_line(const std::string& line) {
  json j;
  try {
    j = json::parse(line);
  } catch (const json::exception& e) {
    throw FormatError("annotation: " + std::string(e.what()));
  }
  try {
    if (j.at("v").get<int>() != AnnotationRecord::kVersion) {
      throw FormatError("annotation: unsupported version " + j.at("v").dump());
    }
    AnnotationRecord r;
    r.id = j.at("id").get<std::string>();
    r.source_id = j.at("source_id").get<std::string>();
    r.image_path = j.at("image").get<std::string>();
    r.original_label = j.at("original_label").get<std::size_t>();
    r.predicted_class = j.at("predicted_class").get<std::size_t>();
    r.decision = decision_from_string(j.at("decision").get<std::string>());
    r.annotator = j.at("annotator").get<std::string>();
    r.timestamp = j.at("timestamp").get<std::int64_t>();
    return r;
  } catch (const json::exception& e) {
    throw FormatError("annotation: " + std::string(e.what()));
  }
}

std::vector<AnnotationRecord> read_annotations(std::istream& is) {
  std::vector<AnnotationRecord> out;
  std::string line;
  std::size_t n = 0;
  while (std::getline(is, line)) {
    ++n;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    try {
      out.push_back(parse_annotation_line(line));
    } catch (const FormatError& e) {
      throw FormatError("line " + std::to_string(n) + ": " + e.what());
    }
  }
  return out;
}

std::vector<AnnotationRecord> load_annotations(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw FormatError("cannot open annotation log " + path);
  return read_annotations(in);
}

void write_annotations(std::ostream& os, const std::vector<AnnotationRecord>& records) {
  for (const auto& r : records) os << to_json_line(r) << '\n';
}

}  // namespace advex
