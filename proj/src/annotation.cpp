#include "advex/annotation.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>

#include <json.hpp>

#include "advex/error.hpp"

namespace advex {

using nlohmann::json;
namespace fs = std::filesystem;

std::vector<QueueItem> generate_queue(const Network& net, const Dataset& data, const QueueOptions& opt) {
  if (data.classes != net.classes() || data.image_shape != net.input_shape()) {
    throw ShapeError("generate_queue: dataset does not match the network");
  }
  AttackConfig cfg = opt.attack;
  cfg.goal = Goal::HighConfidence;
  cfg.margin = opt.margin;
  cfg.target.reset();
  cfg.validate(net.classes());

  Rng rng(opt.seed);
  const auto order = shuffled_indices(data.size(), rng);
  const std::size_t V = net.classes(), bs = std::max<std::size_t>(1, opt.batch);
  std::vector<QueueItem> queue;
  for (std::size_t pos = 0; pos < order.size() && queue.size() < opt.count; pos += bs) {
    std::span<const std::size_t> chunk(order.data() + pos, std::min(bs, order.size() - pos));
    const Tensor x = data.batch(chunk);
    const Tensor y = net.logits(x);
    std::vector<std::size_t> keep;
    for (std::size_t i = 0; i < chunk.size(); ++i) {
      if (argmax(y.data().subspan(i * V, V)) == data.examples[chunk[i]].label) keep.push_back(chunk[i]);
    }
    if (keep.empty()) continue;
    const auto labels = data.labels(keep);
    const auto outcomes = attack_batch(net, data.batch(keep), labels, cfg);
    for (std::size_t i = 0; i < keep.size() && queue.size() < opt.count; ++i) {
      if (!outcomes[i].success) continue;
      char id[32];
      std::snprintf(id, sizeof id, "q%05zu", queue.size());
      const Example& e = data.examples[keep[i]];
      queue.push_back({id, e.id, e.image, *outcomes[i].adversarial, e.label, outcomes[i].final_prediction});
    }
  }
  return queue;
}

std::string adversarial_image_path(const std::string& item_id) { return "images/" + item_id + ".adv.aetn"; }

void save_queue(const std::vector<QueueItem>& queue, const std::string& dir) {
  fs::create_directories(fs::path(dir) / "images");
  json items = json::array();
  for (const auto& q : queue) {
    const std::string orig = "images/" + q.id + ".orig.aetn", adv = adversarial_image_path(q.id);
    save_aetn((fs::path(dir) / orig).string(), q.original);
    save_aetn((fs::path(dir) / adv).string(), q.adversarial);
    items.push_back({{"id", q.id},
                     {"source_id", q.source_id},
                     {"label", q.label},
                     {"prediction", q.prediction},
                     {"original", orig},
                     {"adversarial", adv}});
  }
  json j{{"format", "advex-queue"}, {"version", 1}, {"items", std::move(items)}};
  std::ofstream(fs::path(dir) / "queue.json") << j.dump(1) << '\n';
}

std::vector<QueueItem> load_queue(const std::string& dir) {
  std::ifstream in(fs::path(dir) / "queue.json");
  if (!in) throw FormatError("cannot open " + (fs::path(dir) / "queue.json").string());
  std::vector<QueueItem> queue;
  try {
    json j;
    in >> j;
    if (j.at("format") != "advex-queue") throw FormatError("queue.json: unexpected format tag");
    for (const auto& it : j.at("items")) {
      QueueItem q;
      q.id = it.at("id").get<std::string>();
      if (q.id.find(':') != std::string::npos) throw FormatError("queue.json: item id may not contain ':'");
      q.source_id = it.at("source_id").get<std::string>();
      q.label = it.at("label").get<std::size_t>();
      q.prediction = it.at("prediction").get<std::vector<double>>();
      q.original = load_aetn((fs::path(dir) / it.at("original").get<std::string>()).string());
      q.adversarial = load_aetn((fs::path(dir) / it.at("adversarial").get<std::string>()).string());
      queue.push_back(std::move(q));
    }
  } catch (const json::exception& e) {
    throw FormatError("queue.json: " + std::string(e.what()));
  }
  return queue;
}

std::vector<std::string> verify_queue(const Network& net, const std::vector<QueueItem>& queue, double margin,
                                      std::size_t sample) {
  std::vector<std::string> bad;
  const std::size_t stride = sample == 0 || sample >= queue.size() ? 1 : queue.size() / sample;
  for (std::size_t i = 0; i < queue.size(); i += stride) {
    const auto& q = queue[i];
    Shape s{1};
    s.insert(s.end(), q.adversarial.shape().begin(), q.adversarial.shape().end());
    const Tensor y = net.logits(q.adversarial.reshaped(s));
    if (!goal_high_confidence(softmax(y.data()), q.label, margin)) bad.push_back(q.id);
  }
  return bad;
}

// ---------------------------------------------------------------------------
// Service

namespace {

HttpResponse json_response(int status, const json& j) { return {status, "application/json", j.dump(), {}}; }

HttpResponse error_response(int status, const std::string& message) {
  return json_response(status, json{{"error", message}});
}

std::string item_of(const std::string& record_id) { return record_id.substr(0, record_id.find(':')); }

}  // namespace

AnnotationService::AnnotationService(std::vector<QueueItem> queue, ServiceOptions opt)
    : queue_(std::move(queue)), opt_(std::move(opt)) {
  if (opt_.lease_seconds <= 0) throw ConfigError("annotation service: lease must be positive");
  for (std::size_t i = 0; i < queue_.size(); ++i) {
    if (!index_.emplace(queue_[i].id, i).second) throw FormatError("queue: duplicate item id " + queue_[i].id);
  }
  decisions_.resize(queue_.size());
  leases_.resize(queue_.size());
  if (!opt_.log_path.empty() && fs::exists(opt_.log_path)) {
    for (const auto& r : load_annotations(opt_.log_path)) {
      if (!index_.count(item_of(r.id))) throw FormatError("annotation log names unknown item " + r.id);
      apply(r);
    }
  }
}

std::int64_t AnnotationService::now() const {
  if (opt_.clock) return opt_.clock();
  return std::chrono::duration_cast<std::chrono::seconds>(std::chrono::system_clock::now().time_since_epoch())
      .count();
}

void AnnotationService::apply(const AnnotationRecord& r) {
  const std::size_t i = index_.at(item_of(r.id));
  decisions_[i][r.annotator] = r.decision;
  leases_[i].erase(r.annotator);
  records_.push_back(r);
}

bool AnnotationService::available(std::size_t item, const std::string& annotator, std::int64_t t) const {
  if (opt_.allow_overlap) return !decisions_[item].count(annotator);
  if (!decisions_[item].empty()) return false;
  for (const auto& [who, expiry] : leases_[item]) {
    if (who != annotator && expiry > t) return false;
  }
  return true;
}

HttpResponse AnnotationService::next(const std::string& annotator) {
  if (annotator.empty()) return error_response(400, "annotator is required");
  std::lock_guard lock(mu_);
  const std::int64_t t = now();
  std::optional<std::size_t> pick;
  // An annotator asking again gets back the item they already hold.
  for (std::size_t i = 0; i < queue_.size() && !pick; ++i) {
    auto it = leases_[i].find(annotator);
    if (it != leases_[i].end() && it->second > t && available(i, annotator, t)) pick = i;
  }
  for (std::size_t i = 0; i < queue_.size() && !pick; ++i) {
    if (available(i, annotator, t)) pick = i;
  }
  if (!pick) return {204, "application/json", "", {}};
  const std::int64_t expiry = t + opt_.lease_seconds;
  leases_[*pick][annotator] = expiry;
  const QueueItem& q = queue_[*pick];
  return json_response(200, json{{"id", q.id},
                                 {"source_id", q.source_id},
                                 {"label", q.label},
                                 {"predicted_class", q.predicted_class()},
                                 {"prediction", q.prediction},
                                 {"shape", q.adversarial.shape()},
                                 {"original", "/api/image/" + q.id + "?kind=original"},
                                 {"adversarial", "/api/image/" + q.id + "?kind=adversarial"},
                                 {"lease_expires", expiry}});
}

std::string AnnotationService::record_image_path(const std::string& item_id) const {
  if (opt_.image_dir.empty() || opt_.log_path.empty()) return adversarial_image_path(item_id);
  const fs::path image = fs::absolute(fs::path(opt_.image_dir) / adversarial_image_path(item_id)).lexically_normal();
  const fs::path base = fs::absolute(opt_.log_path).parent_path().lexically_normal();
  const fs::path rel = image.lexically_relative(base);
  return rel.empty() ? image.string() : rel.string();
}

HttpResponse AnnotationService::submit(const std::string& body) {
  json j;
  try {
    j = json::parse(body);
  } catch (const json::exception&) {
    return error_response(400, "body is not valid JSON");
  }
  if (!j.is_object() || !j.contains("id") || !j.contains("decision") || !j.contains("annotator") ||
      !j["id"].is_string() || !j["decision"].is_string() || !j["annotator"].is_string()) {
    return error_response(400, "body needs string fields id, decision and annotator");
  }
  Decision decision;
  try {
    decision = decision_from_string(j["decision"].get<std::string>());
  } catch (const FormatError& e) {
    return error_response(400, e.what());
  }
  const std::string id = j["id"], annotator = j["annotator"];
  if (annotator.empty()) return error_response(400, "annotator is required");

  std::lock_guard lock(mu_);
  auto it = index_.find(id);
  if (it == index_.end()) return error_response(404, "unknown item " + id);
  const std::size_t i = it->second;
  const bool taken = opt_.allow_overlap ? decisions_[i].count(annotator) > 0 : !decisions_[i].empty();
  if (taken) return error_response(409, "item " + id + " already decided");

  const QueueItem& q = queue_[i];
  AnnotationRecord r;
  r.id = opt_.allow_overlap ? id + ":" + annotator : id;
  r.source_id = q.source_id;
  r.image_path = record_image_path(q.id);
  r.original_label = q.label;
  r.predicted_class = q.predicted_class();
  r.decision = decision;
  r.annotator = annotator;
  r.timestamp = now();
  if (!opt_.log_path.empty()) {
    std::ofstream log(opt_.log_path, std::ios::app);
    const std::string line = to_json_line(r) + "\n";
    log.write(line.data(), std::streamsize(line.size()));
    log.flush();
    if (!log) return error_response(500, "could not append to the annotation log");
  }
  apply(r);
  return json_response(200, json::parse(to_json_line(r)));
}

HttpResponse AnnotationService::progress() const {
  std::lock_guard lock(mu_);
  std::map<std::string, std::size_t> counts{{"unchanged", 0}, {"unsure", 0}, {"changed", 0}};
  for (const auto& r : records_) ++counts[to_string(r.decision)];
  std::size_t decided = 0, shared = 0, agreeing = 0;
  for (const auto& d : decisions_) {
    if (d.empty()) continue;
    ++decided;
    if (d.size() < 2) continue;
    ++shared;
    const Decision first = d.begin()->second;
    agreeing += std::all_of(d.begin(), d.end(), [&](const auto& kv) { return kv.second == first; });
  }
  json agreement{{"shared", shared}, {"agreeing", agreeing}};
  agreement["rate"] = shared ? json(double(agreeing) / double(shared)) : json(nullptr);
  return json_response(200, json{{"total", queue_.size()},
                                 {"decided", decided},
                                 {"remaining", queue_.size() - decided},
                                 {"records", records_.size()},
                                 {"counts", counts},
                                 {"agreement", agreement}});
}

HttpResponse AnnotationService::image(const std::string& id, const std::string& kind, const std::string& accept) const {
  auto it = index_.find(id);
  if (it == index_.end()) return error_response(404, "unknown item " + id);
  if (!kind.empty() && kind != "adversarial" && kind != "original") {
    return error_response(400, "kind must be adversarial or original");
  }
  const QueueItem& q = queue_[it->second];
  const Tensor& img = kind == "original" ? q.original : q.adversarial;
  if (accept.find("application/x-aetn") != std::string::npos) {
    return {200, "application/x-aetn", encode_aetn(img), {}};
  }
  std::size_t C = 1, H = 1, W = img.size();
  if (img.rank() == 3) {
    C = img.dim(0);
    H = img.dim(1);
    W = img.dim(2);
  }
  if (C != 1 && C != 3) return error_response(415, "only 1- or 3-channel images render as RGBA");
  std::string px(H * W * 4, '\0');
  for (std::size_t p = 0; p < H * W; ++p) {
    for (std::size_t c = 0; c < 3; ++c) {
      const double v = std::clamp(img[(C == 1 ? 0 : c) * H * W + p], 0.0, 1.0);
      px[p * 4 + c] = char(static_cast<unsigned char>(std::lround(v * 255.0)));
    }
    px[p * 4 + 3] = char(255);
  }
  return {200, "application/octet-stream", std::move(px), {{"X-Width", std::to_string(W)}, {"X-Height", std::to_string(H)}}};
}

HttpResponse AnnotationService::handle(const std::string& method, const std::string& path, const std::string& body,
                                       const std::map<std::string, std::string>& headers) {
  const auto q = path.find('?');
  const std::string route = path.substr(0, q);
  std::map<std::string, std::string> query;
  if (q != std::string::npos) {
    std::string rest = path.substr(q + 1);
    std::size_t start = 0;
    while (start <= rest.size()) {
      const std::size_t amp = std::min(rest.find('&', start), rest.size());
      const std::string kv = rest.substr(start, amp - start);
      const std::size_t eq = kv.find('=');
      if (!kv.empty()) query[kv.substr(0, eq)] = eq == std::string::npos ? "" : kv.substr(eq + 1);
      start = amp + 1;
    }
  }
  auto header = [&](const std::string& name) {
    for (const auto& [k, v] : headers) {
      if (k.size() == name.size() &&
          std::equal(k.begin(), k.end(), name.begin(), [](char a, char b) { return std::tolower(a) == std::tolower(b); })) {
        return v;
      }
    }
    return std::string{};
  };

  if (method == "GET" && route == "/api/queue/next") {
    std::string who = query.count("annotator") ? query["annotator"] : header("X-Annotator");
    return next(who);
  }
  if (method == "POST" && route == "/api/annotations") return submit(body);
  if (method == "GET" && route == "/api/progress") return progress();
  const std::string prefix = "/api/image/";
  if (method == "GET" && route.rfind(prefix, 0) == 0) {
    return image(route.substr(prefix.size()), query.count("kind") ? query["kind"] : "", header("Accept"));
  }
  return error_response(404, "no route for " + method + " " + route);
}

std::vector<AnnotationRecord> AnnotationService::records() const {
  std::lock_guard lock(mu_);
  return records_;
}

}  // namespace advex
