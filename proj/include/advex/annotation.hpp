#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "advex/annotation_record.hpp"
#include "advex/attack.hpp"
#include "advex/data.hpp"
#include "advex/nn.hpp"

namespace advex {

struct QueueItem {
  std::string id;  // never contains ':'
  std::string source_id;
  Tensor original;
  Tensor adversarial;
  std::size_t label = 0;
  std::vector<double> prediction;  // softmax at the adversarial image

  std::size_t predicted_class() const { return argmax(prediction); }
};

struct QueueOptions {
  std::size_t count = 30;
  double margin = 0.5;
  AttackConfig attack;  // goal and margin are overridden
  std::uint64_t seed = 0;
  std::size_t batch = 32;
};

/// Attacks correctly classified examples (seeded order) toward a confident
/// wrong class until `count` items succeed or the dataset runs out.
std::vector<QueueItem> generate_queue(const Network& net, const Dataset& data, const QueueOptions& opt);

/// <dir>/queue.json plus <dir>/images/<id>.{orig,adv}.aetn.
void save_queue(const std::vector<QueueItem>& queue, const std::string& dir);
std::vector<QueueItem> load_queue(const std::string& dir);
/// Relative path of an item's adversarial image inside the queue directory.
std::string adversarial_image_path(const std::string& item_id);

/// Ids of items whose adversarial image no longer satisfies the
/// high-confidence goal against `net`. `sample` > 0 checks only every
/// (size/sample)-th item.
std::vector<std::string> verify_queue(const Network& net, const std::vector<QueueItem>& queue, double margin,
                                      std::size_t sample = 0);

struct HttpResponse {
  int status = 200;
  std::string content_type = "application/json";
  std::string body;
  std::map<std::string, std::string> headers;
};

struct ServiceOptions {
  std::int64_t lease_seconds = 600;
  bool allow_overlap = false;
  std::string log_path;  // empty: keep records in memory only
  /// Queue directory. When set, record image paths are written relative to
  /// the log's directory so the log can live anywhere.
  std::string image_dir;
  std::function<std::int64_t()> clock;  // UTC seconds; defaults to the system clock
};

/// State behind the annotation REST API. All methods are thread-safe; every
/// accepted decision is appended to the log as one JSON line before the call
/// returns.
class AnnotationService {
 public:
  /// Replays an existing log so progress resumes where it stopped.
  AnnotationService(std::vector<QueueItem> queue, ServiceOptions opt);

  /// 200 with the item (leased to `annotator`), or 204 when nothing is left.
  HttpResponse next(const std::string& annotator);
  /// Body: {"id", "decision", "annotator"}. 400 malformed, 404 unknown id,
  /// 409 already decided.
  HttpResponse submit(const std::string& body);
  HttpResponse progress() const;
  /// kind: "adversarial" (default) or "original". An Accept header naming
  /// application/x-aetn yields AETN; otherwise 8-bit RGBA rows.
  HttpResponse image(const std::string& id, const std::string& kind, const std::string& accept) const;

  /// Routes a request the way the HTTP server does.
  HttpResponse handle(const std::string& method, const std::string& path, const std::string& body,
                      const std::map<std::string, std::string>& headers = {});

  std::vector<AnnotationRecord> records() const;
  std::size_t queue_size() const { return queue_.size(); }

 private:
  std::int64_t now() const;
  bool available(std::size_t item, const std::string& annotator, std::int64_t t) const;
  void apply(const AnnotationRecord& r);
  std::string record_image_path(const std::string& item_id) const;

  std::vector<QueueItem> queue_;
  std::map<std::string, std::size_t> index_;
  ServiceOptions opt_;
  mutable std::mutex mu_;
  std::vector<AnnotationRecord> records_;
  std::vector<std::map<std::string, Decision>> decisions_;  // per item, by annotator
  std::vector<std::map<std::string, std::int64_t>> leases_; // per item: annotator -> expiry
};

/// Blocking HTTP front end for an AnnotationService.
class HttpServer {
 public:
  explicit HttpServer(AnnotationService& service);
  ~HttpServer();
  HttpServer(const HttpServer&) = delete;
  HttpServer& operator=(const HttpServer&) = delete;

  /// Binds (port 0 picks a free port) and returns the bound port.
  int bind(const std::string& host, int port);
  /// Serves until stop() is called.
  void listen();
  void stop();

 private:
  struct Impl;
  std::unique_ptr<Impl> impl_;
};

}  // namespace advex
