#include <gtest/gtest.h>

#include <httplib.h>

#include <filesystem>
#include <json.hpp>
#include <thread>

#include "advex/annotation.hpp"
#include "advex/error.hpp"
#include "advex/train.hpp"
#include "support.hpp"

using namespace advex;
using nlohmann::json;

namespace {

std::vector<QueueItem> make_queue(std::size_t n) {
  std::vector<QueueItem> q;
  for (std::size_t i = 0; i < n; ++i) {
    QueueItem it;
    it.id = "q" + std::to_string(i);
    it.source_id = "src-" + std::to_string(i);
    it.original = Tensor({1, 2, 2}, 0.25);
    it.adversarial = Tensor({1, 2, 2}, 0.75);
    it.label = i % 3;
    it.prediction = {0.1, 0.1, 0.1};
    it.prediction[(i + 1) % 3] = 0.8;
    q.push_back(it);
  }
  return q;
}

std::string body(const std::string& id, const std::string& decision, const std::string& who) {
  return json{{"id", id}, {"decision", decision}, {"annotator", who}}.dump();
}

json progress_of(AnnotationService& s) { return json::parse(s.progress().body); }

}  // namespace

TEST(Service, NextSubmitAndErrors) {
  AnnotationService s(make_queue(2), {});
  auto n = s.next("amy");
  ASSERT_EQ(n.status, 200);
  auto j = json::parse(n.body);
  EXPECT_EQ(j["id"], "q0");
  EXPECT_EQ(j["predicted_class"], 1);
  EXPECT_EQ(s.next("").status, 400);

  EXPECT_EQ(s.submit("{nope").status, 400);
  EXPECT_EQ(s.submit(R"({"id": "q0"})").status, 400);
  EXPECT_EQ(s.submit(body("q0", "maybe", "amy")).status, 400);
  EXPECT_EQ(s.submit(body("q9", "changed", "amy")).status, 404);
  EXPECT_EQ(s.submit(body("q0", "unchanged", "amy")).status, 200);
  EXPECT_EQ(s.submit(body("q0", "changed", "bob")).status, 409);

  EXPECT_EQ(json::parse(s.next("amy").body)["id"], "q1");
  EXPECT_EQ(s.submit(body("q1", "unsure", "amy")).status, 200);
  EXPECT_EQ(s.next("amy").status, 204);
}

TEST(Service, LeasesExpire) {
  std::int64_t t = 1000;
  ServiceOptions opt;
  opt.lease_seconds = 60;
  opt.clock = [&t] { return t; };
  AnnotationService s(make_queue(2), opt);
  EXPECT_EQ(json::parse(s.next("amy").body)["id"], "q0");
  EXPECT_EQ(json::parse(s.next("bob").body)["id"], "q1");
  EXPECT_EQ(json::parse(s.next("amy").body)["id"], "q0");  // own lease comes back
  EXPECT_EQ(s.next("cat").status, 204);
  t += 61;
  EXPECT_EQ(json::parse(s.next("cat").body)["id"], "q0");
}

TEST(Service, ProgressConservation) {
  AnnotationService s(make_queue(30), {});
  const char* decisions[] = {"unchanged", "unsure", "changed"};
  for (int i = 0; i < 30; ++i) {
    auto id = json::parse(s.next("amy").body)["id"].get<std::string>();
    ASSERT_EQ(s.submit(body(id, decisions[i % 3], "amy")).status, 200);
    auto p = progress_of(s);
    EXPECT_EQ(p["decided"].get<int>() + p["remaining"].get<int>(), 30);
    EXPECT_EQ(p["records"], i + 1);
  }
  auto p = progress_of(s);
  EXPECT_EQ(p["counts"]["unchanged"], 10);
  EXPECT_EQ(p["counts"]["unsure"], 10);
  EXPECT_EQ(p["counts"]["changed"], 10);
  EXPECT_TRUE(p["agreement"]["rate"].is_null());
}

TEST(Service, OverlapAgreement) {
  ServiceOptions opt;
  opt.allow_overlap = true;
  AnnotationService s(make_queue(106), opt);
  for (int i = 0; i < 106; ++i) {
    const std::string id = "q" + std::to_string(i);
    ASSERT_EQ(s.submit(body(id, "unchanged", "amy")).status, 200);
    ASSERT_EQ(s.submit(body(id, i < 72 ? "unchanged" : "changed", "bob")).status, 200);
    EXPECT_EQ(s.submit(body(id, "changed", "bob")).status, 409);
  }
  auto p = progress_of(s);
  EXPECT_EQ(p["agreement"]["shared"], 106);
  EXPECT_EQ(p["agreement"]["agreeing"], 72);
  EXPECT_NEAR(p["agreement"]["rate"].get<double>(), 72.0 / 106.0, 1e-12);
  EXPECT_EQ(s.records()[1].id, "q0:bob");
}

TEST(Service, LogReplay) {
  auto dir = advex::testing::temp_dir("service_log");
  ServiceOptions opt;
  opt.log_path = dir + "/log.jsonl";
  {
    AnnotationService s(make_queue(3), opt);
    s.submit(body("q0", "unchanged", "amy"));
    s.submit(body("q2", "changed", "amy"));
  }
  AnnotationService again(make_queue(3), opt);
  EXPECT_EQ(again.records().size(), 2u);
  EXPECT_EQ(json::parse(again.next("bob").body)["id"], "q1");
  EXPECT_EQ(again.submit(body("q2", "unsure", "bob")).status, 409);
  EXPECT_EQ(load_annotations(opt.log_path).size(), 2u);
  EXPECT_THROW(AnnotationService(make_queue(1), opt), FormatError);
}

TEST(Service, RecordImagePathsResolveFromTheLog) {
  auto dir = advex::testing::temp_dir("service_paths");
  ServiceOptions opt;
  opt.log_path = dir + "/logs/run.jsonl";
  opt.image_dir = dir + "/queue";
  std::filesystem::create_directories(dir + "/logs");
  AnnotationService s(make_queue(1), opt);
  ASSERT_EQ(s.submit(body("q0", "unchanged", "amy")).status, 200);
  EXPECT_EQ(s.records()[0].image_path, "../queue/images/q0.adv.aetn");
}

TEST(Service, ImagesAndRouting) {
  AnnotationService s(make_queue(1), {});
  auto rgba = s.image("q0", "", "");
  ASSERT_EQ(rgba.status, 200);
  EXPECT_EQ(rgba.body.size(), 2u * 2u * 4u);
  EXPECT_EQ(static_cast<unsigned char>(rgba.body[0]), 191);
  EXPECT_EQ(rgba.headers["X-Width"], "2");
  auto aetn = s.image("q0", "original", "application/x-aetn");
  EXPECT_EQ(decode_aetn(aetn.body), Tensor({1, 2, 2}, 0.25));
  EXPECT_EQ(s.image("q0", "bogus", "").status, 400);
  EXPECT_EQ(s.image("zz", "", "").status, 404);

  EXPECT_EQ(s.handle("GET", "/api/queue/next?annotator=amy", "").status, 200);
  EXPECT_EQ(s.handle("GET", "/api/queue/next", "", {{"x-annotator", "bob"}}).status, 204);
  EXPECT_EQ(s.handle("GET", "/api/progress", "").status, 200);
  EXPECT_EQ(s.handle("GET", "/api/image/q0?kind=original", "").status, 200);
  EXPECT_EQ(s.handle("POST", "/api/annotations", body("q0", "changed", "amy")).status, 200);
  EXPECT_EQ(s.handle("DELETE", "/api/progress", "").status, 404);
}

TEST(Queue, GenerateSaveLoadVerify) {
  auto data = gen_blobs(3, 40, 0.05, 1);
  TrainConfig cfg;
  cfg.epochs = 15;
  cfg.schedule = {0.05, 2.0, {12.0}, 0.1};
  auto net = train(cfg, data).net;
  QueueOptions qo;
  qo.count = 5;
  qo.attack.steps = 200;
  auto q = generate_queue(net, data, qo);
  ASSERT_EQ(q.size(), 5u);
  for (const auto& it : q) {
    EXPECT_EQ(it.id.find(':'), std::string::npos);
    EXPECT_NE(it.predicted_class(), it.label);
  }
  EXPECT_TRUE(verify_queue(net, q, qo.margin).empty());
  auto dir = advex::testing::temp_dir("queue");
  save_queue(q, dir);
  auto back = load_queue(dir);
  ASSERT_EQ(back.size(), q.size());
  EXPECT_EQ(back[0].adversarial, q[0].adversarial);
  EXPECT_TRUE(std::filesystem::exists(dir + "/" + adversarial_image_path(q[0].id)));
  Network flat = Network::mlp_2d(3);
  EXPECT_EQ(verify_queue(flat, back, qo.margin).size(), 5u);
}

TEST(Http, EndToEnd) {
  auto dir = advex::testing::temp_dir("http");
  ServiceOptions opt;
  opt.log_path = dir + "/log.jsonl";
  AnnotationService svc(make_queue(3), opt);
  HttpServer server(svc);
  const int port = server.bind("127.0.0.1", 0);
  std::thread th([&] { server.listen(); });

  httplib::Client cli("127.0.0.1", port);
  for (int i = 0; i < 50; ++i) {
    if (cli.Get("/api/progress")) break;
    std::this_thread::sleep_for(std::chrono::milliseconds(20));
  }
  auto n = cli.Get("/api/queue/next?annotator=amy");
  ASSERT_TRUE(n);
  EXPECT_EQ(n->status, 200);
  const auto id = json::parse(n->body)["id"].get<std::string>();
  auto img = cli.Get(("/api/image/" + id).c_str(), httplib::Headers{{"Accept", "application/x-aetn"}});
  ASSERT_TRUE(img);
  EXPECT_EQ(decode_aetn(img->body).shape(), (Shape{1, 2, 2}));
  auto post = cli.Post("/api/annotations", body(id, "unchanged", "amy"), "application/json");
  ASSERT_TRUE(post);
  EXPECT_EQ(post->status, 200);
  auto again = cli.Post("/api/annotations", body(id, "changed", "amy"), "application/json");
  EXPECT_EQ(again->status, 409);
  auto bad = cli.Post("/api/annotations", "[1,2]", "application/json");
  EXPECT_EQ(bad->status, 400);
  auto p = cli.Get("/api/progress");
  EXPECT_EQ(json::parse(p->body)["decided"], 1);
  EXPECT_EQ(load_annotations(opt.log_path).size(), 1u);

  server.stop();
  th.join();
}
