#include <httplib.h>

#include "advex/annotation.hpp"
#include "advex/error.hpp"

namespace advex {

struct HttpServer::Impl {
  AnnotationService& service;
  httplib::Server server;
};

namespace {

void send(httplib::Response& res, const HttpResponse& r) {
  res.status = r.status;
  for (const auto& [k, v] : r.headers) res.set_header(k, v);
  if (r.status != 204) res.set_content(r.body, r.content_type);
}

}  // namespace

HttpServer::HttpServer(AnnotationService& service) : impl_(new Impl{service, {}}) {
  auto& svc = impl_->service;
  auto& s = impl_->server;
  s.Get("/api/queue/next", [&svc](const httplib::Request& req, httplib::Response& res) {
    std::string who = req.has_param("annotator") ? req.get_param_value("annotator") : req.get_header_value("X-Annotator");
    send(res, svc.next(who));
  });
  s.Post("/api/annotations",
         [&svc](const httplib::Request& req, httplib::Response& res) { send(res, svc.submit(req.body)); });
  s.Get("/api/progress", [&svc](const httplib::Request&, httplib::Response& res) { send(res, svc.progress()); });
  s.Get(R"(/api/image/([^/]+))", [&svc](const httplib::Request& req, httplib::Response& res) {
    send(res, svc.image(req.matches[1], req.has_param("kind") ? req.get_param_value("kind") : "",
                        req.get_header_value("Accept")));
  });
}

HttpServer::~HttpServer() { stop(); }

int HttpServer::bind(const std::string& host, int port) {
  const int bound = port == 0 ? impl_->server.bind_to_any_port(host) : (impl_->server.bind_to_port(host, port) ? port : -1);
  if (bound < 0) throw Error("cannot bind " + host + ":" + std::to_string(port));
  return bound;
}

void HttpServer::listen() { impl_->server.listen_after_bind(); }

void HttpServer::stop() {
  if (impl_) impl_->server.stop();
}

}  // namespace advex
