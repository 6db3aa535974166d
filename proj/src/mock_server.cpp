#include "nanopro/mock_server.hpp"

#include "httplib.h"
#include "json.hpp"

#include "nanopro/embedding.hpp"
#include "nanopro/error.hpp"

namespace nanopro {

struct MockEmbeddingServer::Impl {
  explicit Impl(std::uint64_t seed) : protein(seed), text(seed) {}

  httplib::Server server;
  SyntheticProteinProvider protein;
  SyntheticTextProvider text;
  mutable std::mutex mutex;
  std::deque<Scripted> script;
  std::vector<Call> calls;
};

MockEmbeddingServer::MockEmbeddingServer(std::uint64_t seed) : impl_(std::make_unique<Impl>(seed)) {
  impl_->server.Post("/embed", [this](const httplib::Request& req, httplib::Response& res) {
    Call call;
    Scripted action;
    {
      std::lock_guard lock(impl_->mutex);
      if (!impl_->script.empty()) {
        action = impl_->script.front();
        impl_->script.pop_front();
      }
    }
    auto finish = [&](int status, const std::string& body) {
      res.status = status;
      res.set_content(body, "application/json");
      call.status = status;
      std::lock_guard lock(impl_->mutex);
      impl_->calls.push_back(call);
    };

    nlohmann::json j;
    try {
      j = nlohmann::json::parse(req.body);
      call.modality = j.at("modality").get<std::string>();
      call.input = j.at("input").get<std::string>();
    } catch (const std::exception&) {
      return finish(400, R"({"error":"bad request"})");
    }
    if (action.status != 200) return finish(action.status, R"({"error":"scripted"})");

    const auto modality = parse_modality(call.modality);
    if (!modality || call.input.empty()) return finish(400, R"({"error":"bad modality or input"})");
    std::vector<float> v;
    try {
      v = *modality == Modality::Protein ? impl_->protein.compute(call.input)
                                         : impl_->text.compute(call.input);
    } catch (const Error&) {
      return finish(422, R"({"error":"cannot embed"})");
    }
    if (action.dim) v.resize(*action.dim, 0.0f);
    nlohmann::json out{{"dim", v.size()}, {"vector", v}};
    finish(200, out.dump());
  });
}

MockEmbeddingServer::~MockEmbeddingServer() { stop(); }

void MockEmbeddingServer::start(int port) {
  if (thread_.joinable()) return;
  if (port == 0) {
    port_ = impl_->server.bind_to_any_port("127.0.0.1");
  } else {
    if (!impl_->server.bind_to_port("127.0.0.1", port)) throw Error(Errc::Http, "cannot bind port");
    port_ = port;
  }
  if (port_ <= 0) throw Error(Errc::Http, "mock server could not bind");
  thread_ = std::thread([this] { impl_->server.listen_after_bind(); });
  impl_->server.wait_until_ready();
}

void MockEmbeddingServer::stop() {
  if (!thread_.joinable()) return;
  impl_->server.stop();
  thread_.join();
}

std::string MockEmbeddingServer::endpoint() const {
  return "http://127.0.0.1:" + std::to_string(port_);
}

void MockEmbeddingServer::script(std::vector<Scripted> responses) {
  std::lock_guard lock(impl_->mutex);
  impl_->script.assign(responses.begin(), responses.end());
}

std::vector<MockEmbeddingServer::Call> MockEmbeddingServer::calls() const {
  std::lock_guard lock(impl_->mutex);
  return impl_->calls;
}

void MockEmbeddingServer::clear_calls() {
  std::lock_guard lock(impl_->mutex);
  impl_->calls.clear();
}

}  // namespace nanopro
