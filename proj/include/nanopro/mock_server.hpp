#pragma once

#include <deque>
#include <memory>
#include <mutex>
#include <optional>
#include <string>
#include <thread>
#include <vector>

namespace nanopro {

// Local stand-in for a remote encoder service. Serves POST /embed with the
// synthetic providers; responses can be scripted per call and every call is
// logged.
class MockEmbeddingServer {
 public:
  struct Scripted {
    int status = 200;
    std::optional<std::size_t> dim;  // override the vector length on success
  };
  struct Call {
    std::string modality;
    std::string input;
    int status = 0;
  };

  explicit MockEmbeddingServer(std::uint64_t seed = 0);
  ~MockEmbeddingServer();
  MockEmbeddingServer(const MockEmbeddingServer&) = delete;
  MockEmbeddingServer& operator=(const MockEmbeddingServer&) = delete;

  // Binds 127.0.0.1 on a free port (or `port` when nonzero).
  void start(int port = 0);
  void stop();
  int port() const { return port_; }
  std::string endpoint() const;

  // Consumed one per request, then plain 200s.
  void script(std::vector<Scripted> responses);
  std::vector<Call> calls() const;
  void clear_calls();

 private:
  struct Impl;
  std::unique_ptr<Impl> impl_;
  int port_ = 0;
  std::thread thread_;
};

}  // namespace nanopro
