#pragma once

#include <atomic>
#include <cstdint>
#include <memory>
#include <mutex>
#include <stdexcept>
#include <string>
#include <thread>
#include <vector>

#include "marlab/rollout.hpp"

namespace marlab {

/// Transport failures after the retry budget is exhausted (connect, send,
/// receive, timeout).
struct TransportError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

/// Structurally invalid responses (bad JSON, missing fields, id mismatch).
struct ProtocolError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

/// Serves one frozen agent's policy snapshot over a stream socket. The wire
/// format is UTF-8 lines of JSON, one request per line:
///   {"id": <u64>, "agent": <int>, "obs": <int>, "mode": "sample",
///    "seed": <u64>}
///   {"id": <u64>, "agent": <int>, "obs": <int>, "mode": "distribution"}
/// answered by
///   {"id": ..., "version": <u64>, "action": <int>, "logp": <double>}
///   {"id": ..., "version": <u64>, "probs": [<double>...]}
/// Sampling happens on the server with the client-supplied seed, through
/// the same code path the in-process handle uses. Requests never mutate the
/// snapshot; snapshot replacement is atomic and bumps the version tag.
struct ServerOptions {
  std::string host = "127.0.0.1";
  int port = 0;  // 0 picks a free port
};

class PolicyServer {
 public:
  PolicyServer(int agent_id, TabularPolicy snapshot,
               ServerOptions options = ServerOptions());
  ~PolicyServer();

  PolicyServer(const PolicyServer&) = delete;
  PolicyServer& operator=(const PolicyServer&) = delete;

  void stop();
  int port() const { return port_; }
  const std::string& host() const { return host_; }
  std::string endpoint() const { return host_ + ":" + std::to_string(port_); }
  int agent_id() const { return agent_id_; }

  /// Atomically replaces the served snapshot; returns the new version tag.
  std::uint64_t swap_snapshot(TabularPolicy policy);
  std::shared_ptr<const PolicySnapshot> snapshot() const;
  std::uint64_t version() const;

 private:
  void accept_loop();
  void serve_connection(int fd);
  std::string handle_line(const std::string& line) const;

  int agent_id_;
  std::string host_;
  int port_ = 0;
  int listen_fd_ = -1;
  std::atomic<bool> running_{false};
  mutable std::mutex snapshot_mutex_;
  std::shared_ptr<const PolicySnapshot> snapshot_;
  std::uint64_t next_version_ = 1;
  std::thread accept_thread_;
  std::mutex conn_mutex_;
  std::vector<int> conn_fds_;
  std::vector<std::thread> conn_threads_;
};

/// Client for PolicyServer. Blocking line protocol with a fixed timeout and
/// retry budget; reconnects on failure. Safe for concurrent use (requests
/// are serialized on the connection).
struct ClientOptions {
  int timeout_ms = 5000;
  int retries = 3;
};

class PolicyClient {
 public:
  PolicyClient(std::string host, int port, int agent_id,
               ClientOptions options = ClientOptions());
  ~PolicyClient();

  PolicyClient(const PolicyClient&) = delete;
  PolicyClient& operator=(const PolicyClient&) = delete;

  /// Sampled action and its log-probability under the served snapshot;
  /// identical (obs, seed, version) triples give identical responses.
  SampleResult query_action(int obs, std::uint64_t seed);
  Vector query_distribution(int obs);
  std::uint64_t last_version() const { return last_version_; }

 private:
  void ensure_connected();
  void close_socket();
  std::string exchange(const std::string& request_line);

  std::string host_;
  int port_;
  int agent_id_;
  ClientOptions options_;
  int fd_ = -1;
  std::uint64_t next_id_ = 1;
  std::uint64_t last_version_ = 0;
  std::string read_buffer_;
  std::mutex mutex_;
};

class RemoteAgentHandle : public AgentHandle {
 public:
  RemoteAgentHandle(std::string host, int port, int agent_id,
                    ClientOptions options = ClientOptions())
      : client_(std::move(host), port, agent_id, options) {}

  SampleResult sample(int state, std::uint64_t seed) override {
    return client_.query_action(state, seed);
  }
  Vector distribution(int state) override {
    return client_.query_distribution(state);
  }
  PolicyClient& client() { return client_; }

 private:
  PolicyClient client_;
};

}  // namespace marlab
