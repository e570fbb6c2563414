#include "marlab/service.hpp"

#include <arpa/inet.h>
#include <netinet/in.h>
#include <netinet/tcp.h>
#include <poll.h>
#include <sys/socket.h>
#include <unistd.h>

#include <algorithm>
#include <cerrno>
#include <cstring>

#include <json.hpp>

namespace marlab {

namespace {

using nlohmann::json;

void set_timeouts(int fd, int timeout_ms) {
  timeval tv;
  tv.tv_sec = timeout_ms / 1000;
  tv.tv_usec = (timeout_ms % 1000) * 1000;
  setsockopt(fd, SOL_SOCKET, SO_RCVTIMEO, &tv, sizeof(tv));
  setsockopt(fd, SOL_SOCKET, SO_SNDTIMEO, &tv, sizeof(tv));
}

void set_nodelay(int fd) {
  int one = 1;
  setsockopt(fd, IPPROTO_TCP, TCP_NODELAY, &one, sizeof(one));
}

bool send_all(int fd, const std::string& data) {
  size_t sent = 0;
  while (sent < data.size()) {
    const ssize_t n = ::send(fd, data.data() + sent, data.size() - sent,
                             MSG_NOSIGNAL);
    if (n <= 0) return false;
    sent += static_cast<size_t>(n);
  }
  return true;
}

}  // namespace

PolicyServer::PolicyServer(int agent_id, TabularPolicy snapshot,
                           ServerOptions options)
    : agent_id_(agent_id), host_(options.host) {
  snapshot_ = PolicySnapshot::make(std::move(snapshot), next_version_++);

  listen_fd_ = ::socket(AF_INET, SOCK_STREAM, 0);
  if (listen_fd_ < 0) throw std::runtime_error("server socket() failed");
  int one = 1;
  setsockopt(listen_fd_, SOL_SOCKET, SO_REUSEADDR, &one, sizeof(one));

  sockaddr_in addr{};
  addr.sin_family = AF_INET;
  addr.sin_port = htons(static_cast<uint16_t>(options.port));
  if (inet_pton(AF_INET, host_.c_str(), &addr.sin_addr) != 1) {
    ::close(listen_fd_);
    throw std::runtime_error("bad server host: " + host_);
  }
  if (::bind(listen_fd_, reinterpret_cast<sockaddr*>(&addr), sizeof(addr)) <
      0) {
    ::close(listen_fd_);
    throw std::runtime_error("server bind failed: " +
                             std::string(std::strerror(errno)));
  }
  if (::listen(listen_fd_, 16) < 0) {
    ::close(listen_fd_);
    throw std::runtime_error("server listen failed");
  }
  sockaddr_in bound{};
  socklen_t len = sizeof(bound);
  getsockname(listen_fd_, reinterpret_cast<sockaddr*>(&bound), &len);
  port_ = ntohs(bound.sin_port);

  running_ = true;
  accept_thread_ = std::thread([this] { accept_loop(); });
}

PolicyServer::~PolicyServer() { stop(); }

void PolicyServer::stop() {
  if (!running_.exchange(false)) return;
  ::shutdown(listen_fd_, SHUT_RDWR);
  ::close(listen_fd_);
  if (accept_thread_.joinable()) accept_thread_.join();
  {
    std::lock_guard<std::mutex> lock(conn_mutex_);
    for (int fd : conn_fds_) {
      ::shutdown(fd, SHUT_RDWR);
      ::close(fd);
    }
    conn_fds_.clear();
  }
  std::vector<std::thread> threads;
  {
    std::lock_guard<std::mutex> lock(conn_mutex_);
    threads.swap(conn_threads_);
  }
  for (std::thread& t : threads)
    if (t.joinable()) t.join();
}

std::uint64_t PolicyServer::swap_snapshot(TabularPolicy policy) {
  std::lock_guard<std::mutex> lock(snapshot_mutex_);
  const std::uint64_t version = next_version_++;
  snapshot_ = PolicySnapshot::make(std::move(policy), version);
  return version;
}

std::shared_ptr<const PolicySnapshot> PolicyServer::snapshot() const {
  std::lock_guard<std::mutex> lock(snapshot_mutex_);
  return snapshot_;
}

std::uint64_t PolicyServer::version() const { return snapshot()->version; }

void PolicyServer::accept_loop() {
  while (running_) {
    sockaddr_in peer{};
    socklen_t len = sizeof(peer);
    const int fd =
        ::accept(listen_fd_, reinterpret_cast<sockaddr*>(&peer), &len);
    if (fd < 0) {
      if (!running_) break;
      continue;
    }
    set_nodelay(fd);
    std::lock_guard<std::mutex> lock(conn_mutex_);
    if (!running_) {
      ::close(fd);
      break;
    }
    conn_fds_.push_back(fd);
    conn_threads_.emplace_back([this, fd] { serve_connection(fd); });
  }
}

void PolicyServer::serve_connection(int fd) {
  std::string buffer;
  char chunk[4096];
  while (running_) {
    const ssize_t n = ::recv(fd, chunk, sizeof(chunk), 0);
    if (n <= 0) break;
    buffer.append(chunk, static_cast<size_t>(n));
    size_t pos;
    while ((pos = buffer.find('\n')) != std::string::npos) {
      const std::string line = buffer.substr(0, pos);
      buffer.erase(0, pos + 1);
      if (line.empty()) continue;
      const std::string response = handle_line(line);
      if (!send_all(fd, response + "\n")) break;
    }
  }
  std::lock_guard<std::mutex> lock(conn_mutex_);
  auto it = std::find(conn_fds_.begin(), conn_fds_.end(), fd);
  if (it != conn_fds_.end()) {
    conn_fds_.erase(it);
    ::close(fd);
  }
}

std::string PolicyServer::handle_line(const std::string& line) const {
  json response;
  std::uint64_t id = 0;
  try {
    const json request = json::parse(line);
    id = request.at("id").get<std::uint64_t>();
    const int agent = request.at("agent").get<int>();
    if (agent != agent_id_)
      throw std::invalid_argument("request for agent " +
                                  std::to_string(agent) + " on agent " +
                                  std::to_string(agent_id_) + " service");
    const int obs = request.at("obs").get<int>();
    const std::string mode = request.at("mode").get<std::string>();

    std::shared_ptr<const PolicySnapshot> snap;
    {
      std::lock_guard<std::mutex> lock(snapshot_mutex_);
      snap = snapshot_;
    }
    response["id"] = id;
    response["version"] = snap->version;
    if (mode == "sample") {
      const std::uint64_t seed = request.at("seed").get<std::uint64_t>();
      const SampleResult r = sample_from_snapshot(*snap, obs, seed);
      response["action"] = r.action;
      response["logp"] = r.log_prob;
    } else if (mode == "distribution") {
      if (request.contains("seed"))
        throw std::invalid_argument(
            "seed is only valid in sample mode");
      std::vector<double> probs(snap->probs.cols());
      if (obs < 0 || obs >= snap->probs.rows())
        throw std::invalid_argument("observation index out of range");
      for (int a = 0; a < snap->probs.cols(); ++a)
        probs[a] = snap->probs(obs, a);
      response["probs"] = probs;
    } else {
      throw std::invalid_argument("unknown mode: " + mode);
    }
  } catch (const std::exception& e) {
    response = json{{"id", id}, {"error", e.what()}};
  }
  return response.dump();
}

PolicyClient::PolicyClient(std::string host, int port, int agent_id,
                           ClientOptions options)
    : host_(std::move(host)),
      port_(port),
      agent_id_(agent_id),
      options_(options) {}

PolicyClient::~PolicyClient() { close_socket(); }

void PolicyClient::close_socket() {
  if (fd_ >= 0) {
    ::close(fd_);
    fd_ = -1;
  }
  read_buffer_.clear();
}

void PolicyClient::ensure_connected() {
  if (fd_ >= 0) return;
  const int fd = ::socket(AF_INET, SOCK_STREAM, 0);
  if (fd < 0) throw TransportError("client socket() failed");
  set_timeouts(fd, options_.timeout_ms);
  sockaddr_in addr{};
  addr.sin_family = AF_INET;
  addr.sin_port = htons(static_cast<uint16_t>(port_));
  if (inet_pton(AF_INET, host_.c_str(), &addr.sin_addr) != 1) {
    ::close(fd);
    throw TransportError("bad host: " + host_);
  }
  if (::connect(fd, reinterpret_cast<sockaddr*>(&addr), sizeof(addr)) < 0) {
    ::close(fd);
    throw TransportError("connect to " + host_ + ":" + std::to_string(port_) +
                         " failed: " + std::strerror(errno));
  }
  set_nodelay(fd);
  fd_ = fd;
}

std::string PolicyClient::exchange(const std::string& request_line) {
  std::string last_error;
  for (int attempt = 0; attempt <= options_.retries; ++attempt) {
    try {
      ensure_connected();
      if (!send_all(fd_, request_line + "\n"))
        throw TransportError("send failed");
      size_t pos;
      while ((pos = read_buffer_.find('\n')) == std::string::npos) {
        char chunk[4096];
        const ssize_t n = ::recv(fd_, chunk, sizeof(chunk), 0);
        if (n <= 0) throw TransportError("receive failed or timed out");
        read_buffer_.append(chunk, static_cast<size_t>(n));
      }
      const std::string line = read_buffer_.substr(0, pos);
      read_buffer_.erase(0, pos + 1);
      return line;
    } catch (const TransportError& e) {
      last_error = e.what();
      close_socket();
    }
  }
  throw TransportError("request failed after " +
                       std::to_string(options_.retries + 1) + " attempts: " +
                       last_error);
}

SampleResult PolicyClient::query_action(int obs, std::uint64_t seed) {
  std::lock_guard<std::mutex> lock(mutex_);
  json request{{"id", next_id_++},
               {"agent", agent_id_},
               {"obs", obs},
               {"mode", "sample"},
               {"seed", seed}};
  const std::string line = exchange(request.dump());
  try {
    const json response = json::parse(line);
    if (response.contains("error"))
      throw ProtocolError("server error: " +
                          response["error"].get<std::string>());
    if (response.at("id").get<std::uint64_t>() !=
        request["id"].get<std::uint64_t>())
      throw ProtocolError("response id mismatch");
    last_version_ = response.at("version").get<std::uint64_t>();
    return {response.at("action").get<int>(),
            response.at("logp").get<double>()};
  } catch (const json::exception& e) {
    throw ProtocolError(std::string("malformed response: ") + e.what());
  }
}

Vector PolicyClient::query_distribution(int obs) {
  std::lock_guard<std::mutex> lock(mutex_);
  json request{{"id", next_id_++},
               {"agent", agent_id_},
               {"obs", obs},
               {"mode", "distribution"}};
  const std::string line = exchange(request.dump());
  try {
    const json response = json::parse(line);
    if (response.contains("error"))
      throw ProtocolError("server error: " +
                          response["error"].get<std::string>());
    if (response.at("id").get<std::uint64_t>() !=
        request["id"].get<std::uint64_t>())
      throw ProtocolError("response id mismatch");
    last_version_ = response.at("version").get<std::uint64_t>();
    const auto& probs = response.at("probs");
    Vector out(probs.size());
    for (size_t i = 0; i < probs.size(); ++i) out[i] = probs[i].get<double>();
    return out;
  } catch (const json::exception& e) {
    throw ProtocolError(std::string("malformed response: ") + e.what());
  }
}

}  // namespace marlab
