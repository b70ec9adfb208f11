#pragma once

#include <arpa/inet.h>
#include <netdb.h>
#include <netinet/in.h>
#include <netinet/tcp.h>
#include <poll.h>
#include <sys/socket.h>
#include <unistd.h>

#include <array>
#include <atomic>
#include <cerrno>
#include <cmath>
#include <cstring>
#include <list>
#include <memory>
#include <mutex>
#include <optional>
#include <stdexcept>
#include <string>
#include <string_view>
#include <thread>
#include <vector>

#include <nlohmann/json.hpp>

#include "crowdnav/mdp.hpp"
#include "crowdnav/policy_net.hpp"
#include "crowdnav/rng.hpp"
#include "crowdnav/sim_core.hpp"
#include "crowdnav/trainer.hpp"

namespace crowdnav {

inline constexpr std::size_t kMaxRequestBytes = std::size_t{1} << 20;

struct InferenceRequest {
  /// kScanFrames rows of n_beams ranges in meters, oldest first.
  std::vector<std::vector<double>> scan;
  std::array<double, 2> goal{};
  std::array<double, 2> vel{};
  bool deterministic = true;
};

/// Error codes: parse, bad_request, beam_mismatch, too_long, internal.
class RequestError : public std::runtime_error {
 public:
  RequestError(std::string code, const std::string& msg) : std::runtime_error(msg), code_(std::move(code)) {}
  const std::string& code() const { return code_; }

 private:
  std::string code_;
};

inline nlohmann::json to_json(const InferenceRequest& r) {
  return {{"scan", r.scan}, {"goal", r.goal}, {"vel", r.vel}, {"deterministic", r.deterministic}};
}

/// Safe for arbitrary input: invalid UTF-8 in messages is replaced.
inline std::string dump_line(const nlohmann::json& j) {
  return j.dump(-1, ' ', false, nlohmann::json::error_handler_t::replace);
}

inline std::string error_line(const std::string& code, const std::string& msg) {
  return dump_line({{"error", code}, {"msg", msg}});
}

namespace detail {

inline double finite_number(const nlohmann::json& j, const char* what) {
  if (!j.is_number()) throw RequestError("bad_request", std::string(what) + " must be a number");
  const double x = j.get<double>();
  if (!std::isfinite(x)) throw RequestError("bad_request", std::string(what) + " must be finite");
  return x;
}

inline std::array<double, 2> pair_field(const nlohmann::json& j, const char* what) {
  if (!j.is_array() || j.size() != 2) throw RequestError("bad_request", std::string(what) + " must be a 2-element array");
  return {finite_number(j[0], what), finite_number(j[1], what)};
}

}  // namespace detail

inline InferenceRequest parse_request(const nlohmann::json& j) {
  if (!j.is_object()) throw RequestError("bad_request", "request must be a JSON object");
  for (const auto& [key, _] : j.items())
    if (key != "scan" && key != "goal" && key != "vel" && key != "deterministic")
      throw RequestError("bad_request", "unknown field '" + key + "'");
  for (const char* key : {"scan", "goal", "vel"})
    if (!j.contains(key)) throw RequestError("bad_request", std::string("missing field '") + key + "'");
  InferenceRequest r;
  const auto& scan = j["scan"];
  if (!scan.is_array() || scan.size() != static_cast<std::size_t>(kScanFrames))
    throw RequestError("bad_request", "scan must be an array of " + std::to_string(kScanFrames) + " frames");
  for (const auto& frame : scan) {
    if (!frame.is_array()) throw RequestError("bad_request", "scan frames must be arrays");
    std::vector<double> row;
    row.reserve(frame.size());
    for (const auto& x : frame) row.push_back(detail::finite_number(x, "scan"));
    r.scan.push_back(std::move(row));
  }
  r.goal = detail::pair_field(j["goal"], "goal");
  r.vel = detail::pair_field(j["vel"], "vel");
  if (j.contains("deterministic")) {
    if (!j["deterministic"].is_boolean()) throw RequestError("bad_request", "deterministic must be a boolean");
    r.deterministic = j["deterministic"].get<bool>();
  }
  return r;
}

/// Per-connection state: the rng used for sampled responses.
struct Session {
  Rng rng{0};
};

/// Frozen policy plus normalizer. All methods are const and safe to call
/// from many threads at once.
class InferenceEngine {
 public:
  InferenceEngine(PolicyParams<float> policy, NetConfig net, RunningNormalizer normalizer)
      : policy_(std::move(policy)), net_(net), normalizer_(std::move(normalizer)) {
    net_.validate();
    require(normalizer_.dim() == static_cast<std::size_t>(net_.obs_dim()), "normalizer does not match the network input");
  }

  static InferenceEngine from_checkpoint(const LoadedCheckpoint& ckpt) {
    return InferenceEngine(ckpt.state.model.policy, ckpt.config.net, ckpt.state.normalizer);
  }

  int n_beams() const { return net_.n_beams; }

  /// Clamped action. `rng` is only used when the request is not deterministic.
  Action infer(const InferenceRequest& req, Rng& rng) const {
    const auto B = static_cast<std::size_t>(net_.n_beams);
    if (req.scan.size() != static_cast<std::size_t>(kScanFrames))
      throw RequestError("bad_request", "scan must hold " + std::to_string(kScanFrames) + " frames");
    for (const auto& frame : req.scan)
      if (frame.size() != B)
        throw RequestError("beam_mismatch",
                           "scan frame has " + std::to_string(frame.size()) + " beams, policy expects " + std::to_string(B));
    Observation obs;
    obs.scan_stack.reserve(kScanFrames * B);
    for (const auto& frame : req.scan)
      for (double x : frame) obs.scan_stack.push_back(static_cast<float>(x));
    obs.goal_polar = req.goal;
    obs.velocity = req.vel;
    const std::vector<float> raw = obs.flat();
    Matrix<float> x(1, static_cast<Eigen::Index>(raw.size()));
    normalizer_.apply<float, float>(raw, std::span<float>(x.data(), raw.size()));
    const Matrix<float> mean = policy_forward(policy_, net_, x);
    const std::array<double, 2> mu{mean(0, 0), mean(0, 1)};
    if (req.deterministic) return clamp_action({mu[0], mu[1]});
    const std::array<double, 2> log_std{policy_.log_std(0, 0), policy_.log_std(0, 1)};
    return sample_action(mu, log_std, rng).action;
  }

  /// One request line in, one response line out (without newline). Never throws.
  std::string handle_line(std::string_view line, Session& session) const {
    try {
      if (line.size() > kMaxRequestBytes) return error_line("too_long", "request exceeds 1 MiB");
      nlohmann::json j = nlohmann::json::parse(line, nullptr, false);
      if (j.is_discarded()) return error_line("parse", "request is not valid JSON");
      if (j.is_object() && j.size() == 1 && j.contains("seed")) {
        if (!j["seed"].is_number_unsigned()) return error_line("bad_request", "seed must be a non-negative integer");
        const auto seed = j["seed"].get<std::uint64_t>();
        session.rng = Rng(seed);
        return dump_line({{"ok", true}, {"seed", seed}, {"n_beams", net_.n_beams}});
      }
      const Action a = infer(parse_request(j), session.rng);
      return dump_line({{"v", a.v}, {"w", a.w}});
    } catch (const RequestError& e) {
      return error_line(e.code(), e.what());
    } catch (const std::exception& e) {
      return error_line("internal", e.what());
    } catch (...) {
      return error_line("internal", "unknown failure");
    }
  }

 private:
  PolicyParams<float> policy_;
  NetConfig net_;
  RunningNormalizer normalizer_;
};

namespace detail {

inline bool send_all(int fd, std::string_view data) {
  while (!data.empty()) {
    const ssize_t n = ::send(fd, data.data(), data.size(), MSG_NOSIGNAL);
    if (n < 0) {
      if (errno == EINTR) continue;
      return false;
    }
    data.remove_prefix(static_cast<std::size_t>(n));
  }
  return true;
}

/// Splits a byte stream into lines. Lines longer than `limit` are reported
/// once as overlong and their remaining bytes dropped.
class LineSplitter {
 public:
  explicit LineSplitter(std::size_t limit) : limit_(limit) {}

  /// Calls on_line(line, overlong) for every completed line in `chunk`.
  template <typename F>
  void feed(std::string_view chunk, F&& on_line) {
    while (!chunk.empty()) {
      const auto nl = chunk.find('\n');
      const std::string_view part = chunk.substr(0, nl);
      if (!overlong_) {
        if (buffer_.size() + part.size() > limit_) {
          overlong_ = true;
          buffer_.clear();
        } else {
          buffer_.append(part);
        }
      }
      if (nl == std::string_view::npos) return;
      if (!buffer_.empty() && buffer_.back() == '\r') buffer_.pop_back();
      on_line(std::string_view(buffer_), overlong_);
      buffer_.clear();
      overlong_ = false;
      chunk.remove_prefix(nl + 1);
    }
  }

 private:
  std::size_t limit_;
  std::string buffer_;
  bool overlong_ = false;
};

}  // namespace detail

/// Newline-delimited JSON over TCP, one thread per connection.
class PolicyServer {
 public:
  PolicyServer(std::shared_ptr<const InferenceEngine> engine, std::string address, std::uint16_t port)
      : engine_(std::move(engine)), address_(std::move(address)), port_(port) {}
  PolicyServer(const PolicyServer&) = delete;
  PolicyServer& operator=(const PolicyServer&) = delete;
  ~PolicyServer() { stop(); }

  /// Binds and listens; returns the bound port (useful with port 0).
  std::uint16_t bind() {
    addrinfo hints{};
    hints.ai_family = AF_INET;
    hints.ai_socktype = SOCK_STREAM;
    hints.ai_flags = AI_PASSIVE;
    addrinfo* res = nullptr;
    const std::string service = std::to_string(port_);
    if (int rc = ::getaddrinfo(address_.empty() ? nullptr : address_.c_str(), service.c_str(), &hints, &res); rc != 0)
      throw std::runtime_error("cannot resolve '" + address_ + "': " + ::gai_strerror(rc));
    std::unique_ptr<addrinfo, decltype(&::freeaddrinfo)> guard(res, &::freeaddrinfo);
    listen_fd_ = ::socket(res->ai_family, res->ai_socktype, res->ai_protocol);
    if (listen_fd_ < 0) throw std::runtime_error(std::string("socket: ") + std::strerror(errno));
    int one = 1;
    ::setsockopt(listen_fd_, SOL_SOCKET, SO_REUSEADDR, &one, sizeof one);
    if (::bind(listen_fd_, res->ai_addr, res->ai_addrlen) != 0 || ::listen(listen_fd_, 64) != 0) {
      const std::string err = std::strerror(errno);
      ::close(listen_fd_);
      listen_fd_ = -1;
      throw std::runtime_error("cannot listen on " + address_ + ":" + service + ": " + err);
    }
    sockaddr_in bound{};
    socklen_t len = sizeof bound;
    ::getsockname(listen_fd_, reinterpret_cast<sockaddr*>(&bound), &len);
    port_ = ntohs(bound.sin_port);
    return port_;
  }

  /// Accept loop; returns after stop().
  void run() {
    if (listen_fd_ < 0) bind();
    while (!stopping_) {
      pollfd p{listen_fd_, POLLIN, 0};
      const int rc = ::poll(&p, 1, 100);
      if (rc <= 0) continue;
      const int fd = ::accept(listen_fd_, nullptr, nullptr);
      if (fd < 0) continue;
      int one = 1;
      ::setsockopt(fd, IPPROTO_TCP, TCP_NODELAY, &one, sizeof one);
      std::lock_guard lock(mu_);
      reap_finished();
      if (stopping_) {
        ::close(fd);
        break;
      }
      auto& conn = connections_.emplace_back();
      conn.fd = fd;
      conn.thread = std::thread([this, &conn] { serve_connection(conn); });
    }
  }

  /// Runs the accept loop on a background thread.
  void start() {
    if (listen_fd_ < 0) bind();
    acceptor_ = std::thread([this] { run(); });
  }

  void stop() {
    stopping_ = true;
    if (acceptor_.joinable()) acceptor_.join();
    std::list<Connection> conns;
    {
      std::lock_guard lock(mu_);
      for (auto& c : connections_)
        if (c.fd >= 0) ::shutdown(c.fd, SHUT_RDWR);
      conns.swap(connections_);
    }
    for (auto& c : conns)
      if (c.thread.joinable()) c.thread.join();
    if (listen_fd_ >= 0) {
      ::close(listen_fd_);
      listen_fd_ = -1;
    }
  }

  std::uint16_t port() const { return port_; }

 private:
  struct Connection {
    int fd = -1;
    std::thread thread;
    bool done = false;
  };

  /// Joins connection threads that have finished. Caller holds mu_.
  void reap_finished() {
    for (auto it = connections_.begin(); it != connections_.end();) {
      if (it->done) {
        it->thread.join();
        it = connections_.erase(it);
      } else {
        ++it;
      }
    }
  }

  void serve_connection(Connection& conn) {
    const int fd = conn.fd;
    Session session;
    detail::LineSplitter splitter(kMaxRequestBytes);
    std::vector<char> buf(64 * 1024);
    bool open = true;
    while (open && !stopping_) {
      const ssize_t n = ::recv(fd, buf.data(), buf.size(), 0);
      if (n < 0 && errno == EINTR) continue;
      if (n <= 0) break;
      splitter.feed(std::string_view(buf.data(), static_cast<std::size_t>(n)), [&](std::string_view line, bool overlong) {
        if (!open) return;
        const std::string reply =
            (overlong ? error_line("too_long", "request exceeds 1 MiB") : engine_->handle_line(line, session)) + "\n";
        open = detail::send_all(fd, reply);
      });
    }
    std::lock_guard lock(mu_);
    ::close(fd);
    conn.fd = -1;
    conn.done = true;
  }

  std::shared_ptr<const InferenceEngine> engine_;
  std::string address_;
  std::uint16_t port_;
  int listen_fd_ = -1;
  std::atomic<bool> stopping_{false};
  std::thread acceptor_;
  std::mutex mu_;
  std::list<Connection> connections_;
};

/// Blocking line client for the inference protocol.
class PolicyClient {
 public:
  PolicyClient(const std::string& address, std::uint16_t port) {
    addrinfo hints{};
    hints.ai_family = AF_INET;
    hints.ai_socktype = SOCK_STREAM;
    addrinfo* res = nullptr;
    if (int rc = ::getaddrinfo(address.c_str(), std::to_string(port).c_str(), &hints, &res); rc != 0)
      throw std::runtime_error("cannot resolve '" + address + "': " + ::gai_strerror(rc));
    std::unique_ptr<addrinfo, decltype(&::freeaddrinfo)> guard(res, &::freeaddrinfo);
    fd_ = ::socket(res->ai_family, res->ai_socktype, res->ai_protocol);
    if (fd_ < 0 || ::connect(fd_, res->ai_addr, res->ai_addrlen) != 0) {
      const std::string err = std::strerror(errno);
      if (fd_ >= 0) ::close(fd_);
      throw std::runtime_error("cannot connect to " + address + ":" + std::to_string(port) + ": " + err);
    }
    int one = 1;
    ::setsockopt(fd_, IPPROTO_TCP, TCP_NODELAY, &one, sizeof one);
  }
  PolicyClient(const PolicyClient&) = delete;
  PolicyClient& operator=(const PolicyClient&) = delete;
  ~PolicyClient() {
    if (fd_ >= 0) ::close(fd_);
  }

  void send_raw(std::string_view bytes) {
    if (!detail::send_all(fd_, bytes)) throw std::runtime_error("send failed");
  }

  /// Next response line; throws if the server closed the connection.
  std::string read_line() {
    for (;;) {
      if (const auto nl = pending_.find('\n'); nl != std::string::npos) {
        std::string line = pending_.substr(0, nl);
        pending_.erase(0, nl + 1);
        return line;
      }
      char buf[4096];
      const ssize_t n = ::recv(fd_, buf, sizeof buf, 0);
      if (n < 0 && errno == EINTR) continue;
      if (n <= 0) throw std::runtime_error("connection closed");
      pending_.append(buf, static_cast<std::size_t>(n));
    }
  }

  std::string request(std::string_view line) {
    std::string msg(line);
    msg.push_back('\n');
    send_raw(msg);
    return read_line();
  }

 private:
  int fd_ = -1;
  std::string pending_;
};

}  // namespace crowdnav
