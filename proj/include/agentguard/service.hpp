#pragma once

// Gating sidecar: newline-delimited JSON score requests over stdio or a
// local TCP port, per-session streaming state, and a block audit log.

#include <arpa/inet.h>
#include <netinet/in.h>
#include <netinet/tcp.h>
#include <sys/socket.h>
#include <unistd.h>

#include <atomic>
#include <chrono>
#include <cstdint>
#include <ctime>
#include <functional>
#include <iostream>
#include <memory>
#include <mutex>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <thread>
#include <unordered_map>
#include <utility>
#include <vector>

#include "json.hpp"

#include "agentguard/detector.hpp"
#include "agentguard/error.hpp"
#include "agentguard/features.hpp"
#include "agentguard/metrics.hpp"
#include "agentguard/policy.hpp"
#include "agentguard/trace.hpp"

namespace agentguard {

struct ServiceConfig {
  std::chrono::milliseconds idle_timeout{std::chrono::minutes(10)};
  bool debug = false;  // attach named features to every response
};

struct ScoreRequest {
  std::string session_id;
  Turn turn;
  bool debug = false;
};

struct ScoreResponse {
  std::string session_id;
  std::uint32_t turn_index = 0;
  double risk = 0.0;
  Verdict decision = Verdict::allow;
  std::int64_t latency_us = 0;
  std::optional<FeatureVector> features;
};

inline ScoreRequest parse_request(const nlohmann::json& j) {
  if (!j.is_object()) throw Error("malformed-request", "request must be a JSON object");
  if (!j.contains("session_id") || !j.at("session_id").is_string()) {
    throw Error("malformed-request", "missing session_id");
  }
  if (!j.contains("turn") || !j.at("turn").is_object()) throw Error("malformed-request", "missing turn");
  ScoreRequest r;
  r.session_id = j.at("session_id").get<std::string>();
  try {
    r.turn = turn_from_json(j.at("turn"));
  } catch (const nlohmann::json::exception& e) {
    throw Error("malformed-request", e.what());
  }
  r.debug = j.value("debug", false);
  return r;
}

inline nlohmann::ordered_json request_to_json(const std::string& session_id, const Turn& turn) {
  nlohmann::ordered_json j;
  j["session_id"] = session_id;
  j["turn"] = turn_to_json(turn);
  return j;
}

inline nlohmann::ordered_json response_to_json(const ScoreResponse& r) {
  nlohmann::ordered_json j;
  j["session_id"] = r.session_id;
  j["turn_index"] = r.turn_index;
  j["risk"] = r.risk;
  j["decision"] = std::string(verdict_name(r.decision));
  j["latency_us"] = r.latency_us;
  if (r.features) {
    nlohmann::ordered_json f;
    for (std::size_t i = 0; i < kFeatureCount; ++i) f[std::string(kFeatureNames[i])] = (*r.features)[i];
    j["features"] = std::move(f);
  }
  return j;
}

inline nlohmann::ordered_json error_to_json(std::string_view code, std::string_view detail,
                                            std::optional<std::string_view> line = std::nullopt) {
  nlohmann::ordered_json j;
  j["error"] = std::string(code);
  j["detail"] = std::string(detail);
  if (line) j["line"] = std::string(*line);
  return j;
}

// ISO-8601 UTC with milliseconds.
inline std::string utc_timestamp(std::chrono::system_clock::time_point tp = std::chrono::system_clock::now()) {
  const auto ms = std::chrono::duration_cast<std::chrono::milliseconds>(tp.time_since_epoch()).count();
  const std::time_t secs = static_cast<std::time_t>(ms / 1000);
  std::tm tm{};
  gmtime_r(&secs, &tm);
  char buf[40];
  const std::size_t n = std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%S", &tm);
  std::snprintf(buf + n, sizeof buf - n, ".%03dZ", static_cast<int>(ms % 1000));
  return buf;
}

// Append-only JSON lines, one per block decision.
class AuditLog {
 public:
  explicit AuditLog(std::ostream* out = nullptr) : out_(out) {}

  void record(const ScoreResponse& r) {
    nlohmann::ordered_json j;
    j["timestamp"] = utc_timestamp();
    j["session_id"] = r.session_id;
    j["turn_index"] = r.turn_index;
    j["risk"] = r.risk;
    j["decision"] = std::string(verdict_name(r.decision));
    std::lock_guard lock(mu_);
    ++records_;
    if (out_) {
      *out_ << j.dump() << '\n';
      out_->flush();
    }
  }

  std::size_t records() const {
    std::lock_guard lock(mu_);
    return records_;
  }

 private:
  std::ostream* out_;
  mutable std::mutex mu_;
  std::size_t records_ = 0;
};

class Gateway {
 public:
  using Clock = std::chrono::steady_clock;

  Gateway(StructuredScorer scorer, Thresholds thresholds, ServiceConfig config = {}, AuditLog* audit = nullptr,
          std::function<Clock::time_point()> now = [] { return Clock::now(); })
      : scorer_(std::move(scorer)),
        thresholds_(thresholds),
        config_(config),
        audit_(audit),
        now_(std::move(now)),
        last_sweep_(now_()) {
    if (!thresholds_.valid()) throw Error("bad-thresholds", "need 0 <= tau1 <= tau2 <= 1");
    if (!scorer_.model || !scorer_.profile || !scorer_.features) throw Error("bad-config", "incomplete scorer");
  }

  ScoreResponse score(const ScoreRequest& req) {
    const auto now = now_();
    maybe_sweep(now);
    std::shared_ptr<Slot> slot = acquire(req.session_id, now);
    std::lock_guard lock(slot->mu);
    slot->last_seen = now;
    const auto t0 = Clock::now();
    const FeatureVector z = slot->extractor.update(req.turn);  // throws non-contiguous-turn untouched
    const double risk = scorer_.model->predict(z);
    const auto t1 = Clock::now();
    ScoreResponse r;
    r.session_id = req.session_id;
    r.turn_index = req.turn.index;
    r.risk = risk;
    r.decision = decide(risk, thresholds_).verdict;
    r.latency_us = std::chrono::duration_cast<std::chrono::microseconds>(t1 - t0).count();
    if (req.debug || config_.debug) r.features = z;
    if (r.decision == Verdict::block && audit_) audit_->record(r);
    return r;
  }

  // One request line in, one response line out (without the newline).
  std::string handle_line(std::string_view line) {
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(line);
    } catch (const nlohmann::json::parse_error& e) {
      return error_to_json("malformed-json", e.what(), line).dump();
    }
    try {
      const ScoreRequest req = parse_request(j);
      auto out = response_to_json(score(req));
      return out.dump();
    } catch (const Error& e) {
      auto out = error_to_json(e.code(), e.what());
      if (j.is_object() && j.contains("session_id") && j["session_id"].is_string()) {
        out["session_id"] = j["session_id"];
      }
      return out.dump();
    } catch (const nlohmann::json::exception& e) {
      return error_to_json("malformed-request", e.what()).dump();
    }
  }

  // Drops sessions idle for longer than the configured bound.
  std::size_t expire_idle() { return sweep(now_()); }

  std::size_t active_sessions() const {
    std::lock_guard lock(map_mu_);
    return sessions_.size();
  }

  const Thresholds& thresholds() const noexcept { return thresholds_; }

 private:
  struct Slot {
    explicit Slot(const StructuredScorer& s) : extractor(*s.profile, *s.features) {}
    std::mutex mu;
    FeatureExtractor extractor;
    Clock::time_point last_seen;
  };

  std::shared_ptr<Slot> acquire(const std::string& id, Clock::time_point now) {
    std::lock_guard lock(map_mu_);
    auto& slot = sessions_[id];
    if (!slot) {
      slot = std::make_shared<Slot>(scorer_);
      slot->last_seen = now;
    }
    return slot;
  }

  void maybe_sweep(Clock::time_point now) {
    {
      std::lock_guard lock(map_mu_);
      if (now - last_sweep_ < std::chrono::seconds(1)) return;
      last_sweep_ = now;
    }
    sweep(now);
  }

  std::size_t sweep(Clock::time_point now) {
    std::lock_guard lock(map_mu_);
    std::size_t dropped = 0;
    for (auto it = sessions_.begin(); it != sessions_.end();) {
      // A slot in use by another request is never expired underneath it.
      std::unique_lock slot_lock(it->second->mu, std::try_to_lock);
      if (slot_lock.owns_lock() && now - it->second->last_seen > config_.idle_timeout) {
        slot_lock.unlock();
        it = sessions_.erase(it);
        ++dropped;
      } else {
        ++it;
      }
    }
    return dropped;
  }

  StructuredScorer scorer_;
  Thresholds thresholds_;
  ServiceConfig config_;
  AuditLog* audit_;
  std::function<Clock::time_point()> now_;
  mutable std::mutex map_mu_;
  std::unordered_map<std::string, std::shared_ptr<Slot>> sessions_;
  Clock::time_point last_sweep_;
};

// Serves until EOF. Blank lines are skipped.
inline void serve_stream(Gateway& gateway, std::istream& in, std::ostream& out) {
  std::string line;
  while (std::getline(in, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.find_first_not_of(" \t") == std::string::npos) continue;
    out << gateway.handle_line(line) << '\n';
    out.flush();
  }
}

namespace detail {

inline bool send_all(int fd, std::string_view data) {
  while (!data.empty()) {
    const ssize_t n = ::send(fd, data.data(), data.size(), MSG_NOSIGNAL);
    if (n <= 0) return false;
    data.remove_prefix(static_cast<std::size_t>(n));
  }
  return true;
}

// Buffered line reader over a socket.
class LineReader {
 public:
  explicit LineReader(int fd) : fd_(fd) {}

  bool next(std::string& line) {
    for (;;) {
      const auto nl = buf_.find('\n');
      if (nl != std::string::npos) {
        line.assign(buf_, 0, nl);
        buf_.erase(0, nl + 1);
        if (!line.empty() && line.back() == '\r') line.pop_back();
        return true;
      }
      char chunk[4096];
      const ssize_t n = ::recv(fd_, chunk, sizeof chunk, 0);
      if (n <= 0) {
        if (buf_.empty()) return false;
        line = std::move(buf_);
        buf_.clear();
        return true;
      }
      buf_.append(chunk, static_cast<std::size_t>(n));
    }
  }

 private:
  int fd_;
  std::string buf_;
};

}  // namespace detail

// Loopback TCP transport, one thread per connection. Port 0 picks an
// ephemeral port; port() reports the bound one.
class TcpServer {
 public:
  TcpServer(Gateway& gateway, std::uint16_t port = 0, const std::string& host = "127.0.0.1") : gateway_(gateway) {
    listen_fd_ = ::socket(AF_INET, SOCK_STREAM, 0);
    if (listen_fd_ < 0) throw Error("io-error", "socket() failed");
    const int one = 1;
    ::setsockopt(listen_fd_, SOL_SOCKET, SO_REUSEADDR, &one, sizeof one);
    sockaddr_in addr{};
    addr.sin_family = AF_INET;
    addr.sin_port = htons(port);
    if (::inet_pton(AF_INET, host.c_str(), &addr.sin_addr) != 1) {
      ::close(listen_fd_);
      throw Error("bad-config", "bad listen address " + host);
    }
    if (::bind(listen_fd_, reinterpret_cast<sockaddr*>(&addr), sizeof addr) < 0 || ::listen(listen_fd_, 64) < 0) {
      ::close(listen_fd_);
      throw Error("io-error", "cannot listen on " + host + ":" + std::to_string(port));
    }
    socklen_t len = sizeof addr;
    ::getsockname(listen_fd_, reinterpret_cast<sockaddr*>(&addr), &len);
    port_ = ntohs(addr.sin_port);
  }

  TcpServer(const TcpServer&) = delete;
  TcpServer& operator=(const TcpServer&) = delete;

  ~TcpServer() {
    stop();
    if (acceptor_.joinable()) acceptor_.join();
  }

  std::uint16_t port() const noexcept { return port_; }

  // Accept loop in the calling thread; returns after stop().
  void run() {
    while (!stopping_) {
      const int fd = ::accept(listen_fd_, nullptr, nullptr);
      if (fd < 0) {
        if (stopping_) break;
        continue;
      }
      const int one = 1;
      ::setsockopt(fd, IPPROTO_TCP, TCP_NODELAY, &one, sizeof one);
      std::lock_guard lock(mu_);
      conn_fds_.push_back(fd);
      workers_.emplace_back([this, fd] { serve_connection(fd); });
    }
    std::vector<std::thread> workers;
    {
      std::lock_guard lock(mu_);
      for (int fd : conn_fds_) ::shutdown(fd, SHUT_RDWR);
      workers.swap(workers_);
    }
    for (auto& w : workers) w.join();
  }

  void start() {
    acceptor_ = std::thread([this] { run(); });
  }

  void stop() {
    if (stopping_.exchange(true)) return;
    ::shutdown(listen_fd_, SHUT_RDWR);
    ::close(listen_fd_);
  }

 private:
  void serve_connection(int fd) {
    detail::LineReader reader(fd);
    std::string line;
    while (reader.next(line)) {
      if (line.find_first_not_of(" \t") == std::string::npos) continue;
      if (!detail::send_all(fd, gateway_.handle_line(line) + "\n")) break;
    }
    std::lock_guard lock(mu_);
    ::close(fd);
    std::erase(conn_fds_, fd);
  }

  Gateway& gateway_;
  int listen_fd_ = -1;
  std::uint16_t port_ = 0;
  std::atomic<bool> stopping_{false};
  std::mutex mu_;
  std::vector<int> conn_fds_;
  std::vector<std::thread> workers_;
  std::thread acceptor_;
};

// Blocking request/response client for the TCP transport.
class LineClient {
 public:
  LineClient(std::uint16_t port, const std::string& host = "127.0.0.1") : fd_(::socket(AF_INET, SOCK_STREAM, 0)) {
    if (fd_ < 0) throw Error("io-error", "socket() failed");
    sockaddr_in addr{};
    addr.sin_family = AF_INET;
    addr.sin_port = htons(port);
    ::inet_pton(AF_INET, host.c_str(), &addr.sin_addr);
    if (::connect(fd_, reinterpret_cast<sockaddr*>(&addr), sizeof addr) < 0) {
      ::close(fd_);
      throw Error("io-error", "cannot connect to " + host + ":" + std::to_string(port));
    }
    const int one = 1;
    ::setsockopt(fd_, IPPROTO_TCP, TCP_NODELAY, &one, sizeof one);
    reader_.emplace(fd_);
  }

  LineClient(const LineClient&) = delete;
  LineClient& operator=(const LineClient&) = delete;
  ~LineClient() { ::close(fd_); }

  std::string request(std::string_view line) {
    if (!detail::send_all(fd_, std::string(line) + "\n")) throw Error("io-error", "send failed");
    std::string reply;
    if (!reader_->next(reply)) throw Error("io-error", "connection closed");
    return reply;
  }

 private:
  int fd_;
  std::optional<detail::LineReader> reader_;
};

struct ServiceBenchResult {
  std::size_t concurrency = 0;
  std::size_t requests = 0;
  double round_trip_p50_ms = 0.0;
  double round_trip_p95_ms = 0.0;
  double score_p50_ms = 0.0;  // server-side latency_us
};

// Replays `sessions` over loopback TCP from `concurrency` client threads,
// each owning every concurrency-th session.
inline ServiceBenchResult bench_service(Gateway& gateway, std::span<const Session> sessions,
                                        std::size_t concurrency = 16) {
  if (concurrency == 0) throw Error("bad-config", "concurrency must be positive");
  TcpServer server(gateway);
  server.start();
  std::vector<std::vector<double>> rtt(concurrency);
  std::vector<std::vector<double>> srv(concurrency);
  std::vector<std::string> errors(concurrency);
  std::vector<std::thread> clients;
  for (std::size_t c = 0; c < concurrency; ++c) {
    clients.emplace_back([&, c] {
      try {
        LineClient client(server.port());
        for (std::size_t i = c; i < sessions.size(); i += concurrency) {
          const Session& s = sessions[i];
          for (const Turn& t : s.turns) {
            const std::string line = request_to_json("bench/" + s.session_id, t).dump();
            const auto t0 = std::chrono::steady_clock::now();
            const std::string reply = client.request(line);
            const auto t1 = std::chrono::steady_clock::now();
            const auto j = nlohmann::json::parse(reply);
            if (j.contains("error")) throw Error(j["error"].get<std::string>(), j.value("detail", ""));
            rtt[c].push_back(std::chrono::duration<double, std::milli>(t1 - t0).count());
            srv[c].push_back(j.at("latency_us").get<double>() / 1000.0);
          }
        }
      } catch (const std::exception& e) {
        errors[c] = e.what();
      }
    });
  }
  for (auto& t : clients) t.join();
  server.stop();
  for (const auto& e : errors) {
    if (!e.empty()) throw Error("bench-failed", e);
  }
  std::vector<double> all_rtt;
  std::vector<double> all_srv;
  for (std::size_t c = 0; c < concurrency; ++c) {
    all_rtt.insert(all_rtt.end(), rtt[c].begin(), rtt[c].end());
    all_srv.insert(all_srv.end(), srv[c].begin(), srv[c].end());
  }
  ServiceBenchResult r;
  r.concurrency = concurrency;
  r.requests = all_rtt.size();
  r.round_trip_p50_ms = median(all_rtt);
  r.round_trip_p95_ms = percentile(all_rtt, 0.95);
  r.score_p50_ms = median(all_srv);
  return r;
}

}  // namespace agentguard
