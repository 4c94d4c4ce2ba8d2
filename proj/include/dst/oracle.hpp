// Black-box target interface. Callers see query() and a monotone query
// ledger, nothing else; target parameters and gradients never cross this
// boundary.
#pragma once

#include <algorithm>
#include <memory>
#include <mutex>
#include <stdexcept>
#include <string>
#include <vector>

#include "dst/autodiff.hpp"
#include "dst/nets.hpp"
#include "dst/protocol.hpp"
#include "dst/tensor.hpp"

namespace dst {

enum class Scenario { probability, label };

inline Scenario scenario_from_name(const std::string& s) {
  if (s == "probability") return Scenario::probability;
  if (s == "label") return Scenario::label;
  throw std::invalid_argument("unknown scenario '" + s + "'");
}

inline const char* scenario_name(Scenario s) {
  return s == Scenario::probability ? "probability" : "label";
}

enum class Phase { train, eval, probe };

// Point-in-time counter copy; per sample, not per batch call.
struct QueryLedger {
  int64_t train_q = 0;
  int64_t eval_q = 0;
  int64_t probe_q = 0;

  int64_t total() const { return train_q + eval_q + probe_q; }
};

// argmax rows to one-hot, lowest class index winning ties
inline Tensor one_hot_rows(const Tensor& probs) {
  int64_t b = probs.shape[0], k = probs.shape[1];
  Tensor out = Tensor::zeros({b, k});
  for (int64_t i = 0; i < b; ++i) out.at2(i, argmax_row(probs, i)) = 1.0;
  return out;
}

class TargetOracle {
 public:
  virtual ~TargetOracle() = default;

  // Returns per-scenario outputs: (B, K) softmax rows, or (B, K) one-hot
  // rows. Increments the phase counter by B.
  virtual Tensor query(const Tensor& inputs, Phase phase) = 0;

  virtual QueryLedger ledger_snapshot() const = 0;
  virtual Scenario scenario() const = 0;
};

namespace detail {

inline void bump_ledger(QueryLedger& ledger, std::mutex& mu, Phase phase, int64_t count) {
  std::lock_guard<std::mutex> lock(mu);
  switch (phase) {
    case Phase::train: ledger.train_q += count; break;
    case Phase::eval: ledger.eval_q += count; break;
    case Phase::probe: ledger.probe_q += count; break;
  }
}

inline void check_unit_range(const Tensor& inputs) {
  for (double v : inputs.data)
    if (!(v >= -1e-9 && v <= 1.0 + 1e-9))
      throw std::invalid_argument("oracle: inputs must lie in [0,1]");
}

}  // namespace detail

class InProcessOracle : public TargetOracle {
 public:
  InProcessOracle(TargetNet net, Scenario scenario) : net_(std::move(net)), scenario_(scenario) {
    net_.freeze();
  }

  Tensor query(const Tensor& inputs, Phase phase) override {
    const DataShape& in = net_.config().in;
    Tensor shaped = inputs;
    if (in.kind == DataKind::image && inputs.rank() == 2)
      shaped = inputs.reshaped({inputs.shape[0], in.channels, in.height, in.width});
    if (shaped.rank() < 1 || shaped.shape[0] < 1)
      throw std::invalid_argument("oracle: empty batch");
    if (in.kind == DataKind::vector) {
      if (shaped.rank() != 2 || shaped.shape[1] != in.dim)
        fail_shape("oracle query", shaped, "(B, " + std::to_string(in.dim) + ")");
    } else if (shaped.rank() != 4 || shaped.shape[1] != in.channels || shaped.shape[2] != in.height ||
               shaped.shape[3] != in.width) {
      fail_shape("oracle query", shaped, "(B, C, H, W) matching the target");
    }
    detail::check_unit_range(shaped);

    PassContext cx;
    Tensor probs = cx.tape.val(ops::softmax(net_.forward(cx, cx.input(shaped))));
    detail::bump_ledger(ledger_, mu_, phase, shaped.shape[0]);
    if (scenario_ == Scenario::label) return one_hot_rows(probs);
    return probs;
  }

  QueryLedger ledger_snapshot() const override {
    std::lock_guard<std::mutex> lock(mu_);
    return ledger_;
  }

  Scenario scenario() const override { return scenario_; }

 private:
  TargetNet net_;
  Scenario scenario_;
  mutable std::mutex mu_;
  QueryLedger ledger_;
};

// Client for targets served over the JSONL wire protocol. Requests are
// retried on transport failure; the final error carries the attempt
// count. Label responses are one-hot encoded at width class_count.
class ExternalOracle : public TargetOracle {
 public:
  ExternalOracle(std::string host, int port, Scenario scenario, int64_t class_count,
                 int max_attempts = 3)
      : host_(std::move(host)),
        port_(port),
        scenario_(scenario),
        class_count_(class_count),
        max_attempts_(max_attempts) {}

  Tensor query(const Tensor& inputs, Phase phase) override {
    Tensor flat = inputs;
    if (inputs.rank() != 2) flat = inputs.reshaped({inputs.shape[0], inputs.numel() / inputs.shape[0]});
    detail::check_unit_range(flat);
    std::lock_guard<std::mutex> call_lock(call_mu_);
    uint64_t id = next_id_++;
    std::string request = encode_request(id, flat);
    std::string response_line;
    int attempt = 0;
    for (;;) {
      ++attempt;
      try {
        if (!sock_.open()) sock_ = JsonLineSocket::connect(host_, port_);
        sock_.send_line(request);
        if (!sock_.recv_line(response_line)) throw std::runtime_error("server closed the connection");
        break;
      } catch (const std::exception& e) {
        sock_ = JsonLineSocket();  // drop the broken connection
        if (attempt >= max_attempts_)
          throw TransportError("external target query failed: " + std::string(e.what()), attempt);
      }
    }
    DecodedResponse res = decode_response(response_line);
    if (res.id != id)
      throw std::runtime_error("protocol: response id " + std::to_string(res.id) +
                               " does not echo request id " + std::to_string(id));
    detail::bump_ledger(ledger_, mu_, phase, flat.shape[0]);
    if (res.is_label) {
      if (static_cast<int64_t>(res.labels.size()) != flat.shape[0])
        throw std::runtime_error("protocol: label count does not match batch size");
      Tensor out = Tensor::zeros({flat.shape[0], class_count_});
      for (int64_t i = 0; i < flat.shape[0]; ++i) {
        int64_t l = res.labels[static_cast<size_t>(i)];
        if (l < 0 || l >= class_count_)
          throw std::runtime_error("protocol: label " + std::to_string(l) + " outside class range");
        out.at2(i, l) = 1.0;
      }
      return out;
    }
    if (res.probs.shape[0] != flat.shape[0])
      throw std::runtime_error("protocol: probs row count does not match batch size");
    return res.probs;
  }

  QueryLedger ledger_snapshot() const override {
    std::lock_guard<std::mutex> lock(mu_);
    return ledger_;
  }

  Scenario scenario() const override { return scenario_; }

 private:
  std::string host_;
  int port_;
  Scenario scenario_;
  int64_t class_count_;
  int max_attempts_;
  uint64_t next_id_ = 1;
  JsonLineSocket sock_;
  std::mutex call_mu_;
  mutable std::mutex mu_;
  QueryLedger ledger_;
};

// In-process model server speaking the wire protocol; backs the
// serve-target command. One thread per connection.
class TargetServer {
 public:
  TargetServer(TargetNet net, Scenario scenario, int port)
      : net_(std::move(net)), scenario_(scenario), port_(port) {
    net_.freeze();
  }

  // Binds and listens; returns the bound port (useful with port 0).
  int start() {
    listen_fd_ = ::socket(AF_INET, SOCK_STREAM, 0);
    if (listen_fd_ < 0) throw std::runtime_error("serve: socket() failed");
    int opt = 1;
    ::setsockopt(listen_fd_, SOL_SOCKET, SO_REUSEADDR, &opt, sizeof(opt));
    sockaddr_in addr{};
    addr.sin_family = AF_INET;
    addr.sin_addr.s_addr = htonl(INADDR_LOOPBACK);
    addr.sin_port = htons(static_cast<uint16_t>(port_));
    if (::bind(listen_fd_, reinterpret_cast<sockaddr*>(&addr), sizeof(addr)) != 0)
      throw std::runtime_error("serve: cannot bind port " + std::to_string(port_));
    if (::listen(listen_fd_, 16) != 0) throw std::runtime_error("serve: listen failed");
    socklen_t len = sizeof(addr);
    ::getsockname(listen_fd_, reinterpret_cast<sockaddr*>(&addr), &len);
    port_ = ntohs(addr.sin_port);
    accept_thread_ = std::thread([this] { accept_loop(); });
    return port_;
  }

  int port() const { return port_; }

  void stop() {
    if (stopped_.exchange(true)) return;
    ::shutdown(listen_fd_, SHUT_RDWR);
    ::close(listen_fd_);
    if (accept_thread_.joinable()) accept_thread_.join();
    {
      // unblock workers still waiting on open client connections
      std::lock_guard<std::mutex> lock(workers_mu_);
      for (int fd : live_fds_) ::shutdown(fd, SHUT_RDWR);
    }
    for (auto& t : workers_)
      if (t.joinable()) t.join();
  }

  // Blocks until stop() (for the CLI foreground mode).
  void wait() {
    if (accept_thread_.joinable()) accept_thread_.join();
  }

  ~TargetServer() { stop(); }

  // Request -> response line, exposed for protocol tests.
  std::string answer(const std::string& request_line) {
    DecodedRequest req = decode_request(request_line);
    const DataShape& in = net_.config().in;
    Tensor shaped = req.inputs;
    if (in.kind == DataKind::image)
      shaped = req.inputs.reshaped({req.inputs.shape[0], in.channels, in.height, in.width});
    PassContext cx;
    Tensor probs = cx.tape.val(ops::softmax(net_.forward(cx, cx.input(shaped))));
    if (scenario_ == Scenario::label) {
      return encode_label_response(req.id, argmax_rows(probs));
    }
    return encode_probs_response(req.id, probs);
  }

 private:
  void accept_loop() {
    for (;;) {
      int fd = ::accept(listen_fd_, nullptr, nullptr);
      if (fd < 0) break;  // listener closed
      std::lock_guard<std::mutex> lock(workers_mu_);
      live_fds_.push_back(fd);
      workers_.emplace_back([this, fd] { serve_connection(fd); });
    }
  }

  void serve_connection(int fd) {
    {
      JsonLineSocket sock(fd);
      std::string line;
      for (;;) {
        try {
          if (!sock.recv_line(line)) break;
        } catch (const std::exception&) {
          break;
        }
        if (line.empty()) continue;
        std::string response;
        try {
          std::lock_guard<std::mutex> lock(model_mu_);
          response = answer(line);
        } catch (const std::exception& e) {
          nlohmann::json err;
          err["error"] = e.what();
          response = err.dump();
        }
        try {
          sock.send_line(response);
        } catch (const std::exception&) {
          break;
        }
      }
      // deregister before the socket closes so stop() cannot touch a
      // reused descriptor
      std::lock_guard<std::mutex> lock(workers_mu_);
      live_fds_.erase(std::remove(live_fds_.begin(), live_fds_.end(), fd), live_fds_.end());
    }
  }

  TargetNet net_;
  Scenario scenario_;
  int port_;
  int listen_fd_ = -1;
  std::thread accept_thread_;
  std::vector<std::thread> workers_;
  std::vector<int> live_fds_;
  std::mutex workers_mu_;
  std::mutex model_mu_;
  std::atomic<bool> stopped_{false};
};

}  // namespace dst
