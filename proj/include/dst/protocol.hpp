// Newline-delimited JSON target protocol over TCP.
//
//   request:  {"id": <u64>, "inputs": [[...], ...]}        one flat row per sample
//   response: {"id": <u64>, "probs": [[...], ...]}         probability scenario
//         or  {"id": <u64>, "label": [<int>, ...]}         label scenario
//
// One UTF-8 JSON object per line; response ids must echo the request id.
#pragma once

#include <arpa/inet.h>
#include <netdb.h>
#include <sys/socket.h>
#include <unistd.h>

#include <atomic>
#include <cstring>
#include <stdexcept>
#include <string>
#include <thread>
#include <vector>

#include <json.hpp>

#include "dst/tensor.hpp"

namespace dst {

class TransportError : public std::runtime_error {
 public:
  TransportError(const std::string& what, int attempts)
      : std::runtime_error(what + " (after " + std::to_string(attempts) + " attempt" +
                           (attempts == 1 ? "" : "s") + ")"),
        attempts_(attempts) {}
  int attempts() const { return attempts_; }

 private:
  int attempts_;
};

// Blocking line-oriented socket with an internal read buffer.
class JsonLineSocket {
 public:
  JsonLineSocket() = default;
  explicit JsonLineSocket(int fd) : fd_(fd) {}
  JsonLineSocket(const JsonLineSocket&) = delete;
  JsonLineSocket& operator=(const JsonLineSocket&) = delete;
  JsonLineSocket(JsonLineSocket&& o) noexcept : fd_(o.fd_), buf_(std::move(o.buf_)) { o.fd_ = -1; }
  JsonLineSocket& operator=(JsonLineSocket&& o) noexcept {
    close_fd();
    fd_ = o.fd_;
    buf_ = std::move(o.buf_);
    o.fd_ = -1;
    return *this;
  }
  ~JsonLineSocket() { close_fd(); }

  static JsonLineSocket connect(const std::string& host, int port) {
    addrinfo hints{};
    hints.ai_family = AF_INET;
    hints.ai_socktype = SOCK_STREAM;
    addrinfo* res = nullptr;
    int rc = ::getaddrinfo(host.c_str(), std::to_string(port).c_str(), &hints, &res);
    if (rc != 0) throw std::runtime_error("cannot resolve " + host + ": " + gai_strerror(rc));
    int fd = ::socket(res->ai_family, res->ai_socktype, res->ai_protocol);
    if (fd < 0) {
      ::freeaddrinfo(res);
      throw std::runtime_error("socket() failed");
    }
    if (::connect(fd, res->ai_addr, res->ai_addrlen) != 0) {
      ::freeaddrinfo(res);
      ::close(fd);
      throw std::runtime_error("cannot connect to " + host + ":" + std::to_string(port));
    }
    ::freeaddrinfo(res);
    return JsonLineSocket(fd);
  }

  bool open() const { return fd_ >= 0; }

  void send_line(const std::string& line) {
    std::string framed = line + "\n";
    size_t off = 0;
    while (off < framed.size()) {
      ssize_t n = ::send(fd_, framed.data() + off, framed.size() - off, MSG_NOSIGNAL);
      if (n <= 0) throw std::runtime_error("send failed");
      off += static_cast<size_t>(n);
    }
  }

  // Reads up to (and consuming) the next '\n'; returns false on EOF.
  bool recv_line(std::string& out) {
    for (;;) {
      size_t pos = buf_.find('\n');
      if (pos != std::string::npos) {
        out = buf_.substr(0, pos);
        buf_.erase(0, pos + 1);
        return true;
      }
      char chunk[4096];
      ssize_t n = ::recv(fd_, chunk, sizeof(chunk), 0);
      if (n < 0) throw std::runtime_error("recv failed");
      if (n == 0) return false;
      buf_.append(chunk, static_cast<size_t>(n));
    }
  }

  void shutdown_write() {
    if (fd_ >= 0) ::shutdown(fd_, SHUT_WR);
  }

 private:
  void close_fd() {
    if (fd_ >= 0) ::close(fd_);
    fd_ = -1;
  }
  int fd_ = -1;
  std::string buf_;
};

// ---------------------------------------------------------------------
// Message encoding. Compact separators; keys serialize alphabetically
// (id < inputs/label/probs), which pins the byte-exact framing.
// ---------------------------------------------------------------------

inline std::string encode_request(uint64_t id, const Tensor& batch) {
  int64_t b = batch.shape[0];
  int64_t per = batch.numel() / b;
  nlohmann::json rows = nlohmann::json::array();
  for (int64_t i = 0; i < b; ++i) {
    nlohmann::json row = nlohmann::json::array();
    for (int64_t j = 0; j < per; ++j) row.push_back(batch.data[static_cast<size_t>(i * per + j)]);
    rows.push_back(std::move(row));
  }
  nlohmann::json req;
  req["id"] = id;
  req["inputs"] = std::move(rows);
  return req.dump();
}

struct DecodedRequest {
  uint64_t id = 0;
  Tensor inputs;  // (B, flattened_dim)
};

inline DecodedRequest decode_request(const std::string& line) {
  nlohmann::json j = nlohmann::json::parse(line);
  DecodedRequest out;
  out.id = j.at("id").get<uint64_t>();
  const auto& rows = j.at("inputs");
  if (!rows.is_array() || rows.empty()) throw std::runtime_error("protocol: inputs must be a nonempty array");
  int64_t b = static_cast<int64_t>(rows.size());
  int64_t per = static_cast<int64_t>(rows[0].size());
  out.inputs = Tensor({b, per});
  for (int64_t i = 0; i < b; ++i) {
    const auto& row = rows[static_cast<size_t>(i)];
    if (static_cast<int64_t>(row.size()) != per)
      throw std::runtime_error("protocol: ragged input rows");
    for (int64_t l = 0; l < per; ++l)
      out.inputs.at2(i, l) = row[static_cast<size_t>(l)].get<double>();
  }
  return out;
}

inline std::string encode_probs_response(uint64_t id, const Tensor& probs) {
  nlohmann::json rows = nlohmann::json::array();
  for (int64_t i = 0; i < probs.shape[0]; ++i) {
    nlohmann::json row = nlohmann::json::array();
    for (int64_t j = 0; j < probs.shape[1]; ++j) row.push_back(probs.at2(i, j));
    rows.push_back(std::move(row));
  }
  nlohmann::json res;
  res["id"] = id;
  res["probs"] = std::move(rows);
  return res.dump();
}

inline std::string encode_label_response(uint64_t id, const std::vector<int64_t>& labels) {
  nlohmann::json res;
  res["id"] = id;
  res["label"] = labels;
  return res.dump();
}

struct DecodedResponse {
  uint64_t id = 0;
  bool is_label = false;
  Tensor probs;                 // (B, K) when !is_label
  std::vector<int64_t> labels;  // when is_label
};

inline DecodedResponse decode_response(const std::string& line) {
  nlohmann::json j = nlohmann::json::parse(line);
  DecodedResponse out;
  out.id = j.at("id").get<uint64_t>();
  if (j.contains("probs")) {
    const auto& rows = j.at("probs");
    int64_t b = static_cast<int64_t>(rows.size());
    int64_t k = static_cast<int64_t>(rows.at(0).size());
    out.probs = Tensor({b, k});
    for (int64_t i = 0; i < b; ++i)
      for (int64_t l = 0; l < k; ++l)
        out.probs.at2(i, l) = rows[static_cast<size_t>(i)][static_cast<size_t>(l)].get<double>();
  } else if (j.contains("label")) {
    out.is_label = true;
    out.labels = j.at("label").get<std::vector<int64_t>>();
  } else {
    throw std::runtime_error("protocol: response carries neither probs nor label");
  }
  return out;
}

}  // namespace dst
