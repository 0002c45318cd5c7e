#pragma once

#include <chrono>
#include <condition_variable>
#include <cstdint>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <stdexcept>
#include <string>
#include <thread>
#include <vector>

#include "faudit/explainers.hpp"
#include "faudit/tensor.hpp"

namespace faudit::bb {

inline constexpr const char* kProtocol = "faud-bb";
inline constexpr int kProtocolVersion = 1;

class SpawnError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};
/// Malformed or unexpected traffic from the adapter.
class ProtocolError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};
class TimeoutError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};
/// The adapter answered a request with an error message.
class AdapterError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct Handshake {
  int version = 0;
  std::size_t n_classes = 0;
};

struct Response {
  std::uint64_t id = 0;
  std::vector<double> probs;
  std::optional<std::string> error;
};

/// `{"id":..,"shape":[c,h,w],"data":[..]}` with 17 significant digits.
std::string encode_request(std::uint64_t id, const Tensor& image);
std::string encode_response(const Response& response);
std::string encode_handshake(std::size_t n_classes, int version = kProtocolVersion);

/// Throws ProtocolError quoting `line` when it is not a valid handshake.
Handshake parse_handshake(const std::string& line);
Response parse_response(const std::string& line);

struct HandleOptions {
  std::chrono::milliseconds handshake_timeout{10'000};
  std::chrono::milliseconds response_timeout{30'000};
  /// Requests allowed in flight at once.
  std::size_t window = 8;
  /// Wire trace destination; defaults to $FAUD_BB_LOG when empty.
  std::string log_path;
};

/// A live adapter session: one child process (or one TCP connection).
/// predict() may be called from several threads; writes are serialized
/// and responses are matched to callers by id.
class ModelHandle {
 public:
  /// Launches `argv` and waits for its handshake.
  static std::unique_ptr<ModelHandle> spawn(const std::vector<std::string>& argv,
                                            const HandleOptions& options = {});
  /// Connects to an adapter listening on host:port.
  static std::unique_ptr<ModelHandle> connect(const std::string& host, std::uint16_t port,
                                              const HandleOptions& options = {});

  ~ModelHandle();
  ModelHandle(const ModelHandle&) = delete;
  ModelHandle& operator=(const ModelHandle&) = delete;

  std::size_t n_classes() const { return n_classes_; }
  int protocol_version() const { return version_; }

  std::vector<double> predict(const Tensor& image);
  /// The model must outlive the function.
  PredictFn predictor();

  /// Total requests sent so far.
  std::uint64_t requests_sent() const;

 private:
  ModelHandle(int write_fd, int read_fd, int pid, HandleOptions options);
  void handshake();
  void reader_loop();
  void fail(const std::string& why);
  void trace(char direction, const std::string& line);
  void shutdown();

  struct Slot {
    bool done = false;
    Response response;
  };

  int write_fd_;
  int read_fd_;
  int pid_;  // -1 for TCP
  HandleOptions options_;
  std::size_t n_classes_ = 0;
  int version_ = 0;
  std::string pending_input_;

  mutable std::mutex mutex_;
  std::condition_variable cv_;
  std::map<std::uint64_t, Slot> slots_;
  std::uint64_t next_id_ = 1;
  std::size_t in_flight_ = 0;
  std::optional<std::string> broken_;
  bool stopping_ = false;

  std::mutex write_mutex_;
  std::mutex trace_mutex_;
  int trace_fd_ = -1;
  std::thread reader_;
};

}  // namespace faudit::bb
