#include "faudit/blackbox.hpp"

#include <fcntl.h>
#include <netdb.h>
#include <poll.h>
#include <sys/socket.h>
#include <sys/wait.h>
#include <unistd.h>

#include <cerrno>
#include <cmath>
#include <csignal>
#include <cstdio>
#include <cstdlib>
#include <cstring>

#include "json.hpp"

namespace faudit::bb {

using nlohmann::json;
using Clock = std::chrono::steady_clock;

namespace {

void append_number(std::string& out, double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  out += buf;
}

std::string quote(const std::string& line) {
  constexpr std::size_t kMax = 200;
  if (line.size() <= kMax) return "'" + line + "'";
  return "'" + line.substr(0, kMax) + "...'";
}

bool write_all(int fd, const std::string& data) {
  std::size_t off = 0;
  while (off < data.size()) {
    const auto n = ::write(fd, data.data() + off, data.size() - off);
    if (n < 0) {
      if (errno == EINTR) continue;
      return false;
    }
    off += static_cast<std::size_t>(n);
  }
  return true;
}

enum class ReadStatus { line, timeout, eof, error };

/// Pulls the next '\n'-terminated line from `fd`, buffering leftovers in `buf`.
ReadStatus read_line(int fd, std::string& buf, std::string& line, int timeout_ms) {
  for (;;) {
    const auto nl = buf.find('\n');
    if (nl != std::string::npos) {
      line = buf.substr(0, nl);
      if (!line.empty() && line.back() == '\r') line.pop_back();
      buf.erase(0, nl + 1);
      return ReadStatus::line;
    }
    pollfd p{fd, POLLIN, 0};
    const int r = ::poll(&p, 1, timeout_ms);
    if (r < 0) {
      if (errno == EINTR) continue;
      return ReadStatus::error;
    }
    if (r == 0) return ReadStatus::timeout;
    char chunk[65536];
    const auto n = ::read(fd, chunk, sizeof chunk);
    if (n < 0) {
      if (errno == EINTR || errno == EAGAIN) continue;
      return ReadStatus::error;
    }
    if (n == 0) return ReadStatus::eof;
    buf.append(chunk, static_cast<std::size_t>(n));
  }
}

}  // namespace

std::string encode_request(std::uint64_t id, const Tensor& image) {
  std::string out = "{\"id\":" + std::to_string(id) + ",\"shape\":[";
  for (std::size_t i = 0; i < image.rank(); ++i) {
    if (i) out += ',';
    out += std::to_string(image.dim(i));
  }
  out += "],\"data\":[";
  out.reserve(out.size() + image.size() * 24);
  for (std::size_t i = 0; i < image.size(); ++i) {
    if (i) out += ',';
    append_number(out, image[i]);
  }
  out += "]}";
  return out;
}

std::string encode_response(const Response& response) {
  std::string out = "{\"id\":" + std::to_string(response.id);
  if (response.error) {
    out += ",\"error\":" + json(*response.error).dump();
  } else {
    out += ",\"probs\":[";
    for (std::size_t i = 0; i < response.probs.size(); ++i) {
      if (i) out += ',';
      append_number(out, response.probs[i]);
    }
    out += ']';
  }
  out += '}';
  return out;
}

std::string encode_handshake(std::size_t n_classes, int version) {
  return json{{"protocol", kProtocol}, {"version", version}, {"n_classes", n_classes}}.dump();
}

Handshake parse_handshake(const std::string& line) {
  json j;
  try {
    j = json::parse(line);
  } catch (const json::exception&) {
    throw ProtocolError("malformed handshake line " + quote(line));
  }
  if (!j.is_object() || !j.contains("protocol") || !j["protocol"].is_string() ||
      !j.contains("version") || !j["version"].is_number_integer() || !j.contains("n_classes") ||
      !j["n_classes"].is_number_unsigned()) {
    throw ProtocolError("malformed handshake line " + quote(line));
  }
  if (j["protocol"].get<std::string>() != kProtocol) {
    throw ProtocolError("unknown protocol in handshake line " + quote(line));
  }
  Handshake h;
  h.version = j["version"].get<int>();
  h.n_classes = j["n_classes"].get<std::size_t>();
  if (h.version != kProtocolVersion) {
    throw ProtocolError("protocol version mismatch: adapter speaks " + std::to_string(h.version) +
                        ", engine speaks " + std::to_string(kProtocolVersion) + " in " + quote(line));
  }
  if (h.n_classes == 0) throw ProtocolError("handshake reports zero classes: " + quote(line));
  return h;
}

Response parse_response(const std::string& line) {
  json j;
  try {
    j = json::parse(line);
  } catch (const json::exception&) {
    throw ProtocolError("malformed response line " + quote(line));
  }
  if (!j.is_object() || !j.contains("id") || !j["id"].is_number_unsigned()) {
    throw ProtocolError("response without a valid id: " + quote(line));
  }
  Response r;
  r.id = j["id"].get<std::uint64_t>();
  if (j.contains("error") && !j["error"].is_null()) {
    r.error = j["error"].is_string() ? j["error"].get<std::string>() : j["error"].dump();
    return r;
  }
  if (!j.contains("probs") || !j["probs"].is_array()) {
    throw ProtocolError("response without probs: " + quote(line));
  }
  for (const auto& v : j["probs"]) {
    if (!v.is_number()) throw ProtocolError("non-numeric probability in " + quote(line));
    r.probs.push_back(v.get<double>());
  }
  return r;
}

ModelHandle::ModelHandle(int write_fd, int read_fd, int pid, HandleOptions options)
    : write_fd_(write_fd), read_fd_(read_fd), pid_(pid), options_(std::move(options)) {
  if (options_.window == 0) options_.window = 1;
  std::string path = options_.log_path;
  if (path.empty()) {
    if (const char* env = std::getenv("FAUD_BB_LOG")) path = env;
  }
  if (!path.empty()) {
    trace_fd_ = ::open(path.c_str(), O_WRONLY | O_CREAT | O_APPEND | O_CLOEXEC, 0644);
  }
}

std::unique_ptr<ModelHandle> ModelHandle::spawn(const std::vector<std::string>& argv,
                                                const HandleOptions& options) {
  if (argv.empty()) throw SpawnError("spawn: empty command line");
  // A dead adapter must surface as a write error, not kill the engine.
  std::signal(SIGPIPE, SIG_IGN);

  int to_child[2], from_child[2], exec_err[2];
  if (::pipe2(to_child, O_CLOEXEC) != 0 || ::pipe2(from_child, O_CLOEXEC) != 0 ||
      ::pipe2(exec_err, O_CLOEXEC) != 0) {
    throw SpawnError(std::string("spawn: pipe failed: ") + std::strerror(errno));
  }
  std::vector<char*> args;
  for (const auto& a : argv) args.push_back(const_cast<char*>(a.c_str()));
  args.push_back(nullptr);

  const pid_t pid = ::fork();
  if (pid < 0) throw SpawnError(std::string("spawn: fork failed: ") + std::strerror(errno));
  if (pid == 0) {
    ::dup2(to_child[0], STDIN_FILENO);
    ::dup2(from_child[1], STDOUT_FILENO);
    ::execvp(args[0], args.data());
    const int err = errno;
    [[maybe_unused]] auto n = ::write(exec_err[1], &err, sizeof err);
    ::_exit(127);
  }
  ::close(to_child[0]);
  ::close(from_child[1]);
  ::close(exec_err[1]);
  int err = 0;
  ssize_t n;
  do {
    n = ::read(exec_err[0], &err, sizeof err);
  } while (n < 0 && errno == EINTR);
  ::close(exec_err[0]);
  if (n == sizeof err) {
    ::close(to_child[1]);
    ::close(from_child[0]);
    ::waitpid(pid, nullptr, 0);
    throw SpawnError("spawn: cannot execute '" + argv[0] + "': " + std::strerror(err));
  }

  std::unique_ptr<ModelHandle> h(new ModelHandle(to_child[1], from_child[0], pid, options));
  h->handshake();
  return h;
}

std::unique_ptr<ModelHandle> ModelHandle::connect(const std::string& host, std::uint16_t port,
                                                  const HandleOptions& options) {
  std::signal(SIGPIPE, SIG_IGN);
  addrinfo hints{};
  hints.ai_family = AF_UNSPEC;
  hints.ai_socktype = SOCK_STREAM;
  addrinfo* res = nullptr;
  const auto service = std::to_string(port);
  if (const int rc = ::getaddrinfo(host.c_str(), service.c_str(), &hints, &res); rc != 0) {
    throw SpawnError("connect: cannot resolve " + host + ": " + ::gai_strerror(rc));
  }
  int fd = -1;
  for (auto* ai = res; ai; ai = ai->ai_next) {
    fd = ::socket(ai->ai_family, ai->ai_socktype | SOCK_CLOEXEC, ai->ai_protocol);
    if (fd < 0) continue;
    if (::connect(fd, ai->ai_addr, ai->ai_addrlen) == 0) break;
    ::close(fd);
    fd = -1;
  }
  ::freeaddrinfo(res);
  if (fd < 0) {
    throw SpawnError("connect: cannot reach " + host + ":" + service + ": " + std::strerror(errno));
  }
  std::unique_ptr<ModelHandle> h(new ModelHandle(fd, fd, -1, options));
  h->handshake();
  return h;
}

void ModelHandle::handshake() {
  std::string line;
  const auto deadline = Clock::now() + options_.handshake_timeout;
  ReadStatus st;
  for (;;) {
    const auto left =
        std::chrono::duration_cast<std::chrono::milliseconds>(deadline - Clock::now()).count();
    st = read_line(read_fd_, pending_input_, line, static_cast<int>(std::max<long long>(left, 0)));
    if (st != ReadStatus::line || !line.empty()) break;
  }
  if (st == ReadStatus::timeout) {
    shutdown();
    throw TimeoutError("adapter sent no handshake within " +
                       std::to_string(options_.handshake_timeout.count()) + " ms");
  }
  if (st != ReadStatus::line) {
    shutdown();
    throw ProtocolError("adapter closed its output before the handshake");
  }
  trace('<', line);
  try {
    const auto hs = parse_handshake(line);
    n_classes_ = hs.n_classes;
    version_ = hs.version;
  } catch (...) {
    shutdown();
    throw;
  }
  reader_ = std::thread([this] { reader_loop(); });
}

void ModelHandle::trace(char direction, const std::string& line) {
  if (trace_fd_ < 0) return;
  std::lock_guard lock(trace_mutex_);
  std::string entry;
  entry += direction;
  entry += ' ';
  entry += line;
  entry += '\n';
  write_all(trace_fd_, entry);
}

void ModelHandle::fail(const std::string& why) {
  std::lock_guard lock(mutex_);
  if (!broken_) broken_ = why;
  cv_.notify_all();
}

void ModelHandle::reader_loop() {
  std::string line;
  for (;;) {
    {
      std::lock_guard lock(mutex_);
      if (stopping_) return;
    }
    const auto st = read_line(read_fd_, pending_input_, line, 100);
    if (st == ReadStatus::timeout) continue;
    if (st != ReadStatus::line) {
      fail(st == ReadStatus::eof ? "adapter closed its output" : "read from adapter failed");
      return;
    }
    if (line.empty()) continue;
    trace('<', line);
    Response r;
    try {
      r = parse_response(line);
    } catch (const ProtocolError& e) {
      fail(e.what());
      return;
    }
    std::lock_guard lock(mutex_);
    auto it = slots_.find(r.id);
    if (it == slots_.end() || it->second.done) {
      if (!broken_) broken_ = "response for unknown id " + std::to_string(r.id);
      cv_.notify_all();
      return;
    }
    it->second.response = std::move(r);
    it->second.done = true;
    cv_.notify_all();
  }
}

std::vector<double> ModelHandle::predict(const Tensor& image) {
  std::uint64_t id;
  {
    std::unique_lock lock(mutex_);
    cv_.wait(lock, [&] { return broken_ || in_flight_ < options_.window; });
    if (broken_) throw ProtocolError("adapter session broken: " + *broken_);
    id = next_id_++;
    slots_[id];
    ++in_flight_;
  }
  auto release = [&] {
    slots_.erase(id);
    --in_flight_;
    cv_.notify_all();
  };

  const auto line = encode_request(id, image);
  bool written;
  {
    std::lock_guard wlock(write_mutex_);
    trace('>', line);
    written = write_all(write_fd_, line + "\n");
  }
  std::unique_lock lock(mutex_);
  if (!written) {
    release();
    if (!broken_) broken_ = std::string("write to adapter failed: ") + std::strerror(errno);
    cv_.notify_all();
    throw ProtocolError("adapter session broken: " + *broken_);
  }
  const bool ready = cv_.wait_for(lock, options_.response_timeout,
                                  [&] { return slots_[id].done || broken_.has_value(); });
  if (!ready) {
    release();
    // A late answer would desynchronize the session, so it ends here.
    broken_ = "response " + std::to_string(id) + " timed out";
    cv_.notify_all();
    throw TimeoutError("adapter did not answer request " + std::to_string(id) + " within " +
                       std::to_string(options_.response_timeout.count()) + " ms");
  }
  if (!slots_[id].done) {
    release();
    throw ProtocolError("adapter session broken: " + *broken_);
  }
  Response r = std::move(slots_[id].response);
  release();
  lock.unlock();

  if (r.error) throw AdapterError("adapter error for request " + std::to_string(id) + ": " + *r.error);
  if (r.probs.size() != n_classes_) {
    throw ProtocolError("response " + std::to_string(id) + " has " + std::to_string(r.probs.size()) +
                        " probabilities, handshake promised " + std::to_string(n_classes_));
  }
  double total = 0.0;
  for (double p : r.probs) {
    if (!std::isfinite(p) || p < 0.0) {
      throw ProtocolError("response " + std::to_string(id) + " has an invalid probability");
    }
    total += p;
  }
  if (std::abs(total - 1.0) > 1e-6) {
    throw ProtocolError("response " + std::to_string(id) + " probabilities sum to " +
                        std::to_string(total));
  }
  return r.probs;
}

PredictFn ModelHandle::predictor() {
  return [this](const Tensor& image) { return predict(image); };
}

std::uint64_t ModelHandle::requests_sent() const {
  std::lock_guard lock(mutex_);
  return next_id_ - 1;
}

void ModelHandle::shutdown() {
  {
    std::lock_guard lock(mutex_);
    stopping_ = true;
    if (!broken_) broken_ = "session closed";
    cv_.notify_all();
  }
  if (reader_.joinable()) reader_.join();
  if (write_fd_ >= 0) {
    if (pid_ < 0) ::shutdown(write_fd_, SHUT_RDWR);
    ::close(write_fd_);
  }
  if (read_fd_ >= 0 && read_fd_ != write_fd_) ::close(read_fd_);
  write_fd_ = read_fd_ = -1;
  if (pid_ > 0) {
    // Closing stdin asks the adapter to exit; give it a moment, then force it.
    for (int i = 0; i < 200; ++i) {
      if (::waitpid(pid_, nullptr, WNOHANG) == pid_) {
        pid_ = -1;
        break;
      }
      ::usleep(10'000);
    }
    if (pid_ > 0) {
      ::kill(pid_, SIGKILL);
      ::waitpid(pid_, nullptr, 0);
      pid_ = -1;
    }
  }
  if (trace_fd_ >= 0) {
    ::close(trace_fd_);
    trace_fd_ = -1;
  }
}

ModelHandle::~ModelHandle() { shutdown(); }

}  // namespace faudit::bb
