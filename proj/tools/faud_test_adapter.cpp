// faud_test_adapter: reference and fault-injecting adapters for the
// black-box protocol. Serves one session on stdio, or one TCP client with --listen.
#include <arpa/inet.h>
#include <netinet/in.h>
#include <sys/socket.h>
#include <unistd.h>

#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <iostream>
#include <iterator>
#include <numeric>
#include <string>
#include <thread>
#include <vector>

#include "CLI11.hpp"
#include "faudit/blackbox.hpp"
#include "faudit/models.hpp"
#include "json.hpp"

namespace {

using nlohmann::json;
namespace bb = faudit::bb;

struct Options {
  std::string mode = "constant";
  std::size_t classes = 2;
  std::string weights;
  std::string model;
  int version = bb::kProtocolVersion;
  std::string fault = "none";
  std::size_t batch = 1;
  int delay_ms = 0;
  int listen_port = -1;
};

class Session {
 public:
  Session(FILE* in, FILE* out, std::string log_path) : in_(in), out_(out) {
    if (!log_path.empty()) log_.open(log_path, std::ios::app);
  }

  bool read_line(std::string& line) {
    line.clear();
    int ch;
    while ((ch = std::fgetc(in_)) != EOF) {
      if (ch == '\n') break;
      line.push_back(static_cast<char>(ch));
    }
    if (ch == EOF && line.empty()) return false;
    if (log_) log_ << "> " << line << '\n' << std::flush;
    return true;
  }

  void write_line(const std::string& line) {
    std::fputs(line.c_str(), out_);
    std::fputc('\n', out_);
    std::fflush(out_);
    if (log_) log_ << "< " << line << '\n' << std::flush;
  }

 private:
  FILE* in_;
  FILE* out_;
  std::ofstream log_;
};

/// The served model: image -> probabilities.
struct Model {
  std::size_t n_classes = 2;
  std::function<std::vector<double>(const faudit::Tensor&)> predict;
};

Model make_served_model(const Options& o) {
  Model m;
  if (o.mode == "constant") {
    m.n_classes = o.classes;
    m.predict = [k = o.classes](const faudit::Tensor&) {
      return std::vector<double>(k, 1.0 / static_cast<double>(k));
    };
  } else if (o.mode == "linear") {
    // Two classes; p1 = w.x / sum(w) with non-negative weights, so p1 is
    // exactly linear in x for inputs in [0, 1].
    std::ifstream in(o.weights);
    if (!in) throw std::runtime_error("cannot read weights file " + o.weights);
    std::vector<double> w{std::istream_iterator<double>(in), std::istream_iterator<double>()};
    if (w.empty()) throw std::runtime_error("weights file is empty");
    double total = 0.0;
    for (double v : w) {
      if (v < 0.0) throw std::runtime_error("weights must be non-negative");
      total += v;
    }
    if (total <= 0.0) throw std::runtime_error("weights sum to zero");
    m.n_classes = 2;
    m.predict = [w, total](const faudit::Tensor& x) {
      if (x.size() != w.size()) throw std::runtime_error("input size does not match weights");
      double s = 0.0;
      for (std::size_t i = 0; i < w.size(); ++i) s += w[i] * x[i];
      const double p = std::clamp(s / total, 0.0, 1.0);
      return std::vector<double>{1.0 - p, p};
    };
  } else if (o.mode == "checkpoint") {
    std::shared_ptr<faudit::Classifier> model = faudit::load_model(o.model);
    m.n_classes = model->n_classes();
    m.predict = [model](const faudit::Tensor& x) { return faudit::predict_proba(*model, x); };
  } else {
    throw std::runtime_error("unknown mode '" + o.mode + "'");
  }
  return m;
}

/// Builds the response to one request line; malformed input yields an error
/// response echoing the id when one can be recovered.
bb::Response answer(const Model& model, const std::string& line) {
  bb::Response r;
  json j;
  try {
    j = json::parse(line);
  } catch (const json::exception&) {
    r.error = "malformed request";
    return r;
  }
  if (j.is_object() && j.contains("id") && j["id"].is_number_unsigned()) {
    r.id = j["id"].get<std::uint64_t>();
  }
  try {
    const auto shape = j.at("shape").get<std::vector<std::size_t>>();
    auto data = j.at("data").get<std::vector<double>>();
    if (!j.at("id").is_number_unsigned()) throw std::runtime_error("missing id");
    const std::size_t n = std::accumulate(shape.begin(), shape.end(), std::size_t{1},
                                          std::multiplies<>());
    if (shape.empty() || n != data.size()) throw std::runtime_error("shape does not match data");
    r.probs = model.predict(faudit::Tensor(faudit::Shape(shape.begin(), shape.end()), std::move(data)));
  } catch (const std::exception& e) {
    r.error = std::string("bad request: ") + e.what();
  }
  return r;
}

void serve(const Options& o, const Model& model, Session& s) {
  if (o.fault == "bad-handshake") {
    s.write_line("hello, this is not a handshake");
    return;
  }
  if (o.fault == "silent-handshake") {
    std::this_thread::sleep_for(std::chrono::hours(1));
    return;
  }
  s.write_line(bb::encode_handshake(model.n_classes, o.version));

  std::vector<bb::Response> pending;
  std::string line;
  auto flush = [&] {
    // "reverse" answers each batch last-first.
    if (o.fault == "reverse") std::reverse(pending.begin(), pending.end());
    for (auto& r : pending) s.write_line(bb::encode_response(r));
    pending.clear();
  };
  while (s.read_line(line)) {
    if (o.delay_ms > 0) std::this_thread::sleep_for(std::chrono::milliseconds(o.delay_ms));
    auto r = answer(model, line);
    if (o.fault == "silent") continue;
    if (o.fault == "malformed") {
      s.write_line("{not json");
      continue;
    }
    if (o.fault == "error" && !r.error) {
      r.probs.clear();
      r.error = "injected failure";
    }
    if (o.fault == "bad-sum" && !r.error) {
      for (double& p : r.probs) p *= 0.5;
    }
    if (o.fault == "wrong-length" && !r.error) r.probs.push_back(0.0);
    if (o.fault == "exit") return;
    pending.push_back(std::move(r));
    if (pending.size() >= o.batch) flush();
  }
  flush();
}

int listen_and_serve(const Options& o, const Model& model, const std::string& log_path) {
  const int fd = ::socket(AF_INET, SOCK_STREAM, 0);
  int one = 1;
  ::setsockopt(fd, SOL_SOCKET, SO_REUSEADDR, &one, sizeof one);
  sockaddr_in addr{};
  addr.sin_family = AF_INET;
  addr.sin_addr.s_addr = htonl(INADDR_LOOPBACK);
  addr.sin_port = htons(static_cast<std::uint16_t>(o.listen_port));
  if (::bind(fd, reinterpret_cast<sockaddr*>(&addr), sizeof addr) != 0 || ::listen(fd, 1) != 0) {
    std::perror("faud_test_adapter: listen");
    return 1;
  }
  socklen_t len = sizeof addr;
  ::getsockname(fd, reinterpret_cast<sockaddr*>(&addr), &len);
  // The bound port on stdout lets callers use --listen 0.
  std::printf("%u\n", static_cast<unsigned>(ntohs(addr.sin_port)));
  std::fflush(stdout);
  const int client = ::accept(fd, nullptr, nullptr);
  ::close(fd);
  if (client < 0) return 1;
  FILE* in = ::fdopen(client, "r");
  FILE* out = ::fdopen(::dup(client), "w");
  Session s(in, out, log_path);
  serve(o, model, s);
  std::fclose(in);
  std::fclose(out);
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  Options o;
  CLI::App app{"Test adapter for the faud-bb protocol"};
  app.add_option("--mode", o.mode, "constant | linear | checkpoint")
      ->check(CLI::IsMember({"constant", "linear", "checkpoint"}));
  app.add_option("--classes", o.classes, "Classes of the constant model")->check(CLI::PositiveNumber);
  app.add_option("--weights", o.weights, "Whitespace-separated non-negative weights (linear)");
  app.add_option("--model", o.model, "Model checkpoint (checkpoint)");
  app.add_option("--protocol-version", o.version, "Version announced in the handshake");
  app.add_option("--fault", o.fault, "Injected misbehaviour")
      ->check(CLI::IsMember({"none", "bad-handshake", "silent-handshake", "silent", "malformed",
                             "error", "bad-sum", "wrong-length", "reverse", "exit"}));
  app.add_option("--batch", o.batch, "Requests collected before answering")->check(CLI::PositiveNumber);
  app.add_option("--delay-ms", o.delay_ms, "Delay before answering each request");
  app.add_option("--listen", o.listen_port, "Serve one TCP client on this loopback port");
  CLI11_PARSE(app, argc, argv);

  const char* env_log = std::getenv("FAUD_BB_LOG");
  const std::string log_path = env_log ? std::string(env_log) + ".adapter" : std::string();
  try {
    const auto model = make_served_model(o);
    if (o.listen_port >= 0) return listen_and_serve(o, model, log_path);
    Session s(stdin, stdout, log_path);
    serve(o, model, s);
  } catch (const std::exception& e) {
    std::cerr << "faud_test_adapter: " << e.what() << '\n';
    return 1;
  }
  return 0;
}
