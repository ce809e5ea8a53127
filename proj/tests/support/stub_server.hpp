#pragma once

#include <atomic>
#include <functional>
#include <stdexcept>
#include <string>
#include <thread>

#include <httplib.h>
#include <json.hpp>

namespace crest::testing {

// Local completions endpoint with instrumentation: tracks total requests and
// the peak number of concurrently executing handlers.
class StubServer {
 public:
  using Handler = std::function<void(const httplib::Request&, httplib::Response&)>;

  explicit StubServer(Handler handler) : handler_(std::move(handler)) {
    server_.new_task_queue = [] { return new httplib::ThreadPool(24); };
    server_.Post("/v1/completions", [this](const httplib::Request& req, httplib::Response& res) {
      const int now = ++in_flight_;
      int prev = peak_.load();
      while (now > prev && !peak_.compare_exchange_weak(prev, now)) {
      }
      ++total_;
      handler_(req, res);
      --in_flight_;
    });
    port_ = server_.bind_to_any_port("127.0.0.1");
    if (port_ <= 0) throw std::runtime_error("stub server could not bind a port");
    thread_ = std::thread([this] { server_.listen_after_bind(); });
    server_.wait_until_ready();
  }

  ~StubServer() {
    server_.stop();
    if (thread_.joinable()) thread_.join();
  }

  StubServer(const StubServer&) = delete;
  StubServer& operator=(const StubServer&) = delete;

  std::string base_url() const { return "http://127.0.0.1:" + std::to_string(port_) + "/v1"; }
  int total_requests() const { return total_.load(); }
  int peak_concurrency() const { return peak_.load(); }

 private:
  Handler handler_;
  httplib::Server server_;
  std::thread thread_;
  int port_ = 0;
  std::atomic<int> in_flight_{0};
  std::atomic<int> peak_{0};
  std::atomic<int> total_{0};
};

// Minimal well-formed completions response.
inline std::string completions_body(const std::vector<std::string>& texts) {
  nlohmann::json resp;
  resp["choices"] = nlohmann::json::array();
  for (const auto& t : texts) {
    nlohmann::json choice;
    choice["text"] = t;
    choice["finish_reason"] = "stop";
    resp["choices"].push_back(std::move(choice));
  }
  resp["usage"] = {{"prompt_tokens", 1}, {"completion_tokens", 1}};
  return resp.dump();
}

}  // namespace crest::testing
