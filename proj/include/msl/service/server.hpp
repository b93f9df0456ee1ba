#pragma once

#include "msl/model/model.hpp"
#include "msl/service/inference.hpp"

#include <chrono>
#include <deque>
#include <filesystem>
#include <functional>
#include <map>
#include <memory>
#include <mutex>
#include <set>
#include <string>

namespace httplib {
class Server;
}

namespace msl::service {

using Clock = std::chrono::steady_clock;

struct ServiceConfig {
  std::filesystem::path data_dir;  // case_id lookups resolve below this directory
  std::chrono::milliseconds idle_timeout = std::chrono::minutes(15);
  std::size_t max_sessions = 64;
  int max_optimize_iterations = 5000;
  std::function<Clock::time_point()> now = [] { return Clock::now(); };
};

struct Reply {
  int status = 200;
  std::string body;  // JSON
};

// Transport-independent API handlers; every reply body is JSON, errors as {"error": ...}.
class Service {
 public:
  Service(model::MslModel<float> model, std::string checkpoint_hash, ServiceConfig config = {});

  Reply health() const;
  Reply create_session(const std::string& body);
  Reply decode(const std::string& body, const std::string& format);
  Reply optimize(const std::string& body);

  std::size_t live_sessions();
  const model::MslModel<float>& model() const { return model_; }

 private:
  struct Session {
    std::mutex mutex;
    training::Case data;
    Tensor<float> rep;
    Clock::time_point last_used;
  };
  // Looks up a live session and refreshes its idle clock; throws on unknown or expired ids.
  std::shared_ptr<Session> acquire(const std::string& id);
  void expire_idle(Clock::time_point now);
  void retire(std::string id);
  std::string new_session_id();

  model::MslModel<float> model_;
  std::string checkpoint_hash_;
  ServiceConfig config_;
  std::mutex mutex_;
  std::map<std::string, std::shared_ptr<Session>> sessions_;
  std::set<std::string> tombstones_;
  std::deque<std::string> tombstone_order_;
};

// Routes /v1/* onto the service.
void install_routes(httplib::Server& server, Service& service);

}  // namespace msl::service
