#include "msl/service/server.hpp"

#include "msl/lambda_opt/lambda_opt.hpp"
#include "msl/metrics/metrics.hpp"

#include <httplib.h>
#include <json.hpp>

#include <cmath>
#include <cstdio>
#include <random>

namespace msl::service {

using nlohmann::json;

namespace {

constexpr std::size_t kMaxTombstones = 4096;

// Thrown inside handlers; carries the HTTP status for the error reply.
struct HttpError : std::runtime_error {
  int status;
  HttpError(int s, const std::string& message) : std::runtime_error(message), status(s) {}
};

Reply ok(const json& j) { return {200, j.dump()}; }
Reply error_reply(int status, const std::string& message) { return {status, json{{"error", message}}.dump()}; }

template <typename F>
Reply guarded(F&& f) {
  try {
    return f();
  } catch (const HttpError& e) {
    return error_reply(e.status, e.what());
  } catch (const json::exception& e) {
    return error_reply(400, std::string("malformed request: ") + e.what());
  } catch (const MissingModalityError& e) {
    return error_reply(422, e.what());
  } catch (const std::invalid_argument& e) {
    return error_reply(400, e.what());
  } catch (const std::exception& e) {
    return error_reply(500, e.what());
  }
}

json parse_body(const std::string& body) {
  json j = json::parse(body, nullptr, false);
  if (j.is_discarded() || !j.is_object()) throw HttpError(400, "request body must be a JSON object");
  return j;
}

std::string session_field(const json& j) {
  if (!j.contains("session_id") || !j["session_id"].is_string()) throw HttpError(400, "missing string field 'session_id'");
  return j["session_id"].get<std::string>();
}

double unit_number(const json& v, const char* what) {
  if (!v.is_number()) throw HttpError(400, std::string(what) + " must be a number");
  const double x = v.get<double>();
  if (!(x >= 0.0 && x <= 1.0)) throw HttpError(400, std::string(what) + " outside [0, 1]");
  return x;
}

ImageF parse_map(const json& v) {
  if (!v.is_array() || v.empty() || !v[0].is_array()) throw HttpError(400, "lambda_map must be a 2D array");
  const Index h = static_cast<Index>(v.size()), w = static_cast<Index>(v[0].size());
  ImageF map(h, w);
  for (Index i = 0; i < h; ++i) {
    const json& row = v[static_cast<std::size_t>(i)];
    if (!row.is_array() || static_cast<Index>(row.size()) != w) throw HttpError(400, "lambda_map rows differ in length");
    for (Index j = 0; j < w; ++j) map(i, j) = static_cast<float>(unit_number(row[static_cast<std::size_t>(j)], "lambda_map entry"));
  }
  return map;
}

ModalitySelection parse_selection(const json& v) {
  if (v.is_string()) return parse_modalities(v.get<std::string>());
  if (!v.is_array()) throw HttpError(400, "modalities must be an array or a comma-separated string");
  ModalitySelection sel{false, false};
  for (const auto& item : v) {
    if (!item.is_string()) throw HttpError(400, "modalities entries must be strings");
    const auto one = parse_modalities(item.get<std::string>());
    sel.ct |= one.ct;
    sel.mri |= one.mri;
  }
  return sel;
}

json metrics_json(const ImageF& image, const ImageF& gt) {
  return {{"mae", metrics::mae(image, gt)}, {"ssim", metrics::ssim(image, gt)}, {"mi", metrics::mi_hist(image, gt)}};
}

json image_json(const ImageF& image, const std::string& format) {
  json out{{"width", image.cols()}, {"height", image.rows()}};
  if (format == "raw") {
    out["format"] = "mgt";
    out["image"] = base64_encode(image_mgt(image));
  } else {
    out["format"] = "png";
    out["image"] = base64_encode(encode_png(image));
  }
  return out;
}

bool safe_case_id(const std::string& id) {
  if (id.empty() || id == "." || id == "..") return false;
  return id.find_first_of("/\\") == std::string::npos;
}

}  // namespace

Service::Service(model::MslModel<float> model, std::string checkpoint_hash, ServiceConfig config)
    : model_(std::move(model)), checkpoint_hash_(std::move(checkpoint_hash)), config_(std::move(config)) {
  if (config_.max_sessions == 0) throw std::invalid_argument("max_sessions must be positive");
}

Reply Service::health() const { return ok({{"status", "ok"}, {"checkpoint_hash", checkpoint_hash_}}); }

std::string Service::new_session_id() {
  std::random_device device;
  char buf[33];
  for (int i = 0; i < 4; ++i) std::snprintf(buf + 8 * i, 9, "%08x", static_cast<unsigned>(device()));
  return buf;
}

void Service::retire(std::string id) {
  sessions_.erase(id);
  if (tombstones_.insert(id).second) tombstone_order_.push_back(id);
  while (tombstone_order_.size() > kMaxTombstones) {
    tombstones_.erase(tombstone_order_.front());
    tombstone_order_.pop_front();
  }
}

void Service::expire_idle(Clock::time_point now) {
  std::vector<std::string> stale;
  for (const auto& [id, s] : sessions_) {
    if (now - s->last_used > config_.idle_timeout) stale.push_back(id);
  }
  for (const auto& id : stale) retire(id);
}

std::shared_ptr<Service::Session> Service::acquire(const std::string& id) {
  std::lock_guard lock(mutex_);
  const auto now = config_.now();
  expire_idle(now);
  const auto it = sessions_.find(id);
  if (it == sessions_.end()) {
    if (tombstones_.count(id)) throw HttpError(409, "session expired: " + id);
    throw HttpError(404, "unknown session: " + id);
  }
  it->second->last_used = now;
  return it->second;
}

std::size_t Service::live_sessions() {
  std::lock_guard lock(mutex_);
  expire_idle(config_.now());
  return sessions_.size();
}

Reply Service::create_session(const std::string& body) {
  return guarded([&] {
    const json j = parse_body(body);
    std::filesystem::path dir;
    if (j.contains("case_dir")) {
      if (!j["case_dir"].is_string()) throw HttpError(400, "case_dir must be a string");
      dir = j["case_dir"].get<std::string>();
    } else if (j.contains("case_id")) {
      if (!j["case_id"].is_string()) throw HttpError(400, "case_id must be a string");
      const auto id = j["case_id"].get<std::string>();
      if (!safe_case_id(id)) throw HttpError(400, "invalid case_id");
      if (config_.data_dir.empty()) throw HttpError(404, "no data directory configured for case_id lookups");
      dir = config_.data_dir / id;
    } else {
      throw HttpError(400, "expected 'case_dir' or 'case_id'");
    }
    const ModalitySelection use = j.contains("modalities") ? parse_selection(j["modalities"]) : ModalitySelection{};
    if (!std::filesystem::is_directory(dir)) throw HttpError(404, "unknown case: " + dir.string());
    if (!std::filesystem::exists(dir / "sinogram.mgt") && !std::filesystem::exists(dir / "kspace.mgt")) {
      throw HttpError(422, "no sensory data: both modalities missing");
    }

    auto session = std::make_shared<Session>();
    try {
      session->data = training::load_case(dir);
      session->rep = case_representation(model_, session->data, use);
    } catch (const MissingModalityError&) {
      throw;
    } catch (const std::exception& e) {
      throw HttpError(422, e.what());
    }

    std::lock_guard lock(mutex_);
    const auto now = config_.now();
    expire_idle(now);
    while (sessions_.size() >= config_.max_sessions) {
      auto lru = sessions_.begin();
      for (auto it = sessions_.begin(); it != sessions_.end(); ++it) {
        if (it->second->last_used < lru->second->last_used) lru = it;
      }
      retire(lru->first);
    }
    std::string id;
    do id = new_session_id();
    while (sessions_.count(id) || tombstones_.count(id));
    session->last_used = now;
    sessions_[id] = session;
    return ok({{"session_id", id}, {"image_size", model_.config().image_size}});
  });
}

Reply Service::decode(const std::string& body, const std::string& format) {
  return guarded([&] {
    if (!format.empty() && format != "png" && format != "raw") throw HttpError(400, "format must be png or raw");
    const json j = parse_body(body);
    const bool has_scalar = j.contains("lambda"), has_map = j.contains("lambda_map");
    if (has_scalar == has_map) throw HttpError(400, "expected exactly one of 'lambda' or 'lambda_map'");
    // Validate the request before touching session state.
    const double scalar = has_scalar ? unit_number(j["lambda"], "lambda") : 0.0;
    const ImageF map = has_map ? parse_map(j["lambda_map"]) : ImageF();
    const Tensor<float> lambda_map = has_map ? lambda_map_tensor(map, model_.config().feature_size()) : Tensor<float>();

    const auto session = acquire(session_field(j));
    std::lock_guard lock(session->mutex);
    const ImageF image = has_map ? decode_image(model_, session->rep, lambda_map) : decode_image(model_, session->rep, scalar);
    json out = image_json(image, format);
    json m = json::object();
    if (session->data.pair.ct_gt.size() > 0) m["ct"] = metrics_json(image, session->data.pair.ct_gt);
    if (session->data.pair.mri_gt.size() > 0) m["mri"] = metrics_json(image, session->data.pair.mri_gt);
    out["metrics"] = m;
    return ok(out);
  });
}

Reply Service::optimize(const std::string& body) {
  return guarded([&] {
    const json j = parse_body(body);
    lambda_opt::LambdaOptConfig cfg;
    if (j.contains("alpha")) {
      if (!j["alpha"].is_number()) throw HttpError(400, "alpha must be a number");
      cfg.alpha = j["alpha"].get<double>();
      if (!(cfg.alpha >= 0.0) || !std::isfinite(cfg.alpha)) throw HttpError(400, "alpha must be finite and >= 0");
    }
    if (j.contains("iters")) {
      if (!j["iters"].is_number_integer()) throw HttpError(400, "iters must be an integer");
      const auto iters = j["iters"].get<long long>();
      if (iters < 0 || iters > config_.max_optimize_iterations) {
        throw HttpError(400, "iters must be in [0, " + std::to_string(config_.max_optimize_iterations) + "]");
      }
      cfg.iterations = static_cast<int>(iters);
    }
    const auto session = acquire(session_field(j));
    std::lock_guard lock(session->mutex);
    const auto result = lambda_opt::optimize_lambda_map(model_, session->rep, cfg);
    const ImageF image = decode_image(model_, session->rep, result.map);

    const Index h = result.map.dim(2), w = result.map.dim(3);
    json rows = json::array();
    for (Index i = 0; i < h; ++i) {
      json row = json::array();
      for (Index k = 0; k < w; ++k) row.push_back(result.map.values()[i * w + k]);
      rows.push_back(std::move(row));
    }
    json out = image_json(image, "png");
    out["lambda_map"] = std::move(rows);
    out["objective_trace"] = result.trace;
    out["objective"] = result.objective;
    out["initial_objective"] = result.initial_objective;
    return ok(out);
  });
}

void install_routes(httplib::Server& server, Service& service) {
  auto send = [](httplib::Response& res, const Reply& r) {
    res.status = r.status;
    res.set_content(r.body, "application/json");
  };
  server.Get("/v1/health", [&service, send](const httplib::Request&, httplib::Response& res) { send(res, service.health()); });
  server.Post("/v1/session", [&service, send](const httplib::Request& req, httplib::Response& res) {
    send(res, service.create_session(req.body));
  });
  server.Post("/v1/decode", [&service, send](const httplib::Request& req, httplib::Response& res) {
    send(res, service.decode(req.body, req.get_param_value("format")));
  });
  server.Post("/v1/optimize", [&service, send](const httplib::Request& req, httplib::Response& res) {
    send(res, service.optimize(req.body));
  });
  server.set_exception_handler([](const httplib::Request&, httplib::Response& res, std::exception_ptr ep) {
    std::string message = "internal error";
    try {
      std::rethrow_exception(ep);
    } catch (const std::exception& e) {
      message = e.what();
    } catch (...) {
    }
    res.status = 500;
    res.set_content(json{{"error", message}}.dump(), "application/json");
  });
}

}  // namespace msl::service
