#include "timbre/service.hpp"

#include <atomic>
#include <chrono>
#include <condition_variable>
#include <cstdlib>
#include <deque>
#include <fstream>
#include <future>
#include <thread>

#include <boost/asio.hpp>
#include <boost/beast/core.hpp>
#include <boost/beast/http.hpp>
#include <boost/beast/websocket.hpp>
#include <spdlog/spdlog.h>

#include "timbre/artifacts.hpp"
#include "timbre/wav.hpp"

namespace timbre::service {

namespace beast = boost::beast;
namespace http = beast::http;
namespace websocket = beast::websocket;
namespace net = boost::asio;
using tcp = net::ip::tcp;
using nlohmann::json;
using session::ErrorCode;
using session::SessionError;

EnvLookup process_env() {
  return [](const char* name) -> std::optional<std::string> {
    const char* v = std::getenv(name);
    if (v == nullptr || *v == '\0') return std::nullopt;
    return std::string(v);
  };
}

Config resolve_config(std::optional<unsigned short> port_flag, std::optional<std::filesystem::path> surface_flag,
                      Config base, const EnvLookup& env) {
  if (port_flag) {
    base.port = *port_flag;
  } else if (const auto p = env("PORT")) {
    try {
      std::size_t used = 0;
      const unsigned long v = std::stoul(*p, &used);
      if (used != p->size() || v > 65535) throw std::out_of_range("port");
      base.port = static_cast<unsigned short>(v);
    } catch (const std::exception&) {
      throw std::invalid_argument("PORT is not a valid port: '" + *p + "'");
    }
  }
  if (surface_flag) {
    base.surface_path = *surface_flag;
  } else if (const auto s = env("SURFACE_PATH")) {
    base.surface_path = *s;
  }
  return base;
}

RenderRequest parse_render_request(const json& body) {
  if (!body.is_object()) throw RequestError("request body must be a JSON object");
  RenderRequest r;
  auto number = [&](const char* key) {
    if (!body.contains(key) || !body.at(key).is_number()) throw RequestError(std::string("'") + key + "' must be a number");
    const double v = body.at(key).get<double>();
    if (!std::isfinite(v)) throw RequestError(std::string("'") + key + "' must be finite");
    return v;
  };
  auto integer = [&](const char* key, long lo, long hi) {
    const json& v = body.at(key);
    if (!v.is_number_integer()) throw RequestError(std::string("'") + key + "' must be an integer");
    const long x = v.get<long>();
    if (x < lo || x > hi)
      throw RequestError(std::string("'") + key + "' outside [" + std::to_string(lo) + ", " + std::to_string(hi) + "]");
    return x;
  };
  r.position = {number("x"), number("y")};
  if (body.contains("mode")) {
    if (!body.at("mode").is_string()) throw RequestError("'mode' must be a string");
    const std::string m = body.at("mode").get<std::string>();
    if (m == "nearest") {
      r.mode = RenderRequest::Mode::Nearest;
    } else if (m == "interpolate8") {
      r.mode = RenderRequest::Mode::Interpolate8;
    } else {
      throw RequestError("'mode' must be 'nearest' or 'interpolate8'");
    }
  }
  if (body.contains("octave")) r.octave = static_cast<int>(integer("octave", kMinOctave, kMaxOctave));
  if (body.contains("pitch_offset"))
    r.pitch_offset = static_cast<int>(integer("pitch_offset", -session::kMaxPitchOffset, session::kMaxPitchOffset));
  if (body.contains("duration")) {
    r.duration = number("duration");
    if (!(r.duration > 0.0) || r.duration > kMaxRenderDuration) throw RequestError("'duration' must be in (0, 10] seconds");
  }
  if (body.contains("seed")) {
    const json& s = body.at("seed");
    if (!s.is_number_unsigned() && !(s.is_number_integer() && s.get<long long>() >= 0))
      throw RequestError("'seed' must be a non-negative integer");
    r.seed = s.get<std::uint64_t>();
  }
  return r;
}

RenderResult render_at(const surface::TimbreSurface& surface, const RenderRequest& req) {
  if (surface.empty()) throw std::logic_error("no surface loaded");
  const surface::SurfacePoint& near = *surface.nearest(req.position, 1).front();
  RenderResult out;
  out.point_id = near.id;
  if (req.mode == RenderRequest::Mode::Nearest) {
    out.params = near.params;
  } else {
    if (surface.size() < surface::kInterpolationNeighbours) throw RequestError("surface has fewer than 8 points");
    out.params = surface.interpolate(req.position, surface::kInterpolationNeighbours);
  }
  out.settings = RenderSettings{req.octave.value_or(near.octave), req.duration, kDefaultRate, req.seed, req.pitch_offset};
  const SoundSample s = render(out.params, out.settings);
  out.wav = encode_wav(s.samples, s.sample_rate);
  return out;
}

namespace {

int hex_value(char c) {
  if (c >= '0' && c <= '9') return c - '0';
  if (c >= 'a' && c <= 'f') return c - 'a' + 10;
  if (c >= 'A' && c <= 'F') return c - 'A' + 10;
  return -1;
}

std::string url_decode(std::string_view s) {
  std::string out;
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (s[i] == '+') {
      out += ' ';
    } else if (s[i] == '%' && i + 2 < s.size() && hex_value(s[i + 1]) >= 0 && hex_value(s[i + 2]) >= 0) {
      out += static_cast<char>(hex_value(s[i + 1]) * 16 + hex_value(s[i + 2]));
      i += 2;
    } else {
      out += s[i];
    }
  }
  return out;
}

double now_seconds() {
  return std::chrono::duration<double>(std::chrono::system_clock::now().time_since_epoch()).count();
}

}  // namespace

std::map<std::string, std::string> parse_query(std::string_view target) {
  std::map<std::string, std::string> out;
  const std::size_t q = target.find('?');
  if (q == std::string_view::npos) return out;
  std::string_view rest = target.substr(q + 1);
  while (!rest.empty()) {
    const std::size_t amp = rest.find('&');
    const std::string_view pair = rest.substr(0, amp);
    rest = amp == std::string_view::npos ? std::string_view{} : rest.substr(amp + 1);
    if (pair.empty()) continue;
    const std::size_t eq = pair.find('=');
    out[url_decode(pair.substr(0, eq))] = eq == std::string_view::npos ? "" : url_decode(pair.substr(eq + 1));
  }
  return out;
}

std::string snapshot_message(const std::string& session, const session::State& state) {
  return json{{"v", session::kProtocolVersion}, {"kind", "snapshot"},       {"session", session},
              {"seq", state.seq},               {"hash", session::state_hash(state)}, {"state", session::state_to_json(state)}}
      .dump();
}

std::string event_message(const session::Record& record, const std::string& hash) {
  return json{{"v", session::kProtocolVersion}, {"kind", "event"}, {"seq", record.seq},
              {"user", record.user},            {"event", session::event_to_json(record.event)}, {"hash", hash}}
      .dump();
}

std::string error_message(ErrorCode code, const std::string& what) {
  return json{{"v", session::kProtocolVersion}, {"kind", "error"}, {"code", std::string(session::to_string(code))},
              {"message", what}}
      .dump();
}

// ---- session hub -----------------------------------------------------------

struct SessionHub::Room {
  std::mutex mutex;
  session::State state;
  struct Member {
    std::string user;
    Sink sink;
  };
  std::map<std::uint64_t, Member> members;
  std::ofstream log;

  void broadcast(const std::string& msg) {
    for (auto& [id, m] : members) {
      try {
        m.sink(msg);
      } catch (const std::exception& e) {
        spdlog::warn("dropping message for {}: {}", m.user, e.what());
      }
    }
  }

  /// Applies, logs and broadcasts; throws SessionError with the state unchanged.
  void commit(const std::string& user, const session::Event& ev, const surface::TimbreSurface* surface) {
    session::State next = session::apply_event(state, user, ev, surface);
    const session::Record rec{next.seq, now_seconds(), user, ev};
    state = std::move(next);
    if (log.is_open()) log << session::log_line(rec) << std::flush;
    broadcast(event_message(rec, session::state_hash(state)));
  }
};

SessionHub::SessionHub(const surface::TimbreSurface* surface, std::filesystem::path log_dir)
    : surface_(surface), log_dir_(std::move(log_dir)) {}

SessionHub::~SessionHub() = default;

SessionHub::Room& SessionHub::room(const std::string& session) {
  std::lock_guard lock(mutex_);
  auto& slot = rooms_[session];
  if (!slot) {
    slot = std::make_unique<Room>();
    if (!log_dir_.empty()) {
      std::filesystem::create_directories(log_dir_);
      slot->log.open(log_dir_ / (session + ".jsonl"), std::ios::app);
      if (!slot->log) throw ArtifactError("cannot open session log for '" + session + "'");
    }
  }
  return *slot;
}

SessionHub::Joined SessionHub::join(const std::string& session, const std::string& user, Sink sink) {
  if (session.empty() || session.size() > session::kMaxIdLength ||
      session.find_first_of("/\\.") != std::string::npos)
    throw SessionError(ErrorCode::RangeViolation, "invalid session id");
  Room& r = room(session);
  std::lock_guard lock(r.mutex);
  r.commit(user, session::Join{}, surface_);
  Joined j;
  {
    std::lock_guard hub(mutex_);
    j.member = next_member_++;
  }
  j.snapshot = snapshot_message(session, r.state);
  sink(j.snapshot);
  r.members[j.member] = Room::Member{user, std::move(sink)};
  return j;
}

void SessionHub::leave(const std::string& session, std::uint64_t member) {
  Room& r = room(session);
  std::lock_guard lock(r.mutex);
  const auto it = r.members.find(member);
  if (it == r.members.end()) return;
  const std::string user = it->second.user;
  r.members.erase(it);
  try {
    r.commit(user, session::Leave{}, surface_);
  } catch (const SessionError& e) {
    spdlog::warn("leave of {} rejected: {}", user, e.what());
  }
}

std::optional<std::string> SessionHub::submit(const std::string& session, std::uint64_t member, std::string_view message) {
  json msg;
  try {
    msg = json::parse(message);
  } catch (const json::exception&) {
    throw SessionError(ErrorCode::Malformed, "message is not JSON");
  }
  if (!msg.is_object() || !msg.contains("v") || msg.at("v") != session::kProtocolVersion)
    throw SessionError(ErrorCode::Malformed, "missing or unsupported protocol version");
  if (!msg.contains("event")) throw SessionError(ErrorCode::Malformed, "message has no event");
  const session::Event ev = session::event_from_json(msg.at("event"));

  Room& r = room(session);
  std::lock_guard lock(r.mutex);
  const auto it = r.members.find(member);
  if (it == r.members.end()) throw SessionError(ErrorCode::NotJoined, "connection is not a session member");
  if (std::holds_alternative<session::Join>(ev) || std::holds_alternative<session::Leave>(ev))
    return error_message(ErrorCode::RangeViolation, "join and leave follow the connection");
  try {
    r.commit(it->second.user, ev, surface_);
  } catch (const SessionError& e) {
    return error_message(e.code(), e.what());
  }
  return std::nullopt;
}

std::optional<session::State> SessionHub::state(const std::string& session) const {
  Room* r = nullptr;
  {
    std::lock_guard lock(mutex_);
    const auto it = rooms_.find(session);
    if (it == rooms_.end()) return std::nullopt;
    r = it->second.get();
  }
  std::lock_guard lock(r->mutex);
  return r->state;
}

// ---- server ----------------------------------------------------------------

struct Server::Impl {
  Config cfg;
  std::optional<surface::TimbreSurface> surface;
  std::string surface_doc;
  std::string surface_etag;
  std::unique_ptr<SessionHub> hub;

  net::io_context ioc{1};
  tcp::acceptor acceptor{ioc};
  net::thread_pool renders;
  std::thread io_thread;
  std::mutex state_mutex;
  std::condition_variable stopped_cv;
  bool running = false;

  Impl(Config c, std::optional<surface::TimbreSurface> s)
      : cfg(std::move(c)), surface(std::move(s)), renders(std::max<std::size_t>(cfg.render_workers, 1)) {
    if (surface) {
      surface_doc = surface::export_json(*surface);
      surface_etag = "\"" + content_hash(surface_doc) + "\"";
    }
    hub = std::make_unique<SessionHub>(surface ? &*surface : nullptr, cfg.log_dir);
  }

  void accept();
};

namespace {

using Response = http::response<http::string_body>;

Response make_response(const http::request<http::string_body>& req, http::status status, std::string body,
                       std::string_view type = "application/json") {
  Response res{status, req.version()};
  res.set(http::field::server, "timbre");
  res.set(http::field::content_type, std::string(type));
  res.keep_alive(req.keep_alive());
  res.body() = std::move(body);
  res.prepare_payload();
  return res;
}

Response json_error(const http::request<http::string_body>& req, http::status status, const std::string& what) {
  return make_response(req, status, json{{"error", what}}.dump());
}

class WsSession : public std::enable_shared_from_this<WsSession> {
 public:
  WsSession(tcp::socket socket, SessionHub& hub) : ws_(std::move(socket)), hub_(hub) {}

  void run(http::request<http::string_body> req) {
    req_ = std::move(req);
    ws_.set_option(websocket::stream_base::timeout::suggested(beast::role_type::server));
    ws_.text(true);
    ws_.async_accept(req_, [self = shared_from_this()](beast::error_code ec) { self->on_accept(ec); });
  }

 private:
  void on_accept(beast::error_code ec) {
    if (ec) return;
    const auto q = parse_query(std::string_view(req_.target().data(), req_.target().size()));
    const auto s = q.find("session"), u = q.find("user");
    if (s == q.end() || u == q.end()) return close_with(kCloseBadQuery, "session and user are required");
    session_ = s->second;
    std::weak_ptr<WsSession> weak = shared_from_this();
    auto executor = ws_.get_executor();
    try {
      member_ = hub_.join(session_, u->second, [weak, executor](const std::string& msg) {
                      net::post(executor, [weak, msg] {
                        if (auto self = weak.lock()) self->send(msg);
                      });
                    }).member;
    } catch (const SessionError& e) {
      switch (e.code()) {
        case ErrorCode::SessionFull: return close_with(kCloseSessionFull, "session_full");
        case ErrorCode::Duplicate: return close_with(kCloseDuplicateUser, "duplicate_user");
        default: return close_with(kCloseBadQuery, e.what());
      }
    }
    joined_ = true;
    read();
  }

  void read() {
    ws_.async_read(buffer_, [self = shared_from_this()](beast::error_code ec, std::size_t) { self->on_read(ec); });
  }

  void on_read(beast::error_code ec) {
    if (ec) return finish();
    const std::string text = beast::buffers_to_string(buffer_.data());
    buffer_.consume(buffer_.size());
    if (!ws_.got_text()) return close_with(kCloseProtocolError, "binary frames are not supported");
    try {
      if (auto reply = hub_.submit(session_, member_, text)) send(*reply);
    } catch (const SessionError& e) {
      return close_with(kCloseProtocolError, std::string(session::to_string(e.code())));
    }
    read();
  }

  void send(const std::string& msg) {
    if (closing_) return;
    queue_.push_back(msg);
    if (!writing_) write_next();
  }

  void write_next() {
    if (queue_.empty()) {
      writing_ = false;
      if (closing_) do_close();
      return;
    }
    writing_ = true;
    ws_.async_write(net::buffer(queue_.front()), [self = shared_from_this()](beast::error_code ec, std::size_t) {
      self->queue_.pop_front();
      if (ec) {
        self->queue_.clear();
        self->writing_ = false;
        return;
      }
      self->write_next();
    });
  }

  void close_with(std::uint16_t code, std::string reason) {
    if (reason.size() > 120) reason.resize(120);
    close_reason_ = websocket::close_reason(static_cast<websocket::close_code>(code), reason);
    closing_ = true;
    if (!writing_) do_close();
  }

  void do_close() {
    ws_.async_close(close_reason_, [self = shared_from_this()](beast::error_code) { self->finish(); });
  }

  void finish() {
    if (joined_) {
      joined_ = false;
      hub_.leave(session_, member_);
    }
  }

  websocket::stream<beast::tcp_stream> ws_;
  SessionHub& hub_;
  http::request<http::string_body> req_;
  beast::flat_buffer buffer_;
  std::deque<std::string> queue_;
  bool writing_ = false;
  bool closing_ = false;
  bool joined_ = false;
  websocket::close_reason close_reason_;
  std::string session_;
  std::uint64_t member_ = 0;
};

class HttpSession : public std::enable_shared_from_this<HttpSession> {
 public:
  HttpSession(tcp::socket socket, Server::Impl& srv) : stream_(std::move(socket)), srv_(srv) {}

  void run() { read(); }

 private:
  void read() {
    parser_.emplace();
    parser_->body_limit(1 << 20);
    stream_.expires_after(std::chrono::seconds(60));
    http::async_read(stream_, buffer_, *parser_,
                     [self = shared_from_this()](beast::error_code ec, std::size_t) { self->on_read(ec); });
  }

  void on_read(beast::error_code ec) {
    if (ec) {
      stream_.socket().shutdown(tcp::socket::shutdown_send, ec);
      return;
    }
    auto req = parser_->release();
    if (websocket::is_upgrade(req)) {
      if (req.target().substr(0, req.target().find('?')) != "/session") {
        return reply(json_error(req, http::status::not_found, "no websocket endpoint here"));
      }
      stream_.expires_never();
      std::make_shared<WsSession>(stream_.release_socket(), *srv_.hub)->run(std::move(req));
      return;
    }
    route(std::move(req));
  }

  void route(http::request<http::string_body> req) {
    const std::string target(req.target().substr(0, req.target().find('?')));
    if (target == "/health") {
      if (req.method() != http::verb::get) return reply(json_error(req, http::status::method_not_allowed, "use GET"));
      return reply(make_response(req, http::status::ok,
                                 json{{"status", "ok"},
                                      {"surface", srv_.surface.has_value()},
                                      {"points", srv_.surface ? srv_.surface->size() : 0}}
                                     .dump()));
    }
    if (target == "/surface") {
      if (req.method() != http::verb::get) return reply(json_error(req, http::status::method_not_allowed, "use GET"));
      if (!srv_.surface) return reply(json_error(req, http::status::service_unavailable, "no surface loaded"));
      if (req[http::field::if_none_match] == srv_.surface_etag) {
        Response res = make_response(req, http::status::not_modified, "");
        res.set(http::field::etag, srv_.surface_etag);
        return reply(std::move(res));
      }
      Response res = make_response(req, http::status::ok, srv_.surface_doc);
      res.set(http::field::etag, srv_.surface_etag);
      res.set(http::field::cache_control, "no-cache");
      return reply(std::move(res));
    }
    if (target == "/render") {
      if (req.method() != http::verb::post) return reply(json_error(req, http::status::method_not_allowed, "use POST"));
      if (!srv_.surface) return reply(json_error(req, http::status::service_unavailable, "no surface loaded"));
      RenderRequest rr;
      try {
        rr = parse_render_request(json::parse(req.body()));
      } catch (const json::exception& e) {
        return reply(json_error(req, http::status::bad_request, std::string("invalid JSON: ") + e.what()));
      } catch (const RequestError& e) {
        return reply(json_error(req, http::status::bad_request, e.what()));
      }
      net::post(srv_.renders, [self = shared_from_this(), req = std::move(req), rr]() mutable {
        Response res;
        try {
          const RenderResult r = render_at(*self->srv_.surface, rr);
          res = make_response(req, http::status::ok, r.wav, "audio/wav");
          res.set("X-Timbre-Params", json(r.params.values()).dump());
          res.set("X-Timbre-Point", r.point_id);
          res.set("X-Timbre-Octave", std::to_string(r.settings.octave));
        } catch (const RequestError& e) {
          res = json_error(req, http::status::bad_request, e.what());
        } catch (const std::exception& e) {
          res = json_error(req, http::status::internal_server_error, e.what());
        }
        net::post(self->stream_.get_executor(), [self, res = std::move(res)]() mutable { self->reply(std::move(res)); });
      });
      return;
    }
    reply(json_error(req, http::status::not_found, "unknown endpoint " + target));
  }

  void reply(Response res) {
    auto sp = std::make_shared<Response>(std::move(res));
    http::async_write(stream_, *sp, [self = shared_from_this(), sp](beast::error_code ec, std::size_t) {
      if (ec) return;
      if (sp->need_eof()) {
        self->stream_.socket().shutdown(tcp::socket::shutdown_send, ec);
        return;
      }
      self->read();
    });
  }

  beast::tcp_stream stream_;
  Server::Impl& srv_;
  beast::flat_buffer buffer_;
  std::optional<http::request_parser<http::string_body>> parser_;
};

}  // namespace

void Server::Impl::accept() {
  acceptor.async_accept(net::make_strand(ioc), [this](beast::error_code ec, tcp::socket socket) {
    if (ec) {
      if (ec != net::error::operation_aborted) spdlog::warn("accept failed: {}", ec.message());
      if (!acceptor.is_open()) return;
    } else {
      std::make_shared<HttpSession>(std::move(socket), *this)->run();
    }
    accept();
  });
}

Server::Server(Config cfg) : Server(cfg, cfg.surface_path.empty() ? std::nullopt : std::optional(surface::load(cfg.surface_path))) {}

Server::Server(Config cfg, std::optional<surface::TimbreSurface> s) : impl_(std::make_unique<Impl>(std::move(cfg), std::move(s))) {}

Server::~Server() { stop(); }

unsigned short Server::start() {
  std::lock_guard lock(impl_->state_mutex);
  if (impl_->running) return impl_->acceptor.local_endpoint().port();
  const tcp::endpoint ep{net::ip::make_address(impl_->cfg.address), impl_->cfg.port};
  impl_->acceptor.open(ep.protocol());
  impl_->acceptor.set_option(net::socket_base::reuse_address(true));
  impl_->acceptor.bind(ep);
  impl_->acceptor.listen(net::socket_base::max_listen_connections);
  impl_->accept();
  impl_->running = true;
  impl_->io_thread = std::thread([this] { impl_->ioc.run(); });
  const unsigned short port = impl_->acceptor.local_endpoint().port();
  spdlog::info("listening on {}:{}", impl_->cfg.address, port);
  return port;
}

void Server::stop() {
  {
    std::lock_guard lock(impl_->state_mutex);
    if (!impl_->running) return;
    impl_->running = false;
  }
  net::post(impl_->ioc, [this] {
    beast::error_code ec;
    impl_->acceptor.close(ec);
  });
  impl_->renders.join();
  impl_->ioc.stop();
  if (impl_->io_thread.joinable()) impl_->io_thread.join();
  impl_->stopped_cv.notify_all();
}

void Server::wait() {
  std::unique_lock lock(impl_->state_mutex);
  impl_->stopped_cv.wait(lock, [this] { return !impl_->running; });
}

}  // namespace timbre::service
