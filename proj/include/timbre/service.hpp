#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <stdexcept>
#include <string>
#include <string_view>

#include <nlohmann/json.hpp>

#include "timbre/session.hpp"
#include "timbre/surface.hpp"
#include "timbre/synth.hpp"

namespace timbre::service {

inline constexpr double kMaxRenderDuration = 10.0;
inline constexpr unsigned short kDefaultPort = 8080;

/// WebSocket close codes.
inline constexpr std::uint16_t kCloseProtocolError = 4000;
inline constexpr std::uint16_t kCloseSessionFull = 4001;
inline constexpr std::uint16_t kCloseDuplicateUser = 4002;
inline constexpr std::uint16_t kCloseBadQuery = 4003;

struct Config {
  std::string address = "127.0.0.1";
  unsigned short port = kDefaultPort;
  std::filesystem::path surface_path;
  std::filesystem::path corpus_dir;
  /// Session event logs are appended to <log_dir>/<session>.jsonl when set.
  std::filesystem::path log_dir;
  std::size_t render_workers = 2;
};

using EnvLookup = std::function<std::optional<std::string>(const char*)>;
EnvLookup process_env();

/// Flags win over PORT / SURFACE_PATH, which win over defaults.
Config resolve_config(std::optional<unsigned short> port_flag, std::optional<std::filesystem::path> surface_flag,
                      Config base = {}, const EnvLookup& env = process_env());

class RequestError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

struct RenderRequest {
  enum class Mode { Nearest, Interpolate8 };
  surface::Point2 position{};
  Mode mode = Mode::Nearest;
  /// Defaults to the octave of the nearest surface point.
  std::optional<int> octave;
  int pitch_offset = 0;
  double duration = kDefaultDuration;
  std::uint64_t seed = 0;
};

/// Throws RequestError on any schema or range violation.
RenderRequest parse_render_request(const nlohmann::json& body);

struct RenderResult {
  ParameterVector params;
  std::string point_id;  // nearest point
  RenderSettings settings;
  std::string wav;
};

/// Stateless: the same request always yields the same bytes.
RenderResult render_at(const surface::TimbreSurface& surface, const RenderRequest& req);

/// Decoded query string of a request target ("/session?session=a&user=b").
std::map<std::string, std::string> parse_query(std::string_view target);

/// A live session: one ordered event queue, broadcast to every member.
class SessionHub {
 public:
  using Sink = std::function<void(const std::string& message)>;

  explicit SessionHub(const surface::TimbreSurface* surface = nullptr, std::filesystem::path log_dir = {});
  ~SessionHub();

  struct Joined {
    std::uint64_t member = 0;
    std::string snapshot;
  };
  /// Applies a join and broadcasts it. The newcomer's sink receives the
  /// snapshot before any later event; it is also returned.
  /// Throws session::SessionError (SessionFull, Duplicate, RangeViolation).
  Joined join(const std::string& session, const std::string& user, Sink sink);
  void leave(const std::string& session, std::uint64_t member);

  /// Handles one client text frame. Returns an error message for the sender
  /// when the event is rejected; throws SessionError(Malformed) on protocol errors.
  std::optional<std::string> submit(const std::string& session, std::uint64_t member, std::string_view message);

  std::optional<session::State> state(const std::string& session) const;

 private:
  struct Room;
  Room& room(const std::string& session);

  const surface::TimbreSurface* surface_;
  std::filesystem::path log_dir_;
  mutable std::mutex mutex_;
  std::map<std::string, std::unique_ptr<Room>> rooms_;
  std::uint64_t next_member_ = 1;
};

std::string snapshot_message(const std::string& session, const session::State& state);
std::string event_message(const session::Record& record, const std::string& hash);
std::string error_message(session::ErrorCode code, const std::string& what);

class Server {
 public:
  /// Loads the surface from cfg.surface_path when it is set.
  explicit Server(Config cfg);
  Server(Config cfg, std::optional<surface::TimbreSurface> surface);
  ~Server();
  Server(const Server&) = delete;
  Server& operator=(const Server&) = delete;

  /// Binds and starts accepting; returns the bound port (useful with port 0).
  unsigned short start();
  void stop();
  /// Blocks until stop() is called.
  void wait();

  struct Impl;

 private:
  std::unique_ptr<Impl> impl_;
};

}  // namespace timbre::service
