#pragma once

#include <cstddef>
#include <cstdint>
#include <map>
#include <optional>
#include <set>
#include <stdexcept>
#include <string>
#include <string_view>
#include <variant>
#include <vector>

#include <nlohmann/json.hpp>

#include "timbre/surface.hpp"
#include "timbre/synth.hpp"

namespace timbre::session {

inline constexpr std::size_t kMaxUsers = 5;
inline constexpr int kMaxPitchOffset = 12;
inline constexpr double kMinStreamRate = 0.25;  // notes per second
inline constexpr double kMaxStreamRate = 16.0;
inline constexpr double kMinNoteLength = 0.01;  // seconds
inline constexpr double kMaxNoteLength = 4.0;
inline constexpr double kMaxSegmentDuration = 600.0;
inline constexpr std::size_t kMaxIdLength = 64;
inline constexpr int kProtocolVersion = 1;
inline const std::string kPublicChannel = "public";

enum class ErrorCode { Malformed, UnknownEntity, RangeViolation, Duplicate, Cycle, InUse, SessionFull, NotJoined };

std::string_view to_string(ErrorCode c);

class SessionError : public std::runtime_error {
 public:
  SessionError(ErrorCode code, const std::string& what) : std::runtime_error(what), code_(code) {}
  ErrorCode code() const { return code_; }

 private:
  ErrorCode code_;
};

using surface::Point2;

struct Node {
  std::string id;
  std::string owner;
  Point2 position{};
  double volume = 1.0;
  int pitch_offset = 0;
  std::optional<std::string> stream;
  std::string channel = kPublicChannel;
  bool playing = false;
  /// Parameters under the node, looked up on the surface when one is attached.
  std::optional<ParameterVector> params;

  friend bool operator==(const Node&, const Node&) = default;
};

struct Segment {
  double duration = 1.0;
  Point2 c1{};
  Point2 c2{};
  double volume = 1.0;
  int pitch_offset = 0;

  friend bool operator==(const Segment&, const Segment&) = default;
};

struct Path {
  std::string id;
  std::string owner;
  std::vector<std::string> nodes;
  std::vector<Segment> segments;
  std::optional<std::string> chain_to;
  double playhead = 0.0;
  bool playing = false;

  double total_duration() const;
  friend bool operator==(const Path&, const Path&) = default;
};

enum class Progression { PopInC = 0, MinorInA = 1, BluesInC = 2 };

struct NoteStream {
  std::string id;
  Progression progression = Progression::PopInC;
  double note_length = 0.25;
  double rate = 4.0;

  friend bool operator==(const NoteStream&, const NoteStream&) = default;
};

struct Channel {
  std::string id;
  /// Empty for the public channel, else the private owner.
  std::string owner;
  std::set<std::string> listeners;

  bool is_public() const { return owner.empty(); }
  friend bool operator==(const Channel&, const Channel&) = default;
};

struct User {
  std::string name;
  std::set<std::string> muted;
  std::map<std::string, double> gains;

  friend bool operator==(const User&, const User&) = default;
};

struct State {
  std::map<std::string, User> users;
  std::map<std::string, Node> nodes;
  std::map<std::string, Path> paths;
  std::map<std::string, NoteStream> streams;
  std::map<std::string, Channel> channels{{kPublicChannel, Channel{kPublicChannel, {}, {}}}};
  double clock = 0.0;
  std::uint64_t seq = 0;

  friend bool operator==(const State&, const State&) = default;
};

// ---- events ----------------------------------------------------------------

struct Join {};
struct Leave {};
struct CreateNode {
  std::string id;
  Point2 position{};
};
struct RemoveNode {
  std::string id;
};
struct MoveNode {
  std::string id;
  Point2 position{};
};
struct ConnectPath {
  std::string id;
  std::vector<std::string> nodes;
};
struct RemovePath {
  std::string id;
};
struct ChainPath {
  std::string id;
  std::optional<std::string> next;
};
struct EditSegment {
  std::string path;
  std::size_t index = 0;
  std::optional<double> duration;
  std::optional<Point2> c1;
  std::optional<Point2> c2;
  std::optional<double> volume;
  std::optional<int> pitch_offset;
};
enum class Tool { Volume, Pitch };
struct SetTool {
  std::string node;
  Tool tool = Tool::Volume;
  double value = 0.0;
};
struct SetPlayback {
  /// A node or a path id.
  std::string target;
  bool playing = false;
};
struct CreateChannel {
  std::string id;
};
struct Subscribe {
  std::string channel;
  bool on = true;
};
struct SetChannel {
  std::string node;
  std::string channel;
};
struct CreateStream {
  std::string id;
  Progression progression = Progression::PopInC;
  double note_length = 0.25;
  double rate = 4.0;
};
struct SetStream {
  std::string node;
  std::optional<std::string> stream;
};
struct Mute {
  std::string target;
  bool muted = true;
};
struct SetGain {
  std::string target;
  double gain = 1.0;
};
/// Moves the session clock forward; playing paths advance and chain.
struct Advance {
  double dt = 0.0;
};

using Event = std::variant<Join, Leave, CreateNode, RemoveNode, MoveNode, ConnectPath, RemovePath, ChainPath,
                           EditSegment, SetTool, SetPlayback, CreateChannel, Subscribe, SetChannel, CreateStream,
                           SetStream, Mute, SetGain, Advance>;

std::string_view event_type(const Event& e);
nlohmann::json event_to_json(const Event& e);
/// Throws SessionError(Malformed) on unknown types or bad fields.
Event event_from_json(const nlohmann::json& j);

/// Awareness record of one accepted event.
struct Record {
  std::uint64_t seq = 0;
  double timestamp = 0.0;
  std::string user;
  Event event;
};

nlohmann::json record_to_json(const Record& r);
Record record_from_json(const nlohmann::json& j);

/// Pure transition. Throws SessionError and leaves `state` untouched on rejection.
State apply_event(const State& state, const std::string& user, const Event& event,
                  const surface::TimbreSurface* surface = nullptr);

/// Cubic Bezier position along a path at time t in [0, total duration].
Point2 path_position(const State& state, const Path& path, double t);

struct NoteEvent {
  int pitch_class = 0;  // 0 = C
  int octave_offset = 0;
  bool on = true;
  double time = 0.0;

  friend bool operator==(const NoteEvent&, const NoteEvent&) = default;
};

/// Chord tones (pitch classes) of a progression, one entry per chord.
const std::vector<std::vector<int>>& progression_chords(Progression p);
inline constexpr int kNotesPerChord = 4;

/// Arpeggio notes of the stream with on or off times in [from, to).
std::vector<NoteEvent> stream_tick(const NoteStream& stream, double from, double to);

struct Voice {
  enum class Kind { Node, Path } kind = Kind::Node;
  std::string id;
  std::string owner;
  std::string channel;
  double gain = 1.0;

  friend bool operator==(const Voice&, const Voice&) = default;
};

/// Playing voices `user` hears, in (kind, id) order.
std::vector<Voice> mixdown_routing(const State& state, const std::string& user);

nlohmann::json state_to_json(const State& state);
State state_from_json(const nlohmann::json& j);
/// FNV-1a of the canonical JSON encoding.
std::string state_hash(const State& state);

/// One JSON record per line.
std::string log_line(const Record& r);
struct ReplayResult {
  State state;
  std::size_t events = 0;
};
/// Applies every record of a log in order; sequence numbers must be gapless.
ReplayResult replay(std::string_view log, const surface::TimbreSurface* surface = nullptr);

}  // namespace timbre::session
