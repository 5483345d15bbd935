#include "timbre/session.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

#include "timbre/artifacts.hpp"

namespace timbre::session {

using nlohmann::json;

std::string_view to_string(ErrorCode c) {
  switch (c) {
    case ErrorCode::Malformed: return "malformed";
    case ErrorCode::UnknownEntity: return "unknown_entity";
    case ErrorCode::RangeViolation: return "range_violation";
    case ErrorCode::Duplicate: return "duplicate";
    case ErrorCode::Cycle: return "cycle";
    case ErrorCode::InUse: return "in_use";
    case ErrorCode::SessionFull: return "session_full";
    case ErrorCode::NotJoined: return "not_joined";
  }
  return "unknown";
}

double Path::total_duration() const {
  double t = 0.0;
  for (const Segment& s : segments) t += s.duration;
  return t;
}

namespace {

[[noreturn]] void fail(ErrorCode c, const std::string& msg) { throw SessionError(c, msg); }

void check_id(const std::string& id, const char* what) {
  const bool ok = !id.empty() && id.size() <= kMaxIdLength && std::all_of(id.begin(), id.end(), [](unsigned char ch) {
    return std::isalnum(ch) || ch == '_' || ch == '-' || ch == '.' || ch == ':';
  });
  if (!ok) fail(ErrorCode::RangeViolation, std::string("invalid ") + what + " id '" + id + "'");
}

void check_position(const Point2& p) {
  for (double v : p) {
    if (!std::isfinite(v) || v < -1.0 || v > 1.0) fail(ErrorCode::RangeViolation, "position outside [-1,1]^2");
  }
}

void check_finite(const Point2& p) {
  if (!std::isfinite(p[0]) || !std::isfinite(p[1])) fail(ErrorCode::RangeViolation, "control point is not finite");
}

void check_range(double v, double lo, double hi, const char* what) {
  if (!std::isfinite(v) || v < lo || v > hi) {
    std::ostringstream os;
    os << what << " " << v << " outside [" << lo << ", " << hi << "]";
    fail(ErrorCode::RangeViolation, os.str());
  }
}

template <typename Map>
auto& find_or_fail(Map& m, const std::string& id, const char* what) {
  auto it = m.find(id);
  if (it == m.end()) fail(ErrorCode::UnknownEntity, std::string("unknown ") + what + " '" + id + "'");
  return it->second;
}

std::optional<ParameterVector> lookup(const surface::TimbreSurface* s, const Point2& p) {
  if (s == nullptr || s->empty()) return std::nullopt;
  return s->lookup_params(p);
}

std::string private_channel(const std::string& user) { return "private:" + user; }

struct Applier {
  State& st;
  const std::string& user;
  const surface::TimbreSurface* surface;

  void operator()(const Join&) {
    check_id(user, "user");
    if (st.users.contains(user)) fail(ErrorCode::Duplicate, "user '" + user + "' already joined");
    if (st.users.size() >= kMaxUsers) fail(ErrorCode::SessionFull, "session already has 5 users");
    st.users[user] = User{user, {}, {}};
    const std::string ch = private_channel(user);
    if (!st.channels.contains(ch)) st.channels[ch] = Channel{ch, user, {}};
  }

  void operator()(const Leave&) {
    st.users.erase(user);
    for (auto& [id, ch] : st.channels) ch.listeners.erase(user);
  }

  void operator()(const CreateNode& e) {
    check_id(e.id, "node");
    if (st.nodes.contains(e.id)) fail(ErrorCode::Duplicate, "node '" + e.id + "' exists");
    check_position(e.position);
    Node n;
    n.id = e.id;
    n.owner = user;
    n.position = e.position;
    n.params = lookup(surface, e.position);
    st.nodes[e.id] = std::move(n);
  }

  void operator()(const RemoveNode& e) {
    find_or_fail(st.nodes, e.id, "node");
    for (const auto& [pid, p] : st.paths) {
      if (std::find(p.nodes.begin(), p.nodes.end(), e.id) != p.nodes.end())
        fail(ErrorCode::InUse, "node '" + e.id + "' is part of path '" + pid + "'");
    }
    st.nodes.erase(e.id);
  }

  void operator()(const MoveNode& e) {
    Node& n = find_or_fail(st.nodes, e.id, "node");
    check_position(e.position);
    n.position = e.position;
    n.params = lookup(surface, e.position);
  }

  void operator()(const ConnectPath& e) {
    check_id(e.id, "path");
    if (st.paths.contains(e.id)) fail(ErrorCode::Duplicate, "path '" + e.id + "' exists");
    if (e.nodes.size() < 2) fail(ErrorCode::RangeViolation, "a path needs at least 2 nodes");
    Path p;
    p.id = e.id;
    p.owner = user;
    p.nodes = e.nodes;
    for (std::size_t i = 0; i < e.nodes.size(); ++i) {
      const Node& a = find_or_fail(st.nodes, e.nodes[i], "node");
      if (i == 0) continue;
      const Point2 p0 = st.nodes.at(e.nodes[i - 1]).position, p3 = a.position;
      Segment s;
      s.c1 = {p0[0] + (p3[0] - p0[0]) / 3.0, p0[1] + (p3[1] - p0[1]) / 3.0};
      s.c2 = {p0[0] + 2.0 * (p3[0] - p0[0]) / 3.0, p0[1] + 2.0 * (p3[1] - p0[1]) / 3.0};
      p.segments.push_back(s);
    }
    st.paths[e.id] = std::move(p);
  }

  void operator()(const RemovePath& e) {
    find_or_fail(st.paths, e.id, "path");
    st.paths.erase(e.id);
    for (auto& [pid, p] : st.paths) {
      if (p.chain_to == e.id) p.chain_to.reset();
    }
  }

  void operator()(const ChainPath& e) {
    Path& p = find_or_fail(st.paths, e.id, "path");
    if (e.next) {
      find_or_fail(st.paths, *e.next, "path");
      std::optional<std::string> at = e.next;
      std::set<std::string> seen;
      while (at) {
        if (*at == e.id) fail(ErrorCode::Cycle, "chaining '" + e.id + "' to '" + *e.next + "' creates a cycle");
        if (!seen.insert(*at).second) break;
        at = st.paths.at(*at).chain_to;
      }
    }
    p.chain_to = e.next;
  }

  void operator()(const EditSegment& e) {
    Path& p = find_or_fail(st.paths, e.path, "path");
    if (e.index >= p.segments.size()) fail(ErrorCode::UnknownEntity, "segment index out of range");
    Segment s = p.segments[e.index];
    if (e.duration) {
      if (!(*e.duration > 0.0)) fail(ErrorCode::RangeViolation, "segment duration must be positive");
      check_range(*e.duration, 0.0, kMaxSegmentDuration, "segment duration");
      s.duration = *e.duration;
    }
    if (e.c1) check_finite(*e.c1), s.c1 = *e.c1;
    if (e.c2) check_finite(*e.c2), s.c2 = *e.c2;
    if (e.volume) check_range(*e.volume, 0.0, 1.0, "volume"), s.volume = *e.volume;
    if (e.pitch_offset) {
      check_range(*e.pitch_offset, -kMaxPitchOffset, kMaxPitchOffset, "pitch offset");
      s.pitch_offset = *e.pitch_offset;
    }
    p.segments[e.index] = s;
    p.playhead = std::min(p.playhead, p.total_duration());
  }

  void operator()(const SetTool& e) {
    Node& n = find_or_fail(st.nodes, e.node, "node");
    if (e.tool == Tool::Volume) {
      check_range(e.value, 0.0, 1.0, "volume");
      n.volume = e.value;
    } else {
      check_range(e.value, -kMaxPitchOffset, kMaxPitchOffset, "pitch offset");
      n.pitch_offset = static_cast<int>(std::lround(e.value));
    }
  }

  void operator()(const SetPlayback& e) {
    if (auto it = st.nodes.find(e.target); it != st.nodes.end()) {
      it->second.playing = e.playing;
      return;
    }
    Path& p = find_or_fail(st.paths, e.target, "node or path");
    if (e.playing && p.playhead >= p.total_duration()) p.playhead = 0.0;
    p.playing = e.playing;
  }

  void operator()(const CreateChannel& e) {
    check_id(e.id, "channel");
    if (st.channels.contains(e.id)) fail(ErrorCode::Duplicate, "channel '" + e.id + "' exists");
    st.channels[e.id] = Channel{e.id, user, {}};
  }

  void operator()(const Subscribe& e) {
    Channel& ch = find_or_fail(st.channels, e.channel, "channel");
    if (e.on) {
      ch.listeners.insert(user);
    } else {
      ch.listeners.erase(user);
    }
  }

  void operator()(const SetChannel& e) {
    Node& n = find_or_fail(st.nodes, e.node, "node");
    find_or_fail(st.channels, e.channel, "channel");
    n.channel = e.channel;
  }

  void operator()(const CreateStream& e) {
    check_id(e.id, "stream");
    if (st.streams.contains(e.id)) fail(ErrorCode::Duplicate, "stream '" + e.id + "' exists");
    check_range(e.rate, kMinStreamRate, kMaxStreamRate, "stream rate");
    check_range(e.note_length, kMinNoteLength, kMaxNoteLength, "note length");
    st.streams[e.id] = NoteStream{e.id, e.progression, e.note_length, e.rate};
  }

  void operator()(const SetStream& e) {
    Node& n = find_or_fail(st.nodes, e.node, "node");
    if (e.stream) find_or_fail(st.streams, *e.stream, "stream");
    n.stream = e.stream;
  }

  void operator()(const Mute& e) {
    User& u = st.users.at(user);
    find_or_fail(st.users, e.target, "user");
    if (e.target == user) fail(ErrorCode::RangeViolation, "cannot mute yourself");
    if (e.muted) {
      u.muted.insert(e.target);
    } else {
      u.muted.erase(e.target);
    }
  }

  void operator()(const SetGain& e) {
    User& u = st.users.at(user);
    find_or_fail(st.users, e.target, "user");
    check_range(e.gain, 0.0, 2.0, "gain");
    u.gains[e.target] = e.gain;
  }

  void operator()(const Advance& e) {
    check_range(e.dt, 0.0, 3600.0, "time step");
    st.clock += e.dt;
    std::vector<std::string> chained;
    for (auto& [id, p] : st.paths) {
      if (!p.playing) continue;
      const double total = p.total_duration();
      p.playhead = std::min(total, p.playhead + e.dt);
      if (p.playhead >= total) {
        p.playing = false;
        if (p.chain_to) chained.push_back(*p.chain_to);
      }
    }
    for (const std::string& id : chained) {
      Path& next = st.paths.at(id);
      next.playing = true;
      next.playhead = 0.0;
    }
  }
};

Point2 point_from(const json& j) {
  if (!j.is_array() || j.size() != 2) throw SessionError(ErrorCode::Malformed, "expected [x, y]");
  return {j.at(0).get<double>(), j.at(1).get<double>()};
}

json point_json(const Point2& p) { return json::array({p[0], p[1]}); }

template <typename T>
std::optional<T> opt(const json& j, const char* key) {
  if (!j.contains(key) || j.at(key).is_null()) return std::nullopt;
  return j.at(key).get<T>();
}

std::optional<Point2> opt_point(const json& j, const char* key) {
  if (!j.contains(key) || j.at(key).is_null()) return std::nullopt;
  return point_from(j.at(key));
}

json opt_json(const std::optional<std::string>& s) { return s ? json(*s) : json(nullptr); }

constexpr std::array<std::string_view, 3> kProgressionNames = {"pop_c", "minor_a", "blues_c"};

Progression progression_from(const std::string& s) {
  for (std::size_t i = 0; i < kProgressionNames.size(); ++i) {
    if (kProgressionNames[i] == s) return static_cast<Progression>(i);
  }
  throw SessionError(ErrorCode::Malformed, "unknown progression '" + s + "'");
}

std::string progression_name(Progression p) { return std::string(kProgressionNames.at(static_cast<std::size_t>(p))); }

}  // namespace

std::string_view event_type(const Event& e) {
  static constexpr std::array<std::string_view, std::variant_size_v<Event>> names = {
      "join",       "leave",          "create_node", "remove_node",   "move_node",
      "connect_path", "remove_path",  "chain_path",  "edit_segment",  "set_tool",
      "set_playback", "create_channel", "subscribe", "set_channel",   "create_stream",
      "set_stream", "mute",           "set_gain",    "advance"};
  return names[e.index()];
}

json event_to_json(const Event& ev) {
  json j = std::visit(
      [](const auto& e) -> json {
        using T = std::decay_t<decltype(e)>;
        if constexpr (std::is_same_v<T, Join> || std::is_same_v<T, Leave>) {
          return json::object();
        } else if constexpr (std::is_same_v<T, CreateNode> || std::is_same_v<T, MoveNode>) {
          return {{"id", e.id}, {"position", point_json(e.position)}};
        } else if constexpr (std::is_same_v<T, RemoveNode> || std::is_same_v<T, RemovePath> ||
                             std::is_same_v<T, CreateChannel>) {
          return {{"id", e.id}};
        } else if constexpr (std::is_same_v<T, ConnectPath>) {
          return {{"id", e.id}, {"nodes", e.nodes}};
        } else if constexpr (std::is_same_v<T, ChainPath>) {
          return {{"id", e.id}, {"next", opt_json(e.next)}};
        } else if constexpr (std::is_same_v<T, EditSegment>) {
          json o = {{"path", e.path}, {"index", e.index}};
          if (e.duration) o["duration"] = *e.duration;
          if (e.c1) o["c1"] = point_json(*e.c1);
          if (e.c2) o["c2"] = point_json(*e.c2);
          if (e.volume) o["volume"] = *e.volume;
          if (e.pitch_offset) o["pitch_offset"] = *e.pitch_offset;
          return o;
        } else if constexpr (std::is_same_v<T, SetTool>) {
          return {{"node", e.node}, {"tool", e.tool == Tool::Volume ? "volume" : "pitch"}, {"value", e.value}};
        } else if constexpr (std::is_same_v<T, SetPlayback>) {
          return {{"target", e.target}, {"playing", e.playing}};
        } else if constexpr (std::is_same_v<T, Subscribe>) {
          return {{"channel", e.channel}, {"on", e.on}};
        } else if constexpr (std::is_same_v<T, SetChannel>) {
          return {{"node", e.node}, {"channel", e.channel}};
        } else if constexpr (std::is_same_v<T, CreateStream>) {
          return {{"id", e.id},
                  {"progression", progression_name(e.progression)},
                  {"note_length", e.note_length},
                  {"rate", e.rate}};
        } else if constexpr (std::is_same_v<T, SetStream>) {
          return {{"node", e.node}, {"stream", opt_json(e.stream)}};
        } else if constexpr (std::is_same_v<T, Mute>) {
          return {{"target", e.target}, {"muted", e.muted}};
        } else if constexpr (std::is_same_v<T, SetGain>) {
          return {{"target", e.target}, {"gain", e.gain}};
        } else {
          return {{"dt", e.dt}};
        }
      },
      ev);
  j["type"] = std::string(event_type(ev));
  return j;
}

Event event_from_json(const json& j) {
  try {
    if (!j.is_object()) throw SessionError(ErrorCode::Malformed, "event must be an object");
    const std::string type = j.at("type").get<std::string>();
    auto str = [&](const char* k) { return j.at(k).get<std::string>(); };
    if (type == "join") return Join{};
    if (type == "leave") return Leave{};
    if (type == "create_node") return CreateNode{str("id"), point_from(j.at("position"))};
    if (type == "remove_node") return RemoveNode{str("id")};
    if (type == "move_node") return MoveNode{str("id"), point_from(j.at("position"))};
    if (type == "connect_path") return ConnectPath{str("id"), j.at("nodes").get<std::vector<std::string>>()};
    if (type == "remove_path") return RemovePath{str("id")};
    if (type == "chain_path") return ChainPath{str("id"), opt<std::string>(j, "next")};
    if (type == "edit_segment") {
      return EditSegment{str("path"),           j.at("index").get<std::size_t>(), opt<double>(j, "duration"),
                         opt_point(j, "c1"),    opt_point(j, "c2"),               opt<double>(j, "volume"),
                         opt<int>(j, "pitch_offset")};
    }
    if (type == "set_tool") {
      const std::string tool = str("tool");
      if (tool != "volume" && tool != "pitch") throw SessionError(ErrorCode::Malformed, "unknown tool '" + tool + "'");
      return SetTool{str("node"), tool == "volume" ? Tool::Volume : Tool::Pitch, j.at("value").get<double>()};
    }
    if (type == "set_playback") return SetPlayback{str("target"), j.at("playing").get<bool>()};
    if (type == "create_channel") return CreateChannel{str("id")};
    if (type == "subscribe") return Subscribe{str("channel"), j.value("on", true)};
    if (type == "set_channel") return SetChannel{str("node"), str("channel")};
    if (type == "create_stream") {
      return CreateStream{str("id"), progression_from(str("progression")), j.at("note_length").get<double>(),
                          j.at("rate").get<double>()};
    }
    if (type == "set_stream") return SetStream{str("node"), opt<std::string>(j, "stream")};
    if (type == "mute") return Mute{str("target"), j.value("muted", true)};
    if (type == "set_gain") return SetGain{str("target"), j.at("gain").get<double>()};
    if (type == "advance") return Advance{j.at("dt").get<double>()};
    throw SessionError(ErrorCode::Malformed, "unknown event type '" + type + "'");
  } catch (const SessionError&) {
    throw;
  } catch (const std::exception& e) {
    throw SessionError(ErrorCode::Malformed, std::string("bad event: ") + e.what());
  }
}

json record_to_json(const Record& r) {
  return {{"seq", r.seq}, {"timestamp", r.timestamp}, {"user", r.user}, {"type", std::string(event_type(r.event))},
          {"payload", event_to_json(r.event)}};
}

Record record_from_json(const json& j) {
  try {
    Record r;
    r.seq = j.at("seq").get<std::uint64_t>();
    r.timestamp = j.value("timestamp", 0.0);
    r.user = j.at("user").get<std::string>();
    r.event = event_from_json(j.at("payload"));
    if (j.contains("type") && j.at("type").get<std::string>() != event_type(r.event))
      throw SessionError(ErrorCode::Malformed, "record type does not match payload");
    return r;
  } catch (const SessionError&) {
    throw;
  } catch (const std::exception& e) {
    throw SessionError(ErrorCode::Malformed, std::string("bad record: ") + e.what());
  }
}

State apply_event(const State& state, const std::string& user, const Event& event,
                  const surface::TimbreSurface* surface) {
  if (!std::holds_alternative<Join>(event) && !state.users.contains(user))
    fail(ErrorCode::NotJoined, "user '" + user + "' has not joined");
  State next = state;
  std::visit(Applier{next, user, surface}, event);
  ++next.seq;
  return next;
}

Point2 path_position(const State& state, const Path& path, double t) {
  if (path.segments.empty() || path.nodes.size() != path.segments.size() + 1)
    fail(ErrorCode::RangeViolation, "path '" + path.id + "' is malformed");
  const double total = path.total_duration();
  if (!(t >= 0.0 && t <= total)) fail(ErrorCode::RangeViolation, "time outside the path duration");
  auto node_pos = [&](std::size_t i) { return find_or_fail(state.nodes, path.nodes[i], "node").position; };
  if (t >= total) return node_pos(path.nodes.size() - 1);

  double start = 0.0;
  std::size_t i = 0;
  while (i + 1 < path.segments.size() && t >= start + path.segments[i].duration) start += path.segments[i++].duration;
  const Segment& s = path.segments[i];
  const double u = std::clamp((t - start) / s.duration, 0.0, 1.0);
  const Point2 p0 = node_pos(i), p3 = node_pos(i + 1);
  const double a = (1 - u) * (1 - u) * (1 - u), b = 3 * (1 - u) * (1 - u) * u, c = 3 * (1 - u) * u * u, d = u * u * u;
  return {a * p0[0] + b * s.c1[0] + c * s.c2[0] + d * p3[0], a * p0[1] + b * s.c1[1] + c * s.c2[1] + d * p3[1]};
}

const std::vector<std::vector<int>>& progression_chords(Progression p) {
  // pitch classes, C = 0
  static const std::vector<std::vector<int>> pop = {{0, 4, 7}, {7, 11, 2}, {9, 0, 4}, {5, 9, 0}};
  static const std::vector<std::vector<int>> minor = {{9, 0, 4}, {5, 9, 0}, {0, 4, 7}, {7, 11, 2}};
  static const std::vector<std::vector<int>> blues = {{0, 4, 7, 10}, {0, 4, 7, 10}, {0, 4, 7, 10}, {0, 4, 7, 10},
                                                      {5, 9, 0, 3},  {5, 9, 0, 3},  {0, 4, 7, 10}, {0, 4, 7, 10},
                                                      {7, 11, 2, 5}, {5, 9, 0, 3},  {0, 4, 7, 10}, {7, 11, 2, 5}};
  switch (p) {
    case Progression::PopInC: return pop;
    case Progression::MinorInA: return minor;
    case Progression::BluesInC: return blues;
  }
  throw std::invalid_argument("unknown progression");
}

std::vector<NoteEvent> stream_tick(const NoteStream& stream, double from, double to) {
  std::vector<NoteEvent> out;
  if (!(to > from) || !(stream.rate > 0.0)) return out;
  const auto& chords = progression_chords(stream.progression);
  const double first = std::floor((from - stream.note_length) * stream.rate) - 1.0;
  for (auto i = static_cast<std::int64_t>(std::max(0.0, first));; ++i) {
    const double on = static_cast<double>(i) / stream.rate;
    if (on >= to) break;
    const auto& chord = chords[static_cast<std::size_t>(i / kNotesPerChord) % chords.size()];
    const int pc = chord[static_cast<std::size_t>(i % kNotesPerChord) % chord.size()];
    const double off = on + stream.note_length;
    if (on >= from) out.push_back({pc, 0, true, on});
    if (off >= from && off < to) out.push_back({pc, 0, false, off});
  }
  std::stable_sort(out.begin(), out.end(), [](const NoteEvent& a, const NoteEvent& b) {
    if (a.time != b.time) return a.time < b.time;
    return !a.on && b.on;  // release before the next attack
  });
  return out;
}

std::vector<Voice> mixdown_routing(const State& state, const std::string& user) {
  const User& listener = find_or_fail(state.users, user, "user");
  auto audible = [&](const std::string& owner, const std::string& channel) {
    if (listener.muted.contains(owner)) return false;
    const auto it = state.channels.find(channel);
    if (it == state.channels.end()) return false;
    const Channel& ch = it->second;
    return ch.is_public() || ch.owner == user || ch.listeners.contains(user);
  };
  auto gain_for = [&](const std::string& owner) {
    const auto it = listener.gains.find(owner);
    return it == listener.gains.end() ? 1.0 : it->second;
  };

  std::vector<Voice> out;
  for (const auto& [id, n] : state.nodes) {
    if (n.playing && audible(n.owner, n.channel))
      out.push_back({Voice::Kind::Node, id, n.owner, n.channel, n.volume * gain_for(n.owner)});
  }
  for (const auto& [id, p] : state.paths) {
    if (!p.playing || p.nodes.empty()) continue;
    const auto first = state.nodes.find(p.nodes.front());
    const std::string channel = first == state.nodes.end() ? kPublicChannel : first->second.channel;
    if (!audible(p.owner, channel)) continue;
    double start = 0.0, vol = p.segments.empty() ? 1.0 : p.segments.back().volume;
    for (const Segment& s : p.segments) {
      if (p.playhead < start + s.duration) {
        vol = s.volume;
        break;
      }
      start += s.duration;
    }
    out.push_back({Voice::Kind::Path, id, p.owner, channel, vol * gain_for(p.owner)});
  }
  return out;
}

// ---- canonical state encoding ---------------------------------------------

json state_to_json(const State& s) {
  json users = json::object(), nodes = json::object(), paths = json::object(), streams = json::object(),
       channels = json::object();
  for (const auto& [id, u] : s.users) users[id] = {{"muted", u.muted}, {"gains", u.gains}};
  for (const auto& [id, n] : s.nodes) {
    nodes[id] = {{"owner", n.owner},   {"position", point_json(n.position)}, {"volume", n.volume},
                 {"pitch_offset", n.pitch_offset}, {"stream", opt_json(n.stream)}, {"channel", n.channel},
                 {"playing", n.playing}, {"params", n.params ? json(n.params->values()) : json(nullptr)}};
  }
  for (const auto& [id, p] : s.paths) {
    json segs = json::array();
    for (const Segment& g : p.segments) {
      segs.push_back({{"duration", g.duration}, {"c1", point_json(g.c1)}, {"c2", point_json(g.c2)},
                      {"volume", g.volume}, {"pitch_offset", g.pitch_offset}});
    }
    paths[id] = {{"owner", p.owner},       {"nodes", p.nodes},       {"segments", segs},
                 {"chain_to", opt_json(p.chain_to)}, {"playhead", p.playhead}, {"playing", p.playing}};
  }
  for (const auto& [id, st] : s.streams) {
    streams[id] = {{"progression", progression_name(st.progression)}, {"note_length", st.note_length}, {"rate", st.rate}};
  }
  for (const auto& [id, c] : s.channels) channels[id] = {{"owner", c.owner}, {"listeners", c.listeners}};
  return {{"users", users},     {"nodes", nodes}, {"paths", paths}, {"streams", streams},
          {"channels", channels}, {"clock", s.clock}, {"seq", s.seq}};
}

State state_from_json(const json& j) {
  try {
    State s;
    s.channels.clear();
    for (const auto& [id, u] : j.at("users").items()) {
      s.users[id] = User{id, u.at("muted").get<std::set<std::string>>(), u.at("gains").get<std::map<std::string, double>>()};
    }
    for (const auto& [id, n] : j.at("nodes").items()) {
      Node node;
      node.id = id;
      node.owner = n.at("owner").get<std::string>();
      node.position = point_from(n.at("position"));
      node.volume = n.at("volume").get<double>();
      node.pitch_offset = n.at("pitch_offset").get<int>();
      node.stream = opt<std::string>(n, "stream");
      node.channel = n.at("channel").get<std::string>();
      node.playing = n.at("playing").get<bool>();
      if (!n.at("params").is_null()) node.params = ParameterVector(n.at("params").get<std::vector<double>>());
      s.nodes[id] = std::move(node);
    }
    for (const auto& [id, p] : j.at("paths").items()) {
      Path path;
      path.id = id;
      path.owner = p.at("owner").get<std::string>();
      path.nodes = p.at("nodes").get<std::vector<std::string>>();
      for (const auto& g : p.at("segments")) {
        path.segments.push_back({g.at("duration").get<double>(), point_from(g.at("c1")), point_from(g.at("c2")),
                                 g.at("volume").get<double>(), g.at("pitch_offset").get<int>()});
      }
      path.chain_to = opt<std::string>(p, "chain_to");
      path.playhead = p.at("playhead").get<double>();
      path.playing = p.at("playing").get<bool>();
      s.paths[id] = std::move(path);
    }
    for (const auto& [id, st] : j.at("streams").items()) {
      s.streams[id] = NoteStream{id, progression_from(st.at("progression").get<std::string>()),
                                 st.at("note_length").get<double>(), st.at("rate").get<double>()};
    }
    for (const auto& [id, c] : j.at("channels").items()) {
      s.channels[id] = Channel{id, c.at("owner").get<std::string>(), c.at("listeners").get<std::set<std::string>>()};
    }
    s.clock = j.at("clock").get<double>();
    s.seq = j.at("seq").get<std::uint64_t>();
    return s;
  } catch (const SessionError&) {
    throw;
  } catch (const std::exception& e) {
    throw SessionError(ErrorCode::Malformed, std::string("bad state document: ") + e.what());
  }
}

std::string state_hash(const State& state) { return content_hash(state_to_json(state).dump()); }

std::string log_line(const Record& r) { return record_to_json(r).dump() + "\n"; }

ReplayResult replay(std::string_view log, const surface::TimbreSurface* surface) {
  ReplayResult out;
  std::size_t line_no = 0;
  while (!log.empty()) {
    const std::size_t nl = log.find('\n');
    const std::string_view line = log.substr(0, nl);
    log = nl == std::string_view::npos ? std::string_view{} : log.substr(nl + 1);
    ++line_no;
    if (line.find_first_not_of(" \t\r") == std::string_view::npos) continue;
    Record r;
    try {
      r = record_from_json(json::parse(line));
    } catch (const json::exception& e) {
      throw SessionError(ErrorCode::Malformed, "line " + std::to_string(line_no) + ": " + e.what());
    }
    if (r.seq != out.state.seq + 1) {
      throw SessionError(ErrorCode::Malformed, "line " + std::to_string(line_no) + ": expected seq " +
                                                   std::to_string(out.state.seq + 1) + ", got " + std::to_string(r.seq));
    }
    out.state = apply_event(out.state, r.user, r.event, surface);
    ++out.events;
  }
  return out;
}

}  // namespace timbre::session
