#include <doctest.h>

#include <cmath>
#include <set>

#include "support/oracles.hpp"
#include "support/session_gen.hpp"
#include "timbre/session.hpp"

using namespace timbre;
using namespace timbre::session;
using sessiongen::EventGen;
using sessiongen::kUsers;
using sessiongen::Outcome;
using sessiongen::run_random;

namespace {

bool acyclic(const State& s) {
  for (const auto& [id, p] : s.paths) {
    std::set<std::string> seen{id};
    std::optional<std::string> at = p.chain_to;
    while (at) {
      if (!seen.insert(*at).second) return false;
      at = s.paths.at(*at).chain_to;
    }
  }
  return true;
}

void check_invariants(const State& s) {
  CHECK(s.users.size() <= kMaxUsers);
  CHECK(s.channels.contains(kPublicChannel));
  for (const auto& [id, n] : s.nodes) {
    CHECK(n.id == id);
    CHECK(n.volume >= 0.0);
    CHECK(n.volume <= 1.0);
    CHECK(std::abs(n.pitch_offset) <= kMaxPitchOffset);
    CHECK(std::abs(n.position[0]) <= 1.0);
    CHECK(std::abs(n.position[1]) <= 1.0);
    CHECK(s.channels.contains(n.channel));
    if (n.stream) CHECK(s.streams.contains(*n.stream));
  }
  for (const auto& [id, p] : s.paths) {
    CHECK(p.nodes.size() >= 2);
    CHECK(p.segments.size() + 1 == p.nodes.size());
    for (const auto& n : p.nodes) CHECK(s.nodes.contains(n));
    for (const auto& g : p.segments) {
      CHECK(g.duration > 0.0);
      CHECK(g.volume >= 0.0);
      CHECK(g.volume <= 1.0);
      CHECK(std::abs(g.pitch_offset) <= kMaxPitchOffset);
    }
    CHECK(p.playhead >= 0.0);
    CHECK(p.playhead <= p.total_duration());
    if (p.chain_to) CHECK(s.paths.contains(*p.chain_to));
  }
  CHECK(acyclic(s));
  for (const auto& [id, st] : s.streams) {
    CHECK(st.rate >= kMinStreamRate);
    CHECK(st.rate <= kMaxStreamRate);
    CHECK(st.note_length >= kMinNoteLength);
    CHECK(st.note_length <= kMaxNoteLength);
  }
}

State with_users(std::initializer_list<const char*> users) {
  State s;
  for (const char* u : users) s = apply_event(s, u, Join{});
  return s;
}

State apply_all(State s, const std::vector<std::pair<std::string, Event>>& events) {
  for (const auto& [u, e] : events) s = apply_event(s, u, e);
  return s;
}

ErrorCode rejection(const State& s, const std::string& user, const Event& e) {
  try {
    apply_event(s, user, e);
  } catch (const SessionError& err) {
    return err.code();
  }
  FAIL("event was accepted");
  return ErrorCode::Malformed;
}

}  // namespace

TEST_CASE("basic node transitions") {
  State s = with_users({"ana"});
  s = apply_event(s, "ana", CreateNode{"n1", {0.1, 0.2}});
  REQUIRE(s.nodes.contains("n1"));
  CHECK(s.nodes.at("n1").owner == "ana");
  CHECK(!s.nodes.at("n1").params);
  s = apply_event(s, "ana", MoveNode{"n1", {0.3, -0.2}});
  CHECK(s.nodes.at("n1").position == Point2{0.3, -0.2});
  CHECK(s.seq == 3);
  CHECK(rejection(s, "ana", CreateNode{"n1", {0, 0}}) == ErrorCode::Duplicate);
  CHECK(rejection(s, "ana", MoveNode{"zz", {0, 0}}) == ErrorCode::UnknownEntity);
  CHECK(rejection(s, "ana", MoveNode{"n1", {1.01, 0}}) == ErrorCode::RangeViolation);
  CHECK(rejection(s, "ana", CreateNode{"bad id", {0, 0}}) == ErrorCode::RangeViolation);
  CHECK(rejection(s, "ana", SetTool{"n1", Tool::Pitch, 13.0}) == ErrorCode::RangeViolation);
  CHECK(rejection(s, "ana", SetTool{"n1", Tool::Volume, 1.5}) == ErrorCode::RangeViolation);
  s = apply_event(s, "ana", SetTool{"n1", Tool::Pitch, -12.0});
  CHECK(s.nodes.at("n1").pitch_offset == -12);
}

TEST_CASE("moving a node looks its parameters up on the surface") {
  oracle::Gen g(1);
  std::vector<surface::SurfacePoint> pts;
  for (int i = 0; i < 30; ++i) pts.push_back({"s" + std::to_string(i), {g.uniform(-1, 1), g.uniform(-1, 1)}, 0, g.params(), 0, 0});
  const surface::TimbreSurface surf(pts, surface::palette(1));
  State s = with_users({"ana"});
  s = apply_event(s, "ana", CreateNode{"n", {0.0, 0.0}}, &surf);
  CHECK(s.nodes.at("n").params == surf.lookup_params({0.0, 0.0}));
  s = apply_event(s, "ana", MoveNode{"n", {0.3, -0.2}}, &surf);
  CHECK(s.nodes.at("n").params == surf.lookup_params({0.3, -0.2}));
  const auto& target = surf.points()[7];
  s = apply_event(s, "ana", MoveNode{"n", target.position}, &surf);
  CHECK(s.nodes.at("n").params == target.params);
}

TEST_CASE("chaining that would close a cycle is rejected") {
  State s = with_users({"ana"});
  s = apply_all(s, {{"ana", CreateNode{"a", {0, 0}}}, {"ana", CreateNode{"b", {0.5, 0.5}}},
                    {"ana", ConnectPath{"A", {"a", "b"}}}, {"ana", ConnectPath{"B", {"b", "a"}}},
                    {"ana", ConnectPath{"C", {"a", "b", "a"}}}, {"ana", ChainPath{"A", std::string("B")}},
                    {"ana", ChainPath{"B", std::string("C")}}});
  const std::string before = state_hash(s);
  CHECK(rejection(s, "ana", ChainPath{"B", std::string("A")}) == ErrorCode::Cycle);
  CHECK(rejection(s, "ana", ChainPath{"C", std::string("A")}) == ErrorCode::Cycle);
  CHECK(rejection(s, "ana", ChainPath{"A", std::string("A")}) == ErrorCode::Cycle);
  CHECK(state_hash(s) == before);
  s = apply_event(s, "ana", ChainPath{"A", std::nullopt});
  s = apply_event(s, "ana", ChainPath{"C", std::string("A")});
  CHECK(acyclic(s));
  CHECK(rejection(s, "ana", RemoveNode{"a"}) == ErrorCode::InUse);
  s = apply_event(s, "ana", RemovePath{"A"});
  CHECK(!s.paths.at("C").chain_to);
}

TEST_CASE("path geometry") {
  State s = with_users({"ana"});
  s = apply_all(s, {{"ana", CreateNode{"a", {-0.8, -0.6}}}, {"ana", CreateNode{"b", {0.4, 0.2}}},
                    {"ana", CreateNode{"c", {0.9, -0.7}}}, {"ana", ConnectPath{"P", {"a", "b", "c"}}},
                    {"ana", EditSegment{"P", 0, 2.0}}, {"ana", EditSegment{"P", 1, 3.0, Point2{2.0, 2.0}, Point2{-2.0, 1.0}}}});
  const Path& p = s.paths.at("P");
  REQUIRE(p.segments.size() == 2);
  CHECK(p.total_duration() == 5.0);
  CHECK(path_position(s, p, 0.0) == s.nodes.at("a").position);
  CHECK(path_position(s, p, 5.0) == s.nodes.at("c").position);
  const Point2 mid = path_position(s, p, 1.0);  // untouched first segment has its controls on the line
  CHECK(std::abs(mid[0] - (-0.2)) <= 1e-15);
  CHECK(std::abs(mid[1] - (-0.2)) <= 1e-15);
  const Point2 joint = path_position(s, p, 2.0);
  CHECK(std::abs(joint[0] - 0.4) <= 1e-15);
  CHECK(std::abs(joint[1] - 0.2) <= 1e-15);
  // Bernstein form at u = 0.5 on the curved segment.
  const Point2 q = path_position(s, p, 3.5);
  CHECK(q[0] == doctest::Approx(0.125 * 0.4 + 0.375 * 2.0 + 0.375 * -2.0 + 0.125 * 0.9));
  CHECK(q[1] == doctest::Approx(0.125 * 0.2 + 0.375 * 2.0 + 0.375 * 1.0 + 0.125 * -0.7));
  CHECK_THROWS_AS(path_position(s, p, -0.1), SessionError);
  CHECK_THROWS_AS(path_position(s, p, 5.1), SessionError);
}

TEST_CASE("playing paths advance and start their chain") {
  State s = with_users({"ana"});
  s = apply_all(s, {{"ana", CreateNode{"a", {0, 0}}}, {"ana", CreateNode{"b", {0.5, 0}}},
                    {"ana", ConnectPath{"A", {"a", "b"}}}, {"ana", ConnectPath{"B", {"b", "a"}}},
                    {"ana", EditSegment{"A", 0, 2.0}}, {"ana", ChainPath{"A", std::string("B")}},
                    {"ana", SetPlayback{"A", true}}, {"ana", Advance{1.5}}});
  CHECK(s.paths.at("A").playhead == 1.5);
  CHECK(!s.paths.at("B").playing);
  s = apply_event(s, "ana", Advance{1.0});
  CHECK(!s.paths.at("A").playing);
  CHECK(s.paths.at("A").playhead == 2.0);
  CHECK(s.paths.at("B").playing);
  CHECK(s.paths.at("B").playhead == 0.0);
  CHECK(s.clock == 2.5);
  s = apply_event(s, "ana", SetPlayback{"A", true});
  CHECK(s.paths.at("A").playhead == 0.0);
}

TEST_CASE("note streams") {
  const NoteStream st{"s", Progression::PopInC, 0.25, 2.0};
  const auto ev = stream_tick(st, 0.0, 2.0);
  std::size_t ons = 0;
  std::set<int> classes;
  for (const auto& e : ev) {
    ons += e.on;
    if (e.on) classes.insert(e.pitch_class);
    CHECK(e.octave_offset == 0);
    CHECK(e.time >= 0.0);
    CHECK(e.time < 2.0);
  }
  CHECK(ons == 4);
  CHECK(std::includes(std::set<int>{0, 4, 7}.begin(), std::set<int>{0, 4, 7}.end(), classes.begin(), classes.end()));
  CHECK(stream_tick(st, 0.0, 2.0) == ev);

  // Splitting the clock into ticks loses and duplicates nothing.
  const NoteStream fast{"f", Progression::BluesInC, 0.3, 7.0};
  std::vector<NoteEvent> pieces;
  for (double t = 0.0; t < 10.0; t += 0.37) {
    const auto part = stream_tick(fast, t, std::min(10.0, t + 0.37));
    pieces.insert(pieces.end(), part.begin(), part.end());
  }
  const auto whole = stream_tick(fast, 0.0, 10.0);
  CHECK(pieces.size() == whole.size());
  std::size_t on = 0, off = 0;
  for (const auto& e : whole) (e.on ? on : off)++;
  CHECK(on == 70);

  for (Progression p : {Progression::PopInC, Progression::MinorInA, Progression::BluesInC}) {
    for (const auto& chord : progression_chords(p)) {
      CHECK(chord.size() >= 3);
      for (int pc : chord) CHECK((pc >= 0 && pc < 12));
    }
  }
  CHECK(stream_tick(st, 1.0, 1.0).empty());
}

TEST_CASE("routing honours channels and mutes") {
  State s = with_users({"ana", "ben"});
  s = apply_all(s, {{"ana", CreateNode{"a1", {0, 0}}}, {"ben", CreateNode{"b1", {0.2, 0}}},
                    {"ana", SetPlayback{"a1", true}}, {"ben", SetPlayback{"b1", true}}});
  auto ids = [&](const std::string& u) {
    std::vector<std::string> out;
    for (const auto& v : mixdown_routing(s, u)) out.push_back(v.id);
    return out;
  };
  CHECK(ids("ana") == std::vector<std::string>{"a1", "b1"});
  CHECK(ids("ben") == std::vector<std::string>{"a1", "b1"});

  s = apply_event(s, "ana", SetChannel{"a1", "private:ana"});
  CHECK(ids("ana") == std::vector<std::string>{"a1", "b1"});
  CHECK(ids("ben") == std::vector<std::string>{"b1"});
  s = apply_event(s, "ben", Subscribe{"private:ana"});
  CHECK(ids("ben") == std::vector<std::string>{"a1", "b1"});

  s = apply_event(s, "ana", SetChannel{"a1", kPublicChannel});
  s = apply_event(s, "ben", Mute{"ana"});
  CHECK(ids("ben") == std::vector<std::string>{"b1"});
  CHECK(ids("ana") == std::vector<std::string>{"a1", "b1"});
  s = apply_event(s, "ben", Mute{"ana", false});
  s = apply_event(s, "ben", SetGain{"ana", 0.5});
  s = apply_event(s, "ana", SetTool{"a1", Tool::Volume, 0.8});
  CHECK(mixdown_routing(s, "ben").front().gain == doctest::Approx(0.4));
  CHECK(mixdown_routing(s, "ana").front().gain == doctest::Approx(0.8));
  CHECK(rejection(s, "ben", Mute{"ben"}) == ErrorCode::RangeViolation);
  CHECK_THROWS_AS(mixdown_routing(s, "zed"), SessionError);
}

TEST_CASE("membership rules") {
  State s = with_users({"a", "b", "c", "d", "e"});
  CHECK(rejection(s, "f", Join{}) == ErrorCode::SessionFull);
  CHECK(rejection(s, "a", Join{}) == ErrorCode::Duplicate);
  CHECK(rejection(s, "f", CreateNode{"n", {0, 0}}) == ErrorCode::NotJoined);
  s = apply_event(s, "c", Leave{});
  s = apply_event(s, "f", Join{});
  CHECK(s.users.size() == 5);
  CHECK(rejection(s, "c", MoveNode{"n", {0, 0}}) == ErrorCode::NotJoined);
}

TEST_CASE("events on disjoint entities commute") {
  for (std::uint64_t seed = 0; seed < 40; ++seed) {
    Outcome base = run_random(seed, 120);
    EventGen gen(seed + 1000);
    State s = base.state;
    for (const auto& u : kUsers) {
      if (!s.users.contains(u) && s.users.size() < kMaxUsers) s = apply_event(s, u, Join{});
    }
    std::vector<std::string> users(s.users.size());
    std::transform(s.users.begin(), s.users.end(), users.begin(), [](const auto& kv) { return kv.first; });

    int checked = 0;
    for (int trial = 0; trial < 200; ++trial) {
      // Each event touches only its own node, its own path, or its own user's settings.
      auto make = [&](int slot) -> std::pair<std::string, Event> {
        const std::string user = users[static_cast<std::size_t>(slot) % users.size()];
        const std::string n = "n" + std::to_string(slot), p = "p" + std::to_string(slot);
        switch (gen.g.integer(0, 7)) {
          case 0: return {user, MoveNode{n, gen.pos()}};
          case 1: return {user, CreateNode{"fresh" + std::to_string(slot), gen.pos()}};
          case 2: return {user, SetTool{n, gen.g.coin() ? Tool::Volume : Tool::Pitch, gen.g.uniform(0.0, 1.0)}};
          case 3: return {user, SetPlayback{gen.g.coin() ? n : p, gen.g.coin()}};
          case 4: return {user, EditSegment{p, 0, gen.g.uniform(0.1, 3.0), gen.pos(), std::nullopt, gen.g.uniform(0, 1)}};
          case 5: return {user, SetChannel{n, kPublicChannel}};
          case 6: return {user, Mute{users[static_cast<std::size_t>(slot + 1) % users.size()], gen.g.coin()}};
          default: return {user, SetGain{users[static_cast<std::size_t>(slot + 2) % users.size()], gen.g.uniform(0, 2)}};
        }
      };
      const int sa = gen.g.integer(0, 7);
      int sb = gen.g.integer(0, 6);
      if (sb >= sa) ++sb;
      if (static_cast<std::size_t>(sa) % users.size() == static_cast<std::size_t>(sb) % users.size()) continue;
      const auto a = make(sa), b = make(sb);
      auto attempt = [&](const auto& first, const auto& second) -> std::optional<State> {
        try {
          return apply_event(apply_event(s, first.first, first.second), second.first, second.second);
        } catch (const SessionError&) {
          return std::nullopt;
        }
      };
      const auto ab = attempt(a, b), ba = attempt(b, a);
      CHECK(ab.has_value() == ba.has_value());
      if (ab && ba) {
        CHECK(*ab == *ba);
        CHECK(state_hash(*ab) == state_hash(*ba));
        ++checked;
      }
    }
    CHECK(checked > 0);
  }
}

TEST_CASE("random event fuzzing keeps every invariant") {
  for (std::uint64_t seed = 100; seed < 130; ++seed) {
    EventGen gen(seed);
    State s;
    std::size_t accepted = 0;
    for (int i = 0; i < 400; ++i) {
      const std::string user = gen.user();
      const Event e = gen.event();
      const std::string before = state_hash(s);
      try {
        s = apply_event(s, user, e);
        ++accepted;
      } catch (const SessionError&) {
        CHECK(state_hash(s) == before);
      }
      if (i % 25 == 0) check_invariants(s);
    }
    check_invariants(s);
    CHECK(s.seq == accepted);
  }
}

TEST_CASE("replaying a 1000-event log reproduces the state bit-exactly") {
  const Outcome live = run_random(7, 1000);
  REQUIRE(live.log.size() == 1000);
  CHECK(live.rejected > 0);
  // The two setup joins precede the logged events.
  std::string log;
  std::uint64_t seq = 0;
  for (const auto& u : {"ana", "ben"}) log += log_line({++seq, 0.0, u, Join{}});
  for (const Record& r : live.log) log += log_line(r);
  const ReplayResult a = replay(log);
  const ReplayResult b = replay(log);
  CHECK(a.events == 1002);
  CHECK(a.state == live.state);
  CHECK(state_hash(a.state) == state_hash(live.state));
  CHECK(state_hash(b.state) == state_hash(a.state));
}

TEST_CASE("replay rejects gaps and malformed lines") {
  const std::string good = log_line({1, 0.0, "ana", Join{}}) + log_line({2, 0.1, "ana", CreateNode{"n", {0, 0}}});
  CHECK(replay(good).events == 2);
  CHECK(replay(good + "\n\n").events == 2);
  CHECK_THROWS_AS(replay(log_line({1, 0.0, "ana", Join{}}) + log_line({3, 0.0, "ana", Leave{}})), SessionError);
  CHECK_THROWS_AS(replay(good + "{not json}\n"), SessionError);
  CHECK_THROWS_AS(replay(good + R"({"seq":3,"user":"ana","payload":{"type":"fly"}})" "\n"), SessionError);
  try {
    replay(good + log_line({3, 0.2, "ana", CreateNode{"n", {0, 0}}}));
    FAIL("duplicate accepted");
  } catch (const SessionError& e) {
    CHECK(e.code() == ErrorCode::Duplicate);
  }
}

TEST_CASE("events, records and states survive JSON") {
  EventGen gen(55);
  for (int i = 0; i < 2000; ++i) {
    const Event e = gen.event();
    const auto j = event_to_json(e);
    CHECK(j.at("type") == event_type(e));
    const Event back = event_from_json(j);
    CHECK(event_to_json(back) == j);
    const Record r{static_cast<std::uint64_t>(i + 1), 0.5 * i, gen.user(), e};
    const Record rb = record_from_json(nlohmann::json::parse(log_line(r)));
    CHECK(rb.seq == r.seq);
    CHECK(rb.user == r.user);
    CHECK(event_to_json(rb.event) == j);
  }
  const Outcome o = run_random(9, 300);
  const State back = state_from_json(nlohmann::json::parse(state_to_json(o.state).dump()));
  CHECK(back == o.state);
  CHECK(state_hash(back) == state_hash(o.state));
  CHECK(state_hash(o.state).size() == 16);
  CHECK_THROWS_AS(event_from_json(nlohmann::json{{"type", "set_tool"}, {"node", "n"}, {"tool", "hammer"}, {"value", 1}}),
                  SessionError);
  CHECK_THROWS_AS(event_from_json(nlohmann::json::array()), SessionError);
  CHECK_THROWS_AS(event_from_json(nlohmann::json{{"type", "move_node"}, {"id", "n"}}), SessionError);
  CHECK_THROWS_AS(state_from_json(nlohmann::json::object()), SessionError);
}
