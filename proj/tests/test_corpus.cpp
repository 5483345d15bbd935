#include <doctest.h>

#include <atomic>
#include <set>

#include "support/oracles.hpp"
#include "support/toy_corpus.hpp"
#include "timbre/artifacts.hpp"
#include "timbre/corpus.hpp"
#include "timbre/wav.hpp"
#include "timbre/work_pool.hpp"

using namespace timbre;

namespace {

Hypercube random_cube(oracle::Gen& g) {
  std::array<double, kParamCount> lo, hi;
  for (std::size_t i = 0; i < kParamCount; ++i) {
    const double a = g.uniform(), b = g.uniform();
    lo[i] = std::min(a, b);
    hi[i] = g.coin(0.2) ? lo[i] : std::max(a, b);
  }
  return {ParameterVector(lo), ParameterVector(hi)};
}

bool same_entries(const std::vector<CorpusEntry>& a, const std::vector<CorpusEntry>& b) {
  if (a.size() != b.size()) return false;
  for (std::size_t i = 0; i < a.size(); ++i) {
    if (a[i].id != b[i].id || !(a[i].params == b[i].params) || a[i].octave != b[i].octave ||
        a[i].provenance != b[i].provenance || a[i].audio_path != b[i].audio_path)
      return false;
  }
  return true;
}

bool same_terminals(const std::vector<TerminalCube>& a, const std::vector<TerminalCube>& b) {
  if (a.size() != b.size()) return false;
  for (std::size_t i = 0; i < a.size(); ++i) {
    if (!(a[i].cube.lo == b[i].cube.lo) || !(a[i].cube.hi == b[i].cube.hi) || a[i].root != b[i].root ||
        a[i].depth != b[i].depth || a[i].reason != b[i].reason || a[i].min_similarity != b[i].min_similarity)
      return false;
  }
  return true;
}

ExploreConfig toy_config(std::size_t workers) {
  ExploreConfig cfg;
  cfg.max_depth = 10;
  cfg.workers = workers;
  return cfg;
}

}  // namespace

TEST_CASE("hypercube volume halves on every split") {
  oracle::Gen g(1);
  for (int trial = 0; trial < 200; ++trial) {
    const Hypercube h = random_cube(g);
    const auto axes = h.live_axes();
    if (axes.empty()) continue;
    const std::size_t axis = axes[static_cast<std::size_t>(g.integer(0, static_cast<int>(axes.size()) - 1))];
    const auto [lo, hi] = split(h, axis);
    CHECK(lo.live_volume() == doctest::Approx(h.live_volume() / 2).epsilon(1e-12));
    CHECK(hi.live_volume() == doctest::Approx(h.live_volume() / 2).epsilon(1e-12));
    CHECK(lo.volume() >= 0.0);
    CHECK(h.contains(lo.centroid()));
    CHECK(h.contains(hi.centroid()));
    for (std::size_t i = 0; i < kParamCount; ++i) {
      CHECK(lo.lo[i] <= lo.hi[i]);
      CHECK(hi.lo[i] <= hi.hi[i]);
    }
  }
  Hypercube flat{ParameterVector::filled(0.3), ParameterVector::filled(0.3)};
  CHECK(flat.volume() == 0.0);
  CHECK(flat.live_volume() == 1.0);
  CHECK_THROWS(split(flat, 0));
}

TEST_CASE("one root cube per preset pair") {
  const auto presets = toy::presets(5);
  const auto cubes = presets_to_hypercubes(presets);
  const auto pairs = preset_pairs(5);
  REQUIRE(cubes.size() == 10);
  REQUIRE(pairs.size() == 10);
  for (std::size_t c = 0; c < cubes.size(); ++c) {
    CHECK(cubes[c].contains(presets[pairs[c].first]));
    CHECK(cubes[c].contains(presets[pairs[c].second]));
    for (std::size_t i = 0; i < kParamCount; ++i) {
      CHECK(cubes[c].lo[i] == std::min(presets[pairs[c].first][i], presets[pairs[c].second][i]));
    }
  }
  CHECK_THROWS(presets_to_hypercubes(std::span<const ParameterVector>(presets.data(), 1)));
}

TEST_CASE("side vertices differ only along the axis") {
  oracle::Gen g(2);
  for (int trial = 0; trial < 100; ++trial) {
    const Hypercube h = random_cube(g);
    for (std::size_t axis : h.live_axes()) {
      const auto [a, b] = side_vertices(h, axis);
      CHECK(a == quantize(h.lo));
      for (std::size_t i = 0; i < kParamCount; ++i) {
        if (i == axis) {
          CHECK(b[i] == quantize(h.hi[i], kSlotSteps[i]));
        } else {
          CHECK(b[i] == a[i]);
        }
      }
    }
  }
}

TEST_CASE("explore output is independent of the worker count") {
  const auto roots = presets_to_hypercubes(toy::presets(4));
  const toy::Measure measure;
  const auto r1 = explore(roots, toy_config(1), toy::renderer(), measure);
  const auto r8 = explore(roots, toy_config(8), toy::renderer(), measure);
  const auto r8b = explore(roots, toy_config(8), toy::renderer(), measure);
  CHECK(r1.entries.size() > roots.size());
  CHECK(same_entries(r1.entries, r8.entries));
  CHECK(same_entries(r8.entries, r8b.entries));
  CHECK(same_terminals(r1.terminals, r8.terminals));
  CHECK(r1.renders == r8.renders);
  CHECK(r1.failed_branches == 0);
}

TEST_CASE("every terminal cube satisfies the stopping rule") {
  const auto roots = presets_to_hypercubes(toy::presets(4));
  for (double threshold : {0.5, 0.85, 0.97}) {
    ExploreConfig cfg = toy_config(3);
    cfg.similarity_threshold = threshold;
    const auto r = explore(roots, cfg, toy::renderer(), toy::Measure{});
    REQUIRE_FALSE(r.terminals.empty());
    for (const auto& t : r.terminals) {
      CAPTURE(threshold);
      CHECK(toy::terminal_ok(t, cfg));
      CHECK(t.depth <= cfg.max_depth);
    }
  }
}

TEST_CASE("emitted parameters lie inside their preset-pair cube") {
  const auto presets = toy::presets(6);
  const auto roots = presets_to_hypercubes(presets);
  const auto r = explore(roots, toy_config(2), toy::renderer(), toy::Measure{});
  std::set<std::string> ids;
  for (const auto& e : r.entries) {
    CHECK(roots.at(e.provenance.preset_pair).contains(e.params));
    CHECK(quantize(e.params) == e.params);
    CHECK(e.id == entry_id(e.params));
    CHECK(ids.insert(e.id).second);
    CHECK(e.octave == toy_config(1).octave_for(e.provenance.preset_pair));
  }
  CHECK(std::is_sorted(r.entries.begin(), r.entries.end(),
                       [](const CorpusEntry& a, const CorpusEntry& b) { return a.id < b.id; }));
}

TEST_CASE("eight presets give at least one entry per pair") {
  const auto roots = presets_to_hypercubes(toy::presets(8));
  const auto r = explore(roots, toy_config(2), toy::renderer(), toy::Measure{});
  CHECK(roots.size() == 28);
  CHECK(r.entries.size() >= 28);
}

TEST_CASE("a failing render aborts only its branch") {
  const auto roots = presets_to_hypercubes(toy::presets(4));
  std::atomic<int> calls{0};
  const Renderer flaky = [&](const ParameterVector& p, int octave) {
    if (p[0] > 0.6 && p[1] < 0.5) throw std::runtime_error("render failed");
    ++calls;
    return toy::renderer()(p, octave);
  };
  const auto r = explore(roots, toy_config(2), flaky, toy::Measure{});
  CHECK(r.failed_branches > 0);
  CHECK_FALSE(r.entries.empty());
}

TEST_CASE("threshold zero never splits, threshold one splits to the depth bound") {
  const auto roots = presets_to_hypercubes(toy::presets(3));
  ExploreConfig cfg = toy_config(1);
  cfg.similarity_threshold = 0.0;
  const auto none = explore(roots, cfg, toy::renderer(), toy::Measure{});
  CHECK(none.terminals.size() == roots.size());
  cfg.similarity_threshold = 1.0;
  cfg.max_depth = 4;
  const auto deep = explore(roots, cfg, toy::renderer(), toy::Measure{});
  for (const auto& t : deep.terminals) CHECK(toy::terminal_ok(t, cfg));
  CHECK(deep.terminals.size() > none.terminals.size());
}

TEST_CASE("config validation") {
  ExploreConfig cfg;
  CHECK_NOTHROW(cfg.validate());
  cfg.similarity_threshold = 1.5;
  CHECK_THROWS(cfg.validate());
  cfg = {};
  cfg.max_depth = 0;
  CHECK_THROWS(cfg.validate());
  cfg = {};
  cfg.min_volume = 0.0;
  CHECK_THROWS(cfg.validate());
  cfg = {};
  cfg.octave_high = 6;
  CHECK_THROWS(cfg.validate());
  cfg = {};
  CHECK(cfg.octave_for(0) == -2);
  CHECK(cfg.octave_for(4) == 2);
  CHECK(cfg.octave_for(5) == -2);
}

TEST_CASE("preset parsing") {
  const auto ps = parse_presets("# header\n\n" + std::string(16 * 4, ' ') + "\n0.5 0.5 0.5 0.5 0.5 0.5 0.5 0.5 0.5 0.5 0.5 0.5 0.5 0.5 0.5 0.5 # tail\n");
  CHECK(ps.size() == 1);
  CHECK_THROWS(parse_presets("0.5 0.5\n"));
  CHECK_THROWS(parse_presets("0.5 0.5 0.5 0.5 0.5 0.5 0.5 0.5 0.5 0.5 0.5 0.5 0.5 0.5 0.5 abc\n"));
  CHECK_THROWS(parse_presets("0.5 0.5 0.5 0.5 0.5 0.5 0.5 0.5 0.5 0.5 0.5 0.5 0.5 0.5 0.5 1.5\n"));
  CHECK(parse_presets("").empty());
}

TEST_CASE("manifest round trip") {
  const auto r = explore(presets_to_hypercubes(toy::presets(3)), toy_config(1), toy::renderer(), toy::Measure{});
  Corpus c{"abcdef0123456789", 3, r.entries};
  for (auto& e : c.entries) e.audio_path = "wav/" + e.id + ".wav";
  const std::string text = manifest_text(c);
  const Corpus back = parse_manifest(text);
  CHECK(back.presets_hash == c.presets_hash);
  CHECK(back.preset_count == 3);
  CHECK(same_entries(back.entries, c.entries));
  CHECK(manifest_text(back) == text);
  CHECK_THROWS_AS(parse_manifest(text.substr(0, text.size() / 2)), ArtifactError);
  CHECK_THROWS_AS(parse_manifest(""), ArtifactError);
}

TEST_CASE("work pool drains recursive task trees and forwards errors") {
  WorkPool pool(4);
  std::atomic<int> count{0};
  std::function<void(int)> spawn = [&](int depth) {
    ++count;
    if (depth < 6) {
      pool.submit([&, depth] { spawn(depth + 1); });
      pool.submit([&, depth] { spawn(depth + 1); });
    }
  };
  pool.submit([&] { spawn(0); });
  pool.wait();
  CHECK(count == 127);
  pool.submit([] { throw std::runtime_error("boom"); });
  CHECK_THROWS_AS(pool.wait(), std::runtime_error);

  std::vector<int> hits(1000, 0);
  parallel_for(hits.size(), 3, [&](std::size_t i) { hits[i] += 1; });
  CHECK(std::all_of(hits.begin(), hits.end(), [](int h) { return h == 1; }));
}

TEST_CASE("corpus build writes every sound and is reproducible") {
  oracle::TempDir dir("corpus");
  const auto presets = toy::presets(2);
  std::string text;
  for (const auto& p : presets) {
    for (double v : p.values()) text += std::to_string(v) + " ";
    text += "\n";
  }
  write_file(dir / "presets.txt", text);
  ExploreConfig cfg;
  cfg.max_depth = 1;
  cfg.duration = 0.3;
  cfg.workers = 2;
  const auto a = build_corpus(dir / "presets.txt", cfg, dir / "a");
  const auto b = build_corpus(dir / "presets.txt", cfg, dir / "b");
  CHECK(a.entries >= 1);
  CHECK(read_file(a.manifest) == read_file(b.manifest));
  const Corpus c = load_manifest(a.manifest);
  REQUIRE(c.entries.size() == a.entries);
  for (const auto& e : c.entries) {
    const auto wav = read_wav(dir / "a" / e.audio_path);
    CHECK(wav.samples.size() == static_cast<std::size_t>(0.3 * 44100));
    CHECK(read_file(dir / "a" / e.audio_path) == read_file(dir / "b" / e.audio_path));
  }

  write_file(dir / "empty.txt", "# nothing\n");
  CHECK_THROWS(build_corpus(dir / "empty.txt", cfg, dir / "c"));
  CHECK_THROWS(build_corpus(dir / "missing.txt", cfg, dir / "c"));
}
