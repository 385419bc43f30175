#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <cstdio>
#include <fstream>
#include <map>

#include "lpf/errors.hpp"
#include "lpf/matching.hpp"
#include "lpf/rng.hpp"

using namespace lpf;
using namespace lpf::matching;

namespace {

Embedding emb(std::vector<float> v, const std::string& id = "") {
  Embedding e;
  e.vector = std::move(v);
  e.sample_id = id;
  return e;
}

Embedding random_emb(int dim, Rng& rng, const std::string& id) {
  std::vector<float> v(dim);
  for (auto& x : v) x = static_cast<float>(rng.normal());
  return emb(std::move(v), id);
}

}  // namespace

TEST_CASE("cosine similarity basics") {
  CHECK(cosine_similarity(emb({1, 2, 3}), emb({1, 2, 3})) ==
        doctest::Approx(1.0).epsilon(1e-6));
  CHECK(cosine_similarity(emb({1, 0}), emb({0, 1})) ==
        doctest::Approx(0.0).epsilon(1e-6));
  // Scale invariance: 3a vs a.
  CHECK(cosine_similarity(emb({3, 6, 9}), emb({1, 2, 3})) ==
        doctest::Approx(1.0).epsilon(1e-6));
  CHECK(cosine_similarity(emb({1, 0}), emb({-1, 0})) ==
        doctest::Approx(-1.0).epsilon(1e-6));
  CHECK_THROWS_AS(cosine_similarity(emb({0, 0}), emb({1, 0})),
                  DegenerateInputError);
}

TEST_CASE("identify ranks the matching identity first") {
  GalleryIndex g;
  g.insert(emb({1, 0, 0}, "a1"), "A");
  g.insert(emb({0, 1, 0}, "b1"), "B");
  g.insert(emb({0, 0, 1}, "c1"), "C");
  RankedCandidates r = identify(emb({0, 2, 0}, "p"), g);
  REQUIRE(r.candidates.size() == 3);
  CHECK(r.candidates[0].first == "B");
  CHECK(r.candidates[0].second == doctest::Approx(1.0));
  CHECK(r.probe_id == "p");
}

TEST_CASE("identify takes per-identity max over templates") {
  GalleryIndex g;
  g.insert(emb({1, 0}, "a1"), "A");
  g.insert(emb({0, 1}, "a2"), "A");  // second template matches the probe
  g.insert(emb({0.6f, 0.8f}, "b1"), "B");
  RankedCandidates r = identify(emb({0, 1}, "p"), g);
  CHECK(r.candidates[0].first == "A");
  CHECK(r.candidates[0].second == doctest::Approx(1.0));
  CHECK(r.candidates[1].second == doctest::Approx(0.8).epsilon(1e-6));
}

TEST_CASE("identify breaks exact ties by gallery insertion order") {
  GalleryIndex g;
  g.insert(emb({1, 0}, "z1"), "Z");
  g.insert(emb({1, 0}, "a1"), "A");  // same vector, later insertion
  RankedCandidates r = identify(emb({1, 0}, "p"), g);
  CHECK(r.candidates[0].first == "Z");
  CHECK(r.candidates[1].first == "A");
}

TEST_CASE("identify matches a brute-force oracle on random instances") {
  Rng rng(42);
  for (int trial = 0; trial < 200; ++trial) {
    int dim = 4 + static_cast<int>(rng.uniform_index(12));
    int n_ids = 2 + static_cast<int>(rng.uniform_index(31));
    GalleryIndex g;
    std::vector<std::string> ids;
    // identity -> raw (unnormalized) template list, insertion order
    std::vector<std::vector<std::vector<float>>> raw(n_ids);
    for (int i = 0; i < n_ids; ++i) {
      std::string name = "id" + std::to_string(i);
      ids.push_back(name);
      int n_tpl = 1 + static_cast<int>(rng.uniform_index(4));
      for (int t = 0; t < n_tpl; ++t) {
        Embedding e = random_emb(dim, rng,
                                 name + "_t" + std::to_string(t));
        raw[i].push_back(e.vector);
        g.insert(e, name);
      }
    }
    Embedding probe = random_emb(dim, rng, "p");
    RankedCandidates got = identify(probe, g);

    // Oracle: per-identity max cosine, stable sort by score desc.
    std::vector<std::pair<std::string, double>> want;
    for (int i = 0; i < n_ids; ++i) {
      double best = -2;
      for (const auto& t : raw[i]) {
        double dot = 0, na = 0, nb = 0;
        for (int k = 0; k < dim; ++k) {
          dot += double(probe.vector[k]) * t[k];
          na += double(probe.vector[k]) * probe.vector[k];
          nb += double(t[k]) * t[k];
        }
        best = std::max(best, dot / std::sqrt(na * nb));
      }
      want.emplace_back(ids[i], best);
    }
    std::stable_sort(want.begin(), want.end(),
                     [](const auto& a, const auto& b) { return a.second > b.second; });

    REQUIRE(got.candidates.size() == want.size());
    for (size_t i = 0; i < want.size(); ++i) {
      CHECK(got.candidates[i].first == want[i].first);
      CHECK(got.candidates[i].second ==
            doctest::Approx(want[i].second).epsilon(1e-4));
    }
  }
}

TEST_CASE("gallery rejects duplicate sample ids and zero vectors") {
  GalleryIndex g;
  g.insert(emb({1, 0}, "s1"), "A");
  CHECK_THROWS_AS(g.insert(emb({0, 1}, "s1"), "B"), Error);
  CHECK_THROWS_AS(g.insert(emb({0, 0}, "s2"), "C"), DegenerateInputError);
}

TEST_CASE("cmc: self-matching probes give 100 percent at every rank") {
  Rng rng(7);
  GalleryIndex g;
  std::vector<LabeledProbe> probes;
  for (int i = 0; i < 10; ++i) {
    Embedding e = random_emb(16, rng, "g" + std::to_string(i));
    std::string id = "id" + std::to_string(i);
    g.insert(e, id);
    probes.push_back({emb(e.vector, "p" + std::to_string(i)), id});
  }
  CMCCurve c = cmc(probes, g, 10);
  REQUIRE(c.max_rank() == 10);
  for (int r = 1; r <= 10; ++r) CHECK(c.at(r) == doctest::Approx(1.0));
}

TEST_CASE("cmc: hand-placed ranks accumulate correctly") {
  GalleryIndex g;
  g.insert(emb({1, 0, 0, 0}, "ga"), "A");
  g.insert(emb({0, 1, 0, 0}, "gb"), "B");
  g.insert(emb({0, 0, 1, 0}, "gc"), "C");
  g.insert(emb({0, 0, 0, 1}, "gd"), "D");
  std::vector<LabeledProbe> probes;
  // Probe 1: true identity A at rank 1.
  probes.push_back({emb({1, 0.1f, 0, 0}, "p1"), "A"});
  // Probe 2: true identity B at rank 2 (C scores higher).
  probes.push_back({emb({0, 0.5f, 0.9f, 0}, "p2"), "B"});
  // Probe 3: true identity D at rank 4 (everything else scores higher).
  probes.push_back({emb({0.9f, 0.8f, 0.7f, 0.1f}, "p3"), "D"});
  CMCCurve c = cmc(probes, g, 4);
  CHECK(c.at(1) == doctest::Approx(1.0 / 3));
  CHECK(c.at(2) == doctest::Approx(2.0 / 3));
  CHECK(c.at(3) == doctest::Approx(2.0 / 3));
  CHECK(c.at(4) == doctest::Approx(1.0));
}

TEST_CASE("cmc curves are monotone non-decreasing") {
  Rng rng(9);
  GalleryIndex g;
  for (int i = 0; i < 12; ++i)
    g.insert(random_emb(8, rng, "g" + std::to_string(i)),
             "id" + std::to_string(i));
  std::vector<LabeledProbe> probes;
  for (int i = 0; i < 30; ++i)
    probes.push_back({random_emb(8, rng, "p" + std::to_string(i)),
                      "id" + std::to_string(i % 12)});
  CMCCurve c = cmc(probes, g, 12);
  for (int r = 2; r <= 12; ++r) CHECK(c.at(r) >= c.at(r - 1));
  CHECK(c.at(12) == doctest::Approx(1.0));  // closed set: rank N is always 100%
}

TEST_CASE("cmc rejects probes whose identity is missing from the gallery") {
  GalleryIndex g;
  g.insert(emb({1, 0}, "g1"), "A");
  std::vector<LabeledProbe> probes = {{emb({1, 0}, "p1"), "UNKNOWN"}};
  CHECK_THROWS_AS(cmc(probes, g, 1), ClosedSetViolation);
}

TEST_CASE("score matrix round trip and cmc_from_scores") {
  std::string path = "test_scores.csv";
  {
    std::ofstream f(path);
    f << "probe_id,A,B,C\n";
    f << "p1,0.9,0.2,0.1\n";   // truth A -> rank 1
    f << "p2,0.8,0.5,0.6\n";   // truth B -> rank 3
    f << "p3,0.1,0.2,0.9\n";   // truth C -> rank 1
  }
  ScoreMatrix m = ScoreMatrix::load_csv(path, "baseline");
  CHECK(m.system_name == "baseline");
  CHECK(m.probe_ids == std::vector<std::string>{"p1", "p2", "p3"});
  CHECK(m.gallery_identities == std::vector<std::string>{"A", "B", "C"});
  CHECK(m.scores[1][2] == doctest::Approx(0.6));

  std::map<std::string, std::string> truth = {
      {"p1", "A"}, {"p2", "B"}, {"p3", "C"}};
  CMCCurve c = cmc_from_scores(m, truth, 3);
  CHECK(c.at(1) == doctest::Approx(2.0 / 3));
  CHECK(c.at(2) == doctest::Approx(2.0 / 3));
  CHECK(c.at(3) == doctest::Approx(1.0));
  std::remove(path.c_str());
}

TEST_CASE("compare_systems aligns curves and formats CSV") {
  ScoreMatrix a;
  a.system_name = "sys_a";
  a.probe_ids = {"p1", "p2"};
  a.gallery_identities = {"X", "Y"};
  a.scores = {{0.9f, 0.1f}, {0.2f, 0.8f}};  // both rank 1
  ScoreMatrix b = a;
  b.system_name = "sys_b";
  b.scores = {{0.1f, 0.9f}, {0.8f, 0.2f}};  // both rank 2

  std::map<std::string, std::string> truth = {{"p1", "X"}, {"p2", "Y"}};
  SystemComparison cmp = compare_systems({a, b}, truth, 2);
  REQUIRE(cmp.curves.size() == 2);
  CHECK(cmp.curves[0].at(1) == doctest::Approx(1.0));
  CHECK(cmp.curves[1].at(1) == doctest::Approx(0.0));
  CHECK(cmp.curves[1].at(2) == doctest::Approx(1.0));
  CHECK(cmp.to_csv() ==
        "rank,sys_a,sys_b\n1,100.00,0.00\n2,100.00,100.00\n");

  // Mismatched probe sets are rejected.
  ScoreMatrix c = b;
  c.probe_ids = {"p1", "p9"};
  CHECK_THROWS_AS(compare_systems({a, c}, truth, 2), Error);
}

TEST_CASE("embedding jsonl round trip") {
  Rng rng(3);
  std::vector<EmbeddingRecord> recs;
  for (int i = 0; i < 5; ++i) {
    EmbeddingRecord r;
    r.embedding = random_emb(8, rng, "s" + std::to_string(i));
    r.identity_id = "id" + std::to_string(i % 2);
    recs.push_back(std::move(r));
  }
  std::string path = "test_embeddings.jsonl";
  save_embeddings_jsonl(recs, path);
  std::vector<EmbeddingRecord> back = load_embeddings_jsonl(path);
  REQUIRE(back.size() == recs.size());
  for (size_t i = 0; i < recs.size(); ++i) {
    CHECK(back[i].embedding.sample_id == recs[i].embedding.sample_id);
    CHECK(back[i].identity_id == recs[i].identity_id);
    CHECK(back[i].embedding.vector == recs[i].embedding.vector);
  }
  // Key order is part of the format.
  std::ifstream f(path);
  std::string line;
  std::getline(f, line);
  CHECK(line.rfind("{\"id\":", 0) == 0);
  CHECK(line.find("\"identity\":") < line.find("\"vector\":"));
  std::remove(path.c_str());
}

TEST_CASE("cmc csv format") {
  CMCCurve c;
  c.accuracy_at_rank = {0.5, 2.0 / 3, 1.0};
  CHECK(cmc_to_csv(c) ==
        "rank,accuracy_percent\n1,50.00\n2,66.67\n3,100.00\n");
}
