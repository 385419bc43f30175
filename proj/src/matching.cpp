#include "lpf/matching.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <set>
#include <sstream>

#include <json.hpp>

#include "lpf/errors.hpp"

namespace lpf::matching {

namespace {

double norm_of(const std::vector<float>& v) {
  double s = 0.0;
  for (float x : v) s += static_cast<double>(x) * x;
  return std::sqrt(s);
}

std::vector<float> unit(const std::vector<float>& v) {
  double n = norm_of(v);
  if (n < 1e-12)
    throw DegenerateInputError("matching: zero-norm embedding");
  std::vector<float> out(v.size());
  for (size_t i = 0; i < v.size(); ++i)
    out[i] = static_cast<float>(v[i] / n);
  return out;
}

}  // namespace

void GalleryIndex::insert(const Embedding& embedding,
                          const std::string& identity_id) {
  for (const auto& e : entries_)
    if (e.sample_id == embedding.sample_id)
      throw ConfigError("GalleryIndex: duplicate sample_id " +
                        embedding.sample_id);
  Entry e;
  e.sample_id = embedding.sample_id;
  e.identity_id = identity_id;
  e.vector = embedding.normalized ? embedding.vector : unit(embedding.vector);
  entries_.push_back(std::move(e));
  if (!has_identity(identity_id)) identity_order_.push_back(identity_id);
}

bool GalleryIndex::has_identity(const std::string& identity_id) const {
  return std::find(identity_order_.begin(), identity_order_.end(),
                   identity_id) != identity_order_.end();
}

float cosine_similarity(const Embedding& a, const Embedding& b) {
  if (a.vector.size() != b.vector.size())
    throw ShapeError("cosine_similarity: length mismatch");
  double na = norm_of(a.vector), nb = norm_of(b.vector);
  if (na < 1e-12 || nb < 1e-12)
    throw DegenerateInputError("cosine_similarity: zero vector");
  double dot = 0.0;
  for (size_t i = 0; i < a.vector.size(); ++i)
    dot += static_cast<double>(a.vector[i]) * b.vector[i];
  return static_cast<float>(std::clamp(dot / (na * nb), -1.0, 1.0));
}

RankedCandidates identify(const Embedding& probe, const GalleryIndex& gallery) {
  if (gallery.size() == 0) throw ConfigError("identify: empty gallery");
  std::vector<float> p = probe.normalized ? probe.vector : unit(probe.vector);

  // Per-identity maximum over its templates, in insertion order.
  std::vector<float> best(gallery.identity_count(),
                          -std::numeric_limits<float>::infinity());
  std::map<std::string, size_t> pos;
  for (size_t i = 0; i < gallery.identities().size(); ++i)
    pos[gallery.identities()[i]] = i;
  for (const auto& e : gallery.entries()) {
    if (e.vector.size() != p.size())
      throw ShapeError("identify: dimension mismatch between probe and gallery");
    double dot = 0.0;
    for (size_t i = 0; i < p.size(); ++i)
      dot += static_cast<double>(p[i]) * e.vector[i];
    size_t idx = pos[e.identity_id];
    best[idx] = std::max(best[idx], static_cast<float>(dot));
  }

  RankedCandidates out;
  out.probe_id = probe.sample_id;
  std::vector<size_t> order(best.size());
  for (size_t i = 0; i < order.size(); ++i) order[i] = i;
  std::stable_sort(order.begin(), order.end(),
                   [&](size_t a, size_t b) { return best[a] > best[b]; });
  for (size_t i : order)
    out.candidates.emplace_back(gallery.identities()[i], best[i]);
  return out;
}

CMCCurve cmc(const std::vector<LabeledProbe>& probes, const GalleryIndex& gallery,
             int max_rank) {
  if (max_rank < 1 || max_rank > static_cast<int>(gallery.identity_count()))
    throw ConfigError("cmc: max_rank out of range");
  std::vector<std::string> missing;
  for (const auto& p : probes)
    if (!gallery.has_identity(p.identity_id)) missing.push_back(p.embedding.sample_id);
  if (!missing.empty()) {
    std::string msg = "cmc: closed-set violation, probe ids not enrolled:";
    for (const auto& id : missing) msg += " " + id;
    throw ClosedSetViolation(msg);
  }
  if (probes.empty()) throw ConfigError("cmc: no probes");

  std::vector<int64_t> hits(static_cast<size_t>(max_rank), 0);
  for (const auto& p : probes) {
    RankedCandidates ranked = identify(p.embedding, gallery);
    for (int r = 0; r < max_rank; ++r)
      if (ranked.candidates[static_cast<size_t>(r)].first == p.identity_id) {
        for (int j = r; j < max_rank; ++j) ++hits[static_cast<size_t>(j)];
        break;
      }
  }
  CMCCurve curve;
  for (int r = 0; r < max_rank; ++r)
    curve.accuracy_at_rank.push_back(static_cast<double>(hits[static_cast<size_t>(r)]) /
                                     static_cast<double>(probes.size()));
  return curve;
}

ScoreMatrix ScoreMatrix::load_csv(const std::string& path,
                                  const std::string& system_name) {
  std::ifstream in(path);
  if (!in) throw ParseError("score matrix: cannot open " + path);
  ScoreMatrix m;
  m.system_name = system_name;
  std::string line;
  if (!std::getline(in, line))
    throw ParseError("score matrix: empty file " + path);
  std::stringstream header(line);
  std::string cell;
  bool first = true;
  while (std::getline(header, cell, ',')) {
    if (first) {
      first = false;
      continue;  // corner cell over the probe-id column
    }
    m.gallery_identities.push_back(cell);
  }
  int lineno = 1;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    std::stringstream row(line);
    std::vector<float> scores;
    std::string probe_id;
    if (!std::getline(row, probe_id, ','))
      throw ParseError("score matrix line " + std::to_string(lineno) +
                       ": missing probe id");
    while (std::getline(row, cell, ',')) {
      try {
        scores.push_back(std::stof(cell));
      } catch (const std::exception&) {
        throw ParseError("score matrix line " + std::to_string(lineno) +
                         ": bad score '" + cell + "'");
      }
    }
    if (scores.size() != m.gallery_identities.size())
      throw ParseError("score matrix line " + std::to_string(lineno) +
                       ": expected " + std::to_string(m.gallery_identities.size()) +
                       " scores, got " + std::to_string(scores.size()));
    m.probe_ids.push_back(probe_id);
    m.scores.push_back(std::move(scores));
  }
  return m;
}

CMCCurve cmc_from_scores(const ScoreMatrix& m,
                         const std::map<std::string, std::string>& probe_truth,
                         int max_rank) {
  if (m.probe_ids.empty()) throw ConfigError("cmc_from_scores: no probes");
  if (max_rank < 1 || max_rank > static_cast<int>(m.gallery_identities.size()))
    throw ConfigError("cmc_from_scores: max_rank out of range");
  std::vector<int64_t> hits(static_cast<size_t>(max_rank), 0);
  for (size_t pi = 0; pi < m.probe_ids.size(); ++pi) {
    auto it = probe_truth.find(m.probe_ids[pi]);
    if (it == probe_truth.end())
      throw ClosedSetViolation("cmc_from_scores: no truth for probe " +
                               m.probe_ids[pi]);
    const std::string& truth = it->second;
    std::vector<size_t> order(m.gallery_identities.size());
    for (size_t i = 0; i < order.size(); ++i) order[i] = i;
    std::stable_sort(order.begin(), order.end(), [&](size_t a, size_t b) {
      return m.scores[pi][a] > m.scores[pi][b];
    });
    for (int r = 0; r < max_rank; ++r)
      if (m.gallery_identities[order[static_cast<size_t>(r)]] == truth) {
        for (int j = r; j < max_rank; ++j) ++hits[static_cast<size_t>(j)];
        break;
      }
  }
  CMCCurve curve;
  for (int r = 0; r < max_rank; ++r)
    curve.accuracy_at_rank.push_back(
        static_cast<double>(hits[static_cast<size_t>(r)]) /
        static_cast<double>(m.probe_ids.size()));
  return curve;
}

SystemComparison compare_systems(
    const std::vector<ScoreMatrix>& systems,
    const std::map<std::string, std::string>& probe_truth, int max_rank) {
  if (systems.empty()) throw ConfigError("compare_systems: no systems");
  std::set<std::string> reference(systems[0].probe_ids.begin(),
                                  systems[0].probe_ids.end());
  for (const auto& s : systems) {
    std::set<std::string> probes(s.probe_ids.begin(), s.probe_ids.end());
    if (probes != reference)
      throw ConfigError("compare_systems: probe sets differ between '" +
                        systems[0].system_name + "' and '" + s.system_name + "'");
  }
  SystemComparison cmp;
  for (const auto& s : systems) {
    cmp.system_names.push_back(s.system_name);
    cmp.curves.push_back(cmc_from_scores(s, probe_truth, max_rank));
  }
  return cmp;
}

std::string SystemComparison::to_csv() const {
  std::string out = "rank";
  for (const auto& n : system_names) out += "," + n;
  out += "\n";
  int ranks = curves.empty() ? 0 : curves[0].max_rank();
  for (int r = 1; r <= ranks; ++r) {
    out += std::to_string(r);
    for (const auto& c : curves) {
      char buf[32];
      std::snprintf(buf, sizeof(buf), ",%.2f", c.at(r) * 100.0);
      out += buf;
    }
    out += "\n";
  }
  return out;
}

void save_embeddings_jsonl(const std::vector<EmbeddingRecord>& records,
                           const std::string& path) {
  std::ofstream out(path);
  if (!out) throw ParseError("save_embeddings_jsonl: cannot write " + path);
  for (const auto& r : records) {
    nlohmann::ordered_json j;
    j["id"] = r.embedding.sample_id;
    j["identity"] = r.identity_id;
    j["vector"] = r.embedding.vector;
    out << j.dump() << "\n";
  }
}

std::vector<EmbeddingRecord> load_embeddings_jsonl(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ParseError("load_embeddings_jsonl: cannot open " + path);
  std::vector<EmbeddingRecord> records;
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(line);
    } catch (const std::exception& e) {
      throw ParseError("embeddings line " + std::to_string(lineno) + ": " +
                       e.what());
    }
    EmbeddingRecord r;
    r.embedding.sample_id = j.at("id").get<std::string>();
    r.identity_id = j.at("identity").get<std::string>();
    r.embedding.vector = j.at("vector").get<std::vector<float>>();
    records.push_back(std::move(r));
  }
  return records;
}

std::string cmc_to_csv(const CMCCurve& curve) {
  std::string out = "rank,accuracy_percent\n";
  for (int r = 1; r <= curve.max_rank(); ++r) {
    char buf[48];
    std::snprintf(buf, sizeof(buf), "%d,%.2f\n", r, curve.at(r) * 100.0);
    out += buf;
  }
  return out;
}

}  // namespace lpf::matching
