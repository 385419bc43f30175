#pragma once

#include <map>
#include <string>
#include <vector>

#include "lpf/embedding.hpp"

namespace lpf::matching {

// Closed-set gallery of unit-normalized templates grouped by identity;
// insertion order is the documented tie-break.
class GalleryIndex {
 public:
  void insert(const Embedding& embedding, const std::string& identity_id);

  size_t size() const { return entries_.size(); }
  size_t identity_count() const { return identity_order_.size(); }
  const std::vector<std::string>& identities() const { return identity_order_; }
  bool has_identity(const std::string& identity_id) const;

  struct Entry {
    std::string sample_id;
    std::string identity_id;
    std::vector<float> vector;  // unit norm
  };
  const std::vector<Entry>& entries() const { return entries_; }

 private:
  std::vector<Entry> entries_;
  std::vector<std::string> identity_order_;  // first-insertion order
};

struct RankedCandidates {
  std::string probe_id;
  std::vector<std::pair<std::string, float>> candidates;  // identity, score desc
};

struct CMCCurve {
  std::vector<double> accuracy_at_rank;  // index 0 = rank 1, values in [0,1]

  double at(int rank) const { return accuracy_at_rank.at(rank - 1); }
  int max_rank() const { return static_cast<int>(accuracy_at_rank.size()); }
};

float cosine_similarity(const Embedding& a, const Embedding& b);

// Per-identity max-cosine score against all templates; identities ordered by
// score descending, stable in insertion order on ties.
RankedCandidates identify(const Embedding& probe, const GalleryIndex& gallery);

struct LabeledProbe {
  Embedding embedding;
  std::string identity_id;
};

CMCCurve cmc(const std::vector<LabeledProbe>& probes, const GalleryIndex& gallery,
             int max_rank);

// Externally supplied probe x identity score matrix (baseline ingestion).
struct ScoreMatrix {
  std::string system_name;
  std::vector<std::string> probe_ids;
  std::vector<std::string> gallery_identities;
  std::vector<std::vector<float>> scores;  // [probe][identity], higher = better

  static ScoreMatrix load_csv(const std::string& path,
                              const std::string& system_name);
};

CMCCurve cmc_from_scores(const ScoreMatrix& m,
                         const std::map<std::string, std::string>& probe_truth,
                         int max_rank);

struct SystemComparison {
  std::vector<std::string> system_names;
  std::vector<CMCCurve> curves;  // same order as system_names

  // CSV: rank,<system1>,<system2>,... with accuracy percent to 2 decimals
  std::string to_csv() const;
};

SystemComparison compare_systems(
    const std::vector<ScoreMatrix>& systems,
    const std::map<std::string, std::string>& probe_truth, int max_rank);

// Embedding JSON-lines I/O: {"id": str, "identity": str, "vector": [...]}.
struct EmbeddingRecord {
  Embedding embedding;
  std::string identity_id;
};
void save_embeddings_jsonl(const std::vector<EmbeddingRecord>& records,
                           const std::string& path);
std::vector<EmbeddingRecord> load_embeddings_jsonl(const std::string& path);

// CMC CSV per the reporting format: "rank,accuracy_percent" to 2 decimals.
std::string cmc_to_csv(const CMCCurve& curve);

}  // namespace lpf::matching
