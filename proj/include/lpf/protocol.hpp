#pragma once

#include <functional>
#include <optional>
#include <string>
#include <vector>

namespace lpf::protocol {

enum class Role { gallery, probe, train };

// One manifest row: a fingerprint image with identity and role metadata.
struct SampleRecord {
  std::string sample_id;
  std::string path;
  std::string subject_id;
  std::string finger_id;
  Role role = Role::train;
  std::string subset;  // R_opt, R_cap, Smt, L_wall, L_ipad, L_alum,
                       // iiitd_latent, iiitd_rolled, or empty

  std::string identity_id() const { return subject_id + "/" + finger_id; }
};

Role role_from_string(const std::string& s);
std::string role_to_string(Role r);

// Manifest CSV schema: sample_id,path,subject_id,finger_id,role,subset
std::vector<SampleRecord> load_manifest(const std::string& path);
void save_manifest(const std::vector<SampleRecord>& records,
                   const std::string& path);

using RecordPredicate = std::function<bool(const SampleRecord&)>;

struct ExperimentSpec {
  std::string name;
  RecordPredicate gallery_filter;
  RecordPredicate probe_filter;
  RecordPredicate train_filter;
  int max_rank = 10;
  bool closed_set = true;

  std::vector<SampleRecord> gallery(const std::vector<SampleRecord>& r) const;
  std::vector<SampleRecord> probes(const std::vector<SampleRecord>& r) const;
  std::vector<SampleRecord> train_set(const std::vector<SampleRecord>& r) const;
};

// Verifies every probe identity is enrolled; throws ClosedSetViolation
// listing offending identities.
void check_closed_set(const ExperimentSpec& spec,
                      const std::vector<SampleRecord>& records);

// IIITD closed set: rolled gallery, latent probes, latent training pool.
ExperimentSpec experiment_1(const std::vector<SampleRecord>& records);
// IIITD-trained, LFIW-tested: R-opt gallery, Smt/L-wall/L-ipad/L-alum probes,
// R-cap excluded from both sides.
ExperimentSpec experiment_2(const std::vector<SampleRecord>& records);

struct AblationRow {
  std::string name;
  bool use_attention = false;
  bool use_transformer = false;
};

// The three-configuration grid: cnn / cnn+sa / full.
std::vector<AblationRow> ablation_grid();

// Synthetic desk-scale corpus: each identity is a distinct
// orientation/frequency grating; impressions vary phase, offset and noise.
struct SyntheticCorpusConfig {
  int num_identities = 8;
  int impressions_per_identity = 20;
  int image_size = 96;
  uint64_t seed = 7;
};
// Writes PNGs under dir/images and a manifest at dir/manifest.csv; the last
// impression of each identity gets role=probe, the rest role=train (train
// impressions double as the gallery in self-match evaluations).
std::vector<SampleRecord> generate_synthetic_corpus(
    const std::string& dir, const SyntheticCorpusConfig& cfg);

}  // namespace lpf::protocol
