#include "lpf/protocol.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <set>
#include <sstream>

#include "lpf/errors.hpp"
#include "lpf/imaging.hpp"
#include "lpf/rng.hpp"

namespace fs = std::filesystem;

namespace lpf::protocol {

Role role_from_string(const std::string& s) {
  if (s == "gallery") return Role::gallery;
  if (s == "probe") return Role::probe;
  if (s == "train") return Role::train;
  throw ParseError("unknown role: " + s);
}

std::string role_to_string(Role r) {
  switch (r) {
    case Role::gallery: return "gallery";
    case Role::probe: return "probe";
    case Role::train: return "train";
  }
  return "train";
}

namespace {

const std::set<std::string> kKnownSubsets = {
    "R_opt", "R_cap", "Smt", "L_wall", "L_ipad", "L_alum",
    "iiitd_latent", "iiitd_rolled", ""};

std::vector<std::string> split_csv_line(const std::string& line) {
  std::vector<std::string> cells;
  std::stringstream ss(line);
  std::string cell;
  while (std::getline(ss, cell, ',')) cells.push_back(cell);
  if (!line.empty() && line.back() == ',') cells.push_back("");
  return cells;
}

}  // namespace

std::vector<SampleRecord> load_manifest(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ParseError("manifest: cannot open " + path);
  std::string line;
  if (!std::getline(in, line)) throw ParseError("manifest: empty file " + path);
  if (!line.empty() && line.back() == '\r') line.pop_back();
  if (line != "sample_id,path,subject_id,finger_id,role,subset")
    throw ParseError("manifest: bad header: " + line);

  std::vector<SampleRecord> records;
  std::set<std::string> seen_ids;
  int lineno = 1;
  while (std::getline(in, line)) {
    ++lineno;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    auto cells = split_csv_line(line);
    if (cells.size() != 6)
      throw ParseError("manifest line " + std::to_string(lineno) +
                       ": expected 6 fields, got " +
                       std::to_string(cells.size()));
    SampleRecord r;
    r.sample_id = cells[0];
    r.path = cells[1];
    r.subject_id = cells[2];
    r.finger_id = cells[3];
    try {
      r.role = role_from_string(cells[4]);
    } catch (const ParseError& e) {
      throw ParseError("manifest line " + std::to_string(lineno) + ": " +
                       e.what());
    }
    r.subset = cells[5];
    if (!kKnownSubsets.count(r.subset))
      throw ParseError("manifest line " + std::to_string(lineno) +
                       ": unknown subset '" + r.subset + "'");
    if (r.sample_id.empty())
      throw ParseError("manifest line " + std::to_string(lineno) +
                       ": empty sample_id");
    if (!seen_ids.insert(r.sample_id).second)
      throw ParseError("manifest line " + std::to_string(lineno) +
                       ": duplicate sample_id '" + r.sample_id + "'");
    records.push_back(std::move(r));
  }
  return records;
}

void save_manifest(const std::vector<SampleRecord>& records,
                   const std::string& path) {
  std::ofstream out(path);
  if (!out) throw ParseError("manifest: cannot write " + path);
  out << "sample_id,path,subject_id,finger_id,role,subset\n";
  for (const auto& r : records)
    out << r.sample_id << "," << r.path << "," << r.subject_id << ","
        << r.finger_id << "," << role_to_string(r.role) << "," << r.subset
        << "\n";
}

std::vector<SampleRecord> ExperimentSpec::gallery(
    const std::vector<SampleRecord>& r) const {
  std::vector<SampleRecord> out;
  std::copy_if(r.begin(), r.end(), std::back_inserter(out), gallery_filter);
  return out;
}

std::vector<SampleRecord> ExperimentSpec::probes(
    const std::vector<SampleRecord>& r) const {
  std::vector<SampleRecord> out;
  std::copy_if(r.begin(), r.end(), std::back_inserter(out), probe_filter);
  return out;
}

std::vector<SampleRecord> ExperimentSpec::train_set(
    const std::vector<SampleRecord>& r) const {
  std::vector<SampleRecord> out;
  std::copy_if(r.begin(), r.end(), std::back_inserter(out), train_filter);
  return out;
}

void check_closed_set(const ExperimentSpec& spec,
                      const std::vector<SampleRecord>& records) {
  std::set<std::string> enrolled;
  for (const auto& g : spec.gallery(records)) enrolled.insert(g.identity_id());
  std::set<std::string> missing;
  for (const auto& p : spec.probes(records))
    if (!enrolled.count(p.identity_id())) missing.insert(p.identity_id());
  if (!missing.empty()) {
    std::string msg =
        "experiment '" + spec.name + "': probe identities not enrolled:";
    for (const auto& id : missing) msg += " " + id;
    throw ClosedSetViolation(msg);
  }
}

ExperimentSpec experiment_1(const std::vector<SampleRecord>& records) {
  bool has_rolled = false, has_latent = false;
  for (const auto& r : records) {
    has_rolled |= r.subset == "iiitd_rolled";
    has_latent |= r.subset == "iiitd_latent";
  }
  if (!has_rolled)
    throw ConfigError("experiment_1: manifest has no iiitd_rolled records");
  if (!has_latent)
    throw ConfigError("experiment_1: manifest has no iiitd_latent records");

  ExperimentSpec spec;
  spec.name = "experiment_1";
  spec.gallery_filter = [](const SampleRecord& r) {
    return r.subset == "iiitd_rolled";
  };
  spec.probe_filter = [](const SampleRecord& r) {
    return r.subset == "iiitd_latent";
  };
  spec.train_filter = spec.probe_filter;  // same identity space, latent domain
  check_closed_set(spec, records);
  return spec;
}

ExperimentSpec experiment_2(const std::vector<SampleRecord>& records) {
  bool has_ropt = false;
  for (const auto& r : records) has_ropt |= r.subset == "R_opt";
  if (!has_ropt)
    throw ConfigError("experiment_2: manifest has no R_opt records");

  ExperimentSpec spec;
  spec.name = "experiment_2";
  spec.gallery_filter = [](const SampleRecord& r) {
    return r.subset == "R_opt";
  };
  spec.probe_filter = [](const SampleRecord& r) {
    return r.subset == "Smt" || r.subset == "L_wall" ||
           r.subset == "L_ipad" || r.subset == "L_alum";
  };
  spec.train_filter = [](const SampleRecord& r) {
    return r.subset == "iiitd_latent" || r.subset == "iiitd_rolled";
  };
  check_closed_set(spec, records);
  return spec;
}

std::vector<AblationRow> ablation_grid() {
  return {{"cnn", false, false}, {"cnn+sa", true, false}, {"full", true, true}};
}

std::vector<SampleRecord> generate_synthetic_corpus(
    const std::string& dir, const SyntheticCorpusConfig& cfg) {
  fs::create_directories(fs::path(dir) / "images");
  Rng rng(cfg.seed);
  std::vector<SampleRecord> records;

  for (int id = 0; id < cfg.num_identities; ++id) {
    // Orientations 45 degrees apart; two frequency bands.
    double theta = (id % 4) * M_PI / 4.0 + M_PI / 16.0;
    double period = (id / 4 % 2 == 0) ? 8.0 : 12.0;
    double freq = 1.0 / period;
    double nx = -std::sin(theta), ny = std::cos(theta);

    for (int imp = 0; imp < cfg.impressions_per_identity; ++imp) {
      double phase = rng.uniform(0.0, 2.0 * M_PI);
      double dx = rng.uniform(-3.0, 3.0), dy = rng.uniform(-3.0, 3.0);
      imaging::RawImage img(cfg.image_size, cfg.image_size);
      for (int r = 0; r < cfg.image_size; ++r)
        for (int c = 0; c < cfg.image_size; ++c) {
          double u = (c + dx) * nx + (r + dy) * ny;
          double v = 128.0 + 100.0 * std::cos(2.0 * M_PI * freq * u + phase) +
                     rng.uniform(-8.0, 8.0);
          img.at(r, c) = static_cast<uint8_t>(std::clamp(v, 0.0, 255.0));
        }
      SampleRecord rec;
      rec.sample_id = "id" + std::to_string(id) + "_imp" + std::to_string(imp);
      rec.subject_id = "s" + std::to_string(id);
      rec.finger_id = "f0";
      rec.role = (imp == cfg.impressions_per_identity - 1) ? Role::probe
                                                           : Role::train;
      rec.subset = "";
      fs::path img_path = fs::path(dir) / "images" / (rec.sample_id + ".png");
      imaging::save_image(img, img_path.string());
      rec.path = img_path.string();
      records.push_back(std::move(rec));
    }
  }
  save_manifest(records, (fs::path(dir) / "manifest.csv").string());
  return records;
}

}  // namespace lpf::protocol
