#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "lpf/backbone.hpp"
#include "lpf/config.hpp"
#include "lpf/errors.hpp"
#include "lpf/imaging.hpp"
#include "lpf/matching.hpp"
#include "lpf/protocol.hpp"
#include "lpf/training.hpp"

namespace fs = std::filesystem;
using ordered_json = nlohmann::ordered_json;

namespace {

// LPF_SEED wins over any config or flag seed.
uint64_t resolve_seed(uint64_t seed) {
  if (const char* env = std::getenv("LPF_SEED")) return std::stoull(env);
  return seed;
}

void write_run_echo(const std::string& out_dir, const ordered_json& echo) {
  fs::create_directories(out_dir);
  std::ofstream out(fs::path(out_dir) / "run.json");
  out << echo.dump(2) << "\n";
}

lpf::backbone::HybridEncoderConfig encoder_config_from(
    const std::string& variant, int input_size, uint64_t seed) {
  using Cfg = lpf::backbone::HybridEncoderConfig;
  Cfg cfg = variant == "tiny" ? Cfg::tiny_default() : Cfg::full_default();
  if (input_size > 0) cfg.input_size = input_size;
  cfg.seed = seed;
  return cfg;
}

lpf::backbone::HybridEncoderConfig encoder_config_from_checkpoint(
    const lpf::Checkpoint& ckpt) {
  using Cfg = lpf::backbone::HybridEncoderConfig;
  auto meta_int = [&](const std::string& key) {
    return std::stoi(ckpt.meta.at(key));
  };
  Cfg cfg = ckpt.meta.at("variant") == "tiny_test" ? Cfg::tiny_default()
                                                   : Cfg::full_default();
  cfg.cnn_channels = meta_int("cnn_channels");
  cfg.transformer_dim = meta_int("transformer_dim");
  cfg.embedding_dim = meta_int("embedding_dim");
  cfg.attention_kernel = meta_int("attention_kernel");
  cfg.hidden_dim = meta_int("hidden_dim");
  cfg.input_size = meta_int("input_size");
  cfg.dropout_rate = std::stof(ckpt.meta.at("dropout_rate"));
  cfg.seed = std::stoull(ckpt.meta.at("seed"));
  return cfg;
}

// identity -> class index, sorted for stable label assignment
std::map<std::string, int> label_map(
    const std::vector<lpf::protocol::SampleRecord>& records) {
  std::set<std::string> ids;
  for (const auto& r : records) ids.insert(r.identity_id());
  std::map<std::string, int> labels;
  int next = 0;
  for (const auto& id : ids) labels[id] = next++;
  return labels;
}

lpf::imaging::ModelInput model_input_for(
    const lpf::protocol::SampleRecord& rec, int size, bool run_preprocess,
    const lpf::imaging::PreprocessConfig& pp_cfg) {
  lpf::imaging::RawImage img = lpf::imaging::load_image(rec.path);
  if (!run_preprocess) return lpf::imaging::to_model_input(img, size);
  lpf::imaging::PreprocessConfig cfg = pp_cfg;
  cfg.model_input_size = size;
  return lpf::imaging::preprocess(img, std::nullopt, cfg);
}

struct TrainResult {
  std::map<std::string, int> labels;
};

// Shared by cmd_train and cmd_ablate: train one encoder on the manifest's
// role=train records and write a checkpoint.
TrainResult run_training(const std::vector<lpf::protocol::SampleRecord>& records,
                         const lpf::KeyValueConfig& kv,
                         const std::string& variant, int input_size,
                         uint64_t seed, lpf::backbone::VariantFlags flags,
                         bool run_preprocess, const std::string& out_dir,
                         const std::string& ckpt_name) {
  std::vector<lpf::protocol::SampleRecord> train_records;
  for (const auto& r : records)
    if (r.role == lpf::protocol::Role::train) train_records.push_back(r);
  if (train_records.empty())
    throw lpf::ConfigError("no samples with role=train in manifest");

  auto labels = label_map(train_records);

  auto enc_cfg = encoder_config_from(variant, input_size, seed);
  lpf::backbone::HybridEncoder encoder(enc_cfg);

  lpf::training::ArcFaceConfig arc_cfg;
  arc_cfg.margin_m = static_cast<float>(kv.get_double("margin", 0.5));
  arc_cfg.scale_s = static_cast<float>(kv.get_double("scale", 64.0));
  arc_cfg.num_classes = static_cast<int>(labels.size());
  lpf::Rng head_rng(seed + 17);
  lpf::training::ArcFaceHead head(arc_cfg, enc_cfg.embedding_dim, head_rng);

  lpf::training::TrainConfig train_cfg;
  train_cfg.learning_rate = kv.get_double("lr", 1e-4);
  train_cfg.weight_decay = kv.get_double("weight_decay", 1e-5);
  train_cfg.batch_size = kv.get_int("batch_size", 16);
  train_cfg.epochs = kv.get_int("epochs", 50);
  train_cfg.seed = seed;

  lpf::training::AugmentationPolicy policy;
  policy.rotation_deg = kv.get_double("rotation_deg", 15.0);
  policy.hflip_prob = kv.get_double("hflip_prob", 0.5);
  policy.brightness_contrast_delta = kv.get_double("bc_delta", 0.1);
  policy.blur_kernel = kv.get_int("blur_kernel", 3);

  lpf::imaging::PreprocessConfig pp_cfg;
  std::vector<lpf::training::TrainSample> dataset;
  for (const auto& r : train_records) {
    lpf::training::TrainSample s;
    s.input = model_input_for(r, enc_cfg.input_size, run_preprocess, pp_cfg);
    s.label = labels.at(r.identity_id());
    s.sample_id = r.sample_id;
    dataset.push_back(std::move(s));
  }

  fs::create_directories(out_dir);
  auto stats = lpf::training::train(
      encoder, head, dataset, train_cfg, policy, flags,
      (fs::path(out_dir) / (ckpt_name + "_train_log.csv")).string());

  lpf::Checkpoint ckpt = encoder.to_checkpoint(
      static_cast<int64_t>(stats.size()));
  ckpt.params.emplace_back("arcface.weights", head.weights()->value);
  ckpt.save((fs::path(out_dir) / ckpt_name).string());

  ordered_json label_json = ordered_json::object();
  for (const auto& [id, idx] : labels) label_json[id] = idx;
  std::ofstream lab(fs::path(out_dir) / (ckpt_name + "_labels.json"));
  lab << label_json.dump(2) << "\n";

  for (const auto& es : stats)
    std::cout << "epoch " << es.epoch << " mean_loss " << es.mean_loss << "\n";
  return {labels};
}

std::vector<lpf::matching::EmbeddingRecord> embed_records(
    const lpf::backbone::HybridEncoder& encoder,
    const std::vector<lpf::protocol::SampleRecord>& records,
    lpf::backbone::VariantFlags flags, bool run_preprocess) {
  lpf::imaging::PreprocessConfig pp_cfg;
  std::vector<lpf::matching::EmbeddingRecord> out;
  for (const auto& r : records) {
    lpf::matching::EmbeddingRecord rec;
    rec.embedding = encoder.encode(
        model_input_for(r, encoder.config().input_size, run_preprocess, pp_cfg),
        flags, r.sample_id);
    rec.identity_id = r.identity_id();
    out.push_back(std::move(rec));
  }
  return out;
}

double rank_n_percent(const lpf::matching::CMCCurve& curve, int rank) {
  return curve.at(std::min(rank, curve.max_rank())) * 100.0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Latent fingerprint identification pipeline: preprocessing, "
               "hybrid-encoder training, embedding, identification and CMC "
               "evaluation"};
  app.require_subcommand(1);

  // ---- preprocess ----
  auto* cmd_pre = app.add_subcommand("preprocess",
                                     "Batch-run the imaging pipeline");
  std::string pre_manifest, pre_out, pre_config, pre_mask_dir;
  cmd_pre->add_option("--manifest", pre_manifest)->required();
  cmd_pre->add_option("--out-dir", pre_out)->required();
  cmd_pre->add_option("--config", pre_config);
  cmd_pre->add_option("--mask-dir", pre_mask_dir,
                      "Directory of external masks named <sample_id>.png");

  // ---- gen-corpus ----
  auto* cmd_gen = app.add_subcommand("gen-corpus",
                                     "Generate the synthetic grating corpus");
  std::string gen_out;
  int gen_ids = 8, gen_imps = 20, gen_size = 96;
  uint64_t gen_seed = 7;
  cmd_gen->add_option("--out-dir", gen_out)->required();
  cmd_gen->add_option("--identities", gen_ids);
  cmd_gen->add_option("--impressions", gen_imps);
  cmd_gen->add_option("--size", gen_size);
  cmd_gen->add_option("--seed", gen_seed);

  // ---- train ----
  auto* cmd_train = app.add_subcommand("train", "ArcFace training");
  std::string tr_manifest, tr_out, tr_config, tr_variant = "tiny";
  int tr_input_size = 0;
  uint64_t tr_seed = 42;
  bool tr_no_attention = false, tr_no_transformer = false, tr_preprocess = false;
  cmd_train->add_option("--manifest", tr_manifest)->required();
  cmd_train->add_option("--out-dir", tr_out)->required();
  cmd_train->add_option("--config", tr_config);
  cmd_train->add_option("--variant", tr_variant)
      ->check(CLI::IsMember({"tiny", "full"}));
  cmd_train->add_option("--input-size", tr_input_size);
  cmd_train->add_option("--seed", tr_seed);
  cmd_train->add_flag("--no-attention", tr_no_attention);
  cmd_train->add_flag("--no-transformer", tr_no_transformer);
  cmd_train->add_flag("--preprocess", tr_preprocess,
                      "Run the imaging pipeline on each sample first");

  // ---- embed ----
  auto* cmd_embed = app.add_subcommand("embed", "Compute embeddings");
  std::string em_manifest, em_ckpt, em_out, em_roles = "gallery,probe,train";
  bool em_no_attention = false, em_no_transformer = false, em_preprocess = false;
  cmd_embed->add_option("--manifest", em_manifest)->required();
  cmd_embed->add_option("--checkpoint", em_ckpt)->required();
  cmd_embed->add_option("--out", em_out)->required();
  cmd_embed->add_option("--roles", em_roles, "Comma-separated role filter");
  cmd_embed->add_flag("--no-attention", em_no_attention);
  cmd_embed->add_flag("--no-transformer", em_no_transformer);
  cmd_embed->add_flag("--preprocess", em_preprocess);

  // ---- identify ----
  auto* cmd_id = app.add_subcommand("identify", "Rank gallery identities");
  std::string id_gallery, id_probes, id_out;
  int id_top = 10;
  cmd_id->add_option("--gallery", id_gallery)->required();
  cmd_id->add_option("--probes", id_probes)->required();
  cmd_id->add_option("--out", id_out)->required();
  cmd_id->add_option("--top", id_top);

  // ---- evaluate ----
  auto* cmd_eval = app.add_subcommand("evaluate", "CMC / Rank-N evaluation");
  std::string ev_gallery, ev_probes, ev_out;
  int ev_max_rank = 10;
  cmd_eval->add_option("--gallery", ev_gallery)->required();
  cmd_eval->add_option("--probes", ev_probes)->required();
  cmd_eval->add_option("--out-dir", ev_out)->required();
  cmd_eval->add_option("--max-rank", ev_max_rank);

  // ---- ablate ----
  auto* cmd_ab = app.add_subcommand(
      "ablate", "Train and evaluate the three-variant ablation grid");
  std::string ab_manifest, ab_out, ab_config, ab_variant = "tiny";
  int ab_input_size = 0, ab_rank = 10;
  uint64_t ab_seed = 42;
  bool ab_preprocess = false;
  cmd_ab->add_option("--manifest", ab_manifest)->required();
  cmd_ab->add_option("--out-dir", ab_out)->required();
  cmd_ab->add_option("--config", ab_config);
  cmd_ab->add_option("--variant", ab_variant)
      ->check(CLI::IsMember({"tiny", "full"}));
  cmd_ab->add_option("--input-size", ab_input_size);
  cmd_ab->add_option("--seed", ab_seed);
  cmd_ab->add_option("--rank", ab_rank);
  cmd_ab->add_flag("--preprocess", ab_preprocess);

  // ---- compare ----
  auto* cmd_cmp = app.add_subcommand(
      "compare", "Compare systems from external score matrices");
  std::vector<std::string> cmp_scores, cmp_names;
  std::string cmp_manifest, cmp_out;
  int cmp_rank = 10;
  cmd_cmp->add_option("--scores", cmp_scores)->required();
  cmd_cmp->add_option("--names", cmp_names);
  cmd_cmp->add_option("--manifest", cmp_manifest)->required();
  cmd_cmp->add_option("--out", cmp_out)->required();
  cmd_cmp->add_option("--max-rank", cmp_rank);

  CLI11_PARSE(app, argc, argv);

  try {
    if (*cmd_pre) {
      auto records = lpf::protocol::load_manifest(pre_manifest);
      if (records.empty()) {
        std::cerr << "preprocess: no samples in manifest\n";
        return 1;
      }
      lpf::imaging::PreprocessConfig cfg;
      if (!pre_config.empty())
        cfg = lpf::imaging::PreprocessConfig::from_config(
            lpf::KeyValueConfig::load(pre_config));
      fs::create_directories(fs::path(pre_out) / "images");
      std::ofstream excl(fs::path(pre_out) / "exclusions.log");
      std::vector<lpf::protocol::SampleRecord> processed;
      for (auto rec : records) {
        try {
          lpf::imaging::RawImage img = lpf::imaging::load_image(rec.path);
          std::optional<lpf::imaging::SegMask> mask;
          if (!pre_mask_dir.empty()) {
            fs::path mp = fs::path(pre_mask_dir) / (rec.sample_id + ".png");
            if (fs::exists(mp)) mask = lpf::imaging::load_mask(mp.string());
          }
          lpf::imaging::RawImage out_img =
              lpf::imaging::preprocess_image(img, mask, cfg);
          fs::path out_path =
              fs::path(pre_out) / "images" / (rec.sample_id + ".png");
          lpf::imaging::save_image(out_img, out_path.string());
          rec.path = out_path.string();
          processed.push_back(rec);
        } catch (const std::exception& e) {
          excl << rec.sample_id << "," << e.what() << "\n";
        }
      }
      if (processed.empty()) {
        std::cerr << "preprocess: all samples failed\n";
        return 1;
      }
      lpf::protocol::save_manifest(
          processed, (fs::path(pre_out) / "manifest.csv").string());
      write_run_echo(pre_out, {{"command", "preprocess"},
                               {"manifest", pre_manifest},
                               {"config", pre_config},
                               {"mask_dir", pre_mask_dir},
                               {"processed", processed.size()},
                               {"excluded", records.size() - processed.size()}});
      std::cout << "processed " << processed.size() << "/" << records.size()
                << " samples\n";
      return 0;
    }

    if (*cmd_gen) {
      lpf::protocol::SyntheticCorpusConfig cfg;
      cfg.num_identities = gen_ids;
      cfg.impressions_per_identity = gen_imps;
      cfg.image_size = gen_size;
      cfg.seed = resolve_seed(gen_seed);
      auto records = lpf::protocol::generate_synthetic_corpus(gen_out, cfg);
      write_run_echo(gen_out, {{"command", "gen-corpus"},
                               {"identities", cfg.num_identities},
                               {"impressions", cfg.impressions_per_identity},
                               {"size", cfg.image_size},
                               {"seed", cfg.seed}});
      std::cout << "wrote " << records.size() << " samples to " << gen_out
                << "\n";
      return 0;
    }

    if (*cmd_train) {
      auto records = lpf::protocol::load_manifest(tr_manifest);
      lpf::KeyValueConfig kv;
      if (!tr_config.empty()) kv = lpf::KeyValueConfig::load(tr_config);
      uint64_t seed = resolve_seed(
          static_cast<uint64_t>(kv.get_int("seed", static_cast<int>(tr_seed))));
      std::string variant = kv.get(std::string("variant"), tr_variant);
      lpf::backbone::VariantFlags flags{!tr_no_attention, !tr_no_transformer};
      run_training(records, kv, variant, tr_input_size, seed, flags,
                   tr_preprocess, tr_out, "checkpoint");
      write_run_echo(tr_out, {{"command", "train"},
                              {"manifest", tr_manifest},
                              {"variant", variant},
                              {"seed", seed},
                              {"use_attention", flags.use_attention},
                              {"use_transformer", flags.use_transformer}});
      return 0;
    }

    if (*cmd_embed) {
      auto records = lpf::protocol::load_manifest(em_manifest);
      lpf::Checkpoint ckpt = lpf::Checkpoint::load(em_ckpt);
      lpf::backbone::HybridEncoder encoder(encoder_config_from_checkpoint(ckpt));
      encoder.load_weights(ckpt);
      std::set<std::string> roles;
      std::stringstream ss(em_roles);
      std::string role;
      while (std::getline(ss, role, ',')) roles.insert(role);
      std::vector<lpf::protocol::SampleRecord> selected;
      for (const auto& r : records)
        if (roles.count(lpf::protocol::role_to_string(r.role)))
          selected.push_back(r);
      lpf::backbone::VariantFlags flags{!em_no_attention, !em_no_transformer};
      auto embeddings = embed_records(encoder, selected, flags, em_preprocess);
      lpf::matching::save_embeddings_jsonl(embeddings, em_out);
      std::cout << "wrote " << embeddings.size() << " embeddings to " << em_out
                << "\n";
      return 0;
    }

    if (*cmd_id) {
      auto gallery_recs = lpf::matching::load_embeddings_jsonl(id_gallery);
      auto probe_recs = lpf::matching::load_embeddings_jsonl(id_probes);
      lpf::matching::GalleryIndex gallery;
      for (const auto& g : gallery_recs) gallery.insert(g.embedding, g.identity_id);
      std::ofstream out(id_out);
      if (!out) throw lpf::ParseError("identify: cannot write " + id_out);
      out << "probe_id,rank,identity,score\n";
      for (const auto& p : probe_recs) {
        auto ranked = lpf::matching::identify(p.embedding, gallery);
        int top = std::min<int>(id_top, static_cast<int>(ranked.candidates.size()));
        for (int r = 0; r < top; ++r) {
          char buf[64];
          std::snprintf(buf, sizeof(buf), ",%d,", r + 1);
          out << ranked.probe_id << buf << ranked.candidates[static_cast<size_t>(r)].first;
          std::snprintf(buf, sizeof(buf), ",%.6f\n",
                        ranked.candidates[static_cast<size_t>(r)].second);
          out << buf;
        }
      }
      return 0;
    }

    if (*cmd_eval) {
      auto gallery_recs = lpf::matching::load_embeddings_jsonl(ev_gallery);
      auto probe_recs = lpf::matching::load_embeddings_jsonl(ev_probes);
      lpf::matching::GalleryIndex gallery;
      for (const auto& g : gallery_recs) gallery.insert(g.embedding, g.identity_id);
      std::vector<lpf::matching::LabeledProbe> probes;
      for (const auto& p : probe_recs)
        probes.push_back({p.embedding, p.identity_id});
      int max_rank =
          std::min(ev_max_rank, static_cast<int>(gallery.identity_count()));
      auto curve = lpf::matching::cmc(probes, gallery, max_rank);
      fs::create_directories(ev_out);
      std::ofstream cmc_out(fs::path(ev_out) / "cmc.csv");
      cmc_out << lpf::matching::cmc_to_csv(curve);
      lpf::matching::SystemComparison table;
      table.system_names = {"proposed"};
      table.curves = {curve};
      std::ofstream table_out(fs::path(ev_out) / "rank_table.csv");
      table_out << table.to_csv();
      write_run_echo(ev_out, {{"command", "evaluate"},
                              {"gallery", ev_gallery},
                              {"probes", ev_probes},
                              {"max_rank", max_rank},
                              {"num_probes", probes.size()}});
      std::cout << lpf::matching::cmc_to_csv(curve);
      return 0;
    }

    if (*cmd_ab) {
      auto records = lpf::protocol::load_manifest(ab_manifest);
      lpf::KeyValueConfig kv;
      if (!ab_config.empty()) kv = lpf::KeyValueConfig::load(ab_config);
      uint64_t seed = resolve_seed(
          static_cast<uint64_t>(kv.get_int("seed", static_cast<int>(ab_seed))));
      std::string variant = kv.get(std::string("variant"), ab_variant);
      fs::create_directories(ab_out);

      std::vector<lpf::protocol::SampleRecord> gallery_recs, probe_recs;
      for (const auto& r : records) {
        if (r.role == lpf::protocol::Role::probe) probe_recs.push_back(r);
        else gallery_recs.push_back(r);  // train doubles as gallery
      }
      if (probe_recs.empty())
        throw lpf::ConfigError("ablate: manifest has no probe records");

      std::string table = "variant,use_attention,use_transformer,rank" +
                          std::to_string(ab_rank) + "_percent\n";
      for (const auto& row : lpf::protocol::ablation_grid()) {
        lpf::backbone::VariantFlags flags{row.use_attention, row.use_transformer};
        std::string tag = row.name == "cnn+sa" ? "cnn_sa" : row.name;
        run_training(records, kv, variant, ab_input_size, seed, flags,
                     ab_preprocess, ab_out, "checkpoint_" + tag);
        lpf::Checkpoint ckpt = lpf::Checkpoint::load(
            (fs::path(ab_out) / ("checkpoint_" + tag)).string());
        lpf::backbone::HybridEncoder encoder(
            encoder_config_from_checkpoint(ckpt));
        encoder.load_weights(ckpt);
        auto gal = embed_records(encoder, gallery_recs, flags, ab_preprocess);
        auto prb = embed_records(encoder, probe_recs, flags, ab_preprocess);
        lpf::matching::GalleryIndex gallery;
        for (const auto& g : gal) gallery.insert(g.embedding, g.identity_id);
        std::vector<lpf::matching::LabeledProbe> probes;
        for (const auto& p : prb) probes.push_back({p.embedding, p.identity_id});
        int max_rank =
            std::min(ab_rank, static_cast<int>(gallery.identity_count()));
        auto curve = lpf::matching::cmc(probes, gallery, max_rank);
        char buf[160];
        std::snprintf(buf, sizeof(buf), "%s,%s,%s,%.2f\n", row.name.c_str(),
                      row.use_attention ? "yes" : "no",
                      row.use_transformer ? "yes" : "no",
                      rank_n_percent(curve, ab_rank));
        table += buf;
        std::cout << buf;
      }
      std::ofstream out(fs::path(ab_out) / "ablation.csv");
      out << table;
      write_run_echo(ab_out, {{"command", "ablate"},
                              {"manifest", ab_manifest},
                              {"variant", variant},
                              {"seed", seed},
                              {"rank", ab_rank}});
      return 0;
    }

    if (*cmd_cmp) {
      auto records = lpf::protocol::load_manifest(cmp_manifest);
      std::map<std::string, std::string> truth;
      for (const auto& r : records)
        if (r.role == lpf::protocol::Role::probe)
          truth[r.sample_id] = r.identity_id();
      std::vector<lpf::matching::ScoreMatrix> systems;
      for (size_t i = 0; i < cmp_scores.size(); ++i) {
        std::string name = i < cmp_names.size()
                               ? cmp_names[i]
                               : fs::path(cmp_scores[i]).stem().string();
        systems.push_back(
            lpf::matching::ScoreMatrix::load_csv(cmp_scores[i], name));
      }
      auto cmp = lpf::matching::compare_systems(systems, truth, cmp_rank);
      std::ofstream out(cmp_out);
      out << cmp.to_csv();
      std::cout << cmp.to_csv();
      return 0;
    }
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
