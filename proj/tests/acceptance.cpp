// Acceptance gate: one PASS/FAIL line per criterion, nonzero exit on any
// failure. Self-contained; uses the library directly and drives the CLI for
// the end-to-end / reproducibility checks.
#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <deque>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <map>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "lpf/backbone.hpp"
#include "lpf/imaging.hpp"
#include "lpf/matching.hpp"
#include "lpf/nn.hpp"
#include "lpf/protocol.hpp"
#include "lpf/rng.hpp"
#include "lpf/training.hpp"

namespace fs = std::filesystem;
using namespace lpf;

namespace {

constexpr double kPi = 3.14159265358979323846;

struct Check {
  std::string name;
  std::function<bool(std::string&)> fn;
};

int run_cli(const std::string& args) {
  std::string cmd = std::string(LPF_CLI_PATH) + " " + args + " > /dev/null 2>&1";
  int status = std::system(cmd.c_str());
  return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

std::string slurp(const fs::path& p) {
  std::ifstream f(p);
  std::stringstream ss;
  ss << f.rdbuf();
  return ss.str();
}

double rank1_from_cmc_csv(const std::string& csv) {
  // "rank,accuracy_percent\n1,XX.XX\n..."
  std::istringstream ss(csv);
  std::string line;
  std::getline(ss, line);  // header
  std::getline(ss, line);
  return std::stod(line.substr(line.find(',') + 1));
}

imaging::RawImage grating(int size, double theta, double period,
                          double amp = 100, double mean = 128) {
  imaging::RawImage img(size, size);
  double nx = -std::sin(theta), ny = std::cos(theta);
  for (int r = 0; r < size; ++r)
    for (int c = 0; c < size; ++c) {
      double v = mean + amp * std::cos(2 * kPi / period * (c * nx + r * ny));
      img.at(r, c) = static_cast<uint8_t>(std::clamp(v, 0.0, 255.0));
    }
  return img;
}

// ---------- 1. shape chain ----------

bool check_shape_chain(std::string& detail) {
  auto start = std::chrono::steady_clock::now();
  backbone::HybridEncoder enc(backbone::HybridEncoderConfig::full_default());
  Rng rng(1);
  Tensor in({1, 3, 224, 224});
  for (auto& v : in.data) v = static_cast<float>(rng.uniform(-1.0, 1.0));
  nn::Var input = nn::constant(std::move(in));

  nn::Var fmap = enc.cnn_features(input);
  if (fmap->value.shape != std::vector<long>{1, 1280, 7, 7}) {
    detail = "cnn stage " + fmap->value.shape_str();
    return false;
  }
  auto [gated, amap] = enc.spatial_attention(fmap);
  nn::Var local = backbone::HybridEncoder::pool_local(gated);
  if (local->value.shape != std::vector<long>{1, 1280}) {
    detail = "pooled stage " + local->value.shape_str();
    return false;
  }
  nn::Var global_feat = enc.transformer_features(input);
  if (global_feat->value.shape != std::vector<long>{1, 768}) {
    detail = "transformer stage " + global_feat->value.shape_str();
    return false;
  }
  nn::Var fused_in = nn::concat_last(local, global_feat);
  if (fused_in->value.shape != std::vector<long>{1, 2048}) {
    detail = "concat stage " + fused_in->value.shape_str();
    return false;
  }
  nn::Var emb = enc.fuse_and_project(local, global_feat);
  if (emb->value.shape != std::vector<long>{1, 512}) {
    detail = "embedding stage " + emb->value.shape_str();
    return false;
  }
  double secs = std::chrono::duration<double>(
                    std::chrono::steady_clock::now() - start).count();
  if (secs >= 60) {
    detail = "forward pass took " + std::to_string(secs) + "s";
    return false;
  }
  return true;
}

// ---------- 2. attention properties ----------

bool check_attention(std::string& detail) {
  backbone::HybridEncoder enc(backbone::HybridEncoderConfig::tiny_default());
  Rng rng(2);
  Tensor in({1, 3, 64, 64});
  for (auto& v : in.data) v = static_cast<float>(rng.uniform(-1.0, 1.0));
  nn::Var input = nn::constant(std::move(in));
  nn::Var fmap = enc.cnn_features(input);

  {
    auto [gated, amap] = enc.spatial_attention(fmap);
    for (float a : amap->value.data)
      if (!(a > 0.0f && a < 1.0f)) {
        detail = "gate value outside (0,1): " + std::to_string(a);
        return false;
      }
  }
  enc.zero_attention_conv();
  {
    auto [gated, amap] = enc.spatial_attention(fmap);
    for (float a : amap->value.data)
      if (a != 0.5f) {
        detail = "zeroed pre-activation gate != 0.5";
        return false;
      }
    for (size_t i = 0; i < gated->value.data.size(); ++i)
      if (gated->value.data[i] != 0.5f * fmap->value.data[i]) {
        detail = "zeroed gating not exactly 0.5 x fmap";
        return false;
      }
  }
  for (auto& [name, var] : enc.parameters())
    if (name == "sa.conv.b") var->value.data[0] = 60.0f;  // saturate sigmoid
  {
    auto [gated, amap] = enc.spatial_attention(fmap);
    for (size_t i = 0; i < gated->value.data.size(); ++i)
      if (std::fabs(gated->value.data[i] - fmap->value.data[i]) >= 1e-4f) {
        detail = "saturated gate deviates from fmap by >= 1e-4";
        return false;
      }
  }
  return true;
}

// ---------- 3. arcface ----------

bool check_arcface(std::string& detail) {
  const int classes = 8, dim = 16;
  Rng rng(3);
  Tensor w({classes, dim});
  for (auto& v : w.data) v = static_cast<float>(rng.normal());

  // m = 0 reduction: logits equal 64 x cosine within 1e-6.
  {
    training::ArcFaceConfig cfg;
    cfg.margin_m = 0.0f;
    cfg.num_classes = classes;
    std::vector<float> emb(dim);
    for (auto& v : emb) v = static_cast<float>(rng.normal());
    std::vector<float> logits = training::arcface_logits(emb, 2, cfg, w);
    double en = 0;
    for (float v : emb) en += double(v) * v;
    for (int j = 0; j < classes; ++j) {
      double wn = 0, dot = 0;
      for (int i = 0; i < dim; ++i) {
        wn += double(w.data[j * dim + i]) * w.data[j * dim + i];
        dot += double(w.data[j * dim + i]) * emb[i];
      }
      double want = 64.0 * dot / std::sqrt(en * wn);
      if (std::fabs(logits[j] - want) > 1e-6 * std::max(1.0, std::fabs(want))) {
        detail = "m=0 logit " + std::to_string(logits[j]) + " vs " +
                 std::to_string(want);
        return false;
      }
    }
  }
  // Parallel vector: target logit 64 cos(0.5) within 1e-4.
  {
    training::ArcFaceConfig cfg;
    cfg.num_classes = classes;
    std::vector<float> emb(w.data.begin() + 5 * dim, w.data.begin() + 6 * dim);
    std::vector<float> logits = training::arcface_logits(emb, 5, cfg, w);
    double want = 64.0 * std::cos(0.5);
    if (std::fabs(logits[5] - want) > 1e-4) {
      detail = "parallel logit " + std::to_string(logits[5]) + " vs " +
               std::to_string(want);
      return false;
    }
  }
  // Loss gradient wrt embeddings matches central finite differences, rel 1e-3.
  {
    training::ArcFaceConfig cfg;
    cfg.num_classes = classes;
    Rng hrng(5);
    training::ArcFaceHead head(cfg, dim, hrng);
    Tensor te({4, dim});
    for (auto& v : te.data) v = static_cast<float>(rng.normal());
    nn::Var emb = nn::param(te);
    std::vector<int> labels = {0, 3, 5, 7};
    auto graph = [&]() {
      return nn::cross_entropy_mean(head.logits(emb, labels), labels);
    };
    emb->ensure_grad();
    std::fill(emb->grad.data.begin(), emb->grad.data.end(), 0.0f);
    nn::backward(graph());
    // Float32 forward noise and curvature pull in opposite directions, so
    // accept the best agreement over a small sweep of FD step sizes.
    for (size_t i = 0; i < emb->value.data.size(); i += 7) {
      double best = 1e9;
      for (double eps : {1e-3, 3e-3, 1e-2, 3e-2}) {
        float orig = emb->value.data[i];
        emb->value.data[i] = orig + static_cast<float>(eps);
        double fp = graph()->value.data[0];
        emb->value.data[i] = orig - static_cast<float>(eps);
        double fm = graph()->value.data[0];
        emb->value.data[i] = orig;
        double num = (fp - fm) / (2 * eps);
        double ana = emb->grad.data[i];
        best = std::min(best, std::fabs(num - ana) /
                                  std::max({std::fabs(num), std::fabs(ana),
                                            1e-4}));
      }
      if (best > 1e-3) {
        detail = "gradient entry " + std::to_string(i) + " rel err " +
                 std::to_string(best);
        return false;
      }
    }
  }
  return true;
}

// ---------- 4. matching oracle ----------

Embedding mk_emb(std::vector<float> v, const std::string& id) {
  Embedding e;
  e.vector = std::move(v);
  e.sample_id = id;
  return e;
}

bool check_matching(std::string& detail) {
  Rng rng(7);
  // 200 random instances vs brute force.
  for (int trial = 0; trial < 200; ++trial) {
    int dim = 4 + static_cast<int>(rng.uniform_index(10));
    int n_ids = 2 + static_cast<int>(rng.uniform_index(20));
    matching::GalleryIndex g;
    std::vector<std::vector<std::vector<float>>> raw(n_ids);
    for (int i = 0; i < n_ids; ++i) {
      int n_tpl = 1 + static_cast<int>(rng.uniform_index(3));
      for (int t = 0; t < n_tpl; ++t) {
        std::vector<float> v(dim);
        for (auto& x : v) x = static_cast<float>(rng.normal());
        raw[i].push_back(v);
        g.insert(mk_emb(v, std::to_string(i) + "_" + std::to_string(t)),
                 "id" + std::to_string(i));
      }
    }
    std::vector<float> pv(dim);
    for (auto& x : pv) x = static_cast<float>(rng.normal());
    auto got = matching::identify(mk_emb(pv, "p"), g);

    std::vector<std::pair<std::string, double>> want;
    for (int i = 0; i < n_ids; ++i) {
      double best = -2;
      for (const auto& t : raw[i]) {
        double dot = 0, na = 0, nb = 0;
        for (int k = 0; k < dim; ++k) {
          dot += double(pv[k]) * t[k];
          na += double(pv[k]) * pv[k];
          nb += double(t[k]) * t[k];
        }
        best = std::max(best, dot / std::sqrt(na * nb));
      }
      want.emplace_back("id" + std::to_string(i), best);
    }
    std::stable_sort(want.begin(), want.end(),
                     [](const auto& a, const auto& b) { return a.second > b.second; });
    for (size_t i = 0; i < want.size(); ++i)
      if (got.candidates[i].first != want[i].first) {
        detail = "identify order diverges from brute force (trial " +
                 std::to_string(trial) + ")";
        return false;
      }
  }
  // Self-match rank 1 = 100% and CMC monotone.
  {
    matching::GalleryIndex g;
    std::vector<matching::LabeledProbe> probes;
    for (int i = 0; i < 10; ++i) {
      std::vector<float> v(16);
      for (auto& x : v) x = static_cast<float>(rng.normal());
      std::string id = "id" + std::to_string(i);
      g.insert(mk_emb(v, "g" + std::to_string(i)), id);
      probes.push_back({mk_emb(v, "p" + std::to_string(i)), id});
    }
    auto curve = matching::cmc(probes, g, 10);
    if (curve.at(1) != 1.0) {
      detail = "self-match rank-1 != 100%";
      return false;
    }
    for (int r = 2; r <= 10; ++r)
      if (curve.at(r) < curve.at(r - 1)) {
        detail = "CMC not monotone";
        return false;
      }
  }
  // Hand-placed 4-identity case: ranks 1, 2, 4 -> 1/3, 2/3, 2/3, 1.
  {
    matching::GalleryIndex g;
    g.insert(mk_emb({1, 0, 0, 0}, "ga"), "A");
    g.insert(mk_emb({0, 1, 0, 0}, "gb"), "B");
    g.insert(mk_emb({0, 0, 1, 0}, "gc"), "C");
    g.insert(mk_emb({0, 0, 0, 1}, "gd"), "D");
    std::vector<matching::LabeledProbe> probes = {
        {mk_emb({1, 0.1f, 0, 0}, "p1"), "A"},
        {mk_emb({0, 0.5f, 0.9f, 0}, "p2"), "B"},
        {mk_emb({0.9f, 0.8f, 0.7f, 0.1f}, "p3"), "D"},
    };
    auto curve = matching::cmc(probes, g, 4);
    double want[4] = {1.0 / 3, 2.0 / 3, 2.0 / 3, 1.0};
    for (int r = 1; r <= 4; ++r)
      if (std::fabs(curve.at(r) - want[r - 1]) > 1e-12) {
        detail = "hand-placed CMC mismatch at rank " + std::to_string(r);
        return false;
      }
  }
  return true;
}

// ---------- 5. imaging oracles ----------

imaging::SegMask flood_fill_largest(const imaging::SegMask& mask) {
  std::vector<int> label(mask.bits.size(), -1);
  int best = -1, best_size = 0, next = 0;
  for (int r = 0; r < mask.height; ++r)
    for (int c = 0; c < mask.width; ++c) {
      size_t idx = static_cast<size_t>(r) * mask.width + c;
      if (!mask.bits[idx] || label[idx] >= 0) continue;
      int id = next++, size = 0;
      std::deque<std::pair<int, int>> q{{r, c}};
      label[idx] = id;
      while (!q.empty()) {
        auto [cr, cc] = q.front();
        q.pop_front();
        ++size;
        const int dr[] = {-1, 1, 0, 0}, dc[] = {0, 0, -1, 1};
        for (int k = 0; k < 4; ++k) {
          int nr = cr + dr[k], nc = cc + dc[k];
          if (nr < 0 || nr >= mask.height || nc < 0 || nc >= mask.width)
            continue;
          size_t nidx = static_cast<size_t>(nr) * mask.width + nc;
          if (!mask.bits[nidx] || label[nidx] >= 0) continue;
          label[nidx] = id;
          q.emplace_back(nr, nc);
        }
      }
      if (size > best_size) {
        best_size = size;
        best = id;
      }
    }
  imaging::SegMask out(mask.height, mask.width);
  for (size_t i = 0; i < label.size(); ++i) out.bits[i] = label[i] == best;
  return out;
}

bool check_imaging(std::string& detail) {
  Rng rng(11);
  // Largest component vs flood fill on 100 random masks.
  for (int trial = 0; trial < 100; ++trial) {
    int h = 4 + static_cast<int>(rng.uniform_index(20));
    int w = 4 + static_cast<int>(rng.uniform_index(20));
    imaging::SegMask m(h, w);
    double density = 0.2 + 0.6 * rng.uniform();
    bool any = false;
    for (auto& b : m.bits) {
      b = rng.uniform() < density;
      any |= b;
    }
    if (!any) m.bits[0] = 1;
    if (imaging::largest_component(m).bits != flood_fill_largest(m).bits) {
      detail = "largest component diverges from flood fill (trial " +
               std::to_string(trial) + ")";
      return false;
    }
  }
  // Orientation within 3 degrees over angles every 15 deg, periods 6-16 px.
  const int size = 96, bs = 16;
  imaging::SegMask fg(size, size, 1);
  for (int deg = 0; deg < 180; deg += 15)
    for (double period : {6.0, 8.0, 12.0, 16.0}) {
      double theta = deg * kPi / 180.0;
      imaging::RawImage img = grating(size, theta, period);
      imaging::OrientationField f = imaging::estimate_orientation(img, fg, bs);
      for (int br = 1; br + 1 < f.block_rows; ++br)
        for (int bc = 1; bc + 1 < f.block_cols; ++bc) {
          double diff = std::fabs(f.theta_at(br, bc) - theta);
          diff = std::min(diff, kPi - diff);
          if (diff >= 3.0 * kPi / 180.0) {
            detail = "orientation off by " + std::to_string(diff * 180 / kPi) +
                     " deg at " + std::to_string(deg) + " deg / period " +
                     std::to_string(period);
            return false;
          }
        }
    }
  // Matched Gabor response >= 5x mismatched. Response is measured as
  // correlation with the clean ridge pattern on a noisy grating (output
  // min-max rescaling makes raw amplitude unobservable).
  {
    double period = 9.0;
    Rng nrng(13);
    imaging::RawImage img(size, size);
    for (int r = 0; r < size; ++r)
      for (int c = 0; c < size; ++c) {
        double v = 128 + 80 * std::cos(2 * kPi / period * r) +
                   nrng.uniform(-60.0, 60.0);
        img.at(r, c) = static_cast<uint8_t>(std::clamp(v, 0.0, 255.0));
      }
    imaging::OrientationField f;
    f.block_rows = size / bs;
    f.block_cols = size / bs;
    f.block_size = bs;
    f.theta.assign(static_cast<size_t>(f.block_rows) * f.block_cols, 0.0f);
    f.coherence.assign(f.theta.size(), 1.0f);
    imaging::RawImage good = imaging::gabor_enhance(img, f, 1.0 / period, fg);
    for (auto& t : f.theta) t = static_cast<float>(kPi / 2);
    imaging::RawImage bad = imaging::gabor_enhance(img, f, 1.0 / period, fg);
    auto response = [&](const imaging::RawImage& im) {
      double sx = 0, sy = 0, sxy = 0, sxx = 0, syy = 0;
      int n = 0;
      for (int r = 24; r < 72; ++r)
        for (int c = 24; c < 72; ++c) {
          double x = std::cos(2 * kPi / period * r), y = im.at(r, c);
          sx += x;
          sy += y;
          sxy += x * y;
          sxx += x * x;
          syy += y * y;
          ++n;
        }
      double cov = sxy / n - sx / n * sy / n;
      double vx = sxx / n - sx / n * sx / n, vy = syy / n - sy / n * sy / n;
      return std::fabs(cov / std::sqrt(vx * vy + 1e-12));
    };
    if (response(good) < 5.0 * response(bad)) {
      detail = "matched gabor response " + std::to_string(response(good)) +
               " < 5x mismatched " + std::to_string(response(bad));
      return false;
    }
  }
  return true;
}

// ---------- 6. desk-scale end to end ----------

bool check_end_to_end(std::string& detail) {
  fs::path work = "acceptance_e2e";
  fs::remove_all(work);
  fs::create_directories(work);
  fs::path corpus = work / "corpus";
  if (run_cli("gen-corpus --out-dir " + corpus.string() +
              " --identities 8 --impressions 20 --size 96 --seed 7") != 0) {
    detail = "gen-corpus failed";
    return false;
  }
  std::string manifest = (corpus / "manifest.csv").string();

  fs::path cfg = work / "train.cfg";
  {
    std::ofstream f(cfg);
    f << "epochs=20\nlr=0.001\nbatch_size=16\n";
  }
  fs::path model = work / "model";
  if (run_cli("train --manifest " + manifest + " --out-dir " + model.string() +
              " --config " + cfg.string() + " --variant tiny --seed 5") != 0) {
    detail = "train failed";
    return false;
  }

  fs::path gal = work / "gallery.jsonl", prb = work / "probes.jsonl";
  if (run_cli("embed --manifest " + manifest + " --checkpoint " +
              (model / "checkpoint").string() + " --out " + gal.string() +
              " --roles train") != 0 ||
      run_cli("embed --manifest " + manifest + " --checkpoint " +
              (model / "checkpoint").string() + " --out " + prb.string() +
              " --roles probe") != 0) {
    detail = "embed failed";
    return false;
  }
  fs::path eval = work / "eval";
  if (run_cli("evaluate --gallery " + gal.string() + " --probes " +
              prb.string() + " --out-dir " + eval.string() +
              " --max-rank 8") != 0) {
    detail = "evaluate failed";
    return false;
  }
  double rank1 = rank1_from_cmc_csv(slurp(eval / "cmc.csv"));
  if (rank1 < 90.0) {
    detail = "held-out rank-1 " + std::to_string(rank1) + "% < 90%";
    return false;
  }

  // Three-row ablation: full must be >= cnn-only at rank 10.
  fs::path abcfg = work / "ablate.cfg";
  {
    std::ofstream f(abcfg);
    f << "epochs=3\nlr=0.001\nbatch_size=16\n";
  }
  fs::path ab = work / "ablation";
  if (run_cli("ablate --manifest " + manifest + " --out-dir " + ab.string() +
              " --config " + abcfg.string() + " --variant tiny --seed 5"
              " --rank 10") != 0) {
    detail = "ablate failed";
    return false;
  }
  std::map<std::string, double> rank10;
  {
    std::istringstream ss(slurp(ab / "ablation.csv"));
    std::string line;
    std::getline(ss, line);  // header
    while (std::getline(ss, line)) {
      std::string name = line.substr(0, line.find(','));
      rank10[name] = std::stod(line.substr(line.rfind(',') + 1));
    }
  }
  if (!rank10.count("cnn") || !rank10.count("full")) {
    detail = "ablation.csv missing rows";
    return false;
  }
  if (rank10["full"] < rank10["cnn"]) {
    detail = "ablation full rank-10 " + std::to_string(rank10["full"]) +
             " < cnn-only " + std::to_string(rank10["cnn"]);
    return false;
  }
  fs::remove_all(work);
  return true;
}

// ---------- 7. reproducibility ----------

bool check_reproducibility(std::string& detail) {
  fs::path work = "acceptance_repro";
  fs::remove_all(work);
  fs::create_directories(work);
  fs::path corpus = work / "corpus";
  if (run_cli("gen-corpus --out-dir " + corpus.string() +
              " --identities 4 --impressions 3 --size 64 --seed 3") != 0) {
    detail = "gen-corpus failed";
    return false;
  }
  std::string manifest = (corpus / "manifest.csv").string();
  fs::path cfg = work / "train.cfg";
  {
    std::ofstream f(cfg);
    f << "epochs=2\nlr=0.001\nbatch_size=4\n";
  }
  auto full_run = [&](const std::string& tag) -> bool {
    fs::path model = work / ("model_" + tag);
    if (run_cli("train --manifest " + manifest + " --out-dir " +
                model.string() + " --config " + cfg.string() +
                " --variant tiny --seed 11") != 0)
      return false;
    fs::path gal = work / ("gal_" + tag + ".jsonl");
    fs::path prb = work / ("prb_" + tag + ".jsonl");
    if (run_cli("embed --manifest " + manifest + " --checkpoint " +
                (model / "checkpoint").string() + " --out " + gal.string() +
                " --roles train") != 0)
      return false;
    if (run_cli("embed --manifest " + manifest + " --checkpoint " +
                (model / "checkpoint").string() + " --out " + prb.string() +
                " --roles probe") != 0)
      return false;
    return run_cli("evaluate --gallery " + gal.string() + " --probes " +
                   prb.string() + " --out-dir " +
                   (work / ("eval_" + tag)).string() + " --max-rank 4") == 0;
  };
  if (!full_run("a") || !full_run("b")) {
    detail = "seeded run failed";
    return false;
  }
  if (slurp(work / "model_a" / "checkpoint" / "params.bin") !=
      slurp(work / "model_b" / "checkpoint" / "params.bin")) {
    detail = "checkpoints differ between identically seeded runs";
    return false;
  }
  if (slurp(work / "gal_a.jsonl") != slurp(work / "gal_b.jsonl") ||
      slurp(work / "prb_a.jsonl") != slurp(work / "prb_b.jsonl")) {
    detail = "embeddings differ between identically seeded runs";
    return false;
  }
  if (slurp(work / "eval_a" / "cmc.csv") != slurp(work / "eval_b" / "cmc.csv")) {
    detail = "CMC CSVs differ between identically seeded runs";
    return false;
  }
  fs::remove_all(work);
  return true;
}

// ---------- 8. protocol fidelity ----------

protocol::SampleRecord mk_rec(const std::string& id, const std::string& subject,
                              const std::string& finger, protocol::Role role,
                              const std::string& subset) {
  protocol::SampleRecord r;
  r.sample_id = id;
  r.path = "images/" + id + ".png";
  r.subject_id = subject;
  r.finger_id = finger;
  r.role = role;
  r.subset = subset;
  return r;
}

bool check_protocol(std::string& detail) {
  // Closed-set manifest: 15 subjects x 10 fingers rolled (150) + 1046 latents.
  std::vector<protocol::SampleRecord> all;
  int n = 0;
  for (int s = 0; s < 15; ++s)
    for (int f = 0; f < 10; ++f)
      all.push_back(mk_rec("r" + std::to_string(n++), "s" + std::to_string(s),
                           "f" + std::to_string(f), protocol::Role::gallery,
                           "iiitd_rolled"));
  for (int i = 0; i < 1046; ++i)
    all.push_back(mk_rec("l" + std::to_string(i),
                         "s" + std::to_string(i % 15),
                         "f" + std::to_string((i / 15) % 10),
                         protocol::Role::probe, "iiitd_latent"));
  protocol::ExperimentSpec e1 = protocol::experiment_1(all);
  if (e1.gallery(all).size() != 150) {
    detail = "experiment_1 gallery " + std::to_string(e1.gallery(all).size());
    return false;
  }
  if (e1.probes(all).size() != 1046) {
    detail = "experiment_1 probes " + std::to_string(e1.probes(all).size());
    return false;
  }

  // 60-subject capture manifest: R_opt + R_cap galleries, 4 lifted subsets.
  std::vector<protocol::SampleRecord> cap;
  n = 0;
  for (int s = 0; s < 60; ++s) {
    std::string subj = "s" + std::to_string(s);
    cap.push_back(mk_rec("opt" + std::to_string(n++), subj, "f1",
                         protocol::Role::gallery, "R_opt"));
    cap.push_back(mk_rec("cap" + std::to_string(n++), subj, "f1",
                         protocol::Role::gallery, "R_cap"));
    for (const std::string& sub : {"Smt", "L_wall", "L_ipad", "L_alum"})
      cap.push_back(mk_rec("p" + std::to_string(n++), subj, "f1",
                           protocol::Role::probe, sub));
  }
  cap.push_back(mk_rec("t1", "x1", "f1", protocol::Role::train, "iiitd_latent"));
  protocol::ExperimentSpec e2 = protocol::experiment_2(cap);
  auto gal = e2.gallery(cap);
  if (gal.size() != 60) {
    detail = "experiment_2 gallery " + std::to_string(gal.size());
    return false;
  }
  std::set<std::string> subjects;
  for (const auto& r : gal) {
    if (r.subset != "R_opt") {
      detail = "experiment_2 gallery contains subset " + r.subset;
      return false;
    }
    subjects.insert(r.subject_id);
  }
  if (subjects.size() != 60) {
    detail = "experiment_2 gallery subjects " + std::to_string(subjects.size());
    return false;
  }
  for (const auto& r : e2.probes(cap))
    if (r.subset == "R_cap") {
      detail = "R_cap leaked into experiment_2 probes";
      return false;
    }
  for (const auto& r : e2.train_set(cap))
    if (r.subset == "R_cap") {
      detail = "R_cap leaked into experiment_2 training pool";
      return false;
    }
  return true;
}

}  // namespace

int main() {
  std::vector<Check> checks = {
      {"shape chain (full variant, stage by stage, < 1 min)", check_shape_chain},
      {"spatial attention gating properties", check_attention},
      {"arcface margin, scale and gradients", check_arcface},
      {"matching vs brute-force oracle, CMC properties", check_matching},
      {"imaging oracles (components, orientation, gabor)", check_imaging},
      {"desk-scale end-to-end training and ablation", check_end_to_end},
      {"seeded reproducibility (checkpoints, embeddings, CMC)", check_reproducibility},
      {"protocol fidelity (closed-set counts, subset exclusions)", check_protocol},
  };
  int failures = 0;
  for (auto& c : checks) {
    std::string detail;
    bool ok = false;
    try {
      ok = c.fn(detail);
    } catch (const std::exception& e) {
      detail = std::string("exception: ") + e.what();
    }
    if (ok) {
      std::cout << "PASS: " << c.name << "\n";
    } else {
      std::cout << "FAIL: " << c.name
                << (detail.empty() ? "" : " (" + detail + ")") << "\n";
      ++failures;
    }
  }
  return failures == 0 ? 0 : 1;
}
