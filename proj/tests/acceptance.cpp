// Acceptance suite: one PASS/FAIL line per criterion.
//
//   dsd_acceptance            run every criterion
//   dsd_acceptance --only 1,5 run a subset

#include <algorithm>
#include <chrono>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <map>
#include <nlohmann/json.hpp>
#include <numeric>
#include <optional>
#include <random>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "dsd/cli.hpp"
#include "dsd/cost_model.hpp"
#include "dsd/metrics.hpp"
#include "dsd/trainer.hpp"
#include "oracles.hpp"

namespace fs = std::filesystem;
using dsd::Tensor;
using Clock = std::chrono::steady_clock;

namespace {

struct Outcome {
  bool pass = false;
  std::string detail;
};

double seconds_since(Clock::time_point t0) {
  return std::chrono::duration<double>(Clock::now() - t0).count();
}

std::string fmt(const char* f, double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, f, v);
  return buf;
}

struct TempDir {
  fs::path path;
  TempDir() {
    std::random_device rd;
    path = fs::temp_directory_path() / ("dsd-accept-" + std::to_string(rd()) + std::to_string(rd()));
    fs::create_directories(path);
  }
  ~TempDir() {
    std::error_code ec;
    fs::remove_all(path, ec);
  }
  std::string operator/(const std::string& name) const { return (path / name).string(); }
};

std::string slurp(const fs::path& p) {
  std::ifstream f(p, std::ios::binary);
  std::ostringstream ss;
  ss << f.rdbuf();
  return ss.str();
}

// ---- 1. instrumented counters equal the closed forms ----------------------

Outcome cost_model_exactness() {
  const auto t0 = Clock::now();
  const std::uint64_t grid[] = {1, 2, 4, 8};
  std::size_t checked = 0, mismatches = 0;
  for (std::uint64_t n : grid) {
    for (std::uint64_t h : grid) {
      for (std::uint64_t w : grid) {
        dsd::LayerGeometry g;
        g.n = n;
        g.h = h;
        g.w = w;
        for (std::uint64_t k : {2, 3}) {
          g.k = k;
          mismatches += dsd::count_psd_ops(g, 7) != dsd::flops_psd(g);
          ++checked;
        }
        mismatches += dsd::count_affinity_ops(g, 7) != dsd::flops_affinity(g);
        ++checked;
        // Categories on the same grid, logits plane H' x W' = H x W.
        g.c = n;
        g.hp = h;
        g.wp = w;
        mismatches += dsd::count_csd_ops(g, 7) != dsd::flops_csd(g);
        ++checked;
      }
    }
  }
  const double t = seconds_since(t0);
  return {mismatches == 0 && t < 10.0,
          std::to_string(checked) + " geometries, " + std::to_string(mismatches) +
              " mismatches, " + fmt("%.2f s (limit 10 s)", t)};
}

// ---- 2. headline FLOPs ratio ------------------------------------------------

Outcome headline_ratio() {
  dsd::LayerGeometry g;
  g.n = 256;
  g.h = 80;
  g.w = 45;
  g.k = 2;
  const auto r = dsd::flops_report(g);
  const double ratio = r.ratio.affinity_over_psd;
  return {r.affinity == 6622560000ULL && r.psd == 3682800ULL && ratio >= 1790.0 &&
              ratio <= 1810.0,
          std::to_string(r.affinity) + " / " + std::to_string(r.psd) + " = " +
              fmt("%.4f", ratio) + " (band [1790, 1810])"};
}

// ---- 3. gradients against central differences ------------------------------

Outcome gradient_correctness() {
  const auto t0 = Clock::now();
  std::map<std::string, double> worst;
  std::mt19937_64 rng(2024);
  for (int trial = 0; trial < 20; ++trial) {
    auto track = [&](const std::string& name, double err) {
      worst[name] = std::max(worst[name], err);
    };
    track("psd", testing::psd_grad_error(rng, trial));
    track("csd", testing::csd_grad_error(rng));
    track("kd", testing::kd_grad_error(rng));
    track("at", testing::at_grad_error(rng));
    track("fitnet", testing::fitnet_grad_error(rng));
    track("affinity", testing::affinity_grad_error(rng));
    track("micro-net", testing::micro_net_grad_error(rng, static_cast<std::uint64_t>(trial)));
  }
  const double t = seconds_since(t0);
  bool ok = t < 60.0;
  std::string detail = "max rel err";
  for (const auto& [name, err] : worst) {
    ok = ok && err < 1e-4;
    detail += " " + name + "=" + fmt("%.1e", err);
  }
  return {ok, detail + ", 20 instances each, " + fmt("%.1f s (limit 60 s)", t)};
}

// ---- 4. similarity matrices against double loops ---------------------------

Outcome oracle_equivalence() {
  std::mt19937_64 rng(44);
  double worst_cm = 0.0, worst_aff = 0.0;
  std::size_t instances = 0;
  for (std::size_t c = 1; c <= 8; ++c) {
    for (std::size_t z = 1; z <= 64; ++z) {
      const Tensor q = testing::softmax_rows(testing::random_tensor({c, z}, rng, -4, 4), 1.0);
      const Tensor cm = dsd::correlation_matrix(q).values;
      worst_cm = std::max(worst_cm, (cm - testing::correlation_oracle(q)).max_abs());
      ++instances;
    }
    for (std::size_t h = 1; h <= 8; ++h) {
      for (std::size_t w = 1; w <= 8; ++w) {
        const Tensor a = testing::random_tensor({c, h, w}, rng);
        const Tensor s = dsd::affinity_matrix(a);
        worst_aff = std::max(worst_aff, (s - testing::affinity_oracle(a)).max_abs());
        ++instances;
      }
    }
  }
  return {worst_cm <= 1e-12 && worst_aff <= 1e-12,
          std::to_string(instances) + " instances (C, N <= 8; Z <= 64), max |diff| correlation " +
              fmt("%.1e", worst_cm) + ", affinity " + fmt("%.1e", worst_aff) + " (limit 1e-12)"};
}

// ---- 5. metrics ---------------------------------------------------------------

dsd::LabelMap random_map(std::mt19937_64& rng, std::size_t n, int classes) {
  dsd::LabelMap m(1, n);
  for (int& v : m.labels) v = static_cast<int>(rng() % static_cast<std::uint64_t>(classes));
  return m;
}

Outcome metric_exactness() {
  dsd::ConfusionMatrix cm(2);
  cm.at(0, 0) = 1;
  cm.at(0, 1) = 1;
  cm.at(1, 1) = 2;
  const double m = dsd::miou(cm), a = dsd::pixel_acc(cm);
  bool ok = std::abs(m - 7.0 / 12.0) <= 1e-9 && std::abs(a - 0.75) <= 1e-9;

  std::mt19937_64 rng(55);
  int broken = 0;
  for (int trial = 0; trial < 100; ++trial) {
    const int c = 2 + static_cast<int>(rng() % 7);
    const auto p = random_map(rng, 64, c);
    const auto g = random_map(rng, 64, c);
    const auto base = dsd::confusion(p, g, static_cast<std::size_t>(c));

    // Relabel the classes consistently in prediction and ground truth.
    std::vector<int> perm(static_cast<std::size_t>(c));
    std::iota(perm.begin(), perm.end(), 0);
    std::shuffle(perm.begin(), perm.end(), rng);
    auto relabel = [&](dsd::LabelMap x) {
      for (int& v : x.labels) v = perm[static_cast<std::size_t>(v)];
      return x;
    };
    const auto relabelled = dsd::confusion(relabel(p), relabel(g), static_cast<std::size_t>(c));

    // Reorder the pixels.
    std::vector<std::size_t> order(64);
    std::iota(order.begin(), order.end(), 0);
    std::shuffle(order.begin(), order.end(), rng);
    dsd::LabelMap ps(1, 64), gs(1, 64);
    for (std::size_t i = 0; i < 64; ++i) {
      ps.labels[i] = p.labels[order[i]];
      gs.labels[i] = g.labels[order[i]];
    }
    const auto shuffled = dsd::confusion(ps, gs, static_cast<std::size_t>(c));

    for (const auto* other : {&relabelled, &shuffled}) {
      if (std::abs(dsd::miou(*other) - dsd::miou(base)) > 1e-12 ||
          std::abs(dsd::pixel_acc(*other) - dsd::pixel_acc(base)) > 1e-12) {
        ++broken;
      }
    }
  }
  ok = ok && broken == 0;
  return {ok, "[[1,1],[0,2]] -> miou " + fmt("%.9f", m) + ", acc " + fmt("%.9f", a) +
                  "; 100 class/pixel permutation trials, " + std::to_string(broken) +
                  " violations"};
}

// ---- 6 and 7. the synthetic benchmark ---------------------------------------

constexpr std::size_t kBenchClasses = 6;
constexpr std::size_t kTeacherWidth = 16;
constexpr std::size_t kStudentWidth = 8;

dsd::TrainData bench_data(std::uint64_t seed) {
  return {dsd::make_dataset({100 + seed, 2000, 64, 64, kBenchClasses}),
          dsd::make_dataset({900 + seed, 200, 64, 64, kBenchClasses})};
}

dsd::TrainConfig bench_config(std::uint64_t seed) {
  dsd::TrainConfig c;  // defaults: batch 8, 2000 iterations, alpha 1000, beta 10
  c.seed = seed;
  c.log_interval = 100;
  return c;
}

// Seed-1 data and teacher, shared by criteria 6 and 7.
struct Bench {
  std::optional<dsd::TrainData> data;
  std::optional<dsd::TrainResult> teacher;
};

Bench& bench1() {
  static Bench b;
  return b;
}

Outcome distillation_efficacy() {
  const auto t0 = Clock::now();
  const std::vector<std::string> methods = {"none", "dsd", "psd", "csd"};
  std::map<std::string, std::vector<double>> miou;
  bool ema_ok = true;
  for (std::uint64_t seed = 1; seed <= 5; ++seed) {
    const dsd::TrainData data = bench_data(seed);
    const dsd::TrainConfig cfg = bench_config(seed);
    auto teacher = dsd::train_teacher(dsd::SegNetSpec::teacher(kBenchClasses, kTeacherWidth),
                                      data, cfg);
    miou["teacher"].push_back(teacher.report.val.miou);
    ema_ok = ema_ok && teacher.report.ema_final < teacher.report.ema_early;
    std::printf("    seed %lu teacher %.4f", static_cast<unsigned long>(seed),
                teacher.report.val.miou);
    const auto student = dsd::SegNetSpec::student(kBenchClasses, kStudentWidth);
    for (const auto& m : methods) {
      dsd::TrainConfig c = cfg;
      c.method = dsd::parse_method(m);
      const auto r = m == "none" ? dsd::train_supervised(student, data, c)
                                 : dsd::distill_student(teacher.checkpoint, student, data, c);
      miou[m].push_back(r.report.val.miou);
      ema_ok = ema_ok && r.report.ema_final < r.report.ema_early;
      std::printf("  %s %.4f", m.c_str(), r.report.val.miou);
      std::fflush(stdout);
    }
    std::printf("  (%.0f s)\n", seconds_since(t0));
    if (seed == 1) {
      bench1().data = data;
      bench1().teacher = std::move(teacher);
    }
  }
  auto mean = [&](const std::string& k) {
    const auto& v = miou[k];
    return std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
  };
  const double t = mean("teacher"), b = mean("none"), d = mean("dsd"), p = mean("psd"),
               c = mean("csd");
  const double secs = seconds_since(t0);
  const bool gap = t > b;
  const bool gain = d >= b + 0.01;
  const bool complement = d >= std::max(p, c) - 0.005;
  std::string detail = "mean miou teacher " + fmt("%.4f", t) + ", baseline " + fmt("%.4f", b) +
                       ", dsd " + fmt("%.4f", d) + ", psd " + fmt("%.4f", p) + ", csd " +
                       fmt("%.4f", c) + "; teacher>baseline " + (gap ? "yes" : "NO") +
                       ", dsd>=baseline+1pt " + (gain ? "yes" : "NO") +
                       ", dsd>=max(psd,csd)-0.5pt " + (complement ? "yes" : "NO") +
                       "; loss EMA decreasing in every run " + (ema_ok ? "yes" : "NO") + "; " +
                       fmt("%.0f s (limit 1800 s)", secs);
  return {gap && gain && complement && secs < 1800.0, detail};
}

Outcome degeneration_exactness() {
  Bench& b = bench1();
  if (!b.teacher) {
    b.data = bench_data(1);
    b.teacher = dsd::train_teacher(dsd::SegNetSpec::teacher(kBenchClasses, kTeacherWidth),
                                   *b.data, bench_config(1));
  }
  const auto student = dsd::SegNetSpec::student(kBenchClasses, kStudentWidth);
  const std::string teacher_before = dsd::checkpoint_bytes(b.teacher->checkpoint);
  dsd::TrainConfig off = bench_config(1);
  off.weights.alpha = 0.0;
  off.weights.beta = 0.0;
  const auto distilled = dsd::distill_student(b.teacher->checkpoint, student, *b.data, off);
  const auto plain = dsd::train_supervised(student, *b.data, bench_config(1));
  const bool same = dsd::checkpoint_bytes(distilled.checkpoint) ==
                    dsd::checkpoint_bytes(plain.checkpoint);
  const bool frozen = dsd::checkpoint_bytes(b.teacher->checkpoint) == teacher_before;
  return {same && frozen,
          std::string("alpha=beta=0 student vs cross-entropy student: ") +
              (same ? "bitwise identical" : "DIFFERENT") + "; teacher parameters " +
              (frozen ? "unchanged" : "CHANGED") + " (2000 iterations, benchmark seed 1)"};
}

// ---- 8. every CLI command is reproducible ----------------------------------

struct CliRun {
  int code = 0;
  std::string out;
};

CliRun cli(const std::vector<std::string>& args) {
  std::ostringstream out, err;
  const int code = dsd::cli::run(args, out, err);
  return {code, out.str()};
}

std::string tree_fingerprint(const fs::path& dir) {
  std::vector<fs::path> files;
  for (const auto& e : fs::recursive_directory_iterator(dir)) {
    if (e.is_regular_file()) files.push_back(e.path());
  }
  std::sort(files.begin(), files.end());
  std::string all;
  for (const auto& f : files) {
    std::string body = slurp(f);
    if (f.filename() == "report.json" || f.filename() == "teacher-report.json") {
      auto j = nlohmann::json::parse(body);
      j.erase("wall_time_s");
      body = j.dump();
    }
    all += fs::relative(f, dir).string() + "\n" + body + "\n";
  }
  return all;
}

Outcome determinism() {
  TempDir tmp;
  const std::string config = tmp / "tiny.ini";
  std::ofstream(config) << "[data]\ntrain_count = 16\nval_count = 4\nheight = 16\nwidth = 16\n"
                           "classes = 3\n[net]\nteacher_width = 4\nstudent_width = 3\n"
                           "[train]\nbatch = 4\niterations = 4\nlog_interval = 1\n"
                           "scale_jitter = true\n";
  // Each command runs twice into its own directory; outputs and files must match.
  auto twice = [&](const std::string& name, std::vector<std::string> args) {
    std::string fp[2];
    for (int round = 0; round < 2; ++round) {
      const std::string out = tmp / (name + "-" + std::to_string(round));
      auto a = args;
      if (name != "flops" && name != "eval") a.insert(a.end(), {"--out", out});
      const CliRun r = cli(a);
      fp[round] = std::to_string(r.code) + "\n" + r.out;
      if (fs::exists(out)) fp[round] += tree_fingerprint(out);
      // Stdout embeds the output directory; compare it with the path masked.
      for (std::size_t pos; (pos = fp[round].find(out)) != std::string::npos;) {
        fp[round].replace(pos, out.size(), "<out>");
      }
      if (r.code != 0) return std::string(name) + " exit " + std::to_string(r.code);
    }
    return fp[0] == fp[1] ? std::string() : name + " differs";
  };
  std::vector<std::string> problems;
  auto note = [&](const std::string& p) {
    if (!p.empty()) problems.push_back(p);
  };
  note(twice("flops", {"flops", "--n", "256", "--h", "80", "--w", "45", "--c", "19", "--hp",
                       "65", "--wp", "65"}));
  note(twice("gen-data", {"gen-data", "--config", config}));
  note(twice("train-teacher", {"train-teacher", "--config", config, "--seed", "3"}));
  const std::string teacher = tmp / "train-teacher-0/teacher.ckpt";
  for (const std::string loss : {"dsd", "kd", "at", "fitnet", "affinity"}) {
    note(twice("distill-" + loss,
               {"distill", "--config", config, "--teacher", teacher, "--loss", loss, "--seed", "7"}));
  }
  note(twice("eval", {"eval", "--config", config, "--checkpoint", teacher}));
  note(twice("dump-attn", {"dump-attn", "--config", config, "--checkpoint", teacher, "--pairs",
                           "all"}));
  note(twice("ablate", {"ablate", "--config", config, "--teacher", teacher, "--losses", "kd,csd",
                        "--taus", "2", "--seeds", "1,2"}));
  std::string detail = problems.empty() ? "all 7 commands byte-identical on rerun (wall time excluded)"
                                        : "";
  for (const auto& p : problems) detail += (detail.empty() ? "" : "; ") + p;
  return {problems.empty(), detail};
}

// ---- 9. the ablation harness -----------------------------------------------

Outcome ablation_harness() {
  const auto t0 = Clock::now();
  TempDir tmp;
  // Reduced benchmark: 32 x 32 images, 400 iterations. The grid shape is the full one.
  const std::string config = tmp / "ablate.ini";
  std::ofstream(config) << "[data]\ntrain_count = 400\nval_count = 100\nheight = 32\nwidth = 32\n"
                           "classes = 6\n[train]\niterations = 400\n"
                           "[ablate]\nlosses = kd,csd\ntaus = 1,2,4,8\nseeds = 1,2,3,4,5\n";
  const CliRun r = cli({"ablate", "--config", config, "--out", tmp / "grid"});
  const std::string csv = slurp(tmp.path / "grid/ablate.csv");
  std::istringstream lines(csv);
  std::string header;
  std::getline(lines, header);
  int runs = 0, means = 0;
  for (std::string line; std::getline(lines, line);) {
    runs += line.rfind("run,", 0) == 0;
    means += line.rfind("mean,", 0) == 0;
  }
  const std::string ordering = slurp(tmp.path / "grid/ordering.txt");
  int ordering_lines = 0;
  std::istringstream ol(ordering);
  for (std::string line; std::getline(ol, line);) {
    std::printf("    %s\n", line.c_str());
    ++ordering_lines;
  }
  const bool ok = r.code == 0 &&
                  header == "row,loss,tau,pairs,seed,n,miou,miou_std,pixel_acc,pixel_acc_std" &&
                  runs == 40 && means == 8 && ordering_lines == 4;
  return {ok, "exit " + std::to_string(r.code) + ", " + std::to_string(runs) + " run rows, " +
                  std::to_string(means) + " aggregate rows, " + std::to_string(ordering_lines) +
                  " csd-vs-kd ordering lines (reported, not gated); " +
                  fmt("%.0f s", seconds_since(t0))};
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Acceptance criteria"};
  std::vector<int> only;
  app.add_option("--only", only, "criterion numbers to run")->delimiter(',');
  CLI11_PARSE(app, argc, argv);

  const std::vector<std::pair<std::string, std::function<Outcome()>>> criteria = {
      {"cost-model exactness", cost_model_exactness},
      {"headline FLOPs ratio", headline_ratio},
      {"gradient correctness", gradient_correctness},
      {"oracle equivalence", oracle_equivalence},
      {"metric exactness", metric_exactness},
      {"distillation efficacy", distillation_efficacy},
      {"degeneration exactness", degeneration_exactness},
      {"determinism", determinism},
      {"ablation harness", ablation_harness},
  };
  const std::set<int> selected(only.begin(), only.end());
  int failed = 0;
  for (std::size_t i = 0; i < criteria.size(); ++i) {
    const int number = static_cast<int>(i) + 1;
    if (!selected.empty() && !selected.count(number)) continue;
    Outcome o;
    try {
      o = criteria[i].second();
    } catch (const std::exception& e) {
      o = {false, std::string("threw: ") + e.what()};
    }
    failed += !o.pass;
    std::printf("%s  %d  %-24s %s\n", o.pass ? "PASS" : "FAIL", number,
                criteria[i].first.c_str(), o.detail.c_str());
    std::fflush(stdout);
  }
  return failed == 0 ? 0 : 1;
}
