#include "dsd/cli.hpp"

#include <boost/property_tree/ini_parser.hpp>
#include <boost/property_tree/ptree.hpp>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <map>
#include <nlohmann/json.hpp>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "dsd/trainer.hpp"

namespace dsd::cli {
namespace {

namespace fs = std::filesystem;
namespace pt = boost::property_tree;
using ordered_json = nlohmann::ordered_json;

struct UsageError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Keys accepted in each section of the INI config file.
const std::map<std::string, std::set<std::string>>& known_keys() {
  static const std::map<std::string, std::set<std::string>> keys{
      {"data",
       {"train_dir", "val_dir", "train_seed", "val_seed", "train_count", "val_count",
        "height", "width", "classes", "policy"}},
      {"net", {"teacher_width", "student_width"}},
      {"train",
       {"batch", "iterations", "lr", "momentum", "weight_decay", "poly_power", "seed",
        "flip", "scale_jitter", "log_interval"}},
      {"loss", {"method", "alpha", "beta", "tau", "gamma", "pairs"}},
      {"teacher", {"checkpoint"}},
      {"output", {"dir"}},
      {"ablate", {"losses", "taus", "pairs", "seeds"}},
  };
  return keys;
}

template <class T>
T parse_value(const std::string& text, const std::string& what) {
  if constexpr (std::is_same_v<T, std::string>) {
    return text;
  } else if constexpr (std::is_same_v<T, bool>) {
    if (text == "true" || text == "1" || text == "yes" || text == "on") return true;
    if (text == "false" || text == "0" || text == "no" || text == "off") return false;
    throw UsageError(what + ": expected a boolean, got '" + text + "'");
  } else {
    if constexpr (std::is_unsigned_v<T>) {
      if (!text.empty() && text[0] == '-') {
        throw UsageError(what + ": expected a non-negative integer, got '" + text + "'");
      }
    }
    std::istringstream is(text);
    T value{};
    is >> value;
    if (is.fail() || !(is >> std::ws).eof()) {
      throw UsageError(what + ": cannot parse '" + text + "'");
    }
    return value;
  }
}

class Config {
 public:
  static Config load(const std::optional<std::string>& path) {
    Config c;
    if (!path) return c;
    if (!fs::is_regular_file(*path)) throw UsageError("cannot read config '" + *path + "'");
    try {
      pt::read_ini(*path, c.tree_);
    } catch (const pt::ptree_error& e) {
      throw UsageError("cannot parse config '" + *path + "': " + e.what());
    }
    for (const auto& [section, body] : c.tree_) {
      auto it = known_keys().find(section);
      if (it == known_keys().end() || body.data().size() > 0) {
        throw UsageError("config: unknown section '" + section + "'");
      }
      for (const auto& [key, value] : body) {
        if (!it->second.count(key)) {
          throw UsageError("config: unknown key '" + section + "." + key + "'");
        }
      }
    }
    return c;
  }

  std::optional<std::string> raw(const std::string& section, const std::string& key) const {
    auto v = tree_.get_optional<std::string>(pt::ptree::path_type(section + "." + key, '.'));
    if (!v) return std::nullopt;
    return *v;
  }

  // Flag, then config file, then the built-in default.
  template <class T>
  T get(const std::optional<T>& flag, const std::string& section, const std::string& key,
        const T& fallback) const {
    if (flag) return *flag;
    if (auto v = raw(section, key)) return parse_value<T>(*v, section + "." + key);
    return fallback;
  }

  template <class T>
  std::optional<T> get(const std::optional<T>& flag, const std::string& section,
                       const std::string& key) const {
    if (flag) return flag;
    if (auto v = raw(section, key)) return parse_value<T>(*v, section + "." + key);
    return std::nullopt;
  }

 private:
  pt::ptree tree_;
};

std::vector<std::string> split(const std::string& text, char sep) {
  std::vector<std::string> out;
  std::string item;
  std::istringstream is(text);
  while (std::getline(is, item, sep)) {
    const auto b = item.find_first_not_of(" \t");
    const auto e = item.find_last_not_of(" \t");
    if (b != std::string::npos) out.push_back(item.substr(b, e - b + 1));
  }
  return out;
}

std::string hex64(std::uint64_t v) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(v));
  return buf;
}

std::string fixed(double v, int digits = 6) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.*f", digits, v);
  return buf;
}

std::string short_double(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%g", v);
  return buf;
}

void write_text(const fs::path& path, const std::string& text) {
  const fs::path tmp = path.string() + ".tmp";
  {
    std::ofstream f(tmp, std::ios::binary);
    if (!f) throw UsageError("cannot write '" + path.string() + "'");
    f << text;
    if (!f) throw UsageError("cannot write '" + path.string() + "'");
  }
  fs::rename(tmp, path);
}

std::string read_text(const fs::path& path) {
  std::ifstream f(path, std::ios::binary);
  std::ostringstream ss;
  ss << f.rdbuf();
  return ss.str();
}

// ---- shared flag groups ----------------------------------------------------

struct CommonFlags {
  std::optional<std::string> config;
  std::optional<std::string> out;
};

struct DataFlags {
  std::optional<std::string> train_dir, val_dir, policy;
  std::optional<std::uint64_t> train_seed, val_seed;
  std::optional<std::size_t> train_count, val_count, height, width, classes;
};

struct NetFlags {
  std::optional<std::size_t> teacher_width, student_width;
};

struct TrainFlags {
  std::optional<std::size_t> batch;
  std::optional<std::uint64_t> iterations, seed, log_interval, stop_at;
  std::optional<double> lr, momentum, weight_decay, poly_power;
  std::optional<bool> flip, scale_jitter;
  std::optional<std::string> resume;
};

struct LossFlags {
  std::optional<std::string> method, pairs;
  std::optional<double> alpha, beta, tau, gamma;
};

void add_common(CLI::App* cmd, CommonFlags& f) {
  cmd->add_option("--config", f.config, "INI config file; flags override it");
  cmd->add_option("--out", f.out, "output directory");
}

void add_data(CLI::App* cmd, DataFlags& f) {
  cmd->add_option("--train-data", f.train_dir, "dataset directory written by gen-data");
  cmd->add_option("--val-data", f.val_dir, "dataset directory written by gen-data");
  cmd->add_option("--train-seed", f.train_seed, "generator seed of the train split");
  cmd->add_option("--val-seed", f.val_seed, "generator seed of the val split");
  cmd->add_option("--train-count", f.train_count);
  cmd->add_option("--val-count", f.val_count);
  cmd->add_option("--height", f.height);
  cmd->add_option("--width", f.width);
  cmd->add_option("--classes", f.classes);
  cmd->add_option("--policy", f.policy, "shape policy: mixed, rects, discs, bars");
}

void add_net(CLI::App* cmd, NetFlags& f) {
  cmd->add_option("--teacher-width", f.teacher_width, "teacher base channels");
  cmd->add_option("--student-width", f.student_width, "student base channels");
}

void add_train(CLI::App* cmd, TrainFlags& f) {
  cmd->add_option("--batch", f.batch);
  cmd->add_option("--iterations", f.iterations);
  cmd->add_option("--lr", f.lr);
  cmd->add_option("--momentum", f.momentum);
  cmd->add_option("--weight-decay", f.weight_decay);
  cmd->add_option("--poly-power", f.poly_power);
  cmd->add_option("--seed", f.seed);
  cmd->add_option("--flip", f.flip, "random horizontal flip (true/false)");
  cmd->add_option("--scale-jitter", f.scale_jitter, "random rescaling (true/false)");
  cmd->add_option("--log-interval", f.log_interval, "iterations between trace rows");
}

void add_loss(CLI::App* cmd, LossFlags& f) {
  cmd->add_option("--loss", f.method,
                  "none, dsd, psd, csd, kd, at, fitnet or affinity");
  cmd->add_option("--alpha", f.alpha, "pixel-wise term weight");
  cmd->add_option("--beta", f.beta, "category-wise term weight");
  cmd->add_option("--tau", f.tau, "softening temperature");
  cmd->add_option("--gamma", f.gamma, "weight of the comparison losses");
}

fs::path out_dir(const CommonFlags& f, const Config& cfg, const std::string& command) {
  fs::path dir;
  if (auto d = cfg.get(f.out, "output", "dir")) {
    dir = *d;
  } else {
    const char* root = std::getenv(kOutRootEnv);
    dir = fs::path(root && *root ? root : "runs") / command;
  }
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec || !fs::is_directory(dir)) {
    throw UsageError("cannot create output directory '" + dir.string() + "'");
  }
  return dir;
}

DatasetManifest manifest(const DataFlags& f, const Config& cfg, bool train) {
  DatasetManifest m;
  m.seed = train ? cfg.get<std::uint64_t>(f.train_seed, "data", "train_seed", 1)
                 : cfg.get<std::uint64_t>(f.val_seed, "data", "val_seed", 2);
  m.count = train ? cfg.get<std::size_t>(f.train_count, "data", "train_count", 2000)
                  : cfg.get<std::size_t>(f.val_count, "data", "val_count", 200);
  m.height = cfg.get<std::size_t>(f.height, "data", "height", 64);
  m.width = cfg.get<std::size_t>(f.width, "data", "width", 64);
  m.classes = cfg.get<std::size_t>(f.classes, "data", "classes", 6);
  m.policy = parse_shape_policy(cfg.get<std::string>(f.policy, "data", "policy", "mixed"));
  return m;
}

Dataset dataset(const DataFlags& f, const Config& cfg, bool train) {
  if (auto dir = cfg.get(train ? f.train_dir : f.val_dir, "data",
                         train ? "train_dir" : "val_dir")) {
    return load_dataset(*dir);
  }
  return make_dataset(manifest(f, cfg, train));
}

TrainData train_data(const DataFlags& f, const Config& cfg) {
  TrainData d{dataset(f, cfg, true), dataset(f, cfg, false)};
  if (d.train.manifest.classes != d.val.manifest.classes) {
    throw InvalidArgument("train and val datasets disagree on the class count");
  }
  return d;
}

std::string manifest_key(const DatasetManifest& m) {
  std::ostringstream os;
  os << m.seed << '/' << m.count << '/' << m.height << 'x' << m.width << '/' << m.classes
     << '/' << to_string(m.policy) << "/v" << m.generator_version;
  return os.str();
}

void apply_pairs(TrainConfig& c, const std::string& text) {
  if (text.find(':') == std::string::npos) {
    c.pairs = parse_pair_policy(text);
    if (c.pairs == PairPolicy::kExplicit) {
      throw InvalidArgument("explicit pairs are given as later:earlier,...");
    }
    c.explicit_pairs.clear();
    return;
  }
  c.pairs = PairPolicy::kExplicit;
  c.explicit_pairs.clear();
  for (const std::string& item : split(text, ',')) {
    const auto parts = split(item, ':');
    if (parts.size() != 2) throw InvalidArgument("bad tap pair '" + item + "'");
    c.explicit_pairs.emplace_back(parts[0], parts[1]);
  }
}

std::string pairs_label(const TrainConfig& c) {
  if (c.pairs != PairPolicy::kExplicit) return to_string(c.pairs);
  std::string s;
  for (const auto& [m, n] : c.explicit_pairs) s += (s.empty() ? "" : ",") + m + ":" + n;
  return s;
}

TrainConfig train_config(const TrainFlags& t, const LossFlags& l, const Config& cfg) {
  TrainConfig c;
  c.batch_size = cfg.get(t.batch, "train", "batch", c.batch_size);
  c.iterations = cfg.get(t.iterations, "train", "iterations", c.iterations);
  c.lr = cfg.get(t.lr, "train", "lr", c.lr);
  c.momentum = cfg.get(t.momentum, "train", "momentum", c.momentum);
  c.weight_decay = cfg.get(t.weight_decay, "train", "weight_decay", c.weight_decay);
  c.poly_power = cfg.get(t.poly_power, "train", "poly_power", c.poly_power);
  c.seed = cfg.get(t.seed, "train", "seed", c.seed);
  c.flip = cfg.get(t.flip, "train", "flip", c.flip);
  c.scale_jitter = cfg.get(t.scale_jitter, "train", "scale_jitter", c.scale_jitter);
  c.log_interval = cfg.get(t.log_interval, "train", "log_interval", c.log_interval);
  c.stop_at = t.stop_at.value_or(0);
  c.method = parse_method(cfg.get<std::string>(l.method, "loss", "method", "dsd"));
  c.weights.alpha = cfg.get(l.alpha, "loss", "alpha", c.weights.alpha);
  c.weights.beta = cfg.get(l.beta, "loss", "beta", c.weights.beta);
  c.weights.tau = cfg.get(l.tau, "loss", "tau", c.weights.tau);
  c.gamma = cfg.get(l.gamma, "loss", "gamma");
  apply_pairs(c, cfg.get<std::string>(l.pairs, "loss", "pairs", "adjacent"));
  c.validate();
  return c;
}

std::size_t teacher_width(const NetFlags& f, const Config& cfg) {
  return cfg.get<std::size_t>(f.teacher_width, "net", "teacher_width", 16);
}

std::size_t student_width(const NetFlags& f, const Config& cfg) {
  return cfg.get<std::size_t>(f.student_width, "net", "student_width", 8);
}

std::optional<Checkpoint> resume_from(const TrainFlags& t) {
  if (!t.resume) return std::nullopt;
  return load_checkpoint(*t.resume);
}

void write_run(const fs::path& dir, const std::string& ckpt_name, const TrainResult& r) {
  save_checkpoint((dir / ckpt_name).string(), r.checkpoint);
  write_text(dir / "report.json", r.report.to_json() + "\n");
  write_text(dir / "trace.csv", r.report.trace_csv());
}

void summary(std::ostream& out, const fs::path& dir, const TrainResult& r) {
  ordered_json j;
  j["out"] = dir.string();
  j["iteration"] = r.checkpoint.iteration;
  j["val_miou"] = r.report.val.miou;
  j["val_pixel_acc"] = r.report.val.pixel_acc;
  out << j.dump() << '\n';
}

// ---- flops -----------------------------------------------------------------

struct FlopsFlags {
  std::optional<std::uint64_t> n, h, w, k, c, hp, wp;
  std::string format = "both";
};

int cmd_flops(const FlopsFlags& f, std::ostream& out) {
  const bool feat = f.n || f.h || f.w || f.k;
  const bool logit = f.c || f.hp || f.wp;
  if (!feat && !logit) {
    throw UsageError("flops needs --n --h --w [--k] and/or --c --hp --wp");
  }
  if (feat && !(f.n && f.h && f.w)) throw UsageError("flops: --n, --h and --w go together");
  if (logit && !(f.c && f.hp && f.wp)) throw UsageError("flops: --c, --hp and --wp go together");

  LayerGeometry g;
  if (feat) {
    g.n = *f.n;
    g.h = *f.h;
    g.w = *f.w;
    g.k = f.k.value_or(2);
  }
  if (logit) {
    g.c = *f.c;
    g.hp = *f.hp;
    g.wp = *f.wp;
  }
  g.validate();
  const FlopsReport r = flops_report(g);

  ordered_json j;
  if (feat) {
    j["geometry"] = {{"n", g.n}, {"h", g.h}, {"w", g.w}, {"z", g.z()}, {"k", g.k}};
  }
  if (logit) {
    auto& geo = j["geometry"];
    geo["c"] = g.c;
    geo["hp"] = g.hp;
    geo["wp"] = g.wp;
  }
  auto& fl = j["flops"];
  if (feat) {
    fl["affinity"] = r.affinity;
    fl["psd"] = r.psd;
  }
  if (logit) fl["csd"] = r.csd;
  if (feat) {
    j["ratio"] = {{"affinity_over_psd", r.ratio.affinity_over_psd},
                  {"psd_over_affinity", r.ratio.psd_over_affinity},
                  {"k_over_z", r.ratio.k_over_z}};
  }

  std::ostringstream table;
  auto row = [&table](const std::string& name, const std::string& value) {
    table << std::left << std::setw(22) << name << std::right << std::setw(20) << value
          << '\n';
  };
  if (feat) {
    table << "N=" << g.n << " H=" << g.h << " W=" << g.w << " Z=" << g.z() << " K=" << g.k
          << '\n';
    row("affinity", std::to_string(r.affinity));
    row("psd", std::to_string(r.psd));
    std::ostringstream a, b;
    a << std::setprecision(8) << r.ratio.affinity_over_psd;
    b << std::setprecision(6) << r.ratio.k_over_z;
    row("affinity / psd", a.str());
    row("K / Z", b.str());
  }
  if (logit) {
    table << "C=" << g.c << " H'=" << g.hp << " W'=" << g.wp << '\n';
    row("csd", std::to_string(r.csd));
  }

  if (f.format == "json" || f.format == "both") out << j.dump(2) << '\n';
  if (f.format == "table" || f.format == "both") out << table.str();
  return kExitOk;
}

// ---- gen-data --------------------------------------------------------------

int cmd_gen_data(const CommonFlags& c, const DataFlags& d, std::ostream& out) {
  const Config cfg = Config::load(c.config);
  const fs::path dir = out_dir(c, cfg, "gen-data");
  ordered_json j;
  for (bool train : {true, false}) {
    const Dataset data = make_dataset(manifest(d, cfg, train));
    const fs::path sub = dir / (train ? "train" : "val");
    fs::create_directories(sub);
    save_dataset(sub.string(), data);
    j[train ? "train" : "val"] = sub.string();
  }
  out << j.dump() << '\n';
  return kExitOk;
}

// ---- train-teacher / distill ---------------------------------------------

struct RunFlags {
  CommonFlags common;
  DataFlags data;
  NetFlags net;
  TrainFlags train;
  LossFlags loss;
  std::optional<std::string> teacher;
};

int cmd_train_teacher(const RunFlags& f, std::ostream& out) {
  const Config cfg = Config::load(f.common.config);
  const TrainConfig tc = train_config(f.train, f.loss, cfg);
  const TrainData data = train_data(f.data, cfg);
  const fs::path dir = out_dir(f.common, cfg, "train-teacher");
  const SegNetSpec spec =
      SegNetSpec::teacher(data.train.manifest.classes, teacher_width(f.net, cfg));
  const TrainResult r = train_teacher(spec, data, tc, resume_from(f.train));
  write_run(dir, "teacher.ckpt", r);
  summary(out, dir, r);
  return kExitOk;
}

int cmd_distill(const RunFlags& f, std::ostream& out) {
  const Config cfg = Config::load(f.common.config);
  const TrainConfig tc = train_config(f.train, f.loss, cfg);
  const auto teacher_path = cfg.get(f.teacher, "teacher", "checkpoint");
  if (!teacher_path) throw UsageError("distill needs --teacher (or teacher.checkpoint)");
  const Checkpoint teacher = load_checkpoint(*teacher_path);
  const TrainData data = train_data(f.data, cfg);
  if (teacher.spec.classes != data.train.manifest.classes) {
    throw InvalidArgument("teacher predicts " + std::to_string(teacher.spec.classes) +
                          " classes, dataset has " +
                          std::to_string(data.train.manifest.classes));
  }
  const fs::path dir = out_dir(f.common, cfg, "distill");
  const SegNetSpec spec =
      SegNetSpec::student(data.train.manifest.classes, student_width(f.net, cfg));
  const TrainResult r =
      distill_student(teacher, spec, data, tc, std::nullopt, resume_from(f.train));
  write_run(dir, "student.ckpt", r);
  summary(out, dir, r);
  return kExitOk;
}

// ---- eval ------------------------------------------------------------------

struct EvalFlags {
  CommonFlags common;
  DataFlags data;
  std::string checkpoint;
  std::optional<std::string> dir;
  std::string split = "val";
};

int cmd_eval(const EvalFlags& f, std::ostream& out) {
  const Config cfg = Config::load(f.common.config);
  const Checkpoint ckpt = load_checkpoint(f.checkpoint);
  if (f.split != "train" && f.split != "val") throw UsageError("--split is train or val");
  const bool train = f.split == "train";
  const Dataset data = f.dir ? load_dataset(*f.dir) : dataset(f.data, cfg, train);
  if (data.samples.empty()) throw UndefinedMetric("dataset is empty");
  if (data.manifest.classes != ckpt.spec.classes) {
    throw InvalidArgument("checkpoint predicts " + std::to_string(ckpt.spec.classes) +
                          " classes, dataset has " + std::to_string(data.manifest.classes));
  }
  const SegNet net(ckpt.spec, ckpt.params);
  out << metrics_json(evaluate(net, data.samples)) << '\n';
  return kExitOk;
}

// ---- dump-attn -------------------------------------------------------------

struct DumpFlags {
  CommonFlags common;
  DataFlags data;
  std::string checkpoint;
  std::optional<std::string> dir;
  std::optional<std::string> pairs;
  std::size_t index = 0;
};

int cmd_dump_attn(const DumpFlags& f, std::ostream& out) {
  const Config cfg = Config::load(f.common.config);
  const Checkpoint ckpt = load_checkpoint(f.checkpoint);
  const Dataset data = f.dir ? load_dataset(*f.dir) : dataset(f.data, cfg, false);
  if (f.index >= data.samples.size()) {
    throw InvalidArgument("--index " + std::to_string(f.index) + " is past the dataset end");
  }
  TrainConfig pc;
  apply_pairs(pc, cfg.get<std::string>(f.pairs, "loss", "pairs", "adjacent"));
  const fs::path dir = out_dir(f.common, cfg, "dump-attn");

  const SegNet net(ckpt.spec, ckpt.params);
  const NetOutputs outputs = net.infer(stack_images(data.samples, {f.index}));
  const TapSet taps = tap_set(outputs, 0, pc.pairs, pc.explicit_pairs);

  ordered_json j;
  j["attention"] = ordered_json::array();
  for (std::size_t i = 0; i < taps.size(); ++i) {
    const AttentionMap a = attention_map(taps.features[i], AttentionMode::kSum, 2.0,
                                         taps.names[i]);
    const fs::path p = dir / ("attn_" + taps.names[i] + ".dst1");
    save_dst1(p.string(), a.values);
    j["attention"].push_back({{"tap", taps.names[i]}, {"file", p.string()}});
  }
  j["residual"] = ordered_json::array();
  for (const auto& [m, n] : taps.pairs) {
    const ResidualAttentionMap ra = residual_attention(taps.features[m], taps.features[n]);
    const fs::path p = dir / ("ra_" + taps.names[m] + "_" + taps.names[n] + ".dst1");
    save_dst1(p.string(), ra.values);
    j["residual"].push_back(
        {{"later", taps.names[m]}, {"earlier", taps.names[n]}, {"file", p.string()}});
  }
  out << j.dump(2) << '\n';
  return kExitOk;
}

// ---- ablate ----------------------------------------------------------------

struct AblateFlags {
  RunFlags run;
  std::optional<std::string> losses, taus, pairs, seeds;
};

struct CellRun {
  std::uint64_t seed = 0;
  double miou = 0.0;
  double pixel_acc = 0.0;
};

struct Cell {
  std::string loss;
  double tau = 0.0;
  std::string pairs;
  std::vector<CellRun> runs;
};

std::pair<double, double> mean_std(const std::vector<double>& xs) {
  double mean = 0.0;
  for (double x : xs) mean += x;
  mean /= static_cast<double>(xs.size());
  double var = 0.0;
  for (double x : xs) var += (x - mean) * (x - mean);
  const double sd = xs.size() > 1 ? std::sqrt(var / static_cast<double>(xs.size() - 1)) : 0.0;
  return {mean, sd};
}

std::string ablate_csv(const std::vector<Cell>& cells) {
  std::ostringstream os;
  os << "row,loss,tau,pairs,seed,n,miou,miou_std,pixel_acc,pixel_acc_std\n";
  auto quoted = [](const std::string& s) {
    return s.find(',') == std::string::npos ? s : "\"" + s + "\"";
  };
  for (const Cell& c : cells) {
    if (c.runs.empty()) continue;
    std::vector<double> mious, accs;
    for (const CellRun& r : c.runs) {
      os << "run," << c.loss << ',' << short_double(c.tau) << ',' << quoted(c.pairs) << ','
         << r.seed << ",1," << fixed(r.miou) << ",," << fixed(r.pixel_acc) << ",\n";
      mious.push_back(r.miou);
      accs.push_back(r.pixel_acc);
    }
    const auto [mm, ms] = mean_std(mious);
    const auto [am, as] = mean_std(accs);
    os << "mean," << c.loss << ',' << short_double(c.tau) << ',' << quoted(c.pairs) << ",,"
       << c.runs.size() << ',' << fixed(mm) << ',' << fixed(ms) << ',' << fixed(am) << ','
       << fixed(as) << '\n';
  }
  return os.str();
}

// CSD against KD at each temperature and pair policy where both ran.
std::string ablate_ordering(const std::vector<Cell>& cells) {
  std::ostringstream os;
  for (const Cell& csd : cells) {
    if (csd.loss != "csd" || csd.runs.empty()) continue;
    for (const Cell& kd : cells) {
      if (kd.loss != "kd" || kd.runs.empty() || kd.tau != csd.tau || kd.pairs != csd.pairs) {
        continue;
      }
      std::vector<double> a, b;
      for (const auto& r : csd.runs) a.push_back(r.miou);
      for (const auto& r : kd.runs) b.push_back(r.miou);
      const double ma = mean_std(a).first, mb = mean_std(b).first;
      os << "tau=" << short_double(csd.tau) << " pairs=" << csd.pairs << ": csd "
         << fixed(ma, 4) << (ma > mb ? " > " : ma < mb ? " < " : " = ") << "kd "
         << fixed(mb, 4) << '\n';
    }
  }
  return os.str();
}

int cmd_ablate(const AblateFlags& f, std::ostream& out, std::ostream& err) {
  const RunFlags& rf = f.run;
  const Config cfg = Config::load(rf.common.config);
  const TrainConfig base = train_config(rf.train, rf.loss, cfg);

  std::vector<std::string> losses =
      split(cfg.get<std::string>(f.losses, "ablate", "losses", "kd,csd"), ',');
  std::vector<double> taus;
  for (const auto& t : split(cfg.get<std::string>(f.taus, "ablate", "taus", "1,2,4,8"), ',')) {
    taus.push_back(parse_value<double>(t, "ablate.taus"));
  }
  const std::vector<std::string> pair_specs =
      split(cfg.get<std::string>(f.pairs, "ablate", "pairs", pairs_label(base)), ';');
  std::vector<std::uint64_t> seeds;
  for (const auto& s : split(cfg.get<std::string>(f.seeds, "ablate", "seeds", "1,2,3,4,5"), ',')) {
    seeds.push_back(parse_value<std::uint64_t>(s, "ablate.seeds"));
  }
  if (losses.empty() || taus.empty() || pair_specs.empty() || seeds.empty()) {
    throw UsageError("ablate: every grid axis needs at least one value");
  }
  for (const auto& l : losses) parse_method(l);

  const TrainData data = train_data(rf.data, cfg);
  const fs::path dir = out_dir(rf.common, cfg, "ablate");
  const std::string data_key =
      manifest_key(data.train.manifest) + "|" + manifest_key(data.val.manifest);

  Checkpoint teacher;
  if (auto path = cfg.get(rf.teacher, "teacher", "checkpoint")) {
    teacher = load_checkpoint(*path);
  } else {
    const SegNetSpec spec =
        SegNetSpec::teacher(data.train.manifest.classes, teacher_width(rf.net, cfg));
    const std::string key = config_to_json(base) + spec.to_json() + data_key;
    const fs::path cached = dir / ("teacher-" + hex64(fnv1a64(key)) + ".ckpt");
    if (fs::exists(cached)) {
      teacher = load_checkpoint(cached.string());
    } else {
      err << "ablate: training teacher\n";
      const TrainResult r = train_teacher(spec, data, base);
      save_checkpoint(cached.string(), r.checkpoint);
      write_text(dir / "teacher-report.json", r.report.to_json() + "\n");
      teacher = r.checkpoint;
    }
  }
  const std::string teacher_key = hex64(fnv1a64(checkpoint_bytes(teacher)));
  const SegNetSpec student =
      SegNetSpec::student(data.train.manifest.classes, student_width(rf.net, cfg));

  fs::create_directories(dir / "cells");
  std::vector<Cell> cells;
  bool diverged = false, failed = false;
  for (const std::string& loss : losses) {
    for (double tau : taus) {
      for (const std::string& pairs : pair_specs) {
        Cell cell{loss, tau, pairs, {}};
        for (std::uint64_t seed : seeds) {
          TrainConfig tc = base;
          tc.method = parse_method(loss);
          tc.weights.tau = tau;
          tc.seed = seed;
          apply_pairs(tc, pairs);
          const std::string key = config_to_json(tc) + student.to_json() + teacher_key + data_key;
          const fs::path path = dir / "cells" / (hex64(fnv1a64(key)) + ".json");
          const std::string label =
              loss + " tau=" + short_double(tau) + " pairs=" + pairs + " seed=" + std::to_string(seed);
          if (fs::exists(path)) {
            const auto j = nlohmann::json::parse(read_text(path));
            cell.runs.push_back({seed, j.at("miou").get<double>(), j.at("pixel_acc").get<double>()});
            err << "ablate: " << label << " cached\n";
            continue;
          }
          try {
            const TrainResult r = distill_student(teacher, student, data, tc);
            ordered_json j;
            j["loss"] = loss;
            j["tau"] = tau;
            j["pairs"] = pairs;
            j["seed"] = seed;
            j["miou"] = r.report.val.miou;
            j["pixel_acc"] = r.report.val.pixel_acc;
            j["report"] = ordered_json::parse(r.report.to_json(false));
            write_text(path, j.dump(2) + "\n");
            cell.runs.push_back({seed, r.report.val.miou, r.report.val.pixel_acc});
            err << "ablate: " << label << " miou " << fixed(r.report.val.miou, 4) << '\n';
          } catch (const TrainingDiverged& e) {
            diverged = true;
            err << "ablate: " << label << " diverged at iteration " << e.iteration() << '\n';
          } catch (const std::exception& e) {
            failed = true;
            err << "ablate: " << label << " failed: " << e.what() << '\n';
          }
        }
        cells.push_back(std::move(cell));
      }
    }
  }

  const std::string csv = ablate_csv(cells);
  const std::string ordering = ablate_ordering(cells);
  write_text(dir / "ablate.csv", csv);
  write_text(dir / "ordering.txt", ordering);
  out << csv << ordering;
  if (diverged) return kExitDiverged;
  return failed ? kExitUsage : kExitOk;
}

}  // namespace

int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"Distillation toolkit for compact segmentation networks", "dsd"};
  app.require_subcommand(1);

  FlopsFlags flops;
  auto* c_flops = app.add_subcommand("flops", "knowledge-extraction FLOPs by method");
  c_flops->set_help_flag("--help", "print this help");  // -h would clash with --h
  c_flops->add_option("--n", flops.n, "channels of the tapped feature maps");
  c_flops->add_option("--h", flops.h, "feature height");
  c_flops->add_option("--w", flops.w, "feature width");
  c_flops->add_option("--k", flops.k, "number of tapped feature maps (default 2)");
  c_flops->add_option("--c", flops.c, "categories");
  c_flops->add_option("--hp", flops.hp, "logits height");
  c_flops->add_option("--wp", flops.wp, "logits width");
  c_flops->add_option("--format", flops.format, "json, table or both")
      ->check(CLI::IsMember({"json", "table", "both"}));

  CommonFlags gen_common;
  DataFlags gen_data;
  auto* c_gen = app.add_subcommand("gen-data", "write synthetic train/val datasets");
  add_common(c_gen, gen_common);
  add_data(c_gen, gen_data);

  RunFlags teacher;
  auto* c_teacher = app.add_subcommand("train-teacher", "train the teacher network");
  add_common(c_teacher, teacher.common);
  add_data(c_teacher, teacher.data);
  add_net(c_teacher, teacher.net);
  add_train(c_teacher, teacher.train);
  c_teacher->add_option("--resume", teacher.train.resume, "continue from a checkpoint");
  c_teacher->add_option("--stop-at", teacher.train.stop_at,
                        "stop early while keeping the full schedule");

  RunFlags distill;
  auto* c_distill = app.add_subcommand("distill", "distil a teacher into a student");
  add_common(c_distill, distill.common);
  add_data(c_distill, distill.data);
  add_net(c_distill, distill.net);
  add_train(c_distill, distill.train);
  add_loss(c_distill, distill.loss);
  c_distill->add_option("--pairs", distill.loss.pairs,
                        "adjacent, all, or later:earlier,... tap pairs");
  c_distill->add_option("--teacher", distill.teacher, "teacher checkpoint");
  c_distill->add_option("--resume", distill.train.resume, "continue from a checkpoint");
  c_distill->add_option("--stop-at", distill.train.stop_at,
                        "stop early while keeping the full schedule");

  EvalFlags eval;
  auto* c_eval = app.add_subcommand("eval", "evaluate a checkpoint");
  add_common(c_eval, eval.common);
  add_data(c_eval, eval.data);
  c_eval->add_option("--checkpoint", eval.checkpoint)->required();
  c_eval->add_option("--data", eval.dir, "dataset directory (default: generated split)");
  c_eval->add_option("--split", eval.split, "generated split when --data is absent")
      ->check(CLI::IsMember({"train", "val"}));

  AblateFlags ablate;
  auto* c_ablate = app.add_subcommand("ablate", "grid of distillation runs to CSV");
  add_common(c_ablate, ablate.run.common);
  add_data(c_ablate, ablate.run.data);
  add_net(c_ablate, ablate.run.net);
  add_train(c_ablate, ablate.run.train);
  add_loss(c_ablate, ablate.run.loss);
  c_ablate->add_option("--teacher", ablate.run.teacher, "teacher checkpoint (default: train one)");
  c_ablate->add_option("--losses", ablate.losses, "comma-separated losses");
  c_ablate->add_option("--taus", ablate.taus, "comma-separated temperatures");
  c_ablate->add_option("--pairs", ablate.pairs, "';'-separated pair policies");
  c_ablate->add_option("--seeds", ablate.seeds, "comma-separated training seeds");

  DumpFlags dump;
  auto* c_dump = app.add_subcommand("dump-attn", "write attention maps as DST1 tensors");
  add_common(c_dump, dump.common);
  add_data(c_dump, dump.data);
  c_dump->add_option("--checkpoint", dump.checkpoint)->required();
  c_dump->add_option("--data", dump.dir, "dataset directory (default: generated val split)");
  c_dump->add_option("--index", dump.index, "sample index");
  c_dump->add_option("--pairs", dump.pairs, "adjacent, all, or later:earlier,... tap pairs");

  std::vector<std::string> reversed(args.rbegin(), args.rend());
  try {
    app.parse(reversed);
  } catch (const CLI::CallForHelp&) {
    out << app.help();
    return kExitOk;
  } catch (const CLI::CallForAllHelp&) {
    out << app.help("", CLI::AppFormatMode::All);
    return kExitOk;
  } catch (const CLI::ParseError& e) {
    err << "error: " << e.what() << "\n\n";
    const auto sub = app.get_subcommands();
    err << (sub.empty() ? app.help() : sub.front()->help());
    return kExitUsage;
  }

  try {
    if (c_flops->parsed()) return cmd_flops(flops, out);
    if (c_gen->parsed()) return cmd_gen_data(gen_common, gen_data, out);
    if (c_teacher->parsed()) return cmd_train_teacher(teacher, out);
    if (c_distill->parsed()) return cmd_distill(distill, out);
    if (c_eval->parsed()) return cmd_eval(eval, out);
    if (c_ablate->parsed()) return cmd_ablate(ablate, out, err);
    if (c_dump->parsed()) return cmd_dump_attn(dump, out);
  } catch (const UsageError& e) {
    const auto sub = app.get_subcommands();
    err << "error: " << e.what() << "\n\n" << (sub.empty() ? app.help() : sub.front()->help());
    return kExitUsage;
  } catch (const TrainingDiverged& e) {
    err << "error: " << e.what() << '\n';
    return kExitDiverged;
  } catch (const UndefinedMetric& e) {
    err << "error: undefined metric: " << e.what() << '\n';
    return kExitUsage;
  } catch (const FormatError& e) {
    err << "error: " << e.what() << '\n';
    return kExitUsage;
  } catch (const InvalidArgument& e) {
    err << "error: " << e.what() << '\n';
    return kExitUsage;
  } catch (const std::filesystem::filesystem_error& e) {
    err << "error: " << e.what() << '\n';
    return kExitUsage;
  }
  return kExitUsage;
}

}  // namespace dsd::cli
