#include "dsd/trainer.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <numeric>
#include <random>
#include <sstream>

#include <nlohmann/json.hpp>

#include "dsd/optim.hpp"

namespace dsd {

DistillMethod parse_method(const std::string& name) {
  if (name == "none" || name == "ce") return DistillMethod::kNone;
  if (name == "dsd") return DistillMethod::kDsd;
  if (name == "psd") return DistillMethod::kPsd;
  if (name == "csd") return DistillMethod::kCsd;
  if (name == "kd") return DistillMethod::kKd;
  if (name == "at") return DistillMethod::kAt;
  if (name == "fitnet") return DistillMethod::kFitnet;
  if (name == "affinity") return DistillMethod::kAffinity;
  throw InvalidArgument("unknown distillation loss '" + name + "'");
}

std::string to_string(DistillMethod method) {
  switch (method) {
    case DistillMethod::kNone: return "none";
    case DistillMethod::kDsd: return "dsd";
    case DistillMethod::kPsd: return "psd";
    case DistillMethod::kCsd: return "csd";
    case DistillMethod::kKd: return "kd";
    case DistillMethod::kAt: return "at";
    case DistillMethod::kFitnet: return "fitnet";
    case DistillMethod::kAffinity: return "affinity";
  }
  return "none";
}

double default_gamma(DistillMethod method) {
  switch (method) {
    case DistillMethod::kKd: return 1.0;
    case DistillMethod::kAt: return 100.0;
    case DistillMethod::kFitnet: return 1.0;
    case DistillMethod::kAffinity: return 100.0;
    default: return 0.0;
  }
}

void TrainConfig::validate() const {
  if (iterations < 1) throw InvalidArgument("iterations must be >= 1");
  if (batch_size < 1) throw InvalidArgument("batch size must be >= 1");
  if (!(lr > 0.0)) throw InvalidArgument("learning rate must be > 0");
  if (!(momentum >= 0.0 && momentum < 1.0)) {
    throw InvalidArgument("momentum must lie in [0, 1)");
  }
  if (!(weight_decay >= 0.0)) throw InvalidArgument("weight decay must be >= 0");
  if (log_interval < 1) throw InvalidArgument("log interval must be >= 1");
  if (gamma && !(*gamma >= 0.0)) throw InvalidArgument("gamma must be >= 0");
  weights.validate();
}

namespace {

using Clock = std::chrono::steady_clock;

struct Batch {
  Tensor images;
  std::vector<LabelMap> masks;
};

// Epoch e visits the training set in a permutation seeded by (seed, e).
class BatchOrder {
 public:
  BatchOrder(std::size_t n, std::uint64_t seed) : n_(n), seed_(seed) {}

  std::vector<std::size_t> indices(std::uint64_t iteration, std::size_t batch) {
    std::vector<std::size_t> out;
    std::uint64_t pos = iteration * batch;
    for (std::size_t i = 0; i < batch; ++i, ++pos) {
      const std::uint64_t epoch = pos / n_;
      if (epoch != epoch_ || order_.empty()) load(epoch);
      out.push_back(order_[pos % n_]);
    }
    return out;
  }

 private:
  void load(std::uint64_t epoch) {
    epoch_ = epoch;
    order_.resize(n_);
    std::iota(order_.begin(), order_.end(), std::size_t{0});
    std::seed_seq seq{static_cast<std::uint32_t>(seed_), static_cast<std::uint32_t>(seed_ >> 32),
                      static_cast<std::uint32_t>(epoch), 0x5eedU};
    std::mt19937_64 rng(seq);
    std::shuffle(order_.begin(), order_.end(), rng);
  }

  std::size_t n_;
  std::uint64_t seed_;
  std::uint64_t epoch_ = 0;
  std::vector<std::size_t> order_;
};

// Horizontal flip and scale jitter in [0.5, 2] followed by a random crop or
// a mean-padded (image 0.5, mask ignore) placement back to the input size.
void augment(Tensor& image, LabelMap& mask, const TrainConfig& config,
             std::mt19937_64& rng) {
  const std::size_t h = mask.height, w = mask.width;
  if (config.flip) {
    const bool flip = std::uniform_int_distribution<int>(0, 1)(rng) == 1;
    if (flip) {
      for (std::size_t c = 0; c < image.dim(0); ++c) {
        for (std::size_t y = 0; y < h; ++y) {
          double* row = image.data().data() + (c * h + y) * w;
          std::reverse(row, row + w);
        }
      }
      for (std::size_t y = 0; y < h; ++y) {
        std::reverse(mask.labels.begin() + static_cast<std::ptrdiff_t>(y * w),
                     mask.labels.begin() + static_cast<std::ptrdiff_t>((y + 1) * w));
      }
    }
  }
  if (config.scale_jitter) {
    const double s = std::uniform_real_distribution<double>(0.5, 2.0)(rng);
    const std::size_t sh = std::max<std::size_t>(1, static_cast<std::size_t>(std::lround(h * s)));
    const std::size_t sw = std::max<std::size_t>(1, static_cast<std::size_t>(std::lround(w * s)));
    const Tensor scaled = resize_bilinear(image, sh, sw);
    LabelMap scaled_mask(sh, sw);
    for (std::size_t y = 0; y < sh; ++y) {
      const std::size_t sy = std::min(h - 1, static_cast<std::size_t>((y + 0.5) * h / sh));
      for (std::size_t x = 0; x < sw; ++x) {
        const std::size_t sx = std::min(w - 1, static_cast<std::size_t>((x + 0.5) * w / sw));
        scaled_mask.at(y, x) = mask.at(sy, sx);
      }
    }
    // Offset of the output window inside the scaled image (may be negative).
    auto offset = [&rng](std::size_t scaled_len, std::size_t len) -> long {
      const long slack = static_cast<long>(scaled_len) - static_cast<long>(len);
      if (slack >= 0) return std::uniform_int_distribution<long>(0, slack)(rng);
      return -std::uniform_int_distribution<long>(0, -slack)(rng);
    };
    const long oy = offset(sh, h);
    const long ox = offset(sw, w);
    Tensor out({image.dim(0), h, w}, 0.5);
    LabelMap out_mask(h, w, kIgnoreLabel);
    for (std::size_t y = 0; y < h; ++y) {
      const long sy = static_cast<long>(y) + oy;
      if (sy < 0 || sy >= static_cast<long>(sh)) continue;
      for (std::size_t x = 0; x < w; ++x) {
        const long sx = static_cast<long>(x) + ox;
        if (sx < 0 || sx >= static_cast<long>(sw)) continue;
        for (std::size_t c = 0; c < image.dim(0); ++c) {
          out.at(c, y, x) = scaled.at(c, static_cast<std::size_t>(sy), static_cast<std::size_t>(sx));
        }
        out_mask.at(y, x) = scaled_mask.at(static_cast<std::size_t>(sy), static_cast<std::size_t>(sx));
      }
    }
    image = std::move(out);
    mask = std::move(out_mask);
  }
}

Batch make_batch(const std::vector<SynthSample>& samples,
                 const std::vector<std::size_t>& indices,
                 const TrainConfig& config, std::mt19937_64& rng) {
  const Shape& one = samples.at(indices.front()).image.shape();
  Batch batch{Tensor({indices.size(), one[0], one[1], one[2]}), {}};
  for (std::size_t i = 0; i < indices.size(); ++i) {
    Tensor image = samples[indices[i]].image;
    LabelMap mask = samples[indices[i]].mask;
    augment(image, mask, config, rng);
    batch.images.set_slice(i, image);
    batch.masks.push_back(std::move(mask));
  }
  return batch;
}

void add_slice(Tensor& batch, std::size_t index, const Tensor& g, double scale) {
  const std::size_t n = g.size();
  if (batch.size() != n * batch.dim(0)) {
    throw InvalidArgument("gradient slice does not match batch tensor");
  }
  double* dst = batch.data().data() + index * n;
  for (std::size_t i = 0; i < n; ++i) dst[i] += scale * g[i];
}

bool uses_teacher(DistillMethod m) { return m != DistillMethod::kNone; }

struct StepLosses {
  double ce = 0.0, psd = 0.0, csd = 0.0, aux = 0.0, total = 0.0;
};

nlohmann::ordered_json manifest_json(const DatasetManifest& m) {
  return {{"generator_version", m.generator_version}, {"seed", m.seed},
          {"n", m.count}, {"height", m.height}, {"width", m.width},
          {"classes", m.classes}, {"shape_policy", to_string(m.policy)}};
}

nlohmann::ordered_json eval_to_json(const EvalResult& r) {
  nlohmann::ordered_json metrics;
  metrics["miou"] = r.miou;
  metrics["pixel_acc"] = r.pixel_acc;
  metrics["class_iou"] = nlohmann::ordered_json::array();
  for (const auto& iou : r.class_iou) {
    if (iou) {
      metrics["class_iou"].push_back(*iou);
    } else {
      metrics["class_iou"].push_back(nullptr);
    }
  }
  return metrics;
}

nlohmann::ordered_json config_json(const TrainConfig& c) {
  nlohmann::ordered_json j;
  j["seed"] = c.seed;
  j["batch_size"] = c.batch_size;
  j["iterations"] = c.iterations;
  j["lr"] = c.lr;
  j["momentum"] = c.momentum;
  j["weight_decay"] = c.weight_decay;
  j["poly_power"] = c.poly_power;
  j["loss"] = to_string(c.method);
  j["alpha"] = c.weights.alpha;
  j["beta"] = c.weights.beta;
  j["tau"] = c.weights.tau;
  j["gamma"] = c.effective_gamma();
  j["pairs"] = to_string(c.pairs);
  j["explicit_pairs"] = nlohmann::ordered_json::array();
  for (const auto& [m, n] : c.explicit_pairs) {
    j["explicit_pairs"].push_back({m, n});
  }
  j["flip"] = c.flip;
  j["scale_jitter"] = c.scale_jitter;
  j["log_interval"] = c.log_interval;
  if (c.stop_at > 0) j["stop_at"] = c.stop_at;
  return j;
}

class Trainer {
 public:
  Trainer(SegNet student, const SegNet* teacher, const TrainData& data,
          const TrainConfig& config)
      : student_(std::move(student)), teacher_(teacher), data_(data), config_(config) {
    config_.validate();
    if (data_.train.samples.empty()) throw InvalidArgument("empty training set");
    if (teacher_ && teacher_->spec().classes != student_.spec().classes) {
      throw InvalidArgument("teacher and student class counts differ");
    }
    if (uses_teacher(config_.method) && !teacher_) {
      throw InvalidArgument("distillation loss requires a teacher network");
    }
    if (config_.method == DistillMethod::kFitnet) {
      const std::size_t ns = student_.spec().tap_channels(taps::kHead);
      const std::size_t nt = teacher_->spec().tap_channels(taps::kHead);
      std::mt19937_64 rng(config_.seed ^ 0xada9ULL);
      std::normal_distribution<double> dist(0.0, std::sqrt(1.0 / static_cast<double>(ns)));
      adapter_ = Tensor({nt, ns});
      for (double& x : adapter_.data()) x = dist(rng);
    }
  }

  void restore_aux(const std::vector<Tensor>& aux) {
    if (config_.method != DistillMethod::kFitnet) {
      if (!aux.empty()) throw InvalidArgument("resume checkpoint carries unexpected state");
      return;
    }
    if (aux.empty() || aux.size() > 2 || aux[0].shape() != adapter_.shape()) {
      throw InvalidArgument("resume checkpoint has no matching adapter");
    }
    adapter_ = aux[0];
    adapter_velocity_.assign(aux.begin() + 1, aux.end());
  }

  TrainResult run(std::uint64_t start, std::vector<Tensor> velocity,
                  const std::string& rng_state, const std::string& role) {
    const auto t0 = Clock::now();
    std::mt19937_64 rng(config_.seed);
    if (!rng_state.empty()) {
      std::istringstream is(rng_state);
      is >> rng;
    }
    BatchOrder order(data_.train.samples.size(), config_.seed);
    DistillReport report;
    report.role = role;
    report.config = config_;
    report.spec = student_.spec();
    if (teacher_) report.teacher_digest = teacher_->spec().digest();
    report.train_data = data_.train.manifest;
    report.val_data = data_.val.manifest;

    const double ema_rate = 2.0 / 51.0;
    const std::uint64_t early = config_.iterations / 10;
    bool ema_started = false;
    double ema = 0.0;
    const std::uint64_t end =
        config_.stop_at > 0 ? std::min(config_.stop_at, config_.iterations) : config_.iterations;
    for (std::uint64_t it = start; it < end; ++it) {
      const Batch batch = make_batch(data_.train.samples,
                                     order.indices(it, config_.batch_size), config_, rng);
      const double lr = poly_lr(it, config_.iterations, config_.lr, config_.poly_power);
      const StepLosses losses = step(batch, lr, velocity);
      if (!std::isfinite(losses.total)) {
        throw TrainingDiverged(it, "loss diverged at iteration " + std::to_string(it));
      }
      ema = ema_started ? ema + ema_rate * (losses.total - ema) : losses.total;
      ema_started = true;
      if (it == early) report.ema_early = ema;
      if (it % config_.log_interval == 0 || it + 1 == config_.iterations) {
        report.trace.push_back({it, lr, losses.ce, losses.psd, losses.csd,
                                losses.aux, losses.total});
      }
    }
    report.ema_final = ema;

    if (!data_.val.samples.empty()) report.val = evaluate(student_, data_.val.samples);
    const auto& m = data_.train.manifest;
    report.flops = flops_report(student_geometry(student_.spec(), m.height, m.width));

    std::ostringstream os;
    os << rng;
    Checkpoint ckpt{student_.spec(), student_.params(), std::move(velocity),
                    std::max(start, end), os.str(), {}};
    if (config_.method == DistillMethod::kFitnet) {
      ckpt.aux.push_back(adapter_);
      ckpt.aux.insert(ckpt.aux.end(), adapter_velocity_.begin(), adapter_velocity_.end());
    }
    report.wall_time_s = std::chrono::duration<double>(Clock::now() - t0).count();
    return {std::move(ckpt), std::move(report)};
  }

 private:
  StepLosses step(const Batch& batch, double lr, std::vector<Tensor>& velocity) {
    const std::size_t b_count = batch.masks.size();
    const double inv = 1.0 / static_cast<double>(b_count);
    const NetOutputs s_out = student_.forward(batch.images);
    NetOutputs t_out;
    if (teacher_ && uses_teacher(config_.method)) t_out = teacher_->infer(batch.images);

    NetOutputs up{Tensor(s_out.backbone.shape()), Tensor(s_out.head.shape()),
                  Tensor(s_out.logits.shape())};
    Tensor adapter_grad;
    if (config_.method == DistillMethod::kFitnet) adapter_grad = Tensor(adapter_.shape());

    LossWeights w = config_.weights;
    if (config_.method == DistillMethod::kPsd) w.beta = 0.0;
    if (config_.method == DistillMethod::kCsd) w.alpha = 0.0;
    const double gamma = config_.effective_gamma();

    StepLosses mean;
    for (std::size_t b = 0; b < b_count; ++b) {
      const Tensor logits = s_out.logits.slice(b);
      GradPair ce = cross_entropy(logits, batch.masks[b]);
      GradPair psd, csd, aux;
      GradPair total;
      switch (config_.method) {
        case DistillMethod::kNone:
          total = ce;
          break;
        case DistillMethod::kDsd:
        case DistillMethod::kPsd:
        case DistillMethod::kCsd:
          if (config_.method != DistillMethod::kCsd) {
            psd = psd_loss(tap_set(s_out, b, config_.pairs, config_.explicit_pairs),
                           tap_set(t_out, b, config_.pairs, config_.explicit_pairs));
          }
          if (config_.method != DistillMethod::kPsd) {
            csd = csd_loss(logits, t_out.logits.slice(b), w.tau);
          }
          total = total_loss(ce, psd, csd, w);
          break;
        case DistillMethod::kKd:
          aux = kd_loss(logits, t_out.logits.slice(b), w.tau);
          break;
        case DistillMethod::kAt:
          aux = at_loss(tap_set(s_out, b, PairPolicy::kAdjacent),
                        tap_set(t_out, b, PairPolicy::kAdjacent));
          break;
        case DistillMethod::kFitnet:
          aux = fitnet_loss(s_out.head.slice(b), t_out.head.slice(b), adapter_);
          break;
        case DistillMethod::kAffinity:
          aux = affinity_loss(s_out.head.slice(b), t_out.head.slice(b));
          break;
      }
      if (!aux.grads.empty()) {
        total = ce;
        if (gamma != 0.0) {
          total.value += gamma * aux.value;
          for (auto& [slot, g] : aux.grads) {
            g *= gamma;
            auto it = total.grads.find(slot);
            if (it == total.grads.end()) {
              total.grads.emplace(slot, g);
            } else {
              it->second += g;
            }
          }
        }
      }
      for (const auto& [slot, g] : total.grads) {
        if (slot == "logits" || slot == "z_s" || slot == student_slot(taps::kLogits)) {
          add_slice(up.logits, b, g, inv);
        } else if (slot == "A_s" || slot == student_slot(taps::kHead)) {
          add_slice(up.head, b, g, inv);
        } else if (slot == student_slot(taps::kBackbone)) {
          add_slice(up.backbone, b, g, inv);
        } else if (slot == "adapter") {
          adapter_grad.axpy(inv, g);
        } else {
          throw InvalidArgument("unexpected gradient slot " + slot);
        }
      }
      mean.ce += inv * ce.value;
      mean.psd += inv * psd.value;
      mean.csd += inv * csd.value;
      mean.aux += inv * aux.value;
      mean.total += inv * total.value;
    }

    if (!std::isfinite(mean.total)) return mean;
    std::vector<Tensor> grads = student_.backward(up);
    const SgdOptions opt{lr, config_.momentum, config_.weight_decay};
    sgd_step(student_.params(), grads, velocity, opt);
    if (config_.method == DistillMethod::kFitnet) {
      std::vector<Tensor> p{adapter_};
      sgd_step(p, {adapter_grad}, adapter_velocity_, opt);
      adapter_ = std::move(p.front());
    }
    return mean;
  }

  SegNet student_;
  const SegNet* teacher_;
  const TrainData& data_;
  TrainConfig config_;
  Tensor adapter_;
  std::vector<Tensor> adapter_velocity_;
};

}  // namespace

TapSet tap_set(const NetOutputs& out, std::size_t index, PairPolicy policy,
               const std::vector<NamedPair>& explicit_pairs) {
  return build_taps({{taps::kBackbone, out.backbone.slice(index)},
                     {taps::kHead, out.head.slice(index)},
                     {taps::kLogits, out.logits.slice(index)}},
                    policy, explicit_pairs);
}

LayerGeometry student_geometry(const SegNetSpec& spec, std::size_t height,
                               std::size_t width) {
  const std::size_t stride = spec.output_stride();
  LayerGeometry g;
  g.n = spec.tap_channels(taps::kHead);
  g.h = height / stride;
  g.w = width / stride;
  g.k = 3;
  g.c = spec.classes;
  g.hp = g.h;
  g.wp = g.w;
  return g;
}

EvalResult evaluate(const SegNet& net, const std::vector<SynthSample>& samples,
                    std::size_t batch_size) {
  if (samples.empty()) throw UndefinedMetric("evaluation set is empty");
  EvalResult r{ConfusionMatrix(net.spec().classes), 0.0, 0.0, {}};
  for (std::size_t first = 0; first < samples.size(); first += batch_size) {
    std::vector<std::size_t> idx;
    for (std::size_t i = first; i < std::min(samples.size(), first + batch_size); ++i) {
      idx.push_back(i);
    }
    const Tensor images = stack_images(samples, idx);
    const NetOutputs out = net.infer(images);
    const auto preds = predict_labels(out.logits, images.dim(2), images.dim(3));
    for (std::size_t i = 0; i < idx.size(); ++i) {
      r.confusion.add(preds[i], samples[idx[i]].mask);
    }
  }
  r.miou = miou(r.confusion);
  r.pixel_acc = pixel_acc(r.confusion);
  r.class_iou = per_class_iou(r.confusion);
  return r;
}

TrainResult train_supervised(const SegNetSpec& spec, const TrainData& data,
                             const TrainConfig& config,
                             const std::optional<Checkpoint>& resume) {
  TrainConfig ce_only = config;
  ce_only.method = DistillMethod::kNone;
  if (resume) {
    if (resume->spec != spec) throw InvalidArgument("resume checkpoint spec differs");
    if (resume->iteration > config.iterations) {
      throw InvalidArgument("resume checkpoint is past the requested iterations");
    }
    Trainer t(SegNet(spec, resume->params), nullptr, data, ce_only);
    return t.run(resume->iteration, resume->velocity, resume->rng_state, "student");
  }
  Trainer t(SegNet(spec, config.seed), nullptr, data, ce_only);
  return t.run(0, {}, {}, "student");
}

TrainResult train_teacher(const SegNetSpec& spec, const TrainData& data,
                          const TrainConfig& config,
                          const std::optional<Checkpoint>& resume) {
  TrainResult r = train_supervised(spec, data, config, resume);
  r.report.role = "teacher";
  const SegNet net(r.checkpoint.spec, r.checkpoint.params);
  r.report.train_eval = evaluate(net, data.train.samples);
  return r;
}

TrainResult distill_student(const Checkpoint& teacher, const SegNetSpec& student,
                            const TrainData& data, const TrainConfig& config,
                            const std::optional<Checkpoint>& student_init,
                            const std::optional<Checkpoint>& resume) {
  const SegNet frozen(teacher.spec, teacher.params);
  if (resume) {
    if (resume->spec != student) throw InvalidArgument("resume checkpoint spec differs");
    if (resume->iteration > config.iterations) {
      throw InvalidArgument("resume checkpoint is past the requested iterations");
    }
    Trainer t(SegNet(student, resume->params), &frozen, data, config);
    t.restore_aux(resume->aux);
    return t.run(resume->iteration, resume->velocity, resume->rng_state, "student");
  }
  SegNet net = student_init ? SegNet(student, student_init->params)
                            : SegNet(student, config.seed);
  if (student_init && student_init->spec != student) {
    throw InvalidArgument("student_init checkpoint spec differs from student spec");
  }
  Trainer t(std::move(net), &frozen, data, config);
  return t.run(0, {}, {}, "student");
}

std::string DistillReport::to_json(bool include_wall_time) const {
  nlohmann::ordered_json j;
  j["role"] = role;
  j["config"] = config_json(config);
  j["network"] = nlohmann::ordered_json::parse(spec.to_json());
  if (teacher_digest) j["teacher_digest"] = *teacher_digest;
  j["train_data"] = manifest_json(train_data);
  j["val_data"] = manifest_json(val_data);
  auto& trace_json = j["loss_trace"] = nlohmann::ordered_json::array();
  for (const TraceRow& r : trace) {
    trace_json.push_back({{"iteration", r.iteration}, {"lr", r.lr}, {"ce", r.ce},
                          {"psd", r.psd}, {"csd", r.csd}, {"aux", r.aux},
                          {"total", r.total}});
  }
  j["ema_total"] = {{"early", ema_early}, {"final", ema_final}};
  if (train_eval) j["train"] = eval_to_json(*train_eval);
  j["val"] = eval_to_json(val);
  j["flops"] = nlohmann::ordered_json::parse(flops_report_json(flops));
  if (include_wall_time) j["wall_time_s"] = wall_time_s;
  return j.dump(2);
}

std::string metrics_json(const EvalResult& r) { return eval_to_json(r).dump(2); }

std::string config_to_json(const TrainConfig& c) { return config_json(c).dump(); }

std::string DistillReport::trace_csv() const {
  std::ostringstream os;
  os.precision(17);
  os << "iteration,lr,ce,psd,csd,aux,total\n";
  for (const TraceRow& r : trace) {
    os << r.iteration << ',' << r.lr << ',' << r.ce << ',' << r.psd << ','
       << r.csd << ',' << r.aux << ',' << r.total << '\n';
  }
  return os.str();
}

}  // namespace dsd
