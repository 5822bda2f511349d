#include "dsd/cost_model.hpp"

#include <iomanip>
#include <random>
#include <sstream>
#include <vector>

#include <nlohmann/json.hpp>

#include "dsd/kernels.hpp"

namespace dsd {

void LayerGeometry::validate() const {
  if (n < 1 || h < 1 || w < 1 || c < 1 || hp < 1 || wp < 1 || k < 1) {
    throw InvalidArgument("layer geometry extents must all be >= 1");
  }
}

std::uint64_t flops_affinity(const LayerGeometry& g) {
  g.validate();
  return (2 * g.n - 1) * g.z() * g.z();
}

std::uint64_t flops_psd(const LayerGeometry& g) {
  g.validate();
  if (g.k < 2) throw InvalidArgument("flops_psd: K must be >= 2");
  return (2 * g.k * g.n - 1) * g.z();
}

std::uint64_t flops_csd(const LayerGeometry& g) {
  g.validate();
  return (2 * g.hp * g.wp - 1) * g.c * g.c;
}

FlopsRatio flops_ratio(const LayerGeometry& g) {
  const double psd = static_cast<double>(flops_psd(g));
  const double affinity = static_cast<double>(flops_affinity(g));
  return {psd / affinity, affinity / psd,
          static_cast<double>(g.k) / static_cast<double>(g.z())};
}

FlopsReport flops_report(const LayerGeometry& g) {
  return {g, flops_affinity(g), flops_psd(g), flops_csd(g), flops_ratio(g)};
}

std::string flops_report_json(const FlopsReport& r) {
  const LayerGeometry& g = r.geometry;
  nlohmann::ordered_json j;
  j["geometry"] = {{"n", g.n}, {"h", g.h},   {"w", g.w}, {"z", g.z()},
                   {"k", g.k}, {"c", g.c},   {"hp", g.hp}, {"wp", g.wp}};
  j["flops"] = {{"affinity", r.affinity}, {"psd", r.psd}, {"csd", r.csd}};
  j["ratio"] = {{"psd_over_affinity", r.ratio.psd_over_affinity},
                {"affinity_over_psd", r.ratio.affinity_over_psd},
                {"k_over_z", r.ratio.k_over_z}};
  return j.dump(2);
}

std::string flops_report_table(const FlopsReport& r) {
  const LayerGeometry& g = r.geometry;
  std::ostringstream os;
  os << "geometry  N=" << g.n << " H=" << g.h << " W=" << g.w << " Z=" << g.z()
     << " K=" << g.k << " C=" << g.c << " H'=" << g.hp << " W'=" << g.wp
     << '\n';
  auto row = [&os](const std::string& name, const std::string& value) {
    os << std::left << std::setw(22) << name << std::right << std::setw(20)
       << value << '\n';
  };
  row("affinity", std::to_string(r.affinity));
  row("psd", std::to_string(r.psd));
  row("csd", std::to_string(r.csd));
  std::ostringstream a, b, c;
  a << std::setprecision(6) << r.ratio.affinity_over_psd;
  b << std::setprecision(6) << r.ratio.psd_over_affinity;
  c << std::setprecision(6) << r.ratio.k_over_z;
  row("affinity / psd", a.str());
  row("psd / affinity", b.str());
  row("K / Z", c.str());
  return os.str();
}

namespace {

thread_local std::uint64_t g_ops = 0;

// Scalar that counts each arithmetic operation it takes part in.
struct Counted {
  double v = 0.0;
};
Counted operator*(Counted a, Counted b) { ++g_ops; return {a.v * b.v}; }
Counted operator+(Counted a, Counted b) { ++g_ops; return {a.v + b.v}; }
Counted operator-(Counted a, Counted b) { ++g_ops; return {a.v - b.v}; }

std::vector<Counted> lift(const Tensor& t) {
  std::vector<Counted> out(t.size());
  for (std::size_t i = 0; i < t.size(); ++i) out[i].v = t[i];
  return out;
}

Tensor lower(const std::vector<Counted>& v, Shape shape) {
  Tensor t(std::move(shape));
  for (std::size_t i = 0; i < v.size(); ++i) t[i] = v[i].v;
  return t;
}

class OpScope {
 public:
  OpScope() : saved_(g_ops) { g_ops = 0; }
  ~OpScope() { g_ops = saved_; }
  std::uint64_t count() const { return g_ops; }

 private:
  std::uint64_t saved_;
};

Tensor random_tensor(Shape shape, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> dist(-1.0, 1.0);
  Tensor t(std::move(shape));
  for (double& x : t.data()) x = dist(rng);
  return t;
}

}  // namespace

std::uint64_t count_psd_ops(const TapSet& taps, double eps) {
  OpScope scope;
  std::size_t h = 0, w = 0;
  for (const Tensor& f : taps.features) {
    if (f.dim(1) * f.dim(2) > h * w) {
      h = f.dim(1);
      w = f.dim(2);
    }
  }
  std::vector<std::vector<Counted>> maps;
  for (const Tensor& f : taps.features) {
    const std::size_t sites = f.dim(1) * f.dim(2);
    const auto in = lift(f);
    std::vector<Counted> map(sites);
    kernels::attention_sum_sq(in.data(), f.dim(0), sites, map.data());
    Tensor plain = lower(map, {f.dim(1), f.dim(2)});
    maps.push_back(lift(l2_normalize(resize_bilinear(plain, h, w), eps)));
  }
  for (const auto& [m, n] : taps.pairs) {
    std::vector<Counted> ra(h * w);
    kernels::subtract(maps[m].data(), maps[n].data(), ra.size(), ra.data());
  }
  return scope.count();
}

std::uint64_t count_affinity_ops(const Tensor& features, double eps) {
  OpScope scope;
  const std::size_t n = features.dim(0);
  const std::size_t z = features.dim(1) * features.dim(2);
  Tensor pixels({z, n});
  for (std::size_t s = 0; s < z; ++s) {
    Tensor v({n});
    for (std::size_t i = 0; i < n; ++i) v[i] = features[i * z + s];
    v = l2_normalize(v, eps);
    for (std::size_t i = 0; i < n; ++i) pixels[s * n + i] = v[i];
  }
  const auto rows = lift(pixels);
  std::vector<Counted> s(z * z);
  kernels::gram_rows(rows.data(), z, n, s.data());
  return scope.count();
}

std::uint64_t count_csd_ops(const Tensor& logits, double tau, double eps) {
  OpScope scope;
  const std::size_t c = logits.dim(0);
  const std::size_t len = logits.size() / c;
  const Tensor q = softmax_over_channels(logits, tau);
  Tensor rows({c, len});
  for (std::size_t r = 0; r < c; ++r) {
    Tensor v({len});
    for (std::size_t i = 0; i < len; ++i) v[i] = q[r * len + i];
    v = l2_normalize(v, eps);
    for (std::size_t i = 0; i < len; ++i) rows[r * len + i] = v[i];
  }
  const auto lifted = lift(rows);
  std::vector<Counted> cm(c * c);
  kernels::gram_rows(lifted.data(), c, len, cm.data());
  return scope.count();
}

std::uint64_t count_psd_ops(const LayerGeometry& g, std::uint64_t seed) {
  g.validate();
  if (g.k < 2) throw InvalidArgument("count_psd_ops: K must be >= 2");
  std::mt19937_64 rng(seed);
  std::vector<std::pair<std::string, Tensor>> outputs;
  for (std::uint64_t i = 0; i < g.k; ++i) {
    outputs.emplace_back("tap" + std::to_string(i),
                         random_tensor({g.n, g.h, g.w}, rng));
  }
  return count_psd_ops(build_taps(std::move(outputs), PairPolicy::kAdjacent));
}

std::uint64_t count_affinity_ops(const LayerGeometry& g, std::uint64_t seed) {
  g.validate();
  std::mt19937_64 rng(seed);
  return count_affinity_ops(random_tensor({g.n, g.h, g.w}, rng));
}

std::uint64_t count_csd_ops(const LayerGeometry& g, std::uint64_t seed) {
  g.validate();
  std::mt19937_64 rng(seed);
  return count_csd_ops(random_tensor({g.c, g.hp, g.wp}, rng));
}

}  // namespace dsd
