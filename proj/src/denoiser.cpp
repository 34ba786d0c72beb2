#include "rlpf/denoiser.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstring>

namespace rlpf {

namespace {

using ConstMap = Eigen::Map<const RowMatrix>;
using Map = Eigen::Map<RowMatrix>;
using ConstVec = Eigen::Map<const Eigen::RowVectorXd>;
using Vec = Eigen::Map<Eigen::RowVectorXd>;

// Offsets of every tensor inside the flat parameter vector.
struct Layout {
  struct LayerOffsets {
    std::size_t A, B, c, b1, We2, be2, Wx1, bx1, wx2, Wh1, bh1, Wh2, bh2;
  };
  std::size_t W_in, b_in, W_out, b_out, total;
  std::vector<LayerOffsets> layer;

  explicit Layout(const DenoiserShape& s) {
    const std::size_t H = s.hidden, F = s.features;
    std::size_t at = 0;
    auto take = [&at](std::size_t n) {
      const std::size_t here = at;
      at += n;
      return here;
    };
    W_in = take(H * (F + 1));
    b_in = take(H);
    for (int l = 0; l < s.layers; ++l) {
      LayerOffsets o{};
      o.A = take(H * H);
      o.B = take(H * H);
      o.c = take(H);
      o.b1 = take(H);
      o.We2 = take(H * H);
      o.be2 = take(H);
      o.Wx1 = take(H * H);
      o.bx1 = take(H);
      o.wx2 = take(H);
      o.Wh1 = take(H * 2 * H);
      o.bh1 = take(H);
      o.Wh2 = take(H * H);
      o.bh2 = take(H);
      layer.push_back(o);
    }
    W_out = take(F * H);
    b_out = take(F);
    total = at;
  }
};

inline double sigmoid(double x) { return 1.0 / (1.0 + std::exp(-x)); }

// y = silu(pre), dy = silu'(pre)
void silu(const RowMatrix& pre, RowMatrix& y, RowMatrix& dy) {
  y.resize(pre.rows(), pre.cols());
  dy.resize(pre.rows(), pre.cols());
  const double* p = pre.data();
  double* yp = y.data();
  double* dp = dy.data();
  for (Eigen::Index i = 0; i < pre.size(); ++i) {
    const double sg = sigmoid(p[i]);
    yp[i] = p[i] * sg;
    dp[i] = sg * (1.0 + p[i] * (1.0 - sg));
  }
}

}  // namespace

std::size_t param_count(const DenoiserShape& s) {
  const std::size_t H = s.hidden, F = s.features;
  return H * (F + 1) + H + s.layers * (7 * H * H + 7 * H) + F * H + F;
}

PolicyParams::PolicyParams(const DenoiserShape& shape)
    : shape_(shape), values_(param_count(shape), 0.0), grads_(param_count(shape), 0.0) {
  if (shape.layers < 1 || shape.hidden < 1 || shape.features < 1)
    throw Error("PolicyParams: invalid shape");
}

std::uint64_t PolicyParams::next_generation() {
  static std::atomic<std::uint64_t> counter{1};
  return counter.fetch_add(1, std::memory_order_relaxed);
}

void PolicyParams::zero_grad() { std::fill(grads_.begin(), grads_.end(), 0.0); }

std::uint64_t PolicyParams::digest() const {
  std::uint64_t h = mix64(values_.size());
  for (double v : values_) {
    std::uint64_t bits;
    std::memcpy(&bits, &v, sizeof bits);
    h = mix64(h ^ bits);
  }
  return h;
}

PolicyParams init_params(int layers, int hidden, const SeedSpec& seed, int features) {
  if (layers < 1) throw Error("init_params: L must be >= 1");
  if (hidden < 4) throw Error("init_params: H must be >= 4");
  PolicyParams p(DenoiserShape{layers, hidden, features});
  const Layout lay(p.shape());
  auto v = p.flat_view();
  Rng rng(seed);
  auto fill = [&](std::size_t offset, std::size_t count, std::size_t fan_in) {
    const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
    for (std::size_t i = 0; i < count; ++i) v[offset + i] = (2.0 * rng.uniform() - 1.0) * bound;
  };
  const std::size_t H = hidden, F = features;
  fill(lay.W_in, H * (F + 1), F + 1);
  for (const auto& o : lay.layer) {
    // A, B and c form one linear layer over [h_i, h_j, d²]
    fill(o.A, H * H, 2 * H + 1);
    fill(o.B, H * H, 2 * H + 1);
    fill(o.c, H, 2 * H + 1);
    fill(o.We2, H * H, H);
    fill(o.Wx1, H * H, H);
    // wx2 stays zero
    fill(o.Wh1, H * 2 * H, 2 * H);
    fill(o.Wh2, H * H, H);
  }
  fill(lay.W_out, F * H, H);
  return p;
}

DenoiserOutput forward(const PolicyParams& params, const RowMatrix& z, double t_frac,
                       const Mask& mask, ForwardCache* cache) {
  const DenoiserShape& shape = params.shape();
  const int H = shape.hidden, F = shape.features;
  const int N = static_cast<int>(mask.size());
  if (z.rows() != N || z.cols() != 3 + F) throw Error("denoiser forward: latent shape mismatch");

  std::vector<int> rows;
  for (int i = 0; i < N; ++i)
    if (mask[i]) rows.push_back(i);
  const int n = static_cast<int>(rows.size());
  if (n == 0) throw EmptyMolecule("denoiser forward: no atoms");

  Eigen::RowVector3d com = Eigen::RowVector3d::Zero();
  double scale = 1.0;
  for (int r : rows) {
    com += z.block<1, 3>(r, 0);
    scale = std::max(scale, z.block<1, 3>(r, 0).cwiseAbs().maxCoeff());
  }
  com /= n;
  if (com.cwiseAbs().maxCoeff() > 1e-6 * scale) throw NotCentered("denoiser forward: coordinates not centered");

  const Layout lay(shape);
  const double* w = params.flat_view().data();

  ForwardCache local;
  ForwardCache& c = cache ? *cache : local;
  c.shape = shape;
  c.params_generation = params.generation();
  c.capacity = N;
  c.rows = rows;
  c.pairs.clear();
  for (int a = 0; a < n; ++a)
    for (int b = 0; b < n; ++b)
      if (a != b) c.pairs.emplace_back(a, b);
  const int E = static_cast<int>(c.pairs.size());

  c.input.resize(n, F + 1);
  RowMatrix x0(n, 3);
  for (int a = 0; a < n; ++a) {
    c.input.row(a).head(F) = z.row(rows[a]).tail(F);
    c.input(a, F) = t_frac;
    x0.row(a) = z.row(rows[a]).head(3);
  }

  RowMatrix h = c.input * ConstMap(w + lay.W_in, H, F + 1).transpose();
  h.rowwise() += ConstVec(w + lay.b_in, H);
  RowMatrix x = x0;

  c.layers.resize(shape.layers);
  for (int l = 0; l < shape.layers; ++l) {
    const auto& o = lay.layer[l];
    auto& L = c.layers[l];
    L.x = x;
    L.h = h;

    const RowMatrix P = h * ConstMap(w + o.A, H, H).transpose();
    const RowMatrix Q = h * ConstMap(w + o.B, H, H).transpose();
    const ConstVec cvec(w + o.c, H), b1(w + o.b1, H);

    L.r.resize(E, 3);
    L.dist.resize(E);
    L.d2.resize(E);
    RowMatrix pre1(E, H);
    for (int e = 0; e < E; ++e) {
      const auto [a, b] = c.pairs[e];
      L.r.row(e) = x.row(a) - x.row(b);
      L.d2[e] = L.r.row(e).squaredNorm();
      L.dist[e] = std::sqrt(L.d2[e]);
      pre1.row(e) = P.row(a) + Q.row(b) + L.d2[e] * cvec + b1;
    }
    silu(pre1, L.u, L.du);

    RowMatrix pre2 = L.u * ConstMap(w + o.We2, H, H).transpose();
    pre2.rowwise() += ConstVec(w + o.be2, H);
    silu(pre2, L.m, L.dm);

    RowMatrix pq = L.m * ConstMap(w + o.Wx1, H, H).transpose();
    pq.rowwise() += ConstVec(w + o.bx1, H);
    silu(pq, L.sq, L.dsq);
    L.gate = L.sq * ConstVec(w + o.wx2, H).transpose();

    RowMatrix agg = RowMatrix::Zero(n, H);
    RowMatrix x_next = x;
    for (int e = 0; e < E; ++e) {
      const int a = c.pairs[e].first;
      x_next.row(a) += L.r.row(e) * (L.gate[e] / (L.dist[e] + 1.0));
      agg.row(a) += L.m.row(e);
    }

    L.hin.resize(n, 2 * H);
    L.hin << h, agg;
    RowMatrix preh = L.hin * ConstMap(w + o.Wh1, H, 2 * H).transpose();
    preh.rowwise() += ConstVec(w + o.bh1, H);
    silu(preh, L.s, L.ds);
    RowMatrix h_next = h + L.s * ConstMap(w + o.Wh2, H, H).transpose();
    h_next.rowwise() += ConstVec(w + o.bh2, H);

    h = std::move(h_next);
    x = std::move(x_next);
  }
  c.h_out = h;

  RowMatrix eh = h * ConstMap(w + lay.W_out, F, H).transpose();
  eh.rowwise() += ConstVec(w + lay.b_out, F);

  RowMatrix ex = x - x0;
  const Eigen::RowVector3d shift = ex.colwise().sum() / n;
  ex.rowwise() -= shift;

  DenoiserOutput out{Coords::Zero(N, 3), RowMatrix::Zero(N, F)};
  for (int a = 0; a < n; ++a) {
    out.eps_x.row(rows[a]) = ex.row(a);
    out.eps_h.row(rows[a]) = eh.row(a);
  }
  return out;
}

void backward(const PolicyParams& params, const ForwardCache& c, const DenoiserOutput& upstream,
              std::span<double> grad) {
  const DenoiserShape& shape = params.shape();
  if (c.shape != shape || c.params_generation != params.generation())
    throw StaleCache("denoiser backward: cache was produced by different parameters");
  if (grad.size() != params.size()) throw Error("denoiser backward: gradient length mismatch");
  const int H = shape.hidden, F = shape.features;
  const int n = static_cast<int>(c.rows.size());
  const int E = static_cast<int>(c.pairs.size());
  if (upstream.eps_x.rows() != c.capacity || upstream.eps_h.rows() != c.capacity ||
      upstream.eps_h.cols() != F)
    throw StaleCache("denoiser backward: upstream shape does not match cache");

  const Layout lay(shape);
  const double* w = params.flat_view().data();
  // accumulate into aligned scratch (see PolicyParams::Storage), then add
  thread_local std::vector<double, Eigen::aligned_allocator<double>> scratch;
  scratch.assign(grad.size(), 0.0);
  double* g = scratch.data();

  RowMatrix gx(n, 3), geh(n, F);
  for (int a = 0; a < n; ++a) {
    gx.row(a) = upstream.eps_x.row(c.rows[a]);
    geh.row(a) = upstream.eps_h.row(c.rows[a]);
  }
  // eps_x = Π(x_L - x_0) with Π the centroid projector (symmetric)
  const Eigen::RowVector3d gmean = gx.colwise().sum() / n;
  gx.rowwise() -= gmean;

  Map(g + lay.W_out, F, H) += geh.transpose() * c.h_out;
  Vec(g + lay.b_out, F) += geh.colwise().sum();
  RowMatrix gh = geh * ConstMap(w + lay.W_out, F, H);

  for (int l = shape.layers - 1; l >= 0; --l) {
    const auto& o = lay.layer[l];
    const auto& L = c.layers[l];

    RowMatrix gh_prev = gh;
    RowMatrix gx_prev = gx;

    // feature MLP with residual
    Vec(g + o.bh2, H) += gh.colwise().sum();
    Map(g + o.Wh2, H, H) += gh.transpose() * L.s;
    const RowMatrix gpreh = (gh * ConstMap(w + o.Wh2, H, H)).cwiseProduct(L.ds);
    Map(g + o.Wh1, H, 2 * H) += gpreh.transpose() * L.hin;
    Vec(g + o.bh1, H) += gpreh.colwise().sum();
    const RowMatrix gin = gpreh * ConstMap(w + o.Wh1, H, 2 * H);
    gh_prev += gin.leftCols(H);

    // coordinate path: x'_a = x_a + Σ_b r_ab · gate_ab / (|r_ab| + 1)
    RowMatrix gm(E, H);
    Eigen::VectorXd ggate(E);
    RowMatrix gr(E, 3);
    for (int e = 0; e < E; ++e) {
      const int a = c.pairs[e].first;
      gm.row(e) = gin.row(a).tail(H);
      const double inv = 1.0 / (L.dist[e] + 1.0);
      const double dot = gx.row(a).dot(L.r.row(e));
      ggate[e] = dot * inv;
      gr.row(e) = gx.row(a) * (L.gate[e] * inv);
      if (L.dist[e] > 0.0) gr.row(e) -= L.r.row(e) * (L.gate[e] * inv * inv * dot / L.dist[e]);
    }
    Vec(g + o.wx2, H) += ggate.transpose() * L.sq;
    const RowMatrix gq = (ggate * ConstVec(w + o.wx2, H)).cwiseProduct(L.dsq);
    Map(g + o.Wx1, H, H) += gq.transpose() * L.m;
    Vec(g + o.bx1, H) += gq.colwise().sum();
    gm += gq * ConstMap(w + o.Wx1, H, H);

    // edge MLP
    const RowMatrix gp = gm.cwiseProduct(L.dm);
    Map(g + o.We2, H, H) += gp.transpose() * L.u;
    Vec(g + o.be2, H) += gp.colwise().sum();
    const RowMatrix ga = (gp * ConstMap(w + o.We2, H, H)).cwiseProduct(L.du);
    Vec(g + o.c, H) += L.d2.transpose() * ga;
    Vec(g + o.b1, H) += ga.colwise().sum();
    const Eigen::VectorXd gd2 = ga * ConstVec(w + o.c, H).transpose();

    RowMatrix ga_src = RowMatrix::Zero(n, H), ga_dst = RowMatrix::Zero(n, H);
    for (int e = 0; e < E; ++e) {
      const auto [a, b] = c.pairs[e];
      gr.row(e) += L.r.row(e) * (2.0 * gd2[e]);
      gx_prev.row(a) += gr.row(e);
      gx_prev.row(b) -= gr.row(e);
      ga_src.row(a) += ga.row(e);
      ga_dst.row(b) += ga.row(e);
    }
    Map(g + o.A, H, H) += ga_src.transpose() * L.h;
    Map(g + o.B, H, H) += ga_dst.transpose() * L.h;
    gh_prev += ga_src * ConstMap(w + o.A, H, H) + ga_dst * ConstMap(w + o.B, H, H);

    gh = std::move(gh_prev);
    gx = std::move(gx_prev);
  }

  Map(g + lay.W_in, H, F + 1) += gh.transpose() * c.input;
  Vec(g + lay.b_in, H) += gh.colwise().sum();
  for (std::size_t i = 0; i < grad.size(); ++i) grad[i] += scratch[i];
}

std::vector<double> backward(const PolicyParams& params, const ForwardCache& cache,
                             const DenoiserOutput& upstream) {
  std::vector<double> grad(params.size(), 0.0);
  backward(params, cache, upstream, grad);
  return grad;
}

}  // namespace rlpf
