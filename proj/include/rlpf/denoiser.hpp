#pragma once

#include "rlpf/core.hpp"

#include <cstddef>
#include <cstdint>
#include <span>
#include <utility>
#include <vector>

namespace rlpf {

RLPF_DEFINE_ERROR(NotCentered)
RLPF_DEFINE_ERROR(StaleCache)

struct DenoiserShape {
  int layers = 2;
  int hidden = 32;
  int features = 4;  // one-hot width F; latent width is 3 + F

  bool operator==(const DenoiserShape&) const = default;
};

// Closed-form parameter count:
//   embedding  H(F+1) + H
//   per layer  7H² + 7H   (edge MLP 2H²+H, H²+H; coordinate MLP H²+H, H; feature MLP 2H²+H, H²+H)
//   readout    FH + F
std::size_t param_count(const DenoiserShape& shape);

// Flat storage for the denoiser weights plus a gradient buffer of equal length.
class PolicyParams {
 public:
  explicit PolicyParams(const DenoiserShape& shape = {});

  const DenoiserShape& shape() const { return shape_; }
  std::size_t size() const { return values_.size(); }

  // Mutable access starts a new parameter generation, invalidating forward caches.
  std::span<double> flat_view() {
    generation_ = next_generation();
    return values_;
  }
  std::span<const double> flat_view() const { return values_; }
  std::span<double> grad_view() { return grads_; }
  std::span<const double> grad_view() const { return grads_; }
  void zero_grad();

  // Hash over the exact bit patterns of the parameter values.
  std::uint64_t digest() const;
  std::uint64_t generation() const { return generation_; }

 private:
  static std::uint64_t next_generation();

  // Eigen picks its vectorized summation order from the pointer alignment, so
  // storage is over-aligned to keep results bit-identical between runs.
  using Storage = std::vector<double, Eigen::aligned_allocator<double>>;

  DenoiserShape shape_;
  Storage values_;
  Storage grads_;
  std::uint64_t generation_ = next_generation();
};

// Uniform(±1/√fan_in) weights, zero biases, and a zero final coordinate layer,
// so a fresh network predicts eps_x = 0.
PolicyParams init_params(int layers, int hidden, const SeedSpec& seed, int features = 4);

struct DenoiserOutput {
  Coords eps_x;      // N×3, zero on padding, zero centroid over real atoms
  RowMatrix eps_h;   // N×F, zero on padding
};

// Activations recorded by forward() for the matching backward() call.
struct ForwardCache {
  struct Layer {
    RowMatrix x, h;                 // inputs to the layer, n×3 and n×H
    RowMatrix r;                    // E×3 pair differences x_a - x_b
    Eigen::VectorXd dist, d2, gate; // E
    RowMatrix u, du, m, dm, sq, dsq;// E×H activations and SiLU slopes
    RowMatrix hin, s, ds;           // n×2H, n×H, n×H
  };

  DenoiserShape shape;
  std::uint64_t params_generation = 0;
  int capacity = 0;
  std::vector<int> rows;                    // active rows, ascending
  std::vector<std::pair<int, int>> pairs;   // ordered (a, b), a != b, compact indices
  RowMatrix input;                          // n×(F+1)
  std::vector<Layer> layers;
  RowMatrix h_out;                          // n×H
};

// Noise prediction for latent z (N×(3+F)) at time fraction t/T.
// Throws NotCentered when the masked-in coordinate centroid exceeds 1e-6.
DenoiserOutput forward(const PolicyParams& params, const RowMatrix& z, double t_frac,
                       const Mask& mask, ForwardCache* cache = nullptr);

// Accumulates ∂loss/∂θ into `grad`, given ∂loss/∂output in `upstream`.
// Throws StaleCache if the cache was produced by different parameters.
void backward(const PolicyParams& params, const ForwardCache& cache, const DenoiserOutput& upstream,
              std::span<double> grad);

std::vector<double> backward(const PolicyParams& params, const ForwardCache& cache,
                             const DenoiserOutput& upstream);

}  // namespace rlpf
