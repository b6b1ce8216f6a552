#pragma once

#include <cstdint>
#include <vector>

#include "adaslot/config.hpp"
#include "adaslot/params.hpp"
#include "adaslot/tensor.hpp"

namespace adaslot {

// Source of the keep mask Z in a forward pass.
enum class KeepRule {
  kOnes,    // warm-start / fixed-slot model: every slot kept
  kSample,  // hard straight-through Gumbel-Softmax sample
  kSoft,    // ablation: Z = pi[:,1] directly, no sampling
  kMap,     // evaluation: Z = 1[pi[:,1] > 0.5], untracked
};

// Per-image stochastic inputs.  Drawn by the caller from labeled streams so
// the forward pass itself is a pure function.
struct SlotNoise {
  std::vector<double> eps;     // k_max * d_slot, N(0,1) slot-init noise
  std::vector<double> gumbel;  // k_max * 2, Gumbel(0,1) keep noise
};

// strm should already encode purpose/step/image, e.g.
// substream(stream("train.noise"), step, image).
SlotNoise draw_noise(const RunConfig& cfg, std::uint64_t seed,
                     std::uint64_t strm);

struct Forward {
  Tensor slots;  // (K, D) final slot states
  Tensor attn;   // (K, N) final attention, softmax over slots per token
  Tensor pi;     // (K, 2) keep distribution rows, [:,1] = keep probability
  Tensor z;      // (K,) keep mask on the graph
  Tensor alpha;  // (K, H, W) unnormalized mask logits
  Tensor rgb;    // (K, H, W, 3) per-slot reconstructions
  Tensor masks;  // (K, H, W) post-strategy mixture weights
  Tensor xhat;   // (H, W, 3) mixture reconstruction
  Tensor recon;  // scalar, mean squared error
  Tensor reg;    // scalar, sum of keep probabilities
};

// Creates every parameter (Xavier-uniform weights, zero biases, unit
// layernorm gains, zero keep-head output layer, coordinate-ramp head on the
// positional tables).  image_hw is the square image side in pixels.
void init_params(ParamStore& store, const RunConfig& cfg, std::int64_t image_hw,
                 std::uint64_t seed);

// Full per-image pass: encode, slot attention, keep head, Z, decode, mix.
// `image` is row-major (H, W, 3) with H = W = image_hw.
Forward forward_image(StepGraph& g, const RunConfig& cfg, std::int64_t image_hw,
                      const std::vector<double>& image, const SlotNoise& noise,
                      KeepRule rule);

// ---- stages, exposed for focused tests ----

// Patch embedding + positional embedding, then layernormed two-layer MLP.
Tensor encode(StepGraph& g, const RunConfig& cfg, std::int64_t image_hw,
              const std::vector<double>& image);  // (N, d_feat)

// Gaussian slot initialization mu + exp(clamped log-std) * eps.
Tensor init_slots(StepGraph& g, const RunConfig& cfg,
                  const std::vector<double>& eps);  // (K, d_slot)

struct SlotsOut {
  Tensor slots;  // (K, D)
  Tensor attn;   // (K, N), from the final iteration
};
SlotsOut slot_attention(StepGraph& g, const RunConfig& cfg,
                        const Tensor& features, const Tensor& init);

// Two-layer MLP D -> 4D -> 2 with row softmax.
Tensor keep_head(StepGraph& g, const RunConfig& cfg, const Tensor& slots);

// Hard one-hot rows with straight-through gradients.  Returns (K, 2); the
// keep mask is column 1.  tau <= 0 raises ContractError.
Tensor sample_mask(const Tensor& pi, const std::vector<double>& gumbel,
                   double tau);
// Ablation: Z = pi[:,1] as a differentiable (K,) tensor.
Tensor soft_mask(const Tensor& pi);
// Sum of keep probabilities (the expected-slot-count regularizer).
Tensor reg_loss(const Tensor& pi);

// Strategy-dependent slot replacement applied before decoding.
Tensor apply_strategy(StepGraph& g, const RunConfig& cfg, const Tensor& slots,
                      const Tensor& z);

struct Decoded {
  Tensor alpha;  // (K, H, W)
  Tensor rgb;    // (K, H, W, 3)
};
// Spatial-broadcast mixture decoder at full image resolution.
Decoded decode(StepGraph& g, const RunConfig& cfg, std::int64_t image_hw,
               const Tensor& slots);

struct Mixture {
  Tensor masks;  // (K, H, W)
  Tensor xhat;   // (H, W, 3)
};
Mixture mix(const RunConfig& cfg, const Decoded& dec, const Tensor& z);

// ---- value-level helpers ----
std::vector<double> keep_probs(const Tensor& pi);       // pi[:,1]
std::vector<double> map_mask_values(const Tensor& pi);  // 1[pi[:,1] > 0.5]

}  // namespace adaslot
