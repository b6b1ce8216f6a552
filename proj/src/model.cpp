#include "adaslot/model.hpp"

#include <cmath>
#include <limits>
#include <string>

#include "adaslot/errors.hpp"
#include "adaslot/rng.hpp"

namespace adaslot {
namespace {

constexpr double kLnEps = 1e-5;
constexpr double kAttnEps = 1e-8;    // attention-row renormalization floor
constexpr double kLogStdLo = -10.0;  // slot-init log-std clamp
constexpr double kLogStdHi = 3.0;
constexpr double kLogitClamp = 30.0;  // keep-logit clamp before Gumbel noise

std::vector<double> xavier(std::uint64_t seed, const std::string& name,
                           std::int64_t fin, std::int64_t fout,
                           std::int64_t count) {
  const double lim = std::sqrt(6.0 / static_cast<double>(fin + fout));
  const std::uint64_t strm =
      rng::substream(rng::stream("init"), rng::stream(name));
  std::vector<double> v(count);
  for (std::int64_t i = 0; i < count; ++i)
    v[i] = rng::uniform(seed, strm, static_cast<std::uint64_t>(i), -lim, lim);
  return v;
}

// Positional table: dims 0/1 hold normalized (x, y) in [-1, 1], the rest
// start as small noise so they stay learnable without drowning the ramp.
std::vector<double> pos_table(std::uint64_t seed, const std::string& name,
                              std::int64_t side, std::int64_t dim) {
  const std::uint64_t strm =
      rng::substream(rng::stream("init"), rng::stream(name));
  std::vector<double> v(side * side * dim);
  for (std::int64_t r = 0; r < side; ++r)
    for (std::int64_t c = 0; c < side; ++c) {
      double* row = &v[(r * side + c) * dim];
      row[0] = 2.0 * (static_cast<double>(c) + 0.5) / static_cast<double>(side) - 1.0;
      row[1] = 2.0 * (static_cast<double>(r) + 0.5) / static_cast<double>(side) - 1.0;
      for (std::int64_t d = 2; d < dim; ++d)
        row[d] = rng::uniform(seed, strm,
                              static_cast<std::uint64_t>((r * side + c) * dim + d),
                              -0.1, 0.1);
    }
  return v;
}

Tensor affine_ln(StepGraph& g, const Tensor& x, const std::string& prefix) {
  return add(mul(layer_norm(x, 1, kLnEps), g.use(prefix + ".g")),
             g.use(prefix + ".b"));
}

}  // namespace

void init_params(ParamStore& store, const RunConfig& cfg, std::int64_t image_hw,
                 std::uint64_t seed) {
  cfg.validate();
  if (image_hw < 1 || image_hw % cfg.patch_size != 0)
    throw ContractError("init_params: patch_size " + std::to_string(cfg.patch_size) +
                        " must divide image size " + std::to_string(image_hw));
  const std::int64_t p = cfg.patch_size, ns = image_hw / p;
  const std::int64_t pd = p * p * 3, n_tok = ns * ns, npix = image_hw * image_hw;
  const std::int64_t df = cfg.d_feat, eh = cfg.enc_hidden, d = cfg.d_slot;
  const std::int64_t dh = cfg.dec_hidden, dp = cfg.dec_pos;

  auto wparam = [&](const std::string& name, std::int64_t fin, std::int64_t fout) {
    store.create(name, {fin, fout}, xavier(seed, name, fin, fout, fin * fout));
  };
  auto zparam = [&](const std::string& name, Shape shape) {
    store.create(name, shape, std::vector<double>(numel(shape), 0.0));
  };
  auto lnparam = [&](const std::string& prefix, std::int64_t n) {
    store.create(prefix + ".g", {n}, std::vector<double>(n, 1.0));
    zparam(prefix + ".b", {n});
  };

  wparam("enc.embed.w", pd, df);
  zparam("enc.embed.b", {df});
  store.create("enc.pos", {n_tok, df}, pos_table(seed, "enc.pos", ns, df));
  lnparam("enc.ln", df);
  wparam("enc.mlp.w1", df, eh);
  zparam("enc.mlp.b1", {eh});
  wparam("enc.mlp.w2", eh, df);
  zparam("enc.mlp.b2", {df});

  store.create("slot.mu", {d}, xavier(seed, "slot.mu", 1, d, d));
  store.create("slot.logstd", {d}, xavier(seed, "slot.logstd", 1, d, d));
  lnparam("slot.ln_in", df);
  lnparam("slot.ln_slot", d);
  wparam("slot.q.w", d, d);
  wparam("slot.k.w", df, d);
  wparam("slot.v.w", df, d);
  store.create("slot.gru.w", {d, 3 * d}, xavier(seed, "slot.gru.w", d, d, d * 3 * d));
  store.create("slot.gru.u", {d, 3 * d}, xavier(seed, "slot.gru.u", d, d, d * 3 * d));
  zparam("slot.gru.b", {3 * d});
  lnparam("slot.ln_mlp", d);
  wparam("slot.mlp.w1", d, 4 * d);
  zparam("slot.mlp.b1", {4 * d});
  wparam("slot.mlp.w2", 4 * d, d);
  zparam("slot.mlp.b2", {d});

  wparam("keep.w1", d, 4 * d);
  zparam("keep.b1", {4 * d});
  // zero output layer: every row of pi starts at [0.5, 0.5]
  zparam("keep.w2", {4 * d, 2});
  zparam("keep.b2", {2});

  store.create("dec.pos", {npix, dp}, pos_table(seed, "dec.pos", image_hw, dp));
  wparam("dec.w1s", d, dh);
  wparam("dec.w1p", dp, dh);
  zparam("dec.b1", {dh});
  wparam("dec.w2", dh, dh);
  zparam("dec.b2", {dh});
  wparam("dec.w3", dh, dh);
  zparam("dec.b3", {dh});
  wparam("dec.w4", dh, 4);
  zparam("dec.b4", {4});
  zparam("dec.smask", {d});
}

SlotNoise draw_noise(const RunConfig& cfg, std::uint64_t seed,
                     std::uint64_t strm) {
  SlotNoise n;
  const std::int64_t ke = cfg.k_max * cfg.d_slot, kg = cfg.k_max * 2;
  n.eps.resize(ke);
  n.gumbel.resize(kg);
  const std::uint64_t se = rng::substream(strm, rng::stream("slot.eps"));
  const std::uint64_t sg = rng::substream(strm, rng::stream("keep.gumbel"));
  for (std::int64_t i = 0; i < ke; ++i)
    n.eps[i] = rng::normal(seed, se, static_cast<std::uint64_t>(i));
  for (std::int64_t i = 0; i < kg; ++i)
    n.gumbel[i] = rng::gumbel(seed, sg, static_cast<std::uint64_t>(i));
  return n;
}

Tensor encode(StepGraph& g, const RunConfig& cfg, std::int64_t image_hw,
              const std::vector<double>& image) {
  const std::int64_t p = cfg.patch_size, hw = image_hw;
  if (hw % p != 0)
    throw ContractError("encode: patch_size must divide image size");
  const std::int64_t ns = hw / p, n_tok = ns * ns, pd = p * p * 3;
  if (static_cast<std::int64_t>(image.size()) != hw * hw * 3)
    throw ShapeError("encode: image size mismatch, expected " +
                     std::to_string(hw * hw * 3) + " values");
  std::vector<double> patches(n_tok * pd);
  for (std::int64_t pr = 0; pr < ns; ++pr)
    for (std::int64_t pc = 0; pc < ns; ++pc) {
      double* dst = &patches[(pr * ns + pc) * pd];
      for (std::int64_t py = 0; py < p; ++py) {
        const double* src = &image[((pr * p + py) * hw + pc * p) * 3];
        for (std::int64_t i = 0; i < p * 3; ++i) dst[py * p * 3 + i] = src[i];
      }
    }
  auto x = Tensor::constant({n_tok, pd}, std::move(patches));
  auto e = add(add(matmul(x, g.use("enc.embed.w")), g.use("enc.embed.b")),
               g.use("enc.pos"));
  auto h = bias_relu(matmul(affine_ln(g, e, "enc.ln"), g.use("enc.mlp.w1")),
                     g.use("enc.mlp.b1"));
  return add(matmul(h, g.use("enc.mlp.w2")), g.use("enc.mlp.b2"));
}

Tensor init_slots(StepGraph& g, const RunConfig& cfg,
                  const std::vector<double>& eps) {
  const std::int64_t k = cfg.k_max, d = cfg.d_slot;
  if (static_cast<std::int64_t>(eps.size()) != k * d)
    throw ShapeError("init_slots: eps must have k_max*d_slot values");
  auto sigma = exp(clamp(g.use("slot.logstd"), kLogStdLo, kLogStdHi));
  return add(g.use("slot.mu"), mul(Tensor::constant({k, d}, eps), sigma));
}

SlotsOut slot_attention(StepGraph& g, const RunConfig& cfg,
                        const Tensor& features, const Tensor& init) {
  const std::int64_t k_max = cfg.k_max, d = cfg.d_slot;
  if (features.shape().size() != 2 || features.shape()[1] != cfg.d_feat)
    throw ShapeError("slot_attention: features must be (N, d_feat)");
  if (init.shape() != Shape{k_max, d})
    throw ShapeError("slot_attention: init must be (k_max, d_slot)");
  auto fn = affine_ln(g, features, "slot.ln_in");
  auto kT = transpose(matmul(fn, g.use("slot.k.w")));  // (D, N)
  auto v = matmul(fn, g.use("slot.v.w"));              // (N, D)
  const double sc = 1.0 / std::sqrt(static_cast<double>(d));

  Tensor s = init, attn;
  for (std::int64_t it = 0; it < cfg.sa_iters; ++it) {
    auto q = matmul(affine_ln(g, s, "slot.ln_slot"), g.use("slot.q.w"));
    attn = softmax(scale(matmul(q, kT), sc), 0);  // compete over slots
    auto den = add_scalar(sum(attn, 1), kAttnEps);
    auto u = matmul(div(attn, reshape(den, {k_max, 1})), v);  // (K, D)
    // GRU cell: update/reset/candidate gates from fused projections
    auto gu = matmul(u, g.use("slot.gru.w"));
    auto gs = matmul(s, g.use("slot.gru.u"));
    auto b = g.use("slot.gru.b");
    auto zg = sigmoid(add(add(slice(gu, 1, 0, d), slice(gs, 1, 0, d)),
                          slice(b, 0, 0, d)));
    auto rg = sigmoid(add(add(slice(gu, 1, d, d), slice(gs, 1, d, d)),
                          slice(b, 0, d, d)));
    auto ng = tanh(add(add(slice(gu, 1, 2 * d, d), mul(rg, slice(gs, 1, 2 * d, d))),
                       slice(b, 0, 2 * d, d)));
    s = add(ng, mul(zg, sub(s, ng)));
    // residual MLP with pre-layernorm
    auto mh = bias_relu(matmul(affine_ln(g, s, "slot.ln_mlp"), g.use("slot.mlp.w1")),
                        g.use("slot.mlp.b1"));
    s = add(s, add(matmul(mh, g.use("slot.mlp.w2")), g.use("slot.mlp.b2")));
  }
  return {s, attn};
}

Tensor keep_head(StepGraph& g, const RunConfig& cfg, const Tensor& slots) {
  if (slots.shape() != Shape{cfg.k_max, cfg.d_slot})
    throw ShapeError("keep_head: slots must be (k_max, d_slot)");
  auto h = bias_relu(matmul(slots, g.use("keep.w1")), g.use("keep.b1"));
  return softmax(add(matmul(h, g.use("keep.w2")), g.use("keep.b2")), 1);
}

Tensor sample_mask(const Tensor& pi, const std::vector<double>& gumbel,
                   double tau) {
  if (tau <= 0.0)
    throw ContractError("sample_mask: tau must be > 0, got " + std::to_string(tau));
  const Shape& s = pi.shape();
  if (s.size() != 2 || s[1] != 2)
    throw ShapeError("sample_mask: pi must be (K, 2), got " + shape_str(s));
  if (static_cast<std::int64_t>(gumbel.size()) != s[0] * 2)
    throw ShapeError("sample_mask: need K*2 gumbel draws");
  auto lp = clamp(log(clamp(pi, 1e-13, 1.0)), -kLogitClamp, kLogitClamp);
  auto soft = softmax(scale(add(lp, Tensor::constant(s, gumbel)), 1.0 / tau), 1);
  std::vector<double> hard(soft.size(), 0.0);
  for (std::int64_t r = 0; r < s[0]; ++r) {
    const double* row = &soft.values()[r * 2];
    hard[r * 2 + (row[0] >= row[1] ? 0 : 1)] = 1.0;
  }
  return straight_through(std::move(hard), soft);
}

Tensor soft_mask(const Tensor& pi) {
  const Shape& s = pi.shape();
  if (s.size() != 2 || s[1] != 2)
    throw ShapeError("soft_mask: pi must be (K, 2), got " + shape_str(s));
  return reshape(slice(pi, 1, 1, 1), {s[0]});
}

Tensor reg_loss(const Tensor& pi) {
  const Shape& s = pi.shape();
  if (s.size() != 2 || s[1] != 2)
    throw ShapeError("reg_loss: pi must be (K, 2), got " + shape_str(s));
  return sum(slice(pi, 1, 1, 1));
}

Tensor apply_strategy(StepGraph& g, const RunConfig& cfg, const Tensor& slots,
                      const Tensor& z) {
  const std::int64_t k = cfg.k_max, d = cfg.d_slot;
  if (z.shape() != Shape{k}) throw ShapeError("apply_strategy: z must be (k_max,)");
  switch (cfg.decoder_strategy) {
    case Strategy::kZeroMask:
      return slots;  // suppression happens in the mixture weights
    case Strategy::kZeroSlot:
      return mul(slots, reshape(z, {k, 1}));
    case Strategy::kLearnableSlot: {
      auto zr = reshape(z, {k, 1});
      auto repl = mul(sub(Tensor::full({k, 1}, 1.0), zr),
                      reshape(g.use("dec.smask"), {1, d}));
      return add(mul(slots, zr), repl);
    }
  }
  throw ConfigError("apply_strategy: bad strategy enum");
}

Decoded decode(StepGraph& g, const RunConfig& cfg, std::int64_t image_hw,
               const Tensor& slots) {
  const std::int64_t k = cfg.k_max, dh = cfg.dec_hidden;
  const std::int64_t npix = image_hw * image_hw;
  if (slots.shape() != Shape{k, cfg.d_slot})
    throw ShapeError("decode: slots must be (k_max, d_slot)");
  auto pos = g.use("dec.pos");
  if (pos.shape()[0] != npix)
    throw ShapeError("decode: positional table holds " +
                     std::to_string(pos.shape()[0]) + " positions, image needs " +
                     std::to_string(npix));
  // first layer split into slot and position parts; equivalent to the MLP on
  // the concatenated [slot, position] input, with the position half shared
  auto slot_part = add(matmul(slots, g.use("dec.w1s")), g.use("dec.b1"));
  auto pos_part = matmul(pos, g.use("dec.w1p"));
  auto h1 = relu(add(reshape(slot_part, {k, 1, dh}), reshape(pos_part, {1, npix, dh})));
  auto h2 = bias_relu(matmul(reshape(h1, {k * npix, dh}), g.use("dec.w2")),
                      g.use("dec.b2"));
  auto h3 = bias_relu(matmul(h2, g.use("dec.w3")), g.use("dec.b3"));
  auto out = reshape(add(matmul(h3, g.use("dec.w4")), g.use("dec.b4")),
                     {k, npix, 4});
  Decoded dec;
  dec.rgb = reshape(sigmoid(slice(out, 2, 0, 3)), {k, image_hw, image_hw, 3});
  dec.alpha = reshape(slice(out, 2, 3, 1), {k, image_hw, image_hw});
  return dec;
}

Mixture mix(const RunConfig& cfg, const Decoded& dec, const Tensor& z) {
  const Shape& as = dec.alpha.shape();
  if (as.size() != 3) throw ShapeError("mix: alpha must be (K, H, W)");
  const std::int64_t k = as[0], h = as[1], w = as[2];
  if (z.shape() != Shape{k}) throw ShapeError("mix: z must be (K,)");
  Mixture mx;
  if (cfg.decoder_strategy == Strategy::kZeroMask) {
    // m-tilde_i = Z_i m_i / (sum_l Z_l m_l + delta), evaluated on
    // exponentials shifted by the per-pixel max over *kept* alphas.  The
    // shift keeps the denominator in [1, K] so delta retains its intended
    // scale, guarantees sum_i m-tilde in [1 - delta, 1), and removes
    // dropped slots exactly: their terms are zeroed before entering any
    // sum, so x-hat is bitwise independent of dropped-slot decoder output.
    const auto& av = dec.alpha.values();
    const auto& zv = z.values();
    const std::int64_t npix = h * w;
    std::vector<double> shift(static_cast<std::size_t>(npix),
                              -std::numeric_limits<double>::infinity());
    bool any_kept = false;
    for (std::int64_t i = 0; i < k; ++i) {
      if (zv[static_cast<std::size_t>(i)] == 0.0) continue;
      any_kept = true;
      for (std::int64_t p = 0; p < npix; ++p) {
        shift[static_cast<std::size_t>(p)] =
            std::max(shift[static_cast<std::size_t>(p)],
                     av[static_cast<std::size_t>(i * npix + p)]);
      }
    }
    if (!any_kept) {  // transient all-dropped state: any finite shift works
      for (std::int64_t i = 0; i < k; ++i) {
        for (std::int64_t p = 0; p < npix; ++p) {
          shift[static_cast<std::size_t>(p)] =
              std::max(shift[static_cast<std::size_t>(p)],
                       av[static_cast<std::size_t>(i * npix + p)]);
        }
      }
    }
    // upper clamp keeps exp() finite for dropped slots far above the kept
    // max (their values are discarded anyway); kept slots sit at <= 0
    auto exps = exp(clamp(sub(dec.alpha, Tensor::constant({1, h, w}, shift)),
                          -std::numeric_limits<double>::infinity(), 700.0));
    auto num = mul(exps, reshape(z, {k, 1, 1}));
    mx.masks = div(num, add_scalar(sum(num, 0), cfg.delta));
  } else {
    mx.masks = softmax(dec.alpha, 0);
  }
  mx.xhat = sum(mul(reshape(mx.masks, {k, h, w, 1}), dec.rgb), 0);
  return mx;
}

Forward forward_image(StepGraph& g, const RunConfig& cfg, std::int64_t image_hw,
                      const std::vector<double>& image, const SlotNoise& noise,
                      KeepRule rule) {
  Forward f;
  auto feats = encode(g, cfg, image_hw, image);
  auto so = slot_attention(g, cfg, feats, init_slots(g, cfg, noise.eps));
  f.slots = so.slots;
  f.attn = so.attn;
  f.pi = keep_head(g, cfg, f.slots);
  const std::int64_t k = cfg.k_max;
  switch (rule) {
    case KeepRule::kOnes:
      f.z = Tensor::full({k}, 1.0);
      break;
    case KeepRule::kSample:
      f.z = reshape(slice(sample_mask(f.pi, noise.gumbel, cfg.tau), 1, 1, 1), {k});
      break;
    case KeepRule::kSoft:
      f.z = soft_mask(f.pi);
      break;
    case KeepRule::kMap:
      f.z = Tensor::constant({k}, map_mask_values(f.pi));
      break;
  }
  auto dec = decode(g, cfg, image_hw, apply_strategy(g, cfg, f.slots, f.z));
  f.alpha = dec.alpha;
  f.rgb = dec.rgb;
  auto mx = mix(cfg, dec, f.z);
  f.masks = mx.masks;
  f.xhat = mx.xhat;
  f.recon = mean(square(sub(f.xhat, Tensor::constant({image_hw, image_hw, 3}, image))));
  f.reg = reg_loss(f.pi);
  return f;
}

std::vector<double> keep_probs(const Tensor& pi) {
  const Shape& s = pi.shape();
  if (s.size() != 2 || s[1] != 2)
    throw ShapeError("keep_probs: pi must be (K, 2), got " + shape_str(s));
  std::vector<double> p(s[0]);
  for (std::int64_t i = 0; i < s[0]; ++i) p[i] = pi.values()[2 * i + 1];
  return p;
}

std::vector<double> map_mask_values(const Tensor& pi) {
  auto p = keep_probs(pi);
  for (double& x : p) x = x > 0.5 ? 1.0 : 0.0;
  return p;
}

}  // namespace adaslot
