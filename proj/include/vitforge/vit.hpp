#pragma once

#include <cmath>
#include <cstdint>
#include <random>
#include <string>
#include <utility>
#include <vector>

#include "vitforge/kernels.hpp"
#include "vitforge/tape.hpp"
#include "vitforge/tensor.hpp"

namespace vitforge {

struct ViTConfig {
  std::size_t image_size = 224;
  std::size_t patch_size = 16;
  std::size_t dim = 768;
  std::size_t heads = 12;
  std::size_t depth = 12;
  std::size_t mlp_dim = 3072;
  std::size_t num_classes = 1000;
  std::size_t channels = 3;

  std::size_t grid() const { return image_size / patch_size; }
  std::size_t num_patches() const { return grid() * grid(); }
  std::size_t tokens() const { return num_patches() + 1; }
  std::size_t patch_len() const { return patch_size * patch_size * channels; }
  std::size_t head_dim() const { return dim / heads; }

  void validate() const {
    if (!image_size || !patch_size || !dim || !heads || !depth || !mlp_dim ||
        !num_classes || !channels) {
      throw ConfigError("vit config: all extents must be positive");
    }
    if (image_size % patch_size != 0) {
      throw ConfigError("vit config: image_size " + std::to_string(image_size) +
                        " not divisible by patch_size " +
                        std::to_string(patch_size));
    }
    if (dim % heads != 0) {
      throw ConfigError("vit config: dim " + std::to_string(dim) +
                        " not divisible by heads " + std::to_string(heads));
    }
    if (channels != 3) throw ConfigError("vit config: channels must be 3");
  }

  bool operator==(const ViTConfig&) const = default;

  // ViT-Base with 16x16 patches at 224x224.
  static ViTConfig base_16_224(std::size_t num_classes) {
    ViTConfig c;
    c.num_classes = num_classes;
    return c;
  }

  // Desk-scale geometry used by tests and smoke runs.
  static ViTConfig tiny(std::size_t num_classes) {
    ViTConfig c;
    c.image_size = 8;
    c.patch_size = 4;
    c.dim = 16;
    c.heads = 2;
    c.depth = 2;
    c.mlp_dim = 32;
    c.num_classes = num_classes;
    return c;
  }
};

// Parameters of one encoder block. Leaf is Tensor<T> for storage, Var<T> when
// bound to a tape.
template <typename Leaf>
struct EncoderLayerSet {
  Leaf ln1_gamma, ln1_beta;
  Leaf qkv_weight, qkv_bias;
  Leaf attn_out_weight, attn_out_bias;
  Leaf ln2_gamma, ln2_beta;
  Leaf fc1_weight, fc1_bias;
  Leaf fc2_weight, fc2_bias;
};

template <typename Leaf>
struct ViTParamSet {
  Leaf cls_token, pos_embed;
  Leaf patch_proj_weight, patch_proj_bias;
  std::vector<EncoderLayerSet<Leaf>> layers;
  Leaf final_norm_gamma, final_norm_beta;
  Leaf head_weight, head_bias;
};

template <typename T>
using ViTParams = ViTParamSet<Tensor<T>>;

template <typename T>
using ViTVars = ViTParamSet<Var<T>>;

// Visits every parameter in canonical manifest order, passing the canonical
// name followed by the matching member of each set. All sets must have the
// same number of layers.
template <typename Fn, typename First, typename... Rest>
void for_each_param(Fn&& fn, First& first, Rest&... rest) {
  fn("cls_token", first.cls_token, rest.cls_token...);
  fn("pos_embed", first.pos_embed, rest.pos_embed...);
  fn("patch_proj.weight", first.patch_proj_weight, rest.patch_proj_weight...);
  fn("patch_proj.bias", first.patch_proj_bias, rest.patch_proj_bias...);
  for (std::size_t i = 0; i < first.layers.size(); ++i) {
    const std::string p = "layers." + std::to_string(i) + ".";
    auto& l = first.layers[i];
    fn(p + "ln1.gamma", l.ln1_gamma, rest.layers[i].ln1_gamma...);
    fn(p + "ln1.beta", l.ln1_beta, rest.layers[i].ln1_beta...);
    fn(p + "qkv.weight", l.qkv_weight, rest.layers[i].qkv_weight...);
    fn(p + "qkv.bias", l.qkv_bias, rest.layers[i].qkv_bias...);
    fn(p + "attn_out.weight", l.attn_out_weight, rest.layers[i].attn_out_weight...);
    fn(p + "attn_out.bias", l.attn_out_bias, rest.layers[i].attn_out_bias...);
    fn(p + "ln2.gamma", l.ln2_gamma, rest.layers[i].ln2_gamma...);
    fn(p + "ln2.beta", l.ln2_beta, rest.layers[i].ln2_beta...);
    fn(p + "fc1.weight", l.fc1_weight, rest.layers[i].fc1_weight...);
    fn(p + "fc1.bias", l.fc1_bias, rest.layers[i].fc1_bias...);
    fn(p + "fc2.weight", l.fc2_weight, rest.layers[i].fc2_weight...);
    fn(p + "fc2.bias", l.fc2_bias, rest.layers[i].fc2_bias...);
  }
  fn("final_norm.gamma", first.final_norm_gamma, rest.final_norm_gamma...);
  fn("final_norm.beta", first.final_norm_beta, rest.final_norm_beta...);
  fn("head.weight", first.head_weight, rest.head_weight...);
  fn("head.bias", first.head_bias, rest.head_bias...);
}

struct ManifestEntry {
  std::string name;
  Shape shape;
};

// Every parameter name with the shape the config dictates, in canonical order.
inline std::vector<ManifestEntry> manifest(const ViTConfig& cfg) {
  const std::size_t d = cfg.dim;
  std::vector<ManifestEntry> m = {
      {"cls_token", {1, d}},
      {"pos_embed", {cfg.tokens(), d}},
      {"patch_proj.weight", {cfg.patch_len(), d}},
      {"patch_proj.bias", {d}},
  };
  for (std::size_t i = 0; i < cfg.depth; ++i) {
    const std::string p = "layers." + std::to_string(i) + ".";
    m.push_back({p + "ln1.gamma", {d}});
    m.push_back({p + "ln1.beta", {d}});
    m.push_back({p + "qkv.weight", {d, 3 * d}});
    m.push_back({p + "qkv.bias", {3 * d}});
    m.push_back({p + "attn_out.weight", {d, d}});
    m.push_back({p + "attn_out.bias", {d}});
    m.push_back({p + "ln2.gamma", {d}});
    m.push_back({p + "ln2.beta", {d}});
    m.push_back({p + "fc1.weight", {d, cfg.mlp_dim}});
    m.push_back({p + "fc1.bias", {cfg.mlp_dim}});
    m.push_back({p + "fc2.weight", {cfg.mlp_dim, d}});
    m.push_back({p + "fc2.bias", {d}});
  }
  m.push_back({"final_norm.gamma", {d}});
  m.push_back({"final_norm.beta", {d}});
  m.push_back({"head.weight", {d, cfg.num_classes}});
  m.push_back({"head.bias", {cfg.num_classes}});
  return m;
}

inline bool is_head_param(const std::string& name) {
  return name.rfind("head.", 0) == 0;
}

// Zero-filled parameters with gammas set to one.
template <typename T>
ViTParams<T> zero_params(const ViTConfig& cfg) {
  cfg.validate();
  ViTParams<T> p;
  p.layers.resize(cfg.depth);
  auto entries = manifest(cfg);
  std::size_t i = 0;
  for_each_param(
      [&](const std::string& name, Tensor<T>& t) {
        const bool gamma = name.ends_with(".gamma");
        t = Tensor<T>(entries[i++].shape, gamma ? T{1} : T{0});
      },
      p);
  return p;
}

// Head weights and bias drawn uniformly from +-1/sqrt(dim).
template <typename T>
void reinit_head(ViTParams<T>& p, const ViTConfig& cfg, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  const double bound = 1.0 / std::sqrt(static_cast<double>(cfg.dim));
  std::uniform_real_distribution<double> u(-bound, bound);
  p.head_weight = Tensor<T>({cfg.dim, cfg.num_classes});
  p.head_bias = Tensor<T>({cfg.num_classes});
  for (T& v : p.head_weight.data()) v = static_cast<T>(u(rng));
  for (T& v : p.head_bias.data()) v = static_cast<T>(u(rng));
}

// Fresh parameters: normal(0, 0.02) for embeddings and projection weights,
// zero biases, unit gammas, and a uniform head.
template <typename T>
ViTParams<T> init_params(const ViTConfig& cfg, std::uint64_t seed) {
  ViTParams<T> p = zero_params<T>(cfg);
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> normal(0.0, 0.02);
  for_each_param(
      [&](const std::string& name, Tensor<T>& t) {
        if (is_head_param(name)) return;
        if (name.ends_with(".weight") || name == "cls_token" ||
            name == "pos_embed") {
          for (T& v : t.data()) v = static_cast<T>(normal(rng));
        }
      },
      p);
  reinit_head(p, cfg, rng());
  return p;
}

template <typename T>
std::size_t param_count(const ViTParams<T>& p) {
  std::size_t n = 0;
  for_each_param([&](const std::string&, const Tensor<T>& t) { n += t.size(); },
                 p);
  return n;
}

template <typename T>
ViTVars<T> bind_params(Tape<T>& tape, const ViTParams<T>& params,
                       bool trainable) {
  ViTVars<T> vars;
  vars.layers.resize(params.layers.size());
  for_each_param(
      [&](const std::string&, const Tensor<T>& t, Var<T>& v) {
        v = tape.bind(t, trainable);
      },
      params, vars);
  return vars;
}

// Collects d(loss)/d(param) for every bound parameter after tape.backward().
template <typename T>
ViTParams<T> gradients(const Tape<T>& tape, const ViTVars<T>& vars) {
  ViTParams<T> g;
  g.layers.resize(vars.layers.size());
  for_each_param(
      [&](const std::string&, const Var<T>& v, Tensor<T>& out) {
        out = tape.grad_of(v);
      },
      vars, g);
  return g;
}

// Splits one Ch x S x S image into N rows of length P*P*Ch. Patches follow the
// row-major patch grid; inside a patch the order is channel, row, column.
template <typename T>
Tensor<T> patchify(const Tensor<T>& image, std::size_t patch) {
  if (image.rank() != 3 || image.dim(1) != image.dim(2)) {
    throw DimensionError("patchify expects a square Ch x S x S image, got " +
                         shape_str(image.shape()));
  }
  const std::size_t ch = image.dim(0), side = image.dim(1);
  if (patch == 0 || side % patch != 0) {
    throw DimensionError("patchify: side " + std::to_string(side) +
                         " not divisible by patch " + std::to_string(patch));
  }
  const std::size_t grid = side / patch, len = patch * patch * ch;
  Tensor<T> out({grid * grid, len});
  for (std::size_t gy = 0; gy < grid; ++gy)
    for (std::size_t gx = 0; gx < grid; ++gx) {
      T* row = out.data().data() + (gy * grid + gx) * len;
      for (std::size_t c = 0; c < ch; ++c)
        for (std::size_t py = 0; py < patch; ++py)
          for (std::size_t px = 0; px < patch; ++px)
            *row++ = image[(c * side + gy * patch + py) * side + gx * patch + px];
    }
  return out;
}

// Patches for a B x Ch x S x S batch, stacked to (B * N) x (P*P*Ch).
template <typename T>
Tensor<T> patchify_batch(const Tensor<T>& images, const ViTConfig& cfg) {
  if (images.rank() != 4 || images.dim(1) != cfg.channels ||
      images.dim(2) != cfg.image_size || images.dim(3) != cfg.image_size) {
    throw DimensionError("forward expects B x " + std::to_string(cfg.channels) +
                         " x " + std::to_string(cfg.image_size) + " x " +
                         std::to_string(cfg.image_size) + " images, got " +
                         shape_str(images.shape()));
  }
  const std::size_t batch = images.dim(0), per = cfg.channels *
                                                 cfg.image_size * cfg.image_size;
  const std::size_t n = cfg.num_patches(), len = cfg.patch_len();
  Tensor<T> out({batch * n, len});
  for (std::size_t b = 0; b < batch; ++b) {
    Tensor<T> img({cfg.channels, cfg.image_size, cfg.image_size},
                  std::vector<T>(images.data().begin() + b * per,
                                 images.data().begin() + (b + 1) * per));
    Tensor<T> p = patchify(img, cfg.patch_size);
    std::copy(p.data().begin(), p.data().end(),
              out.data().begin() + b * n * len);
  }
  return out;
}

// Token sequence z0 for `batch` images from their stacked patches.
template <typename T>
Var<T> embed(Tape<T>& tape, const ViTVars<T>& p, Var<T> patches,
             std::size_t batch) {
  Var<T> proj = ops::linear(tape, patches, p.patch_proj_weight, p.patch_proj_bias);
  return ops::assemble_tokens(tape, proj, p.cls_token, p.pos_embed, batch);
}

// Pre-norm block: u = z + MHA(ln1(z)); out = u + FFN(ln2(u)).
template <typename T>
Var<T> encoder_layer(Tape<T>& tape, const EncoderLayerSet<Var<T>>& l, Var<T> z,
                     std::size_t batch, std::size_t tokens, std::size_t heads) {
  Var<T> h = ops::layer_norm(tape, z, l.ln1_gamma, l.ln1_beta);
  Var<T> qkv = ops::linear(tape, h, l.qkv_weight, l.qkv_bias);
  Var<T> attn = ops::multi_head_attention(tape, qkv, batch, tokens, heads);
  Var<T> u = ops::add(tape, z, ops::linear(tape, attn, l.attn_out_weight,
                                           l.attn_out_bias));
  Var<T> h2 = ops::layer_norm(tape, u, l.ln2_gamma, l.ln2_beta);
  Var<T> f = ops::gelu(tape, ops::linear(tape, h2, l.fc1_weight, l.fc1_bias));
  return ops::add(tape, u, ops::linear(tape, f, l.fc2_weight, l.fc2_bias));
}

// Encoder stack, final norm and CLS selection: batch x D. z0 is
// (batch * tokens) x D.
template <typename T>
Var<T> encode_cls(Tape<T>& tape, const ViTVars<T>& p, Var<T> z0,
                  std::size_t batch, std::size_t tokens, std::size_t heads) {
  Var<T> z = z0;
  for (const auto& l : p.layers) z = encoder_layer(tape, l, z, batch, tokens, heads);
  z = ops::layer_norm(tape, z, p.final_norm_gamma, p.final_norm_beta);
  return ops::select_rows(tape, z, tokens, 0);
}

template <typename T>
Var<T> encode_tokens(Tape<T>& tape, const ViTVars<T>& p, Var<T> z0,
                     std::size_t batch, std::size_t tokens, std::size_t heads) {
  Var<T> cls = encode_cls(tape, p, z0, batch, tokens, heads);
  return ops::linear(tape, cls, p.head_weight, p.head_bias);
}

// Logits B x C_out for a B x Ch x S x S batch.
template <typename T>
Var<T> forward(Tape<T>& tape, const ViTVars<T>& p, const ViTConfig& cfg,
               const Tensor<T>& images) {
  const std::size_t batch = images.rank() == 4 ? images.dim(0) : 0;
  Var<T> patches = tape.leaf(patchify_batch(images, cfg));
  Var<T> z0 = embed(tape, p, patches, batch);
  return encode_tokens(tape, p, z0, batch, cfg.tokens(), cfg.heads);
}

template <typename T>
Tensor<T> forward(const ViTConfig& cfg, const ViTParams<T>& params,
                  const Tensor<T>& images) {
  Tape<T> tape;
  auto vars = bind_params(tape, params, false);
  return tape.value(forward(tape, vars, cfg, images));
}

// Final-norm CLS embedding (the head input), B x D.
template <typename T>
Tensor<T> cls_embedding(const ViTConfig& cfg, const ViTParams<T>& params,
                        const Tensor<T>& images) {
  Tape<T> tape;
  auto vars = bind_params(tape, params, false);
  const std::size_t batch = images.rank() == 4 ? images.dim(0) : 0;
  Var<T> z0 = embed(tape, vars, tape.leaf(patchify_batch(images, cfg)), batch);
  return tape.value(encode_cls(tape, vars, z0, batch, cfg.tokens(), cfg.heads));
}

// Logits from an already-embedded token batch, (batch * tokens) x D.
template <typename T>
Tensor<T> forward_from_tokens(const ViTConfig& cfg, const ViTParams<T>& params,
                              const Tensor<T>& tokens, std::size_t batch) {
  Tape<T> tape;
  auto vars = bind_params(tape, params, false);
  Var<T> z0 = tape.leaf(tokens);
  return tape.value(
      encode_tokens(tape, vars, z0, batch, cfg.tokens(), cfg.heads));
}

// Tensor-level embedding of one image's patches, N x (P*P*Ch) -> (N+1) x D.
template <typename T>
Tensor<T> embed(const ViTParams<T>& params, const Tensor<T>& patches) {
  Tape<T> tape;
  auto vars = bind_params(tape, params, false);
  return tape.value(embed(tape, vars, tape.leaf(patches), 1));
}

// Tensor-level single encoder block on a tokens x D sequence.
template <typename T>
Tensor<T> encoder_layer(const EncoderLayerSet<Tensor<T>>& layer,
                        const Tensor<T>& z, std::size_t heads) {
  if (z.rank() != 2) throw DimensionError("encoder_layer expects tokens x D");
  Tape<T> tape;
  ViTParams<T> holder;
  holder.layers.push_back(layer);
  auto vars = bind_params(tape, holder, false);
  return tape.value(encoder_layer(tape, vars.layers[0], tape.leaf(z), 1,
                                  z.dim(0), heads));
}

// Argmax per row; ties resolve to the lowest class index.
template <typename T>
std::vector<std::int64_t> predict(const Tensor<T>& logits) {
  if (logits.rank() != 2) throw DimensionError("predict expects B x C logits");
  const std::size_t rows = logits.dim(0), cols = logits.dim(1);
  std::vector<std::int64_t> out(rows);
  for (std::size_t i = 0; i < rows; ++i) {
    std::size_t best = 0;
    for (std::size_t c = 1; c < cols; ++c)
      if (logits.at(i, c) > logits.at(i, best)) best = c;
    out[i] = static_cast<std::int64_t>(best);
  }
  return out;
}

}  // namespace vitforge
