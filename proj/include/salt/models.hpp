#pragma once

// Transformer components: tubelet embedding, rotary-attention encoder
// blocks, the latent predictor, the pixel decoder head, and the attentive
// probe. Parameter structs and forwards are templated on the scalar type so
// whole models can be re-instantiated in double precision for
// finite-difference gradient verification.

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "salt/rng.hpp"
#include "salt/tensor.hpp"

namespace salt {

// One line of architecture: the encoder family plus the predictor, decoder,
// and probe heads that attach to it. Every parameter shape in the project is
// derivable from this struct alone.
struct ModelConfig {
  std::string name = "custom";

  int width = 64;
  int depth = 4;
  int heads = 4;
  int mlp_dim = 0;  // 0 -> mlp_ratio * width

  int tubelet_t = 2, tubelet_h = 4, tubelet_w = 4;
  int grid_t = 8, grid_h = 8, grid_w = 8;
  int channels = 1;

  int predictor_width = 48;
  int predictor_depth = 3;
  int predictor_heads = 4;
  int predictor_out_dim = 64;  // = teacher width
  int predictor_mlp_dim = 0;

  int decoder_width = 48;
  int decoder_depth = 2;
  int decoder_heads = 4;
  int decoder_mlp_dim = 0;

  int probe_classes = 4;
  int mlp_ratio = 4;
  double eps = 1e-6;

  int64_t payload() const {
    return static_cast<int64_t>(tubelet_t) * tubelet_h * tubelet_w * channels;
  }
  int64_t tokens() const { return static_cast<int64_t>(grid_t) * grid_h * grid_w; }
  int encoder_mlp() const { return mlp_dim > 0 ? mlp_dim : mlp_ratio * width; }
  int predictor_mlp() const {
    return predictor_mlp_dim > 0 ? predictor_mlp_dim : mlp_ratio * predictor_width;
  }
  int decoder_mlp() const {
    return decoder_mlp_dim > 0 ? decoder_mlp_dim : mlp_ratio * decoder_width;
  }

  void validate() const;
  std::string to_json() const;
  static ModelConfig from_json(const std::string& text);
};

// Named architectures: the paper-scale encoder table (vit-b/l/h/g/gg, with
// vit-G accepted as an alias for vit-gg) and the desk-scale pair
// tiny-l/tiny-h that the tests and acceptance runs instantiate.
ModelConfig registry_config(const std::string& name);
std::vector<std::string> registry_names();

// Exact learnable-scalar counts, including the embedding/input projections,
// computed analytically so the billion-parameter configs never have to be
// instantiated.
int64_t encoder_parameter_count(const ModelConfig& cfg);
int64_t predictor_parameter_count(const ModelConfig& cfg);
int64_t decoder_parameter_count(const ModelConfig& cfg);
int64_t probe_parameter_count(const ModelConfig& cfg);

// ---- parameter collections ----------------------------------------------

template <typename T>
struct BlockParamsT {
  TensorT<T> ln1_g, ln1_b;
  TensorT<T> w_qkv, b_qkv;  // width x 3*width, fused
  TensorT<T> w_proj, b_proj;
  TensorT<T> ln2_g, ln2_b;
  TensorT<T> w_mlp1, b_mlp1, w_mlp2, b_mlp2;
};

// The encoder tower; doubles as the (frozen) teacher. A frozen collection
// rejects gradient attachment: forwards must run tape-less and
// mark_trainable() refuses.
template <typename T>
struct EncoderParamsT {
  int width = 0, heads = 0;
  int64_t payload = 0;
  double eps = 1e-6;
  bool frozen = false;

  TensorT<T> w_embed, b_embed;  // payload x width
  std::vector<BlockParamsT<T>> blocks;
  TensorT<T> lnf_g, lnf_b;

  std::vector<std::pair<std::string, TensorT<T>>> named() const;
  std::vector<TensorT<T>> tensors() const;
  void mark_trainable();
};

// Predictor and decoder share one structure: project incoming latents to the
// head width, fill the missing positions with a learned mask token, run
// blocks over the union, and project the target rows out.
template <typename T>
struct UnionHeadParamsT {
  int width = 0, heads = 0;
  int64_t in_dim = 0, out_dim = 0;
  double eps = 1e-6;

  TensorT<T> w_in, b_in;
  TensorT<T> mask_token;  // 1 x width
  std::vector<BlockParamsT<T>> blocks;
  TensorT<T> lnf_g, lnf_b;
  TensorT<T> w_out, b_out;

  std::vector<std::pair<std::string, TensorT<T>>> named() const;
  std::vector<TensorT<T>> tensors() const;
  void mark_trainable();
};

template <typename T>
struct PredictorParamsT : UnionHeadParamsT<T> {};

template <typename T>
struct DecoderParamsT : UnionHeadParamsT<T> {};

// Attentive probe: three self-attention blocks, then one cross-attention
// block with a learnable query, final norm, and a linear classifier.
template <typename T>
struct ProbeParamsT {
  int width = 0, heads = 0, classes = 0;
  double eps = 1e-6;

  std::vector<BlockParamsT<T>> blocks;  // 3 self-attention blocks
  TensorT<T> query;                     // 1 x width
  TensorT<T> ln_kv_g, ln_kv_b;
  TensorT<T> w_k, b_k, w_v, b_v, w_o, b_o;
  TensorT<T> ln2_g, ln2_b;
  TensorT<T> w_mlp1, b_mlp1, w_mlp2, b_mlp2;
  TensorT<T> lnf_g, lnf_b;
  TensorT<T> w_cls, b_cls;

  std::vector<std::pair<std::string, TensorT<T>>> named() const;
  std::vector<TensorT<T>> tensors() const;
  void mark_trainable();
};

using BlockParams = BlockParamsT<float>;
using EncoderParams = EncoderParamsT<float>;
using TeacherParams = EncoderParamsT<float>;  // frozen = true
using PredictorParams = PredictorParamsT<float>;
using DecoderParams = DecoderParamsT<float>;
using ProbeParams = ProbeParamsT<float>;

// ---- construction --------------------------------------------------------
// Truncated-normal(0.02) weights clipped at 2 sigma, zero biases, unit norm
// gains, and zero-initialized residual-branch output projections. All draws
// come from `rng` in a fixed order, so (config, seed) pins every value.

template <typename T>
EncoderParamsT<T> make_encoder(const ModelConfig& cfg, Rng& rng);
template <typename T>
EncoderParamsT<T> make_teacher(const ModelConfig& cfg, Rng& rng);  // frozen
template <typename T>
PredictorParamsT<T> make_predictor(const ModelConfig& cfg, Rng& rng);
template <typename T>
DecoderParamsT<T> make_decoder(const ModelConfig& cfg, Rng& rng);
template <typename T>
ProbeParamsT<T> make_probe(const ModelConfig& cfg, Rng& rng);

// ---- forwards -------------------------------------------------------------
// All forwards take batch-stacked row matrices plus one RowSpan per clip.
// positions[i] is the grid coordinate of row i. Outputs are checked for
// non-finite values (Numeric error). Frozen params reject a non-null tape.

// [rows x payload] -> [rows x width]; rows may be any gathered token subset.
template <typename T>
TensorT<T> tubelet_embed(TapeT<T>* tape, const EncoderParamsT<T>& p, const TensorT<T>& tokens);

// Pre-norm transformer with 3-axis rotary attention and a final layer norm.
template <typename T>
TensorT<T> encoder_forward(TapeT<T>* tape, const EncoderParamsT<T>& p, const TensorT<T>& embedded,
                           const std::vector<Pos3>& positions, const std::vector<RowSpan>& spans);

// Projects context latents to head width, composes them with mask tokens at
// the target positions, runs the blocks over each clip's union, and returns
// the target rows projected to out_dim. Targets come back clip by clip in
// the order of target_positions.
template <typename T>
TensorT<T> predictor_forward(TapeT<T>* tape, const PredictorParamsT<T>& p,
                             const TensorT<T>& context_latents,
                             const std::vector<Pos3>& context_positions,
                             const std::vector<RowSpan>& context_spans,
                             const std::vector<Pos3>& target_positions,
                             const std::vector<RowSpan>& target_spans);

// Same union scheme with pixel-payload output: the Stage-1 reconstruction
// head.
template <typename T>
TensorT<T> decoder_forward(TapeT<T>* tape, const DecoderParamsT<T>& p,
                           const TensorT<T>& context_latents,
                           const std::vector<Pos3>& context_positions,
                           const std::vector<RowSpan>& context_spans,
                           const std::vector<Pos3>& target_positions,
                           const std::vector<RowSpan>& target_spans);

// [rows x width] latents for a batch of clips -> [clips x classes] logits.
// Callers pass detached latents; the probe never owns backbone gradients.
template <typename T>
TensorT<T> attentive_probe_forward(TapeT<T>* tape, const ProbeParamsT<T>& p,
                                   const TensorT<T>& latents,
                                   const std::vector<RowSpan>& spans);

}  // namespace salt
