#include "salt/models.hpp"

#include <json.hpp>

#include <cmath>

#include "salt/common.hpp"

namespace salt {

using ordered_json = nlohmann::ordered_json;

namespace {

constexpr double kRopeBase = 10000.0;
constexpr double kInitStd = 0.02;

void check_tower(const char* what, int width, int depth, int heads, bool rotary) {
  check(width >= 1, ErrorKind::Config, what, " width must be >= 1, got ", width);
  check(depth >= 0, ErrorKind::Config, what, " depth must be >= 0, got ", depth);
  check(heads >= 1, ErrorKind::Config, what, " heads must be >= 1, got ", heads);
  check(width % heads == 0, ErrorKind::Config, what, " width ", width,
        " not divisible by heads ", heads);
  if (rotary)
    check(width / heads >= 6, ErrorKind::Config, what, " head dim ", width / heads,
          " too small for 3-axis rotary pairs (need >= 6)");
}

// Learnable scalars of one pre-norm block at width w, mlp dim m.
int64_t block_scalars(int64_t w, int64_t m) {
  return 2 * w                  // ln1
         + w * 3 * w + 3 * w    // fused qkv
         + w * w + w            // attention out proj
         + 2 * w                // ln2
         + w * m + m            // mlp in
         + m * w + w;           // mlp out
}

int64_t union_head_scalars(int64_t in, int64_t w, int64_t out, int64_t depth, int64_t m) {
  return in * w + w             // input projection
         + w                    // mask token
         + depth * block_scalars(w, m)
         + 2 * w                // final ln
         + w * out + out;       // output projection
}

}  // namespace

void ModelConfig::validate() const {
  check_tower("encoder", width, depth, heads, /*rotary=*/true);
  check_tower("predictor", predictor_width, predictor_depth, predictor_heads, /*rotary=*/true);
  check_tower("decoder", decoder_width, decoder_depth, decoder_heads, /*rotary=*/true);
  check(predictor_out_dim >= 1, ErrorKind::Config, "predictor_out_dim must be >= 1, got ",
        predictor_out_dim);
  check(tubelet_t >= 1 && tubelet_h >= 1 && tubelet_w >= 1, ErrorKind::Config,
        "tubelet dims must be >= 1");
  check(grid_t >= 1 && grid_h >= 1 && grid_w >= 1, ErrorKind::Config, "grid dims must be >= 1");
  check(channels >= 1, ErrorKind::Config, "channels must be >= 1, got ", channels);
  check(probe_classes >= 2, ErrorKind::Config, "probe_classes must be >= 2, got ", probe_classes);
  check(mlp_ratio >= 1, ErrorKind::Config, "mlp_ratio must be >= 1, got ", mlp_ratio);
  check(eps > 0.0, ErrorKind::Config, "eps must be positive, got ", eps);
}

std::string ModelConfig::to_json() const {
  ordered_json j;
  j["name"] = name;
  j["width"] = width;
  j["depth"] = depth;
  j["heads"] = heads;
  j["mlp_dim"] = mlp_dim;
  j["tubelet_t"] = tubelet_t;
  j["tubelet_h"] = tubelet_h;
  j["tubelet_w"] = tubelet_w;
  j["grid_t"] = grid_t;
  j["grid_h"] = grid_h;
  j["grid_w"] = grid_w;
  j["channels"] = channels;
  j["predictor_width"] = predictor_width;
  j["predictor_depth"] = predictor_depth;
  j["predictor_heads"] = predictor_heads;
  j["predictor_out_dim"] = predictor_out_dim;
  j["predictor_mlp_dim"] = predictor_mlp_dim;
  j["decoder_width"] = decoder_width;
  j["decoder_depth"] = decoder_depth;
  j["decoder_heads"] = decoder_heads;
  j["decoder_mlp_dim"] = decoder_mlp_dim;
  j["probe_classes"] = probe_classes;
  j["mlp_ratio"] = mlp_ratio;
  j["eps"] = eps;
  return j.dump(2);
}

ModelConfig ModelConfig::from_json(const std::string& text) {
  ordered_json j;
  try {
    j = ordered_json::parse(text);
  } catch (const std::exception& e) {
    fail(ErrorKind::Config, "model config is not valid JSON: ", e.what());
  }
  ModelConfig c;
  for (const auto& [key, value] : j.items()) {
    if (key == "name") c.name = value.get<std::string>();
    else if (key == "width") c.width = value.get<int>();
    else if (key == "depth") c.depth = value.get<int>();
    else if (key == "heads") c.heads = value.get<int>();
    else if (key == "mlp_dim") c.mlp_dim = value.get<int>();
    else if (key == "tubelet_t") c.tubelet_t = value.get<int>();
    else if (key == "tubelet_h") c.tubelet_h = value.get<int>();
    else if (key == "tubelet_w") c.tubelet_w = value.get<int>();
    else if (key == "grid_t") c.grid_t = value.get<int>();
    else if (key == "grid_h") c.grid_h = value.get<int>();
    else if (key == "grid_w") c.grid_w = value.get<int>();
    else if (key == "channels") c.channels = value.get<int>();
    else if (key == "predictor_width") c.predictor_width = value.get<int>();
    else if (key == "predictor_depth") c.predictor_depth = value.get<int>();
    else if (key == "predictor_heads") c.predictor_heads = value.get<int>();
    else if (key == "predictor_out_dim") c.predictor_out_dim = value.get<int>();
    else if (key == "predictor_mlp_dim") c.predictor_mlp_dim = value.get<int>();
    else if (key == "decoder_width") c.decoder_width = value.get<int>();
    else if (key == "decoder_depth") c.decoder_depth = value.get<int>();
    else if (key == "decoder_heads") c.decoder_heads = value.get<int>();
    else if (key == "decoder_mlp_dim") c.decoder_mlp_dim = value.get<int>();
    else if (key == "probe_classes") c.probe_classes = value.get<int>();
    else if (key == "mlp_ratio") c.mlp_ratio = value.get<int>();
    else if (key == "eps") c.eps = value.get<double>();
    else fail(ErrorKind::Config, "unknown model config key '", key, "'");
  }
  c.validate();
  return c;
}

ModelConfig registry_config(const std::string& name) {
  std::string key = name == "vit-G" ? "vit-gg" : name;

  ModelConfig c;
  c.name = key;
  if (key == "tiny-l" || key == "tiny-h") {
    // Desk scale: 32x32 single-channel clips, 4x4x2 tubelets, tiny-l teacher.
    if (key == "tiny-h") {
      c.width = 96;
      c.depth = 6;
    }
    c.predictor_out_dim = 64;
    return c;
  }

  // Paper scale: 16 frames at 224x224x3, 16x16x2 tubelets -> 8x14x14 grid.
  c.tubelet_h = 16;
  c.tubelet_w = 16;
  c.channels = 3;
  c.grid_h = 14;
  c.grid_w = 14;
  c.predictor_width = 384;
  c.predictor_depth = 12;
  c.predictor_heads = 16;
  c.predictor_out_dim = 1024;  // ViT-L teacher unless overridden below
  c.decoder_width = 512;
  c.decoder_depth = 4;
  c.decoder_heads = 8;
  c.probe_classes = 400;
  if (key == "vit-b") {
    c.width = 768;
    c.depth = 12;
    c.heads = 12;
    c.predictor_out_dim = 768;  // ViT-B students keep a ViT-B teacher
  } else if (key == "vit-l") {
    c.width = 1024;
    c.depth = 24;
    c.heads = 16;
  } else if (key == "vit-h") {
    c.width = 1280;
    c.depth = 32;
    c.heads = 16;
  } else if (key == "vit-g") {
    c.width = 1408;
    c.depth = 40;
    c.heads = 16;
    c.mlp_dim = 6144;
  } else if (key == "vit-gg") {
    c.width = 1664;
    c.depth = 48;
    c.heads = 16;
    c.mlp_dim = 8192;
  } else {
    std::string names;
    for (const std::string& n : registry_names()) names += n + " ";
    fail(ErrorKind::Config, "unknown model '", name, "'; registry has: ", names);
  }
  return c;
}

std::vector<std::string> registry_names() {
  return {"tiny-l", "tiny-h", "vit-b", "vit-l", "vit-h", "vit-g", "vit-gg"};
}

int64_t encoder_parameter_count(const ModelConfig& cfg) {
  cfg.validate();
  const int64_t w = cfg.width;
  return cfg.payload() * w + w + static_cast<int64_t>(cfg.depth) * block_scalars(w, cfg.encoder_mlp()) +
         2 * w;
}

int64_t predictor_parameter_count(const ModelConfig& cfg) {
  cfg.validate();
  return union_head_scalars(cfg.width, cfg.predictor_width, cfg.predictor_out_dim,
                            cfg.predictor_depth, cfg.predictor_mlp());
}

int64_t decoder_parameter_count(const ModelConfig& cfg) {
  cfg.validate();
  return union_head_scalars(cfg.width, cfg.decoder_width, cfg.payload(), cfg.decoder_depth,
                            cfg.decoder_mlp());
}

int64_t probe_parameter_count(const ModelConfig& cfg) {
  cfg.validate();
  const int64_t w = cfg.width;
  const int64_t m = static_cast<int64_t>(cfg.mlp_ratio) * w;
  return 3 * block_scalars(w, m)       // self-attention blocks
         + w                           // learnable query
         + 2 * w                       // kv layer norm
         + 3 * (w * w + w)             // k, v, out projections
         + 2 * w                       // ln2
         + w * m + m + m * w + w       // mlp
         + 2 * w                       // final ln
         + w * cfg.probe_classes + cfg.probe_classes;
}

// ---- construction ----------------------------------------------------------

namespace {

template <typename T>
TensorT<T> trunc_fill(Shape shape, Rng& rng) {
  TensorT<T> t = TensorT<T>::zeros(std::move(shape));
  for (T& v : t.values())
    v = static_cast<T>(rng.trunc_normal(kInitStd, -2.0 * kInitStd, 2.0 * kInitStd));
  return t;
}

template <typename T>
BlockParamsT<T> make_block(int64_t w, int64_t m, Rng& rng) {
  BlockParamsT<T> b;
  b.ln1_g = TensorT<T>::full({w}, T(1));
  b.ln1_b = TensorT<T>::zeros({w});
  b.w_qkv = trunc_fill<T>({w, 3 * w}, rng);
  b.b_qkv = TensorT<T>::zeros({3 * w});
  b.w_proj = TensorT<T>::zeros({w, w});  // residual branch output: zero init
  b.b_proj = TensorT<T>::zeros({w});
  b.ln2_g = TensorT<T>::full({w}, T(1));
  b.ln2_b = TensorT<T>::zeros({w});
  b.w_mlp1 = trunc_fill<T>({w, m}, rng);
  b.b_mlp1 = TensorT<T>::zeros({m});
  b.w_mlp2 = TensorT<T>::zeros({m, w});  // residual branch output: zero init
  b.b_mlp2 = TensorT<T>::zeros({w});
  return b;
}

template <typename T>
void append_block(std::vector<std::pair<std::string, TensorT<T>>>& out, const std::string& prefix,
                  const BlockParamsT<T>& b) {
  out.emplace_back(prefix + ".ln1.g", b.ln1_g);
  out.emplace_back(prefix + ".ln1.b", b.ln1_b);
  out.emplace_back(prefix + ".qkv.w", b.w_qkv);
  out.emplace_back(prefix + ".qkv.b", b.b_qkv);
  out.emplace_back(prefix + ".proj.w", b.w_proj);
  out.emplace_back(prefix + ".proj.b", b.b_proj);
  out.emplace_back(prefix + ".ln2.g", b.ln2_g);
  out.emplace_back(prefix + ".ln2.b", b.ln2_b);
  out.emplace_back(prefix + ".mlp1.w", b.w_mlp1);
  out.emplace_back(prefix + ".mlp1.b", b.b_mlp1);
  out.emplace_back(prefix + ".mlp2.w", b.w_mlp2);
  out.emplace_back(prefix + ".mlp2.b", b.b_mlp2);
}

template <typename T>
std::vector<TensorT<T>> strip_names(const std::vector<std::pair<std::string, TensorT<T>>>& named) {
  std::vector<TensorT<T>> out;
  out.reserve(named.size());
  for (const auto& [name, t] : named) out.push_back(t);
  return out;
}

}  // namespace

template <typename T>
std::vector<std::pair<std::string, TensorT<T>>> EncoderParamsT<T>::named() const {
  std::vector<std::pair<std::string, TensorT<T>>> out;
  out.emplace_back("embed.w", w_embed);
  out.emplace_back("embed.b", b_embed);
  for (size_t i = 0; i < blocks.size(); ++i)
    append_block(out, "block" + std::to_string(i), blocks[i]);
  out.emplace_back("lnf.g", lnf_g);
  out.emplace_back("lnf.b", lnf_b);
  return out;
}

template <typename T>
std::vector<TensorT<T>> EncoderParamsT<T>::tensors() const {
  return strip_names(named());
}

template <typename T>
void EncoderParamsT<T>::mark_trainable() {
  check(!frozen, ErrorKind::Contract, "frozen parameter collection rejects gradient attachment");
  for (TensorT<T>& t : tensors()) t.set_requires_grad(true);
}

template <typename T>
std::vector<std::pair<std::string, TensorT<T>>> UnionHeadParamsT<T>::named() const {
  std::vector<std::pair<std::string, TensorT<T>>> out;
  out.emplace_back("in.w", w_in);
  out.emplace_back("in.b", b_in);
  out.emplace_back("mask_token", mask_token);
  for (size_t i = 0; i < blocks.size(); ++i)
    append_block(out, "block" + std::to_string(i), blocks[i]);
  out.emplace_back("lnf.g", lnf_g);
  out.emplace_back("lnf.b", lnf_b);
  out.emplace_back("out.w", w_out);
  out.emplace_back("out.b", b_out);
  return out;
}

template <typename T>
std::vector<TensorT<T>> UnionHeadParamsT<T>::tensors() const {
  return strip_names(named());
}

template <typename T>
void UnionHeadParamsT<T>::mark_trainable() {
  for (TensorT<T>& t : tensors()) t.set_requires_grad(true);
}

template <typename T>
std::vector<std::pair<std::string, TensorT<T>>> ProbeParamsT<T>::named() const {
  std::vector<std::pair<std::string, TensorT<T>>> out;
  for (size_t i = 0; i < blocks.size(); ++i)
    append_block(out, "block" + std::to_string(i), blocks[i]);
  out.emplace_back("query", query);
  out.emplace_back("ln_kv.g", ln_kv_g);
  out.emplace_back("ln_kv.b", ln_kv_b);
  out.emplace_back("k.w", w_k);
  out.emplace_back("k.b", b_k);
  out.emplace_back("v.w", w_v);
  out.emplace_back("v.b", b_v);
  out.emplace_back("o.w", w_o);
  out.emplace_back("o.b", b_o);
  out.emplace_back("ln2.g", ln2_g);
  out.emplace_back("ln2.b", ln2_b);
  out.emplace_back("mlp1.w", w_mlp1);
  out.emplace_back("mlp1.b", b_mlp1);
  out.emplace_back("mlp2.w", w_mlp2);
  out.emplace_back("mlp2.b", b_mlp2);
  out.emplace_back("lnf.g", lnf_g);
  out.emplace_back("lnf.b", lnf_b);
  out.emplace_back("cls.w", w_cls);
  out.emplace_back("cls.b", b_cls);
  return out;
}

template <typename T>
std::vector<TensorT<T>> ProbeParamsT<T>::tensors() const {
  return strip_names(named());
}

template <typename T>
void ProbeParamsT<T>::mark_trainable() {
  for (TensorT<T>& t : tensors()) t.set_requires_grad(true);
}

template <typename T>
EncoderParamsT<T> make_encoder(const ModelConfig& cfg, Rng& rng) {
  cfg.validate();
  EncoderParamsT<T> p;
  p.width = cfg.width;
  p.heads = cfg.heads;
  p.payload = cfg.payload();
  p.eps = cfg.eps;
  p.w_embed = trunc_fill<T>({p.payload, cfg.width}, rng);
  p.b_embed = TensorT<T>::zeros({cfg.width});
  p.blocks.reserve(static_cast<size_t>(cfg.depth));
  for (int i = 0; i < cfg.depth; ++i)
    p.blocks.push_back(make_block<T>(cfg.width, cfg.encoder_mlp(), rng));
  p.lnf_g = TensorT<T>::full({cfg.width}, T(1));
  p.lnf_b = TensorT<T>::zeros({cfg.width});
  return p;
}

template <typename T>
EncoderParamsT<T> make_teacher(const ModelConfig& cfg, Rng& rng) {
  EncoderParamsT<T> p = make_encoder<T>(cfg, rng);
  p.frozen = true;
  return p;
}

namespace {

template <typename T, typename P>
void fill_union_head(P& p, int64_t in_dim, int64_t width, int64_t out_dim, int heads, int depth,
                     int64_t mlp, double eps, Rng& rng) {
  p.width = static_cast<int>(width);
  p.heads = heads;
  p.in_dim = in_dim;
  p.out_dim = out_dim;
  p.eps = eps;
  p.w_in = trunc_fill<T>({in_dim, width}, rng);
  p.b_in = TensorT<T>::zeros({width});
  p.mask_token = trunc_fill<T>({1, width}, rng);
  p.blocks.reserve(static_cast<size_t>(depth));
  for (int i = 0; i < depth; ++i) p.blocks.push_back(make_block<T>(width, mlp, rng));
  p.lnf_g = TensorT<T>::full({width}, T(1));
  p.lnf_b = TensorT<T>::zeros({width});
  p.w_out = trunc_fill<T>({width, out_dim}, rng);
  p.b_out = TensorT<T>::zeros({out_dim});
}

}  // namespace

template <typename T>
PredictorParamsT<T> make_predictor(const ModelConfig& cfg, Rng& rng) {
  cfg.validate();
  PredictorParamsT<T> p;
  fill_union_head<T>(p, cfg.width, cfg.predictor_width, cfg.predictor_out_dim,
                     cfg.predictor_heads, cfg.predictor_depth, cfg.predictor_mlp(), cfg.eps, rng);
  return p;
}

template <typename T>
DecoderParamsT<T> make_decoder(const ModelConfig& cfg, Rng& rng) {
  cfg.validate();
  DecoderParamsT<T> p;
  fill_union_head<T>(p, cfg.width, cfg.decoder_width, cfg.payload(), cfg.decoder_heads,
                     cfg.decoder_depth, cfg.decoder_mlp(), cfg.eps, rng);
  return p;
}

template <typename T>
ProbeParamsT<T> make_probe(const ModelConfig& cfg, Rng& rng) {
  cfg.validate();
  ProbeParamsT<T> p;
  const int64_t w = cfg.width;
  const int64_t m = static_cast<int64_t>(cfg.mlp_ratio) * w;
  p.width = cfg.width;
  p.heads = cfg.heads;
  p.classes = cfg.probe_classes;
  p.eps = cfg.eps;
  for (int i = 0; i < 3; ++i) p.blocks.push_back(make_block<T>(w, m, rng));
  p.query = trunc_fill<T>({1, w}, rng);
  p.ln_kv_g = TensorT<T>::full({w}, T(1));
  p.ln_kv_b = TensorT<T>::zeros({w});
  p.w_k = trunc_fill<T>({w, w}, rng);
  p.b_k = TensorT<T>::zeros({w});
  p.w_v = trunc_fill<T>({w, w}, rng);
  p.b_v = TensorT<T>::zeros({w});
  p.w_o = TensorT<T>::zeros({w, w});  // residual branch output: zero init
  p.b_o = TensorT<T>::zeros({w});
  p.ln2_g = TensorT<T>::full({w}, T(1));
  p.ln2_b = TensorT<T>::zeros({w});
  p.w_mlp1 = trunc_fill<T>({w, m}, rng);
  p.b_mlp1 = TensorT<T>::zeros({m});
  p.w_mlp2 = TensorT<T>::zeros({m, w});  // residual branch output: zero init
  p.b_mlp2 = TensorT<T>::zeros({w});
  p.lnf_g = TensorT<T>::full({w}, T(1));
  p.lnf_b = TensorT<T>::zeros({w});
  p.w_cls = trunc_fill<T>({w, static_cast<int64_t>(cfg.probe_classes)}, rng);
  p.b_cls = TensorT<T>::zeros({cfg.probe_classes});
  return p;
}

// ---- forwards ---------------------------------------------------------------

namespace {

void check_spans(const std::vector<RowSpan>& spans, int64_t rows, const char* what) {
  check(!spans.empty(), ErrorKind::Dimension, what, ": no clip spans supplied");
  int64_t cursor = 0;
  for (const RowSpan& s : spans) {
    check(s.begin == cursor && s.len >= 1, ErrorKind::Dimension, what,
          ": spans must tile the rows contiguously");
    cursor += s.len;
  }
  check(cursor == rows, ErrorKind::Dimension, what, ": spans cover ", cursor, " rows, tensor has ",
        rows);
}

// One pre-norm block: x + proj(attn(ln1 x)) then x + mlp(ln2 x). Rotary
// position encoding is applied to q and k when positions are supplied.
template <typename T>
TensorT<T> run_block(TapeT<T>* tape, const BlockParamsT<T>& blk, const TensorT<T>& x,
                     const std::vector<Pos3>* positions, const std::vector<RowSpan>& spans,
                     int heads, double eps) {
  TensorT<T> h = layer_norm(tape, x, blk.ln1_g, blk.ln1_b, eps);
  TensorT<T> qkv = linear(tape, h, blk.w_qkv, blk.b_qkv);
  const int64_t w = x.cols();
  TensorT<T> q = slice_cols(tape, qkv, 0, w);
  TensorT<T> k = slice_cols(tape, qkv, w, w);
  TensorT<T> v = slice_cols(tape, qkv, 2 * w, w);
  if (positions != nullptr) {
    q = rope_rotate(tape, q, *positions, heads, kRopeBase);
    k = rope_rotate(tape, k, *positions, heads, kRopeBase);
  }
  const double scale = 1.0 / std::sqrt(static_cast<double>(w / heads));
  TensorT<T> att = attention(tape, q, k, v, spans, spans, heads, scale);
  TensorT<T> res1 = add(tape, x, linear(tape, att, blk.w_proj, blk.b_proj));
  TensorT<T> h2 = layer_norm(tape, res1, blk.ln2_g, blk.ln2_b, eps);
  TensorT<T> m = linear(tape, gelu(tape, linear(tape, h2, blk.w_mlp1, blk.b_mlp1)), blk.w_mlp2,
                        blk.b_mlp2);
  return add(tape, res1, m);
}

// Shared predictor/decoder forward over the context+mask-token union.
template <typename T, typename P>
TensorT<T> union_forward(TapeT<T>* tape, const P& p, const TensorT<T>& context_latents,
                         const std::vector<Pos3>& context_positions,
                         const std::vector<RowSpan>& context_spans,
                         const std::vector<Pos3>& target_positions,
                         const std::vector<RowSpan>& target_spans, const char* what) {
  check(context_latents.ndim() == 2 && context_latents.cols() == p.in_dim, ErrorKind::Dimension,
        what, ": context latents must be [rows x ", p.in_dim, "]");
  const int64_t ctx_rows = context_latents.rows();
  check(static_cast<int64_t>(context_positions.size()) == ctx_rows, ErrorKind::Dimension, what,
        ": ", context_positions.size(), " context positions for ", ctx_rows, " rows");
  check_spans(context_spans, ctx_rows, what);
  check(context_spans.size() == target_spans.size(), ErrorKind::Dimension, what, ": ",
        context_spans.size(), " context spans vs ", target_spans.size(), " target spans");
  int64_t tgt_rows = 0;
  for (const RowSpan& s : target_spans) {
    check(s.len >= 1, ErrorKind::Contract, what, ": a clip has no target positions");
    tgt_rows += s.len;
  }
  check(static_cast<int64_t>(target_positions.size()) == tgt_rows, ErrorKind::Dimension, what,
        ": ", target_positions.size(), " target positions for ", tgt_rows, " target rows");

  TensorT<T> proj = linear(tape, context_latents, p.w_in, p.b_in);

  // Per clip: context rows first, then mask-token rows at target positions.
  const size_t clips = context_spans.size();
  std::vector<int64_t> out_map;
  std::vector<Pos3> union_pos;
  std::vector<RowSpan> union_spans(clips);
  std::vector<int64_t> target_rows_in_union;
  out_map.reserve(static_cast<size_t>(ctx_rows + tgt_rows));
  union_pos.reserve(static_cast<size_t>(ctx_rows + tgt_rows));
  target_rows_in_union.reserve(static_cast<size_t>(tgt_rows));
  int64_t cursor = 0;
  for (size_t i = 0; i < clips; ++i) {
    const RowSpan cs = context_spans[i];
    const RowSpan ts = target_spans[i];
    union_spans[i] = {cursor, cs.len + ts.len};
    for (int64_t r = 0; r < cs.len; ++r) {
      out_map.push_back(cs.begin + r);
      union_pos.push_back(context_positions[static_cast<size_t>(cs.begin + r)]);
    }
    for (int64_t r = 0; r < ts.len; ++r) {
      out_map.push_back(-1);
      union_pos.push_back(target_positions[static_cast<size_t>(ts.begin + r)]);
      target_rows_in_union.push_back(cursor + cs.len + r);
    }
    cursor += cs.len + ts.len;
  }

  TensorT<T> x = compose_rows(tape, proj, p.mask_token, out_map);
  for (const BlockParamsT<T>& blk : p.blocks)
    x = run_block(tape, blk, x, &union_pos, union_spans, p.heads, p.eps);
  x = layer_norm(tape, x, p.lnf_g, p.lnf_b, p.eps);
  TensorT<T> out =
      linear(tape, gather_rows(tape, x, target_rows_in_union), p.w_out, p.b_out);
  check(all_finite(out), ErrorKind::Numeric, what, " produced non-finite values");
  return out;
}

}  // namespace

template <typename T>
TensorT<T> tubelet_embed(TapeT<T>* tape, const EncoderParamsT<T>& p, const TensorT<T>& tokens) {
  check(!(p.frozen && tape != nullptr), ErrorKind::Contract,
        "frozen parameters reject gradient recording");
  check(tokens.ndim() == 2 && tokens.cols() == p.payload, ErrorKind::Dimension,
        "tubelet payload ", tokens.ndim() == 2 ? tokens.cols() : -1, " does not match embedding ",
        p.payload);
  return linear(tape, tokens, p.w_embed, p.b_embed);
}

template <typename T>
TensorT<T> encoder_forward(TapeT<T>* tape, const EncoderParamsT<T>& p, const TensorT<T>& embedded,
                           const std::vector<Pos3>& positions, const std::vector<RowSpan>& spans) {
  check(!(p.frozen && tape != nullptr), ErrorKind::Contract,
        "frozen parameters reject gradient recording");
  check(embedded.ndim() == 2 && embedded.cols() == p.width, ErrorKind::Dimension,
        "encoder input must be [rows x ", p.width, "]");
  const int64_t rows = embedded.rows();
  check(rows >= 1, ErrorKind::Contract, "encoder needs at least one visible token");
  check(static_cast<int64_t>(positions.size()) == rows, ErrorKind::Dimension, positions.size(),
        " positions for ", rows, " rows");
  check_spans(spans, rows, "encoder");

  TensorT<T> x = embedded;
  for (const BlockParamsT<T>& blk : p.blocks)
    x = run_block(tape, blk, x, &positions, spans, p.heads, p.eps);
  x = layer_norm(tape, x, p.lnf_g, p.lnf_b, p.eps);
  check(all_finite(x), ErrorKind::Numeric, "encoder forward produced non-finite values");
  return x;
}

template <typename T>
TensorT<T> predictor_forward(TapeT<T>* tape, const PredictorParamsT<T>& p,
                             const TensorT<T>& context_latents,
                             const std::vector<Pos3>& context_positions,
                             const std::vector<RowSpan>& context_spans,
                             const std::vector<Pos3>& target_positions,
                             const std::vector<RowSpan>& target_spans) {
  return union_forward(tape, p, context_latents, context_positions, context_spans,
                       target_positions, target_spans, "predictor");
}

template <typename T>
TensorT<T> decoder_forward(TapeT<T>* tape, const DecoderParamsT<T>& p,
                           const TensorT<T>& context_latents,
                           const std::vector<Pos3>& context_positions,
                           const std::vector<RowSpan>& context_spans,
                           const std::vector<Pos3>& target_positions,
                           const std::vector<RowSpan>& target_spans) {
  return union_forward(tape, p, context_latents, context_positions, context_spans,
                       target_positions, target_spans, "decoder");
}

template <typename T>
TensorT<T> attentive_probe_forward(TapeT<T>* tape, const ProbeParamsT<T>& p,
                                   const TensorT<T>& latents,
                                   const std::vector<RowSpan>& spans) {
  check(latents.ndim() == 2 && latents.cols() == p.width, ErrorKind::Dimension,
        "probe input must be [rows x ", p.width, "]");
  check_spans(spans, latents.rows(), "probe");
  const int64_t clips = static_cast<int64_t>(spans.size());

  // Self-attention blocks run without positional encoding: the backbone's
  // rotary attention already contextualized the latents.
  TensorT<T> x = latents;
  for (const BlockParamsT<T>& blk : p.blocks)
    x = run_block(tape, blk, x, nullptr, spans, p.heads, p.eps);

  TensorT<T> kvn = layer_norm(tape, x, p.ln_kv_g, p.ln_kv_b, p.eps);
  TensorT<T> k = linear(tape, kvn, p.w_k, p.b_k);
  TensorT<T> v = linear(tape, kvn, p.w_v, p.b_v);
  TensorT<T> q = gather_rows(tape, p.query, std::vector<int64_t>(static_cast<size_t>(clips), 0));
  std::vector<RowSpan> q_spans(static_cast<size_t>(clips));
  for (int64_t i = 0; i < clips; ++i) q_spans[static_cast<size_t>(i)] = {i, 1};
  const double scale = 1.0 / std::sqrt(static_cast<double>(p.width / p.heads));
  TensorT<T> att = attention(tape, q, k, v, q_spans, spans, p.heads, scale);
  TensorT<T> h = add(tape, q, linear(tape, att, p.w_o, p.b_o));
  TensorT<T> h2 = layer_norm(tape, h, p.ln2_g, p.ln2_b, p.eps);
  TensorT<T> m = linear(tape, gelu(tape, linear(tape, h2, p.w_mlp1, p.b_mlp1)), p.w_mlp2,
                        p.b_mlp2);
  h = add(tape, h, m);
  TensorT<T> logits = linear(tape, layer_norm(tape, h, p.lnf_g, p.lnf_b, p.eps), p.w_cls, p.b_cls);
  check(all_finite(logits), ErrorKind::Numeric, "probe forward produced non-finite values");
  return logits;
}

// ---- instantiation ----------------------------------------------------------

template struct EncoderParamsT<float>;
template struct EncoderParamsT<double>;
template struct UnionHeadParamsT<float>;
template struct UnionHeadParamsT<double>;
template struct ProbeParamsT<float>;
template struct ProbeParamsT<double>;

template EncoderParamsT<float> make_encoder<float>(const ModelConfig&, Rng&);
template EncoderParamsT<double> make_encoder<double>(const ModelConfig&, Rng&);
template EncoderParamsT<float> make_teacher<float>(const ModelConfig&, Rng&);
template EncoderParamsT<double> make_teacher<double>(const ModelConfig&, Rng&);
template PredictorParamsT<float> make_predictor<float>(const ModelConfig&, Rng&);
template PredictorParamsT<double> make_predictor<double>(const ModelConfig&, Rng&);
template DecoderParamsT<float> make_decoder<float>(const ModelConfig&, Rng&);
template DecoderParamsT<double> make_decoder<double>(const ModelConfig&, Rng&);
template ProbeParamsT<float> make_probe<float>(const ModelConfig&, Rng&);
template ProbeParamsT<double> make_probe<double>(const ModelConfig&, Rng&);

template TensorT<float> tubelet_embed<float>(TapeT<float>*, const EncoderParamsT<float>&,
                                             const TensorT<float>&);
template TensorT<double> tubelet_embed<double>(TapeT<double>*, const EncoderParamsT<double>&,
                                               const TensorT<double>&);
template TensorT<float> encoder_forward<float>(TapeT<float>*, const EncoderParamsT<float>&,
                                               const TensorT<float>&, const std::vector<Pos3>&,
                                               const std::vector<RowSpan>&);
template TensorT<double> encoder_forward<double>(TapeT<double>*, const EncoderParamsT<double>&,
                                                 const TensorT<double>&, const std::vector<Pos3>&,
                                                 const std::vector<RowSpan>&);
template TensorT<float> predictor_forward<float>(TapeT<float>*, const PredictorParamsT<float>&,
                                                 const TensorT<float>&, const std::vector<Pos3>&,
                                                 const std::vector<RowSpan>&,
                                                 const std::vector<Pos3>&,
                                                 const std::vector<RowSpan>&);
template TensorT<double> predictor_forward<double>(TapeT<double>*, const PredictorParamsT<double>&,
                                                   const TensorT<double>&,
                                                   const std::vector<Pos3>&,
                                                   const std::vector<RowSpan>&,
                                                   const std::vector<Pos3>&,
                                                   const std::vector<RowSpan>&);
template TensorT<float> decoder_forward<float>(TapeT<float>*, const DecoderParamsT<float>&,
                                               const TensorT<float>&, const std::vector<Pos3>&,
                                               const std::vector<RowSpan>&,
                                               const std::vector<Pos3>&,
                                               const std::vector<RowSpan>&);
template TensorT<double> decoder_forward<double>(TapeT<double>*, const DecoderParamsT<double>&,
                                                 const TensorT<double>&, const std::vector<Pos3>&,
                                                 const std::vector<RowSpan>&,
                                                 const std::vector<Pos3>&,
                                                 const std::vector<RowSpan>&);
template TensorT<float> attentive_probe_forward<float>(TapeT<float>*, const ProbeParamsT<float>&,
                                                       const TensorT<float>&,
                                                       const std::vector<RowSpan>&);
template TensorT<double> attentive_probe_forward<double>(TapeT<double>*,
                                                         const ProbeParamsT<double>&,
                                                         const TensorT<double>&,
                                                         const std::vector<RowSpan>&);

}  // namespace salt
