// SPDX-License-Identifier: Apache-2.0
#include "evacap/model.hpp"

#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <set>

#include "evacap/errors.hpp"
#include "evacap/rng.hpp"

namespace evacap::model {

using nlohmann::json;

std::string to_string(FusionMode mode) {
  switch (mode) {
    case FusionMode::gated: return "gated";
    case FusionMode::concat: return "concat";
    case FusionMode::audio_only: return "audio_only";
  }
  return "?";
}

FusionMode fusion_mode_from_string(const std::string& s) {
  if (s == "gated") return FusionMode::gated;
  if (s == "concat") return FusionMode::concat;
  if (s == "audio_only") return FusionMode::audio_only;
  throw InvalidInput("unknown fusion mode: " + s);
}

void ModelConfig::validate() const {
  auto positive = [](std::size_t v, const char* name) {
    if (v == 0) throw InvalidInput(std::string("model config: ") + name + " must be >= 1");
  };
  positive(d_model, "d_model");
  positive(n_heads, "n_heads");
  positive(n_dec_layers, "n_dec_layers");
  positive(mlp_ratio, "mlp_ratio");
  positive(T_a, "T_a");
  positive(T_v, "T_v");
  positive(d_in_audio, "d_in_audio");
  positive(audio_patch, "audio_patch");
  positive(d_in_visual, "d_in_visual");
  positive(patches_per_frame, "patches_per_frame");
  positive(max_caption_len, "max_caption_len");
  positive(fusion_heads, "fusion_heads");
  if (vocab_size <= static_cast<std::size_t>(kEos)) throw InvalidInput("model config: vocab_size must exceed 3");
  if (d_model % n_heads != 0) throw InvalidInput("model config: d_model must be divisible by n_heads");
  if (d_model % fusion_heads != 0) throw InvalidInput("model config: d_model must be divisible by fusion_heads");
  if (T_a % audio_patch != 0) throw InvalidInput("model config: T_a must be a multiple of audio_patch");
}

json to_json(const ModelConfig& c) {
  return json{{"d_model", c.d_model},
              {"n_enc_layers", c.n_enc_layers},
              {"n_heads", c.n_heads},
              {"n_dec_layers", c.n_dec_layers},
              {"mlp_ratio", c.mlp_ratio},
              {"T_a", c.T_a},
              {"T_v", c.T_v},
              {"d_in_audio", c.d_in_audio},
              {"audio_patch", c.audio_patch},
              {"d_in_visual", c.d_in_visual},
              {"patches_per_frame", c.patches_per_frame},
              {"vocab_size", c.vocab_size},
              {"max_caption_len", c.max_caption_len},
              {"fusion_mode", to_string(c.fusion_mode)},
              {"fusion_heads", c.fusion_heads},
              {"detach_entropy", c.detach_entropy},
              {"seed", c.seed}};
}

ModelConfig config_from_json(const json& j) {
  if (!j.is_object()) throw InvalidInput("model config must be an object");
  ModelConfig c;
  const json defaults = to_json(c);
  for (const auto& [key, _] : j.items()) {
    if (!defaults.contains(key)) throw InvalidInput("model config: unknown key '" + key + "'");
  }
  try {
    auto get = [&](const char* key, auto& field) {
      if (j.contains(key)) j.at(key).get_to(field);
    };
    get("d_model", c.d_model);
    get("n_enc_layers", c.n_enc_layers);
    get("n_heads", c.n_heads);
    get("n_dec_layers", c.n_dec_layers);
    get("mlp_ratio", c.mlp_ratio);
    get("T_a", c.T_a);
    get("T_v", c.T_v);
    get("d_in_audio", c.d_in_audio);
    get("audio_patch", c.audio_patch);
    get("d_in_visual", c.d_in_visual);
    get("patches_per_frame", c.patches_per_frame);
    get("vocab_size", c.vocab_size);
    get("max_caption_len", c.max_caption_len);
    get("fusion_heads", c.fusion_heads);
    get("detach_entropy", c.detach_entropy);
    get("seed", c.seed);
    if (j.contains("fusion_mode")) c.fusion_mode = fusion_mode_from_string(j.at("fusion_mode").get<std::string>());
  } catch (const json::exception& e) {
    throw InvalidInput(std::string("model config: ") + e.what());
  }
  c.validate();
  return c;
}

std::vector<int> teacher_inputs(const std::vector<int>& caption) {
  std::vector<int> in{kBos};
  in.insert(in.end(), caption.begin(), caption.end());
  return in;
}

std::vector<int> teacher_targets(const std::vector<int>& caption) {
  std::vector<int> out = caption;
  out.push_back(kEos);
  return out;
}

Tensor sinusoidal_positions(std::size_t n, std::size_t d) {
  Tensor t({n, d});
  for (std::size_t pos = 0; pos < n; ++pos) {
    for (std::size_t i = 0; i < d; ++i) {
      const double freq = std::pow(10000.0, -static_cast<double>(2 * (i / 2)) / static_cast<double>(d));
      const double angle = static_cast<double>(pos) * freq;
      t(pos, i) = (i % 2 == 0) ? std::sin(angle) : std::cos(angle);
    }
  }
  return t;
}

// ---- construction ----------------------------------------------------------

namespace {

Tensor gaussian(Shape shape, double std, Rng& rng) {
  Tensor t(std::move(shape));
  for (auto& v : t.data()) v = std * rng.normal();
  return t;
}

void add_linear(ad::ParamStore& ps, const std::string& name, std::size_t in, std::size_t out, Rng& rng,
                bool bias = true) {
  ps.add(name + ".W", gaussian({in, out}, 1.0 / std::sqrt(static_cast<double>(in)), rng));
  if (bias) ps.add(name + ".b", Tensor({1, out}));
}

void add_norm(ad::ParamStore& ps, const std::string& name, std::size_t d) {
  ps.add(name + ".g", Tensor({1, d}, 1.0));
  ps.add(name + ".b", Tensor({1, d}));
}

void add_attention(ad::ParamStore& ps, const std::string& name, std::size_t d, Rng& rng) {
  for (const char* w : {"wq", "wk", "wv", "wo"}) add_linear(ps, name + "." + w, d, d, rng, false);
}

void add_mlp(ad::ParamStore& ps, const std::string& name, std::size_t d, std::size_t hidden, Rng& rng) {
  add_linear(ps, name + ".fc1", d, hidden, rng);
  add_linear(ps, name + ".fc2", hidden, d, rng);
}

void add_encoder(ad::ParamStore& ps, const std::string& name, std::size_t d_in, const ModelConfig& c, Rng& rng) {
  add_linear(ps, name + ".in", d_in, c.d_model, rng);
  for (std::size_t l = 0; l < c.n_enc_layers; ++l) {
    const std::string blk = name + ".blk" + std::to_string(l);
    add_norm(ps, blk + ".ln1", c.d_model);
    add_attention(ps, blk + ".attn", c.d_model, rng);
    add_norm(ps, blk + ".ln2", c.d_model);
    add_mlp(ps, blk + ".mlp", c.d_model, c.d_model * c.mlp_ratio, rng);
  }
  if (c.n_enc_layers > 0) add_norm(ps, name + ".ln_f", c.d_model);
}

ad::Var linear(ad::Tape& tape, const ad::ParamStore& ps, ad::Var x, const std::string& name) {
  ad::Var y = ad::matmul(x, tape.param(ps, name + ".W"));
  if (ps.contains(name + ".b")) y = ad::add_row(y, tape.param(ps, name + ".b"));
  return y;
}

}  // namespace

Captioner::Captioner(ModelConfig config) : config_(std::move(config)) {
  config_.validate();
  Rng rng(config_.seed);
  const auto& c = config_;
  add_encoder(params_, "audio", c.audio_patch * c.d_in_audio, c, rng);
  add_encoder(params_, "visual", c.d_in_visual, c, rng);

  fusion::FusionParams fp = fusion::FusionParams::init(c.d_model, rng);
  params_.add("fusion.w_q", fp.w_q);
  params_.add("fusion.w_k", fp.w_k);
  params_.add("fusion.w_v", fp.w_v);
  params_.add("fusion.w_g", Tensor::scalar(0.0));
  params_.add("fusion.b_g", Tensor::scalar(0.0));

  params_.add("decoder.tok_emb", gaussian({c.vocab_size, c.d_model}, 1.0, rng));
  for (std::size_t l = 0; l < c.n_dec_layers; ++l) {
    const std::string blk = "decoder.blk" + std::to_string(l);
    add_norm(params_, blk + ".ln1", c.d_model);
    add_attention(params_, blk + ".self", c.d_model, rng);
    add_norm(params_, blk + ".ln2", c.d_model);
    add_attention(params_, blk + ".cross", c.d_model, rng);
    add_norm(params_, blk + ".ln3", c.d_model);
    add_mlp(params_, blk + ".mlp", c.d_model, c.d_model * c.mlp_ratio, rng);
  }
  add_norm(params_, "decoder.ln_f", c.d_model);
  add_linear(params_, "decoder.out", c.d_model, c.vocab_size, rng);
}

fusion::FusionParams Captioner::fusion_params() const {
  fusion::FusionParams fp;
  fp.w_q = params_.get("fusion.w_q");
  fp.w_k = params_.get("fusion.w_k");
  fp.w_v = params_.get("fusion.w_v");
  fp.w_g = params_.get("fusion.w_g").item();
  fp.b_g = params_.get("fusion.b_g").item();
  return fp;
}

void Captioner::set_fusion_params(const fusion::FusionParams& fp) {
  const std::size_t d = config_.d_model;
  if (fp.w_q.shape() != Shape{d, d} || fp.w_k.shape() != Shape{d, d} || fp.w_v.shape() != Shape{d, d}) {
    throw InvalidInput("set_fusion_params: projection shape does not match d_model");
  }
  params_.get("fusion.w_q") = fp.w_q;
  params_.get("fusion.w_k") = fp.w_k;
  params_.get("fusion.w_v") = fp.w_v;
  params_.get("fusion.w_g") = Tensor::scalar(fp.w_g);
  params_.get("fusion.b_g") = Tensor::scalar(fp.b_g);
}

// ---- building blocks -------------------------------------------------------

ad::Var Captioner::norm(ad::Tape& tape, ad::Var x, const std::string& prefix) const {
  return ad::layer_norm(x, p(tape, prefix + ".g"), p(tape, prefix + ".b"));
}

ad::Var Captioner::mlp(ad::Tape& tape, ad::Var x, const std::string& prefix) const {
  return linear(tape, params_, ad::gelu(linear(tape, params_, x, prefix + ".fc1")), prefix + ".fc2");
}

namespace {

ad::Var multi_head(ad::Var q, ad::Var k, ad::Var v, std::size_t heads, bool causal) {
  const std::size_t d = q.value().cols();
  const std::size_t dh = d / heads;
  const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(dh));
  std::vector<ad::Var> outs;
  for (std::size_t h = 0; h < heads; ++h) {
    const ad::Var qh = heads == 1 ? q : ad::slice_cols(q, h * dh, dh);
    const ad::Var kh = heads == 1 ? k : ad::slice_cols(k, h * dh, dh);
    const ad::Var vh = heads == 1 ? v : ad::slice_cols(v, h * dh, dh);
    const ad::Var scores = ad::scale(ad::matmul_nt(qh, kh), inv_sqrt);
    const ad::Var probs = causal ? ad::softmax_rows_causal(scores) : ad::softmax_rows(scores);
    outs.push_back(ad::matmul(probs, vh));
  }
  return heads == 1 ? outs.front() : ad::concat_cols(outs);
}

}  // namespace

ad::Var Captioner::self_attention(ad::Tape& tape, ad::Var x, const std::string& prefix, bool causal) const {
  const ad::Var q = ad::matmul(x, p(tape, prefix + ".wq.W"));
  const ad::Var k = ad::matmul(x, p(tape, prefix + ".wk.W"));
  const ad::Var v = ad::matmul(x, p(tape, prefix + ".wv.W"));
  return ad::matmul(multi_head(q, k, v, config_.n_heads, causal), p(tape, prefix + ".wo.W"));
}

ad::Var Captioner::cross_attention(ad::Tape& tape, ad::Var x, ad::Var memory, const std::string& prefix) const {
  const ad::Var q = ad::matmul(x, p(tape, prefix + ".wq.W"));
  const ad::Var k = ad::matmul(memory, p(tape, prefix + ".wk.W"));
  const ad::Var v = ad::matmul(memory, p(tape, prefix + ".wv.W"));
  return ad::matmul(multi_head(q, k, v, config_.n_heads, false), p(tape, prefix + ".wo.W"));
}

ad::Var Captioner::encoder_stack(ad::Tape& tape, ad::Var x, const std::string& prefix) const {
  if (config_.n_enc_layers == 0) return x;
  const Tensor& xv = x.value();
  x = ad::add(x, tape.constant(sinusoidal_positions(xv.rows(), xv.cols())));
  for (std::size_t l = 0; l < config_.n_enc_layers; ++l) {
    const std::string blk = prefix + ".blk" + std::to_string(l);
    x = ad::add(x, self_attention(tape, norm(tape, x, blk + ".ln1"), blk + ".attn", false));
    x = ad::add(x, mlp(tape, norm(tape, x, blk + ".ln2"), blk + ".mlp"));
  }
  return norm(tape, x, prefix + ".ln_f");
}

Tensor Captioner::audio_tokens(const Tensor& audio) const {
  if (audio.rank() != 2 || audio.cols() != config_.d_in_audio) {
    throw InvalidInput("audio features must be [T x " + std::to_string(config_.d_in_audio) + "], got " +
                       shape_str(audio.shape()));
  }
  if (audio.rows() % config_.audio_patch != 0) {
    throw InvalidInput("audio frame count " + std::to_string(audio.rows()) + " is not a multiple of audio_patch");
  }
  if (config_.audio_patch == 1) return audio;
  return audio.reshaped({audio.rows() / config_.audio_patch, config_.audio_patch * config_.d_in_audio});
}

ad::Var Captioner::encode_audio(ad::Tape& tape, const Tensor& audio) const {
  const ad::Var x = linear(tape, params_, tape.constant(audio_tokens(audio)), "audio.in");
  return encoder_stack(tape, x, "audio");
}

namespace {

void check_visual(const Tensor& visual, const ModelConfig& c) {
  if (visual.rank() != 2 || visual.cols() != c.visual_row_width()) {
    throw InvalidInput("visual features must be [T_v x " + std::to_string(c.visual_row_width()) + "], got " +
                       shape_str(visual.shape()));
  }
}

}  // namespace

ad::Var Captioner::encode_visual_frames(ad::Tape& tape, const Tensor& visual) const {
  check_visual(visual, config_);
  const std::size_t P = config_.patches_per_frame, w = config_.d_in_visual;
  Tensor pooled({visual.rows(), w});
  for (std::size_t f = 0; f < visual.rows(); ++f)
    for (std::size_t k = 0; k < P; ++k)
      for (std::size_t j = 0; j < w; ++j) pooled(f, j) += visual(f, k * w + j) / static_cast<double>(P);
  const ad::Var x = linear(tape, params_, tape.constant(std::move(pooled)), "visual.in");
  return encoder_stack(tape, x, "visual");
}

ad::Var Captioner::encode_visual_patches(ad::Tape& tape, const Tensor& visual) const {
  check_visual(visual, config_);
  const Tensor patches = visual.reshaped({visual.rows() * config_.patches_per_frame, config_.d_in_visual});
  const ad::Var x = linear(tape, params_, tape.constant(patches), "visual.in");
  return encoder_stack(tape, x, "visual");
}

ad::Var Captioner::build_memory(ad::Tape& tape, const Tensor& audio, const Tensor& visual, FusionMode mode,
                                std::optional<fusion::FusionNodes>* fusion_out) const {
  const ad::Var a = encode_audio(tape, audio);
  if (visual.empty() || mode == FusionMode::audio_only) return a;
  if (mode == FusionMode::concat) return ad::concat_rows({a, encode_visual_patches(tape, visual)});

  const ad::Var v = encode_visual_frames(tape, visual);
  fusion::FusionVars vars{p(tape, "fusion.w_q"), p(tape, "fusion.w_k"), p(tape, "fusion.w_v"), p(tape, "fusion.w_g"),
                          p(tape, "fusion.b_g")};
  fusion::FusionOptions opts;
  opts.heads = config_.fusion_heads;
  opts.detach_entropy = config_.detach_entropy;
  fusion::FusionNodes nodes = fusion::fuse(a, v, vars, opts);
  const ad::Var fused = nodes.fused;
  if (fusion_out) *fusion_out = std::move(nodes);
  return fused;
}

ad::Var Captioner::decode_logits(ad::Tape& tape, ad::Var memory, const std::vector<int>& input_tokens) const {
  const std::size_t d = config_.d_model;
  ad::Var x = ad::embedding(p(tape, "decoder.tok_emb"), input_tokens);
  x = ad::add(x, tape.constant(sinusoidal_positions(input_tokens.size(), d)));
  for (std::size_t l = 0; l < config_.n_dec_layers; ++l) {
    const std::string blk = "decoder.blk" + std::to_string(l);
    x = ad::add(x, self_attention(tape, norm(tape, x, blk + ".ln1"), blk + ".self", true));
    x = ad::add(x, cross_attention(tape, norm(tape, x, blk + ".ln2"), memory, blk + ".cross"));
    x = ad::add(x, mlp(tape, norm(tape, x, blk + ".ln3"), blk + ".mlp"));
  }
  return linear(tape, params_, norm(tape, x, "decoder.ln_f"), "decoder.out");
}

void Captioner::check_caption(const std::vector<int>& caption) const {
  if (caption.size() > config_.max_caption_len) {
    throw InvalidInput("caption length " + std::to_string(caption.size()) + " exceeds max_caption_len " +
                       std::to_string(config_.max_caption_len));
  }
  for (int t : caption) {
    if (t < 0 || static_cast<std::size_t>(t) >= config_.vocab_size) {
      throw InvalidInput("caption token " + std::to_string(t) + " outside vocabulary");
    }
  }
}

TapeForward Captioner::forward(ad::Tape& tape, const Tensor& audio, const Tensor& visual,
                               const std::vector<int>& caption, FusionMode mode) const {
  check_caption(caption);
  TapeForward out;
  out.memory = build_memory(tape, audio, visual, mode, &out.fusion);
  const std::uint64_t before = tape.flops();
  out.logits = decode_logits(tape, out.memory, teacher_inputs(caption));
  out.decoder_flops = tape.flops() - before;
  return out;
}

// ---- tensor level ----------------------------------------------------------

Tensor Captioner::encode(const Tensor& features, bool is_audio) const {
  ad::Tape tape;
  tape.set_grad_enabled(false);
  return is_audio ? encode_audio(tape, features).value() : encode_visual_frames(tape, features).value();
}

namespace {

fusion::FusionOutput collect(const fusion::FusionNodes& n) {
  fusion::FusionOutput o;
  o.fused = n.fused.value();
  o.attended = n.attended.value();
  o.entropy = n.entropy.value().item();
  o.gate = n.gate.value().item();
  o.attention = Tensor(n.attention.front().value().shape());
  for (auto a : n.attention) {
    const Tensor& av = a.value();
    for (std::size_t i = 0; i < av.size(); ++i) o.attention[i] += av[i] / static_cast<double>(n.attention.size());
  }
  return o;
}

}  // namespace

ForwardResult Captioner::forward(const Tensor& audio, const Tensor& visual, const std::vector<int>& caption,
                                 FusionMode mode) const {
  ad::Tape tape;
  tape.set_grad_enabled(false);
  TapeForward f = forward(tape, audio, visual, caption, mode);
  ForwardResult r;
  r.logits = f.logits.value();
  r.memory_length = f.memory.value().rows();
  r.decoder_flops = f.decoder_flops;
  if (f.fusion) r.fusion = collect(*f.fusion);
  return r;
}

fusion::FusionOutput Captioner::inspect_fusion(const Tensor& audio, const Tensor& visual) const {
  ad::Tape tape;
  tape.set_grad_enabled(false);
  std::optional<fusion::FusionNodes> nodes;
  build_memory(tape, audio, visual, FusionMode::gated, &nodes);
  if (!nodes) throw InvalidInput("inspect_fusion: no visual input");
  return collect(*nodes);
}

std::vector<int> Captioner::decode_greedy(const Tensor& audio, const Tensor& visual, std::size_t max_len,
                                          FusionMode mode, const DecodeOptions& options) const {
  std::vector<int> out;
  if (max_len == 0) return out;
  ad::Tape tape;
  tape.set_grad_enabled(false);
  const ad::Var memory = build_memory(tape, audio, visual, mode);
  std::vector<int> tokens{kBos};
  while (out.size() < max_len) {
    const ad::Var logits = decode_logits(tape, memory, tokens);
    const auto last = logits.value().row(logits.value().rows() - 1);
    int best = 0;
    for (std::size_t j = 1; j < last.size(); ++j)
      if (last[j] > last[static_cast<std::size_t>(best)]) best = static_cast<int>(j);
    if (best == kEos && !options.force_steps) break;
    out.push_back(best);
    tokens.push_back(best);
  }
  return out;
}

// ---- checkpoints -----------------------------------------------------------

namespace {

constexpr char kMagic[8] = {'E', 'V', 'A', 'C', 'K', 'P', 'T', '1'};

void put_u64(std::ostream& os, std::uint64_t v) {
  unsigned char b[8];
  for (int i = 0; i < 8; ++i) b[i] = static_cast<unsigned char>(v >> (8 * i));
  os.write(reinterpret_cast<const char*>(b), 8);
}

std::uint64_t get_u64(std::istream& is) {
  unsigned char b[8];
  if (!is.read(reinterpret_cast<char*>(b), 8)) throw InvalidInput("checkpoint truncated");
  std::uint64_t v = 0;
  for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(b[i]) << (8 * i);
  return v;
}

std::string get_bytes(std::istream& is, std::uint64_t n) {
  if (n > (1ULL << 32)) throw InvalidInput("checkpoint field too large");
  std::string s(n, '\0');
  if (!is.read(s.data(), static_cast<std::streamsize>(n))) throw InvalidInput("checkpoint truncated");
  return s;
}

}  // namespace

void Captioner::save(const std::string& path) const {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw InvalidInput("cannot open checkpoint for writing: " + path);
  os.write(kMagic, sizeof(kMagic));
  const std::string header = to_json(config_).dump();
  put_u64(os, header.size());
  os.write(header.data(), static_cast<std::streamsize>(header.size()));
  put_u64(os, params_.items().size());
  for (const auto& [name, t] : params_.items()) {
    put_u64(os, name.size());
    os.write(name.data(), static_cast<std::streamsize>(name.size()));
    put_u64(os, t.rank());
    for (auto e : t.shape()) put_u64(os, e);
    for (double v : t.data()) put_u64(os, std::bit_cast<std::uint64_t>(v));
  }
  if (!os) throw InvalidInput("failed writing checkpoint: " + path);
}

Captioner Captioner::load(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw InvalidInput("cannot open checkpoint: " + path);
  char magic[8];
  if (!is.read(magic, 8) || std::memcmp(magic, kMagic, 8) != 0) throw InvalidInput("not a checkpoint: " + path);
  const std::string header = get_bytes(is, get_u64(is));
  json cfg_json;
  try {
    cfg_json = json::parse(header);
  } catch (const json::exception& e) {
    throw InvalidInput(std::string("checkpoint header: ") + e.what());
  }
  Captioner model(config_from_json(cfg_json));
  const std::uint64_t count = get_u64(is);
  if (count != model.params_.items().size()) throw InvalidInput("checkpoint parameter count does not match header");
  std::set<std::string> seen;
  for (std::uint64_t i = 0; i < count; ++i) {
    const std::string name = get_bytes(is, get_u64(is));
    if (!model.params_.contains(name)) throw InvalidInput("checkpoint has unexpected parameter " + name);
    if (!seen.insert(name).second) throw InvalidInput("checkpoint repeats parameter " + name);
    Tensor& dst = model.params_.get(name);
    const std::uint64_t rank = get_u64(is);
    if (rank > 8) throw InvalidInput("checkpoint rank too large for " + name);
    Shape shape;
    for (std::uint64_t r = 0; r < rank; ++r) shape.push_back(get_u64(is));
    if (shape != dst.shape()) {
      throw InvalidInput("checkpoint shape " + shape_str(shape) + " for " + name + " does not match config " +
                         shape_str(dst.shape()));
    }
    for (auto& v : dst.data()) v = std::bit_cast<double>(get_u64(is));
  }
  return model;
}

}  // namespace evacap::model
