#include "cotlab/model.hpp"

#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>

#include "cotlab/kernels.hpp"
#include "cotlab/rng.hpp"
#include "forward_internal.hpp"

namespace cotlab {

namespace {

constexpr char kMagic[8] = {'C', 'O', 'T', 'L', 'A', 'B', 'W', 'T'};
constexpr std::uint32_t kVersion = 1;

void write_u32(std::ostream& os, std::uint32_t x) {
  unsigned char b[4] = {static_cast<unsigned char>(x), static_cast<unsigned char>(x >> 8),
                        static_cast<unsigned char>(x >> 16), static_cast<unsigned char>(x >> 24)};
  os.write(reinterpret_cast<const char*>(b), 4);
}

void write_u64(std::ostream& os, std::uint64_t x) {
  write_u32(os, static_cast<std::uint32_t>(x));
  write_u32(os, static_cast<std::uint32_t>(x >> 32));
}

std::uint32_t read_u32(std::istream& is) {
  unsigned char b[4];
  is.read(reinterpret_cast<char*>(b), 4);
  return static_cast<std::uint32_t>(b[0]) | (static_cast<std::uint32_t>(b[1]) << 8) |
         (static_cast<std::uint32_t>(b[2]) << 16) | (static_cast<std::uint32_t>(b[3]) << 24);
}

std::uint64_t read_u64(std::istream& is) {
  std::uint64_t lo = read_u32(is);
  std::uint64_t hi = read_u32(is);
  return lo | (hi << 32);
}

void write_tensor(std::ostream& os, const double* v, std::size_t n) {
  for (std::size_t t = 0; t < n; ++t)
    write_u32(os, std::bit_cast<std::uint32_t>(static_cast<float>(v[t])));
}

void read_tensor(std::istream& is, double* v, std::size_t n) {
  for (std::size_t t = 0; t < n; ++t)
    v[t] = static_cast<double>(std::bit_cast<float>(read_u32(is)));
}

void fill_gaussian(Rng& rng, double* v, std::size_t n, double stddev) {
  for (std::size_t t = 0; t < n; ++t) v[t] = rng.gaussian(stddev);
}

// Tensors in their declared on-disk order. pos_emb present only when the
// positional scheme is absolute-learned.
template <typename Fn>
void for_each_tensor(Weights& w, const ModelConfig& cfg, Fn&& fn) {
  fn(w.tok_emb.data(), w.tok_emb.size());
  if (cfg.positional == Positional::AbsoluteLearned) fn(w.pos_emb.data(), w.pos_emb.size());
  for (LayerWeights& lw : w.layers) {
    fn(lw.ln1_gamma.data(), lw.ln1_gamma.size());
    fn(lw.ln1_beta.data(), lw.ln1_beta.size());
    fn(lw.wq.data(), lw.wq.size());
    fn(lw.bq.data(), lw.bq.size());
    fn(lw.wk.data(), lw.wk.size());
    fn(lw.bk.data(), lw.bk.size());
    fn(lw.wv.data(), lw.wv.size());
    fn(lw.bv.data(), lw.bv.size());
    fn(lw.wo.data(), lw.wo.size());
    fn(lw.bo.data(), lw.bo.size());
    fn(lw.ln2_gamma.data(), lw.ln2_gamma.size());
    fn(lw.ln2_beta.data(), lw.ln2_beta.size());
    fn(lw.w1.data(), lw.w1.size());
    fn(lw.b1.data(), lw.b1.size());
    fn(lw.w2.data(), lw.w2.size());
    fn(lw.b2.data(), lw.b2.size());
  }
  fn(w.lnf_gamma.data(), w.lnf_gamma.size());
  fn(w.lnf_beta.data(), w.lnf_beta.size());
  fn(w.unembed.data(), w.unembed.size());
  fn(w.unembed_bias.data(), w.unembed_bias.size());
}

void allocate_weights(Weights& w, const ModelConfig& cfg) {
  const int d = cfg.d_model;
  w.tok_emb = Matrix(cfg.vocab_size, d);
  if (cfg.positional == Positional::AbsoluteLearned) w.pos_emb = Matrix(cfg.max_seq_len, d);
  w.layers.resize(cfg.n_layers);
  for (LayerWeights& lw : w.layers) {
    lw.ln1_gamma.assign(d, 1.0);
    lw.ln1_beta.assign(d, 0.0);
    lw.wq = Matrix(d, d);
    lw.wk = Matrix(d, d);
    lw.wv = Matrix(d, d);
    lw.wo = Matrix(d, d);
    lw.bq.assign(d, 0.0);
    lw.bk.assign(d, 0.0);
    lw.bv.assign(d, 0.0);
    lw.bo.assign(d, 0.0);
    lw.ln2_gamma.assign(d, 1.0);
    lw.ln2_beta.assign(d, 0.0);
    lw.w1 = Matrix(d, cfg.d_ff);
    lw.b1.assign(cfg.d_ff, 0.0);
    lw.w2 = Matrix(cfg.d_ff, d);
    lw.b2.assign(d, 0.0);
  }
  w.lnf_gamma.assign(d, 1.0);
  w.lnf_beta.assign(d, 0.0);
  w.unembed = Matrix(d, cfg.vocab_size);
  w.unembed_bias.assign(cfg.vocab_size, 0.0);
}

}  // namespace

void ModelConfig::validate() const {
  if (n_layers < 1 || n_heads < 1 || d_model < 1 || d_ff < 1 || vocab_size < 1)
    fail(ErrorCode::BadConfig, "all model dimensions must be >= 1");
  if (d_model % n_heads != 0)
    fail(ErrorCode::BadConfig, "d_model must be divisible by n_heads");
  if (max_seq_len < 2) fail(ErrorCode::BadConfig, "max_seq_len must be >= 2");
  if (positional == Positional::Rotary && head_dim() % 2 != 0)
    fail(ErrorCode::BadConfig, "rotary positions need an even head dim");
}

double ForwardTrace::final_prob(TokenId token) const {
  const double* row = logits.row(logits.rows - 1);
  return std::exp(row[token] - detail::logsumexp(row, logits.cols));
}

Vec ForwardTrace::final_probs() const {
  const double* row = logits.row(logits.rows - 1);
  const double lse = detail::logsumexp(row, logits.cols);
  Vec p(logits.cols);
  for (int j = 0; j < logits.cols; ++j) p[j] = std::exp(row[j] - lse);
  return p;
}

AttnTensors scale_attention(const AttnTensors& a, double scale) {
  AttnTensors out = a;
  for (auto& layer : out)
    for (Matrix& head : layer)
      for (double& x : head.v) x *= scale;
  return out;
}

TracedModel::TracedModel(const ModelConfig& cfg) : cfg_(cfg) {
  cfg_.validate();
  allocate_weights(w_, cfg_);
  init_weights();
}

void TracedModel::init_weights() {
  Rng rng(cfg_.seed);
  const double emb_std = 0.5;
  const double proj_std = 1.0 / std::sqrt(static_cast<double>(cfg_.d_model));
  const double ff_std = 1.0 / std::sqrt(static_cast<double>(cfg_.d_ff));
  fill_gaussian(rng, w_.tok_emb.data(), w_.tok_emb.size(), emb_std);
  if (cfg_.positional == Positional::AbsoluteLearned)
    fill_gaussian(rng, w_.pos_emb.data(), w_.pos_emb.size(), emb_std);
  for (LayerWeights& lw : w_.layers) {
    fill_gaussian(rng, lw.wq.data(), lw.wq.size(), proj_std);
    fill_gaussian(rng, lw.wk.data(), lw.wk.size(), proj_std);
    fill_gaussian(rng, lw.wv.data(), lw.wv.size(), proj_std);
    fill_gaussian(rng, lw.wo.data(), lw.wo.size(), proj_std);
    fill_gaussian(rng, lw.w1.data(), lw.w1.size(), proj_std);
    fill_gaussian(rng, lw.w2.data(), lw.w2.size(), ff_std);
  }
  fill_gaussian(rng, w_.unembed.data(), w_.unembed.size(), proj_std);
}

void TracedModel::save_file(const std::string& path) const {
  std::ofstream os(path, std::ios::binary);
  if (!os) fail(ErrorCode::IoFailure, "cannot open for write: " + path);
  os.write(kMagic, sizeof(kMagic));
  write_u32(os, kVersion);
  write_u32(os, static_cast<std::uint32_t>(cfg_.n_layers));
  write_u32(os, static_cast<std::uint32_t>(cfg_.n_heads));
  write_u32(os, static_cast<std::uint32_t>(cfg_.d_model));
  write_u32(os, static_cast<std::uint32_t>(cfg_.d_ff));
  write_u32(os, static_cast<std::uint32_t>(cfg_.vocab_size));
  write_u32(os, static_cast<std::uint32_t>(cfg_.max_seq_len));
  write_u64(os, cfg_.seed);
  write_u32(os, cfg_.positional == Positional::Rotary ? 1u : 0u);
  auto& w = const_cast<Weights&>(w_);
  for_each_tensor(w, cfg_, [&os](double* v, std::size_t n) { write_tensor(os, v, n); });
  if (!os) fail(ErrorCode::IoFailure, "short write: " + path);
}

TracedModel TracedModel::load_file(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) fail(ErrorCode::IoFailure, "cannot open: " + path);
  char magic[8];
  is.read(magic, sizeof(magic));
  if (!is || std::memcmp(magic, kMagic, sizeof(kMagic)) != 0)
    fail(ErrorCode::IoFailure, "bad magic in weight file: " + path);
  if (read_u32(is) != kVersion) fail(ErrorCode::IoFailure, "unsupported weight file version");
  ModelConfig cfg;
  cfg.n_layers = static_cast<int>(read_u32(is));
  cfg.n_heads = static_cast<int>(read_u32(is));
  cfg.d_model = static_cast<int>(read_u32(is));
  cfg.d_ff = static_cast<int>(read_u32(is));
  cfg.vocab_size = static_cast<int>(read_u32(is));
  cfg.max_seq_len = static_cast<int>(read_u32(is));
  cfg.seed = read_u64(is);
  cfg.positional = read_u32(is) == 1u ? Positional::Rotary : Positional::AbsoluteLearned;
  cfg.validate();
  TracedModel model;
  model.cfg_ = cfg;
  allocate_weights(model.w_, cfg);
  for_each_tensor(model.w_, cfg, [&is](double* v, std::size_t n) { read_tensor(is, v, n); });
  if (!is) fail(ErrorCode::IoFailure, "truncated weight file: " + path);
  return model;
}

void TracedModel::validate_tokens(const TokenSeq& tokens) const {
  if (tokens.empty()) fail(ErrorCode::EmptySpan, "empty token sequence");
  if (static_cast<int>(tokens.size()) > cfg_.max_seq_len)
    fail(ErrorCode::SequenceTooLong, "sequence exceeds max_seq_len");
  for (TokenId id : tokens)
    if (id < 0 || id >= cfg_.vocab_size)
      fail(ErrorCode::TokenOutOfVocab, "token id outside vocabulary");
}

ForwardTrace TracedModel::forward(const TokenSeq& tokens) const {
  validate_tokens(tokens);
  return detail::run_forward(cfg_, w_, tokens, {});
}

ForwardTrace TracedModel::forward_with_intervention(const TokenSeq& tokens,
                                                    const InterventionSpec& spec) const {
  validate_tokens(tokens);
  detail::ForwardOptions opt;
  opt.intervene = &spec;
  return detail::run_forward(cfg_, w_, tokens, opt);
}

double TracedModel::loss(const TokenSeq& tokens, const LossSpec& spec) const {
  validate_tokens(tokens);
  ForwardTrace trace = detail::run_forward(cfg_, w_, tokens, {});
  return detail::loss_from_logits(trace.logits, tokens, spec);
}

AttnTensors TracedModel::capture_attention(const TokenSeq& tokens) const {
  return forward(tokens).attention;
}

double TracedModel::injected_loss(const TokenSeq& tokens, const LossSpec& spec,
                                  const AttnTensors& attn) const {
  validate_tokens(tokens);
  detail::ForwardOptions opt;
  opt.inject = &attn;
  ForwardTrace trace = detail::run_forward(cfg_, w_, tokens, opt);
  return detail::loss_from_logits(trace.logits, tokens, spec);
}

AttnTensors TracedModel::injected_grad(const TokenSeq& tokens, const LossSpec& spec,
                                       const AttnTensors& attn) const {
  validate_tokens(tokens);
  detail::validate_loss_spec(spec, static_cast<int>(tokens.size()), cfg_.vocab_size);
  detail::ForwardCache cache;
  detail::ForwardOptions opt;
  opt.inject = &attn;
  opt.cache = &cache;
  ForwardTrace trace = detail::run_forward(cfg_, w_, tokens, opt);
  return detail::backward_attention(cfg_, w_, tokens, spec, cache, trace.logits);
}

AttnTensors TracedModel::attention_grad(const TokenSeq& tokens, const LossSpec& spec,
                                        double scale) const {
  if (scale < 0.0 || scale > 1.0) fail(ErrorCode::BadConfig, "scale must lie in [0, 1]");
  AttnTensors scaled = scale_attention(capture_attention(tokens), scale);
  return injected_grad(tokens, spec, scaled);
}

Matrix TracedModel::last_row_attention(const TokenSeq& tokens, int layer) const {
  validate_tokens(tokens);
  if (layer < 0 || layer >= cfg_.n_layers)
    fail(ErrorCode::LayerOutOfRange, "attention layer outside [0, L)");

  detail::ForwardOptions opt;
  opt.stop_before_block = layer;
  ForwardTrace prefix = detail::run_forward(cfg_, w_, tokens, opt);
  const Matrix& x = layer == 0 ? prefix.embeddings : prefix.hidden[layer - 1];

  const int T = static_cast<int>(tokens.size());
  const int d = cfg_.d_model;
  const int H = cfg_.n_heads;
  const int dh = cfg_.head_dim();
  const LayerWeights& lw = w_.layers[layer];

  // Only the last position's row is needed: full keys, a single query row.
  Matrix n1(T, d), k(T, d), q1(1, d);
  kernels::layernorm(x.data(), lw.ln1_gamma.data(), lw.ln1_beta.data(), 1e-5,
                     n1.data(), T, d);
  kernels::matmul_nn(n1.data(), lw.wk.data(), lw.bk.data(), k.data(), T, d, d);
  kernels::matmul_nn(n1.row(T - 1), lw.wq.data(), lw.bq.data(), q1.data(), 1, d, d);

  if (cfg_.positional == Positional::Rotary) {
    const int half = dh / 2;
    auto rotate_row = [&](double* row, int pos) {
      for (int h = 0; h < H; ++h) {
        double* hr = row + h * dh;
        for (int t = 0; t < half; ++t) {
          const double theta = pos * std::pow(10000.0, -2.0 * t / dh);
          const double c = std::cos(theta), s = std::sin(theta);
          const double av = hr[2 * t], bv = hr[2 * t + 1];
          hr[2 * t] = av * c - bv * s;
          hr[2 * t + 1] = av * s + bv * c;
        }
      }
    };
    for (int i = 0; i < T; ++i) rotate_row(k.row(i), i);
    rotate_row(q1.data(), T - 1);
  }

  const double score_scale = 1.0 / std::sqrt(static_cast<double>(dh));
  Matrix rows(H, T);
  for (int h = 0; h < H; ++h) {
    double* out = rows.row(h);
    const double* qh = q1.data() + h * dh;
    for (int j = 0; j < T; ++j) {
      const double* kh = k.row(j) + h * dh;
      double acc = 0.0;
      for (int t = 0; t < dh; ++t) acc += qh[t] * kh[t];
      out[j] = score_scale * acc;
    }
    // Softmax over the full row: position T-1 attends to every j <= T-1.
    double mx = out[0];
    for (int j = 1; j < T; ++j) mx = std::max(mx, out[j]);
    double z = 0.0;
    for (int j = 0; j < T; ++j) {
      out[j] = std::exp(out[j] - mx);
      z += out[j];
    }
    const double inv = 1.0 / z;  // same form as the softmax kernel, bit for bit
    for (int j = 0; j < T; ++j) out[j] *= inv;
  }
  return rows;
}

double embedding_std(const TracedModel& model, std::span<const TokenSeq> corpus) {
  if (corpus.empty()) fail(ErrorCode::EmptyCorpus, "embedding_std needs a nonempty corpus");
  const Matrix& emb = model.weights().tok_emb;
  // Welford over every coordinate of every token occurrence, fixed order.
  double mean = 0.0, m2 = 0.0;
  std::size_t n = 0;
  for (const TokenSeq& seq : corpus) {
    for (TokenId id : seq) {
      const double* row = emb.row(id);
      for (int t = 0; t < emb.cols; ++t) {
        ++n;
        const double delta = row[t] - mean;
        mean += delta / static_cast<double>(n);
        m2 += delta * (row[t] - mean);
      }
    }
  }
  if (n == 0) fail(ErrorCode::EmptyCorpus, "corpus contains no tokens");
  return std::sqrt(m2 / static_cast<double>(n));
}

}  // namespace cotlab
