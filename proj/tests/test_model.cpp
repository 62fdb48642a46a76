#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <cstdio>
#include <fstream>

#include "cotlab/model.hpp"
#include "cotlab/rng.hpp"
#include "helpers.hpp"

using namespace cotlab;
using testutil::max_abs_diff;
using testutil::random_tokens;
using testutil::tiny_config;

TEST_CASE("single BOS token: T=1 and every attention row is [1.0]") {
  TracedModel model(tiny_config());
  ForwardTrace trace = model.forward({tok::kBos});
  CHECK(trace.seq_len() == 1);
  for (const auto& layer : trace.attention)
    for (const Matrix& head : layer) {
      REQUIRE(head.rows == 1);
      CHECK(head.at(0, 0) == 1.0);
    }
}

TEST_CASE("forward is bit-identical across repeated calls") {
  TracedModel model(tiny_config());
  Rng rng(11);
  TokenSeq tokens = random_tokens(rng, 24);
  ForwardTrace a = model.forward(tokens);
  ForwardTrace b = model.forward(tokens);
  CHECK(a.logits.v == b.logits.v);
  CHECK(a.hidden.back().v == b.hidden.back().v);
}

TEST_CASE("attention rows are causal and row-stochastic") {
  ModelConfig cfg = tiny_config(4, 2, 16, 32, 21);
  TracedModel model(cfg);
  Rng rng(5);
  TokenSeq tokens = random_tokens(rng, 32);
  ForwardTrace trace = model.forward(tokens);
  for (const auto& layer : trace.attention)
    for (const Matrix& head : layer)
      for (int i = 0; i < head.rows; ++i) {
        double sum = 0.0;
        for (int j = 0; j < head.cols; ++j) {
          if (j > i) CHECK(head.at(i, j) == 0.0);
          sum += head.at(i, j);
        }
        CHECK(std::abs(sum - 1.0) <= 1e-6);
      }
}

TEST_CASE("residual decomposition reconstructs the stream at every layer") {
  ModelConfig cfg = tiny_config(4, 2, 16, 32, 33);
  TracedModel model(cfg);
  Rng rng(17);
  TokenSeq tokens = random_tokens(rng, 64);
  ForwardTrace trace = model.forward(tokens);
  double worst = 0.0;
  for (int l = 0; l < cfg.n_layers; ++l) {
    const Matrix& prev = l == 0 ? trace.embeddings : trace.hidden[l - 1];
    for (std::size_t t = 0; t < prev.size(); ++t) {
      const double recon = (prev.v[t] + trace.attn_out[l].v[t]) + trace.mlp_out[l].v[t];
      worst = std::max(worst, std::abs(recon - trace.hidden[l].v[t]));
    }
  }
  CHECK(worst <= 1e-10);
}

TEST_CASE("residual decomposition holds under rotary positions too") {
  ModelConfig cfg = tiny_config(3, 2, 16, 32, 9);
  cfg.positional = Positional::Rotary;
  TracedModel model(cfg);
  Rng rng(29);
  TokenSeq tokens = random_tokens(rng, 20);
  ForwardTrace trace = model.forward(tokens);
  for (int l = 0; l < cfg.n_layers; ++l) {
    const Matrix& prev = l == 0 ? trace.embeddings : trace.hidden[l - 1];
    for (std::size_t t = 0; t < prev.size(); ++t) {
      const double recon = (prev.v[t] + trace.attn_out[l].v[t]) + trace.mlp_out[l].v[t];
      CHECK(std::abs(recon - trace.hidden[l].v[t]) <= 1e-10);
    }
  }
}

TEST_CASE("forward input validation") {
  TracedModel model(tiny_config());
  CHECK_THROWS_AS(model.forward({}), Error);
  CHECK_THROWS_AS(model.forward(TokenSeq(65, 3)), Error);          // > max_seq_len
  CHECK_THROWS_AS(model.forward({tok::kBos, 300}), Error);         // out of vocab
  CHECK_THROWS_AS(model.forward({tok::kBos, -1}), Error);
}

TEST_CASE("zero-noise intervention is the identity on traces") {
  TracedModel model(tiny_config());
  Rng rng(3);
  TokenSeq tokens = random_tokens(rng, 16);
  InterventionSpec spec;
  spec.component = Component::HiddenState;
  spec.layers = {0, 1};
  spec.span = {0, 16};
  spec.noise_std = 0.0;
  spec.noise_seed = 99;
  ForwardTrace clean = model.forward(tokens);
  ForwardTrace zapped = model.forward_with_intervention(tokens, spec);
  CHECK(clean.logits.v == zapped.logits.v);
  for (int l = 0; l < 2; ++l) {
    CHECK(clean.hidden[l].v == zapped.hidden[l].v);
    CHECK(clean.attn_out[l].v == zapped.attn_out[l].v);
    CHECK(clean.mlp_out[l].v == zapped.mlp_out[l].v);
  }
}

TEST_CASE("same noise seed reproduces corrupted logits bit-for-bit") {
  TracedModel model(tiny_config());
  Rng rng(4);
  TokenSeq tokens = random_tokens(rng, 16);
  InterventionSpec spec;
  spec.component = Component::AttnOutput;
  spec.layers = {1};
  spec.span = {2, 9};
  spec.noise_std = 1.5;
  spec.noise_seed = 1234;
  ForwardTrace a = model.forward_with_intervention(tokens, spec);
  ForwardTrace b = model.forward_with_intervention(tokens, spec);
  CHECK(a.logits.v == b.logits.v);
  ForwardTrace clean = model.forward(tokens);
  CHECK(a.logits.v != clean.logits.v);
}

TEST_CASE("intervention validation rejects bad spans and layers") {
  TracedModel model(tiny_config());
  TokenSeq tokens = {tok::kBos, 10, 20};
  InterventionSpec spec;
  spec.span = {0, 4};  // beyond T=3
  CHECK_THROWS_AS(model.forward_with_intervention(tokens, spec), Error);
  spec.span = {0, 2};
  spec.layers = {7};
  CHECK_THROWS_AS(model.forward_with_intervention(tokens, spec), Error);
}

// Empirically measured once on the default toy model and frozen. The spec's
// floor is 90%; the observed rate is asserted exactly as a regression pin.
TEST_CASE("3-sigma noise over everything flips the top-1 prediction almost always") {
  ModelConfig cfg;  // default desk-scale config
  cfg.seed = 2024;
  TracedModel model(cfg);

  Rng rng(501);
  std::vector<TokenSeq> prompts;
  for (int s = 0; s < 50; ++s) prompts.push_back(random_tokens(rng, 24));
  const double sigma = embedding_std(model, prompts);
  REQUIRE(sigma > 0.0);

  std::vector<int> all_layers;
  for (int l = 0; l < cfg.n_layers; ++l) all_layers.push_back(l);

  int changed = 0;
  for (std::size_t s = 0; s < prompts.size(); ++s) {
    const TokenSeq& tokens = prompts[s];
    ForwardTrace clean = model.forward(tokens);
    InterventionSpec spec;
    spec.component = Component::HiddenState;
    spec.layers = all_layers;
    spec.span = {0, static_cast<int>(tokens.size())};
    spec.noise_std = 3.0 * sigma;
    spec.noise_seed = cotlab::mix_seed({777, s});
    ForwardTrace noisy = model.forward_with_intervention(tokens, spec);

    auto argmax = [](const Matrix& logits) {
      const double* row = logits.row(logits.rows - 1);
      int best = 0;
      for (int j = 1; j < logits.cols; ++j)
        if (row[j] > row[best]) best = j;
      return best;
    };
    if (argmax(clean.logits) != argmax(noisy.logits)) ++changed;
  }
  CHECK(changed >= 45);  // >= 90% of 50
  CHECK(changed == 48);  // frozen measurement
}

TEST_CASE("uniform logits give loss ln V; a certain label gives loss 0") {
  ModelConfig cfg = tiny_config();
  TracedModel model(cfg);
  model.weights().unembed.fill(0.0);
  std::fill(model.weights().unembed_bias.begin(), model.weights().unembed_bias.end(), 0.0);
  TokenSeq tokens = {tok::kBos, 5, 9, 12};

  const double lnV = std::log(static_cast<double>(cfg.vocab_size));
  CHECK(model.loss(tokens, LossSpec::answer_label(7)) == doctest::Approx(lnV).epsilon(1e-12));
  CHECK(model.loss(tokens, LossSpec::next_token({1, 4})) == doctest::Approx(lnV).epsilon(1e-12));

  // Saturate one label: softmax probability becomes exactly 1 in double.
  model.weights().unembed_bias[9] = 1000.0;
  CHECK(model.loss(tokens, LossSpec::answer_label(9)) == 0.0);
}

TEST_CASE("next-token loss matches recomputation from emitted logits") {
  TracedModel model(tiny_config(2, 2, 16, 32, 77));
  Rng rng(8);
  TokenSeq tokens = random_tokens(rng, 12);
  TokenRange span{5, 8};  // 3-token span
  const double got = model.loss(tokens, LossSpec::next_token(span));

  ForwardTrace trace = model.forward(tokens);
  double want = 0.0;
  for (int p = span.begin; p < span.end; ++p) {
    const double* row = trace.logits.row(p - 1);
    double mx = row[0];
    for (int j = 1; j < trace.logits.cols; ++j) mx = std::max(mx, row[j]);
    double z = 0.0;
    for (int j = 0; j < trace.logits.cols; ++j) z += std::exp(row[j] - mx);
    want += mx + std::log(z) - row[tokens[p]];
  }
  want /= span.size();
  CHECK(testutil::rel_err(got, want) <= 1e-12);
}

TEST_CASE("loss spec validation") {
  TracedModel model(tiny_config());
  TokenSeq tokens = {tok::kBos, 5, 9};
  CHECK_THROWS_AS(model.loss(tokens, LossSpec::next_token({2, 2})), Error);   // empty
  CHECK_THROWS_AS(model.loss(tokens, LossSpec::next_token({0, 2})), Error);   // needs predecessor
  CHECK_THROWS_AS(model.loss(tokens, LossSpec::answer_label(999)), Error);
}

TEST_CASE("embedding_std: zero variance cases and two-pass oracle") {
  ModelConfig cfg = tiny_config();
  TracedModel model(cfg);

  SUBCASE("constant embedding table") {
    model.weights().tok_emb.fill(0.25);
    std::vector<TokenSeq> corpus = {{1, 1, 1}, {7}};
    CHECK(embedding_std(model, corpus) == 0.0);
  }

  SUBCASE("matches two-pass variance oracle") {
    Rng rng(91);
    std::vector<TokenSeq> corpus;
    for (int s = 0; s < 100; ++s) corpus.push_back(random_tokens(rng, 1 + rng.next_below(30)));
    const double got = embedding_std(model, corpus);

    // Two-pass: mean first, then squared deviations, population convention.
    const Matrix& emb = model.weights().tok_emb;
    double mean = 0.0;
    std::size_t n = 0;
    for (const TokenSeq& seq : corpus)
      for (TokenId id : seq)
        for (int t = 0; t < emb.cols; ++t) {
          mean += emb.at(id, t);
          ++n;
        }
    mean /= static_cast<double>(n);
    double ss = 0.0;
    for (const TokenSeq& seq : corpus)
      for (TokenId id : seq)
        for (int t = 0; t < emb.cols; ++t) {
          const double c = emb.at(id, t) - mean;
          ss += c * c;
        }
    const double want = std::sqrt(ss / static_cast<double>(n));
    CHECK(testutil::rel_err(got, want) <= 1e-10);
  }

  SUBCASE("empty corpus rejected") {
    std::vector<TokenSeq> corpus;
    CHECK_THROWS_AS(embedding_std(model, corpus), Error);
  }
}

TEST_CASE("weight file round trip is stable and loads reproduce saved logits") {
  ModelConfig cfg = tiny_config(2, 2, 16, 32, 15);
  TracedModel model(cfg);
  const std::string p1 = testutil::temp_path("cotlab_w1.bin");
  const std::string p2 = testutil::temp_path("cotlab_w2.bin");
  model.save_file(p1);
  TracedModel loaded = TracedModel::load_file(p1);
  CHECK(loaded.config() == cfg);
  loaded.save_file(p2);

  auto slurp = [](const std::string& p) {
    std::ifstream is(p, std::ios::binary);
    return std::string(std::istreambuf_iterator<char>(is), {});
  };
  CHECK(slurp(p1) == slurp(p2));  // f32 -> double -> f32 is lossless

  Rng rng(2);
  TokenSeq tokens = random_tokens(rng, 10);
  ForwardTrace a = loaded.forward(tokens);
  ForwardTrace b = TracedModel::load_file(p2).forward(tokens);
  CHECK(a.logits.v == b.logits.v);
  std::remove(p1.c_str());
  std::remove(p2.c_str());
}

TEST_CASE("last_row_attention equals the full forward's attention row bitwise") {
  for (Positional pos : {Positional::AbsoluteLearned, Positional::Rotary}) {
    ModelConfig cfg = tiny_config(3, 2, 16, 32, 44);
    cfg.positional = pos;
    TracedModel model(cfg);
    Rng rng(6);
    TokenSeq tokens = random_tokens(rng, 19);
    ForwardTrace full = model.forward(tokens);
    for (int layer = 0; layer < cfg.n_layers; ++layer) {
      Matrix rows = model.last_row_attention(tokens, layer);
      REQUIRE(rows.rows == cfg.n_heads);
      for (int h = 0; h < cfg.n_heads; ++h)
        for (int j = 0; j < rows.cols; ++j)
          CHECK(rows.at(h, j) == full.attention[layer][h].at(tokens.size() - 1, j));
    }
  }
}

TEST_CASE("model config validation") {
  ModelConfig cfg = tiny_config();
  cfg.d_model = 15;  // not divisible by heads
  CHECK_THROWS_AS(TracedModel{cfg}, Error);
  cfg = tiny_config();
  cfg.n_layers = 0;
  CHECK_THROWS_AS(TracedModel{cfg}, Error);
}
