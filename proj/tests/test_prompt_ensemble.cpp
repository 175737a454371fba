#include <algorithm>
#include <numeric>

#include "doctest.h"
#include "eco/classifier.hpp"
#include "eco/prompt_ensemble.hpp"
#include "support.hpp"

using namespace eco;
using testing::random_tensor;

namespace {

struct Fixture {
  EncoderConfig config = testing::small_config();
  EncoderWeights<double> weights = testing::toy_weights<double>(21, config);
  SpecialTokens specials = testing::specials_for(config);
  ClassTokenTable classes;
  Fixture() {
    SeededRng rng(22);
    classes = testing::random_classes(4, config, rng, 3);
  }
  PromptEnsemble<double> ensemble(std::size_t D, std::size_t N, std::uint64_t seed,
                                  double std = 0.5) const {
    SeededRng rng(seed);
    return init_context<double>(D, N, config.width, std, rng);
  }
  // One prompt of `e` as its own single-prompt ensemble.
  static PromptEnsemble<double> slice(const PromptEnsemble<double>& e, std::size_t i) {
    const std::size_t n = e.ctx_len * e.width();
    std::vector<double> v(e.context.values().begin() + static_cast<long>(i * n),
                          e.context.values().begin() + static_cast<long>((i + 1) * n));
    return {1, e.ctx_len, Tensor<double>({1, e.ctx_len, e.width()}, std::move(v))};
  }
};

}  // namespace

TEST_SUITE("prompt_ensemble") {

TEST_CASE("init_context shapes") {
  SeededRng rng(1);
  const auto coop = init_context<float>(1, 16, 64, 0.02, rng);
  CHECK(coop.context.shape() == Shape{1, 16, 64});
  CHECK(coop.trainable_parameters() == 16 * 64);
  const auto eco4 = init_context<float>(4, 4, 64, 0.02, rng);
  CHECK(eco4.context.shape() == Shape{4, 4, 64});
  CHECK(eco4.trainable_parameters() == coop.trainable_parameters());
  const auto zero = init_context<float>(2, 3, 8, 0.0, rng);
  for (float v : zero.context.values()) CHECK(v == 0.0f);
  CHECK_THROWS_AS(init_context<float>(0, 4, 8, 0.02, rng), ConfigError);
  CHECK_THROWS_AS(init_context<float>(4, 0, 8, 0.02, rng), ConfigError);
  SeededRng a(3), b(3);
  CHECK(init_context<float>(4, 4, 8, 0.02, a).context ==
        init_context<float>(4, 4, 8, 0.02, b).context);
}

TEST_CASE("assemble_sequence layout") {
  const auto w = testing::toy_weights<float>(2);
  const SpecialTokens sp = testing::specials_for(w.config);
  ClassTokenTable classes{{{"cat", {7}}, {"dog", {7}}, {"long", {1, 2, 3}}}};
  SeededRng rng(4);
  const auto e = init_context<float>(2, 16, 64, 0.02, rng);
  const auto s = assemble_sequence(e, 1, classes, 0, w, sp);
  CHECK(s.embeddings.extent(0) == 19);
  CHECK(s.eot_index == 18);
  std::vector<std::size_t> expect(16);
  std::iota(expect.begin(), expect.end(), 1);
  CHECK(s.ctx_positions == expect);
  for (std::size_t j = 0; j < 64; ++j) {
    CHECK(s.embeddings(0, j) == w.token_table(sp.sot, j));
    CHECK(s.embeddings(1, j) == e.context(1, 0, j));
    CHECK(s.embeddings(16, j) == e.context(1, 15, j));
    CHECK(s.embeddings(17, j) == w.token_table(7, j));
    CHECK(s.embeddings(18, j) == w.token_table(sp.eot, j));
  }
  CHECK(assemble_sequence(e, 1, classes, 1, w, sp).embeddings == s.embeddings);

  EncoderConfig shortc;
  shortc.max_positions = 18;
  const auto ws = testing::toy_weights<float>(2, shortc);
  CHECK_THROWS_AS(assemble_sequence(e, 0, classes, 0, ws, sp), SequenceLengthError);
  CHECK_THROWS_AS(assemble_sequence(e, 2, classes, 0, w, sp), ContractError);
}

TEST_CASE("single prompt features are the encoder output exactly") {
  const Fixture f;
  const auto e = f.ensemble(1, 3, 5);
  const auto fwd = ensemble_class_features(f.weights, e, f.classes, f.specials);
  for (std::size_t k = 0; k < f.classes.size(); ++k) {
    const auto seq = assemble_sequence(e, 0, f.classes, k, f.weights, f.specials);
    const auto ref = encode_sequence(f.weights, seq.embeddings, seq.eot_index).feature;
    for (std::size_t j = 0; j < ref.size(); ++j) CHECK(fwd.features(k, j) == ref[j]);
  }
}

TEST_CASE("identical prompts reduce to the single prompt") {
  const Fixture f;
  const auto one = f.ensemble(1, 3, 5);
  const auto single = ensemble_class_features(f.weights, one, f.classes, f.specials).features;
  for (std::size_t D : {2u, 3u, 5u}) {
    PromptEnsemble<double> rep{D, 3, Tensor<double>({D, 3, f.config.width})};
    for (std::size_t i = 0; i < D; ++i) {
      std::copy(one.context.values().begin(), one.context.values().end(),
                rep.context.values().begin() + static_cast<long>(i * one.context.size()));
    }
    const auto avg = ensemble_class_features(f.weights, rep, f.classes, f.specials).features;
    for (std::size_t i = 0; i < avg.size(); ++i) {
      CHECK(avg[i] == doctest::Approx(single[i]).epsilon(1e-14));
    }
  }
}

TEST_CASE("D=2 features match two independent encode calls") {
  const Fixture f;
  const auto e = f.ensemble(2, 4, 6);
  const auto fwd = ensemble_class_features(f.weights, e, f.classes, f.specials);
  for (std::size_t k = 0; k < f.classes.size(); ++k) {
    std::vector<double> sum(f.config.output_dim, 0.0);
    for (std::size_t i = 0; i < 2; ++i) {
      const auto s = assemble_sequence(e, i, f.classes, k, f.weights, f.specials);
      const auto ref = testing::straight_line_encode(f.weights, s.embeddings, s.eot_index);
      for (std::size_t j = 0; j < sum.size(); ++j) sum[j] += ref[j];
    }
    for (std::size_t j = 0; j < sum.size(); ++j) {
      CHECK(fwd.features(k, j) == doctest::Approx(sum[j] / 2).epsilon(1e-10));
    }
  }
}

TEST_CASE("permuting prompts leaves features unchanged") {
  const Fixture f;
  const auto e = f.ensemble(4, 2, 7);
  const auto base = ensemble_class_features(f.weights, e, f.classes, f.specials).features;
  std::vector<std::size_t> perm{2, 0, 3, 1};
  PromptEnsemble<double> p = e;
  const std::size_t n = 2 * f.config.width;
  for (std::size_t i = 0; i < 4; ++i) {
    std::copy_n(e.context.values().begin() + static_cast<long>(perm[i] * n), n,
                p.context.values().begin() + static_cast<long>(i * n));
  }
  const auto permuted = ensemble_class_features(f.weights, p, f.classes, f.specials).features;
  for (std::size_t i = 0; i < base.size(); ++i) CHECK(std::abs(base[i] - permuted[i]) <= 1e-12);
}

TEST_CASE("threads do not change features or gradients") {
  const Fixture f;
  const auto e = f.ensemble(3, 2, 8);
  EnsembleOptions one, many;
  many.threads = 4;
  const auto a = ensemble_class_features(f.weights, e, f.classes, f.specials, one);
  const auto b = ensemble_class_features(f.weights, e, f.classes, f.specials, many);
  CHECK(a.features == b.features);
  SeededRng rng(9);
  const auto g = random_tensor<double>({4, f.config.output_dim}, rng);
  CHECK(scatter_feature_grads(g, a, f.weights, 1) == scatter_feature_grads(g, b, f.weights, 3));
}

TEST_CASE("scatter: zero in, zero out; bad shapes rejected") {
  const Fixture f;
  const auto e = f.ensemble(2, 3, 10);
  const auto fwd = ensemble_class_features(f.weights, e, f.classes, f.specials);
  const auto g = scatter_feature_grads(Tensor<double>({4, f.config.output_dim}), fwd, f.weights);
  CHECK(g.shape() == Shape{2, 3, f.config.width});
  for (double v : g.values()) CHECK(v == 0.0);
  CHECK_THROWS_AS(scatter_feature_grads(Tensor<double>({3, f.config.output_dim}), fwd, f.weights),
                  ContractError);
  auto broken = fwd;
  broken.caches.pop_back();
  CHECK_THROWS_AS(scatter_feature_grads(Tensor<double>({4, f.config.output_dim}), broken, f.weights),
                  ContractError);
}

TEST_CASE("each of two prompts gets half its single-prompt gradient") {
  const Fixture f;
  const auto e = f.ensemble(2, 3, 11);
  SeededRng rng(12);
  const auto dfeat = random_tensor<double>({4, f.config.output_dim}, rng);
  const auto both = scatter_feature_grads(
      dfeat, ensemble_class_features(f.weights, e, f.classes, f.specials), f.weights);
  for (std::size_t i = 0; i < 2; ++i) {
    const auto alone = Fixture::slice(e, i);
    const auto gi = scatter_feature_grads(
        dfeat, ensemble_class_features(f.weights, alone, f.classes, f.specials), f.weights);
    for (std::size_t j = 0; j < gi.size(); ++j) {
      CHECK(both[i * gi.size() + j] == doctest::Approx(0.5 * gi[j]).epsilon(1e-12));
    }
  }
}

TEST_CASE("context gradient matches finite differences") {
  const Fixture f;
  for (bool normalize : {false, true}) {
    CAPTURE(normalize);
    EnsembleOptions opt;
    opt.normalize_before_average = normalize;
    const auto e = f.ensemble(2, 2, 13);
    SeededRng rng(14);
    const auto queries = random_tensor<double>({5, f.config.output_dim}, rng);
    const std::vector<std::uint32_t> labels{0, 1, 2, 3, 1};
    const double tau = 0.5;
    const auto fwd = ensemble_class_features(f.weights, e, f.classes, f.specials, opt);
    const auto lg = cross_entropy(queries, labels, fwd.features, tau);
    const auto analytic = scatter_feature_grads(lg.d_text_features, fwd, f.weights);
    const auto numeric = finite_difference_grad(
        [&](const Tensor<double>& ctx) {
          const PromptEnsemble<double> p{2, 2, ctx};
          const auto ff = ensemble_class_features(f.weights, p, f.classes, f.specials, opt);
          return cross_entropy(queries, labels, ff.features, tau).loss;
        },
        e.context, 1e-4);
    double scale = 0;
    for (double v : numeric.values()) scale = std::max(scale, std::abs(v));
    CHECK(max_relative_error(analytic.values(), numeric.values(), 1e-3 * scale) <= 1e-4);
  }
}

TEST_CASE("prototype bank equals on-the-fly features and carries fingerprints") {
  const Fixture f;
  const auto e = f.ensemble(3, 2, 15);
  const auto bank = precompute_prototypes(f.weights, e, f.classes, f.specials);
  CHECK(bank.prototypes ==
        ensemble_class_features(f.weights, e, f.classes, f.specials).features);
  CHECK(bank.encoder_hash == f.weights.hash());
  CHECK(bank.ensemble_hash == e.hash());
  CHECK(bank.classes() == 4);
  CHECK(bank.dim() == f.config.output_dim);
  auto moved = e;
  moved.context[0] += 1.0;
  CHECK(moved.hash() != e.hash());
}

TEST_CASE("class table validation") {
  ClassTokenTable one{{{"a", {1}}}};
  CHECK_THROWS_AS(one.validate(10), ConfigError);
  ClassTokenTable empty_tokens{{{"a", {1}}, {"b", {}}}};
  CHECK_THROWS_AS(empty_tokens.validate(10), ConfigError);
  ClassTokenTable oov{{{"a", {1}}, {"b", {10}}}};
  CHECK_THROWS_AS(oov.validate(10), VocabularyError);
  ClassTokenTable ok{{{"a", {1}}, {"b", {9}}}};
  CHECK_NOTHROW(ok.validate(10));
}

}  // TEST_SUITE
