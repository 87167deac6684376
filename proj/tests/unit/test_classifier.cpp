#include <doctest.h>

#include <cmath>
#include <random>

#include "oracles.hpp"
#include "temp_dir.hpp"
#include "tubelet/classifier.hpp"
#include "tubelet/ops.hpp"
#include "tubelet/random.hpp"

using namespace tubelet;

namespace {

ClassifierConfig tiny_config(EmbedMode mode) {
  ClassifierConfig cfg;
  cfg.in_channels = 2;
  cfg.roi_res = 8;
  cfg.spatial_out = 2;
  cfg.widths = {3, 6};
  cfg.embed = mode;
  cfg.seed = 5;
  return cfg;
}

Tubelet random_tubelet(const ClassifierConfig& cfg, int frames, std::mt19937_64& rng) {
  Tubelet tb;
  tb.features = oracle::random_tensor({frames, cfg.in_channels, cfg.roi_res, cfg.roi_res}, rng).cast<float>();
  for (int t = 0; t < frames; ++t) tb.frames.push_back(t);
  std::uniform_real_distribution<float> u(0, 1);
  for (auto& c : tb.context) c = u(rng);
  std::bernoulli_distribution coin(0.5);
  for (int t = 0; t < frames; ++t) tb.instance_labels.push_back(coin(rng));
  tb.label = tubelet_label(tb.instance_labels);
  return tb;
}

// Closed-form parameter count, independent of the layout code.
std::size_t expected_params(const ClassifierConfig& cfg) {
  std::size_t n = 0;
  int in = cfg.in_channels;
  for (int w : cfg.widths) {
    n += std::size_t(w) * in * 9 + w;
    if (cfg.embed == EmbedMode::EmbedAll) n += 2 * (std::size_t(w) * w + w) + std::size_t(2 * w) * 5 + 2 * w;
    in = w;
  }
  const std::size_t d = std::size_t(cfg.widths.back()) * cfg.spatial_out * cfg.spatial_out;
  n += d + 1;
  if (cfg.embed == EmbedMode::EmbedLast) n += d * 5 + d + 2 * d + 1;
  else n += d + 1;
  return n;
}

std::vector<TensorD> as_double(const ParamSet& p) {
  std::vector<TensorD> out;
  for (const auto& e : p) out.push_back(e.value.cast<double>());
  return out;
}

double sigmoid(double z) { return 1.0 / (1.0 + std::exp(-z)); }

constexpr EmbedMode kModes[] = {EmbedMode::None, EmbedMode::EmbedAll, EmbedMode::EmbedLast};

}  // namespace

TEST_CASE("config arithmetic and validation") {
  CHECK(block_count(32, 4) == 3);
  CHECK(block_count(128, 4) == 5);
  CHECK_THROWS_AS(block_count(24, 4), std::invalid_argument);
  CHECK(doubling_widths(64, 3) == std::vector<int>{64, 128, 256});
  const ClassifierConfig f4 = default_classifier_config(LayerTag::F4);
  CHECK(f4.in_channels == 32);
  CHECK(f4.roi_res == 32);
  CHECK(f4.widths == std::vector<int>{64, 128, 256});
  CHECK(f4.feature_length() == 256 * 16);
  CHECK(f4.epochs == 500);
  CHECK(f4.lr == 1e-5);
  for (LayerTag tag : kAllLayers) CHECK_NOTHROW(validate(default_classifier_config(tag)));

  ClassifierConfig bad = f4;
  bad.widths = {64, 128, 512};
  CHECK_THROWS_AS(validate(bad), std::invalid_argument);
  bad = f4;
  bad.widths = {64, 128};
  CHECK_THROWS_AS(validate(bad), std::invalid_argument);
  bad = f4;
  bad.context_dim = 4;
  CHECK_THROWS_AS(validate(bad), std::invalid_argument);

  CHECK(parse_embed_mode("LAST") == EmbedMode::EmbedLast);
  CHECK(parse_embed_mode("EmbedAll") == EmbedMode::EmbedAll);
  CHECK_THROWS_AS(parse_embed_mode("both"), std::invalid_argument);
  ClassifierConfig round = tiny_config(EmbedMode::EmbedAll);
  round.lr = 3.5e-4;
  round.w_ins = 0.25;
  CHECK(config_from_json(config_to_json(round)) == round);
}

TEST_CASE("parameter counts match the closed form and the checkpoint payload") {
  for (LayerTag tag : kAllLayers)
    for (EmbedMode mode : kModes) {
      const ClassifierConfig cfg = default_classifier_config(tag, mode);
      const ParamSet p = init_params(cfg);
      CHECK(p.parameter_count() == expected_params(cfg));
      CHECK(profile(cfg).parameters == expected_params(cfg));
      std::size_t header = 12;
      for (const auto& e : p) header += 8 + e.name.size() + 4 * e.value.rank();
      CHECK((encode_checkpoint(p).size() - header) / 4 == profile(cfg).parameters);
    }
}

TEST_CASE("default F4 budget and FC 5 to 4096") {
  const ClassifierConfig cfg = default_classifier_config(LayerTag::F4, EmbedMode::EmbedLast);
  const ProfileReport r = profile(cfg);
  CHECK(r.parameters >= 300000);
  CHECK(r.parameters <= 500000);
  std::size_t context = 0;
  for (const auto& l : r.layers)
    if (l.name == "context") context = l.params;
  CHECK(context == 24576);
  const ParamSet p = init_params(cfg);
  CHECK(p.at("context.weight").numel() + p.at("context.bias").numel() == 24576);
}

TEST_CASE("profile FLOPs follow the shapes") {
  const ClassifierConfig cfg = default_classifier_config(LayerTag::F4, EmbedMode::None);
  const ProfileReport r = profile(cfg);
  // 3x3 stride-2 convs: 32->16->8->4 spatial.
  const std::uint64_t conv = 2ull * (64 * 32 * 9 * 16 * 16 + 128 * 64 * 9 * 8 * 8 + 256 * 128 * 9 * 4 * 4);
  const std::uint64_t head = 2ull * 4096;
  CHECK(r.classifier_flops_per_frame == conv + head);
  CHECK(r.tubelet_flops == 2ull * 4096);
  CHECK(r.roi_align_flops_per_frame == 2ull * 4 * 32 * 32 * 32);
  CHECK(r.total_flops_per_frame == r.classifier_flops_per_frame + r.roi_align_flops_per_frame);

  for (EmbedMode mode : kModes) {
    const auto img = profile(default_classifier_config(LayerTag::IMG, mode));
    const auto f4 = profile(default_classifier_config(LayerTag::F4, mode));
    CHECK(double(img.total_flops_per_frame) / double(f4.total_flops_per_frame) >= 5.0);
  }
}

TEST_CASE("encoder shapes, zero weights and sharing") {
  const ClassifierConfig cfg = default_classifier_config(LayerTag::F4, EmbedMode::None);
  std::mt19937_64 rng(1);
  Graph<float> g;
  ParamSet p = init_params(cfg);
  std::vector<Tensor> zeros;
  for (const auto& e : p) zeros.push_back(Tensor(e.value.shape()));
  ClassifierGraph<float> zero_model(g, cfg, zeros, false);
  Var x = g.input(oracle::random_tensor({32, 32, 32}, rng).cast<float>());
  const Tensor& enc = g.value(zero_model.encode_instance(x));
  CHECK(enc.numel() == 256u * 16);
  for (float v : enc.data()) CHECK(v == 0.0f);

  Graph<float> h;
  std::vector<Tensor> values;
  for (const auto& e : p) values.push_back(e.value);
  ClassifierGraph<float> model(h, cfg, values, false);
  const Tensor inst = oracle::random_tensor({32, 32, 32}, rng).cast<float>();
  const Tensor a = h.value(model.encode_instance(h.input(inst)));
  const Tensor b = h.value(model.encode_instance(h.input(inst)));
  CHECK(std::ranges::equal(a.data(), b.data()));
  CHECK_THROWS_AS(model.encode_instance(h.input(Tensor({16, 32, 32}))), std::invalid_argument);
  CHECK_THROWS_AS(model.encode_instance(h.input(Tensor({32, 16, 16}))), std::invalid_argument);
}

TEST_CASE("context embedding") {
  const ClassifierConfig last = default_classifier_config(LayerTag::F4, EmbedMode::EmbedLast);
  Graph<float> g;
  ParamSet p = init_params(last);
  std::vector<Tensor> values;
  for (const auto& e : p) values.push_back(e.value);
  ClassifierGraph<float> model(g, last, values, false);
  const auto e1 = model.embed_context(g.input(Tensor({5}, std::vector<float>{0.1f, 0.2f, 0.5f, 0.6f, 0.9f})));
  REQUIRE(e1.size() == 1);
  CHECK(g.value(e1[0]).numel() == 4096u);
  const auto e2 = model.embed_context(g.input(Tensor({5}, std::vector<float>{0.1f, 0.2f, 0.5f, 0.7f, 0.9f})));
  CHECK_FALSE(std::ranges::equal(g.value(e1[0]).data(), g.value(e2[0]).data()));
  CHECK_THROWS_AS(model.embed_context(g.input(Tensor({4}))), std::invalid_argument);

  std::vector<Tensor> zeros;
  for (const auto& e : p) zeros.push_back(Tensor(e.value.shape()));
  Graph<float> z;
  ClassifierGraph<float> zero_model(z, last, zeros, false);
  for (float v : z.value(zero_model.embed_context(z.input(Tensor({5}, 0.5f)))[0]).data()) CHECK(v == 0.0f);

  const ClassifierConfig all = default_classifier_config(LayerTag::F4, EmbedMode::EmbedAll);
  Graph<float> a;
  std::vector<Tensor> av;
  for (const auto& e : init_params(all)) av.push_back(e.value);
  ClassifierGraph<float> all_model(a, all, av, false);
  const auto per_block = all_model.embed_context(a.input(Tensor({5}, 0.5f)));
  REQUIRE(per_block.size() == 3);
  CHECK(a.value(per_block[0]).numel() == 128u);
  CHECK(a.value(per_block[2]).numel() == 512u);
}

TEST_CASE("channel attention examples and compositional oracle") {
  const ClassifierConfig cfg = tiny_config(EmbedMode::EmbedAll);
  std::mt19937_64 rng(2);
  std::vector<TensorD> values = as_double(init_params(cfg));
  Graph<double> g;
  ClassifierGraph<double> model(g, cfg, values, false);
  const int c = 3, h = 4, w = 4;
  const TensorD feat = oracle::random_tensor({1, c, h, w}, rng);

  const auto& half = g.value(model.channel_attention_modulate(g.input(feat), g.input(TensorD({2 * c})), 0));
  for (std::size_t i = 0; i < feat.numel(); ++i) CHECK(half[i] == 0.5 * feat[i]);

  std::vector<double> sat(2 * c, 0.0);
  for (int i = c; i < 2 * c; ++i) sat[i] = 50.0;
  const auto& full = g.value(model.channel_attention_modulate(g.input(feat), g.input(TensorD({2 * c}, sat)), 0));
  for (std::size_t i = 0; i < feat.numel(); ++i) CHECK(std::abs(full[i] - feat[i]) < 1e-8);

  const auto& w1 = values[2], &b1 = values[3], &w2 = values[4], &b2 = values[5];
  for (int trial = 0; trial < 10; ++trial) {
    const TensorD f = oracle::random_tensor({1, c, h, w}, rng);
    const TensorD e = oracle::random_tensor({2 * c}, rng, -2, 2);
    std::vector<double> pooled(c, -1e300), a1(c), a2(c);
    for (int ch = 0; ch < c; ++ch)
      for (int k = 0; k < h * w; ++k) pooled[ch] = std::max(pooled[ch], f[ch * h * w + k]);
    for (int o = 0; o < c; ++o) {
      a1[o] = b1[o];
      for (int i = 0; i < c; ++i) a1[o] += w1[o * c + i] * pooled[i];
    }
    for (int o = 0; o < c; ++o) {
      a2[o] = b2[o];
      for (int i = 0; i < c; ++i) a2[o] += w2[o * c + i] * a1[i];
    }
    const auto& out = g.value(model.channel_attention_modulate(g.input(f), g.input(e), 0));
    for (int ch = 0; ch < c; ++ch) {
      const double gate = sigmoid(a2[ch] * e[ch] + e[c + ch]);
      for (int k = 0; k < h * w; ++k) CHECK(std::abs(out[ch * h * w + k] - f[ch * h * w + k] * gate) < 1e-5);
    }
  }
  CHECK_THROWS_AS(model.channel_attention_modulate(g.input(feat), g.input(TensorD({c})), 0), std::invalid_argument);
}

TEST_CASE("temporal max pooling") {
  Graph<double> g;
  Var x = g.input(TensorD({2, 2}, std::vector<double>{1, 5, 3, 2}));
  const auto& m = g.value(max_rows(g, x));
  CHECK(m.storage() == AlignedVector<double>{3, 5});

  std::mt19937_64 rng(3);
  for (int trial = 0; trial < 20; ++trial) {
    const TensorD r = oracle::random_tensor({4, 6}, rng);
    Graph<double> h;
    const auto& got = h.value(max_rows(h, h.input(r)));
    for (int j = 0; j < 6; ++j) {
      double best = r[j];
      for (int i = 1; i < 4; ++i) best = std::max(best, r[i * 6 + j]);
      CHECK(got[j] == best);
    }
  }
}

TEST_CASE("classify_tubelet structure") {
  std::mt19937_64 rng(4);
  for (EmbedMode mode : kModes) {
    const ClassifierConfig cfg = tiny_config(mode);
    const ParamSet p = init_params(cfg);
    const Tubelet tb = random_tubelet(cfg, 4, rng);
    const TubeletScores s = classify_tubelet(tb, p, cfg);
    CHECK(s.instance_logits.size() == 4);

    // Single frame: the tubelet feature is that frame's encoding, so a
    // one-frame tubelet of frame k gives the same instance logit.
    Tubelet single = tb;
    single.features = Tensor({1, 2, 8, 8}, std::vector<float>(tb.features.data().begin() + 2 * 128,
                                                              tb.features.data().begin() + 3 * 128));
    single.frames = {2};
    CHECK(classify_tubelet(single, p, cfg).instance_logits[0] == doctest::Approx(s.instance_logits[2]).epsilon(1e-5));

    // Duplicating a frame leaves the tubelet logit unchanged.
    Tubelet dup = tb;
    std::vector<float> d(tb.features.data().begin(), tb.features.data().end());
    d.insert(d.end(), tb.features.data().begin(), tb.features.data().begin() + 128);
    dup.features = Tensor({5, 2, 8, 8}, d);
    CHECK(classify_tubelet(dup, p, cfg).tubelet_logit == doctest::Approx(s.tubelet_logit).epsilon(1e-6));

    // Permuting frames permutes instance logits and keeps the tubelet logit.
    const int perm[] = {2, 0, 3, 1};
    std::vector<float> pd;
    for (int k : perm) pd.insert(pd.end(), tb.features.data().begin() + k * 128, tb.features.data().begin() + (k + 1) * 128);
    Tubelet permuted = tb;
    permuted.features = Tensor({4, 2, 8, 8}, pd);
    const TubeletScores ps = classify_tubelet(permuted, p, cfg);
    CHECK(ps.tubelet_logit == doctest::Approx(s.tubelet_logit).epsilon(1e-6));
    for (int i = 0; i < 4; ++i) CHECK(ps.instance_logits[i] == doctest::Approx(s.instance_logits[perm[i]]).epsilon(1e-5));

    Tubelet wrong = tb;
    wrong.features = Tensor({4, 3, 8, 8});
    CHECK_THROWS_AS(classify_tubelet(wrong, p, cfg), std::invalid_argument);
  }
}

TEST_CASE("context sensitivity by embedding mode") {
  std::mt19937_64 rng(5);
  const ClassifierConfig none = tiny_config(EmbedMode::None);
  const ParamSet pn = init_params(none);
  Tubelet tb = random_tubelet(none, 3, rng);
  const float base = classify_tubelet(tb, pn, none).tubelet_logit;
  std::uniform_real_distribution<float> u(0, 1);
  for (int i = 0; i < 20; ++i) {
    for (auto& c : tb.context) c = u(rng);
    CHECK(classify_tubelet(tb, pn, none).tubelet_logit == base);
  }

  const ClassifierConfig last = tiny_config(EmbedMode::EmbedLast);
  const ParamSet pl = init_params(last);
  int differing = 0;
  for (int i = 0; i < 100; ++i) {
    Tubelet a = tb, b = tb;
    for (auto& c : a.context) c = u(rng);
    for (auto& c : b.context) c = u(rng);
    if (classify_tubelet(a, pl, last).tubelet_logit != classify_tubelet(b, pl, last).tubelet_logit) ++differing;
  }
  CHECK(differing > 0);
}

TEST_CASE("loss examples") {
  const std::vector<float> zeros(3, 0.0f);
  const std::vector<int> ones{1, 1, 1};
  CHECK(tubelet_loss(zeros, ones, 0.0f, 1, 1, 1) == doctest::Approx(1.386294).epsilon(1e-6));
  CHECK(tubelet_loss(zeros, ones, 2.0f, 0, 0, 1) == doctest::Approx(std::log1p(std::exp(2.0))).epsilon(1e-12));

  std::mt19937_64 rng(6);
  std::uniform_real_distribution<float> z(-5, 5);
  for (int trial = 0; trial < 50; ++trial) {
    std::vector<float> logits(5);
    std::vector<int> labels(5);
    for (int i = 0; i < 5; ++i) {
      logits[i] = z(rng);
      labels[i] = (trial + i) % 2;
    }
    const float tl = z(rng);
    const int y = trial % 2;
    auto bce = [](double v, int l) { return -(l * std::log(sigmoid(v)) + (1 - l) * std::log(1 - sigmoid(v))); };
    double inst = 0;
    for (int i = 0; i < 5; ++i) inst += bce(logits[i], labels[i]);
    const double want = 0.7 * inst / 5 + 1.3 * bce(tl, y);
    CHECK(std::abs(tubelet_loss(logits, labels, tl, y, 0.7, 1.3) - want) < 1e-6);
  }
  CHECK_THROWS_AS(tubelet_loss(zeros, std::vector<int>{1, 1}, 0.0f, 1, 1, 1), std::invalid_argument);
}

TEST_CASE("graph loss agrees with the scalar loss") {
  std::mt19937_64 rng(7);
  for (EmbedMode mode : kModes) {
    ClassifierConfig cfg = tiny_config(mode);
    cfg.w_ins = 0.6;
    cfg.w_tubelet = 1.4;
    const ParamSet p = init_params(cfg);
    const Tubelet tb = random_tubelet(cfg, 3, rng);
    Graph<double> g;
    ClassifierGraph<double> model(g, cfg, as_double(p), false);
    auto out = model.forward(g.input(tb.features.cast<double>()),
                             g.input(TensorD({5}, std::vector<double>(tb.context.begin(), tb.context.end()))));
    const double graph_loss = g.value(model.loss(out, tb.instance_labels, tb.label)).item();
    const TubeletScores s = classify_tubelet(tb, p, cfg);
    CHECK(graph_loss == doctest::Approx(tubelet_loss(s.instance_logits, tb.instance_labels, s.tubelet_logit, tb.label,
                                                     cfg.w_ins, cfg.w_tubelet))
                            .epsilon(1e-5));
  }
}

TEST_CASE("every parameter gradient matches central differences") {
  std::mt19937_64 rng(8);
  for (EmbedMode mode : kModes) {
    const ClassifierConfig cfg = tiny_config(mode);
    const auto layout = param_layout(cfg);
    const std::vector<TensorD> params = as_double(init_params(cfg));
    const Tubelet tb = random_tubelet(cfg, 3, rng);
    const TensorD features = tb.features.cast<double>();
    const TensorD context({5}, std::vector<double>(tb.context.begin(), tb.context.end()));

    // Analytic gradients from one backward pass.
    Graph<double> g;
    ClassifierGraph<double> model(g, cfg, params, true);
    auto out = model.forward(g.input(features), g.input(context));
    g.backward(model.loss(out, tb.instance_labels, tb.label));

    auto loss_at = [&](const std::vector<TensorD>& ps) {
      Graph<double> h;
      ClassifierGraph<double> m(h, cfg, ps, false);
      auto o = m.forward(h.input(features), h.input(context));
      return h.value(m.loss(o, tb.instance_labels, tb.label)).item();
    };
    const double eps = 1e-6;
    for (std::size_t i = 0; i < params.size(); ++i) {
      const TensorD analytic = g.grad(model.param_vars()[i]);
      double worst = 0;
      std::vector<TensorD> ps = params;
      for (std::size_t k = 0; k < ps[i].numel(); ++k) {
        const double orig = ps[i][k];
        ps[i][k] = orig + eps;
        const double up = loss_at(ps);
        ps[i][k] = orig - eps;
        const double down = loss_at(ps);
        ps[i][k] = orig;
        const double numeric = (up - down) / (2 * eps);
        CHECK(std::isfinite(analytic[k]));
        worst = std::max(worst, std::abs(analytic[k] - numeric) /
                                    std::max({std::abs(analytic[k]), std::abs(numeric), 1e-6}));
      }
      INFO(std::string(to_string(mode)) << " " << layout[i].name);
      CHECK(worst < 1e-3);
    }
  }
}

TEST_CASE("training examples") {
  std::mt19937_64 rng(9);
  ClassifierConfig cfg = tiny_config(EmbedMode::EmbedLast);
  std::vector<Tubelet> set{random_tubelet(cfg, 3, rng), random_tubelet(cfg, 2, rng)};

  SUBCASE("lr 0 keeps the initial parameters") {
    cfg.lr = 0;
    cfg.epochs = 3;
    const TrainResult r = train(set, cfg);
    CHECK(encode_checkpoint(r.params) == encode_checkpoint(init_params(cfg)));
    CHECK(r.log.size() == 3);
  }
  SUBCASE("same seed gives identical checkpoints") {
    cfg.lr = 1e-3;
    cfg.epochs = 4;
    CHECK(encode_checkpoint(train(set, cfg).params) == encode_checkpoint(train(set, cfg).params));
    ClassifierConfig other = cfg;
    other.seed = cfg.seed + 1;
    CHECK(encode_checkpoint(train(set, other).params) != encode_checkpoint(train(set, cfg).params));
  }
  SUBCASE("a separable pair is overfit") {
    for (EmbedMode mode : kModes) {
      ClassifierConfig c = tiny_config(mode);
      c.lr = 1e-2;
      c.epochs = 200;
      Tubelet pos = random_tubelet(c, 3, rng), neg = random_tubelet(c, 3, rng);
      pos.instance_labels = {1, 1, 1};
      pos.label = 1;
      neg.instance_labels = {0, 0, 0};
      neg.label = 0;
      const std::vector<Tubelet> pair{pos, neg};
      int calls = 0;
      const TrainResult r = train(pair, c, [&](const EpochLog& e) { CHECK(e.epoch == ++calls); });
      CHECK(calls == 200);
      INFO(std::string(to_string(mode)));
      CHECK(r.log.back().loss <= 0.5 * r.log.front().loss);
      const double sum = r.log.back().instance_loss * c.w_ins + r.log.back().tubelet_loss * c.w_tubelet;
      CHECK(r.log.back().loss == doctest::Approx(sum).epsilon(1e-9));
    }
  }
  SUBCASE("invalid training sets") {
    CHECK_THROWS_AS(train(std::vector<Tubelet>{}, cfg), std::invalid_argument);
    std::vector<Tubelet> bad = set;
    bad[1].instance_labels.pop_back();
    CHECK_THROWS_AS(train(bad, cfg), std::invalid_argument);
    bad = set;
    bad[0].features = Tensor({3, 3, 8, 8});
    CHECK_THROWS_AS(train(bad, cfg), std::invalid_argument);
  }
}

TEST_CASE("training log lines and model files") {
  const EpochLog e{3, 0.5, 0.25, 0.25};
  const std::string line = format_epoch_log(e);
  CHECK(line.find("\"epoch\":3") != std::string::npos);

  TempDir dir;
  const ClassifierConfig cfg = tiny_config(EmbedMode::EmbedAll);
  const ParamSet p = init_params(cfg);
  save_model(dir / "m.tbkt", p, cfg);
  CHECK(std::filesystem::exists(dir / "m.tbkt.json"));
  const Model m = load_model(dir / "m.tbkt");
  CHECK(m.params == p);
  CHECK(m.config == cfg);

  ParamSet wrong = init_params(tiny_config(EmbedMode::None));
  write_checkpoint(dir / "m.tbkt", wrong);
  CHECK_THROWS(load_model(dir / "m.tbkt"));
}
