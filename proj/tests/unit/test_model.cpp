#include <doctest.h>

#include "msl/core/grad_check.hpp"
#include "msl/core/mgt_io.hpp"
#include "msl/model/checkpoint.hpp"
#include "msl/model/model.hpp"
#include "test_util.hpp"

#include <filesystem>

using namespace msl;
using namespace msl::model;
using msl::testing::random_tensor;
using msl::testing::scramble;
using msl::testing::tiny_config;
using msl::testing::weighted_sum;
using TF = Tensor<float>;
using TD = Tensor<double>;

namespace {

bool bitwise_equal(const TF& a, const TF& b) {
  return a.shape() == b.shape() && (a.values() == b.values()).all();
}

}  // namespace

TEST_CASE("desk config dimensions") {
  const ModelConfig c;
  CHECK(c.channels(64) == 16);
  CHECK(c.channels(256) == 64);
  CHECK(c.channels(512) == 128);
  CHECK(c.feature_size() == 16);
  CHECK(c.tokens_per_group() == 16);
  CHECK(c.token_dim() == 1024);
}

TEST_CASE("config text roundtrips and rejects unknown keys") {
  ModelConfig c = tiny_config();
  c.width = 0.3;
  CHECK(ModelConfig::from_text(c.to_text()) == c);
  CHECK_THROWS_WITH_AS(ModelConfig::from_text("colour = 3\n"), doctest::Contains("unknown key"),
                       std::invalid_argument);
  CHECK_THROWS_AS(ModelConfig::from_text("patch = 8\n"), std::invalid_argument);
}

TEST_CASE("encoder maps 64x64 to a 16x16 feature map and is deterministic") {
  const MslModel<float> m(ModelConfig{});
  const TF x = random_tensor<float>({2, 1, 64, 64}, 1, 0, 1);
  const TF f = m.encode(Modality::CT, x);
  CHECK(f.shape() == Shape{2, 64, 16, 16});
  CHECK(bitwise_equal(f, m.encode(Modality::CT, x)));
  const TF z = m.encode(Modality::MRI, TF(Shape{1, 1, 64, 64}));
  CHECK(z.values().allFinite());
  CHECK_THROWS_AS(m.encode(Modality::CT, TF(Shape{1, 1, 32, 32})), ShapeError);
}

TEST_CASE("tokenize") {
  MslModel<float> m(ModelConfig{});
  SUBCASE("16x16 map gives 16 tokens") {
    const TF t = m.tokenize(random_tensor<float>({1, 64, 16, 16}, 2));
    CHECK(t.shape() == Shape{1, 16, 256});
  }
  SUBCASE("zero features give the projection bias") {
    TF bias = *m.find("tokens.proj.b");
    bias.mutable_values() = random_tensor<float>({256}, 5).values();
    const TF t = m.tokenize(TF(Shape{1, 64, 16, 16}));
    for (Index i = 0; i < 16; ++i)
      for (Index d = 0; d < 256; ++d) CHECK(t.values()[i * 256 + d] == bias.values()[d]);
  }
  SUBCASE("indivisible spatial dims are rejected") {
    CHECK_THROWS_WITH_AS(m.tokenize(TF(Shape{1, 64, 10, 16})), doctest::Contains("not divisible"),
                         ShapeError);
  }
  SUBCASE("tokens follow raster patch order") {
    TF index_map(Shape{1, 1, 16, 16});
    for (Index i = 0; i < 256; ++i) index_map.mutable_values()[i] = static_cast<float>(i);
    const TF p = patchify(index_map, 4);
    for (Index t = 0; t < 16; ++t) {
      const Index py = t / 4, px = t % 4;
      CHECK(p.values()[t * 16] == static_cast<float>(py * 4 * 16 + px * 4));
    }
    CHECK(bitwise_equal(unpatchify(p, 1, 16, 16, 4), index_map));
  }
}

TEST_CASE("token groups exist exactly for the present modalities") {
  MslModel<float> m(ModelConfig{});
  const TF ct = m.tokenize(random_tensor<float>({2, 64, 16, 16}, 3));
  const TF mri = m.tokenize(random_tensor<float>({2, 64, 16, 16}, 4));

  const auto both = m.interact(ct, mri);
  for (int g = 0; g < kGroupCount; ++g) {
    REQUIRE(both.groups[g].defined());
    CHECK(both.groups[g].shape() == Shape{2, 16, 1024});
  }
  const auto mri_only = m.interact(TF(), mri);
  CHECK(mri_only.has(Group::IntraMRI));
  CHECK(mri_only.has(Group::InterMRI2CT));
  CHECK_FALSE(mri_only.has(Group::IntraCT));
  CHECK_FALSE(mri_only.has(Group::InterCT2MRI));
  const auto ct_only = m.interact(ct, TF());
  CHECK(ct_only.has(Group::IntraCT));
  CHECK(ct_only.has(Group::InterCT2MRI));
  CHECK_FALSE(ct_only.has(Group::IntraMRI));
  CHECK_FALSE(ct_only.has(Group::InterMRI2CT));
  CHECK_THROWS_WITH_AS(m.interact(TF(), TF()), doctest::Contains("at least one modality"),
                       std::invalid_argument);
}

TEST_CASE("attention rows over the present slots sum to one") {
  ModelConfig c;
  c.heads = 4;
  MslModel<float> m(c);
  const TF mri = m.tokenize(random_tensor<float>({1, 64, 16, 16}, 6));
  AttentionTrace<float> trace;
  m.interact(TF(), mri, &trace);
  REQUIRE(trace.weights.size() == 2);
  for (const TF& w : trace.weights) {
    CHECK(w.shape() == Shape{4, 33, 33});  // class token + two groups of 16
    for (Index r = 0; r < w.size() / 33; ++r) {
      CHECK(w.values().segment(r * 33, 33).template cast<double>().sum() == doctest::Approx(1.0).epsilon(1e-5));
    }
  }
}

TEST_CASE("group order does not matter once slots are fixed") {
  MslModel<double> m(tiny_config());
  scramble(m, 10);
  const Index G = m.config().tokens_per_group(), D = m.config().model_dim;
  std::vector<SlotInput<double>> fwd;
  for (int g = 0; g < kGroupCount; ++g) {
    fwd.push_back({static_cast<Group>(g), random_tensor<double>({2, G, D}, 20 + g)});
  }
  const std::vector<SlotInput<double>> rev(fwd.rbegin(), fwd.rend());
  const auto a = m.interact_slots(fwd);
  const auto b = m.interact_slots(rev);
  for (int g = 0; g < kGroupCount; ++g) {
    CHECK((a.groups[g].values() - b.groups[g].values()).abs().maxCoeff() < 1e-12);
  }
}

TEST_CASE("enhanced-feature composition") {
  MslModel<float> m(ModelConfig{});
  const Shape s{1, 16, 1024};
  const TF a = random_tensor<float>(s, 30), b = random_tensor<float>(s, 31);
  const TF c = random_tensor<float>(s, 32), d = random_tensor<float>(s, 33);

  SUBCASE("zero inter-modality groups reduce to the intra sum") {
    TokenGroups<float> g;
    g[Group::IntraCT] = a;
    g[Group::IntraMRI] = b;
    g[Group::InterCT2MRI] = TF(s);
    g[Group::InterMRI2CT] = TF(s);
    TokenGroups<float> only;
    only[Group::IntraCT] = add(a, b);
    only[Group::InterCT2MRI] = TF(s);
    CHECK(bitwise_equal(m.compose(g), m.compose(only)));
  }
  SUBCASE("both modalities add intra and inter features") {
    TokenGroups<float> g;
    g[Group::IntraCT] = a;
    g[Group::InterCT2MRI] = b;
    g[Group::InterMRI2CT] = c;
    g[Group::IntraMRI] = d;
    const auto [ect, emri] = m.enhance(g);
    CHECK(bitwise_equal(ect, add(a, c)));
    CHECK(bitwise_equal(emri, add(d, b)));
  }
  SUBCASE("MRI-only: the inter group stands in for CT") {
    TokenGroups<float> g;
    g[Group::InterMRI2CT] = c;
    g[Group::IntraMRI] = d;
    const auto [ect, emri] = m.enhance(g);
    CHECK(bitwise_equal(ect, c));
    CHECK(bitwise_equal(emri, d));
  }
  SUBCASE("CT-only: the inter group stands in for MRI") {
    TokenGroups<float> g;
    g[Group::IntraCT] = a;
    g[Group::InterCT2MRI] = b;
    const auto [ect, emri] = m.enhance(g);
    CHECK(bitwise_equal(ect, a));
    CHECK(bitwise_equal(emri, b));
  }
  SUBCASE("output matches the decoder input size") {
    TokenGroups<float> g;
    g[Group::IntraCT] = a;
    g[Group::InterCT2MRI] = b;
    CHECK(m.compose(g).shape() == Shape{1, 64, 16, 16});
  }
  SUBCASE("empty group set is rejected") {
    CHECK_THROWS_AS(m.compose(TokenGroups<float>{}), std::invalid_argument);
  }
}

TEST_CASE("conditional instance norm") {
  const Index C = 5, E = 4;
  Linear<double> embed{random_tensor<double>({1, E}, 40), random_tensor<double>({E}, 41)};
  CinLayer<double> layer{{random_tensor<double>({E, C}, 42), random_tensor<double>({C}, 43)},
                         {random_tensor<double>({E, C}, 44), random_tensor<double>({C}, 45)}};
  const TD x = random_tensor<double>({2, C, 6, 6}, 46, -2, 3);
  const TD lam = lambda_scalar<double>(2, 0.3);

  SUBCASE("unit scale and zero shift give standardized channels") {
    CinLayer<double> id{{TD(Shape{E, C}), TD(Shape{C}, 1.0)}, {TD(Shape{E, C}), TD(Shape{C})}};
    const TD y = cin(x, embed, id, lam);
    for (Index n = 0; n < 2; ++n)
      for (Index c = 0; c < C; ++c) {
        const auto ch = y.values().segment((n * C + c) * 36, 36);
        const double mu = ch.mean();
        const double sd = std::sqrt((ch - mu).square().mean());
        CHECK(std::abs(mu) < 1e-4);
        CHECK(std::abs(sd - 1.0) < 1e-4);
      }
  }
  SUBCASE("constant channel outputs beta") {
    const TD flat(Shape{1, C, 4, 4}, 2.5);
    const TD lam1 = lambda_scalar<double>(1, 0.7);
    const TD y = cin(flat, embed, layer, lam1);
    const auto [gamma, beta] = cin_affine(embed, layer, lam1);
    for (Index c = 0; c < C; ++c)
      for (Index i = 0; i < 16; ++i) CHECK(y.values()[c * 16 + i] == beta.values()[c]);
  }
  SUBCASE("width mismatch is rejected") {
    CHECK_THROWS_WITH_AS(cin(random_tensor<double>({1, 3, 4, 4}, 1), embed, layer, lambda_scalar<double>(1, 0)),
                         doctest::Contains("does not match channels"), ShapeError);
  }
  SUBCASE("finite differences w.r.t. features and lambda map") {
    const double ex = grad_check<double>(
        [&](const TD& t) { return weighted_sum(cin(t, embed, layer, lam), 47); }, x, 1e-3);
    CHECK(ex < 1e-3);
    const TD map = random_tensor<double>({2, 1, 3, 3}, 48, 0.1, 0.9);
    const double el = grad_check<double>(
        [&](const TD& t) { return weighted_sum(cin(x, embed, layer, t), 49); }, map, 1e-4);
    CHECK(el < 1e-3);
  }
}

TEST_CASE("constant lambda map decodes bitwise like the scalar") {
  MslModel<float> m(ModelConfig{});
  scramble(m, 60, 0.05);
  const TF rep = relu(random_tensor<float>({2, 64, 16, 16}, 61));
  for (float v : {0.0f, 0.25f, 0.5f, 1.0f}) {
    const TF scalar = m.decode(rep, lambda_scalar<float>(2, v));
    const TF map = m.decode(rep, TF(Shape{2, 1, 16, 16}, v));
    CHECK(bitwise_equal(scalar, map));
  }
  CHECK(m.decode(rep, lambda_scalar<float>(2, 0.5)).shape() == Shape{2, 1, 64, 64});
}

TEST_CASE("lambda must lie in [0, 1] and match the representation grid") {
  MslModel<float> m(ModelConfig{});
  const TF rep(Shape{1, 64, 16, 16});
  CHECK_THROWS_WITH_AS(m.decode(rep, TF(Shape{1, 1, 1, 1}, 1.5f)), doctest::Contains("outside [0, 1]"),
                       std::invalid_argument);
  CHECK_THROWS_AS(m.decode(rep, TF(Shape{1, 1, 1, 1}, -0.1f)), std::invalid_argument);
  CHECK_THROWS_AS(lambda_scalar<float>(1, 2.0), std::invalid_argument);
  CHECK_THROWS_AS(m.decode(rep, TF(Shape{1, 1, 8, 8}, 0.5f)), ShapeError);
}

TEST_CASE("forward over input combinations and a lambda sweep") {
  MslModel<float> m(ModelConfig{});
  const TF ct = random_tensor<float>({1, 1, 64, 64}, 70, 0, 1);
  const TF mri = random_tensor<float>({1, 1, 64, 64}, 71, 0, 1);
  const auto both = m.represent(ct, mri);
  std::vector<TF> sweep;
  for (double l : {0.0, 0.25, 0.5, 0.75, 1.0}) sweep.push_back(m.decode(both.rep, lambda_scalar<float>(1, l)));
  for (const TF& img : sweep) {
    CHECK(img.shape() == Shape{1, 1, 64, 64});
    CHECK(img.values().allFinite());
  }
  CHECK(bitwise_equal(sweep[0], m.forward(ct, mri, lambda_scalar<float>(1, 0.0))));

  const TF mri_only = m.forward(TF(), mri, lambda_scalar<float>(1, 0.0));
  CHECK(mri_only.shape() == Shape{1, 1, 64, 64});
  CHECK(mri_only.values().allFinite());
  const TF ct_only = m.forward(ct, TF(), lambda_scalar<float>(1, 1.0));
  CHECK(ct_only.values().allFinite());
  CHECK_THROWS_WITH_AS(m.forward(TF(), TF(), lambda_scalar<float>(1, 0.0)),
                       doctest::Contains("at least one"), std::invalid_argument);
}

TEST_CASE("full forward pass gradient w.r.t. the encoder input") {
  MslModel<double> m(tiny_config());
  scramble(m, 80, 0.2);
  const TD mri = random_tensor<double>({1, 1, 16, 16}, 81, 0, 1);
  const TD ct = random_tensor<double>({1, 1, 16, 16}, 82, 0, 1);
  const TD lam = random_tensor<double>({1, 1, 4, 4}, 83, 0.1, 0.9);
  // The tiny config normalizes 2x2 maps, which puts ReLU kinks within 1e-4 of
  // many inputs; a smaller step keeps the central difference on one side.
  const double e_ct = grad_check<double>(
      [&](const TD& t) { return weighted_sum(m.forward(t, mri, lam), 84); }, ct, 1e-5);
  const double e_mri = grad_check<double>(
      [&](const TD& t) { return weighted_sum(m.forward(ct, t, lam), 85); }, mri, 1e-5);
  MESSAGE("relative error CT input " << e_ct << ", MRI input " << e_mri);
  CHECK(e_ct < 1e-3);
  CHECK(e_mri < 1e-3);
}

TEST_CASE("double-precision copy matches the float model") {
  MslModel<float> m(ModelConfig{});
  const MslModel<double> d = m.cast<double>();
  const TF x = random_tensor<float>({1, 1, 64, 64}, 90, 0, 1);
  const TF yf = m.forward(x, TF(), lambda_scalar<float>(1, 0.5));
  const TD yd = d.forward(x.cast<double>(), TD(), lambda_scalar<double>(1, 0.5));
  CHECK((yf.values().cast<double>() - yd.values()).abs().maxCoeff() < 1e-3);
}

TEST_CASE("checkpoint save/load roundtrips bitwise") {
  MslModel<float> m(tiny_config());
  scramble(m, 100);
  const auto path = std::filesystem::temp_directory_path() / "msl_test_model.mslc";
  save_checkpoint(path, make_checkpoint(m));
  const MslModel<float> back = model_from_checkpoint(load_checkpoint(path));
  CHECK(back.config() == m.config());
  REQUIRE(back.parameters().size() == m.parameters().size());
  for (std::size_t i = 0; i < m.parameters().size(); ++i) {
    CHECK(back.parameters()[i].name == m.parameters()[i].name);
    CHECK(bitwise_equal(back.parameters()[i].tensor, m.parameters()[i].tensor));
  }
  const std::string bytes = read_file(path);
  CHECK(bytes.substr(0, 4) == "MSLC");
  CHECK(encode_checkpoint(decode_checkpoint(bytes)) == bytes);
  CHECK_THROWS_WITH_AS(decode_checkpoint("MSLX0000"), doctest::Contains("bad magic"), std::runtime_error);
  CHECK_THROWS_AS(decode_checkpoint(bytes.substr(0, bytes.size() - 3)), std::runtime_error);
  std::filesystem::remove(path);
}

TEST_CASE("content hash is FNV-1a") {
  CHECK(content_hash("") == "cbf29ce484222325");
  CHECK(content_hash("a") == "af63dc4c8601ec8c");
}
