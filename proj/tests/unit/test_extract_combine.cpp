#include <gtest/gtest.h>

#include <cmath>

#include "maet/ability_extract.hpp"
#include "maet/delta_ops.hpp"
#include "maet/error.hpp"
#include "maet/lingual_combine.hpp"
#include "support.hpp"

using namespace maet;
using namespace maet::testing;

TEST(Extract, DefaultsAndScalarExample) {
  EXPECT_EQ(kDefaultAlpha, 0.8);
  EXPECT_EQ(kDefaultBeta, 0.2);
  const TensorStore base = memory_store({{"w", DType::F32, {2}, std::vector<float>{1, 1}}});
  const TensorStore ability = memory_store({{"w", DType::F32, {2}, std::vector<float>{2, 1}}});
  const TensorStore lang = memory_store({{"w", DType::F32, {2}, std::vector<float>{1, 2}}});
  const TensorStore r = extract_ability(ability, lang, base, 0.8, 0.2, "math");
  EXPECT_EQ(r.read_f32("w"), (std::vector<float>{0.8f, -0.2f}));
  EXPECT_EQ(r.metadata_value("kind"), "ability");
  EXPECT_EQ(r.metadata_value("ability"), "math");
  EXPECT_EQ(r.metadata_value("alpha"), "0.8");
  EXPECT_EQ(r.metadata_value("base"), base.digest());
}

TEST(Extract, BetaZeroIsThePlainDelta) {
  Rng rng(21);
  for (int trial = 0; trial < 100; ++trial) {
    const TensorStore base = toy_store(rng, 1.0);
    const TensorStore ability = perturbed(base, rng, 0.3, 0.5);
    const TensorStore lang = perturbed(base, rng, 0.3, 0.5);
    ASSERT_TRUE(stores_bit_equal(extract_ability(ability, lang, base, 1.0, 0.0), diff(ability, base)));
    ASSERT_TRUE(stores_bit_equal(extract_language(ability, base), diff(ability, base)));
  }
}

TEST(Extract, MisalignedInputsFail) {
  const TensorStore a = memory_store({{"w", DType::F32, {2}, std::vector<float>{1, 1}}});
  const TensorStore b = memory_store({{"v", DType::F32, {2}, std::vector<float>{1, 1}}});
  EXPECT_THROW(extract_ability(a, a, b, 0.8, 0.2), Error);
  EXPECT_THROW(extract_ability(a, a, a, NAN, 0.2), InvalidArgument);
}

TEST(Combine, UniformDefaultAndOrderIndependence) {
  const TensorStore r1 = memory_store({{"w", DType::F32, {2}, std::vector<float>{1, 0}}});
  const TensorStore r2 = memory_store({{"w", DType::F32, {2}, std::vector<float>{0, 1}}});
  const TensorStore uniform_mix = combine_languages({{"de", r1, {}}, {"fr", r2, {}}});
  EXPECT_EQ(uniform_mix.read_f32("w"), (std::vector<float>{0.5, 0.5}));
  EXPECT_EQ(uniform_mix.metadata_value("mu.de"), "0.5");
  EXPECT_EQ(uniform_mix.metadata_value("kind"), "multilingual");

  Rng rng(22);
  for (int trial = 0; trial < 50; ++trial) {
    std::vector<LanguageWeight> items;
    for (int l = 0; l < 4; ++l) {
      items.push_back({"l" + std::to_string(l), toy_store(rng, 1.0), uniform(rng, -1, 1)});
    }
    const std::string forward = combine_languages(items).digest();
    std::reverse(items.begin(), items.end());
    ASSERT_EQ(combine_languages(items).digest(), forward);
  }
}

TEST(Combine, SingleLanguageWithUnitWeightIsIdentity) {
  Rng rng(23);
  for (int trial = 0; trial < 20; ++trial) {
    const TensorStore r = toy_store(rng, 2.0);
    ASSERT_TRUE(stores_bit_equal(combine_languages({{"x", r, 1.0}}), r));
  }
}

TEST(Combine, Errors) {
  const TensorStore r = memory_store({{"w", DType::F32, {1}, std::vector<float>{1}}});
  EXPECT_THROW(combine_languages({}), InvalidArgument);
  EXPECT_THROW(combine_languages({{"a", r, 1.0}, {"a", r, 1.0}}), InvalidArgument);
}
