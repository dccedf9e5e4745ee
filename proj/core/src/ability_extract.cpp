#include "maet/ability_extract.hpp"

#include <array>
#include <cmath>

#include "maet/delta_ops.hpp"
#include "maet/error.hpp"
#include "maet/numeric.hpp"

namespace maet {

namespace {

TensorStore decompose(const TensorStore& theta_ability_lang, const TensorStore& theta_lang,
                      const TensorStore& theta_base, double alpha, double beta, Metadata metadata,
                      const Destination& dest) {
  if (!std::isfinite(alpha) || !std::isfinite(beta)) {
    throw InvalidArgument("alpha and beta must be finite");
  }
  require_aligned(theta_base, theta_ability_lang, "base", "ability+language model");
  require_aligned(theta_base, theta_lang, "base", "language model");
  metadata["alpha"] = format_real(alpha);
  metadata["beta"] = format_real(beta);
  metadata["base"] = theta_base.digest();
  metadata["ability_model"] = theta_ability_lang.digest();
  metadata["language_model"] = theta_lang.digest();
  return transform_store(theta_base, dest, metadata, [&](const TensorMeta& m) {
    const std::vector<float> base = theta_base.read_f32(m.name);
    const std::vector<float> ability_delta = subtract(theta_ability_lang.read_f32(m.name), base);
    const std::vector<float> language_delta = subtract(theta_lang.read_f32(m.name), base);
    const std::array<WeightedValues, 2> terms{WeightedValues{ability_delta, alpha},
                                              WeightedValues{language_delta, -beta}};
    return narrow_checked(combine_values(terms), m.name);
  });
}

}  // namespace

TensorStore extract_ability(const TensorStore& theta_ability_lang, const TensorStore& theta_lang,
                            const TensorStore& theta_base, double alpha, double beta,
                            std::string_view ability_id, const Destination& dest) {
  Metadata metadata{{"kind", "ability"}, {"ability", std::string(ability_id)}};
  return decompose(theta_ability_lang, theta_lang, theta_base, alpha, beta, std::move(metadata),
                   dest);
}

TensorStore extract_language(const TensorStore& theta_lang_trained, const TensorStore& theta_base,
                             std::string_view language_id, const Destination& dest) {
  Metadata metadata{{"kind", "language"}, {"language", std::string(language_id)}};
  return decompose(theta_lang_trained, theta_base, theta_base, 1.0, 0.0, std::move(metadata), dest);
}

}  // namespace maet
