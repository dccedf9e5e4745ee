#pragma once

// Ability- and language-specific weights by parameter decomposition:
//
//   R(A) = alpha * (theta_ability_lang - theta_base) - beta * (theta_lang - theta_base)
//
// theta_ability_lang is the backbone trained on ability + general data over
// the union of ability and language key neurons; theta_lang is trained over the
// language key neurons only.

#include <string_view>

#include "maet/tensor_store.hpp"

namespace maet {

inline constexpr double kDefaultAlpha = 0.8;
inline constexpr double kDefaultBeta = 0.2;

/// Per element: diffs are taken in binary32 (as delta_ops::subtract), the
/// weighted sum in binary64, then rounded to an F32 tensor. Metadata:
/// kind=ability, ability=<id>, alpha, beta, and input digests.
TensorStore extract_ability(const TensorStore& theta_ability_lang, const TensorStore& theta_lang,
                            const TensorStore& theta_base, double alpha, double beta,
                            std::string_view ability_id = "ability",
                            const Destination& dest = Destination::memory());

/// R(L) = theta_lang_trained - theta_base; the alpha = 1, beta = 0 case.
/// Metadata kind=language, language=<id>.
TensorStore extract_language(const TensorStore& theta_lang_trained, const TensorStore& theta_base,
                             std::string_view language_id = "language",
                             const Destination& dest = Destination::memory());

}  // namespace maet
