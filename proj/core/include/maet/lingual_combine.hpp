#pragma once

#include <optional>
#include <string>
#include <vector>

#include "maet/tensor_store.hpp"

namespace maet {

struct LanguageWeight {
  std::string language;
  TensorStore weight;
  std::optional<double> mu;  // unset -> 1/n
};

/// Multi-lingual weight: sum of mu_i * R(L_i). Items are accumulated in
/// ascending language-id order regardless of input order, so the output is
/// bit-identical under reordering. Metadata kind=multilingual plus one
/// "mu.<language>" entry per item.
TensorStore combine_languages(std::vector<LanguageWeight> items,
                              const Destination& dest = Destination::memory());

}  // namespace maet
