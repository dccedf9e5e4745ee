#include "maet/lingual_combine.hpp"

#include <algorithm>
#include <cmath>

#include "maet/delta_ops.hpp"
#include "maet/error.hpp"
#include "maet/numeric.hpp"

namespace maet {

TensorStore combine_languages(std::vector<LanguageWeight> items, const Destination& dest) {
  if (items.empty()) throw InvalidArgument("combine needs at least one language weight");
  std::sort(items.begin(), items.end(),
            [](const LanguageWeight& a, const LanguageWeight& b) { return a.language < b.language; });
  for (std::size_t i = 1; i < items.size(); ++i) {
    if (items[i].language == items[i - 1].language) {
      throw InvalidArgument("duplicate language id '" + items[i].language + "'");
    }
  }

  const double uniform = 1.0 / static_cast<double>(items.size());
  std::vector<Term> terms;
  Metadata metadata{{"kind", "multilingual"}};
  for (const LanguageWeight& item : items) {
    const double mu = item.mu.value_or(uniform);
    if (!std::isfinite(mu)) throw InvalidArgument("mu for '" + item.language + "' is not finite");
    terms.push_back({item.weight, mu});
    metadata["mu." + item.language] = format_real(mu);
    metadata["weight." + item.language] = item.weight.digest();
  }
  // linear_combine adds its own kind=delta only when absent.
  return linear_combine(terms, dest, metadata);
}

}  // namespace maet
