#pragma once

#include <string>
#include <vector>

#include "needforge/domain.hpp"

namespace testing {

inline std::string fixture(const std::string& rel) { return std::string(NEEDFORGE_FIXTURES) + "/" + rel; }

/// 2 needs, 2 categories (one per domain pair), 3 behaviors.
inline needforge::Taxonomy tiny_taxonomy() {
    using namespace needforge;
    return Taxonomy({{0, "Family Care"}, {1, "Business Travel"}},
                    {{0, "Fruit", SemanticDomain::GroceryFreshProduce}, {1, "Economy Hotel", SemanticDomain::Accommodation}},
                    {{0, "Fresh Strawberry Box", 0}, {1, "Seasonal Fruit Platter", 0}, {2, "Budget Single Room", 1}});
}

inline needforge::Interaction interaction(int need, int cat, int beh, std::int64_t ts,
                                          needforge::LocationType zone = needforge::LocationType::Home) {
    return {need, cat, beh, needforge::SpatioTemporalContext::make(ts, 31.23, 121.47, zone)};
}

}  // namespace testing
