#pragma once

#include <sstream>
#include <string>
#include <vector>

#include "feedrank/ranking.hpp"

namespace feedrank::test_support {

/// Ranking over `ids` in the given order (scores n, n-1, ..., 1).
inline Ranking ranked(const std::string& qid, const std::vector<std::string>& ids) {
    std::vector<ScoredDoc> items;
    for (std::size_t i = 0; i < ids.size(); ++i) items.push_back({ids[i], static_cast<double>(ids.size() - i)});
    return Ranking::from_ordered(qid, std::move(items));
}

inline std::istringstream text(const std::string& s) { return std::istringstream(s); }

}  // namespace feedrank::test_support
