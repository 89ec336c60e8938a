#include "rpmnet/rng.hpp"

#include <stdexcept>

namespace rpmnet {

std::vector<int> sample_distinct(Rng& rng, int n, int k) {
    if (k > n) throw std::invalid_argument("sample_distinct: k exceeds population");
    std::vector<int> pool(static_cast<size_t>(n));
    for (int i = 0; i < n; ++i) pool[static_cast<size_t>(i)] = i;
    std::vector<int> out;
    out.reserve(static_cast<size_t>(k));
    for (int i = 0; i < k; ++i) {
        const size_t j = static_cast<size_t>(uniform_below(rng, static_cast<uint64_t>(n - i)));
        out.push_back(pool[j]);
        std::swap(pool[j], pool[static_cast<size_t>(n - 1 - i)]);
    }
    return out;
}

}  // namespace rpmnet
