#include "replearn/replacement.hpp"

#include <stdexcept>

namespace replearn {

std::vector<std::size_t> frozen_set(std::size_t layer_count, std::size_t interval) {
    if (interval < 2)
        throw std::invalid_argument(
            "freeze interval must be >= 2: adjacent frozen layers would have to compose "
            "their parameters from each other");
    std::vector<std::size_t> out;
    for (std::size_t i = interval; i <= layer_count; i += interval)
        if (i != layer_count) out.push_back(i); // the final layer is never frozen
    return out;
}

} // namespace replearn
