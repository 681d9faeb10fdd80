#pragma once

#include <cstdint>
#include <optional>
#include <string>

namespace confguard {

/// One step of a generation stream: the top-1 probability the model assigned
/// to the token it emitted at this position. `token_text` is display-only and
/// never consulted by detection logic.
struct TokenEvent {
    std::uint64_t index = 0;
    double top1_prob = 0.0;
    std::optional<std::string> token_text{};
    bool is_eos = false;

    bool operator==(const TokenEvent&) const = default;
};

} // namespace confguard
