#include "confguard/detector.hpp"

#include <string>

namespace confguard {

void Detector::throw_state_finished() {
    throw StateFinished("detector already produced a final verdict");
}

void Detector::throw_index_gap(std::uint64_t expected, std::uint64_t got) {
    throw IndexGap("expected event index " + std::to_string(expected) + ", got " +
                   std::to_string(got));
}

void Detector::throw_window_zero(std::uint64_t index) {
    throw ZeroProbability("window holds a zero probability at index " + std::to_string(index));
}

Verdict run_stream(const DetectorConfig& config, std::span<const TokenEvent> events) {
    Detector detector(config);
    for (const TokenEvent& event : events) {
        const StepOutcome outcome = detector.step(event);
        if (outcome.final()) {
            return *outcome.verdict;
        }
    }
    return Verdict::normal(NormalReason::Eos);
}

} // namespace confguard
