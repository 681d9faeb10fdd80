#pragma once

#include <cmath>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "confguard/errors.hpp"
#include "confguard/token_event.hpp"

namespace confguard {

enum class Variant { TopOneRun, WindowedPpl };

/// The (P, L, N) triple governing detection, plus variant selection.
/// P is an open-interval bound: a token counts toward a run only when its
/// top-1 probability is strictly greater than P.
struct DetectorConfig {
    double prob_threshold = 0.99;
    std::uint32_t length_threshold = 10;
    std::uint32_t max_new_tokens = 50;
    Variant variant = Variant::TopOneRun;

    void validate() const {
        if (!(prob_threshold > 0.0) || !(prob_threshold < 1.0)) {
            throw InvalidConfig("prob_threshold must lie in (0,1), got " +
                                std::to_string(prob_threshold));
        }
        if (length_threshold < 1) {
            throw InvalidConfig("length_threshold must be >= 1");
        }
        if (max_new_tokens < 1) {
            throw InvalidConfig("max_new_tokens must be >= 1");
        }
        if (length_threshold > max_new_tokens) {
            throw InvalidConfig("length_threshold exceeds max_new_tokens; such a run can never fire");
        }
    }

    bool operator==(const DetectorConfig&) const = default;
};

enum class VerdictKind { Backdoor, Normal };
enum class NormalReason { Eos, Budget };

/// Terminal classification of a stream. Backdoor verdicts carry the index of
/// the firing token and of the first token of the qualifying run.
struct Verdict {
    VerdictKind kind = VerdictKind::Normal;
    std::optional<std::uint64_t> fired_at{};
    std::optional<std::uint64_t> run_start{};
    std::optional<NormalReason> normal_reason{};

    static Verdict backdoor(std::uint64_t fired_at, std::uint64_t run_start) {
        return Verdict{VerdictKind::Backdoor, fired_at, run_start, std::nullopt};
    }
    static Verdict normal(NormalReason reason) {
        return Verdict{VerdictKind::Normal, std::nullopt, std::nullopt, reason};
    }

    bool is_backdoor() const { return kind == VerdictKind::Backdoor; }
    bool operator==(const Verdict&) const = default;
};

/// Result of feeding one event: either the stream continues, or it has been
/// classified and the detector is finished.
struct StepOutcome {
    std::optional<Verdict> verdict{};
    bool final() const { return verdict.has_value(); }
};

/// TopOneRun detection state is a single run counter; nothing else grows with
/// the stream. Kept as a named struct so this can be asserted structurally.
struct TopOneRunState {
    std::uint32_t count = 0;
};
static_assert(sizeof(TopOneRunState) == sizeof(std::uint32_t),
              "TopOneRun state must stay a bare counter");

/// Perplexity of a recorded probability sequence: (prod p_i)^(-1/m),
/// computed in log space. Result is >= 1 whenever all p_i <= 1.
inline double sequence_ppl(std::span<const double> probs) {
    if (probs.empty()) {
        throw EmptySequence("sequence_ppl needs at least one probability");
    }
    double log_sum = 0.0;
    for (double p : probs) {
        if (p == 0.0) {
            throw ZeroProbability("sequence_ppl saw a zero probability");
        }
        log_sum += std::log(p);
    }
    return std::exp(-log_sum / static_cast<double>(probs.size()));
}

/// Streaming state machine over one generation stream. Single writer; feed
/// events in index order via step(). Emits a final Verdict when the run test
/// fires, the stream reports EOS, or the token budget N is exhausted, in that
/// order of precedence at each token.
class Detector {
public:
    explicit Detector(const DetectorConfig& config) : config_(config) {
        config_.validate();
        if (config_.variant == Variant::WindowedPpl) {
            window_ring_.assign(config_.length_threshold, 0.0);
            // Accumulated the same way the window sum is, so a window sitting
            // exactly at P compares equal rather than drifting above.
            const double log_p = std::log(config_.prob_threshold);
            log_threshold_ = 0.0;
            for (std::uint32_t i = 0; i < config_.length_threshold; ++i) {
                log_threshold_ += log_p;
            }
        }
    }

    StepOutcome step(const TokenEvent& event) {
        if (finished_) [[unlikely]] {
            throw_state_finished();
        }
        if (event.index != tokens_seen_) [[unlikely]] {
            throw_index_gap(tokens_seen_, event.index);
        }
        ++tokens_seen_;
        return config_.variant == Variant::TopOneRun ? step_top_one_run(event)
                                                     : step_windowed_ppl(event);
    }

    /// Returns the detector to its freshly-constructed state, so one instance
    /// can guard a sequence of streams without reallocating window storage.
    void reset() {
        finished_ = false;
        tokens_seen_ = 0;
        run_.count = 0;
        if (config_.variant == Variant::WindowedPpl) {
            window_ring_.assign(config_.length_threshold, 0.0);
            window_filled_ = 0;
            ring_head_ = 0;
            window_zero_count_ = 0;
            window_log_sum_ = 0.0;
            steps_since_rebuild_ = 0;
        }
    }

    const DetectorConfig& config() const { return config_; }
    std::uint32_t run_count() const { return run_.count; }
    std::uint64_t tokens_seen() const { return tokens_seen_; }
    bool finished() const { return finished_; }
    std::size_t window_size() const { return window_filled_; }
    std::size_t window_capacity() const { return window_ring_.size(); }

private:
    StepOutcome step_top_one_run(const TokenEvent& event) {
        if (event.top1_prob > config_.prob_threshold) {
            if (++run_.count >= config_.length_threshold) {
                finished_ = true;
                return {Verdict::backdoor(event.index,
                                          event.index - config_.length_threshold + 1)};
            }
        } else {
            run_.count = 0;
        }
        return terminal_checks(event);
    }

    StepOutcome step_windowed_ppl(const TokenEvent& event) {
        const double p = event.top1_prob;
        if (window_filled_ == config_.length_threshold) {
            const double oldest = window_ring_[ring_head_];
            if (oldest == 0.0) {
                --window_zero_count_;
            } else {
                window_log_sum_ -= std::log(oldest);
            }
        } else {
            ++window_filled_;
        }
        window_ring_[ring_head_] = p;
        ring_head_ = ring_head_ + 1 == config_.length_threshold ? 0 : ring_head_ + 1;
        if (p == 0.0) {
            ++window_zero_count_;
        } else {
            window_log_sum_ += std::log(p);
        }
        if (++steps_since_rebuild_ >= kLogSumRebuildInterval) {
            rebuild_log_sum();
        }
        if (window_filled_ == config_.length_threshold) {
            if (window_zero_count_ > 0) [[unlikely]] {
                finished_ = true;
                throw_window_zero(event.index);
            }
            // sum log p_i > L*log P  <=>  prod p_i > P^L  <=>  window PPL < 1/P
            if (window_log_sum_ > log_threshold_) {
                finished_ = true;
                return {Verdict::backdoor(event.index,
                                          event.index - config_.length_threshold + 1)};
            }
        }
        return terminal_checks(event);
    }

    StepOutcome terminal_checks(const TokenEvent& event) {
        if (event.is_eos) {
            finished_ = true;
            return {Verdict::normal(NormalReason::Eos)};
        }
        if (tokens_seen_ >= config_.max_new_tokens) {
            finished_ = true;
            return {Verdict::normal(NormalReason::Budget)};
        }
        return {};
    }

    void rebuild_log_sum() {
        steps_since_rebuild_ = 0;
        double sum = 0.0;
        for (std::size_t i = 0; i < window_filled_; ++i) {
            const double p = window_ring_[i];
            if (p != 0.0) {
                sum += std::log(p);
            }
        }
        window_log_sum_ = sum;
    }

    // Throw sites build strings; keeping them out of line keeps step() small
    // enough to stay inlined into replay loops.
    [[noreturn]] static void throw_state_finished();
    [[noreturn]] static void throw_index_gap(std::uint64_t expected, std::uint64_t got);
    [[noreturn]] static void throw_window_zero(std::uint64_t index);

    // Incremental log-sum drift is bounded by periodic recomputation from the
    // ring; 4096 steps keeps the error far inside the equivalence band.
    static constexpr std::uint32_t kLogSumRebuildInterval = 4096;

    DetectorConfig config_;
    TopOneRunState run_{};
    std::uint64_t tokens_seen_ = 0;
    bool finished_ = false;

    // WindowedPpl only.
    std::vector<double> window_ring_{};
    std::size_t window_filled_ = 0;
    std::size_t ring_head_ = 0;
    std::size_t window_zero_count_ = 0;
    double window_log_sum_ = 0.0;
    double log_threshold_ = 0.0;
    std::uint32_t steps_since_rebuild_ = 0;
};

/// Folds step() over an event sequence and returns the first final verdict.
/// A sequence that ends without EOS and under budget (source closed) is
/// classified Normal{Eos}; no events past the firing point are examined.
Verdict run_stream(const DetectorConfig& config, std::span<const TokenEvent> events);

} // namespace confguard
