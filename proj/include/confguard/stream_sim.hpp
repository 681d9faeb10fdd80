#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "confguard/token_event.hpp"

namespace confguard {

/// Closed-open interval metadata is by value range: draws land in (lo, hi].
struct ConfInterval {
    double lo = 0.0;
    double hi = 0.0;

    bool operator==(const ConfInterval&) const = default;
};

/// Clean-regime stream model: each token is a branch point with probability
/// branch_rate (confidence drawn from branch_conf) and a high-confidence
/// continuation otherwise (drawn from high_conf).
struct CleanStreamSpec {
    std::uint64_t length = 50;
    double branch_rate = 0.35;
    ConfInterval high_conf{0.99, 1.0};
    ConfInterval branch_conf{0.2, 0.9};
    bool eos_at_end = true;
    std::uint64_t seed = 0;
};

/// Sequence-lock stream model: a clean prefix followed by lock_length tokens
/// of consistently high confidence drawn from lock_conf. The prefix spec's own
/// seed field is ignored; the outer seed drives the whole stream.
struct LockedStreamSpec {
    CleanStreamSpec prefix{};
    std::uint64_t lock_length = 12;
    ConfInterval lock_conf{0.995, 1.0};
    std::uint64_t seed = 0;
};

enum class StreamLabel { Clean, Backdoor };

struct LabeledStream {
    std::vector<TokenEvent> events{};
    StreamLabel label = StreamLabel::Clean;
    std::string spec_digest{};
};

/// Validation helpers; throw InvalidSpec. A clean spec used as a locked-stream
/// prefix may be empty, a standalone one may not.
void validate_clean_spec(const CleanStreamSpec& spec, bool allow_empty = false);
void validate_locked_spec(const LockedStreamSpec& spec);

std::string clean_spec_digest(const CleanStreamSpec& spec);
std::string locked_spec_digest(const LockedStreamSpec& spec);

LabeledStream gen_clean(const CleanStreamSpec& spec);
LabeledStream gen_locked(const LockedStreamSpec& spec);

/// Batch generation with per-stream seeds derived from a base seed; stream i
/// of either kind is independent of corpus size and ordering. The parallel
/// version and the serial reference produce identical corpora.
std::vector<LabeledStream> gen_clean_corpus(const CleanStreamSpec& proto, std::size_t count,
                                            std::uint64_t base_seed);
std::vector<LabeledStream> gen_clean_corpus_serial(const CleanStreamSpec& proto, std::size_t count,
                                                   std::uint64_t base_seed);
std::vector<LabeledStream> gen_locked_corpus(const LockedStreamSpec& proto, std::size_t count,
                                             std::uint64_t base_seed);
std::vector<LabeledStream> gen_locked_corpus_serial(const LockedStreamSpec& proto,
                                                    std::size_t count, std::uint64_t base_seed);

/// Exact probability that an iid Bernoulli(q) sequence of length n contains a
/// run of at least L successes; O(n*L) dynamic program over (position, run).
double run_occurrence_probability(std::uint64_t n, double q, std::uint64_t L);

} // namespace confguard
