#include "confguard/stream_sim.hpp"

#include <algorithm>
#include <cinttypes>
#include <cstdio>

#include "confguard/errors.hpp"
#include "confguard/rng.hpp"

namespace confguard {

namespace {

void validate_interval(const ConfInterval& iv, const char* name, double max_hi) {
    if (!(iv.lo < iv.hi)) {
        throw InvalidSpec(std::string(name) + " interval is not well-ordered");
    }
    if (!(iv.lo >= 0.0) || !(iv.hi <= max_hi)) {
        throw InvalidSpec(std::string(name) + " interval leaves the unit range");
    }
}

std::uint64_t fnv1a(const std::string& data) {
    std::uint64_t h = 0xCBF29CE484222325ULL;
    for (unsigned char c : data) {
        h ^= c;
        h *= 0x100000001B3ULL;
    }
    return h;
}

std::string hex16(std::uint64_t v) {
    char buf[17];
    std::snprintf(buf, sizeof(buf), "%016" PRIx64, v);
    return std::string(buf);
}

std::string clean_spec_key(const CleanStreamSpec& s) {
    char buf[256];
    std::snprintf(buf, sizeof(buf),
                  "clean;len=%" PRIu64 ";rho=%.17g;high=(%.17g,%.17g];branch=(%.17g,%.17g];eos=%d;seed=%" PRIu64,
                  s.length, s.branch_rate, s.high_conf.lo, s.high_conf.hi, s.branch_conf.lo,
                  s.branch_conf.hi, s.eos_at_end ? 1 : 0, s.seed);
    return std::string(buf);
}

std::string locked_spec_key(const LockedStreamSpec& s) {
    char buf[128];
    std::snprintf(buf, sizeof(buf), ";lock_len=%" PRIu64 ";lock=(%.17g,%.17g];seed=%" PRIu64,
                  s.lock_length, s.lock_conf.lo, s.lock_conf.hi, s.seed);
    return "locked;" + clean_spec_key(s.prefix) + std::string(buf);
}

void append_clean_tokens(std::vector<TokenEvent>& events, const CleanStreamSpec& spec,
                         Xoshiro256StarStar& rng, bool mark_final_eos) {
    for (std::uint64_t t = 0; t < spec.length; ++t) {
        const bool branch = rng.bernoulli(spec.branch_rate);
        const ConfInterval& iv = branch ? spec.branch_conf : spec.high_conf;
        const double p = rng.uniform_in(iv.lo, iv.hi);
        const bool eos = mark_final_eos && t + 1 == spec.length;
        events.push_back(TokenEvent{events.size(), p, std::nullopt, eos});
    }
}

} // namespace

void validate_clean_spec(const CleanStreamSpec& spec, bool allow_empty) {
    if (spec.length == 0 && !allow_empty) {
        throw InvalidSpec("clean stream length must be positive");
    }
    if (!(spec.branch_rate >= 0.0) || !(spec.branch_rate <= 1.0)) {
        throw InvalidSpec("branch_rate must lie in [0,1]");
    }
    validate_interval(spec.high_conf, "high_conf", 1.0);
    validate_interval(spec.branch_conf, "branch_conf", 1.0);
    if (!(spec.branch_conf.hi < spec.high_conf.lo)) {
        throw InvalidSpec("branch_conf must sit strictly below high_conf");
    }
}

void validate_locked_spec(const LockedStreamSpec& spec) {
    validate_clean_spec(spec.prefix, /*allow_empty=*/true);
    if (spec.prefix.eos_at_end && spec.prefix.length > 0) {
        throw InvalidSpec("locked-stream prefix must not end in EOS");
    }
    if (spec.lock_length < 1) {
        throw InvalidSpec("lock_length must be >= 1");
    }
    validate_interval(spec.lock_conf, "lock_conf", 1.0);
}

std::string clean_spec_digest(const CleanStreamSpec& spec) {
    return hex16(fnv1a(clean_spec_key(spec)));
}

std::string locked_spec_digest(const LockedStreamSpec& spec) {
    return hex16(fnv1a(locked_spec_key(spec)));
}

LabeledStream gen_clean(const CleanStreamSpec& spec) {
    validate_clean_spec(spec);
    Xoshiro256StarStar rng(spec.seed);
    LabeledStream stream;
    stream.label = StreamLabel::Clean;
    stream.spec_digest = clean_spec_digest(spec);
    stream.events.reserve(spec.length);
    append_clean_tokens(stream.events, spec, rng, spec.eos_at_end);
    return stream;
}

LabeledStream gen_locked(const LockedStreamSpec& spec) {
    validate_locked_spec(spec);
    Xoshiro256StarStar rng(spec.seed);
    LabeledStream stream;
    stream.label = StreamLabel::Backdoor;
    stream.spec_digest = locked_spec_digest(spec);
    stream.events.reserve(spec.prefix.length + spec.lock_length);
    append_clean_tokens(stream.events, spec.prefix, rng, /*mark_final_eos=*/false);
    for (std::uint64_t t = 0; t < spec.lock_length; ++t) {
        const double p = rng.uniform_in(spec.lock_conf.lo, spec.lock_conf.hi);
        const bool eos = t + 1 == spec.lock_length;
        stream.events.push_back(TokenEvent{stream.events.size(), p, std::nullopt, eos});
    }
    return stream;
}

namespace {

template <typename Spec, typename Gen>
std::vector<LabeledStream> gen_corpus_parallel(const Spec& proto, std::size_t count,
                                               std::uint64_t base_seed, Gen gen) {
    std::vector<LabeledStream> corpus(count);
#pragma omp parallel for schedule(static)
    for (std::int64_t i = 0; i < static_cast<std::int64_t>(count); ++i) {
        Spec spec = proto;
        spec.seed = derive_stream_seed(base_seed, static_cast<std::uint64_t>(i));
        corpus[static_cast<std::size_t>(i)] = gen(spec);
    }
    return corpus;
}

template <typename Spec, typename Gen>
std::vector<LabeledStream> gen_corpus_sequential(const Spec& proto, std::size_t count,
                                                 std::uint64_t base_seed, Gen gen) {
    std::vector<LabeledStream> corpus;
    corpus.reserve(count);
    for (std::size_t i = 0; i < count; ++i) {
        Spec spec = proto;
        spec.seed = derive_stream_seed(base_seed, i);
        corpus.push_back(gen(spec));
    }
    return corpus;
}

} // namespace

std::vector<LabeledStream> gen_clean_corpus(const CleanStreamSpec& proto, std::size_t count,
                                            std::uint64_t base_seed) {
    return gen_corpus_parallel(proto, count, base_seed, gen_clean);
}

std::vector<LabeledStream> gen_clean_corpus_serial(const CleanStreamSpec& proto, std::size_t count,
                                                   std::uint64_t base_seed) {
    return gen_corpus_sequential(proto, count, base_seed, gen_clean);
}

std::vector<LabeledStream> gen_locked_corpus(const LockedStreamSpec& proto, std::size_t count,
                                             std::uint64_t base_seed) {
    return gen_corpus_parallel(proto, count, base_seed, gen_locked);
}

std::vector<LabeledStream> gen_locked_corpus_serial(const LockedStreamSpec& proto,
                                                    std::size_t count, std::uint64_t base_seed) {
    return gen_corpus_sequential(proto, count, base_seed, gen_locked);
}

double run_occurrence_probability(std::uint64_t n, double q, std::uint64_t L) {
    if (L == 0 || n == 0 || q < 0.0 || q > 1.0) {
        if (q < 0.0 || q > 1.0) {
            throw InvalidSpec("q must lie in [0,1]");
        }
        if (L == 0) {
            throw InvalidSpec("L must be >= 1");
        }
        return 0.0;
    }
    if (n < L) {
        return 0.0;
    }
    // alive[j]: probability of having seen no qualifying run yet while the
    // current trailing success run has length j (j < L).
    std::vector<double> alive(L, 0.0);
    std::vector<double> next(L, 0.0);
    alive[0] = 1.0;
    double fired = 0.0;
    for (std::uint64_t t = 0; t < n; ++t) {
        std::fill(next.begin(), next.end(), 0.0);
        double failures = 0.0;
        for (std::uint64_t j = 0; j < L; ++j) {
            const double mass = alive[j];
            if (mass == 0.0) {
                continue;
            }
            const double advanced = mass * q;
            if (j + 1 == L) {
                fired += advanced;
            } else {
                next[j + 1] += advanced;
            }
            failures += mass * (1.0 - q);
        }
        next[0] += failures;
        alive.swap(next);
    }
    return fired;
}

} // namespace confguard
