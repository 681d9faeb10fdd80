#include "confguard/eval.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <limits>
#include <sstream>

#include "confguard/errors.hpp"

#include "json.hpp"

#if defined(_OPENMP)
#include <omp.h>
#endif

namespace confguard {

namespace {

std::uint64_t fnv1a_mix(std::uint64_t hash, const void* data, std::size_t len) {
    const auto* bytes = static_cast<const unsigned char*>(data);
    for (std::size_t i = 0; i < len; ++i) {
        hash ^= bytes[i];
        hash *= 1099511628211ULL;
    }
    return hash;
}

std::string hex16(std::uint64_t value) {
    char buf[17];
    std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(value));
    return std::string(buf);
}

} // namespace

std::string corpus_digest(std::span<const LabeledStream> corpus) {
    std::uint64_t hash = 14695981039346656037ULL;
    for (const auto& stream : corpus) {
        hash = fnv1a_mix(hash, stream.spec_digest.data(), stream.spec_digest.size());
        const char label = stream.label == StreamLabel::Backdoor ? 'B' : 'C';
        hash = fnv1a_mix(hash, &label, 1);
        const std::uint64_t n = stream.events.size();
        hash = fnv1a_mix(hash, &n, sizeof(n));
    }
    return hex16(hash);
}

namespace {

std::vector<char> flags_impl(std::span<const LabeledStream> corpus, const DetectorConfig& config,
                             bool parallel) {
    config.validate();
    if (corpus.empty()) {
        throw EmptyCorpus("per_stream_flags: corpus is empty");
    }
    std::vector<char> flags(corpus.size(), 0);
    const auto n = static_cast<std::int64_t>(corpus.size());
    if (parallel) {
#if defined(_OPENMP)
#pragma omp parallel for schedule(static)
#endif
        for (std::int64_t i = 0; i < n; ++i) {
            flags[static_cast<std::size_t>(i)] =
                run_stream(config, corpus[static_cast<std::size_t>(i)].events).is_backdoor() ? 1
                                                                                             : 0;
        }
    } else {
        for (std::int64_t i = 0; i < n; ++i) {
            flags[static_cast<std::size_t>(i)] =
                run_stream(config, corpus[static_cast<std::size_t>(i)].events).is_backdoor() ? 1
                                                                                             : 0;
        }
    }
    return flags;
}

EvalReport reduce_flags(std::span<const LabeledStream> corpus, std::span<const char> flags,
                        const DetectorConfig& config) {
    EvalReport report;
    report.config = config;
    report.corpus_digest = corpus_digest(corpus);
    // Fixed index-order reduction: identical totals no matter how the flags
    // were produced.
    for (std::size_t i = 0; i < corpus.size(); ++i) {
        const bool positive = corpus[i].label == StreamLabel::Backdoor;
        const bool flagged = flags[i] != 0;
        if (positive && flagged) {
            ++report.tp;
        } else if (positive && !flagged) {
            ++report.fn;
        } else if (!positive && flagged) {
            ++report.fp;
        } else {
            ++report.tn;
        }
    }
    if (report.tp + report.fn > 0) {
        report.tpr = static_cast<double>(report.tp) / static_cast<double>(report.tp + report.fn);
    }
    if (report.fp + report.tn > 0) {
        report.fpr = static_cast<double>(report.fp) / static_cast<double>(report.fp + report.tn);
    }
    return report;
}

} // namespace

std::vector<char> per_stream_flags(std::span<const LabeledStream> corpus,
                                   const DetectorConfig& config) {
    return flags_impl(corpus, config, true);
}

std::vector<char> per_stream_flags_serial(std::span<const LabeledStream> corpus,
                                          const DetectorConfig& config) {
    return flags_impl(corpus, config, false);
}

EvalReport evaluate(std::span<const LabeledStream> corpus, const DetectorConfig& config) {
    return reduce_flags(corpus, per_stream_flags(corpus, config), config);
}

EvalReport evaluate_serial(std::span<const LabeledStream> corpus, const DetectorConfig& config) {
    return reduce_flags(corpus, per_stream_flags_serial(corpus, config), config);
}

SweepResult sweep(std::span<const LabeledStream> corpus, const DetectorConfig& base_config,
                  SweepAxis axis, std::span<const double> values) {
    base_config.validate();
    if (corpus.empty()) {
        throw EmptyCorpus("sweep: corpus is empty");
    }
    if (values.empty()) {
        throw InvalidConfig("sweep: no axis values given");
    }
    for (std::size_t i = 1; i < values.size(); ++i) {
        if (!(values[i] > values[i - 1])) {
            throw InvalidConfig("sweep: axis values must be strictly increasing");
        }
    }
    SweepResult result;
    result.axis = axis;
    result.points.reserve(values.size());
    for (const double value : values) {
        DetectorConfig config = base_config;
        if (axis == SweepAxis::ProbThreshold) {
            config.prob_threshold = value;
        } else {
            if (!(value >= 1.0) || value != std::floor(value)) {
                throw InvalidConfig("sweep: length threshold values must be positive integers");
            }
            config.length_threshold = static_cast<std::uint32_t>(value);
        }
        result.points.emplace_back(value, evaluate(corpus, config));
    }
    return result;
}

namespace {

// A bracket that spans a preemption or interrupt measures the pause, not the
// consumer; anything past max(1 us, 25x the median) can only be such an
// artifact (the worst honest bracket is a slow clock read plus a couple of
// cache misses) and is excluded from the summary.
std::uint64_t pause_cutoff_ns(const std::vector<std::uint32_t>& samples) {
    std::vector<std::uint32_t> scratch = samples;
    const std::size_t mid = scratch.size() / 2;
    std::nth_element(scratch.begin(), scratch.begin() + mid, scratch.end());
    return std::max<std::uint64_t>(1000, 25ull * scratch[mid]);
}

LatencySummary summarize(std::vector<std::uint32_t> samples) {
    const std::uint64_t cutoff = pause_cutoff_ns(samples);
    std::erase_if(samples, [&](std::uint32_t s) { return s > cutoff; });
    std::sort(samples.begin(), samples.end());
    LatencySummary out;
    std::uint64_t total = 0;
    for (const std::uint32_t s : samples) {
        total += s;
    }
    out.mean_ns = static_cast<double>(total) / static_cast<double>(samples.size());
    // Nearest-rank percentiles.
    const auto rank = [&](double p) {
        const auto n = samples.size();
        auto idx = static_cast<std::size_t>(std::ceil(p * static_cast<double>(n)));
        if (idx > 0) {
            --idx;
        }
        return static_cast<double>(samples[std::min(idx, n - 1)]);
    };
    out.p50_ns = rank(0.50);
    out.p99_ns = rank(0.99);
    return out;
}

// Sink that survives optimization; written once per pass.
volatile double g_latency_sink = 0.0;

std::uint32_t bracket_ns(std::chrono::steady_clock::time_point t0,
                         std::chrono::steady_clock::time_point t1) {
    const auto ns = std::chrono::duration_cast<std::chrono::nanoseconds>(t1 - t0).count();
    return static_cast<std::uint32_t>(
        std::min<long long>(ns, std::numeric_limits<std::uint32_t>::max()));
}

[[noreturn]] void throw_noop_gap(std::uint64_t expected, std::uint64_t got);

// Replay bookkeeping with detection disabled: tracks position, validates
// event sequencing, and stops at EOS or the token budget exactly as the
// detector does, but never looks at the probabilities.
class NoopConsumer {
public:
    explicit NoopConsumer(std::uint32_t budget) : budget_(budget) {}

    bool consume(const TokenEvent& event) {
        if (event.index != seen_) [[unlikely]] {
            throw_noop_gap(seen_, event.index);
        }
        ++seen_;
        return event.is_eos || seen_ >= budget_;
    }

    std::uint64_t seen() const { return seen_; }

private:
    std::uint64_t seen_ = 0;
    std::uint32_t budget_ = 0;
};

[[noreturn]] void throw_noop_gap(std::uint64_t expected, std::uint64_t got) {
    throw IndexGap("replay loop expected event index " + std::to_string(expected) + ", got " +
                   std::to_string(got));
}

} // namespace

LatencyReport measure_latency(std::span<const LabeledStream> corpus, const DetectorConfig& config,
                              std::uint32_t repetitions) {
    config.validate();
    if (corpus.empty()) {
        throw EmptyCorpus("measure_latency: corpus is empty");
    }
    if (repetitions < 1) {
        throw InvalidConfig("measure_latency: repetitions must be >= 1");
    }

    using clock = std::chrono::steady_clock;

    std::uint64_t total_events = 0;
    for (const auto& stream : corpus) {
        total_events += stream.events.size();
    }

    std::vector<std::uint32_t> detector_samples;
    std::vector<std::uint32_t> baseline_samples;
    detector_samples.reserve(total_events * repetitions);
    baseline_samples.reserve(total_events * repetitions);

    // Detector flavor: replay a chunk of streams, timing each step call on
    // its own (streams stop at their final verdict).
    const auto detector_chunk = [&](std::size_t begin, std::size_t end) {
        double det_sink = 0.0;
        for (std::size_t s = begin; s < end; ++s) {
            Detector detector(config);
            for (const auto& event : corpus[s].events) {
                const auto t0 = clock::now();
                const StepOutcome outcome = detector.step(event);
                const auto t1 = clock::now();
                detector_samples.push_back(bracket_ns(t0, t1));
                if (outcome.final()) {
                    det_sink += static_cast<double>(detector.tokens_seen());
                    break;
                }
            }
        }
        g_latency_sink = det_sink;
    };

    // Baseline flavor: the identical loop and brackets around the replay
    // consumer with detection disabled.
    const auto noop_chunk = [&](std::size_t begin, std::size_t end) {
        std::uint64_t base_sink = 0;
        for (std::size_t s = begin; s < end; ++s) {
            NoopConsumer consumer(config.max_new_tokens);
            for (const auto& event : corpus[s].events) {
                const auto t0 = clock::now();
                const bool done = consumer.consume(event);
                const auto t1 = clock::now();
                baseline_samples.push_back(bracket_ns(t0, t1));
                if (done) {
                    base_sink += consumer.seen();
                    break;
                }
            }
        }
        g_latency_sink = static_cast<double>(base_sink);
    };

    // The two flavors alternate over short chunks of the corpus so that slow
    // host phases land on both sample pools instead of biasing one of them,
    // and the flavor order flips per chunk so neither flavor systematically
    // sees the chunk cache-warm after the other walked it.
    constexpr std::size_t kChunkStreams = 512;
    std::size_t chunk_no = 0;
    for (std::uint32_t rep = 0; rep < repetitions; ++rep) {
        for (std::size_t begin = 0; begin < corpus.size(); begin += kChunkStreams, ++chunk_no) {
            const std::size_t end = std::min(begin + kChunkStreams, corpus.size());
            if (chunk_no % 2 == 0) {
                detector_chunk(begin, end);
                noop_chunk(begin, end);
            } else {
                noop_chunk(begin, end);
                detector_chunk(begin, end);
            }
        }
    }

    LatencyReport report;
    report.per_token_detector_ns = summarize(std::move(detector_samples));
    report.baseline_per_token_ns = summarize(std::move(baseline_samples));
    report.overhead_ratio =
        report.per_token_detector_ns.mean_ns / report.baseline_per_token_ns.mean_ns;
    return report;
}

namespace {

nlohmann::ordered_json report_json_obj(const EvalReport& report) {
    nlohmann::ordered_json obj;
    obj["tp"] = report.tp;
    obj["fp"] = report.fp;
    obj["tn"] = report.tn;
    obj["fn"] = report.fn;
    if (report.tpr.has_value()) {
        obj["tpr"] = *report.tpr;
    } else {
        obj["tpr"] = nullptr;
    }
    if (report.fpr.has_value()) {
        obj["fpr"] = *report.fpr;
    } else {
        obj["fpr"] = nullptr;
    }
    obj["config"] = {
        {"prob_threshold", report.config.prob_threshold},
        {"len_threshold", report.config.length_threshold},
        {"max_new_tokens", report.config.max_new_tokens},
        {"variant", report.config.variant == Variant::TopOneRun ? "top1" : "ppl"},
    };
    obj["corpus_digest"] = report.corpus_digest;
    return obj;
}

} // namespace

std::string report_to_json(const EvalReport& report) {
    return report_json_obj(report).dump(2) + "\n";
}

std::string latency_report_to_json(const LatencyReport& report) {
    nlohmann::ordered_json obj;
    obj["detector_per_token_ns"] = {
        {"mean", report.per_token_detector_ns.mean_ns},
        {"p50", report.per_token_detector_ns.p50_ns},
        {"p99", report.per_token_detector_ns.p99_ns},
    };
    obj["baseline_per_token_ns"] = {
        {"mean", report.baseline_per_token_ns.mean_ns},
        {"p50", report.baseline_per_token_ns.p50_ns},
        {"p99", report.baseline_per_token_ns.p99_ns},
    };
    obj["overhead_ratio"] = report.overhead_ratio;
    return obj.dump(2) + "\n";
}

std::string sweep_to_csv(const SweepResult& result) {
    std::ostringstream out;
    out << "axis_value,tp,fp,tn,fn,tpr,fpr\n";
    out.precision(17);
    for (const auto& [value, report] : result.points) {
        out << value << ',' << report.tp << ',' << report.fp << ',' << report.tn << ','
            << report.fn << ',';
        if (report.tpr.has_value()) {
            out << *report.tpr;
        }
        out << ',';
        if (report.fpr.has_value()) {
            out << *report.fpr;
        }
        out << '\n';
    }
    return out.str();
}

} // namespace confguard
