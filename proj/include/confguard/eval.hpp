#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "confguard/detector.hpp"
#include "confguard/stream_sim.hpp"

namespace confguard {

/// Confusion counts over a labeled corpus. Rates are absent (not 0, not NaN)
/// when their class is empty.
struct EvalReport {
    std::uint64_t tp = 0;
    std::uint64_t fp = 0;
    std::uint64_t tn = 0;
    std::uint64_t fn = 0;
    std::optional<double> tpr{};
    std::optional<double> fpr{};
    DetectorConfig config{};
    std::string corpus_digest{};

    std::uint64_t total() const { return tp + fp + tn + fn; }
    bool operator==(const EvalReport&) const = default;
};

enum class SweepAxis { ProbThreshold, LengthThreshold };

struct SweepResult {
    SweepAxis axis = SweepAxis::ProbThreshold;
    std::vector<std::pair<double, EvalReport>> points{};
};

struct LatencySummary {
    double mean_ns = 0.0;
    double p50_ns = 0.0;
    double p99_ns = 0.0;
};

struct LatencyReport {
    LatencySummary per_token_detector_ns{};
    LatencySummary baseline_per_token_ns{};
    double overhead_ratio = 0.0;
};

std::string corpus_digest(std::span<const LabeledStream> corpus);

/// Per-stream Backdoor flags under one config; index-aligned with the corpus.
/// This is the primitive behind evaluate() and the sweep containment checks.
std::vector<char> per_stream_flags(std::span<const LabeledStream> corpus,
                                   const DetectorConfig& config);
std::vector<char> per_stream_flags_serial(std::span<const LabeledStream> corpus,
                                          const DetectorConfig& config);

/// Confusion counts + rates of the detector against ground-truth labels.
/// Parallel across streams; the reduction order is fixed, so output is
/// identical to evaluate_serial().
EvalReport evaluate(std::span<const LabeledStream> corpus, const DetectorConfig& config);
EvalReport evaluate_serial(std::span<const LabeledStream> corpus, const DetectorConfig& config);

/// One EvalReport per threshold value along the chosen axis; values must be
/// strictly increasing and legal for the axis.
SweepResult sweep(std::span<const LabeledStream> corpus, const DetectorConfig& base_config,
                  SweepAxis axis, std::span<const double> values);

/// Times each step call against an identical replay loop whose bracketed
/// body is a no-op consumer of the same event fields. Per-token samples are
/// pooled across repetitions; brackets that straddle a scheduler pause are
/// excluded from the summaries. Generation and parsing happen outside the
/// brackets, so the clock cost is shared by both loops exactly as generation
/// cost is in a live deployment.
LatencyReport measure_latency(std::span<const LabeledStream> corpus, const DetectorConfig& config,
                              std::uint32_t repetitions);

std::string report_to_json(const EvalReport& report);
std::string latency_report_to_json(const LatencyReport& report);

/// CSV with header axis_value,tp,fp,tn,fn,tpr,fpr; absent rates are empty cells.
std::string sweep_to_csv(const SweepResult& result);

} // namespace confguard
