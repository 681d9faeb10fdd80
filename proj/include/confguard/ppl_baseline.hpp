#pragma once

#include <cstdint>
#include <span>
#include <string>

#include "confguard/detector.hpp"
#include "confguard/errors.hpp"

namespace confguard {

/// Mean and sample standard deviation of perplexity over a clean calibration
/// corpus. Immutable once built.
struct PplCalibration {
    double mean = 0.0;
    double stddev = 0.0;
    std::uint64_t sample_count = 0;

    bool operator==(const PplCalibration&) const = default;
};

struct ZScoreVerdict {
    double z = 0.0;
    bool flagged = false;
    double threshold = 0.0;
};

inline constexpr double kDefaultZThreshold = 3.0;

/// Fits mean and sample (n-1) standard deviation to a set of PPL values.
PplCalibration calibrate(std::span<const double> ppl_values);

/// One-sided z-score test: flags values whose perplexity sits more than
/// `threshold` calibration standard deviations above the mean.
ZScoreVerdict zscore_detect(double ppl, const PplCalibration& cal,
                            double threshold = kDefaultZThreshold);

/// Maps a recorded probability sequence (or text, for providers backed by a
/// scoring model) to a perplexity value. Must be deterministic for identical
/// input.
class PerplexityProvider {
public:
    virtual ~PerplexityProvider() = default;
    virtual double perplexity(std::span<const double> top1_probs) const = 0;
};

/// Default provider: perplexity straight from the recorded top-1 stream.
class RecordedStreamPpl final : public PerplexityProvider {
public:
    double perplexity(std::span<const double> top1_probs) const override {
        return sequence_ppl(top1_probs);
    }
};

/// Persistence as a small JSON object {"mean": .., "std": .., "n": ..}.
std::string calibration_to_json(const PplCalibration& cal);
PplCalibration calibration_from_json(const std::string& text);
void save_calibration(const PplCalibration& cal, const std::string& path);
PplCalibration load_calibration(const std::string& path);

} // namespace confguard
