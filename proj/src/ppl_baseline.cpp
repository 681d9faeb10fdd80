#include "confguard/ppl_baseline.hpp"

#include <cmath>
#include <fstream>

#include "json.hpp"

namespace confguard {

PplCalibration calibrate(std::span<const double> ppl_values) {
    if (ppl_values.size() < 2) {
        throw TooFewSamples("calibration needs at least 2 PPL values, got " +
                            std::to_string(ppl_values.size()));
    }
    const double n = static_cast<double>(ppl_values.size());
    double sum = 0.0;
    for (double v : ppl_values) {
        sum += v;
    }
    const double mean = sum / n;
    double sq_sum = 0.0;
    for (double v : ppl_values) {
        const double d = v - mean;
        sq_sum += d * d;
    }
    const double stddev = std::sqrt(sq_sum / (n - 1.0));
    if (stddev == 0.0) {
        throw DegenerateCalibration("calibration samples have zero variance");
    }
    return PplCalibration{mean, stddev, ppl_values.size()};
}

ZScoreVerdict zscore_detect(double ppl, const PplCalibration& cal, double threshold) {
    const double z = (ppl - cal.mean) / cal.stddev;
    return ZScoreVerdict{z, z > threshold, threshold};
}

std::string calibration_to_json(const PplCalibration& cal) {
    nlohmann::ordered_json doc;
    doc["mean"] = cal.mean;
    doc["std"] = cal.stddev;
    doc["n"] = cal.sample_count;
    return doc.dump();
}

PplCalibration calibration_from_json(const std::string& text) {
    nlohmann::json doc;
    try {
        doc = nlohmann::json::parse(text);
    } catch (const nlohmann::json::exception& e) {
        throw ParseError(std::string("bad calibration record: ") + e.what());
    }
    if (!doc.contains("mean") || !doc.contains("std") || !doc.contains("n")) {
        throw ParseError("calibration record missing mean/std/n");
    }
    PplCalibration cal;
    cal.mean = doc.at("mean").get<double>();
    cal.stddev = doc.at("std").get<double>();
    cal.sample_count = doc.at("n").get<std::uint64_t>();
    if (!(cal.stddev > 0.0) || cal.sample_count < 2) {
        throw ParseError("calibration record violates invariants (std > 0, n >= 2)");
    }
    return cal;
}

void save_calibration(const PplCalibration& cal, const std::string& path) {
    std::ofstream out(path);
    if (!out) {
        throw Error("cannot open calibration file for writing: " + path);
    }
    out << calibration_to_json(cal) << '\n';
}

PplCalibration load_calibration(const std::string& path) {
    std::ifstream in(path);
    if (!in) {
        throw Error("cannot open calibration file: " + path);
    }
    std::string text((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    return calibration_from_json(text);
}

} // namespace confguard
