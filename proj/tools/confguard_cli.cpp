// confguard: guard live or recorded token streams and run the evaluation
// harness from one binary. Exit status contract: 0 normal, 2 backdoor,
// 1 error.

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <string>
#include <vector>

#include "confguard/detector.hpp"
#include "confguard/errors.hpp"
#include "confguard/eval.hpp"
#include "confguard/gateway.hpp"
#include "confguard/jsonl.hpp"
#include "confguard/ppl_baseline.hpp"
#include "confguard/rng.hpp"
#include "confguard/stream_sim.hpp"

#include "CLI11.hpp"
#include "json.hpp"

namespace {

namespace fs = std::filesystem;

struct DetectorFlags {
    double prob_threshold = 0.99;
    std::uint32_t len_threshold = 10;
    std::uint32_t max_new_tokens = 50;
    std::string variant = "top1";

    confguard::DetectorConfig to_config() const {
        confguard::DetectorConfig config;
        config.prob_threshold = prob_threshold;
        config.length_threshold = len_threshold;
        config.max_new_tokens = max_new_tokens;
        config.variant =
            variant == "ppl" ? confguard::Variant::WindowedPpl : confguard::Variant::TopOneRun;
        return config;
    }
};

void add_detector_flags(CLI::App* cmd, DetectorFlags& flags) {
    cmd->add_option("--prob-threshold", flags.prob_threshold,
                    "Top-1 probability threshold P; a token extends a run only when its "
                    "probability is strictly greater")
        ->capture_default_str();
    cmd->add_option("--len-threshold", flags.len_threshold,
                    "Run length L that triggers a Backdoor verdict")
        ->capture_default_str();
    cmd->add_option("--max-new-tokens", flags.max_new_tokens,
                    "Token budget N; streams end Normal(budget) at this length")
        ->capture_default_str();
    cmd->add_option("--variant", flags.variant, "Detector variant")
        ->check(CLI::IsMember({"top1", "ppl"}))
        ->capture_default_str();
}

// ---------------------------------------------------------------------------
// Manifest-backed corpora
// ---------------------------------------------------------------------------

std::string manifest_file(const std::string& path) {
    if (fs::is_directory(path)) {
        return (fs::path(path) / "manifest.json").string();
    }
    return path;
}

std::vector<confguard::LabeledStream> load_corpus(const std::string& manifest_path) {
    const std::string file = manifest_file(manifest_path);
    std::ifstream in(file, std::ios::binary);
    if (!in) {
        throw confguard::ParseError("cannot open manifest \"" + file + "\"", 0);
    }
    nlohmann::json manifest;
    try {
        in >> manifest;
    } catch (const nlohmann::json::exception& e) {
        throw confguard::ParseError(std::string("bad manifest JSON: ") + e.what(), 0);
    }
    if (!manifest.is_object() || !manifest.contains("streams") ||
        !manifest["streams"].is_array()) {
        throw confguard::ParseError("manifest has no streams array", 0);
    }
    const fs::path dir = fs::path(file).parent_path();
    std::vector<confguard::LabeledStream> corpus;
    corpus.reserve(manifest["streams"].size());
    for (const auto& entry : manifest["streams"]) {
        if (!entry.is_object() || !entry.contains("file") || !entry.contains("label")) {
            throw confguard::ParseError("manifest stream entry needs file and label", 0);
        }
        confguard::LabeledStream stream;
        const std::string label = entry["label"].get<std::string>();
        if (label == "backdoor") {
            stream.label = confguard::StreamLabel::Backdoor;
        } else if (label == "clean") {
            stream.label = confguard::StreamLabel::Clean;
        } else {
            throw confguard::ParseError("unknown stream label \"" + label + "\"", 0);
        }
        if (entry.contains("digest") && entry["digest"].is_string()) {
            stream.spec_digest = entry["digest"].get<std::string>();
        }
        const std::string rel = entry["file"].get<std::string>();
        stream.events = confguard::read_events_jsonl_file((dir / rel).string());
        corpus.push_back(std::move(stream));
    }
    if (corpus.empty()) {
        throw confguard::EmptyCorpus("manifest lists no streams");
    }
    return corpus;
}

void write_text(const std::string& path, const std::string& text) {
    std::ofstream out(path, std::ios::binary);
    if (!out) {
        throw confguard::ParseError("cannot open \"" + path + "\" for writing", 0);
    }
    out << text;
    if (!out) {
        throw confguard::ParseError("write failed for \"" + path + "\"", 0);
    }
}

void emit(const std::string& out_path, const std::string& text) {
    std::string payload = text;
    if (payload.empty() || payload.back() != '\n') {
        payload += '\n';
    }
    if (out_path.empty()) {
        std::cout << payload;
    } else {
        write_text(out_path, payload);
    }
}

// ---------------------------------------------------------------------------
// guard / replay
// ---------------------------------------------------------------------------

struct GuardFlags {
    DetectorFlags detector{};
    std::string replay_path{};
    std::string endpoint{};
    std::string model{};
    std::string api_key_env = "OPENAI_API_KEY";
    std::string prompt{};
    double temperature = 0.0;
    std::uint32_t timeout_ms = 30000;
    std::string on_detect = "stop";
    std::string log_path{};
    std::string session = "cli";
};

confguard::GuardAction parse_action(const std::string& name) {
    if (name == "report") {
        return confguard::GuardAction::ReportOnly;
    }
    if (name == "redact") {
        return confguard::GuardAction::RedactAndStop;
    }
    return confguard::GuardAction::StopAndReport;
}

int run_guard(const GuardFlags& flags) {
    confguard::SourceConfig source_config;
    if (!flags.endpoint.empty()) {
        source_config.kind = confguard::SourceKind::ApiStream;
        source_config.endpoint_url = flags.endpoint;
        source_config.model_name = flags.model;
        source_config.api_key_env = flags.api_key_env;
        source_config.prompt = flags.prompt;
        source_config.temperature = flags.temperature;
        source_config.request_timeout_ms = flags.timeout_ms;
        source_config.max_tokens = flags.detector.max_new_tokens;
    } else if (!flags.replay_path.empty()) {
        source_config.kind = confguard::SourceKind::JsonlReplay;
        source_config.file_path = flags.replay_path;
    } else {
        source_config.kind = confguard::SourceKind::Stdin;
    }

    for (const std::string& warning : confguard::source_warnings(source_config)) {
        std::cerr << "warning: " << warning << "\n";
    }

    std::unique_ptr<confguard::DetectionLog> log;
    if (!flags.log_path.empty()) {
        log = std::make_unique<confguard::DetectionLog>(flags.log_path);
    }

    std::unique_ptr<confguard::TokenSource> source = confguard::open_source(source_config);
    const confguard::SessionResult result =
        confguard::guard_session(*source, flags.detector.to_config(), parse_action(flags.on_detect),
                                 flags.session, log.get());

    if (result.verdict.is_backdoor()) {
        std::cout << "backdoor fired_at=" << *result.verdict.fired_at
                  << " run_start=" << *result.verdict.run_start
                  << " tokens=" << result.tokens_consumed
                  << (result.redacted ? " (redacted)" : "") << "\n";
        return 2;
    }
    std::cout << "normal reason="
              << (result.verdict.normal_reason == confguard::NormalReason::Budget ? "budget"
                                                                                  : "eos")
              << " tokens=" << result.tokens_consumed
              << (result.truncated ? " (truncated)" : "") << "\n";
    return 0;
}

// ---------------------------------------------------------------------------
// simulate
// ---------------------------------------------------------------------------

struct SimulateFlags {
    std::string out_dir{};
    std::uint64_t seed = 7;
    std::uint64_t clean_count = 100;
    std::uint64_t locked_count = 100;
    std::uint64_t length = 50;
    double branch_rate = 0.35;
    std::uint64_t prefix_length = 8;
    std::uint64_t lock_length = 12;
};

// Clean and locked corpora draw from disjoint per-stream seed sequences.
constexpr std::uint64_t kLockedSeedSalt = 0xD1B54A32D192ED03ULL;

int run_simulate(const SimulateFlags& flags) {
    confguard::CleanStreamSpec clean_proto;
    clean_proto.length = flags.length;
    clean_proto.branch_rate = flags.branch_rate;

    confguard::LockedStreamSpec locked_proto;
    locked_proto.prefix = clean_proto;
    locked_proto.prefix.length = flags.prefix_length;
    locked_proto.prefix.eos_at_end = false;
    locked_proto.lock_length = flags.lock_length;

    const auto clean = confguard::gen_clean_corpus(clean_proto, flags.clean_count, flags.seed);
    const auto locked = confguard::gen_locked_corpus(locked_proto, flags.locked_count,
                                                     flags.seed ^ kLockedSeedSalt);

    fs::create_directories(flags.out_dir);
    nlohmann::ordered_json manifest;
    manifest["seed"] = flags.seed;
    manifest["clean"] = flags.clean_count;
    manifest["locked"] = flags.locked_count;
    manifest["streams"] = nlohmann::ordered_json::array();

    char name[64];
    std::uint64_t counter = 0;
    for (const auto& stream : clean) {
        std::snprintf(name, sizeof(name), "clean_%05llu.jsonl",
                      static_cast<unsigned long long>(counter++));
        confguard::write_events_jsonl_file((fs::path(flags.out_dir) / name).string(),
                                           stream.events);
        manifest["streams"].push_back(nlohmann::ordered_json{{"file", name},
                                                             {"label", "clean"},
                                                             {"digest", stream.spec_digest},
                                                             {"events", stream.events.size()}});
    }
    counter = 0;
    for (const auto& stream : locked) {
        std::snprintf(name, sizeof(name), "locked_%05llu.jsonl",
                      static_cast<unsigned long long>(counter++));
        confguard::write_events_jsonl_file((fs::path(flags.out_dir) / name).string(),
                                           stream.events);
        manifest["streams"].push_back(nlohmann::ordered_json{{"file", name},
                                                             {"label", "backdoor"},
                                                             {"digest", stream.spec_digest},
                                                             {"events", stream.events.size()}});
    }

    const std::string manifest_path = (fs::path(flags.out_dir) / "manifest.json").string();
    write_text(manifest_path, manifest.dump(2) + "\n");
    std::cout << manifest_path << "\n";
    return 0;
}

// ---------------------------------------------------------------------------
// evaluate / sweep / latency / calibrate
// ---------------------------------------------------------------------------

int run_evaluate(const std::string& manifest, const DetectorFlags& detector,
                 const std::string& out_path) {
    const auto corpus = load_corpus(manifest);
    const confguard::EvalReport report = confguard::evaluate(corpus, detector.to_config());
    emit(out_path, confguard::report_to_json(report));
    return 0;
}

int run_sweep(const std::string& manifest, const DetectorFlags& detector, const std::string& axis,
              const std::vector<double>& values, const std::string& out_path) {
    const auto corpus = load_corpus(manifest);
    const confguard::SweepAxis sweep_axis = axis == "len"
                                                ? confguard::SweepAxis::LengthThreshold
                                                : confguard::SweepAxis::ProbThreshold;
    const confguard::SweepResult result =
        confguard::sweep(corpus, detector.to_config(), sweep_axis, values);
    emit(out_path, confguard::sweep_to_csv(result));
    return 0;
}

int run_latency(const std::string& manifest, const DetectorFlags& detector, std::uint32_t reps,
                const std::string& out_path) {
    const auto corpus = load_corpus(manifest);
    const confguard::LatencyReport report =
        confguard::measure_latency(corpus, detector.to_config(), reps);
    emit(out_path, confguard::latency_report_to_json(report));
    return 0;
}

int run_calibrate(const std::string& manifest, const std::string& out_path) {
    const auto corpus = load_corpus(manifest);
    std::vector<double> ppls;
    for (const auto& stream : corpus) {
        if (stream.label != confguard::StreamLabel::Clean) {
            continue;
        }
        std::vector<double> probs;
        probs.reserve(stream.events.size());
        for (const auto& event : stream.events) {
            probs.push_back(event.top1_prob);
        }
        ppls.push_back(confguard::sequence_ppl(probs));
    }
    if (ppls.size() < 2) {
        throw confguard::TooFewSamples("calibration needs at least two clean streams");
    }
    const confguard::PplCalibration cal = confguard::calibrate(ppls);
    emit(out_path, confguard::calibration_to_json(cal));
    return 0;
}

} // namespace

int main(int argc, char** argv) {
    CLI::App app{"Streaming sequence-lock detector for LLM token streams"};
    app.require_subcommand(1);

    // guard
    GuardFlags guard_flags;
    CLI::App* guard = app.add_subcommand(
        "guard", "Run a guarded session against a live endpoint, a JSONL replay, or stdin");
    add_detector_flags(guard, guard_flags.detector);
    guard->add_option("--replay", guard_flags.replay_path, "Replay a recorded JSONL event stream");
    guard->add_option("--endpoint", guard_flags.endpoint, "Chat-completions base URL (http only)");
    guard->add_option("--model", guard_flags.model, "Model name for live requests");
    guard->add_option("--api-key-env", guard_flags.api_key_env,
                      "Environment variable holding the API key (never passed by flag or file)")
        ->capture_default_str();
    guard->add_option("--prompt", guard_flags.prompt, "User prompt for live requests");
    guard->add_option("--temperature", guard_flags.temperature,
                      "Sampling temperature for live requests; non-zero values are flagged")
        ->capture_default_str();
    guard->add_option("--timeout-ms", guard_flags.timeout_ms, "Request timeout in milliseconds")
        ->capture_default_str();
    guard->add_option("--on-detect", guard_flags.on_detect, "Action on a Backdoor verdict")
        ->check(CLI::IsMember({"stop", "report", "redact"}))
        ->capture_default_str();
    guard->add_option("--log", guard_flags.log_path, "Append session records to this JSONL log");
    guard->add_option("--session", guard_flags.session, "Session id written to the log")
        ->capture_default_str();

    // replay
    GuardFlags replay_flags;
    CLI::App* replay =
        app.add_subcommand("replay", "Classify a recorded JSONL event stream");
    replay->add_option("path", replay_flags.replay_path, "JSONL event stream")->required();
    add_detector_flags(replay, replay_flags.detector);
    replay->add_option("--on-detect", replay_flags.on_detect, "Action on a Backdoor verdict")
        ->check(CLI::IsMember({"stop", "report", "redact"}))
        ->capture_default_str();
    replay->add_option("--log", replay_flags.log_path, "Append session records to this JSONL log");
    replay->add_option("--session", replay_flags.session, "Session id written to the log")
        ->capture_default_str();

    // simulate
    SimulateFlags sim_flags;
    CLI::App* simulate =
        app.add_subcommand("simulate", "Generate a labeled clean/locked stream corpus");
    simulate->add_option("--out", sim_flags.out_dir, "Output directory")->required();
    simulate->add_option("--seed", sim_flags.seed, "Base seed; per-stream seeds derive from it")
        ->capture_default_str();
    simulate->add_option("--clean", sim_flags.clean_count, "Number of clean streams")
        ->capture_default_str();
    simulate->add_option("--locked", sim_flags.locked_count, "Number of locked streams")
        ->capture_default_str();
    simulate->add_option("--length", sim_flags.length, "Clean stream length in tokens")
        ->capture_default_str();
    simulate->add_option("--branch-rate", sim_flags.branch_rate,
                         "Per-token probability of a low-confidence branch point")
        ->capture_default_str();
    simulate
        ->add_option("--prefix-length", sim_flags.prefix_length,
                     "Clean prefix length of locked streams")
        ->capture_default_str();
    simulate->add_option("--lock-length", sim_flags.lock_length, "Locked run length M")
        ->capture_default_str();

    // evaluate
    DetectorFlags eval_detector;
    std::string eval_manifest;
    std::string eval_out;
    CLI::App* evaluate =
        app.add_subcommand("evaluate", "Confusion counts and rates over a simulated corpus");
    evaluate->add_option("--manifest", eval_manifest, "Corpus directory or manifest.json")
        ->required();
    add_detector_flags(evaluate, eval_detector);
    evaluate->add_option("--out", eval_out, "Write the JSON report here instead of stdout");

    // sweep
    DetectorFlags sweep_detector;
    std::string sweep_manifest;
    std::string sweep_axis = "prob";
    std::vector<double> sweep_values;
    std::string sweep_out;
    CLI::App* sweep = app.add_subcommand("sweep", "Threshold sweep over a corpus, written as CSV");
    sweep->add_option("--manifest", sweep_manifest, "Corpus directory or manifest.json")
        ->required();
    add_detector_flags(sweep, sweep_detector);
    sweep->add_option("--axis", sweep_axis, "Sweep axis")
        ->check(CLI::IsMember({"prob", "len"}))
        ->capture_default_str();
    sweep->add_option("--values", sweep_values, "Strictly increasing axis values")
        ->required()
        ->delimiter(',');
    sweep->add_option("--out", sweep_out, "Write the CSV here instead of stdout");

    // latency
    DetectorFlags latency_detector;
    std::string latency_manifest;
    std::uint32_t latency_reps = 5;
    std::string latency_out;
    CLI::App* latency =
        app.add_subcommand("latency", "Per-token overhead of the detector on a replay corpus");
    latency->add_option("--manifest", latency_manifest, "Corpus directory or manifest.json")
        ->required();
    add_detector_flags(latency, latency_detector);
    latency->add_option("--reps", latency_reps, "Measurement repetitions")->capture_default_str();
    latency->add_option("--out", latency_out, "Write the JSON report here instead of stdout");

    // calibrate
    std::string cal_manifest;
    std::string cal_out;
    CLI::App* calibrate = app.add_subcommand(
        "calibrate", "Fit the perplexity baseline's mean/std on the clean streams of a corpus");
    calibrate->add_option("--manifest", cal_manifest, "Corpus directory or manifest.json")
        ->required();
    calibrate->add_option("--out", cal_out, "Write the calibration JSON here instead of stdout");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? 0 : 1;
    }

    try {
        if (guard->parsed()) {
            return run_guard(guard_flags);
        }
        if (replay->parsed()) {
            return run_guard(replay_flags);
        }
        if (simulate->parsed()) {
            return run_simulate(sim_flags);
        }
        if (evaluate->parsed()) {
            return run_evaluate(eval_manifest, eval_detector, eval_out);
        }
        if (sweep->parsed()) {
            return run_sweep(sweep_manifest, sweep_detector, sweep_axis, sweep_values, sweep_out);
        }
        if (latency->parsed()) {
            return run_latency(latency_manifest, latency_detector, latency_reps, latency_out);
        }
        if (calibrate->parsed()) {
            return run_calibrate(cal_manifest, cal_out);
        }
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
    return 0;
}
