#include "confguard/gateway.hpp"

#include <condition_variable>
#include <cstdlib>
#include <ctime>
#include <iostream>
#include <variant>

#include "confguard/errors.hpp"
#include "confguard/jsonl.hpp"

#include "httplib.h"
#include "json.hpp"

namespace confguard {

// ---------------------------------------------------------------------------
// Sources
// ---------------------------------------------------------------------------

std::vector<std::string> source_warnings(const SourceConfig& config) {
    std::vector<std::string> warnings;
    if (config.kind == SourceKind::ApiStream && config.temperature != 0.0) {
        warnings.push_back("temperature " + std::to_string(config.temperature) +
                           " is non-zero: the sampled stream can diverge from greedy "
                           "top-1 decoding, which weakens run detection");
    }
    return warnings;
}

std::optional<TokenEvent> VectorSource::next() {
    if (pos_ >= events_.size()) {
        return std::nullopt;
    }
    return events_[pos_++];
}

JsonlReplaySource::JsonlReplaySource(const std::string& path) {
    owned_.open(path, std::ios::binary);
    if (!owned_) {
        throw ParseError("cannot open \"" + path + "\" for reading", 0);
    }
    in_ = &owned_;
}

JsonlReplaySource::JsonlReplaySource(std::istream& in) : in_(&in) {}

std::optional<TokenEvent> JsonlReplaySource::next() {
    if (cancelled_) {
        return std::nullopt;
    }
    std::string line;
    if (!std::getline(*in_, line)) {
        return std::nullopt;
    }
    ++line_number_;
    if (!line.empty() && line.back() == '\r') {
        line.pop_back();
    }
    if (line.empty()) {
        throw ParseError("blank line in event stream", line_number_);
    }
    TokenEvent event = event_from_json_line(line, line_number_);
    if (event.index != next_index_) {
        throw IndexGap("event index " + std::to_string(event.index) + " at line " +
                       std::to_string(line_number_) + ", expected " +
                       std::to_string(next_index_));
    }
    ++next_index_;
    return event;
}

// ---------------------------------------------------------------------------
// Live API source
// ---------------------------------------------------------------------------

namespace {

struct UrlParts {
    std::string scheme_host_port; // e.g. http://127.0.0.1:8080
    std::string path;             // request path, /chat/completions appended
};

UrlParts parse_endpoint(const std::string& url) {
    const auto scheme_end = url.find("://");
    if (scheme_end == std::string::npos) {
        throw InvalidConfig("endpoint URL \"" + url + "\" has no scheme");
    }
    const std::string scheme = url.substr(0, scheme_end);
    if (scheme == "https") {
        throw TransportError("this build speaks plain http only; point the endpoint at an "
                             "http:// address or a local TLS-terminating proxy");
    }
    if (scheme != "http") {
        throw InvalidConfig("unsupported endpoint scheme \"" + scheme + "\"");
    }
    const auto authority_start = scheme_end + 3;
    const auto path_start = url.find('/', authority_start);
    UrlParts parts;
    if (path_start == std::string::npos) {
        parts.scheme_host_port = url;
        parts.path = "/chat/completions";
        return parts;
    }
    parts.scheme_host_port = url.substr(0, path_start);
    if (parts.scheme_host_port.size() == authority_start) {
        throw InvalidConfig("endpoint URL \"" + url + "\" has no host");
    }
    std::string base = url.substr(path_start);
    while (base.size() > 1 && base.back() == '/') {
        base.pop_back();
    }
    if (base == "/") {
        base.clear();
    }
    if (base.ends_with("/chat/completions")) {
        parts.path = base;
    } else {
        parts.path = base + "/chat/completions";
    }
    return parts;
}

} // namespace

/// SPSC queue with one slot: the producer cannot run ahead of the consumer,
/// and a cancelled consumer fails the next push so the transfer aborts.
struct ApiStreamSource::Queue {
    using Item = std::variant<TokenEvent, std::exception_ptr>;

    std::mutex mutex;
    std::condition_variable cv;
    std::optional<Item> slot;
    bool closed = false;
    bool cancelled = false;

    // Worker's live client, so cancel() can shut its socket if the worker is
    // blocked on a read rather than on push().
    httplib::Client* client = nullptr;

    bool push(Item item) {
        std::unique_lock lock(mutex);
        cv.wait(lock, [&] { return !slot.has_value() || cancelled; });
        if (cancelled) {
            return false;
        }
        slot = std::move(item);
        cv.notify_all();
        return true;
    }

    std::optional<Item> pop() {
        std::unique_lock lock(mutex);
        cv.wait(lock, [&] { return slot.has_value() || closed; });
        if (!slot.has_value()) {
            return std::nullopt;
        }
        std::optional<Item> item = std::move(slot);
        slot.reset();
        cv.notify_all();
        return item;
    }

    void close() {
        {
            std::lock_guard lock(mutex);
            closed = true;
        }
        cv.notify_all();
    }

    void cancel() {
        {
            std::lock_guard lock(mutex);
            cancelled = true;
            slot.reset();
            if (client != nullptr) {
                client->stop();
            }
        }
        cv.notify_all();
    }

    void set_client(httplib::Client* c) {
        std::lock_guard lock(mutex);
        client = c;
        if (cancelled && client != nullptr) {
            client->stop();
        }
    }
};

ApiStreamSource::ApiStreamSource(const SourceConfig& config) : queue_(std::make_unique<Queue>()) {
    if (config.kind != SourceKind::ApiStream) {
        throw InvalidConfig("ApiStreamSource needs an ApiStream source config");
    }
    if (config.endpoint_url.empty()) {
        throw InvalidConfig("endpoint URL is required for a live stream");
    }
    if (config.model_name.empty()) {
        throw InvalidConfig("model name is required for a live stream");
    }
    if (config.api_key_env.empty()) {
        throw InvalidConfig("API key environment variable name is empty");
    }
    parse_endpoint(config.endpoint_url); // validate before spawning the worker
    const char* key = std::getenv(config.api_key_env.c_str());
    if (key == nullptr || *key == '\0') {
        throw AuthError("environment variable " + config.api_key_env +
                        " is not set; export the API key there");
    }
    worker_ = std::thread(&ApiStreamSource::run_request, this, config, std::string(key));
}

ApiStreamSource::~ApiStreamSource() {
    cancel();
    if (worker_.joinable()) {
        worker_.join();
    }
}

void ApiStreamSource::cancel() { queue_->cancel(); }

std::optional<TokenEvent> ApiStreamSource::next() {
    auto item = queue_->pop();
    if (!item.has_value()) {
        return std::nullopt;
    }
    if (std::holds_alternative<std::exception_ptr>(*item)) {
        std::rethrow_exception(std::get<std::exception_ptr>(*item));
    }
    return std::get<TokenEvent>(*std::move(item));
}

void ApiStreamSource::run_request(SourceConfig config, std::string api_key) {
    std::exception_ptr failure;
    bool consumer_gone = false;
    std::uint64_t delivered = 0;
    StreamAssembler assembler;

    try {
        const UrlParts url = parse_endpoint(config.endpoint_url);

        nlohmann::ordered_json body;
        body["model"] = config.model_name;
        body["messages"] = nlohmann::json::array(
            {nlohmann::ordered_json{{"role", "user"}, {"content", config.prompt}}});
        body["stream"] = true;
        body["logprobs"] = true;
        body["top_logprobs"] = 1;
        body["max_tokens"] = config.max_tokens;
        body["temperature"] = config.temperature;

        httplib::Client client(url.scheme_host_port);
        const time_t timeout_s = config.request_timeout_ms / 1000;
        const time_t timeout_us =
            static_cast<time_t>(config.request_timeout_ms % 1000) * 1000;
        client.set_connection_timeout(timeout_s, timeout_us);
        client.set_read_timeout(timeout_s, timeout_us);
        client.set_write_timeout(timeout_s, timeout_us);
        queue_->set_client(&client);

        httplib::Request req;
        req.method = "POST";
        req.path = url.path;
        req.set_header("Authorization", "Bearer " + api_key);
        req.set_header("Accept", "text/event-stream");
        req.body = body.dump();
        req.set_header("Content-Type", "application/json");

        int status = 0;
        std::string error_body;
        SseFramer framer;

        req.response_handler = [&](const httplib::Response& res) {
            status = res.status;
            return true;
        };
        req.content_receiver = [&](const char* data, std::size_t len, std::uint64_t,
                                   std::uint64_t) -> bool {
            if (status != 200) {
                if (error_body.size() < 4096) {
                    error_body.append(data, std::min(len, std::size_t(4096) - error_body.size()));
                }
                return true;
            }
            try {
                for (const std::string& payload : framer.feed(std::string_view(data, len))) {
                    for (TokenEvent& event : assembler.feed_payload(payload)) {
                        if (!queue_->push(std::move(event))) {
                            consumer_gone = true;
                            return false;
                        }
                        ++delivered;
                    }
                    mismatches_.store(assembler.mismatch_count());
                }
            } catch (...) {
                failure = std::current_exception();
                return false;
            }
            return true;
        };

        httplib::Response res;
        httplib::Error err = httplib::Error::Success;
        const bool ok = client.send(req, res, err);
        queue_->set_client(nullptr);

        if (failure == nullptr && !consumer_gone) {
            if (!ok) {
                if (delivered == 0 && !assembler.done()) {
                    if (err == httplib::Error::ConnectionTimeout) {
                        failure = std::make_exception_ptr(
                            TimeoutError("connection to " + config.endpoint_url + " timed out"));
                    } else {
                        failure = std::make_exception_ptr(TransportError(
                            "request to " + config.endpoint_url + " failed: " +
                            httplib::to_string(err)));
                    }
                } else if (!assembler.done()) {
                    // Events flowed, then the transport dropped: benign end,
                    // flagged as truncated.
                    truncated_.store(true);
                }
            } else if (status != 200) {
                const std::string detail = "HTTP " + std::to_string(status) +
                                           (error_body.empty() ? "" : ": " + error_body);
                if (status == 401 || status == 403) {
                    failure = std::make_exception_ptr(AuthError(detail));
                } else {
                    failure = std::make_exception_ptr(ProtocolError(detail));
                }
            } else if (!assembler.done()) {
                // 200 and a clean socket close, but no finish marker.
                truncated_.store(true);
            }
        }
    } catch (...) {
        failure = std::current_exception();
    }

    if (failure != nullptr && !consumer_gone) {
        queue_->push(failure);
    }
    queue_->close();
}

std::unique_ptr<TokenSource> open_source(const SourceConfig& config) {
    switch (config.kind) {
    case SourceKind::ApiStream:
        return std::make_unique<ApiStreamSource>(config);
    case SourceKind::JsonlReplay:
        if (config.file_path.empty()) {
            throw InvalidConfig("replay source needs a file path");
        }
        return std::make_unique<JsonlReplaySource>(config.file_path);
    case SourceKind::Stdin:
        return std::make_unique<JsonlReplaySource>(std::cin);
    }
    throw InvalidConfig("unknown source kind");
}

// ---------------------------------------------------------------------------
// Detection log
// ---------------------------------------------------------------------------

std::string now_rfc3339_utc() {
    const std::time_t now = std::time(nullptr);
    std::tm tm_utc{};
    gmtime_r(&now, &tm_utc);
    char buf[32];
    std::strftime(buf, sizeof(buf), "%Y-%m-%dT%H:%M:%SZ", &tm_utc);
    return std::string(buf);
}

std::string detection_event_to_json_line(const DetectionEvent& event) {
    nlohmann::ordered_json obj;
    obj["ts"] = event.ts;
    obj["session"] = event.session;
    obj["verdict"] = event.verdict;
    if (event.fired_at.has_value()) {
        obj["fired_at"] = *event.fired_at;
    } else {
        obj["fired_at"] = nullptr;
    }
    if (event.run_start.has_value()) {
        obj["run_start"] = *event.run_start;
    } else {
        obj["run_start"] = nullptr;
    }
    if (event.reason.has_value()) {
        obj["reason"] = *event.reason;
    } else {
        obj["reason"] = nullptr;
    }
    obj["P"] = event.prob_threshold;
    obj["L"] = event.length_threshold;
    obj["N"] = event.max_new_tokens;
    obj["tokens"] = event.tokens;
    obj["truncated"] = event.truncated;
    return obj.dump();
}

DetectionEvent detection_event_from_json_line(const std::string& line,
                                              std::uint64_t line_number) {
    nlohmann::json obj;
    try {
        obj = nlohmann::json::parse(line);
    } catch (const nlohmann::json::exception& e) {
        throw ParseError(std::string("invalid JSON: ") + e.what(), line_number);
    }
    if (!obj.is_object()) {
        throw ParseError("log record is not a JSON object", line_number);
    }
    for (const char* key : {"ts", "session", "verdict", "fired_at", "run_start", "reason", "P",
                            "L", "N", "tokens", "truncated"}) {
        if (!obj.contains(key)) {
            throw ParseError(std::string("log record is missing \"") + key + "\"", line_number);
        }
    }
    DetectionEvent event;
    if (!obj["ts"].is_string() || !obj["session"].is_string() || !obj["verdict"].is_string()) {
        throw ParseError("ts, session, and verdict must be strings", line_number);
    }
    event.ts = obj["ts"].get<std::string>();
    event.session = obj["session"].get<std::string>();
    event.verdict = obj["verdict"].get<std::string>();
    if (event.verdict != "backdoor" && event.verdict != "normal") {
        throw ParseError("verdict must be \"backdoor\" or \"normal\"", line_number);
    }
    if (obj["fired_at"].is_number_unsigned()) {
        event.fired_at = obj["fired_at"].get<std::uint64_t>();
    } else if (!obj["fired_at"].is_null()) {
        throw ParseError("fired_at must be a non-negative integer or null", line_number);
    }
    if (obj["run_start"].is_number_unsigned()) {
        event.run_start = obj["run_start"].get<std::uint64_t>();
    } else if (!obj["run_start"].is_null()) {
        throw ParseError("run_start must be a non-negative integer or null", line_number);
    }
    if (obj["reason"].is_string()) {
        event.reason = obj["reason"].get<std::string>();
        if (*event.reason != "eos" && *event.reason != "budget") {
            throw ParseError("reason must be \"eos\" or \"budget\"", line_number);
        }
    } else if (!obj["reason"].is_null()) {
        throw ParseError("reason must be a string or null", line_number);
    }
    if (!obj["P"].is_number() || !obj["L"].is_number_unsigned() ||
        !obj["N"].is_number_unsigned() || !obj["tokens"].is_number_unsigned() ||
        !obj["truncated"].is_boolean()) {
        throw ParseError("P/L/N/tokens/truncated have the wrong types", line_number);
    }
    event.prob_threshold = obj["P"].get<double>();
    event.length_threshold = obj["L"].get<std::uint32_t>();
    event.max_new_tokens = obj["N"].get<std::uint32_t>();
    event.tokens = obj["tokens"].get<std::uint64_t>();
    event.truncated = obj["truncated"].get<bool>();
    return event;
}

DetectionLog::DetectionLog(const std::string& path) : path_(path) {
    std::ofstream touch(path_, std::ios::binary | std::ios::app);
    if (!touch) {
        throw ParseError("cannot open \"" + path_ + "\" for appending", 0);
    }
}

void DetectionLog::append(const DetectionEvent& event) {
    std::lock_guard lock(mutex_);
    std::ofstream out(path_, std::ios::binary | std::ios::app);
    if (!out) {
        throw ParseError("cannot open \"" + path_ + "\" for appending", 0);
    }
    out << detection_event_to_json_line(event) << '\n';
    out.flush();
    if (!out) {
        throw ParseError("append to \"" + path_ + "\" failed", 0);
    }
}

std::vector<DetectionEvent> DetectionLog::read_all(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) {
        throw ParseError("cannot open \"" + path + "\" for reading", 0);
    }
    std::vector<DetectionEvent> events;
    std::string line;
    std::uint64_t line_number = 0;
    while (std::getline(in, line)) {
        ++line_number;
        if (!line.empty() && line.back() == '\r') {
            line.pop_back();
        }
        if (line.empty()) {
            continue;
        }
        events.push_back(detection_event_from_json_line(line, line_number));
    }
    return events;
}

// ---------------------------------------------------------------------------
// Guarded sessions
// ---------------------------------------------------------------------------

namespace {

DetectionEvent make_record(const std::string& session_id, const DetectorConfig& config,
                           const Verdict& verdict, std::uint64_t tokens, bool truncated) {
    DetectionEvent record;
    record.ts = now_rfc3339_utc();
    record.session = session_id;
    if (verdict.is_backdoor()) {
        record.verdict = "backdoor";
        record.fired_at = verdict.fired_at;
        record.run_start = verdict.run_start;
    } else {
        record.verdict = "normal";
        record.reason = verdict.normal_reason == NormalReason::Budget ? "budget" : "eos";
    }
    record.prob_threshold = config.prob_threshold;
    record.length_threshold = config.length_threshold;
    record.max_new_tokens = config.max_new_tokens;
    record.tokens = tokens;
    record.truncated = truncated;
    return record;
}

} // namespace

SessionResult guard_session(TokenSource& source, const DetectorConfig& config, GuardAction action,
                            const std::string& session_id, DetectionLog* log) {
    config.validate();
    Detector detector(config);
    SessionResult result;
    std::vector<std::string> forwarded;
    std::optional<Verdict> verdict;
    bool fired_and_forwarding = false; // ReportOnly after a backdoor verdict

    for (;;) {
        std::optional<TokenEvent> event = source.next();
        if (!event.has_value()) {
            break;
        }
        ++result.tokens_consumed;
        forwarded.push_back(event->token_text.value_or(""));
        if (fired_and_forwarding) {
            if (event->is_eos) {
                break;
            }
            continue;
        }
        const StepOutcome outcome = detector.step(*event);
        if (!outcome.final()) {
            continue;
        }
        verdict = outcome.verdict;
        if (!verdict->is_backdoor()) {
            break; // natural end: eos or budget
        }
        // Backdoor fired. Record immediately, then apply the action.
        result.record = make_record(session_id, config, *verdict, result.tokens_consumed,
                                    /*truncated=*/false);
        if (log != nullptr) {
            log->append(result.record);
        }
        if (action == GuardAction::RedactAndStop) {
            forwarded.resize(static_cast<std::size_t>(verdict->run_start.value()));
            forwarded.push_back("[redacted]");
            result.redacted = true;
        }
        if (action == GuardAction::ReportOnly) {
            fired_and_forwarding = true;
            continue;
        }
        source.cancel();
        break;
    }

    result.top1_mismatches = source.mismatch_count();
    if (!verdict.has_value()) {
        // Source ran dry before any final verdict: benign end, truncated.
        verdict = Verdict::normal(NormalReason::Eos);
        result.truncated = true;
    }
    result.truncated = result.truncated || source.truncated();
    result.verdict = *verdict;

    if (!verdict->is_backdoor()) {
        result.record = make_record(session_id, config, *verdict, result.tokens_consumed,
                                    result.truncated);
        if (log != nullptr) {
            log->append(result.record);
        }
    }

    for (const std::string& piece : forwarded) {
        result.forwarded_text += piece;
    }
    return result;
}

} // namespace confguard
