#pragma once

#include <atomic>
#include <cstdint>
#include <fstream>
#include <iosfwd>
#include <memory>
#include <mutex>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <thread>
#include <vector>

#include "confguard/detector.hpp"
#include "confguard/token_event.hpp"

namespace confguard {

// ---------------------------------------------------------------------------
// Upstream wire decoding (server-sent events -> token events)
// ---------------------------------------------------------------------------

/// exp(logprob), with float fuzz just above 1.0 clamped back down. Anything
/// beyond the fuzz band is a protocol violation.
double logprob_to_prob(double logprob);

/// Incremental SSE framer: feed raw bytes, get back complete event payloads
/// (the joined data: fields). Comment lines and non-data fields are skipped.
class SseFramer {
public:
    std::vector<std::string> feed(std::string_view bytes);

    /// True when bytes of an unterminated event are still buffered — a stream
    /// that ends in this state was cut mid-event.
    bool mid_event() const { return !buffer_.empty() || !data_lines_.empty(); }

private:
    std::string buffer_;
    std::vector<std::string> data_lines_;
};

/// Turns chat-completion chunk payloads into finalized token events.
///
/// The final content token must carry is_eos, but its chunk arrives before
/// the finish_reason chunk, so the newest event is held back until the next
/// payload settles whether the stream stopped there.
class StreamAssembler {
public:
    /// Feed one payload (chunk JSON, or the [DONE] sentinel). Returns the
    /// events this payload finalized, in order.
    std::vector<TokenEvent> feed_payload(const std::string& payload);

    bool done() const { return done_; }
    const std::string& finish_reason() const { return finish_reason_; }

    /// Chunks whose sampled token differed from the top-1 candidate.
    std::uint64_t mismatch_count() const { return mismatch_count_; }

private:
    std::optional<TokenEvent> pending_;
    std::uint64_t next_index_ = 0;
    std::uint64_t mismatch_count_ = 0;
    std::string finish_reason_;
    bool done_ = false;
};

// ---------------------------------------------------------------------------
// Token sources
// ---------------------------------------------------------------------------

enum class SourceKind { ApiStream, JsonlReplay, Stdin };

struct SourceConfig {
    SourceKind kind = SourceKind::JsonlReplay;
    std::string endpoint_url{};
    std::string model_name{};
    /// Name of the environment variable holding the API key. The key itself
    /// is never accepted through flags or files.
    std::string api_key_env = "OPENAI_API_KEY";
    std::uint32_t request_timeout_ms = 30000;
    std::string file_path{};
    std::string prompt{};
    double temperature = 0.0;
    std::uint32_t max_tokens = 50;
};

/// Non-fatal issues with a source config (e.g. non-zero temperature, which
/// makes the sampled stream diverge from greedy top-1 decoding).
std::vector<std::string> source_warnings(const SourceConfig& config);

/// Pull-model token stream. next() blocks until an event is available,
/// returns nullopt at end of stream, and throws on hard failures.
class TokenSource {
public:
    virtual ~TokenSource() = default;
    virtual std::optional<TokenEvent> next() = 0;
    /// Stream ended before its natural end (transport dropped mid-stream).
    virtual bool truncated() const = 0;
    virtual std::uint64_t mismatch_count() const = 0;
    /// Caller will pull no more events; live transports abort.
    virtual void cancel() = 0;
};

class VectorSource final : public TokenSource {
public:
    explicit VectorSource(std::vector<TokenEvent> events) : events_(std::move(events)) {}
    std::optional<TokenEvent> next() override;
    bool truncated() const override { return false; }
    std::uint64_t mismatch_count() const override { return 0; }
    void cancel() override { pos_ = events_.size(); }

private:
    std::vector<TokenEvent> events_;
    std::size_t pos_ = 0;
};

/// Lazily replays a JSONL event stream; parse and contiguity errors surface
/// from next() with line numbers.
class JsonlReplaySource final : public TokenSource {
public:
    explicit JsonlReplaySource(const std::string& path);
    explicit JsonlReplaySource(std::istream& in);
    std::optional<TokenEvent> next() override;
    bool truncated() const override { return false; }
    std::uint64_t mismatch_count() const override { return 0; }
    void cancel() override { cancelled_ = true; }

private:
    std::ifstream owned_;
    std::istream* in_ = nullptr;
    std::uint64_t line_number_ = 0;
    std::uint64_t next_index_ = 0;
    bool cancelled_ = false;
};

/// Live chat-completions stream over HTTP. A worker thread runs the request
/// and hands events over a capacity-1 queue, so the producer advances in
/// lock step with the consumer and cancel() aborts the transfer.
class ApiStreamSource final : public TokenSource {
public:
    explicit ApiStreamSource(const SourceConfig& config);
    ~ApiStreamSource() override;

    ApiStreamSource(const ApiStreamSource&) = delete;
    ApiStreamSource& operator=(const ApiStreamSource&) = delete;

    std::optional<TokenEvent> next() override;
    bool truncated() const override { return truncated_.load(); }
    std::uint64_t mismatch_count() const override { return mismatches_.load(); }
    void cancel() override;

private:
    void run_request(SourceConfig config, std::string api_key);

    struct Queue;
    std::unique_ptr<Queue> queue_;
    std::thread worker_;
    std::atomic<bool> truncated_{false};
    std::atomic<std::uint64_t> mismatches_{0};
};

/// Builds the right source for the config. ApiStream resolves the API key
/// from the named environment variable (AuthError when unset or empty) and
/// opens the connection; Stdin replays JSONL from standard input.
std::unique_ptr<TokenSource> open_source(const SourceConfig& config);

// ---------------------------------------------------------------------------
// Guarded sessions and the detection log
// ---------------------------------------------------------------------------

enum class GuardAction { StopAndReport, ReportOnly, RedactAndStop };

/// One loggable session record. Field set matches the JSONL log schema.
struct DetectionEvent {
    std::string ts;      // RFC3339 UTC, seconds resolution
    std::string session; // caller-supplied session id
    std::string verdict; // "backdoor" | "normal"
    std::optional<std::uint64_t> fired_at{};
    std::optional<std::uint64_t> run_start{};
    std::optional<std::string> reason{}; // "eos" | "budget" for normal verdicts
    double prob_threshold = 0.0;
    std::uint32_t length_threshold = 0;
    std::uint32_t max_new_tokens = 0;
    std::uint64_t tokens = 0;
    bool truncated = false;

    bool operator==(const DetectionEvent&) const = default;
};

std::string detection_event_to_json_line(const DetectionEvent& event);
DetectionEvent detection_event_from_json_line(const std::string& line,
                                              std::uint64_t line_number = 0);

/// Append-only JSONL log, one record per line. Appends are serialized and
/// flushed, so a record is durable once append() returns.
class DetectionLog {
public:
    explicit DetectionLog(const std::string& path);
    void append(const DetectionEvent& event);
    const std::string& path() const { return path_; }

    static std::vector<DetectionEvent> read_all(const std::string& path);

private:
    std::string path_;
    std::mutex mutex_;
};

struct SessionResult {
    Verdict verdict = Verdict::normal(NormalReason::Eos);
    std::uint64_t tokens_consumed = 0;
    bool truncated = false;
    std::uint64_t top1_mismatches = 0;
    std::string forwarded_text;
    bool redacted = false;
    DetectionEvent record{};
};

std::string now_rfc3339_utc();

/// Pulls the source to completion under the detector. On a Backdoor verdict
/// the action decides what happens next: StopAndReport and RedactAndStop
/// cancel the source immediately (RedactAndStop also retracts the locked
/// run from the forwarded text); ReportOnly keeps forwarding to the natural
/// end. Every session appends exactly one record to the log when one is
/// given — backdoor records are written at detection time.
SessionResult guard_session(TokenSource& source, const DetectorConfig& config, GuardAction action,
                            const std::string& session_id, DetectionLog* log = nullptr);

} // namespace confguard
