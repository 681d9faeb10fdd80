#include <cmath>

#include "confguard/errors.hpp"
#include "confguard/gateway.hpp"

#include "json.hpp"

namespace confguard {

double logprob_to_prob(double logprob) {
    if (std::isnan(logprob)) {
        throw ProtocolError("logprob is NaN");
    }
    const double p = std::exp(logprob);
    if (p <= 1.0) {
        return p;
    }
    // Positive logprobs up to rounding fuzz show up in the wild; beyond that
    // the upstream is not sending probabilities.
    if (p <= 1.0 + 1e-9) {
        return 1.0;
    }
    throw ProtocolError("logprob " + std::to_string(logprob) + " implies probability > 1");
}

std::vector<std::string> SseFramer::feed(std::string_view bytes) {
    buffer_.append(bytes);
    std::vector<std::string> payloads;
    std::size_t start = 0;
    for (;;) {
        const std::size_t nl = buffer_.find('\n', start);
        if (nl == std::string::npos) {
            break;
        }
        std::string_view line(buffer_.data() + start, nl - start);
        if (!line.empty() && line.back() == '\r') {
            line.remove_suffix(1);
        }
        start = nl + 1;
        if (line.empty()) {
            // Blank line terminates the event.
            if (!data_lines_.empty()) {
                std::string payload = data_lines_.front();
                for (std::size_t i = 1; i < data_lines_.size(); ++i) {
                    payload += '\n';
                    payload += data_lines_[i];
                }
                data_lines_.clear();
                payloads.push_back(std::move(payload));
            }
            continue;
        }
        if (line.front() == ':') {
            continue; // comment
        }
        if (line.starts_with("data:")) {
            line.remove_prefix(5);
            if (!line.empty() && line.front() == ' ') {
                line.remove_prefix(1);
            }
            data_lines_.emplace_back(line);
        }
        // event:/id:/retry: fields carry nothing we use.
    }
    buffer_.erase(0, start);
    return payloads;
}

std::vector<TokenEvent> StreamAssembler::feed_payload(const std::string& payload) {
    std::vector<TokenEvent> out;
    if (done_) {
        return out;
    }
    if (payload == "[DONE]") {
        done_ = true;
        if (pending_.has_value()) {
            // Stream ended without a finish_reason for this token; pass it
            // through un-flagged.
            out.push_back(*std::move(pending_));
            pending_.reset();
        }
        return out;
    }

    nlohmann::json chunk;
    try {
        chunk = nlohmann::json::parse(payload);
    } catch (const nlohmann::json::exception& e) {
        throw ProtocolError(std::string("bad chunk JSON: ") + e.what());
    }
    if (!chunk.is_object() || !chunk.contains("choices") || !chunk["choices"].is_array()) {
        throw ProtocolError("chunk has no choices array");
    }
    if (chunk["choices"].empty()) {
        return out; // prelude chunk (some gateways send these); nothing to do
    }
    const auto& choice = chunk["choices"][0];

    const bool has_content = choice.contains("delta") && choice["delta"].is_object() &&
                             choice["delta"].contains("content") &&
                             choice["delta"]["content"].is_string() &&
                             !choice["delta"]["content"].get<std::string>().empty();
    const bool has_logprobs = choice.contains("logprobs") && choice["logprobs"].is_object() &&
                              choice["logprobs"].contains("content") &&
                              choice["logprobs"]["content"].is_array();

    if (has_content && !has_logprobs) {
        throw ProtocolError("chunk carries content without logprobs; "
                            "the upstream request must enable logprobs");
    }

    if (has_logprobs) {
        for (const auto& entry : choice["logprobs"]["content"]) {
            if (!entry.is_object() || !entry.contains("token") || !entry.contains("logprob") ||
                !entry["logprob"].is_number()) {
                throw ProtocolError("malformed logprobs content entry");
            }
            const std::string sampled = entry["token"].is_string()
                                            ? entry["token"].get<std::string>()
                                            : std::string{};
            double top1_logprob = entry["logprob"].get<double>();
            std::string top1_token = sampled;
            if (entry.contains("top_logprobs") && entry["top_logprobs"].is_array() &&
                !entry["top_logprobs"].empty()) {
                bool first = true;
                for (const auto& cand : entry["top_logprobs"]) {
                    if (!cand.is_object() || !cand.contains("logprob") ||
                        !cand["logprob"].is_number()) {
                        throw ProtocolError("malformed top_logprobs entry");
                    }
                    const double lp = cand["logprob"].get<double>();
                    if (first || lp > top1_logprob) {
                        top1_logprob = lp;
                        top1_token = cand.contains("token") && cand["token"].is_string()
                                         ? cand["token"].get<std::string>()
                                         : std::string{};
                        first = false;
                    }
                }
                if (top1_token != sampled) {
                    ++mismatch_count_;
                }
            }

            TokenEvent event;
            event.index = next_index_++;
            event.top1_prob = logprob_to_prob(top1_logprob);
            event.token_text = sampled;
            event.is_eos = false;
            if (pending_.has_value()) {
                out.push_back(*std::move(pending_));
            }
            pending_ = std::move(event);
        }
    }

    if (choice.contains("finish_reason") && choice["finish_reason"].is_string()) {
        finish_reason_ = choice["finish_reason"].get<std::string>();
        done_ = true;
        if (pending_.has_value()) {
            pending_->is_eos = finish_reason_ == "stop";
            out.push_back(*std::move(pending_));
            pending_.reset();
        }
    }
    return out;
}

} // namespace confguard
