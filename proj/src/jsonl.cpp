#include "confguard/jsonl.hpp"

#include <fstream>
#include <istream>
#include <ostream>

#include "confguard/errors.hpp"

#include "json.hpp"

namespace confguard {

std::string event_to_json_line(const TokenEvent& event) {
    nlohmann::ordered_json obj;
    obj["i"] = event.index;
    obj["p"] = event.top1_prob;
    if (event.token_text.has_value()) {
        obj["tok"] = *event.token_text;
    } else {
        obj["tok"] = nullptr;
    }
    obj["eos"] = event.is_eos;
    return obj.dump();
}

TokenEvent event_from_json_line(const std::string& line, std::uint64_t line_number) {
    nlohmann::json obj;
    try {
        obj = nlohmann::json::parse(line);
    } catch (const nlohmann::json::exception& e) {
        throw ParseError(std::string("invalid JSON: ") + e.what(), line_number);
    }
    if (!obj.is_object()) {
        throw ParseError("event line is not a JSON object", line_number);
    }
    for (const auto& [key, value] : obj.items()) {
        (void)value;
        if (key != "i" && key != "p" && key != "tok" && key != "eos") {
            throw ParseError("unknown key \"" + key + "\" in event line", line_number);
        }
    }
    if (!obj.contains("i") || !obj.contains("p") || !obj.contains("tok") || !obj.contains("eos")) {
        throw ParseError("event line must have keys i, p, tok, eos", line_number);
    }

    TokenEvent event;
    const auto& idx = obj["i"];
    if (!idx.is_number_unsigned()) {
        throw ParseError("\"i\" must be a non-negative integer", line_number);
    }
    event.index = idx.get<std::uint64_t>();

    const auto& prob = obj["p"];
    if (!prob.is_number()) {
        throw ParseError("\"p\" must be a number", line_number);
    }
    event.top1_prob = prob.get<double>();
    if (!(event.top1_prob >= 0.0) || !(event.top1_prob <= 1.0)) {
        throw ParseError("\"p\" must lie in [0, 1]", line_number);
    }

    const auto& tok = obj["tok"];
    if (tok.is_null()) {
        event.token_text.reset();
    } else if (tok.is_string()) {
        event.token_text = tok.get<std::string>();
    } else {
        throw ParseError("\"tok\" must be a string or null", line_number);
    }

    const auto& eos = obj["eos"];
    if (!eos.is_boolean()) {
        throw ParseError("\"eos\" must be a boolean", line_number);
    }
    event.is_eos = eos.get<bool>();
    return event;
}

void write_events_jsonl(std::ostream& out, std::span<const TokenEvent> events) {
    for (const auto& event : events) {
        out << event_to_json_line(event) << '\n';
    }
}

void write_events_jsonl_file(const std::string& path, std::span<const TokenEvent> events) {
    std::ofstream out(path, std::ios::binary);
    if (!out) {
        throw ParseError("cannot open \"" + path + "\" for writing", 0);
    }
    write_events_jsonl(out, events);
    if (!out) {
        throw ParseError("write failed for \"" + path + "\"", 0);
    }
}

std::vector<TokenEvent> read_events_jsonl(std::istream& in) {
    std::vector<TokenEvent> events;
    std::string line;
    std::uint64_t line_number = 0;
    while (std::getline(in, line)) {
        ++line_number;
        if (!line.empty() && line.back() == '\r') {
            line.pop_back();
        }
        if (line.empty()) {
            throw ParseError("blank line in event stream", line_number);
        }
        TokenEvent event = event_from_json_line(line, line_number);
        if (event.index != events.size()) {
            throw IndexGap("event index " + std::to_string(event.index) + " at line " +
                           std::to_string(line_number) + ", expected " +
                           std::to_string(events.size()));
        }
        events.push_back(std::move(event));
    }
    return events;
}

std::vector<TokenEvent> read_events_jsonl_file(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) {
        throw ParseError("cannot open \"" + path + "\" for reading", 0);
    }
    return read_events_jsonl(in);
}

} // namespace confguard
