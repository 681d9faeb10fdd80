#pragma once

#include <cstdint>
#include <iosfwd>
#include <span>
#include <string>
#include <vector>

#include "confguard/token_event.hpp"

namespace confguard {

/// One event as a single JSON line (no trailing newline). Keys are emitted in
/// wire order: i, p, tok, eos.
std::string event_to_json_line(const TokenEvent& event);

/// Parses one JSON line into an event. line_number is 1-based and is only
/// used for error messages. Enforces p in [0,1] and the exact field types;
/// unknown keys are rejected.
TokenEvent event_from_json_line(const std::string& line, std::uint64_t line_number);

void write_events_jsonl(std::ostream& out, std::span<const TokenEvent> events);
void write_events_jsonl_file(const std::string& path, std::span<const TokenEvent> events);

/// Reads a whole stream. Blank lines are rejected; indices must be
/// contiguous from 0.
std::vector<TokenEvent> read_events_jsonl(std::istream& in);
std::vector<TokenEvent> read_events_jsonl_file(const std::string& path);

} // namespace confguard
