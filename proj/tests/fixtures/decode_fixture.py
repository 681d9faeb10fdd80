#!/usr/bin/env python3
"""Independent decoder for stream_fixture.sse.

Regenerates stream_fixture.events.jsonl from first principles (its own SSE
framing, chunk parsing, top-1 selection, and eos settling) so the C++ decoder
has something to disagree with. Run from this directory:

    python3 decode_fixture.py
"""

import json
import math
import pathlib

HERE = pathlib.Path(__file__).resolve().parent


def frame_events(text):
    """Split raw SSE text into event payloads (joined data: fields)."""
    payloads = []
    data_lines = []
    for raw_line in text.split("\n"):
        line = raw_line[:-1] if raw_line.endswith("\r") else raw_line
        if line == "":
            if data_lines:
                payloads.append("\n".join(data_lines))
                data_lines = []
            continue
        if line.startswith(":"):
            continue
        field, _, value = line.partition(":")
        if field != "data":
            continue
        data_lines.append(value[1:] if value.startswith(" ") else value)
    if data_lines:
        payloads.append("\n".join(data_lines))
    return payloads


def decode(payloads):
    events = []
    pending = None
    mismatches = 0
    done = False

    def flush(eos):
        nonlocal pending
        if pending is not None:
            pending["eos"] = eos
            events.append(pending)
            pending = None

    for payload in payloads:
        if payload == "[DONE]":
            flush(False)
            done = True
            break
        chunk = json.loads(payload)
        choices = chunk["choices"]
        if not choices:
            continue
        choice = choices[0]
        finish = choice.get("finish_reason")
        if finish is not None:
            flush(finish == "stop")
            continue
        logprobs = choice.get("logprobs")
        delta = choice.get("delta", {})
        if logprobs is None:
            if "content" in delta:
                raise SystemExit("fixture chunk carries content without logprobs")
            continue
        for entry in logprobs["content"]:
            candidates = entry.get("top_logprobs") or []
            if candidates:
                top = max(candidates, key=lambda c: c["logprob"])
            else:
                top = {"token": entry["token"], "logprob": entry["logprob"]}
            if top["token"] != entry["token"]:
                mismatches += 1
            flush(False)
            pending = {"i": 0, "p": math.exp(top["logprob"]), "tok": entry["token"], "eos": False}
    flush(False)
    for index, event in enumerate(events):
        event["i"] = index
    return events, mismatches, done


def main():
    text = (HERE / "stream_fixture.sse").read_text(encoding="utf-8")
    events, mismatches, done = decode(frame_events(text))
    assert done, "fixture must end with [DONE]"
    assert mismatches == 1, f"fixture must contain exactly one mismatch, got {mismatches}"
    assert len(events) == 5, f"expected 5 events, got {len(events)}"
    assert events[-1]["eos"] is True
    out = HERE / "stream_fixture.events.jsonl"
    with out.open("w", encoding="utf-8", newline="\n") as sink:
        for event in events:
            sink.write(
                json.dumps(
                    {"i": event["i"], "p": event["p"], "tok": event["tok"], "eos": event["eos"]},
                    ensure_ascii=False,
                )
                + "\n"
            )
    print(f"wrote {out} ({len(events)} events, {mismatches} mismatch)")


if __name__ == "__main__":
    main()
