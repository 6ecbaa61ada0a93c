#!/usr/bin/env python3
"""Regenerate vectors.json, the golden frame corpus for EXE/FIN servers.

Every byte of every expected reply is written out literally below; nothing is
produced by the implementations under test.  The only computed part is the
4-byte big-endian length prefix in front of each literal payload.

Run from anywhere: python3 gen_vectors.py
"""

import json
import struct
from pathlib import Path

OUT = Path(__file__).parent / "vectors.json"


def frame(text: str) -> str:
    """Hex of one wire frame around literal JSON text."""
    payload = text.encode("utf-8")
    return (struct.pack(">I", len(payload)) + payload).hex()


def raw(data: bytes) -> str:
    return data.hex()


FIN_REQ = '{"c":"FIN"}'
FIN_OK = '{"stat":"OK"}'
BAD_PRIMITIVE = '{"stat":"ERROR","val":{"error":"bad_primitive"}}'
BAD_FER = '{"stat":"ERROR","val":{"error":"bad_fer"}}'
BAD_FRAME = '{"stat":"ERROR","val":{"error":"bad_frame"}}'

SESSIONS = [
    {
        "name": "hellocot_basic",
        "function": "hellocot",
        "final": "exit",
        "exchanges": [
            # Plain execution, twice: the value never varies.
            [frame('{"c":"EXE","fer":{"m":{},"x":{}}}'),
             frame('{"stat":"OK","val":{"ret":"Hello Cloud of Things!"}}')],
            [frame('{"c":"EXE","fer":{"m":{"u":"alice"},"x":{"ignored":true}}}'),
             frame('{"stat":"OK","val":{"ret":"Hello Cloud of Things!"}}')],
            # Unknown primitive, then proof the server still works.
            [frame('{"c":"NOP"}'), frame(BAD_PRIMITIVE)],
            [frame('{"c":"EXE","fer":{"m":{},"x":{}}}'),
             frame('{"stat":"OK","val":{"ret":"Hello Cloud of Things!"}}')],
            # EXE without a usable inner request.
            [frame('{"c":"EXE"}'), frame(BAD_FER)],
            [frame('{"c":"EXE","fer":"not a map"}'), frame(BAD_FER)],
            [frame('{"c":"EXE","fer":{"x":{}}}'), frame(BAD_FER)],
            [frame('{"c":"EXE","fer":{"m":[],"x":{}}}'), frame(BAD_FER)],
            [frame(FIN_REQ), frame(FIN_OK)],
        ],
    },
    {
        "name": "echo_identity",
        "function": "echo",
        "final": "exit",
        "exchanges": [
            [frame('{"c":"EXE","fer":{"m":{},"x":{}}}'),
             frame('{"stat":"OK","val":{}}')],
            [frame('{"c":"EXE","fer":{"m":{},"x":{"k":1,"nested":{"a":[1,2,3]},"s":"héllo ✓"}}}'),
             frame('{"stat":"OK","val":{"k":1,"nested":{"a":[1,2,3]},"s":"héllo ✓"}}')],
            [frame('{"c":"EXE","fer":{"m":{},"x":{"deep":[{"b":false},null,-2.5]}}}'),
             frame('{"stat":"OK","val":{"deep":[{"b":false},null,-2.5]}}')],
            [frame(FIN_REQ), frame(FIN_OK)],
        ],
    },
    {
        "name": "odd_fail_isolation",
        "function": "odd_fail",
        "final": "exit",
        "exchanges": [
            [frame('{"c":"EXE","fer":{"m":{},"x":{"i":4}}}'),
             frame('{"stat":"OK","val":{"ret":4}}')],
            [frame('{"c":"EXE","fer":{"m":{},"x":{"i":3}}}'),
             frame('{"stat":"ERROR","val":{"error":"ValueError: odd input 3 rejected"}}')],
            # A failing call must not poison the next one.
            [frame('{"c":"EXE","fer":{"m":{},"x":{"i":0}}}'),
             frame('{"stat":"OK","val":{"ret":0}}')],
            [frame('{"c":"EXE","fer":{"m":{},"x":{"i":11}}}'),
             frame('{"stat":"ERROR","val":{"error":"ValueError: odd input 11 rejected"}}')],
            [frame(FIN_REQ), frame(FIN_OK)],
        ],
    },
    {
        "name": "malformed_frames_survive",
        "function": "hellocot",
        "final": "exit",
        "exchanges": [
            # Length prefix is fine, payload is not JSON.
            [raw(struct.pack(">I", 9) + b"{not json"), frame(BAD_FRAME)],
            # Payload is valid JSON but not an object.
            [raw(struct.pack(">I", 7) + b"[1,2,3]"), frame(BAD_FRAME)],
            # Payload is not UTF-8 at all.
            [raw(struct.pack(">I", 4) + b"\xff\xfe\x00\x01"), frame(BAD_FRAME)],
            # The server must still be serving afterwards.
            [frame('{"c":"EXE","fer":{"m":{},"x":{}}}'),
             frame('{"stat":"OK","val":{"ret":"Hello Cloud of Things!"}}')],
            [frame(FIN_REQ), frame(FIN_OK)],
        ],
    },
]


def main() -> None:
    document = {
        "description": (
            "Golden request/reply frames for EXE/FIN servers. Each exchange is "
            "[request_frame_hex, expected_reply_frame_hex]; replies must match "
            "byte for byte. final=exit means the process must terminate with "
            "code 0 after the last exchange."),
        "sessions": SESSIONS,
    }
    OUT.write_text(json.dumps(document, indent=2, ensure_ascii=False) + "\n",
                   encoding="utf-8")
    total = sum(len(s["exchanges"]) for s in SESSIONS)
    print(f"wrote {OUT} ({len(SESSIONS)} sessions, {total} exchanges)")


if __name__ == "__main__":
    main()
