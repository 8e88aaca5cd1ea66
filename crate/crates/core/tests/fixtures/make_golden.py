"""Writes the recorded protocol transcript used by tests/protocol_golden.rs.

Run from this directory: python3 make_golden.py
"""
import base64
import json
import struct


def request(id, kind, tokens=None, text=None, layer="last", query_start=0, query_len=0, max_new_tokens=0):
    # field order is part of the envelope
    return json.dumps(
        {
            "id": id,
            "kind": kind,
            "tokens": tokens,
            "text": text,
            "layer": layer,
            "query_start": query_start,
            "query_len": query_len,
            "max_new_tokens": max_new_tokens,
        },
        separators=(",", ":"),
        ensure_ascii=False,
    )


def causal_heads(weights_per_head, query_start, cols):
    heads = []
    for weights in weights_per_head:
        rows = []
        for r in range(len(weights)):
            visible = query_start + r + 1
            w = weights[r][:visible]
            total = sum(w)
            rows.append([x / total for x in w] + [0.0] * (cols - visible))
        heads.append(rows)
    return heads


def pack(heads):
    flat = [v for head in heads for row in head for v in row]
    return base64.b64encode(struct.pack("<%df" % len(flat), *flat)).decode()


def as_f32(heads):
    return [[[struct.unpack("<f", struct.pack("<f", v))[0] for v in row] for row in head] for head in heads]


attn_a = causal_heads(
    [
        [[1, 2, 3, 4, 0], [5, 1, 1, 2, 1]],
        [[0.5, 0.25, 0.125, 0.125, 0], [1, 1, 1, 1, 4]],
    ],
    query_start=3,
    cols=5,
)
attn_b = [[[1.0]]]

exchange = [
    (request(1, "tokenize", text="hello world"), {"id": 1, "tokens": [104, 101, 108, 108, 111, 32, 119, 111, 114, 108, 100]}),
    (
        request(2, "attention", tokens=[72, 105, 33, 32, 63], layer="last", query_start=3, query_len=2),
        {"id": 2, "heads": 2, "rows": 2, "cols": 5, "data_b64": pack(attn_a)},
    ),
    (request(3, "generate", tokens=[72, 105, 63], max_new_tokens=3), {"id": 3, "tokens": [65, 66, 67]}),
    (request(4, "detokenize", tokens=[104, 105]), {"id": 4, "text": "hi"}),
    (
        request(5, "attention", tokens=[7], layer=1, query_start=0, query_len=1),
        {"id": 5, "heads": 1, "rows": 1, "cols": 1, "data_b64": pack(attn_b)},
    ),
]

handshake = {"vocab_size": 256, "layers": 2, "max_window": 64}

with open("golden_requests.ndjson", "w") as f:
    for req, _ in exchange:
        f.write(req + "\n")

with open("golden_responses.ndjson", "w") as f:
    f.write(json.dumps(handshake, separators=(",", ":")) + "\n")
    for _, resp in exchange:
        f.write(json.dumps(resp, separators=(",", ":")) + "\n")

with open("golden_expected.json", "w") as f:
    json.dump({"attention_2": as_f32(attn_a), "attention_5": as_f32(attn_b)}, f, indent=1)
    f.write("\n")
