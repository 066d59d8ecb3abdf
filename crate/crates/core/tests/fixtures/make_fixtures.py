"""Regenerate the binary golden fixtures with an independent writer.

Run from this directory: python3 make_fixtures.py
"""
import struct
import zlib

ROWS = [
    [0.5, -1.25, 3.0, 0.0],
    [1.0, 2.0, -0.75, 8.5],
    [-4.0, 0.125, 0.25, -2.5],
]
CAPTIONS = [
    (10, "a dog runs on the grass", "coco"),
    (11, "two cats sleep on a couch", "coco"),
    (12, "a red bus parked on the street", "nocaps"),
]


def embedding_block():
    out = b"TOMC" + struct.pack("<III", 1, 0, 4) + struct.pack("<Q", len(ROWS))
    for row in ROWS:
        out += struct.pack("<4f", *row)
    return out


def store_file(metric_code):
    body = b"TOMS" + struct.pack("<II", 1, metric_code) + embedding_block()
    body += struct.pack("<Q", len(CAPTIONS))
    for cid, text, source in CAPTIONS:
        t, s = text.encode(), source.encode()
        body += struct.pack("<Q", cid) + struct.pack("<I", len(t)) + t
        body += struct.pack("<I", len(s)) + s
    return body + struct.pack("<I", zlib.crc32(body) & 0xFFFFFFFF)


with open("golden_3x4.emb", "wb") as f:
    f.write(embedding_block())
with open("golden_l2.store", "wb") as f:
    f.write(store_file(0))
