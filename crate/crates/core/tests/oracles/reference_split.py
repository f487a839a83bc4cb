#!/usr/bin/env python3
"""Reference fragment splitter.

Reads a collection manifest and its `{doc_id}.txt` bodies and prints the
fragment store as JSON lines, byte for byte as the Rust store writes it.

    python3 reference_split.py MANIFEST BODIES_DIR [--min 80] [--max 2000]

Rules:
  * body: NFC, CR/CRLF to LF, runs of 3+ newlines cut to 2
  * paragraphs: separated by lines that are empty or all whitespace,
    trimmed at both ends
  * paragraphs over MAX code points are packed greedily from sentences
    (a sentence ends at . ? ! followed by whitespace), then any piece still
    over MAX is cut every MAX code points with whitespace trimmed
  * pieces under MIN code points absorb their successor while the joined
    span stays within MAX; a short last piece joins its predecessor under
    the same bound
  * spans are UTF-8 byte offsets into the normalized body
"""

import argparse
import json
import re
import sys
import unicodedata
from pathlib import Path


def normalize(raw):
    s = unicodedata.normalize("NFC", raw).replace("\r\n", "\n").replace("\r", "\n")
    return re.sub(r"\n{3,}", "\n\n", s)


def paragraphs(body):
    """Yield (start, end) code-point spans of trimmed paragraphs."""
    out = []
    pos = 0
    block_start = None
    block_end = None
    for line in body.split("\n"):
        if line.strip() == "":
            if block_start is not None:
                out.append((block_start, block_end))
                block_start = None
        else:
            lead = len(line) - len(line.lstrip())
            if block_start is None:
                block_start = pos + lead
            block_end = pos + len(line.rstrip())
        pos += len(line) + 1
    if block_start is not None:
        out.append((block_start, block_end))
    return out


def sentences(body, start, end):
    out = []
    i = start
    while i < end:
        while i < end and body[i].isspace():
            i += 1
        if i >= end:
            break
        j = i
        while j < end:
            if body[j] in ".?!" and j + 1 < end and body[j + 1].isspace():
                j += 1
                break
            j += 1
        s, e = i, j
        while e > s and body[e - 1].isspace():
            e -= 1
        out.append((s, e))
        i = j
    return out


def hard_cut(body, span, limit):
    s, e = span
    if e - s <= limit:
        return [span]
    out = []
    while s < e:
        while s < e and body[s].isspace():
            s += 1
        if s >= e:
            break
        c = min(s + limit, e)
        t = c
        while t > s and body[t - 1].isspace():
            t -= 1
        if t > s:
            out.append((s, t))
        s = c
    return out


def split_para(body, span, limit):
    s, e = span
    if e - s <= limit:
        return [span]
    packed = []
    for ss, se in sentences(body, s, e):
        if packed and se - packed[-1][0] <= limit:
            packed[-1] = (packed[-1][0], se)
        else:
            packed.append((ss, se))
    return [p for chunk in packed for p in hard_cut(body, chunk, limit)]


def merge(pieces, lo, hi):
    out = []
    carry = None
    for p in pieces:
        if carry is not None:
            if p[1] - carry[0] <= hi:
                p = (carry[0], p[1])
            else:
                out.append(carry)
            carry = None
        if p[1] - p[0] < lo:
            carry = p
        else:
            out.append(p)
    if carry is not None:
        if out and carry[1] - out[-1][0] <= hi:
            out[-1] = (out[-1][0], carry[1])
        else:
            out.append(carry)
    return out


def byte_offset(body, cp):
    return len(body[:cp].encode("utf-8"))


def dumps(obj):
    return json.dumps(obj, ensure_ascii=False, separators=(",", ":"))


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("manifest")
    ap.add_argument("bodies")
    ap.add_argument("--min", type=int, default=80)
    ap.add_argument("--max", type=int, default=2000)
    args = ap.parse_args()

    manifest = json.loads(Path(args.manifest).read_text(encoding="utf-8"))
    docs = []
    for d in manifest["documents"]:
        meta = {"doc_id": d["doc_id"], "title": d["title"], "authors": d.get("authors", [])}
        for key in ("publication_date", "source_uri"):
            if d.get(key) is not None:
                meta[key] = d[key]
        meta["language"] = d.get("language", "en")
        docs.append(meta)

    frags = []
    for meta in docs:
        path = Path(args.bodies) / (meta["doc_id"] + ".txt")
        if not path.exists():
            continue
        body = normalize(path.read_text(encoding="utf-8"))
        pieces = [p for para in paragraphs(body) for p in split_para(body, para, args.max)]
        for n, (s, e) in enumerate(merge(pieces, args.min, args.max)):
            frags.append({
                "kind": "fragment",
                "fragment_id": f"{meta['doc_id']}:{n}",
                "doc_id": meta["doc_id"],
                "ordinal": n,
                "text": body[s:e],
                "char_span": [byte_offset(body, s), byte_offset(body, e)],
            })

    header = {
        "kind": "header",
        "format": "gw-fragments",
        "version": 1,
        "collection_id": manifest["collection_id"],
        "title": manifest["title"],
        "manifest_version": manifest.get("manifest_version", "1"),
    }
    if manifest.get("created_at"):
        header["created_at"] = manifest["created_at"]
    header["documents"] = docs
    header["fragment_count"] = len(frags)
    out = sys.stdout.buffer
    out.write((dumps(header) + "\n").encode("utf-8"))
    for f in frags:
        out.write((dumps(f) + "\n").encode("utf-8"))


if __name__ == "__main__":
    main()
