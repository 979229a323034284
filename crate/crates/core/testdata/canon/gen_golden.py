#!/usr/bin/env python3
"""Reference canonicalizer used to produce the golden vectors in this directory.

Independent of the Rust implementation: keys sorted by UTF-16 code units,
no whitespace, numbers as plain decimals without exponent or trailing zeros.
Run from this directory: python3 gen_golden.py
"""
import base64
import decimal
import glob
import hashlib
import json


def enc_number(d):
    d = decimal.Decimal(d)
    if d == 0:
        return "0"
    d = d.normalize()
    s = format(d, "f")
    return s


def enc_string(s):
    out = ['"']
    short = {'"': '\\"', '\\': '\\\\', '\b': '\\b', '\f': '\\f', '\n': '\\n', '\r': '\\r', '\t': '\\t'}
    for ch in s:
        if ch in short:
            out.append(short[ch])
        elif ord(ch) < 0x20:
            out.append('\\u%04x' % ord(ch))
        else:
            out.append(ch)
    out.append('"')
    return ''.join(out)


def enc(v):
    if v is None:
        return "null"
    if v is True:
        return "true"
    if v is False:
        return "false"
    if isinstance(v, (int, decimal.Decimal)):
        return enc_number(v)
    if isinstance(v, str):
        return enc_string(v)
    if isinstance(v, list):
        return "[" + ",".join(enc(x) for x in v) + "]"
    if isinstance(v, dict):
        keys = sorted(v.keys(), key=lambda k: k.encode("utf-16-be"))
        return "{" + ",".join(enc_string(k) + ":" + enc(v[k]) for k in keys) + "}"
    raise TypeError(type(v))


for path in sorted(glob.glob("*.json")):
    with open(path, "rb") as f:
        doc = json.loads(f.read().decode("utf-8"), parse_float=decimal.Decimal, parse_int=decimal.Decimal)
    data = enc(doc).encode("utf-8")
    stem = path[:-5]
    with open(stem + ".bytes", "wb") as f:
        f.write(data)
    digest = base64.b64encode(hashlib.sha256(data).digest()).decode()
    with open(stem + ".hash", "w") as f:
        f.write("sha256:" + digest + "\n")
    print(stem, "sha256:" + digest)
