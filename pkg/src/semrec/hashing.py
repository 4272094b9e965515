"""Content digests used for provenance and cache addressing.

All digests are the first 16 hex characters (64 bits) of SHA-256.
"""

import hashlib


def digest_bytes(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()[:16]


def digest_text(text: str) -> str:
    return digest_bytes(text.encode("utf-8"))


def digest_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()[:16]
