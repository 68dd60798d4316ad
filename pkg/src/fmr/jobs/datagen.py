"""Seeded dataset generators for the benchmark jobs."""

from __future__ import annotations

import numpy as np

_SEPARATORS = (" ", " ", " ", ", ", ". ", " - ", "; ", "! ")


def zipf_corpus(nbytes: int, seed: int = 0, vocab_size: int = 5000, exponent: float = 1.1,
                tokens_per_line: tuple[int, int] = (6, 18)) -> bytes:
    """ASCII text of at most ``nbytes`` bytes with Zipf-distributed word frequencies.

    Words are random lowercase strings; about one in eight occurrences is
    capitalised and separators include punctuation, so tokenisation and
    case folding both get exercised.  Output ends on a line boundary.
    """
    if nbytes <= 0:
        return b""
    rng = np.random.default_rng(seed)
    letters = np.frombuffer(b"abcdefghijklmnopqrstuvwxyz0123456789", dtype=np.uint8)
    words = []
    seen = set()
    while len(words) < vocab_size:
        length = int(rng.integers(1, 11))
        w = bytes(letters[rng.integers(0, 26 if len(words) % 7 else 36, size=length)]).decode()
        if w not in seen:
            seen.add(w)
            words.append(w)
    ranks = np.arange(1, vocab_size + 1, dtype=np.float64)
    probs = ranks ** -exponent
    probs /= probs.sum()

    lines: list[str] = []
    size = 0
    lo, hi = tokens_per_line
    while size < nbytes:
        batch = rng.choice(vocab_size, size=4096, p=probs)
        caps = rng.random(4096) < 0.125
        seps = rng.integers(0, len(_SEPARATORS), size=4096)
        i = 0
        while i < 4096 and size < nbytes:
            n = int(rng.integers(lo, hi + 1))
            parts = []
            for j in range(i, min(i + n, 4096)):
                w = words[batch[j]]
                parts.append(w.capitalize() if caps[j] else w)
                parts.append(_SEPARATORS[seps[j]])
            line = "".join(parts[:-1]) + "\n"
            lines.append(line)
            size += len(line)
            i += n
    text = "".join(lines).encode("ascii")
    if len(text) > nbytes:
        text = text[:text.rfind(b"\n", 0, nbytes) + 1]
    return text


def gaussian_blobs(n: int, dim: int, centers: int, seed: int = 0, spread: float = 1.0,
                   box: float = 10.0) -> list[tuple[float, ...]]:
    """``n`` points drawn round ``centers`` uniformly placed blob centres."""
    rng = np.random.default_rng(seed)
    mu = rng.uniform(-box, box, size=(centers, dim))
    labels = rng.integers(0, centers, size=n)
    pts = mu[labels] + rng.normal(0.0, spread, size=(n, dim))
    return [tuple(map(float, row)) for row in pts]
