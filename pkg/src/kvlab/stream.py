"""Synthetic query/key/value streams and their line-delimited trace files."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

LOGIT_CAP = 30.0


class TraceFormatError(ValueError):
    pass


@dataclass(eq=False)
class Stream:
    """Pre-projected ``(q, k, v)`` triples; the first ``prefill_len`` form the prompt."""

    queries: np.ndarray
    keys: np.ndarray
    values: np.ndarray
    prefill_len: int
    seed: int | None = None
    scale: float | None = None

    def __post_init__(self):
        self.queries = np.asarray(self.queries, dtype=np.float64).reshape(len(self.queries), -1)
        self.keys = np.asarray(self.keys, dtype=np.float64).reshape(len(self.keys), -1)
        self.values = np.asarray(self.values, dtype=np.float64).reshape(len(self.values), -1)
        if not self.queries.shape == self.keys.shape == self.values.shape:
            raise ValueError("queries, keys and values must share a shape")
        if self.queries.shape[1] < 1:
            raise ValueError("dimension must be positive")
        if not 1 <= self.prefill_len <= self.queries.shape[0]:
            raise ValueError("prefill length must lie in [1, total length]")
        for name in ("queries", "keys", "values"):
            if not np.all(np.isfinite(getattr(self, name))):
                raise ValueError(f"{name} contain non-finite values")

    @property
    def dim(self) -> int:
        return self.queries.shape[1]

    @property
    def decode_len(self) -> int:
        return self.queries.shape[0] - self.prefill_len

    def __len__(self) -> int:
        return self.queries.shape[0]

    def __eq__(self, other) -> bool:
        if not isinstance(other, Stream):
            return NotImplemented
        return (
            self.prefill_len == other.prefill_len
            and self.seed == other.seed
            and self.scale == other.scale
            and all(
                np.array_equal(getattr(self, n), getattr(other, n)) for n in ("queries", "keys", "values")
            )
        )


def _clip_norms(x: np.ndarray, max_norm: float) -> np.ndarray:
    norms = np.linalg.norm(x, axis=1, keepdims=True)
    return x * np.minimum(1.0, max_norm / np.maximum(norms, 1e-300))


def generate_stream(
    d: int,
    L: int,
    N: int,
    seed: int,
    scale: float = 8.0,
    dup_frac: float = 0.2,
    dup_noise: float = 1e-3,
    query_corr: float = 0.0,
    salience: float = 0.0,
    query_align: float = 0.0,
) -> Stream:
    """Draw a reproducible synthetic stream.

    Components are i.i.d. normal with standard deviation ``scale / sqrt(d)``.
    A fraction ``dup_frac`` of tokens (never the first) repeat the key and
    value of a uniformly chosen earlier token, perturbed by Gaussian noise of
    relative size ``dup_noise``. Query and key norms are clipped to
    ``sqrt(30 sqrt(d))`` so every logit ``q.k / sqrt(d)`` stays within 30.

    Three optional knobs give attention the persistence real models show;
    at their zero defaults the stream is purely i.i.d.:

    * ``query_corr`` makes queries an AR(1) sequence with this lag-one
      correlation (same marginal distribution).
    * ``salience`` adds ``salience * scale * E_i`` along a shared unit
      direction ``u`` to each key, with ``E_i ~ Exp(1)``, producing a
      heavy-tailed set of persistently attended tokens.
    * ``query_align`` mixes ``u`` into the queries:
      ``q = sqrt(1 - a^2) q + a * scale * u``.
    """
    if d < 1 or L < 1 or N < 0:
        raise ValueError("need d >= 1, L >= 1 and N >= 0")
    if not scale > 0.0 or not 0.0 <= dup_frac <= 1.0 or dup_noise < 0.0:
        raise ValueError("need scale > 0, dup_frac in [0, 1] and dup_noise >= 0")
    if not 0.0 <= query_corr < 1.0 or salience < 0.0 or not 0.0 <= query_align <= 1.0:
        raise ValueError("need query_corr in [0, 1), salience >= 0 and query_align in [0, 1]")
    rng = np.random.default_rng(seed)
    n = L + N
    sd = scale / math.sqrt(d)
    queries = rng.normal(0.0, sd, size=(n, d))
    keys = rng.normal(0.0, sd, size=(n, d))
    values = rng.normal(0.0, sd, size=(n, d))
    is_dup = rng.random(n) < dup_frac
    source = (rng.random(n) * np.arange(n)).astype(np.int64)
    noise_k = rng.normal(size=(n, d))
    noise_v = rng.normal(size=(n, d))
    direction = rng.normal(size=d)
    direction /= np.linalg.norm(direction)
    strength = rng.exponential(size=n)

    if query_corr > 0.0:
        mix = math.sqrt(1.0 - query_corr**2)
        for i in range(1, n):
            queries[i] = query_corr * queries[i - 1] + mix * queries[i]
    if query_align > 0.0:
        queries = math.sqrt(1.0 - query_align**2) * queries + query_align * scale * direction
    if salience > 0.0:
        keys = keys + (salience * scale * strength)[:, None] * direction

    max_norm = math.sqrt(LOGIT_CAP * math.sqrt(d))
    queries = _clip_norms(queries, max_norm)
    keys = _clip_norms(keys, max_norm)
    for i in range(1, n):
        if is_dup[i]:
            j = source[i]
            keys[i] = keys[j] + dup_noise * np.linalg.norm(keys[j]) / math.sqrt(d) * noise_k[i]
            values[i] = values[j] + dup_noise * np.linalg.norm(values[j]) / math.sqrt(d) * noise_v[i]
    keys = _clip_norms(keys, max_norm)
    return Stream(queries, keys, values, L, seed, float(scale))


def save_trace(stream: Stream, path) -> None:
    """Write a header line, then one JSON record per step."""
    lines = [json.dumps({"dim": stream.dim, "seed": stream.seed, "scale": stream.scale})]
    for i in range(len(stream)):
        record = {
            "step": i,
            "role": "prefill" if i < stream.prefill_len else "decode",
            "q": stream.queries[i].tolist(),
            "k": stream.keys[i].tolist(),
            "v": stream.values[i].tolist(),
        }
        lines.append(json.dumps(record))
    Path(path).write_text("\n".join(lines) + "\n")


def _numbers(record: dict, name: str, lineno: int) -> list[float]:
    if name not in record:
        raise TraceFormatError(f"line {lineno}: missing field {name!r}")
    arr = record[name]
    if not isinstance(arr, list) or not arr or not all(
        isinstance(x, (int, float)) and not isinstance(x, bool) for x in arr
    ):
        raise TraceFormatError(f"line {lineno}: field {name!r} must be a non-empty list of numbers")
    if not all(math.isfinite(x) for x in arr):
        raise TraceFormatError(f"line {lineno}: field {name!r} has non-finite numbers")
    return [float(x) for x in arr]


def load_trace(path) -> Stream:
    """Read a trace written by :func:`save_trace` or by hand.

    The header line is optional. Prefill records must precede decode records.
    """
    header: dict = {}
    rows: list[tuple[list, list, list]] = []
    roles: list[str] = []
    dim = None
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                record = json.loads(line)
            except json.JSONDecodeError as exc:
                raise TraceFormatError(f"line {lineno}: not valid JSON ({exc.msg})") from None
            if not isinstance(record, dict):
                raise TraceFormatError(f"line {lineno}: expected a JSON object")
            if "role" not in record:
                if rows or header:
                    raise TraceFormatError(f"line {lineno}: missing field 'role'")
                header = record
                dim = header.get("dim")
                continue
            role = record["role"]
            if role not in ("prefill", "decode"):
                raise TraceFormatError(f"line {lineno}: field 'role' must be 'prefill' or 'decode'")
            if record.get("step", len(rows)) != len(rows):
                raise TraceFormatError(f"line {lineno}: field 'step' is {record.get('step')!r}, expected {len(rows)}")
            if role == "prefill" and roles and roles[-1] == "decode":
                raise TraceFormatError(f"line {lineno}: prefill record after decode records")
            q, k, v = (_numbers(record, n, lineno) for n in ("q", "k", "v"))
            if dim is None:
                dim = len(q)
            for name, arr in (("q", q), ("k", k), ("v", v)):
                if len(arr) != dim:
                    raise TraceFormatError(f"line {lineno}: field {name!r} has dimension {len(arr)}, expected {dim}")
            rows.append((q, k, v))
            roles.append(role)
    prefill = roles.count("prefill")
    if prefill == 0:
        raise TraceFormatError(f"{path}: trace has no prefill records")
    q, k, v = (np.array([r[i] for r in rows]) for i in range(3))
    return Stream(q, k, v, prefill, header.get("seed"), header.get("scale"))
