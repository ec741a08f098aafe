"""SequenceRepair: a positional-match environment with a deterministic scorer.

Each query has a hidden target sequence of ``L`` tokens over a vocabulary of
size ``V``. A trajectory's score is the fraction of positions it gets right,
so scores live on the grid ``{0, 1/L, ..., 1}``.
"""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

WORLD_FORMAT = "echo-lab-world v1"


@dataclass(frozen=True, eq=False)
class WorldSpec:
    vocab_size: int
    seq_len: int
    num_queries: int
    targets: np.ndarray  # [Q, L] int64, read-only
    seed: Optional[int] = None

    def __post_init__(self) -> None:
        if self.vocab_size < 2:
            raise ValueError(f"vocab_size must be >= 2, got {self.vocab_size}")
        if self.seq_len < 1:
            raise ValueError(f"seq_len must be >= 1, got {self.seq_len}")
        if self.num_queries < 1:
            raise ValueError(f"num_queries must be >= 1, got {self.num_queries}")
        t = np.array(self.targets, dtype=np.int64)
        if t.shape != (self.num_queries, self.seq_len):
            raise ValueError(
                f"targets must have shape {(self.num_queries, self.seq_len)}, got {t.shape}"
            )
        if t.size and (t.min() < 0 or t.max() >= self.vocab_size):
            raise ValueError("target tokens must lie in [0, vocab_size)")
        t.flags.writeable = False
        object.__setattr__(self, "targets", t)

    @property
    def shape(self) -> tuple[int, int, int]:
        return (self.num_queries, self.seq_len, self.vocab_size)

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, WorldSpec):
            return NotImplemented
        return (
            self.shape == other.shape
            and self.seed == other.seed
            and np.array_equal(self.targets, other.targets)
        )

    __hash__ = None  # type: ignore[assignment]


@dataclass(eq=False)
class Trajectory:
    query_id: int
    tokens: np.ndarray
    token_logprobs: np.ndarray
    score: Optional[float] = None

    def __post_init__(self) -> None:
        self.tokens = np.asarray(self.tokens, dtype=np.int64)
        self.token_logprobs = np.asarray(self.token_logprobs, dtype=np.float64)
        if self.tokens.shape != self.token_logprobs.shape or self.tokens.ndim != 1:
            raise ValueError("tokens and token_logprobs must be 1-D of equal length")
        if np.any(self.token_logprobs > 0.0):
            raise ValueError("token log-probabilities must be <= 0")

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, Trajectory):
            return NotImplemented
        return (
            self.query_id == other.query_id
            and self.score == other.score
            and np.array_equal(self.tokens, other.tokens)
            and np.array_equal(self.token_logprobs, other.token_logprobs)
        )


def _check_query(spec: WorldSpec, query_id: int) -> None:
    if not (0 <= query_id < spec.num_queries):
        raise IndexError(f"query_id {query_id} out of range [0, {spec.num_queries})")


def env_score(spec: WorldSpec, query_id: int, tokens: Sequence[int]) -> float:
    _check_query(spec, query_id)
    tok = np.asarray(tokens, dtype=np.int64)
    if tok.shape != (spec.seq_len,):
        raise ValueError(f"expected {spec.seq_len} tokens, got shape {tok.shape}")
    if tok.min() < 0 or tok.max() >= spec.vocab_size:
        raise ValueError("token ids must lie in [0, vocab_size)")
    matches = int(np.count_nonzero(tok == spec.targets[query_id]))
    return matches / spec.seq_len


def mismatch_count(spec: WorldSpec, query_id: int, tokens: Sequence[int]) -> int:
    _check_query(spec, query_id)
    return int(np.count_nonzero(np.asarray(tokens) != spec.targets[query_id]))


def make_world(V: int = 4, L: int = 6, Q: int = 8, seed: int = 0) -> WorldSpec:
    if V < 2 or L < 1 or Q < 1:
        raise ValueError(f"invalid world dimensions V={V}, L={L}, Q={Q}")
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0x57]))
    targets = rng.integers(0, V, size=(Q, L), dtype=np.int64)
    return WorldSpec(vocab_size=V, seq_len=L, num_queries=Q, targets=targets, seed=seed)


def dumps_world(spec: WorldSpec) -> str:
    lines = [
        f"# {WORLD_FORMAT}",
        f"V = {spec.vocab_size}",
        f"L = {spec.seq_len}",
        f"Q = {spec.num_queries}",
        f"seed = {'none' if spec.seed is None else spec.seed}",
    ]
    for q, row in enumerate(spec.targets):
        lines.append(f"target.{q} = " + " ".join(str(int(t)) for t in row))
    return "\n".join(lines) + "\n"


def loads_world(text: str) -> WorldSpec:
    kv: dict[str, str] = {}
    for raw in text.splitlines():
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise ValueError(f"malformed world line: {raw!r}")
        kv[key.strip()] = value.strip()
    try:
        V, L, Q = int(kv["V"]), int(kv["L"]), int(kv["Q"])
        seed_s = kv.get("seed", "none")
        seed = None if seed_s == "none" else int(seed_s)
        rows = [[int(t) for t in kv[f"target.{q}"].split()] for q in range(Q)]
    except KeyError as exc:
        raise ValueError(f"world file is missing field {exc.args[0]!r}") from None
    return WorldSpec(vocab_size=V, seq_len=L, num_queries=Q, targets=np.array(rows), seed=seed)


def save_world(spec: WorldSpec, path: str | Path) -> None:
    Path(path).write_text(dumps_world(spec), encoding="utf-8")


def load_world(path: str | Path) -> WorldSpec:
    return loads_world(Path(path).read_text(encoding="utf-8"))
