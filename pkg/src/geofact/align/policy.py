"""A small differentiable autoregressive policy for loss verification.

The policy is an n-gram softmax model: a logit row per context window,
materialized lazily. Its frozen reference distribution is simply the
initialization, which is a pure function of (seed, context), so the
reference needs no stored copy and survives save/load exactly.
"""

from __future__ import annotations

import hashlib
import json
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from ..errors import GeofactError

BOS = -1  # left-padding id for contexts that reach before the sequence start

SUM_TOKENS = "sum"
MEAN_TOKENS = "mean"


class PolicyError(GeofactError):
    pass


def _stable_seed(*parts) -> int:
    digest = hashlib.sha256("|".join(str(p) for p in parts).encode()).digest()
    return int.from_bytes(digest[:8], "big")


class ToyPolicy:
    """Autoregressive softmax model over (context, token) logits.

    ``context_order`` is the number of preceding tokens conditioned on.
    With ``init_scale`` zero the initial (= reference) distribution is
    uniform; otherwise each row starts at seeded Gaussian logits.
    """

    def __init__(
        self,
        vocab_size: int,
        context_order: int = 2,
        init_scale: float = 0.0,
        seed: int = 0,
    ):
        if vocab_size < 2:
            raise PolicyError("vocab_size must be >= 2")
        if context_order < 1:
            raise PolicyError("context_order must be >= 1")
        self.vocab_size = vocab_size
        self.context_order = context_order
        self.init_scale = float(init_scale)
        self.seed = seed
        self.table: dict[tuple[int, ...], np.ndarray] = {}

    # -- parameters --------------------------------------------------------

    def _init_row(self, ctx: tuple[int, ...]) -> np.ndarray:
        if self.init_scale == 0.0:
            return np.zeros(self.vocab_size)
        rng = np.random.default_rng(_stable_seed("init", self.seed, ctx))
        return self.init_scale * rng.standard_normal(self.vocab_size)

    def context_for(self, prefix: Sequence[int]) -> tuple[int, ...]:
        k = self.context_order
        window = tuple(prefix[-k:]) if k <= len(prefix) else tuple(prefix)
        return (BOS,) * (k - len(window)) + window

    def row(self, ctx: tuple[int, ...]) -> np.ndarray:
        existing = self.table.get(ctx)
        return existing if existing is not None else self._init_row(ctx)

    def ref_row(self, ctx: tuple[int, ...]) -> np.ndarray:
        return self._init_row(ctx)

    def ensure_row(self, ctx: tuple[int, ...]) -> np.ndarray:
        if ctx not in self.table:
            self.table[ctx] = self._init_row(ctx)
        return self.table[ctx]

    def log_softmax(self, ctx: tuple[int, ...], reference: bool = False) -> np.ndarray:
        logits = self.ref_row(ctx) if reference else self.row(ctx)
        shifted = logits - logits.max()
        return shifted - np.log(np.exp(shifted).sum())

    def apply_gradient(self, grads: Mapping[tuple[int, ...], np.ndarray], lr: float) -> None:
        for ctx, g in grads.items():
            self.table[ctx] = self.row(ctx) - lr * g

    def copy(self) -> "ToyPolicy":
        clone = ToyPolicy(self.vocab_size, self.context_order, self.init_scale, self.seed)
        clone.table = {ctx: row.copy() for ctx, row in self.table.items()}
        return clone

    # -- persistence -------------------------------------------------------

    def save(self, path: str | Path, vocab: Sequence[str] | None = None) -> None:
        payload = {
            "format": "geofact-policy",
            "version": 1,
            "vocab_size": self.vocab_size,
            "context_order": self.context_order,
            "init_scale": self.init_scale,
            "seed": self.seed,
            "vocab": list(vocab) if vocab is not None else None,
            "table": {
                ",".join(map(str, ctx)): [float(v) for v in row]
                for ctx, row in sorted(self.table.items())
            },
        }
        Path(path).write_text(json.dumps(payload, sort_keys=True, indent=1) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path: str | Path) -> tuple["ToyPolicy", list[str] | None]:
        try:
            payload = json.loads(Path(path).read_text(encoding="utf-8"))
        except (OSError, json.JSONDecodeError) as exc:
            raise PolicyError(f"cannot read policy file {path}: {exc}") from exc
        if payload.get("format") != "geofact-policy" or payload.get("version") != 1:
            raise PolicyError(f"{path} is not a version-1 policy file")
        policy = cls(
            vocab_size=payload["vocab_size"],
            context_order=payload["context_order"],
            init_scale=payload["init_scale"],
            seed=payload["seed"],
        )
        for key, row in payload["table"].items():
            ctx = tuple(int(v) for v in key.split(","))
            policy.table[ctx] = np.array(row, dtype=float)
        return policy, payload.get("vocab")


def _check_tokens(policy: ToyPolicy, tokens: Iterable[int]) -> None:
    for tok in tokens:
        if not 0 <= tok < policy.vocab_size:
            raise PolicyError(f"token {tok} outside vocabulary of size {policy.vocab_size}")


def seq_logprob(
    policy: ToyPolicy,
    prompt: Sequence[int],
    completion: Sequence[int],
    mode: str = SUM_TOKENS,
    reference: bool = False,
) -> float:
    """Log-probability of a completion given a prompt.

    ``sum`` mode returns the summed token log-probabilities; ``mean``
    divides by the completion length.
    """
    if not completion:
        raise PolicyError("completion must be non-empty")
    if mode not in (SUM_TOKENS, MEAN_TOKENS):
        raise PolicyError(f"unknown logprob mode {mode!r}")
    _check_tokens(policy, prompt)
    _check_tokens(policy, completion)
    seq = list(prompt)
    total = 0.0
    for tok in completion:
        ctx = policy.context_for(seq)
        total += float(policy.log_softmax(ctx, reference=reference)[tok])
        seq.append(tok)
    return total / len(completion) if mode == MEAN_TOKENS else total


def seq_logprob_with_grad(
    policy: ToyPolicy,
    prompt: Sequence[int],
    completion: Sequence[int],
    mode: str = SUM_TOKENS,
) -> tuple[float, dict[tuple[int, ...], np.ndarray]]:
    """Log-probability plus its gradient w.r.t. the policy's logit rows."""
    if not completion:
        raise PolicyError("completion must be non-empty")
    grads: dict[tuple[int, ...], np.ndarray] = {}
    seq = list(prompt)
    total = 0.0
    for tok in completion:
        ctx = policy.context_for(seq)
        logp = policy.log_softmax(ctx)
        total += float(logp[tok])
        g = grads.setdefault(ctx, np.zeros(policy.vocab_size))
        g -= np.exp(logp)
        g[tok] += 1.0
        seq.append(tok)
    if mode == MEAN_TOKENS:
        total /= len(completion)
        for g in grads.values():
            g /= len(completion)
    elif mode != SUM_TOKENS:
        raise PolicyError(f"unknown logprob mode {mode!r}")
    return total, grads
