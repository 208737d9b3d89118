"""Preference-optimization losses over toy policies, with exact gradients.

Implements the per-sample desirability loss with a dynamic risk parameter
(resolved per sample from its category, its own diagnostics, or a cluster
of diagnostics), a fixed-beta special case, the pairwise DPO objective,
and the factual-preference diagnostic over (factual, hallucinated) pairs.

The KL reference point z0 is estimated as the batch mean of rewards on
mismatched (prompt_i, completion_partner) pairs, clamped at zero, and is
treated as a constant: no gradient flows through it.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from ..errors import GeofactError
from .kmeans import kmeans_pp
from .policy import (
    MEAN_TOKENS,
    SUM_TOKENS,
    PolicyError,
    ToyPolicy,
    seq_logprob,
    seq_logprob_with_grad,
)

CATEGORIES = ("Entity", "Relation", "Attribute")


class LossError(GeofactError):
    pass


@dataclass(frozen=True)
class SequenceSample:
    prompt: tuple[int, ...]
    completion: tuple[int, ...]
    desirable: bool
    task_tag: str
    partner: int | None = None  # index of the mismatch completion in the batch


class SequenceBatch:
    """A batch of sequence samples with mismatch partners resolved.

    Partners default to the next sample in the batch (wrapping), the usual
    shift-by-one mismatch; a single-sample batch has no valid partner.
    """

    def __init__(self, samples: Sequence[SequenceSample]):
        if not samples:
            raise LossError("batch must be non-empty")
        resolved = []
        n = len(samples)
        for i, sample in enumerate(samples):
            if not sample.completion:
                raise LossError(f"sample {i} has an empty completion")
            partner = sample.partner
            if partner is None:
                partner = (i + 1) % n if n > 1 else None
            elif not 0 <= partner < n:
                raise LossError(f"sample {i} partner {partner} out of range")
            elif partner == i:
                raise LossError(f"sample {i} is its own mismatch partner")
            resolved.append(
                SequenceSample(
                    prompt=tuple(sample.prompt),
                    completion=tuple(sample.completion),
                    desirable=sample.desirable,
                    task_tag=sample.task_tag,
                    partner=partner,
                )
            )
        self.samples: tuple[SequenceSample, ...] = tuple(resolved)

    def __len__(self) -> int:
        return len(self.samples)


@dataclass(frozen=True)
class FactPair:
    prompt: tuple[int, ...]
    factual: tuple[int, ...]
    hallucinated: tuple[int, ...]
    category: str


@dataclass(frozen=True)
class PreferencePair:
    prompt: tuple[int, ...]
    chosen: tuple[int, ...]
    rejected: tuple[int, ...]


# ---------------------------------------------------------------------------
# Beta policies


@dataclass(frozen=True)
class ConstantBeta:
    beta: float = 0.1

    def __post_init__(self) -> None:
        if self.beta <= 0:
            raise LossError("beta must be > 0")


def default_category_betas() -> dict[str, float]:
    return {"Entity": 0.1, "Relation": 0.3, "Attribute": 0.5}


@dataclass(frozen=True)
class CategoryBeta:
    mapping: Mapping[str, float] = field(default_factory=default_category_betas)

    def __post_init__(self) -> None:
        if any(b <= 0 for b in self.mapping.values()):
            raise LossError("all category betas must be > 0")


@dataclass(frozen=True)
class SampleLevelBeta:
    c: float = 0.07
    beta_min: float = 0.05
    beta_max: float = 0.6

    def __post_init__(self) -> None:
        _check_clamp(self.c, self.beta_min, self.beta_max)


@dataclass(frozen=True)
class ClusterLevelBeta:
    k: int = 3
    seed: int = 0
    c: float = 0.07
    beta_min: float = 0.05
    beta_max: float = 0.6

    def __post_init__(self) -> None:
        if self.k < 1:
            raise LossError("cluster count must be >= 1")
        _check_clamp(self.c, self.beta_min, self.beta_max)


def _check_clamp(c: float, beta_min: float, beta_max: float) -> None:
    if c <= 0:
        raise LossError("proportionality constant c must be > 0")
    if beta_min <= 0 or beta_min > beta_max:
        raise LossError("need 0 < beta_min <= beta_max")


BetaPolicy = ConstantBeta | CategoryBeta | SampleLevelBeta | ClusterLevelBeta


@dataclass
class LossConfig:
    lambda_d: float = 1.0
    lambda_u: float = 1.0
    beta_policy: BetaPolicy = field(default_factory=CategoryBeta)
    logprob_mode: str = SUM_TOKENS

    def __post_init__(self) -> None:
        if self.lambda_d <= 0 or self.lambda_u <= 0:
            raise LossError("lambda weights must be > 0")
        if self.logprob_mode not in (SUM_TOKENS, MEAN_TOKENS):
            raise LossError(f"unknown logprob mode {self.logprob_mode!r}")


def resolve_beta(policy_cfg: BetaPolicy, sample: SequenceSample, diagnostic_term: float | None = None) -> float:
    """Beta for one sample; cluster-level policies need the batch API."""
    if isinstance(policy_cfg, ConstantBeta):
        return policy_cfg.beta
    if isinstance(policy_cfg, CategoryBeta):
        if sample.task_tag not in policy_cfg.mapping:
            raise LossError(f"no beta for task tag {sample.task_tag!r}")
        return policy_cfg.mapping[sample.task_tag]
    if isinstance(policy_cfg, SampleLevelBeta):
        if diagnostic_term is None:
            raise LossError("sample-level beta needs a precomputed fact-distance term")
        if diagnostic_term <= 0:
            raise LossError("fact-distance terms must be > 0")
        return float(np.clip(policy_cfg.c / diagnostic_term, policy_cfg.beta_min, policy_cfg.beta_max))
    if isinstance(policy_cfg, ClusterLevelBeta):
        raise LossError("cluster-level beta is resolved per batch; use resolve_betas")
    raise LossError(f"unknown beta policy {policy_cfg!r}")


def resolve_betas(
    policy_cfg: BetaPolicy,
    batch: SequenceBatch,
    diagnostics: Sequence[float] | None = None,
) -> np.ndarray:
    """Per-sample betas for a batch.

    Sample-level and cluster-level policies require ``diagnostics``: the
    per-sample fact-distance terms, aligned with the batch.
    """
    m = len(batch)
    if isinstance(policy_cfg, (SampleLevelBeta, ClusterLevelBeta)):
        if diagnostics is None:
            raise LossError(
                f"{type(policy_cfg).__name__} needs precomputed fact-distance diagnostics"
            )
        terms = np.asarray(diagnostics, dtype=float)
        if terms.shape != (m,):
            raise LossError(f"diagnostics shape {terms.shape} does not match batch size {m}")
        if (terms <= 0).any():
            raise LossError("fact-distance terms must be > 0")
    if isinstance(policy_cfg, ConstantBeta):
        return np.full(m, policy_cfg.beta)
    if isinstance(policy_cfg, CategoryBeta):
        return np.array([resolve_beta(policy_cfg, s) for s in batch.samples])
    if isinstance(policy_cfg, SampleLevelBeta):
        return np.clip(policy_cfg.c / terms, policy_cfg.beta_min, policy_cfg.beta_max)
    if isinstance(policy_cfg, ClusterLevelBeta):
        if policy_cfg.k > m:
            raise LossError(f"cannot form {policy_cfg.k} clusters from {m} samples")
        _, labels = kmeans_pp(terms.reshape(-1, 1), policy_cfg.k, policy_cfg.seed)
        betas = np.empty(m)
        for cluster in range(policy_cfg.k):
            members = labels == cluster
            if not members.any():
                continue
            mean_term = float(terms[members].mean())
            betas[members] = np.clip(
                policy_cfg.c / mean_term, policy_cfg.beta_min, policy_cfg.beta_max
            )
        return betas
    raise LossError(f"unknown beta policy {policy_cfg!r}")


# ---------------------------------------------------------------------------
# Rewards and the KL reference point


def reward(policy: ToyPolicy, sample: SequenceSample, mode: str = SUM_TOKENS) -> float:
    """Log-ratio of the policy to its frozen reference on one sample."""
    lp = seq_logprob(policy, sample.prompt, sample.completion, mode)
    lp_ref = seq_logprob(policy, sample.prompt, sample.completion, mode, reference=True)
    return lp - lp_ref


def estimate_z0(policy: ToyPolicy, batch: SequenceBatch, mode: str = SUM_TOKENS) -> float:
    """Batch KL estimate: mean mismatched-pair reward, clamped at zero."""
    if len(batch) < 2:
        raise LossError("z0 estimation needs a batch of at least 2 samples")
    total = 0.0
    for sample in batch.samples:
        partner = batch.samples[sample.partner]
        lp = seq_logprob(policy, sample.prompt, partner.completion, mode)
        lp_ref = seq_logprob(policy, sample.prompt, partner.completion, mode, reference=True)
        total += lp - lp_ref
    return max(0.0, total / len(batch))


def _sigmoid(t: float) -> float:
    if t >= 0:
        return 1.0 / (1.0 + math.exp(-t))
    e = math.exp(t)
    return e / (1.0 + e)


def kto_value(
    r: float, z0: float, beta: float, desirable: bool, lambda_d: float = 1.0, lambda_u: float = 1.0
) -> float:
    """The prospect-style value of one sample given its reward and beta."""
    if desirable:
        return lambda_d * _sigmoid(beta * (r - z0))
    return lambda_u * _sigmoid(beta * (z0 - r))


# ---------------------------------------------------------------------------
# Loss outputs


@dataclass
class LossOutput:
    loss: float
    rewards: tuple[float, ...]
    betas: tuple[float, ...]
    z0: float
    values: tuple[float, ...]
    grads: dict[tuple[int, ...], np.ndarray]


def _accumulate(total: dict, grads: Mapping, coeff: float) -> None:
    for ctx, g in grads.items():
        acc = total.get(ctx)
        if acc is None:
            total[ctx] = coeff * g
        else:
            acc += coeff * g


def dynamic_kto_loss(
    policy: ToyPolicy,
    batch: SequenceBatch,
    config: LossConfig,
    diagnostics: Sequence[float] | None = None,
) -> LossOutput:
    """Mean desirability shortfall with per-sample dynamic beta.

    With a constant beta policy this reduces exactly to standard fixed-beta
    KTO. The gradient flows through the rewards only; z0 is a constant.
    """
    betas = resolve_betas(config.beta_policy, batch, diagnostics)
    mode = config.logprob_mode
    z0 = estimate_z0(policy, batch, mode)
    m = len(batch)

    rewards = []
    values = []
    total_grads: dict[tuple[int, ...], np.ndarray] = {}
    loss = 0.0
    for i, sample in enumerate(batch.samples):
        lp, grad_lp = seq_logprob_with_grad(policy, sample.prompt, sample.completion, mode)
        lp_ref = seq_logprob(policy, sample.prompt, sample.completion, mode, reference=True)
        r = lp - lp_ref
        beta = float(betas[i])
        lam = config.lambda_d if sample.desirable else config.lambda_u
        t = beta * (r - z0) if sample.desirable else beta * (z0 - r)
        sig = _sigmoid(t)
        v = lam * sig
        loss += (lam - v) / m
        # d(lam - v)/dr = -lam * sig * (1 - sig) * (+beta desirable | -beta undesirable)
        slope = lam * sig * (1.0 - sig) * beta / m
        coeff = -slope if sample.desirable else slope
        _accumulate(total_grads, grad_lp, coeff)
        rewards.append(r)
        values.append(v)

    out = LossOutput(
        loss=loss,
        rewards=tuple(rewards),
        betas=tuple(float(b) for b in betas),
        z0=z0,
        values=tuple(values),
        grads=total_grads,
    )
    if not math.isfinite(out.loss):
        raise LossError("loss is not finite")
    return out


def dpo_loss(
    policy: ToyPolicy,
    pairs: Sequence[PreferencePair],
    beta: float,
    mode: str = SUM_TOKENS,
) -> LossOutput:
    """Pairwise preference loss: -E[log sigmoid(beta * (r_chosen - r_rejected))]."""
    if not pairs:
        raise LossError("dpo needs at least one preference pair")
    if beta <= 0:
        raise LossError("beta must be > 0")
    n = len(pairs)
    gaps = []
    values = []
    total_grads: dict[tuple[int, ...], np.ndarray] = {}
    loss = 0.0
    for pair in pairs:
        lp_w, grad_w = seq_logprob_with_grad(policy, pair.prompt, pair.chosen, mode)
        lp_w_ref = seq_logprob(policy, pair.prompt, pair.chosen, mode, reference=True)
        lp_l, grad_l = seq_logprob_with_grad(policy, pair.prompt, pair.rejected, mode)
        lp_l_ref = seq_logprob(policy, pair.prompt, pair.rejected, mode, reference=True)
        gap = (lp_w - lp_w_ref) - (lp_l - lp_l_ref)
        t = beta * gap
        sig = _sigmoid(t)
        loss += -_log_sigmoid(t) / n
        coeff = -(1.0 - sig) * beta / n
        _accumulate(total_grads, grad_w, coeff)
        _accumulate(total_grads, grad_l, -coeff)
        gaps.append(gap)
        values.append(sig)
    return LossOutput(
        loss=loss,
        rewards=tuple(gaps),
        betas=(beta,) * n,
        z0=0.0,
        values=tuple(values),
        grads=total_grads,
    )


def _log_sigmoid(t: float) -> float:
    if t >= 0:
        return -math.log1p(math.exp(-t))
    return t - math.log1p(math.exp(t))


# ---------------------------------------------------------------------------
# Factual-preference diagnostic


@dataclass(frozen=True)
class FactDistanceReport:
    per_category: Mapping[str, float]  # mean term per category present
    macro_mean: float  # mean across the categories present
    std: float  # std of all per-sample terms
    n: int
    terms: tuple[float, ...]
    categories_missing: tuple[str, ...]


def fact_distance_terms(policy: ToyPolicy, pairs: Sequence[FactPair]) -> np.ndarray:
    """Per-pair terms: -log sigmoid(mean-logprob gap), always positive."""
    terms = []
    for pair in pairs:
        z = seq_logprob(policy, pair.prompt, pair.factual, MEAN_TOKENS) - seq_logprob(
            policy, pair.prompt, pair.hallucinated, MEAN_TOKENS
        )
        terms.append(-_log_sigmoid(z))
    return np.array(terms)


def fact_distance(policy: ToyPolicy, pairs: Sequence[FactPair]) -> FactDistanceReport:
    """Factual-preference report over (factual, hallucinated) pairs.

    Uses length-normalized log-probabilities. Categories without pairs are
    omitted from the per-category table and flagged.
    """
    if not pairs:
        raise LossError("fact distance needs at least one pair")
    terms = fact_distance_terms(policy, pairs)
    per_category = {}
    missing = []
    for category in CATEGORIES:
        members = [t for t, p in zip(terms, pairs) if p.category == category]
        if members:
            per_category[category] = float(np.mean(members))
        else:
            missing.append(category)
    macro = float(np.mean(list(per_category.values())))
    return FactDistanceReport(
        per_category=per_category,
        macro_mean=macro,
        std=float(np.std(terms)),
        n=len(pairs),
        terms=tuple(float(t) for t in terms),
        categories_missing=tuple(missing),
    )


def fact_distance_loss(
    policy: ToyPolicy, pairs: Sequence[FactPair]
) -> tuple[float, dict[tuple[int, ...], np.ndarray]]:
    """The diagnostic as a differentiable objective: mean term over all pairs."""
    if not pairs:
        raise LossError("fact distance needs at least one pair")
    n = len(pairs)
    loss = 0.0
    total_grads: dict[tuple[int, ...], np.ndarray] = {}
    for pair in pairs:
        lp_x, grad_x = seq_logprob_with_grad(policy, pair.prompt, pair.factual, MEAN_TOKENS)
        lp_y, grad_y = seq_logprob_with_grad(policy, pair.prompt, pair.hallucinated, MEAN_TOKENS)
        z = lp_x - lp_y
        loss += -_log_sigmoid(z) / n
        coeff = -(1.0 - _sigmoid(z)) / n
        _accumulate(total_grads, grad_x, coeff)
        _accumulate(total_grads, grad_y, -coeff)
    return loss, total_grads


def preference_accuracy(policy: ToyPolicy, pairs: Sequence[FactPair]) -> float:
    """Fraction of pairs whose factual sequence is strictly preferred (z > 0)."""
    if not pairs:
        raise LossError("need at least one pair")
    wins = 0
    for pair in pairs:
        z = seq_logprob(policy, pair.prompt, pair.factual, MEAN_TOKENS) - seq_logprob(
            policy, pair.prompt, pair.hallucinated, MEAN_TOKENS
        )
        if z > 0:
            wins += 1
    return wins / len(pairs)


# ---------------------------------------------------------------------------
# Gradient verification


def grad_check(loss_fn, policy: ToyPolicy, eps: float = 1e-5) -> float:
    """Max relative error between analytic gradients and central differences.

    ``loss_fn(policy)`` must return ``(loss, grads)`` and be a pure function
    of the policy parameters. The check sweeps every slot of every row the
    loss touches (plus any already-materialized rows).
    """
    if eps <= 0:
        raise LossError("eps must be > 0")
    _, grads = loss_fn(policy)
    contexts = sorted(set(grads) | set(policy.table))
    zero = np.zeros(policy.vocab_size)
    worst = 0.0
    for ctx in contexts:
        row = policy.ensure_row(ctx)
        analytic_row = grads.get(ctx, zero)
        for j in range(policy.vocab_size):
            original = row[j]
            row[j] = original + eps
            loss_plus = loss_fn(policy)[0]
            row[j] = original - eps
            loss_minus = loss_fn(policy)[0]
            row[j] = original
            fd = (loss_plus - loss_minus) / (2.0 * eps)
            a = float(analytic_row[j])
            err = abs(fd - a) / max(1e-8, abs(fd) + abs(a))
            if err > worst:
                worst = err
    return worst
