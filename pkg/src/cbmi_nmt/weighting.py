"""Token- and sentence-level CBMI weighting plus the baseline weighting
schemes and prior-distribution objectives.

CBMI (conditional bilingual mutual information) of a target token given its
gold prefix is the log quotient of the translation-model and language-model
probabilities of that token, ``log(p_nmt / p_lm)``. Token values are
normalized within each sentence and scaled into token weights; their
per-sentence mean is normalized across the mini-batch and scaled into a
sentence weight; the final per-token weight is the product of the two.

Everything here is a pure function of value inputs. Weights never carry
gradients: callers feed probabilities read off the forward pass, and the
loss treats the resulting weights as constants.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .tensor import Tensor


@dataclass(frozen=True)
class TokenProbPair:
    """Gold-token probabilities from both models at one target position."""

    p_nmt: float
    p_lm: float

    def __post_init__(self):
        if not (0.0 < self.p_nmt <= 1.0 and 0.0 < self.p_lm <= 1.0):
            raise ValueError(f"probabilities must lie in (0, 1]: {self}")


@dataclass(frozen=True)
class NormStats:
    mean: float
    std: float


@dataclass(frozen=True)
class CbmiConfig:
    """Scales and ablation switches for the CBMI weight schedule."""

    scale_t: float = 0.1
    scale_s: float = 0.3
    use_token: bool = True
    use_sentence: bool = True
    sigma_floor: float = 1e-6

    def __post_init__(self):
        if self.scale_t < 0 or self.scale_s < 0:
            raise ValueError("scales must be non-negative")
        if self.sigma_floor <= 0:
            raise ValueError("sigma_floor must be positive")


@dataclass(frozen=True)
class BaselineConfig:
    """Hyperparameters of the baseline weighting schemes."""

    freq_a: float = 1.0
    freq_t: float = 1.75
    bmi_s: float = 0.15
    bmi_b: float = 0.8
    alpha: float = 0.1
    gamma: float = 1.0
    lam: float = 0.1
    tau: float = 2.0
    th1: float = 0.0
    th2: float = 8.0
    soften_teacher_only: bool = False


SCHEME_KINDS = (
    "none",
    "cbmi",
    "freq_exp",
    "freq_chi",
    "bmi",
    "focal",
    "anti_focal",
    "lm_prior",
    "prior_select",
)

# schemes whose weights or loss addends need language-model probabilities
LM_SCHEMES = frozenset({"cbmi", "lm_prior", "prior_select"})


@dataclass(frozen=True)
class WeightScheme:
    """Tagged selection of one weighting scheme with its hyperparameters."""

    kind: str = "none"
    cbmi: CbmiConfig = field(default_factory=CbmiConfig)
    baseline: BaselineConfig = field(default_factory=BaselineConfig)

    def __post_init__(self):
        if self.kind not in SCHEME_KINDS:
            raise ValueError(f"unknown weighting scheme {self.kind!r}")

    @property
    def needs_lm(self) -> bool:
        return self.kind in LM_SCHEMES


@dataclass
class CbmiRecord:
    """Per-sentence CBMI values, normalization results, and weights."""

    token_cbmi: np.ndarray
    sent_cbmi: float
    norm_token_cbmi: np.ndarray
    token_weights: np.ndarray
    sentence_weight: float
    final_weights: np.ndarray


# ---------------------------------------------------------------------------
# CBMI core


def token_cbmi(pair: TokenProbPair) -> float:
    """log(p_nmt / p_lm) in nats; positive when the source sentence raises
    the gold token's probability above the context-only estimate."""
    return math.log(pair.p_nmt) - math.log(pair.p_lm)


def token_cbmi_values(p_nmt: np.ndarray, p_lm: np.ndarray) -> np.ndarray:
    p_nmt = np.asarray(p_nmt, dtype=np.float64)
    p_lm = np.asarray(p_lm, dtype=np.float64)
    if (p_nmt <= 0).any() or (p_lm <= 0).any():
        raise ValueError("zero probability fed to CBMI; upstream softmax is broken")
    return np.log(p_nmt) - np.log(p_lm)


def _masked_mean_std(values: np.ndarray, mask: np.ndarray, sigma_floor: float) -> NormStats:
    selected = values[mask]
    mean = float(selected.mean())
    std = float(selected.std())  # population std
    return NormStats(mean=mean, std=max(std, sigma_floor))


def normalize_intra_sentence(
    token_values: np.ndarray,
    mask: np.ndarray | None = None,
    sigma_floor: float = 1e-6,
) -> tuple[np.ndarray, NormStats]:
    """Standardize token values within one sentence (population std, floored).

    Pad positions produce 0 and are excluded from the statistics.
    """
    token_values = np.asarray(token_values, dtype=np.float64)
    if mask is None:
        mask = np.ones(token_values.shape, dtype=bool)
    mask = np.asarray(mask, dtype=bool)
    if not mask.any():
        raise ValueError("intra-sentence normalization needs at least one non-pad position")
    stats = _masked_mean_std(token_values, mask, sigma_floor)
    norm = np.where(mask, (token_values - stats.mean) / stats.std, 0.0)
    return norm, stats


def token_weight(norm_cbmi: float, scale_t: float) -> float:
    """max(0, scale_t * normalized CBMI + 1)."""
    return max(0.0, scale_t * norm_cbmi + 1.0)


def sentence_cbmi(token_values: np.ndarray, mask: np.ndarray | None = None) -> float:
    """Arithmetic mean of token CBMI over non-pad positions."""
    token_values = np.asarray(token_values, dtype=np.float64)
    if mask is None:
        mask = np.ones(token_values.shape, dtype=bool)
    mask = np.asarray(mask, dtype=bool)
    if not mask.any():
        raise ValueError("sentence CBMI needs at least one non-pad position")
    return float(token_values[mask].mean())


def normalize_inter_sentence(
    sent_values: np.ndarray,
    sigma_floor: float = 1e-6,
) -> tuple[np.ndarray, NormStats]:
    """Standardize sentence CBMI across a mini-batch (population std, floored)."""
    sent_values = np.asarray(sent_values, dtype=np.float64)
    if sent_values.size < 1:
        raise ValueError("inter-sentence normalization needs at least one sentence")
    stats = _masked_mean_std(sent_values, np.ones(sent_values.shape, dtype=bool), sigma_floor)
    return (sent_values - stats.mean) / stats.std, stats


def sentence_weight(norm_cbmi: float, scale_s: float) -> float:
    """max(0, scale_s * normalized sentence CBMI + 1)."""
    return max(0.0, scale_s * norm_cbmi + 1.0)


def final_weights(
    token_weights: np.ndarray,
    sent_weight: float,
    config: CbmiConfig,
) -> np.ndarray:
    """Combine the two granularities, honoring the ablation switches."""
    w_t = np.asarray(token_weights, dtype=np.float64)
    if not config.use_token:
        w_t = np.ones_like(w_t)
    w_s = sent_weight if config.use_sentence else 1.0
    return w_t * w_s


@dataclass
class CbmiBatch:
    """Vectorized CBMI schedule over one padded batch; the [B, T] arrays hold
    zeros at pad positions."""

    token_cbmi: np.ndarray
    sent_cbmi: np.ndarray
    norm_token_cbmi: np.ndarray
    token_weights: np.ndarray
    sentence_weights: np.ndarray
    final_weights: np.ndarray

    def record(self, i: int) -> CbmiRecord:
        return CbmiRecord(
            token_cbmi=self.token_cbmi[i],
            sent_cbmi=float(self.sent_cbmi[i]),
            norm_token_cbmi=self.norm_token_cbmi[i],
            token_weights=self.token_weights[i],
            sentence_weight=float(self.sentence_weights[i]),
            final_weights=self.final_weights[i],
        )


def cbmi_schedule(
    p_nmt: np.ndarray,
    p_lm: np.ndarray,
    mask: np.ndarray,
    config: CbmiConfig,
) -> CbmiBatch:
    """Full CBMI weight schedule for a padded batch of gold-token probability
    pairs. Shapes are [sentences, positions]; pad entries of ``p_*`` are
    ignored (any positive placeholder is fine)."""
    mask = np.asarray(mask, dtype=bool)
    counts = mask.sum(axis=1)
    if (counts < 1).any():
        raise ValueError("every sentence needs at least one non-pad position")
    values = np.where(
        mask, token_cbmi_values(np.where(mask, p_nmt, 1.0), np.where(mask, p_lm, 1.0)), 0.0
    )
    sent = values.sum(axis=1) / counts
    var = np.where(mask, (values - sent[:, None]) ** 2, 0.0).sum(axis=1) / counts
    std = np.maximum(np.sqrt(var), config.sigma_floor)
    norm_tok = np.where(mask, (values - sent[:, None]) / std[:, None], 0.0)
    w_t = np.where(mask, np.maximum(0.0, config.scale_t * norm_tok + 1.0), 0.0)

    mu_s = sent.mean()
    std_s = max(float(sent.std()), config.sigma_floor)
    w_s = np.maximum(0.0, config.scale_s * (sent - mu_s) / std_s + 1.0)

    eff_t = w_t if config.use_token else mask.astype(np.float64)
    eff_s = w_s if config.use_sentence else np.ones_like(w_s)
    final = eff_t * eff_s[:, None]
    return CbmiBatch(
        token_cbmi=values,
        sent_cbmi=sent,
        norm_token_cbmi=norm_tok,
        token_weights=w_t,
        sentence_weights=w_s,
        final_weights=final,
    )


def cbmi_records_for_batch(
    p_nmt: np.ndarray,
    p_lm: np.ndarray,
    mask: np.ndarray,
    config: CbmiConfig,
) -> list[CbmiRecord]:
    batch = cbmi_schedule(p_nmt, p_lm, mask, config)
    return [batch.record(i) for i in range(batch.token_cbmi.shape[0])]


def cbmi_batch_weights(
    p_nmt: np.ndarray,
    p_lm: np.ndarray,
    mask: np.ndarray,
    config: CbmiConfig,
) -> tuple[np.ndarray, np.ndarray]:
    """Final weights for a batch: returns (weights, token_cbmi), both
    [sentences, positions] with zeros at pad positions."""
    batch = cbmi_schedule(p_nmt, p_lm, mask, config)
    return batch.final_weights, batch.token_cbmi


# ---------------------------------------------------------------------------
# baseline schemes


def freq_exponential_weight(count: int | np.ndarray, a: float, t: float):
    """A * exp(-T * count) + 1; boosts rare tokens, asymptotes to 1."""
    return a * np.exp(-t * np.asarray(count, dtype=np.float64)) + 1.0


def freq_chi_square_weight(count: int | np.ndarray, a: float, t: float):
    """A * count^2 * exp(-T * count) + 1; additionally damps the rarest tokens."""
    c = np.asarray(count, dtype=np.float64)
    return a * c * c * np.exp(-t * c) + 1.0


def bmi_weight(bmi: float | np.ndarray, s: float, b: float):
    """Affine rescaling S * BMI + B of the precomputed table value."""
    return s * np.asarray(bmi, dtype=np.float64) + b


def focal_loss(p: float | np.ndarray, alpha: float, gamma: float):
    """-(1 - alpha * p)^gamma * log(p): down-weights confident tokens."""
    p = np.asarray(p, dtype=np.float64)
    return -((1.0 - alpha * p) ** gamma) * np.log(p)


def anti_focal_loss(p: float | np.ndarray, alpha: float, gamma: float):
    """-(1 + alpha * p)^gamma * log(p): up-weights confident tokens."""
    p = np.asarray(p, dtype=np.float64)
    return -((1.0 + alpha * p) ** gamma) * np.log(p)


def focal_weight(p: np.ndarray, alpha: float, gamma: float) -> np.ndarray:
    return (1.0 - alpha * np.asarray(p, dtype=np.float64)) ** gamma


def anti_focal_weight(p: np.ndarray, alpha: float, gamma: float) -> np.ndarray:
    return (1.0 + alpha * np.asarray(p, dtype=np.float64)) ** gamma


def _softened_probs(log_probs: np.ndarray, tau: float) -> np.ndarray:
    scaled = log_probs / tau
    scaled = scaled - scaled.max(axis=-1, keepdims=True)
    exp = np.exp(scaled)
    return exp / exp.sum(axis=-1, keepdims=True)


def lm_prior_loss(
    nmt_log_probs: Tensor,
    lm_log_probs: np.ndarray,
    lam: float,
    tau: float,
    mask: np.ndarray | None = None,
    soften_teacher_only: bool = False,
) -> Tensor:
    """Distillation addend ``lam * KL(q_lm || p_nmt)``, mean over non-pad rows.

    The language-model distribution is the gradient-opaque teacher. Both
    distributions are softened by ``tau`` unless ``soften_teacher_only``.
    Log-probabilities are valid inputs wherever logits are expected: softmax
    is invariant to the per-row logsumexp shift.
    """
    if tau <= 0:
        raise ValueError("temperature tau must be positive")
    rows = nmt_log_probs.data.shape[0]
    if mask is None:
        mask = np.ones(rows, dtype=bool)
    mask = np.asarray(mask, dtype=bool)
    n = int(mask.sum())
    if n == 0:
        raise ValueError("lm_prior_loss needs at least one non-pad row")
    q = _softened_probs(np.asarray(lm_log_probs, dtype=np.float64), tau)

    if soften_teacher_only:
        student_log = T.log_softmax(nmt_log_probs)
    else:
        student_log = T.log_softmax(T.mul(nmt_log_probs, 1.0 / tau))
    # KL(q||p) = sum q log q - sum q log p; the first term is a constant
    q_masked = (q * mask[:, None]).astype(nmt_log_probs.data.dtype)
    cross = T.sum_all(T.mul(student_log, q_masked))
    entropy_term = float((q * np.where(q > 0, np.log(q), 0.0) * mask[:, None]).sum())
    return T.add(T.mul(cross, -lam / n), lam * entropy_term / n)


class Prior(enum.Enum):
    LM = "lm"
    TM = "tm"
    CBMI = "cbmi"


def select_prior(cbmi: float, th1: float, th2: float) -> Prior:
    """Partition the raw token-CBMI line into three prior regimes:
    LM for cbmi <= th1, TM for th1 < cbmi <= th2, CBMI above th2."""
    if th1 >= th2:
        raise ValueError(f"thresholds must satisfy th1 < th2, got {th1} >= {th2}")
    if cbmi <= th1:
        return Prior.LM
    if cbmi <= th2:
        return Prior.TM
    return Prior.CBMI


def cbmi_prior_distribution(nmt_log_probs_row: np.ndarray, lm_log_probs_row: np.ndarray) -> np.ndarray:
    """Softmax over full-vocabulary CBMI values (raw, not normalized)."""
    diff = np.asarray(nmt_log_probs_row, dtype=np.float64) - np.asarray(
        lm_log_probs_row, dtype=np.float64
    )
    diff = diff - diff.max(axis=-1, keepdims=True)
    exp = np.exp(diff)
    return exp / exp.sum(axis=-1, keepdims=True)


def selected_prior_rows(
    nmt_log_probs: np.ndarray,
    lm_log_probs: np.ndarray,
    token_cbmi_rows: np.ndarray,
    th1: float,
    th2: float,
) -> np.ndarray:
    """Per-row teacher distribution chosen by raw token CBMI: the LM
    distribution, the (detached) TM distribution, or the softmax-normalized
    full-vocabulary CBMI distribution."""
    q = np.empty_like(np.asarray(nmt_log_probs, dtype=np.float64))
    p_tm = _softened_probs(np.asarray(nmt_log_probs, dtype=np.float64), 1.0)
    p_lm = _softened_probs(np.asarray(lm_log_probs, dtype=np.float64), 1.0)
    for j in range(q.shape[0]):
        which = select_prior(float(token_cbmi_rows[j]), th1, th2)
        if which is Prior.LM:
            q[j] = p_lm[j]
        elif which is Prior.TM:
            q[j] = p_tm[j]
        else:
            q[j] = cbmi_prior_distribution(nmt_log_probs[j], lm_log_probs[j])
    return q


def prior_cross_entropy_loss(
    nmt_log_probs: Tensor,
    prior_rows: np.ndarray,
    lam: float,
    mask: np.ndarray | None = None,
) -> Tensor:
    """Addend ``lam * mean_rows(-sum_v q(v) log p(v))`` against gradient-opaque
    per-row prior distributions ``q``."""
    rows = nmt_log_probs.data.shape[0]
    if mask is None:
        mask = np.ones(rows, dtype=bool)
    mask = np.asarray(mask, dtype=bool)
    n = int(mask.sum())
    if n == 0:
        raise ValueError("prior loss needs at least one non-pad row")
    q_masked = (np.asarray(prior_rows, dtype=np.float64) * mask[:, None]).astype(
        nmt_log_probs.data.dtype
    )
    return T.mul(T.sum_all(T.mul(nmt_log_probs, q_masked)), -lam / n)


def weight_dump_lines(
    step: int,
    records: list[CbmiRecord],
    mask: np.ndarray,
    token_ids: np.ndarray,
) -> list[str]:
    """One analysis line per non-pad token position:
    step, sentence, position, token id, raw CBMI, the two weights, final."""
    lines = []
    for i, rec in enumerate(records):
        for j in range(mask.shape[1]):
            if not mask[i, j]:
                continue
            lines.append(
                f"{step}\t{i}\t{j}\t{int(token_ids[i, j])}\t{rec.token_cbmi[j]:.6f}"
                f"\t{rec.token_weights[j]:.6f}\t{rec.sentence_weight:.6f}"
                f"\t{rec.final_weights[j]:.6f}"
            )
    return lines
