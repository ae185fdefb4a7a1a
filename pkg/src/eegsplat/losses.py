"""Cross-modal alignment objectives with analytic gradients.

All similarity-based losses take the cosine similarity matrix ``S`` where
``S[i, k]`` compares EEG embedding ``i`` with image embedding ``k``; the
diagonal holds the positive pairs.
"""
from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np
from scipy.special import logsumexp

from .errors import LoadError, NumericError, ValidationError

SYSTEM_PROMPT = "You are an EEG signal interpreter."
USER_TEMPLATE = "<EEG><Label> Describe it in one sentence."

# training-loop defaults used by demos
LEARNING_RATE = 2e-5
BATCH_SIZE = 8


@dataclass(frozen=True)
class LossConfig:
    tau: float = 0.07
    alpha_scale: float = 0.5
    lambda1: float = 1.0
    lambda2: float = 1.0

    def __post_init__(self):
        if not self.tau > 0:
            raise ValidationError(f"temperature must be positive, got {self.tau}")
        if self.alpha_scale < 0 or self.lambda1 < 0 or self.lambda2 < 0:
            raise ValidationError("alpha_scale, lambda1 and lambda2 must be nonnegative")


@dataclass(frozen=True)
class EmbeddingBatch:
    eeg: np.ndarray
    img: np.ndarray

    def __post_init__(self):
        eeg = np.atleast_2d(np.asarray(self.eeg, dtype=np.float64))
        img = np.atleast_2d(np.asarray(self.img, dtype=np.float64))
        if eeg.shape != img.shape:
            raise ValidationError(f"eeg {eeg.shape} and img {img.shape} batches differ in shape")
        if not (np.isfinite(eeg).all() and np.isfinite(img).all()):
            raise ValidationError("embeddings contain non-finite values")
        object.__setattr__(self, "eeg", eeg)
        object.__setattr__(self, "img", img)

    @property
    def n(self) -> int:
        return self.eeg.shape[0]


def _unit_rows(x, what):
    norms = np.linalg.norm(x, axis=1)
    if np.any(norms == 0):
        raise ValidationError(f"{what} batch has a zero-norm row")
    return x / norms[:, None], norms


def similarity_matrix(batch: EmbeddingBatch) -> np.ndarray:
    e, _ = _unit_rows(batch.eeg, "eeg")
    v, _ = _unit_rows(batch.img, "img")
    return np.clip(e @ v.T, -1.0, 1.0)


def cross_entropy(probs, label: int) -> float:
    probs = np.asarray(probs, dtype=np.float64)
    if abs(probs.sum() - 1.0) > 1e-9 or np.any(probs < 0) or np.any(probs > 1):
        raise ValidationError("probs must be a probability vector")
    if not 0 <= label < probs.size:
        raise ValidationError(f"label {label} out of range for {probs.size} classes")
    if probs[label] == 0:
        raise NumericError("probability of the true class is zero; loss is infinite")
    return float(-np.log(probs[label]))


def info_nce(S, tau: float) -> float:
    S = np.asarray(S, dtype=np.float64)
    if not tau > 0:
        raise ValidationError(f"temperature must be positive, got {tau}")
    logits = S / tau
    lse = logsumexp(logits, axis=1)
    return float(np.mean(lse - np.diag(logits)))


def info_nce_grad(S, tau: float) -> np.ndarray:
    """d info_nce / d S."""
    S = np.asarray(S, dtype=np.float64)
    n = S.shape[0]
    logits = S / tau
    soft = np.exp(logits - logsumexp(logits, axis=1, keepdims=True))
    return (soft - np.eye(n)) / (n * tau)


def adaptive_margin(s, alpha_scale: float):
    return alpha_scale * (1.0 - s)


def _hinge(S, alpha_scale):
    pos = np.diag(S)
    m = adaptive_margin(pos, alpha_scale)
    h = m[:, None] - (pos[:, None] - S)
    np.fill_diagonal(h, 0.0)
    return h


def margin_loss(S, cfg: LossConfig) -> float:
    S = np.asarray(S, dtype=np.float64)
    n = S.shape[0]
    if n < 2:
        return 0.0
    h = np.maximum(_hinge(S, cfg.alpha_scale), 0.0)
    return float(h.sum(axis=1).mean() / (n - 1))


def margin_loss_grad(S, cfg: LossConfig) -> np.ndarray:
    """d margin_loss / d S (subgradient 0 at the hinge kink)."""
    S = np.asarray(S, dtype=np.float64)
    n = S.shape[0]
    if n < 2:
        return np.zeros_like(S)
    active = (_hinge(S, cfg.alpha_scale) > 0).astype(np.float64)
    np.fill_diagonal(active, 0.0)
    # hinge = a(1 - S_ii) - S_ii + S_ij
    g = active.copy()
    np.fill_diagonal(g, -(1.0 + cfg.alpha_scale) * active.sum(axis=1))
    return g / (n * (n - 1))


def total_loss(ce: float, nce: float, ml: float, cfg: LossConfig) -> float:
    return ce + cfg.lambda1 * nce + cfg.lambda2 * ml


def alignment_loss(batch: EmbeddingBatch, cfg: LossConfig) -> float:
    S = similarity_matrix(batch)
    return cfg.lambda1 * info_nce(S, cfg.tau) + cfg.lambda2 * margin_loss(S, cfg)


def alignment_grads(batch: EmbeddingBatch, cfg: LossConfig) -> np.ndarray:
    """Gradient of ``lambda1 * InfoNCE + lambda2 * margin`` w.r.t. ``batch.eeg``."""
    e, norms = _unit_rows(batch.eeg, "eeg")
    v, _ = _unit_rows(batch.img, "img")
    S = e @ v.T
    dS = cfg.lambda1 * info_nce_grad(S, cfg.tau) + cfg.lambda2 * margin_loss_grad(S, cfg)
    de = dS @ v
    # project out the radial component of the normalisation
    de -= e * np.sum(de * e, axis=1, keepdims=True)
    return de / norms[:, None]


@dataclass
class MappingNet:
    """Two-layer MLP from an EEG embedding to ``n_tokens`` prefix embeddings.

    Every token is read out of the same hidden vector.
    """

    W1: np.ndarray
    b1: np.ndarray
    W2: np.ndarray
    b2: np.ndarray
    n_tokens: int

    def __post_init__(self):
        for name in ("W1", "b1", "W2", "b2"):
            setattr(self, name, np.asarray(getattr(self, name), dtype=np.float64))
        h, _ = self.W1.shape
        if self.b1.shape != (h,) or self.W2.ndim != 2 or self.W2.shape[1] != h:
            raise ValidationError("inconsistent MappingNet hidden dimensions")
        if self.n_tokens < 1 or self.W2.shape[0] % self.n_tokens:
            raise ValidationError(
                f"W2 rows ({self.W2.shape[0]}) must be a multiple of n_tokens ({self.n_tokens})")
        if self.b2.shape != (self.W2.shape[0],):
            raise ValidationError("b2 length must equal W2 row count")

    @property
    def d_in(self) -> int:
        return self.W1.shape[1]

    @property
    def d_token(self) -> int:
        return self.W2.shape[0] // self.n_tokens

    @classmethod
    def random(cls, d_in=512, hidden=1024, d_token=64, n_tokens=4, seed=0) -> "MappingNet":
        rng = np.random.default_rng(seed)
        return cls(rng.normal(0, 1 / np.sqrt(d_in), (hidden, d_in)),
                   rng.normal(0, 0.1, hidden),
                   rng.normal(0, 1 / np.sqrt(hidden), (n_tokens * d_token, hidden)),
                   rng.normal(0, 0.1, n_tokens * d_token),
                   n_tokens)

    def to_json(self) -> str:
        return json.dumps({
            "n_tokens": self.n_tokens,
            "W1": {"shape": list(self.W1.shape), "data": self.W1.ravel().tolist()},
            "b1": {"shape": list(self.b1.shape), "data": self.b1.tolist()},
            "W2": {"shape": list(self.W2.shape), "data": self.W2.ravel().tolist()},
            "b2": {"shape": list(self.b2.shape), "data": self.b2.tolist()},
        })

    @classmethod
    def from_json(cls, text: str) -> "MappingNet":
        try:
            doc = json.loads(text)
            arrays = {k: np.asarray(doc[k]["data"], dtype=np.float64).reshape(doc[k]["shape"])
                      for k in ("W1", "b1", "W2", "b2")}
            return cls(n_tokens=int(doc["n_tokens"]), **arrays)
        except (KeyError, TypeError, ValueError) as exc:
            raise LoadError(f"bad MappingNet document: {exc}") from None


def mapping_forward(h_eeg, net: MappingNet) -> np.ndarray:
    h_eeg = np.asarray(h_eeg, dtype=np.float64)
    if h_eeg.shape != (net.d_in,):
        raise ValidationError(f"expected embedding of length {net.d_in}, got {h_eeg.shape}")
    hidden = np.maximum(net.W1 @ h_eeg + net.b1, 0.0)
    return (net.W2 @ hidden + net.b2).reshape(net.n_tokens, net.d_token)


def mapping_jacobian(h_eeg, net: MappingNet) -> np.ndarray:
    """d vec(tokens) / d h_eeg, shape ``(n_tokens * d_token) x d_in``."""
    h_eeg = np.asarray(h_eeg, dtype=np.float64)
    active = (net.W1 @ h_eeg + net.b1) > 0
    return net.W2[:, active] @ net.W1[active]


def sequence_nll(token_probs) -> float:
    p = np.asarray(token_probs, dtype=np.float64)
    if p.ndim != 1 or p.size < 1:
        raise ValidationError("need at least one token probability")
    if np.any(p < 0) or np.any(p > 1):
        raise ValidationError("token probabilities must lie in [0, 1]")
    if np.any(p == 0):
        raise NumericError("a target token has probability zero; loss is infinite")
    return float(-np.log(p).mean())


def build_prompt(label: str) -> list[dict]:
    """Chat messages for the EEG-prefix LLM; ``<EEG>`` is left for the caller to splice."""
    return [
        {"role": "system", "content": SYSTEM_PROMPT},
        {"role": "user", "content": USER_TEMPLATE.replace("<Label>", label)},
    ]
