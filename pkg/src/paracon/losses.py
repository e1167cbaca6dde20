"""Loss functions with exact analytic gradients.

Everything here is plain float64 numpy with hand-derived partials, so each
loss can be verified against central finite differences. Gradients with
respect to projection vectors are taken through the cosine normalization,
i.e. they are exact even if an input drifts slightly off the unit sphere.

The contrastive losses share one core: a similarity matrix S[a,b] =
z_a.z_b/(|z_a||z_b|) and per-anchor log-softmax terms

    l_ip = S[i,p]/tau - logsumexp_{k != i}(S[i,k]/tau).

The pair-weighted variant multiplies each term by a weight alpha_ip that is
larger for paraphrase pairs, and normalizes each anchor by the sum of its
weights, which makes the loss invariant to rescaling all weights.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

UNIT_ATOL = 1e-6


@dataclass
class BatchRelations:
    """Label/paraphrase-group structure of one batch.

    ``positive_mask[i, p]`` is true iff i != p and the samples share a label;
    ``paraphrase_mask[i, p]`` additionally requires a shared group.
    """

    labels: np.ndarray
    group_ids: list[str]
    paraphrase_mask: np.ndarray = field(init=False)
    positive_mask: np.ndarray = field(init=False)

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=np.int64)
        n = self.labels.shape[0]
        if len(self.group_ids) != n:
            raise ValueError("labels and group_ids disagree on batch size")
        same_label = self.labels[:, None] == self.labels[None, :]
        groups = np.array(self.group_ids)
        same_group = groups[:, None] == groups[None, :]
        off_diag = ~np.eye(n, dtype=bool)
        self.positive_mask = same_label & off_diag
        self.paraphrase_mask = same_group & off_diag
        if np.any(self.paraphrase_mask & ~self.positive_mask):
            raise ValueError("paraphrase pair with differing labels")

    @property
    def n(self) -> int:
        return int(self.labels.shape[0])


@dataclass(frozen=True)
class ContrastiveConfig:
    """Temperature, paraphrase weight, and weight mode for contrastive losses."""

    tau: float = 0.1
    s: float = 20.0
    alpha_mode: str = "constant"

    def __post_init__(self):
        if self.tau <= 0:
            raise ValueError("tau must be > 0")
        if self.s < 1:
            raise ValueError("s must be >= 1")
        if self.alpha_mode not in ("constant", "dynamic"):
            raise ValueError(f"unknown alpha_mode {self.alpha_mode!r}")


def log_softmax(x: np.ndarray) -> np.ndarray:
    """Row-wise log softmax with max-shift stabilization."""
    x = np.asarray(x, dtype=np.float64)
    shifted = x - np.max(x, axis=-1, keepdims=True)
    return shifted - np.log(np.sum(np.exp(shifted), axis=-1, keepdims=True))


def cross_entropy(logits: np.ndarray, label: int) -> tuple[float, np.ndarray]:
    """Negative log softmax probability of ``label`` and its exact gradient."""
    logits = np.asarray(logits, dtype=np.float64)
    if logits.ndim != 1:
        raise ValueError("logits must be a vector")
    if not 0 <= label < logits.shape[0]:
        raise ValueError(f"label {label} out of range [0, {logits.shape[0]})")
    logp = log_softmax(logits)
    grad = np.exp(logp)
    grad[label] -= 1.0
    return float(-logp[label]), grad


def cross_entropy_batch(logits: np.ndarray, labels: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean cross-entropy over a batch; gradient has the 1/K factor baked in."""
    logits = np.asarray(logits, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    k = logits.shape[0]
    if labels.shape != (k,):
        raise ValueError("labels must match batch size")
    if np.any(labels < 0) or np.any(labels >= logits.shape[1]):
        raise ValueError("label out of range")
    logp = log_softmax(logits)
    loss = float(-np.mean(logp[np.arange(k), labels]))
    grad = np.exp(logp)
    grad[np.arange(k), labels] -= 1.0
    return loss, grad / k


def _check_unit(z: np.ndarray) -> None:
    norms = np.linalg.norm(z, axis=1)
    worst = np.max(np.abs(norms - 1.0))
    if worst > UNIT_ATOL:
        raise ValueError(f"projection vectors must be unit-norm (max deviation {worst:.3g})")


def _similarity_matrix(z: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Cosine similarity matrix plus the row norms and normalized rows."""
    norms = np.linalg.norm(z, axis=1)
    zhat = z / norms[:, None]
    return zhat @ zhat.T, norms, zhat

def _grads_from_similarity(
    g_sim: np.ndarray, sims: np.ndarray, norms: np.ndarray, zhat: np.ndarray,
) -> np.ndarray:
    """Chain dL/dS (ordered pairs, zero diagonal) back to dL/dz.

    dS[a,b]/dz_a = (zhat_b - S[a,b] zhat_a)/|z_a|, so with M = G + G^T the
    gradient of row c is (M[c,:] @ zhat - (M[c,:].S[c,:]) zhat_c)/|z_c|.
    """
    m = g_sim + g_sim.T
    radial = np.sum(m * sims, axis=1)
    return (m @ zhat - radial[:, None] * zhat) / norms[:, None]


def _masked_row_softmax(sims: np.ndarray, tau: float) -> tuple[np.ndarray, np.ndarray]:
    """Softmax of S/tau over k != i per row, and the matching logsumexp."""
    n = sims.shape[0]
    scaled = sims / tau
    np.fill_diagonal(scaled, -np.inf)
    shift = np.max(scaled, axis=1, keepdims=True)
    expd = np.exp(scaled - shift)
    denom = np.sum(expd, axis=1, keepdims=True)
    lse = (shift + np.log(denom)).ravel()
    return expd / denom, lse


def info_nce(
    z: np.ndarray, i: int, p: int, tau: float,
) -> tuple[float, np.ndarray]:
    """Single-positive contrastive loss for anchor i and positive p.

    loss = -log [ exp(S[i,p]/tau) / sum_{k != i} exp(S[i,k]/tau) ]; the
    returned gradients cover every row of z.
    """
    z = np.asarray(z, dtype=np.float64)
    if z.ndim != 2 or z.shape[0] < 2:
        raise ValueError("need at least two projection vectors")
    if tau <= 0:
        raise ValueError("tau must be > 0")
    k = z.shape[0]
    if not 0 <= i < k or not 0 <= p < k:
        raise ValueError("index out of range")
    if p == i:
        raise ValueError("positive index must differ from the anchor")
    _check_unit(z)

    sims, norms, zhat = _similarity_matrix(z)
    weights, lse = _masked_row_softmax(sims, tau)
    loss = float(-sims[i, p] / tau + lse[i])

    g_sim = np.zeros_like(sims)
    g_sim[i, :] = weights[i, :] / tau
    g_sim[i, p] -= 1.0 / tau
    return loss, _grads_from_similarity(g_sim, sims, norms, zhat)


def alpha(
    i: int, p: int, rel: BatchRelations, cfg: ContrastiveConfig, z: np.ndarray | None = None,
) -> float:
    """Pair weight for positive pair (i, p).

    Constant mode: s for paraphrase pairs, 1 otherwise. Dynamic mode scales
    the same base weight by the cosine distance 1 - cos(z_i, z_p).
    """
    if not rel.positive_mask[i, p]:
        raise ValueError(f"({i}, {p}) is not a positive pair")
    base = cfg.s if rel.paraphrase_mask[i, p] else 1.0
    if cfg.alpha_mode == "constant":
        return float(base)
    if z is None:
        raise ValueError("dynamic alpha needs projection vectors")
    zi, zp = np.asarray(z[i]), np.asarray(z[p])
    cos = float(zi @ zp / (np.linalg.norm(zi) * np.linalg.norm(zp)))
    return float(base * (1.0 - cos))


def _sscl_from_alpha(
    z: np.ndarray,
    positive_mask: np.ndarray,
    alpha_mat: np.ndarray,
    tau: float,
    dalpha_dsim: np.ndarray | None = None,
) -> tuple[float, np.ndarray, np.ndarray]:
    """Weighted multi-positive contrastive loss given an explicit weight matrix.

    Anchors without positives (or with zero total weight) contribute nothing
    and are excluded from the mean. ``dalpha_dsim[i, p]`` carries the
    dependence of alpha_ip on S[i, p] when the weights are similarity-driven.
    """
    n = z.shape[0]
    sims, norms, zhat = _similarity_matrix(z)
    weights, lse = _masked_row_softmax(sims, tau)
    ell = sims / tau - lse[:, None]

    weight_sums = np.sum(alpha_mat, axis=1, where=positive_mask)
    has_pos = positive_mask.any(axis=1)
    valid = has_pos & (weight_sums > 0)
    n_valid = int(np.count_nonzero(valid))

    per_sample = -np.sum(alpha_mat * ell, axis=1, where=positive_mask)
    per_sample[~has_pos] = 0.0
    if n_valid == 0:
        return 0.0, np.zeros_like(z), per_sample
    loss = float(np.sum(per_sample[valid] / weight_sums[valid]) / n_valid)

    # dL/dl_ip = -alpha_ip / (n_valid * A_i) on valid anchors' positive pairs.
    coeff = np.zeros((n, n))
    coeff[valid] = -alpha_mat[valid] / (n_valid * weight_sums[valid, None])
    coeff[~positive_mask] = 0.0

    g_sim = coeff / tau
    g_sim -= np.sum(coeff, axis=1, keepdims=True) * weights / tau
    if dalpha_dsim is not None:
        # dL/dalpha_ip via the quotient rule: (-l_ip + L_i/A_i)/(n_valid A_i)
        # where L_i = sum_q alpha_iq l_iq = -per_sample_i.
        dl_dalpha = np.zeros((n, n))
        dl_dalpha[valid] = (
            -ell[valid] - (per_sample[valid] / weight_sums[valid])[:, None]
        ) / (n_valid * weight_sums[valid, None])
        dl_dalpha[~positive_mask] = 0.0
        g_sim += dl_dalpha * dalpha_dsim
    grads = _grads_from_similarity(g_sim, sims, norms, zhat)
    return loss, grads, per_sample


def scaled_supervised_contrastive(
    z: np.ndarray, rel: BatchRelations, cfg: ContrastiveConfig,
) -> tuple[float, np.ndarray, np.ndarray]:
    """Paraphrase-weighted supervised contrastive loss over a batch.

    Returns (loss, gradients w.r.t. every z row, per-anchor weighted sums).
    With s = 1 in constant mode this is plain supervised contrastive loss;
    with singleton positive sets it reduces to the mean single-positive loss.
    """
    z = np.asarray(z, dtype=np.float64)
    if z.ndim != 2 or z.shape[0] < 2:
        raise ValueError("need at least two projection vectors")
    if z.shape[0] != rel.n:
        raise ValueError("z and relations disagree on batch size")
    _check_unit(z)

    base = np.where(rel.paraphrase_mask, cfg.s, 1.0)
    base[~rel.positive_mask] = 0.0
    if cfg.alpha_mode == "constant":
        return _sscl_from_alpha(z, rel.positive_mask, base, cfg.tau)

    # Dynamic weights alpha_ip = base_ip * (1 - S[i,p]) depend on z, so their
    # derivative w.r.t. the similarity feeds back into the gradient.
    sims, _, _ = _similarity_matrix(z)
    alpha_mat = base * (1.0 - sims)
    alpha_mat[~rel.positive_mask] = 0.0
    return _sscl_from_alpha(
        z, rel.positive_mask, alpha_mat, cfg.tau, dalpha_dsim=-base)


def supervised_contrastive(
    z: np.ndarray, rel: BatchRelations, tau: float,
) -> tuple[float, np.ndarray, np.ndarray]:
    """Unweighted multi-positive contrastive loss (all pair weights equal 1)."""
    cfg = ContrastiveConfig(tau=tau, s=1.0, alpha_mode="constant")
    return scaled_supervised_contrastive(z, rel, cfg)


def finite_difference_check(loss_fn, inputs: np.ndarray, h: float) -> float:
    """Max relative disagreement between analytic and central-difference grads.

    ``loss_fn(x)`` must return (loss, gradient) at x. Each coordinate is
    perturbed by +-h; the relative error uses the symmetric denominator
    max(1e-8, |analytic| + |numeric|).
    """
    if h <= 0:
        raise ValueError("h must be > 0")
    x = np.array(inputs, dtype=np.float64)
    _, analytic = loss_fn(x)
    analytic = np.asarray(analytic, dtype=np.float64).ravel()
    if analytic.size != x.size:
        raise ValueError("gradient shape does not match inputs")
    worst = 0.0
    flat = x.ravel()
    for j in range(flat.size):
        orig = flat[j]
        flat[j] = orig + h
        f_plus, _ = loss_fn(x)
        flat[j] = orig - h
        f_minus, _ = loss_fn(x)
        flat[j] = orig
        numeric = (f_plus - f_minus) / (2.0 * h)
        err = abs(analytic[j] - numeric) / max(1e-8, abs(analytic[j]) + abs(numeric))
        worst = max(worst, err)
    return worst
