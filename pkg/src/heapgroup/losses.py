"""Training objectives: intra-image modularity self-distillation with
entropy regularisation, image-level foreground/background negative contrast,
and rank-weighted inter-image region clustering."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from . import diffcore as dc
from .diffcore import Tensor

log = logging.getLogger(__name__)

MODULARITY_FLOOR = 1e-9
ENTROPY_FLOOR = 1e-300


@dataclass
class LossConfig:
    lam: float = 1.0
    alpha: float = 0.1
    eps_log: float = 1e-6
    use_intra: bool = True
    use_entropy: bool = True
    use_neg: bool = True
    use_inter: bool = True

    def validate(self):
        if self.lam < 0:
            raise ValueError("lambda must be non-negative")
        if self.alpha <= 0:
            raise ValueError("alpha must be positive")
        if not 0 < self.eps_log <= 1e-3:
            raise ValueError("eps_log must lie in (0, 1e-3]")


@dataclass
class LossReport:
    l_intra: float
    l_neg: float
    l_inter_fg: float
    l_inter_bg: float
    total: float
    modularity: list[float] = field(default_factory=list)
    entropy: list[float] = field(default_factory=list)

    def as_dict(self) -> dict:
        return {
            "l_intra": self.l_intra,
            "l_neg": self.l_neg,
            "l_inter_fg": self.l_inter_fg,
            "l_inter_bg": self.l_inter_bg,
            "total": self.total,
        }


# ------------------------------------------------------------- intra-image


def patch_affinity(P) -> np.ndarray:
    """A_ij = max(0, cos(P_i, P_j)) off the diagonal, 0 on it."""
    P = P.data if isinstance(P, Tensor) else np.asarray(P, dtype=np.float64)
    with dc.no_grad():
        cos = dc.cosine_similarity(P).data
    A = np.maximum(cos, 0.0)
    A = 0.5 * (A + A.T)
    np.fill_diagonal(A, 0.0)
    return A


def assignment_affinity(Z) -> Tensor:
    """delta_ij = cos(Z_i, Z_j), diagonal included."""
    return dc.cosine_similarity(Z)


def modularity_term(A: np.ndarray, delta) -> Tensor:
    """-(1/2m) sum_ij (A_ij - k_i k_j / 2m) delta_ij; 0 for a graph without edges."""
    A = np.asarray(A, dtype=np.float64)
    two_m = A.sum()
    if two_m < MODULARITY_FLOOR:
        return Tensor(0.0)
    k = A.sum(axis=1)
    B = A - np.outer(k, k) / two_m
    return dc.scale(dc.sum(dc.mul(B, delta)), -1.0 / two_m)


def entropy_term(Z) -> Tensor:
    """(1/M) sum_j c_j log c_j with c_j = sum_i Z_ij and 0 log 0 = 0."""
    Z = dc.as_tensor(Z)
    c = dc.sum(Z, axis=0)
    return dc.scale(dc.sum(c * dc.log(dc.clamp(c, ENTROPY_FLOOR, np.inf))), 1.0 / Z.shape[1])


def intra_loss(A: np.ndarray, Z, delta, lam: float, use_entropy: bool = True) -> Tensor:
    """Single-image intra-image grouping loss (modularity plus weighted entropy)."""
    loss = modularity_term(A, delta)
    if use_entropy and lam:
        loss = loss + dc.scale(entropy_term(Z), lam)
    return loss


# ------------------------------------------------------ foreground/background


def image_fg_bg(H, G) -> tuple[Tensor, Tensor]:
    """F_f = H^T G and F_b = (1 - H)^T G for one image's occupied regions."""
    H, G = dc.as_tensor(H), dc.as_tensor(G)
    Ht = dc.transpose(H)
    return Ht @ G, (1.0 - Ht) @ G


def neg_loss(F_f: list, F_b: list, eps_log: float = 1e-6) -> Tensor:
    """-(1/n^2) sum_ij log(1 - cos(F_f_i, F_b_j)), argument clamped to [eps_log, 2]."""
    ff = dc.concat_rows(F_f)
    fb = dc.concat_rows(F_b)
    n = ff.shape[0]
    gap = dc.clamp(1.0 - dc.cosine_similarity(ff, fb), eps_log, 2.0)
    return dc.scale(dc.sum(dc.log(gap)), -1.0 / (n * n))


# ----------------------------------------------------------- inter-image


def region_fg_bg(H_all, G_all) -> tuple[Tensor, Tensor]:
    """Region-level split: G_f = H * G, G_b = (1 - H) * G, H as an (R, 1) column."""
    H_all, G_all = dc.as_tensor(H_all), dc.as_tensor(G_all)
    return H_all * G_all, (1.0 - H_all) * G_all


def ranking_weights(S: np.ndarray, alpha: float) -> np.ndarray:
    """w_ij = exp(-alpha * rank_i(j)) where rank 0 is anchor i's most similar
    other region; ties go to the smaller j. Diagonal weights are 0."""
    S = np.asarray(S, dtype=np.float64)
    R = S.shape[0]
    W = np.zeros_like(S)
    for i in range(R):
        others = np.array([j for j in range(R) if j != i], dtype=np.int64)
        order = others[np.argsort(-S[i, others], kind="stable")]
        W[i, order] = np.exp(-alpha * np.arange(order.size))
    return W


def _inter_term(Gx: Tensor, alpha: float, eps_log: float) -> Tensor:
    R = Gx.shape[0]
    S = dc.relu(dc.cosine_similarity(Gx))
    W = ranking_weights(dc.stop_gradient(S).data, alpha)
    logs = dc.log(dc.clamp(S, eps_log, 1.0))
    return dc.scale(dc.sum(dc.mul(W, logs)), -1.0 / (R * (R - 1)))


def inter_loss(G_f, G_b, alpha: float = 0.1, eps_log: float = 1e-6) -> tuple[Tensor, Tensor]:
    G_f, G_b = dc.as_tensor(G_f), dc.as_tensor(G_b)
    if G_f.shape[0] < 2:
        log.warning("inter-image loss needs at least two occupied regions, got %d", G_f.shape[0])
        return Tensor(0.0), Tensor(0.0)
    return _inter_term(G_f, alpha, eps_log), _inter_term(G_b, alpha, eps_log)


# ------------------------------------------------------------------- total


def total_loss(outputs, config: LossConfig) -> tuple[Tensor, LossReport]:
    """Sum of the enabled terms over a batch of head outputs."""
    n = len(outputs)
    zero = Tensor(0.0)
    modularity, entropy = [], []
    l_intra = zero
    if config.use_intra or config.use_entropy:
        terms = []
        for out in outputs:
            A = patch_affinity(out.P)
            mod = modularity_term(A, assignment_affinity(out.Z))
            ent = entropy_term(out.Z)
            modularity.append(mod.item())
            entropy.append(ent.item())
            term = zero
            if config.use_intra:
                term = term + mod
            if config.use_entropy and config.lam:
                term = term + dc.scale(ent, config.lam)
            terms.append(term)
        l_intra = dc.scale(_stack_sum(terms), 1.0 / n)

    regions = [out.occupied for out in outputs]
    Gs = [dc.gather_rows(out.G, occ) for out, occ in zip(outputs, regions)]
    Hs = [dc.gather_rows(out.H, occ) for out, occ in zip(outputs, regions)]

    l_neg = zero
    if config.use_neg:
        pairs = [image_fg_bg(H, G) for H, G in zip(Hs, Gs)]
        l_neg = neg_loss([p[0] for p in pairs], [p[1] for p in pairs], config.eps_log)

    l_fg = l_bg = zero
    if config.use_inter:
        G_f, G_b = region_fg_bg(dc.concat_rows(Hs), dc.concat_rows(Gs))
        l_fg, l_bg = inter_loss(G_f, G_b, config.alpha, config.eps_log)

    total = l_intra + l_neg + l_fg + l_bg
    report = LossReport(
        l_intra.item(), l_neg.item(), l_fg.item(), l_bg.item(), total.item(), modularity, entropy
    )
    return total, report


def _stack_sum(terms: list[Tensor]) -> Tensor:
    out = terms[0]
    for t in terms[1:]:
        out = out + t
    return out
