"""The grouping head: learnable group tokens adapted by cross-attention,
Gumbel-softmax patch assignment, hard grouping, region merging and the linear
foreground aggregator."""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import diffcore as dc
from .diffcore import Tensor

MERGE_EPS = 1e-8


@dataclass
class HeadConfig:
    M: int = 8
    L: int = 2
    tau: float = 1.0
    normalize: bool = True

    def validate(self):
        if self.M < 2:
            raise ValueError(f"need at least two group tokens, got M={self.M}")
        if self.L < 1:
            raise ValueError(f"need at least one cross-attention layer, got L={self.L}")
        if self.tau <= 0:
            raise ValueError("tau must be positive")


@dataclass
class CrossAttnParams:
    Wq: Tensor
    Wk: Tensor
    Wv: Tensor
    Wo: Tensor


@dataclass
class HeadParams:
    g: Tensor
    layers: list[CrossAttnParams]
    phi_w: Tensor  # (D, 1)
    phi_b: Tensor  # (1, 1)

    @property
    def M(self) -> int:
        return self.g.shape[0]

    @property
    def D(self) -> int:
        return self.g.shape[1]

    @property
    def L(self) -> int:
        return len(self.layers)

    def named(self) -> dict[str, Tensor]:
        """Parameters keyed by their checkpoint names, in a fixed order."""
        out = {"g": self.g}
        for i, layer in enumerate(self.layers):
            out[f"layer{i}.Wq"] = layer.Wq
            out[f"layer{i}.Wk"] = layer.Wk
            out[f"layer{i}.Wv"] = layer.Wv
            out[f"layer{i}.Wo"] = layer.Wo
        out["phi.w"] = self.phi_w
        out["phi.b"] = self.phi_b
        return out

    def tensors(self) -> list[Tensor]:
        return list(self.named().values())

    @classmethod
    def from_named(cls, arrays: dict[str, np.ndarray]) -> "HeadParams":
        n_layers = len([k for k in arrays if k.endswith(".Wq")])
        t = lambda k: Tensor(np.array(arrays[k], dtype=np.float64), requires_grad=True, name=k)  # noqa: E731
        layers = [
            CrossAttnParams(t(f"layer{i}.Wq"), t(f"layer{i}.Wk"), t(f"layer{i}.Wv"), t(f"layer{i}.Wo"))
            for i in range(n_layers)
        ]
        return cls(t("g"), layers, t("phi.w"), t("phi.b"))

    def copy(self) -> "HeadParams":
        return HeadParams.from_named({k: v.data.copy() for k, v in self.named().items()})


def init_head(M: int, D: int, L: int, seed: int) -> HeadParams:
    """Group tokens ~ N(0, 0.02^2); W_q/k/v ~ N(0, (0.5*sqrt(2/D))^2); W_o = 0;
    aggregator weight ~ N(0, 0.02^2), bias 0."""
    if M < 2 or D < 1 or L < 1:
        raise ValueError(f"invalid head size M={M}, D={D}, L={L}")
    rng = np.random.default_rng(seed)
    std = 0.5 * math.sqrt(2.0 / D)
    named = {"g": rng.normal(0.0, 0.02, (M, D))}
    for i in range(L):
        named[f"layer{i}.Wq"] = rng.normal(0.0, std, (D, D))
        named[f"layer{i}.Wk"] = rng.normal(0.0, std, (D, D))
        named[f"layer{i}.Wv"] = rng.normal(0.0, std, (D, D))
        named[f"layer{i}.Wo"] = np.zeros((D, D))
    named["phi.w"] = rng.normal(0.0, 0.02, (D, 1))
    named["phi.b"] = np.zeros((1, 1))
    return HeadParams.from_named(named)


def cross_attention_block(g, P, layer: CrossAttnParams) -> Tensor:
    """One residual cross-attention update of the group tokens.

    Queries come from the tokens; keys and values from the row-stack of
    tokens and patches.
    """
    g, P = dc.as_tensor(g), dc.as_tensor(P)
    if g.shape[1] != P.shape[1] or layer.Wq.shape != (g.shape[1], g.shape[1]):
        raise dc.ShapeError("cross-attention", g.shape, P.shape, layer.Wq.shape)
    d = g.shape[1]
    gp = dc.concat_rows([g, P])
    q = g @ layer.Wq
    k = gp @ layer.Wk
    v = gp @ layer.Wv
    attn = dc.row_softmax(dc.scale(q @ dc.transpose(k), 1.0 / math.sqrt(d)))
    return g + (attn @ v) @ layer.Wo


def adapt_tokens(P, params: HeadParams) -> Tensor:
    g = params.g
    for layer in params.layers:
        g = cross_attention_block(g, P, layer)
    return g


def assign(P, g, mode: str = "infer", rng: np.random.Generator | None = None, tau: float = 1.0) -> Tensor:
    """Soft patch-to-group assignment Z (N x M), Gumbel-perturbed in train mode."""
    P, g = dc.as_tensor(P), dc.as_tensor(g)
    if P.shape[1] != g.shape[1]:
        raise dc.ShapeError("assign", P.shape, g.shape)
    logits = P @ dc.transpose(g)
    if mode == "train":
        if rng is None:
            raise ValueError("train-mode assignment needs a random generator")
        logits = logits + dc.sample_gumbel(logits.shape, rng)
    elif mode != "infer":
        raise ValueError(f"mode must be 'train' or 'infer', got {mode!r}")
    if tau != 1.0:
        logits = dc.scale(logits, 1.0 / tau)
    return dc.row_softmax(logits)


def hard_assign(Z) -> np.ndarray:
    """Row-wise argmax; ties go to the lowest group index."""
    data = Z.data if isinstance(Z, Tensor) else np.asarray(Z)
    return np.argmax(data, axis=1)


def region_embeddings(P, Z, a) -> tuple[Tensor, np.ndarray]:
    """Groupwise mean of patch embeddings under hard assignment ``a``.

    The forward value is the exact hard mean; gradients reach ``Z`` through a
    straight-through relaxation onehot(a) + Z - stopgrad(Z).
    """
    P, Z = dc.as_tensor(P), dc.as_tensor(Z)
    a = np.asarray(a, dtype=np.int64)
    M = Z.shape[1]
    z_st = dc.one_hot(a, M) + (Z - dc.stop_gradient(Z))
    mass = dc.clamp(dc.sum(z_st, axis=0, keepdims=True), MERGE_EPS, np.inf)
    G = (dc.transpose(z_st) @ P) / dc.transpose(mass)
    occupancy = np.bincount(a, minlength=M)
    return G, occupancy


def aggregate(G, params: HeadParams) -> Tensor:
    """Foreground probability per region, sigmoid(G w + b), shape (M, 1)."""
    return dc.sigmoid(dc.as_tensor(G) @ params.phi_w + params.phi_b)


@dataclass
class HeadOutput:
    image_id: str
    Z: Tensor
    a: np.ndarray
    G: Tensor
    occupancy: np.ndarray
    H: Tensor  # (M, 1), empty groups included
    adapted_tokens: Tensor
    P: Tensor = field(repr=False)

    @property
    def occupied(self) -> np.ndarray:
        return np.flatnonzero(self.occupancy > 0)

    @property
    def h_values(self) -> np.ndarray:
        return self.H.data[:, 0].copy()

    def patch_probability(self) -> np.ndarray:
        """Foreground probability of each patch's assigned group."""
        return self.h_values[self.a]


def prepare_patches(embeddings: np.ndarray, normalize: bool) -> Tensor:
    """Frozen patch tensor; rows optionally L2-normalized."""
    x = np.asarray(embeddings, dtype=np.float64)
    if normalize:
        norms = np.sqrt((x**2).sum(axis=1, keepdims=True))
        x = x / np.maximum(norms, dc.NORM_FLOOR)
    return Tensor(x)


def forward_image(P: Tensor, params: HeadParams, mode: str = "infer",
                  rng: np.random.Generator | None = None, tau: float = 1.0, image_id: str = "") -> HeadOutput:
    if P.shape[1] != params.D:
        raise dc.ShapeError("forward", P.shape, params.g.shape)
    g = adapt_tokens(P, params)
    Z = assign(P, g, mode, rng, tau)
    a = hard_assign(dc.stop_gradient(Z))
    G, occupancy = region_embeddings(P, Z, a)
    H = aggregate(G, params)
    return HeadOutput(image_id, Z, a, G, occupancy, H, g, P)


def forward(images, params: HeadParams, config: HeadConfig, mode: str = "infer",
            rng: np.random.Generator | None = None) -> list[HeadOutput]:
    """Run the head on each image of a batch (a sequence of ImageFeatures)."""
    outputs = []
    for img in images:
        if img.dim != params.D:
            raise dc.ShapeError("forward", (img.n_patches, img.dim), params.g.shape)
        P = prepare_patches(img.embeddings, config.normalize)
        outputs.append(forward_image(P, params, mode, rng, config.tau, img.image_id))
    return outputs
