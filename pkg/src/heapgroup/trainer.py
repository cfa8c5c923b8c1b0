"""Optimisation loop, optimiser state and checkpoints."""
from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from . import diffcore as dc
from .head import HeadConfig, HeadParams, forward, init_head
from .ingest import FormatError, PatchFeatureSet, read_container, write_container
from .losses import LossConfig, LossReport, total_loss

log = logging.getLogger(__name__)

CHECKPOINT_VERSION = 2


class NonFiniteLossError(FloatingPointError):
    def __init__(self, term: str, step: int, value: float):
        self.term, self.step, self.value = term, step, value
        super().__init__(f"non-finite {term} ({value}) at step {step}")


@dataclass
class TrainConfig:
    batch_size: int = 4
    steps: int = 500
    learning_rate: float = 1e-4
    optimizer: str = "adam"  # adam | sgd
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    seed: int = 0
    # loss
    lam: float = 1.0
    alpha: float = 0.1
    eps_log: float = 1e-6
    use_intra: bool = True
    use_entropy: bool = True
    use_neg: bool = True
    use_inter: bool = True
    # head
    M: int = 8
    L: int = 2
    tau: float = 1.0
    normalize: bool = True
    # bookkeeping
    checkpoint_interval: int = 0
    log_path: str | None = None

    def validate(self):
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.steps < 1:
            raise ValueError("steps must be >= 1")
        if self.learning_rate < 0:
            raise ValueError("learning_rate must be non-negative")
        if self.optimizer not in ("adam", "sgd"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")
        self.loss_config().validate()
        self.head_config().validate()

    def loss_config(self) -> LossConfig:
        return LossConfig(self.lam, self.alpha, self.eps_log, self.use_intra, self.use_entropy,
                          self.use_neg, self.use_inter)

    def head_config(self) -> HeadConfig:
        return HeadConfig(self.M, self.L, self.tau, self.normalize)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d)

    @classmethod
    def from_json(cls, path) -> "TrainConfig":
        return cls.from_dict(json.loads(Path(path).read_text()))

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class TrainState:
    params: HeadParams
    head: HeadConfig
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    step: int
    rng: np.random.Generator
    order: np.ndarray  # current epoch's image permutation
    cursor: int
    seed: int = 0
    log: list[dict] = field(default_factory=list, repr=False)


def init_state(config: TrainConfig, dim: int) -> TrainState:
    params = init_head(config.M, dim, config.L, config.seed)
    zeros = {k: np.zeros_like(t.data) for k, t in params.named().items()}
    return TrainState(
        params=params,
        head=config.head_config(),
        m=zeros,
        v={k: z.copy() for k, z in zeros.items()},
        step=0,
        rng=np.random.default_rng(config.seed),
        order=np.zeros(0, dtype=np.int64),
        cursor=0,
        seed=config.seed,
    )


def next_batch(state: TrainState, n_images: int, batch_size: int) -> np.ndarray:
    """Indices of the next batch: without replacement within an epoch, reshuffled per epoch.

    A trailing partial batch is dropped; a dataset smaller than the batch is
    used whole.
    """
    size = min(batch_size, n_images)
    if state.order.size != n_images or state.cursor + size > n_images:
        state.order = state.rng.permutation(n_images)
        state.cursor = 0
    idx = state.order[state.cursor : state.cursor + size]
    state.cursor += size
    return idx


def apply_update(state: TrainState, grads: dict[str, np.ndarray], config: TrainConfig) -> None:
    lr = config.learning_rate
    t = state.step + 1
    for name, p in state.params.named().items():
        g = grads[name]
        if config.optimizer == "sgd":
            p.data -= lr * g
            continue
        m = state.m[name] = config.beta1 * state.m[name] + (1.0 - config.beta1) * g
        v = state.v[name] = config.beta2 * state.v[name] + (1.0 - config.beta2) * g * g
        m_hat = m / (1.0 - config.beta1**t)
        v_hat = v / (1.0 - config.beta2**t)
        p.data -= lr * m_hat / (np.sqrt(v_hat) + config.eps)


def step(batch, state: TrainState, config: TrainConfig) -> LossReport:
    """One optimiser step on a batch of ImageFeatures; mutates ``state``."""
    outputs = forward(batch, state.params, state.head, mode="train", rng=state.rng)
    loss, report = total_loss(outputs, config.loss_config())
    for term, value in report.as_dict().items():
        if not math.isfinite(value):
            raise NonFiniteLossError(term, state.step + 1, value)
    named = state.params.named()
    grads = dict(zip(named, dc.backward(loss, list(named.values()))))
    apply_update(state, grads, config)
    state.step += 1
    return report


def train(config: TrainConfig, features: PatchFeatureSet, state: TrainState | None = None,
          checkpoint_path=None) -> TrainState:
    """Run ``config.steps`` steps, starting from ``state`` if given.

    Appends one record per step to ``state.log`` and, when ``config.log_path``
    is set, to that JSON-lines file.
    """
    config.validate()
    if len(features) == 0:
        raise ValueError("training needs at least one image")
    if state is None:
        state = init_state(config, features.embed_dim)
    elif state.params.D != features.embed_dim:
        raise ValueError(f"checkpoint D={state.params.D} but features have D={features.embed_dim}")
    log_fh = open(config.log_path, "a") if config.log_path else None
    try:
        for _ in range(config.steps):
            idx = next_batch(state, len(features), config.batch_size)
            batch = [features.images[i] for i in idx]
            report = step(batch, state, config)
            record = {"step": state.step, **report.as_dict()}
            state.log.append(record)
            if log_fh:
                log_fh.write(json.dumps(record) + "\n")
            if checkpoint_path and config.checkpoint_interval and state.step % config.checkpoint_interval == 0:
                save_checkpoint(state, checkpoint_path)
    finally:
        if log_fh:
            log_fh.close()
    if checkpoint_path:
        save_checkpoint(state, checkpoint_path)
    return state


# ---------------------------------------------------------------- checkpoints


def _sidecar(path) -> Path:
    return Path(str(path) + ".json")


def _records(named: dict[str, np.ndarray]):
    out = []
    for name, arr in named.items():
        r, c = arr.shape
        out.append((name, (r, 1, r, 1, 1, c), arr))
    return out


def save_checkpoint(state: TrainState, path) -> None:
    """Write parameters and optimiser moments (float64 HPF1, version 2) plus a JSON sidecar."""
    arrays = {k: t.data for k, t in state.params.named().items()}
    arrays.update({f"opt.m.{k}": v for k, v in state.m.items()})
    arrays.update({f"opt.v.{k}": v for k, v in state.v.items()})
    write_container(path, _records(arrays), CHECKPOINT_VERSION)
    bg = state.rng.bit_generator.state
    meta = {
        "M": state.params.M,
        "D": state.params.D,
        "L": state.params.L,
        "tau": state.head.tau,
        "normalize": state.head.normalize,
        "seed": state.seed,
        "step": state.step,
        "rng": {
            "bit_generator": bg["bit_generator"],
            "state": str(bg["state"]["state"]),
            "inc": str(bg["state"]["inc"]),
            "has_uint32": bg["has_uint32"],
            "uinteger": bg["uinteger"],
        },
        "order": [int(i) for i in state.order],
        "cursor": state.cursor,
        "version": CHECKPOINT_VERSION,
    }
    _sidecar(path).write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")


def load_checkpoint(path) -> TrainState:
    meta_path = _sidecar(path)
    if not meta_path.exists():
        raise FormatError(f"{path}: missing checkpoint sidecar {meta_path.name}")
    meta = json.loads(meta_path.read_text())
    if meta.get("version") != CHECKPOINT_VERSION:
        raise FormatError(f"{path}: checkpoint version {meta.get('version')}, expected {CHECKPOINT_VERSION}")
    arrays = {name: values for name, _, values in read_container(path, CHECKPOINT_VERSION)}
    params = HeadParams.from_named({k: v for k, v in arrays.items() if not k.startswith("opt.")})
    m = {k[len("opt.m."):]: v.copy() for k, v in arrays.items() if k.startswith("opt.m.")}
    v = {k[len("opt.v."):]: val.copy() for k, val in arrays.items() if k.startswith("opt.v.")}
    if (params.M, params.D, params.L) != (meta["M"], meta["D"], meta["L"]):
        raise FormatError(f"{path}: sidecar sizes disagree with stored tensors")
    rng_meta = meta["rng"]
    rng = np.random.default_rng()
    rng.bit_generator.state = {
        "bit_generator": rng_meta["bit_generator"],
        "state": {"state": int(rng_meta["state"]), "inc": int(rng_meta["inc"])},
        "has_uint32": rng_meta["has_uint32"],
        "uinteger": rng_meta["uinteger"],
    }
    return TrainState(
        params=params,
        head=HeadConfig(meta["M"], meta["L"], meta["tau"], meta["normalize"]),
        m=m or {k: np.zeros_like(t.data) for k, t in params.named().items()},
        v=v or {k: np.zeros_like(t.data) for k, t in params.named().items()},
        step=meta["step"],
        rng=rng,
        order=np.asarray(meta["order"], dtype=np.int64),
        cursor=meta["cursor"],
        seed=meta["seed"],
    )
