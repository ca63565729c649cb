"""Per-client split model.

The representation is ``h = f_g(x) + f_p(x) + PP`` and the logits are
``s_g(h) + s_p(h)``, where the ``_g`` submodules are aggregated by the server
and ``f_p``, ``s_p`` and ``PP`` stay on the client. Any of the three
personalized pieces can be switched off, which covers the usual split
families: personalized extractor with shared head, shared extractor with
personalized head, and a shared model corrected by a personal vector.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from pmmoe.datagen import LabeledDataset
from pmmoe.errors import DimensionError, ParameterError
from pmmoe.numerics import MLP, Tensor, sgd_step
from pmmoe.numerics import autograd as ag

GLOBAL_PREFIXES = ("g_fe.", "g_hd.")


@dataclass(frozen=True)
class SplitConfig:
    U: int
    D: int
    C: int
    enable_fp: bool = True
    enable_sp: bool = True
    enable_pp: bool = True
    fe_hidden: int = 32
    # "relu" or "none" on the extractor output
    fe_out_activation: str = "relu"
    # add PP to the logits instead of the representation (needs D == C)
    pp_on_logits: bool = False

    def __post_init__(self):
        if min(self.U, self.D, self.C, self.fe_hidden) < 1:
            raise ParameterError("U, D, C and fe_hidden must be positive")
        if not (self.enable_fp or self.enable_sp or self.enable_pp):
            raise ParameterError("at least one personalized element must be enabled")
        if self.pp_on_logits and self.D != self.C:
            raise ParameterError(f"pp_on_logits needs D == C, got D={self.D}, C={self.C}")

    @property
    def family(self) -> str:
        parts = [n for n, on in (("fp", self.enable_fp), ("sp", self.enable_sp), ("pp", self.enable_pp)) if on]
        return "+".join(parts)


def _extractor(cfg: SplitConfig, rng, name: str) -> MLP:
    return MLP([cfg.U, cfg.fe_hidden, cfg.D], rng, activation="relu", out_activation=cfg.fe_out_activation, name=name)


def _head(cfg: SplitConfig, rng, name: str) -> MLP:
    return MLP([cfg.D, cfg.C], rng, name=name)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


class SplitModel:
    def __init__(self, cfg: SplitConfig, global_rng: np.random.Generator, personal_rng: np.random.Generator):
        self.cfg = cfg
        self.g_fe = _extractor(cfg, global_rng, "g_fe")
        self.g_hd = _head(cfg, global_rng, "g_hd")
        self.p_fe = _extractor(cfg, personal_rng, "p_fe") if cfg.enable_fp else None
        self.p_hd = _head(cfg, personal_rng, "p_hd") if cfg.enable_sp else None
        self.pp = Tensor(np.zeros(cfg.D), requires_grad=True, name="pp") if cfg.enable_pp else None

    # -- pieces used by both the plain forward and the gated forward --------

    def global_features(self, x: Tensor) -> Tensor:
        return self.g_fe(x)

    def personal_features(self, x: Tensor) -> Tensor:
        return self.p_fe(x)

    def global_logits(self, h: Tensor) -> Tensor:
        return self.g_hd(h)

    def personal_logits(self, h: Tensor) -> Tensor:
        return self.p_hd(h)

    def check_input(self, x: Tensor) -> None:
        if x.data.ndim not in (1, 2) or x.shape[-1] != self.cfg.U:
            raise DimensionError(f"input of shape {x.shape} does not match U={self.cfg.U}")

    def forward(self, x) -> tuple[Tensor, Tensor]:
        x = as_tensor(x)
        self.check_input(x)
        h = self.global_features(x)
        if self.p_fe is not None:
            h = h + self.personal_features(x)
        if self.pp is not None and not self.cfg.pp_on_logits:
            h = h + self.pp
        logits = self.global_logits(h)
        if self.p_hd is not None:
            logits = logits + self.personal_logits(h)
        if self.pp is not None and self.cfg.pp_on_logits:
            logits = logits + self.pp
        return h, logits

    __call__ = forward

    def predict(self, x) -> np.ndarray:
        return self.forward(x)[1].data.argmax(axis=-1)

    # -- parameter views ------------------------------------------------------

    def named_tensors(self) -> dict[str, Tensor]:
        out: dict[str, Tensor] = {}
        for mod in (self.g_fe, self.g_hd, self.p_fe, self.p_hd):
            if mod is not None:
                for p in mod.parameters():
                    out[p.name] = p
        if self.pp is not None:
            out["pp"] = self.pp
        return out

    def parameters(self) -> list[Tensor]:
        return list(self.named_tensors().values())

    def state(self) -> dict[str, np.ndarray]:
        return {k: t.data.copy() for k, t in self.named_tensors().items()}

    def load_state(self, state: dict[str, np.ndarray], strict: bool = False) -> None:
        named = self.named_tensors()
        if strict and set(state) != set(named):
            raise ParameterError(f"state keys {sorted(state)} do not match model keys {sorted(named)}")
        for k, v in state.items():
            if k not in named:
                raise ParameterError(f"unknown tensor {k!r}")
            if np.shape(v) != named[k].shape:
                raise DimensionError(f"{k}: shape {np.shape(v)} does not match {named[k].shape}")
            named[k].data = np.array(v, dtype=np.float64)

    def set_global_trainable(self, flag: bool) -> None:
        for k, t in self.named_tensors().items():
            if k.startswith(GLOBAL_PREFIXES):
                t.requires_grad = flag


def is_global(name: str) -> bool:
    return name.startswith(GLOBAL_PREFIXES)


def split_params(model: SplitModel) -> tuple[dict[str, np.ndarray], dict[str, np.ndarray]]:
    """Copies of the shared part ``{g_fe, g_hd}`` and the private part ``{p_fe, p_hd, pp}``."""
    state = model.state()
    glob = {k: v for k, v in state.items() if is_global(k)}
    pers = {k: v for k, v in state.items() if not is_global(k)}
    return glob, pers


def evaluate(model: SplitModel, data: LabeledDataset) -> tuple[float, float]:
    """(mean cross-entropy, accuracy) on ``data``."""
    if len(data) == 0:
        return float("nan"), float("nan")
    _, logits = model(data.x)
    loss = float(ag.cross_entropy(logits, data.y).data)
    acc = float((logits.data.argmax(axis=1) == data.y).mean())
    return loss, acc


def local_train(
    model: SplitModel,
    data: LabeledDataset,
    epochs: int,
    lr: float,
    rng: np.random.Generator,
    batch_size: int = 16,
    train_global: bool = True,
) -> list[float]:
    """Mini-batch SGD on cross-entropy; returns the mean loss of each epoch.

    Batches are drawn from a fresh permutation per epoch. With
    ``train_global=False`` the shared submodules are frozen.
    """
    if len(data) == 0:
        raise ParameterError("cannot train on an empty dataset")
    if epochs < 1:
        raise ParameterError(f"need at least one local epoch, got {epochs}")
    if batch_size < 1:
        raise ParameterError("batch_size must be positive")
    if not train_global:
        model.set_global_trainable(False)
    try:
        params = [p for p in model.parameters() if p.requires_grad]
        trace = []
        n = len(data)
        for _ in range(epochs):
            order = rng.permutation(n)
            total = 0.0
            for start in range(0, n, batch_size):
                batch = order[start : start + batch_size]
                _, logits = model(data.x[batch])
                loss = ag.cross_entropy(logits, data.y[batch])
                grads = ag.grad(loss, params)
                sgd_step(params, grads, lr)
                total += float(loss.data) * batch.size
            trace.append(total / n)
        return trace
    finally:
        model.set_global_trainable(True)
