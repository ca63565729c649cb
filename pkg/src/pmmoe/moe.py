"""Gated mixtures over every client's converged private modules.

After pre-training, the private parts of all clients are frozen into pools.
Each client then trains small gating networks that, per input, pick the
top-k pool entries and mix them: personal vectors are mixed as parameters,
personal extractors and heads are mixed through their outputs. Only the
gates learn; the shared backbone and all pool entries stay fixed.
"""

from __future__ import annotations

import csv
import hashlib
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from pmmoe.datagen import LabeledDataset
from pmmoe.energy import EnergyConfig, EnergyReport, denoise
from pmmoe.errors import DimensionError, ParameterError
from pmmoe.numerics import MLP, Tensor, sgd_step
from pmmoe.numerics import autograd as ag
from pmmoe.splitmodel import SplitConfig, split_params


@dataclass(frozen=True)
class MoEConfig:
    k: int
    lr: float = 0.5
    epochs: int = 50
    gamma: float = 0.2
    T: float = 1.0
    batch_size: int = 16
    gate_hidden: tuple[int, ...] = (128, 256, 128)
    gate_activation: str = "leaky_relu"
    gate_init: str = "orthogonal"
    slope: float = 0.01
    fallback: bool = True

    def __post_init__(self):
        if self.k < 1:
            raise ParameterError(f"top-k needs k >= 1, got {self.k}")
        if self.lr < 0 or self.epochs < 0 or self.batch_size < 1:
            raise ParameterError("lr and epochs must be non-negative, batch_size positive")
        if self.gate_activation not in ("relu", "leaky_relu"):
            raise ParameterError(f"gate activation must be relu or leaky_relu, got {self.gate_activation!r}")
        if self.gate_init not in ("orthogonal", "uniform"):
            raise ParameterError(f"gate init must be orthogonal or uniform, got {self.gate_init!r}")
        if any(h < 1 for h in self.gate_hidden):
            raise ParameterError(f"gate hidden widths must be positive, got {self.gate_hidden}")
        EnergyConfig(self.T, self.gamma)

    @property
    def energy(self) -> EnergyConfig:
        return EnergyConfig(self.T, self.gamma)


def default_k(M: int, S: float) -> int:
    """Half the clients under pure Dirichlet skew, all of them once data is shared."""
    return max(1, M // 2) if S == 0 else M


# -- frozen pools --------------------------------------------------------------


def _frozen(arr) -> np.ndarray:
    out = np.array(arr, dtype=np.float64)
    out.flags.writeable = False
    return out


def _frozen_mlp(sizes: Sequence[int], params: Mapping[str, np.ndarray], prefix: str, out_activation: str) -> MLP:
    net = MLP(sizes, activation="relu", out_activation=out_activation, init="zeros", name=prefix)
    for p in net.parameters():
        if p.name not in params:
            raise ParameterError(f"missing tensor {p.name!r}")
        if np.shape(params[p.name]) != p.shape:
            raise DimensionError(f"{p.name}: shape {np.shape(params[p.name])}, expected {p.shape}")
        p.data = _frozen(params[p.name])
        p.requires_grad = False
    return net


@dataclass(frozen=True)
class ExpertPool:
    """Read-only pools of private parameters, entry ``l`` owned by ``owners[l]``."""

    cfg: SplitConfig
    owners: tuple[int, ...]
    entries: tuple[Mapping[str, np.ndarray], ...]
    fe: tuple[MLP, ...] | None
    hd: tuple[MLP, ...] | None
    pp: np.ndarray | None  # [P, D]

    @property
    def size(self) -> int:
        return len(self.owners)

    @property
    def has_experts(self) -> bool:
        return self.fe is not None or self.hd is not None

    def tensors(self) -> dict[str, np.ndarray]:
        return {f"pool.{l}.{k}": v for l, e in enumerate(self.entries) for k, v in e.items()}


def build_pools(
    parts: Sequence[Mapping[str, np.ndarray] | None],
    cfg: SplitConfig,
    owners: Sequence[int] | None = None,
) -> ExpertPool:
    """Freeze the private parts of all clients, in client-id order."""
    if not parts:
        raise ParameterError("no private parts to pool")
    owners = tuple(range(len(parts))) if owners is None else tuple(owners)
    if len(owners) != len(parts):
        raise ParameterError("one owner id per pool entry")
    for l, p in enumerate(parts):
        if p is None:
            raise ParameterError(f"client {owners[l]} did not contribute its private part")
    keys = sorted(parts[0])
    for l, p in enumerate(parts):
        if sorted(p) != keys:
            raise ParameterError(f"entry {l} has tensors {sorted(p)}, expected {keys}")
        for k in keys:
            if np.shape(p[k]) != np.shape(parts[0][k]):
                raise DimensionError(f"entry {l} {k}: shape {np.shape(p[k])} vs {np.shape(parts[0][k])}")
    entries = tuple({k: _frozen(p[k]) for k in keys} for p in parts)
    fe_sizes = [cfg.U, cfg.fe_hidden, cfg.D]
    fe = tuple(_frozen_mlp(fe_sizes, e, "p_fe", cfg.fe_out_activation) for e in entries) if cfg.enable_fp else None
    hd = tuple(_frozen_mlp([cfg.D, cfg.C], e, "p_hd", "none") for e in entries) if cfg.enable_sp else None
    pp = _frozen(np.stack([e["pp"] for e in entries])) if cfg.enable_pp else None
    return ExpertPool(cfg, owners, entries, fe, hd, pp)


def pool_digest(pool: ExpertPool) -> dict[str, str]:
    return {k: hashlib.sha256(v.tobytes()).hexdigest() for k, v in pool.tensors().items()}


# -- gating ------------------------------------------------------------------------


def select_topk(logits: np.ndarray, active: np.ndarray | None, k: int) -> np.ndarray:
    """Row-wise mask of the ``k`` largest active logits; ties go to the lower index."""
    z = np.atleast_2d(np.asarray(logits, dtype=np.float64))
    act = np.ones(z.shape[-1], dtype=bool) if active is None else np.asarray(active, dtype=bool)
    act = np.broadcast_to(act, z.shape)
    if not act.any(axis=-1).all():
        raise ParameterError("gate mask has no active expert")
    if k < 1:
        raise ParameterError(f"top-k needs k >= 1, got {k}")
    masked = np.where(act, z, -np.inf)
    order = np.argsort(-masked, axis=-1, kind="stable")[:, :k]
    sel = np.zeros(z.shape, dtype=bool)
    np.put_along_axis(sel, order, True, axis=-1)
    return sel & act


@dataclass
class GateOutput:
    weights: np.ndarray  # [P] or [n, P]
    selected: np.ndarray  # bool, same shape


class GateNetwork:
    """Perceptron from the raw input to one logit per pool entry."""

    def __init__(self, U: int, P: int, k: int, rng: np.random.Generator, cfg: MoEConfig | None = None, name="gate"):
        cfg = cfg or MoEConfig(k=k)
        self.P = P
        self.k = k
        self.net = MLP(
            [U, *cfg.gate_hidden, P],
            rng,
            activation=cfg.gate_activation,
            out_activation="none",
            slope=cfg.slope,
            init=cfg.gate_init,
            name=name,
        )

    def parameters(self) -> list[Tensor]:
        return self.net.parameters()

    def state(self) -> dict[str, np.ndarray]:
        return {p.name: p.data.copy() for p in self.parameters()}

    def __call__(self, x: Tensor, active: np.ndarray | None = None) -> tuple[Tensor, np.ndarray]:
        """Top-k mixture weights ``[n, P]`` (on the graph) and the selection mask."""
        logits = self.net(x)
        sel = select_topk(logits.data, active, self.k)
        if logits.data.ndim == 1:
            sel = sel[0]
        return ag.masked_softmax(logits, sel), sel


def gate_forward(gate: GateNetwork, x, active_mask=None) -> GateOutput:
    x = x if isinstance(x, Tensor) else Tensor(x)
    alpha, sel = gate(x, active_mask)
    return GateOutput(alpha.data, sel)


def mpp_mix(pp_pool: np.ndarray, alpha) -> np.ndarray:
    """``sum_l alpha_l * PP_l`` for weights ``[P]`` or ``[n, P]``."""
    pp_pool = np.asarray(pp_pool, dtype=np.float64)
    alpha = np.asarray(alpha, dtype=np.float64)
    if alpha.shape[-1] != pp_pool.shape[0]:
        raise DimensionError(f"{alpha.shape[-1]} weights for a pool of {pp_pool.shape[0]} vectors")
    return alpha @ pp_pool


def mpe_mix(experts: Sequence, alpha, x) -> np.ndarray:
    """``sum_l alpha_l * expert_l(x)``; experts are callables on arrays or Tensors."""
    alpha = np.asarray(alpha, dtype=np.float64)
    if alpha.shape[-1] != len(experts):
        raise DimensionError(f"{alpha.shape[-1]} weights for {len(experts)} experts")
    single = alpha.ndim == 1
    a2 = alpha[None, :] if single else alpha
    outs = []
    for e in experts:
        y = e(Tensor(x) if not isinstance(x, Tensor) else x)
        outs.append(Tensor(np.atleast_2d(y.data if isinstance(y, Tensor) else np.asarray(y, dtype=np.float64))))
    mixed = ag.mix(Tensor(a2), outs).data
    return mixed[0] if single else mixed


# -- gated client model -------------------------------------------------------------


@dataclass
class Features:
    """Frozen-module outputs for a fixed set of inputs."""

    x: np.ndarray
    gf: np.ndarray
    fe: list[np.ndarray] | None

    def rows(self, idx) -> "Features":
        return Features(self.x[idx], self.gf[idx], None if self.fe is None else [f[idx] for f in self.fe])


class GatedModel:
    """Client ``anchor``'s model with private modules replaced by gated pool mixtures."""

    def __init__(
        self,
        W_g: Mapping[str, np.ndarray],
        pool: ExpertPool,
        anchor: int,
        cfg: MoEConfig,
        rng: np.random.Generator,
    ):
        scfg = pool.cfg
        if not 0 <= anchor < pool.size:
            raise ParameterError(f"anchor {anchor} outside pool of size {pool.size}")
        self.scfg = scfg
        self.pool = pool
        self.anchor = anchor
        self.cfg = cfg
        self.g_fe = _frozen_mlp([scfg.U, scfg.fe_hidden, scfg.D], W_g, "g_fe", scfg.fe_out_activation)
        self.g_hd = _frozen_mlp([scfg.D, scfg.C], W_g, "g_hd", "none")
        k = min(cfg.k, pool.size)
        self.pe_gate = GateNetwork(scfg.U, pool.size, k, rng, cfg, name="gate_pe") if pool.has_experts else None
        self.pp_gate = GateNetwork(scfg.U, pool.size, k, rng, cfg, name="gate_pp") if pool.pp is not None else None
        self.kept_pe = np.ones(pool.size, dtype=bool)
        self.kept_pp = np.ones(pool.size, dtype=bool)
        self.use_local = False

    @property
    def gates(self) -> list[GateNetwork]:
        return [g for g in (self.pe_gate, self.pp_gate) if g is not None]

    def parameters(self) -> list[Tensor]:
        return [p for g in self.gates for p in g.parameters()]

    def gate_state(self) -> dict[str, np.ndarray]:
        out = {}
        for g in self.gates:
            out.update(g.state())
        return out

    def load_gate_state(self, state: Mapping[str, np.ndarray]) -> None:
        for p in self.parameters():
            p.data = np.array(state[p.name], dtype=np.float64)

    def export_state(self) -> dict[str, np.ndarray]:
        """Gate weights plus the masks and fallback flag, enough to rebuild predictions."""
        out = self.gate_state()
        out["kept_pe"] = self.kept_pe.astype(np.float64)
        out["kept_pp"] = self.kept_pp.astype(np.float64)
        out["use_local"] = np.array([float(self.use_local)])
        return out

    def restore_state(self, state: Mapping[str, np.ndarray]) -> None:
        self.load_gate_state(state)
        self.kept_pe = np.asarray(state["kept_pe"]) > 0
        self.kept_pp = np.asarray(state["kept_pp"]) > 0
        self.use_local = bool(state["use_local"][0])

    def backbone_tensors(self) -> dict[str, np.ndarray]:
        return {p.name: p.data for net in (self.g_fe, self.g_hd) for p in net.parameters()}

    def features(self, x) -> Features:
        xt = Tensor(np.atleast_2d(np.asarray(x, dtype=np.float64)))
        gf = self.g_fe(xt).data
        fe = [e(xt).data for e in self.pool.fe] if self.pool.fe is not None else None
        return Features(xt.data, gf, fe)

    def _one_hot(self, n: int) -> Tensor:
        a = np.zeros((n, self.pool.size))
        a[:, self.anchor] = 1.0
        return Tensor(a)

    def logits(self, feats: Features, clamp_local: bool | None = None) -> Tensor:
        """Gated forward on precomputed frozen features.

        ``clamp_local`` replaces both gates with a one-hot on the anchor's
        own entry, which reproduces the pre-trained client model. When left
        as None it follows ``use_local``, set by the fine-tuning fallback.
        """
        if clamp_local is None:
            clamp_local = self.use_local
        pool, scfg = self.pool, self.scfg
        n = feats.x.shape[0]
        x = Tensor(feats.x)
        h = Tensor(feats.gf)
        alpha_pe = alpha_pp = None
        if self.pe_gate is not None:
            alpha_pe = self._one_hot(n) if clamp_local else self.pe_gate(x, self.kept_pe)[0]
        if self.pp_gate is not None:
            alpha_pp = self._one_hot(n) if clamp_local else self.pp_gate(x, self.kept_pp)[0]
        if pool.fe is not None:
            h = h + ag.mix(alpha_pe, [Tensor(f) for f in feats.fe])
        pp_mix = ag.matmul(alpha_pp, Tensor(pool.pp)) if alpha_pp is not None else None
        if pp_mix is not None and not scfg.pp_on_logits:
            h = h + pp_mix
        out = self.g_hd(h)
        if pool.hd is not None:
            cols = alpha_pe.data.any(axis=0)
            zeros = Tensor(np.zeros((n, scfg.C)))
            out = out + ag.mix(alpha_pe, [hd(h) if cols[l] else zeros for l, hd in enumerate(pool.hd)])
        if pp_mix is not None and scfg.pp_on_logits:
            out = out + pp_mix
        return out

    def local_representations(self, feats: Features) -> list[np.ndarray]:
        """Per pool entry, the output used to score it against the anchor."""
        pool = self.pool
        if pool.fe is not None:
            return feats.fe
        h = feats.gf
        if pool.pp is not None and not self.scfg.pp_on_logits:
            h = h + pool.pp[self.anchor]
        ht = Tensor(h)
        return [hd(ht).data for hd in pool.hd]

    def refresh_masks(self, feats: Features) -> tuple[EnergyReport | None, EnergyReport | None]:
        ecfg = self.cfg.energy
        rep_pe = rep_pp = None
        if self.pe_gate is not None:
            rep_pe = denoise(self.local_representations(feats), self.anchor, ecfg)
            self.kept_pe = rep_pe.kept
        if self.pp_gate is not None:
            rep_pp = denoise(list(self.pool.pp), self.anchor, ecfg)
            self.kept_pp = rep_pp.kept
        return rep_pe, rep_pp

    def loss(self, feats: Features, y: np.ndarray, clamp_local: bool | None = None) -> float:
        return float(ag.cross_entropy(self.logits(feats, clamp_local), y).data)

    def accuracy(self, feats: Features, y: np.ndarray, clamp_local: bool | None = None) -> float:
        if feats.x.shape[0] == 0:
            return float("nan")
        return float((self.logits(feats, clamp_local).data.argmax(axis=1) == y).mean())


@dataclass
class FinetuneRecord:
    epoch: int
    loss: float
    test_accuracy: float
    kept_expert_count: int


@dataclass
class FinetuneResult:
    client_id: int
    model: GatedModel
    history: list[FinetuneRecord] = field(default_factory=list)
    report_pe: EnergyReport | None = None
    report_pp: EnergyReport | None = None
    fell_back: bool = False
    final_accuracy: float = float("nan")


def _kept_count(gm: GatedModel) -> int:
    return int((gm.kept_pe if gm.pe_gate is not None else gm.kept_pp).sum())


def finetune_client(
    gm: GatedModel,
    train: LabeledDataset,
    test: LabeledDataset,
    rng: np.random.Generator,
    client_id: int | None = None,
) -> FinetuneResult:
    """Train the gates of one client.

    Each epoch rescores the pool on the local training set, drops the
    lowest-confidence foreign entries, then runs mini-batch SGD with the
    gate learning rate. Row 0 of the history is the untrained evaluation.

    With ``cfg.fallback`` the trained gates are kept only if they reach a
    lower training loss than the one-hot local gate; otherwise the client
    falls back to its own pre-trained modules. The choice never looks at
    the test set.
    """
    cfg = gm.cfg
    if len(train) == 0:
        raise ParameterError("cannot fine-tune on an empty dataset")
    res = FinetuneResult(gm.anchor if client_id is None else client_id, gm)
    tr = gm.features(train.x)
    te = gm.features(test.x)
    res.report_pe, res.report_pp = gm.refresh_masks(tr)
    params = gm.parameters()
    gm.use_local = False
    res.history.append(FinetuneRecord(0, gm.loss(tr, train.y), gm.accuracy(te, test.y), _kept_count(gm)))
    n = len(train)
    for epoch in range(1, cfg.epochs + 1):
        res.report_pe, res.report_pp = gm.refresh_masks(tr)
        order = rng.permutation(n)
        total = 0.0
        for start in range(0, n, cfg.batch_size):
            idx = order[start : start + cfg.batch_size]
            loss = ag.cross_entropy(gm.logits(tr.rows(idx)), train.y[idx])
            sgd_step(params, ag.grad(loss, params), cfg.lr)
            total += float(loss.data) * idx.size
        res.history.append(FinetuneRecord(epoch, total / n, gm.accuracy(te, test.y), _kept_count(gm)))
    if cfg.fallback and gm.loss(tr, train.y, True) <= gm.loss(tr, train.y, False):
        gm.use_local = True
        res.fell_back = True
    res.final_accuracy = gm.accuracy(te, test.y)
    return res


def write_finetune_csv(path, results: Sequence[FinetuneResult]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["client_id", "epoch", "loss", "test_accuracy", "kept_expert_count"])
        for r in results:
            for rec in r.history:
                w.writerow([r.client_id, rec.epoch, repr(rec.loss), repr(rec.test_accuracy), rec.kept_expert_count])


def private_parts(models) -> list[dict[str, np.ndarray]]:
    return [split_params(m)[1] for m in models]
