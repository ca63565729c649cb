"""Pre-training rounds: local epochs, upload of shared parts, weighted averaging."""

from __future__ import annotations

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from pmmoe.datagen import LabeledDataset
from pmmoe.errors import DimensionError, ParameterError
from pmmoe.metrics import a_total
from pmmoe.splitmodel import SplitConfig, SplitModel, evaluate, local_train, split_params

log = logging.getLogger(__name__)

STRATEGIES = ("fedavg",)


@dataclass
class ClientState:
    id: int
    model: SplitModel
    train: LabeledDataset
    test: LabeledDataset
    rng: np.random.Generator

    @property
    def n_train(self) -> int:
        return len(self.train)

    @property
    def n_test(self) -> int:
        return len(self.test)


@dataclass
class ServerState:
    W_g: dict[str, np.ndarray]
    round: int = 0
    strategy: str = "fedavg"

    def __post_init__(self):
        if self.strategy not in STRATEGIES:
            raise ParameterError(f"unknown aggregation strategy {self.strategy!r}")


@dataclass
class RoundMetrics:
    round: int
    train_loss: list[float]
    test_accuracy: list[float]
    a_total: float
    mean_train_loss: float = field(init=False)

    def __post_init__(self):
        self.mean_train_loss = float(np.mean(self.train_loss))


def aggregate(uploads: Sequence[tuple[int, dict[str, np.ndarray]]]) -> dict[str, np.ndarray]:
    """Sample-weighted mean ``sum_j (N_j / N) * W_j`` of the uploaded shared parts.

    Terms are summed in upload order, so the result is reproducible to the bit.
    """
    if not uploads:
        raise ParameterError("nothing to aggregate")
    total = sum(n for n, _ in uploads)
    if any(n <= 0 for n, _ in uploads) or total <= 0:
        raise ParameterError("every client must contribute a positive sample count")
    keys = list(uploads[0][1])
    for n, part in uploads:
        if list(part) != keys:
            raise DimensionError(f"upload keys {sorted(part)} differ from {sorted(keys)}")
        for k in keys:
            if np.shape(part[k]) != np.shape(uploads[0][1][k]):
                raise DimensionError(f"{k}: shape {np.shape(part[k])} vs {np.shape(uploads[0][1][k])}")
    out = {}
    for k in keys:
        acc = np.zeros_like(uploads[0][1][k], dtype=np.float64)
        for n, part in uploads:
            acc = acc + (n / total) * part[k]
        out[k] = acc
    return out


def make_clients(
    cfg: SplitConfig,
    splits: Sequence[tuple[LabeledDataset, LabeledDataset]],
    seed: int,
) -> tuple[ServerState, list[ClientState]]:
    """Clients share one global init (seeded by ``seed``) and get per-client private inits."""
    clients = []
    for j, (train, test) in enumerate(splits):
        model = SplitModel(cfg, np.random.default_rng([seed, 10]), np.random.default_rng([seed, 11, j]))
        clients.append(ClientState(j, model, train, test, np.random.default_rng([seed, 12, j])))
    server = ServerState(split_params(clients[0].model)[0])
    return server, clients


def evaluate_clients(clients: Sequence[ClientState]) -> tuple[list[float], float]:
    accs = [evaluate(c.model, c.test)[1] for c in clients]
    pairs = [(c.n_test, a) for c, a in zip(clients, accs) if c.n_test > 0]
    return accs, a_total(pairs)


def _client_update(client: ClientState, W_g: dict[str, np.ndarray], epochs: int, lr: float, batch_size: int):
    client.model.load_state(W_g)
    trace = local_train(client.model, client.train, epochs, lr, client.rng, batch_size=batch_size)
    return trace[-1], split_params(client.model)[0]


def run_round(
    server: ServerState,
    clients: Sequence[ClientState],
    epochs: int,
    lr: float,
    batch_size: int = 16,
    workers: int = 1,
) -> RoundMetrics:
    """One synchronous round; updates ``server`` and ``clients`` in place.

    Every client starts from the same ``W_g`` snapshot and its upload is
    staged until all clients finish, so no client sees another's update
    within the round. After aggregation the new ``W_g`` is broadcast and
    test accuracy is measured on (new ``W_g`` + private part).
    """
    W_g = server.W_g
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(lambda c: _client_update(c, W_g, epochs, lr, batch_size), clients))
    else:
        results = [_client_update(c, W_g, epochs, lr, batch_size) for c in clients]
    uploads = [(c.n_train, part) for c, (_, part) in zip(clients, results)]
    server.W_g = aggregate(uploads)
    server.round += 1
    for c in clients:
        c.model.load_state(server.W_g)
    accs, total = evaluate_clients(clients)
    return RoundMetrics(server.round, [loss for loss, _ in results], accs, total)


def pretrain(
    server: ServerState,
    clients: Sequence[ClientState],
    rounds: int,
    epochs: int,
    lr: float,
    batch_size: int = 16,
    workers: int = 1,
) -> list[RoundMetrics]:
    """Run ``rounds`` rounds. On return every client holds the final ``W_g``
    plus its converged private part."""
    if rounds < 1:
        raise ParameterError(f"need at least one global round, got {rounds}")
    history = []
    for r in range(rounds):
        m = run_round(server, clients, epochs, lr, batch_size, workers)
        history.append(m)
        if (r + 1) % 50 == 0 or r + 1 == rounds:
            log.info("round %d: loss %.4f a_total %.4f", m.round, m.mean_train_loss, m.a_total)
    return history
