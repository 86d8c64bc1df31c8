"""The two training regimes under comparison: centralized training on pooled
data, and synchronous federated rounds where only model parameters are fused.

Determinism contract: the global init comes from cfg.seed, and every epoch
shuffle draws from the stream (cfg.seed, round_index, client_id). Clients may
train concurrently; aggregation always reduces updates in canonical
client-id order, so results are independent of scheduling and identical
between in-process and wire execution.
"""

from __future__ import annotations

import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np

from . import nn
from .data import Dataset
from .seeds import seed_stream


class FusionError(ValueError):
    """Invalid update set handed to the parameter fuser."""


class EmptyUpdatesError(FusionError):
    pass


class ArchMismatchError(FusionError):
    pass


class RoundFailedError(RuntimeError):
    """A client failed during a federated round."""

    def __init__(self, round_index: int, client_id: str, cause: BaseException):
        super().__init__(f"round {round_index}: client {client_id!r} failed: {cause}")
        self.round_index = round_index
        self.client_id = client_id


@dataclass(frozen=True)
class RoundConfig:
    """Hyperparameters shared by both regimes."""

    rounds: int = 20
    local_epochs: int = 1
    batch_size: int = 32
    lr: float = 0.01
    seed: int = 0
    uniform_weighting: bool = False   # fuse with equal weights instead of sample counts

    def __post_init__(self):
        if self.rounds < 1 or self.local_epochs < 1 or self.batch_size < 1:
            raise ValueError("rounds, local_epochs and batch_size must be >= 1")
        # lr = 0 is allowed: it turns training into a bit-exact identity,
        # which the contract tests rely on.
        if self.lr < 0:
            raise ValueError(f"lr must be >= 0, got {self.lr}")


@dataclass
class ClientState:
    """One participant: an id and its immutable training split."""

    client_id: str
    dataset: Dataset
    sample_count: int = 0
    _arrays: tuple[np.ndarray, np.ndarray] | None = field(
        default=None, init=False, repr=False, compare=False)

    def __post_init__(self):
        if not self.client_id:
            raise ValueError("client_id must be non-empty")
        if self.sample_count == 0:
            self.sample_count = len(self.dataset)
        if self.sample_count != len(self.dataset):
            raise ValueError(
                f"sample_count {self.sample_count} != dataset size {len(self.dataset)}")

    def arrays(self) -> tuple[np.ndarray, np.ndarray]:
        if self._arrays is None:
            self._arrays = self.dataset.arrays()
        return self._arrays


@dataclass(frozen=True)
class RoundReport:
    """Telemetry for one synchronous round."""

    round_index: int
    client_stats: tuple[tuple[str, float, int], ...]  # (client_id, final loss, samples)
    global_checksum: int
    wall_time_s: float
    traffic_bytes: int  # parameter payload moved this round (up + down, all clients)


def round_traffic_bytes(params: nn.ModelParams, n_clients: int) -> int:
    """Parameter bytes exchanged per round: each client downloads and uploads
    one full float32 vector."""
    return 2 * 4 * params.values.size * n_clients


def local_train(params: nn.ModelParams, client: ClientState, cfg: RoundConfig,
                round_index: int = 0) -> tuple[nn.ModelParams, int, float]:
    """cfg.local_epochs epochs of shuffled mini-batch SGD from ``params``.

    Returns (new params, sample count, mean loss over the final epoch).
    Deterministic given (params, client, cfg, round_index).
    """
    x, y = client.arrays()
    n = x.shape[0]
    rng = seed_stream(cfg.seed, round_index, client.client_id)
    values = params.values.copy()
    lr = np.float32(cfg.lr)
    epoch_loss = float("nan")
    for _ in range(cfg.local_epochs):
        order = rng.permutation(n)
        total = 0.0
        for start in range(0, n, cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            loss, grads = nn.loss_and_grad_values(params.arch, values, x[idx], y[idx])
            if cfg.lr != 0:
                values -= lr * grads
            total += loss * idx.size
        epoch_loss = total / n
    return nn.ModelParams(params.arch, values), client.sample_count, epoch_loss


def fedavg(updates: list[tuple[nn.ModelParams, int]],
           uniform: bool = False) -> nn.ModelParams:
    """Sample-count-weighted elementwise mean of parameter vectors."""
    if not updates:
        raise EmptyUpdatesError("no updates to fuse")
    arch = updates[0][0].arch
    for p, count in updates:
        if p.arch != arch:
            raise ArchMismatchError(
                f"cannot fuse {p.arch.to_text()!r} with {arch.to_text()!r}")
        if count < 1:
            raise FusionError(f"sample counts must be >= 1, got {count}")
    if uniform:
        weights = [1.0 / len(updates)] * len(updates)
    else:
        total = float(sum(count for _, count in updates))
        weights = [count / total for _, count in updates]
    acc = np.zeros(arch.param_count(), dtype=np.float64)
    for (p, _), w in zip(updates, weights):
        acc += w * p.values.astype(np.float64)
    return nn.ModelParams(arch, acc.astype(np.float32))


def run_federated(clients: list[ClientState], cfg: RoundConfig,
                  arch: nn.ArchDescriptor | None = None,
                  jobs: int = 1) -> tuple[nn.ModelParams, list[RoundReport]]:
    """Synchronous full-participation rounds: broadcast, local train, fuse."""
    if not clients:
        raise ValueError("need at least one client")
    ids = [c.client_id for c in clients]
    if len(set(ids)) != len(ids):
        raise ValueError(f"duplicate client ids: {sorted(ids)}")
    ordered = sorted(clients, key=lambda c: c.client_id)
    arch = arch or nn.default_arch()
    global_params = nn.init_params(arch, cfg.seed)
    reports: list[RoundReport] = []
    for r in range(cfg.rounds):
        t0 = time.perf_counter()

        def train_one(i: int):
            try:
                return local_train(global_params, ordered[i], cfg, round_index=r)
            except Exception as e:
                raise RoundFailedError(r, ordered[i].client_id, e) from e

        if jobs > 1:
            with ThreadPoolExecutor(max_workers=jobs) as pool:
                results = list(pool.map(train_one, range(len(ordered))))
        else:
            results = [train_one(i) for i in range(len(ordered))]
        global_params = fedavg([(p, count) for p, count, _ in results],
                               uniform=cfg.uniform_weighting)
        reports.append(RoundReport(
            round_index=r,
            client_stats=tuple((c.client_id, loss, count)
                               for c, (_, count, loss) in zip(ordered, results)),
            global_checksum=nn.params_checksum(global_params),
            wall_time_s=time.perf_counter() - t0,
            traffic_bytes=round_traffic_bytes(global_params, len(ordered)),
        ))
    return global_params, reports


def merge_datasets(datasets: list[Dataset]) -> Dataset:
    """Pool datasets in canonical name order (permutation-invariant)."""
    if not datasets:
        raise ValueError("need at least one dataset")
    ordered = sorted(datasets, key=lambda d: d.name)
    merged_id = "+".join(d.name for d in ordered)
    items: list = []
    for d in ordered:
        items.extend(d.items)
    return Dataset(merged_id, tuple(items), "train")


def run_centralized(datasets: list[Dataset], cfg: RoundConfig,
                    arch: nn.ArchDescriptor | None = None) -> nn.ModelParams:
    """Baseline regime: pool all raw data, train rounds*local_epochs epochs.

    With a single dataset this is exactly ``local_train`` for the same number
    of epochs (shared shuffle stream), making the regimes directly comparable.
    """
    merged = merge_datasets(datasets)
    arch = arch or nn.default_arch()
    client = ClientState(merged.name, merged)
    epochs_cfg = replace(cfg, rounds=1, local_epochs=cfg.rounds * cfg.local_epochs)
    params0 = nn.init_params(arch, cfg.seed)
    params, _, _ = local_train(params0, client, epochs_cfg, round_index=0)
    return params
