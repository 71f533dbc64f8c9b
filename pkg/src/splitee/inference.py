"""Entropy-thresholded collaborative inference and the threshold sweep.

The exit rule is "exit at the client iff prediction entropy H < tau", with
H in nats.  At tau = 0 every sample goes to the server; once tau exceeds
ln(K) every sample exits at the client.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import ops
from .data import Dataset
from .errors import ConfigError, ShapeError
from .model import ClientModel, ServerModel
from .tensor import Tensor


@dataclass(frozen=True)
class ExitDecisionConfig:
    """Exit iff H < tau_exit (entropy in nats)."""

    tau_exit: float

    def __post_init__(self):
        if self.tau_exit < 0:
            raise ConfigError("tau_exit must be non-negative")


@dataclass(frozen=True)
class SweepPoint:
    tau: float
    accuracy: float
    client_ratio: float
    avg_entropy: float

    @property
    def server_ratio(self) -> float:
        return 1.0 - self.client_ratio


def entropy(p: np.ndarray) -> float:
    """Shannon entropy in nats of one probability vector; 0*log(0) = 0."""
    p = np.asarray(p, dtype=np.float64)
    if p.ndim != 1 or p.size < 1:
        raise ShapeError("entropy expects a 1-D probability vector")
    if p.min() < 0 or abs(p.sum() - 1.0) > 1e-9:
        raise ConfigError("entropy: input is not a probability vector")
    nz = p[p > 0]
    return float(-(nz * np.log(nz)).sum())


def _entropy_rows(p: np.ndarray) -> np.ndarray:
    q = np.where(p > 0, p, 1.0)
    return -(p * np.log(q)).sum(axis=1)


@dataclass
class _Cached:
    """Per-sample quantities that do not depend on the threshold."""

    client_pred: np.ndarray
    server_pred: np.ndarray
    entropies: np.ndarray
    labels: np.ndarray


def _evaluate_paths(
    client: ClientModel, server: ServerModel, ds: Dataset, batch_size: int = 256
) -> _Cached:
    cpreds, spreds, ents = [], [], []
    for lo in range(0, len(ds), batch_size):
        idx = np.arange(lo, min(lo + batch_size, len(ds)))
        h, logits_c = client.forward(Tensor(ds.normalized(idx)), training=False)
        probs = ops.softmax(logits_c.values)
        cpreds.append(probs.argmax(axis=1))
        ents.append(_entropy_rows(probs))
        logits_s = server.forward(h.detach(), training=False, entry=client.end_layer)
        spreds.append(logits_s.values.argmax(axis=1))
    return _Cached(
        client_pred=np.concatenate(cpreds),
        server_pred=np.concatenate(spreds),
        entropies=np.concatenate(ents),
        labels=ds.labels,
    )


def infer_one(
    client: ClientModel, server: ServerModel, x: np.ndarray, cfg: ExitDecisionConfig
) -> tuple[int, str, float]:
    """Classify one sample; returns (prediction, exited_at, entropy).

    ``exited_at`` is "client" when H < tau_exit, else "server".  Argmax ties
    break toward the lowest class index.
    """
    h, logits_c = client.forward(Tensor(x[None]), training=False)
    probs = ops.softmax(logits_c.values)[0]
    h_val = entropy(probs)
    if h_val < cfg.tau_exit:
        return int(probs.argmax()), "client", h_val
    logits_s = server.forward(h.detach(), training=False, entry=client.end_layer)
    return int(logits_s.values[0].argmax()), "server", h_val


def default_grid(start: float = 0.0, end: float = 4.0, step: float = 0.05) -> list[float]:
    n = int(round((end - start) / step)) + 1
    return [round(start + i * step, 10) for i in range(n)]


def sweep(
    client: ClientModel, server: ServerModel, ds: Dataset, grid: list[float]
) -> list[SweepPoint]:
    """One SweepPoint per threshold; client-side forwards are computed once
    and the per-tau decision is a pure function of the cached entropies."""
    if not grid:
        raise ConfigError("sweep: empty threshold grid")
    if any(b < a for a, b in zip(grid, grid[1:])):
        raise ConfigError("sweep: grid must be sorted ascending")
    cached = _evaluate_paths(client, server, ds)
    n = len(cached.labels)
    avg_h = float(cached.entropies.mean())
    points = []
    for tau in grid:
        exit_mask = cached.entropies < tau
        pred = np.where(exit_mask, cached.client_pred, cached.server_pred)
        points.append(
            SweepPoint(
                tau=float(tau),
                accuracy=float((pred == cached.labels).mean()),
                client_ratio=float(exit_mask.sum() / n),
                avg_entropy=avg_h,
            )
        )
    return points


def sweep_csv(points: list[SweepPoint]) -> str:
    lines = ["tau,accuracy,client_ratio,server_ratio,avg_entropy"]
    for p in points:
        lines.append(
            f"{p.tau:.6g},{p.accuracy:.10g},{p.client_ratio:.10g},"
            f"{p.server_ratio:.10g},{p.avg_entropy:.10g}"
        )
    return "\n".join(lines) + "\n"
