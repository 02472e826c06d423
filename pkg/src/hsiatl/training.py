"""Minibatch training, evaluation, and the active-learning driver."""

from __future__ import annotations

import dataclasses
import time
from dataclasses import dataclass

import numpy as np

from hsiatl import autodiff as ad
from hsiatl.autodiff import Tape
from hsiatl.data import HsiCube, LabelMap, SplitManifest, extract_windows_batch
from hsiatl.metrics import MetricsReport, confusion, report
from hsiatl.model import SstModel, forward_batch, predict_probs, unfold
from hsiatl.optim import Adam
from hsiatl.queries import QueryConfig, al_round, query_pool


class NumericalError(RuntimeError):
    """Training loss became non-finite."""


@dataclass
class TrainConfig:
    epochs: int = 50
    batch_size: int = 56
    lr: float = 0.001
    decay: float = 1e-6
    decay_mode: str = "lr"
    seed: int = 0

    def __post_init__(self):
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")


class WindowBank:
    """Unfolded windows and 0-based targets for every labeled pixel.

    Extraction and unfolding happen once; training rounds and pool scoring
    then gather rows by flattened pixel index.
    """

    def __init__(self, cube: HsiCube, labels: LabelMap, window: int, subpatch: int):
        self.pixels = labels.labeled_indices()
        if self.pixels.size == 0:
            raise ValueError("label map has no labeled pixels")
        windows = extract_windows_batch(cube, self.pixels, window)
        self.features = unfold(windows, subpatch)
        self.targets = labels.labels.ravel()[self.pixels].astype(np.int64) - 1
        self._row = np.full(labels.labels.size, -1, dtype=np.int64)
        self._row[self.pixels] = np.arange(self.pixels.size)

    def take(self, pixel_indices: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        rows = self._row[np.asarray(pixel_indices)]
        if (rows < 0).any():
            raise ValueError("requested pixels that are not labeled")
        return self.features[rows], self.targets[rows]


def train_model(
    model: SstModel,
    features: np.ndarray,
    targets: np.ndarray,
    cfg: TrainConfig,
    log=None,
) -> list[float]:
    """Train in place; returns the mean loss per epoch.

    Shuffling and dropout draw from one generator seeded by cfg.seed, so the
    run is fully deterministic. Raises NumericalError on a non-finite loss.
    """
    rng = np.random.default_rng(cfg.seed)
    params = model.parameters()
    model.apply_freeze()
    optimizer = Adam(
        params, lr=cfg.lr, decay=cfg.decay, decay_mode=cfg.decay_mode
    )
    n = features.shape[0]
    history = []
    for epoch in range(cfg.epochs):
        order = rng.permutation(n)
        total = 0.0
        for start in range(0, n, cfg.batch_size):
            batch = order[start : start + cfg.batch_size]
            optimizer.zero_grad()
            with Tape() as tape:
                probs = forward_batch(model, features[batch], training=True, rng=rng)
                loss = ad.cross_entropy(probs, targets[batch])
            value = float(loss.data)
            if not np.isfinite(value):
                raise NumericalError(f"loss became {value} at epoch {epoch}")
            ad.backward(tape, loss)
            optimizer.step()
            total += value * batch.size
        history.append(total / n)
        if log is not None:
            log(epoch, history[-1])
    return history


def evaluate(
    model: SstModel, features: np.ndarray, target_classes: np.ndarray
) -> MetricsReport:
    """Score evaluation-mode predictions; target classes are 1-based."""
    probs = predict_probs(model, features)
    predicted = probs.argmax(axis=1) + 1
    matrix = confusion(predicted, np.asarray(target_classes), model.config.n_classes)
    return report(matrix)


def evaluate_pixels(model: SstModel, bank: WindowBank, pixels: np.ndarray) -> MetricsReport:
    features, targets = bank.take(pixels)
    return evaluate(model, features, targets + 1)


def run_active_learning(
    model: SstModel,
    cube: HsiCube,
    labels: LabelMap,
    manifest: SplitManifest,
    query_cfg: QueryConfig,
    rounds: int,
    train_cfg: TrainConfig,
    bank: WindowBank | None = None,
    round_query_sizes: list[int] | None = None,
) -> list[dict]:
    """Initial training plus ``rounds`` acquisition/retrain cycles.

    The model is warm-started across rounds: each cycle continues training
    the same parameters on the grown train set with a fresh optimizer.
    Returns one record per round (round 0 is the initial fit), each with the
    train size, queried pixels, test metrics, and wall-clock seconds.

    Args:
        round_query_sizes: optional per-round override of
            query_cfg.query_size, e.g. to hit an exact label budget.
    """
    if rounds < 0:
        raise ValueError("rounds must be >= 0")
    if round_query_sizes is not None and len(round_query_sizes) != rounds:
        raise ValueError("round_query_sizes must have one entry per round")
    if bank is None:
        bank = WindowBank(cube, labels, model.config.window, model.config.subpatch)
    rng = np.random.default_rng(train_cfg.seed)
    train = manifest.train.copy()
    pool = manifest.pool.copy()
    records = []

    def fit_and_score(round_idx: int, queried: np.ndarray) -> None:
        start = time.perf_counter()
        features, targets = bank.take(train)
        cfg = dataclasses.replace(train_cfg, seed=train_cfg.seed + round_idx)
        train_model(model, features, targets, cfg)
        scores = evaluate_pixels(model, bank, manifest.test)
        records.append(
            {
                "round": round_idx,
                "strategy": query_cfg.strategy,
                "train_size": int(train.size),
                "queried_indices": [int(i) for i in queried],
                "oa": scores.oa,
                "aa": scores.aa,
                "kappa": scores.kappa,
                "wall_seconds": time.perf_counter() - start,
            }
        )

    fit_and_score(0, np.zeros(0, dtype=np.int64))
    for round_idx in range(1, rounds + 1):
        if pool.size == 0:
            break
        cfg = query_cfg
        if round_query_sizes is not None:
            size = round_query_sizes[round_idx - 1]
            if size == 0:
                fit_and_score(round_idx, np.zeros(0, dtype=np.int64))
                continue
            cfg = dataclasses.replace(query_cfg, query_size=size)
        result = query_pool(
            model, cube, labels, pool, cfg,
            rng=rng, features=bank.take(pool)[0],
        )
        train, pool = al_round(train, pool, result.selected)
        fit_and_score(round_idx, result.selected)
    return records
