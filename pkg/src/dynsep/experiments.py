"""Desk-scale comparison experiments.

* dynamic model vs stand-alone models trained from scratch at the same
  ``(w, d)`` with the same step budget;
* TAC reweighting vs independent per-expert sigmoid gates;
* deeper-vs-wider comparison among subnetworks of similar MACs.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field

import numpy as np

from .deploy import CostTable, enumerate_costs
from .model import DESK, FullModelParams, ModelConfig, init_model
from .training import DataSpec, TrainConfig, evaluate_snr, make_test_set, train


@dataclass(frozen=True)
class ExperimentSpec:
    model: ModelConfig = DESK
    data: DataSpec = DataSpec(duration=0.5, batch_size=4)
    steps: int = 1200
    steps_per_epoch: int = 50
    seeds: tuple[int, ...] = (0, 1, 2)
    test_batches: int = 4
    test_seed: int = 2024

    def train_config(self, seed: int, dual: bool) -> TrainConfig:
        epochs = max(1, self.steps // self.steps_per_epoch)
        return TrainConfig(
            steps_per_epoch=self.steps_per_epoch, max_epochs=epochs, patience=epochs,
            val_batches=1, seed=seed, dual_objective=dual,
        )

    def test_items(self):
        return make_test_set(self.data, self.test_batches, self.test_seed)


def train_dynamic(spec: ExperimentSpec, seed: int, tac: bool = True) -> FullModelParams:
    params = init_model(spec.model.replace(tac=tac), seed=seed)
    return train(params, spec.data, spec.train_config(seed, dual=True)).params


def train_standalone(spec: ExperimentSpec, seed: int, w: int, d: int) -> FullModelParams:
    params = init_model(spec.model.replace(max_width=w, max_depth=d), seed=seed)
    return train(params, spec.data, spec.train_config(seed, dual=False)).params


def mean_snr(params: FullModelParams, items, w: int, d: int) -> float:
    return float(np.mean(evaluate_snr(params, items, w, d)))


@dataclass
class StandaloneComparison:
    configs: list[tuple[int, int]]
    dynamic: dict[tuple[int, int], list[float]] = field(default_factory=dict)
    standalone: dict[tuple[int, int], list[float]] = field(default_factory=dict)

    def margin(self, cfg: tuple[int, int]) -> float:
        """Mean extracted SNR minus mean stand-alone SNR (dB)."""
        return float(np.mean(self.dynamic[cfg]) - np.mean(self.standalone[cfg]))


def compare_standalone(spec: ExperimentSpec, dynamic_models: list[FullModelParams] | None = None,
                       configs=None) -> StandaloneComparison:
    W, D = spec.model.max_width, spec.model.max_depth
    configs = configs or [(1, 1), (1, D), (W, D)]
    items = spec.test_items()
    if dynamic_models is None:
        dynamic_models = [train_dynamic(spec, s) for s in spec.seeds]
    out = StandaloneComparison(list(configs))
    for w, d in configs:
        out.dynamic[(w, d)] = [mean_snr(m, items, w, d) for m in dynamic_models]
        out.standalone[(w, d)] = [mean_snr(train_standalone(spec, s, w, d), items, w, d) for s in spec.seeds]
    return out


def corner_configs(config: ModelConfig) -> list[tuple[int, int]]:
    W, D = config.max_width, config.max_depth
    return [(1, 1), (W, 1), (1, D), (W, D)]


def tac_ablation(spec: ExperimentSpec, tac_models: list[FullModelParams] | None = None) -> tuple[float, float]:
    """Mean SNR over the corner configs and seeds for (TAC, gate-only) models."""
    items = spec.test_items()
    if tac_models is None:
        tac_models = [train_dynamic(spec, s, tac=True) for s in spec.seeds]
    gate_models = [train_dynamic(spec, s, tac=False) for s in spec.seeds]
    corners = corner_configs(spec.model)
    with_tac = np.mean([mean_snr(m, items, w, d) for m in tac_models for w, d in corners])
    without = np.mean([mean_snr(m, items, w, d) for m in gate_models for w, d in corners])
    return float(with_tac), float(without)


def snr_grid(models: list[FullModelParams], items) -> dict[tuple[int, int], float]:
    """Mean SNR of every subnetwork, averaged over models."""
    cfg = models[0].config
    return {
        (w, d): float(np.mean([mean_snr(m, items, w, d) for m in models]))
        for d in range(1, cfg.max_depth + 1)
        for w in range(1, cfg.max_width + 1)
    }


def deeper_vs_wider_pairs(table: CostTable, rel_tol: float = 0.10) -> list[tuple[tuple[int, int], tuple[int, int]]]:
    """Pairs ``(deeper, wider)`` whose MACs differ by at most ``rel_tol``.

    "Deeper" has strictly larger d and strictly smaller w than "wider".
    """
    pairs = []
    for a, b in itertools.permutations(table.rows, 2):
        if a.d > b.d and a.w < b.w:
            lo, hi = sorted((a.macs_per_s, b.macs_per_s))
            if hi <= lo * (1.0 + rel_tol):
                pairs.append(((a.w, a.d), (b.w, b.d)))
    return pairs


def deeper_win_rate(grid: dict[tuple[int, int], float], config: ModelConfig, rel_tol: float = 0.10) -> tuple[float, int]:
    pairs = deeper_vs_wider_pairs(enumerate_costs(config), rel_tol)
    if not pairs:
        raise ValueError("no deeper/wider pairs within the MAC tolerance")
    wins = sum(grid[deep] > grid[wide] for deep, wide in pairs)
    return wins / len(pairs), len(pairs)
