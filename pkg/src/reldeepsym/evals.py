"""Effect-error metric, Welch's t-test and multi-step rollouts."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from typing import Callable, Mapping, Sequence

import numpy as np
from scipy import stats

from . import datasets, simenv
from .models import ModelCheckpoint, forward
from .simenv import ActionSpec, Block, WorldState

# A block whose predicted pick-phase lift exceeds this is treated as carried.
# Lifts go to a fixed carry height, so a block taken off a 4-stack rises only
# 5 cm; blocks left behind can only drop.
PICK_THRESHOLD = 2.5

Predictor = Callable[[WorldState, ActionSpec], np.ndarray]


def per_object_errors(predicted: np.ndarray, target: np.ndarray, mask: np.ndarray) -> np.ndarray:
    """Summed absolute error over the 6 effect dims for every real object (flattened)."""
    err = np.abs(np.asarray(predicted) - np.asarray(target)).sum(axis=-1)
    return err[np.asarray(mask) > 0]


def predict_effects(ckpt: ModelCheckpoint, records, batch_size: int = 512):
    """Hard-mode predictions for every record; yields (batch, predicted) pairs."""
    for batch in datasets.load_batches(records, batch_size):
        out = forward(ckpt, batch.features, batch.action, batch.mask, "hard")
        yield batch, out.effects.detach().double().numpy()


def mean_effect_error(predicted: np.ndarray, target: np.ndarray, mask: np.ndarray) -> float:
    errs = per_object_errors(predicted, target, mask)
    if errs.size == 0:
        raise ValueError("no real objects to score")
    return float(errs.mean())


def effect_error(ckpt: ModelCheckpoint, records) -> float:
    """Mean over samples and real objects of the summed absolute effect error (cm)."""
    if len(records) == 0:
        raise ValueError("effect_error of an empty split")
    errs = [per_object_errors(pred, batch.effects, batch.mask)
            for batch, pred in predict_effects(ckpt, records)]
    return float(np.concatenate(errs).mean())


def welch_t(sample_a: Sequence[float], sample_b: Sequence[float]) -> tuple[float, float]:
    """Unequal-variance t statistic and two-sided p-value."""
    a = np.asarray(sample_a, dtype=np.float64)
    b = np.asarray(sample_b, dtype=np.float64)
    if a.size < 2 or b.size < 2:
        raise ValueError("each sample needs at least two values")
    va, vb = a.var(ddof=1) / a.size, b.var(ddof=1) / b.size
    diff = a.mean() - b.mean()
    if va + vb == 0:
        if diff == 0:
            return 0.0, 1.0
        return math.copysign(math.inf, diff), 0.0
    t = diff / math.sqrt(va + vb)
    df = (va + vb) ** 2 / (va ** 2 / (a.size - 1) + vb ** 2 / (b.size - 1))
    return float(t), float(2 * stats.t.sf(abs(t), df))


@dataclass
class EffectErrorSummary:
    dataset: str
    architecture: str
    per_seed: dict[int, float]

    @property
    def mean(self) -> float:
        return float(np.mean(list(self.per_seed.values())))

    @property
    def std(self) -> float:
        vals = list(self.per_seed.values())
        return float(np.std(vals, ddof=1)) if len(vals) > 1 else 0.0


# rollouts -------------------------------------------------------------------

def state_from_positions(like: WorldState, positions: np.ndarray) -> WorldState:
    return WorldState(tuple(Block(b.spec, float(p[0]), float(p[1]), float(p[2]))
                            for b, p in zip(like.blocks, positions)))


def model_predictor(ckpt: ModelCheckpoint) -> Predictor:
    def predict(state: WorldState, action: ActionSpec) -> np.ndarray:
        feats = simenv.relative_features(state, action)
        out = forward(ckpt, feats, datasets.action_onehot(action), None, "hard")
        return out.effects[0].detach().double().numpy()
    return predict


def simulator_predictor(state: WorldState, action: ActionSpec) -> np.ndarray:
    return simenv.execute(state, action)[1]


def zero_predictor(state: WorldState, action: ActionSpec) -> np.ndarray:
    return np.zeros((len(state), 6))


@dataclass
class RolloutTrace:
    initial: WorldState
    actions: list[ActionSpec]
    predicted: list[np.ndarray] = field(default_factory=list)
    truth: list[np.ndarray] = field(default_factory=list)
    errors: list[float] = field(default_factory=list)


def apply_prediction(positions: np.ndarray, effects: np.ndarray, action: ActionSpec) -> np.ndarray:
    """Add pick and release effects, plus the transport move for blocks predicted to be carried."""
    nxt = positions + effects[:, :3] + effects[:, 3:]
    target = positions[action.target_index]
    for i in np.flatnonzero(effects[:, 2] > PICK_THRESHOLD):
        nxt[i, 0] += target[0] + action.release_offset - positions[i, 0]
        nxt[i, 1] += target[1] - positions[i, 1]
    return nxt


def rollout(predictor: Predictor | ModelCheckpoint, initial: WorldState,
            actions: Sequence[ActionSpec]) -> RolloutTrace:
    if isinstance(predictor, ModelCheckpoint):
        predictor = model_predictor(predictor)
    trace = RolloutTrace(initial, list(actions))
    pred = initial.positions()
    true_state = initial
    for action in actions:
        effects = np.asarray(predictor(state_from_positions(initial, pred), action), dtype=np.float64)
        pred = apply_prediction(pred, effects, action)
        true_state, _ = simenv.execute(true_state, action)
        truth = true_state.positions()
        trace.predicted.append(pred.copy())
        trace.truth.append(truth)
        trace.errors.append(float(np.linalg.norm(pred - truth, axis=1).mean()))
    return trace


def rollout_scenes(n_objects: int, n_scenes: int, n_actions: int, seed: int
                   ) -> list[tuple[WorldState, list[ActionSpec]]]:
    out = []
    for s in range(n_scenes):
        rng = np.random.default_rng([seed, 0xA11, n_objects, s])
        scene = simenv.spawn_scene(n_objects, rng)
        out.append((scene, [simenv.random_action(n_objects, rng) for _ in range(n_actions)]))
    return out


def error_vs_actions(predictors: Mapping[str, Sequence[Predictor | ModelCheckpoint]],
                     n_actions_max: int, n_scenes: int, seed: int,
                     n_objects: int | Sequence[int] = 2) -> list[dict]:
    """Mean/std per-object position error at each horizon, every predictor on the same scenes.

    ``n_objects`` may be a sequence, in which case scenes of each size are pooled.
    """
    sizes = [n_objects] if isinstance(n_objects, int) else list(n_objects)
    scenes = [sc for n in sizes for sc in rollout_scenes(n, n_scenes, n_actions_max, seed)]
    rows = []
    for arch, preds in predictors.items():
        errs = np.array([rollout(p, scene, actions).errors for p in preds for scene, actions in scenes])
        for h in range(n_actions_max):
            rows.append({"horizon": h + 1, "architecture": arch,
                         "mean": float(errs[:, h].mean()), "std": float(errs[:, h].std())})
    return rows


def count_inversions(values: Sequence[float]) -> int:
    """Number of adjacent decreases in a curve."""
    return sum(1 for a, b in zip(values, values[1:]) if b < a)


# tables ---------------------------------------------------------------------

RESULT_COLUMNS = ("dataset", "architecture", "seed", "metric", "value")
CURVE_COLUMNS = ("horizon", "architecture", "mean", "std")


def write_table(path, columns: Sequence[str], rows: Sequence[Mapping]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.DictWriter(fh, fieldnames=list(columns), lineterminator="\n")
        w.writeheader()
        for row in rows:
            w.writerow({k: row[k] for k in columns})


def read_table(path) -> list[dict]:
    with open(path, newline="", encoding="utf-8") as fh:
        return list(csv.DictReader(fh))
