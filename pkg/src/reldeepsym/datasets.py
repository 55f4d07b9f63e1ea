"""Interaction datasets: generation, on-disk format, splits and padded batches.

A dataset directory holds two files:

``records.rec``
    One record per line: ``<byte length> <json>\\n``. The JSON object has
    keys ``n``, ``scene`` (list of ``[kind, x, y, z]``), ``action``
    (``[grasp_index, grasp_offset, target_index, release_offset]``),
    ``features`` (n x 6), ``action_onehot`` (6) and ``effects`` (n x 6).
    Floats are written with ``repr`` precision and round-trip exactly.
``manifest.json``
    Variant, per-split counts, generation seed, simulator version and
    format version.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

from . import simenv
from .simenv import ActionSpec, Block, WorldState

FORMAT_VERSION = 1
RECORDS_FILE = "records.rec"
MANIFEST_FILE = "manifest.json"

VARIANT_SIZES = {"2obj": (2,), "3obj": (3,), "4obj": (4,), "mixed": (2, 3, 4)}
DESK_COUNTS = {2: 12000, 3: 18000, 4: 24000}
FULL_COUNTS = {n: 10 * c for n, c in DESK_COUNTS.items()}
SPLIT_FRACTIONS = (0.8, 0.1, 0.1)


class DatasetError(RuntimeError):
    pass


@dataclass(frozen=True)
class SampleRecord:
    scene: WorldState
    action: ActionSpec
    features: np.ndarray
    action_onehot: np.ndarray
    effects: np.ndarray

    @property
    def n(self) -> int:
        return len(self.scene)

    def __eq__(self, other) -> bool:
        if not isinstance(other, SampleRecord):
            return NotImplemented
        return (self.scene == other.scene and self.action == other.action
                and np.array_equal(self.features, other.features)
                and np.array_equal(self.action_onehot, other.action_onehot)
                and np.array_equal(self.effects, other.effects))

    __hash__ = None


def action_onehot(action: ActionSpec) -> np.ndarray:
    v = np.zeros(6)
    v[simenv.OFFSETS.index(action.grasp_offset)] = 1.0
    v[3 + simenv.OFFSETS.index(action.release_offset)] = 1.0
    return v


def make_record(scene: WorldState, action: ActionSpec) -> SampleRecord:
    _, effects = simenv.execute(scene, action)
    return SampleRecord(scene, action, simenv.relative_features(scene, action),
                        action_onehot(action), effects)


def sample_record(n: int, seed: int, index: int) -> SampleRecord:
    rng = np.random.default_rng([seed, n, index])
    scene = simenv.spawn_scene(n, rng)
    return make_record(scene, simenv.random_action(n, rng))


# encoding -----------------------------------------------------------------

def encode_record(rec: SampleRecord) -> str:
    a = rec.action
    payload = json.dumps({
        "n": rec.n,
        "scene": [[b.spec.kind, b.x, b.y, b.z] for b in rec.scene.blocks],
        "action": [a.grasp_index, a.grasp_offset, a.target_index, a.release_offset],
        "features": rec.features.tolist(),
        "action_onehot": rec.action_onehot.tolist(),
        "effects": rec.effects.tolist(),
    }, separators=(",", ":"))
    return f"{len(payload.encode())} {payload}\n"


def decode_record(line: str) -> SampleRecord:
    length, _, payload = line.rstrip("\n").partition(" ")
    if int(length) != len(payload.encode()):
        raise DatasetError(f"record length prefix {length} does not match payload")
    d = json.loads(payload)
    scene = WorldState(tuple(Block(simenv.KIND_BY_NAME[k], float(x), float(y), float(z))
                             for k, x, y, z in d["scene"]))
    g, go, t, ro = d["action"]
    rec = SampleRecord(scene, ActionSpec(int(g), float(go), int(t), float(ro)),
                       np.array(d["features"], dtype=np.float64).reshape(-1, 6),
                       np.array(d["action_onehot"], dtype=np.float64),
                       np.array(d["effects"], dtype=np.float64).reshape(-1, 6))
    if rec.n != d["n"]:
        raise DatasetError("object count mismatch in record")
    return rec


# generation ---------------------------------------------------------------

def variant_counts(variant: str, total_count: int | None = None) -> dict[int, int]:
    """Per-object-count sample numbers; ``mixed`` splits the total 2:3:4."""
    if variant not in VARIANT_SIZES:
        raise DatasetError(f"unknown variant {variant!r}")
    sizes = VARIANT_SIZES[variant]
    if total_count is None:
        return {n: DESK_COUNTS[n] for n in sizes}
    if total_count <= 0:
        raise DatasetError("total_count must be positive")
    if len(sizes) == 1:
        return {sizes[0]: total_count}
    weights = [DESK_COUNTS[n] for n in sizes]
    counts = [total_count * w // sum(weights) for w in weights]
    counts[-1] += total_count - sum(counts)
    return dict(zip(sizes, counts))


def generate_records(variant: str, total_count: int | None, seed: int) -> list[SampleRecord]:
    out = []
    for n, count in variant_counts(variant, total_count).items():
        out.extend(sample_record(n, seed, i) for i in range(count))
    return out


def split_counts(total: int) -> tuple[int, int, int]:
    if total < 10:
        raise DatasetError(f"need at least 10 records to split, got {total}")
    n_val = int(total * SPLIT_FRACTIONS[1])
    n_test = int(total * SPLIT_FRACTIONS[2])
    return total - n_val - n_test, n_val, n_test


def split(records: Sequence, seed: int) -> tuple[list, list, list]:
    """Deterministic 80/10/10 partition of ``records``."""
    n_train, n_val, _ = split_counts(len(records))
    perm = np.random.default_rng([seed, 0x5117]).permutation(len(records))
    parts = (perm[:n_train], perm[n_train:n_train + n_val], perm[n_train + n_val:])
    return tuple([records[i] for i in part] for part in parts)


def generate(variant: str, total_count: int | None, seed: int, out_dir) -> dict:
    """Write records and manifest to ``out_dir``; returns the manifest."""
    out = Path(out_dir)
    records = generate_records(variant, total_count, seed)
    n_train, n_val, n_test = split_counts(len(records))
    manifest = {
        "format_version": FORMAT_VERSION,
        "variant": variant,
        "object_counts": {str(n): c for n, c in variant_counts(variant, total_count).items()},
        "counts": {"train": n_train, "val": n_val, "test": n_test},
        "total": len(records),
        "seed": seed,
        "sim_version": simenv.SIM_VERSION,
    }
    try:
        out.mkdir(parents=True, exist_ok=True)
        with open(out / RECORDS_FILE, "w", encoding="utf-8", newline="\n") as fh:
            fh.writelines(encode_record(r) for r in records)
        with open(out / MANIFEST_FILE, "w", encoding="utf-8", newline="\n") as fh:
            json.dump(manifest, fh, indent=2, sort_keys=True)
            fh.write("\n")
    except OSError as exc:
        raise DatasetError(f"cannot write dataset to {out}: {exc}") from exc
    return manifest


def read_manifest(data_dir) -> dict:
    path = Path(data_dir) / MANIFEST_FILE
    try:
        with open(path, encoding="utf-8") as fh:
            return json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        raise DatasetError(f"cannot read manifest {path}: {exc}") from exc


def read_records(data_dir) -> list[SampleRecord]:
    path = Path(data_dir) / RECORDS_FILE
    try:
        with open(path, encoding="utf-8") as fh:
            return [decode_record(line) for line in fh if line.strip()]
    except (OSError, ValueError) as exc:
        raise DatasetError(f"cannot read records {path}: {exc}") from exc


def load_splits(data_dir) -> dict[str, list[SampleRecord]]:
    manifest = read_manifest(data_dir)
    records = read_records(data_dir)
    if len(records) != manifest["total"]:
        raise DatasetError(f"{data_dir}: manifest lists {manifest['total']} records, found {len(records)}")
    train, val, test = split(records, manifest["seed"])
    return {"train": train, "val": val, "test": test}


def dataset_name(data_dir) -> str:
    return os.path.basename(os.path.normpath(str(data_dir)))


# batching -----------------------------------------------------------------

@dataclass
class Batch:
    features: np.ndarray  # (B, n_max, 6)
    action: np.ndarray  # (B, 6)
    effects: np.ndarray  # (B, n_max, 6)
    mask: np.ndarray  # (B, n_max), 1 for real objects

    def __len__(self) -> int:
        return self.features.shape[0]


def collate(records: Sequence[SampleRecord]) -> Batch:
    n_max = max(r.n for r in records)
    b = len(records)
    feats = np.zeros((b, n_max, 6))
    effects = np.zeros((b, n_max, 6))
    mask = np.zeros((b, n_max))
    for i, r in enumerate(records):
        feats[i, :r.n] = r.features
        effects[i, :r.n] = r.effects
        mask[i, :r.n] = 1.0
    return Batch(feats, np.stack([r.action_onehot for r in records]), effects, mask)


def load_batches(records: Sequence[SampleRecord], batch_size: int, seed: int | None = None
                 ) -> Iterator[Batch]:
    """Yield padded batches; ``seed=None`` keeps record order."""
    if batch_size <= 0:
        raise ValueError("batch_size must be positive")
    order = np.arange(len(records)) if seed is None else np.random.default_rng(seed).permutation(len(records))
    for start in range(0, len(records), batch_size):
        yield collate([records[i] for i in order[start:start + batch_size]])
