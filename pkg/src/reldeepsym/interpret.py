"""Activation dumps for learned object symbols and relation heads."""

from __future__ import annotations

import csv
import json
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import datasets
from .gradcore import ContractError
from .models import ModelCheckpoint, forward

SCHEMA_VERSION = 1
SYMBOL_COLUMNS = ("code", "kind", "x", "y", "z")
RELATION_COLUMNS = ("head", "dx", "dy", "dz")


@dataclass
class SymbolActivationReport:
    rows: list[tuple[str, str, float, float, float]] = field(default_factory=list)

    @property
    def counts(self) -> dict[str, int]:
        return dict(sorted(Counter(r[0] for r in self.rows).items()))

    def kind_purity(self) -> dict[str, tuple[float, str, int]]:
        """Per code: (fraction of the majority kind, that kind, activation count)."""
        out = {}
        for code, count in self.counts.items():
            kinds = Counter(r[1] for r in self.rows if r[0] == code)
            kind, top = kinds.most_common(1)[0]
            out[code] = (top / count, kind, count)
        return out


@dataclass
class RelationActivationReport:
    heads: int
    rows: list[tuple[int, float, float, float]] = field(default_factory=list)
    population_dy_std: float = 0.0

    def head_rows(self, head: int) -> np.ndarray:
        return np.array([r[1:] for r in self.rows if r[0] == head]).reshape(-1, 3)

    def dy_spread(self) -> dict[int, float]:
        """Std of dy among activating pairs for every head with activations."""
        return {h: float(self.head_rows(h)[:, 1].std())
                for h in range(self.heads) if len(self.head_rows(h))}


def _kind(feature_row: np.ndarray) -> str:
    return "short" if feature_row[0] > 0.5 else "long"


def _code(bits: np.ndarray) -> str:
    return "".join("1" if b > 0.5 else "0" for b in bits)


def symbol_report(ckpt: ModelCheckpoint, records, batch_size: int = 512) -> SymbolActivationReport:
    if ckpt.architecture == "deepsym":
        raise ContractError("deepsym symbols describe whole scenes, not objects")
    report = SymbolActivationReport()
    for batch in datasets.load_batches(records, batch_size):
        z = forward(ckpt, batch.features, batch.action, batch.mask, "hard").symbols.numpy()
        for b in range(len(batch)):
            for i in np.flatnonzero(batch.mask[b]):
                f = batch.features[b, i]
                report.rows.append((_code(z[b, i]), _kind(f), float(f[2]), float(f[3]), float(f[4])))
    return report


def relation_report(ckpt: ModelCheckpoint, records, batch_size: int = 512) -> RelationActivationReport:
    if ckpt.architecture != "relational":
        raise ContractError("only the relational model emits relation symbols")
    report = RelationActivationReport(ckpt.config.heads)
    all_dy = []
    for batch in datasets.load_batches(records, batch_size):
        rel = forward(ckpt, batch.features, batch.action, batch.mask, "hard").relations.numpy()
        pos = batch.features[..., 2:5]
        for b in range(len(batch)):
            real = np.flatnonzero(batch.mask[b])
            for i in real:
                for j in real:
                    if i != j:
                        all_dy.append(pos[b, j, 1] - pos[b, i, 1])
            for h, i, j in zip(*np.nonzero(rel[b])):
                if i != j:
                    d = pos[b, j] - pos[b, i]
                    report.rows.append((int(h), float(d[0]), float(d[1]), float(d[2])))
    report.population_dy_std = float(np.std(all_dy)) if all_dy else 0.0
    return report


def write_reports(out_dir, symbols: SymbolActivationReport | None,
                  relations: RelationActivationReport | None) -> list[Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written = []
    schema = {"version": SCHEMA_VERSION}
    if symbols is not None:
        with open(out / "symbols.csv", "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(SYMBOL_COLUMNS)
            w.writerows(symbols.rows)
        schema["symbols.csv"] = list(SYMBOL_COLUMNS)
        written.append(out / "symbols.csv")
    if relations is not None:
        with open(out / "relations.csv", "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(RELATION_COLUMNS)
            w.writerows(relations.rows)
        schema["relations.csv"] = list(RELATION_COLUMNS)
        schema["relation_dy_spread"] = {str(h): s for h, s in relations.dy_spread().items()}
        schema["population_dy_std"] = relations.population_dy_std
        written.append(out / "relations.csv")
    with open(out / "schema.json", "w", encoding="utf-8") as fh:
        json.dump(schema, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return written
