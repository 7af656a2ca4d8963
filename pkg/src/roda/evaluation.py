"""AUROC, end-to-end evaluation, assignment diagnostics, ablation and sweeps."""
from __future__ import annotations

import json
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace

import numpy as np
from scipy.stats import rankdata

from .alignment import AdaptConfig, adapt
from .errors import ConfigError, LabelError, RodaError
from .feature_store import FeatureSet, PatchIndex, split_target
from .memory_bank import MemoryBank, bank_from_feature_set, score_set
from .shiftlab import ShiftSpec, WorldSpec, apply_shift, generate_world


def auroc(scores, labels) -> float:
    """Rank-sum AUROC with anomalies (label 1) as the positive class; ties count 1/2."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    if scores.shape != labels.shape or scores.ndim != 1:
        raise LabelError(f"scores {scores.shape} and labels {labels.shape} must be equal-length vectors")
    if not np.isin(labels, (0, 1)).all():
        raise LabelError("labels must be 0/1")
    pos = labels == 1
    n_pos = int(pos.sum())
    n_neg = len(labels) - n_pos
    if n_pos == 0 or n_neg == 0:
        raise LabelError("AUROC is undefined unless both classes are present")
    ranks = rankdata(scores)  # average ranks for ties
    u = ranks[pos].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


@dataclass
class EvalReport:
    image_auroc: float
    patch_auroc: float | None
    n_test: int
    fingerprint: dict = field(default_factory=dict)

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)


def evaluate(bank: MemoryBank, adapter, test: FeatureSet, fingerprint: dict | None = None) -> EvalReport:
    """Image AUROC over max-patch scores; patch AUROC over all test patches pooled.

    ``patch_auroc`` is None when patch labels are missing or single-class.
    """
    if any(s.image_label is None for s in test.samples):
        raise LabelError("every test sample needs an image_label")
    scored = score_set(bank, test, adapter)
    image = auroc([sc for sc, _ in scored], [s.image_label for s in test.samples])
    patch = None
    if test.samples and all(s.patch_labels is not None for s in test.samples):
        p_labels = np.concatenate([s.patch_labels.ravel() for s in test.samples])
        if 0 < p_labels.sum() < len(p_labels):
            p_scores = np.concatenate([ps.ravel() for _, ps in scored])
            patch = auroc(p_scores, p_labels)
    return EvalReport(image, patch, len(test), dict(fingerprint or {}))


def anomaly_assignment_diagnostic(pairs, index: PatchIndex | None, patch_labels=None):
    """(total pairs, pairs on anomalous rows, fraction) for one assignment.

    Row labels come from ``patch_labels`` (one per row) or from the index map.
    """
    p = pairs.pairs if hasattr(pairs, "pairs") else np.asarray(pairs, dtype=np.int64).reshape(-1, 2)
    labels = patch_labels if patch_labels is not None else getattr(index, "labels", None)
    if labels is None:
        raise LabelError("anomaly diagnostic needs per-row patch labels")
    labels = np.asarray(labels)
    if index is not None and len(index) != len(labels):
        raise IndexError(f"index map has {len(index)} rows, labels have {len(labels)}")
    total = len(p)
    if total == 0:
        return 0, 0, 0.0
    if p[:, 0].max() >= len(labels) or p[:, 0].min() < 0:
        raise IndexError("assignment row outside the labelled batch")
    anomalous = int(labels[p[:, 0]].sum())
    return total, anomalous, anomalous / total


# ---------------------------------------------------------------------------
# ablation and sweep harness

# table row label -> (adaptation method, augmentation policy); None = no adaptation
ABLATION_METHODS = {
    "none": None,
    "gaussian-kl": ("gaussian-kl", "none"),
    "moment-match": ("moment-match", "none"),
    "hungarian": ("hungarian", "none"),
    "continuous-ot": ("continuous-ot", "none"),
    "robust-ot": ("robust-ot", "none"),
    "robust-ot+copy": ("robust-ot", "copy"),
    "robust-ot+jitter": ("robust-ot", "jitter"),
}
SWEEP_AXES = ("severity", "train_fraction")
DEFAULT_TRAIN_FRACTIONS = (0.2, 0.8, 1.0)


@dataclass
class Prepared:
    """Everything one seed shares across methods: bank and target split."""
    seed: int
    bank: MemoryBank
    train: FeatureSet
    test: FeatureSet


def prepare(world: WorldSpec, shift: ShiftSpec, coreset_fraction: float, train_fraction: float,
            seed: int, reference_fraction: float = 0.2) -> Prepared:
    """Generate, shift and split one seeded world; every stochastic stage uses ``seed``.

    ``train_fraction == 1.0`` adapts on the whole shifted target and tests on
    the test part of the ``reference_fraction`` split, so train and test
    overlap by construction.
    """
    source, target = generate_world(replace(world, seed=seed))
    bank = bank_from_feature_set(source, coreset_fraction, seed)
    shifted = apply_shift(target, replace(shift, seed=seed))
    if train_fraction >= 1.0:
        test = split_target(shifted, reference_fraction, seed).test
        return Prepared(seed, bank, shifted, test)
    split = split_target(shifted, train_fraction, seed)
    return Prepared(seed, bank, split.train, split.test)


def run_method(label: str, prep: Prepared, adapt_config: AdaptConfig, fingerprint: dict) -> EvalReport:
    if label not in ABLATION_METHODS:
        raise ConfigError(f"unknown ablation method {label!r}; expected one of {tuple(ABLATION_METHODS)}")
    adapter = None
    spec = ABLATION_METHODS[label]
    if spec is not None:
        method, policy = spec
        cfg = replace(adapt_config, augmentation=policy, seed=prep.seed)
        adapter, _ = adapt(prep.bank, prep.train, cfg, method)
    return evaluate(prep.bank, adapter, prep.test, fingerprint)


def _record(report: EvalReport | None, fingerprint: dict, error: str | None) -> dict:
    rec = dict(fingerprint)
    rec["image_auroc"] = None if report is None else report.image_auroc
    rec["patch_auroc"] = None if report is None else report.patch_auroc
    rec["n_test"] = None if report is None else report.n_test
    rec["error"] = error
    return rec


def _run_group(args):
    world, shift, methods, seed, coreset_fraction, train_fraction, adapt_config, extra = args
    base = {"shift": shift.kind, "severity": shift.severity, "seed": seed,
            "train_fraction": train_fraction, **extra}
    try:
        prep = prepare(world, shift, coreset_fraction, train_fraction, seed)
    except (RodaError, ArithmeticError, ValueError) as exc:
        return [_record(None, {**base, "method": m}, f"{type(exc).__name__}: {exc}") for m in methods]
    out = []
    for m in methods:
        fp = {**base, "method": m}
        try:
            out.append(_record(run_method(m, prep, adapt_config, fp), fp, None))
        except (RodaError, ArithmeticError, ValueError) as exc:
            out.append(_record(None, fp, f"{type(exc).__name__}: {exc}"))
    return out


def _map(fn, jobs, workers: int):
    if workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            return list(pool.map(fn, jobs))
    return [fn(j) for j in jobs]


def _mean_std(values):
    vals = [v for v in values if v is not None]
    if not vals:
        return None, None
    std = float(np.std(vals, ddof=1)) if len(vals) > 1 else 0.0
    return float(np.mean(vals)), std


@dataclass
class ResultTable:
    """Per-seed records plus a mean +- sample-std layer over seeds.

    Each record carries its fingerprint (method, shift, severity, seed,
    train_fraction) next to image_auroc, patch_auroc, n_test and error.
    """
    records: list
    column_key: str = "shift"

    def _column(self, rec) -> str:
        if self.column_key == "shift":
            return f"{rec['shift']}-s{rec['severity']}"
        return f"{self.column_key}={rec[self.column_key]}"

    def seeds(self) -> list:
        return sorted({r["seed"] for r in self.records})

    def layer(self, seed) -> list:
        return [r for r in self.records if r["seed"] == seed]

    def cell(self, method: str, column: str, seed=None, key: str = "image_auroc") -> list:
        return [r[key] for r in self.records
                if r["method"] == method and self._column(r) == column
                and (seed is None or r["seed"] == seed)]

    def columns(self) -> list:
        return list(dict.fromkeys(self._column(r) for r in self.records))

    def methods(self) -> list:
        return list(dict.fromkeys(r["method"] for r in self.records))

    def mean_layer(self) -> list:
        out = []
        for col in self.columns():
            for m in self.methods():
                img, img_sd = _mean_std(self.cell(m, col))
                pat, pat_sd = _mean_std(self.cell(m, col, key="patch_auroc"))
                n_err = sum(e is not None for e in self.cell(m, col, key="error"))
                out.append({"column": col, "method": m, "image_auroc_mean": img, "image_auroc_std": img_sd,
                            "patch_auroc_mean": pat, "patch_auroc_std": pat_sd,
                            "n_seeds": len(self.cell(m, col)), "n_errors": n_err})
        return out

    def to_jsonl(self) -> str:
        lines = [json.dumps({"layer": "seed", **r}, sort_keys=True) for r in self.records]
        lines += [json.dumps({"layer": "mean", **r}, sort_keys=True) for r in self.mean_layer()]
        return "\n".join(lines) + "\n"

    def render(self) -> str:
        """Fixed-width text table of image AUROC, mean +- std over seeds."""
        cols = self.columns()
        mean = {(r["method"], r["column"]): r for r in self.mean_layer()}
        width = max([len(m) for m in self.methods()] + [6])
        cw = max([len(c) for c in cols] + [13])
        head = "method".ljust(width) + "".join("  " + c.rjust(cw) for c in cols)
        lines = [head, "-" * len(head)]
        for m in self.methods():
            cells = []
            for c in cols:
                r = mean[(m, c)]
                if r["image_auroc_mean"] is None:
                    txt = "error"
                else:
                    txt = f"{r['image_auroc_mean']:.3f}+-{r['image_auroc_std']:.3f}"
                    if r["n_errors"]:
                        txt += "*"
                cells.append("  " + txt.rjust(cw))
            lines.append(m.ljust(width) + "".join(cells))
        lines.append(f"image AUROC, mean +- sample std over {len(self.seeds())} seed(s); * = some seeds failed")
        return "\n".join(lines) + "\n"


def ablation_runner(world: WorldSpec, shifts, methods, seeds, coreset_fraction: float = 0.1,
                    train_fraction: float = 0.2, adapt_config: AdaptConfig = AdaptConfig(),
                    workers: int = 1) -> ResultTable:
    """Cross product of shifts x methods x seeds.

    Per (seed, shift) the world, bank and split are built once and shared by
    all methods. A failing cell is recorded with its error and the run
    continues.
    """
    for m in methods:
        if m not in ABLATION_METHODS:
            raise ConfigError(f"unknown ablation method {m!r}; expected one of {tuple(ABLATION_METHODS)}")
    jobs = [(world, sh, list(methods), int(seed), coreset_fraction, train_fraction, adapt_config, {})
            for seed in seeds for sh in shifts]
    records = [r for group in _map(_run_group, jobs, workers) for r in group]
    return ResultTable(records, "shift")


def sweep(axis: str, values, world: WorldSpec, shift: ShiftSpec, method: str, seeds,
          coreset_fraction: float = 0.1, train_fraction: float = 0.2,
          adapt_config: AdaptConfig = AdaptConfig(), workers: int = 1) -> ResultTable:
    """One method evaluated along severity or train_fraction, seed by seed.

    ``values=None`` on the train_fraction axis means (0.2, 0.8, 1.0).
    """
    if axis not in SWEEP_AXES:
        raise ConfigError(f"sweep axis must be one of {SWEEP_AXES}, got {axis!r}")
    if values is None:
        if axis != "train_fraction":
            raise ConfigError("sweep over severity needs explicit values")
        values = DEFAULT_TRAIN_FRACTIONS
    jobs = []
    for v in values:
        if axis == "severity":
            sh, tf = replace(shift, severity=int(v)), train_fraction
        else:
            sh, tf = shift, float(v)
            if not 0.0 < tf <= 1.0:
                raise ConfigError(f"train_fraction values must lie in (0, 1], got {v}")
        jobs += [(world, sh, [method], int(seed), coreset_fraction, tf, adapt_config, {}) for seed in seeds]
    records = [r for group in _map(_run_group, jobs, workers) for r in group]
    return ResultTable(records, axis)
