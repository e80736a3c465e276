"""Measurement and reporting: attacked accuracy, fooling ratio, transfer matrices,
ablation sweeps, CSV output and netpbm export of perturbations.

Accuracy is always against ground-truth labels; the fooling ratio is always
against the model's own clean predictions. Both are reported side by side.
"""

from __future__ import annotations

import csv
import dataclasses
import hashlib
import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import attacks, nn
from .attacks import NormBall, UniversalAttackConfig
from .data import Dataset, subset

REPORT_VERSION = 1
REPORT_HEADER = f"# unipert-report v{REPORT_VERSION}"


def _jsonable(obj):
    if dataclasses.is_dataclass(obj) and not isinstance(obj, type):
        return {f.name: _jsonable(getattr(obj, f.name)) for f in dataclasses.fields(obj)}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, float) and not math.isfinite(obj):
        return repr(obj)
    if isinstance(obj, np.generic):
        return obj.item()
    return obj


def config_hash(cfg) -> str:
    """Short stable hash of a (dataclass) configuration."""
    blob = json.dumps(_jsonable(cfg), sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode()).hexdigest()[:12]


@dataclass
class EvalRow:
    model_id: str
    split: str
    attack_id: str
    accuracy: float
    fooling_ratio: float
    n_samples: int
    n_correct: int
    seed: int
    wall_clock_s: float
    config_hash: str

    COLUMNS = (
        "model_id", "split", "attack_id", "accuracy", "fooling_ratio",
        "n_samples", "n_correct", "seed", "wall_clock_s", "config_hash",
    )


def evaluate(model, ds: Dataset, perturbation=None, *, model_id="model", attack_id=None, seed=0,
             clamp_inputs=True, config=None, wall_clock_s=0.0) -> EvalRow:
    """Accuracy and fooling ratio of ``model`` on ``ds`` under a fixed universal perturbation.

    ``perturbation`` may be None (clean), an array of the model's input shape,
    or a ``PerturbationState``. ``config`` (any dataclass) feeds the row's hash.
    """
    if isinstance(perturbation, attacks.PerturbationState):
        wall_clock_s = wall_clock_s or perturbation.wall_clock_s
        perturbation = perturbation.delta
    if perturbation is not None:
        perturbation = np.asarray(perturbation)
        if perturbation.shape != tuple(model.input_shape):
            raise nn.ShapeError(
                f"perturbation shape {perturbation.shape} does not match model input {tuple(model.input_shape)}"
            )
    clean = attacks.perturbed_predictions(model, ds.images, None)
    adv = clean if perturbation is None else attacks.perturbed_predictions(
        model, ds.images, perturbation, clamp_inputs
    )
    n = len(ds)
    correct = int(np.sum(adv == ds.labels))
    return EvalRow(
        model_id=model_id,
        split=ds.split,
        attack_id=attack_id or ("clean" if perturbation is None else "universal"),
        accuracy=correct / n if n else 0.0,
        fooling_ratio=float(np.mean(adv != clean)) if n else 0.0,
        n_samples=n,
        n_correct=correct,
        seed=seed,
        wall_clock_s=float(wall_clock_s),
        config_hash=config_hash(config) if config is not None else "-",
    )


def write_csv(rows, path, columns=None):
    """Headered UTF-8 CSV preceded by a version comment line."""
    rows = list(rows)
    if columns is None:
        columns = EvalRow.COLUMNS if rows and isinstance(rows[0], EvalRow) else tuple(rows[0]) if rows else ()
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="", encoding="utf-8") as f:
        f.write(REPORT_HEADER + "\n")
        w = csv.DictWriter(f, fieldnames=list(columns))
        w.writeheader()
        for r in rows:
            d = dataclasses.asdict(r) if isinstance(r, EvalRow) else r
            w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in d.items() if k in columns})
    return path


def read_csv(path):
    with open(path, newline="", encoding="utf-8") as f:
        first = f.readline().rstrip("\n")
        if first != REPORT_HEADER:
            raise ValueError(f"{path}: expected header comment {REPORT_HEADER!r}, got {first!r}")
        return list(csv.DictReader(f))


# ---------------------------------------------------------------------------
# transferability
# ---------------------------------------------------------------------------


def pgd_builder(eps, steps=7, step_size=None, seed=0):
    """Attack builder for ``transfer_matrix``: per-instance PGD crafted on the source model."""
    step_size = 2.5 * eps / steps if step_size is None else step_size

    def build(source, x, y):
        if eps == 0:
            return np.array(x, dtype=source.dtype, copy=True)
        return attacks.pgd(source, x, y, eps, steps, step_size, random_start=True, rng=seed)

    return build


@dataclass
class TransferMatrix:
    names: list
    cells: dict  # (target, source) -> accuracy
    average: dict  # source -> mean over targets

    def rows(self):
        out = []
        for t in self.names:
            row = {"target": t}
            row.update({s: ("" if t == s else repr(self.cells[t, s])) for s in self.names})
            out.append(row)
        avg = {"target": "Average"}
        avg.update({s: repr(self.average[s]) for s in self.names})
        out.append(avg)
        return out


def transfer_matrix(models: dict, ds: Dataset, attack_builder, chunk=500) -> TransferMatrix:
    """Accuracy of each target on examples crafted against each other source; diagonal omitted."""
    if len(models) < 2:
        raise ValueError("transfer_matrix needs at least two models")
    names = list(models)
    adv = {}
    for s in names:
        parts = [attack_builder(models[s], ds.images[i : i + chunk], ds.labels[i : i + chunk])
                 for i in range(0, len(ds), chunk)]
        adv[s] = np.concatenate(parts)
    cells = {}
    for t in names:
        for s in names:
            if s != t:
                cells[t, s] = float(np.mean(nn.predict(models[t], adv[s]) == ds.labels))
    average = {s: float(np.mean([cells[t, s] for t in names if t != s])) for s in names}
    return TransferMatrix(names, cells, average)


# ---------------------------------------------------------------------------
# ablation sweeps
# ---------------------------------------------------------------------------


def _attack_and_eval(model, train_ds, val_ds, cfg, n, seed):
    sub = subset(train_ds, n, seed)
    cfg = dataclasses.replace(cfg, seed=seed)
    state = attacks.universal_attack(model, sub, cfg)
    return evaluate(model, val_ds, state, clamp_inputs=cfg.clamp_inputs, seed=seed, config=cfg), state


def summarize(rows, key):
    """Mean accuracy with its min/max range per distinct ``key`` value, in first-seen order."""
    groups = {}
    for r in rows:
        groups.setdefault(r[key], []).append(r["accuracy"])
    return [
        {key: k, "mean": float(np.mean(v)), "min": float(np.min(v)), "max": float(np.max(v)), "count": len(v)}
        for k, v in groups.items()
    ]


def sweep_clipping(model, train_ds, val_ds, betas, seeds, n=5000, base: UniversalAttackConfig | None = None):
    """Attacked val accuracy for each (beta, seed); seeds select the training subset."""
    betas = list(betas)
    if not any(math.isinf(b) for b in betas):
        raise ValueError("betas must include +inf as the unclipped baseline")
    base = base or UniversalAttackConfig()
    rows = []
    for beta in betas:
        for seed in seeds:
            row, _ = _attack_and_eval(model, train_ds, val_ds, dataclasses.replace(base, beta=beta), n, seed)
            rows.append({"beta": beta, "seed": seed, "accuracy": row.accuracy,
                         "fooling_ratio": row.fooling_ratio, "config_hash": row.config_hash})
    return rows


def epochs_for_size(n):
    """Epoch budget by subset size: 100 up to 500 samples, 40 up to 2000, else 10."""
    if n <= 500:
        return 100
    if n <= 2000:
        return 40
    return 10


def sweep_data_size(model, train_ds, val_ds, sizes, seed=0, base: UniversalAttackConfig | None = None):
    sizes = list(sizes)
    if sizes != sorted(sizes):
        raise ValueError("sizes must be ascending")
    if sizes and sizes[-1] > len(train_ds):
        raise ValueError(f"size {sizes[-1]} exceeds dataset size {len(train_ds)}")
    base = base or UniversalAttackConfig()
    rows = []
    for n in sizes:
        cfg = dataclasses.replace(base, epochs=epochs_for_size(n))
        row, _ = _attack_and_eval(model, train_ds, val_ds, cfg, n, seed)
        rows.append({"size": n, "epochs": cfg.epochs, "seed": seed, "accuracy": row.accuracy,
                     "fooling_ratio": row.fooling_ratio, "config_hash": row.config_hash})
    return rows


# ---------------------------------------------------------------------------
# image export
# ---------------------------------------------------------------------------


def quantize(delta, eps):
    """Map [-eps, eps] affinely to 0..255, rounding half up."""
    d = np.asarray(delta, dtype=np.float64)
    if eps == 0:
        return np.full(d.shape, 128, dtype=np.uint8)
    q = np.floor(255.0 * (d + eps) / (2.0 * eps) + 0.5)
    return np.clip(q, 0, 255).astype(np.uint8)


def dequantize(q, eps):
    return np.asarray(q, dtype=np.float64) * (2.0 * eps / 255.0) - eps


def export_perturbation_image(delta, ball: NormBall, path):
    """Write delta (C,H,W) as binary PGM (C=1) or PPM (C=3)."""
    delta = np.asarray(delta)
    if delta.ndim != 3 or delta.shape[0] not in (1, 3):
        raise ValueError(f"expected delta of shape (1|3, H, W), got {delta.shape}")
    c, h, w = delta.shape
    q = quantize(delta, ball.eps)
    magic = b"P5" if c == 1 else b"P6"
    body = q[0] if c == 1 else np.transpose(q, (1, 2, 0))
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(magic + b"\n%d %d\n255\n" % (w, h) + body.tobytes())
    return path


def read_netpbm(path):
    """Parse binary PGM/PPM (maxval 255). Returns uint8 (C,H,W)."""
    buf = Path(path).read_bytes()
    tokens, pos = [], 0
    while len(tokens) < 4:
        while pos < len(buf) and buf[pos : pos + 1].isspace():
            pos += 1
        if buf[pos : pos + 1] == b"#":
            pos = buf.index(b"\n", pos) + 1
            continue
        start = pos
        while pos < len(buf) and not buf[pos : pos + 1].isspace():
            pos += 1
        tokens.append(buf[start:pos])
    pos += 1  # single whitespace byte before the raster
    magic, w, h, maxval = tokens[0], int(tokens[1]), int(tokens[2]), int(tokens[3])
    if magic not in (b"P5", b"P6") or maxval != 255:
        raise ValueError(f"{path}: unsupported netpbm variant {magic!r} maxval {maxval}")
    c = 1 if magic == b"P5" else 3
    raster = np.frombuffer(buf, np.uint8, count=w * h * c, offset=pos)
    return raster.reshape(h, w, c).transpose(2, 0, 1)
