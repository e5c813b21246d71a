"""Per-sample analysis records, aggregate summaries, reports and checkpoints.

CSV files use the record field names as header, empty cells for missing
values and 9-significant-digit numbers, so regenerating a report from the
same records file reproduces it byte for byte.
"""
from __future__ import annotations

import csv
import io
import json
import logging
import math
import struct
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np
from scipy import stats

from .attacks import ATTACK_NAMES, AttackConfig, run_attacks_batch
from .data import Dataset
from .metrics import DegenerateSaliencyError, bound_report, check_bounds
from .network import LayerSpec, Network, argmax_lowest

logger = logging.getLogger(__name__)

__all__ = [
    "SampleRecord",
    "SweepSummary",
    "RECORD_FIELDS",
    "CheckpointError",
    "analyze_model",
    "aggregate",
    "median_mad",
    "write_records_csv",
    "read_records_csv",
    "write_summary",
    "write_long_csv",
    "save_checkpoint",
    "load_checkpoint",
    "format_value",
]


@dataclass
class SampleRecord:
    sample_index: int
    true_label: int
    predicted_class: int
    j_star: int | None = None
    alpha: float | None = None
    alpha_dagger: float | None = None
    rho_tilde: float | None = None
    rho_grad: float | None = None
    rho_pgd: float | None = None
    rho_cw: float | None = None
    beta_dagger: float | None = None
    norm_g: float | None = None
    norm_g_dagger: float | None = None
    bound_t2a: float | None = None
    bound_t2b: float | None = None
    bound_t3: float | None = None
    xi_alignment_term: float | None = None
    gdagger_g_distance: float | None = None
    gdagger_gamma_distance: float | None = None
    linear_term: float | None = None
    psi_dagger: float | None = None
    f_xi_equals_f_x: bool | None = None


RECORD_FIELDS = tuple(f.name for f in fields(SampleRecord))
_INT_FIELDS = ("sample_index", "true_label", "predicted_class", "j_star")
NUMERIC_FIELDS = tuple(n for n in RECORD_FIELDS if n not in _INT_FIELDS and n != "f_xi_equals_f_x")
RATIO_TERMS = {
    "ratio_t2a": ("alpha_dagger", "bound_t2a"),
    "ratio_t2b": ("alpha", "bound_t2b"),
    "ratio_t3": ("xi_alignment_term", "bound_t3"),
}
CORRELATIONS = {
    "rho_tilde_vs_rho_cw": ("rho_tilde", "rho_cw"),
    "rho_tilde_vs_alpha": ("rho_tilde", "alpha"),
}


def format_value(v) -> str:
    if v is None:
        return ""
    if isinstance(v, (bool, np.bool_)):
        return "true" if v else "false"
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    v = float(v)
    if math.isnan(v):
        return ""
    return format(v, ".9g")


# --- analysis ------------------------------------------------------------------------


def analyze_model(net: Network, dataset: Dataset, attack_cfgs: Mapping[str, AttackConfig],
                  n_samples: int, split: str = "validation") -> list[SampleRecord]:
    """Bound report plus attack norms for the first ``n_samples`` points of ``split``."""
    part = dataset.split(split) if split else dataset
    if n_samples < 0 or n_samples > len(part):
        raise ValueError(f"n_samples={n_samples} but the {split} split has {len(part)} samples")
    if n_samples == 0:
        return []
    net = net.copy().eval()
    X = part.images[:n_samples]
    y = part.labels[:n_samples]
    attacks = run_attacks_batch(net, X, attack_cfgs) if attack_cfgs else {}
    preds = argmax_lowest(net.logits_batch(X))
    records = []
    for k in range(n_samples):
        rec = SampleRecord(sample_index=k, true_label=int(y[k]), predicted_class=int(preds[k]))
        try:
            rep = bound_report(net, X[k])
        except (DegenerateSaliencyError, FloatingPointError) as exc:
            logger.warning("sample %d: bound report failed: %s", k, exc)
        else:
            for name in RECORD_FIELDS:
                if hasattr(rep, name) and name not in ("sample_index", "true_label"):
                    setattr(rec, name, getattr(rep, name))
            rec.predicted_class = rep.i_star
        for name in ATTACK_NAMES:
            if name in attacks and attacks[name][k].success:
                setattr(rec, f"rho_{name}", attacks[name][k].norm)
        bad = check_bounds(rec)
        if bad:
            logger.error("sample %d violates %s", k, ", ".join(bad))
        records.append(rec)
    return records


# --- aggregation ------------------------------------------------------------------------


def median_mad(values: Iterable[float]) -> tuple[float | None, float | None, int]:
    """Median, unscaled median absolute deviation and count of the present values."""
    v = np.array([x for x in values if x is not None and not (isinstance(x, float) and math.isnan(x))],
                 dtype=np.float64)
    if v.size == 0:
        return None, None, 0
    med = float(np.median(v))
    return med, float(np.median(np.abs(v - med))), int(v.size)


def _column(records, name):
    return [getattr(r, name) for r in records]


def _pairs(records, a, b):
    pa, pb = [], []
    for r in records:
        x, y = getattr(r, a), getattr(r, b)
        if x is not None and y is not None:
            pa.append(float(x))
            pb.append(float(y))
    return np.array(pa), np.array(pb)


def _corr(fn, a, b):
    if len(a) < 2 or np.ptp(a) == 0 or np.ptp(b) == 0:
        return None
    return float(fn(a, b)[0])


@dataclass
class SweepSummary:
    lam: float | None
    model: str
    n_records: int
    medians: dict = field(default_factory=dict)
    mads: dict = field(default_factory=dict)
    counts: dict = field(default_factory=dict)
    attack_failures: dict = field(default_factory=dict)
    pearson: dict = field(default_factory=dict)
    spearman: dict = field(default_factory=dict)
    ratio_medians: dict = field(default_factory=dict)
    linearity_ratio: float | None = None
    f_xi_equals_f_x_fraction: float | None = None
    bound_violations: int = 0

    def flat(self) -> dict:
        row = {"model": self.model, "lambda": self.lam, "n_records": self.n_records}
        for c in NUMERIC_FIELDS:
            row[f"median_{c}"] = self.medians.get(c)
            row[f"mad_{c}"] = self.mads.get(c)
            row[f"count_{c}"] = self.counts.get(c, 0)
        for a in ATTACK_NAMES:
            row[f"failures_{a}"] = self.attack_failures.get(a, 0)
        for k in CORRELATIONS:
            row[f"pearson_{k}"] = self.pearson.get(k)
            row[f"spearman_{k}"] = self.spearman.get(k)
        for k in RATIO_TERMS:
            row[f"median_{k}"] = self.ratio_medians.get(k)
        row["linearity_ratio"] = self.linearity_ratio
        row["f_xi_equals_f_x_fraction"] = self.f_xi_equals_f_x_fraction
        row["bound_violations"] = self.bound_violations
        return row


def aggregate(records: Sequence[SampleRecord], lam: float | None, model: str = "model") -> SweepSummary:
    """Median aggregate of one model's records."""
    if not records:
        raise ValueError("aggregate needs at least one record")
    s = SweepSummary(lam=lam, model=model, n_records=len(records))
    for c in NUMERIC_FIELDS:
        s.medians[c], s.mads[c], s.counts[c] = median_mad(_column(records, c))
    for a in ATTACK_NAMES:
        s.attack_failures[a] = sum(getattr(r, f"rho_{a}") is None for r in records)
    for key, (a, b) in CORRELATIONS.items():
        pa, pb = _pairs(records, a, b)
        s.pearson[key] = _corr(stats.pearsonr, pa, pb)
        s.spearman[key] = _corr(stats.spearmanr, pa, pb)
    for key, (num, den) in RATIO_TERMS.items():
        pn, pd = _pairs(records, num, den)
        ok = pd > 0
        s.ratio_medians[key] = median_mad(np.clip(pn[ok] / pd[ok], 0.0, 1.0))[0] if ok.any() else None
    ml, mp = s.medians["linear_term"], s.medians["psi_dagger"]
    s.linearity_ratio = ml / mp if ml is not None and mp else None
    flags = [r.f_xi_equals_f_x for r in records if r.f_xi_equals_f_x is not None]
    s.f_xi_equals_f_x_fraction = float(np.mean(flags)) if flags else None
    s.bound_violations = sum(bool(check_bounds(r)) for r in records)
    return s


# --- CSV / JSON -------------------------------------------------------------------------


def write_records_csv(records: Sequence[SampleRecord], path: str | Path) -> None:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(RECORD_FIELDS)
    for r in records:
        w.writerow([format_value(getattr(r, n)) for n in RECORD_FIELDS])
    Path(path).write_text(buf.getvalue())


def _parse_cell(name: str, cell: str):
    if cell == "":
        return None
    if name == "f_xi_equals_f_x":
        if cell not in ("true", "false"):
            raise ValueError(f"bad boolean {cell!r} in column {name}")
        return cell == "true"
    if name in _INT_FIELDS:
        return int(cell)
    return float(cell)


def read_records_csv(path: str | Path) -> list[SampleRecord]:
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or tuple(header) != RECORD_FIELDS:
            raise ValueError(f"{path}: header does not match the SampleRecord schema")
        out = []
        for lineno, row in enumerate(reader, start=2):
            if len(row) != len(RECORD_FIELDS):
                raise ValueError(f"{path}:{lineno}: expected {len(RECORD_FIELDS)} cells, got {len(row)}")
            out.append(SampleRecord(**{n: _parse_cell(n, c) for n, c in zip(RECORD_FIELDS, row)}))
    return out


def _json_ready(v):
    if isinstance(v, dict):
        return {k: _json_ready(x) for k, x in v.items()}
    if isinstance(v, (list, tuple)):
        return [_json_ready(x) for x in v]
    if isinstance(v, (bool, np.bool_)) or v is None or isinstance(v, str):
        return bool(v) if isinstance(v, np.bool_) else v
    if isinstance(v, (int, np.integer)):
        return int(v)
    v = float(v)
    return None if not math.isfinite(v) else float(format(v, ".9g"))


def write_summary(summaries: Sequence[SweepSummary], csv_path: str | Path, json_path: str | Path | None = None) -> None:
    rows = [s.flat() for s in summaries]
    cols = list(rows[0]) if rows else ["model", "lambda", "n_records"]
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(cols)
    for row in rows:
        w.writerow([row[c] if isinstance(row[c], str) else format_value(row[c]) for c in cols])
    Path(csv_path).write_text(buf.getvalue())
    if json_path is not None:
        Path(json_path).write_text(json.dumps(_json_ready(rows), indent=2, sort_keys=True) + "\n")


def write_long_csv(per_model: Sequence[tuple[SweepSummary, Sequence[SampleRecord]]], path: str | Path) -> None:
    """Plot-ready (model, metric, value) rows.

    Model-level metrics are the summary fields; per-sample values appear as
    ``<field>[<sample_index>]`` for the scatter and ratio analyses.
    """
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["model", "metric", "value"])
    scatter = ("rho_tilde", "rho_grad", "rho_pgd", "rho_cw", "alpha", "alpha_dagger",
               "linear_term", "psi_dagger")
    for summary, records in per_model:
        for k, v in summary.flat().items():
            if k == "model":
                continue
            w.writerow([summary.model, k, format_value(v)])
        for r in records:
            for c in scatter:
                w.writerow([summary.model, f"{c}[{r.sample_index}]", format_value(getattr(r, c))])
            for key, (num, den) in RATIO_TERMS.items():
                a, b = getattr(r, num), getattr(r, den)
                val = a / b if a is not None and b else None
                w.writerow([summary.model, f"{key}[{r.sample_index}]", format_value(val)])
    Path(path).write_text(buf.getvalue())


# --- checkpoints ------------------------------------------------------------------------

MAGIC = b"SALN"
VERSION = 1
_HEADER = struct.Struct("<4sIQ")


class CheckpointError(ValueError):
    pass


def save_checkpoint(net: Network, path: str | Path) -> None:
    """Binary checkpoint: magic, u32 version, u64 JSON length, JSON, float64 parameters (all LE)."""
    params = net.parameters()
    meta = {
        "layers": [l.to_dict() for l in net.layers],
        "input_shape": list(net.input_shape),
        "has_weight": [w is not None for w in net.weights],
        "has_bias": [b is not None for b in net.bias_arrays],
        "parameters": [{"role": r, "shape": list(p.shape)} for r, p in zip(net.parameter_roles(), params)],
        "meta": _json_ready(net.meta),
    }
    blob = json.dumps(meta, sort_keys=True).encode("utf-8")
    body = b"".join(np.ascontiguousarray(p, dtype="<f8").tobytes() for p in params)
    Path(path).write_bytes(_HEADER.pack(MAGIC, VERSION, len(blob)) + blob + body)


def load_checkpoint(path: str | Path) -> Network:
    raw = Path(path).read_bytes()
    if len(raw) < _HEADER.size:
        raise CheckpointError(f"{path}: truncated header ({len(raw)} bytes)")
    magic, version, n = _HEADER.unpack_from(raw)
    if magic != MAGIC:
        raise CheckpointError(f"{path}: bad magic {magic!r}")
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported version {version} (this build reads {VERSION})")
    start = _HEADER.size
    if len(raw) < start + n:
        raise CheckpointError(f"{path}: truncated metadata, need {n} bytes at offset {start}")
    try:
        meta = json.loads(raw[start:start + n].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{path}: unreadable metadata: {exc}") from None
    offset = start + n
    expected = sum(int(np.prod(p["shape"])) for p in meta["parameters"]) * 8
    if len(raw) - offset != expected:
        raise CheckpointError(
            f"{path}: length mismatch, metadata describes {expected} parameter bytes, file holds {len(raw) - offset}")
    arrays = []
    for p in meta["parameters"]:
        size = int(np.prod(p["shape"]))
        arrays.append(np.frombuffer(raw, dtype="<f8", count=size, offset=offset).astype(np.float64).reshape(p["shape"]))
        offset += size * 8
    layers = [LayerSpec.from_dict(d) for d in meta["layers"]]
    # weights and biases interleave per layer in the file
    it = iter(arrays)
    weights, biases = [], []
    for hw, hb in zip(meta["has_weight"], meta["has_bias"]):
        weights.append(next(it) if hw else None)
        biases.append(next(it) if hb else None)
    return Network(layers, meta["input_shape"], weights, biases, mode="eval", meta=meta.get("meta", {}))
