"""Registration error metrics, pipeline configuration and experiment sweeps."""

from __future__ import annotations

import copy
import csv
import io
import json
import logging
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .deformation import DeformationField
from .finalreg import RegistrationEnergyConfig, map_registration_graphcut, optimize_ffd, optimize_ffd_mi
from .forest import ForestHyperparams
from .synthgen import SynthConfig, read_pair
from .vem import MrfParams, ShiftCatalog, VemConfig, run_vem

log = logging.getLogger(__name__)

CSV_HEADER = ["sigma_v", "spacing_mm", "n_landmarks", "method", "mean_err_mm", "max_err_mm", "runtime_s", "seed"]
METHODS = ("mi", "joint", "independent")


def registration_error(estimated: DeformationField, truth: DeformationField, mask=None) -> tuple[float, float]:
    """Mean and maximum Euclidean displacement error (mm) over ``mask``."""
    if estimated.shape != truth.shape:
        raise ValueError("estimated and true fields live on different grids")
    d = np.hypot(estimated.data[0] - truth.data[0], estimated.data[1] - truth.data[1])
    if mask is not None:
        mask = np.asarray(mask, dtype=bool)
        if mask.shape != d.shape:
            raise ValueError("mask does not match the field grid")
        d = d[mask]
    if d.size == 0:
        raise ValueError("empty evaluation mask")
    return float(d.mean()), float(d.max())


# --- configuration --------------------------------------------------------------


def default_config() -> dict:
    """Every tunable parameter with its default value, as one JSON-ready document."""
    return {
        "synthesis": asdict(SynthConfig()),
        "vem": {
            "shift_radius_mm": 10.0,
            "shift_step_mm": 0.5,
            "beta1": 0.02,
            "beta2": 0.02,
            "scales_mm": [0.0, 2.0, 4.0],
            "max_order": 3,
            "max_outer": 10,
            "tol": 0.5,
            "e_tol": 1e-4,
            "e_max_sweeps": 50,
            "schedule": "sequential",
        },
        "forest": asdict(ForestHyperparams()),
        "registration": {
            k: v for k, v in asdict(RegistrationEnergyConfig()).items() if k not in ("spacing_mm", "data_term")
        },
        "graphcut": {"max_passes": 5},
    }


def merge_config(base: dict, override: dict) -> dict:
    out = copy.deepcopy(base)
    for key, val in override.items():
        if key not in out:
            raise ValueError(f"unknown configuration key {key!r}")
        if isinstance(out[key], dict):
            if not isinstance(val, dict):
                raise ValueError(f"configuration section {key!r} must be an object")
            out[key] = merge_config(out[key], val)
        else:
            out[key] = val
    return out


def load_config(path=None) -> dict:
    cfg = default_config()
    if path is not None:
        cfg = merge_config(cfg, json.loads(Path(path).read_text()))
    return cfg


def vem_config(cfg: dict, seed: int = 0) -> VemConfig:
    v = cfg["vem"]
    return VemConfig(
        catalog=ShiftCatalog(float(v["shift_radius_mm"]), float(v["shift_step_mm"])),
        mrf=MrfParams(float(v["beta1"]), float(v["beta2"])),
        forest=ForestHyperparams(**cfg["forest"]),
        scales=tuple(float(s) for s in v["scales_mm"]),
        max_order=int(v["max_order"]),
        max_outer=int(v["max_outer"]),
        tol=float(v["tol"]),
        e_tol=float(v["e_tol"]),
        e_max_sweeps=int(v["e_max_sweeps"]),
        schedule=str(v["schedule"]),
        seed=int(seed),
    )


def registration_config(cfg: dict, spacing_mm: float, data_term: str) -> RegistrationEnergyConfig:
    return RegistrationEnergyConfig(spacing_mm=float(spacing_mm), data_term=data_term, **cfg["registration"])


# --- single-pair pipeline ---------------------------------------------------------


def final_registration(ref, flo, prediction, landmarks, method: str, spacing_mm: float, cfg: dict,
                       final: str = "ffd", catalog=None):
    """Final registration step for one pair; returns (DeformationField, report dict)."""
    if method not in METHODS:
        raise ValueError(f"unknown method {method!r}")
    if method == "mi":
        if final != "ffd":
            raise ValueError("the mutual-information baseline only supports the FFD final step")
        res = optimize_ffd_mi(ref, flo, landmarks, registration_config(cfg, spacing_mm, "mutual-information"))
        return res.to_field(ref.shape, ref.spacing), res.report
    if final == "graphcut":
        mrf = MrfParams(cfg["vem"]["beta1"], cfg["vem"]["beta2"])
        gc = map_registration_graphcut(ref, prediction, landmarks, mrf, catalog,
                                       max_passes=int(cfg["graphcut"]["max_passes"]))
        return gc.field, {"final": "graphcut", "energy": gc.energy, "pass_energies": gc.pass_energies}
    if final != "ffd":
        raise ValueError(f"unknown final step {final!r}")
    res = optimize_ffd(ref, prediction, landmarks, registration_config(cfg, spacing_mm, "synthesis"))
    return res.to_field(ref.shape, ref.spacing), res.report


def synthesize(pairs, landmarks, method: str, cfg: dict, seed: int, image_ids=None):
    """Run VEM jointly (one model for all pairs) or independently (one per pair).

    Returns one VemResult per pair (shared for the joint mode).
    """
    vc = vem_config(cfg, seed)
    if method == "joint":
        res = run_vem(pairs, landmarks, vc, image_ids=image_ids)
        return [res] * len(pairs)
    if method == "independent":
        return [run_vem([p], [lm], vc) for p, lm in zip(pairs, landmarks)]
    raise ValueError(f"method {method!r} does not use synthesis")


# --- sweeps -----------------------------------------------------------------------


@dataclass
class SweepGrid:
    spacings: tuple = (3.0, 6.0, 9.0, 12.0, 15.0, 18.0, 21.0)
    landmark_counts: tuple = (0,)
    methods: tuple = METHODS
    final: str = "ffd"

    def __post_init__(self):
        bad = [m for m in self.methods if m not in METHODS]
        if bad:
            raise ValueError(f"unknown method(s) {bad}")
        if not self.spacings or not self.landmark_counts or not self.methods:
            raise ValueError("empty sweep grid")


@dataclass
class ErrorReport:
    """Per-pair errors for every sweep cell plus the aggregated table rows."""

    rows: list = field(default_factory=list)
    per_pair: list = field(default_factory=list)

    def add(self, sigma_v, spacing, n_landmarks, method, errors, runtime, seed):
        errors = np.asarray(errors, dtype=np.float64).reshape(-1, 2)
        for i, (mean, mx) in enumerate(errors):
            self.per_pair.append({"sigma_v": sigma_v, "spacing_mm": spacing, "n_landmarks": n_landmarks,
                                  "method": method, "pair": i, "mean_err_mm": mean, "max_err_mm": mx, "seed": seed})
        self.rows.append({
            "sigma_v": float(sigma_v),
            "spacing_mm": float(spacing),
            "n_landmarks": int(n_landmarks),
            "method": method,
            "mean_err_mm": float(errors[:, 0].mean()),
            "max_err_mm": float(errors[:, 1].mean()),
            "runtime_s": float(runtime),
            "seed": int(seed),
        })

    def lookup(self, **keys) -> list:
        return [r for r in self.rows if all(r[k] == v for k, v in keys.items())]

    def to_csv(self) -> str:
        buf = io.StringIO()
        wr = csv.writer(buf, lineterminator="\n")
        wr.writerow(CSV_HEADER)
        for r in self.rows:
            wr.writerow([repr(r["sigma_v"]), repr(r["spacing_mm"]), r["n_landmarks"], r["method"],
                         repr(r["mean_err_mm"]), repr(r["max_err_mm"]), repr(r["runtime_s"]), r["seed"]])
        return buf.getvalue()


def load_dataset(dataset_dir) -> tuple[list, list]:
    """Read every ``pair_<i>`` directory; unreadable pairs are skipped and counted."""
    root = Path(dataset_dir)
    if not root.is_dir():
        raise FileNotFoundError(f"dataset directory {root} not found")
    dirs = sorted((d for d in root.iterdir() if d.is_dir() and d.name.startswith("pair_")),
                  key=lambda d: int(d.name.split("_", 1)[1]) if d.name.split("_", 1)[1].isdigit() else -1)
    pairs, ids, skipped = [], [], 0
    for d in dirs:
        try:
            pairs.append(read_pair(d))
            ids.append(int(d.name.split("_", 1)[1]))
        except (OSError, ValueError, KeyError) as exc:
            skipped += 1
            log.warning("skipping %s: %s", d, exc)
    if skipped:
        log.warning("skipped %d unreadable pair(s)", skipped)
    return pairs, ids


def _register_task(args):
    ref, flo, pred, lm, method, spacing, cfg, final, catalog, truth, mask = args
    est, _ = final_registration(ref, flo, pred, lm, method, spacing, cfg, final, catalog)
    return registration_error(est, truth, mask)


def _map(tasks, workers: int):
    if workers > 1 and len(tasks) > 1:
        with ProcessPoolExecutor(max_workers=workers) as ex:
            return list(ex.map(_register_task, tasks))
    return [_register_task(t) for t in tasks]


def run_sweep(pairs, grid: SweepGrid, cfg: dict | None = None, seed: int = 0, image_ids=None,
              workers: int = 1, record_runtime: bool = True) -> ErrorReport:
    """Evaluate every (landmark count, method, spacing) cell on a list of BenchmarkPairs.

    Synthesis is computed once per (landmark count, method) and shared by all
    control-point spacings. Rows come out in grid order: landmark counts, then
    methods, then spacings. Per-cell runtimes include the share of the
    synthesis time spread evenly over the spacings.
    """
    cfg = cfg or default_config()
    if not pairs:
        raise ValueError("no image pairs to evaluate")
    ids = list(range(len(pairs))) if image_ids is None else list(image_ids)
    sigma_v = float(pairs[0].meta.get("config", {}).get("sigma_v", float("nan")))
    catalog = vem_config(cfg, seed).catalog
    report = ErrorReport()
    for n_lm in grid.landmark_counts:
        lms = [p.landmarks.subset(n_lm) if n_lm > 0 else None for p in pairs]
        for method in grid.methods:
            t0 = time.perf_counter()
            preds = [None] * len(pairs)
            if method != "mi":
                results = synthesize([(p.reference, p.floating) for p in pairs], lms, method, cfg, seed, ids)
                preds = [r.predictions[0 if method == "independent" else i] for i, r in enumerate(results)]
            synth_time = (time.perf_counter() - t0) / len(grid.spacings)
            for spacing in grid.spacings:
                t1 = time.perf_counter()
                tasks = [(p.reference, p.floating, pred, lm, method, spacing, cfg, grid.final, catalog, p.truth, p.mask)
                         for p, pred, lm in zip(pairs, preds, lms)]
                errors = _map(tasks, workers)
                runtime = synth_time + time.perf_counter() - t1 if record_runtime else 0.0
                report.add(sigma_v, spacing, n_lm, method, errors, runtime, seed)
                log.info("sigma_v=%g spacing=%g n_landmarks=%d %s: mean %.3f mm, max %.3f mm",
                         sigma_v, spacing, n_lm, method, report.rows[-1]["mean_err_mm"], report.rows[-1]["max_err_mm"])
    return report


def run_sweep_dir(dataset_dir, grid: SweepGrid, out_csv, cfg: dict | None = None, seed: int = 0, workers: int = 1,
                  record_runtime: bool = True) -> ErrorReport:
    pairs, ids = load_dataset(dataset_dir)
    if not pairs:
        raise ValueError(f"no readable pairs in {dataset_dir}")
    report = run_sweep(pairs, grid, cfg, seed, ids, workers, record_runtime)
    if not report.rows:
        raise ValueError("sweep produced no results")
    Path(out_csv).write_text(report.to_csv())
    return report

