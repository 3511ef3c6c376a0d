"""Run orchestration: training loop, stopping rules and artifact files.

A run directory holds

``resolved_config.json``
    the configuration with every default and data-dependent value filled in;
``trace.csv``
    one row per step with the loss and gradient norm at that step's Q;
``correlations.csv``
    FP and PP correlations of the tracked patches at every logged step;
``phases.json``
    phase labels and crossing steps per tracked (patch, cluster) pair;
``report.json``
    end-of-training checks, attention diversity and run status;
``q_final.npy`` and ``checkpoints/q_step*.npy``
    dumps of the full attention matrix.

The formats are described in ``docs/formats.md``.
"""

from __future__ import annotations

import csv
import json
import logging
import math
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import kernels
from .attention import CORRELATION_CSV_FIELDS, DivergenceError, extract_correlations
from .cl import ClTrainer, default_noise, default_regularization, default_temperature
from .config import ExperimentConfig
from .data import DataSpec, draw_batch, enumerate_batch, info_gap
from .dynamics import (
    PhaseThresholds,
    PhaseTracker,
    cl_theorem_check,
    mae_theorem_check,
    model_diversity,
    threshold_levels,
)
from .mae import MaeTrainer

__all__ = [
    "TRACE_CSV_SCHEMA",
    "TRACE_CSV_FIELDS",
    "REPORT_SCHEMA",
    "EXIT_OK",
    "EXIT_CONFIG",
    "EXIT_DIVERGED",
    "RunResult",
    "resolve_config",
    "auto_learning_rate",
    "run_experiment",
]

log = logging.getLogger(__name__)

TRACE_CSV_SCHEMA = 1
TRACE_CSV_FIELDS = (
    "schema",
    "step",
    "loss",
    "grad_norm",
    "own_attn_mean",
    "infonce",
    "regularizer",
    "ell_pos_mean",
)
REPORT_SCHEMA = 1

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DIVERGED = 3

AUTO_PROBE_STEPS = 50
AUTO_EXPONENTS = range(12, -11, -1)


@dataclass
class RunResult:
    output_dir: Path
    exit_code: int
    steps: int
    stop_reason: str
    report: dict


# ---------------------------------------------------------------------------
# Resolution of data-dependent defaults
# ---------------------------------------------------------------------------


def _probe_losses(cfg: ExperimentConfig, spec: DataSpec, eta: float, steps: int) -> list[float]:
    """Losses of ``steps`` descent steps on a fixed objective at step size ``eta``."""
    losses: list[float] = []
    if cfg.objective == "mae":
        if cfg.mode == "exact":
            batch = enumerate_batch(spec, cfg.mask_ratio)
        else:
            batch = draw_batch(spec, cfg.batch_size, cfg.mask_ratio, np.random.default_rng([cfg.seed, 9]))
        W = np.zeros((spec.num_patches, spec.dim))
        for _ in range(steps + 1):
            res = kernels.mae_masked_terms(
                W, spec.area_index, spec.num_areas, batch.cluster, batch.z, batch.unmasked, batch.weight, backend=cfg.backend
            )
            losses.append(float(res.loss.sum()))
            if not np.all(np.isfinite(res.grad)) or not math.isfinite(losses[-1]):
                return losses + [math.inf]
            W += eta * res.grad
            if len(losses) > 1 and losses[-1] > losses[-2]:
                break
        return losses
    trainer = ClTrainer(
        spec,
        eta,
        tau=cfg.temperature,
        lam=cfg.regularization,
        ratio=cfg.augment_ratio,
        noise=cfg.noise_variance,
        num_negatives=cfg.num_negatives,
        batch_size=min(cfg.batch_size, 64),
        pool_size=cfg.negative_pool,
        mode=cfg.mode,
        seed=cfg.seed + 9,
    )
    for _ in range(steps + 1):
        try:
            losses.append(trainer.step().loss.total)
        except DivergenceError:
            return losses + [math.inf]
        if len(losses) > 1 and losses[-1] > losses[-2]:
            break
    return losses


def auto_learning_rate(cfg: ExperimentConfig, spec: DataSpec, steps: int = AUTO_PROBE_STEPS) -> float:
    """Largest power of two whose first ``steps`` steps never raise the loss.

    The probe runs on a fixed objective (the enumerated batch in exact mode,
    one frozen Monte Carlo batch otherwise), so the test is deterministic.
    """
    for e in AUTO_EXPONENTS:
        eta = 2.0**e
        losses = _probe_losses(cfg, spec, eta, steps)
        if len(losses) == steps + 1 and all(b <= a + 1e-12 * abs(a) for a, b in zip(losses, losses[1:])):
            return eta
    raise DivergenceError("no step size in the probe range keeps the loss monotone")


def resolve_config(cfg: ExperimentConfig) -> ExperimentConfig:
    """Copy of ``cfg`` with every data-dependent default made explicit."""
    spec = cfg.build_spec()
    doc = cfg.to_dict()
    if cfg.objective == "cl":
        if doc["temperature"] is None:
            doc["temperature"] = default_temperature(spec.dim)
        if doc["regularization"] is None:
            doc["regularization"] = default_regularization(spec.num_patches)
        if doc["noise_variance"] is None:
            doc["noise_variance"] = default_noise(spec.dim)
        if doc["negative_pool"] is None and cfg.mode == "mc":
            doc["negative_pool"] = max(2 * cfg.batch_size, 16 * cfg.num_negatives)
    else:
        doc["backend"] = doc["backend"] or kernels.BACKEND
    out = ExperimentConfig(**doc)
    if out.learning_rate == "auto":
        out.learning_rate = auto_learning_rate(out, spec)
    out.thresholds = PhaseThresholds.from_dict(out.thresholds).to_dict()
    return out


# ---------------------------------------------------------------------------
# Training loop
# ---------------------------------------------------------------------------


class _Driver:
    """Uniform evaluate/update interface over the two trainers."""

    def __init__(self, cfg: ExperimentConfig, spec: DataSpec) -> None:
        self.objective = cfg.objective
        if cfg.objective == "mae":
            self.trainer = MaeTrainer(
                spec, float(cfg.learning_rate), cfg.mask_ratio, cfg.mode, batch_size=cfg.batch_size, seed=cfg.seed, backend=cfg.backend
            )
        else:
            self.trainer = ClTrainer(
                spec,
                float(cfg.learning_rate),
                tau=cfg.temperature,
                lam=cfg.regularization,
                ratio=cfg.augment_ratio,
                noise=cfg.noise_variance,
                num_negatives=cfg.num_negatives,
                batch_size=cfg.batch_size,
                pool_size=cfg.negative_pool,
                mode=cfg.mode,
                resample=cfg.resample,
                seed=cfg.seed,
            )

    @property
    def Q(self) -> np.ndarray:
        return self.trainer.weights.Q

    @property
    def pp_by_cluster(self) -> np.ndarray | None:
        return getattr(self.trainer, "pp_by_cluster", None)

    def advance(self, update: bool) -> tuple:
        """Trace row for the current Q; moves Q one step when ``update``."""
        t = self.trainer
        step = t.weights.step
        if self.objective == "mae":
            if update:
                s = t.step()
                loss, grad_norm, own = s.loss, s.grad_norm, s.own_attn
            else:
                r = t.evaluate()
                loss, grad_norm, own = float(r.loss.sum()), float(np.linalg.norm(r.grad)), r.own_attn
            own_mean = float(np.nanmean(own)) if np.isfinite(own).any() else float("nan")
            return (TRACE_CSV_SCHEMA, step, loss, grad_norm, own_mean, "", "", "")
        if update:
            s = t.step()
            rep, grad_norm = s.loss, s.grad_norm
        else:
            g = t.gradient()
            rep, grad_norm = g.loss, float(np.linalg.norm(g.full))
        if not math.isfinite(grad_norm):
            raise DivergenceError(f"non-finite gradient at step {step}")
        return (TRACE_CSV_SCHEMA, step, rep.total, grad_norm, "", rep.infonce, rep.regularizer, float(np.mean(rep.ell_pos)))


# steps between end-of-training checks once every phase tracker has converged
CONVERGED_CHECK_INTERVAL = 25


def _checkpoint_steps(max_steps: int, count: int) -> set[int]:
    if count <= 0:
        return set()
    return {round(max_steps * i / count) for i in range(count + 1)}


def _write_json(path: Path, doc: dict) -> None:
    path.write_text(json.dumps(doc, indent=2, sort_keys=True, allow_nan=True) + "\n")


def run_experiment(cfg: ExperimentConfig, output_dir: str | Path | None = None) -> RunResult:
    """Train, log and check one configuration; see the module docstring.

    Numerical divergence is reported through the exit code (3) after the
    artifacts written so far are flushed; the theorem checks are reported in
    ``report.json`` and never change the exit code.
    """
    started = time.perf_counter()
    cfg = resolve_config(cfg)
    spec = cfg.build_spec()
    out = Path(output_dir if output_dir is not None else cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "checkpoints").mkdir(exist_ok=True)
    cfg.output_dir = str(out)
    _write_json(out / "resolved_config.json", cfg.to_dict())

    patches = cfg.patches()
    thresholds = PhaseThresholds.from_dict(cfg.thresholds)
    trackers = [PhaseTracker(spec, p, k, thresholds) for p in patches for k in range(spec.num_clusters)]
    driver = _Driver(cfg, spec)
    ckpt_steps = _checkpoint_steps(cfg.max_steps, cfg.checkpoints)
    fp_trace: list[np.ndarray] = []
    stop_reason = "budget"
    exit_code = EXIT_OK
    error = None
    last_row: tuple | None = None
    next_check = 0

    with open(out / "trace.csv", "w", newline="") as ft, open(out / "correlations.csv", "w", newline="") as fc:
        trace = csv.writer(ft)
        corr = csv.writer(fc)
        trace.writerow(TRACE_CSV_FIELDS)
        corr.writerow(CORRELATION_CSV_FIELDS)
        step = 0
        Q = driver.Q.copy()
        try:
            while True:
                step = driver.trainer.weights.step
                Q = driver.Q.copy()
                snap = extract_correlations(Q, spec, step, driver.pp_by_cluster)
                final = step >= cfg.max_steps
                row = driver.advance(update=not final)
                if cfg.stop_when == "grad_norm" and row[3] < cfg.grad_tol:
                    final, stop_reason = True, "grad_norm"
                trace.writerow(row)
                last_row = row
                logged = final or step % cfg.log_every == 0
                if logged:
                    corr.writerows(snap.csv_rows(spec, patches))
                    fp_trace.append(snap.fp)
                    for tr in trackers:
                        phi = snap.fp[tr.patch, tr.cluster]
                        tr.update(step, float(phi[0]), float(phi[spec.area_of(tr.cluster, tr.patch)]))
                    if cfg.stop_when == "converged" and step >= next_check and all(tr.converged for tr in trackers):
                        if cfg.objective != "mae" or _mae_check(cfg, spec, Q, patches).passed:
                            final, stop_reason = True, "converged"
                        else:
                            next_check = step + CONVERGED_CHECK_INTERVAL
                if step in ckpt_steps or final:
                    np.save(out / "checkpoints" / f"q_step{step:08d}.npy", Q)
                if final:
                    break
                if step % 1000 == 0 and step:
                    log.info("step %d loss %.6g grad %.3g", step, row[2], row[3])
        except DivergenceError as exc:
            exit_code = EXIT_DIVERGED
            stop_reason = "diverged"
            error = str(exc)
            log.error("diverged: %s", exc)

    np.save(out / "q_final.npy", Q)

    phases = {
        "schema": REPORT_SCHEMA,
        "levels": threshold_levels(spec, thresholds),
        "thresholds": thresholds.to_dict(),
        "patches": [tr.series().to_dict() for tr in trackers],
    }
    _write_json(out / "phases.json", phases)

    report: dict = {
        "schema": REPORT_SCHEMA,
        "name": cfg.name,
        "objective": cfg.objective,
        "mode": cfg.mode,
        "status": "diverged" if exit_code == EXIT_DIVERGED else "ok",
        "error": error,
        "stop_reason": stop_reason,
        "final_step": int(step),
        "learning_rate": float(cfg.learning_rate),
        "spec": {
            "num_patches": spec.num_patches,
            "num_clusters": spec.num_clusters,
            "dim": spec.dim,
            "area_sizes": [int(s) for s in spec.area_sizes],
            "kappa_c": spec.kappa_c,
            "kappa_s": spec.kappa_s,
            "info_gap": info_gap(spec),
        },
        "final": None,
        "theorem_check": None,
        "diversity": None,
        "phase_summary": _phase_summary(trackers),
    }
    if last_row is not None:
        report["final"] = dict(zip(TRACE_CSV_FIELDS[1:], [v if v != "" else None for v in last_row[1:]]))
    if exit_code == EXIT_OK:
        if cfg.objective == "mae":
            chk = _mae_check(cfg, spec, Q, patches)
        else:
            chk = cl_theorem_check(
                spec,
                Q,
                np.array(fp_trace),
                ratio=cfg.augment_ratio,
                noise=cfg.noise_variance,
                num_samples=cfg.eval_samples,
                seed=cfg.seed,
            )
            chk.summary["checkpoint_reached"] = stop_reason == "grad_norm"
        report["theorem_check"] = chk.to_dict()
        side = math.isqrt(spec.num_patches)
        if side * side == spec.num_patches:
            report["diversity"] = {
                "metric": model_diversity(spec, Q, cfg.objective, cfg.diversity_n),
                "n": min(cfg.diversity_n, spec.num_patches),
            }
    report["runtime_seconds"] = time.perf_counter() - started
    _write_json(out / "report.json", report)
    return RunResult(out, exit_code, int(step), stop_reason, report)


def _mae_check(cfg: ExperimentConfig, spec: DataSpec, Q: np.ndarray, patches: list[int]):
    return mae_theorem_check(
        spec, Q, cfg.mask_ratio, cfg.epsilon, cfg.locality_factor, patches, num_masks=cfg.eval_masks, seed=cfg.seed
    )


def _phase_summary(trackers: list[PhaseTracker]) -> dict:
    out: dict[str, dict[str, int]] = {}
    for tr in trackers:
        seq = "->".join(tr.series().sequence)
        bucket = out.setdefault(tr.name, {})
        bucket[seq] = bucket.get(seq, 0) + 1
    return out
