"""Static SVG figures from run directories."""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .config import ExperimentConfig  # noqa: E402
from .dynamics import cl_attention_matrix, mae_attention_matrix  # noqa: E402

__all__ = ["MissingArtifactError", "RunData", "load_run", "plot_run", "plot_diversity"]

plt.rcParams["svg.hashsalt"] = "vitssl"
_SVG_META = {"Date": None, "Creator": None}


class MissingArtifactError(FileNotFoundError):
    """A run directory lacks a file the figure needs."""


@dataclass
class RunData:
    path: Path
    config: ExperimentConfig
    report: dict
    trace: dict[str, np.ndarray]
    correlations: dict[str, np.ndarray]
    checkpoints: list[tuple[int, Path]]

    @property
    def label(self) -> str:
        return f"{self.config.name} ({self.config.objective})"


def _read_csv(path: Path) -> dict[str, np.ndarray]:
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None:
            return {}
        rows = list(reader)
    cols: dict[str, np.ndarray] = {}
    for i, name in enumerate(header):
        cols[name] = np.array([float(r[i]) if r[i] != "" else np.nan for r in rows])
    return cols


def load_run(run_dir: str | Path) -> RunData:
    root = Path(run_dir)
    needed = ["resolved_config.json", "report.json", "trace.csv", "correlations.csv"]
    missing = [n for n in needed if not (root / n).is_file()]
    if missing:
        raise MissingArtifactError(f"{root}: missing {', '.join(missing)}")
    cfg = ExperimentConfig.from_dict(json.loads((root / "resolved_config.json").read_text()))
    ckpts = []
    for f in sorted((root / "checkpoints").glob("q_step*.npy")):
        ckpts.append((int(f.stem[len("q_step") :]), f))
    return RunData(
        root,
        cfg,
        json.loads((root / "report.json").read_text()),
        _read_csv(root / "trace.csv"),
        _read_csv(root / "correlations.csv"),
        ckpts,
    )


def _save(fig, path: Path) -> Path:
    fig.savefig(path, format="svg", metadata=_SVG_META)
    plt.close(fig)
    return path


def _representative_series(run: RunData) -> list[tuple[int, int, int]]:
    """A few (patch, cluster, area) triples of cluster 0: local patches first, then one global."""
    c = run.correlations
    if not c or len(c.get("step", [])) == 0:
        return []
    sel = c["cluster"] == 0
    seen: dict[int, int] = {}
    for p, a in zip(c["patch"][sel].astype(int), c["area"][sel].astype(int)):
        seen.setdefault(p, a)
    local = [(p, 0, a) for p, a in seen.items() if a != 0][:4]
    glob = [(p, 0, a) for p, a in seen.items() if a == 0][:1]
    return local + glob


def plot_correlations(run: RunData, path: Path) -> Path:
    fig, axes = plt.subplots(1, 2, figsize=(10, 4), sharex=True)
    c = run.correlations
    for p, k, a in _representative_series(run):
        sel = (c["patch"] == p) & (c["cluster"] == k)
        steps = c["step"][sel]
        line = axes[0].plot(steps, c["phi_global"][sel], label=f"patch {p} global")[0]
        if a != 0:
            axes[0].plot(steps, c["phi_target"][sel], ls="--", color=line.get_color(), label=f"patch {p} own area")
        axes[1].plot(steps, c["ups_area_mean"][sel], color=line.get_color(), label=f"patch {p} same area")
        axes[1].plot(steps, c["ups_offarea_mean"][sel], ls=":", color=line.get_color())
    axes[0].set_title("feature-position correlations")
    axes[1].set_title("position-position correlations (dotted: other areas)")
    for ax in axes:
        ax.set_xlabel("step")
        if ax.lines:
            ax.legend(fontsize=7)
    fig.tight_layout()
    return _save(fig, path)


def plot_loss(run: RunData, path: Path) -> Path:
    fig, ax = plt.subplots(figsize=(6, 4))
    t = run.trace
    if t and len(t.get("step", [])):
        ax.plot(t["step"], t["loss"], label="loss")
        ax.set_yscale("log" if np.all(t["loss"] > 0) else "linear")
        ax.legend()
    ax.set_xlabel("step")
    ax.set_ylabel("objective")
    ax.set_title(run.label)
    fig.tight_layout()
    return _save(fig, path)


def _attention(run: RunData, Q: np.ndarray) -> np.ndarray:
    spec = run.config.build_spec()
    build = mae_attention_matrix if run.config.objective == "mae" else cl_attention_matrix
    return build(spec, Q, 0)


def plot_heatmaps(run: RunData, path: Path) -> Path:
    n = max(len(run.checkpoints), 1)
    fig, axes = plt.subplots(1, n, figsize=(3.2 * n, 3.2), squeeze=False)
    for ax, (step, f) in zip(axes[0], run.checkpoints):
        im = ax.imshow(_attention(run, np.load(f)), cmap="viridis", vmin=0.0)
        ax.set_title(f"step {step}", fontsize=9)
        ax.set_xlabel("key patch")
        ax.set_ylabel("query patch")
        fig.colorbar(im, ax=ax, fraction=0.046)
    fig.tight_layout()
    return _save(fig, path)


def plot_diversity(runs: list[RunData], path: Path) -> Path:
    fig, ax = plt.subplots(figsize=(1.8 + 1.6 * len(runs), 4))
    labels, values = [], []
    for r in runs:
        div = r.report.get("diversity")
        if div is not None:
            labels.append(r.label)
            values.append(div["metric"])
    ax.bar(range(len(values)), values, color=["tab:blue", "tab:orange", "tab:green", "tab:red"][: len(values)] or None)
    ax.set_xticks(range(len(values)), labels, rotation=15, fontsize=8)
    ax.set_ylabel("attention diversity")
    fig.tight_layout()
    return _save(fig, path)


def plot_run(run_dir: str | Path, out_dir: str | Path | None = None, compare: str | Path | None = None) -> list[Path]:
    """Write every figure of a run (and of a paired run for the diversity bars)."""
    run = load_run(run_dir)
    out = Path(out_dir) if out_dir is not None else run.path / "figures"
    out.mkdir(parents=True, exist_ok=True)
    paths = [
        plot_correlations(run, out / "correlations.svg"),
        plot_loss(run, out / "loss.svg"),
        plot_heatmaps(run, out / "attention.svg"),
    ]
    runs = [run] + ([load_run(compare)] if compare is not None else [])
    paths.append(plot_diversity(runs, out / "diversity.svg"))
    return paths
