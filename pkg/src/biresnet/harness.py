"""Experiment driver: occlusion maps, experiment grids, feature-group importance and provenance."""
from __future__ import annotations

import csv
import hashlib
import io
import itertools
import json
import logging
import os
import platform
import sys
import traceback
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from . import __version__
from .datapipe import Dataset, prepare
from .model import BiResNet, BiResNetConfig, _atomic_write
from .motorsim import CHANNELS, FaultClass, MachineParams, SimConfig, generate_dataset
from .nncore import softmax
from .trainer import TrainConfig, evaluate, predict_logits, train

log = logging.getLogger(__name__)

# channels whose waveforms carry the fault signature, per class
FAULT_CHANNELS = {
    FaultClass.REVD: (7,),
    FaultClass.VREC: (7,),
    FaultClass.OP: (0, 3),
    FaultClass.PSC1: (0, 3),
    FaultClass.PSC2: (0, 1, 3, 4),
}

CHANNEL_GROUPS = {
    "stator_voltage": (0, 1, 2),
    "stator_current": (3, 4, 5),
    "rotor_current": (7,),
    "speed": (6,),
}


# ---------------------------------------------------------------------------
# Occlusion sensitivity
# ---------------------------------------------------------------------------

def window_starts(T: int, window: int, stride: int) -> np.ndarray:
    """Window offsets on a stride grid, plus a final flush window if the grid stops short of ``T``."""
    if window > T:
        raise ValueError(f"occlusion window {window} exceeds record length {T}")
    if window <= 0 or stride <= 0:
        raise ValueError("window and stride must be positive")
    if stride > window:
        raise ValueError(f"stride {stride} larger than window {window} would leave samples unoccluded")
    starts = list(range(0, T - window + 1, stride))
    if starts[-1] + window < T:
        starts.append(T - window)
    return np.asarray(starts, dtype=np.int64)


@dataclass
class OcclusionMap:
    scores: np.ndarray            # [C, W]
    starts: np.ndarray            # [W] window offsets in samples
    window: int
    stride: int
    label: int
    baseline: float               # unoccluded score of the true class
    metric: str = "prob"
    sample_period: float = 1e-3
    t_f: float = float("inf")
    record: str = ""
    channel_names: tuple = CHANNELS

    def argmax(self, channels=None):
        """``(channel, window index)`` of the largest importance, optionally restricted to ``channels``."""
        rows = np.arange(self.scores.shape[0]) if channels is None else np.asarray(channels)
        sub = self.scores[rows]
        c, w = np.unravel_index(int(np.argmax(sub)), sub.shape)
        return int(rows[c]), int(w)

    def window_interval(self, w: int):
        s = self.starts[w] * self.sample_period
        return s, s + self.window * self.sample_period

    def onset_interval(self):
        return self.t_f, self.t_f + self.window * self.sample_period

    def localizes_onset(self, channels=None) -> bool:
        """Whether the argmax window overlaps ``[t_f, t_f + window * sample_period]``."""
        if not np.isfinite(self.t_f):
            return False
        _, w = self.argmax(channels)
        a0, a1 = self.window_interval(w)
        b0, b1 = self.onset_interval()
        return a0 < b1 and b0 < a1

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["channel", "window", "start_sample", "start_s", "importance"])
        for c in range(self.scores.shape[0]):
            for k, s in enumerate(self.starts):
                w.writerow([self.channel_names[c], k, int(s), repr(float(s * self.sample_period)),
                            repr(float(self.scores[c, k]))])
        return buf.getvalue()

    def to_svg(self, cell: int = 12) -> str:
        return heatmap_svg(self.scores, list(self.channel_names), cell=cell,
                           title=f"{self.record} class={self.label} metric={self.metric}")


def occlusion_map(model: BiResNet, x: np.ndarray, label: int, window: int = 50, stride: int = 25, *,
                  metric: str = "prob", all_channels: bool = False, batch_size: int = 64,
                  sample_period: float = 1e-3, t_f: float = float("inf"), record: str = "") -> OcclusionMap:
    """Importance of each (channel, window): true-class score drop when that patch is zeroed.

    ``metric="prob"`` uses the softmax probability, ``"logit"`` the raw
    logit. With ``all_channels`` every channel is zeroed together and the
    map has a single row.
    """
    if metric not in ("prob", "logit"):
        raise ValueError("metric must be 'prob' or 'logit'")
    x = np.asarray(x, dtype=model.dtype)
    C, T = x.shape
    starts = window_starts(T, window, stride)
    rows = 1 if all_channels else C
    variants = np.repeat(x[None], rows * len(starts), axis=0)
    for r in range(rows):
        for k, s in enumerate(starts):
            v = variants[r * len(starts) + k]
            if all_channels:
                v[:, s:s + window] = 0
            else:
                v[r, s:s + window] = 0

    def score(batch):
        logits = predict_logits(model, batch, batch_size).astype(np.float64)
        return (softmax(logits) if metric == "prob" else logits)[:, label]

    base = float(score(x[None])[0])
    scores = (base - score(variants)).reshape(rows, len(starts))
    names = ("all",) if all_channels else tuple(CHANNELS[:C]) if C == len(CHANNELS) else tuple(f"ch{c}" for c in range(C))
    return OcclusionMap(scores, starts, window, stride, int(label), base, metric, sample_period, t_f, record, names)


def localization_rate(model: BiResNet, split: Dataset, window: int = 50, stride: int = 25,
                      metric: str = "prob", restrict_to_fault_channels: bool = True):
    """Fraction of correctly classified faulted records whose argmax window overlaps the onset.

    Returns ``(rate, n_eligible, maps)``.
    """
    pred = np.argmax(predict_logits(model, split.X), axis=1)
    hits, maps = [], []
    for i in range(len(split)):
        label = int(split.labels[i])
        if label == FaultClass.NF or pred[i] != label:
            continue
        m = occlusion_map(model, split.X[i], label, window, stride, metric=metric,
                          sample_period=split.sample_period, t_f=float(split.t_f[i]), record=f"record{i}")
        channels = FAULT_CHANNELS[FaultClass(label)] if restrict_to_fault_channels else None
        hits.append(m.localizes_onset(channels))
        maps.append(m)
    rate = float(np.mean(hits)) if hits else float("nan")
    return rate, len(hits), maps


def _color(v: float, vmax: float) -> str:
    # linear diverging scale: blue (negative) - white - red (positive)
    t = 0.0 if vmax == 0 else max(-1.0, min(1.0, v / vmax))
    if t >= 0:
        r, g, b = 255, int(255 * (1 - t)), int(255 * (1 - t))
    else:
        r, g, b = int(255 * (1 + t)), int(255 * (1 + t)), 255
    return f"#{r:02x}{g:02x}{b:02x}"


def heatmap_svg(scores: np.ndarray, row_names, cell: int = 12, title: str = "") -> str:
    rows, cols = scores.shape
    left, top = 60, 24
    vmax = float(np.max(np.abs(scores))) if scores.size else 0.0
    width, height = left + cols * cell + 10, top + rows * cell + 10
    out = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}">',
           f'<text x="4" y="14" font-size="11" font-family="monospace">{title} max={vmax:.4g}</text>']
    for r in range(rows):
        out.append(f'<text x="4" y="{top + r * cell + cell - 2}" font-size="10" '
                   f'font-family="monospace">{row_names[r]}</text>')
        for c in range(cols):
            out.append(f'<rect x="{left + c * cell}" y="{top + r * cell}" width="{cell}" height="{cell}" '
                       f'fill="{_color(float(scores[r, c]), vmax)}"/>')
    out.append("</svg>")
    return "\n".join(out) + "\n"


# ---------------------------------------------------------------------------
# Experiment cells and grids
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class CellConfig:
    """Everything that defines one grid cell apart from the seed."""

    resolution_ms: int = 1
    snr_db: float | None = None
    intralink_n: int = 1
    block_type: str = "st"
    channels: tuple | None = None
    model: dict = field(default_factory=dict, hash=False)
    train: dict = field(default_factory=dict, hash=False)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["channels"] = None if self.channels is None else list(self.channels)
        return d

    def config_hash(self, seeds=()) -> str:
        payload = json.dumps({"cell": self.to_dict(), "seeds": list(seeds)}, sort_keys=True)
        return hashlib.sha256(payload.encode()).hexdigest()[:16]

    def model_config(self, input_channels: int) -> BiResNetConfig:
        base = BiResNetConfig.from_dict({**BiResNetConfig().to_dict(), **self.model})
        return base.replace(intralink_n=self.intralink_n, block_type=self.block_type,
                            input_channels=input_channels)

    def train_config(self, seed: int) -> TrainConfig:
        return TrainConfig.from_dict({**self.train, "seed": seed, "intralink_n": self.intralink_n})


AXES = {
    "resolution_ms": (1, 2, 5, 10, 20),
    "snr_db": (-5, -3, -1, 1, 3, 5, None),
    "intralink_n": (0, 1, 2, 3, 4),
    "block_type": ("st", "plain"),
}


@dataclass
class ExperimentGrid:
    """Cartesian product of ``axes`` applied on top of ``base``; each cell is run for every seed."""

    base: CellConfig = field(default_factory=CellConfig)
    axes: dict = field(default_factory=dict)
    seeds: tuple = (0, 1, 2)
    per_class: int = 100
    machine: dict = field(default_factory=dict)

    def __post_init__(self):
        for name, values in self.axes.items():
            if name not in AXES and name != "channels":
                raise ValueError(f"unknown grid axis {name!r}")

    def cells(self) -> list[CellConfig]:
        names = list(self.axes)
        return [replace(self.base, **dict(zip(names, combo)))
                for combo in itertools.product(*(self.axes[n] for n in names))]


def dataset_for_seed(seed: int, per_class: int = 100, machine: dict | None = None,
                     sim: SimConfig | None = None) -> Dataset:
    params = MachineParams.from_dict(machine) if machine else MachineParams()
    return Dataset.from_records(generate_dataset(params, per_class=per_class, seed=seed, sim=sim or SimConfig()))


def run_cell(raw: Dataset, cell: CellConfig, seed: int, out_dir=None, return_model: bool = False):
    """Prepare the seed's shared dataset for this cell, train, and return the test accuracy."""
    factor = int(round(cell.resolution_ms * 1e-3 / raw.sample_period))
    data = raw if cell.channels is None else raw.select_channels(cell.channels)
    tr, va, te, _ = prepare(data, downsample_factor=factor, snr_db=cell.snr_db,
                            noise_seed=seed, split_seed=seed)
    model = BiResNet(cell.model_config(data.n_channels), seed=seed, dtype=np.float32)
    model, history = train(model, tr, va, cell.train_config(seed), out_dir=out_dir)
    acc, cm = evaluate(model, te)
    if return_model:
        return acc, cm, history, model, te
    return acc, cm, history


GRID_COLUMNS = ["cell_id", "config_hash", "resolution_ms", "snr_db", "intralink_n", "block_type", "channels",
                "seeds", "n_ok", "mean_acc", "std_acc", "accs", "status", "error"]


def _run_job(args):
    raw, cell, seed, hist_path = args
    try:
        acc, _, history = run_cell(raw, cell, seed)
        if hist_path is not None:
            history.write_csv(hist_path)
        return acc, None
    except Exception as exc:  # a failing cell is recorded, the grid keeps going
        log.warning("cell failed: %s", exc)
        return None, f"{type(exc).__name__}: {exc}".replace("\n", " ")


def run_grid(grid: ExperimentGrid, out_dir=None, datasets: dict | None = None, n_jobs: int = 1):
    """Run every cell for every seed. Returns the result rows; writes ``grid.csv`` and histories to ``out_dir``."""
    datasets = dict(datasets or {})
    for seed in grid.seeds:
        if seed not in datasets:
            datasets[seed] = dataset_for_seed(seed, grid.per_class, grid.machine)
    cells = grid.cells()
    hist_dir = None
    if out_dir is not None:
        hist_dir = os.path.join(out_dir, "histories")
        os.makedirs(hist_dir, exist_ok=True)
    jobs = []
    for ci, cell in enumerate(cells):
        for seed in grid.seeds:
            hp = None if hist_dir is None else os.path.join(hist_dir, f"cell{ci:03d}_seed{seed}.csv")
            jobs.append((datasets[seed], cell, seed, hp))
    if n_jobs > 1:
        with ProcessPoolExecutor(n_jobs) as pool:
            results = list(pool.map(_run_job, jobs))
    else:
        results = [_run_job(j) for j in jobs]

    rows = []
    per = len(grid.seeds)
    for ci, cell in enumerate(cells):
        res = results[ci * per:(ci + 1) * per]
        accs = [a for a, _ in res if a is not None]
        errors = [e for _, e in res if e is not None]
        rows.append({
            "cell_id": ci,
            "config_hash": cell.config_hash(grid.seeds),
            "resolution_ms": cell.resolution_ms,
            "snr_db": "clean" if cell.snr_db is None else cell.snr_db,
            "intralink_n": cell.intralink_n,
            "block_type": cell.block_type,
            "channels": "all" if cell.channels is None else "+".join(map(str, cell.channels)),
            "seeds": " ".join(map(str, grid.seeds)),
            "n_ok": len(accs),
            "mean_acc": float(np.mean(accs)) if accs else float("nan"),
            "std_acc": float(np.std(accs)) if accs else float("nan"),
            "accs": [float(a) if a is not None else None for a, _ in res],
            "status": "ok" if not errors else ("partial" if accs else "failed"),
            "error": "; ".join(errors),
        })
    if out_dir is not None:
        _atomic_write(os.path.join(out_dir, "grid.csv"), grid_csv(rows).encode())
    return rows


def grid_csv(rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(GRID_COLUMNS)
    for r in rows:
        vals = []
        for col in GRID_COLUMNS:
            v = r[col]
            if col == "accs":
                v = " ".join("nan" if a is None else repr(a) for a in v)
            elif isinstance(v, float):
                v = repr(v)
            vals.append(v)
        w.writerow(vals)
    return buf.getvalue()


def feature_importance(grid: ExperimentGrid, out_dir=None, datasets=None, include_full: bool = True,
                       n_jobs: int = 1):
    """One training run per channel group (plus the full 8-channel input) on the same recipe."""
    groups = dict(CHANNEL_GROUPS)
    axes = {"channels": list(groups.values()) + ([None] if include_full else [])}
    rows = run_grid(replace(grid, axes=axes), out_dir=out_dir, datasets=datasets, n_jobs=n_jobs)
    names = list(groups) + (["all"] if include_full else [])
    for r, name in zip(rows, names):
        r["group"] = name
    return rows


# ---------------------------------------------------------------------------
# Provenance
# ---------------------------------------------------------------------------

def git_blob_hash(path) -> str:
    """Content hash in git's blob format (``sha1("blob <len>\\0" + bytes)``)."""
    with open(path, "rb") as fh:
        data = fh.read()
    return hashlib.sha1(b"blob %d\0" % len(data) + data).hexdigest()


def write_provenance(out_dir, command: str, config: dict, seeds: dict, inputs=()) -> str:
    payload = {
        "command": command,
        "argv": sys.argv,
        "package_version": __version__,
        "python": platform.python_version(),
        "numpy": np.__version__,
        "config": config,
        "seeds": seeds,
        "inputs": {os.fspath(p): git_blob_hash(p) for p in inputs if os.path.isfile(p)},
    }
    path = os.path.join(out_dir, f"provenance_{command}.json")
    _atomic_write(path, json.dumps(payload, indent=2, sort_keys=True, default=str).encode())
    return path


def format_exception(exc: BaseException) -> str:
    return "".join(traceback.format_exception_only(type(exc), exc)).strip().replace("\n", " ")


# ---------------------------------------------------------------------------
# Gradient suite
# ---------------------------------------------------------------------------

LAYER_TOLERANCE = 1e-5
NETWORK_TOLERANCE = 1e-4


def _layer_cases():
    from .intralink import IntraLinkReLU
    from .model import BiResidualBlock, STBlock, STBlockConfig
    from .nncore import BatchNorm1d, Conv1d, Dense, GlobalMaxPool, ReLU

    f64 = np.float64
    cases = {
        "conv1d": (lambda g: Conv1d(3, 4, 5, bias=True, rng=g, dtype=f64), (2, 3, 9)),
        "batchnorm": (lambda g: BatchNorm1d(4, dtype=f64), (3, 4, 6)),
        "relu": (lambda g: ReLU(), (2, 4, 6)),
        "global_max_pool": (lambda g: GlobalMaxPool(), (2, 4, 6)),
        "dense": (lambda g: Dense(5, 3, rng=g, dtype=f64), (4, 5)),
        "st_block": (lambda g: STBlock(STBlockConfig(3, 4), g, dtype=f64), (2, 3, 9)),
        "biresidual_block": (lambda g: BiResidualBlock(3, 4, BiResNetConfig(), g, dtype=f64), (2, 3, 9)),
        "biresidual_identity": (lambda g: BiResidualBlock(4, 4, BiResNetConfig(intralink_n=3), g, dtype=f64),
                                (2, 4, 9)),
    }
    for n in range(1, 5):
        cases[f"intralink_n{n}"] = (lambda g, n=n: IntraLinkReLU(n), (2, 11, 5))
    return cases


def mini_biresnet_config() -> BiResNetConfig:
    return BiResNetConfig(stages=(8, 8, 8, 8))


NETWORK_COORDS_PER_TENSOR = 8


def _network_error(seed: int, h: float, report=None, max_coords=NETWORK_COORDS_PER_TENSOR) -> float:
    """End-to-end check of the miniature network (filters 8/8/8/8, T=32, B=2) under cross-entropy.

    Tensors with more than ``max_coords`` elements are probed at a seeded
    random sample of coordinates; ``max_coords=None`` probes everything.
    """
    from .nncore import finite_diff_check, kink_pattern, rng_for as _rng, softmax_cross_entropy
    g = _rng(seed, "gradcheck/network")
    model = BiResNet(mini_biresnet_config(), seed=seed, dtype=np.float64)
    x = g.standard_normal((2, 8, 32))
    y = g.integers(0, 6, size=2)

    def loss():
        return softmax_cross_entropy(model.forward(x, training=True), y)[0]

    model.zero_grad()
    _, dlogits = softmax_cross_entropy(model.forward(x, training=True), y)
    dx = model.backward(dlogits)
    arrays = {"input": x, **{p.name: p.value for p in model.parameters()}}
    analytic = {"input": dx, **{p.name: p.grad.copy() for p in model.parameters()}}
    return finite_diff_check(loss, arrays, analytic, h, lambda: kink_pattern(model), report,
                             max_coords, _rng(seed, "gradcheck/coords"))


def _loss_error(seed: int, h: float) -> float:
    from .nncore import finite_diff_check, rng_for as _rng, softmax_cross_entropy
    g = _rng(seed, "gradcheck/loss")
    logits = g.standard_normal((5, 6))
    y = g.integers(0, 6, size=5)
    _, d = softmax_cross_entropy(logits, y)
    return finite_diff_check(lambda: softmax_cross_entropy(logits, y)[0], {"logits": logits}, {"logits": d}, h)


def gradient_suite(seeds=range(20), h: float = 1e-5, exhaustive: bool = False):
    """Max relative finite-difference error per layer over ``seeds``.

    Returns rows ``{"layer", "max_rel_err", "threshold", "checked", "kinks", "passed"}``;
    ``kinks`` counts coordinates skipped because the central difference
    crossed a ReLU or max-pool switch.
    """
    from .nncore import check_module_gradients, rng_for as _rng
    seeds = list(seeds)
    rows = []
    for name, (make, shape) in _layer_cases().items():
        worst, report = 0.0, {}
        for s in seeds:
            g = _rng(s, f"gradcheck/{name}")
            module = make(g)
            x = g.standard_normal(shape)
            worst = max(worst, check_module_gradients(module, x, g, training=True, h=h, report=report))
        rows.append({"layer": name, "max_rel_err": worst, "threshold": LAYER_TOLERANCE, **report})
    rows.append({"layer": "softmax_cross_entropy", "max_rel_err": max(_loss_error(s, h) for s in seeds),
                 "threshold": LAYER_TOLERANCE, "checked": 30 * len(seeds), "kinks": 0})
    report = {}
    rows.append({"layer": "biresnet_end_to_end",
                 "max_rel_err": max(_network_error(s, h, report, None if exhaustive else NETWORK_COORDS_PER_TENSOR)
                                    for s in seeds),
                 "threshold": NETWORK_TOLERANCE, **report})
    for r in rows:
        r["passed"] = bool(r["max_rel_err"] < r["threshold"])
    return rows
