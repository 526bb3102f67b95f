"""Dataset construction, training, evaluation and the swap-order ablation.

Volumes are stored [z, y, x]; the network sees them in canonical (x, y, z)
order via :meth:`Volume.to_xyz`. Per-slice statistics use the recon module's
(z, y, x) axis naming.
"""

from __future__ import annotations

import csv
import io as _io
from dataclasses import asdict, dataclass, field, replace
from typing import Iterable, Sequence

import numpy as np

from .corruption import (
    AwgnParams,
    CorruptionRanges,
    corrupt_awgn,
    corrupt_post_log,
    input_snr_db,
    sample_stack_params,
)
from .geometry import ProjectionStack, ScanGeometry, Volume, desk_geometry, fdk_reconstruct, forward_project
from .phantom import PhantomSet, PhantomSpec, generate_dataset
from .recon import MetricsReport, TvConfig, aggregate, search_tau, slicewise_stats, snr_db
from .swapnet import SwapNetConfig, SwapNetWeights, forward, init_weights, predict
from .tensor import AdamState, Tensor, adam_step, backward, scale, sub, sum_squares

MODES = ("awgn", "scatter")
METRICS = ("snr_db", "ssim", "slice_snr_z", "slice_snr_y", "slice_snr_x")
SNR_DEFINITION = "20*log10(||ref|| / ||ref - est||), capped at 300 dB"


class DatasetError(RuntimeError):
    """Corrupting or reconstructing one phantom failed."""


class TrainingFault(FloatingPointError):
    """Training hit a non-finite loss."""


def derive_seed(*keys: int) -> int:
    return int(np.random.SeedSequence([int(k) for k in keys]).generate_state(1, dtype=np.uint32)[0])


# ---------------------------------------------------------------------------
# data
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class DataConfig:
    n: int = 32
    count: int = 24
    split: tuple[float, float, float] = (20 / 24, 2 / 24, 2 / 24)
    seed: int = 0
    mode: str = "awgn"
    n_views: int = 4
    awgn_snr_db: float = 40.0
    hann_cutoff: float = 0.3

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"corruption mode must be one of {MODES}, got {self.mode!r}")
        if self.n_views < 1:
            raise ValueError(f"n_views must be >= 1, got {self.n_views}")

    def geometry(self) -> ScanGeometry:
        return desk_geometry(self.n_views, self.n)


@dataclass
class Sample:
    index: int
    proj: ProjectionStack
    fbp: Volume
    target: Volume
    record: dict


def corrupt(vol: Volume, geom: ScanGeometry, mode: str, seed: int, awgn_snr_db: float = 40.0,
            ranges: CorruptionRanges = CorruptionRanges()) -> tuple[ProjectionStack, dict]:
    """Simulate one measured stack; returns it with a record of every draw."""
    clean = forward_project(vol, geom)
    if mode == "awgn":
        params = AwgnParams(awgn_snr_db, seed)
        y = corrupt_awgn(vol, geom, params, clean=clean)
        rec = {"mode": mode, "seed": seed, "target_input_snr_db": awgn_snr_db}
        if np.isfinite(awgn_snr_db):
            rec["measured_input_snr_db"] = input_snr_db(clean.data, y.data)
        return y, rec
    if mode == "scatter":
        per_view = sample_stack_params(ranges, seed, geom.n_views)
        y = corrupt_post_log(vol, geom, per_view, clean=clean)
        return y, {"mode": mode, "seed": seed, "views": [p.to_dict() for p in per_view]}
    raise ValueError(f"corruption mode must be one of {MODES}, got {mode!r}")


def build_dataset(
    phantoms: Sequence[Volume],
    geom: ScanGeometry,
    mode: str = "awgn",
    n_views: int | None = None,
    seed: int = 0,
    awgn_snr_db: float = 40.0,
    hann_cutoff: float = 0.3,
    ranges: CorruptionRanges = CorruptionRanges(),
) -> list[Sample]:
    """Corrupt each phantom, reconstruct it with FBP and pair it with the truth."""
    if len(phantoms) == 0:
        raise ValueError("build_dataset needs at least one phantom")
    if n_views is not None and n_views != geom.n_views:
        geom = geom.with_views(n_views)
    out = []
    for i, vol in enumerate(phantoms):
        try:
            y, rec = corrupt(vol, geom, mode, derive_seed(seed, i), awgn_snr_db, ranges)
            fbp = fdk_reconstruct(y, geom, hann_cutoff)
        except Exception as exc:
            raise DatasetError(f"phantom {i}: {exc}") from exc
        rec = {"index": i, "n_views": geom.n_views, **rec}
        out.append(Sample(i, y, Volume(fbp.data.astype(np.float32), fbp.voxel_mm), vol, rec))
    return out


@dataclass
class Splits:
    train: list[Sample]
    val: list[Sample]
    test: list[Sample]
    phantoms: PhantomSet
    config: DataConfig

    def records(self) -> dict[str, list[dict]]:
        out = {}
        for name in ("train", "val", "test"):
            seeds = self.phantoms.seeds[name]
            out[name] = [{"phantom_seed": s, **smp.record} for s, smp in zip(seeds, getattr(self, name))]
        return out


def prepare_data(cfg: DataConfig, base_spec: PhantomSpec | None = None) -> Splits:
    """Phantoms, corruption and FBP inputs for all three splits.

    Each split draws its corruption seeds from its own stream so that adding
    test phantoms never perturbs the training set.
    """
    spec = base_spec or PhantomSpec(n=cfg.n)
    ps = generate_dataset(cfg.count, spec, cfg.split, seed=cfg.seed)
    geom = cfg.geometry()
    parts = []
    for k, name in enumerate(("train", "val", "test")):
        vols = getattr(ps, name)
        parts.append(
            build_dataset(vols, geom, cfg.mode, seed=derive_seed(cfg.seed, 7, k), awgn_snr_db=cfg.awgn_snr_db,
                          hann_cutoff=cfg.hann_cutoff) if vols else []
        )
    return Splits(*parts, phantoms=ps, config=cfg)


def check_disjoint(*splits: Sequence[Sample]) -> None:
    seen: dict[bytes, int] = {}
    for k, split in enumerate(splits):
        for s in split:
            key = s.target.data.tobytes()
            if key in seen and seen[key] != k:
                raise ValueError(f"sample {s.index} appears in splits {seen[key]} and {k}")
            seen[key] = k


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class TrainingConfig:
    epochs: int = 200
    lr: float = 1e-3
    batch_size: int = 1
    loss: str = "squared_error"
    n_views: int = 4
    mode: str = "awgn"
    seed: int = 0
    val_every: int = 10
    swap_order: tuple[str, str, str] = ("x", "y", "z")
    variant: str = "swap"
    last_conv_gain: float = 0.0

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError(f"epochs must be >= 1, got {self.epochs}")
        if self.n_views < 1:
            raise ValueError(f"n_views must be >= 1, got {self.n_views}")
        if self.batch_size != 1:
            raise ValueError("only batch size 1 is supported")
        if self.loss != "squared_error":
            raise ValueError(f"unsupported loss {self.loss!r}")
        if self.mode not in MODES:
            raise ValueError(f"corruption mode must be one of {MODES}, got {self.mode!r}")
        if self.val_every < 1:
            raise ValueError("val_every must be >= 1")

    def network(self, extents) -> SwapNetConfig:
        return SwapNetConfig(tuple(extents), tuple(self.swap_order), self.variant)


@dataclass
class TrainResult:
    config: SwapNetConfig
    weights: SwapNetWeights
    best_epoch: int
    train_loss: list[float]
    val_history: list[dict]
    step_count: int
    manifest: dict = field(default_factory=dict)


def _pair(s: Sample) -> tuple[np.ndarray, np.ndarray]:
    return s.fbp.to_xyz().astype(np.float32), s.target.to_xyz().astype(np.float32)


def _loss(cfg: SwapNetConfig, w: SwapNetWeights, x: np.ndarray, t: np.ndarray):
    out = forward(cfg, w, Tensor(x))
    return scale(sum_squares(sub(out, Tensor(t))), 1.0 / t.size)


def _validate(net: SwapNetConfig, w: SwapNetWeights, pairs) -> tuple[float, float]:
    losses, snrs = [], []
    for x, t in pairs:
        p = predict(net, w, x)
        losses.append(float(np.mean((p.astype(np.float64) - t) ** 2)))
        snrs.append(snr_db(t, p))
    return float(np.mean(losses)), float(np.mean(snrs))


def train(cfg: TrainingConfig, train_set: Sequence[Sample], val_set: Sequence[Sample] = ()) -> TrainResult:
    """Adam on per-volume mean squared error, one sample per step.

    Validation SNR is checked every ``val_every`` epochs and after the last
    one; the weights from the best check are returned. Without a validation
    set the final weights are returned.
    """
    if not train_set:
        raise ValueError("training set is empty")
    check_disjoint(train_set, val_set)
    tr = [_pair(s) for s in train_set]
    va = [_pair(s) for s in val_set]
    net = cfg.network(tr[0][0].shape)
    w = init_weights(net, cfg.seed, last_gain=cfg.last_conv_gain)
    params = w.parameters()
    state = AdamState(lr=cfg.lr)
    rng = np.random.default_rng(derive_seed(cfg.seed, 1))
    best = (-np.inf, 0, w.copy())
    losses: list[float] = []
    val_hist: list[dict] = []
    for epoch in range(1, cfg.epochs + 1):
        total = 0.0
        for i in rng.permutation(len(tr)):
            loss = _loss(net, w, *tr[i])
            value = float(loss.data)
            if not np.isfinite(value):
                raise TrainingFault(f"non-finite loss at epoch {epoch}, sample {train_set[i].index}")
            adam_step(state, params, backward(loss, params))
            total += value
        losses.append(total / len(tr))
        if va and (epoch % cfg.val_every == 0 or epoch == cfg.epochs):
            vl, vs = _validate(net, w, va)
            val_hist.append({"epoch": epoch, "val_loss": vl, "val_snr_db": vs})
            if vs > best[0]:
                best = (vs, epoch, w.copy())
    if va:
        _, best_epoch, chosen = best
    else:
        best_epoch, chosen = cfg.epochs, w
    manifest = {
        "training": asdict(cfg),
        "network": {"extents": net.extents, "swap_order": net.swap_order, "variant": net.variant,
                    "parameter_count": w.num_scalars()},
        "train_loss": losses,
        "validation": val_hist,
        "best_epoch": best_epoch,
        "step_count": state.step_count,
    }
    return TrainResult(net, chosen, best_epoch, losses, val_hist, state.step_count, manifest)


def predict_volume(net: SwapNetConfig, weights: SwapNetWeights, fbp_vol: Volume) -> Volume:
    out = predict(net, weights, fbp_vol.to_xyz().astype(weights.kernels[0][0].dtype))
    return Volume.from_xyz(out, fbp_vol.voxel_mm)


# ---------------------------------------------------------------------------
# evaluation
# ---------------------------------------------------------------------------


@dataclass
class MethodResult:
    method: str
    n_views: int
    reports: list[MetricsReport]
    extra: dict = field(default_factory=dict)

    def values(self, metric: str) -> np.ndarray:
        if metric in ("snr_db", "ssim"):
            return np.array([getattr(r, metric) for r in self.reports])
        axis = metric.rsplit("_", 1)[1]
        return np.concatenate([r.slice_snr[axis] for r in self.reports])


@dataclass
class EvalReport:
    results: list[MethodResult] = field(default_factory=list)

    def merge(self, other: "EvalReport") -> "EvalReport":
        return EvalReport(self.results + other.results)

    def get(self, method: str, n_views: int | None = None) -> MethodResult:
        for r in self.results:
            if r.method == method and (n_views is None or r.n_views == n_views):
                return r
        raise KeyError(f"no result for method {method!r} at n_views={n_views}")

    def mean(self, method: str, metric: str = "snr_db", n_views: int | None = None) -> float:
        return float(np.mean(self.get(method, n_views).values(metric)))

    def rows(self) -> list[dict]:
        out = []
        for r in self.results:
            for m in METRICS:
                s = aggregate(r.values(m))
                out.append({"method": r.method, "n_views": r.n_views, "metric": m, **s})
        return out

    def to_csv(self) -> str:
        buf = _io.StringIO()
        cols = ["method", "n_views", "metric", "mean", "std", "q1", "median", "q3"]
        wr = csv.DictWriter(buf, fieldnames=cols, lineterminator="\n")
        wr.writeheader()
        for row in self.rows():
            wr.writerow({k: (f"{v:.6f}" if isinstance(v, float) else v) for k, v in row.items()})
        return buf.getvalue()

    def to_text(self) -> str:
        lines = [f"{'method':<12}{'views':>6}{'SNR dB':>10}{'SSIM':>8}"
                 f"{'z med':>8}{'y med':>8}{'x med':>8}"]
        for r in self.results:
            med = [aggregate(r.values(f"slice_snr_{a}"))["median"] for a in "zyx"]
            lines.append(
                f"{r.method:<12}{r.n_views:>6}{np.mean(r.values('snr_db')):>10.2f}"
                f"{np.mean(r.values('ssim')):>8.4f}" + "".join(f"{m:>8.2f}" for m in med)
            )
        return "\n".join(lines) + "\n"

    def summary(self) -> dict:
        return {f"{r.method}@{r.n_views}": {m: aggregate(r.values(m)) for m in METRICS} for r in self.results}


def baseline_volumes(samples: Sequence[Sample], geom: ScanGeometry, method: str,
                     tv_cfg: TvConfig = TvConfig()) -> tuple[list[Volume], dict]:
    """FBP is the dataset input itself; TV is oracle-tuned per phantom."""
    if method == "fbp":
        return [s.fbp for s in samples], {}
    if method == "tv":
        vols, taus = [], []
        for s in samples:
            res = search_tau(s.proj, geom, tv_cfg, s.target)
            vols.append(res.volume)
            taus.append(res.tau)
        return vols, {"tau": taus}
    raise ValueError(f"unknown baseline {method!r}")


def evaluate(
    test_set: Sequence[Sample],
    geom: ScanGeometry,
    models: dict[str, Sequence[tuple[SwapNetConfig, SwapNetWeights]]] | None = None,
    baselines: Iterable[str] = ("fbp", "tv"),
    tv_cfg: TvConfig = TvConfig(),
) -> EvalReport:
    """Metrics for each baseline and each trained model on the test set.

    A model entry may hold several trained networks (seeds); their per-volume
    metrics are pooled, so the reported mean is over seeds and phantoms.
    """
    if test_set and test_set[0].proj.n_views != geom.n_views:
        geom = geom.with_views(test_set[0].proj.n_views)
    refs = [s.target for s in test_set]
    report = EvalReport()
    for b in baselines:
        vols, extra = baseline_volumes(test_set, geom, b, tv_cfg)
        report.results.append(MethodResult(b, geom.n_views, [slicewise_stats(r, v) for r, v in zip(refs, vols)], extra))
    for name, nets in (models or {}).items():
        reps = []
        for net, w in nets:
            reps += [slicewise_stats(s.target, predict_volume(net, w, s.fbp)) for s in test_set]
        report.results.append(MethodResult(name, geom.n_views, reps, {"n_models": len(nets)}))
    return report


# ---------------------------------------------------------------------------
# experiments
# ---------------------------------------------------------------------------


@dataclass
class Experiment:
    data: Splits
    runs: list[TrainResult]
    report: EvalReport

    def manifest(self) -> dict:
        return run_manifest(self.data, self.runs, self.report)


def run_manifest(data: Splits, runs: Sequence[TrainResult], report: EvalReport | None = None) -> dict:
    out = {
        "data": asdict(data.config),
        "corruption_records": data.records(),
        "snr_definition": SNR_DEFINITION,
        "runs": [r.manifest for r in runs],
    }
    if report is not None:
        out["metrics"] = report.summary()
        out["tv_tau"] = {r.method: r.extra.get("tau") for r in report.results if "tau" in r.extra}
    return out


def train_seeds(cfg: TrainingConfig, data: Splits, seeds: Sequence[int]) -> list[TrainResult]:
    return [train(replace(cfg, seed=s), data.train, data.val) for s in seeds]


def run_experiment(dcfg: DataConfig, tcfg: TrainingConfig, seeds: Sequence[int] = (0, 1, 2),
                   tv_cfg: TvConfig = TvConfig(), baselines: Iterable[str] = ("fbp", "tv")) -> Experiment:
    """Build data, train one network per seed, evaluate everything on the test split."""
    data = prepare_data(dcfg)
    runs = train_seeds(tcfg, data, seeds)
    models = {"swapnet": [(r.config, r.weights) for r in runs]}
    report = evaluate(data.test, dcfg.geometry(), models, baselines, tv_cfg)
    return Experiment(data, runs, report)


ABLATION_VARIANTS = {
    "x-y-z": (("x", "y", "z"), "swap"),
    "z-x-y": (("z", "x", "y"), "swap"),
    "x-z-y": (("x", "z", "y"), "swap"),
    "non-swap": (("x", "y", "z"), "non_swap"),
}


@dataclass
class AblationReport:
    snr: dict[str, list[float]]
    seeds: tuple[int, ...]
    parameter_counts: dict[str, int]

    def mean(self, label: str) -> float:
        return float(np.mean(self.snr[label]))

    def to_text(self) -> str:
        lines = [f"{'variant':<10}{'params':>10}{'mean SNR dB':>13}  per-seed"]
        for k, v in self.snr.items():
            per = " ".join(f"{x:.2f}" for x in v)
            lines.append(f"{k:<10}{self.parameter_counts[k]:>10}{np.mean(v):>13.2f}  {per}")
        return "\n".join(lines) + "\n"

    def to_dict(self) -> dict:
        return {"snr_db": self.snr, "seeds": list(self.seeds), "parameter_counts": self.parameter_counts,
                "mean_snr_db": {k: self.mean(k) for k in self.snr}}


def ablation_swap_order(
    cfg: TrainingConfig,
    data: Splits,
    seeds: Sequence[int] = (0, 1, 2),
    variants: dict[str, tuple[tuple[str, str, str], str]] = ABLATION_VARIANTS,
    trained: dict[tuple[str, int], TrainResult] | None = None,
) -> AblationReport:
    """Train every variant under the same data, seeds and budget.

    ``trained`` caches runs keyed by (variant label, seed); missing entries
    are trained and added, so callers can share runs across experiments.
    """
    trained = {} if trained is None else trained
    snr, counts = {}, {}
    for label, (order, variant) in variants.items():
        vcfg = replace(cfg, swap_order=order, variant=variant)
        vals = []
        for s in seeds:
            key = (label, s)
            if key not in trained:
                trained[key] = train(replace(vcfg, seed=s), data.train, data.val)
            run = trained[key]
            vals.append(float(np.mean([snr_db(t.target, predict_volume(run.config, run.weights, t.fbp))
                                       for t in data.test])))
            counts[label] = run.weights.num_scalars()
        snr[label] = vals
    return AblationReport(snr, tuple(seeds), counts)
