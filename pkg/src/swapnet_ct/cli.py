"""``swapnet-ct`` command line.

Every subcommand reads an optional INI config, applies ``--set
section.key=value`` overrides, calls one library operation and writes a
JSON manifest next to its output. Failures print a single JSON line on
stderr and exit with 2 (usage), 3 (data) or 4 (numerical fault).
"""

from __future__ import annotations

import argparse
import configparser
import json
import logging
import sys
from dataclasses import asdict, fields, replace
from pathlib import Path

import numpy as np

from . import __version__
from . import io as fio
from .geometry import Volume, desk_geometry, fdk_reconstruct, forward_project
from .phantom import PhantomSpec, generate_dataset, generate_phantom, randomize_spec
from .pipeline import (
    ABLATION_VARIANTS,
    DataConfig,
    DatasetError,
    TrainingConfig,
    TrainingFault,
    ablation_swap_order,
    corrupt,
    evaluate,
    predict_volume,
    prepare_data,
    run_manifest,
    train,
)
from .recon import TvConfig, TvDivergenceError, search_tau, tv_reconstruct

log = logging.getLogger("swapnet_ct")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4

DEFAULTS = {
    "geometry": {"n": "32", "n_views": "4"},
    "phantom": {"seed": "0", "count": "24", "split": "20,2,2"},
    "corruption": {"mode": "awgn", "snr_db": "40", "seed": "0"},
    "recon": {"hann_cutoff": "0.3", "tv_iters": "100", "tv_evals": "20"},
    "train": {"epochs": "200", "lr": "0.001", "seeds": "0,1,2", "swap_order": "x,y,z", "variant": "swap",
              "val_every": "10", "last_conv_gain": "0"},
}


class CliError(Exception):
    def __init__(self, code: int, kind: str, message: str):
        super().__init__(message)
        self.code, self.kind = code, kind


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise CliError(EXIT_USAGE, "usage", message)


# ---------------------------------------------------------------------------
# config
# ---------------------------------------------------------------------------


class Settings:
    """Typed access to the merged config; every lookup is recorded for the manifest."""

    def __init__(self, parser: configparser.ConfigParser):
        self.cp = parser

    def _raw(self, section: str, key: str) -> str:
        try:
            return self.cp[section][key]
        except KeyError:
            raise CliError(EXIT_USAGE, "config", f"missing config key {section}.{key}") from None

    def _cast(self, section, key, fn, what):
        raw = self._raw(section, key)
        try:
            return fn(raw)
        except ValueError:
            raise CliError(EXIT_USAGE, "config", f"{section}.{key}={raw!r} is not a valid {what}") from None

    def int(self, section, key) -> int:
        return self._cast(section, key, int, "integer")

    def float(self, section, key) -> float:
        return self._cast(section, key, float, "number")

    def str(self, section, key) -> str:
        return self._raw(section, key)

    def ints(self, section, key) -> tuple[int, ...]:
        return self._cast(section, key, lambda s: tuple(int(v) for v in s.split(",")), "integer list")

    def strs(self, section, key) -> tuple[str, ...]:
        return tuple(v.strip() for v in self._raw(section, key).split(","))

    def snapshot(self) -> dict:
        return {s: dict(self.cp[s]) for s in self.cp.sections()}


def load_settings(path: str | None, overrides: list[str]) -> Settings:
    cp = configparser.ConfigParser()
    cp.read_dict(DEFAULTS)
    if path:
        if not Path(path).is_file():
            raise CliError(EXIT_DATA, "missing_file", f"config file not found: {path}")
        try:
            cp.read(path)
        except configparser.Error as exc:
            raise CliError(EXIT_USAGE, "config", f"malformed config {path}: {exc.message.splitlines()[0]}") from None
    for item in overrides:
        key, sep, value = item.partition("=")
        section, dot, name = key.partition(".")
        if not sep or not dot or not section or not name:
            raise CliError(EXIT_USAGE, "usage", f"override must look like section.key=value, got {item!r}")
        if not cp.has_section(section):
            cp.add_section(section)
        cp[section][name] = value
    return Settings(cp)


def _data_config(s: Settings, seed: int | None) -> DataConfig:
    counts = s.ints("phantom", "split")
    if len(counts) != 3:
        raise CliError(EXIT_USAGE, "config", "phantom.split must hold three counts")
    total = sum(counts)
    try:
        return DataConfig(
            n=s.int("geometry", "n"),
            count=total,
            split=tuple(c / total for c in counts),
            seed=s.int("phantom", "seed") if seed is None else seed,
            mode=s.str("corruption", "mode"),
            n_views=s.int("geometry", "n_views"),
            awgn_snr_db=s.float("corruption", "snr_db"),
            hann_cutoff=s.float("recon", "hann_cutoff"),
        )
    except ValueError as exc:
        raise CliError(EXIT_USAGE, "config", str(exc)) from None


def _training_config(s: Settings, dcfg: DataConfig) -> TrainingConfig:
    try:
        return TrainingConfig(
            epochs=s.int("train", "epochs"),
            lr=s.float("train", "lr"),
            n_views=dcfg.n_views,
            mode=dcfg.mode,
            val_every=s.int("train", "val_every"),
            swap_order=s.strs("train", "swap_order"),
            variant=s.str("train", "variant"),
            last_conv_gain=s.float("train", "last_conv_gain"),
        )
    except ValueError as exc:
        raise CliError(EXIT_USAGE, "config", str(exc)) from None


def _tv_config(s: Settings) -> TvConfig:
    return TvConfig(max_iters=s.int("recon", "tv_iters"), max_evals=s.int("recon", "tv_evals"),
                    hann_cutoff=s.float("recon", "hann_cutoff"))


def _geometry(s: Settings, n_views: int | None = None):
    return desk_geometry(n_views or s.int("geometry", "n_views"), s.int("geometry", "n"))


def _need(path: str) -> Path:
    p = Path(path)
    if not p.is_file():
        raise CliError(EXIT_DATA, "missing_file", f"input file not found: {path}")
    return p


def _manifest_path(out: Path) -> Path:
    return out / "manifest.json" if out.is_dir() else out.with_name(out.name + ".manifest.json")


def _write_manifest(args, s: Settings, out: Path, result: dict) -> None:
    body = {
        "command": args.command,
        "argv": args.argv,
        "version": __version__,
        "config": s.snapshot(),
        "result": result,
    }
    fio.save_manifest(_manifest_path(out), body)


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------


def cmd_phantom(args, s: Settings) -> dict:
    seed = s.int("phantom", "seed") if args.seed is None else args.seed
    out = Path(args.out)
    n = s.int("geometry", "n")
    if args.dataset:
        dcfg = _data_config(s, seed)
        ps = generate_dataset(dcfg.count, PhantomSpec(n=n), dcfg.split, seed=seed)
        out.mkdir(parents=True, exist_ok=True)
        for name in ("train", "val", "test"):
            for k, vol in zip(ps.seeds[name], getattr(ps, name)):
                fio.save_volume(out / f"{name}_{k}.swv", vol)
        return {"seeds": ps.seeds}
    spec = randomize_spec(PhantomSpec(n=n), seed)
    fio.save_volume(out, generate_phantom(spec))
    return {"spec": asdict(spec)}


def cmd_project(args, s: Settings) -> dict:
    vol = fio.load_volume(_need(args.volume))
    geom = _geometry(s, args.views)
    _check_volume(vol, geom)
    fio.save_projections(args.out, forward_project(vol, geom))
    return {"n_views": geom.n_views}


def _check_volume(vol: Volume, geom) -> None:
    if vol.shape != geom.volume_shape:
        raise CliError(EXIT_DATA, "shape", f"volume shape {vol.shape} does not match geometry {geom.volume_shape}")


def cmd_corrupt(args, s: Settings) -> dict:
    vol = fio.load_volume(_need(args.volume))
    geom = _geometry(s, args.views)
    _check_volume(vol, geom)
    mode = args.mode or s.str("corruption", "mode")
    seed = s.int("corruption", "seed") if args.seed is None else args.seed
    try:
        y, rec = corrupt(vol, geom, mode, seed, s.float("corruption", "snr_db"))
    except ValueError as exc:
        raise CliError(EXIT_USAGE, "config", str(exc)) from None
    fio.save_projections(args.out, y)
    return {"corruption": rec}


def cmd_reconstruct(args, s: Settings) -> dict:
    proj = fio.load_projections(_need(args.proj))
    geom = _geometry(s, proj.n_views)
    if tuple(proj.data.shape) != geom.proj_shape:
        raise CliError(EXIT_DATA, "shape", f"stack shape {proj.data.shape} does not match geometry {geom.proj_shape}")
    cutoff = s.float("recon", "hann_cutoff")
    info: dict = {"method": args.method}
    if args.method == "fbp":
        vol = fdk_reconstruct(proj, geom, cutoff)
    elif args.method == "tv":
        tv_cfg = _tv_config(s)
        if args.reference:
            res = search_tau(proj, geom, tv_cfg, fio.load_volume(_need(args.reference)))
            vol, info["tau"], info["snr_db"] = res.volume, res.tau, res.snr_db
        elif args.tau is not None:
            vol = tv_reconstruct(proj, geom, replace(tv_cfg, tau=args.tau)).volume
            info["tau"] = args.tau
        else:
            raise CliError(EXIT_USAGE, "usage", "tv needs --tau or --reference for the oracle search")
    else:
        if not args.weights:
            raise CliError(EXIT_USAGE, "usage", "swapnet needs --weights")
        net, w = fio.load_weights(_need(args.weights))
        fbp = fdk_reconstruct(proj, geom, cutoff)
        vol = predict_volume(net, w, Volume(fbp.data.astype(np.float32), fbp.voxel_mm))
    fio.save_volume(args.out, vol)
    return info


def cmd_train(args, s: Settings) -> dict:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    dcfg = _data_config(s, None)
    tcfg = _training_config(s, dcfg)
    data = prepare_data(dcfg)
    runs = []
    for seed in s.ints("train", "seeds"):
        run = train(replace(tcfg, seed=seed), data.train, data.val)
        fio.save_weights(out / f"weights_seed{seed}.sww", run.config, run.weights)
        runs.append(run)
        log.info("seed %d: best epoch %d", seed, run.best_epoch)
    fio.save_manifest(out / "run.json", run_manifest(data, runs))
    return {"weights": sorted(p.name for p in out.glob("weights_seed*.sww"))}


def cmd_eval(args, s: Settings) -> dict:
    run_dir = Path(args.run)
    run = fio.load_manifest(_need(str(run_dir / "run.json")))
    dcfg = DataConfig(**{f.name: _tuple(run["data"][f.name]) for f in fields(DataConfig)})
    data = prepare_data(dcfg)
    nets = [fio.load_weights(p) for p in sorted(run_dir.glob("weights_seed*.sww"))]
    if not nets:
        raise CliError(EXIT_DATA, "missing_file", f"no weights_seed*.sww files in {run_dir}")
    baselines = [b for b in args.baselines.split(",") if b]
    report = evaluate(data.test, dcfg.geometry(), {"swapnet": nets}, baselines, _tv_config(s))
    (run_dir / "metrics.csv").write_text(report.to_csv())
    (run_dir / "metrics.txt").write_text(report.to_text())
    print(report.to_text(), end="")
    return {"metrics": report.summary()}


def _tuple(v):
    return tuple(v) if isinstance(v, list) else v


def cmd_ablate(args, s: Settings) -> dict:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    dcfg = _data_config(s, None)
    tcfg = _training_config(s, dcfg)
    report = ablation_swap_order(tcfg, prepare_data(dcfg), s.ints("train", "seeds"), ABLATION_VARIANTS)
    (out / "ablation.txt").write_text(report.to_text())
    print(report.to_text(), end="")
    return report.to_dict()


def cmd_render(args, s: Settings) -> dict:
    from PIL import Image

    vol = fio.load_volume(_need(args.volume))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    axis_index = {"z": 0, "y": 1, "x": 2}
    written = []
    for axis in args.axis:
        n = vol.shape[axis_index[axis]]
        slices = args.slice if args.slice else [n // 2]
        for k in slices:
            if not 0 <= k < n:
                raise CliError(EXIT_USAGE, "usage", f"slice {k} out of range for axis {axis} with {n} slices")
            img = window_to_uint8(np.take(vol.data, k, axis=axis_index[axis]))
            name = f"{axis}_{k:04d}.png"
            Image.fromarray(img, mode="L").save(out / name)
            written.append(name)
    return {"images": written, "window": [0.0, 2.0]}


def window_to_uint8(img: np.ndarray, low: float = 0.0, high: float = 2.0) -> np.ndarray:
    """Map [low, high] linearly onto 0..255, clipping outside values."""
    scaled = (np.asarray(img, dtype=np.float64) - low) / (high - low)
    return np.round(np.clip(scaled, 0.0, 1.0) * 255).astype(np.uint8)


COMMANDS = {
    "phantom": cmd_phantom,
    "project": cmd_project,
    "corrupt": cmd_corrupt,
    "reconstruct": cmd_reconstruct,
    "train": cmd_train,
    "eval": cmd_eval,
    "ablate": cmd_ablate,
    "render": cmd_render,
}


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--config", help="INI config file")
    common.add_argument("--set", action="append", default=[], metavar="SECTION.KEY=VALUE", help="override a config value")
    common.add_argument("--threads", type=int, default=None, help="cap worker threads")
    common.add_argument("-v", "--verbose", action="count", default=0)

    p = _Parser(prog="swapnet-ct", description="Sparse-view CBCT toolkit")
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    c = sub.add_parser("phantom", parents=[common], help="generate a phantom or a phantom dataset")
    c.add_argument("--out", required=True)
    c.add_argument("--seed", type=int)
    c.add_argument("--dataset", action="store_true", help="write a train/val/test set into --out")

    c = sub.add_parser("project", parents=[common], help="clean line integrals of a volume")
    c.add_argument("--volume", required=True)
    c.add_argument("--views", type=int)
    c.add_argument("--out", required=True)

    c = sub.add_parser("corrupt", parents=[common], help="simulate a measured post-log stack")
    c.add_argument("--volume", required=True)
    c.add_argument("--mode", choices=("awgn", "scatter"))
    c.add_argument("--views", type=int)
    c.add_argument("--seed", type=int)
    c.add_argument("--out", required=True)

    c = sub.add_parser("reconstruct", parents=[common], help="reconstruct a stack")
    c.add_argument("--proj", required=True)
    c.add_argument("--method", choices=("fbp", "tv", "swapnet"), default="fbp")
    c.add_argument("--weights")
    c.add_argument("--tau", type=float)
    c.add_argument("--reference", help="ground truth for the oracle tau search")
    c.add_argument("--out", required=True)

    c = sub.add_parser("train", parents=[common], help="build the dataset and train one network per seed")
    c.add_argument("--out", required=True, help="run directory")

    c = sub.add_parser("eval", parents=[common], help="evaluate a run directory")
    c.add_argument("--run", required=True)
    c.add_argument("--baselines", default="fbp,tv")

    c = sub.add_parser("ablate", parents=[common], help="swap-order ablation")
    c.add_argument("--out", required=True)

    c = sub.add_parser("render", parents=[common], help="export 8-bit slice images")
    c.add_argument("--volume", required=True)
    c.add_argument("--axis", action="append", choices=("x", "y", "z"), default=None)
    c.add_argument("--slice", action="append", type=int, default=None)
    c.add_argument("--out", required=True)
    return p


def _run(argv: list[str]) -> int:
    args = build_parser().parse_args(argv)
    args.argv = list(argv)
    if args.command == "render" and not args.axis:
        args.axis = ["z"]
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2), format="%(levelname)s %(message)s")
    s = load_settings(args.config, args.set)
    if args.threads is not None:
        if args.threads < 1:
            raise CliError(EXIT_USAGE, "usage", "--threads must be >= 1")
        from threadpoolctl import threadpool_limits

        threadpool_limits(args.threads)
    result = COMMANDS[args.command](args, s)
    out = Path(args.run if args.command == "eval" else args.out)
    _write_manifest(args, s, out, result)
    return EXIT_OK


def main(argv: list[str] | None = None) -> int:
    argv = sys.argv[1:] if argv is None else argv
    try:
        return _run(argv)
    except CliError as exc:
        code, kind, msg = exc.code, exc.kind, str(exc)
    except (fio.FormatError, DatasetError) as exc:
        code, kind, msg = EXIT_DATA, "data", str(exc)
    except FileNotFoundError as exc:
        code, kind, msg = EXIT_DATA, "missing_file", str(exc)
    except (TvDivergenceError, TrainingFault, FloatingPointError) as exc:
        code, kind, msg = EXIT_NUMERIC, "numerical", str(exc)
    print(json.dumps({"error": kind, "code": code, "message": msg}), file=sys.stderr)
    return code


if __name__ == "__main__":
    sys.exit(main())
