"""``firecli``: batch experiment commands over patch containers.

Exit codes: 0 success, 1 unexpected failure, 2 usage error, 3 bad input
(missing/malformed files, unknown bands, invalid config), 4 training
diverged.
"""
from __future__ import annotations

import argparse
import configparser
import json
import logging
import os
import sys
import tempfile
import time
from dataclasses import asdict, fields, replace
from pathlib import Path

import numpy as np

from . import __version__
from . import cirrus_segmenter as cs
from . import metrics_lab as ml
from . import model_zoo as mz
from . import raster_store as rs
from . import stats_tests as st
from . import synthetic
from . import train_engine as te

log = logging.getLogger("firecli")

SYNTHETIC_SEED = 7
EXIT_OK, EXIT_FAIL, EXIT_USAGE, EXIT_INPUT, EXIT_DIVERGED = 0, 1, 2, 3, 4

# training defaults; "full" is the full-scale schedule
TRAIN_PRESETS = {
    "desk": te.TrainConfig(learning_rate=1e-2, decay=0.01, epochs=300, batch_size=32),
    "full": te.TrainConfig(learning_rate=1e-3, decay=0.1, epochs=100, batch_size=32),
}
PRESET_ALIASES = {"paper": "full"}
SENSITIVITY_PRESETS = {
    "desk": te.TrainConfig(learning_rate=1e-3, decay=0.01, epochs=20, batch_size=32,
                           split_fraction=0.8),
    "full": te.TrainConfig(learning_rate=1e-3, decay=0.1, epochs=200, batch_size=32,
                           split_fraction=0.8),
}


class InputError(Exception):
    pass


def read_config(path) -> dict[str, str]:
    """Flat ``key = value`` file; ``#`` starts a comment line."""
    if path is None:
        return {}
    p = Path(path)
    if not p.is_file():
        raise InputError(f"config file not found: {p}")
    parser = configparser.ConfigParser(interpolation=None, comment_prefixes=("#", ";"))
    try:
        parser.read_string("[config]\n" + p.read_text())
    except configparser.Error as exc:
        raise InputError(f"{p}: {exc}") from None
    return dict(parser["config"])


def _coerce(value: str, like):
    if value.lower() in ("none", ""):
        return None
    if isinstance(like, bool):
        return value.lower() in ("1", "true", "yes", "on")
    if isinstance(like, int):
        return int(value)
    if isinstance(like, float) or like is None:
        return float(value)
    if isinstance(like, tuple):
        return tuple(type(like[0])(v.strip()) for v in value.split(",") if v.strip())
    return value


def apply_overrides(obj, cfg: dict[str, str]):
    """Replace dataclass fields named in ``cfg``; unknown keys are ignored
    so one file can configure several layers of the run."""
    names = {f.name for f in fields(obj)}
    changes = {}
    for key, value in cfg.items():
        if key in names:
            try:
                changes[key] = _coerce(value, getattr(obj, key))
            except ValueError:
                raise InputError(f"config: bad value {value!r} for {key}") from None
    try:
        return replace(obj, **changes)
    except (ValueError, TypeError) as exc:
        raise InputError(f"config: {exc}") from None


def write_atomic(path: Path, data: bytes | str) -> None:
    path = Path(path)
    if isinstance(data, str):
        data = data.encode("utf-8")
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    with os.fdopen(fd, "wb") as f:
        f.write(data)
    os.replace(tmp, path)


def write_manifest(path: Path, command: str, config: dict, seed, inputs, outputs, started):
    manifest = {
        "command": command,
        "config": config,
        "seed": seed,
        "inputs": [str(p) for p in inputs],
        "outputs": [str(p) for p in outputs],
        "tool_version": __version__,
        "started": started,
        "finished": time.time(),
    }
    write_atomic(path, json.dumps(manifest, indent=2, sort_keys=True, default=str) + "\n")


def load_dataset(path) -> rs.PatchDataset:
    p = Path(path)
    if not p.is_file():
        raise InputError(f"container not found: {p}")
    ds = rs.read_container(p)
    if not len(ds):
        raise InputError(f"{p}: container holds no patches")
    return ds


def _parse_bands(arg: str) -> list[str]:
    return [b.strip() for b in arg.split(",") if b.strip()]


def _bands(arg, dataset, default):
    if arg:
        return _parse_bands(arg)
    if all(b in dataset.band_ids for b in default):
        return list(default)
    return list(dataset.band_ids)


def _out_dir(path) -> Path:
    out = Path(path)
    out.mkdir(parents=True, exist_ok=True)
    return out


# ---------------------------------------------------------------------------
# commands


def cmd_ingest(args) -> int:
    started = time.time()
    out = Path(args.output)
    seed = args.seed if args.seed is not None else SYNTHETIC_SEED
    if args.synthetic is not None:
        bands = _parse_bands(args.bands) if args.bands else list(rs.SWIR)
        ds = synthetic.make_dataset(args.synthetic, args.size, bands, seed,
                                    args.fire_fraction, args.cirrus_fraction)
        config = {"synthetic": args.synthetic, "size": args.size, "bands": bands,
                  "fire_fraction": args.fire_fraction, "cirrus_fraction": args.cirrus_fraction}
        inputs = []
    else:
        ds = ingest_raw_dir(Path(args.raw))
        config = {"raw": args.raw}
        inputs = [args.raw]
    write_atomic(out, rs.encode_container(ds))
    write_manifest(out.with_name(out.name + ".manifest.json"), "ingest", config,
                   seed, inputs, [out], started)
    print(f"wrote {len(ds)} patches to {out}")
    return EXIT_OK


def ingest_raw_dir(root: Path) -> rs.PatchDataset:
    """Build a dataset from flat binaries.

    ``root/ingest.cfg`` gives ``height``, ``width``, ``dtype`` (u16 or f32)
    and ``bands`` (comma list).  Each patch ``<id>`` has one
    ``<id>.<band>.raw`` little-endian file per band plus ``<id>.mask.raw``
    (one byte per pixel).
    """
    if not root.is_dir():
        raise InputError(f"raw directory not found: {root}")
    cfg = read_config(root / "ingest.cfg")
    try:
        h, w = int(cfg["height"]), int(cfg["width"])
        dtype = {"u16": "<u2", "f32": "<f4"}[cfg.get("dtype", "u16")]
        bands = [b.strip() for b in cfg["bands"].split(",")]
    except (KeyError, ValueError) as exc:
        raise InputError(f"{root / 'ingest.cfg'}: missing or bad entry {exc}") from None
    ids = sorted(p.name[:-len(".mask.raw")] for p in root.glob("*.mask.raw"))
    if not ids:
        raise InputError(f"{root}: no *.mask.raw files")
    patches = []
    for pid in ids:
        chans = []
        for b in bands:
            f = root / f"{pid}.{b}.raw"
            if not f.is_file():
                raise InputError(f"missing band file {f}")
            arr = np.fromfile(f, dtype=dtype)
            if arr.size != h * w:
                raise InputError(f"{f}: expected {h * w} values, found {arr.size}")
            chans.append(arr.reshape(h, w))
        mask = np.fromfile(root / f"{pid}.mask.raw", dtype=np.uint8)
        if mask.size != h * w:
            raise InputError(f"{root / (pid + '.mask.raw')}: expected {h * w} bytes, found {mask.size}")
        patches.append(rs.MultibandPatch(np.stack(chans, -1).astype(np.dtype(dtype).newbyteorder("=")),
                                         bands, mask.reshape(h, w)))
    return rs.PatchDataset(patches, str(root))


def _prepare_fcn_inputs(ds, bands, stats=None):
    sel = rs.select_dataset_bands(ds, bands)
    norm, stats = rs.normalize_bands(sel, stats if stats is not None else "fit")
    x, y = norm.arrays()
    return x, y, stats


def cmd_train_fcn(args) -> int:
    started = time.time()
    cfg_file = read_config(args.config)
    tcfg = apply_overrides(TRAIN_PRESETS[args.preset], cfg_file)
    if args.seed is not None:
        tcfg = replace(tcfg, seed=args.seed)
    if args.epochs is not None:
        tcfg = replace(tcfg, epochs=args.epochs)
    ds = load_dataset(args.container)
    bands = _bands(args.bands or cfg_file.get("bands"), ds, (rs.GREEN, *rs.SWIR))
    fcfg = apply_overrides(mz.fcn_preset(args.preset, len(bands)), cfg_file)
    if fcfg.input_channels != len(bands):
        raise InputError(f"model expects {fcfg.input_channels} channels but {len(bands)} bands selected")

    if args.no_split:
        train_idx, val_idx = np.arange(len(ds)), np.array([], dtype=int)
    else:
        train_idx, val_idx = te.split_dataset(len(ds), tcfg.split_fraction, tcfg.seed)
    x_tr, y_tr, stats = _prepare_fcn_inputs(ds.subset(train_idx), bands)
    x_va = y_va = None
    if len(val_idx):
        x_va, y_va, _ = _prepare_fcn_inputs(ds.subset(val_idx), bands, stats)

    net = mz.Network(mz.build_fcn(fcfg), seed=tcfg.seed)
    trainlog = te.train(net, x_tr, y_tr, tcfg, x_va, y_va)

    out = _out_dir(args.out)
    meta = {"bands": bands, "norm_mean": stats.mean.tolist(), "norm_std": stats.std.tolist(),
            "threshold": tcfg.threshold}
    mz.save_model(net, out / "model.fpg", meta)
    write_atomic(out / "train_log.csv", trainlog.to_csv())
    config = asdict(tcfg) | asdict(fcfg) | {"bands": bands, "preset": args.preset,
                                            "no_split": args.no_split}
    write_manifest(out / "manifest.json", "train-fcn", config, tcfg.seed,
                   [args.container, args.config or ""], [out / "model.fpg", out / "train_log.csv"],
                   started)
    last = trainlog.records[-1] if trainlog.records else None
    if last:
        print(f"epoch {last.epoch}: train_loss={last.train_loss:.6g} val_loss={last.val_loss:.6g} "
              f"val_f2={last.val_metric:.4f}")
    print(f"parameters: {mz.param_count(net.graph):,}")
    return EXIT_OK


def _model_inputs(net, ds):
    bands = net.meta.get("bands") or ds.band_ids
    stats = rs.NormalizationStats(tuple(bands), np.array(net.meta["norm_mean"]),
                                  np.array(net.meta["norm_std"]))
    x, y, _ = _prepare_fcn_inputs(ds, bands, stats)
    return x, y


def _load_model(path):
    if not Path(path).is_file():
        raise InputError(f"model file not found: {path}")
    return mz.load_model(path)


def cmd_eval(args) -> int:
    started = time.time()
    net = _load_model(args.model)
    ds = load_dataset(args.container)
    x, y = _model_inputs(net, ds)
    threshold = args.threshold if args.threshold is not None else net.meta.get("threshold", 0.5)
    pred = net.predict(x)
    counts = ml.confusion(pred, y, threshold)
    rep = ml.report(counts, threshold)
    out = _out_dir(args.out)
    write_atomic(out / "metrics.csv", rep.csv())
    table = ml.format_confusion(counts)
    write_atomic(out / "confusion.txt", table)
    write_manifest(out / "manifest.json", "eval", {"threshold": threshold}, None,
                   [args.model, args.container], [out / "metrics.csv", out / "confusion.txt"],
                   started)
    print(table, end="")
    print(f"precision={rep.precision:.4f} recall={rep.recall:.4f} f1={rep.f1:.4f} f2={rep.f2:.4f}"
          f" fpr={ml.false_positive_rate(counts):.4g}")
    return EXIT_OK


def write_pgm16(prob, path):
    img = np.round(np.clip(prob, 0.0, 1.0) * 65535).astype(">u2")
    h, w = img.shape
    write_atomic(path, f"P5\n{w} {h}\n65535\n".encode("ascii") + img.tobytes())


def write_pgm8(mask, path):
    img = np.where(mask, 255, 0).astype(np.uint8)
    h, w = img.shape
    write_atomic(path, f"P5\n{w} {h}\n255\n".encode("ascii") + img.tobytes())


def cmd_predict(args) -> int:
    started = time.time()
    net = _load_model(args.model)
    ds = load_dataset(args.container)
    x, _ = _model_inputs(net, ds)
    threshold = args.threshold if args.threshold is not None else net.meta.get("threshold", 0.5)
    pred = net.predict(x)[..., 0]
    out = _out_dir(args.out)
    outputs = []
    for i, p in enumerate(pred):
        path = out / f"mask_{i:05d}.pgm"
        if args.probabilities:
            write_pgm16(p, path)
        else:
            write_pgm8(p >= threshold, path)
        outputs.append(path)
    write_manifest(out / "manifest.json", "predict",
                   {"threshold": threshold, "probabilities": args.probabilities}, None,
                   [args.model, args.container], outputs, started)
    print(f"wrote {len(outputs)} masks to {out}")
    return EXIT_OK


def cmd_segment(args) -> int:
    started = time.time()
    ds = load_dataset(args.container)
    seed = args.seed if args.seed is not None else 0
    segs = cs.segment_dataset(ds, args.cirrus_band, seed)
    out = _out_dir(args.out)
    outputs = []
    for i, s in enumerate(segs):
        path = out / f"cirrus_{i:05d}.pgm"
        cs.write_pgm(s.labels, path)
        outputs.append(path)
    rows = cs.fire_vs_cirrus_table(ds, segs)
    cs.write_table_csv(rows, out / "contamination.csv")
    outputs.append(out / "contamination.csv")
    write_manifest(out / "manifest.json", "segment", {"cirrus_band": args.cirrus_band}, seed,
                   [args.container], outputs, started)
    print(f"segmented {len(segs)} cirrus bands into {out}")
    return EXIT_OK


def cmd_sensitivity(args) -> int:
    started = time.time()
    cfg_file = read_config(args.config)
    tcfg = apply_overrides(SENSITIVITY_PRESETS[args.preset], cfg_file)
    if args.seed is not None:
        tcfg = replace(tcfg, seed=args.seed)
    if args.epochs is not None:
        tcfg = replace(tcfg, epochs=args.epochs)
    ds = load_dataset(args.container)
    if args.cirrus_threshold is not None:
        keep = rs.filter_cirrus(ds, args.cirrus_band, args.cirrus_threshold)
        if not keep:
            raise InputError(f"no patch reaches cirrus threshold {args.cirrus_threshold}")
        ds = ds.subset(keep)
    swir = tuple(_parse_bands(args.bands)) if args.bands else rs.SWIR
    hw = ds.patches[0].pixels.shape[:2]
    ccfg = apply_overrides(mz.cnn_preset(args.preset, 3, hw), cfg_file)
    res = te.run_sensitivity(ds, tcfg, ccfg, swir, args.cirrus_band)
    out = _out_dir(args.out)
    outputs = []
    for name, trainlog in res.logs.items():
        write_atomic(out / f"{name}_log.csv", trainlog.to_csv())
        outputs.append(out / f"{name}_log.csv")
    report = res.report()
    write_atomic(out / "report.txt", report)
    outputs.append(out / "report.txt")
    config = asdict(tcfg) | asdict(ccfg) | {"preset": args.preset, "swir": swir,
                                            "cirrus_band": args.cirrus_band}
    write_manifest(out / "manifest.json", "sensitivity", config, tcfg.seed,
                   [args.container, args.config or ""], outputs, started)
    print(report, end="")
    return EXIT_OK


def cmd_stats(args) -> int:
    if args.log_a or args.log_b:
        if not (args.log_a and args.log_b):
            raise InputError("--log-a and --log-b go together")
        a = te.TrainLog.from_csv(Path(args.log_a).read_text()).seconds
        b = te.TrainLog.from_csv(Path(args.log_b).read_text()).seconds
        if args.test == "paired":
            if len(a) != len(b):
                raise InputError("paired test needs logs with equal epoch counts")
            res = st.paired_t([x - y for x, y in zip(a, b)], args.alternative)
        elif args.test == "welch":
            (m1, s1), (m2, s2) = st.mean_sd(a), st.mean_sd(b)
            res = st.welch_t(m1, s1, len(a), m2, s2, len(b), args.alternative)
        else:
            raise InputError("logs feed the welch or paired tests only")
    elif args.test == "z":
        need = (args.p1, args.n1, args.p2, args.n2)
        if None in need:
            raise InputError("z test needs --p1 --n1 --p2 --n2")
        res = st.two_proportion_z(args.p1, args.n1, args.p2, args.n2, args.alternative)
    elif args.test == "welch":
        need = (args.mean1, args.sd1, args.n1, args.mean2, args.sd2, args.n2)
        if None in need:
            raise InputError("welch test needs --mean1 --sd1 --n1 --mean2 --sd2 --n2")
        res = st.welch_t(*need, args.alternative)
    else:
        if not args.differences:
            raise InputError("paired test needs --differences or two logs")
        diffs = [float(v) for v in args.differences.split(",")]
        res = st.paired_t(diffs, args.alternative)
    print(res.summary())
    return EXIT_OK


def cmd_eda(args) -> int:
    started = time.time()
    ds = load_dataset(args.container)
    seed = args.seed if args.seed is not None else 0
    segs = cs.segment_dataset(ds, args.cirrus_band, seed)
    rows = cs.fire_vs_cirrus_table(ds, segs)
    out = _out_dir(args.out)
    cs.write_table_csv(rows, out / "fire_vs_cirrus.csv")
    plots = cs.plot_fire_vs_cirrus(rows, out)
    fits = []
    arr = np.asarray(rows, dtype=float)
    for col, name in ((1, "dense"), (2, "scattered"), (3, "none")):
        try:
            fit = cs.linear_fit(arr[:, col], arr[:, 0])
            fits.append(f"{name},{fit.slope!r},{fit.intercept!r},{fit.n}")
        except ValueError as exc:
            fits.append(f"{name},nan,nan,{len(arr)}")
            log.warning("no fit for %s: %s", name, exc)
    write_atomic(out / "fits.csv", "class,slope,intercept,n\n" + "\n".join(fits) + "\n")
    write_manifest(out / "manifest.json", "eda", {"cirrus_band": args.cirrus_band}, seed,
                   [args.container], [out / "fire_vs_cirrus.csv", out / "fits.csv", *plots],
                   started)
    print(f"wrote {len(rows)} rows and {len(plots)} plots to {out}")
    return EXIT_OK


def cmd_info(args) -> int:
    ds = load_dataset(args.container)
    s = rs.dataset_stats(ds)
    h, w, b = ds.patches[0].pixels.shape
    print(f"patches={s.n_total} fire={s.n_fire} nonfire={s.n_nonfire} size={h}x{w} bands={ds.band_ids}")
    if args.cirrus_band in ds.band_ids:
        keep = rs.filter_cirrus(ds, args.cirrus_band, args.cirrus_threshold)
        sub = rs.dataset_stats(ds.subset(keep))
        print(f"cirrus>={args.cirrus_threshold}: {sub.n_total} (fire={sub.n_fire}, nonfire={sub.n_nonfire})")
    return EXIT_OK


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="key = value config file")
    common.add_argument("--seed", type=int)
    common.add_argument("--threshold", type=float, help="binarization threshold")
    common.add_argument("--bands", help="comma-separated band labels")
    common.add_argument("--preset", choices=("desk", "full", *PRESET_ALIASES), default="desk")

    p = argparse.ArgumentParser(prog="firecli", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=__version__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("ingest", parents=[common], help="build a container")
    src = s.add_mutually_exclusive_group(required=True)
    src.add_argument("--synthetic", type=int, metavar="N", help="generate N synthetic patches")
    src.add_argument("--raw", help="directory of flat per-band binaries")
    s.add_argument("--size", type=int, default=32)
    s.add_argument("--fire-fraction", type=float, default=0.75)
    s.add_argument("--cirrus-fraction", type=float, default=0.6)
    s.add_argument("-o", "--output", required=True)
    s.set_defaults(func=cmd_ingest)

    s = sub.add_parser("train-fcn", parents=[common], help="train the mask FCN")
    s.add_argument("container")
    s.add_argument("--out", required=True)
    s.add_argument("--epochs", type=int)
    s.add_argument("--no-split", action="store_true", help="train on every patch, no validation")
    s.set_defaults(func=cmd_train_fcn)

    s = sub.add_parser("eval", parents=[common], help="score a model on a container")
    s.add_argument("model")
    s.add_argument("container")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("predict", parents=[common], help="write predicted masks as PGM")
    s.add_argument("model")
    s.add_argument("container")
    s.add_argument("--out", required=True)
    s.add_argument("--probabilities", action="store_true", help="16-bit probability maps")
    s.set_defaults(func=cmd_predict)

    s = sub.add_parser("segment", parents=[common], help="K-Means cirrus segmentation")
    s.add_argument("container")
    s.add_argument("--out", required=True)
    s.add_argument("--cirrus-band", default=rs.CIRRUS)
    s.set_defaults(func=cmd_segment)

    s = sub.add_parser("sensitivity", parents=[common], help="benchmark/control/experimental runs")
    s.add_argument("container")
    s.add_argument("--out", required=True)
    s.add_argument("--epochs", type=int)
    s.add_argument("--cirrus-band", default=rs.CIRRUS)
    s.add_argument("--cirrus-threshold", type=float, help="filter patches by cirrus maximum first")
    s.set_defaults(func=cmd_sensitivity)

    s = sub.add_parser("stats", help="hypothesis tests from summaries or logs")
    s.add_argument("--test", choices=("z", "welch", "paired"), required=True)
    s.add_argument("--alternative", choices=st.ALTERNATIVES, default="greater")
    for name in ("p1", "p2", "mean1", "mean2", "sd1", "sd2"):
        s.add_argument(f"--{name}", type=float)
    s.add_argument("--n1", type=int)
    s.add_argument("--n2", type=int)
    s.add_argument("--differences", help="comma-separated paired differences")
    s.add_argument("--log-a", help="TrainLog CSV for group 1")
    s.add_argument("--log-b", help="TrainLog CSV for group 2")
    s.set_defaults(func=cmd_stats)

    s = sub.add_parser("eda", parents=[common], help="fire vs cirrus-class table and plots")
    s.add_argument("container")
    s.add_argument("--out", required=True)
    s.add_argument("--cirrus-band", default=rs.CIRRUS)
    s.set_defaults(func=cmd_eda)

    s = sub.add_parser("info", help="dataset counts")
    s.add_argument("container")
    s.add_argument("--cirrus-band", default=rs.CIRRUS)
    s.add_argument("--cirrus-threshold", type=float, default=500)
    s.set_defaults(func=cmd_info)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    if hasattr(args, "preset"):
        args.preset = PRESET_ALIASES.get(args.preset, args.preset)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    threads = int(os.environ.get("FIRECLI_THREADS", "1"))
    from threadpoolctl import threadpool_limits

    try:
        with threadpool_limits(limits=threads):
            return args.func(args)
    except (InputError, rs.ContainerError, rs.DatasetValidationError, rs.UnknownBandError,
            mz.ConfigError, FileNotFoundError) as exc:
        print(f"firecli: error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except te.TrainingDiverged as exc:
        print(f"firecli: training diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except ValueError as exc:
        print(f"firecli: error: {exc}", file=sys.stderr)
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())
