"""Command-line entry points: dataset generation, training, evaluation, comparison.

Every command reads an optional JSON config (keys = :class:`RunConfig`
fields), applies ``--set key=value`` and the dedicated flags on top, and
writes the effective config next to its outputs as ``config.json``.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import math
import sys
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import evalstats as E
from .io import read_rvol, write_landmarks
from .netgrad import LocalizerNet
from .netgrad.gradcheck import check_training_pipelines
from .netgrad.train import TrainConfig, TrainingDiverged, grid_search, predict_voxels, train
from .phantom import PhantomSpec, load_case, load_manifest, manifest_hash, write_dataset
from .pipeline import RoiSample, case_rois, extract_rois, load_split_rois
from .registration import RegConfig, register_affine, registration_localize
from .volume import Landmark, Volume3D

log = logging.getLogger("antloc")

METHODS = ("hm", "dsnt", "reg")


class StepFailed(RuntimeError):
    """A sub-step of a command failed; the message names the step."""


@dataclass
class RunConfig:
    # paths
    dataset_dir: str | None = None
    output_dir: str = "runs/out"
    # what to run
    method: str = "hm"
    fractions: list = field(default_factory=lambda: [1.0, 0.5, 0.25])
    seed: int = 0
    roi_size: int | None = None  # None: take it from the dataset manifest
    max_test_cases: int | None = None  # None: the whole test split
    # heatmap / loss
    sigma_mm: float = 1.5
    cutoff: float = 0.05
    alpha: float = 1.0
    # network and optimizer
    width: int = 8
    depth: int = 2
    head_kernel: int = 1
    learning_rate: float = 1e-3
    lr_grid: list | None = None  # e.g. [1e-2, 1e-3, 1e-4, 1e-5] runs the grid search
    weight_decay: float = 1e-4
    batch_size: int = 16
    epochs: int = 30
    augment: bool = True
    decode: str = "argmax"
    # registration baseline
    reg_metric: str = "ncc"
    reg_levels: int = 3
    reg_max_iterations: int = 100
    # simulated raters (per-axis sigma, mm)
    rater_sigma_intra_mm: float = 1.0
    rater_sigma_inter_mm: float = 1.2
    # timing harness
    timing_repeats: int = 5
    timing_rois: int = 2

    def validate(self, need_dataset: bool = True) -> "RunConfig":
        if self.method not in METHODS:
            raise ValueError(f"method must be one of {METHODS}, got {self.method!r}")
        if not self.fractions or any(not 0 < f <= 1 for f in self.fractions):
            raise ValueError(f"fractions must lie in (0, 1], got {self.fractions}")
        if need_dataset:
            if not self.dataset_dir or not (Path(self.dataset_dir) / "manifest.json").exists():
                raise ValueError(f"dataset_dir {self.dataset_dir!r} does not hold a phantom dataset "
                                 "(run phantom-gen first)")
        if self.timing_repeats < 5:
            raise ValueError("timing_repeats must be >= 5")
        TrainConfig(**self._train_kwargs("hm"))  # range checks
        RegConfig(self.reg_metric, self.reg_levels, self.reg_max_iterations)
        return self

    @classmethod
    def from_mapping(cls, d: dict) -> "RunConfig":
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d)

    def _train_kwargs(self, method: str) -> dict:
        return dict(method=method, epochs=self.epochs, batch_size=self.batch_size,
                    learning_rate=self.learning_rate, weight_decay=self.weight_decay, width=self.width,
                    depth=self.depth, head_kernel=self.head_kernel, alpha=self.alpha, sigma_mm=self.sigma_mm,
                    cutoff=self.cutoff, augment=self.augment, decode=self.decode)

    def train_config(self, method: str, seed: int) -> TrainConfig:
        return TrainConfig(seed=seed, **self._train_kwargs(method))

    def reg_config(self) -> RegConfig:
        return RegConfig(self.reg_metric, self.reg_levels, self.reg_max_iterations)


def derive_seed(master: int, name: str) -> int:
    """Independent named stream (dataset, init, augmentation, raters, ...) of the master seed."""
    ss = np.random.SeedSequence([int(master), *name.encode()])
    return int(ss.generate_state(1)[0])


def _coerce(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def load_config(path: str | None, overrides: list[str] | None = None, **flags) -> RunConfig:
    data = {}
    if path:
        data = json.loads(Path(path).read_text())
    for item in overrides or []:
        key, sep, value = item.partition("=")
        if not sep:
            raise ValueError(f"--set expects key=value, got {item!r}")
        data[key.strip()] = _coerce(value)
    data.update({k: v for k, v in flags.items() if v is not None})
    return RunConfig.from_mapping(data)


def _write_json(path: Path, obj) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")
    return path


def _echo_config(out: Path, cfg: RunConfig):
    _write_json(out / "config.json", asdict(cfg))


def _step(name: str, fn, *args, **kwargs):
    try:
        return fn(*args, **kwargs)
    except Exception as exc:
        raise StepFailed(f"step '{name}' failed: {type(exc).__name__}: {exc}") from exc


# ------------------------------------------------------------------ datasets

def _roi_size(cfg: RunConfig, manifest: dict) -> int:
    return int(cfg.roi_size or manifest["spec"]["roi_size"])


def fraction_cases(case_ids: list[str], fraction: float, seed: int) -> list[str]:
    """Nested subsets: the first ceil(f * n) cases of one fixed permutation."""
    order = np.random.default_rng(derive_seed(seed, "fractions")).permutation(len(case_ids))
    n = max(1, math.ceil(fraction * len(case_ids)))
    return [case_ids[i] for i in sorted(order[:n])]


def select_test_cases(cfg: RunConfig, manifest: dict) -> list[str]:
    ids = list(manifest["splits"]["test"])
    return ids[:cfg.max_test_cases] if cfg.max_test_cases is not None else ids


def load_atlas_roi(dataset_dir, roi_size: int) -> RoiSample:
    """The atlas right-side ROI; ROIs of both sides are in the right-side frame after mirroring."""
    return case_rois(load_case(dataset_dir, "atlas"), roi_size)[0]


def _local(v: Volume3D) -> Volume3D:
    return Volume3D(v.data, v.spacing_mm, (0.0, 0.0, 0.0))


def registration_predict(atlas: RoiSample, query: RoiSample, reg_cfg: RegConfig) -> tuple[np.ndarray, float]:
    """Atlas target projected into the query ROI (voxel index) plus the elapsed seconds."""
    spacing = np.asarray(query.roi.spacing_mm)
    target_local = np.asarray(atlas.truth_voxel) * np.asarray(atlas.roi.spacing_mm)
    lm, seconds, _ = registration_localize(_local(atlas.roi), target_local, _local(query.roi), reg_cfg)
    return lm.array() / spacing, seconds


def evaluate_network(net: LocalizerNet, method: str, samples: list[RoiSample], decode: str = "argmax") -> dict:
    rois = np.stack([s.roi.data for s in samples])
    pred = predict_voxels(net, rois, method, decode)
    return _errors(samples, pred)


def evaluate_registration(atlas: RoiSample, samples: list[RoiSample], reg_cfg: RegConfig) -> dict:
    pred = np.array([registration_predict(atlas, s, reg_cfg)[0] for s in samples])
    return _errors(samples, pred)


def _errors(samples: list[RoiSample], pred_voxels: np.ndarray) -> dict:
    preds = {s.key: s.to_world(p) for s, p in zip(samples, pred_voxels)}
    truths = {s.key: s.truth_mm() for s in samples}
    errs = E.radial_errors(preds, truths)
    return {k: float(e) for k, e in zip(truths, errs)}


def _train_one(cfg: RunConfig, method: str, fraction: float, train_set, val_set, out: Path | None):
    seed = derive_seed(cfg.seed, f"train/{method}/{fraction}")
    tcfg = cfg.train_config(method, seed)
    if cfg.lr_grid:
        best_lr, results = grid_search(tcfg, train_set, val_set, cfg.lr_grid)
        result = results[best_lr]
        grid = {str(lr): r.best_val_mre for lr, r in results.items()}
    else:
        result, grid = train(tcfg, train_set, val_set), None
    if out is not None:
        result.save(out, roi_size=train_set[0].roi.shape[0], fraction=fraction, lr_grid=grid,
                    n_train_rois=len(train_set))
    return result


# ------------------------------------------------------------------ commands

def cmd_phantom_gen(args) -> int:
    data = json.loads(Path(args.spec).read_text()) if args.spec else {}
    if args.profile == "fast":
        spec = PhantomSpec.fast(**data)
    else:
        spec = PhantomSpec.from_dict(data)
    if args.seed is not None:
        spec = dataclasses.replace(spec, seed=args.seed)
    manifest = write_dataset(spec, args.out)
    print(f"wrote {spec.n_cases} cases + atlas to {args.out} (manifest sha256 {manifest_hash(args.out)[:16]})")
    return 0 if manifest else 1


def cmd_train(cfg: RunConfig) -> int:
    cfg.validate()
    if cfg.method == "reg":
        raise ValueError("the registration baseline has nothing to train")
    out = Path(cfg.output_dir)
    _echo_config(out, cfg)
    manifest = load_manifest(cfg.dataset_dir)
    roi = _roi_size(cfg, manifest)
    fraction = cfg.fractions[0]
    train_ids = fraction_cases(manifest["splits"]["train"], fraction, cfg.seed)
    train_set = _step("load-train", load_split_rois, cfg.dataset_dir, train_ids, roi, "pseudo")
    val_set = _step("load-val", load_split_rois, cfg.dataset_dir, manifest["splits"]["val"], roi, "pseudo")
    try:
        result = _train_one(cfg, cfg.method, fraction, train_set, val_set, out / "checkpoint")
    except TrainingDiverged as exc:
        _write_json(out / "train_log.json", {"diverged": str(exc), "history": exc.history})
        raise StepFailed(f"step 'train' failed: {exc}") from exc
    _write_json(out / "train_log.json", {"history": result.history, "best_epoch": result.best_epoch,
                                         "best_val_mre_voxels": result.best_val_mre})
    print(f"{cfg.method}: best epoch {result.best_epoch}, validation MRE {result.best_val_mre:.3f} voxels "
          f"-> {out / 'checkpoint'}")
    return 0


def _test_samples(cfg: RunConfig, manifest: dict) -> list[RoiSample]:
    return _step("load-test", load_split_rois, cfg.dataset_dir, select_test_cases(cfg, manifest),
                 _roi_size(cfg, manifest), "truth")


def cmd_eval(cfg: RunConfig, checkpoint: str | None) -> int:
    cfg.validate()
    out = Path(cfg.output_dir)
    _echo_config(out, cfg)
    manifest = load_manifest(cfg.dataset_dir)
    samples = _test_samples(cfg, manifest)
    if cfg.method == "reg":
        atlas = load_atlas_roi(cfg.dataset_dir, _roi_size(cfg, manifest))
        errors = _step("registration", evaluate_registration, atlas, samples, cfg.reg_config())
        method, fraction = "reg", 1.0
    else:
        if not checkpoint:
            raise ValueError("eval needs --checkpoint for network methods")
        net, meta = LocalizerNet.load(checkpoint)
        method, fraction = meta["method"], meta.get("fraction", 1.0)
        errors = evaluate_network(net, method, samples, cfg.decode)
    report = E.EvalReport(method, fraction, errors)
    _write_json(out / "eval.json", report.to_dict())
    m, s = report.mre
    print(f"{method}: MRE {E.format_mre(m, s)} mm | SDR {E.format_sdr(report.sdr)} % over {len(errors)} ROIs")
    return 0


def _simulate_raters(cfg: RunConfig, samples: list[RoiSample]) -> dict:
    rng = np.random.default_rng(derive_seed(cfg.seed, "raters"))
    truths = {s.key: s.truth_mm() for s in samples}
    a1 = E.simulate_rater(truths, cfg.rater_sigma_intra_mm, rng)
    a2 = E.simulate_rater(truths, cfg.rater_sigma_intra_mm, rng)
    b = E.simulate_rater(truths, cfg.rater_sigma_inter_mm, rng)
    keys = list(truths)
    intra = E.radial_errors(a1, a2)
    inter = E.radial_errors(a1, b)
    return {"intra-rater": dict(zip(keys, intra.tolist())), "inter-rater": dict(zip(keys, inter.tolist()))}


def _ttests(reports: dict, fractions) -> list[dict]:
    out = []

    def add(a, b, fa, fb):
        ra, rb = reports.get((a, fa)), reports.get((b, fb))
        if ra is None or rb is None:
            return
        keys = sorted(set(ra.errors_mm) & set(rb.errors_mm))
        if len(keys) < 2:
            return
        res = E.paired_ttest([ra.errors_mm[k] for k in keys], [rb.errors_mm[k] for k in keys])
        out.append({"a": f"{a}@{fa}", "b": f"{b}@{fb}", "n": len(keys), **res.to_dict(0.05)})

    for f in fractions:
        add("hm", "dsnt", f, f)
    for m in ("hm", "dsnt"):
        add(m, "reg", max(fractions), 1.0)
    return out


def _trend(reports: dict, fractions) -> dict:
    """Low-data comparison of DSNT against HM; reported, never asserted."""
    f = min(fractions)
    hm, dsnt = reports[("hm", f)], reports[("dsnt", f)]
    (mh, sh), (md, sd) = hm.mre, dsnt.mre
    return {"fraction": f, "hm_mre_mm": mh, "hm_std_mm": sh, "dsnt_mre_mm": md, "dsnt_std_mm": sd,
            "dsnt_lower_mre": md < mh, "dsnt_lower_std": sd < sh}


def cmd_compare(cfg: RunConfig) -> int:
    """HM and DSNT at every fraction, registration, simulated raters, t-tests, table."""
    cfg.validate()
    out = Path(cfg.output_dir)
    _echo_config(out, cfg)
    manifest = load_manifest(cfg.dataset_dir)
    roi = _roi_size(cfg, manifest)
    fractions = sorted(set(float(f) for f in cfg.fractions), reverse=True)
    val_set = _step("load-val", load_split_rois, cfg.dataset_dir, manifest["splits"]["val"], roi, "pseudo")
    test_set = _test_samples(cfg, manifest)
    reports, nets, train_logs = {}, {}, {}
    for fraction in fractions:
        ids = fraction_cases(manifest["splits"]["train"], fraction, cfg.seed)
        train_set = _step(f"load-train@{fraction}", load_split_rois, cfg.dataset_dir, ids, roi, "pseudo")
        for method in ("hm", "dsnt"):
            name = f"train {method}@{fraction}"
            log.info("%s on %d ROIs", name, len(train_set))
            ckpt = out / "checkpoints" / f"{method}_{fraction:g}"
            result = _step(name, _train_one, cfg, method, fraction, train_set, val_set, ckpt)
            nets[(method, fraction)] = result.net
            train_logs[f"{method}@{fraction:g}"] = {"best_epoch": result.best_epoch, "history": [
                {k: v for k, v in e.items() if k != "seconds"} for e in result.history]}
            errors = _step(f"eval {method}@{fraction}", evaluate_network, result.net, method, test_set, cfg.decode)
            reports[(method, fraction)] = E.EvalReport(method, fraction, errors, extra={"n_train_rois": len(train_set)})
    atlas = _step("load-atlas", load_atlas_roi, cfg.dataset_dir, roi)
    reg_errors = _step("registration", evaluate_registration, atlas, test_set, cfg.reg_config())
    reports[("reg", 1.0)] = E.EvalReport("reg", 1.0, reg_errors)
    raters = _simulate_raters(cfg, test_set)
    for name, errs in raters.items():
        reports[(name, 1.0)] = E.EvalReport(name, 1.0, errs)

    timing = _step("timing", _timing, cfg, nets, fractions, atlas, test_set)
    rows = []
    for name in ("intra-rater", "inter-rater", "reg", "hm", "dsnt"):
        mres = {f: r.mre for (m, f), r in reports.items() if m == name}
        sdrs = {f: r.sdr for (m, f), r in reports.items() if m == name}
        rows.append((name, mres, sdrs, timing.get(name, {}).get("median_seconds")))
    table = E.render_table(rows, fractions)
    report = {"format": "antloc-compare/1", "seed": cfg.seed, "dataset_manifest_sha256": manifest_hash(cfg.dataset_dir),
              "fractions": fractions, "n_test_rois": len(test_set),
              "cells": [r.to_dict() for _, r in sorted(reports.items(), key=lambda kv: (kv[0][0], -kv[0][1]))],
              "ttests": _ttests(reports, fractions), "trend_low_data": _trend(reports, fractions),
              "training": train_logs}
    _write_json(out / "report.json", report)
    _write_json(out / "timing.json", timing)
    (out / "table.txt").write_text(table)
    print(table, end="")
    t = report["trend_low_data"]
    print(f"low-data trend at {t['fraction']:g}: DSNT {t['dsnt_mre_mm']:.2f}±{t['dsnt_std_mm']:.2f} vs "
          f"HM {t['hm_mre_mm']:.2f}±{t['hm_std_mm']:.2f} mm")
    return 0


def _timing(cfg: RunConfig, nets: dict, fractions, atlas: RoiSample, samples: list[RoiSample]) -> dict:
    rois = samples[:cfg.timing_rois]
    reg_cfg = cfg.reg_config()
    f = max(fractions)
    methods = {m: (lambda s, net=nets[(m, f)]: net.predict(s.roi.data[None])) for m in ("hm", "dsnt")}
    methods["reg"] = lambda s: registration_predict(atlas, s, reg_cfg)
    out = E.timing_harness(methods, rois, repeats=cfg.timing_repeats)
    for v in out.values():
        v["roi_shape"] = list(rois[0].roi.shape)
    return out


def cmd_infer(checkpoint: str, volumes: list[str], out_csv: str, decode: str = "argmax") -> int:
    net, meta = LocalizerNet.load(checkpoint)
    roi_size = int(meta["roi_size"])
    rows, failed = [], []
    for path in volumes:
        case_id = Path(path).name.removesuffix(".rvol")
        if case_id == "volume":  # phantom layout: cases/<id>/volume.rvol
            case_id = Path(path).parent.name
        try:
            vol, _ = read_rvol(path)
            samples = extract_rois(vol, roi_size, case_id)
        except Exception as exc:
            log.error("case %s: %s", case_id, exc)
            print(f"{case_id}: failed ({exc})", file=sys.stderr)
            failed.append(case_id)
            continue
        pred = predict_voxels(net, np.stack([s.roi.data for s in samples]), meta["method"], decode)
        for s, p in zip(samples, pred):
            rows.append((case_id, Landmark(s.side, "world_mm", s.to_world(p))))
    write_landmarks(out_csv, rows)
    print(f"wrote {len(rows)} landmarks for {len(volumes) - len(failed)} case(s) to {out_csv}")
    return 1 if failed else 0


def cmd_gradcheck(n_samples: int, size: int, seed: int) -> int:
    t0 = time.perf_counter()
    results = check_training_pipelines(n_samples, size, seed)
    for res in results:
        print(res.line())
    print(f"total {time.perf_counter() - t0:.1f}s")
    return 0 if all(r.passed for r in results) else 1


def cmd_register(atlas_path: str, query_path: str, out: str | None, target, cfg: RunConfig) -> int:
    atlas, _ = read_rvol(atlas_path)
    query, _ = read_rvol(query_path)
    result = register_affine(atlas, query, cfg.reg_config())
    doc = result.transform.to_dict(result.metric, result.value)
    if target is not None:
        doc["projected_target_mm"] = result.transform.apply(np.asarray(target, dtype=float)).tolist()
    text = json.dumps(doc, indent=2) + "\n"
    if out:
        Path(out).parent.mkdir(parents=True, exist_ok=True)
        Path(out).write_text(text)
    print(text, end="")
    return 0


# ------------------------------------------------------------------ parser

def _add_config_args(p, method=True):
    p.add_argument("--config", help="JSON file with RunConfig keys")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                   help="override one config key (JSON value), repeatable")
    p.add_argument("--dataset", dest="dataset_dir")
    p.add_argument("--out", dest="output_dir")
    p.add_argument("--seed", type=int)
    p.add_argument("--epochs", type=int)
    if method:
        p.add_argument("--method", choices=METHODS)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="antloc", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("phantom-gen", help="generate a phantom dataset")
    p.add_argument("--spec", help="JSON file with PhantomSpec keys")
    p.add_argument("--profile", choices=("default", "fast"), default="default")
    p.add_argument("--seed", type=int)
    p.add_argument("--out", required=True)

    p = sub.add_parser("train", help="train one localizer (first configured fraction)")
    _add_config_args(p)
    p = sub.add_parser("eval", help="evaluate a checkpoint or the registration baseline on the test split")
    _add_config_args(p)
    p.add_argument("--checkpoint")
    p = sub.add_parser("compare", help="full comparison across methods and training fractions")
    _add_config_args(p, method=False)

    p = sub.add_parser("infer", help="two-stage inference on volume files")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out", required=True, help="output landmarks CSV")
    p.add_argument("--decode", choices=("argmax", "coords"), default="argmax")
    p.add_argument("volumes", nargs="+")

    p = sub.add_parser("gradcheck", help="finite-difference check of both training pipelines")
    p.add_argument("--samples", type=int, default=200)
    p.add_argument("--size", type=int, default=6)
    p.add_argument("--seed", type=int, default=0)

    p = sub.add_parser("register", help="affine registration of one atlas/query pair")
    p.add_argument("atlas")
    p.add_argument("query")
    p.add_argument("--out")
    p.add_argument("--target", type=float, nargs=3, metavar=("X", "Y", "Z"),
                   help="atlas world-mm point to project")
    p.add_argument("--config")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command == "phantom-gen":
            return cmd_phantom_gen(args)
        if args.command == "infer":
            return cmd_infer(args.checkpoint, args.volumes, args.out, args.decode)
        if args.command == "gradcheck":
            return cmd_gradcheck(args.samples, args.size, args.seed)
        if args.command == "register":
            cfg = load_config(args.config, args.set)
            return cmd_register(args.atlas, args.query, args.out, args.target, cfg)
        cfg = load_config(args.config, args.set, dataset_dir=args.dataset_dir, output_dir=args.output_dir,
                          seed=args.seed, epochs=args.epochs, method=getattr(args, "method", None))
        if args.command == "train":
            return cmd_train(cfg)
        if args.command == "eval":
            return cmd_eval(cfg, args.checkpoint)
        return cmd_compare(cfg)
    except (StepFailed, ValueError, OSError) as exc:
        print(f"antloc {args.command}: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
