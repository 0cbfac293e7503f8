"""Command-line harness: gen-data, train, attack, stitch, eval and report.

All paths are relative to ``--workdir``. Layout::

    data/manifest.tsv, data/{train,test}/<id>_{1,2}.png
    runs/<run>/checkpoint.npz, history.csv, genotype.txt, metrics.csv
    runs/<run>/attacks/<attack>/<id>_{1,2}.png, <id>.txt, records.csv, summary.csv

Every CSV starts with a ``# config_hash=... seed=...`` line. Exit codes: 0 on
success, 1 for runtime or data errors, 2 for usage errors.
"""
from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np
import torch

from . import checkpoint as ckpt
from .attacks import ATTACKS, ImagePair, run_attack
from .cells import OpKind, uniform_genotype
from .config import ConfigError, ExperimentConfig, load_config
from .data import (DatasetManifest, ManifestRecord, load_image, load_manifest_pairs,
                   make_synthetic_dataset, save_image)
from .errors import AttackDiverged, StitchError
from .estimator import LEVELS, EstimatorConfig, EstimatorNet
from .geometry import corner_error
from .losses import loss_S
from .metrics import MetricReport, evaluate_model
from .reconstructor import N_CELLS, ReconstructorConfig, ReconstructorNet
from .stitching import compose, stitch_pair
from .training import (AATConfig, TrainConfig, build_estimator, finalize, new_state, train_aat,
                       train_reconstructor, train_routine_adversarial, train_standard)

log = logging.getLogger("advstitch")

MODES = ("standard", "routine", "aat")
HISTORY_COLUMNS = ("stage", "epoch", "clean_ls", "attacked_ls", "corner_error", "lr")
RECORD_COLUMNS = ("id", "status", "delta_inf", "ls_clean", "ls_attacked",
                  "corner_error_clean", "corner_error_attacked")
SUMMARY_COLUMNS = ("attack", "n", "failures", "mean_delta_inf", "mean_loss_gain",
                   "mean_corner_error_clean", "mean_corner_error_attacked")


class UsageError(Exception):
    pass


# ---------------------------------------------------------------------------
# small helpers


def _fmt(v):
    if v is None:
        return ""
    if isinstance(v, float):
        return repr(v)
    return str(v)


def write_csv(path: Path, cfg: ExperimentConfig, columns, rows) -> None:
    """CSV with a provenance comment line; floats use ``repr`` so reruns compare byte for byte."""
    buf = io.StringIO()
    buf.write(f"# config_hash={cfg.hash()} seed={cfg.seed}\n")
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(columns)
    for row in rows:
        writer.writerow([_fmt(row.get(c)) for c in columns])
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(buf.getvalue())


def read_csv(path: Path) -> list[dict]:
    lines = [ln for ln in Path(path).read_text().splitlines() if not ln.startswith("#")]
    return list(csv.DictReader(lines))


def baseline_genotypes(nodes: int, count: int):
    return [uniform_genotype(OpKind.SEP_CONV_3, nodes)] * count


def _manifest_path(workdir: Path) -> Path:
    return workdir / "data" / "manifest.tsv"


def load_split(workdir: Path, name: str):
    path = _manifest_path(workdir)
    if not path.is_file():
        raise FileNotFoundError(f"{path} not found; run gen-data first")
    manifest = DatasetManifest.load(path).by_split(name)
    return load_manifest_pairs(manifest, workdir)


def _run_dir(workdir: Path, run: str) -> Path:
    return workdir / "runs" / run


# ---------------------------------------------------------------------------
# checkpoints


def _meta(cfg: ExperimentConfig, mode: str, stage: str, state, genotypes=None, extra=None):
    meta = {
        "mode": mode,
        "stage": stage,
        "epoch": state.epoch,
        "seed": state.seed,
        "skipped_batches": state.skipped_batches,
        "history": state.history,
        "config": cfg.to_dict(),
        "config_hash": cfg.hash(),
        "genotypes": ckpt.genotypes_to_text(genotypes) if genotypes else None,
    }
    meta.update(extra or {})
    return meta


def _estimator_config(meta) -> EstimatorConfig:
    raw = dict(meta["config"]["estimator"])
    raw["rho_max"] = tuple(raw["rho_max"])
    return EstimatorConfig(**raw)


def load_models(path):
    """Estimator (eval mode) and optional reconstructor from a run checkpoint."""
    meta, arrays = ckpt.load_checkpoint(path)
    genotypes = ckpt.genotypes_from_text(meta["genotypes"]) if meta.get("genotypes") else None
    est = EstimatorNet(_estimator_config(meta), genotypes)
    ckpt.load_module(est, "estimator", arrays)
    est.eval()
    rec = None
    if ckpt.has_component(arrays, "reconstructor"):
        rcfg = ReconstructorConfig(**meta["config"]["reconstructor"])
        rgen = ckpt.genotypes_from_text(meta["reconstructor_genotypes"])
        rec = ReconstructorNet(rcfg, rgen)
        ckpt.load_module(rec, "reconstructor", arrays)
        rec.eval()
    return est, rec, meta


# ---------------------------------------------------------------------------
# commands


def cmd_gen_data(cfg: ExperimentConfig, workdir: Path) -> DatasetManifest:
    d = cfg.data
    records = []
    # train and test are cut from disjoint sets of source images
    for split_name, n, seed in (("train", d.n_train, 2 * cfg.seed), ("test", d.n_test, 2 * cfg.seed + 1)):
        ds = make_synthetic_dataset(n, seed, d.patch_size, d.rho, d.n_sources, d.source_size)
        for i in range(len(ds)):
            rid = f"{split_name}{i:05d}"
            p1 = f"data/{split_name}/{rid}_1.png"
            p2 = f"data/{split_name}/{rid}_2.png"
            save_image(ds.x1[i], workdir / p1)
            save_image(ds.x2[i], workdir / p2)
            size = f"{d.patch_size}x{d.patch_size}"
            records.append(ManifestRecord(
                id=rid, role="synthetic", split=split_name, seed=seed, path1=p1, path2=p2,
                orig_size=size, target_size=size,
                h_gt=tuple(float(v) for v in ds.H_gt[i].reshape(-1).tolist()),
            ))
    manifest = DatasetManifest(tuple(records))
    manifest.save(_manifest_path(workdir))
    log.info("wrote %d pair records (manifest %s)", len(manifest), manifest.hash())
    return manifest


def _write_history(run_dir: Path, cfg, rows):
    write_csv(run_dir / "history.csv", cfg, HISTORY_COLUMNS, rows)


def cmd_train(cfg: ExperimentConfig, workdir: Path, mode: str, run: str, resume: bool = False):
    if mode not in MODES:
        raise UsageError(f"unknown training mode {mode!r}; expected one of {MODES}")
    run_dir = _run_dir(workdir, run)
    path = run_dir / "checkpoint.npz"
    dataset = load_split(workdir, "train")
    t = cfg.train
    tc = TrainConfig(lr=t.lr, lr_decay=t.lr_decay, batch_size=t.batch_size,
                     corner_weight=t.corner_weight)
    nodes = cfg.estimator.nodes
    search_state = None
    rows: list[dict] = []

    if resume:
        meta, arrays = ckpt.load_checkpoint(path)
        if meta["mode"] != mode:
            raise UsageError(f"checkpoint was trained with mode {meta['mode']!r}, not {mode!r}")
        stage = meta["stage"]
        genotypes = ckpt.genotypes_from_text(meta["genotypes"]) if meta.get("genotypes") else None
        model = EstimatorNet(_estimator_config(meta), genotypes)
        ckpt.load_module(model, "estimator", arrays)
        lr = cfg.aat.gamma2 if stage == "search" else t.lr
        state = new_state(model, meta["seed"], lr=lr, arch_lr=cfg.aat.gamma1)
        ckpt.load_optimizer(state.theta_opt, "theta", meta, arrays)
        ckpt.load_optimizer(state.alpha_opt, "alpha", meta, arrays)
        state.epoch = meta["epoch"]
        state.skipped_batches = meta.get("skipped_batches", 0)
        state.history = list(meta["history"])
        rows = list(meta.get("rows", []))
        if stage == "final" and ckpt.has_component(arrays, "search"):
            search_state = EstimatorNet(_estimator_config(meta))
            ckpt.load_module(search_state, "search", arrays)
    else:
        stage = "search" if mode == "aat" else "final"
        genotypes = None if mode == "aat" else baseline_genotypes(nodes, LEVELS)
        model = build_estimator(cfg.estimator, cfg.seed, genotypes)
        lr = cfg.aat.gamma2 if stage == "search" else t.lr
        state = new_state(model, cfg.seed, lr=lr, arch_lr=cfg.aat.gamma1)

    def save(stage_name, extra_modules=None):
        meta = _meta(cfg, mode, stage_name, state, state.model.genotypes, {"rows": rows})
        modules = {"estimator": state.model, **(extra_modules or {})}
        ckpt.save_checkpoint(path, meta, modules,
                             {"theta": state.theta_opt, "alpha": state.alpha_opt})

    def record(stage_name):
        row = dict(state.history[-1], stage=stage_name)
        rows.append(row)
        _write_history(run_dir, cfg, rows)

    def maybe_checkpoint(stage_name, extra_modules=None):
        if t.checkpoint_every and state.epoch % t.checkpoint_every == 0:
            save(stage_name, extra_modules)

    if stage == "search":
        aat = AATConfig(lam=cfg.aat.lam, gamma1=cfg.aat.gamma1, gamma2=cfg.aat.gamma2, epochs=1,
                        batch_size=t.batch_size, lr_decay=t.lr_decay, attack=cfg.attack,
                        supervised_theta=cfg.aat.supervised_theta)
        while state.epoch < cfg.aat.search_epochs:
            train_aat(state, dataset, aat)
            record("search")
            maybe_checkpoint("search")
        if state.skipped_batches:
            log.warning("AAT skipped %d batches after attack divergence", state.skipped_batches)
        search_state = state.model
        genotypes, state = finalize(state, cfg.aat.k, dataset, 0, tc, cfg.seed)
        (run_dir / "genotype.txt").parent.mkdir(parents=True, exist_ok=True)
        (run_dir / "genotype.txt").write_text(ckpt.genotypes_to_text(genotypes))
        stage = "final"

    extra = {"search": search_state} if search_state is not None else {}
    while state.epoch < t.epochs:
        if mode == "routine":
            train_routine_adversarial(state, dataset, 1, cfg.attack, tc)
        else:
            train_standard(state, dataset, 1, tc)
        record("final")
        maybe_checkpoint("final", extra)

    modules = dict(extra)
    meta_extra = {"rows": rows}
    if t.reconstructor_epochs > 0:
        rgen = baseline_genotypes(cfg.reconstructor.nodes, N_CELLS)
        torch.manual_seed(cfg.seed)
        rec = ReconstructorNet(cfg.reconstructor, rgen)
        state.model.eval()
        train_reconstructor(rec, dataset, t.reconstructor_epochs, state.model,
                            replace(tc), seed=cfg.seed)
        modules["reconstructor"] = rec
        meta_extra["reconstructor_genotypes"] = ckpt.genotypes_to_text(rgen)
    meta = _meta(cfg, mode, "final", state, state.model.genotypes, meta_extra)
    ckpt.save_checkpoint(path, meta, {"estimator": state.model, **modules},
                         {"theta": state.theta_opt, "alpha": state.alpha_opt})
    _write_history(run_dir, cfg, rows)
    return state


def _attack_fn(name: str, cfg: ExperimentConfig, track: bool = False):
    """Attack callable with a deterministic per-call generator for PGD's random start."""
    calls = {"n": 0}

    def fn(model, pair):
        g = torch.Generator()
        g.manual_seed(int(np.random.default_rng([cfg.seed, calls["n"]]).integers(2 ** 62)))
        calls["n"] += 1
        return run_attack(name, model, pair, cfg.attack, generator=g, track=track)

    return fn


def _checkpoint_for(workdir: Path, run: str | None, checkpoint: str | None) -> Path:
    if checkpoint:
        return workdir / checkpoint
    if run:
        return _run_dir(workdir, run) / "checkpoint.npz"
    raise UsageError("either --run or --checkpoint is required")


def cmd_attack(cfg: ExperimentConfig, workdir: Path, run: str, attack: str,
               checkpoint: str | None = None, limit: int | None = None):
    if attack not in ATTACKS:
        raise UsageError(f"unknown attack {attack!r}; expected one of {ATTACKS}")
    model, _, _ = load_models(_checkpoint_for(workdir, run, checkpoint))
    test = load_split(workdir, "test")
    if limit is not None:
        test = test.subset(range(min(limit, len(test))))
    out_dir = _run_dir(workdir, run or Path(checkpoint).stem) / "attacks" / attack
    fn = _attack_fn(attack, cfg, track=True)
    a = cfg.attack
    h, w = test.x1.shape[-2:]
    records = []
    for batch in test.batches(cfg.eval.batch_size):
        pair = ImagePair(batch.x1, batch.x2, batch.H_gt)
        try:
            adv = fn(model, pair)
        except AttackDiverged as exc:
            log.warning("attack diverged on batch starting %s: %s", batch.ids[0], exc)
            records += [{"id": i, "status": "diverged"} for i in batch.ids]
            continue
        a1, a2 = adv.x1.float(), adv.x2.float()
        with torch.no_grad():
            H_clean = model(pair.x1, pair.x2)
            H_adv = model(a1, a2)
            ls_clean = loss_S(pair.x1.double(), pair.x2.double(), H_clean)
            ls_adv = loss_S(pair.x1.double(), pair.x2.double(), H_adv)
            ce_clean = corner_error(H_clean, pair.H_gt, (h, w)) if pair.H_gt is not None else None
            ce_adv = corner_error(H_adv, pair.H_gt, (h, w)) if pair.H_gt is not None else None
        d1 = (adv.x1 - pair.x1.double()).abs().flatten(1).amax(1)
        d2 = (adv.x2 - pair.x2.double()).abs().flatten(1).amax(1)
        dinf = torch.maximum(d1, d2)
        for i, rid in enumerate(batch.ids):
            save_image(a1[i], out_dir / f"{rid}_1.png")
            save_image(a2[i], out_dir / f"{rid}_2.png")
            trace = ",".join(repr(float(v)) for v in adv.sample_trace[:, i])
            (out_dir / f"{rid}.txt").write_text(
                f"config_hash={cfg.hash()}\nseed={cfg.seed}\nattack={attack}\n"
                f"epsilon={a.epsilon!r}\nbeta={a.beta!r}\niters={a.iters}\n"
                f"delta_inf={float(dinf[i])!r}\nloss_trace={trace}\n")
            records.append({
                "id": rid, "status": "ok", "delta_inf": float(dinf[i]),
                "ls_clean": float(ls_clean[i]), "ls_attacked": float(ls_adv[i]),
                "corner_error_clean": None if ce_clean is None else float(ce_clean[i]),
                "corner_error_attacked": None if ce_adv is None else float(ce_adv[i]),
            })
    write_csv(out_dir / "records.csv", cfg, RECORD_COLUMNS, records)
    ok = [r for r in records if r["status"] == "ok"]

    def mean(key):
        vals = [r[key] for r in ok if r.get(key) is not None]
        return float(np.mean(vals)) if vals else None

    gain = float(np.mean([r["ls_attacked"] - r["ls_clean"] for r in ok])) if ok else None
    summary = {"attack": attack, "n": len(ok), "failures": len(records) - len(ok),
               "mean_delta_inf": mean("delta_inf"), "mean_loss_gain": gain,
               "mean_corner_error_clean": mean("corner_error_clean"),
               "mean_corner_error_attacked": mean("corner_error_attacked")}
    write_csv(out_dir / "summary.csv", cfg, SUMMARY_COLUMNS, [summary])
    return summary


def cmd_stitch(cfg: ExperimentConfig, workdir: Path, pair, out: str, run: str | None = None,
               checkpoint: str | None = None):
    model, rec, _ = load_models(_checkpoint_for(workdir, run, checkpoint))
    size = cfg.data.patch_size
    x1 = load_image(workdir / pair[0], size).unsqueeze(0)
    x2 = load_image(workdir / pair[1], size).unsqueeze(0)
    with torch.no_grad():
        H = model(x1, x2)
        image, union, canvas = compose(x1, x2, H, rec)
    out_path = workdir / out
    save_image(image[0], out_path)
    info = {"output": str(out_path), "width": canvas.width, "height": canvas.height,
            "tx": canvas.tx, "ty": canvas.ty, "H": H[0].reshape(-1).tolist()}
    print(json.dumps(info))
    return info


def cmd_eval(cfg: ExperimentConfig, workdir: Path, run: str, checkpoint: str | None = None,
             limit: int | None = None):
    model, rec, _ = load_models(_checkpoint_for(workdir, run, checkpoint))
    test = load_split(workdir, "test")
    if limit is not None:
        test = test.subset(range(min(limit, len(test))))
    for name in cfg.eval.attacks:
        if name not in ATTACKS:
            raise UsageError(f"unknown attack {name!r} in eval.attacks")
    attacks = [(name, _attack_fn(name, cfg)) for name in cfg.eval.attacks]

    def stitcher(m, a1, a2, H):
        return stitch_pair(m, a1, a2, H, rec)

    reports = evaluate_model(model, test, attacks, method=run or "model", stitcher=stitcher,
                             batch_size=cfg.eval.batch_size)
    write_csv(_run_dir(workdir, run) / "metrics.csv", cfg, MetricReport.COLUMNS,
              [r.row() for r in reports])
    return reports


def cmd_report(cfg: ExperimentConfig, workdir: Path, runs, out: str = "report"):
    rows = []
    for run in runs:
        path = Path(run) if Path(run).suffix == ".csv" else _run_dir(workdir, run) / "metrics.csv"
        if not path.is_absolute() and not path.is_file():
            path = workdir / path
        if not path.is_file():
            raise FileNotFoundError(f"no metrics for {run}: {path} missing")
        rows += read_csv(path)
    out_csv = workdir / f"{out}.csv"
    write_csv(out_csv, cfg, MetricReport.COLUMNS, rows)
    plot_degradation(rows, workdir / f"{out}.png")
    return rows


def plot_degradation(rows, path: Path, key: str = "corner_error_px") -> None:
    """Grouped bars: per-attack increase of ``key`` over the benign condition, per method."""
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    methods = list(dict.fromkeys(r.get("method", "") for r in rows))
    conditions = [c for c in dict.fromkeys(r.get("condition", "") for r in rows) if c != "benign"]

    def value(method, condition):
        for r in rows:
            if r.get("method") == method and r.get("condition") == condition:
                try:
                    return float(r.get(key) or "nan")
                except ValueError:
                    return float("nan")
        return float("nan")

    fig, ax = plt.subplots(figsize=(max(4, 1.5 * len(conditions) + 2), 3.2))
    width = 0.8 / max(1, len(methods))
    xs = np.arange(len(conditions))
    for i, method in enumerate(methods):
        base = value(method, "benign")
        deltas = [value(method, c) - base for c in conditions]
        ax.bar(xs + i * width, deltas, width, label=method)
    ax.set_xticks(xs + width * (len(methods) - 1) / 2)
    ax.set_xticklabels(conditions)
    ax.set_ylabel(f"{key} increase over benign")
    ax.axhline(0, color="k", lw=0.5)
    if methods:
        ax.legend(fontsize="small")
    fig.tight_layout()
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, dpi=100, metadata={"Software": None})
    plt.close(fig)


# ---------------------------------------------------------------------------
# entry point


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--workdir", default=".", help="root for all inputs and outputs")
    common.add_argument("--config", help="YAML experiment config")
    common.add_argument("--set", dest="overrides", action="append", default=[],
                        metavar="KEY=VALUE", help="dotted-key override, e.g. attack.iters=5")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = _Parser(prog="advstitch", description=__doc__.split("\n")[0])
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    sub.add_parser("gen-data", parents=[common], help="write synthetic pairs and a manifest")

    p = sub.add_parser("train", parents=[common], help="train an estimator")
    p.add_argument("--mode", required=True, help="standard | routine | aat")
    p.add_argument("--run", required=True)
    p.add_argument("--resume", action="store_true", help="continue from the run's checkpoint")

    p = sub.add_parser("attack", parents=[common], help="attack the test split")
    p.add_argument("--attack", required=True, help="fgsm | bim | pgd | soa")
    p.add_argument("--run")
    p.add_argument("--checkpoint")
    p.add_argument("--limit", type=int)

    p = sub.add_parser("stitch", parents=[common], help="stitch one image pair")
    p.add_argument("--pair", nargs=2, required=True, metavar=("IMG1", "IMG2"))
    p.add_argument("--out", required=True)
    p.add_argument("--run")
    p.add_argument("--checkpoint")

    p = sub.add_parser("eval", parents=[common], help="benign and attacked metrics")
    p.add_argument("--run", required=True)
    p.add_argument("--checkpoint")
    p.add_argument("--limit", type=int)

    p = sub.add_parser("report", parents=[common], help="merge metrics and plot degradation")
    p.add_argument("runs", nargs="+", help="run names or metrics CSV paths")
    p.add_argument("--out", default="report")
    return parser


def run(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        cfg = load_config(args.config, args.overrides)
    except (UsageError, ConfigError) as exc:
        print(f"advstitch: usage error: {exc}", file=sys.stderr)
        return 2
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    torch.set_num_threads(1)
    workdir = Path(args.workdir)
    try:
        if args.command == "gen-data":
            cmd_gen_data(cfg, workdir)
        elif args.command == "train":
            cmd_train(cfg, workdir, args.mode, args.run, args.resume)
        elif args.command == "attack":
            cmd_attack(cfg, workdir, args.run, args.attack, args.checkpoint, args.limit)
        elif args.command == "stitch":
            cmd_stitch(cfg, workdir, args.pair, args.out, args.run, args.checkpoint)
        elif args.command == "eval":
            cmd_eval(cfg, workdir, args.run, args.checkpoint, args.limit)
        elif args.command == "report":
            cmd_report(cfg, workdir, args.runs, args.out)
    except UsageError as exc:
        print(f"advstitch: usage error: {exc}", file=sys.stderr)
        return 2
    except (StitchError, FileNotFoundError, OSError, ValueError, RuntimeError) as exc:
        print(f"advstitch: error: {exc}", file=sys.stderr)
        return 1
    return 0


def main(argv=None):
    sys.exit(run(argv))


if __name__ == "__main__":
    main()
