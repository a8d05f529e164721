"""Command-line entry point: ``shapefat <command> [flags]``.

Effective settings are resolved as defaults < ``--config`` JSON < flags and
written to ``run.json`` in the output directory.
"""
import argparse
import json
import logging
import os
import sys
import time

import numpy as np

from . import __version__

logger = logging.getLogger("shapefat")

DEFAULTS = {
    "seed": 0,
    "jobs": 1,
    "input_size": 64,
    "loss_weights": "1.0,0.5,0.5",
    "calib": None,
    # phantom
    "n": 315,
    "sigma": 1.5,
    "grade_mix": "122,107,42,44",
    "save_volumes": False,
    # training
    "variant": "proposed",
    "variants": "plain_backbone,baseline,proposed,mlp,pca_linreg",
    "epochs": 200,
    "batch": 32,
    "lr": 0.01,
    "decay_factor": 0.1,
    "decay_every": 20,
    "momentum": 0.9,
    "folds": 5,
    "fold": None,
    "threads": 1,
    "stage_strides": "2,2,2",
    "standardize": True,
}

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME = 0, 1, 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}\n{self.format_usage()}")


def _common(p, *names):
    if "seed" in names:
        p.add_argument("--seed", type=int, help="random seed (u64)")
    p.add_argument("--config", help="JSON file with settings; flags override it")
    p.add_argument("--out", help="output directory")
    if "jobs" in names:
        p.add_argument("--jobs", type=int, help="worker processes")
    if "input_size" in names:
        p.add_argument("--input-size", dest="input_size", type=int, choices=(64, 128, 512))
    if "loss_weights" in names:
        p.add_argument("--loss-weights", dest="loss_weights", help="l1,a1,a2")
    if "calib" in names:
        p.add_argument("--calib", help="c0,c1,t1,t2,t3")


def _training_flags(p):
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--decay-every", dest="decay_every", type=int)
    p.add_argument("--decay-factor", dest="decay_factor", type=float)
    p.add_argument("--momentum", type=float)
    p.add_argument("--threads", type=int, help="BLAS threads per worker")
    p.add_argument("--stage-strides", dest="stage_strides")


def build_parser():
    parser = _Parser(prog="shapefat", description="Liver fat estimation from body-shape depth maps.")
    parser.add_argument("--version", action="version", version=f"shapefat {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)

    p = sub.add_parser("phantom", help="generate a synthetic cohort")
    _common(p, "seed", "jobs", "input_size")
    p.add_argument("--n", type=int)
    p.add_argument("--sigma", type=float)
    p.add_argument("--grade-mix", dest="grade_mix", help="four counts or proportions")
    p.add_argument("--save-volumes", dest="save_volumes", action="store_true", default=None)

    p = sub.add_parser("preprocess", help="volumes + ROIs -> depth maps and manifest")
    _common(p, "input_size", "calib")
    p.add_argument("--volumes", required=True, help="directory of <id>.sfv with <id>.rois.json")

    p = sub.add_parser("train", help="train one network")
    _common(p, "seed", "input_size", "loss_weights", "calib")
    p.add_argument("--data", required=True, help="manifest.csv")
    p.add_argument("--variant")
    p.add_argument("--fold", type=int, help="hold out this fold (default: train on everything)")
    p.add_argument("--folds", type=int)
    _training_flags(p)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a manifest")
    _common(p, "calib")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)

    p = sub.add_parser("cv", help="k-fold cross-validation over variants")
    _common(p, "seed", "jobs", "input_size", "loss_weights", "calib")
    p.add_argument("--data", required=True)
    p.add_argument("--variants")
    p.add_argument("--folds", type=int)
    _training_flags(p)

    p = sub.add_parser("gradcam", help="heatmaps for one subject")
    _common(p)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--id", required=True, dest="subject", help="subject id or row index")
    p.add_argument("--data", help="manifest (default: the one recorded with the checkpoint)")

    p = sub.add_parser("report", help="summarize a cv run directory")
    _common(p)
    p.add_argument("--run", required=True)
    return parser


def resolve_settings(args):
    """defaults < JSON config < explicit flags."""
    settings = dict(DEFAULTS)
    if getattr(args, "config", None):
        with open(args.config) as f:
            loaded = json.load(f)
        loaded = loaded.get("settings", loaded)
        unknown = set(loaded) - set(DEFAULTS)
        if unknown:
            raise UsageError(f"unknown config keys: {sorted(unknown)}")
        settings.update(loaded)
    for key in DEFAULTS:
        val = getattr(args, key, None)
        if val is not None:
            settings[key] = val
    return settings


def _write_run_json(out_dir, command, settings, **extra):
    os.makedirs(out_dir, exist_ok=True)
    path = os.path.join(out_dir, "run.json")
    meta = {}
    if os.path.exists(path):
        with open(path) as f:
            meta = json.load(f)
    meta.update({"command": command, "version": __version__, "settings": settings})
    meta.update(extra)
    with open(path, "w") as f:
        json.dump(meta, f, indent=2, sort_keys=True)
    return path


def _calib(settings):
    from .pipeline import FatCalib
    return FatCalib.parse(settings["calib"]) if settings["calib"] else FatCalib()


def _ints(text):
    return tuple(int(v) for v in str(text).split(","))


def _configs(settings):
    from .engine import Schedule
    from .model import LossWeights, ModelConfig
    from .train import TrainConfig

    sched = Schedule(base_lr=settings["lr"], decay_factor=settings["decay_factor"],
                     decay_every=settings["decay_every"], momentum=settings["momentum"])
    tcfg = TrainConfig(epochs=settings["epochs"], batch=settings["batch"], schedule=sched,
                       seed=settings["seed"], variant=settings["variant"], folds=settings["folds"],
                       threads=settings["threads"], standardize=bool(settings["standardize"]))
    mcfg = ModelConfig(input_size=settings["input_size"], stage_strides=_ints(settings["stage_strides"]),
                       loss_weights=LossWeights.parse(settings["loss_weights"]))
    return tcfg, mcfg


def _load_data(path, settings):
    from .formats import load_dataset
    data = load_dataset(path)
    if data.size != settings["input_size"]:
        raise ValueError(f"{path} holds {data.size}x{data.size} maps but --input-size is {settings['input_size']}")
    return data


def cmd_phantom(args, settings):
    from .phantom import generate_dataset, save_subject_volume
    out = args.out or "data"
    mix = np.array([float(v) for v in str(settings["grade_mix"]).split(",")])
    if mix.size != 4 or mix.sum() <= 0:
        raise UsageError("--grade-mix needs four non-negative values")
    manifest, records = generate_dataset(settings["n"], settings["seed"], mix / mix.sum(), out,
                                         size=settings["input_size"], sigma=settings["sigma"],
                                         jobs=settings["jobs"])
    if settings["save_volumes"]:
        for r in records:
            save_subject_volume(r, os.path.join(out, "volumes"))
    counts = np.bincount([r.row.grade for r in records], minlength=4)
    print(f"wrote {len(records)} subjects to {manifest}; grade counts {counts.tolist()}")
    _write_run_json(out, "phantom", settings, grade_counts=counts.tolist())


def cmd_preprocess(args, settings):
    from .formats import ManifestRow, load_volume, save_depth_maps, write_manifest
    from .pipeline import ROI, label_from_volume, project_depth_maps
    out = args.out or "data"
    calib = _calib(settings)
    rows = []
    names = sorted(f[:-4] for f in os.listdir(args.volumes) if f.endswith(".sfv"))
    if not names:
        raise ValueError(f"no .sfv volumes in {args.volumes}")
    for sid in names:
        volume = load_volume(os.path.join(args.volumes, sid + ".sfv"))
        with open(os.path.join(args.volumes, sid + ".rois.json")) as f:
            rois = [ROI(int(r["slice"]), (float(r["row"]), float(r["col"])), float(r["radius"])) for r in json.load(f)]
        label = label_from_volume(volume, rois, calib)
        pair = project_depth_maps(volume, out_size=settings["input_size"], subject_id=sid)
        rel = os.path.relpath(save_depth_maps(pair, os.path.join(out, "maps")), out)
        rows.append(ManifestRow(sid, rel, rel, label.fat_pct, label.grade, label.mean_hu))
    write_manifest(rows, os.path.join(out, "manifest.csv"))
    print(f"preprocessed {len(rows)} volumes into {os.path.join(out, 'manifest.csv')}")
    _write_run_json(out, "preprocess", settings)


def cmd_train(args, settings):
    from dataclasses import replace
    from .train import stratified_kfold, train_model, write_history
    out = args.out or "runs/train"
    data = _load_data(args.data, settings)
    tcfg, mcfg = _configs(settings)
    idx = np.arange(len(data))
    fold = settings["fold"]
    if fold is not None:
        folds = stratified_kfold(data.grade, tcfg.folds, tcfg.seed)
        if not 0 <= fold < len(folds):
            raise UsageError(f"--fold must lie in 0..{len(folds) - 1}")
        idx = np.setdiff1d(idx, folds[fold])
    os.makedirs(out, exist_ok=True)
    tag = f"{tcfg.variant}" + (f"_f{fold}" if fold is not None else "")
    ckpt = os.path.join(out, f"{tag}.sfp")
    _, history = train_model(replace(tcfg), data, idx, mcfg, fold=fold or 0, checkpoint=ckpt,
                             meta={"data": os.path.abspath(args.data)})
    write_history(history, os.path.join(out, f"history_{tag}.csv"))
    print(f"checkpoint {ckpt}; final training loss {history[-1]['total']:.4f}")
    _write_run_json(out, "train", settings, data=os.path.abspath(args.data), checkpoint=ckpt)


def cmd_eval(args, settings):
    from .model import load_model, predict
    from .train import metrics_report, write_reports
    out = args.out or "runs/eval"
    mp = load_model(args.ckpt)
    settings["input_size"] = mp.config.input_size
    data = _load_data(args.data, settings)
    calib = _calib(settings)
    pred, _ = predict(mp, data.frontal, data.lateral, calib)
    name = mp.config.variant
    report = metrics_report(name, pred, data.fat, data.grade, calib)
    os.makedirs(out, exist_ok=True)
    write_reports({name: report}, data, out)
    print(f"{name}: RMSE {report.rmse:.3f}  R2 {report.r2:.4f}  grade accuracy {report.grade_accuracy:.1f}%")
    _write_run_json(out, "eval", settings, checkpoint=os.path.abspath(args.ckpt), data=os.path.abspath(args.data))


def cmd_cv(args, settings):
    from .train import run_cv
    out = args.out or "runs/cv"
    _load_data(args.data, settings)  # size check; run_cv loads by path so checkpoints record it
    tcfg, mcfg = _configs(settings)
    variants = [v.strip() for v in str(settings["variants"]).split(",") if v.strip()]
    reports = run_cv(tcfg, args.data, variants, out_dir=out, model_config=mcfg, calib=_calib(settings),
                     jobs=settings["jobs"])
    for name, r in reports.items():
        print(f"{name:16s} RMSE {r.rmse:7.3f}  R2 {r.r2:7.4f}  grade accuracy {r.grade_accuracy:5.1f}%")
    _write_run_json(out, "cv", settings)


def _find_subject(data, subject):
    if subject in data.ids:
        return data.ids.index(subject)
    if subject.isdigit():
        i = int(subject)
        for sid in (f"s{i:04d}", str(i)):
            if sid in data.ids:
                return data.ids.index(sid)
        if i < len(data):
            return i
    raise ValueError(f"subject {subject!r} not found")


def cmd_gradcam(args, settings):
    from .formats import load_dataset
    from .gradcam import export_heatmap, grad_cam_map
    from .model import load_model
    out = args.out or "viz"
    mp = load_model(args.ckpt)
    data_path = args.data
    if data_path is None:
        with open(args.ckpt + ".json") as f:
            data_path = json.load(f).get("data")
        if not data_path:
            raise UsageError("checkpoint does not record its manifest; pass --data")
    data = load_dataset(data_path)
    i = _find_subject(data, args.subject)
    heat = grad_cam_map(mp, data.frontal[i], data.lateral[i])
    paths = export_heatmap(heat, data.frontal[i], out, args.subject)
    for p in paths.values():
        print(p)
    _write_run_json(out, "gradcam", settings, checkpoint=os.path.abspath(args.ckpt),
                    data=os.path.abspath(data_path), subject=args.subject)


def cmd_report(args, settings):
    from .train import read_comparison
    path = os.path.join(args.run, "comparison.csv")
    table = read_comparison(path)
    lines = ["| method | RMSE (pp) | R2 | grade accuracy (%) |", "|---|---|---|---|"]
    for name, m in table.items():
        lines.append(f"| {name} | {m['rmse']:.3f} | {m['r2']:.4f} | {m['grade_accuracy']:.1f} |")
    text = "\n".join(lines) + "\n"
    print(text, end="")
    out = args.out or args.run
    os.makedirs(out, exist_ok=True)
    with open(os.path.join(out, "report.md"), "w") as f:
        f.write(text)


COMMANDS = {
    "phantom": cmd_phantom,
    "preprocess": cmd_preprocess,
    "train": cmd_train,
    "eval": cmd_eval,
    "cv": cmd_cv,
    "gradcam": cmd_gradcam,
    "report": cmd_report,
}


def run(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if not args.command:
            raise UsageError(parser.format_usage())
        settings = resolve_settings(args)
    except UsageError as e:
        sys.stderr.write(str(e).rstrip() + "\n")
        return EXIT_USAGE
    except SystemExit as e:  # --help / --version
        return EXIT_OK if e.code in (0, None) else EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    start = time.perf_counter()
    try:
        COMMANDS[args.command](args, settings)
    except UsageError as e:
        sys.stderr.write(str(e).rstrip() + "\n")
        return EXIT_USAGE
    except Exception as e:  # noqa: BLE001 - report and map to the runtime exit code
        logger.debug("failure", exc_info=True)
        sys.stderr.write(f"error: {e}\n")
        return EXIT_RUNTIME
    logger.info("%s finished in %.1fs", args.command, time.perf_counter() - start)
    return EXIT_OK


def main():
    sys.exit(run())


if __name__ == "__main__":
    main()
