"""Command-line entry point: gen-data, train, eval, explain, prune, gradcheck.

Every numeric option can also come from a flat ``key=value`` file passed with
``--config``; flags override the file, the file overrides built-in defaults.
Each command writes its fully resolved configuration next to its outputs.
Exit codes: 0 ok, 2 config, 3 data, 4 numeric.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

import numpy as np

from . import data as D
from .errors import ConfigError, DataError, MissingFileError, NumericError, ProtocaseError

# name -> (type, default, help); types: int, float, str, bool
GEN_OPTS = {
    "seed": (int, 7, "generator seed"),
    "n_per_type": (int, 300, "samples per margin type"),
    "image_size": (int, 64, "square image side in pixels"),
    "context_margin_px": (int, 8, "minimum gap between lesion and image border"),
    "fine_fraction": (float, 0.12, "share of training images with a fine mask"),
    "confounder_strength": (float, 0.0, "probability that the corner tag follows the margin type"),
}
MODEL_OPTS = {
    "prototypes_per_type": (int, 5, "prototypes per margin type"),
    "pool_fraction": (float, 0.05, "top-k pooling fraction of the feature map"),
    "epsilon_sim": (float, 1e-4, "epsilon of the log similarity"),
}
LOSS_OPTS = {
    "lambda_cluster": (float, 0.8, "cluster cost weight"),
    "lambda_sep": (float, 0.08, "separation cost weight"),
    "lambda_fine": (float, 0.001, "fine-annotation loss weight"),
}
SCHEDULE_OPTS = {
    "seed": (int, 7, "training seed"),
    "warmup_epochs": (int, 10, "warm-up epochs (add-on layers and prototypes only)"),
    "a1_epochs_per_cycle": (int, 10, "joint epochs per cycle"),
    "a3_steps_per_cycle": (int, 200, "last-layer steps per cycle"),
    "max_cycles": (int, 5, "maximum number of A1/A2/A3 cycles"),
    "convergence_tol": (float, 1e-3, "relative change of the cycle-mean loss that ends the cycles"),
    "lr_joint": (float, 1e-3, "learning rate of the joint stage"),
    "lr_h1": (float, 1e-2, "initial step of the last-layer stage"),
    "lr_b": (float, 1e-2, "initial step of the malignancy stage"),
    "optimizer": (str, "adam", "joint-stage optimizer: adam or sgd"),
    "batch_size": (int, 20, "images per batch"),
    "fine_mode": (str, "batch", "fine-loss subset: batch or dataset"),
    "fine_per_batch": (int, 3, "finely annotated images per batch"),
    "b_steps": (int, 3000, "maximum malignancy-fit steps"),
    "weight_clip": (float, 100.0, "bound on the malignancy weights"),
    "augment": (bool, False, "random flips, rotations and crops during the joint stage"),
}
TRAIN_OPTS = {**MODEL_OPTS, **LOSS_OPTS, **SCHEDULE_OPTS, "stop_after": (int, 0, "stop after N schedule units, 0 = run to the end")}
EVAL_OPTS = {
    "split": (str, "test", "dataset split"),
    "tau": (float, 0.95, "activation-precision percentile"),
    "n_boot": (int, 5000, "bootstrap resamples"),
    "seed": (int, 0, "bootstrap seed"),
}
EXPLAIN_OPTS = {
    "split": (str, "test", "dataset split used when --ids is absent"),
    "count": (int, 3, "number of cases when --ids is absent"),
    "top": (int, 3, "evidence panels per case"),
    "tau": (float, 0.95, "percentile of the evidence boxes"),
}
PRUNE_OPTS = {"criteria": (str, "duplicate_source,wrong_sign", "comma-separated pruning criteria")}
GRAD_OPTS = {
    "seed": (int, 0, "model and data seed"),
    "tolerance": (float, 1e-4, "maximum relative error"),
    "lambda_fine": (float, 0.001, "fine-annotation loss weight"),
}


def _parse_bool(v: str) -> bool:
    low = str(v).strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ConfigError(f"not a boolean: {v!r}")


def _cast(name: str, typ, raw):
    try:
        return _parse_bool(raw) if typ is bool else typ(raw)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{name}: cannot read {raw!r} as {typ.__name__}") from exc


def read_config_file(path) -> dict[str, str]:
    """Flat key=value pairs; blank lines and lines starting with '#' are ignored."""
    p = Path(path)
    if not p.is_file():
        raise ConfigError(f"config file not found: {p}")
    out = {}
    for n, line in enumerate(p.read_text().splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ConfigError(f"{p}:{n}: expected key=value, got {line!r}")
        k, v = line.split("=", 1)
        out[k.strip().replace("-", "_")] = v.strip()
    return out


def resolve(opts: dict, args: argparse.Namespace) -> dict:
    """Defaults, then the config file, then explicit flags."""
    values = {k: d for k, (_, d, _) in opts.items()}
    if getattr(args, "config", None):
        for k, raw in read_config_file(args.config).items():
            if k not in opts:
                raise ConfigError(f"unknown config key {k!r} (known: {', '.join(sorted(opts))})")
            values[k] = _cast(k, opts[k][0], raw)
    for k in opts:
        v = getattr(args, k, None)
        if v is not None:
            values[k] = v
    return values


def write_config(path: Path, command: str, values: dict, extra: dict | None = None) -> None:
    lines = [f"# resolved configuration of `{command}`"]
    for k, v in sorted({**values, **(extra or {})}.items()):
        lines.append(f"{k}={v}")
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text("\n".join(lines) + "\n")


def _add_opts(p: argparse.ArgumentParser, opts: dict) -> None:
    for name, (typ, default, text) in opts.items():
        flag = "--" + name.replace("_", "-")
        kind = _parse_bool if typ is bool else typ
        p.add_argument(flag, dest=name, type=kind, default=None, metavar=typ.__name__.upper(),
                       help=f"{text} (default: {default})")


def _limit_threads() -> None:
    n = os.environ.get("PROTOCASE_THREADS")
    if not n:
        return
    try:
        count = int(n)
    except ValueError as exc:
        raise ConfigError(f"PROTOCASE_THREADS must be an integer, got {n!r}") from exc
    from threadpoolctl import threadpool_limits
    threadpool_limits(limits=max(1, count))


def _samples(directory, split: str):
    ds = D.load(directory)
    if split not in D.SPLITS:
        raise ConfigError(f"unknown split {split!r} (one of {', '.join(D.SPLITS)})")
    samples = ds.split(split)
    if not samples:
        raise DataError(f"split {split!r} of {directory} is empty")
    return ds, samples


def _load_model(path):
    from .checkpoint import load_checkpoint
    return load_checkpoint(path)


def _section(title: str, lines) -> str:
    return "\n".join([f"# --- {title} ---", *lines, f"# --- end {title} ---"])


# commands ---------------------------------------------------------------------

def cmd_gen_data(args) -> int:
    v = resolve(GEN_OPTS, args)
    cfg = D.GenConfig(n_per_type=v["n_per_type"], image_size=(v["image_size"], v["image_size"]),
                      fine_fraction=v["fine_fraction"], seed=v["seed"], confounder_strength=v["confounder_strength"],
                      context_margin_px=v["context_margin_px"])
    out = Path(args.out)
    D.save(D.generate(cfg), out)
    counts = D.read_manifest(out).counts()
    print(_section("dataset", ["split,count"] + [f"{s},{counts.get(s, 0)}" for s in D.SPLITS]))
    return 0


def _train_config(v: dict):
    from .losses import LossConfig
    from .network import ModelConfig
    from .trainer import TrainConfig, TrainSchedule
    model = ModelConfig(prototypes_per_type=v["prototypes_per_type"], pool_fraction=v["pool_fraction"],
                        epsilon_sim=v["epsilon_sim"])
    loss = LossConfig(lambda_cluster=v["lambda_cluster"], lambda_sep=v["lambda_sep"], lambda_fine=v["lambda_fine"])
    sched = TrainSchedule(**{k: v[k] for k in SCHEDULE_OPTS})
    return TrainConfig(model, loss, sched)


def cmd_train(args) -> int:
    from . import plotting
    from .checkpoint import save_checkpoint
    from .trainer import format_trace, train
    v = resolve(TRAIN_OPTS, args)
    cfg = _train_config(v)
    _, samples = _samples(args.data, "train")
    image_size = samples[0].image.shape
    if tuple(image_size) != tuple(cfg.model.image_size):
        cfg.model.image_size = tuple(image_size)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_config(out / "config.txt", "train", v, {"data": args.data, "resume": args.resume or ""})
    resume = _load_model(args.resume) if args.resume else None

    def log(row):
        if args.verbose:
            print(",".join(str(x) for x in row), file=sys.stderr, flush=True)

    try:
        res = train(cfg, samples, resume=resume, stop_after=v["stop_after"] or None, log=log)
    except NumericError as exc:
        diag = getattr(exc, "diagnostic", {})
        (out / "numeric_diagnostic.json").write_text(json.dumps(diag, indent=2, sort_keys=True) + "\n")
        raise
    name = "final.ckpt" if res.done else "partial.ckpt"
    save_checkpoint(out / name, res.checkpoint)
    (out / "trace.csv").write_text(format_trace(res.history))
    plotting.loss_curve(res.history, out / "loss_curve.png")
    last = res.history[-1] if res.history else None
    lines = ["key,value", f"checkpoint,{out / name}", f"done,{res.done}", f"rows,{len(res.history)}"]
    if last is not None:
        lines.append(f"last_stage,{last[1]}")
        lines.append(f"last_loss,{float(last[3])!r}")
    print(_section("train", lines))
    return 0


def _attention_maps(directory, ids) -> dict[str, np.ndarray]:
    from PIL import Image
    d = Path(directory)
    if not d.is_dir():
        raise MissingFileError(d, f"attention-map directory not found: {d}")
    maps = {}
    for sid in ids:
        npy, png = d / f"{sid}.npy", d / f"{sid}.png"
        if npy.is_file():
            maps[sid] = np.load(npy).astype(np.float64)
        elif png.is_file():
            maps[sid] = np.asarray(Image.open(png).convert("L"), dtype=np.float64) / 255.0
    if not maps:
        raise DataError(f"no attention maps named <sample id>.npy or .png found in {d}")
    return maps


def cmd_eval(args) -> int:
    from . import plotting
    from .evaluate import evaluate
    from .metrics import format_rows
    v = resolve(EVAL_OPTS, args)
    ckpt = _load_model(args.model)
    _, samples = _samples(args.data, v["split"])
    maps = _attention_maps(args.attention_maps, [s.id for s in samples]) if args.attention_maps else None
    rep = evaluate(ckpt.state, samples, tau=v["tau"], n_boot=v["n_boot"], seed=v["seed"], attention_maps=maps)
    text = format_rows(rep.rows)
    print(_section("metrics", text.strip().splitlines()))
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        write_config(out / "config.txt", "eval", v, {"model": args.model, "data": args.data,
                                                    "attention_maps": args.attention_maps or ""})
        (out / "metrics.csv").write_text(text)
        curves = {}
        for t, name in enumerate(D.MARGIN_TYPES):
            y = (rep.labels == t).astype(int)
            if 0 < y.sum() < len(y):
                curves[name] = (rep.forward.margin_probs[:, t], y)
        plotting.roc_curves(curves, out / "roc_margin.png", "margin (one vs rest)")
        if 0 < rep.malignancy.sum() < len(rep.malignancy):
            plotting.roc_curves({"malignancy": (rep.forward.malignancy_prob, rep.malignancy)},
                                out / "roc_malignancy.png", "malignancy")
    return 0


def cmd_explain(args) -> int:
    from .explain import explain_case, render_case
    v = resolve(EXPLAIN_OPTS, args)
    ckpt = _load_model(args.model)
    ds = D.load(args.data)
    every = dict(ds.samples)
    if args.ids:
        ids = [i.strip() for i in args.ids.split(",") if i.strip()]
        missing = [i for i in ids if i not in every]
        if missing:
            raise DataError(f"unknown sample ids: {', '.join(missing)}")
        cases = [every[i] for i in ids]
    else:
        if v["split"] not in D.SPLITS:
            raise ConfigError(f"unknown split {v['split']!r}")
        cases = ds.split(v["split"])[:v["count"]]
    out = Path(args.out)
    write_config(out / "config.txt", "explain", v, {"model": args.model, "data": args.data, "ids": args.ids or ""})
    for s in cases:
        expl = explain_case(ckpt.state, s.image, s.id, s.margin_label)
        render_case(ckpt.state, expl, s.image, out, dataset=every, top=v["top"], tau=v["tau"])
        print(_section(f"case {s.id}", expl.summary_lines()))
    return 0


def cmd_prune(args) -> int:
    from .checkpoint import Checkpoint, save_checkpoint
    from .trainer import prune
    v = resolve(PRUNE_OPTS, args)
    ckpt = _load_model(args.model)
    criteria = tuple(c.strip() for c in v["criteria"].split(",") if c.strip())
    state, report = prune(ckpt.state, criteria)
    out = Path(args.out)
    save_checkpoint(out, Checkpoint(state, ckpt.progress, ckpt.rng_state, ckpt.history,
                                    {**ckpt.extra, "pruned": [list(r) for r in report.removed]}, ckpt.opt_state))
    write_config(out.with_name(out.stem + "_config.txt"), "prune", v, {"model": args.model})
    print(_section("prune", report.lines()))
    return 0


def cmd_gradcheck(args) -> int:
    from .losses import LossConfig
    from .trainer import gradcheck_setup, objective_grad_check
    v = resolve(GRAD_OPTS, args)
    state, batch = gradcheck_setup(v["seed"])
    rep = objective_grad_check(state, batch, LossConfig(lambda_fine=v["lambda_fine"]), tolerance=v["tolerance"])
    print(_section("gradcheck", ["parameter,max_rel_error,coordinates,status"] + rep.lines()
                   + [f"worst,{rep.worst:.3e},,{'pass' if rep.passed else 'FAIL'}"]))
    if not rep.passed:
        raise NumericError(f"gradient check failed: worst relative error {rep.worst:.3e} >= {v['tolerance']}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="protocase", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    def cmd(name, fn, opts, text):
        sp = sub.add_parser(name, help=text, description=text)
        sp.add_argument("--config", default=None, help="flat key=value file; flags override it (default: none)")
        _add_opts(sp, opts)
        sp.set_defaults(func=fn)
        return sp

    g = cmd("gen-data", cmd_gen_data, GEN_OPTS, "generate and save the synthetic dataset")
    g.add_argument("--out", required=True, help="output directory")
    t = cmd("train", cmd_train, TRAIN_OPTS, "run the staged training schedule")
    t.add_argument("--data", required=True, help="dataset directory")
    t.add_argument("--out", required=True, help="output directory")
    t.add_argument("--resume", default=None, help="checkpoint to continue from (default: none)")
    t.add_argument("--verbose", action="store_true", help="print trace rows to stderr (default: off)")
    e = cmd("eval", cmd_eval, EVAL_OPTS, "metric report on one split")
    e.add_argument("--model", required=True, help="checkpoint file")
    e.add_argument("--data", required=True, help="dataset directory")
    e.add_argument("--out", default=None, help="directory for metrics.csv and ROC figures (default: none)")
    e.add_argument("--attention-maps", dest="attention_maps", default=None,
                   help="directory of external maps <id>.npy or <id>.png to score as well (default: none)")
    x = cmd("explain", cmd_explain, EXPLAIN_OPTS, "render case explanations")
    x.add_argument("--model", required=True, help="checkpoint file")
    x.add_argument("--data", required=True, help="dataset directory")
    x.add_argument("--out", required=True, help="output directory")
    x.add_argument("--ids", default=None, help="comma-separated sample ids (default: none)")
    r = cmd("prune", cmd_prune, PRUNE_OPTS, "deactivate duplicate and wrong-sign prototypes")
    r.add_argument("--model", required=True, help="checkpoint file")
    r.add_argument("--out", required=True, help="pruned checkpoint file")
    cmd("gradcheck", cmd_gradcheck, GRAD_OPTS, "finite-difference check of the training objective")
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        _limit_threads()
        return args.func(args)
    except ProtocaseError as exc:
        print(f"error [{exc.code}]: {exc}", file=sys.stderr)
        return exc.exit_code


if __name__ == "__main__":
    sys.exit(main())
