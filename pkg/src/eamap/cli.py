"""Command-line pipeline: train, calibrate, plan, eval, sweep, export.

Every command reads one resolved configuration (defaults, then ``--config``,
then ``--set`` overrides, then ``--seed``) and writes it beside its outputs
as ``<command>.resolved.ini`` together with the sha256 of each output file.

Exit codes: 0 success, 1 user error (bad config, missing or malformed input
files), 2 internal error.
"""
from __future__ import annotations

import argparse
import csv
import hashlib
import logging
import sys
from concurrent.futures import ProcessPoolExecutor, as_completed
from pathlib import Path
from typing import Optional

import numpy as np
from filelock import FileLock

from .complexity import savings
from .config import RunConfig, parse_int_list, parse_str_list
from .data import Dataset, SyntheticSpec, generate_shapes, load_idx, train_test_split
from .errors import ConfigError, EamError, FormatError, NumericError, TrainingError
from .estimators import ViTClassifier
from .export import export_csv, export_pgm
from .fixing import ENTROPY, RANDOM, SCOPES, build_plan, load_plan, random_plan, save_plan
from .quant import FULL_PRECISION, QuantConfig, calibrate_model
from .stats import calibration_indices, entropy_map, kl_map, load_bank, mean_map, run_calibration, save_bank
from .validation import check_tau
from .vit import load_checkpoint, predict_logits, save_checkpoint

log = logging.getLogger("eamap")

SWEEP_HEADER = ["tau", "method", "seed", "top1", "fixed_fraction", "flops_saved_pct"]
EVAL_HEADER = ["checkpoint", "plan", "quantized", "top1", "fixed_fraction", "flops_saved_pct", "saved_flops"]
MODES = ("fp32", "quantized")


class UsageError(Exception):
    """Raised for malformed command lines; reported with exit code 1."""


class InternalError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


# --- paths and sidecars ----------------------------------------------------


class Run:
    """Resolved config plus output directory."""

    def __init__(self, cfg: RunConfig, out: Path):
        self.cfg = cfg
        self.out = out
        self.written: list[Path] = []

    def path(self, key: str, default: str) -> Path:
        """An input/output path: the ``[paths]`` entry if set, else ``default`` under ``--out``."""
        value = self.cfg["paths"][key]
        return Path(value) if value else self.out / default

    def output(self, p: Path) -> Path:
        p.parent.mkdir(parents=True, exist_ok=True)
        self.written.append(p)
        return p

    def write_sidecar(self, command: str) -> Path:
        lines = [f"# eamap {command}"]
        for p in self.written:
            digest = hashlib.sha256(p.read_bytes()).hexdigest()
            lines.append(f"# sha256 {digest} {p}")
        side = self.out / f"{command}.resolved.ini"
        side.parent.mkdir(parents=True, exist_ok=True)
        side.write_text("\n".join(lines) + "\n" + self.cfg.to_text())
        return side


def _require(path: Path, what: str) -> Path:
    if not path.is_file():
        raise ConfigError(f"{what} not found: {path}")
    return path


# --- data -------------------------------------------------------------------


def load_data(cfg: RunConfig) -> tuple[Dataset, Dataset]:
    """Training and held-out splits as configured in ``[data]``."""
    d = cfg["data"]
    source = d["source"]
    if source == "synthetic":
        spec = SyntheticSpec(
            classes=d["classes"],
            image_size=cfg["model"]["image_size"],
            samples_per_class=d["samples_per_class"],
            noise=d["noise"],
            seed=d["seed"],
            min_scale=d["min_scale"],
            max_scale=d["max_scale"],
            jitter=d["jitter"],
        )
        return train_test_split(generate_shapes(spec), d["test_fraction"], d["split_seed"])
    if source == "idx":
        if not d["images"] or not d["labels"]:
            raise ConfigError("[data] source = idx needs both 'images' and 'labels' paths")
        ncls = d["num_classes"] or None
        ds = load_idx(_require(Path(d["images"]), "IDX images"), _require(Path(d["labels"]), "IDX labels"), ncls)
        if d["test_images"] or d["test_labels"]:
            if not (d["test_images"] and d["test_labels"]):
                raise ConfigError("[data] test_images and test_labels must be given together")
            test = load_idx(
                _require(Path(d["test_images"]), "IDX test images"),
                _require(Path(d["test_labels"]), "IDX test labels"),
                ds.num_classes,
                "test",
            )
            return Dataset(ds.images, ds.labels, max(ds.num_classes, test.num_classes), "train"), test
        return train_test_split(ds, d["test_fraction"], d["split_seed"])
    raise ConfigError(f"[data] source must be 'synthetic' or 'idx', got {source!r}")


def load_model(run: Run) -> ViTClassifier:
    path = _require(run.path("checkpoint", "model.eamc"), "checkpoint")
    return ViTClassifier.from_checkpoint(load_checkpoint(path))


def _calibration_images(run: Run, est: ViTClassifier, train: Dataset) -> np.ndarray:
    c = run.cfg["calibration"]
    idx = calibration_indices(len(train), c["fraction"], c["seed"])
    return est.prepare(train.images[idx])


def _bank_path(run: Run, mode: str) -> Path:
    if mode == "fp32":
        return run.path("bank", "bank_fp32.eams")
    return run.path("bank_quantized", "bank_quantized.eams")


def _stats_bank(run: Run):
    mode = run.cfg["fixing"]["statistics"]
    if mode not in MODES:
        raise ConfigError(f"[fixing] statistics must be one of {MODES}, got {mode!r}")
    return load_bank(_require(_bank_path(run, mode), f"{mode} stats bank (run 'calibrate' first)"))


def _quant(run: Run, required: bool) -> Optional[QuantConfig]:
    path = run.path("quant", "quant.txt")
    if not path.is_file():
        if required:
            raise ConfigError(f"quantisation parameters not found: {path} (calibrate with modes = quantized)")
        return None
    return QuantConfig.load(path)


def _top1(est: ViTClassifier, test: Dataset, plan=None, quant=None) -> float:
    if len(test) == 0:
        raise ConfigError("held-out split is empty; raise [data] test_fraction or give test files")
    logits = predict_logits(est.prepare(test.images), est.params_, est.config_, plan=plan, quant=quant)
    return float(np.mean(np.argmax(logits, axis=1) == test.labels))


# --- commands ------------------------------------------------------------------


def cmd_train(run: Run) -> None:
    train_ds, test = load_data(run.cfg)
    m, t = run.cfg["model"], run.cfg["train"]
    est = ViTClassifier(
        image_size=m["image_size"],
        patch_size=m["patch_size"],
        embed_dim=m["embed_dim"],
        num_layers=m["num_layers"],
        num_heads=m["num_heads"],
        mlp_ratio=m["mlp_ratio"],
        epochs=t["epochs"],
        batch_size=t["batch_size"],
        learning_rate=t["lr"],
        weight_decay=t["weight_decay"],
        random_state=t["seed"],
    )

    def report(epoch, hist):
        val = hist.val_accuracy[-1]
        extra = "" if val is None else f" held_out_top1={val:.4f}"
        print(f"epoch {epoch + 1}/{t['epochs']} loss={hist.loss[-1]:.4f} train_top1={hist.accuracy[-1]:.4f}{extra}",
              flush=True)

    eval_set = (test.images, test.labels) if len(test) else None
    est.fit(train_ds.images, train_ds.labels, eval_set=eval_set, callback=report)
    ckpt_path = run.output(run.path("checkpoint", "model.eamc"))
    digest = save_checkpoint(est.to_checkpoint(), ckpt_path)
    hist_path = run.output(run.out / "train_history.csv")
    with open(hist_path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["epoch", "loss", "train_top1", "held_out_top1"])
        for e, (lo, acc, val) in enumerate(zip(est.history_.loss, est.history_.accuracy, est.history_.val_accuracy)):
            w.writerow([e + 1, repr(lo), repr(acc), "" if val is None else repr(val)])
    print(f"checkpoint {ckpt_path} sha256={digest}")


def cmd_calibrate(run: Run) -> None:
    est = load_model(run)
    train_ds, _ = load_data(run.cfg)
    c, q = run.cfg["calibration"], run.cfg["quant"]
    modes = parse_str_list(c["modes"])
    bad = [m for m in modes if m not in MODES]
    if bad or not modes:
        raise ConfigError(f"[calibration] modes must be a list drawn from {MODES}, got {c['modes']!r}")
    xc = _calibration_images(run, est, train_ds)
    print(f"calibration images: {len(xc)} of {len(train_ds)}")
    for mode in modes:
        quant = None
        if mode == "quantized":
            wb, ab = q["weight_bits"], q["activation_bits"]
            if wb >= FULL_PRECISION and ab >= FULL_PRECISION:
                raise ConfigError("modes = quantized needs [quant] weight_bits or activation_bits below 32")
            quant = calibrate_model(est.params_, est.config_, xc, wb, ab, q["frozen_attention_bits"])
            qpath = run.output(run.path("quant", "quant.txt"))
            quant.save(qpath)
            print(f"quantisation parameters {qpath}")
        bank = run_calibration(xc, est.params_, est.config_, c["histogram_bits"], quant, c["workers"])
        path = run.output(_bank_path(run, mode))
        save_bank(bank, path)
        h = entropy_map(bank)
        print(f"{mode} bank {path}: M={bank.images} bins={bank.num_bins} "
              f"entropy min={h.min():.4f} mean={h.mean():.4f} max={h.max():.4f}")


def _make_plan(run: Run, bank, tau: float, method: str, seed: int):
    f = run.cfg["fixing"]
    scope = f["scope"]
    if scope not in SCOPES:
        raise ConfigError(f"[fixing] scope must be one of {SCOPES}, got {scope!r}")
    bits = run.cfg["quant"]["frozen_attention_bits"]
    if method == ENTROPY:
        plan = build_plan(entropy_map(bank), bank, tau, scope, bits)
    elif method == RANDOM:
        plan = random_plan(bank.shape, bank, tau, seed, bits, scope)
    else:
        raise ConfigError(f"fixing method must be 'entropy' or 'random', got {method!r}")
    return plan.with_renormalize(f["renormalize"])


def cmd_plan(run: Run) -> None:
    f = run.cfg["fixing"]
    try:
        tau = check_tau(f["tau"])
    except ValueError as exc:
        raise ConfigError(f"[fixing] {exc}") from None
    bank = _stats_bank(run)
    plan = _make_plan(run, bank, tau, f["method"], f["seed"])
    path = run.output(run.path("plan", "plan.eamp"))
    save_plan(plan, path)
    ckpt = run.path("checkpoint", "model.eamc")
    if ckpt.is_file():
        report = savings(plan, load_checkpoint(ckpt).config)
        flops = run.output(run.out / "flops.csv")
        flops.write_text(report.to_csv())
        print(report.to_text(), end="")
    print(f"plan {path}: tau={tau} scope={plan.scope} method={plan.provenance} "
          f"fixed={plan.num_fixed}/{plan.masks.size} ({plan.fixed_fraction:.4f})")


def cmd_eval(run: Run) -> None:
    est = load_model(run)
    _, test = load_data(run.cfg)
    e = run.cfg["eval"]
    plan_path = Path(e["plan"]) if e["plan"] else None
    plan = load_plan(_require(plan_path, "plan")) if plan_path else None
    if plan is not None and run.cfg["fixing"]["renormalize"]:
        plan = plan.with_renormalize(True)
    quant = _quant(run, required=True) if e["quantized"] else None
    top1 = _top1(est, test, plan, quant)
    report = savings(plan, est.config_)
    frac = plan.fixed_fraction if plan is not None else 0.0
    row = [
        str(run.path("checkpoint", "model.eamc")),
        str(plan_path or ""),
        int(bool(quant)),
        repr(top1),
        repr(frac),
        repr(report.saved_pct),
        report.theoretical_saved_flops,
    ]
    out = run.output(run.out / "eval.csv")
    with open(out, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(EVAL_HEADER)
        w.writerow(row)
    print(f"top1={top1:.4f} fixed_fraction={frac:.4f} flops_saved_pct={report.saved_pct:.4f} "
          f"saved_flops={report.theoretical_saved_flops} images={len(test)}")


# sweep workers get the model and data once through the pool initialiser
_SWEEP: dict = {}


def _sweep_init(state: dict) -> None:
    _SWEEP.clear()
    _SWEEP.update(state)


def _sweep_cell(key: tuple[str, str, int]) -> list:
    s = _SWEEP
    tau_s, method, seed = key
    plan = s["plans"].get((tau_s, method, seed))
    if plan is None:
        plan = random_plan(s["bank"].shape, s["bank"], float(tau_s), seed, s["bits"], s["scope"])
        plan = plan.with_renormalize(s["renormalize"])
    logits = predict_logits(s["x"], s["params"], s["config"], plan=plan, quant=s["quant"])
    top1 = float(np.mean(np.argmax(logits, axis=1) == s["y"]))
    return [tau_s, method, seed, repr(top1), repr(plan.fixed_fraction), repr(savings(plan, s["config"]).saved_pct)]


def tau_key(pct: int) -> str:
    return f"{pct / 100:g}"


def read_done(path: Path) -> set[tuple[str, str, int]]:
    if not path.is_file():
        return set()
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        return set()
    if rows[0] != SWEEP_HEADER:
        raise ConfigError(f"{path} is not a sweep results file (header {rows[0]})")
    done = set()
    for r in rows[1:]:
        if len(r) == len(SWEEP_HEADER):
            done.add((r[0], r[1], int(r[2])))
    return done


def check_nesting(plans: list) -> None:
    """Entropy masks must grow monotonically along the tau grid."""
    for lo, hi in zip(plans, plans[1:]):
        if np.any(lo.masks & ~hi.masks):
            raise InternalError(f"mask for tau={lo.tau} is not contained in the mask for tau={hi.tau}")


def cmd_sweep(run: Run) -> None:
    s = run.cfg["sweep"]
    taus = parse_int_list(s["taus_pct"])
    if any(not 0 <= t <= 100 for t in taus) or not taus:
        raise ConfigError("[sweep] taus_pct must be percentages in [0, 100]")
    seeds = parse_int_list(s["seeds"])
    methods = parse_str_list(s["methods"])
    if not seeds or any(m not in (ENTROPY, RANDOM) for m in methods) or not methods:
        raise ConfigError("[sweep] needs at least one seed and methods drawn from entropy,random")
    est = load_model(run)
    _, test = load_data(run.cfg)
    bank = _stats_bank(run)
    if bank.shape != est.config_.attention_shape:
        raise ConfigError(f"stats bank {bank.shape} does not match the model {est.config_.attention_shape}")
    quant = _quant(run, required=True) if s["quantized"] else None
    f = run.cfg["fixing"]
    scope = f["scope"]
    if scope not in SCOPES:
        raise ConfigError(f"[fixing] scope must be one of {SCOPES}, got {scope!r}")

    plans = {}
    if ENTROPY in methods:
        ordered = []
        for pct in sorted(set(taus)):
            plan = _make_plan(run, bank, pct / 100, ENTROPY, 0)
            ordered.append(plan)
            for seed in seeds:
                plans[(tau_key(pct), ENTROPY, seed)] = plan
        check_nesting(ordered)
        print(f"mask nesting verified across {len(ordered)} tau values")

    results = run.output(run.path("results", "sweep.csv"))
    lock = FileLock(str(results) + ".lock")
    with lock:
        done = read_done(results)
        if not results.is_file() or results.stat().st_size == 0:
            with open(results, "w", newline="") as fh:
                csv.writer(fh, lineterminator="\n").writerow(SWEEP_HEADER)
    cells = [(tau_key(p), m, sd) for p in taus for m in methods for sd in seeds]
    todo = [c for c in dict.fromkeys(cells) if c not in done]
    print(f"sweep: {len(cells)} cells, {len(cells) - len(todo)} already done, {len(todo)} to run")

    state = dict(
        plans={k: v for k, v in plans.items() if k in set(todo)},
        bank=bank,
        bits=run.cfg["quant"]["frozen_attention_bits"],
        scope=scope,
        renormalize=f["renormalize"],
        x=est.prepare(test.images),
        y=test.labels,
        params=est.params_,
        config=est.config_,
        quant=quant,
    )

    def append(row):
        with lock:
            with open(results, "a", newline="") as fh:
                csv.writer(fh, lineterminator="\n").writerow(row)
        print(",".join(map(str, row)), flush=True)

    workers = s["workers"]
    if workers <= 1:
        _sweep_init(state)
        for c in todo:
            append(_sweep_cell(c))
    else:
        with ProcessPoolExecutor(workers, initializer=_sweep_init, initargs=(state,)) as pool:
            for fut in as_completed([pool.submit(_sweep_cell, c) for c in todo]):
                append(fut.result())


def cmd_export(run: Run) -> None:
    x = run.cfg["export"]
    source = x["source"]
    if source in ("entropy", "mean"):
        bank = _stats_bank(run)
        values = entropy_map(bank) if source == "entropy" else mean_map(bank)
    elif source == "divergence":
        p = load_bank(_require(_bank_path(run, "fp32"), "fp32 stats bank"))
        q = load_bank(_require(_bank_path(run, "quantized"), "quantized stats bank"))
        values = kl_map(p, q).values
    else:
        raise ConfigError(f"[export] source must be entropy, mean or divergence, got {source!r}")
    region = x["region"]
    if region not in ("full", "cls"):
        raise ConfigError(f"[export] region must be 'full' or 'cls', got {region!r}")
    L, H = values.shape[:2]
    for name, v, n in (("layer", x["layer"], L), ("head", x["head"], H)):
        if v >= n:
            raise ConfigError(f"[export] {name}={v} out of range (model has {n})")
    out_dir = run.out / "export"
    stem = f"{source}_{region}"
    if x["format"] == "csv":
        path = run.output(out_dir / f"{stem}.csv")
        rows = export_csv(values, path, x["layer"], x["head"], region)
        print(f"wrote {rows} rows to {path}")
    elif x["format"] == "pgm":
        files = export_pgm(values, out_dir, stem, x["layer"], x["head"], region)
        for p in files:
            run.output(p)
            run.output(p.with_suffix(".scale.txt"))
        print(f"wrote {len(files)} PGM images to {out_dir}")
    else:
        raise ConfigError(f"[export] format must be 'csv' or 'pgm', got {x['format']!r}")


COMMANDS = {
    "train": (cmd_train, "train the model and write a checkpoint"),
    "calibrate": (cmd_calibrate, "collect attention statistics banks (fp32 and/or quantized)"),
    "plan": (cmd_plan, "select the attention weights to fix and write a plan"),
    "eval": (cmd_eval, "held-out top-1 with an optional plan and quantisation"),
    "sweep": (cmd_sweep, "evaluate a grid of tau x method x seed into a CSV"),
    "export": (cmd_export, "write entropy, mean or divergence maps as CSV or PGM"),
}


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="eamap", description=__doc__.splitlines()[0])
    p.add_argument("--config", metavar="PATH", help="INI config file")
    p.add_argument("--seed", type=int, metavar="U64",
                   help="overrides the train, calibration and fixing seeds")
    p.add_argument("--out", metavar="DIR", help="output directory (default: [paths] out)")
    p.add_argument("--set", dest="overrides", action="append", default=[], metavar="SECTION.KEY=VALUE",
                   help="override one config value (repeatable)")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)
    for name, (_, help_text) in COMMANDS.items():
        sub.add_parser(name, help=help_text)
    return p


def resolve(args) -> Run:
    cfg = RunConfig.load(args.config)
    for item in args.overrides:
        lhs, sep, value = item.partition("=")
        section, dot, key = lhs.partition(".")
        if not sep or not dot:
            raise UsageError(f"--set expects SECTION.KEY=VALUE, got {item!r}")
        cfg.set(section.strip(), key.strip(), value)
    if args.seed is not None:
        if not 0 <= args.seed < 2**64:
            raise UsageError("--seed must be an unsigned 64-bit integer")
        for section in ("train", "calibration", "fixing"):
            cfg.set(section, "seed", args.seed)
    if args.out is not None:
        cfg.set("paths", "out", args.out)
    return Run(cfg, Path(cfg["paths"]["out"]))


USER_ERRORS = (UsageError, ConfigError, FormatError, FileNotFoundError, IsADirectoryError, ValueError)


def main(argv: Optional[list[str]] = None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except UsageError as exc:
        print(f"eamap: error: {exc}", file=sys.stderr)
        return 1
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        run = resolve(args)
        run.out.mkdir(parents=True, exist_ok=True)
        COMMANDS[args.command][0](run)
        run.write_sidecar(args.command)
    except (TrainingError, NumericError, InternalError) as exc:
        print(f"eamap: internal error: {exc}", file=sys.stderr)
        return 2
    except USER_ERRORS as exc:
        msg = str(exc).splitlines()[0] if str(exc) else type(exc).__name__
        print(f"eamap: error: {msg}", file=sys.stderr)
        return 1
    except EamError as exc:
        print(f"eamap: error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # noqa: BLE001 - last-resort diagnostic
        print(f"eamap: internal error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
