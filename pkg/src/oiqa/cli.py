"""Command-line front end.

Every invocation creates its own run directory (timestamp + config hash),
writes a provenance JSON there, prints a one-line machine-readable JSON
summary on stdout and human detail on stderr.  Re-running a subcommand
with ``--replay provenance.json`` reproduces byte-identical artifacts.

Exit codes: 0 success, 1 usage error, 2 data/format error, 3 numerical
failure.
"""

import argparse
import hashlib
import json
import os
import sys
import time
from concurrent.futures import ThreadPoolExecutor
from fractions import Fraction
from pathlib import Path

import numpy as np

from . import attacks as attacks_mod
from . import dataio, defense, metrics, net, spectral
from .errors import DataError, NumericalError, OiqaError

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_NUMERICAL = 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def parse_eps(text):
    """Accept 'k/255' strings or decimals; canonicalize exact k/255 values."""
    text = str(text).strip()
    try:
        if "/" in text:
            frac = Fraction(text)
            value = float(frac)
        else:
            value = float(text)
            frac = None
    except (ValueError, ZeroDivisionError) as exc:
        raise UsageError(f"bad epsilon {text!r}: {exc}") from exc
    if value < 0:
        raise UsageError(f"epsilon must be >= 0, got {text}")
    k255 = value * 255.0
    if abs(k255 - round(k255)) < 1e-9:
        canonical = f"{int(round(k255))}/255"
        value = int(round(k255)) / 255.0
    elif frac is not None:
        canonical = str(frac)
    else:
        canonical = repr(value)
    return value, canonical


def parse_eps_grid(text):
    parts = [p for p in str(text).split(",") if p.strip()]
    if not parts:
        raise UsageError("empty epsilon grid")
    return [parse_eps(p) for p in parts]


def _thread_count(args):
    if getattr(args, "threads", None):
        return max(1, int(args.threads))
    env = os.environ.get("OIQA_THREADS")
    if env:
        try:
            return max(1, int(env))
        except ValueError as exc:
            raise UsageError(f"bad OIQA_THREADS value {env!r}") from exc
    return os.cpu_count() or 1


def _make_pool(threads):
    return ThreadPoolExecutor(max_workers=threads) if threads > 1 else None


def _config_digest(config):
    return hashlib.sha256(json.dumps(config, sort_keys=True).encode()).hexdigest()


def _new_run_dir(base, subcommand, config):
    base = Path(base)
    base.mkdir(parents=True, exist_ok=True)
    stamp = time.strftime("%Y%m%d-%H%M%S", time.gmtime())
    digest = _config_digest(config)[:8]
    for counter in range(10000):
        suffix = f"-{counter}" if counter else ""
        run_dir = base / f"{subcommand}-{stamp}-{digest}{suffix}"
        try:
            run_dir.mkdir(exist_ok=False)
            return run_dir
        except FileExistsError:
            continue
    raise OiqaError("could not allocate a fresh run directory")


def _write_json(path, obj):
    Path(path).write_text(json.dumps(obj, sort_keys=True, indent=2) + "\n")


def _write_provenance(run_dir, subcommand, config):
    _write_json(run_dir / "provenance.json",
                {"subcommand": subcommand, "config": config,
                 "config_sha256": _config_digest(config)})


def _info(msg):
    print(msg, file=sys.stderr)


def _load_split(data_dir, split):
    samples, meta = dataio.load_dataset(data_dir)
    train_s, val_s, test_s = dataio.split_dataset(samples, seed=meta["seed"])
    chosen = {"train": train_s, "val": val_s, "test": test_s, "all": samples}[split]
    if not chosen:
        raise DataError(f"split {split!r} of {data_dir} is empty")
    return chosen, meta


def _float_cell(v):
    return repr(float(v))


# ---------------------------------------------------------------------------
# subcommand configs: name -> (flags, handler).  Each flag is
# (name, type, default, help); required flags use default=None + REQUIRED.
# ---------------------------------------------------------------------------

REQUIRED = object()


def _resolve_config(subcommand, flags, args, replay_path):
    if replay_path:
        record = json.loads(Path(replay_path).read_text())
        if record.get("subcommand") != subcommand:
            raise UsageError(
                f"provenance is for {record.get('subcommand')!r}, not {subcommand!r}")
        config = record["config"]
        known = {name for name, *_ in flags}
        unknown = set(config) - known
        if unknown:
            raise UsageError(f"unknown config keys in provenance: {sorted(unknown)}")
        for name, _, default, _ in flags:
            if name not in config:
                if default is REQUIRED:
                    raise UsageError(f"provenance misses required key {name!r}")
                config[name] = default
        return config
    config = {}
    for name, _, default, _ in flags:
        value = getattr(args, name.replace("-", "_"))
        if value is None and default is REQUIRED:
            raise UsageError(f"--{name} is required")
        config[name] = value
    return config


def _cmd_gen_data(config, run_dir, pool):
    samples = dataio.generate_dataset(config["n"], image_size=config["size"],
                                      seed=config["seed"], channels=config["channels"])
    out = run_dir / "dataset"
    dataio.save_dataset(out, samples, seed=config["seed"])
    _info(f"wrote {len(samples)} samples to {out}")
    return {"samples": len(samples), "dataset": str(out)}


def _cmd_train(config, run_dir, pool):
    train_s, meta = _load_split(config["data"], "train")
    test_s, _ = _load_split(config["data"], "test")
    model = net.build_toy_model(seed=config["seed"],
                                input_shape=(meta["channels"], meta["size"], meta["size"]))
    result = net.train(model, dataio.as_pairs(train_s), epochs=config["epochs"],
                       lr=config["lr"], optimizer=config["optimizer"],
                       nt_lambda=config["nt-lambda"], batch_size=config["batch-size"],
                       seed=config["seed"])
    dataio.save_checkpoint(model, run_dir / "model.ckpt")
    preds = [net.forward(model, s.image) for s in test_s]
    labels = [s.label for s in test_s]
    summary = {"final_loss": result.losses[-1],
               "test_srocc": metrics.srocc(preds, labels),
               "test_plcc": metrics.plcc(preds, labels),
               "score_range": list(model.score_range),
               "model": str(run_dir / "model.ckpt")}
    _write_json(run_dir / "training.json",
                {"losses": result.losses, **{k: v for k, v in summary.items() if k != "model"}})
    _info(f"trained {config['epochs']} epochs; test SROCC {summary['test_srocc']:.4f}")
    return summary


def _cmd_certify(config, run_dir, pool):
    model = dataio.load_checkpoint(config["model"])
    shapes = net.infer_shapes(model)
    scores = spectral.placement_scan(model)
    rows = ["layer_index,c_in,c_out,s_in,s_out,ratio,sigma1,frobenius"]
    for score in scores:
        kernel = model.params[model.layers[score.layer_index].param_ids[0]]
        # the circular spectrum needs the kernel to fit the grid
        grid = max(score.s_in, kernel.shape[2], kernel.shape[3])
        spec = spectral.conv_spectrum(kernel, grid, "circular")
        rows.append(",".join([str(score.layer_index), str(score.c_in), str(score.c_out),
                              str(score.s_in), str(score.s_out), _float_cell(score.ratio),
                              _float_cell(spec.sigma1), _float_cell(spec.frobenius)]))
    (run_dir / "certify.csv").write_text("\n".join(rows) + "\n")
    recommendation = spectral.recommend_position(model)
    _info(f"scored {len(scores)} conv layers; recommended insertion: layer {recommendation}")
    return {"layers": len(scores), "recommended_position": recommendation,
            "csv": str(run_dir / "certify.csv"),
            "n_layers_total": len(shapes) - 1}


def _cmd_defend(config, run_dir, pool):
    model = dataio.load_checkpoint(config["model"])
    train_s, _ = _load_split(config["data"], "train")
    options = defense.DefendOptions(
        position=config["position"], skip_block=config["skip-block"],
        rate=config["rate"], criterion=config["criterion"], epochs=config["epochs"],
        lr=config["lr"], batch_size=config["batch-size"], seed=config["seed"])
    defended, provenance = defense.defend(model, dataio.as_pairs(train_s), options)
    dataio.save_checkpoint(defended, run_dir / "defended.ckpt")
    _write_json(run_dir / "defense.json", provenance)
    _info(f"defense done: position {provenance['position']}, "
          f"{provenance['total_masked']} channels masked")
    return {"position": provenance["position"],
            "total_masked": provenance["total_masked"],
            "output_model_sha256": provenance["output_model_sha256"],
            "model": str(run_dir / "defended.ckpt")}


def _default_step_size(kind):
    return "0.5" if kind == "stadv" else "1/255"


def _cmd_attack(config, run_dir, pool):
    model = dataio.load_checkpoint(config["model"])
    samples, _ = _load_split(config["data"], config["split"])
    eps, eps_text = parse_eps(config["eps"])
    if config["step-size"] is None:
        config["step-size"] = _default_step_size(config["kind"])
    attack_config = attacks_mod.AttackConfig(
        kind=config["kind"], epsilon=eps, steps=config["steps"],
        step_size=parse_eps(config["step-size"])[0], tau_flow=config["tau-flow"],
        seed=config["seed"])
    result = attacks_mod.run_attack(model, [s.image for s in samples], attack_config,
                                    pool=pool)
    rows = ["image_id,clean,attacked,delta,linf"]
    for o in result.per_image:
        rows.append(",".join([str(o.image_id), _float_cell(o.clean_score),
                              _float_cell(o.attacked_score),
                              _float_cell(o.attacked_score - o.clean_score),
                              _float_cell(o.linf)]))
    (run_dir / "attack.csv").write_text("\n".join(rows) + "\n")
    if result.universal is not None:
        dataio.save_tensor(run_dir / "universal.qten", result.universal)
    else:
        pert_dir = run_dir / "perturbations"
        pert_dir.mkdir()
        for o, p in zip(result.per_image, result.perturbations):
            dataio.save_tensor(pert_dir / f"pert{o.image_id:05d}.qten", p)
    _info(f"{config['kind']} at eps={eps_text}: mean gain {result.mean_gain:.5f} "
          f"over {len(result.per_image)} images")
    return {"kind": config["kind"], "eps": eps_text, "images": len(result.per_image),
            "mean_gain": result.mean_gain, "csv": str(run_dir / "attack.csv")}


def _cmd_eval(config, run_dir, pool):
    model = dataio.load_checkpoint(config["model"])
    samples, _ = _load_split(config["data"], config["split"])
    grid = parse_eps_grid(config["eps-grid"])
    report = metrics.measure_robustness(
        model, dataio.as_pairs(samples), attack_kind=config["kind"],
        eps_grid=[e for e, _ in grid], steps=config["steps"],
        step_size=parse_eps(config["step-size"])[0], seed=config["seed"],
        tau_flow=config["tau-flow"], pool=pool)
    report.config_digest = _config_digest(config)
    _write_json(run_dir / "report.json", report.to_dict())
    _info(f"eval {config['kind']} over {len(grid)} eps points: "
          f"AbsGainAUC {report.abs_gain_auc}, SROCC {report.srocc}")
    return {"kind": config["kind"], "abs_gain_auc": report.abs_gain_auc,
            "r_score_auc": report.r_score_auc, "srocc": report.srocc,
            "plcc": report.plcc, "report": str(run_dir / "report.json")}


def _svg_polyline(points, width, height, pad, xs, ys, color):
    lo_x, hi_x = min(xs), max(xs)
    lo_y, hi_y = min(ys), max(ys)
    span_x = (hi_x - lo_x) or 1.0
    span_y = (hi_y - lo_y) or 1.0
    coords = []
    for x, y in points:
        px = pad + (x - lo_x) / span_x * (width - 2 * pad)
        py = height - pad - (y - lo_y) / span_y * (height - 2 * pad)
        coords.append(f"{px:.2f},{py:.2f}")
    return (f'<polyline fill="none" stroke="{color}" stroke-width="1.5" '
            f'points="{" ".join(coords)}"/>')


def write_curves_svg(path, title, eps_grid, named_curves):
    """Minimal deterministic SVG line plot of metric-vs-epsilon curves."""
    width, height, pad = 480, 320, 40
    xs = [e * 255 for e in eps_grid]
    ys = [v for curve in named_curves.values() for v in curve]
    colors = ("#4363d8", "#e6194b", "#3cb44b", "#911eb4")
    parts = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}">',
             f'<text x="{pad}" y="20" font-size="13">{title}</text>',
             f'<line x1="{pad}" y1="{height - pad}" x2="{width - pad}" '
             f'y2="{height - pad}" stroke="#888"/>',
             f'<line x1="{pad}" y1="{pad}" x2="{pad}" y2="{height - pad}" stroke="#888"/>']
    for i, (name, curve) in enumerate(sorted(named_curves.items())):
        color = colors[i % len(colors)]
        parts.append(_svg_polyline(list(zip(xs, curve)), width, height, pad, xs, ys, color))
        parts.append(f'<text x="{pad + 4}" y="{pad + 14 * (i + 1)}" font-size="11" '
                     f'fill="{color}">{name}</text>')
    parts.append(f'<text x="{width - pad - 60}" y="{height - pad + 24}" '
                 f'font-size="11">eps (1/255)</text>')
    parts.append("</svg>")
    Path(path).write_text("\n".join(parts) + "\n")


def _cmd_report(config, run_dir, pool):
    inputs = [p for p in config["inputs"].split(",") if p]
    reports = [metrics.RobustnessReport.from_dict(json.loads(Path(p).read_text()))
               for p in inputs]
    summary = {}
    if config["mode"] == "blend":
        if len(reports) == 1:
            combined = reports[0]
        elif len(reports) == 2:
            wa = Fraction(config["weights"].split(",")[0])
            wb = Fraction(config["weights"].split(",")[1])
            combined = metrics.weighted_summary(reports[0], reports[1],
                                                weights=(float(wa), float(wb)))
        else:
            raise DataError(f"blend mode takes 1 or 2 reports, got {len(reports)}")
        _write_json(run_dir / "combined.json", combined.to_dict())
        summary["combined"] = str(run_dir / "combined.json")
        summary["abs_gain_auc"] = combined.abs_gain_auc
        if config["svg"] and combined.eps_grid:
            write_curves_svg(run_dir / "curves.svg", "metrics vs eps", combined.eps_grid,
                             {"abs_gain": combined.abs_gain_curve,
                              "r_score": combined.r_score_curve})
            summary["svg"] = str(run_dir / "curves.svg")
    elif config["mode"] == "compare":
        if len(reports) != 2:
            raise DataError("compare mode needs exactly 2 reports (defended, baseline)")
        defended, baseline = reports
        comparison = metrics.defense_criterion(defended.abs_gain_auc, baseline.abs_gain_auc)
        comparison["defended_srocc"] = defended.srocc
        comparison["baseline_srocc"] = baseline.srocc
        _write_json(run_dir / "comparison.json", comparison)
        summary.update(comparison)
        summary["comparison"] = str(run_dir / "comparison.json")
        if config["svg"] and defended.eps_grid == baseline.eps_grid and defended.eps_grid:
            write_curves_svg(run_dir / "curves.svg", "AbsGain vs eps", defended.eps_grid,
                             {"defended": defended.abs_gain_curve,
                              "baseline": baseline.abs_gain_curve})
            summary["svg"] = str(run_dir / "curves.svg")
    else:
        raise UsageError(f"unknown report mode {config['mode']!r}")
    _info(f"report written under {run_dir}")
    return summary


SUBCOMMANDS = {
    "gen-data": ([
        ("n", int, 1000, "number of samples"),
        ("size", int, 16, "square image size (<= 64)"),
        ("channels", int, 3, "image channels (1 or 3)"),
        ("seed", int, 0, "generation seed"),
    ], _cmd_gen_data),
    "train": ([
        ("data", str, REQUIRED, "dataset directory (from gen-data)"),
        ("epochs", int, 30, "training epochs"),
        ("lr", float, 1e-3, "learning rate"),
        ("optimizer", str, "adam", "adam or sgd"),
        ("nt-lambda", float, 0.0, "gradient-norm regularization weight"),
        ("batch-size", int, 32, "mini-batch size"),
        ("seed", int, 0, "init/shuffle seed"),
    ], _cmd_train),
    "certify": ([
        ("model", str, REQUIRED, "checkpoint to analyze"),
    ], _cmd_certify),
    "defend": ([
        ("model", str, REQUIRED, "trained checkpoint"),
        ("data", str, REQUIRED, "dataset directory"),
        ("position", int, None, "insertion layer (default: scan recommendation)"),
        ("skip-block", bool, False, "skip the orthogonal block"),
        ("rate", float, 0.1, "prune fraction"),
        ("criterion", str, "l2", "pruning criterion (l1/l2)"),
        ("epochs", int, 5, "fine-tuning epochs"),
        ("lr", float, 1e-4, "fine-tuning learning rate"),
        ("batch-size", int, 32, "fine-tuning batch size"),
        ("seed", int, 0, "block init / fine-tune seed"),
    ], _cmd_defend),
    "attack": ([
        ("model", str, REQUIRED, "checkpoint to attack"),
        ("data", str, REQUIRED, "dataset directory"),
        ("kind", str, "pgd", "pgd, uap, or stadv"),
        ("eps", str, "4/255", "l-inf radius (k/255 or decimal)"),
        ("steps", int, 1, "iterations"),
        ("step-size", str, None, "step size (default 1/255; 0.5 px for stadv)"),
        ("tau-flow", float, 0.05, "stadv flow smoothness weight"),
        ("split", str, "test", "dataset split (train/val/test/all)"),
        ("seed", int, 0, "attack seed"),
    ], _cmd_attack),
    "eval": ([
        ("model", str, REQUIRED, "checkpoint to evaluate"),
        ("data", str, REQUIRED, "dataset directory"),
        ("kind", str, "pgd", "attack kind"),
        ("eps-grid", str, "2/255,4/255,6/255,8/255,10/255", "comma-separated eps"),
        ("steps", int, 1, "attack iterations"),
        ("step-size", str, "1/255", "attack step size"),
        ("tau-flow", float, 0.05, "stadv flow smoothness weight"),
        ("split", str, "test", "dataset split"),
        ("seed", int, 0, "attack seed"),
    ], _cmd_eval),
    "report": ([
        ("inputs", str, REQUIRED, "comma-separated report.json paths"),
        ("mode", str, "blend", "blend (weighted merge) or compare (defense check)"),
        ("weights", str, "2/3,1/3", "dataset weights for blend mode"),
        ("svg", bool, False, "also emit an SVG curve plot"),
    ], _cmd_report),
}


def build_parser():
    parser = _Parser(prog="oiqa", description=__doc__)
    sub = parser.add_subparsers(dest="subcommand")
    for name, (flags, _) in SUBCOMMANDS.items():
        p = sub.add_parser(name, add_help=True)
        for flag, typ, default, help_text in flags:
            if typ is bool:
                p.add_argument(f"--{flag}", action="store_true",
                               default=None, help=help_text)
            else:
                p.add_argument(f"--{flag}", type=typ, default=None, help=help_text)
        p.add_argument("--replay", type=str, default=None,
                       help="provenance.json to replay")
        p.add_argument("--run-dir", type=str, default="runs",
                       help="base directory for run outputs")
        p.add_argument("--threads", type=int, default=None,
                       help="worker threads (or OIQA_THREADS); results are "
                            "independent of this")
    return parser


def run(argv):
    parser = build_parser()
    args = parser.parse_args(argv)
    if not args.subcommand:
        raise UsageError("a subcommand is required (gen-data, train, certify, defend, "
                         "attack, eval, report)")
    flags, handler = SUBCOMMANDS[args.subcommand]
    config = _resolve_config(args.subcommand, flags, args, args.replay)
    for flag, typ, default, _ in flags:
        if typ is bool and config[flag] is None:
            config[flag] = False if default is REQUIRED else bool(default)
        elif config[flag] is None and default is not REQUIRED:
            config[flag] = default
    threads = _thread_count(args)
    pool = _make_pool(threads)
    try:
        run_dir = _new_run_dir(args.run_dir, args.subcommand, config)
        _write_provenance(run_dir, args.subcommand, config)
        summary = handler(config, run_dir, pool)
    finally:
        if pool is not None:
            pool.shutdown()
    summary = {"status": "ok", "subcommand": args.subcommand, "run_dir": str(run_dir),
               **summary}
    print(json.dumps(summary, sort_keys=True))
    return EXIT_OK


def main(argv=None):
    argv = sys.argv[1:] if argv is None else argv
    try:
        return run(argv)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        print(json.dumps({"status": "usage-error", "error": str(exc)}))
        return EXIT_USAGE
    except NumericalError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        print(json.dumps({"status": "numerical-error", "error": str(exc)}))
        return EXIT_NUMERICAL
    except (OiqaError, FileNotFoundError, json.JSONDecodeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        print(json.dumps({"status": "data-error", "error": str(exc)}))
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
