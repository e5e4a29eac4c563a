"""``upsr`` command line: degrade, train, sr, verify, metrics, hist.

Every option can also come from a JSON file given with ``--config``; flags
given on the command line win over the file.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import math
import sys
from pathlib import Path

import numpy as np

from upsr import analysis
from upsr.core import bicubic_resize, clamp01, make_rng, read_png, write_png
from upsr.degradation import DegradationConfig, degrade_directory
from upsr.denoiser import (
    ModelFormatError,
    OracleDenoiser,
    TrainConfig,
    TrainingDiverged,
    TrainLog,
    load_model,
    save_model,
    train,
    train_predictor,
)
from upsr.diffusion import WeightingConfig, prepare_conditioning, run_reverse_chain
from upsr.predictor import identity_predictor, learned_predictor, smoothing_predictor
from upsr.schedule import build_schedule
from upsr.uncertainty import write_uncertainty_png, write_weight_png

log = logging.getLogger("upsr")


class CLIError(Exception):
    pass


# -- option groups ------------------------------------------------------------

DEFAULTS = {
    "seed": 0,
    "steps": 5, "kappa": 2.0, "eta1": 0.001, "etaT": 0.9999, "p": 0.3,
    "bu": 0.4, "psimax": 0.05, "smooth_uncertainty": 0, "no_unw": False,
    "predictor": "smooth", "predictor_radius": 2, "predictor_model": None,
    "scale": 4,
    "blur": [0.2, 2.0], "noise": [0.0, 0.06], "jpeg": False, "jpeg_quality": [30, 95],
    "second_pass": False,
    "iterations": 5000, "batch_size": 8, "lr": 0.001, "lam": 1.0, "patch_size": 32,
    "unshuffle": 2, "hidden": 32, "layers": 4, "momentum": 0.0,
    "optimizer": "adam", "lr_schedule": "constant",
    "role": "denoiser",
    "bin_width": 0.01, "cutoff": 0.4,
}


def _add_seed(p):
    p.add_argument("--seed", type=int, default=None, help="root seed for every random stream")
    p.add_argument("--config", type=Path, default=None, help="JSON file with option values")


def _add_schedule(p):
    g = p.add_argument_group("schedule")
    g.add_argument("--steps", type=int, default=None, help="number of diffusion steps T")
    g.add_argument("--kappa", type=float, default=None)
    g.add_argument("--eta1", type=float, default=None)
    g.add_argument("--etaT", type=float, default=None)
    g.add_argument("--p", type=float, default=None, help="schedule shape exponent")


def _add_weighting(p):
    g = p.add_argument_group("noise weighting")
    g.add_argument("--bu", type=float, default=None, help="weight floor b_u")
    g.add_argument("--psimax", type=float, default=None, help="uncertainty saturation psi_max")
    g.add_argument("--smooth-uncertainty", type=int, default=None, metavar="RADIUS",
                   help="box-blur radius applied to the uncertainty map")
    g.add_argument("--no-unw", action="store_const", const=True, default=None,
                   help="isotropic noise (b_u = 1)")
    g.add_argument("--predictor", choices=["identity", "smooth", "learned"], default=None)
    g.add_argument("--predictor-radius", type=int, default=None)
    g.add_argument("--predictor-model", type=Path, default=None)


def _add_degradation(p):
    g = p.add_argument_group("degradation")
    g.add_argument("--scale", type=int, default=None)
    g.add_argument("--blur", type=float, nargs=2, default=None, metavar=("LO", "HI"))
    g.add_argument("--noise", type=float, nargs=2, default=None, metavar=("LO", "HI"))
    g.add_argument("--jpeg", action="store_const", const=True, default=None)
    g.add_argument("--jpeg-quality", type=int, nargs=2, default=None, metavar=("LO", "HI"))
    g.add_argument("--second-pass", action="store_const", const=True, default=None)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="upsr", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("degrade", help="synthesise (lr, y0) pairs from a folder of HR PNGs")
    p.add_argument("--input", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True)
    _add_seed(p)
    _add_degradation(p)

    p = sub.add_parser("train", help="train a denoiser (or a learned predictor)")
    p.add_argument("--hr", type=Path, required=True, help="folder of HR PNGs")
    p.add_argument("--y0", type=Path, required=True, help="folder of matching y0 PNGs")
    p.add_argument("--out", type=Path, required=True, help="model file to write")
    p.add_argument("--log", type=Path, default=None, help="training log CSV")
    p.add_argument("--role", choices=["denoiser", "predictor"], default=None)
    for flag, typ in (("--iterations", int), ("--batch-size", int), ("--lr", float),
                      ("--lam", float), ("--patch-size", int), ("--unshuffle", int),
                      ("--hidden", int), ("--layers", int), ("--momentum", float)):
        p.add_argument(flag, type=typ, default=None)
    p.add_argument("--optimizer", choices=["sgd", "adam"], default=None)
    p.add_argument("--lr-schedule", choices=["constant", "cosine"], default=None)
    _add_seed(p)
    _add_schedule(p)
    _add_weighting(p)

    p = sub.add_parser("sr", help="super-resolve one image")
    p.add_argument("--input", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--model", type=Path, default=None, help="denoiser model file")
    p.add_argument("--oracle", type=Path, default=None,
                   help="ground-truth PNG; replaces the denoiser with a perfect oracle")
    p.add_argument("--scale", type=int, default=None,
                   help="input is LR and gets bicubically upsampled by this factor "
                        "(default 1: input is already y0)")
    p.add_argument("--uncertainty-out", type=Path, default=None)
    p.add_argument("--weight-out", type=Path, default=None)
    p.add_argument("--dump-steps", type=Path, default=None,
                   help="folder for per-step x_t PNGs and noise statistics")
    _add_seed(p)
    _add_schedule(p)
    _add_weighting(p)

    p = sub.add_parser("verify", help="run the statistical self-check suite")
    p.add_argument("--filter", default=None,
                   help="comma-separated check groups (core, schedule, uncertainty, "
                        "diffusion, denoiser, analysis)")
    p.add_argument("--report", type=Path, default=None, help="JSON report path (default stdout)")
    p.add_argument("--inject-variance-scale", type=float, default=1.0, help=argparse.SUPPRESS)
    _add_seed(p)

    p = sub.add_parser("metrics", help="PSNR / SSIM between two images or two folders")
    p.add_argument("a", type=Path)
    p.add_argument("b", type=Path)
    p.add_argument("--csv", type=Path, default=None)

    p = sub.add_parser("hist", help="histogram of |y0 - x0| over a paired dataset")
    p.add_argument("--hr", type=Path, required=True)
    p.add_argument("--y0", type=Path, required=True)
    p.add_argument("--bin-width", type=float, default=None)
    p.add_argument("--cutoff", type=float, default=None)
    p.add_argument("--csv", type=Path, default=None)
    _add_seed(p)
    return parser


def resolve(args: argparse.Namespace) -> dict:
    """Merge defaults <- config file <- explicit flags."""
    opts = dict(DEFAULTS)
    cfg_path = getattr(args, "config", None)
    if cfg_path is not None:
        try:
            file_opts = json.loads(Path(cfg_path).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise CLIError(f"cannot read config {cfg_path}: {exc}") from exc
        opts.update({k.replace("-", "_"): v for k, v in file_opts.items()})
    opts.update({k: v for k, v in vars(args).items() if v is not None})
    return opts


def schedule_from(opts):
    return build_schedule(opts["steps"], opts["kappa"], opts["eta1"], opts["etaT"], opts["p"])


def weighting_from(opts) -> WeightingConfig:
    cfg = WeightingConfig(opts["bu"], opts["psimax"], opts["smooth_uncertainty"],
                          unw=not opts["no_unw"])
    # validates b_u / psi_max before any work
    from upsr.uncertainty import weight_coefficient
    weight_coefficient(0.0, cfg.effective_b_u(), cfg.psi_max)
    return cfg


def predictor_from(opts):
    kind = opts["predictor"]
    if kind == "identity":
        return identity_predictor()
    if kind == "smooth":
        return smoothing_predictor(opts["predictor_radius"])
    if opts.get("predictor_model") is None:
        raise CLIError("--predictor learned needs --predictor-model")
    return learned_predictor(load_model(opts["predictor_model"]))


def degradation_from(opts) -> DegradationConfig:
    return DegradationConfig(scale=opts["scale"], blur_sigma=tuple(opts["blur"]),
                             noise_sigma=tuple(opts["noise"]), jpeg_quality=tuple(opts["jpeg_quality"]),
                             jpeg=bool(opts["jpeg"]), second_pass=bool(opts["second_pass"]),
                             seed=opts["seed"])


def load_pairs(hr_dir: Path, y0_dir: Path):
    if not hr_dir.is_dir():
        raise CLIError(f"HR folder not found: {hr_dir}")
    if not y0_dir.is_dir():
        raise CLIError(f"y0 folder not found: {y0_dir}")
    names = sorted(p.name for p in hr_dir.glob("*.png"))
    if not names:
        raise CLIError(f"no input images in {hr_dir}")
    pairs = []
    for name in names:
        if not (y0_dir / name).exists():
            raise CLIError(f"missing y0 image for {name} in {y0_dir}")
        pairs.append((read_png(hr_dir / name), read_png(y0_dir / name)))
    return names, pairs


# -- commands -----------------------------------------------------------------


def cmd_degrade(args) -> int:
    opts = resolve(args)
    cfg = degradation_from(opts)
    if not args.input.is_dir():
        raise CLIError(f"input folder not found: {args.input}")
    try:
        n = degrade_directory(args.input, args.out, cfg)
    except FileNotFoundError as exc:
        raise CLIError(f"no input images in {args.input}") from exc
    log.info("degraded %d images into %s", n, args.out)
    return 0


def cmd_train(args) -> int:
    opts = resolve(args)
    _, pairs = load_pairs(args.hr, args.y0)
    cfg = TrainConfig(iterations=opts["iterations"], batch_size=opts["batch_size"], lr=opts["lr"],
                      lam=opts["lam"], seed=opts["seed"], patch_size=opts["patch_size"],
                      r=opts["unshuffle"], hidden=opts["hidden"], n_layers=opts["layers"],
                      momentum=opts["momentum"], optimizer=opts["optimizer"],
                      lr_schedule=opts["lr_schedule"])
    cfg.validate()
    rng = make_rng(opts["seed"], f"train:{opts['role']}")
    train_log = TrainLog()
    try:
        if opts["role"] == "predictor":
            model = train_predictor(pairs, cfg, rng, train_log=train_log)
        else:
            model = train(pairs, predictor_from(opts), schedule_from(opts), cfg, rng,
                          weighting_from(opts), train_log=train_log)
    except TrainingDiverged as exc:
        raise CLIError(str(exc)) from exc
    finally:
        if args.log is not None and train_log.rows:
            train_log.write_csv(args.log)
    args.out.parent.mkdir(parents=True, exist_ok=True)
    save_model(model, args.out)
    losses = train_log.losses
    log.info("trained %s: loss %.5g -> %.5g", opts["role"], losses[0], losses[-1])
    return 0


class StepDumper:
    """Writes each x_t as PNG and one CSV row of noise statistics per step."""

    def __init__(self, folder: Path, s, weights):
        self.folder = folder
        self.s = s
        self.w = weights.values.astype(np.float64)
        self.rows = []
        folder.mkdir(parents=True, exist_ok=True)

    def coefficient(self, t_new: int) -> float:
        s = self.s
        if t_new == s.T:
            return s.kappa * math.sqrt(s.eta[s.T])
        t = t_new + 1
        return s.kappa * math.sqrt(s.eta[t - 1] / s.eta[t] * (s.eta[t] - s.eta[t - 1]))

    def __call__(self, t, x_t, injected):
        write_png(self.folder / f"x_{t:03d}.png", x_t)
        coef = self.coefficient(t)
        expected = coef * self.w
        inj = np.asarray(injected, dtype=np.float64)
        self.rows.append({"t": t, "expected_std_min": float(expected.min()),
                          "expected_std_max": float(expected.max()),
                          "empirical_std": float(inj.std()),
                          "empirical_std_normalised": float((inj / np.maximum(self.w, 1e-12)[..., None]).std())
                          if coef > 0 else 0.0})

    def write(self):
        with open(self.folder / "noise_stats.csv", "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=list(self.rows[0]), lineterminator="\n")
            w.writeheader()
            w.writerows(self.rows)


def cmd_sr(args) -> int:
    opts = resolve(args)
    if not args.input.exists():
        raise CLIError(f"input image not found: {args.input}")
    s = schedule_from(opts)
    weighting = weighting_from(opts)
    predictor = predictor_from(opts)
    img = read_png(args.input)
    scale = args.scale or 1
    y0 = clamp01(bicubic_resize(img, img.shape[0] * scale, img.shape[1] * scale)) if scale > 1 else img

    if args.oracle is not None:
        gt = read_png(args.oracle)
        if gt.shape != y0.shape:
            raise CLIError(f"oracle image shape {gt.shape} does not match y0 {y0.shape}")
        denoiser = OracleDenoiser(gt)
    elif args.model is not None:
        denoiser = load_model(args.model)
        if denoiser.role != "denoiser":
            raise CLIError(f"{args.model} holds a {denoiser.role}, not a denoiser")
        if denoiser.T != s.T:
            raise CLIError(f"model was trained for T={denoiser.T}, schedule has T={s.T}")
    else:
        raise CLIError("need --model or --oracle")

    g_y0, umap, wmap = prepare_conditioning(y0, predictor, weighting)
    if args.uncertainty_out:
        write_uncertainty_png(args.uncertainty_out, umap)
    if args.weight_out:
        write_weight_png(args.weight_out, wmap)
    dumper = StepDumper(args.dump_steps, s, wmap) if args.dump_steps else None
    rng = make_rng(opts["seed"], "sr:chain")
    out = run_reverse_chain(y0, predictor, denoiser, s, weighting, rng, on_step=dumper)
    if dumper:
        dumper.write()
    write_png(args.out, out)
    if args.oracle is not None:
        log.info("PSNR vs oracle: %.2f dB", analysis.psnr(out, gt))
    return 0


def cmd_verify(args) -> int:
    from upsr.verify import run_checks

    opts = resolve(args)
    groups = [g.strip() for g in args.filter.split(",")] if args.filter else None
    try:
        results = run_checks(opts["seed"], groups, args.inject_variance_scale)
    except ValueError as exc:
        raise CLIError(str(exc)) from exc
    report = {"seed": opts["seed"], "passed": all(r["passed"] for r in results),
              "checks": results}
    text = json.dumps(report, indent=2, default=_json_default)
    if args.report:
        args.report.write_text(text + "\n")
    else:
        print(text)
    for r in results:
        if not r["passed"]:
            print(f"FAILED {r['group']}/{r['name']}", file=sys.stderr)
    return 0 if report["passed"] else 1


def _json_default(o):
    if isinstance(o, np.generic):
        return o.item()
    if isinstance(o, np.ndarray):
        return o.tolist()
    raise TypeError(type(o))


def _image_pairs(a: Path, b: Path):
    if a.is_dir() and b.is_dir():
        names = sorted(p.name for p in a.glob("*.png"))
        if not names:
            raise CLIError(f"no input images in {a}")
        return [(n, a / n, b / n) for n in names]
    for path in (a, b):
        if not path.exists():
            raise CLIError(f"not found: {path}")
    return [(a.name, a, b)]


def cmd_metrics(args) -> int:
    rows = []
    for name, pa, pb in _image_pairs(args.a, args.b):
        if not pb.exists():
            raise CLIError(f"not found: {pb}")
        ia, ib = read_png(pa), read_png(pb)
        if ia.shape != ib.shape:
            raise CLIError(f"{name}: shape mismatch {ia.shape} vs {ib.shape}")
        rows.append({"name": name, "psnr": analysis.psnr(ia, ib), "ssim": analysis.ssim(ia, ib)})
    if args.csv:
        with open(args.csv, "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=["name", "psnr", "ssim"], lineterminator="\n")
            w.writeheader()
            for r in rows:
                w.writerow({"name": r["name"], "psnr": repr(r["psnr"]), "ssim": repr(r["ssim"])})
    for r in rows:
        print(f"{r['name']}\tPSNR {r['psnr']:.4f}\tSSIM {r['ssim']:.6f}")
    return 0


def cmd_hist(args) -> int:
    opts = resolve(args)
    _, pairs = load_pairs(args.hr, args.y0)
    hist = analysis.residual_histogram([(y0, x0) for x0, y0 in pairs],
                                       opts["bin_width"], opts["cutoff"])
    text = hist.to_csv()
    if args.csv:
        args.csv.write_text(text)
    else:
        sys.stdout.write(text)
    return 0


COMMANDS = {"degrade": cmd_degrade, "train": cmd_train, "sr": cmd_sr, "verify": cmd_verify,
            "metrics": cmd_metrics, "hist": cmd_hist}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(levelname)s %(message)s", stream=sys.stderr)
    try:
        return COMMANDS[args.command](args)
    except (CLIError, ModelFormatError, ValueError, OSError) as exc:
        print(f"upsr {args.command}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
