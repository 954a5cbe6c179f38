"""Command-line interface: synth, pretrain, train, enhance, eval, diagnose, gradcheck.

Exit codes: 0 success, 1 internal error, 2 I/O error, 3 config/compatibility error.
"""

from __future__ import annotations

import argparse
import dataclasses
import logging
import os
import sys
import time
from pathlib import Path
from typing import Optional

import numpy as np

from . import data, metrics, structure
from .diffusion import enhance
from .errors import CheckpointError, ConfigError, FormatError, NumericalError
from .schedules import PRESETS, SIGMA_RULES, build_inference
from .trainer import TrainConfig, TrainingError, load_checkpoint, pretrain, train

log = logging.getLogger("lowlight_diffusion")

EXIT_OK, EXIT_INTERNAL, EXIT_IO, EXIT_CONFIG = 0, 1, 2, 3
DEFAULT_PRESET = "lolv2-synthetic"  # matches the synthetic degradation model
ABLATION_SWITCHES = {"a": "structure_reg", "b": "kappa_schedule", "c": "uncertainty"}


class UsageError(ConfigError):
    pass


def _color(text: str, code: str) -> str:
    if os.environ.get("NO_COLOR") or not sys.stdout.isatty():
        return text
    return f"\033[{code}m{text}\033[0m"


def _status(ok: bool) -> str:
    return _color("PASS", "32") if ok else _color("FAIL", "31")


# -- config ------------------------------------------------------------------

def _coerce(name: str, raw: str, kind):
    raw = raw.strip()
    try:
        if kind is bool:
            low = raw.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        return kind(raw)
    except ValueError:
        raise ConfigError(f"config key {name!r}: cannot parse {raw!r} as {kind.__name__}") from None


_FIELD_TYPES = {f.name: {"int": int, "float": float, "bool": bool, "str": str}[f.type]
                for f in dataclasses.fields(TrainConfig)}


def parse_config_text(text: str, source: str = "<config>") -> dict:
    """``key = value`` lines with ``#`` comments; unknown keys are rejected."""
    out = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value', got {line!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        if key not in _FIELD_TYPES:
            raise ConfigError(f"{source}:{lineno}: unknown key {key!r}")
        out[key] = _coerce(key, value, _FIELD_TYPES[key])
    return out


def format_config(cfg: TrainConfig) -> str:
    return "".join(f"{k} = {v}\n" for k, v in cfg.to_dict().items())


def apply_ablation(values: dict, spec: str) -> None:
    """``spec`` lists the enabled switches: 'none', 'a', 'ab', 'abc', 'c', ..."""
    spec = spec.strip().lower().replace(",", "").replace("+", "")
    if spec in ("none", "baseline", "off"):
        spec = ""
    bad = set(spec) - set(ABLATION_SWITCHES)
    if bad:
        raise ConfigError(f"--ablation accepts the letters a, b, c (or 'none'), got {sorted(bad)}")
    for letter, name in ABLATION_SWITCHES.items():
        values[name] = letter in spec


def resolve_train_config(args) -> TrainConfig:
    values = {}
    if args.config:
        path = Path(args.config)
        try:
            values.update(parse_config_text(path.read_text(), str(path)))
        except OSError as exc:
            raise ConfigError(f"cannot read config file {path}: {exc}") from exc
    for item in args.set or []:
        if "=" not in item:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        values.update(parse_config_text(item, "--set"))
    if args.seed is not None:
        values["seed"] = args.seed
    if args.iters is not None:
        values["pretrain_iters" if args.command == "pretrain" else "train_iters"] = args.iters
    if getattr(args, "ablation", None):
        apply_ablation(values, args.ablation)
    return TrainConfig.from_dict(values).validate()


def _run_dir(args, cfg_hash: str) -> Path:
    if args.out:
        return Path(args.out)
    return Path(args.runs_root) / f"{time.strftime('%Y%m%d-%H%M%S')}-{cfg_hash[:8]}"


def _load_dataset(path) -> list:
    path = Path(path)
    if path.is_dir():
        path = path / "manifest.txt"
    if not path.exists():
        raise FileNotFoundError(f"dataset manifest not found: {path}")
    pairs = data.load_manifest(path)
    if not pairs:
        raise ConfigError(f"dataset {path} is empty")
    return pairs


# -- commands ------------------------------------------------------------------

def cmd_synth(args) -> int:
    if args.size < 4 or args.size % 4:
        raise UsageError(f"--size must be a positive multiple of 4, got {args.size}")
    if args.pairs < 1:
        raise UsageError(f"--pairs must be >= 1, got {args.pairs}")
    params = data.DegradationParams(noise_sigma=args.noise, seed=args.seed)
    pairs = data.make_dataset(args.seed, args.pairs, args.size, motif_count=args.motifs, params=params)
    manifest = data.write_dataset(pairs, args.out)
    print(f"wrote {2 * len(pairs)} images and {manifest}")
    return EXIT_OK


def _train_phase(args) -> int:
    cfg = resolve_train_config(args)
    dataset = _load_dataset(args.data)
    phase = args.command
    pretrained = None
    if phase == "train":
        if not args.pretrained:
            raise UsageError("train requires --pretrained CHECKPOINT (phase 1 output)")
        pretrained = load_checkpoint(args.pretrained, expect=cfg)
        if pretrained.phase != "pretrain":
            raise CheckpointError(f"{args.pretrained} is a '{pretrained.phase}' checkpoint, not a pretrained one")
    resume = None
    if args.resume:
        if not args.out:
            raise UsageError("--resume needs --out pointing at the interrupted run directory")
        found = [Path(args.out) / f"{phase}{suffix}.ckpt" for suffix in ("_latest", "")]
        found = [p for p in found if p.exists()]
        if not found:
            raise CheckpointError(f"no {phase} checkpoint to resume from in {args.out}")
        loaded = [(load_checkpoint(p, expect=cfg), p) for p in found]
        resume, ckpt_path = max(loaded, key=lambda item: item[0].iteration)
        if resume.config.resume_key() != cfg.resume_key():
            raise ConfigError(f"{ckpt_path} was written with a different configuration")
        print(f"resuming {phase} from iteration {resume.iteration}")

    run_dir = _run_dir(args, cfg.full_hash())
    run_dir.mkdir(parents=True, exist_ok=True)
    (run_dir / "config.txt").write_text(format_config(cfg))
    log_path = run_dir / f"{phase}_log.csv"
    rows = []

    def progress(row):
        rows.append(row["loss_total"])
        if args.verbose and row["iter"] % 100 == 0:
            print(f"{phase} iter {row['iter']}: loss {row['loss_total']:.5f}", flush=True)

    started = time.time()
    if phase == "pretrain":
        ckpt = pretrain(cfg, dataset, out_dir=run_dir, log_path=log_path, resume=resume, callback=progress)
    else:
        ckpt = train(cfg, dataset, pretrained, out_dir=run_dir, log_path=log_path, resume=resume,
                     callback=progress)
    tail = rows[-100:]
    summary = f"{np.mean(tail):.6f} (mean of last {len(tail)})" if tail else "n/a (no iterations run)"
    print(f"{phase} finished at iteration {ckpt.iteration} in {time.time() - started:.1f}s; "
          f"final loss {summary}")
    print(f"checkpoint: {run_dir / (phase + '.ckpt')}")
    return EXIT_OK


def _inference_schedule(args):
    if args.preset:
        if any(v is not None for v in (args.steps, args.oma_first, args.oma_last)):
            raise UsageError("--preset cannot be combined with --steps/--oma-first/--oma-last")
        return build_inference(*PRESETS[args.preset], sigma_rule=args.sigma)
    if args.steps is None and args.oma_first is None and args.oma_last is None:
        return build_inference(*PRESETS[DEFAULT_PRESET], sigma_rule=args.sigma)
    if None in (args.steps, args.oma_first, args.oma_last):
        raise UsageError("--steps, --oma-first and --oma-last must be given together")
    return build_inference(args.steps, args.oma_first, args.oma_last, sigma_rule=args.sigma)


def _model_weights(ckpt, which: str):
    return ckpt.ema if which == "ema" else ckpt.params


def cmd_enhance(args) -> int:
    schedule = _inference_schedule(args)
    ckpt = load_checkpoint(args.checkpoint)
    weights = _model_weights(ckpt, args.weights)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    done = 0
    for index, src in enumerate(args.inputs):
        src = Path(src)
        try:
            y = data.load_ppm(src)
            if y.shape[0] % 4 or y.shape[1] % 4:
                raise FormatError(f"dimensions {y.shape[0]}x{y.shape[1]} not divisible by 4")
        except (OSError, FormatError) as exc:
            print(f"warning: skipping {src}: {exc}", file=sys.stderr)
            continue
        rng = np.random.default_rng(np.random.SeedSequence([args.seed, index]))
        x_hat, rec = enhance(weights, y, schedule, rng, record=args.record_trajectory)
        data.save_ppm(x_hat, out / f"{src.stem}_enhanced.ppm")
        if rec is not None:
            rec.to_csv(out / f"{src.stem}_trajectory.csv")
        done += 1
    print(f"enhanced {done}/{len(args.inputs)} image(s) with {schedule.S} steps into {out}")
    return EXIT_OK if done else EXIT_IO


def _pair_files(pred_dir: Path, ref_dir: Path) -> list[tuple[str, Path, Path]]:
    pairs = []
    for ref in sorted(ref_dir.glob("*.ppm")):
        for cand in (pred_dir / ref.name, pred_dir / f"{ref.stem}_enhanced.ppm"):
            if cand.exists():
                pairs.append((ref.stem, cand, ref))
                break
    if not pairs:
        raise FileNotFoundError(f"no matching PPM files between {pred_dir} and {ref_dir}")
    return pairs


def cmd_eval(args) -> int:
    report = metrics.EvalReport()
    for image_id, pred, ref in _pair_files(Path(args.pred_dir), Path(args.ref_dir)):
        a, b = data.load_ppm(pred), data.load_ppm(ref)
        gap = metrics.spectrum_gap(a, b, args.block, args.clusters, args.algo) if args.spectrum_gap else None
        report.add(metrics.EvalRow(image_id, metrics.psnr(a, b), metrics.ssim(a, b), spectrum_gap=gap))
    if args.out:
        Path(args.out).parent.mkdir(parents=True, exist_ok=True)
        report.to_csv(args.out)
    line = f"images {len(report.rows)}  mean PSNR {report.mean('psnr'):.4f} dB  mean SSIM {report.mean('ssim'):.6f}"
    if args.spectrum_gap:
        line += f"  mean spectrum gap {report.mean('spectrum_gap'):.6f}"
    print(line)
    return EXIT_OK


def cmd_diagnose(args) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    if args.what == "trajectory":
        return _diagnose_trajectory(args, out)
    return _diagnose_spectrum(args, out)


def _diagnose_trajectory(args, out: Path) -> int:
    schedule = _inference_schedule(args)
    ckpts = list(args.compare) if args.compare else ([args.checkpoint] if args.checkpoint else [])
    if not ckpts:
        raise UsageError("diagnose trajectory needs --checkpoint or --compare A B")
    y = data.load_ppm(args.input)
    gt = data.load_ppm(args.reference).astype(np.float64) if args.reference else None
    series, curvatures = {}, []
    for path in ckpts:
        ckpt = load_checkpoint(path)
        rng = np.random.default_rng(np.random.SeedSequence([args.seed, 0]))
        _, rec = enhance(_model_weights(ckpt, args.weights), y, schedule, rng, record=True)
        name = Path(path).stem
        curv = metrics.trajectory_curvature(rec)
        rec.to_csv(out / f"{name}_trajectory.csv", ground_truth=gt)
        if gt is not None:
            trace = [float(np.linalg.norm(s.astype(np.float64) - gt)) for s in rec.snapshots]
            ylabel = "distance to ground truth"
        else:
            trace = [float(s.mean(dtype=np.float64)) for s in rec.snapshots]
            ylabel = "mean intensity"
        series[f"{name} (curvature {curv:.4f})"] = list(zip(rec.steps, trace))
        print(f"{name}: curvature {curv:.6f}")
        curvatures.append(f"{name},{curv:.9g}\n")
    (out / "curvature.csv").write_text("checkpoint,curvature\n" + "".join(curvatures))
    metrics.emit_plot(series, out / "trajectory.svg", title="Reverse trajectory",
                      xlabel="step", ylabel=ylabel)
    return EXIT_OK


def _diagnose_spectrum(args, out: Path) -> int:
    if not (args.pred and args.reference):
        raise UsageError("diagnose spectrum needs --pred and --reference images")
    x_hat, x0 = data.load_ppm(args.pred), data.load_ppm(args.reference)
    clusters = structure.cluster_image(x0, args.block, args.clusters, args.algo, args.seed)
    pair = structure.spectrum_pair(x_hat, x0, clusters)
    pair.to_csv(out / "spectrum.csv")
    big = int(np.argmax(clusters.sizes))
    series = {"reconstruction": list(enumerate(pair.rec[big])), "ground truth": list(enumerate(pair.gt[big]))}
    metrics.emit_plot(series, out / "spectrum.svg", title=f"Singular values, cluster {big}",
                      xlabel="rank index", ylabel="singular value")
    print(f"clusters {clusters.k}  mean spectrum gap "
          f"{metrics.spectrum_gap(x_hat, x0, args.block, args.clusters, args.algo, args.seed):.6f}")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    from . import gradsuite

    started = time.time()
    dtype = np.float32 if args.float32 else np.float64
    reports = gradsuite.run_suite(dtype)
    for r in reports:
        print(r.line().replace("PASS", _status(True), 1).replace("FAIL", _status(False), 1))
    failed = [r for r in reports if not r.passed]
    print(f"{len(reports) - len(failed)}/{len(reports)} passed in {time.time() - started:.1f}s")
    return EXIT_OK if not failed else EXIT_INTERNAL


# -- parser --------------------------------------------------------------------

def _add_train_args(p):
    p.add_argument("--data", required=True, help="dataset directory or manifest.txt")
    p.add_argument("--config", help="file of 'key = value' lines")
    p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override one config key")
    p.add_argument("--iters", type=int, help="iterations for this phase")
    p.add_argument("--out", help="run directory (default: RUNS_ROOT/<timestamp>-<confighash>)")
    p.add_argument("--runs-root", default="runs")
    p.add_argument("--resume", action="store_true", help="continue from <out>/<phase>_latest.ckpt")
    p.add_argument("--verbose", action="store_true")


def _add_schedule_args(p):
    p.add_argument("--preset", choices=sorted(PRESETS), help=f"default {DEFAULT_PRESET}")
    p.add_argument("--steps", type=int)
    p.add_argument("--oma-first", type=float, help="1 - alpha at the first step")
    p.add_argument("--oma-last", type=float, help="1 - alpha at the last step")
    p.add_argument("--sigma", choices=SIGMA_RULES, default="posterior", help="reverse-step noise rule")
    p.add_argument("--weights", choices=("ema", "params"), default="ema")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="lowlight-diffusion", description=__doc__.splitlines()[0])
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=None, help="seed for all stochastic behavior")
    sub = parser.add_subparsers(dest="command", required=True)

    def command(name, **kw):
        return sub.add_parser(name, parents=[common], **kw)

    p = command("synth", help="write a synthetic paired dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--pairs", type=int, default=8)
    p.add_argument("--size", type=int, default=64)
    p.add_argument("--motifs", type=int, default=4)
    p.add_argument("--noise", type=float, default=0.02, help="additive noise sigma")

    p = command("pretrain", help="phase 1: uncertainty pretraining")
    _add_train_args(p)

    p = command("train", help="phase 2: regularized training from a pretrained checkpoint")
    _add_train_args(p)
    p.add_argument("--pretrained", help="phase 1 checkpoint")
    p.add_argument("--ablation", help="enabled switches: a=structure, b=kappa, c=uncertainty, e.g. 'abc' or 'none'")

    p = command("enhance", help="enhance low-light PPM images")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--record-trajectory", action="store_true")
    _add_schedule_args(p)
    p.add_argument("inputs", nargs="+")

    p = command("eval", help="PSNR/SSIM of predictions against references")
    p.add_argument("--pred-dir", required=True)
    p.add_argument("--ref-dir", required=True)
    p.add_argument("--out", help="report CSV")
    p.add_argument("--spectrum-gap", action="store_true")
    p.add_argument("--block", type=int, default=4)
    p.add_argument("--clusters", type=int, default=None)
    p.add_argument("--algo", choices=structure.CLUSTERERS, default="hierarchical")

    p = command("diagnose", help="trajectory curvature or cluster spectra")
    p.add_argument("what", choices=("trajectory", "spectrum"))
    p.add_argument("--out", required=True)
    p.add_argument("--checkpoint")
    p.add_argument("--compare", nargs=2, metavar=("BASELINE", "OTHER"))
    p.add_argument("--input", help="low-light PPM (trajectory)")
    p.add_argument("--pred", help="reconstruction PPM (spectrum)")
    p.add_argument("--reference", help="ground-truth PPM")
    p.add_argument("--block", type=int, default=4)
    p.add_argument("--clusters", type=int, default=None)
    p.add_argument("--algo", choices=structure.CLUSTERERS, default="hierarchical")
    _add_schedule_args(p)

    p = command("gradcheck", help="finite-difference gradient suite")
    p.add_argument("--float32", action="store_true", help="check float32 gradients (default float64)")
    return parser


COMMANDS = {"synth": cmd_synth, "pretrain": _train_phase, "train": _train_phase, "enhance": cmd_enhance,
            "eval": cmd_eval, "diagnose": cmd_diagnose, "gradcheck": cmd_gradcheck}


def main(argv: Optional[list] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_CONFIG
    if args.seed is None and args.command not in ("pretrain", "train"):
        args.seed = 0  # training falls back to the config file's seed
    logging.basicConfig(level=logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return COMMANDS[args.command](args)
    except (ConfigError, CheckpointError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (OSError, FormatError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (TrainingError, NumericalError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INTERNAL


if __name__ == "__main__":
    sys.exit(main())
