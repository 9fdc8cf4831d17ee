"""Command-line entry point.

Exit codes: 0 success, 1 a check or verification failed, 2 usage error
(bad flags or inputs, or training steps requested out of order).

Every subcommand accepts ``--config FILE`` holding ``key=value`` lines whose
keys are the long flag names (dashes or underscores). Explicit flags override
the file, and the file overrides built-in defaults.
"""

from __future__ import annotations

import argparse
import math
import sys
import time
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import numpy as np

from . import __version__, ops
from .arch import ABLATIONS, LDRCNet, ModelConfig, parse_key_values
from .checkpoint import CheckpointFormatError, Phase, load_checkpoint, save_checkpoint
from .data import (
    ImageFormatError,
    PairedDataset,
    RainRanges,
    list_images,
    load_image,
    make_dataset,
    save_gray,
    save_image,
    synthetic_scene,
)
from .deform import deform_conv2d
from .metrics import eval_dataset
from .tensor import NonFiniteError, Tensor, no_grad, set_deterministic
from .training import ProtocolError, TrainConfig, predict, train_joint, train_phase1, train_phase2

EXIT_OK = 0
EXIT_CHECK = 1
EXIT_USAGE = 2

# inference pads to this multiple: three stride-2 stages in the deraining U-Net
SIZE_MULTIPLE = 8


class UsageError(Exception):
    pass


class CheckFailed(Exception):
    pass


def format_lr(lr: float) -> str:
    """Two significant digits in compact e-notation: 2.9e-4, 3e-4, 1e-6."""
    mantissa, exp = f"{lr:.1e}".split("e")
    mantissa = mantissa.rstrip("0").rstrip(".")
    return f"{mantissa}e{int(exp)}"


def format_loss_line(step: int, loss: float, lr: float) -> str:
    return f"{step}\t{loss:.6g}\t{format_lr(lr)}"


# ---- argument parsing ---------------------------------------------------


def _size_list(text: str) -> List[int]:
    try:
        sizes = [int(s) for s in text.split(",") if s.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None
    if not sizes or min(sizes) < 1:
        raise argparse.ArgumentTypeError("sizes must be positive")
    return sizes


def _bool(text: str) -> bool:
    low = str(text).strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise UsageError(f"expected a boolean, got {text!r}")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="ldrcnet", description="Rain-streak removal with learned degradation features.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    subs = parser.add_subparsers(dest="command", required=True, metavar="COMMAND")

    def sub(name, help_text):
        p = subs.add_parser(name, help=help_text, description=help_text)
        p.add_argument("--config", type=Path, default=None, help="key=value file (flags override it)")
        p.add_argument("--deterministic", action="store_true", help="single-threaded BLAS for bit-reproducibility")
        return p

    p = sub("gen-data", "render synthetic rainy/clean pairs")
    p.add_argument("--clean-dir", type=Path, required=True, help="directory of clean .ppm/.png images")
    p.add_argument("--out", type=Path, required=True, help="output directory (rainy/, clean/, manifest.tsv)")
    p.add_argument("--count", type=int, default=8, help="number of pairs (default 8)")
    p.add_argument("--seed", type=int, default=0, help="base seed (default 0)")
    p.add_argument("--synthesize-clean", metavar="HxW", default=None,
                   help="first fill --clean-dir with procedural scenes of this size")
    p.add_argument("--angle-min", type=float, default=-30.0, help="degrees (default -30)")
    p.add_argument("--angle-max", type=float, default=30.0, help="degrees (default 30)")
    p.add_argument("--length-min", type=int, default=9, help="streak length in pixels (default 9)")
    p.add_argument("--length-max", type=int, default=21, help="default 21")
    p.add_argument("--density-min", type=float, default=0.02, help="fraction of pixels seeding a streak (default 0.02)")
    p.add_argument("--density-max", type=float, default=0.02, help="default 0.02")
    p.add_argument("--intensity-min", type=float, default=0.6, help="default 0.6")
    p.add_argument("--intensity-max", type=float, default=1.0, help="default 1.0")

    p = sub("train", "run one training phase")
    p.add_argument("--phase", choices=[ph.label for ph in Phase], required=True)
    p.add_argument("--data", type=Path, required=True, help="manifest.tsv or the directory holding it")
    p.add_argument("--out", type=Path, required=True, help="checkpoint to write")
    p.add_argument("--resume", type=Path, default=None,
                   help="checkpoint to start from (a constraint checkpoint is required for --phase derain)")
    p.add_argument("--log", type=Path, default=None, help="loss log path (default: <out>.log)")
    p.add_argument("--ablation", choices=ABLATIONS, default=None, help="model variant (default full)")
    p.add_argument("--base-channels", type=int, default=16, help="default 16")
    p.add_argument("--steps", type=int, default=2000, help="total optimizer steps (default 2000)")
    p.add_argument("--seed", type=int, default=0, help="initialisation and sampling seed (default 0)")
    p.add_argument("--batch-size", type=int, default=1, help="default 1")
    p.add_argument("--patch-size", type=int, default=64, help="crop size, multiple of 8 (default 64)")
    p.add_argument("--lr-init", type=float, default=3e-4, help="default 3e-4")
    p.add_argument("--lr-final", type=float, default=1e-6, help="default 1e-6")
    p.add_argument("--lambda1", type=float, default=1.0, help="joint mode weight of the deraining loss (default 1)")
    p.add_argument("--lambda2", type=float, default=1.0, help="joint mode weight of the constraint loss (default 1)")
    p.add_argument("--quiet", action="store_true", help="do not echo loss lines to stdout")

    p = sub("infer", "derain an image or a directory of images")
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--input", type=Path, required=True, help="image file or directory")
    p.add_argument("--output", type=Path, required=True, help="image file or directory")

    p = sub("eval", "PSNR/SSIM of predictions against ground truth")
    p.add_argument("--pred-dir", type=Path, required=True)
    p.add_argument("--gt-dir", type=Path, required=True)
    p.add_argument("--report", type=Path, default=None, help="write <report>.tsv and <report>.json")

    p = sub("gradcheck", "finite-difference gradient suite")
    p.add_argument("--module", choices=["all", "tensor", "deform", "arch"], default="all")
    p.add_argument("--seeds", type=int, default=5, help="random problems per op (default 5)")

    p = sub("inspect", "dump an intermediate activation as grayscale images")
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--input", type=Path, required=True)
    p.add_argument("--layer", required=True, help="e.g. deg1, derain.enc2, derain.out")
    p.add_argument("--out", type=Path, required=True, help="output directory")

    p = sub("bench", "time the conv or deformable-conv kernel")
    p.add_argument("--op", choices=["conv", "deform"], default="conv")
    p.add_argument("--sizes", type=_size_list, default=[16, 32, 64], help="square spatial sizes (default 16,32,64)")
    p.add_argument("--channels", type=int, default=16, help="input and output channels (default 16)")
    p.add_argument("--repeat", type=int, default=3, help="timed repetitions per size (default 3)")
    return parser


def _subparser(parser: argparse.ArgumentParser, name: str) -> argparse.ArgumentParser:
    for action in parser._actions:
        if isinstance(action, argparse._SubParsersAction):
            return action.choices[name]
    raise KeyError(name)


def _apply_config(parser: argparse.ArgumentParser, command: str, path: Path) -> None:
    """Install the config file's values as the subcommand's defaults."""
    sub = _subparser(parser, command)
    try:
        text = path.read_text()
    except OSError as exc:
        raise UsageError(f"cannot read config {path}: {exc}") from None
    options = {a.dest: a for a in sub._actions if a.option_strings and a.dest not in ("help", "config")}
    defaults = {}
    for key, value in parse_key_values(text).items():
        if key not in options:
            raise UsageError(f"unknown key {key!r} in {path}; valid keys: {', '.join(sorted(options))}")
        action = options[key]
        if action.nargs == 0:
            defaults[key] = _bool(value)
        elif action.type is not None:
            try:
                defaults[key] = action.type(value)
            except (ValueError, argparse.ArgumentTypeError) as exc:
                raise UsageError(f"bad value for {key} in {path}: {exc}") from None
        else:
            defaults[key] = value
        if action.choices is not None and defaults[key] not in action.choices:
            raise UsageError(f"{key}={value} not one of {sorted(action.choices)}")
        action.required = False
    sub.set_defaults(**defaults)


def _prescan(argv: Sequence[str]):
    """Find the subcommand and any --config path before the real parse."""
    pre = argparse.ArgumentParser(add_help=False)
    pre.add_argument("--config", type=Path, default=None)
    known, _ = pre.parse_known_args(argv)
    command = next((a for a in argv if a in COMMANDS), None)
    return command, known.config


# ---- subcommands --------------------------------------------------------


def _parse_hw(text: str):
    try:
        h, w = (int(v) for v in text.lower().split("x"))
    except ValueError:
        raise UsageError(f"expected HxW, got {text!r}") from None
    return h, w


def cmd_gen_data(args) -> int:
    if args.synthesize_clean:
        h, w = _parse_hw(args.synthesize_clean)
        args.clean_dir.mkdir(parents=True, exist_ok=True)
        for i in range(args.count):
            save_image(args.clean_dir / f"scene{i:04d}.ppm", synthetic_scene(h, w, args.seed * 100003 + i))
    if not args.clean_dir.is_dir():
        raise UsageError(f"--clean-dir {args.clean_dir} is not a directory")
    if args.count < 1:
        raise UsageError("--count must be positive")
    ranges = RainRanges(
        angle=(args.angle_min, args.angle_max),
        length=(args.length_min, args.length_max),
        density=(args.density_min, args.density_max),
        intensity=(args.intensity_min, args.intensity_max),
    )
    for name in ("angle", "length", "density", "intensity"):
        lo, hi = getattr(ranges, name)
        if lo > hi:
            raise UsageError(f"--{name}-min exceeds --{name}-max")
    ds = make_dataset(args.clean_dir, args.out, args.count, ranges, args.seed)
    print(args.out / "manifest.tsv")
    print(f"wrote {len(ds)} pairs", file=sys.stderr)
    return EXIT_OK


def _train_config(args, mode: str) -> TrainConfig:
    try:
        return TrainConfig(
            lr_init=args.lr_init,
            lr_final=args.lr_final,
            total_steps=args.steps,
            batch_size=args.batch_size,
            patch_size=args.patch_size,
            lambda1=args.lambda1,
            lambda2=args.lambda2,
            seed=args.seed,
            mode=mode,
        )
    except ValueError as exc:
        raise UsageError(str(exc)) from None


def _model_for(args, resume) -> LDRCNet:
    if resume is not None:
        if args.ablation is not None and args.ablation != resume.config.ablation:
            raise UsageError(
                f"--ablation {args.ablation} conflicts with the checkpoint's ablation {resume.config.ablation}"
            )
        return LDRCNet(resume.config, seed=args.seed)
    try:
        cfg = ModelConfig(base_channels=args.base_channels, ablation=args.ablation or "full")
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    return LDRCNet(cfg, seed=args.seed)


def cmd_train(args) -> int:
    phase = Phase[args.phase.upper()]
    cfg = _train_config(args, "joint" if phase == Phase.JOINT else "two_phase")
    resume = load_checkpoint(args.resume) if args.resume is not None else None
    model = _model_for(args, resume)
    try:
        data = PairedDataset.from_manifest(args.data)
        pairs = data.arrays()
    except (OSError, ValueError) as exc:
        raise UsageError(f"cannot load training data from {args.data}: {exc}") from None

    log_path = args.log if args.log is not None else args.out.with_name(args.out.name + ".log")
    log_path.parent.mkdir(parents=True, exist_ok=True)
    with open(log_path, "a" if resume is not None and resume.phase == phase else "w") as log_file:

        def log(step, loss, lr):
            line = format_loss_line(step, loss, lr)
            log_file.write(line + "\n")
            if not args.quiet:
                print(line, flush=True)

        if phase == Phase.CONSTRAINT:
            if resume is not None and resume.phase != Phase.CONSTRAINT:
                raise UsageError(f"cannot resume constraint training from a {resume.phase.label} checkpoint")
            ck = train_phase1(model, pairs, cfg, log=log, resume=resume)
        elif phase == Phase.DERAIN:
            ck = train_phase2(model, pairs, cfg, pretrained=resume, log=log)
        else:
            if resume is not None and resume.phase == Phase.DERAIN:
                raise UsageError("joint training cannot start from a derain checkpoint (its encoder is frozen)")
            if resume is not None and resume.phase == Phase.CONSTRAINT:
                model.load_state_dict(resume.params)
                resume = None
            ck = train_joint(model, pairs, cfg, log=log, resume=resume)
    args.out.parent.mkdir(parents=True, exist_ok=True)
    save_checkpoint(args.out, ck)
    print(f"saved {phase.label} checkpoint at step {ck.step} to {args.out}", file=sys.stderr)
    return EXIT_OK


def pad_to_multiple(img: np.ndarray, multiple: int = SIZE_MULTIPLE) -> np.ndarray:
    """Reflect-pad an (H, W, C) image at the bottom/right to a multiple of ``multiple``."""
    h, w = img.shape[:2]
    ph = (-h) % multiple
    pw = (-w) % multiple
    if ph == 0 and pw == 0:
        return img
    return np.pad(img, ((0, ph), (0, pw), (0, 0)), mode="reflect" if min(h, w) > 1 else "edge")


def derain_image(model: LDRCNet, img: np.ndarray) -> np.ndarray:
    h, w = img.shape[:2]
    x = pad_to_multiple(img).transpose(2, 0, 1)[None].astype(np.float32)
    out = predict(model, x)[0].transpose(1, 2, 0)[:h, :w]
    return np.clip(out.astype(np.float64), 0.0, 1.0)


def _io_pairs(src: Path, dst: Path):
    if src.is_dir():
        dst.mkdir(parents=True, exist_ok=True)
        images = list_images(src)
        if not images:
            raise UsageError(f"no .ppm/.png images in {src}")
        return [(p, dst / p.name) for p in images]
    if not src.exists():
        raise UsageError(f"input {src} does not exist")
    dst.parent.mkdir(parents=True, exist_ok=True)
    return [(src, dst)]


def _load_derainer(path: Path) -> LDRCNet:
    ck = load_checkpoint(path)
    if ck.phase not in (Phase.DERAIN, Phase.JOINT):
        raise UsageError(
            f"{path} is a {ck.phase.label} checkpoint; inference needs a derain or joint checkpoint "
            "(the constraint network is only used during training)"
        )
    return ck.build_model()


def cmd_infer(args) -> int:
    model = _load_derainer(args.checkpoint)
    for src, dst in _io_pairs(args.input, args.output):
        save_image(dst, derain_image(model, load_image(src)))
        print(dst)
    return EXIT_OK


def cmd_eval(args) -> int:
    preds = list_images(args.pred_dir)
    gts = list_images(args.gt_dir)
    if len(preds) != len(gts):
        raise UsageError(f"{len(preds)} predictions but {len(gts)} ground-truth images")
    if [p.name for p in preds] != [g.name for g in gts]:
        missing = sorted({p.name for p in preds} ^ {g.name for g in gts})
        raise UsageError(f"file names do not line up: {', '.join(missing[:5])}")
    outputs, targets = [], []
    for p, g in zip(preds, gts):
        a, b = load_image(p), load_image(g)
        if a.shape != b.shape:
            raise UsageError(f"{p.name}: prediction {a.shape} vs ground truth {b.shape}")
        outputs.append(a)
        targets.append(b)
    report = eval_dataset(outputs, targets, [p.name for p in preds])
    if args.report is not None:
        stem = args.report.with_suffix("") if args.report.suffix in (".tsv", ".json") else args.report
        stem.parent.mkdir(parents=True, exist_ok=True)
        stem.with_name(stem.name + ".tsv").write_text(report.to_tsv())
        stem.with_name(stem.name + ".json").write_text(report.to_json())
    print(report.summary())
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    from .gradcheck import run_suite

    if args.seeds < 1:
        raise UsageError("--seeds must be positive")
    start = time.perf_counter()
    results = run_suite(args.module, seeds=range(args.seeds), report=print)
    failed = [r.name for r in results if not r.passed]
    print(f"{len(results)} ops, {len(results) - len(failed)} passed, {time.perf_counter() - start:.1f} s")
    if failed:
        raise CheckFailed("gradient check failed for: " + ", ".join(failed))
    return EXIT_OK


def normalize_channel(a: np.ndarray) -> np.ndarray:
    """Min-max scale to [0, 1]; a constant channel maps to 0.5 (mid-gray)."""
    a = np.asarray(a, dtype=np.float64)
    lo, hi = float(a.min()), float(a.max())
    if hi - lo <= 0.0:
        return np.full(a.shape, 0.5)
    return (a - lo) / (hi - lo)


def cmd_inspect(args) -> int:
    ck = load_checkpoint(args.checkpoint)
    model = ck.build_model()
    names = model.layer_names()
    if args.layer not in names:
        raise UsageError(f"unknown layer {args.layer!r}; available: {', '.join(names)}")
    img = load_image(args.input)
    h, w = img.shape[:2]
    x = Tensor(pad_to_multiple(img).transpose(2, 0, 1)[None].astype(np.float32))
    taps: Dict[str, Tensor] = {}
    with no_grad():
        deg = model.encoder(x, taps) if model.encoder is not None else None
        if args.layer.startswith("derain."):
            model.derain(x, deg, taps)
    act = taps[args.layer].data[0]
    scale = x.shape[2] // act.shape[1]
    act = act[:, : math.ceil(h / scale), : math.ceil(w / scale)]
    args.out.mkdir(parents=True, exist_ok=True)
    for c, channel in enumerate(act):
        save_gray(args.out / f"{args.layer}_c{c:03d}.pgm", normalize_channel(channel))
    print(f"{act.shape[0]} channels of {act.shape[1]}x{act.shape[2]} written to {args.out}")
    return EXIT_OK


def _bench_gate(op: str, channels: int, rng) -> None:
    """Correctness check run before any timing; raises CheckFailed."""
    x = rng.standard_normal((1, channels, 12, 12)).astype(np.float32)
    w = rng.standard_normal((channels, channels, 3, 3)).astype(np.float32)
    if op == "conv":
        got = ops.conv2d(Tensor(x), Tensor(w), None, 1, 1, 1).data
        want = ops.conv2d_reference(x, w, None, 1, 1, 1)
        label = "conv2d vs reference convolution"
    else:
        off = Tensor(np.zeros((1, 18, 12, 12), np.float32))
        got = deform_conv2d(Tensor(x), off, Tensor(w), None, 1, 1, 1).data
        want = ops.conv2d(Tensor(x), Tensor(w), None, 1, 1, 1).data
        label = "zero-offset deform_conv2d vs conv2d"
    err = float(np.max(np.abs(got - want)))
    if not err <= 1e-5 * max(1.0, float(np.max(np.abs(want)))):
        raise CheckFailed(f"correctness gate failed ({label}): max abs error {err:.3e}")


def cmd_bench(args) -> int:
    rng = np.random.default_rng(0)
    c = args.channels
    if c < 1 or args.repeat < 1:
        raise UsageError("--channels and --repeat must be positive")
    _bench_gate(args.op, c, rng)
    print("op\tsize\tseconds\tMelem_per_s")
    for s in args.sizes:
        x = Tensor(rng.standard_normal((1, c, s, s)).astype(np.float32))
        w = Tensor(rng.standard_normal((c, c, 3, 3)).astype(np.float32))
        if args.op == "conv":
            run = lambda: ops.conv2d(x, w, None, 1, 1, 1)  # noqa: E731
        else:
            off = Tensor(np.zeros((1, 18, s, s), np.float32))
            run = lambda: deform_conv2d(x, off, w, None, 1, 1, 1)  # noqa: E731
            conv_out = ops.conv2d(x, w, None, 1, 1, 1).data
            if not np.allclose(run().data, conv_out, rtol=0, atol=1e-5 * max(1.0, float(np.abs(conv_out).max()))):
                raise CheckFailed(f"zero-offset deform_conv2d disagrees with conv2d at size {s}")
        run()
        best = math.inf
        for _ in range(args.repeat):
            t0 = time.perf_counter()
            run()
            best = min(best, time.perf_counter() - t0)
        elems = c * s * s
        print(f"{args.op}\t{s}\t{best:.6f}\t{elems / best / 1e6:.3f}")
    return EXIT_OK


COMMANDS = {
    "gen-data": cmd_gen_data,
    "train": cmd_train,
    "infer": cmd_infer,
    "eval": cmd_eval,
    "gradcheck": cmd_gradcheck,
    "inspect": cmd_inspect,
    "bench": cmd_bench,
}


def main(argv: Optional[Sequence[str]] = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        command, config = _prescan(argv)
        if command is not None and config is not None:
            _apply_config(parser, command, config)
        try:
            args = parser.parse_args(argv)
        except SystemExit as exc:
            return int(exc.code) if exc.code is not None else EXIT_OK
        if args.deterministic:
            set_deterministic(True)
        return COMMANDS[args.command](args)
    except CheckFailed as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CHECK
    except (UsageError, ProtocolError, CheckpointFormatError, ImageFormatError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except NonFiniteError as exc:
        print(f"error: training diverged: {exc}", file=sys.stderr)
        return EXIT_CHECK


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
