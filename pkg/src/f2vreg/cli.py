"""Command-line entry point: ``f2vreg <subcommand> [flags]``.

Every flag mirrors a :class:`RunConfig` key (``--batch-size`` <-> ``batch_size``).
Values resolve as defaults < ``--config`` JSON file < explicit flags.
Exit codes: 0 success, 1 runtime failure, 2 usage error.
"""
from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
import time
from dataclasses import dataclass, fields
from pathlib import Path

import numpy as np

log = logging.getLogger("f2vreg")

EXIT_OK, EXIT_FAIL, EXIT_USAGE = 0, 1, 2


class UsageError(Exception):
    pass


@dataclass
class RunConfig:
    seed: int = 0
    # simulate
    out: str = ""
    volumes: int = 10
    transforms_per_volume: int = 4
    test_fraction: float = 0.1
    toy: bool = False
    # data selection
    manifest: str = ""
    split: str = "test"
    index: int = 0
    volume: str = ""
    frame: str = ""
    limit: int = 0
    # network and training
    checkpoint: str = ""
    d: int = 32
    m: int = 64
    steps: int = 200
    batch_size: int = 8
    lr: float = 1e-3
    precision: int = 32
    w_trans: float = 1.0
    w_rot: float = 1.0
    w_prompt: float = 0.1
    w_reg: float = 0.1
    w_sim: float = 0.5
    # registration
    method: str = "classical"
    max_evals: int = 2000
    restarts: int = 0
    objective: str = "ncc"
    # gradcheck / benchmark
    blocks: str = ""
    repeats: int = 5


_FIELDS = {f.name: f for f in fields(RunConfig)}

# flags exposed per subcommand; every command also takes --config and --seed
_COMMAND_KEYS = {
    "simulate": ["out", "volumes", "transforms_per_volume", "test_fraction", "toy"],
    "train": [
        "manifest", "checkpoint", "d", "m", "steps", "batch_size", "lr", "precision",
        "w_trans", "w_rot", "w_prompt", "w_reg", "w_sim", "limit",
    ],
    "register": [
        "method", "manifest", "split", "index", "volume", "frame", "checkpoint", "out",
        "max_evals", "restarts", "objective",
    ],
    "evaluate": [
        "method", "manifest", "split", "checkpoint", "out", "limit", "max_evals", "restarts", "objective",
    ],
    "gradcheck": ["blocks"],
    "benchmark": ["toy", "repeats", "checkpoint", "max_evals", "restarts"],
}

_HELP = {
    "simulate": "synthesize a phantom dataset and its manifest",
    "train": "train the registration network on a manifest split",
    "register": "register one frame (nn or classical); write pose, resampled slice, difference image",
    "evaluate": "score a registrar on a manifest split",
    "gradcheck": "finite-difference check of every differentiable block (64-bit)",
    "benchmark": "network forward FPS and classical seconds per case on this host",
}


def _flag(key: str) -> str:
    return "--" + key.replace("_", "-")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="f2vreg", description="Rigid frame-to-volume registration toolkit.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, keys in _COMMAND_KEYS.items():
        p = sub.add_parser(name, help=_HELP[name], description=_HELP[name])
        p.add_argument("--config", help="JSON file of RunConfig keys; flags override it")
        for key in ["seed"] + keys:
            f = _FIELDS[key]
            if f.type == "bool":
                p.add_argument(_flag(key), dest=key, action="store_const", const=True, default=None)
            else:
                typ = {"int": int, "float": float, "str": str}[f.type]
                p.add_argument(_flag(key), dest=key, type=typ, default=None, help=f"default: {f.default!r}")
    return parser


def load_config(path) -> dict:
    try:
        raw = json.loads(Path(path).read_text())
    except OSError as exc:
        raise UsageError(f"cannot read config {path}: {exc.strerror}") from exc
    except json.JSONDecodeError as exc:
        raise UsageError(f"config {path} is not valid JSON: {exc}") from exc
    if not isinstance(raw, dict):
        raise UsageError(f"config {path} must hold a JSON object")
    unknown = sorted(set(raw) - set(_FIELDS))
    if unknown:
        raise UsageError(f"unknown config key(s) in {path}: {', '.join(unknown)}")
    return raw


def resolve(args: argparse.Namespace) -> RunConfig:
    values = {}
    if args.config:
        values.update(load_config(args.config))
    for key in _FIELDS:
        v = getattr(args, key, None)
        if v is not None:
            values[key] = v
    try:
        cfg = RunConfig(**values)
    except TypeError as exc:
        raise UsageError(str(exc)) from exc
    for key, f in _FIELDS.items():
        v = getattr(cfg, key)
        want = {"int": int, "float": (int, float), "str": str, "bool": bool}[f.type]
        if isinstance(v, bool) and f.type != "bool" or not isinstance(v, want):
            raise UsageError(f"config key {key!r} must be {f.type}, got {v!r}")
    return cfg


def _require(cfg: RunConfig, *keys):
    for k in keys:
        if not getattr(cfg, k):
            raise UsageError(f"{_flag(k)} is required")


def _net_config(cfg: RunConfig):
    from .network import NetConfig

    return NetConfig(d=cfg.d, m=cfg.m)


def _load_net(path):
    from .io import read_checkpoint
    from .network import NetConfig
    from .tensor import Tensor

    arrays, header = read_checkpoint(path)
    net = NetConfig.from_json(header["net"])
    return {k: Tensor(v) for k, v in arrays.items()}, net


def _load_samples(cfg: RunConfig):
    from .io import load_split, read_manifest

    manifest = read_manifest(cfg.manifest)
    samples = load_split(manifest, cfg.split)
    if cfg.limit > 0:
        samples = samples[: cfg.limit]
    if not samples:
        raise UsageError(f"split {cfg.split!r} of {cfg.manifest} has no entries")
    return samples


def _optimizer(cfg: RunConfig):
    from .registrar import OptimizerConfig

    return OptimizerConfig(max_evals=cfg.max_evals, restarts=cfg.restarts, objective=cfg.objective, seed=cfg.seed)


def _registrar(cfg: RunConfig):
    """``sample -> Pose or Prediction`` for the configured method."""
    from .geometry import Pose
    from .registrar import classical_register, nn_register

    if cfg.method == "classical":
        opt = _optimizer(cfg)
        return lambda s: classical_register(s.volume, s.anchor, Pose(), opt).pose
    if cfg.method == "nn":
        _require(cfg, "checkpoint")
        params, net = _load_net(cfg.checkpoint)
        return lambda s: nn_register(params, net, s.volume, s.anchor)
    if cfg.method == "oracle":
        return lambda s: s.pose_gt
    if cfg.method == "identity":
        return lambda s: Pose()
    raise UsageError(f"unknown method {cfg.method!r} (nn, classical, oracle, identity)")


def _mode_line(bits: int) -> str:
    return f"# numeric mode: {bits}-bit"


# ---------------------------------------------------------------- commands


def cmd_simulate(cfg: RunConfig) -> int:
    from .simulate import SimConfig, build_dataset, toy_config

    _require(cfg, "out")
    if cfg.volumes < 1:
        raise UsageError("--volumes must be >= 1")
    if cfg.transforms_per_volume < 1:
        raise UsageError("--transforms-per-volume must be >= 1")
    if not 0.0 <= cfg.test_fraction < 1.0:
        raise UsageError("--test-fraction must be in [0, 1)")
    kw = dict(transforms_per_volume=cfg.transforms_per_volume, test_fraction=cfg.test_fraction)
    sim = toy_config(**kw) if cfg.toy else SimConfig(**kw)
    manifest = build_dataset(cfg.volumes, cfg.out, cfg.seed, sim)
    counts = manifest.counts()
    print(f"entries {len(manifest.entries)} train {counts.get('train', 0)} test {counts.get('test', 0)}")
    return EXIT_OK


def cmd_train(cfg: RunConfig) -> int:
    from .io import write_checkpoint
    from .losses import LossWeights
    from .registrar import TrainConfig, train

    _require(cfg, "manifest", "checkpoint")
    if cfg.precision not in (32, 64):
        raise UsageError("--precision must be 32 or 64")
    samples = _load_samples(dataclasses.replace(cfg, split="train"))
    weights = LossWeights(cfg.w_trans, cfg.w_rot, cfg.w_prompt, cfg.w_reg, cfg.w_sim)
    tcfg = TrainConfig(steps=cfg.steps, batch_size=cfg.batch_size, lr=cfg.lr, seed=cfg.seed,
                       weights=weights, precision=cfg.precision)
    net = _net_config(cfg)
    result = train(samples, tcfg, net)
    write_checkpoint(cfg.checkpoint, result.params, {"net": net.to_json(), "run": dataclasses.asdict(cfg)})
    hist = Path(str(cfg.checkpoint) + ".loss.tsv")
    hist.write_text(_mode_line(cfg.precision) + "\nstep\tloss\n" + "".join(f"{i}\t{v:.8g}\n" for i, v in enumerate(result.history)))
    if result.history:
        print(f"steps {len(result.history)} first {result.history[0]:.6g} last {result.history[-1]:.6g}")
    print(f"checkpoint {cfg.checkpoint}\nhistory {hist}")
    return EXIT_OK


def cmd_register(cfg: RunConfig) -> int:
    from .geometry import Pose
    from .io import read_container, write_container
    from .resample import Frame, Volume, extract_slice
    from .simulate import Sample

    _require(cfg, "out")
    if cfg.volume or cfg.frame:
        _require(cfg, "volume", "frame")
        vol, frame = read_container(cfg.volume), read_container(cfg.frame)
        if not isinstance(vol, Volume) or not isinstance(frame, Frame):
            raise UsageError("--volume must be a 3D container and --frame a 2D container")
        truth = None
        sample = Sample(vol, frame, (frame, frame, frame), frame, Pose(), np.zeros(3))
    else:
        _require(cfg, "manifest")
        samples = _load_samples(dataclasses.replace(cfg, limit=0))
        if not 0 <= cfg.index < len(samples):
            raise UsageError(f"--index {cfg.index} out of range for {len(samples)} entries")
        sample = samples[cfg.index]
        truth = sample.pose_gt
    fn = _registrar(cfg)
    t0 = time.perf_counter()
    result = fn(sample)
    seconds = time.perf_counter() - t0
    pose = getattr(result, "pose", result)
    resampled = extract_slice(sample.volume, pose, sample.anchor.spec)
    diff = Frame(np.abs(resampled.data.astype(np.float64) - sample.anchor.data), sample.anchor.spec)
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    write_container(out / "resampled.frm", resampled)
    write_container(out / "diff.frm", diff)
    doc = {"method": cfg.method, "pose": [float(v) for v in pose.as_vector()], "seconds": seconds}
    if truth is not None:
        from .metrics import dist_err

        doc["pose_gt"] = [float(v) for v in truth.as_vector()]
        doc["dist_err"] = dist_err(pose, truth, sample.anchor.spec, sample.volume.spec)
    (out / "pose.json").write_text(json.dumps(doc, indent=1, sort_keys=True) + "\n")
    print(" ".join(f"{v:.4f}" for v in pose.as_vector()))
    return EXIT_OK


def cmd_evaluate(cfg: RunConfig) -> int:
    from .metrics import METRIC_KEYS, evaluate

    _require(cfg, "manifest")
    samples = _load_samples(cfg)
    report = evaluate(samples, _registrar(cfg))
    if cfg.out:
        out = Path(cfg.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "report.tsv").write_text(report.to_table())
        (out / "report.json").write_text(json.dumps({"method": cfg.method, **report.to_dict()}, indent=1, sort_keys=True) + "\n")
    print("\t".join(METRIC_KEYS))
    print("\t".join(f"{report.means[k]:.4f}" for k in METRIC_KEYS))
    return EXIT_OK


def cmd_gradcheck(cfg: RunConfig) -> int:
    from .gradchecks import REGISTRY, format_table, run_all

    names = [b.strip() for b in cfg.blocks.split(",") if b.strip()] or None
    if names:
        unknown = [n for n in names if n not in REGISTRY]
        if unknown:
            raise UsageError(f"unknown block(s): {', '.join(unknown)}; known: {', '.join(REGISTRY)}")
    t0 = time.perf_counter()
    results = run_all(names, seed=cfg.seed)
    print(_mode_line(64))
    print(format_table(results))
    failed = [r.name for r in results if not r.report.passed]
    print(f"{len(results) - len(failed)}/{len(results)} passed in {time.perf_counter() - t0:.1f} s")
    return EXIT_FAIL if failed else EXIT_OK


def cmd_benchmark(cfg: RunConfig) -> int:
    from . import tensor as T
    from .geometry import Pose
    from .network import NetConfig, cureg_forward, init_params
    from .registrar import classical_register
    from .simulate import SimConfig, generate_sample, make_phantom, toy_config

    if cfg.repeats < 1:
        raise UsageError("--repeats must be >= 1")
    sim = toy_config() if cfg.toy else SimConfig()
    rng = np.random.default_rng(cfg.seed)
    vol, mask = make_phantom(rng, sim.volume_spec)
    sample = generate_sample(vol, mask, rng, sim)
    with T.precision(32):
        if cfg.checkpoint:
            params, net = _load_net(cfg.checkpoint)
        else:
            net = NetConfig(d=8, m=16, hidden=16) if cfg.toy else NetConfig()
            params = init_params(net, cfg.seed, requires_grad=False)
        frames = sample.frames().astype(np.float32)
        data = np.asarray(sample.volume.data, dtype=np.float32)
        cureg_forward(params, net, data, frames)  # warm-up
        t0 = time.perf_counter()
        for _ in range(cfg.repeats):
            cureg_forward(params, net, data, frames)
        fps = cfg.repeats / (time.perf_counter() - t0)
    opt = _optimizer(cfg)
    cases = max(1, min(cfg.repeats, 3))
    t0 = time.perf_counter()
    for k in range(cases):
        s = generate_sample(vol, mask, np.random.default_rng([cfg.seed, k]), sim)
        classical_register(s.volume, s.anchor, Pose(), opt)
    spc = (time.perf_counter() - t0) / cases
    print(_mode_line(32))
    print(json.dumps({"forward_fps": fps, "classical_seconds_per_case": spc, "toy": cfg.toy}, sort_keys=True))
    return EXIT_OK


COMMANDS = {
    "simulate": cmd_simulate,
    "train": cmd_train,
    "register": cmd_register,
    "evaluate": cmd_evaluate,
    "gradcheck": cmd_gradcheck,
    "benchmark": cmd_benchmark,
}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # argparse reports usage errors with code 2
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(name)s: %(message)s")
    try:
        cfg = resolve(args)
        return COMMANDS[args.command](cfg)
    except UsageError as exc:
        print(f"f2vreg {args.command}: usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (OSError, ValueError, KeyError, RuntimeError) as exc:
        print(f"f2vreg {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_FAIL


if __name__ == "__main__":
    sys.exit(main())
