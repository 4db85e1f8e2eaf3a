"""Command-line entry point.

Every subcommand is non-interactive. Settings resolve in this order, later
winning: built-in defaults, the ``--config`` JSON file, ``METAMACHINE_*``
environment variables, then explicit flags. Results go to stdout or to
``--out``; run logs start with a header record holding the resolved config
and the tool version.

Exit status is 0 on success, 1 on a validation failure (with a JSON error
record on stdout) and 2 on a usage error.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import math
import os
import sys
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from . import __version__

log = logging.getLogger("metamachine")

ENV_PREFIX = "METAMACHINE_"
COMMANDS = ("count", "sample", "encode", "decode", "pose-opt", "vae-train", "bo-run", "rollout", "amputate",
            "test-matrix", "plots")


class CLIError(Exception):
    """Validation failure reported as an error record with exit status 1."""

    def __init__(self, kind: str, message: str):
        super().__init__(message)
        self.kind = kind


@dataclass
class RunConfig:
    seed: int = 0
    workers: int = 1
    out: str | None = None
    designs: str | None = None
    models: str | None = None
    logs: str | None = None
    geometry: dict = field(default_factory=dict)
    sim: dict = field(default_factory=dict)
    task: str = "walk"
    evaluator: str = "quadratic"

    def geometry_obj(self):
        from .geometry import ModuleGeometry

        return ModuleGeometry(**self.geometry)

    def sim_obj(self):
        from .simcore import SimConfig

        return SimConfig(**self.sim)

    def to_dict(self) -> dict:
        return asdict(self)


_ENV_TYPES = {"seed": int, "workers": int, "out": str, "designs": str, "models": str, "logs": str, "task": str,
              "evaluator": str}


def resolve_config(args: argparse.Namespace, environ=None) -> RunConfig:
    environ = os.environ if environ is None else environ
    cfg = RunConfig()
    path = getattr(args, "config", None) or environ.get(ENV_PREFIX + "CONFIG")
    if path:
        try:
            data = json.loads(Path(path).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise CLIError("config", f"cannot read config {path}: {exc}") from exc
        unknown = set(data) - set(RunConfig.__dataclass_fields__)
        if unknown:
            raise CLIError("config", f"unknown config keys: {sorted(unknown)}")
        cfg = replace(cfg, **data)
    for key, typ in _ENV_TYPES.items():
        val = environ.get(ENV_PREFIX + key.upper())
        if val is not None:
            try:
                cfg = replace(cfg, **{key: typ(val)})
            except ValueError as exc:
                raise CLIError("config", f"bad value for {ENV_PREFIX}{key.upper()}: {val!r}") from exc
    for key in ("seed", "workers", "out", "evaluator"):
        val = getattr(args, key, None)
        if val is not None:
            cfg = replace(cfg, **{key: val})
    if cfg.workers < 1:
        raise CLIError("config", "workers must be at least 1")
    return cfg


# ---------------------------------------------------------------------------
# Output helpers
# ---------------------------------------------------------------------------


def _header(command: str, cfg: RunConfig, **extra) -> dict:
    return {"type": "header", "command": command, "version": __version__, "config": cfg.to_dict(), **extra}


def _out_dir(cfg: RunConfig) -> Path | None:
    if cfg.out is None:
        return None
    p = Path(cfg.out)
    p.mkdir(parents=True, exist_ok=True)
    return p


def _emit(text: str, cfg: RunConfig, filename: str) -> Path | None:
    """Write ``text`` to ``<out>/<filename>`` or to stdout."""
    d = _out_dir(cfg)
    if d is None:
        sys.stdout.write(text)
        return None
    path = d / filename
    path.write_text(text)
    return path


def _write_table(path: Path, header: list[str], rows) -> int:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        n = 0
        for r in rows:
            w.writerow(r)
            n += 1
    return n


def _read_seq_arg(text: str) -> tuple[int, ...]:
    from .morphology import parse_seq

    return parse_seq(text.replace(",", " "))


def _tree_from_arg(text: str):
    from .morphology import decode_seq

    return decode_seq(_read_seq_arg(text))


# ---------------------------------------------------------------------------
# Subcommands
# ---------------------------------------------------------------------------


def cmd_count(args, cfg: RunConfig) -> int:
    from .morphology import count_two_module, enumerate_two_module, estimate_unique

    if args.estimate is not None:
        print(repr(estimate_unique(args.estimate)))
    elif args.brute:
        print(len(enumerate_two_module()))
    else:
        print(count_two_module())
    return 0


def cmd_sample(args, cfg: RunConfig) -> int:
    from .morphology import design_record, dumps_designs, sample_trees

    trees = sample_trees(cfg.seed, args.n, n_modules=args.modules, geom=cfg.geometry_obj())
    recs = [design_record(t, provenance=f"sample modules={args.modules}", seed=cfg.seed) for t in trees]
    _emit(dumps_designs(recs), cfg, "designs.jsonl")
    return 0


def cmd_encode(args, cfg: RunConfig) -> int:
    from .morphology import encode_tree, format_seq, loads_designs, validate_tree

    text = Path(args.designs).read_text() if args.designs else sys.stdin.read()
    lines = []
    for tree in loads_designs(text):
        validate_tree(tree)
        lines.append(format_seq(encode_tree(tree)) + "\n")
    _emit("".join(lines), cfg, "sequences.txt")
    return 0


def cmd_decode(args, cfg: RunConfig) -> int:
    from .morphology import MalformedSequenceError

    try:
        seq = _read_seq_arg(args.seq)
    except MalformedSequenceError as exc:
        raise CLIError("malformed", str(exc)) from exc
    from .genome import MALFORMED, VALID, classify_seq

    res = classify_seq(seq)
    if res.verdict == MALFORMED:
        raise CLIError("malformed", res.reason)
    if res.verdict != VALID:
        raise CLIError("self-colliding", res.reason)
    print(json.dumps(res.tree.to_dict()))
    return 0


def cmd_pose_opt(args, cfg: RunConfig) -> int:
    from .poseopt import optimize_pose

    tree = _tree_from_arg(args.design)
    res = optimize_pose(tree, seed=cfg.seed, count=args.count, use_symmetry=args.symmetry, config=cfg.sim_obj())
    body = json.loads(res.to_json())
    body["header"] = _header("pose-opt", cfg, count=args.count)
    _emit(json.dumps(body) + "\n", cfg, "pose.json")
    if res.best_index is None:
        log.warning("no admissible pose")
    return 0


def cmd_vae_train(args, cfg: RunConfig) -> int:
    from .genome import AutoencoderSpec, design_dataset, two_module_space, vae_train

    if args.two_module:
        data = two_module_space()
    elif cfg.designs:
        from .morphology import encode_tree, loads_designs

        data = np.array([encode_tree(t) for t in loads_designs(Path(cfg.designs).read_text())])
    else:
        data = design_dataset(cfg.seed, args.samples)
    spec = AutoencoderSpec(epochs=args.epochs, batch_size=args.batch, beta=args.beta, learning_rate=args.lr)
    res = vae_train(data, spec, seed=cfg.seed)
    res.model.meta["header"] = _header("vae-train", cfg)
    d = _out_dir(cfg) or Path(".")
    res.model.save(d / "vae.bin")
    print(json.dumps({"model": str(d / "vae.bin"), "final_loss": res.loss_curve[-1], "n_train": len(data)}))
    return 0


def cmd_bo_run(args, cfg: RunConfig) -> int:
    from .bayesopt import BOConfig, DesignEvaluator, NegSquaredNorm, bo_run

    lo, hi = args.latent_box
    if not lo < hi:
        raise CLIError("config", "latent box must satisfy low < high")
    if cfg.evaluator == "quadratic":
        evaluator = NegSquaredNorm()
    elif cfg.evaluator == "design":
        if not cfg.models:
            raise CLIError("config", "the design evaluator needs a trained model (models path)")
        from .genome import VAE

        evaluator = DesignEvaluator(VAE.load(cfg.models), pose_count=args.pose_count, seed=cfg.seed)
    else:
        raise CLIError("config", f"unknown evaluator {cfg.evaluator!r}")
    bcfg = BOConfig(box=(lo, hi), penalize=not args.no_penalize)
    run = bo_run(evaluator, args.budget, cfg.workers, cfg.seed, bcfg)
    header = _header("bo-run", cfg, budget=args.budget, bo=bcfg.to_dict())
    text = json.dumps(header) + "\n" + "".join(line + "\n" for line in run.log_lines)
    _emit(text, cfg, "bo_log.jsonl")
    if cfg.out is not None:
        print(json.dumps({"best": run.best.fitness if run.best else None,
                          "best_z": run.best.z.tolist() if run.best else None}))
    return 0


def cmd_rollout(args, cfg: RunConfig) -> int:
    from .poseopt import make_simulator
    from .simcore import rollout_openloop, settle

    tree = _tree_from_arg(args.design)
    sim = make_simulator(tree, cfg.sim_obj(), cfg.geometry_obj())
    dt = sim.config.control_dt
    steps = int(round(args.seconds / dt))
    q0 = np.full((1, tree.n_modules), args.base)
    quat = np.array([[1.0, 0.0, 0.0, 0.0]])
    st = settle(sim, sim.initial_state(quat, q0), targets=q0).state
    ro = rollout_openloop(sim, st, q0, amplitude=args.amplitude, freq=args.freq, steps=steps, dt=dt)
    header = _header("rollout", cfg, design=args.design, seconds=args.seconds, amplitude=args.amplitude,
                     freq=args.freq, dt=dt)
    rows = [json.dumps({"type": "com", "step": k + 1, "t": (k + 1) * dt, "com": ro.com[k + 1, 0].tolist()})
            for k in range(steps)]
    _emit(json.dumps(header) + "\n" + "".join(r + "\n" for r in rows), cfg, "rollout_log.jsonl")
    return 0


def _parse_cuts(text: str):
    from .amputation import SITE_MODULE, CutPoint

    cuts = []
    for item in filter(None, (s.strip() for s in text.split(","))):
        site, _, frac = item.partition(":")
        if site not in SITE_MODULE:
            raise CLIError("config", f"unknown limb {site!r}; expected one of {sorted(SITE_MODULE)}")
        try:
            cuts.append(CutPoint(SITE_MODULE[site], float(frac or 0.0)))
        except ValueError as exc:
            raise CLIError("config", str(exc)) from exc
    return cuts


def cmd_amputate(args, cfg: RunConfig) -> int:
    from .amputation import QUADRUPED, apply_amputation, remnant_collides
    from .morphology import encode_tree, format_seq

    rem = apply_amputation(QUADRUPED, _parse_cuts(args.cuts), cfg.geometry_obj())
    print(json.dumps({
        "design": format_seq(encode_tree(rem.tree)),
        "kept": list(rem.kept),
        "stubs": [{"module": s.module, "half": s.half, "length": length, "mass": s.mass}
                  for s, length in zip(rem.stubs, rem.stub_lengths())],
        "self_colliding": remnant_collides(rem),
    }))
    return 0


def cmd_test_matrix(args, cfg: RunConfig) -> int:
    from .amputation import SCENARIO_CLASSES, MatrixConfig, dumps_manifest, test_matrix, trial_counts

    classes = tuple(args.classes.split(",")) if args.classes else tuple(SCENARIO_CLASSES)
    bad = [c for c in classes if c not in SCENARIO_CLASSES]
    if bad:
        raise CLIError("config", f"unknown scenario classes {bad}")
    trials = test_matrix(MatrixConfig(seed=cfg.seed, classes=classes))
    if cfg.out is not None:
        _emit(json.dumps(_header("test-matrix", cfg)) + "\n" + dumps_manifest(trials), cfg, "manifest.jsonl")
    print(json.dumps({"trials": len(trials), "per_class": trial_counts(trials)}))
    return 0


# ---------------------------------------------------------------------------
# Plot-ready tables
# ---------------------------------------------------------------------------


def read_log(path) -> tuple[dict | None, list[dict], bool]:
    """Header, records and whether any line failed to parse."""
    header, records, truncated = None, [], False
    for line in Path(path).read_text().splitlines():
        if not line.strip():
            continue
        try:
            rec = json.loads(line)
        except json.JSONDecodeError:
            truncated = True
            break
        if rec.get("type") == "header":
            header = rec
        else:
            records.append(rec)
    return header, records, truncated


def latent_slice(records: list[dict], dims=(0, 1), n: int = 41, box=(-3.0, 3.0), seed: int = 0):
    """Posterior-mean grid over two latent axes through the best point."""
    from .bayesopt import fit_gp

    pts = [r for r in records if r.get("fitness") is not None]
    if len(pts) < 2:
        return []
    X = np.array([r["z"] for r in pts], dtype=float)
    y = np.array([r["fitness"] for r in pts], dtype=float)
    model = fit_gp(X, y, seed=seed, n_restarts=1)
    centre = X[int(np.argmax(y))]
    g = np.linspace(box[0], box[1], n)
    A, B = np.meshgrid(g, g, indexing="ij")
    Z = np.repeat(centre[None], A.size, axis=0)
    Z[:, dims[0]] = A.ravel()
    Z[:, dims[1]] = B.ravel()
    mean, std = model.predict(Z)
    return [(float(a), float(b), float(m), float(s)) for a, b, m, s in zip(A.ravel(), B.ravel(), mean, std)]


def cmd_plots(args, cfg: RunConfig) -> int:
    header, records, truncated = read_log(args.log)
    if truncated:
        log.warning("log %s is truncated; emitting the records read so far", args.log)
    if not records:
        log.warning("log %s has no records; emitting empty tables", args.log)
    d = _out_dir(cfg) or Path(".")
    bo = [r for r in records if "status" in r]
    com = [r for r in records if r.get("type") == "com"]
    best = -math.inf
    rows = []
    for i, r in enumerate(bo):
        f = r["fitness"] if r["status"] == "done" else None
        if f is not None:
            best = max(best, f)
        rows.append((i, r["index"], r["status"], "" if f is None else f, best))
    counts = {"best_so_far": _write_table(d / "best_so_far.csv", ["report", "index", "status", "fitness", "best"],
                                           rows)}
    counts["com_trace"] = _write_table(d / "com_trace.csv", ["step", "t", "x", "y", "z"],
                                       ((r["step"], r["t"], *r["com"]) for r in com))
    box = tuple(header["bo"]["box"]) if header and "bo" in header else (-3.0, 3.0)
    counts["latent_slice"] = _write_table(d / "latent_slice.csv", ["z0", "z1", "mean", "std"],
                                          latent_slice(bo, box=box) if bo else [])
    print(json.dumps({"tables": counts, "truncated": truncated}))
    return 0


HANDLERS = {
    "count": cmd_count, "sample": cmd_sample, "encode": cmd_encode, "decode": cmd_decode,
    "pose-opt": cmd_pose_opt, "vae-train": cmd_vae_train, "bo-run": cmd_bo_run, "rollout": cmd_rollout,
    "amputate": cmd_amputate, "test-matrix": cmd_test_matrix, "plots": cmd_plots,
}


def _box(text: str) -> tuple[float, float]:
    try:
        lo, hi = (float(x) for x in text.split(","))
    except ValueError as exc:
        raise argparse.ArgumentTypeError("expected LOW,HIGH") from exc
    return lo, hi


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=None, help="base seed (env METAMACHINE_SEED)")
    common.add_argument("--config", default=None, help="JSON run config (env METAMACHINE_CONFIG)")
    common.add_argument("--workers", type=int, default=None, help="parallelism cap (env METAMACHINE_WORKERS)")
    common.add_argument("--out", default=None, help="output directory (env METAMACHINE_OUT)")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="metamachine", description="Modular legged robot design toolkit.")
    p.add_argument("--version", action="version", version=f"metamachine {__version__}")
    sub = p.add_subparsers(dest="command", required=True, metavar="COMMAND")

    s = sub.add_parser("count", parents=[common], help="count designs")
    s.add_argument("--two-module", action="store_true", help="closed-form two-module count (default)")
    s.add_argument("--brute", action="store_true", help="enumerate two-module designs instead")
    s.add_argument("--estimate", type=int, metavar="N", help="approximate count of unique N-module designs")

    s = sub.add_parser("sample", parents=[common], help="sample random valid designs")
    s.add_argument("--n", type=int, required=True)
    s.add_argument("--modules", default="2..5", help='module count, e.g. "3" or "2..5"')

    s = sub.add_parser("encode", parents=[common], help="design file to sequences")
    s.add_argument("designs", nargs="?", help="design JSONL file (default stdin)")

    s = sub.add_parser("decode", parents=[common], help="sequence to design")
    s.add_argument("seq", help="16 integers separated by spaces or commas")

    s = sub.add_parser("pose-opt", parents=[common], help="search initial poses")
    s.add_argument("--design", required=True)
    s.add_argument("--count", type=int, default=4096)
    s.add_argument("--symmetry", action="store_true")

    s = sub.add_parser("vae-train", parents=[common], help="train the design autoencoder")
    s.add_argument("--two-module", action="store_true", help="train on the ordered two-module space")
    s.add_argument("--samples", type=int, default=10_000)
    s.add_argument("--epochs", type=int, default=40)
    s.add_argument("--batch", type=int, default=128)
    s.add_argument("--beta", type=float, default=1.0)
    s.add_argument("--lr", type=float, default=1e-3)

    s = sub.add_parser("bo-run", parents=[common], help="asynchronous Bayesian optimization")
    s.add_argument("--budget", type=int, default=200)
    s.add_argument("--latent-box", type=_box, default=(-3.0, 3.0), metavar="LOW,HIGH")
    s.add_argument("--evaluator", choices=("quadratic", "design"), default=None)
    s.add_argument("--pose-count", type=int, default=64)
    s.add_argument("--no-penalize", action="store_true")

    s = sub.add_parser("rollout", parents=[common], help="open-loop sine rollout with a CoM trace")
    s.add_argument("--design", required=True)
    s.add_argument("--seconds", type=float, default=5.0)
    s.add_argument("--amplitude", type=float, default=1.0)
    s.add_argument("--freq", type=float, default=1.0)
    s.add_argument("--base", type=float, default=0.0)

    s = sub.add_parser("amputate", parents=[common], help="reduce the quadruped")
    s.add_argument("--cuts", default="", help='e.g. "front-right:0.5,back-left:0"')

    s = sub.add_parser("test-matrix", parents=[common], help="enumerate amputation test trials")
    s.add_argument("--classes", default=None, help="comma-separated scenario classes")

    s = sub.add_parser("plots", parents=[common], help="plot-ready tables from a run log")
    s.add_argument("log")
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)  # exits with status 2 on usage errors
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    from .morphology import DesignError

    try:
        cfg = resolve_config(args)
        if args.command == "sample" and args.n < 0:
            raise CLIError("config", "--n must be non-negative")
        return HANDLERS[args.command](args, cfg)
    except CLIError as exc:
        err = {"error": exc.kind, "message": str(exc), "command": args.command}
    except DesignError as exc:
        kind = "malformed" if type(exc).__name__ == "MalformedSequenceError" else "invalid-design"
        err = {"error": kind, "message": str(exc), "command": args.command}
    except (OSError, ValueError) as exc:
        err = {"error": "invalid-input", "message": str(exc), "command": args.command}
    print(json.dumps(err))
    return 1


if __name__ == "__main__":
    sys.exit(main())
