"""Command-line interface.

Exit codes: 0 success, 1 configuration/input error, 2 runtime failure.
Verbosity is controlled by the DISMOB_LOG environment variable
(DEBUG/INFO/WARNING; default INFO).  One command runs at a time per run
directory, enforced with a lock file.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys
from contextlib import contextmanager
from pathlib import Path

import numpy as np

from . import pipeline as pl
from .config import RunConfig, load_config
from .errors import (ConfigError, DismobError, InvalidInputError,
                     MissingArtifactError)

log = logging.getLogger("dismob")


class _Parser(argparse.ArgumentParser):
    """Argparse that reports usage errors through the package's exit codes."""

    def error(self, message):
        self.print_usage(sys.stderr)
        raise ConfigError(message)


def build_parser() -> _Parser:
    parser = _Parser(prog="dismob", description=__doc__)
    sub = parser.add_subparsers(dest="command", metavar="COMMAND")

    def with_config(p):
        p.add_argument("--config", required=True, help="path to the run config JSON")
        return p

    with_config(sub.add_parser("make-world", help="generate synthetic cities"))
    fit = with_config(sub.add_parser("fit-physics", help="fit the decay model"))
    fit.add_argument("--city", help="fit only this city")
    train = with_config(sub.add_parser("train", help="train the generator"))
    group = train.add_mutually_exclusive_group(required=True)
    group.add_argument("--meta", action="store_true", help="meta-train on the source cities")
    group.add_argument("--single-city", metavar="CITY", help="plain training on one city")
    with_config(sub.add_parser("adapt", help="adapt the meta model to the target city"))
    gen = with_config(sub.add_parser("generate", help="sample trajectories"))
    gen.add_argument("--city", required=True)
    gen.add_argument("--checkpoint", help="explicit checkpoint path")
    gen.add_argument("--n", type=int, help="number of users to sample")
    ev = with_config(sub.add_parser("evaluate", help="score generated trajectories"))
    ev.add_argument("--city", required=True)
    ev.add_argument("--generated", help="explicit generated-trajectory file")
    ev.add_argument("--plots", action="store_true", help="emit SVG histogram overlays")
    gc = sub.add_parser("gradcheck", help="finite-difference gradient gate")
    gc.add_argument("--coords", type=int, default=250, help="sampled coordinates")
    gc.add_argument("--threshold", type=float, default=1e-4)
    pipe = with_config(sub.add_parser("pipeline", help="full end-to-end run"))
    pipe.add_argument("--plots", action="store_true")
    return parser


@contextmanager
def _run_lock(out: Path):
    out.mkdir(parents=True, exist_ok=True)
    lock = out / ".lock"
    try:
        fd = os.open(lock, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
    except FileExistsError:
        raise DismobError(
            f"another command appears to be running in {out} (lock file {lock}); "
            "remove it if that run is dead"
        ) from None
    try:
        os.write(fd, str(os.getpid()).encode())
        os.close(fd)
        yield
    finally:
        lock.unlink(missing_ok=True)


def run_gradcheck(coords: int, threshold: float) -> int:
    """Finite-difference check of the full prompt + predictor stack in 64-bit."""
    from . import autodiff as ad
    from .conditioning import (PredictorConfig, PromptContext, build_prompt,
                               null_condition, predict_noise)
    from .core import GridSpec, Trajectory
    from .layers import grad_check
    from .model import CodecConfig, build_model, noisy_embedding_node
    from .physics import DecayParams, build_kernel
    from .synthworld import DisasterScenario, make_disaster

    grid = GridSpec(5, 5, 1.0, 48, 1, 30)
    codec_cfg = CodecConfig(spatial_width=8, dow_width=3, graph_radius_cells=1.5)
    pred_cfg = PredictorConfig(layers=2, heads=2, model_width=16, d_k=8, d_c=6,
                               prompt_mlp_widths=(8,))
    model = build_model("gradcheck", grid, codec_cfg, pred_cfg, seed=7).astype(np.float64)
    field = make_disaster(
        DisasterScenario(12, 25.0, 1.5, 4, 30, DecayParams(0.6, 0.15, 2.0)), grid
    )
    pctx = PromptContext(DecayParams(0.5, 0.1, 2.0), build_kernel(grid, 2.0), field)
    rng = np.random.Generator(np.random.Philox(key=42))
    traj = Trajectory("u0", np.arange(12), rng.integers(0, grid.n_cells, size=12))
    eps = rng.standard_normal((12, codec_cfg.spatial_width))
    e_t = 0.8 * model.emb.D[traj.locs] + 0.6 * eps

    def fragment(leaves):
        E_t = noisy_embedding_node(leaves, model, e_t, traj.slots)
        c, _ = build_prompt(leaves, model, e_t, traj.slots, pctx)
        out_c = predict_noise(leaves, model, E_t, 5, c)
        out_u = predict_noise(leaves, model, E_t, 5, null_condition(leaves, model, 12))
        return ad.add(ad.mse(out_c, ad.constant(eps)), ad.mse(out_u, ad.constant(eps)))

    err = grad_check(fragment, model.trainable_params(), eps=1e-4,
                     max_coords=coords, seed=0)
    print(f"gradcheck: max relative error {err:.3e} over {coords} coordinates "
          f"(threshold {threshold:g})")
    return 0 if err < threshold else 2


def _execute(args) -> int:
    if args.command is None:
        build_parser().print_usage(sys.stderr)
        return 1
    if args.command == "gradcheck":
        return run_gradcheck(args.coords, args.threshold)

    cfg: RunConfig = load_config(args.config)
    out = Path(cfg.out_dir)
    with _run_lock(out):
        if args.command == "make-world":
            pl.stage_world(cfg, out)
        elif args.command == "fit-physics":
            pl.stage_world(cfg, out)
            pl.stage_fit(cfg, out, [args.city] if args.city else None)
        elif args.command == "train":
            pl.stage_world(cfg, out)
            pl.stage_fit(cfg, out)
            if args.meta:
                pl.stage_train_meta(cfg, out)
            else:
                pl.stage_train_single(cfg, out, args.single_city)
        elif args.command == "adapt":
            pl.stage_adapt(cfg, out)
        elif args.command == "generate":
            ckpt = Path(args.checkpoint) if args.checkpoint else None
            if ckpt is not None and not ckpt.exists():
                raise MissingArtifactError(f"checkpoint not found: {ckpt}")
            pl.stage_generate(cfg, out, args.city, ckpt, args.n)
        elif args.command == "evaluate":
            gen = Path(args.generated) if args.generated else None
            pl.stage_evaluate(cfg, out, args.city, gen, plots=args.plots)
        elif args.command == "pipeline":
            pl.run_pipeline(cfg, out, plots=args.plots)
        else:  # pragma: no cover - argparse prevents this
            raise ConfigError(f"unknown command {args.command!r}")
        pl.write_run_manifest(cfg, out)
    return 0


def dispatch(argv: list[str]) -> int:
    logging.basicConfig(
        level=getattr(logging, os.environ.get("DISMOB_LOG", "INFO").upper(), logging.INFO),
        format="%(levelname)s %(name)s: %(message)s",
    )
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return _execute(args)
    except (ConfigError, InvalidInputError, MissingArtifactError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except DismobError as exc:
        print(f"runtime failure: {exc}", file=sys.stderr)
        return 2


def main() -> None:
    sys.exit(dispatch(sys.argv[1:]))


if __name__ == "__main__":
    main()
