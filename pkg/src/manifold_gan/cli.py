"""``manifold-gan`` command line: train, estimate, interpolate, report.

Exit codes: 0 success, 2 invalid configuration or checkpoint mismatch,
3 training divergence.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .autodiff import Tensor
from .config import RunConfig, load_config, serialize_config
from .data import load_dataset
from .errors import ConfigError, DivergenceError, FormatError
from .losses import laplacian_norm_mc, manifold_penalty_stochastic, random_directions
from .models import DiscriminatorConfig, GeneratorConfig, latent_interpolate, load_checkpoint, sample_latent
from .reporting import (append_results, collect_report, image_grid, render_report, to_pixels,
                        write_metrics_csv, write_pnm)
from .training import GANTrainer, TrainResult, model_configs, run_experiment

OUTPUT_ROOT_ENV = "MANIFOLD_GAN_OUTPUT_ROOT"
EXIT_CONFIG = 2
EXIT_DIVERGED = 3

logger = logging.getLogger("manifold_gan")


def method_label(cfg: RunConfig) -> str:
    if cfg.run.mode == "two-stage":
        return f"two-stage classifier (λ={cfg.loss.lambda_:g}, ε={cfg.loss.epsilon:g})"
    if cfg.run.mode == "baseline" or cfg.loss.lambda_ == 0:
        return "feature-matching GAN"
    return f"manifold-reg GAN (λ={cfg.loss.lambda_:g}, ε={cfg.loss.epsilon:g})"


def output_root(cfg: RunConfig, override: str | None = None) -> Path:
    return Path(override or os.environ.get(OUTPUT_ROOT_ENV) or cfg.run.output_dir)


# -- train ---------------------------------------------------------------------------

def cmd_train(args) -> int:
    cfg = load_config(args.config)
    if args.seed is not None:
        cfg = cfg.replace(**{"run.seeds": (args.seed,)})
    run_dir = output_root(cfg, args.out) / cfg.run.name
    run_dir.mkdir(parents=True, exist_ok=True)
    (run_dir / "config.echo").write_text(serialize_config(cfg, mark_defaults=True))
    split = load_dataset(cfg)

    def on_result(tag: str, res: TrainResult) -> None:
        write_metrics_csv(run_dir / f"metrics-{tag}.csv", res.history)
        if isinstance(res.trainer, GANTrainer):
            res.trainer.save(run_dir / f"{tag}.ckpt")
        logger.info("%s: test error %.4f", tag, res.test_error)

    result = run_experiment(cfg, split, on_result=on_result)
    results = run_dir / "results.csv"
    results.unlink(missing_ok=True)
    label = method_label(cfg)
    append_results(results, [{"method": label, "dataset": split.source,
                              "n_labeled": len(split.x_labeled), "seed": r.seed,
                              "test_error": r.test_error} for r in result.runs])
    (run_dir / "report.md").write_text(render_report(collect_report(run_dir)))
    print(f"{label}: {100 * result.mean_error:.2f} ± {100 * result.std_error:.2f}% "
          f"over {len(result.runs)} seed(s), {result.epochs} epochs")
    return 0


# -- estimate ------------------------------------------------------------------------

@dataclass
class EstimateReport:
    mc_mean: float
    mc_stderr: float
    stochastic: float
    ratio: float
    n: int

    def render(self) -> str:
        return (f"laplacian norm (MC, n={self.n}): {self.mc_mean:.6g} ± {self.mc_stderr:.3g}\n"
                f"stochastic finite differences x d/eps^2: {self.stochastic:.6g}\n"
                f"ratio stochastic/MC: {self.ratio:.4f}")


def estimate_smoothness(f, g, d: int, n: int, epsilon: float, seed: int,
                        method: str = "reverse") -> EstimateReport:
    """Compare the Monte-Carlo Jacobian norm with the rescaled stochastic penalty.

    Both use the same latent draws; the stochastic side adds one random unit
    direction per latent.
    """
    rng = np.random.default_rng(seed)
    z = sample_latent(n, d, rng).z
    mc = laplacian_norm_mc(f, g, n, d, rng, method=method, latents=z)
    deltas = random_directions(n, d, rng)
    pen = manifold_penalty_stochastic(lambda zz: f(g(Tensor(zz))), z, epsilon, deltas=deltas)
    stoch = float(pen.values) * d / epsilon ** 2
    ratio = stoch / mc.mean if mc.mean != 0 else (1.0 if stoch == 0 else float("inf"))
    return EstimateReport(mc.mean, mc.stderr, stoch, ratio, n)


def _check_matches(cfg: RunConfig, meta: dict, path) -> None:
    disc = DiscriminatorConfig.from_dict(meta["discriminator"])
    gen_cfg, disc_cfg = model_configs(cfg, disc.image_shape)
    if (gen_cfg.to_dict() != GeneratorConfig.from_dict(meta["generator"]).to_dict()
            or disc_cfg.to_dict() != disc.to_dict()):
        raise ConfigError(f"checkpoint {path} was trained with a different model than the config "
                          "describes", field="model.profile")


def _load_trainer(path, cfg: RunConfig | None = None) -> GANTrainer:
    try:
        _, meta = load_checkpoint(path)
    except FileNotFoundError:
        raise ConfigError(f"checkpoint {path} does not exist", field=None)
    except FormatError as exc:
        raise ConfigError(str(exc), field=None) from exc
    if cfg is not None:
        _check_matches(cfg, meta, path)
    return GANTrainer.from_checkpoint(path, cfg)


def cmd_estimate(args) -> int:
    cfg = load_config(args.config)
    trainer = _load_trainer(args.checkpoint, cfg)
    gen, disc = trainer.generator, trainer.discriminator
    params = trainer.ema.shadow.constants()

    def f(x):
        return disc.forward(x, params, train=False)[0]

    def g(z):
        return gen.forward(z, None, train=False)[0]

    seed = cfg.run.seeds[0] if args.seed is None else args.seed
    report = estimate_smoothness(f, g, gen.latent_dim, args.n, cfg.loss.epsilon, seed)
    print(report.render())
    return 0


# -- interpolate --------------------------------------------------------------------

def interpolation_grid(generator, steps: int, seed: int) -> np.ndarray:
    """Pixel grid ``[c, h, steps * w]`` along the segment between two random latents."""
    rng = np.random.default_rng(seed)
    ends = sample_latent(2, generator.latent_dim, rng).z
    path = latent_interpolate(ends[0], ends[1], steps).z
    return to_pixels(image_grid(generator.generate(path)))


def cmd_interpolate(args) -> int:
    trainer = _load_trainer(args.checkpoint)
    pixels = interpolation_grid(trainer.generator, args.steps, 0 if args.seed is None else args.seed)
    out = Path(args.out)
    if pixels.shape[0] not in (1, 3):
        pixels = pixels.reshape(1, -1, pixels.shape[-1])
    write_pnm(out, pixels)
    print(f"wrote {out} ({pixels.shape[2]}x{pixels.shape[1]})")
    return 0


# -- report --------------------------------------------------------------------------

def cmd_report(args) -> int:
    rows = collect_report(args.metrics_dir)
    if not rows:
        raise ConfigError(f"no results.csv under {args.metrics_dir}", field=None)
    text = render_report(rows)
    if args.out:
        Path(args.out).write_text(text)
    print(text, end="")
    return 0


# -- entry point ------------------------------------------------------------------------

def _steps(value: str) -> int:
    n = int(value)
    if n < 2:
        raise argparse.ArgumentTypeError("--steps must be >= 2")
    return n


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="manifold-gan",
                                description="Manifold-regularised semi-supervised GAN.")
    p.add_argument("-v", "--verbose", action="store_true", help="log per-epoch metrics")
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="run the early-stopping protocol over the configured seeds")
    t.add_argument("--config", required=True)
    t.add_argument("--seed", type=int, help="train this single seed instead of run.seeds")
    t.add_argument("--out", help=f"output root (overrides ${OUTPUT_ROOT_ENV} and run.output_dir)")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("estimate", help="Laplacian-norm estimate of a trained checkpoint")
    e.add_argument("--config", required=True)
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--seed", type=int)
    e.add_argument("--n", type=int, default=1000, help="Monte-Carlo sample size")
    e.set_defaults(func=cmd_estimate)

    i = sub.add_parser("interpolate", help="image grid along a latent segment")
    i.add_argument("--checkpoint", required=True)
    i.add_argument("--steps", type=_steps, default=10)
    i.add_argument("--seed", type=int)
    i.add_argument("--out", required=True, help="output .pgm/.ppm path")
    i.set_defaults(func=cmd_interpolate)

    r = sub.add_parser("report", help="markdown table over results.csv files")
    r.add_argument("metrics_dir")
    r.add_argument("--out", help="also write the table here")
    r.set_defaults(func=cmd_report)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        where = f" [{exc.field}]" if exc.field else ""
        print(f"error{where}: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except DivergenceError as exc:
        print(f"diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED


if __name__ == "__main__":
    sys.exit(main())
