"""Optimisation loop for the semi-supervised GAN.

One training step updates the discriminator on

    supervised + unsupervised + lambda * manifold penalty

with generator outputs treated as fixed inputs, then updates the generator
on the feature-matching loss with the discriminator held fixed.  Inference
uses an exponential moving average of the discriminator parameters.

All randomness is keyed by ``(seed, epoch, step)``, so a run resumed from a
checkpoint at an epoch boundary replays exactly the same stream.  The
penalty draws from its own stream, which keeps a ``lambda = 0`` joint run
step-for-step identical to the plain feature-matching GAN.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Mapping, Sequence

import numpy as np

from .autodiff import Tape, Tensor
from .config import RunConfig, serialize_config
from .data import SplitDataset, batches, labeled_batches
from .errors import ConfigError, ContractViolation, DivergenceError
from .losses import (LossBreakdown, discriminator_loss, feature_matching_loss,
                     manifold_penalty_stochastic, random_directions, supervised_loss)
from .models import (Discriminator, DiscriminatorConfig, Generator, GeneratorConfig, ModelPair,
                     conv_discriminator, dcgan_generator, load_checkpoint,
                     load_model_tensors, mlp_discriminator, mlp_generator, model_tensors,
                     sample_latent, save_checkpoint)
from .params import ParameterStore

logger = logging.getLogger(__name__)

CSV_FIELDS = ("epoch", "lr", "supervised", "unsup-real", "unsup-fake", "penalty",
              "gen-loss", "val-error", "ema-val-error")


# -- optimiser, schedule, EMA ---------------------------------------------------

@dataclass
class AdamState:
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    t: int = 0
    beta1: float = 0.5
    beta2: float = 0.999
    eps: float = 1e-8


def adam_step(params: ParameterStore, grads: Mapping[str, np.ndarray], state: AdamState,
              lr: float) -> tuple[ParameterStore, AdamState]:
    """One bias-corrected Adam update, in place."""
    for name, g in grads.items():
        if g.shape != params[name].shape:
            raise ContractViolation(f"gradient for {name} has shape {g.shape}, "
                                    f"parameter has {params[name].shape}")
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.t
    c2 = 1.0 - b2 ** state.t
    for name, g in grads.items():
        p = params[name]
        m = state.m.get(name)
        v = state.v.get(name)
        if m is None:
            m = np.zeros_like(p)
            v = np.zeros_like(p)
        m = b1 * m + (1.0 - b1) * g
        v = b2 * v + (1.0 - b2) * (g * g)
        state.m[name], state.v[name] = m, v
        step = lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
        params[name] = (p - step).astype(p.dtype)
    return params, state


@dataclass(frozen=True)
class Schedule:
    total: int
    decay_start: int
    base_rate: float

    def __post_init__(self):
        if not 0 <= self.decay_start <= self.total:
            raise ContractViolation("decay start must lie in [0, total]")


def lr_at(schedule: Schedule, epoch: int) -> float:
    """Constant rate, then linear decay reaching 0 at ``total``."""
    if not 0 <= epoch <= schedule.total:
        raise ContractViolation(f"epoch {epoch} outside [0, {schedule.total}]")
    if epoch < schedule.decay_start:
        return schedule.base_rate
    span = schedule.total - schedule.decay_start
    if span == 0:
        return 0.0
    return schedule.base_rate * (1.0 - (epoch - schedule.decay_start) / span)


@dataclass
class EmaState:
    shadow: ParameterStore
    decay: float = 0.999


def ema_update(ema: EmaState, params: ParameterStore, decay: float | None = None) -> EmaState:
    beta = ema.decay if decay is None else decay
    for name, value in params.items():
        if ema.shadow[name].shape != value.shape:
            raise ContractViolation(f"EMA shadow for {name} has the wrong shape")
        ema.shadow[name] = (beta * ema.shadow[name] + (1.0 - beta) * value).astype(value.dtype)
    return ema


# -- model construction from a run config ------------------------------------------

def model_configs(cfg: RunConfig, input_shape: Sequence[int]) -> tuple[GeneratorConfig, DiscriminatorConfig]:
    m = cfg.model
    input_shape = tuple(input_shape)
    if m.profile == "mlp":
        dim = int(np.prod(input_shape))
        disc = mlp_discriminator(dim, m.hidden, m.depth, m.num_classes, m.mlp_dropout, m.lrelu_slope)
        gen = mlp_generator(dim, m.latent_dim, m.hidden, m.depth)
        return gen, disc
    if len(input_shape) != 3:
        raise ConfigError(f"model.profile {m.profile} needs [c, h, w] images, got {input_shape}",
                          field="model.profile")
    base, top = (96, 192) if m.profile == "conv-large" else (64, 128)
    disc = conv_discriminator(base, top, m.width, m.num_classes, input_shape, m.lrelu_slope)
    gen = dcgan_generator(m.width, m.latent_dim, input_shape, m.generator_bn_weight_norm)
    return gen, disc


def _dtype(cfg: RunConfig):
    return np.float32 if cfg.model.dtype == "float32" else np.float64


def build_from_config(cfg: RunConfig, input_shape: Sequence[int], seed: int) -> ModelPair:
    gen_cfg, disc_cfg = model_configs(cfg, input_shape)
    return _build(gen_cfg, disc_cfg, cfg, seed)


def _build(gen_cfg, disc_cfg, cfg: RunConfig, seed: int) -> ModelPair:
    dtype = _dtype(cfg)
    gen = Generator(gen_cfg, seed=seed, dtype=dtype, bn_momentum=cfg.model.bn_momentum,
                    init_sigma=cfg.model.init_sigma)
    disc = Discriminator(disc_cfg, seed=seed, dtype=dtype, init_sigma=cfg.model.init_sigma)
    if gen.output_shape != disc.input_shape:
        raise ConfigError("generator output does not match discriminator input", field="model.profile")
    return ModelPair(gen, disc)


# -- trainer ---------------------------------------------------------------------

def _check_finite(values: dict, snapshot: dict) -> None:
    for name, value in values.items():
        if not np.isfinite(value):
            raise DivergenceError(f"non-finite {name} at epoch {snapshot.get('epoch')}, "
                                  f"step {snapshot.get('step')}", snapshot)


def _sub_rng(rng: np.random.Generator) -> np.random.Generator:
    return np.random.default_rng(rng.integers(0, 2**63 - 1))


class GANTrainer:
    """Alternating discriminator / generator optimisation with EMA inference.

    ``mode`` is ``"joint"`` (manifold-regularised) or ``"baseline"`` (plain
    feature-matching GAN, penalty never evaluated).
    """

    def __init__(self, config: RunConfig, models: ModelPair, seed: int, mode: str | None = None):
        self.config = config
        self.models = models
        self.seed = int(seed)
        self.mode = mode or config.run.mode
        if self.mode not in ("joint", "baseline"):
            raise ContractViolation(f"GANTrainer mode must be joint or baseline, got {self.mode!r}")
        o = config.optim
        self.d_opt = AdamState(beta1=o.beta1, beta2=o.beta2, eps=o.eps)
        self.g_opt = AdamState(beta1=o.beta1, beta2=o.beta2, eps=o.eps)
        self.ema = EmaState(models.discriminator.params.copy(), config.train.ema_decay)
        self.schedule = Schedule(config.train.epochs, config.train.decay_start, o.lr)
        self.epoch = 0
        self.history: list[dict] = []

    @property
    def generator(self) -> Generator:
        return self.models.generator

    @property
    def discriminator(self) -> Discriminator:
        return self.models.discriminator

    # one step ---------------------------------------------------------------

    def train_step(self, x_lab, y_lab, x_unl, rng: np.random.Generator,
                   penalty_rng: np.random.Generator, lr: float,
                   snapshot: dict | None = None) -> tuple[LossBreakdown, float]:
        gen, disc = self.generator, self.discriminator
        dtype = disc.dtype
        lam, eps = self.config.loss.lambda_, self.config.loss.epsilon
        snapshot = dict(snapshot or {})
        x_lab = Tensor(np.asarray(x_lab, dtype=dtype))
        x_unl = Tensor(np.asarray(x_unl, dtype=dtype))
        n = x_unl.shape[0]

        # discriminator update; generator samples enter as constants
        tape = Tape()
        dp = disc.params.bind(tape)
        z_fake = sample_latent(n, gen.latent_dim, rng).z
        x_fake = Tensor(gen.generate(z_fake, train=True))
        l_lab, _ = disc.forward(x_lab, dp, train=True, rng=_sub_rng(rng))
        l_unl, _ = disc.forward(x_unl, dp, train=True, rng=_sub_rng(rng))
        l_fake, _ = disc.forward(x_fake, dp, train=True, rng=_sub_rng(rng))
        penalty = None
        if self.mode == "joint":
            penalty = self._penalty(dp if lam > 0 else None, penalty_rng, eps)
        total, breakdown = discriminator_loss(l_lab, y_lab, l_unl, l_fake, penalty, lam)
        snapshot["breakdown"] = breakdown.as_dict()
        _check_finite({"discriminator loss": breakdown.total}, snapshot)
        grads = ParameterStore.gradients(tape, total, dp)
        adam_step(disc.params, grads, self.d_opt, lr)
        ema_update(self.ema, disc.params)

        # generator update; discriminator parameters enter as constants
        tape = Tape()
        gp = gen.params.bind(tape)
        z = sample_latent(n, gen.latent_dim, rng).z
        x_gen, _ = gen.forward(Tensor(z.astype(dtype)), gp, train=True, update_stats=True)
        _, h_fake = disc.forward(x_gen, None, train=True, rng=_sub_rng(rng))
        _, h_real = disc.forward(x_unl, None, train=True, rng=_sub_rng(rng))
        g_loss = feature_matching_loss(h_real, h_fake)
        g_value = float(g_loss.values)
        _check_finite({"generator loss": g_value}, snapshot)
        adam_step(gen.params, ParameterStore.gradients(tape, g_loss, gp), self.g_opt, lr)
        return breakdown, g_value

    def _penalty(self, dp, rng: np.random.Generator, eps: float) -> Tensor:
        """Stochastic penalty on fresh latents; both passes share one dropout mask."""
        gen, disc = self.generator, self.discriminator
        k = self.config.mc_samples
        z = sample_latent(k, gen.latent_dim, rng).z
        deltas = random_directions(k, gen.latent_dim, rng)
        mask_seed = int(rng.integers(0, 2**63 - 1))

        def fg(latent):
            images = gen.generate(latent)
            logits, _ = disc.forward(Tensor(images), dp, train=True,
                                     rng=np.random.default_rng(mask_seed))
            return logits

        return manifold_penalty_stochastic(fg, z, eps, deltas=deltas)

    # epochs -------------------------------------------------------------------

    def train_epoch(self, split: SplitDataset) -> dict:
        bs = self.config.train.batch_size
        n_unl = len(split.x_unlabeled)
        n_batches = n_unl // bs
        if n_batches == 0:
            raise ContractViolation(f"unlabeled pool of {n_unl} is smaller than one batch of {bs}")
        lr = lr_at(self.schedule, min(self.epoch, self.schedule.total))
        lab = labeled_batches(len(split.x_labeled), bs, n_batches, self.seed, self.epoch)
        sums = np.zeros(5)
        for step, idx in enumerate(batches(n_unl, bs, self.seed, self.epoch)):
            li = lab[step]
            rng = np.random.default_rng([self.seed, self.epoch, step, 2])
            prng = np.random.default_rng([self.seed, self.epoch, step, 3])
            br, g = self.train_step(split.x_labeled[li], split.y_labeled[li], split.x_unlabeled[idx],
                                    rng, prng, lr, {"epoch": self.epoch + 1, "step": step})
            sums += (br.supervised, br.unsup_real, br.unsup_fake, br.manifold_penalty, g)
        means = sums / n_batches
        self.epoch += 1
        row = {"epoch": self.epoch, "lr": lr, "supervised": means[0], "unsup-real": means[1],
               "unsup-fake": means[2], "penalty": means[3], "gen-loss": means[4],
               "val-error": float("nan"), "ema-val-error": float("nan")}
        if len(split.x_validation):
            row["val-error"] = self.error_rate(split.x_validation, split.y_validation, use_ema=False)
            row["ema-val-error"] = self.error_rate(split.x_validation, split.y_validation)
        self.history.append(row)
        return row

    def fit(self, split: SplitDataset, epochs: int, checkpoint_path=None,
            on_epoch: Callable[[dict], None] | None = None) -> list[dict]:
        while self.epoch < epochs:
            row = self.train_epoch(split)
            logger.info("epoch %d: %s", row["epoch"],
                        " ".join(f"{k}={row[k]:.4g}" for k in CSV_FIELDS[1:]))
            if on_epoch:
                on_epoch(row)
            if checkpoint_path is not None:
                self.save(checkpoint_path)
        return self.history

    # inference ------------------------------------------------------------------

    def logits(self, x, use_ema: bool = True, chunk: int = 500) -> np.ndarray:
        disc = self.discriminator
        params = (self.ema.shadow if use_ema else disc.params).constants()
        x = np.asarray(x, dtype=disc.dtype)
        out = [disc.forward(Tensor(x[i:i + chunk]), params, train=False)[0].values
               for i in range(0, len(x), chunk)]
        return np.concatenate(out) if out else np.zeros((0, disc.num_classes))

    def error_rate(self, x, y, use_ema: bool = True) -> float:
        if len(x) == 0:
            return float("nan")
        return float(np.mean(np.argmax(self.logits(x, use_ema), axis=1) != np.asarray(y)))

    # persistence ------------------------------------------------------------------

    def state_tensors(self) -> dict[str, np.ndarray]:
        out = model_tensors(self.models)
        for tag, opt in (("disc", self.d_opt), ("gen", self.g_opt)):
            for name in opt.m:
                out[f"adam:{tag}:m:{name}"] = opt.m[name]
                out[f"adam:{tag}:v:{name}"] = opt.v[name]
        for name, value in self.ema.shadow.items():
            out["ema:" + name] = value
        return out

    def meta(self) -> dict:
        return {"seed": self.seed, "epoch": self.epoch, "mode": self.mode,
                "adam_t": {"disc": self.d_opt.t, "gen": self.g_opt.t},
                "run_config": serialize_config(self.config),
                "generator": self.generator.config.to_dict(),
                "discriminator": self.discriminator.config.to_dict(),
                "history": self.history}

    def save(self, path) -> None:
        save_checkpoint(path, self.state_tensors(), self.meta())

    def load_state(self, tensors: Mapping[str, np.ndarray], meta: Mapping) -> None:
        load_model_tensors(self.models, tensors)
        dtype = self.discriminator.dtype
        for tag, opt in (("disc", self.d_opt), ("gen", self.g_opt)):
            opt.t = int(meta["adam_t"][tag])
            prefix = f"adam:{tag}:m:"
            for key in tensors:
                if key.startswith(prefix):
                    name = key[len(prefix):]
                    opt.m[name] = tensors[key].astype(dtype)
                    opt.v[name] = tensors[f"adam:{tag}:v:{name}"].astype(dtype)
        for name in self.ema.shadow:
            self.ema.shadow[name] = tensors["ema:" + name].astype(dtype)
        self.epoch = int(meta["epoch"])
        self.seed = int(meta["seed"])
        self.history = [dict(r) for r in meta.get("history", [])]

    @classmethod
    def from_checkpoint(cls, path, config: RunConfig | None = None) -> "GANTrainer":
        from .config import parse_config

        tensors, meta = load_checkpoint(path)
        cfg = config or parse_config(meta["run_config"])
        models = _build(GeneratorConfig.from_dict(meta["generator"]),
                        DiscriminatorConfig.from_dict(meta["discriminator"]), cfg, meta["seed"])
        trainer = cls(cfg, models, meta["seed"], meta.get("mode"))
        trainer.load_state(tensors, meta)
        return trainer


# -- two-stage mode ----------------------------------------------------------------

class ClassifierTrainer:
    """A standalone classifier regularised through a frozen generator.

    The classifier shares the discriminator architecture; it is trained on
    the supervised loss plus ``lambda`` times the manifold penalty evaluated
    on samples of the frozen generator (in inference mode).
    """

    def __init__(self, config: RunConfig, classifier: Discriminator, generator: Generator, seed: int):
        self.config = config
        self.classifier = classifier
        self.generator = generator
        self.seed = int(seed)
        o = config.optim
        self.opt = AdamState(beta1=o.beta1, beta2=o.beta2, eps=o.eps)
        self.ema = EmaState(classifier.params.copy(), config.train.ema_decay)
        self.schedule = Schedule(config.train.epochs, config.train.decay_start, o.lr)
        self.epoch = 0
        self.history: list[dict] = []

    def penalty_fn(self, params):
        """``f(g(z))`` over latent arrays, usable with :func:`manifold_penalty_stochastic`."""
        def fg(latent, mask_rng=None):
            logits, _ = self.classifier.forward(Tensor(self.generator.generate(latent)), params,
                                                train=mask_rng is not None, rng=mask_rng)
            return logits
        return fg

    def train_step(self, x_lab, y_lab, rng, penalty_rng, lr) -> LossBreakdown:
        clf = self.classifier
        lam, eps = self.config.loss.lambda_, self.config.loss.epsilon
        tape = Tape()
        cp = clf.params.bind(tape)
        logits, _ = clf.forward(Tensor(np.asarray(x_lab, dtype=clf.dtype)), cp, train=True,
                                rng=_sub_rng(rng))
        sup = supervised_loss(logits, y_lab)
        total = sup
        k = self.config.mc_samples
        z = sample_latent(k, self.generator.latent_dim, penalty_rng).z
        deltas = random_directions(k, self.generator.latent_dim, penalty_rng)
        mask_seed = int(penalty_rng.integers(0, 2**63 - 1))
        fg = self.penalty_fn(cp if lam > 0 else None)
        pen = manifold_penalty_stochastic(
            lambda zz: fg(zz, np.random.default_rng(mask_seed)), z, eps, deltas=deltas)
        if lam > 0:
            total = total + pen * lam
        br = LossBreakdown(float(sup.values), 0.0, 0.0, float(pen.values), lam, float(total.values))
        _check_finite({"classifier loss": br.total}, {"epoch": self.epoch + 1})
        adam_step(clf.params, ParameterStore.gradients(tape, total, cp), self.opt, lr)
        ema_update(self.ema, clf.params)
        return br

    def fit(self, split: SplitDataset, epochs: int) -> list[dict]:
        bs = self.config.train.batch_size
        n_batches = max(1, len(split.x_unlabeled) // bs)
        while self.epoch < epochs:
            lr = lr_at(self.schedule, min(self.epoch, self.schedule.total))
            lab = labeled_batches(len(split.x_labeled), bs, n_batches, self.seed, self.epoch)
            sums = np.zeros(2)
            for step, li in enumerate(lab):
                rng = np.random.default_rng([self.seed, self.epoch, step, 2])
                prng = np.random.default_rng([self.seed, self.epoch, step, 3])
                br = self.train_step(split.x_labeled[li], split.y_labeled[li], rng, prng, lr)
                sums += (br.supervised, br.manifold_penalty)
            self.epoch += 1
            row = {"epoch": self.epoch, "lr": lr, "supervised": sums[0] / n_batches,
                   "unsup-real": 0.0, "unsup-fake": 0.0, "penalty": sums[1] / n_batches,
                   "gen-loss": 0.0, "val-error": float("nan"), "ema-val-error": float("nan")}
            if len(split.x_validation):
                row["val-error"] = self.error_rate(split.x_validation, split.y_validation, False)
                row["ema-val-error"] = self.error_rate(split.x_validation, split.y_validation)
            self.history.append(row)
        return self.history

    def error_rate(self, x, y, use_ema: bool = True) -> float:
        if len(x) == 0:
            return float("nan")
        params = (self.ema.shadow if use_ema else self.classifier.params).constants()
        logits, _ = self.classifier.forward(Tensor(np.asarray(x, dtype=self.classifier.dtype)),
                                            params, train=False)
        return float(np.mean(np.argmax(logits.values, axis=1) != np.asarray(y)))


def load_generator(path, config: RunConfig | None = None) -> Generator:
    path = Path(path) if path else None
    if path is None or not path.exists():
        raise ConfigError(f"generator checkpoint {path} does not exist", field="run.generator_checkpoint")
    tensors, meta = load_checkpoint(path)
    gen_cfg = GeneratorConfig.from_dict(meta["generator"])
    dtype = _dtype(config) if config is not None else np.float64
    gen = Generator(gen_cfg, seed=int(meta.get("seed", 0)), dtype=dtype)
    for k in gen.params.names():
        gen.params[k] = tensors[k].astype(dtype)
    for k in gen.state:
        gen.state[k] = tensors["state:" + k]
    return gen


# -- experiment protocol ---------------------------------------------------------

@dataclass
class TrainResult:
    history: list
    test_error: float
    trainer: object = None


def train_run(config: RunConfig, split: SplitDataset, seed: int, epochs: int,
              checkpoint_path=None) -> TrainResult:
    """Train one model from scratch for ``epochs`` epochs and score it on the test set."""
    input_shape = split.x_unlabeled.shape[1:]
    if config.run.mode == "two-stage":
        gen = load_generator(config.run.generator_checkpoint, config)
        _, disc_cfg = model_configs(config, input_shape)
        clf = Discriminator(disc_cfg, seed=seed, dtype=_dtype(config),
                            init_sigma=config.model.init_sigma)
        if gen.output_shape != clf.input_shape:
            raise ConfigError("generator checkpoint does not match the dataset's input shape",
                              field="run.generator_checkpoint")
        trainer = ClassifierTrainer(config, clf, gen, seed)
        trainer.fit(split, epochs)
    else:
        models = build_from_config(config, input_shape, seed)
        trainer = GANTrainer(config, models, seed)
        trainer.fit(split, epochs, checkpoint_path=checkpoint_path)
    return TrainResult(trainer.history, trainer.error_rate(split.x_test, split.y_test), trainer)


def two_stage_mode(config: RunConfig, split: SplitDataset, seed: int | None = None,
                   epochs: int | None = None) -> TrainResult:
    cfg = config.replace(**{"run.mode": "two-stage"})
    return train_run(cfg, split, config.run.seeds[0] if seed is None else seed,
                     epochs or config.train.epochs)


def early_stop_epoch(history: Sequence[Mapping]) -> int:
    """Epoch count with the lowest EMA validation error; earliest wins ties."""
    if not history:
        raise ContractViolation("empty training history")
    errors = np.array([row["ema-val-error"] for row in history], dtype=float)
    if np.all(np.isnan(errors)):
        return int(history[-1]["epoch"])
    return int(history[int(np.nanargmin(errors))]["epoch"])


def selection_seed(seeds: Sequence[int]) -> int:
    """Seed for the model-selection phase, distinct from every reported seed's stream."""
    return int(np.random.SeedSequence([int(seeds[0]), 0x5E1EC7]).generate_state(1)[0])


@dataclass
class SeedRun:
    seed: int
    test_error: float
    history: list


@dataclass
class ExperimentResult:
    selection_history: list
    epochs: int
    runs: list
    mean_error: float
    std_error: float


def aggregate(errors: Sequence[float]) -> tuple[float, float]:
    """Mean and sample standard deviation (0 for a single run)."""
    errors = np.asarray(errors, dtype=float)
    std = float(errors.std(ddof=1)) if len(errors) > 1 else 0.0
    return float(errors.mean()), std


def run_experiment(config: RunConfig, split: SplitDataset,
                   train_fn: Callable[..., TrainResult] = train_run,
                   on_result: Callable[[str, TrainResult], None] | None = None) -> ExperimentResult:
    """Early stopping on validation, then one retraining per seed on train + validation.

    The stopping epoch is selected once, with a seed derived from the first
    reported seed, and reused for every reported seed.
    """
    seeds = list(config.run.seeds)
    selection = []
    epochs = config.train.epochs
    if config.train.early_stopping and len(split.x_validation):
        first = train_fn(config, split, selection_seed(seeds), config.train.epochs)
        selection = first.history
        epochs = early_stop_epoch(selection)
        if on_result:
            on_result("selection", first)
        final_split = split.merged()
    else:
        final_split = split
    runs = []
    for seed in seeds:
        res = train_fn(config, final_split, seed, epochs)
        runs.append(SeedRun(seed, float(res.test_error), res.history))
        if on_result:
            on_result(f"seed{seed}", res)
    mean, std = aggregate([r.test_error for r in runs])
    return ExperimentResult(selection, epochs, runs, mean, std)
