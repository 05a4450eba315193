"""Discriminator and generator objectives and the manifold penalty.

The discriminator outputs K real-class logits ``l``; the generated class has
an implicit logit of 0, so

    log p(generated | x) = -logsumexp([l, 0])
    log p(real | x)      = logsumexp(l) - logsumexp([l, 0])

Every term below is a batch mean, which keeps the penalty weight independent
of batch size.

The smoothness penalty has three evaluators of increasing cost:

* :func:`manifold_penalty_stochastic` -- squared output change under one
  random unit latent step of length ``epsilon`` per sample (used in training);
* :func:`jacobian_frobenius_oracle` -- the exact squared Frobenius norm of the
  latent Jacobian, by central differences or by reverse mode;
* :func:`laplacian_norm_mc` -- Monte-Carlo average of the oracle over latent
  draws, with its standard error.

For small ``epsilon`` the stochastic penalty divided by ``epsilon**2`` has
expectation ``||J||_F^2 / d``.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Callable

import numpy as np

from . import autodiff as ad
from .autodiff import Tape, Tensor
from .errors import ContractViolation
from .models import sample_latent

EPSILON = 1e-5
LAMBDA = 1e-3


def normalize_perturbation(delta) -> np.ndarray:
    """Scale each row (or a single vector) to unit Euclidean norm."""
    delta = np.asarray(delta, dtype=np.float64)
    norms = np.linalg.norm(delta, axis=-1, keepdims=True)
    if np.any(norms == 0):
        raise ContractViolation("cannot normalise a zero perturbation")
    return delta / norms


def random_directions(n: int, d: int, rng: np.random.Generator) -> np.ndarray:
    """n directions uniform on the unit sphere in R^d (normalised Gaussians)."""
    return normalize_perturbation(rng.standard_normal((n, d)))


def _with_fake_logit(logits: Tensor) -> Tensor:
    zeros = Tensor(np.zeros((logits.shape[0], 1), dtype=logits.dtype))
    return ad.concat([logits, zeros], axis=1)


def supervised_loss(logits: Tensor, labels) -> Tensor:
    """Cross-entropy over the K real classes (conditioned on "not generated")."""
    labels = np.asarray(labels, dtype=np.int64)
    k = logits.shape[1]
    if labels.size and (labels.min() < 0 or labels.max() >= k):
        raise ContractViolation(f"labels must lie in [0, {k}), got range "
                                f"[{labels.min()}, {labels.max()}]")
    return ad.mean(ad.logsumexp(logits, axis=1) - ad.pick(logits, labels))


def unsupervised_terms(logits_real: Tensor, logits_fake: Tensor) -> tuple[Tensor, Tensor]:
    """``(-E log p(real|x_data), -E log p(generated|x_gen))``."""
    real = ad.mean(ad.logsumexp(_with_fake_logit(logits_real), axis=1)
                   - ad.logsumexp(logits_real, axis=1))
    fake = ad.mean(ad.logsumexp(_with_fake_logit(logits_fake), axis=1))
    return real, fake


def unsupervised_loss(logits_real: Tensor, logits_fake: Tensor) -> Tensor:
    real, fake = unsupervised_terms(logits_real, logits_fake)
    return real + fake


def feature_matching_loss(h_real: Tensor, h_fake: Tensor) -> Tensor:
    """L1 distance between the batch means of two feature matrices."""
    if h_real.shape[1:] != h_fake.shape[1:]:
        raise ContractViolation(f"feature widths differ: {h_real.shape} vs {h_fake.shape}")
    return ad.l1norm(ad.mean(h_real, axis=0) - ad.mean(h_fake, axis=0))


def penalty_from_outputs(clean: Tensor, perturbed: Tensor) -> Tensor:
    """Mean over rows of the squared Euclidean distance between paired outputs."""
    if clean.shape[0] == 0:
        raise ContractViolation("manifold penalty needs at least one sample")
    diff = clean - perturbed
    if diff.ndim > 2:
        diff = ad.reshape(diff, (diff.shape[0], -1))
    return ad.mean(ad.sum(ad.square(diff), axis=1))


def manifold_penalty_stochastic(fg: Callable[[np.ndarray], Tensor], z, epsilon: float = EPSILON,
                                rng: np.random.Generator | None = None,
                                deltas: np.ndarray | None = None) -> Tensor:
    """Stochastic finite-difference smoothness penalty of ``fg`` at latents ``z``.

    ``fg`` maps an ``[n, d]`` latent array to an ``[n, m]`` output tensor.
    One fresh unit direction is drawn per latent unless ``deltas`` is given.
    """
    z = np.asarray(z, dtype=np.float64)
    if z.ndim != 2 or z.shape[0] == 0:
        raise ContractViolation("manifold penalty needs a non-empty [n, d] latent batch")
    if epsilon <= 0:
        raise ContractViolation("epsilon must be positive")
    if deltas is None:
        if rng is None:
            raise ContractViolation("need an rng or explicit perturbation directions")
        deltas = random_directions(*z.shape, rng)
    return penalty_from_outputs(fg(z), fg(z + epsilon * deltas))


def jacobian_frobenius_oracle(fg: Callable[[Tensor], Tensor], z, step: float = 1e-5,
                              method: str = "fd") -> np.ndarray:
    """Per-sample ``||d fg / d z||_F^2`` for a batch of latents ``z[n, d]``.

    ``fg`` must act row-wise (no cross-sample coupling, e.g. batch-norm in
    inference mode).  ``method="fd"`` builds each Jacobian column from central
    differences; ``method="reverse"`` builds each row from one reverse pass
    per output coordinate.
    """
    if step <= 0:
        raise ContractViolation("step must be positive")
    z = np.atleast_2d(np.asarray(z, dtype=np.float64))
    n, d = z.shape
    if method == "fd":
        total = np.zeros(n)
        for j in range(d):
            hi, lo = z.copy(), z.copy()
            hi[:, j] += step
            lo[:, j] -= step
            col = (_flat(fg(Tensor(hi))) - _flat(fg(Tensor(lo)))) / (2.0 * step)
            total += np.sum(col * col, axis=1)
        return total
    if method == "reverse":
        tape = Tape()
        zt = tape.watch(z)
        out = fg(zt)
        if out.ndim != 2:
            out = ad.reshape(out, (n, -1))
        total = np.zeros(n)
        if out.tape is not tape:
            return total
        for i in range(out.shape[1]):
            (row,) = tape.gradient(ad.sum(ad.pick(out, np.full(n, i))), [zt])
            total += np.sum(row * row, axis=1)
        return total
    raise ContractViolation(f"unknown Jacobian method {method!r}")


def _flat(t: Tensor) -> np.ndarray:
    v = t.values
    return v.reshape(v.shape[0], -1)


@dataclass
class MCEstimate:
    mean: float
    stderr: float
    n: int


def laplacian_norm_mc(f: Callable[[Tensor], Tensor], g: Callable[[Tensor], Tensor], n: int,
                      d: int, rng: np.random.Generator, step: float = 1e-5,
                      method: str = "fd", batch: int = 4096,
                      latents: np.ndarray | None = None) -> MCEstimate:
    """Monte-Carlo estimate of E_z ||J_z f(g(z))||_F^2 over z ~ U[-1, 1]^d.

    ``latents`` overrides the draw (n is then taken from its length).
    """
    z = sample_latent(n, d, rng).z if latents is None else np.asarray(latents, dtype=np.float64)
    n = len(z)
    if n < 2:
        raise ContractViolation("Monte-Carlo estimate needs n >= 2")
    vals = np.concatenate([
        jacobian_frobenius_oracle(lambda t: f(g(t)), z[i:i + batch], step, method)
        for i in range(0, n, batch)
    ])
    return MCEstimate(float(vals.mean()), float(vals.std(ddof=1) / np.sqrt(n)), n)


@dataclass
class LossBreakdown:
    supervised: float
    unsup_real: float
    unsup_fake: float
    manifold_penalty: float
    lam: float
    total: float

    def as_dict(self) -> dict:
        return asdict(self)


def discriminator_loss(logits_labeled: Tensor, labels, logits_unlabeled: Tensor,
                       logits_generated: Tensor, penalty: Tensor | None = None,
                       lam: float = LAMBDA) -> tuple[Tensor, LossBreakdown]:
    """Assemble supervised + unsupervised + lam * penalty.

    The penalty only enters the graph when ``lam > 0``; with ``lam == 0`` the
    value is still reported but contributes nothing to the gradient.
    """
    if lam < 0:
        raise ContractViolation("penalty weight must be non-negative")
    sup = supervised_loss(logits_labeled, labels)
    real, fake = unsupervised_terms(logits_unlabeled, logits_generated)
    total = sup + real + fake
    pen_value = 0.0
    if penalty is not None:
        pen_value = float(penalty.values)
        if lam > 0:
            total = total + penalty * lam
    breakdown = LossBreakdown(float(sup.values), float(real.values), float(fake.values),
                              pen_value, float(lam), float(total.values))
    return total, breakdown
