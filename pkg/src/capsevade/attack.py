"""Perturbation generation against the capsule-presence pipeline.

Three algorithms, all minimizing the summed presence of the capsules that
carry the image's original class:

* ``gdu`` - iterated signed-gradient steps with [0, 1] clipping;
* ``psc`` - greedy darkening of the pixel pair with the highest saliency
  toward the active capsules, drawn from a shrinking search domain;
* ``opt`` - Adam in tanh-reparameterized pixel space, trading off
  perturbation norm against the presence sum, with a bisection search
  over the trade-off constant.

A per-pixel mask derived from 3x3 neighborhood averages confines
perturbations to the object and its vicinity; on a black background the
mask is exactly zero, so masked attacks never touch the background.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from capsevade import autodiff as ad
from capsevade import classifier as clf
from capsevade import encoder as enc

ALGORITHMS = ("gdu", "psc", "opt")

_DEFAULTS = {
    "gdu": {"alpha": 0.05, "n_iter": 100},
    "psc": {"alpha": 0.5, "n_iter": 200},
    "opt": {"alpha": 100.0, "n_iter": 1},
}


@dataclass(frozen=True)
class AttackConfig:
    """Hyperparameters for one attack run.

    ``alpha`` and ``n_iter`` default per algorithm (gdu: 0.05/100,
    psc: 0.5/200, opt: initial trade-off 100). ``n_iter`` of zero is
    allowed and degenerates to an immediate failure.
    """

    algorithm: str = "opt"
    alpha: Optional[float] = None
    n_iter: Optional[int] = None
    alpha_lb: float = 0.0
    alpha_ub: float = math.inf
    n_outer: int = 9
    n_inner: int = 300
    mask: bool = True
    arctanh_eps: float = 0.999999
    adam_lr: float = 1.0
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    seed: int = 0

    def __post_init__(self):
        if self.algorithm not in ALGORITHMS:
            raise ValueError(f"algorithm must be one of {ALGORITHMS}")
        if self.alpha is None:
            object.__setattr__(self, "alpha", _DEFAULTS[self.algorithm]["alpha"])
        if self.n_iter is None:
            object.__setattr__(self, "n_iter", _DEFAULTS[self.algorithm]["n_iter"])
        if self.alpha <= 0:
            raise ValueError("alpha must be positive")
        if self.n_iter < 0 or self.n_outer < 1 or self.n_inner < 1:
            raise ValueError("iteration counts out of range")
        if not 0.0 < self.arctanh_eps < 1.0:
            raise ValueError("arctanh_eps must lie in (0, 1)")
        if not self.alpha_lb <= self.alpha <= self.alpha_ub:
            raise ValueError("alpha must lie within [alpha_lb, alpha_ub]")


@dataclass(frozen=True)
class AttackTarget:
    """Everything an attack needs to know about the model under attack."""

    encoder: enc.EncoderParams
    classifier: clf.ClassifierModel
    mode: str
    label: int
    subset: tuple[int, ...]

    def __post_init__(self):
        if not self.subset:
            raise ValueError("capsule subset must be non-empty")
        if any(i < 0 or i >= self.encoder.k for i in self.subset):
            raise ValueError("capsule subset indices out of range")


@dataclass(frozen=True)
class AttackResult:
    perturbation: np.ndarray  # image-shaped
    success: bool
    l2: float
    iterations: int
    best_iteration: Optional[int]
    trace: tuple = field(default_factory=tuple, repr=False)


@dataclass(frozen=True)
class GduStep:
    iteration: int
    label: int
    l2: float
    linf_step: float


@dataclass(frozen=True)
class PscStep:
    iteration: int
    pair: tuple[int, int]
    values: tuple[float, float]
    removed: tuple[int, ...]
    label: int
    l2: float


@dataclass(frozen=True)
class AlphaRound:
    outer: int
    alpha: float
    alpha_lb: float
    alpha_ub: float
    succeeded: bool
    next_alpha: float
    next_lb: float
    next_ub: float


def capsule_subset(presence: np.ndarray) -> tuple[int, ...]:
    """Indices with presence strictly above the mean presence.

    Falls back to the single argmax capsule (lowest index on ties) when no
    component exceeds the mean, which happens only for all-equal vectors.
    """
    presence = np.asarray(presence, dtype=np.float64)
    subset = np.flatnonzero(presence > presence.mean())
    if subset.size == 0:
        return (int(presence.argmax()),)
    return tuple(int(i) for i in subset)


def make_target(
    params: enc.EncoderParams, classifier: clf.ClassifierModel, x: np.ndarray
) -> AttackTarget:
    """Resolve the original label and active-capsule subset for image ``x``."""
    presence = enc.presence_for(params, x, classifier.mode)
    return AttackTarget(
        encoder=params,
        classifier=classifier,
        mode=classifier.mode,
        label=clf.classify(classifier, presence),
        subset=capsule_subset(presence),
    )


def _indicator(k: int, subset) -> np.ndarray:
    ind = np.zeros((1, k))
    ind[0, list(subset)] = 1.0
    return ind


def objective(target: AttackTarget, x_adv: np.ndarray) -> float:
    """Summed presence of the subset capsules on a candidate image."""
    presence = enc.presence_for(target.encoder, x_adv, target.mode)
    return float(presence[list(target.subset)].sum())


def objective_graph(target: AttackTarget) -> tuple[ad.Node, str]:
    """Differentiable graph of ``objective`` over a (1, H*W) image leaf."""
    presence, leaf_name = enc.presence_graph(target.encoder, target.mode)
    root = ad.reduce_sum(
        ad.mul(presence, ad.const(_indicator(target.encoder.k, target.subset)))
    )
    return root, leaf_name


def compute_mask(x: np.ndarray) -> np.ndarray:
    """Per-pixel 3x3 neighborhood average (zero padding outside the image).

    The mask is exactly zero wherever a pixel and all eight neighbors are
    zero, so it vanishes on untouched black background.
    """
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2:
        raise ValueError("mask input must be a 2-D image")
    padded = np.pad(x, 1)
    total = np.zeros_like(x)
    for dr in (0, 1, 2):
        for dc in (0, 1, 2):
            total += padded[dr : dr + x.shape[0], dc : dc + x.shape[1]]
    return total / 9.0


def _classify_row(target: AttackTarget, x_row: np.ndarray) -> int:
    presence = enc.presence_for(target.encoder, x_row, target.mode)
    return clf.classify(target.classifier, presence)


def _clip01(x: np.ndarray) -> np.ndarray:
    return np.clip(x, 0.0, 1.0)


def gdu_attack(
    target: AttackTarget, x: np.ndarray, config: AttackConfig
) -> AttackResult:
    """Signed-gradient descent on the subset presence, keeping the best
    (lowest-norm) misclassifying iterate seen over the full run."""
    x = np.asarray(x, dtype=np.float64)
    shape = x.shape
    x_row = x.reshape(1, -1)
    mask_row = compute_mask(x).reshape(1, -1) if config.mask else None
    root, leaf_name = objective_graph(target)

    best_x = None
    best_l2 = math.inf
    best_iter = None
    trace = []
    current = x_row.copy()
    for i in range(config.n_iter):
        grad = ad.gradient(root, leaf_name, {leaf_name: current})
        step = config.alpha * np.sign(grad)
        if mask_row is not None:
            step = step * mask_row
        nxt = _clip01(current - step)
        label = _classify_row(target, nxt)
        l2 = float(np.linalg.norm(nxt - x_row))
        trace.append(
            GduStep(
                iteration=i + 1,
                label=label,
                l2=l2,
                linf_step=float(np.abs(nxt - current).max()),
            )
        )
        if label != target.label and l2 < best_l2:
            best_x, best_l2, best_iter = nxt, l2, i + 1
        current = nxt

    if best_x is None:
        return AttackResult(
            perturbation=np.zeros(shape),
            success=False,
            l2=0.0,
            iterations=config.n_iter,
            best_iteration=None,
            trace=tuple(trace),
        )
    perturbation = (best_x - x_row).reshape(shape)
    return AttackResult(
        perturbation=perturbation,
        success=True,
        l2=float(np.linalg.norm(perturbation)),
        iterations=config.n_iter,
        best_iteration=best_iter,
        trace=tuple(trace),
    )


def pixel_pair_saliency(
    g_in: np.ndarray, g_out: np.ndarray, p: int, q: int
) -> tuple[float, float]:
    """Saliency of a pixel pair: summed gradient components toward the
    active capsules (first) and toward the remaining capsules (second)."""
    if p == q:
        raise ValueError("pixel pair must be two distinct pixels")
    g_in = np.asarray(g_in, dtype=np.float64).reshape(-1)
    g_out = np.asarray(g_out, dtype=np.float64).reshape(-1)
    return float(g_in[p] + g_in[q]), float(g_out[p] + g_out[q])


def select_pixel_pair(
    g_in: np.ndarray, g_out: np.ndarray, domain
) -> Optional[tuple[int, int]]:
    """Best pixel pair in ``domain``: maximizes -d1*d2 subject to d1 > 0
    and d2 < 0. Returns None when no pair satisfies the sign conditions
    with a positive score; ties resolve to the lexicographically smallest
    pair.
    """
    idx = np.fromiter(sorted(domain), dtype=np.int64)
    if idx.size < 2:
        return None
    g_in = np.asarray(g_in, dtype=np.float64).reshape(-1)
    g_out = np.asarray(g_out, dtype=np.float64).reshape(-1)
    gi, go = g_in[idx], g_out[idx]
    d1 = gi[:, None] + gi[None, :]
    d2 = go[:, None] + go[None, :]
    score = np.where((d1 > 0.0) & (d2 < 0.0), -d1 * d2, 0.0)
    rows, cols = np.triu_indices(idx.size, k=1)
    flat = score[rows, cols]
    best = int(flat.argmax())  # first maximum <=> lexicographic tie rule
    if flat[best] <= 0.0:
        return None
    return int(idx[rows[best]]), int(idx[cols[best]])


def psc_attack(
    target: AttackTarget, x: np.ndarray, config: AttackConfig
) -> AttackResult:
    """Iteratively darken the most salient pixel pair until the label flips.

    The search domain starts as every strictly positive pixel; a pixel that
    reaches zero leaves the domain. Stops on misclassification (success),
    on domain exhaustion, when no pair meets the sign conditions, or after
    ``n_iter`` iterations (all failures).
    """
    x = np.asarray(x, dtype=np.float64)
    shape = x.shape
    x_row = x.reshape(1, -1)
    mask_row = compute_mask(x).reshape(1, -1) if config.mask else None

    presence_node, leaf_name = enc.presence_graph(target.encoder, target.mode)
    k = target.encoder.k
    in_root = ad.reduce_sum(ad.mul(presence_node, ad.const(_indicator(k, target.subset))))
    complement = [i for i in range(k) if i not in target.subset]
    out_root = ad.reduce_sum(
        ad.mul(presence_node, ad.const(_indicator(k, complement)))
    )

    domain = set(int(i) for i in np.flatnonzero(x_row[0] > 0.0))
    current = x_row.copy()
    trace = []
    success = False
    iterations = 0
    for i in range(config.n_iter):
        if len(domain) < 2:
            break
        iterations = i + 1
        bindings = {leaf_name: current}
        g_in = ad.gradient(in_root, leaf_name, bindings).reshape(-1)
        g_out = ad.gradient(out_root, leaf_name, bindings).reshape(-1)
        if mask_row is not None:
            g_in = g_in * mask_row[0]
            g_out = g_out * mask_row[0]
        pair = select_pixel_pair(g_in, g_out, domain)
        if pair is None:
            break
        p1, p2 = pair
        current[0, p1] = max(current[0, p1] - config.alpha, 0.0)
        current[0, p2] = max(current[0, p2] - config.alpha, 0.0)
        removed = tuple(p for p in (p1, p2) if current[0, p] == 0.0)
        for p in removed:
            domain.discard(p)
        label = _classify_row(target, current)
        trace.append(
            PscStep(
                iteration=iterations,
                pair=(p1, p2),
                values=(float(current[0, p1]), float(current[0, p2])),
                removed=removed,
                label=label,
                l2=float(np.linalg.norm(current - x_row)),
            )
        )
        if label != target.label:
            success = True
            break
        if not domain:
            break

    perturbation = (current - x_row).reshape(shape) if success else np.zeros(shape)
    return AttackResult(
        perturbation=perturbation,
        success=success,
        l2=float(np.linalg.norm(perturbation)),
        iterations=iterations,
        best_iteration=iterations if success else None,
        trace=tuple(trace),
    )


def to_tanh_space(x: np.ndarray, eps: float) -> np.ndarray:
    """Map pixels in [0, 1] to the unbounded tanh-reparameterized space.

    The eps factor keeps the arctanh argument strictly inside (-1, 1) even
    for pixels at exactly 0 or 1.
    """
    x = np.asarray(x, dtype=np.float64)
    if not 0.0 < eps < 1.0:
        raise ValueError("eps must lie in (0, 1)")
    return np.arctanh((2.0 * x - 1.0) * eps)


def from_tanh_space(w: np.ndarray, delta: np.ndarray) -> np.ndarray:
    """Inverse map: pixels land strictly inside (0, 1), no clipping needed."""
    return (np.tanh(np.asarray(w) + np.asarray(delta)) + 1.0) * 0.5


@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    step: int = 0


def init_adam(shape) -> AdamState:
    return AdamState(m=np.zeros(shape), v=np.zeros(shape))


def adam_step(
    state: AdamState, value: np.ndarray, grad: np.ndarray, config: AttackConfig
) -> tuple[AdamState, np.ndarray]:
    """One bias-corrected Adam update."""
    state.step += 1
    state.m = config.adam_beta1 * state.m + (1.0 - config.adam_beta1) * grad
    state.v = config.adam_beta2 * state.v + (1.0 - config.adam_beta2) * grad * grad
    m_hat = state.m / (1.0 - config.adam_beta1 ** state.step)
    v_hat = state.v / (1.0 - config.adam_beta2 ** state.step)
    return state, value - config.adam_lr * m_hat / (np.sqrt(v_hat) + config.adam_eps)


def update_alpha(
    alpha: float, alpha_lb: float, alpha_ub: float, inner_succeeded: bool
) -> tuple[float, float, float]:
    """Bisection step for the trade-off constant.

    Success tightens the upper bound, failure the lower; while the upper
    bound is still unbounded the constant grows tenfold instead of taking
    a midpoint.
    """
    if inner_succeeded:
        alpha_ub = alpha
    else:
        alpha_lb = alpha
    if math.isinf(alpha_ub):
        alpha = alpha * 10.0
    else:
        alpha = (alpha_ub + alpha_lb) / 2.0
    return alpha, alpha_lb, alpha_ub


def _opt_loss_graph(
    target: AttackTarget, x_row: np.ndarray, w_row: np.ndarray, mask_row
):
    """Loss graph: ||x_adv - x||_2 + alpha * subset presence, over a
    perturbation leaf in tanh space (and a scalar alpha leaf)."""
    delta = ad.leaf("delta")
    alpha = ad.leaf("alpha")
    x_const = ad.const(x_row)
    tanh_img = ad.mul(ad.add(ad.tanh(ad.add(ad.const(w_row), delta)), 1.0), 0.5)
    if mask_row is not None:
        x_adv = ad.add(x_const, ad.mul(ad.const(mask_row), ad.sub(tanh_img, x_const)))
    else:
        x_adv = tanh_img
    presence = enc.presence_from(target.encoder, x_adv, target.mode)
    f_term = ad.reduce_sum(
        ad.mul(presence, ad.const(_indicator(target.encoder.k, target.subset)))
    )
    loss = ad.add(ad.l2_norm(ad.sub(x_adv, x_const)), ad.mul(alpha, f_term))
    return loss, "delta"


def opt_attack(
    target: AttackTarget, x: np.ndarray, config: AttackConfig
) -> AttackResult:
    """Adam-driven norm-vs-presence minimization in tanh space.

    Each outer round reinitializes the optimizer and the perturbation,
    runs ``n_inner`` steps with the trade-off constant held fixed, then
    bisects the constant. The global best is the lowest-norm misclassifying
    iterate across all rounds. Candidate images stay inside [0, 1] by
    construction; no clipping is ever applied.
    """
    x = np.asarray(x, dtype=np.float64)
    shape = x.shape
    x_row = x.reshape(1, -1)
    n = x_row.size
    w_row = to_tanh_space(x_row, config.arctanh_eps)
    mask_row = compute_mask(x).reshape(1, -1) if config.mask else None
    loss_root, leaf_name = _opt_loss_graph(target, x_row, w_row, mask_row)

    rng = np.random.default_rng(config.seed)
    alpha, alpha_lb, alpha_ub = config.alpha, config.alpha_lb, config.alpha_ub
    best_x = None
    best_l2 = math.inf
    best_iter = None
    trace = []
    for outer in range(config.n_outer):
        state = init_adam((1, n))
        delta = rng.uniform(0.0, 1.0, size=(1, n))
        succeeded = False
        for j in range(config.n_inner):
            grad = ad.gradient(
                loss_root, leaf_name, {leaf_name: delta, "alpha": alpha}
            )
            state, delta = adam_step(state, delta, grad, config)
            adv = from_tanh_space(w_row, delta)
            if mask_row is not None:
                adv = x_row + mask_row * (adv - x_row)
            label = _classify_row(target, adv)
            if label != target.label:
                succeeded = True
                l2 = float(np.linalg.norm(adv - x_row))
                if l2 < best_l2:
                    best_x, best_l2 = adv, l2
                    best_iter = outer * config.n_inner + j + 1
        next_alpha, next_lb, next_ub = update_alpha(
            alpha, alpha_lb, alpha_ub, succeeded
        )
        trace.append(
            AlphaRound(
                outer=outer,
                alpha=alpha,
                alpha_lb=alpha_lb,
                alpha_ub=alpha_ub,
                succeeded=succeeded,
                next_alpha=next_alpha,
                next_lb=next_lb,
                next_ub=next_ub,
            )
        )
        alpha, alpha_lb, alpha_ub = next_alpha, next_lb, next_ub

    if best_x is None:
        return AttackResult(
            perturbation=np.zeros(shape),
            success=False,
            l2=0.0,
            iterations=config.n_outer * config.n_inner,
            best_iteration=None,
            trace=tuple(trace),
        )
    perturbation = (best_x - x_row).reshape(shape)
    return AttackResult(
        perturbation=perturbation,
        success=True,
        l2=float(np.linalg.norm(perturbation)),
        iterations=config.n_outer * config.n_inner,
        best_iteration=best_iter,
        trace=tuple(trace),
    )


_RUNNERS = {"gdu": gdu_attack, "psc": psc_attack, "opt": opt_attack}


def run_attack(
    target: AttackTarget, x: np.ndarray, config: AttackConfig
) -> AttackResult:
    """Dispatch to the configured algorithm."""
    return _RUNNERS[config.algorithm](target, x, config)
