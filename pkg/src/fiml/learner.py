"""The inner loop: initializer, unrolled steepest-descent steps, prediction.

Every iteration is recorded on the episode's tape, so the outer loop can
backpropagate through the full unrolled optimization.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Node, NumericsError, Tape
from .embedding import spatial_mean
from .objective import (
    EpisodeTensors,
    PsiNodes,
    Theta,
    base_loss,
    grad_base,
    quad_lsq,
    quad_tran,
    step_length,
)

__all__ = ["InnerConfig", "InnerTrace", "init_theta", "run_inner", "fuse_logits", "predict"]


@dataclass(frozen=True)
class InnerConfig:
    """Iteration counts and initializer choice for the base learner."""

    iters_train: int = 10
    iters_eval: int = 15
    init: str = "support"  # zero | support

    def __post_init__(self):
        if self.iters_train < 0 or self.iters_eval < 0:
            raise ValueError("iteration counts must be >= 0")
        if self.init not in ("zero", "support"):
            raise ValueError(f"unknown initializer {self.init!r}")


@dataclass
class InnerTrace:
    """Objective value before/after each step plus the step lengths taken."""

    losses: list = field(default_factory=list)  # length = iterations + 1
    alphas: list = field(default_factory=list)  # length = iterations


def init_theta(tape: Tape, et: EpisodeTensors, psi: PsiNodes, kind: str) -> Theta:
    """Head initialization.

    zero: W = 0 (no gradient path into the initializer).
    support: column c is (o_pos * mu_c + o_neg * mu_rest) / msq, where mu_c
    averages the spatial-mean features of class-c support samples, mu_rest
    averages all other support samples, and msq is the mean squared feature
    norm — a scale normalizer keeping initial logits O(1) in any feature
    dimension. Differentiable wrt o_pos/o_neg and the features.
    """
    if kind == "zero":
        return Theta(tape.constant(np.zeros((et.features, et.ways))))
    if kind != "support":
        raise ValueError(f"unknown initializer {kind!r}")
    if et.n_support == 0:
        raise ValueError("support initializer needs a non-empty support set")
    feats = spatial_mean(et.support_block)  # [N, F]
    n, k = et.n_support, et.ways
    counts = np.bincount(et.support_y, minlength=k).astype(np.float64)
    own = np.zeros((k, n))
    own[et.support_y, np.arange(n)] = 1.0 / counts[et.support_y]
    mu = ad.matmul(tape.constant(own), feats)  # [k, F]
    w = ad.mul(psi.o_pos, mu)
    if k > 1:
        rest = (1.0 - own * counts[:, None]) / (n - counts)[:, None]
        mu_rest = ad.matmul(tape.constant(rest), feats)
        w = ad.add(w, ad.mul(psi.o_neg, mu_rest))
    msq = ad.reduce_mean(ad.reduce_sum(ad.square(feats), axis=1))
    return Theta(ad.div(ad.transpose(w), msq))


def run_inner(
    tape: Tape,
    et: EpisodeTensors,
    psi: PsiNodes,
    iterations: int,
    init: str = "support",
) -> tuple[Theta, InnerTrace]:
    """Run exactly ``iterations`` steepest-descent steps from the initializer.

    Each step evaluates the closed-form gradient, the two quadratic terms
    and the exact step length, then updates W in-graph. Raises with the
    offending iteration index if the objective ever turns non-finite.
    """
    if iterations < 0:
        raise ValueError("iterations must be >= 0")
    theta = init_theta(tape, et, psi, init)
    trace = InnerTrace()

    def record(loss_node: Node, it: int):
        val = float(loss_node.array)
        if not np.isfinite(val):
            raise NumericsError(f"non-finite base loss at inner iteration {it}")
        trace.losses.append(val)

    record(base_loss(theta, et, psi), 0)
    for d in range(iterations):
        try:
            g = grad_base(theta, et, psi)
            q_l = quad_lsq(g, et, psi)
            q_t = quad_tran(g, theta, et, psi)
            alpha = step_length(g, q_l, q_t, psi)
            theta = Theta(ad.sub(theta.W, ad.mul(alpha, g)))
            trace.alphas.append(float(alpha.array))
            record(base_loss(theta, et, psi), d + 1)
        except NumericsError as err:
            raise NumericsError(f"inner iteration {d + 1}: {err}") from err
    return theta, trace


def fuse_logits(theta: Theta, query_block: Node, v: Node) -> Node:
    """Location-fused query logits: s_j = sum_l v_l * W^T phi_jl."""
    fused = ad.fuse_locations(query_block, v)
    return ad.matmul(fused, theta.W)


def predict(theta: Theta, query_block: Node, v: Node) -> tuple[np.ndarray, np.ndarray]:
    """Class decisions and softmax confidences from fused logits.

    Ties break toward the lowest class index; confidences carry no
    temperature (beta only shapes the inner objective).
    """
    logits = fuse_logits(theta, query_block, v)
    probs = ad.softmax(logits)
    return np.argmax(logits.array, axis=1), probs.array.copy()
