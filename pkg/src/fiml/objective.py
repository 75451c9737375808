"""The base-learner objective and its steepest-descent ingredients.

Everything here is a closed-form expression built from autodiff primitives:
the robust inductive least-squares loss, the transductive entropy term, the
objective gradient, the Gauss-Newton / convexified-entropy quadratic forms,
and the exact step length they induce. Because the forward formulas are
themselves graph operations, reverse mode differentiates through the whole
unrolled inner loop with respect to the hyperparameter bundle psi.

Conventions (fixed so gradient and curvature terms stay mutually
consistent; the step length is invariant to a common rescaling):

    L_ind  = (1/L) * sum_{j,c} R[j,c]^2        over all N*L support rows
    L_base = L_ind + lambda_tran * L_tran + lambda_reg * ||W||_F^2
    G      = (2/L) Phi^T (A * R) + 2 lambda_reg W + lambda_tran beta Psi_q^T E
    Q_lsq  = (2/L) ||A * (Phi G)||_F^2 + 2 lambda_reg ||G||_F^2
    Q_tran = sum_j sum_c p_jc (u_jc - ubar_j)^2,   u_j = beta G^T psi_q_j
    alpha  = ||G||_F^2 / (Q_lsq + lambda_tran * Q_tran)
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Node, Tape

__all__ = [
    "STEP_DENOM_EPS",
    "PSI_SCALAR_FIELDS",
    "PSI_LOG_FIELDS",
    "Psi",
    "PsiNodes",
    "Theta",
    "EpisodeTensors",
    "residual_map",
    "inductive_loss",
    "entropy_loss",
    "transductive_loss",
    "base_loss",
    "grad_base",
    "quad_lsq",
    "quad_tran",
    "step_length",
]

# Denominator guard: degenerate zero-gradient episodes take an alpha=0 step
# instead of producing NaN.
STEP_DENOM_EPS = 1e-12

PSI_SCALAR_FIELDS = (
    "l_pos",
    "l_neg",
    "a_pos",
    "a_neg",
    "o_pos",
    "o_neg",
    "lambda_reg",
    "lambda_tran",
    "beta",
)
# Strictly positive quantities live in log space so the outer optimizer
# stays unconstrained.
PSI_LOG_FIELDS = frozenset({"a_pos", "a_neg", "lambda_reg", "lambda_tran", "beta"})


class Psi:
    """Meta-learned base-learner hyperparameters (raw, log-space storage).

    ``transductive=False`` pins lambda_tran to exactly zero regardless of
    the stored raw value; the fusion weight vector ``v`` has one entry per
    spatial location (length 1 when dense classification is off).
    """

    def __init__(
        self,
        l_pos: float = 1.0,
        l_neg: float = -1.0,
        a_pos: float = 1.0,
        a_neg: float = 1.0,
        o_pos: float = 1.0,
        o_neg: float = -1.0,
        lambda_reg: float = 0.01,
        lambda_tran: float = 0.1,
        beta: float = 1.0,
        v: np.ndarray | None = None,
        transductive: bool = False,
    ):
        values = {
            "l_pos": l_pos,
            "l_neg": l_neg,
            "a_pos": a_pos,
            "a_neg": a_neg,
            "o_pos": o_pos,
            "o_neg": o_neg,
            "lambda_reg": lambda_reg,
            "lambda_tran": lambda_tran,
            "beta": beta,
        }
        self.raw: dict[str, np.ndarray] = {}
        for name, val in values.items():
            if name in PSI_LOG_FIELDS:
                if val <= 0:
                    raise ValueError(f"{name} must be strictly positive, got {val}")
                self.raw[name] = np.asarray(math.log(val), dtype=np.float64)
            else:
                self.raw[name] = np.asarray(float(val), dtype=np.float64)
        self.raw["v"] = np.asarray([1.0] if v is None else v, dtype=np.float64)
        self.transductive = bool(transductive)

    def value(self, name: str):
        """Semantic (de-logged) value of one field."""
        if name == "v":
            return self.raw["v"].copy()
        if name == "lambda_tran" and not self.transductive:
            return 0.0
        raw = float(self.raw[name])
        return math.exp(raw) if name in PSI_LOG_FIELDS else raw

    @property
    def locations(self) -> int:
        return self.raw["v"].shape[0]

    def clone(self) -> "Psi":
        dup = Psi.__new__(Psi)
        dup.raw = {k: np.array(v, dtype=np.float64) for k, v in self.raw.items()}
        dup.transductive = self.transductive
        return dup

    def nodes(self, tape: Tape, learnable=frozenset()) -> "PsiNodes":
        """Put psi on a tape: raw leaves plus de-logged semantic nodes."""
        learnable = frozenset(learnable)
        leaves = {name: tape.leaf(self.raw[name], requires_grad=name in learnable) for name in self.raw}
        sem = {}
        for name in PSI_SCALAR_FIELDS:
            sem[name] = ad.exp(leaves[name]) if name in PSI_LOG_FIELDS else leaves[name]
        lam_tran = sem["lambda_tran"] if self.transductive else None
        return PsiNodes(
            l_pos=sem["l_pos"],
            l_neg=sem["l_neg"],
            a_pos=sem["a_pos"],
            a_neg=sem["a_neg"],
            o_pos=sem["o_pos"],
            o_neg=sem["o_neg"],
            lambda_reg=sem["lambda_reg"],
            lambda_tran=lam_tran,
            beta=sem["beta"],
            v=leaves["v"],
            leaves=leaves,
        )

    @classmethod
    def from_raw(cls, raw: dict, transductive: bool) -> "Psi":
        psi = cls.__new__(cls)
        psi.raw = {k: np.array(raw[k], dtype=np.float64) for k in list(PSI_SCALAR_FIELDS) + ["v"]}
        psi.transductive = bool(transductive)
        return psi

    def __repr__(self):
        vals = ", ".join(f"{n}={self.value(n):.4g}" for n in PSI_SCALAR_FIELDS)
        return f"Psi({vals}, v={np.array2string(self.raw['v'], precision=4)}, transductive={self.transductive})"


@dataclass
class PsiNodes:
    """Per-tape view of Psi: semantic nodes plus the raw leaves behind them."""

    l_pos: Node
    l_neg: Node
    a_pos: Node
    a_neg: Node
    o_pos: Node
    o_neg: Node
    lambda_reg: Node
    lambda_tran: Node | None  # None means transduction is off (exact zero)
    beta: Node
    v: Node
    leaves: dict = field(default_factory=dict)


@dataclass
class Theta:
    """The linear head being optimized in the inner loop (no bias)."""

    W: Node  # [F, ways]


@dataclass
class EpisodeTensors:
    """Episode features arranged for the base learner.

    ``phi`` stacks support features location-major per sample ([N*L, F]);
    each row keeps its parent sample's label, encoded by the constant 0/1
    matrix ``pos_mask``. ``psi_query`` is the v-fused query feature matrix
    and is rebuilt whenever v changes (a fresh tape per episode guarantees
    that).
    """

    phi: Node  # [N*L, F] support rows
    pos_mask: np.ndarray  # [N*L, ways] one-hot of the row label
    support_block: Node  # [N, L, F]
    query_block: Node | None  # [n_query, L, F]
    psi_query: Node | None  # [n_query, F] fused with v
    support_y: np.ndarray  # [N]
    ways: int
    locations: int
    features: int

    @property
    def n_support(self) -> int:
        return self.support_block.shape[0]

    @property
    def n_query(self) -> int:
        return 0 if self.query_block is None else self.query_block.shape[0]


def build_episode_tensors(
    tape: Tape,
    support_block: Node,
    support_y: np.ndarray,
    query_block: Node | None,
    psi: PsiNodes,
    ways: int,
) -> EpisodeTensors:
    """Flatten support locations and fuse query locations with v."""
    n, loc, feat = support_block.shape
    if psi.v.shape[0] != loc:
        raise ad.ShapeError(f"v has {psi.v.shape[0]} weights but blocks carry {loc} locations")
    phi = ad.reshape(support_block, (n * loc, feat))
    row_labels = np.repeat(np.asarray(support_y, dtype=np.int64), loc)
    pos_mask = np.zeros((n * loc, ways))
    pos_mask[np.arange(n * loc), row_labels] = 1.0
    psi_query = None
    if query_block is not None and query_block.shape[0] > 0:
        psi_query = ad.fuse_locations(query_block, psi.v)
    else:
        query_block = None
    return EpisodeTensors(
        phi=phi,
        pos_mask=pos_mask,
        support_block=support_block,
        query_block=query_block,
        psi_query=psi_query,
        support_y=np.asarray(support_y, dtype=np.int64),
        ways=ways,
        locations=loc,
        features=feat,
    )


def _mask_nodes(tape: Tape, et: EpisodeTensors, psi: PsiNodes) -> tuple[Node, Node]:
    """Residual weights A and score targets T as graph values.

    A[j,c] = a_pos on the row's own class, a_neg elsewhere; T likewise
    with l_pos / l_neg.
    """
    pos = tape.constant(et.pos_mask)
    neg = tape.constant(1.0 - et.pos_mask)
    a = ad.add(ad.mul(psi.a_pos, pos), ad.mul(psi.a_neg, neg))
    t = ad.add(ad.mul(psi.l_pos, pos), ad.mul(psi.l_neg, neg))
    return a, t


def residual_map(scores: Node, et: EpisodeTensors, psi: PsiNodes) -> Node:
    """Robust residuals: R = A * (S - T).

    At (l_pos, l_neg, a_pos, a_neg) = (1, -1, 1, 1) this is exactly the
    ridge-regression residual against +-1 targets.
    """
    a, t = _mask_nodes(scores.tape, et, psi)
    return ad.mul(a, ad.sub(scores, t))


def inductive_loss(theta: Theta, et: EpisodeTensors, psi: PsiNodes) -> Node:
    """Squared residual loss over support rows, averaged over locations."""
    scores = ad.matmul(et.phi, theta.W)
    r = residual_map(scores, et, psi)
    return ad.scale(ad.reduce_sum(ad.square(r)), 1.0 / et.locations)


def entropy_loss(logits: Node) -> Node:
    """Shannon entropy of softmax(logits), summed over leading axes.

    Computed as logsumexp(s) - sum_c s_c p_c on max-shifted logits, which
    is exact at the uniform point and overflow-safe for large scores.
    """
    shifted = ad.sub(logits, ad.expand_last(ad.rowmax(logits), logits.shape[-1]))
    lse = ad.logsumexp(shifted)
    p = ad.softmax(shifted)
    avg_score = ad.reduce_sum(ad.mul(shifted, p), axis=-1)
    return ad.reduce_sum(ad.sub(lse, avg_score))


def _query_logits(theta: Theta, et: EpisodeTensors, psi: PsiNodes) -> Node:
    """Temperature-scaled fused query logits: beta * PsiQ W."""
    return ad.mul(psi.beta, ad.matmul(et.psi_query, theta.W))


def transductive_loss(theta: Theta, et: EpisodeTensors, psi: PsiNodes) -> Node:
    """Total prediction entropy over the query set (zero when empty)."""
    if et.psi_query is None:
        return theta.W.tape.constant(0.0)
    return entropy_loss(_query_logits(theta, et, psi))


def base_loss(theta: Theta, et: EpisodeTensors, psi: PsiNodes) -> Node:
    """Full inner objective: inductive + weighted transductive + ridge."""
    loss = inductive_loss(theta, et, psi)
    if psi.lambda_tran is not None and et.psi_query is not None:
        loss = ad.add(loss, ad.mul(psi.lambda_tran, transductive_loss(theta, et, psi)))
    reg = ad.mul(psi.lambda_reg, ad.reduce_sum(ad.square(theta.W)))
    return ad.add(loss, reg)


def _entropy_grad_rows(logits: Node) -> Node:
    """Per-row entropy gradient e = p * (sbar - s), on shifted logits.

    Shift invariance makes the value (and its psi-derivatives) identical to
    the unshifted formula while guaranteeing an exact zero at uniform rows.
    """
    k = logits.shape[-1]
    shifted = ad.sub(logits, ad.expand_last(ad.rowmax(logits), k))
    p = ad.softmax(shifted)
    sbar = ad.reduce_sum(ad.mul(p, shifted), axis=-1)
    return ad.mul(p, ad.sub(ad.expand_last(sbar, k), shifted))


def grad_base(theta: Theta, et: EpisodeTensors, psi: PsiNodes) -> Node:
    """Objective gradient wrt W as a closed-form graph expression."""
    tape = theta.W.tape
    scores = ad.matmul(et.phi, theta.W)
    a, t = _mask_nodes(tape, et, psi)
    weighted_resid = ad.mul(a, ad.mul(a, ad.sub(scores, t)))  # A * R = A^2 (S - T)
    g = ad.scale(ad.matmul(ad.transpose(et.phi), weighted_resid), 2.0 / et.locations)
    g = ad.add(g, ad.mul(psi.lambda_reg, ad.scale(theta.W, 2.0)))
    if psi.lambda_tran is not None and et.psi_query is not None:
        e = _entropy_grad_rows(_query_logits(theta, et, psi))
        g_tran = ad.matmul(ad.transpose(et.psi_query), e)
        g = ad.add(g, ad.mul(ad.mul(psi.lambda_tran, psi.beta), g_tran))
    return g


def quad_lsq(g: Node, et: EpisodeTensors, psi: PsiNodes) -> Node:
    """Gauss-Newton quadratic of the least-squares part along g."""
    a, _ = _mask_nodes(g.tape, et, psi)
    jg = ad.mul(a, ad.matmul(et.phi, g))
    q = ad.scale(ad.reduce_sum(ad.square(jg)), 2.0 / et.locations)
    return ad.add(q, ad.mul(psi.lambda_reg, ad.scale(ad.reduce_sum(ad.square(g)), 2.0)))


def quad_tran(g: Node, theta: Theta, et: EpisodeTensors, psi: PsiNodes) -> Node:
    """Convexified entropy quadratic along g: a softmax-weighted variance.

    Computed as sum_j sum_c p_jc (u_jc - ubar_j)^2 after shifting u rows by
    their max, which keeps the value nonnegative in floating point and
    exactly zero for rows constant across classes.
    """
    if psi.lambda_tran is None or et.psi_query is None:
        return g.tape.constant(0.0)
    k = et.ways
    p = ad.softmax(_query_logits(theta, et, psi))
    u = ad.mul(psi.beta, ad.matmul(et.psi_query, g))
    u = ad.sub(u, ad.expand_last(ad.rowmax(u), k))
    ubar = ad.reduce_sum(ad.mul(p, u), axis=-1)
    dev = ad.sub(u, ad.expand_last(ubar, k))
    return ad.reduce_sum(ad.mul(p, ad.square(dev)))


def step_length(g: Node, q_lsq: Node, q_tran: Node, psi: PsiNodes) -> Node:
    """Exact minimizer of the quadratic model along -g.

    alpha = ||g||^2 / (Q_lsq + lambda_tran * Q_tran); a denominator below
    STEP_DENOM_EPS (converged or fully degenerate episode) yields alpha=0.
    """
    denom = q_lsq
    if psi.lambda_tran is not None:
        denom = ad.add(denom, ad.mul(psi.lambda_tran, q_tran))
    if float(denom.array) < STEP_DENOM_EPS:
        return g.tape.constant(0.0)
    return ad.div(ad.reduce_sum(ad.square(g)), denom)
