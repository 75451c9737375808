"""Finite-difference verification suite.

Central-difference oracles for every backward rule, the closed-form
objective gradient, step-length optimality, the monotone-trace property
and the meta-gradient through the unrolled inner loop. The ``gradcheck``
CLI subcommand runs `run_all` and fails loudly on any regression.

All checks run at 64-bit with perturbation 1e-5 unless stated otherwise.
"""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .objective import (
    Psi,
    Theta,
    base_loss,
    build_episode_tensors,
    grad_base,
    quad_lsq,
    quad_tran,
    step_length,
)
from .learner import fuse_logits, run_inner

__all__ = [
    "CheckResult",
    "fd_gradient",
    "rel_err",
    "check_primitives",
    "check_grad_base",
    "check_step_optimality",
    "check_entropy_identities",
    "check_hessian_oracles",
    "check_monotone_traces",
    "check_meta_gradients",
    "check_ridge_convergence",
    "run_all",
]


@dataclass
class CheckResult:
    name: str
    passed: bool
    worst: float
    detail: str = ""

    def line(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        out = f"[{status}] {self.name}: worst={self.worst:.3e}"
        return out + (f" ({self.detail})" if self.detail else "")


def fd_gradient(f, x: np.ndarray, eps: float = 1e-5) -> np.ndarray:
    """Central finite differences of a scalar function of one array."""
    x = np.asarray(x, dtype=np.float64)
    g = np.zeros_like(x)
    flat, gflat = x.reshape(-1), g.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        fp = float(f(x))
        flat[i] = orig - eps
        fm = float(f(x))
        flat[i] = orig
        gflat[i] = (fp - fm) / (2.0 * eps)
    return g


def rel_err(a: np.ndarray, b: np.ndarray) -> float:
    """Max-norm relative error with a small absolute floor."""
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    denom = max(np.max(np.abs(a), initial=0.0), np.max(np.abs(b), initial=0.0), 1e-8)
    return float(np.max(np.abs(a - b), initial=0.0) / denom)


def _random_episode(rng, n_per_class=2, locations=2, features=4, ways=3, n_query=6, scale=1.0):
    """Raw arrays for one synthetic episode (no data module involved)."""
    n = n_per_class * ways
    return {
        "support": scale * rng.standard_normal((n, locations, features)),
        "support_y": np.repeat(np.arange(ways), n_per_class),
        "query": scale * rng.standard_normal((n_query, locations, features)),
        "ways": ways,
        "locations": locations,
        "features": features,
    }


def _random_psi(rng, locations, transductive):
    v = rng.uniform(0.2, 1.0, size=locations)
    return Psi(
        l_pos=rng.uniform(0.5, 1.5),
        l_neg=rng.uniform(-1.5, -0.5),
        a_pos=rng.uniform(0.5, 2.0),
        a_neg=rng.uniform(0.5, 2.0),
        o_pos=rng.uniform(0.5, 1.5),
        o_neg=rng.uniform(-1.5, -0.5),
        lambda_reg=rng.uniform(0.005, 0.05),
        lambda_tran=rng.uniform(0.05, 0.5),
        beta=rng.uniform(0.5, 2.0),
        v=v,
        transductive=transductive,
    )


def _episode_tensors(tape, ep, psi_nodes):
    sup = tape.constant(ep["support"])
    qry = tape.constant(ep["query"]) if ep["query"].shape[0] else None
    return build_episode_tensors(tape, sup, ep["support_y"], qry, psi_nodes, ep["ways"])


# --- primitive backward rules ------------------------------------------------


def _primitive_cases(rng):
    """(name, inputs, forward) triples; forward maps nodes to a scalar node.

    Inputs are explicit arrays so the FD oracle can perturb them and replay
    the forward independently of the recorded graph.
    """
    x = rng.standard_normal((3, 4))
    y = rng.standard_normal((3, 4)) + 2.5
    pos = np.abs(rng.standard_normal((3, 4))) + 0.5
    # keep relu inputs off the kink so central differences stay valid
    off_kink = np.where(np.abs(x) < 1e-3, 0.5, x)
    # keep rowmax entries separated so the argmax is FD-stable
    spread = rng.standard_normal((3, 4)) + np.arange(4) * 2.0
    w45 = rng.standard_normal((4, 5))
    w34 = rng.standard_normal((3, 4))
    w54 = rng.standard_normal((5, 4))

    def weighted(w):
        def f(tape, op, node):
            return ad.reduce_sum(ad.mul(tape.constant(w), op(node)))

        return f

    softmax_probe = weighted(w45)
    cases = [
        ("add", [x, y], lambda t, n: ad.reduce_sum(ad.square(ad.add(n[0], n[1])))),
        ("sub", [x, y], lambda t, n: ad.reduce_sum(ad.square(ad.sub(n[0], n[1])))),
        ("mul", [x, y], lambda t, n: ad.reduce_sum(ad.mul(n[0], n[1]))),
        ("div", [x, y], lambda t, n: ad.reduce_sum(ad.div(n[0], n[1]))),
        (
            "scalar_broadcast",
            [rng.standard_normal(()), rng.standard_normal((2, 3))],
            lambda t, n: ad.reduce_sum(ad.mul(n[0], ad.add(n[1], n[0]))),
        ),
        ("scale", [x], lambda t, n: ad.reduce_sum(ad.square(ad.scale(n[0], -1.7)))),
        ("square", [x], lambda t, n: ad.reduce_sum(ad.square(n[0]))),
        ("exp", [x], lambda t, n: ad.reduce_sum(ad.exp(n[0]))),
        ("log", [pos], lambda t, n: ad.reduce_sum(ad.log(n[0]))),
        ("relu", [off_kink], lambda t, n: ad.reduce_sum(ad.square(ad.relu(n[0])))),
        (
            "matmul",
            [rng.standard_normal((5, 3)), rng.standard_normal((3, 4))],
            lambda t, n: ad.reduce_sum(ad.square(ad.matmul(n[0], n[1]))),
        ),
        ("transpose", [rng.standard_normal((4, 2))], lambda t, n: ad.reduce_sum(ad.square(ad.transpose(n[0])))),
        ("reshape", [rng.standard_normal((2, 6))], lambda t, n: ad.reduce_sum(ad.square(ad.reshape(n[0], (3, 4))))),
        (
            "sum_axis",
            [rng.standard_normal((3, 4, 2))],
            lambda t, n: ad.reduce_sum(ad.square(ad.reduce_sum(n[0], axis=1))),
        ),
        ("mean_axis", [x], lambda t, n: ad.reduce_sum(ad.square(ad.reduce_mean(n[0], axis=0)))),
        ("sum_all", [x], lambda t, n: ad.square(ad.reduce_sum(n[0]))),
        ("mean_all", [x], lambda t, n: ad.square(ad.reduce_mean(n[0]))),
        ("logsumexp", [rng.standard_normal((4, 5))], lambda t, n: ad.reduce_sum(ad.square(ad.logsumexp(n[0])))),
        ("softmax", [rng.standard_normal((4, 5))], lambda t, n: softmax_probe(t, ad.softmax, n[0])),
        ("rowmax", [spread], lambda t, n: ad.reduce_sum(ad.square(ad.rowmax(n[0])))),
        (
            "expand_last",
            [rng.standard_normal((3,))],
            lambda t, n: ad.reduce_sum(ad.mul(t.constant(w34), ad.expand_last(n[0], 4))),
        ),
        (
            "expand_rows",
            [rng.standard_normal((4,))],
            lambda t, n: ad.reduce_sum(ad.mul(t.constant(w54), ad.expand_rows(n[0], 5))),
        ),
        (
            "fuse_locations",
            [rng.standard_normal((3, 2, 4)), rng.uniform(0.2, 1.0, size=2)],
            lambda t, n: ad.reduce_sum(ad.square(ad.fuse_locations(n[0], n[1]))),
        ),
    ]
    return cases


def check_primitives(draws: int = 20, tol: float = 1e-6, seed: int = 0) -> CheckResult:
    """FD-check every primitive's backward rule on random inputs."""
    worst, worst_name = 0.0, ""
    for d in range(draws):
        rng = np.random.default_rng(seed + d)
        for name, inputs, forward in _primitive_cases(rng):
            tape = ad.Tape()
            leaves = [tape.leaf(arr, requires_grad=True) for arr in inputs]
            grads = tape.backward(forward(tape, leaves))
            for i, arr in enumerate(inputs):

                def f(x, idx=i):
                    t2 = ad.Tape()
                    nodes = [t2.leaf(x if j == idx else other) for j, other in enumerate(inputs)]
                    return forward(t2, nodes).item()

                err = rel_err(grads[leaves[i]], fd_gradient(f, np.array(arr, dtype=np.float64)))
                if err > worst:
                    worst, worst_name = err, name
    return CheckResult("primitive backward rules", worst < tol, worst, worst_name)


def check_grad_base(draws: int = 50, tol: float = 1e-6, seed: int = 1) -> CheckResult:
    """Closed-form objective gradient vs FD of the objective, random psi."""
    worst = 0.0
    for d in range(draws):
        rng = np.random.default_rng(seed + d)
        ep = _random_episode(rng)
        psi = _random_psi(rng, ep["locations"], transductive=bool(d % 2))
        w0 = rng.standard_normal((ep["features"], ep["ways"]))

        tape = ad.Tape()
        pn = psi.nodes(tape)
        et = _episode_tensors(tape, ep, pn)
        g = grad_base(Theta(tape.constant(w0)), et, pn)

        def f(w):
            t2 = ad.Tape()
            pn2 = psi.nodes(t2)
            et2 = _episode_tensors(t2, ep, pn2)
            return base_loss(Theta(t2.constant(w)), et2, pn2).item()

        worst = max(worst, rel_err(g.array, fd_gradient(f, w0.copy())))
    return CheckResult("grad_base vs finite differences", worst < tol, worst)


def check_step_optimality(draws: int = 20, seed: int = 2) -> CheckResult:
    """|phi'(alpha*)| < 1e-8 * ||G||^2 on ridge-only episodes, plus the
    one-step isotropic-quadratic case."""
    worst = 0.0
    for d in range(draws):
        rng = np.random.default_rng(seed + d)
        ep = _random_episode(rng, n_per_class=3)
        psi = _random_psi(rng, ep["locations"], transductive=False)
        w0 = rng.standard_normal((ep["features"], ep["ways"]))

        tape = ad.Tape()
        pn = psi.nodes(tape)
        et = _episode_tensors(tape, ep, pn)
        theta = Theta(tape.constant(w0))
        g = grad_base(theta, et, pn)
        alpha = step_length(g, quad_lsq(g, et, pn), quad_tran(g, theta, et, pn), pn)
        gsq = float(np.sum(g.array**2))

        def phi(a_val: float) -> float:
            t2 = ad.Tape()
            pn2 = psi.nodes(t2)
            et2 = _episode_tensors(t2, ep, pn2)
            w = w0 - a_val * g.array
            return base_loss(Theta(t2.constant(w)), et2, pn2).item()

        a_star = float(alpha.array)
        h = max(1e-6, 1e-6 * abs(a_star))
        dphi = (phi(a_star + h) - phi(a_star - h)) / (2 * h)
        ratio = abs(dphi) / max(gsq, 1e-12)
        worst = max(worst, ratio)
    # isotropic quadratic: orthonormal support rows, zero targets -> one exact step
    iso = _isotropic_one_step()
    passed = worst < 1e-8 and iso < 1e-12
    return CheckResult("step-length line optimality", passed, worst, f"isotropic residual={iso:.2e}")


def _isotropic_one_step() -> float:
    """||W_1||_F after one step on an exactly isotropic quadratic."""
    features = ways = 4
    rng = np.random.default_rng(7)
    psi = Psi(l_pos=0.0, l_neg=0.0, lambda_reg=0.25, transductive=False)
    tape = ad.Tape()
    pn = psi.nodes(tape)
    sup = tape.constant(np.eye(features).reshape(features, 1, features))
    et = build_episode_tensors(tape, sup, np.arange(ways), None, pn, ways)
    w0 = rng.standard_normal((features, ways))
    theta = Theta(tape.constant(w0))
    g = grad_base(theta, et, pn)
    alpha = step_length(g, quad_lsq(g, et, pn), quad_tran(g, theta, et, pn), pn)
    w1 = w0 - float(alpha.array) * g.array
    return float(np.linalg.norm(w1))


def check_entropy_identities(draws: int = 100, seed: int = 3) -> CheckResult:
    """Entropy value equals -sum p log p; gradient vanishes at uniform;
    quad_tran is a nonnegative weighted variance."""
    from .objective import entropy_loss, _entropy_grad_rows

    worst = 0.0
    ok = True
    for d in range(draws):
        rng = np.random.default_rng(seed + d)
        k = int(rng.integers(2, 7))
        s = rng.standard_normal(k) * rng.uniform(0.5, 3.0)
        tape = ad.Tape()
        val = entropy_loss(tape.constant(s)).item()
        p = np.exp(s - s.max())
        p /= p.sum()
        oracle = float(-np.sum(p * np.log(p)))
        worst = max(worst, abs(val - oracle))

        tape2 = ad.Tape()
        uniform = tape2.constant(np.full((3, k), rng.uniform(-5, 5)))
        e = _entropy_grad_rows(uniform)
        ok &= bool(np.all(e.array == 0.0))
    uniform_val = entropy_loss(ad.Tape().constant(np.zeros(5))).item()
    worst = max(worst, abs(uniform_val - np.log(5)))
    return CheckResult("entropy identities", ok and worst < 1e-10, worst)


def check_hessian_oracles(draws: int = 30, tol: float = 1e-9, seed: int = 4) -> CheckResult:
    """quad_lsq / quad_tran vs explicitly assembled Hessian matrices."""
    worst = 0.0
    nonneg = True
    for d in range(draws):
        rng = np.random.default_rng(seed + d)
        ep = _random_episode(rng, n_per_class=2, locations=2, features=3, ways=3, n_query=4)
        psi = _random_psi(rng, ep["locations"], transductive=True)
        w0 = rng.standard_normal((ep["features"], ep["ways"]))
        gdir = rng.standard_normal((ep["features"], ep["ways"]))

        tape = ad.Tape()
        pn = psi.nodes(tape)
        et = _episode_tensors(tape, ep, pn)
        theta = Theta(tape.constant(w0))
        gnode = tape.constant(gdir)
        q_l = quad_lsq(gnode, et, pn).item()
        q_t = quad_tran(gnode, theta, et, pn).item()
        nonneg &= q_l >= 0.0 and q_t >= 0.0

        worst = max(worst, abs(q_l - _assemble_q_lsq(ep, psi, gdir)))
        worst = max(worst, abs(q_t - _assemble_q_tran(ep, psi, w0, gdir)))
    return CheckResult("Hessian quadratic forms vs assembled matrices", nonneg and worst < tol, worst)


def _lsq_pieces(ep, psi):
    n, loc, feat = ep["support"].shape
    ways = ep["ways"]
    phi = ep["support"].reshape(n * loc, feat)
    row_y = np.repeat(ep["support_y"], loc)
    pos = np.zeros((n * loc, ways))
    pos[np.arange(n * loc), row_y] = 1.0
    a = psi.value("a_pos") * pos + psi.value("a_neg") * (1 - pos)
    t = psi.value("l_pos") * pos + psi.value("l_neg") * (1 - pos)
    return phi, a, t


def _assemble_q_lsq(ep, psi, gdir):
    """g^T H g from the explicit Gauss-Newton matrix on vec(W)."""
    phi, a, _ = _lsq_pieces(ep, psi)
    loc = ep["locations"]
    feat, ways = gdir.shape
    lam = psi.value("lambda_reg")
    dim = feat * ways
    h = np.zeros((dim, dim))
    # rows of the residual Jacobian: residual (j,c) depends on W[:,c] only
    for j in range(phi.shape[0]):
        for c in range(ways):
            row = np.zeros(dim)
            row[c * feat : (c + 1) * feat] = a[j, c] * phi[j]
            h += 2.0 / loc * np.outer(row, row)
    h += 2.0 * lam * np.eye(dim)
    gv = gdir.T.reshape(-1)  # vec stacking class blocks, matching rows above
    return float(gv @ h @ gv)


def _assemble_q_tran(ep, psi, w0, gdir):
    """g^T H g from explicit diag(p) - p p^T blocks per query."""
    v = psi.value("v")
    beta = psi.value("beta")
    fused = np.einsum("qlf,l->qf", ep["query"], v)
    total = 0.0
    for q in range(fused.shape[0]):
        s = beta * (w0.T @ fused[q])
        p = np.exp(s - s.max())
        p /= p.sum()
        h_ent = np.diag(p) - np.outer(p, p)
        u = beta * (gdir.T @ fused[q])
        total += float(u @ h_ent @ u)
    return total


def check_monotone_traces(episodes: int = 500, iterations: int = 15, seed: int = 5) -> CheckResult:
    """lambda_tran=0 traces never increase; transductive traces rarely do."""
    strict_ok = 0
    soft_ok = 0
    for d in range(episodes):
        rng = np.random.default_rng(seed + d)
        ep = _random_episode(rng, n_per_class=1, locations=2, features=4, ways=3, n_query=6)

        tape = ad.Tape()
        psi = Psi(v=np.full(2, 0.5), transductive=False)
        pn = psi.nodes(tape)
        et = _episode_tensors(tape, ep, pn)
        _, trace = run_inner(tape, et, pn, iterations, init="zero")
        diffs = np.diff(trace.losses)
        strict_ok += bool(np.all(diffs <= 0.0))

        tape2 = ad.Tape()
        psi2 = Psi(v=np.full(2, 0.5), lambda_tran=0.5, beta=2.0, transductive=True)
        pn2 = psi2.nodes(tape2)
        et2 = _episode_tensors(tape2, ep, pn2)
        _, trace2 = run_inner(tape2, et2, pn2, iterations, init="zero")
        soft_ok += bool(np.all(np.diff(trace2.losses) <= 1e-12))
    strict_rate = strict_ok / episodes
    soft_rate = soft_ok / episodes
    passed = strict_rate == 1.0 and soft_rate >= 0.95
    return CheckResult(
        "monotone inner traces",
        passed,
        1.0 - soft_rate,
        f"ridge {strict_rate:.1%}, transductive {soft_rate:.1%}",
    )


def check_ridge_convergence(episodes: int = 20, iterations: int = 30, seed: int = 6) -> CheckResult:
    """D=30 steepest descent vs the closed-form normal-equation minimum."""
    worst_loss, worst_w = 0.0, 0.0
    for d in range(episodes):
        rng = np.random.default_rng(seed + d)
        # tall design (many rows per feature) keeps the quadratic well
        # conditioned, which D=30 exact-step descent needs to hit 1e-8
        ep = _random_episode(rng, n_per_class=8, locations=2, features=3, ways=3, n_query=0)
        psi = Psi(v=np.full(2, 0.5), transductive=False)

        tape = ad.Tape()
        pn = psi.nodes(tape)
        et = _episode_tensors(tape, ep, pn)
        theta, trace = run_inner(tape, et, pn, iterations, init="zero")

        w_star, loss_star = _ridge_solution(ep, psi)
        worst_loss = max(worst_loss, abs(trace.losses[-1] - loss_star) / max(abs(loss_star), 1e-12))
        worst_w = max(
            worst_w,
            float(np.linalg.norm(theta.W.array - w_star) / max(np.linalg.norm(w_star), 1e-12)),
        )
    passed = worst_loss < 1e-8 and worst_w < 1e-4
    return CheckResult("ridge closed-form convergence", passed, worst_loss, f"worst dW={worst_w:.2e}")


def _ridge_solution(ep, psi):
    """Column-wise weighted normal equations for the ridge objective."""
    phi, a, t = _lsq_pieces(ep, psi)
    loc = ep["locations"]
    lam = psi.value("lambda_reg")
    feat = phi.shape[1]
    w_star = np.zeros((feat, ep["ways"]))
    for c in range(ep["ways"]):
        d = a[:, c] ** 2
        lhs = phi.T @ (d[:, None] * phi) / loc + lam * np.eye(feat)
        rhs = phi.T @ (d * t[:, c]) / loc
        w_star[:, c] = np.linalg.solve(lhs, rhs)
    resid = a * (phi @ w_star - t)
    loss_star = float(np.sum(resid**2) / loc + lam * np.sum(w_star**2))
    return w_star, loss_star


def check_meta_gradients(draws: int = 6, depth: int = 3, tol: float = 1e-4, seed: int = 8) -> CheckResult:
    """Tape gradient of the query cross-entropy through D unrolled steps vs
    FD over every psi field and the embedding parameters."""
    from .embedding import EmbeddingConfig, embed, embedding_nodes, init_embedding

    cfg = EmbeddingConfig(kind="linear", input_dim=8, locations=2, features=4)
    worst = 0.0
    for d in range(draws):
        rng = np.random.default_rng(seed + d)
        ways, shots, n_query = 3, 2, 4
        sup_x = rng.standard_normal((ways * shots, cfg.input_dim))
        sup_y = np.repeat(np.arange(ways), shots)
        qry_x = rng.standard_normal((n_query, cfg.input_dim))
        qry_y = rng.integers(0, ways, size=n_query)
        psi = _random_psi(rng, cfg.locations, transductive=True)
        emb = init_embedding(cfg, seed=seed + d)

        def forward(psi_obj, emb_params, want_grads=False, learnable=()):
            tape = ad.Tape()
            pn = psi_obj.nodes(tape, learnable=learnable)
            en = embedding_nodes(tape, emb_params, learnable=want_grads)
            sup_block = embed(tape, cfg, en, sup_x)
            qry_block = embed(tape, cfg, en, qry_x)
            et = build_episode_tensors(tape, sup_block, sup_y, qry_block, pn, ways)
            theta, _ = run_inner(tape, et, pn, depth, init="support")
            logits = fuse_logits(theta, et.query_block, pn.v)
            onehot = np.zeros((n_query, ways))
            onehot[np.arange(n_query), qry_y] = 1.0
            ce = ad.sub(ad.logsumexp(logits), ad.reduce_sum(ad.mul(logits, tape.constant(onehot)), axis=-1))
            loss = ad.reduce_mean(ce)
            if not want_grads:
                return loss.item()
            grads = tape.backward(loss)
            return loss.item(), {n: grads[leaf] for n, leaf in pn.leaves.items()}, {
                n: grads[leaf] for n, leaf in en.items()
            }

        learnable = set(list(psi.raw.keys()))
        _, psi_grads, emb_grads = forward(psi, emb, want_grads=True, learnable=learnable)

        for name in psi.raw:
            def f(x, _n=name):
                p2 = psi.clone()
                p2.raw[_n] = np.array(x, dtype=np.float64) if np.ndim(x) else np.float64(x)
                return forward(p2, emb)

            fd = fd_gradient(f, np.array(psi.raw[name], dtype=np.float64))
            worst = max(worst, rel_err(np.asarray(psi_grads[name]), fd))

        for name in emb:
            def f(x, _n=name):
                e2 = {k: v.copy() for k, v in emb.items()}
                e2[_n] = x
                return forward(psi, e2)

            fd = fd_gradient(f, emb[name].copy())
            worst = max(worst, rel_err(np.asarray(emb_grads[name]), fd))
    return CheckResult("meta-gradients through unrolled loop", worst < tol, worst)


def run_all(fast: bool = False) -> list[CheckResult]:
    """The full verification ladder; ``fast`` trims draw counts."""
    scale = 0.3 if fast else 1.0

    def n(x):
        return max(3, int(round(x * scale)))

    checks = [
        lambda: check_primitives(draws=n(20)),
        lambda: check_grad_base(draws=n(50)),
        lambda: check_step_optimality(draws=n(20)),
        lambda: check_entropy_identities(draws=n(100)),
        lambda: check_hessian_oracles(draws=n(30)),
        lambda: check_ridge_convergence(episodes=n(20)),
        lambda: check_monotone_traces(episodes=n(500)),
        lambda: check_meta_gradients(draws=n(6)),
    ]
    results = []
    for chk in checks:
        t0 = time.perf_counter()
        res = chk()
        res.detail = (res.detail + ", " if res.detail else "") + f"{time.perf_counter() - t0:.1f}s"
        results.append(res)
    return results
