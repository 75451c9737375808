"""Evaluation protocol, ablation ladder, iteration sweeps, psi transfer.

Accuracy is reported as a percentage with a 95% confidence interval
(1.96 * sd / sqrt(E)) over per-episode accuracies, the standard few-shot
reporting convention. Everything is deterministic in (checkpoint, family,
protocol, seed) and independent of the thread count.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .data import TaskFamily
from .embedding import EmbeddingConfig
from .learner import InnerConfig
from .meta import (
    Checkpoint,
    MetaConfig,
    TrainResult,
    accuracy_over_episodes,
    episode_prediction,
    finetune_psi,
    train,
)
from .objective import Psi

__all__ = [
    "EvalReport",
    "Rung",
    "MAIN_LADDER",
    "DENSE_FREE_LADDER",
    "ci95",
    "evaluate",
    "train_rung",
    "run_ablation",
    "sweep_iterations",
    "crossval_psi",
    "confidence_report",
    "finetuned_lambda_tran",
]

# psi fields unlocked by the +LearnLoss rung; the transductive rung adds
# lambda_tran and beta on top.
LEARNLOSS_FIELDS = ("l_pos", "l_neg", "a_pos", "a_neg", "o_pos", "o_neg", "lambda_reg")
TRANSDUCTIVE_FIELDS = ("lambda_tran", "beta")


@dataclass
class EvalReport:
    label: str
    episodes: int
    mean_acc: float  # percent
    ci95: float
    per_episode: np.ndarray  # fractions in [0, 1]
    iterations: int
    ways: int
    shots: int
    seed: int

    def summary(self) -> str:
        return f"{self.mean_acc:.2f}±{self.ci95:.2f}"


def ci95(per_episode_percent: np.ndarray) -> float:
    """95% confidence interval of the mean over episodes."""
    x = np.asarray(per_episode_percent, dtype=np.float64)
    if x.size < 2:
        return 0.0
    return float(1.96 * np.std(x, ddof=1) / np.sqrt(x.size))


def evaluate(
    ckpt: Checkpoint,
    family: TaskFamily,
    split: str,
    ways: int,
    shots: int,
    episodes: int,
    seed: int,
    iterations: int | None = None,
    queries_per_class: int = 15,
    threads: int = 1,
    label: str = "",
) -> EvalReport:
    """Accuracy +- CI over deterministically sampled episodes."""
    if episodes < 2:
        raise ValueError("evaluate needs at least 2 episodes for a CI")
    accs = accuracy_over_episodes(
        ckpt,
        family,
        split,
        ways,
        shots,
        episodes,
        seed,
        iterations=iterations,
        queries_per_class=queries_per_class,
        threads=threads,
    )
    iters = ckpt.inner_cfg.iters_eval if iterations is None else iterations
    return EvalReport(
        label=label or f"{ways}-way {shots}-shot",
        episodes=episodes,
        mean_acc=float(np.mean(accs) * 100.0),
        ci95=ci95(accs * 100.0),
        per_episode=accs,
        iterations=iters,
        ways=ways,
        shots=shots,
        seed=seed,
    )


@dataclass(frozen=True)
class Rung:
    """One ablation configuration: what is enabled and what is learned."""

    label: str
    dense: bool
    init: str  # zero | support
    transductive: bool
    learnable: tuple  # psi fields updated by the meta-learner

    def make_psi(self, locations: int) -> Psi:
        v_len = locations if self.dense else 1
        # beta starts above 1 so the entropy term sees usefully sharp
        # softmaxes from the first meta-update; both stay meta-learned
        return Psi(
            v=np.full(v_len, 1.0 / v_len),
            lambda_tran=0.05,
            beta=2.0 if self.transductive else 1.0,
            transductive=self.transductive,
        )


MAIN_LADDER = (
    Rung("Baseline", dense=False, init="zero", transductive=False, learnable=()),
    Rung("+Initializer", dense=False, init="support", transductive=False, learnable=()),
    Rung("+DenseFeatures", dense=True, init="support", transductive=False, learnable=()),
    Rung("+LearnLoss", dense=True, init="support", transductive=False, learnable=LEARNLOSS_FIELDS + ("v",)),
    Rung(
        "+Transductive",
        dense=True,
        init="support",
        transductive=True,
        learnable=LEARNLOSS_FIELDS + ("v",) + TRANSDUCTIVE_FIELDS,
    ),
)

# Variant ladder that defers dense classification to the last rung.
DENSE_FREE_LADDER = (
    Rung("Baseline", dense=False, init="zero", transductive=False, learnable=()),
    Rung("+Initializer", dense=False, init="support", transductive=False, learnable=()),
    Rung("+LearnLoss", dense=False, init="support", transductive=False, learnable=LEARNLOSS_FIELDS),
    Rung(
        "+Transductive",
        dense=False,
        init="support",
        transductive=True,
        learnable=LEARNLOSS_FIELDS + TRANSDUCTIVE_FIELDS,
    ),
    Rung(
        "+Dense",
        dense=True,
        init="support",
        transductive=True,
        learnable=LEARNLOSS_FIELDS + ("v",) + TRANSDUCTIVE_FIELDS,
    ),
)


def train_rung(
    family: TaskFamily,
    emb_cfg: EmbeddingConfig,
    rung: Rung,
    meta_cfg: MetaConfig,
    inner_cfg: InnerConfig,
    seed: int,
    shots: int | None = None,
    warm_start: Checkpoint | None = None,
) -> TrainResult:
    """Meta-train one ablation configuration (optionally at a given shot).

    With ``warm_start``, psi values shared with the previous configuration
    carry over (the fusion vector only when its length matches) and the
    embedding continues from the previous parameters.
    """
    if shots is not None:
        meta_cfg = replace(meta_cfg, train_shots=shots, eval_shots=shots)
    inner_cfg = replace(inner_cfg, init=rung.init)
    psi = rung.make_psi(emb_cfg.locations)
    if warm_start is not None:
        prev = warm_start.psi
        for name in prev.raw:
            if name == "v":
                if prev.raw["v"].shape == psi.raw["v"].shape:
                    psi.raw["v"] = prev.raw["v"].copy()
            elif name == "lambda_tran" and not prev.transductive and psi.transductive:
                pass  # keep the rung's own transduction initials
            elif name == "beta" and not prev.transductive and psi.transductive:
                pass
            else:
                psi.raw[name] = np.float64(prev.raw[name])
    return train(
        family,
        emb_cfg,
        psi,
        meta_cfg,
        inner_cfg,
        seed=seed,
        learnable_psi=rung.learnable,
        dense=rung.dense,
        warm_start=warm_start,
    )


def run_ablation(
    family: TaskFamily,
    emb_cfg: EmbeddingConfig,
    meta_cfg: MetaConfig,
    inner_cfg: InnerConfig,
    seed: int,
    eval_episodes: int = 600,
    shots=(1, 5),
    ladder=MAIN_LADDER,
    threads: int = 1,
    keep_checkpoints: bool = False,
    progressive: bool = True,
    refine_epochs: int | None = None,
):
    """Train and evaluate every rung at every shot with shared seeds.

    In progressive mode (the default) each rung refines the previous
    rung's checkpoint with its extra component enabled, so a rung's row
    isolates that component's marginal effect at maturity instead of
    re-rolling the whole training lottery; the first rung always trains
    from scratch. ``refine_epochs`` caps the refinement budget (defaults
    to half the scratch epochs). Returns rows of
    (rung label, shot, EvalReport[, checkpoint]).
    """
    rows = []
    refine = max(1, meta_cfg.epochs // 2) if refine_epochs is None else refine_epochs
    for shot in shots:
        prev: Checkpoint | None = None
        for rung in ladder:
            if progressive and prev is not None:
                cfg = replace(meta_cfg, epochs=refine)
                result = train_rung(family, emb_cfg, rung, cfg, inner_cfg, seed, shots=shot, warm_start=prev)
            else:
                result = train_rung(family, emb_cfg, rung, meta_cfg, inner_cfg, seed, shots=shot)
            prev = result.checkpoint if progressive else None
            report = evaluate(
                result.checkpoint,
                family,
                "test",
                meta_cfg.ways,
                shot,
                eval_episodes,
                seed,
                queries_per_class=meta_cfg.queries_per_class,
                threads=threads,
                label=rung.label,
            )
            rows.append((rung.label, shot, report, result.checkpoint) if keep_checkpoints else (rung.label, shot, report))
    rows.sort(key=lambda r: ([rg.label for rg in ladder].index(r[0]), r[1]))
    return rows


def sweep_iterations(
    mode: str,
    grid,
    family: TaskFamily,
    seed: int,
    ckpt: Checkpoint | None = None,
    emb_cfg: EmbeddingConfig | None = None,
    rung: Rung | None = None,
    meta_cfg: MetaConfig | None = None,
    inner_cfg: InnerConfig | None = None,
    shots: int = 1,
    eval_episodes: int = 300,
    threads: int = 1,
):
    """Vary the inner-iteration budget.

    eval-side: evaluate a fixed checkpoint at each grid value.
    train-side: retrain per grid value, evaluating at the checkpoint's
    (fixed) eval iteration count.
    """
    grid = [int(g) for g in grid]
    if not grid:
        raise ValueError("sweep needs a non-empty grid")
    rows = []
    if mode == "eval-side":
        if ckpt is None:
            raise ValueError("eval-side sweep needs a checkpoint")
        for iters in grid:
            rep = evaluate(
                ckpt,
                family,
                "test",
                ckpt.meta_echo.get("ways", 5),
                shots,
                eval_episodes,
                seed,
                iterations=iters,
                threads=threads,
                label=f"eval_iters={iters}",
            )
            rows.append((iters, rep))
        return rows
    if mode == "train-side":
        if None in (emb_cfg, rung, meta_cfg, inner_cfg):
            raise ValueError("train-side sweep needs emb_cfg, rung, meta_cfg and inner_cfg")
        for iters in grid:
            cfg = replace(inner_cfg, iters_train=iters)
            result = train_rung(family, emb_cfg, rung, meta_cfg, cfg, seed, shots=shots)
            rep = evaluate(
                result.checkpoint,
                family,
                "test",
                meta_cfg.ways,
                shots,
                eval_episodes,
                seed,
                iterations=inner_cfg.iters_eval,
                threads=threads,
                label=f"train_iters={iters}",
            )
            rows.append((iters, rep))
        return rows
    raise ValueError(f"unknown sweep mode {mode!r} (expected eval-side or train-side)")


def crossval_psi(
    ckpt_a: Checkpoint,
    ckpt_b: Checkpoint,
    family_b: TaskFamily,
    shots: int,
    eval_episodes: int,
    seed: int,
    threads: int = 1,
):
    """Evaluate family B under its native psi and under psi imported from A.

    The embedding stays B's own; only the hyperparameter bundle crosses
    over, mirroring how learned loss parameters transfer across task
    distributions. Returns (native report, crossed report, delta).
    """
    if ckpt_a.psi.locations != ckpt_b.psi.locations:
        raise ValueError(
            f"psi fusion weights disagree: {ckpt_a.psi.locations} vs {ckpt_b.psi.locations} locations"
        )
    if ckpt_a.dense != ckpt_b.dense or ckpt_a.inner_cfg.init != ckpt_b.inner_cfg.init:
        raise ValueError("cross-validation needs structurally matching configurations")
    ways = ckpt_b.meta_echo.get("ways", 5)
    native = evaluate(
        ckpt_b, family_b, "test", ways, shots, eval_episodes, seed, threads=threads, label="native"
    )
    crossed_ckpt = ckpt_b.clone_params()
    crossed_ckpt.psi = ckpt_a.psi.clone()
    crossed = evaluate(
        crossed_ckpt, family_b, "test", ways, shots, eval_episodes, seed, threads=threads, label="crossval"
    )
    return native, crossed, crossed.mean_acc - native.mean_acc


def confidence_report(ckpt: Checkpoint, episode, iterations: int | None = None) -> dict:
    """Per-query softmax tables with transduction as learned vs forced off.

    Returns {"rows": [(variant, query_id, true_class, probs...)],
    "mean_max_prob": {variant: float}}.
    """
    variants = {}
    psi_on = ckpt.psi
    psi_off = ckpt.psi.clone()
    psi_off.transductive = False
    for name, psi in (("transductive", psi_on), ("inductive", psi_off)):
        _, probs, _ = episode_prediction(episode, ckpt, iterations, psi=psi)
        variants[name] = probs
    rows = []
    mean_max = {}
    for name, probs in variants.items():
        mean_max[name] = float(np.mean(np.max(probs, axis=1)))
        for q in range(probs.shape[0]):
            rows.append((name, q, int(episode.query_y[q]), probs[q].copy()))
    return {"rows": rows, "mean_max_prob": mean_max}


def finetuned_lambda_tran(
    ckpt: Checkpoint,
    family: TaskFamily,
    shots: int,
    seed: int | None = None,
) -> float:
    """Learned transductive weight after shot-specific fine-tuning."""
    tuned = finetune_psi(ckpt, family, shots, seed=seed)
    return tuned.psi.value("lambda_tran")
