"""Outer loop: episodic meta-training of the embedding and of psi.

Gradients reach psi and the embedding by backpropagating the query
cross-entropy through the unrolled inner optimizer. The optimizer is SGD
with Nesterov momentum; weight decay touches embedding parameters only
(psi entries are scalar hyperparameters whose magnitudes carry meaning).
"""

from __future__ import annotations

import json
import zlib
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Node, NumericsError, Tape
from .data import Episode, TaskFamily, sample_episode
from .embedding import EmbeddingConfig, embed, embedding_nodes, init_embedding, spatial_mean
from .learner import InnerConfig, InnerTrace, fuse_logits, predict, run_inner
from .objective import Psi, PsiNodes, Theta, build_episode_tensors, EpisodeTensors

__all__ = [
    "CheckpointError",
    "FinetuneConfig",
    "MetaConfig",
    "Checkpoint",
    "TrainResult",
    "NesterovSGD",
    "episode_forward",
    "episode_prediction",
    "episode_accuracy",
    "accuracy_over_episodes",
    "meta_loss",
    "outer_step",
    "train",
    "finetune_psi",
    "save_checkpoint",
    "load_checkpoint",
]

CKPT_MAGIC = b"FIML"
CKPT_VERSION = 1

# Disjoint episode-index ranges per purpose, so training, validation and
# held-out evaluation never replay one another's draws.
VAL_INDEX_BASE = 1 << 48
EVAL_INDEX_BASE = 1 << 52


class CheckpointError(IOError):
    """Raised for unreadable, corrupt or version-mismatched checkpoints."""


def family_spec_of(family: TaskFamily) -> dict:
    """Enough of a family description to rebuild it (or reload its file)."""
    return {
        "kind": family.kind,
        "classes": family.num_classes,
        "dim": family.dim,
        "split": list(family.split),
        "seed": family.seed,
        "dispersion": family.dispersion,
        "mean_scale": family.mean_scale,
        "cells": family.cells,
        "signal_dims": family.signal_dims,
        "noise_scale": family.noise_scale,
        "cell_jitter": family.cell_jitter,
        "path": family.extra.get("path"),
    }


@dataclass(frozen=True)
class FinetuneConfig:
    epochs: int = 10
    lr: float = 1e-3
    batches_per_epoch: int = 25
    freeze_embedding: bool = True


@dataclass(frozen=True)
class MetaConfig:
    epochs: int = 5
    batches_per_epoch: int = 50
    tasks_per_batch: int = 16
    lr: float = 0.02
    momentum: float = 0.9
    weight_decay: float = 5e-4
    ways: int = 5
    train_shots: int = 1
    eval_shots: int = 1
    queries_per_class: int = 15
    val_episodes: int = 100
    lr_decay_epochs: tuple = ()
    lr_decay_factor: float = 0.1
    finetune: FinetuneConfig = field(default_factory=FinetuneConfig)

    def __post_init__(self):
        if self.lr <= 0:
            raise ValueError("lr must be positive")
        if self.tasks_per_batch < 1:
            raise ValueError("tasks_per_batch must be >= 1")


@dataclass
class Checkpoint:
    """Everything needed to evaluate or resume a trained model."""

    psi: Psi
    emb_cfg: EmbeddingConfig
    emb_params: dict
    inner_cfg: InnerConfig
    dense: bool
    learnable: tuple
    meta_echo: dict
    seed: int
    episode_counter: int
    best_val_acc: float
    velocities: dict = field(default_factory=dict)
    family_spec: dict = field(default_factory=dict)
    version: int = CKPT_VERSION

    def clone_params(self) -> "Checkpoint":
        dup = Checkpoint(
            psi=self.psi.clone(),
            emb_cfg=self.emb_cfg,
            emb_params={k: v.copy() for k, v in self.emb_params.items()},
            inner_cfg=self.inner_cfg,
            dense=self.dense,
            learnable=tuple(self.learnable),
            meta_echo=dict(self.meta_echo),
            seed=self.seed,
            episode_counter=self.episode_counter,
            best_val_acc=self.best_val_acc,
            velocities={k: v.copy() for k, v in self.velocities.items()},
            family_spec=dict(self.family_spec),
        )
        return dup


@dataclass
class TrainResult:
    checkpoint: Checkpoint  # best-validation parameters
    final: Checkpoint  # parameters at the last step (for resuming)
    log: list  # per-epoch dicts: epoch, meta_loss, val_acc, val_ci95


class NesterovSGD:
    """SGD with Nesterov momentum in the look-ahead form.

    velocity <- mu * velocity - lr * g_eff
    param    <- param + mu * velocity - lr * g_eff

    where g_eff adds weight decay for parameters named in ``decay_keys``.
    """

    def __init__(self, lr: float, momentum: float = 0.9, weight_decay: float = 0.0, decay_keys=frozenset()):
        self.lr = lr
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.decay_keys = frozenset(decay_keys)
        self.velocity: dict[str, np.ndarray] = {}

    def step(self, params: dict, grads: dict) -> None:
        for name in params:
            g = np.asarray(grads[name], dtype=np.float64)
            if g.shape != params[name].shape:
                raise ad.ShapeError(f"gradient shape {g.shape} != parameter shape {params[name].shape} for {name}")
            if name in self.decay_keys:
                g = g + self.weight_decay * params[name]
            vel = self.momentum * self.velocity.get(name, 0.0) - self.lr * g
            self.velocity[name] = vel
            params[name] = params[name] + self.momentum * vel - self.lr * g


def outer_step(params: dict, grads: dict, optimizer: NesterovSGD) -> dict:
    """Apply one Nesterov update in place; returns the params dict."""
    optimizer.step(params, grads)
    return params


def _collapse(block: Node) -> Node:
    """Average the location axis away, leaving a single-location block."""
    b, _, f = block.shape
    return ad.reshape(spatial_mean(block), (b, 1, f))


def episode_forward(
    tape: Tape,
    episode: Episode,
    emb_cfg: EmbeddingConfig,
    emb_nodes: dict,
    pn: PsiNodes,
    dense: bool,
    iterations: int,
    init: str,
) -> tuple[EpisodeTensors, Theta, InnerTrace]:
    """Embed an episode, run the inner loop, return tensors and final head."""
    sup_block = embed(tape, emb_cfg, emb_nodes, episode.support_x)
    qry_block = embed(tape, emb_cfg, emb_nodes, episode.query_x) if episode.n_query else None
    if not dense:
        sup_block = _collapse(sup_block)
        qry_block = _collapse(qry_block) if qry_block is not None else None
    et = build_episode_tensors(tape, sup_block, episode.support_y, qry_block, pn, episode.ways)
    theta, trace = run_inner(tape, et, pn, iterations, init)
    return et, theta, trace


def episode_prediction(episode: Episode, ckpt: Checkpoint, iterations: int | None = None, psi: Psi | None = None):
    """Predicted classes and confidences for one episode under a checkpoint."""
    psi = ckpt.psi if psi is None else psi
    tape = Tape()
    pn = psi.nodes(tape)
    emb_nodes = embedding_nodes(tape, ckpt.emb_params)
    iters = ckpt.inner_cfg.iters_eval if iterations is None else iterations
    et, theta, trace = episode_forward(
        tape, episode, ckpt.emb_cfg, emb_nodes, pn, ckpt.dense, iters, ckpt.inner_cfg.init
    )
    pred, probs = predict(theta, et.query_block, pn.v)
    return pred, probs, trace


def episode_accuracy(episode: Episode, ckpt: Checkpoint, iterations: int | None = None) -> float:
    pred, _, _ = episode_prediction(episode, ckpt, iterations)
    return float(np.mean(pred == episode.query_y))


def accuracy_over_episodes(
    ckpt: Checkpoint,
    family: TaskFamily,
    split: str,
    ways: int,
    shots: int,
    episodes: int,
    seed: int,
    iterations: int | None = None,
    queries_per_class: int = 15,
    index_base: int = EVAL_INDEX_BASE,
    threads: int = 1,
) -> np.ndarray:
    """Per-episode accuracies, aggregated in episode-index order."""

    def one(i: int) -> float:
        ep = sample_episode(family, ways, shots, queries_per_class, seed, split=split, index=index_base + i)
        return episode_accuracy(ep, ckpt, iterations)

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            accs = list(pool.map(one, range(episodes)))
    else:
        accs = [one(i) for i in range(episodes)]
    return np.asarray(accs)


def meta_loss(
    tape: Tape,
    episodes: list,
    emb_cfg: EmbeddingConfig,
    emb_nodes: dict,
    pn: PsiNodes,
    inner_cfg: InnerConfig,
    dense: bool,
) -> Node:
    """Mean over tasks of the mean query cross-entropy after adaptation."""
    if not episodes:
        raise ValueError("meta_loss needs a non-empty episode batch")
    total = None
    for episode in episodes:
        if episode.n_query == 0:
            raise ValueError("meta_loss episodes need at least one query sample")
        et, theta, _ = episode_forward(tape, episode, emb_cfg, emb_nodes, pn, dense, inner_cfg.iters_train, inner_cfg.init)
        logits = fuse_logits(theta, et.query_block, pn.v)
        onehot = np.zeros((episode.n_query, episode.ways))
        onehot[np.arange(episode.n_query), episode.query_y] = 1.0
        ce = ad.sub(ad.logsumexp(logits), ad.reduce_sum(ad.mul(logits, tape.constant(onehot)), axis=-1))
        task_loss = ad.reduce_mean(ce)
        total = task_loss if total is None else ad.add(total, task_loss)
    return ad.scale(total, 1.0 / len(episodes))


def _param_dict(psi: Psi, emb_params: dict, learnable_psi, train_embedding: bool) -> dict:
    params = {}
    if train_embedding:
        for name, val in emb_params.items():
            params[f"phi.{name}"] = val.copy()
    for name in learnable_psi:
        params[f"psi.{name}"] = np.array(psi.raw[name], dtype=np.float64)
    return params


def _apply_params(params: dict, psi: Psi, emb_params: dict) -> None:
    for key, val in params.items():
        kind, name = key.split(".", 1)
        if kind == "phi":
            emb_params[name] = val
        else:
            psi.raw[name] = val if val.ndim else np.float64(val)


def _run_training_loop(
    family: TaskFamily,
    emb_cfg: EmbeddingConfig,
    emb_params: dict,
    psi: Psi,
    inner_cfg: InnerConfig,
    dense: bool,
    learnable_psi: tuple,
    train_embedding: bool,
    epochs: int,
    batches_per_epoch: int,
    tasks_per_batch: int,
    optimizer: NesterovSGD,
    meta_cfg: MetaConfig,
    seed: int,
    episode_counter: int,
    shots: int,
    split: str,
    validate: bool,
    log: list,
    lr_schedule=None,
    epoch_offset: int = 0,
):
    """Shared episodic loop for train() and finetune_psi()."""
    learnable = frozenset(learnable_psi)
    best = (-1.0, None)  # (val acc, params snapshot)
    for epoch in range(epoch_offset, epoch_offset + epochs):
        if lr_schedule is not None:
            optimizer.lr = lr_schedule(epoch)
        epoch_losses = []
        for batch_idx in range(batches_per_epoch):
            batch = []
            for _ in range(tasks_per_batch):
                batch.append(
                    sample_episode(
                        family,
                        meta_cfg.ways,
                        shots,
                        meta_cfg.queries_per_class,
                        seed,
                        split=split,
                        index=episode_counter,
                    )
                )
                episode_counter += 1
            tape = Tape()
            pn = psi.nodes(tape, learnable=learnable)
            emb_nodes = embedding_nodes(tape, emb_params, learnable=train_embedding)
            try:
                loss = meta_loss(tape, batch, emb_cfg, emb_nodes, pn, inner_cfg, dense)
            except NumericsError as err:
                raise NumericsError(f"epoch {epoch + 1}, batch {batch_idx + 1}: {err}") from err
            grads = tape.backward(loss)
            params = _param_dict(psi, emb_params, learnable_psi, train_embedding)
            grad_map = {}
            for key in params:
                kind, name = key.split(".", 1)
                node = emb_nodes[name] if kind == "phi" else pn.leaves[name]
                grad_map[key] = grads[node]
            outer_step(params, grad_map, optimizer)
            _apply_params(params, psi, emb_params)
            epoch_losses.append(loss.item())

        row = {"epoch": epoch + 1, "meta_loss": float(np.mean(epoch_losses))}
        if validate:
            snapshot = Checkpoint(
                psi=psi.clone(),
                emb_cfg=emb_cfg,
                emb_params={k: v.copy() for k, v in emb_params.items()},
                inner_cfg=inner_cfg,
                dense=dense,
                learnable=tuple(learnable_psi),
                meta_echo=asdict(meta_cfg),
                seed=seed,
                episode_counter=episode_counter,
                best_val_acc=0.0,
                family_spec=family_spec_of(family),
            )
            accs = accuracy_over_episodes(
                ckpt=snapshot,
                family=family,
                split="val",
                ways=meta_cfg.ways,
                shots=meta_cfg.eval_shots,
                episodes=meta_cfg.val_episodes,
                seed=seed,
                queries_per_class=meta_cfg.queries_per_class,
                index_base=VAL_INDEX_BASE + epoch * meta_cfg.val_episodes,
            )
            acc = float(np.mean(accs)) * 100.0
            ci = float(1.96 * np.std(accs * 100.0, ddof=1) / np.sqrt(len(accs))) if len(accs) > 1 else 0.0
            row["val_acc"] = acc
            row["val_ci95"] = ci
            if acc > best[0]:
                best = (acc, snapshot)
        log.append(row)
    return best, episode_counter


def train(
    family: TaskFamily,
    emb_cfg: EmbeddingConfig,
    psi: Psi,
    meta_cfg: MetaConfig,
    inner_cfg: InnerConfig,
    seed: int,
    learnable_psi=(),
    dense: bool = True,
    resume: Checkpoint | None = None,
    warm_start: Checkpoint | None = None,
) -> TrainResult:
    """Meta-train; returns the best-validation checkpoint plus the log.

    Deterministic in (family, configs, seed): episodes are drawn from a
    counter-based stream, so a replay (or a resumed run with the saved
    counter and velocities) reproduces training exactly. ``resume``
    continues an interrupted run bit-exactly; ``warm_start`` only seeds
    the embedding parameters and episode stream from another checkpoint
    (fresh optimizer), e.g. when refining the previous ablation rung.
    """
    psi = (resume.psi if resume else psi).clone()
    per_epoch = meta_cfg.batches_per_epoch * meta_cfg.tasks_per_batch
    if resume is not None:
        emb_params = {k: v.copy() for k, v in resume.emb_params.items()}
        episode_counter = resume.episode_counter
        epoch_offset = episode_counter // per_epoch if per_epoch else 0
    elif warm_start is not None:
        emb_params = {k: v.copy() for k, v in warm_start.emb_params.items()}
        episode_counter = warm_start.episode_counter
        epoch_offset = 0
    else:
        emb_params = init_embedding(emb_cfg, seed)
        episode_counter = 0
        epoch_offset = 0
    learnable_psi = tuple(learnable_psi)
    optimizer = NesterovSGD(
        meta_cfg.lr,
        meta_cfg.momentum,
        meta_cfg.weight_decay,
        decay_keys={f"phi.{n}" for n in emb_params},
    )
    if resume is not None:
        optimizer.velocity = {k: v.copy() for k, v in resume.velocities.items()}

    def lr_schedule(epoch):
        lr = meta_cfg.lr
        for cut in meta_cfg.lr_decay_epochs:
            if epoch >= cut:
                lr *= meta_cfg.lr_decay_factor
        return lr

    log: list = []
    best, episode_counter = _run_training_loop(
        family,
        emb_cfg,
        emb_params,
        psi,
        inner_cfg,
        dense,
        learnable_psi,
        True,
        meta_cfg.epochs,
        meta_cfg.batches_per_epoch,
        meta_cfg.tasks_per_batch,
        optimizer,
        meta_cfg,
        seed,
        episode_counter,
        meta_cfg.train_shots,
        "train",
        True,
        log,
        lr_schedule,
        epoch_offset,
    )
    final = Checkpoint(
        psi=psi.clone(),
        emb_cfg=emb_cfg,
        emb_params={k: v.copy() for k, v in emb_params.items()},
        inner_cfg=inner_cfg,
        dense=dense,
        learnable=learnable_psi,
        meta_echo=asdict(meta_cfg),
        seed=seed,
        episode_counter=episode_counter,
        best_val_acc=best[0] if best[1] is not None else 0.0,
        velocities={k: v.copy() for k, v in optimizer.velocity.items()},
        family_spec=family_spec_of(family),
    )
    if best[1] is not None:
        ckpt = best[1]
        ckpt.best_val_acc = best[0]
        ckpt.velocities = {k: v.copy() for k, v in optimizer.velocity.items()}
    else:
        ckpt = final
    return TrainResult(checkpoint=ckpt, final=final, log=log)


def finetune_psi(
    ckpt: Checkpoint,
    family: TaskFamily,
    shots: int,
    meta_cfg: MetaConfig | None = None,
    seed: int | None = None,
) -> Checkpoint:
    """Shot-specific psi refinement with the embedding frozen."""
    meta_cfg = MetaConfig(**{**ckpt.meta_echo, "finetune": FinetuneConfig(**ckpt.meta_echo["finetune"])}) if meta_cfg is None else meta_cfg
    ft = meta_cfg.finetune
    seed = ckpt.seed if seed is None else seed
    psi = ckpt.psi.clone()
    emb_params = {k: v.copy() for k, v in ckpt.emb_params.items()}
    train_embedding = not ft.freeze_embedding
    optimizer = NesterovSGD(ft.lr, meta_cfg.momentum, meta_cfg.weight_decay, decay_keys={f"phi.{n}" for n in emb_params} if train_embedding else frozenset())
    log: list = []
    _, counter = _run_training_loop(
        family,
        ckpt.emb_cfg,
        emb_params,
        psi,
        ckpt.inner_cfg,
        ckpt.dense,
        tuple(ckpt.learnable),
        train_embedding,
        ft.epochs,
        ft.batches_per_epoch,
        meta_cfg.tasks_per_batch,
        optimizer,
        meta_cfg,
        seed,
        ckpt.episode_counter,
        shots,
        "train",
        False,
        log,
    )
    tuned = ckpt.clone_params()
    tuned.psi = psi
    tuned.emb_params = emb_params
    tuned.episode_counter = counter
    tuned.velocities = {}
    return tuned


# --- FIML checkpoint serialization -------------------------------------------


def _u32(x: int) -> bytes:
    return int(x).to_bytes(4, "little")


def save_checkpoint(ckpt: Checkpoint, path) -> None:
    """Binary layout: magic, version byte, JSON header with an array
    manifest, float64 array payloads, CRC32 trailer."""
    arrays: list[tuple[str, np.ndarray]] = []
    for name in ckpt.psi.raw:
        arrays.append((f"psi.{name}", np.asarray(ckpt.psi.raw[name], dtype=np.float64)))
    for name, val in ckpt.emb_params.items():
        arrays.append((f"phi.{name}", np.asarray(val, dtype=np.float64)))
    for name, val in ckpt.velocities.items():
        arrays.append((f"vel.{name}", np.asarray(val, dtype=np.float64)))
    header = {
        "psi_transductive": ckpt.psi.transductive,
        "embedding": asdict(ckpt.emb_cfg),
        "inner": asdict(ckpt.inner_cfg),
        "dense": ckpt.dense,
        "learnable": list(ckpt.learnable),
        "meta": ckpt.meta_echo,
        "family": ckpt.family_spec,
        "seed": ckpt.seed,
        "episode_counter": ckpt.episode_counter,
        "best_val_acc_bits": np.float64(ckpt.best_val_acc).view(np.uint64).item(),
        "arrays": [[name, list(arr.shape)] for name, arr in arrays],
    }
    blob = CKPT_MAGIC + bytes([ckpt.version])
    header_bytes = json.dumps(header, sort_keys=True).encode()
    blob += _u32(len(header_bytes)) + header_bytes
    for _, arr in arrays:
        blob += arr.astype("<f8").reshape(-1).tobytes()
    with open(path, "wb") as f:
        f.write(blob + _u32(zlib.crc32(blob)))


def load_checkpoint(path) -> Checkpoint:
    try:
        with open(path, "rb") as f:
            blob = f.read()
    except OSError as err:
        raise CheckpointError(f"cannot read checkpoint: {err}") from err
    if len(blob) < 9 or blob[:4] != CKPT_MAGIC:
        raise CheckpointError("bad magic: not a FIML checkpoint")
    version = blob[4]
    if version != CKPT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    if zlib.crc32(blob[:-4]) != int.from_bytes(blob[-4:], "little"):
        raise CheckpointError("checksum mismatch")
    hlen = int.from_bytes(blob[5:9], "little")
    try:
        header = json.loads(blob[9 : 9 + hlen].decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as err:
        raise CheckpointError(f"corrupt header: {err}") from err
    offset = 9 + hlen
    values: dict[str, np.ndarray] = {}
    for name, shape in header["arrays"]:
        count = int(np.prod(shape, dtype=np.int64)) if shape else 1
        arr = np.frombuffer(blob, dtype="<f8", count=count, offset=offset).reshape(shape).copy()
        values[name] = arr
        offset += count * 8
    if offset != len(blob) - 4:
        raise CheckpointError("truncated or oversized payload")
    psi_raw = {k.split(".", 1)[1]: v for k, v in values.items() if k.startswith("psi.")}
    psi = Psi.from_raw(psi_raw, header["psi_transductive"])
    meta_echo = header["meta"]
    return Checkpoint(
        psi=psi,
        emb_cfg=EmbeddingConfig(**header["embedding"]),
        emb_params={k.split(".", 1)[1]: v for k, v in values.items() if k.startswith("phi.")},
        inner_cfg=InnerConfig(**header["inner"]),
        dense=header["dense"],
        learnable=tuple(header["learnable"]),
        meta_echo=meta_echo,
        seed=header["seed"],
        episode_counter=header["episode_counter"],
        best_val_acc=float(np.uint64(header["best_val_acc_bits"]).view(np.float64)),
        velocities={k.split(".", 1)[1]: v for k, v in values.items() if k.startswith("vel.")},
        family_spec=header.get("family", {}),
        version=version,
    )
