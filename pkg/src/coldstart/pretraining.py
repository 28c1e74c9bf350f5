"""Pre-training: ground-truth embeddings and the four pretext tasks.

Ground truth comes from pairwise-ranking matrix factorization trained
transductively on the abundant targets' interactions merged with the masked
test targets' kept interactions (one run per protocol side).

The four pretext tasks are trained independently, each with its own embedding
table, encoder parameters, and derived seeds, so any subset can run in any
order and produce bit-identical sections:

    Rg  reconstruct the target embedding with the GNN over sampler-chosen trees
    Cg  contrast two augmented views of the target's random tree (GNN)
    Rp  reconstruct from positioned masked walk sequences (transformer)
    Cp  contrast two augmented walks read at the target position (transformer)
"""

import time
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from . import encoders as enc
from .checkpoint import Checkpoint
from .data import ITEM, USER, BipartiteGraph, MaskedNeighborhood, mask_neighborhood
from .paths import augment_path, augment_subgraph, generate_paths, generate_positioned_paths
from .rng import rng_for
from .sampling import sample_dynamic, sample_importance, sample_random

TASK_CODES = ("Rg", "Cg", "Rp", "Cp")
GNN_TASKS = ("Rg", "Cg")
PATH_TASKS = ("Rp", "Cp")


class TaskDivergence(RuntimeError):
    def __init__(self, task: str, detail: str):
        super().__init__(f"task {task} diverged: {detail}")
        self.task = task


# ---------------------------------------------------------------------------
# ground truth


def _sigmoid(x):
    return np.where(x >= 0, 1.0 / (1.0 + np.exp(-x)), np.exp(x) / (1.0 + np.exp(x)))


def train_ground_truth(n_users: int, n_items: int, pairs, d: int, lr: float,
                       epochs: int, seed: int, reg: float = 1e-4):
    """Pairwise-ranking matrix factorization over implicit (user, item) pairs.

    One uniform negative per positive, resampled each epoch. Returns the user
    and item tables plus the per-epoch mean loss trace.
    """
    rng = rng_for(seed, "gt")
    P = rng.uniform(-0.01, 0.01, size=(n_users, d))
    Q = rng.uniform(-0.01, 0.01, size=(n_items, d))
    pairs = np.asarray(sorted(pairs), dtype=np.int64)
    if len(pairs) == 0:
        raise ValueError("train_ground_truth: no training pairs")
    pos_items = {}
    for u, i in pairs:
        pos_items.setdefault(int(u), set()).add(int(i))
    losses = []
    for _ in range(epochs):
        order = rng.permutation(len(pairs))
        total = 0.0
        for idx in order:
            u, i = int(pairs[idx][0]), int(pairs[idx][1])
            j = int(rng.integers(n_items))
            while j in pos_items[u]:
                j = int(rng.integers(n_items))
            x = P[u] @ (Q[i] - Q[j])
            s = _sigmoid(-x)
            total += float(np.logaddexp(0.0, -x))
            gu = s * (Q[i] - Q[j]) - reg * P[u]
            gi = s * P[u] - reg * Q[i]
            gj = -s * P[u] - reg * Q[j]
            P[u] += lr * gu
            Q[i] += lr * gi
            Q[j] += lr * gj
        losses.append(total / len(pairs))
    return P, Q, losses


def ground_truth_pairs(graph: BipartiteGraph, split, masked: dict) -> list[tuple[int, int]]:
    """Merged training pairs for one protocol side: all interactions of the
    training targets plus only the kept first-order interactions of the masked
    test targets."""
    pairs: set[tuple[int, int]] = set()
    side = split.side
    for t in split.train:
        t = int(t)
        for c in graph.neighbors(side, t):
            pairs.add((t, int(c)) if side == USER else (int(c), t))
    for t in split.test:
        t = int(t)
        tree = masked[t]
        for tn in tree.layers[1]:
            pairs.add((t, tn.node) if side == USER else (tn.node, t))
    return sorted(pairs)


@dataclass
class GroundTruth:
    """Embedding tables from the two protocol runs; lookup by target node."""

    user_run: tuple[np.ndarray, np.ndarray]  # (P, Q) from the user-side protocol
    item_run: tuple[np.ndarray, np.ndarray]

    def target_vec(self, side: str, node: int) -> np.ndarray:
        if side == USER:
            return self.user_run[0][node]
        return self.item_run[1][node]


# ---------------------------------------------------------------------------
# losses


def reconstruction_loss(tape, preds: list[ad.Tensor], targets: list[np.ndarray]) -> ad.Tensor:
    """Mean over the batch of 1 - cos(prediction, ground truth)."""
    if not preds:
        raise ValueError("reconstruction_loss: empty batch")
    terms = []
    for p, t in zip(preds, targets):
        c = ad.cosine_sim(tape, p, ad.Tensor(t))
        terms.append(ad.add_scalar(tape, ad.mul_scalar(tape, c, -1.0), 1.0))
    return ad.mul_scalar(tape, ad.add_n(tape, terms), 1.0 / len(terms))


def contrastive_loss(tape, z: list[ad.Tensor], tau: float) -> ad.Tensor:
    """Normalized-temperature cross entropy over 2N projected vectors.

    Views 2i and 2i+1 are positives. For each anchor m the denominator sums
    exp(cos(z_m, z_k)/tau) over every k != m; the loss averages over all 2N
    anchors.
    """
    if tau <= 0:
        raise ValueError(f"contrastive temperature must be positive, got {tau}")
    n2 = len(z)
    if n2 < 2 or n2 % 2 != 0:
        raise ValueError(f"contrastive_loss: need an even number >= 2 of views, got {n2}")
    normed = []
    for zi in z:
        ss = ad.add_scalar(tape, ad.matmul(tape, zi, zi), 1e-24)
        inv = ad.powf(tape, ss, -0.5)
        normed.append(ad.smul(tape, zi, inv))
    zmat = ad.stack_rows(tape, normed)
    sims = ad.matmul(tape, zmat, ad.transpose(tape, zmat))
    logits = ad.mul_scalar(tape, sims, 1.0 / tau)
    off_diag = ad.Tensor(1.0 - np.eye(n2))
    denom = ad.log(tape, ad.sum_(tape, ad.mul(tape, ad.exp(tape, logits), off_diag), axis=1))
    pair = np.zeros((n2, n2))
    for m in range(n2):
        pair[m, m + 1 if m % 2 == 0 else m - 1] = 1.0
    pos = ad.sum_(tape, ad.mul(tape, logits, ad.Tensor(pair)), axis=1)
    return ad.mean(tape, ad.sub(tape, denom, pos))


def bpr_loss(tape, pos_scores: ad.Tensor, neg_scores: ad.Tensor) -> ad.Tensor:
    """Mean of -ln sigmoid(pos - neg)."""
    diff = ad.sigmoid(tape, ad.sub(tape, pos_scores, neg_scores))
    return ad.mul_scalar(tape, ad.mean(tape, ad.log(tape, diff)), -1.0)


# ---------------------------------------------------------------------------
# per-task setup


@dataclass
class PretrainConfig:
    d: int = 32
    layers: int = 4
    path_len: int = 6
    k: int = 3
    tau: float = 0.2
    delete_ratio: float = 0.2
    subst_ratio: float = 0.2
    aug: str = "delete"
    lr: float = 0.003
    epochs: int = 10
    recon_batch: int = 128
    contrast_batch: int = 64
    blocks: int = 2
    heads: int = 2
    sampler: str = "dynamic"


@dataclass
class TaskState:
    code: str
    store: ad.ParamStore
    n_users: int
    n_items: int


def init_task(code: str, graph: BipartiteGraph, cfg: PretrainConfig, seed: int) -> TaskState:
    """Independent parameter set for one pretext task, including the frozen
    meta-embedding table for the GNN tasks."""
    store = ad.ParamStore()
    nu, ni = graph.n_users, graph.n_items
    v = enc.vocab_size(nu, ni)
    store.register(f"{code}/embed", enc.init_embedding(rng_for(seed, code, "embed"), v, cfg.d))
    if code in GNN_TASKS:
        enc.init_meta_params(store, code, cfg.d, seed)
        enc.init_gnn_params(store, code, cfg.d, cfg.layers, seed)
        meta = enc.compute_meta_table(
            graph, store[f"{code}/embed"].data,
            store[f"{code}/meta/wq"].data, store[f"{code}/meta/wk"].data,
            store[f"{code}/meta/wv"].data, cfg.k, seed)
        store.register(f"{code}/meta_table", meta, frozen=True)
    else:
        enc.init_transformer_params(store, code, cfg.d, cfg.path_len, cfg.blocks, cfg.heads, seed)
    if code in ("Cg", "Cp"):
        enc.init_projection_params(store, code, cfg.d, seed)
    return TaskState(code, store, nu, ni)


def _batches(items, size, rng):
    order = rng.permutation(len(items))
    for start in range(0, len(items), size):
        yield [items[int(j)] for j in order[start:start + size]]


def _sample_tree(kind, graph, target, k, l_max, seed, meta=None, cur=None):
    if kind == "random":
        return sample_random(graph, target, k, l_max, seed)
    if kind == "importance":
        return sample_importance(graph, target, k, l_max, seed)
    if kind == "dynamic":
        return sample_dynamic(graph, target, k, l_max, meta, cur)
    raise ValueError(f"unknown sampler kind: {kind!r}")


# ---------------------------------------------------------------------------
# task epochs


@dataclass
class EpochLog:
    task: str
    epoch: int
    loss: float
    wall_ms: float
    skipped: int = 0


def sample_recon_trees(state, graph, targets, cfg, seed, epoch, sampler=None):
    """Per-epoch trees for the reconstruction task (dynamic trees use the
    embedding table as of the end of the previous epoch)."""
    store = state.store
    meta = store[f"{state.code}/meta_table"].data if f"{state.code}/meta_table" in store else None
    cur = store[f"{state.code}/embed"].data
    kind = sampler if sampler is not None else cfg.sampler
    trees = {}
    for t in targets:
        trees[t] = _sample_tree(kind, graph, t, cfg.k, cfg.layers,
                                int(rng_for(seed, state.code, "tree", epoch, t[0], t[1]).integers(2 ** 31)),
                                meta=meta, cur=cur)
    return trees


def train_on_recon_trees(state, trees, targets, gt, cfg, seed, epoch):
    """The gradient pass of the reconstruction task over pre-sampled trees."""
    store = state.store
    rng = rng_for(seed, state.code, "order", epoch)
    total, count = 0.0, 0
    for batch in _batches(targets, cfg.recon_batch, rng):
        tape = ad.Tape()
        preds, gts = [], []
        for t in batch:
            preds.append(enc.gnn_forward(tape, store, state.code, trees[t], cfg.layers, state.n_users))
            gts.append(gt.target_vec(*t))
        loss = reconstruction_loss(tape, preds, gts)
        ad.backward(tape, loss)
        ad.optimizer_step(store, "adam", cfg.lr)
        total += float(loss.data) * len(batch)
        count += len(batch)
    return total / count


def _gnn_recon_epoch(state, graph, targets, gt, cfg, seed, epoch):
    """One epoch of embedding reconstruction: sampler-selected trees (dynamic
    by default, recomputed from the current table), cosine alignment to the
    ground truth."""
    trees = sample_recon_trees(state, graph, targets, cfg, seed, epoch)
    return train_on_recon_trees(state, trees, targets, gt, cfg, seed, epoch), 0


def _gnn_contrast_epoch(state, graph, targets, gt, cfg, seed, epoch):
    """One epoch of subgraph contrast: two augmented views per target."""
    store = state.store
    rng = rng_for(seed, state.code, "order", epoch)
    total, count, skipped = 0.0, 0, 0
    for batch in _batches(targets, cfg.contrast_batch, rng):
        tape = ad.Tape()
        views = []
        for t in batch:
            base_seed = int(rng_for(seed, state.code, "tree", epoch, t[0], t[1]).integers(2 ** 31))
            tree = sample_random(graph, t, cfg.k, cfg.layers, base_seed)
            pair = []
            for v in (0, 1):
                ratio = cfg.delete_ratio if cfg.aug != "substitute" else cfg.subst_ratio
                aug = augment_subgraph(tree, graph, cfg.aug, ratio,
                                       int(rng_for(seed, state.code, "aug", epoch, t[0], t[1], v).integers(2 ** 31)))
                try:
                    h = enc.gnn_forward(tape, store, state.code, aug, cfg.layers, state.n_users)
                except ValueError:
                    pair = []
                    break
                pair.append(enc.project(tape, store, state.code, h))
            if len(pair) == 2:
                views.extend(pair)
            else:
                skipped += 1
        if len(views) < 4:
            skipped += len(views) // 2
            continue
        loss = contrastive_loss(tape, views, cfg.tau)
        ad.backward(tape, loss)
        ad.optimizer_step(store, "adam", cfg.lr)
        total += float(loss.data) * (len(views) // 2)
        count += len(views) // 2
    if count == 0:
        raise TaskDivergence(state.code, "every contrastive batch was skipped")
    return total / count, skipped


def _path_recon_epoch(state, graph, targets, gt, cfg, seed, epoch):
    """One epoch of masked-path reconstruction over positioned walks."""
    store = state.store
    rng = rng_for(seed, state.code, "order", epoch)
    total, count, skipped = 0.0, 0, 0
    for batch in _batches(targets, cfg.recon_batch, rng):
        tape = ad.Tape()
        preds, gts = [], []
        for t in batch:
            tree = sample_random(graph, t, cfg.k, cfg.layers,
                                 int(rng_for(seed, state.code, "tree", epoch, t[0], t[1]).integers(2 ** 31)))
            paths = generate_positioned_paths(
                tree, t, cfg.path_len,
                int(rng_for(seed, state.code, "paths", epoch, t[0], t[1]).integers(2 ** 31)))
            if not paths:
                skipped += 1
                continue
            reads = [enc.encode_masked_path(tape, store, state.code, mp,
                                            state.n_users, state.n_items, cfg.blocks, cfg.heads)
                     for mp in paths]
            stacked = ad.stack_rows(tape, reads)
            preds.append(ad.mean(tape, stacked, axis=0))
            gts.append(gt.target_vec(*t))
        if not preds:
            continue
        loss = reconstruction_loss(tape, preds, gts)
        ad.backward(tape, loss)
        ad.optimizer_step(store, "adam", cfg.lr)
        total += float(loss.data) * len(preds)
        count += len(preds)
    if count == 0:
        raise TaskDivergence(state.code, "no valid paths in any batch")
    return total / count, skipped


def _path_contrast_epoch(state, graph, targets, gt, cfg, seed, epoch):
    """One epoch of walk contrast: two augmentations of the target's walk,
    read at the (never deleted) target position."""
    store = state.store
    rng = rng_for(seed, state.code, "order", epoch)
    total, count, skipped = 0.0, 0, 0
    for batch in _batches(targets, cfg.contrast_batch, rng):
        tape = ad.Tape()
        views = []
        for t in batch:
            tree = sample_random(graph, t, cfg.k, cfg.layers,
                                 int(rng_for(seed, state.code, "tree", epoch, t[0], t[1]).integers(2 ** 31)))
            walk = generate_paths(tree, t, cfg.path_len, 1,
                                  int(rng_for(seed, state.code, "walk", epoch, t[0], t[1]).integers(2 ** 31)))[0]
            if len(walk.nodes) < 2:
                skipped += 1
                continue
            pair = []
            for v in (0, 1):
                ratio = cfg.delete_ratio if cfg.aug != "substitute" else cfg.subst_ratio
                aug = augment_path(walk.nodes, cfg.aug, ratio,
                                   int(rng_for(seed, state.code, "aug", epoch, t[0], t[1], v).integers(2 ** 31)),
                                   graph=graph, protect=0)
                pos = aug.kept_from.index(0)
                h = enc.encode_path_at(tape, store, state.code, aug.nodes, pos,
                                       state.n_users, state.n_items, cfg.blocks, cfg.heads)
                pair.append(enc.project(tape, store, state.code, h))
            views.extend(pair)
        if len(views) < 4:
            skipped += len(views) // 2
            continue
        loss = contrastive_loss(tape, views, cfg.tau)
        ad.backward(tape, loss)
        ad.optimizer_step(store, "adam", cfg.lr)
        total += float(loss.data) * (len(views) // 2)
        count += len(views) // 2
    if count == 0:
        raise TaskDivergence(state.code, "every contrastive batch was skipped")
    return total / count, skipped


_EPOCH_FNS = {
    "Rg": _gnn_recon_epoch,
    "Cg": _gnn_contrast_epoch,
    "Rp": _path_recon_epoch,
    "Cp": _path_contrast_epoch,
}


def train_task(code: str, graph: BipartiteGraph, targets, gt: GroundTruth,
               cfg: PretrainConfig, seed: int):
    """Train one pretext task to completion; returns (state, epoch logs)."""
    state = init_task(code, graph, cfg, seed)
    logs = []
    fn = _EPOCH_FNS[code]
    for epoch in range(cfg.epochs):
        t0 = time.perf_counter()
        try:
            loss, skipped = fn(state, graph, targets, gt, cfg, seed, epoch)
        except FloatingPointError as e:
            raise TaskDivergence(code, str(e)) from None
        if not np.isfinite(loss):
            raise TaskDivergence(code, f"epoch {epoch} loss is not finite")
        logs.append(EpochLog(code, epoch, loss, (time.perf_counter() - t0) * 1e3, skipped))
    return state, logs


@dataclass
class PretrainResult:
    checkpoint: Checkpoint
    logs: list[EpochLog] = field(default_factory=list)
    failed: list[str] = field(default_factory=list)


def pretrain_all(graph: BipartiteGraph, targets, gt: GroundTruth, cfg: PretrainConfig,
                 seed: int, fingerprint: str, tasks=TASK_CODES, order=None) -> PretrainResult:
    """Train the enabled pretext tasks and assemble one checkpoint.

    Tasks share nothing mutable: each derives its own seeds and parameters, so
    any execution order yields a bit-identical checkpoint. A diverged task is
    left out and the checkpoint is marked partial.
    """
    tasks = list(tasks)
    for t in tasks:
        if t not in TASK_CODES:
            raise ValueError(f"unknown pretext task: {t!r}")
    run_order = list(order) if order is not None else tasks
    arrays: dict[str, np.ndarray] = {}
    logs: list[EpochLog] = []
    failed: list[str] = []
    for code in run_order:
        try:
            state, task_logs = train_task(code, graph, targets, gt, cfg, seed)
        except TaskDivergence as e:
            failed.append(e.task)
            continue
        logs.extend(task_logs)
        arrays.update(state.store.state_arrays())
    ckpt = Checkpoint(fingerprint, arrays, partial=bool(failed))
    return PretrainResult(ckpt, logs, failed)


def pretrain_targets(user_split, item_split) -> list[tuple[str, int]]:
    """Training targets: the abundant train-partition nodes of both sides."""
    return ([(USER, int(u)) for u in user_split.train]
            + [(ITEM, int(i)) for i in item_split.train])


def masked_test_neighborhoods(graph, split, k, l_max, seed) -> dict[int, MaskedNeighborhood]:
    """The fixed cold-start-simulated trees for a side's test targets."""
    return {int(t): mask_neighborhood(graph, (split.side, int(t)), k, l_max, seed)
            for t in split.test}
