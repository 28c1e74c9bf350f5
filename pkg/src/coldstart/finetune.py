"""Fusion of the pre-trained task embeddings and downstream fine-tuning.

A node's final embedding concatenates the embeddings inferred by every enabled
pretext encoder and projects them with one shared fusion matrix; relevance is
the inner product of the fused user and item embeddings. Fine-tuning trains
everything (or just the fusion matrix, with freeze_encoders) with the pairwise
ranking loss over the cold users' training interactions.

Inference inputs (trees and positioned walks) are sampled once at fine-tune
start and frozen, so steps and evaluation see stable structures.
"""

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from . import encoders as enc
from .checkpoint import Checkpoint
from .data import ITEM, USER, BipartiteGraph
from .paths import generate_positioned_paths
from .pretraining import GNN_TASKS, TASK_CODES, bpr_loss
from .rng import rng_for
from .sampling import sample_dynamic, sample_random

Node = tuple[str, int]


@dataclass
class InferenceConfig:
    d: int = 32
    layers: int = 4
    path_len: int = 6
    k: int = 8
    sampler: str = "dynamic"
    blocks: int = 2
    heads: int = 2
    lr: float = 0.003
    epochs: int = 10
    batch: int = 64
    replan: bool = False  # re-sample inference plans at each epoch start


def load_store(ckpt: Checkpoint) -> tuple[ad.ParamStore, list[str]]:
    """Rebuild a parameter store from a checkpoint; meta tables stay frozen.
    Returns the store and the enabled task codes found in it."""
    store = ad.ParamStore()
    for name in sorted(ckpt.arrays):
        store.register(name, ckpt.arrays[name].copy(), frozen=name.endswith("meta_table"))
    enabled = [c for c in TASK_CODES if any(n.startswith(c + "/") for n in ckpt.arrays)]
    if not enabled:
        raise ValueError("checkpoint contains no pretext task sections")
    return store, enabled


def fusion_init(d: int, n_tasks: int) -> np.ndarray:
    """Stacked identity/m blocks: the fused embedding starts as the mean of
    the enabled task embeddings."""
    return np.vstack([np.eye(d) / n_tasks for _ in range(n_tasks)])


@dataclass
class NodePlan:
    trees: dict[str, object] = field(default_factory=dict)  # task -> tree
    paths: dict[str, list] = field(default_factory=dict)  # task -> positioned walks


def build_plan(graph: BipartiteGraph, node: Node, store: ad.ParamStore, enabled,
               cfg: InferenceConfig, seed: int) -> NodePlan:
    """Frozen per-node inference inputs: one tree per GNN task (the
    reconstruction task uses the configured sampler), one tree plus positioned
    walks per path task."""
    plan = NodePlan()
    for code in enabled:
        tree_seed = int(rng_for(seed, "plan", code, node[0], node[1]).integers(2 ** 31))
        if code == "Rg" and cfg.sampler == "dynamic":
            tree = sample_dynamic(graph, node, cfg.k, cfg.layers,
                                  store["Rg/meta_table"].data, store["Rg/embed"].data)
        else:
            tree = sample_random(graph, node, cfg.k, cfg.layers, tree_seed)
        if code in GNN_TASKS:
            plan.trees[code] = tree
        else:
            path_seed = int(rng_for(seed, "plan-paths", code, node[0], node[1]).integers(2 ** 31))
            plan.paths[code] = generate_positioned_paths(tree, node, cfg.path_len, path_seed)
    return plan


def encode_node(tape, store: ad.ParamStore, plan: NodePlan, enabled,
                cfg: InferenceConfig, n_users: int, n_items: int) -> list[ad.Tensor]:
    """Per-task embeddings for one node from its frozen plan, in task order."""
    out = []
    for code in enabled:
        if code in GNN_TASKS:
            out.append(enc.gnn_forward(tape, store, code, plan.trees[code], cfg.layers, n_users))
        elif code == "Rp":
            reads = [enc.encode_masked_path(tape, store, code, mp, n_users, n_items,
                                            cfg.blocks, cfg.heads)
                     for mp in plan.paths[code]]
            out.append(ad.mean(tape, ad.stack_rows(tape, reads), axis=0))
        else:  # Cp reads the target position of the unmasked walks
            reads = [enc.encode_path_at(tape, store, code, mp.nodes, mp.pos, n_users, n_items,
                                        cfg.blocks, cfg.heads)
                     for mp in plan.paths[code]]
            out.append(ad.mean(tape, ad.stack_rows(tape, reads), axis=0))
    return out


def infer_fused(tape, store: ad.ParamStore, task_embs: list[ad.Tensor]) -> ad.Tensor:
    return ad.matmul(tape, ad.concat(tape, task_embs, axis=0), store["fuse/w"])


def relevance(tape, h_user: ad.Tensor, h_item: ad.Tensor) -> ad.Tensor:
    return ad.matmul(tape, h_user, h_item)


@dataclass
class FinetunedModel:
    store: ad.ParamStore
    enabled: list[str]
    cfg: InferenceConfig
    n_users: int
    n_items: int
    plans: dict[Node, NodePlan]
    loss_trace: list[float] = field(default_factory=list)

    def fused_vec(self, node: Node) -> np.ndarray:
        embs = encode_node(None, self.store, self.plans[node], self.enabled,
                           self.cfg, self.n_users, self.n_items)
        return infer_fused(None, self.store, embs).data


def finetune(graph_ft: BipartiteGraph, ext_split, ckpt: Checkpoint,
             cfg: InferenceConfig, seed: int, freeze_encoders: bool = False) -> FinetunedModel:
    """Pairwise-ranking fine-tuning of the fused model on cold users' training
    interactions. graph_ft must not contain the held-out test interactions.

    One uniform negative per positive, resampled each epoch, drawn from the
    items outside the user's training set. Items that end up with no neighbors
    in graph_ft cannot be encoded and are left out of the candidate set.

    Neighborhood plans are sampled once up front and held fixed; with
    cfg.replan they are rebuilt at the start of every later epoch, so dynamic
    trees follow the moving embedding tables.
    """
    store, enabled = load_store(ckpt)
    n_users, n_items = graph_ft.n_users, graph_ft.n_items
    store.register("fuse/w", fusion_init(cfg.d, len(enabled)))
    if freeze_encoders:
        store.frozen.update(n for n in store.params if not n.startswith("fuse/"))

    users = sorted(int(u) for u in ext_split.train)
    candidates = [i for i in range(n_items) if graph_ft.degree(ITEM, i) > 0]
    plans: dict[Node, NodePlan] = {}
    for u in users:
        plans[(USER, u)] = build_plan(graph_ft, (USER, u), store, enabled, cfg, seed)
    for i in candidates:
        plans[(ITEM, i)] = build_plan(graph_ft, (ITEM, i), store, enabled, cfg, seed)

    cand_set = set(candidates)
    positives = [(u, int(i)) for u in users for i, _ in ext_split.train[u]
                 if int(i) in cand_set]
    train_items = {u: {int(i) for i, _ in ext_split.train[u]} for u in users}

    model = FinetunedModel(store, enabled, cfg, n_users, n_items, plans)
    for epoch in range(cfg.epochs):
        if cfg.replan and epoch > 0:
            pseed = int(rng_for(seed, "replan", epoch).integers(2 ** 31))
            for u in users:
                plans[(USER, u)] = build_plan(graph_ft, (USER, u), store, enabled, cfg, pseed)
            for i in candidates:
                plans[(ITEM, i)] = build_plan(graph_ft, (ITEM, i), store, enabled, cfg, pseed)
        rng = rng_for(seed, "ft", epoch)
        order = rng.permutation(len(positives))
        total = 0.0
        for start in range(0, len(order), cfg.batch):
            batch = [positives[int(j)] for j in order[start:start + cfg.batch]]
            triples = []
            for u, i in batch:
                j = int(candidates[int(rng.integers(len(candidates)))])
                while j in train_items[u]:
                    j = int(candidates[int(rng.integers(len(candidates)))])
                triples.append((u, i, j))
            tape = ad.Tape()
            needed: list[Node] = sorted({(USER, u) for u, _, _ in triples}
                                        | {(ITEM, i) for _, i, _ in triples}
                                        | {(ITEM, j) for _, _, j in triples})
            fused = {}
            for node in needed:
                embs = encode_node(tape, store, plans[node], enabled, cfg, n_users, n_items)
                fused[node] = infer_fused(tape, store, embs)
            pos = ad.concat(tape, [_as1(tape, relevance(tape, fused[(USER, u)], fused[(ITEM, i)]))
                                   for u, i, _ in triples], axis=0)
            neg = ad.concat(tape, [_as1(tape, relevance(tape, fused[(USER, u)], fused[(ITEM, j)]))
                                   for u, _, j in triples], axis=0)
            loss = bpr_loss(tape, pos, neg)
            ad.backward(tape, loss)
            ad.optimizer_step(store, "adam", cfg.lr)
            total += float(loss.data) * len(batch)
        model.loss_trace.append(total / max(len(positives), 1))
    return model


def _as1(tape, t: ad.Tensor) -> ad.Tensor:
    """Scalar () -> shape (1,) so batch scores can be concatenated."""
    return ad.smul(tape, ad.Tensor(np.ones(1)), t)


def model_checkpoint(model: FinetunedModel, fingerprint: str) -> Checkpoint:
    return Checkpoint(fingerprint, model.store.state_arrays())
