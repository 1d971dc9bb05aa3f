"""Episodic meta-training, early stopping, ablations and gradient verification."""

from __future__ import annotations

import copy
import json
import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
import torch

from . import mtransh
from .checkpoint import Checkpoint
from .config import ConfigError, TrainConfig
from .evaluation import evaluate
from .kg_data import EmbeddingTable, Episode, KnowledgeGraph, TaskSplit, sample_episode
from .model import EpisodeBatch, GANAModel

logger = logging.getLogger(__name__)


class TrainingError(RuntimeError):
    pass


class DivergenceError(TrainingError):
    def __init__(self, message: str, diagnostics: dict):
        super().__init__(message)
        self.diagnostics = diagnostics


def apply_ablation(config: TrainConfig, model: GANAModel | None = None, ablation: Sequence[str] = ()):
    """Return ``config`` (and a rebuilt view of ``model``) with extra ablation flags switched on.

    ``no_gate`` pins the gate to 1, ``no_gana`` feeds raw ``[e_h; e_t]`` to the
    encoder, ``no_mtransh`` drops the hyperplane projection.
    """
    flags = tuple(sorted(set(config.ablation) | set(ablation)))
    new_cfg = config.replace(ablation=flags)  # validates, raises ConfigError on conflicts
    if model is None:
        return new_cfg
    model.config = new_cfg
    return model


# ---------------------------------------------------------------------------
# trainer
# ---------------------------------------------------------------------------

def _eligible(split: TaskSplit, relations: Sequence[int], K: int) -> list[int]:
    return [r for r in relations if len(split.few_shot_relations[r]) >= K + 1]


class Trainer:
    def __init__(self, graph: KnowledgeGraph, split: TaskSplit, config: TrainConfig,
                 embeddings: EmbeddingTable, checkpoint: Checkpoint | None = None, workers: int = 1):
        self.graph, self.split, self.config = graph, split, config
        self.workers = workers
        self.relations = _eligible(split, split.train_relations, config.K)
        if not self.relations:
            raise TrainingError(f"no training relation has at least K+1={config.K + 1} triples")
        self.valid_relations = _eligible(split, split.valid_relations, config.K)
        self.model = GANAModel(graph, embeddings, config, np.random.default_rng([config.seed, 1]))
        self.rng = np.random.default_rng([config.seed, 2])
        params = list(self.model.outer_parameters().values())
        if config.optimizer == "adam":
            self.optimizer = torch.optim.Adam(params, lr=config.outer_lr)
        else:
            self.optimizer = torch.optim.SGD(params, lr=config.outer_lr)
        self.step_count = 0
        self.best_val_mrr: float | None = None
        self.log: list[dict] = []
        if checkpoint is not None:
            self.restore(checkpoint)

    # -- state ----------------------------------------------------------------
    def checkpoint(self) -> Checkpoint:
        tensors = {k: v.detach().numpy().copy() for k, v in self.model.named_parameters()}
        return Checkpoint(self.config.to_dict(), tensors, self._optimizer_tensors(), self.step_count,
                          self.best_val_mrr, copy.deepcopy(self.rng.bit_generator.state))

    def restore(self, ckpt: Checkpoint) -> None:
        params = dict(self.model.named_parameters())
        missing = set(params) - set(ckpt.tensors)
        if missing:
            raise TrainingError(f"checkpoint lacks tensors: {sorted(missing)}")
        with torch.no_grad():
            for name, p in params.items():
                arr = ckpt.tensors[name]
                if tuple(arr.shape) != tuple(p.shape):
                    raise TrainingError(f"shape mismatch for {name}: {arr.shape} vs {tuple(p.shape)}")
                p.copy_(torch.from_numpy(np.array(arr)))
        self._load_optimizer_tensors(ckpt.optimizer)
        self.step_count = ckpt.step
        self.best_val_mrr = ckpt.best_val_mrr
        if ckpt.rng_state is not None:
            self.rng.bit_generator.state = ckpt.rng_state

    def _optimizer_tensors(self) -> dict[str, np.ndarray]:
        out = {}
        names = list(self.model.outer_parameters())
        for idx, st in self.optimizer.state_dict()["state"].items():
            for key, val in st.items():
                arr = val.detach().numpy() if isinstance(val, torch.Tensor) else np.asarray(val)
                out[f"{names[idx]}/{key}"] = np.array(arr, dtype=np.float64)
        return out

    def _load_optimizer_tensors(self, tensors: dict[str, np.ndarray]) -> None:
        if not tensors:
            return
        names = list(self.model.outer_parameters())
        state_dict = self.optimizer.state_dict()
        state: dict[int, dict] = {}
        for key, arr in tensors.items():
            pname, field_name = key.rsplit("/", 1)
            idx = names.index(pname)
            if field_name == "step":
                val = torch.tensor(float(arr), dtype=torch.float32)
            else:
                val = torch.from_numpy(np.array(arr))
            state.setdefault(idx, {})[field_name] = val
        state_dict["state"] = state
        self.optimizer.load_state_dict(state_dict)

    # -- one outer step ---------------------------------------------------------
    def sample_batch(self) -> list[Episode]:
        cfg = self.config
        episodes = []
        for _ in range(cfg.batch_tasks):
            rel = self.relations[self.rng.integers(len(self.relations))]
            episodes.append(sample_episode(self.split, rel, cfg.K, cfg.queries_per_episode, self.rng,
                                           cfg.negatives_per_positive, cfg.shuffle_support))
        return episodes

    def step(self, episodes: Sequence[Episode] | None = None) -> dict:
        cfg = self.config
        episodes = episodes if episodes is not None else self.sample_batch()
        batch = EpisodeBatch.from_episodes(episodes)
        try:
            out = self.model.meta_forward(batch)
        except mtransh.DivergenceError as exc:
            raise DivergenceError(f"{exc} at step {self.step_count}",
                                  {"step": self.step_count, "relations": batch.relations}) from exc
        loss = out.query_losses.mean()
        if not torch.isfinite(loss):
            bad = [i for i, v in enumerate(out.query_losses.tolist()) if not math.isfinite(v)]
            diag = {"step": self.step_count, "relations": [batch.relations[i] for i in bad] or batch.relations,
                    "query_loss": out.query_losses.tolist(), "support_loss": out.support_losses.tolist()}
            raise DivergenceError(f"non-finite query loss at step {self.step_count}", diag)
        self.optimizer.zero_grad(set_to_none=True)
        if self.model.P_star.grad is not None:
            self.model.P_star.grad = None
        loss.backward()
        if cfg.clip_grad_norm:
            torch.nn.utils.clip_grad_norm_(list(self.model.outer_parameters().values()), cfg.clip_grad_norm)
        self.optimizer.step()
        if self.model.use_projection:
            if cfg.second_order:
                g = self.model.P_star.grad
            else:
                # per-task gradients at the adapted normals; the 1/B of the mean makes this the average
                g = out.P_adapted.grad.sum(dim=0)
            with torch.no_grad():
                self.model.P_star.copy_(mtransh.outer_update_hyperplane(self.model.P_star, g, cfg.l_p,
                                                                        cfg.unit_norm))
        self.step_count += 1
        return {"step": self.step_count, "loss": float(loss.item()),
                "support_loss": float(out.support_losses.mean().item())}

    # -- validation / early stopping ------------------------------------------------
    def validate(self) -> float | None:
        if not self.valid_relations:
            return None
        return evaluate(self.model, self.split, relations=self.valid_relations, workers=self.workers).mrr

    def run(self, on_record: Callable[[dict], None] | None = None) -> tuple[Checkpoint, list[dict]]:
        cfg = self.config

        def emit(rec):
            self.log.append(rec)
            if on_record is not None:
                on_record(rec)

        best = None
        bad_evals = 0

        def evaluate_now() -> bool:
            nonlocal best, bad_evals
            mrr = self.validate()
            emit({"step": self.step_count, "val_mrr": mrr})
            if mrr is None:
                return False
            if self.best_val_mrr is None or mrr > self.best_val_mrr:
                self.best_val_mrr = mrr
                best = self.checkpoint()
                bad_evals = 0
                return False
            bad_evals += 1
            return bad_evals >= cfg.patience

        stop = evaluate_now()
        while not stop and self.step_count < cfg.max_steps:
            emit(self.step())
            if self.step_count % cfg.eval_every == 0:
                stop = evaluate_now()
        if best is None or not self.valid_relations:
            best = self.checkpoint()
        return best, self.log


def train(graph: KnowledgeGraph, split: TaskSplit, config: TrainConfig, embeddings: EmbeddingTable,
          resume: Checkpoint | None = None) -> tuple[Checkpoint, list[dict]]:
    return Trainer(graph, split, config, embeddings, resume).run()


def model_from_checkpoint(graph: KnowledgeGraph, ckpt: Checkpoint,
                          embeddings: EmbeddingTable | None = None) -> GANAModel:
    config = TrainConfig.from_dict(ckpt.config)
    if embeddings is None:
        embeddings = EmbeddingTable(ckpt.tensors["entity_emb"], ckpt.tensors["relation_emb"])
    model = GANAModel(graph, embeddings, config)
    with torch.no_grad():
        for name, p in model.named_parameters():
            p.copy_(torch.from_numpy(np.array(ckpt.tensors[name])))
    return model


def write_log(log: Sequence[dict], path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for rec in log:
            fh.write(json.dumps(rec) + "\n")


# ---------------------------------------------------------------------------
# gradient verification
# ---------------------------------------------------------------------------

@dataclass
class GradCheckReport:
    max_rel_error: dict[str, float]
    entries_checked: dict[str, int]
    tolerance: float
    failures: list[str] = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return not self.failures

    @property
    def worst(self) -> float:
        return max(self.max_rel_error.values(), default=0.0)


def relative_error(analytic: float, numeric: float, floor: float = 1e-6) -> float:
    return abs(analytic - numeric) / max(abs(analytic), abs(numeric), floor)


def gradient_check(model: GANAModel, episodes: Sequence[Episode], tolerance: float = 1e-4,
                   step: float = 1e-4, max_entries_per_tensor: int | None = None,
                   rng: np.random.Generator | None = None,
                   corrupt: dict[str, float] | None = None) -> GradCheckReport:
    """Compare autograd gradients of the mean query loss with central differences.

    The loss is evaluated with the inner step differentiated through, so the
    comparison is against the exact derivative for every trainable tensor.
    ``corrupt`` adds a constant to the named tensors' analytic gradients
    (negative control).
    """
    rng = rng if rng is not None else np.random.default_rng(0)
    batch = EpisodeBatch.from_episodes(episodes)
    params = model.trainable_parameters()

    def loss_value() -> torch.Tensor:
        return model.meta_forward(batch, second_order=True).query_losses.mean()

    analytic = torch.autograd.grad(loss_value(), list(params.values()))
    errors, counts, failures = {}, {}, []
    for (name, p), grad in zip(params.items(), analytic):
        grad = grad.detach().clone()
        if corrupt and name in corrupt:
            grad += corrupt[name]
        flat_n = p.numel()
        idx = np.arange(flat_n)
        if max_entries_per_tensor is not None and flat_n > max_entries_per_tensor:
            idx = np.sort(rng.choice(flat_n, size=max_entries_per_tensor, replace=False))
        worst = 0.0
        flat = p.data.view(-1)
        gflat = grad.view(-1)
        for i in idx:
            orig = flat[i].item()
            flat[i] = orig + step
            up = loss_value().item()
            flat[i] = orig - step
            down = loss_value().item()
            flat[i] = orig
            numeric = (up - down) / (2 * step)
            worst = max(worst, relative_error(gflat[i].item(), numeric))
        errors[name], counts[name] = worst, len(idx)
        if worst > tolerance:
            failures.append(name)
    return GradCheckReport(errors, counts, tolerance, failures)
