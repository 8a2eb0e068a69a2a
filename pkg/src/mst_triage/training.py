"""Cross-validation training orchestration: per-fold AdamW training with
early stopping on validation AUC, checkpointing, and prediction generation.

With a frozen encoder and augmentation disabled, slice embeddings are
precomputed once per run and only the aggregator/head train, which keeps
full cross-validation (and permutation-null reruns) cheap on CPU."""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np
import torch
from torch import nn

from . import metrics
from .cohort import CohortManifest, FoldPlan
from .model import ModelConfig, MstClassifier, load_checkpoint, save_checkpoint
from .predictions import EXTERNAL_FOLD, PredictionRow, PredictionSet
from .volume import augment, read_stack_cache, sample_augment_params


class TrainingError(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    sequences: tuple = ("T1_sub",)
    lr: float = 1e-6
    weight_decay: float = 0.01
    batch_size: int = 8
    max_epochs: int = 100
    early_stop_patience: int = 10
    seed: int = 0
    mixup_alpha: float = 0.0
    label_smoothing: float = 0.0
    augment: bool = True
    max_rotation_deg: float = 90.0
    max_noise_sd: float = 0.25
    model: ModelConfig = field(default_factory=ModelConfig)

    def __post_init__(self):
        if self.lr < 0:
            raise ValueError("lr must be >= 0")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if not 1 <= len(self.sequences) <= 3:
            raise ValueError("sequences must list 1-3 sequence ids")

    def hash(self) -> str:
        blob = json.dumps(asdict(self), sort_keys=True, default=str)
        return hashlib.sha256(blob.encode()).hexdigest()[:16]

    @classmethod
    def from_json(cls, text: str) -> "TrainConfig":
        d = json.loads(text)
        if "model" in d:
            d["model"] = ModelConfig(**d["model"])
        if "sequences" in d:
            d["sequences"] = tuple(d["sequences"])
        return cls(**d)

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True, default=str)


def _label_int(record) -> int:
    if record.label is None:
        raise TrainingError(f"exam {record.exam_id!r} has no label")
    return 1 if record.label == "suspicious" else 0


def _load_stack_tensor(cache_dir, exam_id, sequences):
    stack = read_stack_cache(cache_dir, exam_id, sequences=list(sequences))
    return torch.from_numpy(np.ascontiguousarray(stack.channels)), stack


@torch.no_grad()
def compute_slice_embeddings(model: MstClassifier, exam_ids, cache_dir, sequences):
    """Frozen-encoder slice embeddings, one (38, D) tensor per exam."""
    model.eval()
    out = {}
    for eid in exam_ids:
        t, _ = _load_stack_tensor(cache_dir, eid, sequences)
        out[eid] = model.encode_slices(t.unsqueeze(0))[0]
    return out


def _fast_path(config: TrainConfig) -> bool:
    return config.model.frozen_encoder and not config.augment


def _epoch_batches(rng, exam_ids, batch_size):
    order = rng.permutation(len(exam_ids))
    for i in range(0, len(order), batch_size):
        yield [exam_ids[j] for j in order[i : i + batch_size]]


def _binary_log_loss(scores, labels):
    p = np.clip(np.asarray(scores, dtype=float), 1e-12, 1.0 - 1e-12)
    y = np.asarray(labels, dtype=float)
    return float(-np.mean(y * np.log(p) + (1.0 - y) * np.log(1.0 - p)))


def _eval_scores(model, exam_ids, cache_dir, sequences, embeddings=None):
    model.eval()
    scores = []
    with torch.no_grad():
        for eid in exam_ids:
            if embeddings is not None:
                logits, _ = model.aggregate(embeddings[eid].unsqueeze(0))
            else:
                t, _ = _load_stack_tensor(cache_dir, eid, sequences)
                logits = model(t.unsqueeze(0))
            scores.append(float(torch.softmax(logits, dim=-1)[0, 1]))
    return scores


def train_fold(
    config: TrainConfig,
    fold: int,
    plan: FoldPlan,
    manifest: CohortManifest,
    cache_dir,
    out_dir,
    embeddings=None,
):
    """Train one fold; returns (checkpoint dir, history list).

    The checkpoint is the epoch with the best validation AUC; history holds
    per-epoch train loss and validation AUC and is also written as JSONL.
    """
    if not 0 <= fold < plan.n_folds:
        raise TrainingError(f"fold {fold} outside plan with {plan.n_folds} folds")
    by_id = manifest.by_exam_id()
    splits = {
        role: [e for e in plan.exams_with_role(fold, role) if e in by_id]
        for role in ("train", "val", "test")
    }
    train_labels = {_label_int(by_id[e]) for e in splits["train"]}
    if len(train_labels) < 2:
        raise TrainingError(f"fold {fold}: training split contains a single class")
    val_labels = [_label_int(by_id[e]) for e in splits["val"]]
    if len(set(val_labels)) < 2:
        raise TrainingError(f"fold {fold}: validation split contains a single class")

    # model init depends on the config seed only, so the (frozen) encoder is
    # identical across folds and precomputed embeddings stay valid
    torch.manual_seed(config.seed * 1009)
    model = MstClassifier(config.model)
    fast = _fast_path(config)
    if embeddings is None:
        needed = splits["train"] + splits["val"] if fast else splits["train"]
        embeddings = compute_slice_embeddings(model, needed, cache_dir, config.sequences)
    # standardize slice embeddings with training-split statistics; the stats
    # live in the model as buffers so checkpoints stay self-contained
    train_emb = torch.stack([embeddings[e] for e in splits["train"]])
    flat = train_emb.reshape(-1, train_emb.shape[-1])
    model.set_embedding_stats(flat.mean(dim=0), flat.std(dim=0) + 1e-6)

    params = model.trainable_parameters()
    opt = torch.optim.AdamW(params, lr=config.lr, weight_decay=config.weight_decay)
    loss_fn = nn.CrossEntropyLoss(label_smoothing=config.label_smoothing)
    rng = np.random.default_rng((config.seed, fold))

    best_auc, best_loss, best_state, best_epoch = -1.0, float("inf"), None, -1
    history = []
    since_best = 0
    for epoch in range(config.max_epochs):
        model.train()
        losses = []
        for batch_ids in _epoch_batches(rng, splits["train"], config.batch_size):
            y = torch.tensor([_label_int(by_id[e]) for e in batch_ids])
            if fast:
                x = torch.stack([embeddings[e] for e in batch_ids])
            else:
                stacks = []
                for eid in batch_ids:
                    _, stack = _load_stack_tensor(cache_dir, eid, config.sequences)
                    if config.augment:
                        p = sample_augment_params(
                            np.random.default_rng((config.seed, fold, epoch, hash(eid) & 0xFFFF)),
                            config.max_rotation_deg,
                            config.max_noise_sd,
                        )
                        stack = augment(stack, p)
                    stacks.append(torch.from_numpy(np.ascontiguousarray(stack.channels)))
                x = torch.stack(stacks)
            run = (lambda t: model.aggregate(t)[0]) if fast else model
            if config.mixup_alpha > 0 and x.shape[0] > 1:
                lam = float(rng.beta(config.mixup_alpha, config.mixup_alpha))
                perm = torch.from_numpy(rng.permutation(x.shape[0]))
                logits = run(lam * x + (1.0 - lam) * x[perm])
                loss = lam * loss_fn(logits, y) + (1.0 - lam) * loss_fn(logits, y[perm])
            else:
                logits = run(x)
                loss = loss_fn(logits, y)
            if not torch.isfinite(loss):
                raise TrainingError(
                    f"fold {fold} epoch {epoch}: non-finite training loss {loss.item()}"
                )
            opt.zero_grad()
            loss.backward()
            opt.step()
            losses.append(float(loss.detach()))

        val_scores = _eval_scores(
            model, splits["val"], cache_dir, config.sequences,
            embeddings if fast else None,
        )
        val_auc = metrics.auc(metrics.roc_curve(val_scores, val_labels))
        val_loss = _binary_log_loss(val_scores, val_labels)
        history.append(
            {"epoch": epoch, "train_loss": float(np.mean(losses)),
             "val_auc": val_auc, "val_loss": val_loss}
        )
        # with small validation splits the AUC plateaus quickly, so ties are
        # broken by validation loss to keep tracking genuine improvement
        if val_auc > best_auc or (val_auc == best_auc and val_loss < best_loss):
            best_auc, best_loss, best_epoch = val_auc, val_loss, epoch
            best_state = {k: v.detach().clone() for k, v in model.state_dict().items()}
            since_best = 0
        else:
            since_best += 1
            if since_best >= config.early_stop_patience:
                break

    model.load_state_dict(best_state)
    ckpt_dir = Path(out_dir) / f"fold_{fold}"
    save_checkpoint(
        model, ckpt_dir, channel_map=config.sequences, config_hash=config.hash(),
        fold=fold, extra={"best_epoch": best_epoch, "best_val_auc": best_auc,
                          "seed": config.seed},
    )
    with open(ckpt_dir / "history.jsonl", "w") as f:
        for h in history:
            f.write(json.dumps(h) + "\n")
    return ckpt_dir, history


def run_cv(
    config: TrainConfig,
    plan: FoldPlan,
    manifest: CohortManifest,
    cache_dir,
    out_dir,
    folds=None,
) -> PredictionSet:
    """Train every fold and concatenate test-split scores from each fold's
    best checkpoint."""
    by_id = manifest.by_exam_id()
    folds = list(range(plan.n_folds)) if folds is None else list(folds)
    embeddings = None
    if _fast_path(config):
        torch.manual_seed(config.seed * 1009)  # encoder weights fixed per run
        probe = MstClassifier(config.model)
        exam_ids = [e for e in plan.assignments if e in by_id]
        embeddings = compute_slice_embeddings(probe, exam_ids, cache_dir, config.sequences)

    rows = []
    for fold in folds:
        ckpt_dir, _ = train_fold(
            config, fold, plan, manifest, cache_dir, out_dir,
            embeddings=embeddings,
        )
        model, ckpt_manifest = load_checkpoint(ckpt_dir)
        test_ids = [e for e in plan.exams_with_role(fold, "test") if e in by_id]
        if not test_ids:
            raise TrainingError(f"fold {fold}: empty test split")
        scores = _eval_scores(model, test_ids, cache_dir, config.sequences, embeddings)
        for eid, s in zip(test_ids, scores):
            rows.append(
                PredictionRow(
                    exam_id=eid, fold=str(fold), split_role="test",
                    label=_label_int(by_id[eid]), score=s,
                )
            )
    pset = PredictionSet(rows=tuple(rows), config_hash=config.hash()).validate()
    expected = {
        (e, str(f))
        for f in folds
        for e in plan.exams_with_role(f, "test")
        if e in by_id
    }
    got = {(r.exam_id, r.fold) for r in pset.rows}
    if expected != got:
        raise TrainingError("prediction set does not cover every test exam")
    return pset


def predict(ckpt_dir, manifest: CohortManifest, cache_dir) -> PredictionSet:
    """Score every exam of a manifest with one checkpoint (external mode)."""
    model, ckpt_manifest = load_checkpoint(ckpt_dir)
    sequences = tuple(ckpt_manifest["channel_map"])
    for rec in manifest.records:
        missing = [s for s in sequences if not _sequence_available(rec, s, cache_dir)]
        if missing:
            raise TrainingError(
                f"exam {rec.exam_id!r} lacks sequences {missing} required by checkpoint"
            )
    rows = []
    for rec in manifest.records:
        scores = _eval_scores(model, [rec.exam_id], cache_dir, sequences)
        rows.append(
            PredictionRow(
                exam_id=rec.exam_id, fold=EXTERNAL_FOLD, split_role="external",
                label=_label_int(rec), score=scores[0],
            )
        )
    return PredictionSet(rows=tuple(rows), config_hash=ckpt_manifest.get("config_hash", "")).validate()


def _sequence_available(record, seq, cache_dir):
    from .volume import cache_path

    return cache_path(cache_dir, record.exam_id, seq).exists()


def permutation_null_aucs(
    config: TrainConfig,
    plan: FoldPlan,
    manifest: CohortManifest,
    cache_dir,
    out_dir,
    n_runs: int = 20,
    seed: int = 0,
) -> list[float]:
    """Pooled test AUCs from rerunning CV with permuted labels."""
    from dataclasses import replace as dc_replace

    from .cohort import make_folds

    rng = np.random.default_rng(seed)
    labels = [r.label for r in manifest.records]
    nulls = []
    for run in range(n_runs):
        perm = rng.permutation(len(labels))
        shuffled = tuple(
            dc_replace(rec, label=labels[perm[i]], birads=None)
            for i, rec in enumerate(manifest.records)
        )
        null_manifest = CohortManifest(records=shuffled)
        # restratify so every val split keeps both classes under the
        # permuted labels
        null_plan = make_folds(null_manifest, plan.n_folds, seed=plan.seed + run + 1)
        null_config = dc_replace(config, seed=config.seed + 1000 + run)
        pset = run_cv(
            null_config, null_plan, null_manifest, cache_dir,
            Path(out_dir) / f"null_{run}",
        )
        curve = metrics.roc_curve(pset.scores(), pset.labels())
        nulls.append(metrics.auc(curve))
    return nulls
