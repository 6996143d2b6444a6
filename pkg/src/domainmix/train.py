"""The alternating training loop.

Each epoch: encode and cluster the real domain, keep reliable clusters as
pseudo-identities, rebuild the classifier head, then run PK batches that
update either the discriminator or the encoder+head, never both.
"""
from __future__ import annotations

import csv
import logging
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from . import model
from .cluster import CriteriaFlags, DbscanParams, Selection, select_reliable
from .diffcore import AdamState, Tape, adam_step, make_rng
from .errors import ConfigError, NumericError
from .evaluation import evaluate
from .losses import (
    LossConfig,
    combined_weights,
    domain_balance_loss,
    domain_classification_loss,
    identity_loss,
    triplet_loss,
)
from .synthgen import Benchmark, SampleSet

log = logging.getLogger(__name__)

__all__ = [
    "TrainConfig",
    "EpochDataset",
    "EpochLog",
    "TrainState",
    "RunResult",
    "build_epoch_dataset",
    "pk_sample",
    "train_step_backbone",
    "train_step_discriminator",
    "lr_at",
    "run",
    "write_log_csv",
    "LOG_COLUMNS",
]

SYNTHETIC, REAL = 0, 1

# rng streams under the run seed
_INIT, _BATCHES, _HEADS = 10, 11, 12


@dataclass(frozen=True)
class TrainConfig:
    total_epochs: int = 12
    warmup_epochs: int = 6
    iters_per_epoch: int = 100
    disc_period: int = 4
    P: int = 8
    K: int = 4
    lr0: float = 1e-3
    disc_lr_scale: float = 1.0
    domain_balanced: bool = True
    normalize_disc_input: bool = False
    lr_milestones: tuple = (8, 10)
    lr_decay: float = 0.1
    weight_decay: float = 5e-4
    seed: int = 0
    loss: LossConfig = field(default_factory=LossConfig)
    dbscan: DbscanParams = field(default_factory=DbscanParams)
    criteria: CriteriaFlags = field(default_factory=CriteriaFlags)
    use_aci: bool = True
    use_B: bool = True
    labeled_B: bool = False
    hidden: int = 64
    d_feat: int = 32
    disc_hidden: int = 32

    def __post_init__(self):
        object.__setattr__(self, "lr_milestones", tuple(int(m) for m in self.lr_milestones))
        if self.total_epochs < 1:
            raise ConfigError("total_epochs must be >= 1")
        # warmup == total is allowed: the run never leaves warm-up
        if not 0 <= self.warmup_epochs <= self.total_epochs:
            raise ConfigError("warmup_epochs must lie in [0, total_epochs]")
        if self.disc_period < 2:
            raise ConfigError("disc_period must be >= 2")
        if self.P < 2 or self.K < 2:
            raise ConfigError("PK sampling needs P >= 2 and K >= 2 for triplet mining")
        if self.iters_per_epoch < 1:
            raise ConfigError("iters_per_epoch must be >= 1")
        if not self.lr0 > 0 or not 0 < self.lr_decay <= 1:
            raise ConfigError("need lr0 > 0 and lr_decay in (0, 1]")

    @property
    def batch_size(self) -> int:
        return self.P * self.K

    def to_dict(self) -> dict:
        out = {}
        for f in fields(self):
            v = getattr(self, f.name)
            out[f.name] = asdict(v) if f.name in ("loss", "dbscan", "criteria") else v
        out["lr_milestones"] = list(self.lr_milestones)
        return out


@dataclass
class EpochDataset:
    """Mixed training set for one epoch.

    Labels ``0..N-1`` are synthetic identities, ``N..M-1`` pseudo identities.
    ``clusters[i]`` indexes the rows of pseudo class ``N + i``.
    """

    X: np.ndarray
    labels: np.ndarray
    domains: np.ndarray
    n_synthetic: int
    n_classes: int
    clusters: list
    selection: Selection | None = None

    @property
    def n_pseudo(self) -> int:
        return self.n_classes - self.n_synthetic

    def __len__(self):
        return self.X.shape[0]

    def by_class(self) -> dict:
        order = np.argsort(self.labels, kind="stable")
        cuts = np.flatnonzero(np.diff(self.labels[order])) + 1
        return {int(self.labels[g[0]]): g for g in np.split(order, cuts) if g.size}


LOG_COLUMNS = (
    "epoch",
    "M_prime",
    "n_pseudo",
    "loss_db",
    "loss_d",
    "loss_id",
    "loss_tri",
    "disc_acc",
    "lr",
    "map_C",
    "rank1_C",
)


@dataclass
class EpochLog:
    """Per-epoch means; a loss that no step produced this epoch is logged as 0."""

    epoch: int
    M_prime: int
    n_pseudo: int
    loss_db: float
    loss_d: float
    loss_id: float
    loss_tri: float
    disc_acc: float
    lr: float
    map_C: float
    rank1_C: float
    n_backbone_steps: int = 0
    n_disc_steps: int = 0
    n_skipped: int = 0

    def row(self) -> list:
        return [getattr(self, c) for c in LOG_COLUMNS]


@dataclass
class TrainState:
    encoder: dict
    head: model.ClassifierHead
    disc: dict
    opt_backbone: AdamState
    opt_disc: AdamState

    def backbone_params(self) -> dict:
        return {**self.encoder, **self.head.as_params()}

    def all_params(self) -> dict:
        return {**self.backbone_params(), **self.disc}


@dataclass
class RunResult:
    state: TrainState
    logs: list
    reports: list


def lr_at(cfg: TrainConfig, epoch: int) -> float:
    """Step schedule: one decay for every milestone at or before ``epoch``."""
    n = sum(1 for m in cfg.lr_milestones if m <= epoch)
    return cfg.lr0 * cfg.lr_decay**n


def _reindex(y: np.ndarray):
    classes, inv = np.unique(y, return_inverse=True)
    return inv.astype(np.int64), classes.size


def build_epoch_dataset(
    encoder: dict,
    train_A: SampleSet,
    train_B: SampleSet | None,
    params: DbscanParams,
    flags: CriteriaFlags,
    *,
    labels_B: np.ndarray | None = None,
) -> EpochDataset:
    """Synthetic samples with their labels plus the reliable part of B.

    ``labels_B`` short-circuits clustering with known identities (the
    labeled-B ablation). ``train_B=None`` gives a synthetic-only set.
    """
    y_a, n = _reindex(train_A.identities)
    X_parts, y_parts, d_parts = [train_A.X], [y_a], [np.full(len(train_A), SYNTHETIC)]
    clusters, selection = [], None
    m_prime = 0

    if train_B is not None and len(train_B):
        if labels_B is not None:
            pseudo, m_prime = _reindex(labels_B)
        else:
            feats = model.normalize_features(model.encode(encoder, train_B.X))
            selection = select_reliable(feats, params, flags)
            pseudo, m_prime = selection.pseudo_labels, selection.n_kept
        keep = pseudo >= 0
        X_b, p_b = train_B.X[keep], pseudo[keep]
        base = len(train_A)
        for i in range(m_prime):
            clusters.append(base + np.flatnonzero(p_b == i))
        X_parts.append(X_b)
        y_parts.append(p_b + n)
        d_parts.append(np.full(X_b.shape[0], REAL))

    return EpochDataset(
        X=np.vstack(X_parts),
        labels=np.concatenate(y_parts),
        domains=np.concatenate(d_parts).astype(np.int64),
        n_synthetic=n,
        n_classes=n + m_prime,
        clusters=clusters,
        selection=selection,
    )


def pk_sample(
    dataset: EpochDataset,
    P: int,
    K: int,
    rng: np.random.Generator,
    *,
    groups: dict | None = None,
    domain_balanced: bool = False,
):
    """``P`` distinct classes, ``K`` indices each (with replacement if a class is short).

    Classes are drawn uniformly from the joint label set. With
    ``domain_balanced`` half of them (as far as available) come from the
    pseudo-labeled real classes, so both domains appear in equal measure.
    """
    groups = dataset.by_class() if groups is None else groups
    classes = np.array(sorted(groups))
    if classes.size < P:
        log.warning("only %d classes available, shrinking P from %d", classes.size, P)
        P = int(classes.size)
    real = classes[classes >= dataset.n_synthetic]
    if domain_balanced and real.size:
        syn = classes[classes < dataset.n_synthetic]
        n_real = min(P // 2, real.size)
        n_syn = min(P - n_real, syn.size)
        n_real = P - n_syn
        chosen = np.concatenate(
            [rng.choice(syn, size=n_syn, replace=False), rng.choice(real, size=n_real, replace=False)]
        )
    else:
        chosen = rng.choice(classes, size=P, replace=False)
    batch = []
    for c in chosen:
        idx = groups[int(c)]
        batch.append(rng.choice(idx, size=K, replace=idx.size < K))
    return np.concatenate(batch)


def _check_finite(value: float, what: str):
    if not np.isfinite(value):
        raise NumericError(f"{what} became non-finite ({value})")


def train_step_backbone(
    state: TrainState, X, y, d, cfg: LossConfig, *, lambda_m: float | None = None, normalize_disc: bool = False
) -> dict:
    """One Adam step of the encoder and head on the combined objective.

    The discriminator enters the tape as constants: the balance-loss gradient
    flows through it into the encoder while its own weights stay put.
    Mutates ``state`` and returns the loss parts.
    """
    lam_m = cfg.lambda_m if lambda_m is None else lambda_m
    tape = Tape()
    f = model.mlp_on_tape(tape, state.encoder, "enc", tape.const(X), trainable=True)
    W1 = tape.param("head.W1", state.head.W1)
    W2 = tape.param("head.W2", state.head.W2)
    W = tape.hstack(W1, W2) if state.head.n_pseudo else W1
    l_id = tape.head(tape.matmul(f, W), identity_loss, y)
    f_tri = tape.normalize_rows(f) if cfg.normalize_triplet else f
    l_tri = tape.head(f_tri, triplet_loss, y, cfg.margin)
    w = {**combined_weights(cfg), "db": lam_m}
    terms = [(w["id"], l_id), (w["tri"], l_tri)]
    parts = {"id": float(l_id.value[0, 0]), "tri": float(l_tri.value[0, 0]), "db": 0.0}
    if lam_m != 0.0:
        f_d = tape.normalize_rows(f) if normalize_disc else f
        logits_d = model.mlp_on_tape(tape, state.disc, "disc", f_d, trainable=False)
        l_db = tape.head(tape.softmax(logits_d), domain_balance_loss, cfg.a)
        terms.append((w["db"], l_db))
        parts["db"] = float(l_db.value[0, 0])
    total = tape.weighted_sum(terms)
    parts["total"] = float(total.value[0, 0])
    _check_finite(parts["total"], "backbone loss")
    grads = tape.backward(total)
    params = adam_step(state.opt_backbone, state.backbone_params(), grads)
    state.encoder = {k: params[k] for k in state.encoder}
    state.head = model.ClassifierHead(params["head.W1"], params["head.W2"])
    return parts


def train_step_discriminator(state: TrainState, X, d, *, normalize_disc: bool = False) -> dict | None:
    """One Adam step of the discriminator on encoder features held fixed.

    Returns ``None`` (and changes nothing) for a single-domain batch.
    """
    d = np.asarray(d)
    if np.unique(d).size < 2:
        log.warning("single-domain batch drawn for a discriminator step; skipping")
        return None
    feats = model.encode(state.encoder, X)
    if normalize_disc:
        feats = model.normalize_features(feats)
    tape = Tape()
    logits = model.mlp_on_tape(tape, state.disc, "disc", tape.const(feats), trainable=True)
    probs = tape.softmax(logits)
    loss = tape.head(probs, domain_classification_loss, d)
    value = float(loss.value[0, 0])
    _check_finite(value, "discriminator loss")
    grads = tape.backward(loss)
    state.disc = adam_step(state.opt_disc, state.disc, grads)
    acc = float((probs.value.argmax(axis=1) == d).mean())
    return {"d": value, "acc": acc}


def init_state(cfg: TrainConfig, d_in: int, n_synthetic: int) -> TrainState:
    rng = make_rng(cfg.seed, _INIT)
    enc = model.init_encoder(rng, d_in, cfg.hidden, cfg.d_feat)
    disc = model.init_discriminator(rng, cfg.d_feat, cfg.disc_hidden, cfg.loss.n_domains)
    head = model.ClassifierHead(np.zeros((cfg.d_feat, n_synthetic)), np.zeros((cfg.d_feat, 0)))
    opt = dict(lr=cfg.lr0, weight_decay=cfg.weight_decay)
    return TrainState(enc, head, disc, AdamState(**opt), AdamState(**opt))


def _prepare_head(state: TrainState, cfg: TrainConfig, ds: EpochDataset, epoch: int, train_A: SampleSet):
    if not cfg.use_aci:
        rng = make_rng(cfg.seed, _HEADS, epoch)
        state.head = model.random_head(rng, ds.n_synthetic, ds.n_pseudo, cfg.d_feat)
        state.opt_backbone.reset_slot("head.W1")
        state.opt_backbone.reset_slot("head.W2")
        return
    if epoch == 0:
        y_a, n = _reindex(train_A.identities)
        state.head = model.init_head(model.encode(state.encoder, train_A.X), y_a, n, cfg.d_feat)
    feats = model.encode(state.encoder, ds.X)
    state.head = model.adaptive_init(state.head, [feats[idx] for idx in ds.clusters])
    state.opt_backbone.reset_slot("head.W2")


def run(cfg: TrainConfig, bench: Benchmark, *, hook=None, evaluate_each_epoch: bool = True) -> RunResult:
    """Full training run.

    ``hook``, if given, is called after every batch as
    ``hook(epoch, iteration, kind, state)`` with ``kind`` one of
    ``"backbone"``, ``"discriminator"`` or ``"skip"``.
    """
    train_B = bench.train_B if cfg.use_B else None
    labels_B = bench.reveal_B_identities() if (cfg.use_B and cfg.labeled_B) else None
    n_syn = int(np.unique(bench.train_A.identities).size)
    state = init_state(cfg, bench.train_A.X.shape[1], n_syn)
    batch_rng = make_rng(cfg.seed, _BATCHES)
    logs, reports = [], []

    for epoch in range(cfg.total_epochs):
        lr = lr_at(cfg, epoch)
        state.opt_backbone.lr = lr
        state.opt_disc.lr = lr * cfg.disc_lr_scale
        ds = build_epoch_dataset(state.encoder, bench.train_A, train_B, cfg.dbscan, cfg.criteria, labels_B=labels_B)
        _prepare_head(state, cfg, ds, epoch, bench.train_A)
        groups = ds.by_class()
        warm = epoch < cfg.warmup_epochs
        two_domains = np.unique(ds.domains).size > 1
        acc = {k: [] for k in ("db", "id", "tri", "d", "acc")}
        n_bb = n_disc = n_skip = 0

        for it in range(cfg.iters_per_epoch):
            idx = pk_sample(ds, cfg.P, cfg.K, batch_rng, groups=groups, domain_balanced=cfg.domain_balanced)
            X, y, d = ds.X[idx], ds.labels[idx], ds.domains[idx]
            # a single-domain epoch has nothing to discriminate: every batch trains the backbone
            if not warm and two_domains and it % cfg.disc_period == 0:
                out = train_step_discriminator(state, X, d, normalize_disc=cfg.normalize_disc_input)
                if out is None:
                    n_skip += 1
                    kind = "skip"
                else:
                    n_disc += 1
                    acc["d"].append(out["d"])
                    acc["acc"].append(out["acc"])
                    kind = "discriminator"
            else:
                lam_m = 0.0 if (warm or not two_domains) else cfg.loss.lambda_m
                parts = train_step_backbone(
                    state, X, y, d, cfg.loss, lambda_m=lam_m, normalize_disc=cfg.normalize_disc_input
                )
                n_bb += 1
                for k in ("db", "id", "tri"):
                    acc[k].append(parts[k])
                kind = "backbone"
            if hook is not None:
                hook(epoch, it, kind, state)

        report = evaluate(state.encoder, bench.query_C, bench.gallery_C) if evaluate_each_epoch else None
        reports.append(report)
        mean = {k: float(np.mean(v)) if v else 0.0 for k, v in acc.items()}
        entry = EpochLog(
            epoch=epoch,
            M_prime=ds.n_pseudo,
            n_pseudo=int((ds.domains == REAL).sum()),
            loss_db=mean["db"],
            loss_d=mean["d"],
            loss_id=mean["id"],
            loss_tri=mean["tri"],
            disc_acc=mean["acc"],
            lr=lr,
            map_C=report.mAP if report else 0.0,
            rank1_C=report.rank1 if report else 0.0,
            n_backbone_steps=n_bb,
            n_disc_steps=n_disc,
            n_skipped=n_skip,
        )
        for v in entry.row():
            _check_finite(float(v), "epoch log entry")
        logs.append(entry)
        log.info(
            "epoch %d: M'=%d id=%.4f tri=%.4f db=%.4f d=%.4f acc=%.3f mAP=%.4f",
            epoch, entry.M_prime, entry.loss_id, entry.loss_tri, entry.loss_db, entry.loss_d,
            entry.disc_acc, entry.map_C,
        )
    return RunResult(state, logs, reports)


def write_log_csv(logs, path, config_hash: str = ""):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        if config_hash:
            fh.write(f"# config_hash={config_hash}\n")
        w.writerow(LOG_COLUMNS)
        for entry in logs:
            w.writerow([repr(v) if isinstance(v, float) else v for v in entry.row()])
