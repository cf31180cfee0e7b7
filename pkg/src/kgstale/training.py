"""Joint feature training, the outdated-fact classifier, and evaluation.

Phase 1 trains the attention encoder and the contrastive relation objective
jointly (loss = margin loss + lambda * contrastive loss) with Adam over
minibatches of current training facts; the graph encoding is recomputed from
live parameters every step. Phase 2 freezes the learned embeddings, builds
one vector per labeled fact, and fits a small fully connected classifier.
An optional end-to-end pass (config.finetune) lets the classifier loss keep
updating the embedding tables afterwards.
"""

from __future__ import annotations

import time
import warnings
from dataclasses import dataclass, replace

import numpy as np

from . import autodiff as ad
from . import data as kgdata
from . import relgraph, transe
from .attention import (EncoderConfig, FactAttentionEncoder, NegativeSampler,
                        gat_loss, training_fact_arrays)


class TrainingDivergedError(RuntimeError):
    def __init__(self, phase: str, epoch: int):
        super().__init__(
            f"{phase} training diverged (non-finite loss) at epoch {epoch}")
        self.epoch = epoch


@dataclass
class TrainConfig:
    dim: int = 200  # d1 = d2 for init; also the encoder output dims
    heads: int = 2
    lam: float = 1.0  # weight of the contrastive loss
    margin: float = 1.0
    lr: float = 1e-3
    epochs: int = 100  # joint feature-training epochs
    detector_epochs: int = 200
    batch: int = 128
    neg_ratio: int = 2
    seed: int = 0
    fraction: float = 0.2
    fraction_basis: str = "post"
    threshold: float = 0.5
    hidden: int = 128
    patience: int = 20
    slope: float = 0.2
    self_loops: bool = True
    transe_epochs: int = 50
    transe_lr: float = 0.01
    transe_batch: int = 512
    finetune: bool = False  # let detector gradients update the embeddings

    def validate(self):
        positive = ["dim", "heads", "margin", "lr", "batch", "neg_ratio",
                    "hidden", "transe_epochs", "transe_lr", "transe_batch"]
        for name in positive:
            if getattr(self, name) <= 0:
                raise ValueError(f"config.{name} must be positive")
        for name in ["lam", "epochs", "detector_epochs", "patience"]:
            if getattr(self, name) < 0:
                raise ValueError(f"config.{name} must be >= 0")
        if not 0.0 < self.threshold < 1.0:
            raise ValueError("config.threshold must be in (0,1)")
        if self.dim % self.heads != 0:
            raise ValueError(
                f"config.dim {self.dim} must be divisible by heads "
                f"{self.heads}")
        return self

    def encoder_config(self) -> EncoderConfig:
        return EncoderConfig(heads=self.heads, dim_out=self.dim,
                             slope=self.slope, self_loops=self.self_loops)


def joint_loss(l_gat: ad.Var, l_r2n: ad.Var, lam: float) -> ad.Var:
    """L = L_margin + lambda * L_contrast, both already on one tape."""
    return l_gat + l_r2n * float(lam)


def train_features(kg: kgdata.KnowledgeGraph, E0: ad.Matrix, R0: ad.Matrix,
                   config: TrainConfig, rng: ad.Rng
                   ) -> tuple[ad.Matrix, ad.Matrix, list[float]]:
    """Joint training; returns final embeddings and per-epoch mean losses.

    The margin loss is averaged over its valid/invalid pairs before joining
    so lambda trades off two comparable magnitudes regardless of batch size.
    lambda == 0 skips the contrastive branch entirely (exact ablation).
    """
    config.validate()
    encoder = FactAttentionEncoder(kg, E0, R0, config.encoder_config(),
                                   rng.substream("attention"))
    contrast_rng = rng.substream("contrast")
    model = relgraph.ContrastiveModel.init(R0.shape[1], config.dim,
                                           contrast_rng)
    corrupt_rng = contrast_rng.substream("shuffle")
    norm_adj = relgraph.normalized_adjacency(relgraph.build_r2n(kg))
    truth = {(f.head, f.relation, f.tail) for f in kg.facts}
    sampler = NegativeSampler(rng.substream("sampling"), config.neg_ratio,
                              truth, kg.n1)
    shuf = rng.substream("shuffle")

    fh, fr, ft = training_fact_arrays(kg)
    m = fh.shape[0]
    if m == 0:
        raise ValueError("no current training facts to learn from")
    params = encoder.parameters() + model.parameters()
    state = ad.AdamState()
    losses: list[float] = []
    for epoch in range(config.epochs):
        order = shuf.permutation(m)
        total, steps = 0.0, 0
        for lo in range(0, m, config.batch):
            idx = order[lo:lo + config.batch]
            tape = ad.Tape()
            E_out, R_out = encoder.encode_on_tape(tape)
            lg = gat_loss(E_out, R_out, fh[idx], fr[idx], ft[idx],
                          sampler, config.margin)
            lg = lg * (1.0 / (len(idx) * config.neg_ratio))
            if config.lam > 0:
                X = relgraph.relation_features(model, tape,
                                               tape.param(encoder.R))
                loss = joint_loss(lg, relgraph.r2n_loss(
                    model, norm_adj, X, corrupt_rng), config.lam)
            else:
                loss = lg
            v = float(loss.value[0, 0])
            if not np.isfinite(v):
                raise TrainingDivergedError("joint", epoch)
            total += v
            steps += 1
            grads = ad.backward(tape, loss, params)
            ad.adam_step(params, grads, state, lr=config.lr)
        losses.append(total / steps)
    E_final, R_final = encoder.encode()
    return E_final, R_final, losses


# ---------------------------------------------------------------------------
# detector


def fact_vector(E: ad.Matrix, R: ad.Matrix, fact: kgdata.Fact) -> np.ndarray:
    """[e_h || r || e_t] over the FINAL embeddings; shape (2*d1' + d2',)."""
    if not (0 <= fact.head < E.shape[0] and 0 <= fact.tail < E.shape[0]):
        raise ValueError(f"entity id out of range in {fact}")
    if not 0 <= fact.relation < R.shape[0]:
        raise ValueError(f"relation id out of range in {fact}")
    return np.concatenate([E[fact.head], R[fact.relation], E[fact.tail]])


def fact_vectors(E: ad.Matrix, R: ad.Matrix, facts: list[kgdata.Fact]
                 ) -> tuple[ad.Matrix, np.ndarray]:
    """Stacked fact vectors plus the 0/1 label column."""
    h = np.array([f.head for f in facts], dtype=np.int64)
    r = np.array([f.relation for f in facts], dtype=np.int64)
    t = np.array([f.tail for f in facts], dtype=np.int64)
    if len(facts) == 0:
        d = 2 * E.shape[1] + R.shape[1]
        return np.zeros((0, d)), np.zeros((0, 1))
    if h.max() >= E.shape[0] or t.max() >= E.shape[0] \
            or r.max() >= R.shape[0]:
        raise ValueError("fact ids out of range for the embedding tables")
    X = np.concatenate([E[h], R[r], E[t]], axis=1)
    y = np.array([[float(f.label)] for f in facts])
    return X, y


class Detector:
    """Two fully connected layers, LeakyReLU hidden, sigmoid output."""

    def __init__(self, w1: ad.Parameter, b1: ad.Parameter,
                 w2: ad.Parameter, b2: ad.Parameter, slope: float = 0.2):
        self.w1, self.b1, self.w2, self.b2 = w1, b1, w2, b2
        self.slope = slope

    @staticmethod
    def init(in_dim: int, hidden: int, rng: ad.Rng,
             slope: float = 0.2) -> "Detector":
        init = rng.substream("init")

        def xavier(rows, cols, name):
            lim = np.sqrt(6.0 / (rows + cols))
            return ad.Parameter(init.uniform(-lim, lim, (rows, cols)), name)

        return Detector(xavier(in_dim, hidden, "det.w1"),
                        ad.Parameter(np.zeros((1, hidden)), "det.b1"),
                        xavier(hidden, 1, "det.w2"),
                        ad.Parameter(np.zeros((1, 1)), "det.b2"), slope)

    def parameters(self):
        return [self.w1, self.b1, self.w2, self.b2]

    @property
    def in_dim(self):
        return self.w1.value.shape[0]

    def logits_on_tape(self, tape: ad.Tape, X) -> ad.Var:
        xv = X if isinstance(X, ad.Var) else tape.const(X)
        hidden = ad.leaky_relu(
            ad.matmul(xv, tape.param(self.w1))
            + tape.param(self.b1), self.slope)
        return ad.matmul(hidden, tape.param(self.w2)) + tape.param(self.b2)

    def predict_proba(self, X: ad.Matrix) -> np.ndarray:
        z = np.maximum(X @ self.w1.value + self.b1.value, 0) \
            + self.slope * np.minimum(X @ self.w1.value + self.b1.value, 0)
        logits = z @ self.w2.value + self.b2.value
        return ad._sigmoid_np(logits)

    def snapshot(self):
        return [p.value.copy() for p in self.parameters()]

    def restore(self, snap):
        for p, v in zip(self.parameters(), snap):
            p.value = v.copy()

    def save(self, path: str):
        transe.write_matrices(path, [p.value for p in self.parameters()])

    @staticmethod
    def load(path: str, slope: float = 0.2) -> "Detector":
        mats = transe.read_matrices(path)
        if len(mats) != 4:
            raise ValueError(
                f"{path}: expected 4 matrices (w1,b1,w2,b2), "
                f"found {len(mats)}")
        w1, b1, w2, b2 = mats
        if w1.shape[1] != b1.shape[1] or w2.shape[0] != w1.shape[1] \
                or w2.shape[1] != 1 or b2.shape != (1, 1):
            raise ValueError(f"{path}: inconsistent detector layer shapes")
        return Detector(ad.Parameter(w1, "det.w1"), ad.Parameter(b1, "det.b1"),
                        ad.Parameter(w2, "det.w2"), ad.Parameter(b2, "det.b2"),
                        slope)


def bce_loss(tape: ad.Tape, logits: ad.Var, y: np.ndarray) -> ad.Var:
    """Mean binary cross-entropy from logits (stable softplus form)."""
    yv = tape.const(y)
    ones = tape.const(np.ones_like(y))
    return ad.mean_all(yv * ad.softplus(-logits)
                       + (ones - yv) * ad.softplus(logits))


def train_detector(vectors: ad.Matrix, labels: np.ndarray,
                   config: TrainConfig, rng: ad.Rng,
                   valid_vectors: ad.Matrix | None = None,
                   valid_labels: np.ndarray | None = None,
                   loss_log: list | None = None) -> Detector:
    """Fit the classifier on frozen fact vectors.

    Early-stops on validation accuracy (patience per config) when a
    validation set is supplied, restoring the best weights seen.
    """
    n = vectors.shape[0]
    if n == 0:
        raise ValueError("no training vectors for the detector")
    uniq = np.unique(labels)
    if uniq.size < 2:
        warnings.warn("detector training labels are single-class; the "
                      "classifier will be degenerate", stacklevel=2)
    det = Detector.init(vectors.shape[1], config.hidden,
                        rng, config.slope)
    shuf = rng.substream("shuffle")
    state = ad.AdamState()
    best_acc, best_snap, since_best = -1.0, None, 0
    for epoch in range(config.detector_epochs):
        order = shuf.permutation(n)
        total, steps = 0.0, 0
        for lo in range(0, n, config.batch):
            idx = order[lo:lo + config.batch]
            tape = ad.Tape()
            loss = bce_loss(tape, det.logits_on_tape(tape, vectors[idx]),
                            labels[idx])
            v = float(loss.value[0, 0])
            if not np.isfinite(v):
                raise TrainingDivergedError("detector", epoch)
            total += v
            steps += 1
            grads = ad.backward(tape, loss)
            ad.adam_step(det.parameters(), grads, state, lr=config.lr)
        if loss_log is not None:
            loss_log.append(total / steps)
        if valid_vectors is not None and valid_vectors.shape[0] > 0:
            acc = evaluate(det, valid_vectors, valid_labels,
                           config.threshold).accuracy
            if acc > best_acc:
                best_acc, best_snap, since_best = acc, det.snapshot(), 0
            else:
                since_best += 1
                if since_best >= config.patience:
                    break
    if best_snap is not None:
        det.restore(best_snap)
    return det


def finetune_detector(facts: list[kgdata.Fact], E: ad.Matrix, R: ad.Matrix,
                      detector: Detector, config: TrainConfig, rng: ad.Rng,
                      loss_log: list | None = None
                      ) -> tuple[ad.Matrix, ad.Matrix]:
    """End-to-end pass: the classifier loss also updates the embeddings.

    Off the default path (two-phase training keeps them frozen); enabled by
    config.finetune. The input tables are copied, never mutated. Runs for
    detector_epochs more epochs and returns the refined tables.
    """
    if not facts:
        raise ValueError("no training facts to fine-tune on")
    pE = ad.Parameter(E.copy(), "fine.E")
    pR = ad.Parameter(R.copy(), "fine.R")
    h = np.array([f.head for f in facts], dtype=np.int64)
    r = np.array([f.relation for f in facts], dtype=np.int64)
    t = np.array([f.tail for f in facts], dtype=np.int64)
    y = np.array([[float(f.label)] for f in facts])
    params = detector.parameters() + [pE, pR]
    shuf = rng.substream("shuffle")
    state = ad.AdamState()
    n = len(facts)
    for epoch in range(config.detector_epochs):
        order = shuf.permutation(n)
        total, steps = 0.0, 0
        for lo in range(0, n, config.batch):
            idx = order[lo:lo + config.batch]
            tape = ad.Tape()
            vE, vR = tape.param(pE), tape.param(pR)
            X = ad.concat_cols([ad.gather_rows(vE, h[idx]),
                                ad.gather_rows(vR, r[idx]),
                                ad.gather_rows(vE, t[idx])])
            loss = bce_loss(tape, detector.logits_on_tape(tape, X), y[idx])
            v = float(loss.value[0, 0])
            if not np.isfinite(v):
                raise TrainingDivergedError("finetune", epoch)
            total += v
            steps += 1
            grads = ad.backward(tape, loss, params)
            ad.adam_step(params, grads, state, lr=config.lr)
        if loss_log is not None:
            loss_log.append(total / steps)
    return pE.value, pR.value


# ---------------------------------------------------------------------------
# evaluation


@dataclass
class EvalReport:
    tp: int
    fp: int
    fn: int
    tn: int
    accuracy: float
    precision: float
    recall: float
    f1: float

    @property
    def total(self):
        return self.tp + self.fp + self.fn + self.tn


def metrics_from_counts(tp: int, fp: int, fn: int, tn: int) -> EvalReport:
    """The four metrics with 0-denominator guards; label 1 is positive."""
    total = tp + fp + fn + tn
    accuracy = (tp + tn) / total if total else 0.0
    precision = tp / (tp + fp) if (tp + fp) else 0.0
    recall = tp / (tp + fn) if (tp + fn) else 0.0
    f1 = 2 * precision * recall / (precision + recall) \
        if (precision + recall) > 0 else 0.0
    return EvalReport(tp, fp, fn, tn, accuracy, precision, recall, f1)


def evaluate_predictions(probs: np.ndarray, labels: np.ndarray,
                         threshold: float = 0.5) -> EvalReport:
    """Counts with prob >= threshold predicting label 1 (current fact)."""
    if probs.size == 0:
        raise ValueError("empty evaluation set")
    if not 0.0 < threshold < 1.0:
        raise ValueError(f"threshold must be in (0,1), got {threshold}")
    pred = (np.asarray(probs).reshape(-1) >= threshold).astype(int)
    lab = np.asarray(labels).reshape(-1).astype(int)
    tp = int(np.sum((pred == 1) & (lab == 1)))
    tn = int(np.sum((pred == 0) & (lab == 0)))
    fp = int(np.sum((pred == 1) & (lab == 0)))
    fn = int(np.sum((pred == 0) & (lab == 1)))
    return metrics_from_counts(tp, fp, fn, tn)


def evaluate(detector: Detector, vectors: ad.Matrix, labels: np.ndarray,
             threshold: float = 0.5) -> EvalReport:
    if vectors.shape[0] == 0:
        raise ValueError("empty evaluation set")
    return evaluate_predictions(detector.predict_proba(vectors), labels,
                                threshold)


# ---------------------------------------------------------------------------
# pipeline + sweep


@dataclass
class PipelineResult:
    config: TrainConfig
    stats: kgdata.DatasetStats
    report: EvalReport
    valid_report: EvalReport | None
    majority_accuracy: float
    joint_losses: list[float]
    detector_losses: list[float]
    E: ad.Matrix
    R: ad.Matrix
    detector: Detector
    kg: kgdata.KnowledgeGraph
    wall_seconds: float = 0.0
    removed_by_cleaning: int = 0


def prepare_graph(train_file: str, test_file: str | None,
                  valid_file: str | None, config: TrainConfig,
                  rng: ad.Rng) -> tuple[kgdata.KnowledgeGraph, int]:
    """Load, clean, and synthesize unless labels are already present."""
    kg = kgdata.load_dataset(train_file, test_file, valid_file)
    kg, removed = kgdata.clean_splits(kg)
    has_labels = any(f.label == kgdata.OUTDATED for f in kg.facts)
    if not has_labels and config.fraction > 0:
        kg = kgdata.synthesize_outdated(kg, config.fraction,
                                        rng.substream("synthesis"),
                                        basis=config.fraction_basis)
    return kg, removed


def run_pipeline(train_file: str, test_file: str | None = None,
                 valid_file: str | None = None,
                 config: TrainConfig | None = None) -> PipelineResult:
    """The full detection pipeline from raw files to a test-set report."""
    config = (config or TrainConfig()).validate()
    rng = ad.Rng(config.seed)
    started = time.perf_counter()
    kg, removed = prepare_graph(train_file, test_file, valid_file, config,
                                rng)
    E0, R0 = transe.transe_train(
        kg, dim=config.dim, margin=config.margin,
        epochs=config.transe_epochs, lr=config.transe_lr,
        rng=rng.substream("transe"), batch=config.transe_batch)
    E, R, joint_losses = train_features(kg, E0, R0, config,
                                        rng.substream("features"))

    det_rng = rng.substream("detector")
    train_X, train_y = fact_vectors(E, R, kg.facts_of(kgdata.TRAIN))
    valid_facts = kg.facts_of(kgdata.VALID)
    valid_X, valid_y = fact_vectors(E, R, valid_facts)
    det_losses: list[float] = []
    detector = train_detector(
        train_X, train_y, config, det_rng,
        valid_X if valid_facts else None,
        valid_y if valid_facts else None, det_losses)
    if config.finetune:
        E, R = finetune_detector(kg.facts_of(kgdata.TRAIN), E, R, detector,
                                 config, det_rng.substream("finetune"),
                                 det_losses)
        valid_X, valid_y = fact_vectors(E, R, valid_facts)

    test_facts = kg.facts_of(kgdata.TEST)
    eval_facts = test_facts if test_facts else kg.facts_of(kgdata.TRAIN)
    test_X, test_y = fact_vectors(E, R, eval_facts)
    report = evaluate(detector, test_X, test_y, config.threshold)
    valid_report = evaluate(detector, valid_X, valid_y,
                            config.threshold) if valid_facts else None
    majority = float(np.mean(test_y == 1.0))
    return PipelineResult(
        config=config, stats=kgdata.stats(kg), report=report,
        valid_report=valid_report, majority_accuracy=majority,
        joint_losses=joint_losses, detector_losses=det_losses,
        E=E, R=R, detector=detector, kg=kg,
        wall_seconds=time.perf_counter() - started,
        removed_by_cleaning=removed)


SWEEP_PARAMS = {"heads": int, "lambda": float, "dim": int}
CSV_HEADER = "dataset,param,value,accuracy,precision,recall,f1,seed," \
             "wall_seconds"


def _fmt_value(v) -> str:
    return f"{v:g}" if isinstance(v, float) else str(v)


def sweep(param: str, values: list, base_config: TrainConfig,
          train_file: str, test_file: str | None, valid_file: str | None,
          dataset: str) -> tuple[str, int]:
    """One pipeline run per value at fixed seed; returns (CSV, failures).

    A failed run contributes a row with nan metrics and the sweep moves on.
    """
    if param not in SWEEP_PARAMS:
        raise ValueError(
            f"unknown sweep param {param!r}; choose from "
            f"{sorted(SWEEP_PARAMS)}")
    if not values:
        raise ValueError("sweep values must be nonempty")
    field_name = {"heads": "heads", "lambda": "lam", "dim": "dim"}[param]
    rows = [CSV_HEADER]
    failures = 0
    for value in values:
        cfg = replace(base_config, **{field_name: SWEEP_PARAMS[param](value)})
        began = time.perf_counter()
        try:
            res = run_pipeline(train_file, test_file, valid_file, cfg)
            r = res.report
            rows.append(
                f"{dataset},{param},{_fmt_value(value)},{r.accuracy:.6f},"
                f"{r.precision:.6f},{r.recall:.6f},{r.f1:.6f},{cfg.seed},"
                f"{time.perf_counter() - began:.3f}")
        except Exception as exc:  # noqa: BLE001 - sweep must keep going
            failures += 1
            warnings.warn(f"sweep run {param}={value} failed: {exc}",
                          stacklevel=2)
            rows.append(
                f"{dataset},{param},{_fmt_value(value)},nan,nan,nan,nan,"
                f"{base_config.seed},{time.perf_counter() - began:.3f}")
    return "\n".join(rows) + "\n", failures
