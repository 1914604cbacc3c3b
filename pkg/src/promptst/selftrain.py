"""FixMatch-style semi-supervised training on top of the prompt template.

Per step: a supervised branch on labeled data, a dropout-only weak branch
that mints pseudo-labels (no gradient), a strongly augmented branch pulled
toward the confident pseudo-labels, and an auxiliary masked-token branch
on freshly re-masked unlabeled text. The three losses combine as
l_sup + lambda1 * l_st + lambda2 * l_mlm.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .corpus import (
    EncodedSequence,
    Example,
    FewShotSplit,
    Vocabulary,
    apply_template,
    encode_plain,
    pad_batch,
    MASK_ID,
)
from .model import (
    Adam,
    ModelParams,
    TrainingDivergence,
    compute_gradients,
    encoder_forward,
    mlm_logits_at,
    set_freeze,
)
from .verbalizers import Head, N_SPECIALS

PROB_FLOOR = 1e-12  # clamp before logs so saturated softmax cannot yield -inf
STRONG_AUG_METHODS = ("random_mask", "word_delete", "word_swap")
STRONG_AUG_DEFAULT_P = {"random_mask": 0.15, "word_delete": 0.20, "word_swap": 0.20}
MODES = ("small_supervised", "semi_supervised", "full_supervised")


@dataclass
class TrainConfig:
    B: int = 8
    mu: int = 4
    tau: float = 0.95
    lambda1: float = 1.0
    lambda2: float = 0.1
    lr: float = 1e-4
    epochs: int = 30
    eval_every: int = 5
    freeze: str = "mlm_head"
    strong_aug: str = "random_mask"
    strong_aug_p: float | None = None
    flexmatch: bool = False
    seed: int = 0

    def __post_init__(self):
        if self.B < 1 or self.mu < 1:
            raise ValueError("B and mu must be at least 1")
        if self.tau <= 0:
            raise ValueError("tau must be positive")
        if self.lambda1 < 0 or self.lambda2 < 0:
            raise ValueError("loss weights must be nonnegative")
        if self.strong_aug not in STRONG_AUG_METHODS:
            raise ValueError(f"unknown strong augmentation {self.strong_aug!r}")

    @property
    def aug_p(self) -> float:
        if self.strong_aug_p is not None:
            return self.strong_aug_p
        return STRONG_AUG_DEFAULT_P[self.strong_aug]


# -- augmentations ------------------------------------------------------------


def weak_augment(u: EncodedSequence) -> EncodedSequence:
    """Identity on token ids; the weak view differs only through dropout
    inside the forward pass."""
    return u


def _eligible_positions(u: EncodedSequence) -> np.ndarray:
    lo, hi = u.body_range()
    pos = np.arange(lo, hi)
    return pos[u.ids[lo:hi] >= N_SPECIALS]


def strong_augment(
    u: EncodedSequence, method: str, p: float, rng: np.random.Generator
) -> EncodedSequence:
    """Token-level corruption of the body; the template scaffold and any
    special tokens are untouched and mask_pos stays valid."""
    if method not in STRONG_AUG_METHODS:
        raise ValueError(f"unknown strong augmentation {method!r}")
    eligible = _eligible_positions(u)
    if eligible.size == 0 or p <= 0:
        return u
    ids = u.ids.copy()
    if method == "random_mask":
        hit = rng.random(eligible.size) < p
        ids[eligible[hit]] = MASK_ID
        return EncodedSequence(ids, u.mask_pos, u.attention_len)
    if method == "word_swap":
        if eligible.size < 2:
            return u
        for i, pos in enumerate(eligible):
            if rng.random() < p:
                j = int(rng.integers(eligible.size - 1))
                if j >= i:
                    j += 1
                other = eligible[j]
                ids[pos], ids[other] = ids[other], ids[pos]
        return EncodedSequence(ids, u.mask_pos, u.attention_len)
    # word_delete: drop tokens, close the gap, re-pad
    lo, _ = u.body_range()
    keep_mask = np.ones(len(ids), dtype=bool)
    keep_mask[eligible[rng.random(eligible.size) < p]] = False
    kept = ids[: u.attention_len][keep_mask[: u.attention_len]]
    new = np.zeros_like(ids)
    new[: kept.size] = kept
    return EncodedSequence(new, u.mask_pos, int(kept.size))


@dataclass
class MaskedBatch:
    """Unlabeled sequences with fresh random masking for the auxiliary
    masked-token loss; the template [MASK] is never re-masked."""

    ids: np.ndarray
    attn_len: np.ndarray
    positions: list[np.ndarray]
    targets: list[np.ndarray]
    mask_pos: np.ndarray

    def __post_init__(self):
        for seq_idx, pos in enumerate(self.positions):
            if self.mask_pos[seq_idx] >= 0 and np.any(pos == self.mask_pos[seq_idx]):
                raise ValueError(f"sequence {seq_idx}: template mask position re-masked")

    @property
    def n_sequences(self) -> int:
        return len(self.positions)


def random_mask_batch(
    seqs: list[EncodedSequence], rng: np.random.Generator, mask_rate: float = 0.15
) -> MaskedBatch:
    ids, attn, mask_pos = pad_batch(seqs)
    corrupted = ids.copy()
    positions, targets = [], []
    for i, s in enumerate(seqs):
        eligible = _eligible_positions(s)
        hit = eligible[rng.random(eligible.size) < mask_rate] if eligible.size else eligible
        corrupted[i, hit] = MASK_ID
        positions.append(hit.astype(np.int64))
        targets.append(s.ids[hit].astype(np.int64))
    return MaskedBatch(corrupted, attn, positions, targets, mask_pos)


# -- losses ---------------------------------------------------------------


def supervised_loss(probs: Tensor, labels: np.ndarray) -> Tensor:
    """Mean cross entropy against integer labels; natural log."""
    labels = np.asarray(labels, dtype=np.int64)
    n = probs.shape[0]
    if labels.shape[0] != n:
        raise ValueError("predictions and labels are misaligned")
    logp = ad.log(ad.clip_min(probs, PROB_FLOOR))
    return -logp[(np.arange(n), labels)].mean()


@dataclass
class PseudoLabelBatch:
    """Weak-branch outputs for one unlabeled batch."""

    distributions: np.ndarray  # q~ weak, rows sum to 1
    hard_labels: np.ndarray    # argmax per row
    confidences: np.ndarray    # max per row
    passed: np.ndarray         # confidence >= threshold (per-class aware)
    n_classes: int

    @property
    def passed_count(self) -> int:
        return int(self.passed.sum())

    @property
    def per_class_passed(self) -> np.ndarray:
        return np.bincount(self.hard_labels[self.passed], minlength=self.n_classes)


def selftrain_loss(
    weak_probs: np.ndarray,
    strong_probs: Tensor,
    tau: float | np.ndarray,
    mu_b: int,
) -> tuple[Tensor, PseudoLabelBatch]:
    """Consistency loss: cross entropy of the strong branch against hard
    pseudo-labels, counted only above the confidence threshold, always
    normalized by the unlabeled batch size."""
    weak_probs = np.asarray(weak_probs)
    if weak_probs.shape[0] != strong_probs.shape[0] or weak_probs.shape[0] != mu_b:
        raise ValueError("weak and strong branches are misaligned")
    conf = weak_probs.max(axis=-1)
    hard = weak_probs.argmax(axis=-1)
    thresholds = tau[hard] if isinstance(tau, np.ndarray) else tau
    passed = conf >= thresholds
    stats = PseudoLabelBatch(weak_probs, hard, conf, passed, weak_probs.shape[1])
    rows = np.nonzero(passed)[0]
    if rows.size == 0:
        return Tensor(0.0), stats
    logp = ad.log(ad.clip_min(strong_probs[(rows, hard[rows])], PROB_FLOOR))
    return -logp.sum() / mu_b, stats


def mlm_aux_loss(
    batch: MaskedBatch,
    params: ModelParams,
    rng: np.random.Generator | None = None,
    train_mode: bool = True,
) -> Tensor:
    """Average over sequences of the per-sequence mean masked-token loss;
    sequences with no masked positions contribute zero but stay in the
    denominator."""
    n = batch.n_sequences
    rows, cols, targets, weights = [], [], [], []
    for i, (pos, tgt) in enumerate(zip(batch.positions, batch.targets)):
        if pos.size == 0:
            continue
        rows.extend([i] * pos.size)
        cols.extend(pos.tolist())
        targets.extend(tgt.tolist())
        weights.extend([1.0 / (pos.size * n)] * pos.size)
    if not rows:
        return Tensor(0.0)
    hidden = encoder_forward(params, batch.ids, batch.attn_len, train_mode, rng)
    logits = mlm_logits_at(params, hidden, np.array(rows), np.array(cols))
    logp = ad.log_softmax(logits, axis=-1)
    picked = logp[(np.arange(len(rows)), np.array(targets))]
    return -(picked * Tensor(np.array(weights))).sum()


def total_loss(l_sup, l_st, l_mlm, lambda1: float, lambda2: float):
    return l_sup + lambda1 * l_st + lambda2 * l_mlm


def flexmatch_thresholds(sigma: np.ndarray, tau: float) -> np.ndarray:
    """Per-class thresholds scaled by pass counts: tau * sigma_c / max
    sigma; all-zero counts warm up to the flat threshold."""
    sigma = np.asarray(sigma, dtype=np.float64)
    if (sigma < 0).any():
        raise ValueError("pass counts must be nonnegative")
    top = sigma.max() if sigma.size else 0.0
    if top <= 0:
        return np.full(sigma.shape, tau)
    return tau * sigma / top


# -- stepping ------------------------------------------------------------------


@dataclass
class LossBreakdown:
    l_sup: float
    l_st: float
    l_mlm: float
    l_total: float
    passed_count: int
    per_class_passed: np.ndarray


def head_probs_batch(
    params: ModelParams,
    head: Head,
    ids: np.ndarray,
    attn: np.ndarray,
    mask_pos: np.ndarray,
    train_mode: bool = False,
    rng: np.random.Generator | None = None,
) -> Tensor:
    """Forward one padded batch through the encoder and the head."""
    hidden = encoder_forward(params, ids, attn, train_mode, rng)
    n = ids.shape[0]
    if head.reads_vocab_logits:
        v = mlm_logits_at(params, hidden, np.arange(n), mask_pos)
        return head.class_probs(v=v)
    rows = np.zeros(n, dtype=np.int64) if head.kind == "cls" else mask_pos
    rep = hidden[(np.arange(n), rows)]
    return head.class_probs(rep=rep)


def encode_for_head(examples: list[Example], head: Head, vocab: Vocabulary, max_len: int):
    if head.needs_template:
        return [apply_template(ex, vocab, max_len) for ex in examples]
    return [encode_plain(ex, vocab, max_len) for ex in examples]


def _check_branch(value: Tensor, branch: str, step: int):
    if not np.isfinite(value.data).all():
        raise TrainingDivergence(f"{branch} branch produced a non-finite loss", step)


def train_step(
    params: ModelParams,
    head: Head,
    optimizer: Adam,
    labeled: list[EncodedSequence],
    labels: np.ndarray,
    unlabeled: list[EncodedSequence],
    config: TrainConfig,
    step: int,
    flex_sigma: np.ndarray | None = None,
) -> LossBreakdown:
    """One optimizer step over a labeled batch plus (optionally) an
    unlabeled batch run through the weak/strong/masking branches."""
    seed = config.seed
    rng_lab = np.random.default_rng([seed, step, 0])
    rng_weak = np.random.default_rng([seed, step, 1])
    rng_strong = np.random.default_rng([seed, step, 2])
    rng_mlm = np.random.default_rng([seed, step, 3])

    ids, attn, mpos = pad_batch(labeled)
    probs = head_probs_batch(params, head, ids, attn, mpos, train_mode=True, rng=rng_lab)
    l_sup = supervised_loss(probs, labels)
    _check_branch(l_sup, "supervised", step)

    n_classes = head.n_classes
    if unlabeled:
        mu_b = len(unlabeled)
        weak = [weak_augment(u) for u in unlabeled]
        w_ids, w_attn, w_mpos = pad_batch(weak)
        with ad.no_grad():
            weak_probs = head_probs_batch(
                params, head, w_ids, w_attn, w_mpos, train_mode=True, rng=rng_weak
            ).data
        strong = [strong_augment(u, config.strong_aug, config.aug_p, rng_strong) for u in unlabeled]
        s_ids, s_attn, s_mpos = pad_batch(strong)
        strong_probs = head_probs_batch(
            params, head, s_ids, s_attn, s_mpos, train_mode=True, rng=rng_strong
        )
        tau = config.tau
        if config.flexmatch and flex_sigma is not None:
            tau = flexmatch_thresholds(flex_sigma, config.tau)
        l_st, stats = selftrain_loss(weak_probs, strong_probs, tau, mu_b)
        _check_branch(l_st, "self-training", step)
        masked = random_mask_batch(unlabeled, rng_mlm)
        l_mlm = mlm_aux_loss(masked, params, rng_mlm, train_mode=True)
        _check_branch(l_mlm, "auxiliary-mlm", step)
        passed_count = stats.passed_count
        per_class = stats.per_class_passed
    else:
        l_st = Tensor(0.0)
        l_mlm = Tensor(0.0)
        passed_count = 0
        per_class = np.zeros(n_classes, dtype=np.int64)

    l_tot = total_loss(l_sup, l_st, l_mlm, config.lambda1, config.lambda2)
    all_params = dict(params.named())
    all_params.update(head.trainable())
    grads = compute_gradients(l_tot, all_params)
    optimizer.step(all_params, grads)
    return LossBreakdown(
        l_sup=float(l_sup.data),
        l_st=float(l_st.data),
        l_mlm=float(l_mlm.data),
        l_total=float(l_sup.data) + config.lambda1 * float(l_st.data) + config.lambda2 * float(l_mlm.data),
        passed_count=passed_count,
        per_class_passed=per_class,
    )


# -- the loop ------------------------------------------------------------------


@dataclass
class TrainResult:
    params: ModelParams
    head: Head
    history: list[dict]
    best_dev_acc: float
    best_epoch: int


def predict(
    params: ModelParams,
    head: Head,
    examples: list[Example],
    vocab: Vocabulary,
    batch_size: int = 64,
) -> np.ndarray:
    """Deterministic class predictions (eval mode, no dropout)."""
    seqs = encode_for_head(examples, head, vocab, params.config.max_len)
    preds = []
    with ad.no_grad():
        for start in range(0, len(seqs), batch_size):
            chunk = seqs[start : start + batch_size]
            ids, attn, mpos = pad_batch(chunk)
            probs = head_probs_batch(params, head, ids, attn, mpos)
            preds.append(probs.data.argmax(axis=-1))
    return np.concatenate(preds) if preds else np.zeros(0, dtype=np.int64)


def _dev_accuracy(params, head, examples, vocab) -> float:
    labels = np.array([ex.label for ex in examples])
    preds = predict(params, head, examples, vocab)
    return float((preds == labels).mean())


def _snapshot(params: ModelParams, head: Head) -> dict[str, np.ndarray]:
    state = params.state_dict()
    state.update({name: arr.copy() for name, arr in head.state_arrays().items()})
    return state


def _restore(params: ModelParams, head: Head, state: dict[str, np.ndarray]):
    params.load_state({n: state[n] for n in params.named()})
    for name, p in head.trainable().items():
        p.data = state[name].copy()


def train_loop(
    params: ModelParams,
    head: Head,
    split: FewShotSplit,
    vocab: Vocabulary,
    mode: str,
    config: TrainConfig,
) -> TrainResult:
    """Train under one of three supervision regimes and keep the best
    dev-accuracy checkpoint.

    small_supervised: labeled shots only. semi_supervised: labeled shots
    plus unlabeled data through all three losses. full_supervised: labeled
    shots plus the unlabeled pool with its ground-truth labels restored.
    """
    if mode not in MODES:
        raise ValueError(f"unknown mode {mode!r}; expected one of {MODES}")
    if not split.labeled or not split.dev:
        raise ValueError("split has no labeled or dev examples")

    labeled_pool = list(split.labeled)
    if mode == "full_supervised":
        if len(split.unlabeled) != len(split.unlabeled_truth):
            raise ValueError("unlabeled pool and retained truth are misaligned")
        labeled_pool += [
            Example(ex.text, y) for ex, y in zip(split.unlabeled, split.unlabeled_truth)
        ]
    max_len = params.config.max_len
    enc_labeled = encode_for_head(labeled_pool, head, vocab, max_len)
    pool_labels = np.array([ex.label for ex in labeled_pool], dtype=np.int64)
    enc_unlabeled = (
        encode_for_head(split.unlabeled, head, vocab, max_len)
        if mode == "semi_supervised"
        else []
    )

    set_freeze(params, config.freeze)
    optimizer = Adam(lr=config.lr)
    order_rng = np.random.default_rng([config.seed, 0x51])
    unl_rng = np.random.default_rng([config.seed, 0x52])
    flex_sigma = np.zeros(head.n_classes, dtype=np.int64)

    history: list[dict] = []
    best_acc = _dev_accuracy(params, head, split.dev, vocab)
    best_epoch = 0
    best_state = _snapshot(params, head)
    history.append(
        {"epoch": 0, "l_sup": math.nan, "l_st": math.nan, "l_mlm": math.nan,
         "passed_count": 0, "dev_acc": best_acc}
    )

    step = 0
    n = len(enc_labeled)
    for epoch in range(1, config.epochs + 1):
        perm = order_rng.permutation(n)
        sums = np.zeros(3)
        passed = 0
        batches = 0
        for start in range(0, n, config.B):
            idx = perm[start : start + config.B]
            batch = [enc_labeled[i] for i in idx]
            labels = pool_labels[idx]
            if enc_unlabeled:
                pick = unl_rng.integers(len(enc_unlabeled), size=config.mu * len(idx))
                unlabeled = [enc_unlabeled[i] for i in pick]
            else:
                unlabeled = []
            bd = train_step(
                params, head, optimizer, batch, labels, unlabeled, config, step, flex_sigma
            )
            flex_sigma = flex_sigma + bd.per_class_passed
            sums += (bd.l_sup, bd.l_st, bd.l_mlm)
            passed += bd.passed_count
            batches += 1
            step += 1
        row = {
            "epoch": epoch,
            "l_sup": sums[0] / batches,
            "l_st": sums[1] / batches,
            "l_mlm": sums[2] / batches,
            "passed_count": passed,
            "dev_acc": math.nan,
        }
        if epoch % config.eval_every == 0 or epoch == config.epochs:
            acc = _dev_accuracy(params, head, split.dev, vocab)
            row["dev_acc"] = acc
            if acc > best_acc:
                best_acc = acc
                best_epoch = epoch
                best_state = _snapshot(params, head)
        history.append(row)

    _restore(params, head, best_state)
    return TrainResult(params, head, history, best_acc, best_epoch)


HISTORY_COLUMNS = ("epoch", "l_sup", "l_st", "l_mlm", "passed_count", "dev_acc")


def save_history(path, history: list[dict]):
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(HISTORY_COLUMNS)
        for row in history:
            writer.writerow([row[c] for c in HISTORY_COLUMNS])


def load_history(path) -> list[dict]:
    out = []
    with open(path) as f:
        for row in csv.DictReader(f):
            out.append(
                {
                    "epoch": int(row["epoch"]),
                    "l_sup": float(row["l_sup"]),
                    "l_st": float(row["l_st"]),
                    "l_mlm": float(row["l_mlm"]),
                    "passed_count": int(row["passed_count"]),
                    "dev_acc": float(row["dev_acc"]),
                }
            )
    return out
