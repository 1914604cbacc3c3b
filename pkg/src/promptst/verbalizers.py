"""Classification heads: trainable two-layer verbalizer (MAV), single and
multi label-word mappings, and the [CLS] / [MASK]-representation linear heads.

MAV and the label-word heads consume the vocabulary logit vector produced
by the MLM head; the linear heads consume raw hidden states and bypass the
MLM head entirely.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Parameter, Tensor
from .corpus import Example, Vocabulary, apply_template, pad_batch
from .model import ModelParams, encoder_forward, glorot, mlm_logits_at

HEAD_KINDS = ("mav", "single", "multi", "cls", "maskrep")
N_SPECIALS = 5
DEFAULT_TOP_K = 16


def default_d_ve(vocab_size: int) -> int:
    # 256 suits a full-size vocabulary; scale down for toy token spaces
    return min(256, max(1, vocab_size // 2))


@dataclass
class MavParams:
    w_ve: Parameter  # vocab extractor: |V| x d_ve
    w_c: Parameter   # class projection: d_ve x c

    @property
    def d_ve(self) -> int:
        return self.w_ve.data.shape[1]

    @property
    def n_classes(self) -> int:
        return self.w_c.data.shape[1]


def make_mav(vocab_size: int, n_classes: int, d_ve: int | None = None, seed: int = 0) -> MavParams:
    d_ve = default_d_ve(vocab_size) if d_ve is None else int(d_ve)
    if d_ve < 1:
        raise ValueError("d_ve must be at least 1")
    rng = np.random.default_rng([seed, 0x41])
    return MavParams(
        w_ve=Parameter(glorot(rng, (vocab_size, d_ve)), "clf.mav.w_ve"),
        w_c=Parameter(glorot(rng, (d_ve, n_classes)), "clf.mav.w_c"),
    )


def mav_class_scores(v: Tensor, p: MavParams) -> Tensor:
    """Pre-softmax class scores: tanh(v) through the vocab extractor, tanh
    again, then the class projection."""
    if v.shape[-1] != p.w_ve.data.shape[0]:
        raise ValueError(
            f"vocabulary width mismatch: v has {v.shape[-1]}, extractor expects {p.w_ve.data.shape[0]}"
        )
    return ad.tanh(ad.tanh(v) @ p.w_ve) @ p.w_c


def mav_forward(v: Tensor, p: MavParams) -> Tensor:
    """Class probability vector(s) for vocabulary logits v."""
    return ad.softmax(mav_class_scores(v, p), axis=-1)


# -- label-word heads ---------------------------------------------------------


@dataclass
class LabelWordMap:
    ids: np.ndarray  # one token id per class

    def __post_init__(self):
        self.ids = np.asarray(self.ids, dtype=np.int64)
        if len(set(self.ids.tolist())) != self.ids.size:
            raise ValueError("label words must be distinct across classes")
        if (self.ids < N_SPECIALS).any():
            raise ValueError("label words must not be special tokens")

    @property
    def n_classes(self) -> int:
        return int(self.ids.size)


def single_label_forward(v: Tensor, lmap: LabelWordMap) -> Tensor:
    """Class logits: the raw logit value of each class's label word."""
    if int(lmap.ids.max()) >= v.shape[-1]:
        raise ValueError("label word id out of vocabulary range")
    return v[..., lmap.ids]


@dataclass
class MultiLabelMap:
    lists: list[list[int]]

    def __post_init__(self):
        seen = set()
        for ids in self.lists:
            if not ids:
                raise ValueError("every class needs at least one label word")
            for t in ids:
                if t < N_SPECIALS:
                    raise ValueError("label words must not be special tokens")
                if t in seen:
                    raise ValueError(f"token id {t} mapped to two classes")
                seen.add(t)

    @property
    def n_classes(self) -> int:
        return len(self.lists)

    def selector(self, vocab_size: int) -> np.ndarray:
        sel = np.zeros((vocab_size, len(self.lists)))
        for c, ids in enumerate(self.lists):
            sel[ids, c] = 1.0
        return sel


def multi_label_forward(v: Tensor, mmap: MultiLabelMap) -> Tensor:
    """Class logits: sum of each class's label-word logits."""
    top = max(max(ids) for ids in mmap.lists)
    if top >= v.shape[-1]:
        raise ValueError("label word id out of vocabulary range")
    return v @ Tensor(mmap.selector(v.shape[-1]))


def amulap_build(
    labeled: list[Example],
    params: ModelParams,
    vocab: Vocabulary,
    n_classes: int,
    top_k: int = DEFAULT_TOP_K,
) -> MultiLabelMap:
    """Zero-shot label-word selection: average [MASK] prediction
    probabilities per class over the labeled shots, then hand out tokens
    greedily by descending average with cross-class deduplication (a
    contested token goes to the class with the higher average; exact ties
    break toward the lower token id, then the lower class index)."""
    if not labeled:
        raise ValueError("need labeled examples to build the map")
    seqs = [apply_template(ex, vocab, params.config.max_len) for ex in labeled]
    labels = np.array([ex.label for ex in labeled])
    ids, attn, mask_pos = pad_batch(seqs)
    with ad.no_grad():
        hidden = encoder_forward(params, ids, attn)
        logits = mlm_logits_at(params, hidden, np.arange(len(seqs)), mask_pos)
        probs = ad.softmax(logits, axis=-1).data
    avg = np.zeros((n_classes, vocab.size))
    for c in range(n_classes):
        members = probs[labels == c]
        if members.size == 0:
            raise ValueError(f"class {c} has no labeled examples")
        avg[c] = members.mean(axis=0)

    candidates = []
    for c in range(n_classes):
        for t in range(N_SPECIALS, vocab.size):
            candidates.append((-avg[c, t], t, c))
    candidates.sort()
    assigned: set[int] = set()
    lists: list[list[int]] = [[] for _ in range(n_classes)]
    remaining = n_classes
    for negp, t, c in candidates:
        if remaining == 0:
            break
        if t in assigned or len(lists[c]) >= top_k:
            continue
        lists[c].append(t)
        assigned.add(t)
        if len(lists[c]) == top_k:
            remaining -= 1
    for c, ids_c in enumerate(lists):
        if not ids_c:
            raise ValueError(f"deduplication left class {c} with no label words")
    return MultiLabelMap(lists)


# -- linear heads over hidden states -------------------------------------------


@dataclass
class LinearHead:
    w: Parameter  # d_model x c
    b: Parameter  # c


def make_linear_head(d_model: int, n_classes: int, seed: int = 0) -> LinearHead:
    rng = np.random.default_rng([seed, 0x42])
    return LinearHead(
        w=Parameter(glorot(rng, (d_model, n_classes)), "clf.lin.w"),
        b=Parameter(np.zeros(n_classes), "clf.lin.b"),
    )


def linear_logits(rows: Tensor, head: LinearHead) -> Tensor:
    return rows @ head.w + head.b


def cls_head_forward(hidden: Tensor, head: LinearHead) -> Tensor:
    """Class logits from the [CLS] (position 0) representation of one
    sequence."""
    return linear_logits(hidden[0:1], head).reshape((-1,))


def maskrep_forward(hidden: Tensor, pos: int, head: LinearHead) -> Tensor:
    """Class logits straight from the [MASK] hidden state, bypassing the
    MLM head."""
    if not 0 <= pos < hidden.shape[0]:
        raise ValueError(f"mask position {pos} out of range")
    return linear_logits(hidden[pos : pos + 1], head).reshape((-1,))


# -- unified head -----------------------------------------------------------


class Head:
    """One of the five classification heads behind a single batched API."""

    def __init__(self, kind: str, n_classes: int, mav: MavParams | None = None,
                 label_map: LabelWordMap | None = None,
                 multi_map: MultiLabelMap | None = None,
                 linear: LinearHead | None = None):
        if kind not in HEAD_KINDS:
            raise ValueError(f"unknown head {kind!r}; expected one of {HEAD_KINDS}")
        self.kind = kind
        self.n_classes = n_classes
        self.mav = mav
        self.label_map = label_map
        self.multi_map = multi_map
        self.linear = linear

    @property
    def needs_template(self) -> bool:
        return self.kind != "cls"

    @property
    def reads_vocab_logits(self) -> bool:
        return self.kind in ("mav", "single", "multi")

    def trainable(self) -> dict[str, Parameter]:
        if self.kind == "mav":
            return {p.name: p for p in (self.mav.w_ve, self.mav.w_c)}
        if self.kind in ("cls", "maskrep"):
            return {p.name: p for p in (self.linear.w, self.linear.b)}
        return {}

    def class_probs(self, v: Tensor | None = None, rep: Tensor | None = None) -> Tensor:
        """Probability rows for a batch; v is the [MASK] vocabulary logit
        matrix, rep the relevant hidden-state rows ([CLS] or [MASK])."""
        if self.kind == "mav":
            return mav_forward(v, self.mav)
        if self.kind == "single":
            return ad.softmax(single_label_forward(v, self.label_map), axis=-1)
        if self.kind == "multi":
            return ad.softmax(multi_label_forward(v, self.multi_map), axis=-1)
        return ad.softmax(linear_logits(rep, self.linear), axis=-1)

    def state_arrays(self) -> dict[str, np.ndarray]:
        return {name: p.data for name, p in self.trainable().items()}

    def meta(self) -> dict:
        m = {"kind": self.kind, "n_classes": self.n_classes}
        if self.kind == "single":
            m["label_ids"] = self.label_map.ids.tolist()
        if self.kind == "multi":
            m["lists"] = [list(ids) for ids in self.multi_map.lists]
        return m


def make_head(
    kind: str,
    vocab_size: int,
    n_classes: int,
    d_model: int,
    seed: int = 0,
    d_ve: int | None = None,
    label_map: LabelWordMap | None = None,
    multi_map: MultiLabelMap | None = None,
) -> Head:
    if kind == "mav":
        return Head(kind, n_classes, mav=make_mav(vocab_size, n_classes, d_ve, seed))
    if kind == "single":
        if label_map is None:
            raise ValueError("single head needs a label-word map")
        return Head(kind, n_classes, label_map=label_map)
    if kind == "multi":
        if multi_map is None:
            raise ValueError("multi head needs a multi-label-word map")
        return Head(kind, n_classes, multi_map=multi_map)
    if kind in ("cls", "maskrep"):
        return Head(kind, n_classes, linear=make_linear_head(d_model, n_classes, seed))
    raise ValueError(f"unknown head {kind!r}; expected one of {HEAD_KINDS}")


def head_from_checkpoint(meta: dict, arrays: dict[str, np.ndarray]) -> Head:
    kind = meta["kind"]
    n_classes = meta["n_classes"]
    if kind == "mav":
        return Head(kind, n_classes, mav=MavParams(
            w_ve=Parameter(arrays["clf.mav.w_ve"], "clf.mav.w_ve"),
            w_c=Parameter(arrays["clf.mav.w_c"], "clf.mav.w_c"),
        ))
    if kind == "single":
        return Head(kind, n_classes, label_map=LabelWordMap(np.array(meta["label_ids"])))
    if kind == "multi":
        return Head(kind, n_classes, multi_map=MultiLabelMap([list(x) for x in meta["lists"]]))
    return Head(kind, n_classes, linear=LinearHead(
        w=Parameter(arrays["clf.lin.w"], "clf.lin.w"),
        b=Parameter(arrays["clf.lin.b"], "clf.lin.b"),
    ))


# -- label-word map serialization ---------------------------------------------


def save_word_map(path, lists_or_map, vocab: Vocabulary):
    """Persist a label-word map as JSON: class index -> token strings."""
    if isinstance(lists_or_map, LabelWordMap):
        lists = [[int(i)] for i in lists_or_map.ids]
    else:
        lists = lists_or_map.lists
    payload = {str(c): [vocab.token(t) for t in ids] for c, ids in enumerate(lists)}
    Path(path).write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")


def load_word_lists(path, vocab: Vocabulary) -> list[list[int]]:
    payload = json.loads(Path(path).read_text())
    lists = []
    for c in range(len(payload)):
        if str(c) not in payload:
            raise ValueError(f"label-word file missing class {c}")
        ids = []
        for tok in payload[str(c)]:
            t = vocab.encode_token(tok)
            if t < N_SPECIALS:
                raise ValueError(f"label word {tok!r} is unknown to the vocabulary or special")
            ids.append(t)
        lists.append(ids)
    return lists


def load_single_map(path, vocab: Vocabulary) -> LabelWordMap:
    lists = load_word_lists(path, vocab)
    if any(len(ids) != 1 for ids in lists):
        raise ValueError("single-label-word file must map each class to exactly one token")
    return LabelWordMap(np.array([ids[0] for ids in lists]))


def load_multi_map(path, vocab: Vocabulary) -> MultiLabelMap:
    return MultiLabelMap(load_word_lists(path, vocab))


def manual_label_map(keyword_sets: list[list[str]], vocab: Vocabulary) -> LabelWordMap:
    """Designated manual label words for synthetic data: each class's first
    keyword."""
    ids = [vocab.encode_token(ks[0]) for ks in keyword_sets]
    return LabelWordMap(np.array(ids))
