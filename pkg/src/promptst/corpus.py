"""Tokenization, synthetic corpus generation, template wrapping, and few-shot splits.

Tokenization is whitespace splitting over a closed vocabulary; unknown
surface forms map to [UNK] so held-out text never errors.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

SPECIAL_TOKENS = ("[PAD]", "[UNK]", "[CLS]", "[SEP]", "[MASK]")
PAD_ID, UNK_ID, CLS_ID, SEP_ID, MASK_ID = range(5)
TEMPLATE_GLUE = ":"

# fixed skew of token draws inside each pool; peaked frequencies make
# masked-token recovery learnable instead of a uniform guessing game
ZIPF_EXPONENT = 2.0


class Vocabulary:
    """Closed token space: five special tokens first, then corpus tokens
    in first-occurrence order."""

    def __init__(self, tokens: list[str]):
        if list(tokens[:5]) != list(SPECIAL_TOKENS):
            raise ValueError("vocabulary must start with the five special tokens")
        self.tokens = list(tokens)
        self._ids = {tok: i for i, tok in enumerate(self.tokens)}
        if len(self._ids) != len(self.tokens):
            raise ValueError("duplicate tokens in vocabulary")

    @property
    def size(self) -> int:
        return len(self.tokens)

    def encode_token(self, token: str) -> int:
        return self._ids.get(token, UNK_ID)

    def token(self, idx: int) -> str:
        return self.tokens[idx]

    def is_special(self, idx: int) -> bool:
        return idx < len(SPECIAL_TOKENS)

    def hash(self) -> str:
        joined = "\x1f".join(self.tokens).encode("utf-8")
        return hashlib.sha256(joined).hexdigest()

    def save(self, path):
        Path(path).write_text(json.dumps({"tokens": self.tokens}, indent=0) + "\n")

    @classmethod
    def load(cls, path) -> "Vocabulary":
        return cls(json.loads(Path(path).read_text())["tokens"])


@dataclass
class Example:
    text: str
    label: int | None = None

    @property
    def tokens(self) -> list[str]:
        return self.text.split()


@dataclass
class EncodedSequence:
    """Token ids padded to a fixed length.

    mask_pos is the index of the template [MASK] (always 1), or -1 for
    plain sequences encoded without a template.
    """

    ids: np.ndarray
    mask_pos: int
    attention_len: int

    def body_range(self) -> tuple[int, int]:
        """Half-open index range of body tokens (template scaffold and
        specials excluded)."""
        start = 3 if self.mask_pos == 1 else 1
        return start, self.attention_len - 1


def build_vocab(corpus: list[Example]) -> Vocabulary:
    if not corpus:
        raise ValueError("cannot build a vocabulary from an empty corpus")
    tokens = list(SPECIAL_TOKENS)
    seen = set(tokens)
    for ex in corpus:
        for tok in ex.tokens:
            if tok not in seen:
                seen.add(tok)
                tokens.append(tok)
    return Vocabulary(tokens)


def apply_template(x: Example, vocab: Vocabulary, max_len: int) -> EncodedSequence:
    """Wrap an input as [CLS] [MASK] : x [SEP], truncated to max_len and
    padded with [PAD]."""
    if max_len < 5:
        raise ValueError(f"max_len={max_len} cannot fit the template plus any input")
    body = [vocab.encode_token(t) for t in x.tokens][: max_len - 4]
    ids = [CLS_ID, MASK_ID, vocab.encode_token(TEMPLATE_GLUE)] + body + [SEP_ID]
    attention_len = len(ids)
    ids = ids + [PAD_ID] * (max_len - attention_len)
    return EncodedSequence(np.array(ids, dtype=np.int64), 1, attention_len)


def encode_plain(x: Example, vocab: Vocabulary, max_len: int) -> EncodedSequence:
    """[CLS] x [SEP] without any template; used by standard fine-tuning
    and MLM pre-training."""
    if max_len < 3:
        raise ValueError(f"max_len={max_len} cannot fit [CLS] and [SEP]")
    body = [vocab.encode_token(t) for t in x.tokens][: max_len - 2]
    ids = [CLS_ID] + body + [SEP_ID]
    attention_len = len(ids)
    ids = ids + [PAD_ID] * (max_len - attention_len)
    return EncodedSequence(np.array(ids, dtype=np.int64), -1, attention_len)


def pad_batch(seqs: list[EncodedSequence]) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Stack sequences into (ids, attention_len, mask_pos) arrays, trimmed
    to the longest attention span in the batch."""
    attn = np.array([s.attention_len for s in seqs], dtype=np.int64)
    width = int(attn.max())
    ids = np.stack([s.ids[:width] for s in seqs])
    mask_pos = np.array([s.mask_pos for s in seqs], dtype=np.int64)
    return ids, attn, mask_pos


# -- synthetic data ---------------------------------------------------------


@dataclass
class SyntheticSpec:
    num_classes: int
    class_keyword_sets: list[list[str]]
    background_pool: list[str]
    mix_rate: float
    length_range: tuple[int, int]
    corpus_size: int
    pool_per_class: int = 200

    def __post_init__(self):
        if self.num_classes != len(self.class_keyword_sets):
            raise ValueError("one keyword set per class required")
        flat = [t for ks in self.class_keyword_sets for t in ks]
        if len(flat) != len(set(flat)):
            raise ValueError("class keyword sets must be pairwise disjoint")
        if set(flat) & set(self.background_pool):
            raise ValueError("background pool overlaps a class keyword set")
        if not 0.0 <= self.mix_rate <= 1.0:
            raise ValueError("mix_rate must lie in [0, 1]")
        lo, hi = self.length_range
        if lo < 1 or hi < lo:
            raise ValueError("invalid length_range")


def default_synthetic_spec(
    num_classes: int = 6,
    keywords_per_class: int = 10,
    background_size: int = 40,
    mix_rate: float = 0.5,
    length_range: tuple[int, int] = (3, 10),
    corpus_size: int = 3000,
    pool_per_class: int = 200,
) -> SyntheticSpec:
    keyword_sets = [
        [f"k{c}{chr(ord('a') + i)}" for i in range(keywords_per_class)]
        for c in range(num_classes)
    ]
    background = [f"w{i:02d}" for i in range(background_size)]
    return SyntheticSpec(
        num_classes=num_classes,
        class_keyword_sets=keyword_sets,
        background_pool=background,
        mix_rate=mix_rate,
        length_range=length_range,
        corpus_size=corpus_size,
        pool_per_class=pool_per_class,
    )


def _zipf_weights(n: int) -> np.ndarray:
    w = 1.0 / np.arange(1, n + 1) ** ZIPF_EXPONENT
    return w / w.sum()


def _gen_sentence(spec: SyntheticSpec, label: int, rng: np.random.Generator) -> str:
    lo, hi = spec.length_range
    length = int(rng.integers(lo, hi + 1))
    keywords = spec.class_keyword_sets[label]
    kw_w = _zipf_weights(len(keywords))
    bg_w = _zipf_weights(len(spec.background_pool))
    out = []
    for _ in range(length):
        if rng.random() < spec.mix_rate:
            out.append(keywords[int(rng.choice(len(keywords), p=kw_w))])
        else:
            out.append(spec.background_pool[int(rng.choice(len(spec.background_pool), p=bg_w))])
    return " ".join(out)


def gen_synthetic(spec: SyntheticSpec, seed: int) -> tuple[list[Example], list[Example]]:
    """Generate (pretraining corpus, labeled pool) from one process so the
    pretraining statistics encode class-keyword co-occurrence.

    The corpus carries no labels; the pool is balanced with
    pool_per_class examples per class.
    """
    rng = np.random.default_rng([seed, 0xC0])
    corpus = []
    for _ in range(spec.corpus_size):
        label = int(rng.integers(spec.num_classes))
        corpus.append(Example(_gen_sentence(spec, label, rng)))
    pool = []
    for label in range(spec.num_classes):
        for _ in range(spec.pool_per_class):
            pool.append(Example(_gen_sentence(spec, label, rng), label))
    return corpus, pool


# -- few-shot splits --------------------------------------------------------


@dataclass
class FewShotSplit:
    labeled: list[Example]
    unlabeled: list[Example]
    unlabeled_truth: list[int]
    dev: list[Example]
    test: list[Example]
    seed: int
    k: int
    mu: int
    num_classes: int
    dropped_classes: list[int] = field(default_factory=list)
    class_map: dict[int, int] = field(default_factory=dict)


def sample_few_shot(
    pool: list[Example], k: int, mu: int, seed: int, policy: str = "drop"
) -> FewShotSplit:
    """Deterministic few-shot split: per class take k labeled, k dev and
    mu*k unlabeled examples; everything left over becomes the test pool.

    Classes with fewer than k + mu*k + k examples are dropped everywhere
    (policy="drop") or k is lowered globally until all classes fit
    (policy="reduce_k"). Kept classes are relabeled contiguously.
    """
    if policy not in ("drop", "reduce_k"):
        raise ValueError(f"unknown undersized-class policy: {policy!r}")
    if k < 1 or mu < 1:
        raise ValueError("k and mu must be at least 1")
    by_class: dict[int, list[int]] = {}
    for i, ex in enumerate(pool):
        if ex.label is None:
            raise ValueError("few-shot sampling needs a fully labeled pool")
        by_class.setdefault(ex.label, []).append(i)

    classes = sorted(by_class)
    need = lambda kk: kk * (mu + 2)  # labeled + dev + mu*k unlabeled
    if policy == "reduce_k":
        smallest = min(len(by_class[c]) for c in classes)
        k = min(k, smallest // (mu + 2))
        if k < 1:
            raise ValueError("no feasible k: smallest class cannot support k=1")
        kept = classes
        dropped = []
    else:
        kept = [c for c in classes if len(by_class[c]) >= need(k)]
        dropped = [c for c in classes if c not in kept]
        if not kept:
            raise ValueError(f"no class has the minimum {need(k)} examples for k={k}")

    class_map = {orig: new for new, orig in enumerate(kept)}
    rng = np.random.default_rng([seed, 0x5E])
    labeled, dev, unlabeled, truth, test = [], [], [], [], []
    for orig in kept:
        new = class_map[orig]
        idx = np.array(by_class[orig], dtype=np.int64)
        idx = idx[rng.permutation(len(idx))]
        take = lambda sl: [pool[i] for i in idx[sl]]
        labeled += [Example(e.text, new) for e in take(slice(0, k))]
        dev += [Example(e.text, new) for e in take(slice(k, 2 * k))]
        unl = take(slice(2 * k, 2 * k + mu * k))
        unlabeled += [Example(e.text, None) for e in unl]
        truth += [new] * len(unl)
        test += [Example(e.text, new) for e in take(slice(2 * k + mu * k, None))]
    return FewShotSplit(
        labeled=labeled,
        unlabeled=unlabeled,
        unlabeled_truth=truth,
        dev=dev,
        test=test,
        seed=seed,
        k=k,
        mu=mu,
        num_classes=len(kept),
        dropped_classes=dropped,
        class_map=class_map,
    )


# -- persistence ------------------------------------------------------------


def write_examples(path, examples: list[Example]):
    with open(path, "w") as f:
        for ex in examples:
            f.write(json.dumps({"text": ex.text, "label": ex.label}) + "\n")


def read_examples(path) -> list[Example]:
    out = []
    with open(path) as f:
        for line in f:
            line = line.strip()
            if not line:
                continue
            obj = json.loads(line)
            out.append(Example(obj["text"], obj["label"]))
    return out


def save_split(split_dir, split: FewShotSplit):
    d = Path(split_dir)
    d.mkdir(parents=True, exist_ok=True)
    write_examples(d / "labeled.jsonl", split.labeled)
    write_examples(d / "unlabeled.jsonl", split.unlabeled)
    write_examples(d / "dev.jsonl", split.dev)
    write_examples(d / "test.jsonl", split.test)
    manifest = {
        "k": split.k,
        "mu": split.mu,
        "seed": split.seed,
        "num_classes": split.num_classes,
        "dropped_classes": split.dropped_classes,
        "class_map": {str(orig): new for orig, new in split.class_map.items()},
        "unlabeled_truth": split.unlabeled_truth,
        "counts": {
            "labeled": len(split.labeled),
            "unlabeled": len(split.unlabeled),
            "dev": len(split.dev),
            "test": len(split.test),
        },
    }
    (d / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")


def load_split(split_dir) -> FewShotSplit:
    d = Path(split_dir)
    manifest = json.loads((d / "manifest.json").read_text())
    return FewShotSplit(
        labeled=read_examples(d / "labeled.jsonl"),
        unlabeled=read_examples(d / "unlabeled.jsonl"),
        unlabeled_truth=list(manifest["unlabeled_truth"]),
        dev=read_examples(d / "dev.jsonl"),
        test=read_examples(d / "test.jsonl"),
        seed=manifest["seed"],
        k=manifest["k"],
        mu=manifest["mu"],
        num_classes=manifest["num_classes"],
        dropped_classes=list(manifest["dropped_classes"]),
        class_map={int(k): v for k, v in manifest["class_map"].items()},
    )
