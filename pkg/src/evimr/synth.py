"""Seeded synthetic moment-retrieval data.

Each video is ``L_v`` clips of width ``D``. Channel 0 carries the normalized
clip position, the remaining channels carry content: clips inside the target
span show the query concept's embedding, an optional distractor segment shows
a different concept, everything else is background. Boundary clips are
blended by their overlap with the span. Queries are six-token templates over
a toy vocabulary with explicit noun / verb / attribute classes.

All randomness derives from ``SynthConfig.seed`` through named sub-streams
(``concepts``, ``dataset``, ``ood``, ``visual_noise``, ``text_noise``,
``masking``) combined with the sample id, so any sample can be regenerated on
its own.
"""

from dataclasses import asdict, dataclass, field, replace
import json
import math
import struct
import zlib

import numpy as np
from scipy import stats

from evimr.heads import MaskedQuery, MomentSpan

MASK = 0
POS_CHANNEL = 0
DATASET_MAGIC = b"DEMRDS01"


def substream(seed, name, *extra):
    """Independent generator for a named sub-stream of ``seed``."""
    seed = int(seed)
    words = [seed & 0xFFFFFFFF, (seed >> 32) & 0xFFFFFFFF, zlib.crc32(name.encode())]
    words.extend(int(e) & 0xFFFFFFFF for e in extra)
    return np.random.default_rng(np.random.SeedSequence(words))


@dataclass(frozen=True)
class SynthConfig:
    n_samples: int = 1500
    L_v: int = 32
    D: int = 16
    vocab_size: int = 64
    n_concepts: int = 16
    L_q: int = 6
    seed: int = 0
    concept_norm: float = 5.0
    clip_sigma_lo: float = 0.2
    clip_sigma_hi: float = 0.8
    background_sigma: float = 0.5
    distractor_prob: float = 0.8
    attr_fidelity: float = 0.7

    def validate(self):
        if self.n_samples < 1:
            raise ValueError("n_samples must be >= 1")
        if self.D < 4:
            raise ValueError(f"feature width D must be >= 4, got {self.D}")
        if self.L_v < 2:
            raise ValueError("need at least two clips per video")
        if self.L_q < 3:
            raise ValueError("queries need at least three tokens")
        if not 0 <= self.clip_sigma_lo <= self.clip_sigma_hi:
            raise ValueError("clip noise range must satisfy 0 <= lo <= hi")
        vocab = Vocabulary.build(self.vocab_size, self.n_concepts)
        if self.n_concepts > len(vocab.nouns) or self.n_concepts < 2:
            raise ValueError("n_concepts must be in [2, noun-class size]")
        return self


@dataclass(frozen=True)
class Vocabulary:
    """Token inventory: MASK, nouns (concept-bound first), attributes (concept-bound first), verbs."""
    size: int
    n_concepts: int
    nouns: tuple
    attributes: tuple
    verbs: tuple

    @classmethod
    def build(cls, size, n_concepts):
        remaining = size - 1 - 2 * n_concepts
        if remaining < 3:
            raise ValueError(f"vocabulary of {size} tokens is too small for {n_concepts} concepts")
        n_ctx = max(1, remaining // 3)
        n_gen = max(1, remaining // 6)
        n_nouns = n_concepts + n_ctx
        n_attr = n_concepts + n_gen
        nouns = tuple(range(1, 1 + n_nouns))
        attributes = tuple(range(1 + n_nouns, 1 + n_nouns + n_attr))
        verbs = tuple(range(1 + n_nouns + n_attr, size))
        return cls(size, n_concepts, nouns, attributes, verbs)

    def concept_noun(self, c):
        return self.nouns[c]

    def concept_attr(self, c):
        return self.attributes[c]

    @property
    def context_nouns(self):
        return self.nouns[self.n_concepts:]

    @property
    def generic_attributes(self):
        return self.attributes[self.n_concepts:]

    def concept_tokens(self, c):
        return (self.concept_noun(c), self.concept_attr(c))

    def is_noun(self, tok):
        return self.nouns[0] <= tok <= self.nouns[-1]

    def token_class(self, tok):
        if tok == MASK:
            return "mask"
        if self.is_noun(tok):
            return "noun"
        if self.attributes[0] <= tok <= self.attributes[-1]:
            return "attribute"
        return "verb"


@dataclass(frozen=True)
class BiasSpec:
    mode: str = "biased"  # or "uniform"
    start_a: float = 1.2
    start_b: float = 4.0
    len_a: float = 1.2
    len_b: float = 5.0
    len_max: float = 0.5

    def __post_init__(self):
        if self.mode not in ("uniform", "biased"):
            raise ValueError(f"bias mode must be 'uniform' or 'biased', got {self.mode!r}")
        if not 0 < self.len_max < 1:
            raise ValueError("len_max must lie in (0, 1)")


@dataclass(frozen=True)
class NoiseSpec:
    visual_sigma: float = 0.0
    text_replace_ratio: float = 0.0

    def __post_init__(self):
        if not self.visual_sigma >= 0:
            raise ValueError("visual_sigma must be >= 0")
        if not 0.0 <= self.text_replace_ratio <= 1.0:
            raise ValueError("text_replace_ratio must lie in [0, 1]")


@dataclass(frozen=True)
class Sample:
    video: np.ndarray = field(repr=False)
    query: tuple
    gt: MomentSpan
    concept_id: int
    sample_id: int

    def with_video(self, video):
        return replace(self, video=video)

    def with_query(self, query):
        return replace(self, query=tuple(int(t) for t in query))


# ---------------------------------------------------------------- span samplers

def sample_span(rng, bias: BiasSpec, L_v):
    min_len = 1.0 / L_v  # any interval this long covers at least one clip center
    if bias.mode == "uniform":
        c = rng.uniform(0.5 * min_len, 1.0 - 0.5 * min_len)
        h_max = min(0.5 * bias.len_max, c, 1.0 - c)
        h_min = min(0.5 * min_len, h_max)
        h = rng.uniform(h_min, h_max)
        return MomentSpan(max(0.0, c - h), min(1.0, c + h))
    s = rng.beta(bias.start_a, bias.start_b)
    length = min_len + bias.len_max * rng.beta(bias.len_a, bias.len_b)
    s = min(s, 1.0 - length)
    return MomentSpan(s, s + length)


def biased_log_density(start, end, bias: BiasSpec, L_v):
    """Log-density of the biased span sampler at (start, end), ignoring the end-of-video clamp."""
    length = np.asarray(end) - np.asarray(start)
    u = (length - 1.0 / L_v) / bias.len_max
    with np.errstate(divide="ignore"):
        return (stats.beta.logpdf(start, bias.start_a, bias.start_b)
                + stats.beta.logpdf(u, bias.len_a, bias.len_b) - math.log(bias.len_max))


# ---------------------------------------------------------------- generation

def concept_embeddings(cfg: SynthConfig):
    rng = substream(cfg.seed, "concepts")
    e = rng.normal(size=(cfg.n_concepts, cfg.D - 1))
    return cfg.concept_norm * e / np.linalg.norm(e, axis=1, keepdims=True)


def _overlap(lo, hi, L_v):
    edges = np.arange(L_v + 1) / L_v
    return np.clip(np.minimum(edges[1:], hi) - np.maximum(edges[:-1], lo), 0.0, None) * L_v


def make_sample(cfg: SynthConfig, emb, vocab: Vocabulary, rng, sample_id, span: MomentSpan):
    L, C = cfg.L_v, cfg.D - 1
    concept = int(rng.integers(cfg.n_concepts))
    sigma = rng.uniform(cfg.clip_sigma_lo, cfg.clip_sigma_hi)
    content = rng.normal(scale=cfg.background_sigma, size=(L, C))

    if rng.random() < cfg.distractor_prob:
        other = int(rng.integers(cfg.n_concepts - 1))
        other += other >= concept
        d_len = rng.uniform(0.1, 0.3)
        room_left, room_right = span.start, 1.0 - span.end
        sides = [s for s, room in (("left", room_left), ("right", room_right)) if room >= d_len]
        if sides:
            side = sides[int(rng.integers(len(sides)))]
            lo_range = (0.0, room_left - d_len) if side == "left" else (span.end, 1.0 - d_len)
            d_lo = rng.uniform(*lo_range)
            w = _overlap(d_lo, d_lo + d_len, L)[:, None]
            content = w * emb[other] + (1.0 - w) * content

    w = _overlap(span.start, span.end, L)[:, None]
    content = w * emb[concept] + (1.0 - w) * content
    content = content + rng.normal(scale=sigma, size=(L, C))
    video = np.empty((L, cfg.D))
    video[:, POS_CHANNEL] = (np.arange(L) + 0.5) / L
    video[:, 1:] = content
    return Sample(video, make_query(cfg, vocab, rng, concept), span, concept, int(sample_id))


def make_query(cfg, vocab: Vocabulary, rng, concept):
    def pick(seq):
        return int(seq[int(rng.integers(len(seq)))])

    attr = vocab.concept_attr(concept) if rng.random() < cfg.attr_fidelity else pick(vocab.generic_attributes)
    tokens = [pick(vocab.verbs), attr, vocab.concept_noun(concept), pick(vocab.context_nouns),
              pick(vocab.verbs), pick(vocab.generic_attributes)]
    while len(tokens) < cfg.L_q:
        tokens.append(pick(vocab.verbs))
    return tuple(tokens[:cfg.L_q])


def generate_dataset(cfg: SynthConfig, bias: BiasSpec, n=None, stream="dataset", id_offset=0):
    cfg.validate()
    emb = concept_embeddings(cfg)
    vocab = Vocabulary.build(cfg.vocab_size, cfg.n_concepts)
    out = []
    for i in range(cfg.n_samples if n is None else n):
        rng = substream(cfg.seed, stream, i)
        span = sample_span(rng, bias, cfg.L_v)
        out.append(make_sample(cfg, emb, vocab, rng, id_offset + i, span))
    return out


def split_iid_ood(dataset, cfg: SynthConfig, bias: BiasSpec, iid_fraction=0.2, n_ood=None,
                  density_quantile=0.1, max_draws=200000):
    """Partition a biased dataset into train / test_iid and draw a temporal-OOD test set.

    OOD spans are drawn uniformly and kept only where the biased sampler's
    density falls below its ``density_quantile`` (estimated from the
    dataset's own spans).
    """
    n_iid = max(1, int(round(len(dataset) * iid_fraction)))
    train, test_iid = list(dataset[:-n_iid]), list(dataset[-n_iid:])
    n_ood = len(test_iid) if n_ood is None else n_ood
    starts = np.array([s.gt.start for s in dataset])
    ends = np.array([s.gt.end for s in dataset])
    threshold = float(np.quantile(biased_log_density(starts, ends, bias, cfg.L_v), density_quantile))

    emb = concept_embeddings(cfg)
    vocab = Vocabulary.build(cfg.vocab_size, cfg.n_concepts)
    uniform = BiasSpec("uniform", len_max=bias.len_max)
    base_id = max(s.sample_id for s in dataset) + 1
    test_ood = []
    for i in range(max_draws):
        if len(test_ood) >= n_ood:
            break
        rng = substream(cfg.seed, "ood", i)
        span = sample_span(rng, uniform, cfg.L_v)
        if biased_log_density(span.start, span.end, bias, cfg.L_v) < threshold:
            test_ood.append(make_sample(cfg, emb, vocab, rng, base_id + i, span))
    if len(test_ood) < n_ood:
        raise RuntimeError(f"only {len(test_ood)} OOD spans found in {max_draws} draws")
    return train, test_iid, test_ood


# ---------------------------------------------------------------- corruption

def inject_visual_noise(s: Sample, spec: NoiseSpec, seed):
    if spec.visual_sigma == 0:
        return s
    rng = substream(seed, "visual_noise", s.sample_id)
    video = s.video.copy()
    video[:, 1:] += rng.normal(scale=spec.visual_sigma, size=video[:, 1:].shape)
    return s.with_video(video)


def inject_text_noise(s: Sample, spec: NoiseSpec, seed, vocab: Vocabulary):
    if spec.text_replace_ratio == 0:
        return s
    rng = substream(seed, "text_noise", s.sample_id)
    out = []
    for tok in s.query:
        if tok != MASK and rng.random() < spec.text_replace_ratio:
            other = int(rng.integers(vocab.n_concepts - 1))
            other += other >= s.concept_id
            choices = vocab.concept_tokens(other)
            tok = choices[int(rng.integers(len(choices)))]
        out.append(tok)
    return s.with_query(out)


def parse_policy(policy):
    """``one_noun`` | ``all_nouns`` | ``none`` | ``ratio:<r>`` -> (kind, r)."""
    if policy in ("one_noun", "all_nouns", "none"):
        return policy, None
    if isinstance(policy, str) and policy.startswith("ratio:"):
        r = float(policy.split(":", 1)[1])
        if not 0.0 <= r <= 1.0:
            raise ValueError(f"mask ratio must lie in [0, 1], got {r}")
        return "ratio", r
    raise ValueError(f"unknown masking policy {policy!r}")


def mask_for_qr(s: Sample, policy, vocab: Vocabulary, rng):
    kind, r = parse_policy(policy)
    nouns = [i for i, t in enumerate(s.query) if vocab.is_noun(t)]
    if kind in ("one_noun", "all_nouns") and not nouns:
        raise ValueError(f"sample {s.sample_id} has no noun to mask")
    if kind == "none":
        positions = []
    elif kind == "one_noun":
        positions = [nouns[int(rng.integers(len(nouns)))]]
    elif kind == "all_nouns":
        positions = nouns
    else:
        positions = [i for i in range(len(s.query)) if rng.random() < r]
    tokens = list(s.query)
    targets = tuple(tokens[p] for p in positions)
    for p in positions:
        tokens[p] = MASK
    return MaskedQuery(tuple(tokens), tuple(positions), targets)


# ---------------------------------------------------------------- batching

def stack(samples):
    """Arrays ``(video (B,L,D), tokens (B,Lq), gt (B,2))`` for a list of samples."""
    video = np.stack([s.video for s in samples])
    tokens = np.array([s.query for s in samples], dtype=np.int64)
    gt = np.array([[s.gt.start, s.gt.end] for s in samples])
    return video, tokens, gt


# ---------------------------------------------------------------- file format

_HEADER = struct.Struct("<8sIIIII")  # magic, version, n_samples, L_v, D, L_q
_RECORD_HEAD = struct.Struct("<QIdd")  # sample_id, concept_id, start, end


def write_dataset(path, samples, cfg: SynthConfig, bias: BiasSpec):
    """Little-endian binary dataset plus ``<path>.json`` sidecar with the generating config."""
    n = len(samples)
    L, D = samples[0].video.shape if n else (cfg.L_v, cfg.D)
    Lq = len(samples[0].query) if n else cfg.L_q
    with open(path, "wb") as f:
        f.write(_HEADER.pack(DATASET_MAGIC, 1, n, L, D, Lq))
        for s in samples:
            f.write(_RECORD_HEAD.pack(s.sample_id, s.concept_id, s.gt.start, s.gt.end))
            f.write(np.asarray(s.query, dtype="<i4").tobytes())
            f.write(np.ascontiguousarray(s.video, dtype="<f8").tobytes())
    with open(str(path) + ".json", "w", encoding="utf-8") as f:
        json.dump({"synth": asdict(cfg), "bias": asdict(bias)}, f, indent=2, sort_keys=True)
        f.write("\n")


def read_dataset(path):
    with open(path, "rb") as f:
        data = f.read()
    magic, version, n, L, D, Lq = _HEADER.unpack_from(data, 0)
    if magic != DATASET_MAGIC:
        raise ValueError(f"{path}: not a dataset file (magic {magic!r})")
    if version != 1:
        raise ValueError(f"{path}: unsupported dataset version {version}")
    off = _HEADER.size
    rec = _RECORD_HEAD.size + 4 * Lq + 8 * L * D
    if len(data) != off + n * rec:
        raise ValueError(f"{path}: truncated or oversized ({len(data)} bytes, expected {off + n * rec})")
    out = []
    for _ in range(n):
        sid, cid, start, end = _RECORD_HEAD.unpack_from(data, off)
        off += _RECORD_HEAD.size
        query = tuple(int(t) for t in np.frombuffer(data, "<i4", Lq, off))
        off += 4 * Lq
        video = np.frombuffer(data, "<f8", L * D, off).reshape(L, D).astype(np.float64)
        off += 8 * L * D
        out.append(Sample(video, query, MomentSpan(start, end), cid, sid))
    return out


def read_sidecar(path):
    with open(str(path) + ".json", encoding="utf-8") as f:
        meta = json.load(f)
    return SynthConfig(**meta["synth"]), BiasSpec(**meta["bias"])
