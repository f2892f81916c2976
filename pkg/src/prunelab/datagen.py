"""Deterministic synthetic multimodal instruction data.

Each sample is a triplet (image features, prompt tokens, response tokens)
whose answer is derivable from latent image attributes (shape class, color
class, object count), so every benchmark is answerable by construction and
scoring is exact. Image features encode the attributes redundantly in each
of the V patches as one-hot blocks plus a small seeded jitter; the encoding
is injective (``decode_attributes`` inverts it).
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np

VOCAB_SIZE = 256

# reserved block 0..31
PAD, BOS, EOS = 0, 1, 2
OPT_A, OPT_B, OPT_C, OPT_D = 3, 4, 5, 6
OPTION_TOKENS = (OPT_A, OPT_B, OPT_C, OPT_D)
YES, NO = 7, 8

# word/digit block 32+
DIGIT0 = 32           # 32..36 -> counts 0..4
SHAPE0 = 37           # 37..40 -> circle, square, triangle, star
COLOR0 = 41           # 41..44 -> red, green, blue, yellow
Q_SHAPE, Q_COLOR, Q_COUNT = 45, 46, 47
Q_IS, Q_DESCRIBE = 48, 49
ANS, CTX = 50, 51

N_SHAPES = 4
N_COLORS = 4
N_COUNTS = 5

TASK_TAGS = ("mcq", "yesno", "freeform", "text_only")
MM_FORMATS = ("mcq", "yesno", "freeform")

PATCH_JITTER = 3  # trailing jitter coords per patch


@dataclass
class Triplet:
    """One instruction sample: image features, prompt, reference response."""

    image_features: np.ndarray
    prompt_tokens: list[int]
    response_tokens: list[int]
    task_tag: str

    def copy(self) -> "Triplet":
        return Triplet(self.image_features.copy(), list(self.prompt_tokens),
                       list(self.response_tokens), self.task_tag)


@dataclass
class DatasetSpec:
    seed: int = 0
    size: int = 2048
    task_mix: dict = field(default_factory=lambda: {
        "mcq": 0.35, "yesno": 0.20, "freeform": 0.20, "text_only": 0.25})
    v_tokens: int = 4
    d_img: int = 64

    def __post_init__(self):
        if self.size < 1:
            raise ValueError("DatasetSpec: size must be >= 1")
        total = float(np.sum(list(self.task_mix.values())))
        if abs(total - 1.0) > 1e-9:
            raise ValueError(f"DatasetSpec: task_mix sums to {total}, expected 1")
        for tag in self.task_mix:
            if tag not in TASK_TAGS:
                raise ValueError(f"DatasetSpec: unknown task tag {tag!r}")
        if self.d_img % self.v_tokens != 0:
            raise ValueError("DatasetSpec: d_img must be divisible by v_tokens")


@dataclass
class Suite:
    """A benchmark: a scoring format plus its items."""

    name: str
    fmt: str  # mcq | yesno | freeform
    items: list[Triplet]


def patch_width(spec_or_dimg, v_tokens: int | None = None) -> int:
    if isinstance(spec_or_dimg, DatasetSpec):
        return spec_or_dimg.d_img // spec_or_dimg.v_tokens
    return spec_or_dimg // v_tokens


def _min_patch() -> int:
    return N_SHAPES + N_COLORS + N_COUNTS + PATCH_JITTER


def encode_image(shape: int, color: int, count: int, v_tokens: int, d_img: int,
                 rng: np.random.Generator) -> np.ndarray:
    p = d_img // v_tokens
    if p < _min_patch():
        raise ValueError(
            f"encode_image: patch width {p} too small for attribute classes "
            f"(need >= {_min_patch()}); vocabulary/attribute overflow")
    feats = np.zeros((v_tokens, p))
    feats[:, shape] = 1.0
    feats[:, N_SHAPES + color] = 1.0
    feats[:, N_SHAPES + N_COLORS + count] = 1.0
    feats[:, -PATCH_JITTER:] = rng.uniform(-0.1, 0.1, (v_tokens, PATCH_JITTER))
    return feats.reshape(d_img)


def decode_attributes(features: np.ndarray, v_tokens: int) -> tuple[int, int, int]:
    """Invert encode_image (valid for multimodal triplets only)."""
    p = features.size // v_tokens
    patch = features[:p]
    shape = int(np.argmax(patch[:N_SHAPES]))
    color = int(np.argmax(patch[N_SHAPES:N_SHAPES + N_COLORS]))
    count = int(np.argmax(patch[N_SHAPES + N_COLORS:N_SHAPES + N_COLORS + N_COUNTS]))
    return shape, color, count


def _build_mcq(attrs, qtype: str) -> tuple[list[int], list[int]]:
    shape, color, count = attrs
    if qtype == "shape":
        qtok, values, answer = Q_SHAPE, [SHAPE0 + i for i in range(4)], shape
    elif qtype == "color":
        qtok, values, answer = Q_COLOR, [COLOR0 + i for i in range(4)], color
    else:  # count mcq uses the canonical window 1..4 (count sampled from 1..4)
        qtok, values, answer = Q_COUNT, [DIGIT0 + i for i in range(1, 5)], count - 1
    prompt = [BOS, qtok]
    for letter, val in zip(OPTION_TOKENS, values):
        prompt += [letter, val]
    prompt.append(ANS)
    return prompt, [OPTION_TOKENS[answer], EOS]


def _build_yesno(attrs, rng: np.random.Generator) -> tuple[list[int], list[int]]:
    shape, color, count = attrs
    kind = rng.integers(0, 3)
    truthy = bool(rng.integers(0, 2))
    if kind == 0:
        true_tok, pool = SHAPE0 + shape, [SHAPE0 + i for i in range(N_SHAPES)]
    elif kind == 1:
        true_tok, pool = COLOR0 + color, [COLOR0 + i for i in range(N_COLORS)]
    else:
        true_tok, pool = DIGIT0 + count, [DIGIT0 + i for i in range(N_COUNTS)]
    if truthy:
        word = true_tok
    else:
        others = [t for t in pool if t != true_tok]
        word = int(others[rng.integers(0, len(others))])
    prompt = [BOS, Q_IS, word, ANS]
    return prompt, [YES if word == true_tok else NO, EOS]


def _build_freeform(attrs) -> tuple[list[int], list[int]]:
    shape, color, count = attrs
    prompt = [BOS, Q_DESCRIBE, ANS]
    return prompt, [COLOR0 + color, SHAPE0 + shape, DIGIT0 + count, EOS]


def _make_item(fmt: str, spec: DatasetSpec, rng: np.random.Generator) -> Triplet:
    shape = int(rng.integers(0, N_SHAPES))
    color = int(rng.integers(0, N_COLORS))
    if fmt == "mcq":
        qtype = ("shape", "color", "count")[rng.integers(0, 3)]
        count = int(rng.integers(1, 5)) if qtype == "count" else int(rng.integers(0, 5))
        prompt, resp = _build_mcq((shape, color, count), qtype)
    elif fmt == "yesno":
        count = int(rng.integers(0, 5))
        prompt, resp = _build_yesno((shape, color, count), rng)
    elif fmt == "freeform":
        count = int(rng.integers(0, 5))
        prompt, resp = _build_freeform((shape, color, count))
    else:
        raise ValueError(f"unknown format {fmt!r}")
    feats = encode_image(shape, color, count, spec.v_tokens, spec.d_img, rng)
    return Triplet(feats, prompt, resp, fmt)


def generate(spec: DatasetSpec) -> list[Triplet]:
    """Deterministic dataset: same spec (incl. seed) => identical triplets."""
    rng = np.random.default_rng(spec.seed)
    tags = sorted(spec.task_mix)
    probs = np.array([spec.task_mix[t] for t in tags])
    probs = probs / probs.sum()
    out = []
    for _ in range(spec.size):
        tag = tags[rng.choice(len(tags), p=probs)]
        if tag == "text_only":
            base_fmt = MM_FORMATS[rng.integers(0, len(MM_FORMATS))]
            item = text_only_view(_make_item(base_fmt, spec, rng))
        else:
            item = _make_item(tag, spec, rng)
        out.append(item)
    return out


def text_only_view(triplet: Triplet) -> Triplet:
    """Drop the image, splice a textual attribute description into the prompt.

    Idempotent: a triplet already tagged text_only is returned as a copy.
    """
    if triplet.task_tag == "text_only":
        return triplet.copy()
    v_guess = 4  # attribute blocks repeat per patch; patch 0 suffices
    shape, color, count = decode_attributes(triplet.image_features, v_guess)
    prompt = list(triplet.prompt_tokens)
    ctx = [CTX, SHAPE0 + shape, COLOR0 + color, DIGIT0 + count]
    prompt = prompt[:1] + ctx + prompt[1:]  # after BOS
    return Triplet(np.zeros_like(triplet.image_features), prompt,
                   list(triplet.response_tokens), "text_only")


def oracle_response(triplet: Triplet) -> list[int]:
    """Recompute the unique correct response from latent attributes.

    Reads attributes from the image encoding for multimodal triplets and from
    the CTX description for text-only ones; independent of the generator's
    bookkeeping, used to assert answerability.
    """
    prompt = triplet.prompt_tokens
    if triplet.task_tag == "text_only":
        i = prompt.index(CTX)
        shape = prompt[i + 1] - SHAPE0
        color = prompt[i + 2] - COLOR0
        count = prompt[i + 3] - DIGIT0
        body = prompt[:1] + prompt[i + 4:]
    else:
        shape, color, count = decode_attributes(triplet.image_features, 4)
        body = prompt
    q = body[1]
    if q in (Q_SHAPE, Q_COLOR, Q_COUNT):
        values = body[3:-1:2]
        want = {Q_SHAPE: SHAPE0 + shape, Q_COLOR: COLOR0 + color,
                Q_COUNT: DIGIT0 + count}[q]
        return [OPTION_TOKENS[values.index(want)], EOS]
    if q == Q_IS:
        word = body[2]
        truth = word in (SHAPE0 + shape, COLOR0 + color, DIGIT0 + count)
        return [YES if truth else NO, EOS]
    if q == Q_DESCRIBE:
        return [COLOR0 + color, SHAPE0 + shape, DIGIT0 + count, EOS]
    raise ValueError(f"oracle_response: unrecognized prompt {prompt}")


def calibration_subset(data: list[Triplet], n: int, seed: int) -> list[Triplet]:
    """Sample n items without replacement, stratified across task tags.

    The stratified order is fixed per seed, so subsets of growing n are
    nested prefixes of each other.
    """
    if not (1 <= n <= len(data)):
        raise ValueError(f"calibration_subset: n={n} out of range [1, {len(data)}]")
    rng = np.random.default_rng(seed)
    by_tag: dict[str, list[int]] = {}
    for i, t in enumerate(data):
        by_tag.setdefault(t.task_tag, []).append(i)
    queues = []
    for tag in sorted(by_tag):
        idx = np.array(by_tag[tag])
        queues.append(list(idx[rng.permutation(len(idx))]))
    order: list[int] = []
    while queues:
        queues = [q for q in queues if q]
        for q in queues:
            if q:
                order.append(q.pop(0))
    return [data[i] for i in order[:n]]


def fraction_subset(data: list[Triplet], fraction: float, seed: int = 0) -> list[Triplet]:
    """floor(fraction*size) items; smaller fractions are prefixes of larger ones."""
    if not (0.0 < fraction <= 1.0):
        raise ValueError(f"fraction_subset: fraction {fraction} outside (0, 1]")
    k = math.floor(fraction * len(data))
    perm = np.random.default_rng(seed).permutation(len(data))
    return [data[i] for i in perm[:k]]


# ---------------------------------------------------------------------------
# benchmark suites
# ---------------------------------------------------------------------------


def make_benchmarks(seed: int, size: int = 512, v_tokens: int = 4,
                    d_img: int = 64) -> list[Suite]:
    """Four multimodal suites spanning the three prompt formats."""
    spec = DatasetSpec(seed=seed, size=1, v_tokens=v_tokens, d_img=d_img)
    rng = np.random.default_rng(seed)
    suites = []
    for name, fmt in [("attr_mcq", "mcq"), ("count_mcq", "mcq"),
                      ("yesno", "yesno"), ("freeform", "freeform")]:
        items = []
        for _ in range(size):
            shape = int(rng.integers(0, N_SHAPES))
            color = int(rng.integers(0, N_COLORS))
            if name == "attr_mcq":
                qtype = ("shape", "color")[rng.integers(0, 2)]
                count = int(rng.integers(0, 5))
                prompt, resp = _build_mcq((shape, color, count), qtype)
            elif name == "count_mcq":
                count = int(rng.integers(1, 5))
                prompt, resp = _build_mcq((shape, color, count), "count")
            elif name == "yesno":
                count = int(rng.integers(0, 5))
                prompt, resp = _build_yesno((shape, color, count), rng)
            else:
                count = int(rng.integers(0, 5))
                prompt, resp = _build_freeform((shape, color, count))
            feats = encode_image(shape, color, count, v_tokens, d_img, rng)
            items.append(Triplet(feats, prompt, resp, fmt))
        suites.append(Suite(name, fmt, items))
    return suites


def text_view_suite(suite: Suite) -> Suite:
    return Suite(suite.name + "_txt", suite.fmt,
                 [text_only_view(t) for t in suite.items])


# ---------------------------------------------------------------------------
# line-delimited dump / restore (bit-exact)
# ---------------------------------------------------------------------------


def dump_jsonl(path, triplets: list[Triplet]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for t in triplets:
            rec = {"features": [float(x) for x in t.image_features],
                   "prompt": list(map(int, t.prompt_tokens)),
                   "response": list(map(int, t.response_tokens)),
                   "tag": t.task_tag}
            fh.write(json.dumps(rec) + "\n")


def load_jsonl(path) -> list[Triplet]:
    out = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            rec = json.loads(line)
            out.append(Triplet(np.array(rec["features"], dtype=np.float64),
                               list(rec["prompt"]), list(rec["response"]),
                               rec["tag"]))
    return out
