"""Synthetic image/QA corpus with a closed 64-token vocabulary.

Each image shows one of five shapes at one of five intensity levels on a
noisy dark background. Every image yields three QA tasks: the shape
question (the benign task), the color question (the injected-task
counterpart), and a short caption under a describe prompt (the stand-in
for an external one-sentence description).
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field

import numpy as np

SHAPES = ["circle", "square", "triangle", "cross", "stripes"]
COLORS = ["black", "dark", "gray", "light", "white"]
COLOR_VALUES = {"black": 0.2, "dark": 0.4, "gray": 0.6, "light": 0.8, "white": 1.0}

_WORDS = [
    "<pad>",
    "what", "is", "the", "in", "picture", "image", "shape", "color",
    "tell", "me", "describe", "can", "you", "identify", "shown", "here",
    "which", "depicted", "object", "thing", "pattern",
    "how", "many", "bright", "pixels", "are", "there", "a", "sky",
    "letters", "it", "this", "shows", "contains", "one", "sentence",
    "count", "low", "medium", "high", "none", "some", "lots", "of",
    "answer", "question", "yes", "no", "and", "or", "not", "see",
    "circle", "square", "triangle", "cross", "stripes",
    "black", "dark", "gray", "light", "white",
    "<end>",
]

VOCAB: dict[str, int] = {w: i for i, w in enumerate(_WORDS)}
assert len(_WORDS) == 64, f"vocabulary must stay at 64 tokens, got {len(_WORDS)}"

END = VOCAB["<end>"]

VARIANT_FAMILIES = [
    "InstructionSensitivity",
    "SyntaxSensitivity",
    "TaskSemanticSwitching",
    "IrrelevantTaskReplacement",
]


def encode(text: str) -> np.ndarray:
    """Tokenize a space-separated sentence of vocabulary words."""
    try:
        return np.array([VOCAB[w] for w in text.split()], dtype=np.int64)
    except KeyError as exc:
        raise KeyError(f"word {exc.args[0]!r} is not in the closed vocabulary") from exc


def decode_tokens(ids) -> str:
    return " ".join(_WORDS[int(i)] for i in ids)


SHAPE_PROMPT = "what is the shape in the picture"
COLOR_PROMPT = "what is the color in the picture"
DESCRIBE_PROMPT = "describe the picture in one sentence"


def shape_answer(shape: str) -> np.ndarray:
    return encode(f"a {shape} <end>")


def color_answer(color: str) -> np.ndarray:
    return encode(f"a {color} <end>")


def caption_tokens(shape: str, color: str) -> np.ndarray:
    return encode(f"a {color} {shape} <end>")


@dataclass(frozen=True)
class PromptVariantSet:
    """The benign prompt plus three variants for each of the four families."""

    benign: np.ndarray
    families: dict[str, list[np.ndarray]]

    def all_prompts(self) -> list[tuple[str, np.ndarray]]:
        """(label, tokens) pairs: benign first, then family variants in order."""
        out = [("benign", self.benign)]
        for fam in VARIANT_FAMILIES:
            for i, p in enumerate(self.families[fam]):
                out.append((f"{fam}/{i}", p))
        return out


def variant_prompts() -> PromptVariantSet:
    """Benign shape question plus 12 probing variants, three per family.

    Form-preserving families keep the queried concept; the semantic family
    swaps it; the irrelevant family replaces the task outright.
    """
    families = {
        "InstructionSensitivity": [
            encode("tell me the shape in the picture"),
            encode("describe the shape in the picture"),
            encode("can you identify the shape in the picture"),
        ],
        "SyntaxSensitivity": [
            encode("what is the shape shown here"),
            encode("what shape is shown in the picture"),
            encode("which shape is depicted in the image"),
        ],
        "TaskSemanticSwitching": [
            encode("what is the color in the picture"),
            encode("what is the object in the picture"),
            encode("what is the pattern in the picture"),
        ],
        "IrrelevantTaskReplacement": [
            encode("are there many bright pixels in the picture"),
            encode("is there a sky in the picture"),
            encode("are there letters in the picture"),
        ],
    }
    return PromptVariantSet(benign=encode(SHAPE_PROMPT), families=families)


# ---------------------------------------------------------------------------
# rendering


@dataclass(frozen=True)
class RenderAttributes:
    color: str = "gray"
    jitter: float = 3.0
    noise: float = 0.03
    size: int = 32


def _shape_coverage(shape: str, size: int, cy: float, cx: float) -> np.ndarray:
    """Soft coverage in [0, 1] from a signed distance field (~1 px edge)."""
    yy, xx = np.meshgrid(np.arange(size, dtype=np.float64), np.arange(size, dtype=np.float64), indexing="ij")
    dy = yy - cy
    dx = xx - cx
    r = size * 0.30
    if shape == "circle":
        sdf = np.sqrt(dy * dy + dx * dx) - r
    elif shape == "square":
        sdf = np.maximum(np.abs(dy), np.abs(dx)) - r * 0.85
    elif shape == "triangle":
        # upward triangle as intersection of three half-planes
        sdf = np.maximum.reduce([-r * 0.9 - dy, dy - r * 0.75, np.abs(dx) * 1.1 - (dy + r)])
    elif shape == "cross":
        arm = r * 0.36
        box1 = np.maximum(np.abs(dy) - arm, np.abs(dx) - r)
        box2 = np.maximum(np.abs(dx) - arm, np.abs(dy) - r)
        sdf = np.minimum(box1, box2)
    elif shape == "stripes":
        window = np.maximum(np.abs(dy), np.abs(dx)) - r
        period = size * 0.25
        phase = np.abs(((yy - cy) / period) % 1.0 - 0.5) * period
        bands = phase - period * 0.25
        sdf = np.maximum(window, bands)
    else:
        raise ValueError(f"unknown shape class {shape!r}")
    return np.clip(0.5 - sdf, 0.0, 1.0)


def gen_image(shape: str, attrs: RenderAttributes, seed: int) -> tuple[np.ndarray, np.ndarray]:
    """Deterministic (image, caption tokens); image is (S, S, 1) in [0, 1]."""
    if shape not in SHAPES:
        raise ValueError(f"unknown shape class {shape!r}")
    if attrs.color not in COLORS:
        raise ValueError(f"unknown color {attrs.color!r}")
    rng = np.random.default_rng(seed)
    size = attrs.size
    center = (size - 1) / 2.0
    cy = center + rng.uniform(-attrs.jitter, attrs.jitter)
    cx = center + rng.uniform(-attrs.jitter, attrs.jitter)
    bg = rng.normal(0.0, attrs.noise, size=(size, size)) if attrs.noise > 0 else np.zeros((size, size))
    cov = _shape_coverage(shape, size, cy, cx)
    img = bg * (1.0 - cov) + COLOR_VALUES[attrs.color] * cov
    img = np.clip(img, 0.0, 1.0)
    return img[:, :, None], caption_tokens(shape, attrs.color)


@dataclass
class Sample:
    image: np.ndarray
    shape: str
    color: str
    seed: int
    attrs: RenderAttributes

    @property
    def label(self) -> int:
        return SHAPES.index(self.shape)

    def caption(self) -> np.ndarray:
        return caption_tokens(self.shape, self.color)

    def qa_triples(self) -> list[tuple[np.ndarray, np.ndarray, np.ndarray]]:
        """(prompt, image, answer) for the shape, color, and describe tasks."""
        return [
            (encode(SHAPE_PROMPT), self.image, shape_answer(self.shape)),
            (encode(COLOR_PROMPT), self.image, color_answer(self.color)),
            (encode(DESCRIBE_PROMPT), self.image, self.caption()),
        ]


@dataclass
class Dataset:
    samples: list[Sample] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.samples)

    def qa_triples(self, tasks: tuple[str, ...] = ("shape", "color", "describe")):
        out = []
        selectors = {
            "shape": lambda s: (encode(SHAPE_PROMPT), s.image, shape_answer(s.shape)),
            "color": lambda s: (encode(COLOR_PROMPT), s.image, color_answer(s.color)),
            "describe": lambda s: (encode(DESCRIBE_PROMPT), s.image, s.caption()),
        }
        for s in self.samples:
            for t in tasks:
                out.append(selectors[t](s))
        return out


def generate_samples(per_class: int, base_seed: int, size: int = 32, jitter: float = 3.0, noise: float = 0.03) -> Dataset:
    """per_class images for each shape, colors cycled deterministically."""
    samples = []
    counter = 0
    for shape in SHAPES:
        for k in range(per_class):
            color = COLORS[(k + SHAPES.index(shape)) % len(COLORS)]
            seed = base_seed * 1_000_003 + counter
            attrs = RenderAttributes(color=color, jitter=jitter, noise=noise, size=size)
            image, _ = gen_image(shape, attrs, seed)
            samples.append(Sample(image=image, shape=shape, color=color, seed=seed, attrs=attrs))
            counter += 1
    return Dataset(samples)


def gen_probe_split(per_class: int, base_seed: int, size: int = 32) -> tuple[Dataset, Dataset]:
    """Stratified 80/20 train/test split, deterministic in the seed."""
    if per_class < 5:
        raise ValueError("per_class must be >= 5 for an 80/20 split")
    full = generate_samples(per_class, base_seed, size=size)
    n_train = (per_class * 4) // 5
    train, test = [], []
    for ci in range(len(SHAPES)):
        block = full.samples[ci * per_class : (ci + 1) * per_class]
        train += block[:n_train]
        test += block[n_train:]
    return Dataset(train), Dataset(test)


# ---------------------------------------------------------------------------
# persistence


def write_corpus(dataset: Dataset, directory: str, prefix: str) -> str:
    """Images as PGM plus a JSON-lines manifest; returns the manifest path."""
    from .imageio import write_image

    os.makedirs(directory, exist_ok=True)
    manifest_path = os.path.join(directory, f"{prefix}.jsonl")
    with open(manifest_path, "w") as fh:
        for i, s in enumerate(dataset.samples):
            name = f"{prefix}-{i:04d}.pgm"
            write_image(os.path.join(directory, name), s.image)
            record = {
                "image": name,
                "prompt_tokens": [int(t) for t in encode(SHAPE_PROMPT)],
                "answer_tokens": [int(t) for t in shape_answer(s.shape)],
                "class": s.shape,
                "attributes": {
                    "color": s.color,
                    "jitter": s.attrs.jitter,
                    "noise": s.attrs.noise,
                    "size": s.attrs.size,
                },
                "seed": s.seed,
            }
            fh.write(json.dumps(record, sort_keys=True) + "\n")
    return manifest_path


def read_corpus(directory: str, prefix: str) -> Dataset:
    from .imageio import read_image

    manifest_path = os.path.join(directory, f"{prefix}.jsonl")
    samples = []
    with open(manifest_path) as fh:
        for line in fh:
            rec = json.loads(line)
            attrs = RenderAttributes(
                color=rec["attributes"]["color"],
                jitter=rec["attributes"]["jitter"],
                noise=rec["attributes"]["noise"],
                size=rec["attributes"]["size"],
            )
            samples.append(
                Sample(
                    image=read_image(os.path.join(directory, rec["image"])),
                    shape=rec["class"],
                    color=attrs.color,
                    seed=rec["seed"],
                    attrs=attrs,
                )
            )
    return Dataset(samples)
