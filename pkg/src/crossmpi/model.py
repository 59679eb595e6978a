"""The bundled differentiable vision-language model.

A patch vision encoder feeds a linear projector into a causal transformer
LM over the joint [visual; text] token sequence. Per-layer hidden states are
exposed as pure reads so probing and fusion-level losses can tap them.

All internals are batched-first; the single-sample entry points wrap a batch
of one. Batching requires equal sequence lengths, which the closed corpus
guarantees per task template.
"""

from __future__ import annotations

import json
import struct
from contextlib import contextmanager
from dataclasses import dataclass, asdict

import numpy as np

from . import tensor as T
from .tensor import Tensor

CHECKPOINT_MAGIC = b"CMPI"
CHECKPOINT_VERSION = 1
NEG_INF = -1e9


class ConfigError(ValueError):
    """Invalid model configuration."""


class CheckpointError(ValueError):
    """Unreadable or incompatible checkpoint file."""

    def __init__(self, message: str, version_mismatch: bool = False):
        super().__init__(message)
        self.version_mismatch = version_mismatch


class TrainingError(RuntimeError):
    """Non-finite loss during training; carries the offending batch index."""

    def __init__(self, epoch: int, batch_index: int):
        super().__init__(f"non-finite loss at epoch {epoch}, batch {batch_index}")
        self.epoch = epoch
        self.batch_index = batch_index


@dataclass(frozen=True)
class ModelConfig:
    image_size: int = 32
    channels: int = 1
    patch_size: int = 4
    d_v: int = 48
    d_l: int = 64
    n_vision_layers: int = 2
    n_lm_layers: int = 12
    n_heads: int = 4
    vocab_size: int = 64
    max_seq_len: int = 96
    seed: int = 0

    def __post_init__(self):
        if self.channels not in (1, 3):
            raise ConfigError(f"channels must be 1 or 3, got {self.channels}")
        if self.image_size % self.patch_size != 0:
            raise ConfigError(
                f"image_size {self.image_size} not divisible by patch_size {self.patch_size}"
            )
        if self.d_l % self.n_heads != 0:
            raise ConfigError(f"d_l {self.d_l} not divisible by n_heads {self.n_heads}")
        if self.d_v % self.n_heads != 0:
            raise ConfigError(f"d_v {self.d_v} not divisible by n_heads {self.n_heads}")
        if self.n_lm_layers < 8:
            raise ConfigError(f"n_lm_layers must be >= 8, got {self.n_lm_layers}")
        if self.n_vision_layers < 1:
            raise ConfigError("n_vision_layers must be >= 1")
        if self.vocab_size < 2:
            raise ConfigError("vocab_size must be >= 2")
        if self.num_visual_tokens + 1 > self.max_seq_len:
            raise ConfigError("max_seq_len leaves no room for text after visual tokens")

    @property
    def num_visual_tokens(self) -> int:
        return (self.image_size // self.patch_size) ** 2

    @property
    def end_token(self) -> int:
        return self.vocab_size - 1

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "ModelConfig":
        return cls(**json.loads(text))


def _block_param_shapes(prefix: str, d: int, mlp_hidden: int) -> list[tuple[str, tuple[int, ...]]]:
    return [
        (f"{prefix}.ln1.g", (d,)),
        (f"{prefix}.ln1.b", (d,)),
        (f"{prefix}.attn.wqkv", (d, 3 * d)),
        (f"{prefix}.attn.bqkv", (3 * d,)),
        (f"{prefix}.attn.wo", (d, d)),
        (f"{prefix}.attn.bo", (d,)),
        (f"{prefix}.ln2.g", (d,)),
        (f"{prefix}.ln2.b", (d,)),
        (f"{prefix}.mlp.w1", (d, mlp_hidden)),
        (f"{prefix}.mlp.b1", (mlp_hidden,)),
        (f"{prefix}.mlp.w2", (mlp_hidden, d)),
        (f"{prefix}.mlp.b2", (d,)),
    ]


def parameter_shapes(config: ModelConfig) -> list[tuple[str, tuple[int, ...]]]:
    """Canonical parameter (name, shape) list; checkpoint order follows it."""
    patch_dim = config.patch_size * config.patch_size * config.channels
    shapes = [
        ("vis.patch.w", (patch_dim, config.d_v)),
        ("vis.patch.b", (config.d_v,)),
        ("vis.pos", (config.num_visual_tokens, config.d_v)),
    ]
    for i in range(config.n_vision_layers):
        shapes += _block_param_shapes(f"vis.{i}", config.d_v, 2 * config.d_v)
    shapes += [
        ("proj.w", (config.d_v, config.d_l)),
        ("proj.b", (config.d_l,)),
        ("lm.tok", (config.vocab_size, config.d_l)),
        ("lm.pos", (config.max_seq_len, config.d_l)),
    ]
    for i in range(config.n_lm_layers):
        shapes += _block_param_shapes(f"lm.{i}", config.d_l, 2 * config.d_l)
    shapes += [
        ("lm.ln_f.g", (config.d_l,)),
        ("lm.ln_f.b", (config.d_l,)),
        ("lm.head.w", (config.d_l, config.vocab_size)),
        ("lm.head.b", (config.vocab_size,)),
    ]
    return shapes


def _init_param(name: str, shape: tuple[int, ...], rng: np.random.Generator, n_layers: int) -> np.ndarray:
    if name.endswith((".ln1.g", ".ln2.g", ".ln_f.g")):
        return np.ones(shape)
    if name.endswith((".b", ".b1", ".b2", ".bo", ".bqkv", ".ln1.b", ".ln2.b", ".ln_f.b")):
        return np.zeros(shape)
    if name == "vis.pos":
        # position must be salient for spatial shape features to form
        return rng.uniform(-0.3, 0.3, size=shape)
    if name in ("lm.tok", "lm.pos"):
        return rng.uniform(-0.05, 0.05, size=shape)
    bound = 1.0 / np.sqrt(shape[0])
    # residual-branch outputs start damped so depth does not amplify activations
    if name.endswith((".attn.wo", ".mlp.w2")):
        bound /= np.sqrt(2.0 * n_layers)
    return rng.uniform(-bound, bound, size=shape)


def _as_batch_ids(tokens: np.ndarray, vocab: int, what: str) -> np.ndarray:
    ids = np.asarray(tokens, dtype=np.int64)
    if ids.ndim == 1:
        ids = ids[None, :]
    if ids.ndim != 2 or ids.shape[1] == 0:
        raise ValueError(f"{what} must be a nonempty token sequence")
    if ids.min() < 0 or ids.max() >= vocab:
        raise ValueError(f"{what} token id out of vocabulary")
    return ids


class ToyVLM:
    """Patch encoder + projector + causal LM with per-layer hidden taps."""

    def __init__(self, config: ModelConfig, params: dict[str, Tensor] | None = None):
        self.config = config
        # per-length causal masks; entries are immutable constants so sharing
        # them across concurrent forward passes is safe
        self._mask_cache: dict[int, np.ndarray] = {}
        if params is None:
            rng = np.random.default_rng(config.seed)
            n_layers = config.n_vision_layers + config.n_lm_layers
            params = {
                name: Tensor(_init_param(name, shape, rng, n_layers), tracked=True)
                for name, shape in parameter_shapes(config)
            }
        self.params = params

    # -- parameter management -------------------------------------------------

    def param_names(self) -> list[str]:
        return list(self.params.keys())

    def set_trainable(self, trainable: bool) -> None:
        for p in self.params.values():
            p.tracked = trainable

    def zero_grads(self) -> None:
        for p in self.params.values():
            p.grad = None

    @contextmanager
    def frozen(self):
        """Temporarily exclude parameters from the tape (not thread-safe)."""
        states = [p.tracked for p in self.params.values()]
        self.set_trainable(False)
        try:
            yield self
        finally:
            for p, s in zip(self.params.values(), states):
                p.tracked = s

    # -- forward --------------------------------------------------------------

    def _causal_mask(self, seq_len: int) -> np.ndarray:
        cached = self._mask_cache.get(seq_len)
        if cached is None:
            cached = np.triu(np.full((seq_len, seq_len), NEG_INF), k=1)
            self._mask_cache[seq_len] = cached
        return cached

    def _block(self, x: Tensor, prefix: str, d: int, mask: np.ndarray | None) -> Tensor:
        p = self.params
        nh = self.config.n_heads
        dh = d // nh

        h = T.layer_norm(x, p[f"{prefix}.ln1.g"], p[f"{prefix}.ln1.b"])
        qkv = T.linear(h, p[f"{prefix}.attn.wqkv"], p[f"{prefix}.attn.bqkv"])
        # scale on q: 1/sqrt(dh) applied to the small operand, not the scores
        q = T.scale(T.split_heads(qkv, 0, d, nh), 1.0 / np.sqrt(dh))
        k = T.split_heads(qkv, 1, d, nh)
        v = T.split_heads(qkv, 2, d, nh)
        attn = T.softmax(T.matmul(q, T.transpose(k, (0, 2, 1))), mask=mask)
        ctx = T.merge_heads(T.matmul(attn, v), nh)
        x = T.add(x, T.linear(ctx, p[f"{prefix}.attn.wo"], p[f"{prefix}.attn.bo"]))

        h = T.layer_norm(x, p[f"{prefix}.ln2.g"], p[f"{prefix}.ln2.b"])
        h = T.gelu(T.linear(h, p[f"{prefix}.mlp.w1"], p[f"{prefix}.mlp.b1"]))
        return T.add(x, T.linear(h, p[f"{prefix}.mlp.w2"], p[f"{prefix}.mlp.b2"]))

    def _encode_images(self, images: Tensor) -> Tensor:
        cfg = self.config
        s, ps, c = cfg.image_size, cfg.patch_size, cfg.channels
        if images.data.ndim != 4 or images.shape[1:] != (s, s, c):
            raise T.ShapeError(f"forward: image batch shape {images.shape} != (B, {s}, {s}, {c})")
        b = images.shape[0]
        n = s // ps
        patches = T.reshape(
            T.transpose(T.reshape(images, (b, n, ps, n, ps, c)), (0, 1, 3, 2, 4, 5)),
            (b, n * n, ps * ps * c),
        )
        x = T.add(
            T.linear(patches, self.params["vis.patch.w"], self.params["vis.patch.b"]),
            self.params["vis.pos"],
        )
        for i in range(cfg.n_vision_layers):
            x = self._block(x, f"vis.{i}", cfg.d_v, mask=None)
        return T.linear(x, self.params["proj.w"], self.params["proj.b"])

    def forward_batch(
        self,
        prompts: np.ndarray,
        images: Tensor | np.ndarray,
        logits_rows: tuple[int, int] | None = None,
    ) -> tuple[Tensor, list[Tensor]]:
        """Joint sequence over a batch; returns (logits, per-LM-layer hiddens).

        ``prompts`` is (B, T_p) int tokens (or (T_p,) for a batch of one);
        ``images`` is (B, H, W, C) (or a single (H, W, C) image).
        ``logits_rows=(start, length)`` restricts the output head to a row
        slice; per-position heads make this exactly equivalent to slicing
        full logits.
        """
        cfg = self.config
        prompts = _as_batch_ids(prompts, cfg.vocab_size, "prompt")
        if not isinstance(images, Tensor):
            images = Tensor(images)
        if images.data.ndim == 3:
            images = T.reshape(images, (1,) + images.shape)
        if images.shape[0] != prompts.shape[0]:
            raise T.ShapeError(
                f"forward: batch mismatch, {prompts.shape[0]} prompts vs {images.shape[0]} images"
            )

        seq_len = cfg.num_visual_tokens + prompts.shape[1]
        if seq_len > cfg.max_seq_len:
            raise ValueError(f"forward: sequence length {seq_len} exceeds max_seq_len {cfg.max_seq_len}")

        e_v = self._encode_images(images)
        e_p = T.embedding(self.params["lm.tok"], prompts)
        x = T.concat([e_v, e_p], axis=1)
        x = T.add(x, T.narrow(self.params["lm.pos"], 0, 0, seq_len))

        mask = self._causal_mask(seq_len)
        hiddens: list[Tensor] = []
        for i in range(cfg.n_lm_layers):
            x = self._block(x, f"lm.{i}", cfg.d_l, mask)
            hiddens.append(x)
        if logits_rows is not None:
            x = T.narrow(x, 1, logits_rows[0], logits_rows[1])
        x = T.layer_norm(x, self.params["lm.ln_f.g"], self.params["lm.ln_f.b"])
        logits = T.linear(x, self.params["lm.head.w"], self.params["lm.head.b"])
        return logits, hiddens

    def forward(self, prompt: np.ndarray, image: Tensor | np.ndarray) -> tuple[Tensor, list[Tensor]]:
        """Single-sample forward; returns (T, |V|) logits and (T, d_l) hiddens."""
        logits, hiddens = self.forward_batch(prompt, image)
        squeeze = lambda t: T.reshape(t, t.shape[1:])
        return squeeze(logits), [squeeze(h) for h in hiddens]

    def hidden_last(self, hiddens: list[Tensor], layer: int, prompt_len: int) -> Tensor:
        """Hidden state of the last input token at the given LM layer.

        Works on batched (B, T, d) and single (T, d) hidden tensors alike.
        """
        pos = self.config.num_visual_tokens + prompt_len - 1
        h = hiddens[layer]
        if h.data.ndim == 3:
            return T.reshape(T.narrow(h, 1, pos, 1), (h.shape[0], self.config.d_l))
        return T.reshape(T.narrow(h, 0, pos, 1), (self.config.d_l,))

    # -- losses and decoding ----------------------------------------------------

    def nll_batch(self, prompts: np.ndarray, images: Tensor | np.ndarray, answers: np.ndarray) -> Tensor:
        """Teacher-forced -log P(answers | prompts, images) summed over the batch."""
        cfg = self.config
        prompts = _as_batch_ids(prompts, cfg.vocab_size, "prompt")
        answers = _as_batch_ids(answers, cfg.vocab_size, "answer")
        if prompts.shape[0] != answers.shape[0]:
            raise ValueError("nll_batch: prompt/answer batch mismatch")
        bsz, ta = answers.shape
        start = cfg.num_visual_tokens + prompts.shape[1] - 1
        logits, _ = self.forward_batch(
            np.concatenate([prompts, answers], axis=1), images, logits_rows=(start, ta)
        )
        rows = T.reshape(T.log_softmax(logits), (bsz * ta, cfg.vocab_size))
        return T.neg(T.sum_all(T.gather_rows(rows, answers.reshape(-1))))

    def sequence_nll(self, prompt: np.ndarray, image: Tensor | np.ndarray, answer: np.ndarray) -> Tensor:
        """Teacher-forced -log P(answer | prompt, image), summed over answer tokens."""
        return self.nll_batch(prompt, image, answer)

    def decode_batch(self, prompts: np.ndarray, images: Tensor | np.ndarray, max_new: int) -> list[list[int]]:
        """Lockstep greedy decoding for equal-length prompts.

        Argmax ties break to the lowest token id; each row stops at its first
        end token (trailing context continues but is discarded).
        """
        if max_new < 1:
            raise ValueError("decode_batch: max_new must be >= 1")
        cfg = self.config
        prompts = _as_batch_ids(prompts, cfg.vocab_size, "prompt")
        if not isinstance(images, Tensor):
            images = Tensor(images)
        with self.frozen():
            imgs = images.detach()
            seqs = prompts
            bsz = prompts.shape[0]
            outs: list[list[int]] = [[] for _ in range(bsz)]
            done = np.zeros(bsz, dtype=bool)
            for _ in range(max_new):
                last = self.config.num_visual_tokens + seqs.shape[1] - 1
                logits, _ = self.forward_batch(seqs, imgs, logits_rows=(last, 1))
                nxt = np.argmax(logits.data[:, -1, :], axis=1)
                for i in range(bsz):
                    if not done[i]:
                        outs[i].append(int(nxt[i]))
                        if nxt[i] == cfg.end_token:
                            done[i] = True
                if done.all():
                    break
                seqs = np.concatenate([seqs, nxt[:, None]], axis=1)
        return outs

    def greedy_decode(self, prompt: np.ndarray, image: Tensor | np.ndarray, max_new: int) -> list[int]:
        """Argmax decoding (ties break to the lowest id); stops at the end token."""
        return self.decode_batch(prompt, image, max_new)[0]

    # -- training -----------------------------------------------------------------

    def train(
        self,
        dataset: list[tuple[np.ndarray, np.ndarray, np.ndarray]],
        epochs: int,
        lr: float,
        seed: int,
        batch_size: int = 16,
        momentum: float = 0.9,
        warmup_batches: int = 0,
        clip_norm: float = 1.0,
        vision_lr_scale: float = 1.0,
        cosine_decay: bool = True,
        final_lr_fraction: float = 0.05,
    ) -> list[float]:
        """Mini-batch SGD with momentum over (prompt, image, answer) triples.

        Samples are bucketed by (prompt length, answer length) so each batch
        runs as one tensor pass. The step size ramps linearly over the first
        ``warmup_batches`` updates, then follows cosine decay down to
        ``final_lr_fraction * lr`` (unless ``cosine_decay`` is off). The
        per-sample mean gradient is clipped to ``clip_norm`` in global L2 norm
        (0 disables). ``vision_lr_scale`` multiplies the step for
        vision-encoder and projector parameters, which otherwise learn slowly
        behind the deep LM. Returns the per-epoch mean NLL curve;
        deterministic for a fixed seed.
        """
        if not dataset:
            raise ValueError("train: empty dataset")
        self.set_trainable(True)
        group_scale = {
            name: vision_lr_scale if name.startswith(("vis.", "proj.")) else 1.0
            for name in self.params
        }
        rng = np.random.default_rng(seed)
        buckets: dict[tuple[int, int], list[int]] = {}
        for i, (prompt, _, answer) in enumerate(dataset):
            buckets.setdefault((len(prompt), len(answer)), []).append(i)

        velocity = {name: np.zeros_like(p.data) for name, p in self.params.items()}
        per_epoch = sum(-(-len(v) // batch_size) for v in buckets.values())
        total_steps = max(1, epochs * per_epoch)
        curve: list[float] = []
        step = 0
        for epoch in range(epochs):
            batches: list[list[int]] = []
            for key in sorted(buckets):
                idxs = np.array(buckets[key])
                rng.shuffle(idxs)
                batches += [list(idxs[s : s + batch_size]) for s in range(0, len(idxs), batch_size)]
            rng.shuffle(batches)

            total = 0.0
            for b, batch in enumerate(batches):
                prompts = np.stack([dataset[i][0] for i in batch])
                images = np.stack([dataset[i][1] for i in batch])
                answers = np.stack([dataset[i][2] for i in batch])
                self.zero_grads()
                loss = self.nll_batch(prompts, images, answers)
                if not np.isfinite(loss.data):
                    raise TrainingError(epoch, b)
                total += loss.item()
                T.backward(loss)
                step += 1
                eff_lr = lr * min(1.0, step / warmup_batches) if warmup_batches else lr
                if cosine_decay:
                    frac = final_lr_fraction
                    progress = step / total_steps
                    eff_lr *= frac + (1 - frac) * 0.5 * (1 + np.cos(np.pi * progress))
                inv = 1.0 / len(batch)
                if clip_norm > 0:
                    sq = sum(
                        float(np.vdot(p.grad, p.grad)) for p in self.params.values() if p.grad is not None
                    )
                    gnorm = inv * np.sqrt(sq)
                    if gnorm > clip_norm:
                        inv *= clip_norm / gnorm
                for name, p in self.params.items():
                    g = p.grad if p.grad is not None else 0.0
                    velocity[name] = momentum * velocity[name] - eff_lr * group_scale[name] * inv * g
                    p.data = p.data + velocity[name]
            curve.append(total / len(dataset))
        self.zero_grads()
        return curve

    # -- persistence ----------------------------------------------------------------

    def save(self, path: str) -> None:
        cfg_json = self.config.to_json().encode()
        with open(path, "wb") as fh:
            fh.write(CHECKPOINT_MAGIC)
            fh.write(struct.pack("<II", CHECKPOINT_VERSION, len(cfg_json)))
            fh.write(cfg_json)
            fh.write(struct.pack("<I", len(self.params)))
            for name, p in self.params.items():
                nb = name.encode()
                fh.write(struct.pack("<H", len(nb)))
                fh.write(nb)
                fh.write(struct.pack("<B", p.data.ndim))
                fh.write(struct.pack(f"<{p.data.ndim}I", *p.data.shape))
                fh.write(p.data.astype("<f8").tobytes())
        with open(path + ".json", "w") as fh:
            fh.write(self.config.to_json())
            fh.write("\n")

    @classmethod
    def load(cls, path: str, trainable: bool = False) -> "ToyVLM":
        with open(path, "rb") as fh:
            blob = fh.read()
        if blob[:4] != CHECKPOINT_MAGIC:
            raise CheckpointError(f"bad checkpoint magic {blob[:4]!r}")
        version, cfg_len = struct.unpack_from("<II", blob, 4)
        if version != CHECKPOINT_VERSION:
            raise CheckpointError(
                f"checkpoint version {version} != supported {CHECKPOINT_VERSION}",
                version_mismatch=True,
            )
        pos = 12
        config = ModelConfig.from_json(blob[pos : pos + cfg_len].decode())
        pos += cfg_len
        (n_params,) = struct.unpack_from("<I", blob, pos)
        pos += 4
        expected = parameter_shapes(config)
        if n_params != len(expected):
            raise CheckpointError(f"checkpoint has {n_params} params, config implies {len(expected)}")
        params: dict[str, Tensor] = {}
        for exp_name, exp_shape in expected:
            (nlen,) = struct.unpack_from("<H", blob, pos)
            pos += 2
            name = blob[pos : pos + nlen].decode()
            pos += nlen
            (ndim,) = struct.unpack_from("<B", blob, pos)
            pos += 1
            shape = struct.unpack_from(f"<{ndim}I", blob, pos)
            pos += 4 * ndim
            if name != exp_name or tuple(shape) != tuple(exp_shape):
                raise CheckpointError(
                    f"parameter {name} {shape} does not match expected {exp_name} {exp_shape}"
                )
            count = int(np.prod(shape)) if ndim else 1
            data = np.frombuffer(blob, dtype="<f8", count=count, offset=pos).reshape(shape)
            pos += 8 * count
            params[name] = Tensor(data.copy(), tracked=trainable)
        return cls(config, params)


def exact_answer_accuracy(
    model: ToyVLM,
    samples: list[tuple[np.ndarray, np.ndarray, np.ndarray]],
    max_new: int = 8,
    batch_size: int = 32,
) -> float:
    """Fraction of samples whose greedy decode equals the reference answer."""
    if not samples:
        raise ValueError("empty evaluation set")
    buckets: dict[int, list[int]] = {}
    for i, (prompt, _, _) in enumerate(samples):
        buckets.setdefault(len(prompt), []).append(i)
    hits = 0
    for _, idxs in sorted(buckets.items()):
        for s in range(0, len(idxs), batch_size):
            chunk = idxs[s : s + batch_size]
            prompts = np.stack([samples[i][0] for i in chunk])
            images = np.stack([samples[i][1] for i in chunk])
            decoded = model.decode_batch(prompts, images, max_new=max_new)
            for i, got in zip(chunk, decoded):
                hits += got == list(np.asarray(samples[i][2], dtype=np.int64))
    return hits / len(samples)
