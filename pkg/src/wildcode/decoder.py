"""A small causal transformer with hybrid output heads.

The model reads a feature vector (projected to a few prefix embeddings) and
emits a token stream. Besides next-token logits it has a rotation head (MLP
to nine floats) and an appearance head (linear to ``embed_dim``). The hidden
state at the position that predicts a ``[ROT]``/``[CLIP]`` token also feeds
the matching head; the payload is then added, through a learned linear
re-embedding, to the input embedding of that slot token on the next step.
During training the ground-truth payloads are fed back (teacher forcing).
"""
from __future__ import annotations

import csv
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import NamedTuple

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from wildcode import codec, rotmath
from wildcode.assets import cosine_embedding_loss
from wildcode.codec import BOS, CLIP, EOS, PAD, ROT, VOCAB, HybridTokenStream
from wildcode.scenegen import feature_dim
from wildcode.scenelang import (
    MAX_OBJECTS,
    SCALAR_SETTERS,
    ObjectRecord,
    Profile,
    SceneAttributes,
    SceneProgram,
    strip_pixels,
    to_discrete,
)

log = logging.getLogger(__name__)

CHECKPOINT_FORMAT = "wildcode-checkpoint"
CHECKPOINT_VERSION = 1
VARIANTS = ("clip", "discrete")


class ContextOverflow(ValueError):
    pass


def max_stream_length(max_objects: int = MAX_OBJECTS, pixels: bool = True, discrete: bool = False) -> int:
    """Token count of the longest program with every number below 10^4 in
    magnitude, which covers anything the generator can place."""
    big = -9999.999
    obj = ObjectRecord(loc=(big, big, big), height=9999.999, pixels=99999 if pixels else None,
                       rotation=np.eye(3), appearance=9999 if discrete else np.ones(1))
    attrs = SceneAttributes(*([big] * 6), 359.999, *([big] * 3), ground=9999 if discrete else np.ones(1))
    prog = SceneProgram(attrs, (obj,) * max_objects)
    return len(codec.encode(prog).tokens)


@dataclass
class DecoderConfig:
    layers: int = 2
    width: int = 128
    heads: int = 4
    context: int = 1472
    vocab_size: int = len(VOCAB)
    embed_dim: int = 768
    feature_dim: int = 1408
    n_prefix: int = 4
    lr: float = 1e-3
    lam: float = 0.1
    variant: str = "clip"
    pixels: bool = True
    fuzz: bool = False
    loss_weights: tuple = (1.0, 1.0, 1.0)
    batch_size: int = 32
    seed: int = 0
    max_objects: int = MAX_OBJECTS

    def __post_init__(self):
        self.loss_weights = tuple(self.loss_weights)
        if self.variant not in VARIANTS:
            raise ValueError(f"variant must be one of {VARIANTS}")
        if self.width % self.heads:
            raise ValueError("width must be divisible by heads")
        need = max_stream_length(self.max_objects, self.pixels, self.variant == "discrete")
        if self.context < need:
            raise ValueError(f"context {self.context} < {need} tokens needed for {self.max_objects} objects")

    @property
    def profile(self) -> Profile:
        return Profile(pixels=self.pixels, discrete=self.variant == "discrete")


def config_for(gen_cfg, **overrides) -> DecoderConfig:
    """Decoder config sized for a dataset. The context covers every variant,
    so trunks of different variants have identical shapes."""
    kw = {
        "embed_dim": gen_cfg.embed_dim,
        "feature_dim": feature_dim(gen_cfg),
        "max_objects": gen_cfg.max_objects,
        "context": max_stream_length(gen_cfg.max_objects, True, True),
    }
    kw.update(overrides)
    return DecoderConfig(**kw)


# -- model -------------------------------------------------------------------------

class Block(nn.Module):
    def __init__(self, width: int, heads: int):
        super().__init__()
        self.heads = heads
        self.ln1 = nn.LayerNorm(width)
        self.qkv = nn.Linear(width, 3 * width)
        self.proj = nn.Linear(width, width)
        self.ln2 = nn.LayerNorm(width)
        self.mlp = nn.Sequential(nn.Linear(width, 4 * width), nn.GELU(), nn.Linear(4 * width, width))

    def forward(self, x, cache: dict | None = None):
        b, t, w = x.shape
        q, k, v = self.qkv(self.ln1(x)).split(w, dim=-1)
        q, k, v = (z.view(b, t, self.heads, w // self.heads).transpose(1, 2) for z in (q, k, v))
        causal = True
        if cache is not None:
            if "k" in cache:
                if t != 1:
                    raise ValueError("cached decoding feeds one token at a time")
                k = torch.cat([cache["k"], k], dim=2)
                v = torch.cat([cache["v"], v], dim=2)
                causal = False
            cache["k"], cache["v"] = k, v
        y = F.scaled_dot_product_attention(q, k, v, is_causal=causal)
        x = x + self.proj(y.transpose(1, 2).reshape(b, t, w))
        return x + self.mlp(self.ln2(x))


class HybridDecoder(nn.Module):
    def __init__(self, cfg: DecoderConfig):
        super().__init__()
        self.cfg = cfg
        w = cfg.width
        self.tok_emb = nn.Embedding(cfg.vocab_size, w)
        self.pos_emb = nn.Parameter(torch.randn(cfg.n_prefix + cfg.context, w) * 0.02)
        self.feat_proj = nn.Linear(cfg.feature_dim, cfg.n_prefix * w)
        self.rot_in = nn.Linear(9, w)
        self.clip_in = nn.Linear(cfg.embed_dim, w)
        self.blocks = nn.ModuleList(Block(w, cfg.heads) for _ in range(cfg.layers))
        self.ln_f = nn.LayerNorm(w)
        self.lm_head = nn.Linear(w, cfg.vocab_size)
        self.rot_head = nn.Sequential(nn.Linear(w, w), nn.GELU(), nn.Linear(w, 9))
        self.clip_head = nn.Linear(w, cfg.embed_dim)
        self.register_buffer("feat_mean", torch.zeros(cfg.feature_dim))
        self.register_buffer("feat_std", torch.ones(cfg.feature_dim))

    def trunk_parameters(self) -> int:
        heads = (self.lm_head, self.rot_head, self.clip_head, self.rot_in, self.clip_in, self.tok_emb)
        skip = {id(p) for m in heads for p in m.parameters()}
        return sum(p.numel() for p in self.parameters() if id(p) not in skip)

    def _embed(self, tokens, rot_in, clip_in, offset: int):
        t = tokens.shape[1]
        x = self.tok_emb(tokens) + self.pos_emb[self.cfg.n_prefix + offset: self.cfg.n_prefix + offset + t]
        x = x + self.rot_in(rot_in) * (tokens == ROT).unsqueeze(-1).to(x.dtype)
        return x + self.clip_in(clip_in) * (tokens == CLIP).unsqueeze(-1).to(x.dtype)

    def _prefix(self, features):
        f = (features - self.feat_mean) / self.feat_std
        p = self.feat_proj(f).view(f.shape[0], self.cfg.n_prefix, self.cfg.width)
        return p + self.pos_emb[: self.cfg.n_prefix]

    def forward(self, features, tokens, rot_in, clip_in, caches=None, offset: int = 0):
        """Hidden states for the token positions. Without caches the prefix is
        prepended; with fresh caches it is prepended and cached; with filled
        caches only the new token is processed."""
        x = self._embed(tokens, rot_in, clip_in, offset)
        fresh = caches is None or "k" not in caches[0]
        if fresh:
            x = torch.cat([self._prefix(features), x], dim=1)
        for i, blk in enumerate(self.blocks):
            x = blk(x, None if caches is None else caches[i])
        x = self.ln_f(x)
        return x[:, self.cfg.n_prefix:] if fresh else x


# -- batches -----------------------------------------------------------------------

@dataclass
class Sample:
    features: np.ndarray
    stream: HybridTokenStream
    record: dict | None = None


class Batch(NamedTuple):
    features: torch.Tensor
    tokens: torch.Tensor
    rot: torch.Tensor
    clip: torch.Tensor


def collate(samples, embed_dim: int, dtype=torch.float32) -> Batch:
    n = len(samples)
    t = max(len(s.stream.tokens) for s in samples)
    tokens = np.full((n, t), PAD, dtype=np.int64)
    rot = np.zeros((n, t, 9))
    clip = np.zeros((n, t, embed_dim))
    for i, s in enumerate(samples):
        toks = s.stream.tokens
        tokens[i, : len(toks)] = toks
        for pos, payload in zip(s.stream.slot_positions(), s.stream.slots):
            if toks[pos] == ROT:
                rot[i, pos] = payload
            else:
                clip[i, pos] = payload
    feats = np.stack([s.features for s in samples])
    return Batch(torch.as_tensor(feats, dtype=dtype), torch.as_tensor(tokens),
                 torch.as_tensor(rot, dtype=dtype), torch.as_tensor(clip, dtype=dtype))


class LossParts(NamedTuple):
    total: torch.Tensor
    ce: torch.Tensor
    rot_mse: torch.Tensor
    clip_loss: torch.Tensor


def teacher_forced_loss(model: HybridDecoder, batch: Batch) -> LossParts:
    cfg = model.cfg
    if batch.tokens.shape[1] > cfg.context:
        raise ContextOverflow(f"stream of {batch.tokens.shape[1]} tokens exceeds context {cfg.context}")
    x, y = batch.tokens[:, :-1], batch.tokens[:, 1:]
    h = model(batch.features, x, batch.rot[:, :-1], batch.clip[:, :-1])
    logits = model.lm_head(h)
    ce = F.cross_entropy(logits.reshape(-1, logits.shape[-1]), y.reshape(-1), ignore_index=PAD)
    zero = h.new_zeros(())
    rot_pos = y == ROT
    rot_mse = rotmath.rotation_loss(model.rot_head(h[rot_pos]), batch.rot[:, 1:][rot_pos]) if rot_pos.any() else zero
    clip_pos = y == CLIP
    clip_loss = (cosine_embedding_loss(model.clip_head(h[clip_pos]), batch.clip[:, 1:][clip_pos], cfg.lam)
                 if clip_pos.any() else zero)
    wc, wr, wa = cfg.loss_weights
    return LossParts(wc * ce + wr * rot_mse + wa * clip_loss, ce, rot_mse, clip_loss)


# -- generation --------------------------------------------------------------------

@torch.no_grad()
def generate(model: HybridDecoder, features, max_objects: int | None = None) -> list[HybridTokenStream] | HybridTokenStream:
    """Greedy decoding. A 2-D feature array returns one stream per row."""
    cfg = model.cfg
    max_objects = cfg.max_objects if max_objects is None else max_objects
    dtype = next(model.parameters()).dtype
    feats = torch.as_tensor(np.asarray(features), dtype=dtype)
    single = feats.ndim == 1
    if single:
        feats = feats[None]
    b = feats.shape[0]
    add_id = VOCAB.token_id("add(")
    caches = [{} for _ in model.blocks]
    tok = torch.full((b, 1), BOS, dtype=torch.long)
    rot_in = torch.zeros(b, 1, 9, dtype=dtype)
    clip_in = torch.zeros(b, 1, cfg.embed_dim, dtype=dtype)
    out_tokens = [[BOS] for _ in range(b)]
    out_slots: list[list[np.ndarray]] = [[] for _ in range(b)]
    n_add = [0] * b
    done = [False] * b
    for step in range(cfg.context - 1):
        h = model(feats, tok, rot_in, clip_in, caches=caches, offset=step)[:, -1]
        nxt = model.lm_head(h).argmax(-1)
        rot_pay = rotmath.orthogonalize_torch(model.rot_head(h).double()).reshape(b, 9).to(dtype)
        clip_pay = model.clip_head(h)
        tok = torch.full((b, 1), PAD, dtype=torch.long)
        rot_in = torch.zeros(b, 1, 9, dtype=dtype)
        clip_in = torch.zeros(b, 1, cfg.embed_dim, dtype=dtype)
        for i in range(b):
            if done[i]:
                continue
            t = int(nxt[i])
            if t == add_id and n_add[i] >= max_objects or step == cfg.context - 2:
                t = EOS
            if t == add_id:
                n_add[i] += 1
            out_tokens[i].append(t)
            tok[i, 0] = t
            if t == ROT:
                rot_in[i, 0] = rot_pay[i]
                out_slots[i].append(rot_pay[i].double().numpy().copy())
            elif t == CLIP:
                clip_in[i, 0] = clip_pay[i]
                out_slots[i].append(clip_pay[i].double().numpy().copy())
            elif t in (EOS, PAD, BOS):
                done[i] = True
        if all(done):
            break
    streams = [HybridTokenStream(t, s) for t, s in zip(out_tokens, out_slots)]
    return streams[0] if single else streams


@dataclass
class MalformedGeneration:
    stream: HybridTokenStream
    error: str


def decode_generated(stream: HybridTokenStream, profile: Profile) -> SceneProgram | MalformedGeneration:
    try:
        return codec.decode(stream, profile=profile)
    except codec.CodecError as e:
        return MalformedGeneration(stream, str(e))


# -- data --------------------------------------------------------------------------

def load_sample(manifest, rec: dict, cfg: DecoderConfig) -> Sample:
    """Program from the stored stream, reshaped to the decoder's profile."""
    prog = codec.decode(codec.read_stream(manifest.path(rec, "stream")))
    if cfg.fuzz:
        fuzzed = [rec["fuzzed_attributes"][k] for k in SCALAR_SETTERS]
        prog = SceneProgram(prog.attributes.with_scalars(fuzzed), prog.objects)
    if cfg.variant == "discrete":
        prog = to_discrete(prog, [o["asset_id"] for o in rec["objects"]], rec["ground_id"])
    if not cfg.pixels:
        prog = strip_pixels(prog)
    feats = np.load(manifest.path(rec, "features")).astype(np.float64)
    return Sample(feats, codec.encode(prog), rec)


def load_samples(manifest, cfg: DecoderConfig, split: str = "train") -> list[Sample]:
    return [load_sample(manifest, r, cfg) for r in manifest.split(split)]


# -- training ----------------------------------------------------------------------

@dataclass
class TrainState:
    cfg: DecoderConfig
    model: HybridDecoder
    optimizer: torch.optim.Optimizer
    step: int = 0
    log: list[dict] = field(default_factory=list)


def init_state(cfg: DecoderConfig, dtype=torch.float32) -> TrainState:
    torch.manual_seed(cfg.seed)
    model = HybridDecoder(cfg).to(dtype)
    opt = torch.optim.Adam(model.parameters(), lr=cfg.lr)
    return TrainState(cfg, model, opt)


def set_feature_stats(model: HybridDecoder, samples) -> None:
    f = np.stack([s.features for s in samples])
    model.feat_mean.copy_(torch.as_tensor(f.mean(0)))
    model.feat_std.copy_(torch.as_tensor(f.std(0) + 1e-6))


def train_steps(state: TrainState, samples, steps: int, log_every: int = 0,
                stop_below: float | None = None) -> TrainState:
    """Run up to ``steps`` Adam steps; stop early once the batch loss drops below ``stop_below``."""
    cfg = state.cfg
    if steps <= 0:
        return state
    if state.step == 0:
        set_feature_stats(state.model, samples)
    dtype = next(state.model.parameters()).dtype
    rng = np.random.default_rng([cfg.seed, state.step])
    order: list[int] = []
    state.model.train()
    for _ in range(steps):
        if len(order) < cfg.batch_size:
            order.extend(rng.permutation(len(samples)).tolist())
        idx, order = order[: cfg.batch_size], order[cfg.batch_size:]
        batch = collate([samples[i] for i in idx], cfg.embed_dim, dtype)
        parts = teacher_forced_loss(state.model, batch)
        state.optimizer.zero_grad()
        parts.total.backward()
        state.optimizer.step()
        state.step += 1
        row = {"step": state.step, **{k: v.item() for k, v in parts._asdict().items()}}
        state.log.append(row)
        if log_every and state.step % log_every == 0:
            log.info("step %6d total %.4f ce %.4f rot %.4f clip %.4f", state.step, row["total"], row["ce"],
                     row["rot_mse"], row["clip_loss"])
        if stop_below is not None and row["total"] < stop_below:
            break
    state.model.eval()
    return state


def train(cfg: DecoderConfig, manifest, steps: int, out_dir=None, log_every: int = 0) -> TrainState:
    state = init_state(cfg)
    samples = load_samples(manifest, cfg, "train")
    if not samples:
        raise ValueError("no training samples in manifest")
    train_steps(state, samples, steps, log_every)
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        save_checkpoint(state, out_dir / "checkpoint.pt")
        write_metrics_csv(state.log, out_dir / "metrics.csv")
    return state


def write_metrics_csv(log: list[dict], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=["step", "total", "ce", "rot_mse", "clip_loss"])
        w.writeheader()
        w.writerows(log)


def save_checkpoint(state: TrainState, path) -> None:
    torch.save({
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "config": asdict(state.cfg),
        "step": state.step,
        "model": state.model.state_dict(),
        "optimizer": state.optimizer.state_dict(),
    }, path)


def load_checkpoint(path) -> TrainState:
    blob = torch.load(path, map_location="cpu", weights_only=False)
    if blob.get("format") != CHECKPOINT_FORMAT or blob.get("version") != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: not a version {CHECKPOINT_VERSION} checkpoint")
    cfg = DecoderConfig(**blob["config"])
    state = init_state(cfg)
    state.model.load_state_dict(blob["model"])
    state.optimizer.load_state_dict(blob["optimizer"])
    state.step = blob["step"]
    state.model.eval()
    return state


# -- gradient checking --------------------------------------------------------------

def grad_check(loss_fn, params, n_coords: int = 20, rng=None, h: float = 1e-6) -> float:
    """Max-norm relative error between autograd and central differences over
    a random subset of scalar coordinates of ``params`` (use float64)."""
    rng = rng or np.random.default_rng(0)
    params = [p for p in params if p.requires_grad]
    for p in params:
        p.grad = None
    loss = loss_fn()
    grads = torch.autograd.grad(loss, params, allow_unused=True)
    sizes = np.array([p.numel() for p in params])
    picks = rng.choice(sizes.sum(), size=min(n_coords, sizes.sum()), replace=False)
    starts = np.concatenate([[0], np.cumsum(sizes)])
    analytic, numeric = [], []
    with torch.no_grad():
        for flat in picks:
            k = int(np.searchsorted(starts, flat, side="right") - 1)
            p, j = params[k], int(flat - starts[k])
            g = grads[k]
            analytic.append(0.0 if g is None else float(g.reshape(-1)[j]))
            view = p.data.view(-1)
            old = float(view[j])
            view[j] = old + h
            fp = float(loss_fn())
            view[j] = old - h
            fm = float(loss_fn())
            view[j] = old
            numeric.append((fp - fm) / (2 * h))
    a, n = np.array(analytic), np.array(numeric)
    scale = max(np.abs(a).max(), np.abs(n).max())
    return 0.0 if scale < 1e-12 else float(np.abs(a - n).max() / scale)


def decoder_grad_check(model: HybridDecoder, batch: Batch, n_coords: int = 20, rng=None) -> float:
    model = model.double()
    batch = Batch(batch.features.double(), batch.tokens, batch.rot.double(), batch.clip.double())
    return grad_check(lambda: teacher_forced_loss(model, batch).total, list(model.parameters()), n_coords, rng)


def rot_head_degenerate(model: HybridDecoder, batch: Batch, tol: float = 1e-6) -> bool:
    """True if any rotation-head output in the batch sits near an SVD degeneracy."""
    with torch.no_grad():
        h = model(batch.features, batch.tokens[:, :-1], batch.rot[:, :-1], batch.clip[:, :-1])
        pos = batch.tokens[:, 1:] == ROT
        if not pos.any():
            return False
        s = torch.linalg.svdvals(model.rot_head(h[pos]).reshape(-1, 3, 3).double())
        gaps = torch.minimum(s[:, 0] - s[:, 1], s[:, 1] - s[:, 2])
        return bool((gaps < tol * s[:, 0].clamp(min=1.0)).any())


def parameter_count(model: nn.Module) -> int:
    return sum(p.numel() for p in model.parameters())
