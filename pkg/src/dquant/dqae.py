"""N-level hierarchical depthwise-quantized autoencoder.

Shapes for an ``S x S`` input: the bottom encoder downsamples by 4 (two
stride-2 convolutions), every further level by 2 more, so level ``l``
(0 = bottom) works at ``S / 2**(l + 2)``.

Decoding runs top to bottom::

    q_top = Q_top(e_top);  d = D_top(q_top)
    for each lower level l:
        d_up = upsample(d)
        q_l  = Q_l(proj([e_l, d_up]))       # conditioning by concat + 1x1
        u_l  = U_l(q_l)                     # lifted to bottom resolution
        d    = D_l(q_l) + d_up              # additive skip
    x_hat = Dec([d, u_0, ..., u_{N-2}])

The training objective is the reconstruction loss plus, per level, the
codebook and commitment terms of the straight-through quantizer.  With EMA
enabled (the default) codebooks are refit from the assignments after every
step and never receive gradients.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Node
from .formats import load_codebooks, load_parameters, save_codebooks, save_parameters
from .info import entropy
from .layers import Conv2d, Module, ResBlock
from .optim import AdamW, DivergenceError
from .quantizer import DepthwiseQuantizer, capacity, default_dead_threshold
from .ste import FrozenAssignment, STEOutput, straight_through_quantize

__all__ = [
    "DqaeConfig",
    "DQAE",
    "TrainMetrics",
    "DecodeOutput",
    "encode_stack",
    "hierarchical_decode",
    "train_step",
    "bits_per_dim",
    "evaluate",
]

LN2 = math.log(2.0)


@dataclass
class DqaeConfig:
    num_levels: int = 2
    K: list = field(default_factory=lambda: [256, 128])  # top -> bottom
    M: int = 5
    D: int = 64
    beta: float = 0.25
    gamma: float = 0.99
    epsilon: float = 1e-5
    loss: str = "mse"  # "mse" or "ce" (256-bin cross-entropy)
    in_channels: int = 3
    image_size: int = 32
    width: int = 32
    res_blocks: int = 2
    lr: float = 2e-4
    weight_decay: float = 1e-4
    batch_size: int = 128
    use_ema: bool = True
    shared_codebook: bool = False
    dead_every: int = 100
    dead_fraction: float = 0.01
    top_to_decoder: bool = False
    # beta-VAE style multiplier on the (constant) KL to the uniform prior;
    # 0 drops it from the objective
    kl_weight: float = 0.0
    dtype: str = "float32"
    seed: int = 0

    def __post_init__(self):
        self.K = [int(k) for k in (self.K if isinstance(self.K, (list, tuple)) else [self.K])]
        if self.num_levels < 1:
            raise ValueError("num_levels must be >= 1")
        if len(self.K) != self.num_levels:
            raise ValueError(f"K list has {len(self.K)} entries for {self.num_levels} levels")
        for name in ("M", "D", "in_channels", "image_size", "width", "batch_size"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        if any(k < 1 for k in self.K):
            raise ValueError("every K must be positive")
        if self.beta < 0 or not 0 <= self.gamma < 1 or self.epsilon < 0 or self.lr <= 0:
            raise ValueError("invalid beta / gamma / epsilon / lr")
        if self.loss not in ("mse", "ce"):
            raise ValueError("loss must be 'mse' or 'ce'")
        if self.dtype not in ("float32", "float64"):
            raise ValueError("dtype must be float32 or float64")
        if self.image_size % 2 ** (self.num_levels + 1):
            raise ValueError(f"image_size {self.image_size} not divisible by {2 ** (self.num_levels + 1)}")

    @property
    def embed_dim(self) -> int:
        return self.M * self.D

    def level_K(self, level: int) -> int:
        """Codebook size of ``level`` (0 = bottom)."""
        return self.K[self.num_levels - 1 - level]

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class TrainMetrics:
    step: int
    total: float
    reconstruction: float
    codebook: list
    commitment: list
    entropy: list
    usage: list
    bits_per_dim: float | None
    reinitialized: list = field(default_factory=list)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["usage"] = [np.asarray(u).tolist() for u in self.usage]
        return d


class DQAE(Module):
    def __init__(self, config: DqaeConfig):
        self.config = cfg = config
        self._rng = np.random.default_rng(cfg.seed)
        rng = self._rng
        dt = np.dtype(cfg.dtype)
        w, E, N, C = cfg.width, cfg.embed_dim, cfg.num_levels, cfg.in_channels

        def res(ch, n=cfg.res_blocks):
            return [ResBlock(ch, ch, rng, dt) for _ in range(n)]

        # level 0 encoder: two stride-2 convs; higher levels: one more each
        self.enc = [[Conv2d(C, w, 4, rng, stride=2, padding=1, dtype=dt),
                     Conv2d(w, w, 4, rng, stride=2, padding=1, dtype=dt)] + res(w)]
        for _ in range(1, N):
            self.enc.append([Conv2d(w, w, 4, rng, stride=2, padding=1, dtype=dt)] + res(w))
        self.pre = [Conv2d(w, E, 1, rng, dtype=dt) for _ in range(N)]
        self.cond = [Conv2d(E + w, E, 1, rng, dtype=dt) for _ in range(N - 1)]
        self.dec = [[Conv2d(E, w, 3, rng, dtype=dt)] + res(w, 1) for _ in range(N)]
        n_up = N - 1 + (1 if cfg.top_to_decoder and N > 1 else 0)
        self.up = [Conv2d(E, w, 1, rng, dtype=dt) for _ in range(n_up)]
        out_ch = C * 256 if cfg.loss == "ce" else C
        self.final = [Conv2d(w * (1 + n_up), w, 1, rng, dtype=dt)] + res(w, 1) + [
            Conv2d(w, w, 3, rng, dtype=dt),
            Conv2d(w, w, 3, rng, dtype=dt),
            Conv2d(w, out_ch, 1, rng, dtype=dt),
        ]
        self.quantizers = [
            DepthwiseQuantizer.create(cfg.M, cfg.level_K(l), cfg.D, axis=1, shared=cfg.shared_codebook,
                                      rng=rng, dtype=dt, gamma=cfg.gamma, epsilon=cfg.epsilon)
            for l in range(N)
        ]
        self._initialized = [False] * N
        self.code_params = None
        if not cfg.use_ema:
            self.code_params = []
            for q in self.quantizers:
                nodes = {}
                self.code_params.append([nodes.setdefault(id(b), ad.parameter(b.codes)) for b in q.books])
        self.optimizer = AdamW(self.parameters(), lr=cfg.lr, weight_decay=cfg.weight_decay)
        self.step = 0

    # -- helpers -----------------------------------------------------------
    def named_parameters(self, prefix: str = ""):
        for name in ("enc", "pre", "cond", "dec", "up", "final", "code_params"):
            yield from _walk_attr(getattr(self, name, None), prefix + name)

    def preprocess(self, batch):
        """uint8 images -> centred float input and integer targets."""
        x = np.asarray(batch)
        if x.dtype == np.uint8:
            target = x.astype(np.int64)
            xf = x.astype(self.config.dtype) / 255.0
        else:
            xf = x.astype(self.config.dtype)
            target = np.clip(np.rint(xf * 255), 0, 255).astype(np.int64)
        return xf, target

    def initialize_codebooks(self, level: int, vectors) -> None:
        """Seed every book of ``level`` with rows of the current batch."""
        q = self.quantizers[level]
        for book, slots in q.unique_books():
            pool = np.concatenate([vectors[i] for i in slots])
            idx = self._rng.choice(pool.shape[0], size=book.K, replace=pool.shape[0] < book.K)
            book.codes[...] = pool[idx]
            book.counts[...] = 0.0
            book.sums[...] = 0.0
        self._initialized[level] = True


def _walk_attr(value, name):
    if value is None:
        return
    if isinstance(value, Node):
        yield name, value
    elif isinstance(value, Module):
        yield from value.named_parameters(name + ".")
    elif isinstance(value, (list, tuple)):
        seen = set()
        for i, v in enumerate(value):
            if isinstance(v, Node):
                if id(v) in seen:
                    continue
                seen.add(id(v))
            yield from _walk_attr(v, f"{name}.{i}")


def _run(layers, x):
    for layer in layers:
        x = layer(x)
    return x


def encode_stack(model: DQAE, x) -> list[Node]:
    """Encoder outputs ``e_all`` ordered bottom to top."""
    cfg = model.config
    xv = x.value if isinstance(x, Node) else np.asarray(x)
    if xv.ndim != 4:
        raise ValueError("expected a (B, C, H, W) batch")
    div = 2 ** (cfg.num_levels + 1)
    if xv.shape[2] % div or xv.shape[3] % div:
        raise ValueError(f"spatial extents {xv.shape[2:]} not divisible by {div}")
    h = x if isinstance(x, Node) else ad.constant(xv - 0.5)
    out = []
    for l, block in enumerate(model.enc):
        if l > 0:
            h = ad.relu(h)
        h = block[0](h)
        rest = block[1:]
        if l == 0:
            h = rest[0](ad.relu(h))
            rest = rest[1:]
        h = _run(rest, h)
        out.append(model.pre[l](ad.relu(h)))
    return out


@dataclass
class DecodeOutput:
    x_hat: Node
    levels: list  # STEOutput per level, bottom -> top
    quantized: list  # quantized stream per level (after zeroing), bottom -> top
    inputs: list  # quantizer input per level, bottom -> top


def hierarchical_decode(model: DQAE, e_all, zero_levels=(), frozen=None) -> DecodeOutput:
    """Quantize top to bottom and decode; see the module docstring.

    ``zero_levels`` replaces those levels' quantized streams by zeros
    (ablation); ``frozen`` maps level -> :class:`FrozenAssignment`.
    """
    cfg = model.config
    N = cfg.num_levels
    if len(e_all) != N:
        raise ValueError(f"expected {N} encodings, got {len(e_all)}")
    for l in range(1, N):
        if e_all[l].shape[2] * 2 != e_all[l - 1].shape[2]:
            raise ValueError("level shapes do not halve going up")
    frozen = frozen or {}
    outs: list = [None] * N
    qs: list = [None] * N
    zs: list = [None] * N

    def quantize(l, z):
        zs[l] = z
        if not model._initialized[l] and l not in frozen:
            vecs, _ = model.quantizers[l].slice_vectors(z.value)
            model.initialize_codebooks(l, vecs)
        cp = model.code_params[l] if model.code_params is not None else None
        o = straight_through_quantize(z, model.quantizers[l], cfg.beta, cp, frozen.get(l))
        outs[l] = o
        q = o.quantized
        if l in zero_levels:
            q = ad.constant(np.zeros_like(q.value))
        qs[l] = q
        return q

    top = N - 1
    q = quantize(top, e_all[top])
    d = _run(model.dec[top], q)
    u_all = []
    if cfg.top_to_decoder and N > 1:
        u_all.append(ad.upsample_nearest(model.up[-1](q), 2 ** top))
    for l in range(N - 2, -1, -1):
        d_up = ad.upsample_nearest(d, 2)
        z = model.cond[l](ad.concat([e_all[l], d_up], axis=1))
        q = quantize(l, z)
        u_all.append(ad.upsample_nearest(model.up[l](q), 2 ** l))
        d = _run(model.dec[l], q) + d_up
    f = model.final
    h = f[0](ad.concat([d] + u_all, axis=1))
    h = f[1](h)
    h = f[2](ad.upsample_nearest(ad.relu(h), 2))
    h = f[3](ad.upsample_nearest(ad.relu(h), 2))
    x_hat = f[4](ad.relu(h))
    return DecodeOutput(x_hat, outs, qs, zs)


def reconstruction_loss(model: DQAE, x_hat: Node, xf, target) -> Node:
    cfg = model.config
    if cfg.loss == "mse":
        return ad.mse(x_hat, xf - 0.5)
    B, _, H, W = x_hat.shape
    logits = x_hat.reshape(B, 256, cfg.in_channels, H, W)
    return ad.categorical_nll(logits, target, axis=1)


def reconstruct(model: DQAE, x_hat: Node) -> np.ndarray:
    """Point reconstruction in [0, 1] (expected bin for the CE head)."""
    cfg = model.config
    v = x_hat.value
    if cfg.loss == "mse":
        return v + 0.5
    B, _, H, W = v.shape
    z = v.reshape(B, 256, cfg.in_channels, H, W)
    p = np.exp(z - z.max(axis=1, keepdims=True))
    p /= p.sum(axis=1, keepdims=True)
    return np.tensordot(np.arange(256) / 255.0, p, axes=(0, 1))


def bits_per_dim(nll_nats_total: float, num_dims: int) -> float:
    if num_dims <= 0:
        raise ValueError("num_dims must be positive")
    return nll_nats_total / (num_dims * LN2)


def forward_loss(model: DQAE, batch, zero_levels=(), frozen=None):
    xf, target = model.preprocess(batch)
    e_all = encode_stack(model, xf)
    out = hierarchical_decode(model, e_all, zero_levels, frozen)
    rec = reconstruction_loss(model, out.x_hat, xf, target)
    total = rec
    for o in out.levels:
        total = total + o.codebook_term + o.commitment_term
    if model.config.kl_weight:
        kl = sum(capacity(q.K, q.M).kl_constant for q in model.quantizers)
        total = total + model.config.kl_weight * kl
    return total, rec, out


def train_step(model: DQAE, batch) -> TrainMetrics:
    """One optimizer step plus EMA refit and periodic dead-code reseeding."""
    cfg = model.config
    total, rec, out = forward_loss(model, batch)
    terms = {"reconstruction": rec.value}
    for l, o in enumerate(out.levels):
        terms[f"codebook[{l}]"] = o.codebook_term.value
        terms[f"commitment[{l}]"] = o.commitment_term.value
    for name, v in terms.items():
        if not np.isfinite(v):
            raise DivergenceError(f"non-finite {name} loss at step {model.step}")
    model.optimizer.zero_grad()
    total.backward()
    model.optimizer.step(names=[n for n, _ in model.named_parameters()])
    model.step += 1
    reinit = [0] * cfg.num_levels
    for l, (q, o) in enumerate(zip(model.quantizers, out.levels)):
        if cfg.use_ema:
            q.ema_update(o.result.codes, o.vectors)
        else:
            # counts still track usage so dead codes can be found
            for book, slots in q.unique_books():
                idx = np.concatenate([o.result.codes.reshape(-1, q.M)[:, i] for i in slots])
                counts = np.bincount(idx, minlength=book.K)
                book.counts = book.gamma * book.counts + (1 - book.gamma) * counts
        if cfg.dead_every and model.step % cfg.dead_every == 0:
            for book, slots in q.unique_books():
                pool = np.concatenate([o.vectors[i] for i in slots])
                reinit[l] += book.reinit_dead(pool, default_dead_threshold(book, cfg.dead_fraction), model._rng)
    usage, ents = [], []
    for l, (q, o) in enumerate(zip(model.quantizers, out.levels)):
        codes = o.result.codes.reshape(-1, q.M)
        usage.append(np.bincount(codes.ravel(), minlength=q.K))
        ents.append(float(np.mean([entropy(np.bincount(codes[:, i], minlength=q.K)) for i in range(q.M)])))
    rec_v = float(rec.value)
    return TrainMetrics(
        step=model.step,
        total=float(total.value),
        reconstruction=rec_v,
        codebook=[float(o.codebook_term.value) for o in out.levels],
        commitment=[float(o.commitment_term.value) for o in out.levels],
        entropy=ents,
        usage=usage,
        bits_per_dim=rec_v / LN2 if cfg.loss == "ce" else None,
        reinitialized=reinit,
    )


def train(model: DQAE, images, steps: int, log=None, metrics_path=None) -> list[TrainMetrics]:
    """Run ``steps`` steps on minibatches drawn (seeded) from ``images``."""
    cfg = model.config
    images = np.asarray(images)
    history = []
    sink = open(metrics_path, "a") if metrics_path else None
    try:
        for _ in range(steps):
            idx = model._rng.choice(len(images), size=min(cfg.batch_size, len(images)), replace=False)
            m = train_step(model, images[idx])
            history.append(m)
            if sink:
                rec = {k: v for k, v in m.to_dict().items() if k != "usage"}
                sink.write(json.dumps(rec, sort_keys=True) + "\n")
            if log and (m.step % 50 == 0 or m.step == 1):
                log(m)
    finally:
        if sink:
            sink.close()
    return history


@dataclass
class EvalResult:
    reconstruction: float
    mse: float
    bits_per_dim: float | None
    codes: list  # per level, (B, H, W, M), bottom -> top
    level_entropy: list


def evaluate(model: DQAE, images, zero_levels=(), batch_size: int = 256) -> EvalResult:
    """Average reconstruction loss, pixel MSE and code statistics."""
    cfg = model.config
    images = np.asarray(images)
    recs, mses, ws = [], [], []
    codes = [[] for _ in range(cfg.num_levels)]
    for lo in range(0, len(images), batch_size):
        batch = images[lo:lo + batch_size]
        xf, target = model.preprocess(batch)
        out = hierarchical_decode(model, encode_stack(model, xf), zero_levels)
        rec = reconstruction_loss(model, out.x_hat, xf, target)
        recs.append(float(rec.value))
        mses.append(float(np.mean((reconstruct(model, out.x_hat) - xf) ** 2)))
        ws.append(len(batch))
        for l, o in enumerate(out.levels):
            codes[l].append(o.result.codes)
    w = np.asarray(ws, dtype=np.float64) / sum(ws)
    rec = float(np.dot(recs, w))
    codes = [np.concatenate(c) for c in codes]
    ents = []
    for l, c in enumerate(codes):
        flat = c.reshape(-1, c.shape[-1])
        K = model.quantizers[l].K
        ents.append(float(np.mean([entropy(np.bincount(flat[:, i], minlength=K)) for i in range(flat.shape[1])])))
    return EvalResult(rec, float(np.dot(mses, w)), rec / LN2 if cfg.loss == "ce" else None, codes, ents)


def freeze_assignments(model: DQAE, batch) -> dict:
    """Capture every level's assignments at the current parameters.

    Passing the result as ``frozen`` to :func:`forward_loss` gives a
    function of the network parameters whose exact gradient equals the
    straight-through gradient at this point.
    """
    xf, _ = model.preprocess(batch)
    out = hierarchical_decode(model, encode_stack(model, xf))
    return {l: o.freeze(z) for l, (o, z) in enumerate(zip(out.levels, out.inputs))}


def save_checkpoint(model: DQAE, directory) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    save_parameters(directory / "params.dqp", [(n, p.value) for n, p in model.named_parameters()])
    for l, q in enumerate(model.quantizers):
        save_codebooks(directory / f"codebooks_level{l}.dqc", q)
    (directory / "model.json").write_text(json.dumps({"config": model.config.to_dict(), "step": model.step,
                                                      "initialized": model._initialized}, indent=2,
                                                     sort_keys=True) + "\n")


def load_checkpoint(directory) -> DQAE:
    directory = Path(directory)
    meta = json.loads((directory / "model.json").read_text())
    model = DQAE(DqaeConfig(**meta["config"]))
    params = load_parameters(directory / "params.dqp")
    named = dict(model.named_parameters())
    if set(params) != set(named):
        raise ValueError("checkpoint parameters do not match the model")
    for n, p in named.items():
        p.value[...] = params[n]
    for l in range(model.config.num_levels):
        q = load_codebooks(directory / f"codebooks_level{l}.dqc", axis=1, gamma=model.config.gamma,
                           epsilon=model.config.epsilon, shared=model.config.shared_codebook)
        for dst, src in zip(model.quantizers[l].books, q.books):
            dst.codes[...] = src.codes
            dst.counts = src.counts.copy()
            dst.sums = src.sums.copy()
    model.step = meta["step"]
    model._initialized = list(meta["initialized"])
    return model
