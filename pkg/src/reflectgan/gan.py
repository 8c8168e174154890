"""Conditional GAN mapping vegetated reflectance to bare-soil reflectance.

The generator is a residual MLP ending in tanh, so it works on reflectance
rescaled to [-1, 1]. The discriminator scores the concatenation
``[vegetated | bare]`` and outputs a probability that the bare half is real.
"""
from __future__ import annotations

import io
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import nn
from .errors import ConfigError, TrainingError
from .spectral import denormalize_reflectance, normalize_reflectance

log = logging.getLogger(__name__)

DEFAULT_BLOCKS = ((64, 128), (128, 64), (64, 64), (64, 32))
WEIGHTS_MAGIC = "reflectgan-weights"
WEIGHTS_VERSION = "v1"


class ResidualBlock(nn.Module):
    """``skip(x) + ReLU(BN(lin2(ReLU(BN(lin1(x))))))``.

    The skip path is the identity when input and output widths agree and a
    learned linear projection otherwise.
    """

    kind = "residual"

    def __init__(self, in_dim: int, out_dim: int, rng: np.random.Generator):
        super().__init__()
        self.in_dim, self.out_dim = in_dim, out_dim
        self.main = nn.Sequential(
            ("lin1", nn.Linear(in_dim, out_dim, rng)),
            ("bn1", nn.BatchNorm(out_dim)),
            ("act1", nn.Activation("relu")),
            ("lin2", nn.Linear(out_dim, out_dim, rng)),
            ("bn2", nn.BatchNorm(out_dim)),
            ("act2", nn.Activation("relu")),
        )
        self.skip = None if in_dim == out_dim else nn.Linear(in_dim, out_dim, rng, init="xavier")

    def children(self):
        kids = [("main", self.main)]
        if self.skip is not None:
            kids.append(("skip", self.skip))
        return kids

    def forward(self, x):
        if x.shape[-1] != self.in_dim:
            raise ConfigError(f"residual block expects width {self.in_dim}, got {x.shape}")
        shortcut = x if self.skip is None else self.skip.forward(x)
        return shortcut + self.main.forward(x)

    def backward(self, dout, accumulate=True):
        dx = self.main.backward(dout, accumulate)
        if self.skip is None:
            return dx + dout
        return dx + self.skip.backward(dout, accumulate)


class GeneratorNet(nn.Module):
    kind = "generator"

    def __init__(self, n_bands: int = 7, hidden: int = 64, blocks=DEFAULT_BLOCKS, seed: int = 0):
        super().__init__()
        blocks = tuple((int(a), int(b)) for a, b in blocks)
        dims = [hidden] + [b for _, b in blocks]
        for (a, _), prev in zip(blocks, dims):
            if a != prev:
                raise ConfigError(f"block widths do not chain: {blocks} after hidden={hidden}")
        rng = np.random.default_rng(seed)
        self.n_bands, self.hidden, self.blocks = n_bands, hidden, blocks
        self.input_stage = nn.Sequential(
            ("linear", nn.Linear(n_bands, hidden, rng)),
            ("bn", nn.BatchNorm(hidden)),
            ("act", nn.Activation("relu")),
        )
        self.res = nn.Sequential(*[(f"block{i}", ResidualBlock(a, b, rng))
                                   for i, (a, b) in enumerate(blocks)])
        self.output_stage = nn.Sequential(
            ("linear", nn.Linear(dims[-1], n_bands, rng, init="xavier")),
            ("act", nn.Activation("tanh")),
        )

    def children(self):
        return [("input", self.input_stage), ("res", self.res), ("output", self.output_stage)]

    def forward(self, x):
        x = np.asarray(x, dtype=np.float64)
        if x.ndim != 2 or x.shape[1] != self.n_bands:
            raise ConfigError(f"generator expects (batch, {self.n_bands}), got {x.shape}")
        return self.output_stage.forward(self.res.forward(self.input_stage.forward(x)))

    def backward(self, dout, accumulate=True):
        d = self.output_stage.backward(dout, accumulate)
        d = self.res.backward(d, accumulate)
        return self.input_stage.backward(d, accumulate)

    def arch(self) -> str:
        return f"hidden={self.hidden} blocks=" + ",".join(f"{a}x{b}" for a, b in self.blocks)


class DiscriminatorNet(nn.Module):
    """Linear(2n->64) LeakyReLU Dropout BN, Linear(64->128) LeakyReLU Dropout,
    Linear(128->64) LeakyReLU Dropout, Linear(64->1) sigmoid."""

    kind = "discriminator"

    def __init__(self, n_bands: int = 7, widths=(64, 128, 64), dropout: float = 0.3, seed: int = 0):
        super().__init__()
        rng = np.random.default_rng(seed)
        drop_rng = np.random.default_rng(rng.integers(2**63))
        self.n_bands, self.widths, self.dropout = n_bands, tuple(int(w) for w in widths), dropout
        layers = []
        prev = 2 * n_bands
        for i, w in enumerate(self.widths):
            layers.append((f"linear{i}", nn.Linear(prev, w, rng, negative_slope=nn.LEAKY_SLOPE)))
            layers.append((f"act{i}", nn.Activation("leaky_relu")))
            layers.append((f"drop{i}", nn.Dropout(dropout, drop_rng)))
            if i == 0:
                layers.append(("bn0", nn.BatchNorm(w)))
            prev = w
        layers.append(("head", nn.Linear(prev, 1, rng, init="xavier")))
        self.body = nn.Sequential(*layers)
        self.out = nn.Activation("sigmoid")

    def children(self):
        return [("body", self.body), ("out", self.out)]

    def logits(self, veg, bare):
        veg = np.asarray(veg, dtype=np.float64)
        bare = np.asarray(bare, dtype=np.float64)
        if veg.shape != bare.shape or veg.ndim != 2 or veg.shape[1] != self.n_bands:
            raise ConfigError(
                f"discriminator expects two (batch, {self.n_bands}) inputs, got {veg.shape} and {bare.shape}")
        return self.body.forward(np.concatenate([veg, bare], axis=1))

    def forward(self, veg, bare=None):
        if bare is None:
            veg, bare = np.split(np.asarray(veg), 2, axis=1)
        return self.out.forward(self.logits(veg, bare))

    def backward(self, dout, accumulate=True):
        """Backprop from d(loss)/d(probability); returns (d veg, d bare)."""
        return self.backward_logits(self.out.backward(dout), accumulate)

    def backward_logits(self, dlogits, accumulate=True):
        dz = self.body.backward(dlogits, accumulate)
        return dz[:, : self.n_bands], dz[:, self.n_bands:]

    def batchnorms(self) -> list[nn.BatchNorm]:
        return [m for _, m in self.named_modules() if isinstance(m, nn.BatchNorm)]

    def dropouts(self) -> list[nn.Dropout]:
        return [m for _, m in self.named_modules() if isinstance(m, nn.Dropout)]

    def arch(self) -> str:
        return "widths=" + ",".join(str(w) for w in self.widths) + f" dropout={self.dropout!r}"


def generator_forward(g: GeneratorNet, veg_norm):
    return g.forward(veg_norm)


def residual_forward(block: ResidualBlock, x):
    return block.forward(np.asarray(x, dtype=np.float64))


def discriminator_forward(d: DiscriminatorNet, veg_norm, bare_norm):
    return d.forward(veg_norm, bare_norm)


def d_loss(real_scores, fake_scores) -> tuple[float, float, float]:
    """(real term, fake term, their sum) of the discriminator objective."""
    loss_real, _ = nn.bce_loss(real_scores, np.ones_like(real_scores))
    loss_fake, _ = nn.bce_loss(fake_scores, np.zeros_like(fake_scores))
    return loss_real, loss_fake, loss_real + loss_fake


def g_loss(fake_scores, generated=None, target=None, l1_weight: float = 0.0) -> float:
    """Non-saturating generator loss, plus an optional L1 reconstruction term."""
    loss, _ = nn.bce_loss(fake_scores, np.ones_like(fake_scores))
    if l1_weight > 0:
        loss += l1_weight * float(np.mean(np.abs(np.asarray(generated) - np.asarray(target))))
    return loss


@dataclass
class GanTrainConfig:
    epochs: int = 200
    batch_size: int = 32
    lr: float = 1e-3
    beta1: float = 0.5
    beta2: float = 0.999
    seed: int = 42
    l1_weight: float = 100.0
    d_steps_per_g_step: int = 1

    def validate(self) -> None:
        if self.batch_size < 2:
            raise ConfigError("gan batch_size must be at least 2 (batch norm)")
        if self.epochs < 0 or self.d_steps_per_g_step < 1:
            raise ConfigError("gan epochs must be >= 0 and d_steps_per_g_step >= 1")
        if self.lr <= 0 or not (0 <= self.beta1 < 1) or not (0 <= self.beta2 < 1):
            raise ConfigError("gan lr must be positive and betas in [0, 1)")
        if self.l1_weight < 0:
            raise ConfigError("gan l1_weight must be non-negative")


@dataclass
class GanLossReport:
    epoch: int
    loss_d_real: float
    loss_d_fake: float
    loss_d: float
    loss_g: float
    d_real_mean: float
    d_fake_mean: float

    CSV_HEADER = "epoch,loss_d_real,loss_d_fake,loss_d,loss_g,d_real_mean,d_fake_mean"

    def csv_row(self) -> str:
        vals = [self.loss_d_real, self.loss_d_fake, self.loss_d, self.loss_g,
                self.d_real_mean, self.d_fake_mean]
        return f"{self.epoch}," + ",".join(repr(float(v)) for v in vals)


def write_loss_history(path, history: list[GanLossReport]) -> None:
    lines = [GanLossReport.CSV_HEADER] + [h.csv_row() for h in history]
    Path(path).write_text("\n".join(lines) + "\n")


@dataclass
class GanStepResult:
    loss_d_real: float
    loss_d_fake: float
    loss_g: float
    d_real_mean: float
    d_fake_mean: float
    extras: dict = field(default_factory=dict)


class GanTrainer:
    """Holds both networks and their optimizers; one :meth:`step` per batch."""

    def __init__(self, g: GeneratorNet, d: DiscriminatorNet, cfg: GanTrainConfig):
        cfg.validate()
        self.g, self.d, self.cfg = g, d, cfg
        self.opt_g = nn.Adam(g.parameters(), cfg.lr, cfg.beta1, cfg.beta2)
        self.opt_d = nn.Adam(d.parameters(), cfg.lr, cfg.beta1, cfg.beta2)

    def _joint_scores(self, veg, bare, fake):
        """Score ``[real; fake]`` in one pass, batch-norm statistics from the real half."""
        n = veg.shape[0]
        for bn in self.d.batchnorms():
            bn.reference_rows = n
        try:
            return self.d.forward(np.concatenate([veg, veg]), np.concatenate([bare, fake]))
        finally:
            for bn in self.d.batchnorms():
                bn.reference_rows = None

    def discriminator_step(self, veg, bare):
        g, d = self.g, self.d
        n = veg.shape[0]
        # the generator output is a constant here: no backward into g
        fake = g.forward(veg)
        d.zero_grad()
        scores = self._joint_scores(veg, bare, fake)
        real_scores, fake_scores = scores[:n], scores[n:]
        dlogits = np.concatenate([
            nn.bce_logit_grad(real_scores, np.ones_like(real_scores)),
            nn.bce_logit_grad(fake_scores, np.zeros_like(fake_scores)),
        ])
        d.backward_logits(dlogits)
        loss_real, loss_fake, _ = d_loss(real_scores, fake_scores)
        self.opt_d.step()
        return loss_real, loss_fake, float(real_scores.mean()), float(fake_scores.mean())

    def generator_step(self, veg, bare):
        g, d, cfg = self.g, self.d, self.cfg
        n = veg.shape[0]
        g.zero_grad()
        fake = g.forward(veg)
        scores = self._joint_scores(veg, bare, fake)
        fake_scores = scores[n:]
        dlogits = np.zeros_like(scores)
        dlogits[n:] = nn.bce_logit_grad(fake_scores, np.ones_like(fake_scores))
        # input gradient only: d's parameter grads stay untouched
        _, dbare = d.backward_logits(dlogits, accumulate=False)
        dfake = dbare[n:]
        if cfg.l1_weight > 0:
            dfake = dfake + cfg.l1_weight * np.sign(fake - bare) / fake.size
        g.backward(dfake)
        loss = g_loss(fake_scores, fake, bare, cfg.l1_weight)
        self.opt_g.step()
        return loss

    def step(self, veg, bare) -> GanStepResult:
        for _ in range(self.cfg.d_steps_per_g_step):
            lr_, lf, rm, fm = self.discriminator_step(veg, bare)
        lg = self.generator_step(veg, bare)
        return GanStepResult(lr_, lf, lg, rm, fm)


def pairs_to_arrays(pairs) -> tuple[np.ndarray, np.ndarray]:
    veg = np.array([p.veg for p in pairs], dtype=np.float64)
    bare = np.array([p.bare_target for p in pairs], dtype=np.float64)
    return veg, bare


def train(pairs, cfg: GanTrainConfig | None = None, n_bands: int | None = None,
          blocks=DEFAULT_BLOCKS, hidden: int = 64, progress=None):
    """Alternating adversarial training on paired spectra.

    ``pairs`` is a sequence of records with ``veg`` and ``bare_target``
    reflectance vectors (or a tuple of two arrays). Returns
    ``(generator, discriminator, history)``; both networks come back in
    inference mode.
    """
    cfg = cfg or GanTrainConfig()
    cfg.validate()
    if isinstance(pairs, tuple):
        veg, bare = (np.asarray(a, dtype=np.float64) for a in pairs)
    else:
        veg, bare = pairs_to_arrays(pairs)
    if veg.ndim != 2 or veg.shape != bare.shape:
        raise ConfigError(f"paired spectra must have matching 2-D shapes, got {veg.shape}, {bare.shape}")
    n_bands = n_bands or veg.shape[1]
    if cfg.epochs > 0 and veg.shape[0] < cfg.batch_size:
        raise ConfigError(f"need at least batch_size={cfg.batch_size} pairs, got {veg.shape[0]}")

    root = np.random.SeedSequence(cfg.seed)
    g_seq, d_seq, shuffle_seq = root.spawn(3)
    g = GeneratorNet(n_bands, hidden, blocks, seed=int(g_seq.generate_state(1)[0]))
    d = DiscriminatorNet(n_bands, seed=int(d_seq.generate_state(1)[0]))
    shuffle_rng = np.random.default_rng(shuffle_seq)

    veg_n = normalize_reflectance(veg)
    bare_n = normalize_reflectance(bare)
    trainer = GanTrainer(g, d, cfg)
    history: list[GanLossReport] = []
    n = veg_n.shape[0]
    for epoch in range(cfg.epochs):
        g.train()
        d.train()
        order = shuffle_rng.permutation(n)
        sums = np.zeros(5)
        batches = 0
        for b, start in enumerate(range(0, n, cfg.batch_size)):
            idx = order[start:start + cfg.batch_size]
            if idx.size < 2:
                continue
            r = trainer.step(veg_n[idx], bare_n[idx])
            vals = np.array([r.loss_d_real, r.loss_d_fake, r.loss_g, r.d_real_mean, r.d_fake_mean])
            if not np.all(np.isfinite(vals)):
                raise TrainingError(f"non-finite loss at epoch {epoch} batch {b}")
            sums += vals
            batches += 1
        m = sums / max(batches, 1)
        history.append(GanLossReport(epoch, m[0], m[1], m[0] + m[1], m[2], m[3], m[4]))
        if progress is not None:
            progress(history[-1])
    g.eval()
    d.eval()
    return g, d, history


def reconstruct(g: GeneratorNet, bands, chunk: int = 4096) -> np.ndarray:
    """Corrected reflectance ``denormalize(G(normalize(b)))`` for each row."""
    if g.training:
        raise ConfigError("reconstruct needs the generator in inference mode")
    arr = np.asarray(bands, dtype=np.float64)
    single = arr.ndim == 1
    arr = np.atleast_2d(arr)
    out = np.empty_like(arr)
    for s in range(0, arr.shape[0], chunk):
        out[s:s + chunk] = denormalize_reflectance(g.forward(normalize_reflectance(arr[s:s + chunk])))
    out = np.clip(out, 0.0, 1.0)
    return out[0] if single else out


# -- weights files -----------------------------------------------------------

def _fmt(values) -> str:
    return " ".join(format(float(v), ".17g") for v in np.asarray(values).reshape(-1))


def dumps_weights(net: nn.Module, role: str | None = None) -> str:
    role = role or net.kind
    buf = io.StringIO()
    buf.write(f"{WEIGHTS_MAGIC} {WEIGHTS_VERSION} {role} {net.n_bands}\n")
    buf.write(f"arch {net.arch()}\n")
    buf.write(f"mode {'training' if net.training else 'inference'}\n")
    for name, m in net.named_modules():
        tensors = {**m.params, **m.buffers}
        if not tensors:
            continue
        buf.write(f"layer {name} {m.kind}\n")
        for key, arr in tensors.items():
            buf.write(f"tensor {key} {' '.join(str(s) for s in arr.shape)}\n")
            if arr.ndim == 2:
                for row in arr:
                    buf.write(_fmt(row) + "\n")
            else:
                buf.write(_fmt(arr) + "\n")
    return buf.getvalue()


def save_weights(net: nn.Module, path, role: str | None = None) -> None:
    Path(path).write_text(dumps_weights(net, role))


def _parse_arch(tokens: list[str]) -> dict:
    out = {}
    for tok in tokens:
        key, _, val = tok.partition("=")
        out[key] = val
    return out


def loads_weights(text: str, n_bands: int | None = None, role: str | None = None):
    lines = text.splitlines()
    head = lines[0].split() if lines else []
    if len(head) != 4 or head[0] != WEIGHTS_MAGIC:
        raise ConfigError("not a reflectgan weights file")
    if head[1] != WEIGHTS_VERSION:
        raise ConfigError(f"unsupported weights version {head[1]!r}")
    file_role, file_bands = head[2], int(head[3])
    if role is not None and file_role != role:
        raise ConfigError(f"weights file holds a {file_role}, expected {role}")
    if n_bands is not None and file_bands != n_bands:
        raise ConfigError(f"weights file is for {file_bands} bands, expected {n_bands}")
    arch = _parse_arch(lines[1].split()[1:])
    if file_role == "generator":
        blocks = tuple(tuple(int(v) for v in b.split("x")) for b in arch["blocks"].split(","))
        net = GeneratorNet(file_bands, int(arch["hidden"]), blocks)
    elif file_role == "discriminator":
        widths = tuple(int(w) for w in arch["widths"].split(","))
        net = DiscriminatorNet(file_bands, widths, float(arch["dropout"]))
    else:
        raise ConfigError(f"unknown network role {file_role!r}")
    mode = lines[2].split()[1]
    modules = dict(net.named_modules())
    pos = 3
    current = None
    while pos < len(lines):
        parts = lines[pos].split()
        pos += 1
        if not parts:
            continue
        if parts[0] == "layer":
            current = modules.get(parts[1])
            if current is None or current.kind != parts[2]:
                raise ConfigError(f"unexpected layer {parts[1]} ({parts[2]}) in weights file")
        elif parts[0] == "tensor":
            key, shape = parts[1], tuple(int(s) for s in parts[2:])
            store = current.params if key in current.params else current.buffers
            if key not in store or store[key].shape != shape:
                raise ConfigError(f"shape mismatch for {key}: file {shape}")
            rows = shape[0] if len(shape) == 2 else 1
            vals = " ".join(lines[pos:pos + rows]).split()
            pos += rows
            arr = np.array([float(v) for v in vals], dtype=np.float64).reshape(shape)
            store[key][...] = arr
        else:
            raise ConfigError(f"malformed weights line {pos}: {lines[pos - 1][:40]!r}")
    net.train(mode == "training")
    return net


def load_weights(path, n_bands: int | None = None, role: str | None = None):
    return loads_weights(Path(path).read_text(), n_bands, role)
