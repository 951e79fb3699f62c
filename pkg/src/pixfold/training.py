"""Adversarial training: logistic losses, lazy R1, Adam, checkpoints and a deterministic loop."""

from __future__ import annotations

import io
import json
import logging
import math
import struct
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable

import numpy as np

from .config import RunConfig, TrainConfig, config_digest, sub_rng
from .data import Dataset, FeatureExtractor, build_dataset, make_grid, proxy_frechet, save_png
from .discriminator import Discriminator
from .generator import Generator
from .nn import Module, Parameter
from .tensor import NonFiniteError, Tensor, backward, default_dtype, grad, no_grad, softplus

__all__ = [
    "g_loss",
    "d_loss",
    "r1_penalty",
    "adam_step",
    "Adam",
    "TrainingAborted",
    "CheckpointError",
    "write_records",
    "read_records",
    "save_checkpoint",
    "load_checkpoint",
    "Trainer",
    "load_generator",
]

log = logging.getLogger(__name__)


# -- losses ---------------------------------------------------------------------


def g_loss(fake_logits) -> Tensor:
    """Non-saturating generator loss: mean softplus(-D(G(z)))."""
    return softplus(-fake_logits).mean()


def d_loss(real_logits, fake_logits) -> Tensor:
    """Logistic discriminator loss: mean softplus(-D(x)) + mean softplus(D(G(z)))."""
    return softplus(-real_logits).mean() + softplus(fake_logits).mean()


def r1_penalty(disc: Callable[[Tensor], Tensor], real_images, gamma: float) -> Tensor:
    """(gamma/2) * batch mean of ||dD/dx||^2 at real samples, differentiable w.r.t. D's parameters."""
    if isinstance(real_images, Tensor):
        if not real_images.requires_grad:
            raise ValueError("r1_penalty: real images must require gradients")
        x = real_images
    else:
        x = Tensor(np.asarray(real_images), requires_grad=True)
    logits = disc(x)
    if not logits.requires_grad:
        # D is constant in x, so its gradient is identically zero
        return Tensor(np.zeros((), dtype=x.dtype))
    (gx,) = grad(logits.sum(), [x], create_graph=True)
    sq = (gx * gx).sum(axis=tuple(range(1, gx.ndim)))
    return sq.mean() * (0.5 * gamma)


# -- optimizer ------------------------------------------------------------------


def adam_step(param: np.ndarray, g: np.ndarray, m: np.ndarray, v: np.ndarray, t: int,
              lr: float, beta0: float, beta1: float, eps: float = 1e-8):
    """One bias-corrected Adam update; returns new (param, m, v). ``t`` counts from 1."""
    dt = param.dtype.type
    m = dt(beta0) * m + dt(1 - beta0) * g
    v = dt(beta1) * v + dt(1 - beta1) * (g * g)
    m_hat = m / dt(1 - beta0 ** t)
    v_hat = v / dt(1 - beta1 ** t)
    return param - dt(lr) * m_hat / (np.sqrt(v_hat) + dt(eps)), m, v


class Adam:
    """Adam over a named parameter set; parameters without a grad are skipped."""

    def __init__(self, named_params: Iterable[tuple[str, Parameter]], cfg: TrainConfig):
        self.params = dict(named_params)
        self.lr, self.beta0, self.beta1, self.eps = cfg.lr, cfg.beta0, cfg.beta1, cfg.adam_eps
        self.m = {k: np.zeros_like(p.data) for k, p in self.params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in self.params.items()}
        self.t = 0

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def step(self) -> None:
        self.t += 1
        for k, p in self.params.items():
            if p.grad is None:
                continue
            p.data, self.m[k], self.v[k] = adam_step(
                p.data, p.grad.astype(p.dtype, copy=False), self.m[k], self.v[k], self.t,
                self.lr, self.beta0, self.beta1, self.eps,
            )
        self.zero_grad()


def _grad_norm(params: Iterable[Parameter]) -> float:
    total = 0.0
    for p in params:
        if p.grad is not None:
            total += float(np.sum(np.square(p.grad, dtype=np.float64)))
    return math.sqrt(total)


# -- checkpoint file -------------------------------------------------------------
#
# layout (all integers little-endian):
#   magic b"PIXFOLD\x00" | u32 version | 32-byte sha256 config digest | u32 record count
#   per record: u32 name length | utf-8 name | u8 dtype length | dtype str (numpy, e.g. "<f4")
#               | u32 ndim | ndim x u64 shape | u64 byte count | raw little-endian data

MAGIC = b"PIXFOLD\x00"
VERSION = 1


class CheckpointError(ValueError):
    pass


def write_records(fh, records: dict[str, np.ndarray], digest_hex: str) -> None:
    fh.write(MAGIC)
    fh.write(struct.pack("<I", VERSION))
    fh.write(bytes.fromhex(digest_hex))
    fh.write(struct.pack("<I", len(records)))
    for name, arr in records.items():
        arr = np.asarray(arr)
        arr = arr.astype(arr.dtype.newbyteorder("<"), copy=False)
        raw_name = name.encode()
        dtype = arr.dtype.str.encode()
        fh.write(struct.pack("<I", len(raw_name)) + raw_name)
        fh.write(struct.pack("<B", len(dtype)) + dtype)
        fh.write(struct.pack("<I", arr.ndim))
        fh.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        data = np.ascontiguousarray(arr).tobytes()
        fh.write(struct.pack("<Q", len(data)))
        fh.write(data)


def _take(buf: memoryview, pos: int, n: int) -> tuple[bytes, int]:
    if pos + n > len(buf):
        raise CheckpointError("checkpoint truncated")
    return bytes(buf[pos : pos + n]), pos + n


def read_records(blob: bytes) -> tuple[str, dict[str, np.ndarray]]:
    buf = memoryview(blob)
    magic, pos = _take(buf, 0, len(MAGIC))
    if magic != MAGIC:
        raise CheckpointError("not a checkpoint file (bad magic)")
    raw, pos = _take(buf, pos, 4)
    (version,) = struct.unpack("<I", raw)
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    digest, pos = _take(buf, pos, 32)
    raw, pos = _take(buf, pos, 4)
    (count,) = struct.unpack("<I", raw)
    records: dict[str, np.ndarray] = {}
    for _ in range(count):
        raw, pos = _take(buf, pos, 4)
        name, pos = _take(buf, pos, struct.unpack("<I", raw)[0])
        raw, pos = _take(buf, pos, 1)
        dtype, pos = _take(buf, pos, raw[0])
        raw, pos = _take(buf, pos, 4)
        ndim = struct.unpack("<I", raw)[0]
        raw, pos = _take(buf, pos, 8 * ndim)
        shape = struct.unpack(f"<{ndim}Q", raw)
        raw, pos = _take(buf, pos, 8)
        data, pos = _take(buf, pos, struct.unpack("<Q", raw)[0])
        arr = np.frombuffer(data, dtype=np.dtype(dtype.decode()))
        if arr.size != int(np.prod(shape)):
            raise CheckpointError(f"record {name!r}: {arr.size} values for shape {shape}")
        records[name.decode()] = arr.reshape(shape).copy()
    if pos != len(buf):
        raise CheckpointError("trailing bytes after last record")
    return digest.hex(), records


def save_checkpoint(path, records: dict[str, np.ndarray], digest_hex: str) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    bio = io.BytesIO()
    write_records(bio, records, digest_hex)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(bio.getvalue())
    tmp.replace(path)


def load_checkpoint(path) -> tuple[str, dict[str, np.ndarray]]:
    path = Path(path)
    if not path.is_file():
        raise CheckpointError(f"checkpoint {path} not found")
    return read_records(path.read_bytes())


def _json_record(obj) -> np.ndarray:
    return np.frombuffer(json.dumps(obj, sort_keys=True).encode(), dtype=np.uint8)


def _json_value(arr: np.ndarray):
    return json.loads(arr.tobytes().decode())


# -- the loop -------------------------------------------------------------------


class TrainingAborted(RuntimeError):
    """A loss or activation became non-finite; a diagnostic snapshot was written."""


@dataclass
class StepMetrics:
    step: int
    d_loss: float
    g_loss: float
    r1: float | None
    d_grad_norm: float
    g_grad_norm: float

    def as_dict(self) -> dict:
        return {k: v for k, v in self.__dict__.items()}


@dataclass
class Trainer:
    """Holds G, D, both optimizers and all RNG streams for one run.

    Streams are derived from the run seed by name (``init.*``, ``train.data``,
    ``train.noise``), so each consumer is independent of the others.
    """

    cfg: RunConfig
    out_dir: Path | None = None
    dataset: Dataset | None = None
    history: list[dict] = field(default_factory=list)

    def __post_init__(self):
        self.cfg.validate()
        tc = self.cfg.train
        self.dtype = tc.dtype
        with default_dtype(self.dtype):
            self.G = Generator(self.cfg.generator, seed=tc.seed)
            self.D = Discriminator(self.cfg.discriminator, seed=tc.seed)
        if self.dataset is None:
            self.dataset = build_dataset(self.cfg.dataset)
        self.g_opt = Adam(self.G.named_parameters(), tc)
        self.d_opt = Adam(self.D.named_parameters(), tc)
        self.data_rng = sub_rng(tc.seed, "train.data")
        self.noise_rng = sub_rng(tc.seed, "train.noise")
        self.ema = {k: p.data.copy() for k, p in self.G.named_parameters()} if tc.ema else None
        self.step = 0
        self.digest = config_digest(self.cfg)
        if self.out_dir is not None:
            self.out_dir = Path(self.out_dir)
            for sub in ("ckpt", "samples", "logs", "reports"):
                (self.out_dir / sub).mkdir(parents=True, exist_ok=True)

    # -- one iteration --
    def _latents(self) -> np.ndarray:
        n, d = self.cfg.train.batch_size, self.cfg.generator.latent_dim
        return self.noise_rng.standard_normal((n, d)).astype(self.dtype)

    def train_step(self) -> StepMetrics:
        tc = self.cfg.train
        step = self.step + 1
        with default_dtype(self.dtype):
            real = Tensor(self.dataset.sample(self.data_rng, tc.batch_size).astype(self.dtype))
            with no_grad():
                fake = self.G(self._latents())
            loss_d = d_loss(self.D(real), self.D(fake))
            backward(loss_d, self.D.parameters())
            d_norm = _grad_norm(self.D.parameters())
            self._check(loss_d, "d_loss", step)
            self.d_opt.step()

            r1_value = None
            if step % tc.r1_every == 0 and tc.r1_gamma > 0:
                # lazy regularization: every r1_every steps, weighted by the interval
                pen = r1_penalty(self.D, real.data, tc.r1_gamma)
                self._check(pen, "r1", step)
                backward(pen * float(tc.r1_every), self.D.parameters())
                self.d_opt.step()
                r1_value = float(pen.data)

            loss_g = g_loss(self.D(self.G(self._latents())))
            backward(loss_g, self.G.parameters())
            g_norm = _grad_norm(self.G.parameters())
            self._check(loss_g, "g_loss", step)
            self.g_opt.step()
            self.D.zero_grad()
            if self.ema is not None:
                b = tc.ema_beta
                for k, p in self.G.named_parameters():
                    self.ema[k] = b * self.ema[k] + (1 - b) * p.data
        self.step = step
        return StepMetrics(step, float(loss_d.data), float(loss_g.data), r1_value, d_norm, g_norm)

    def _check(self, loss: Tensor, what: str, step: int) -> None:
        if not np.isfinite(loss.data).all():
            raise NonFiniteError(f"{what} is non-finite at step {step}")

    # -- checkpointing --
    def state_records(self) -> dict[str, np.ndarray]:
        rec: dict[str, np.ndarray] = {}
        for k, p in self.G.named_parameters():
            rec[f"G.{k}"] = p.data
        for k, p in self.D.named_parameters():
            rec[f"D.{k}"] = p.data
        for tag, opt in (("G", self.g_opt), ("D", self.d_opt)):
            rec[f"opt.{tag}.t"] = np.array(opt.t, dtype=np.int64)
            for k in opt.params:
                rec[f"opt.{tag}.m.{k}"] = opt.m[k]
                rec[f"opt.{tag}.v.{k}"] = opt.v[k]
        if self.ema is not None:
            for k, arr in self.ema.items():
                rec[f"ema.{k}"] = arr
        rec["state.step"] = np.array(self.step, dtype=np.int64)
        rec["state.seed"] = np.array(self.cfg.train.seed, dtype=np.int64)
        rec["meta.rng.data"] = _json_record(self.data_rng.bit_generator.state)
        rec["meta.rng.noise"] = _json_record(self.noise_rng.bit_generator.state)
        rec["meta.config"] = _json_record(self.cfg.to_dict())
        return rec

    def save(self, path) -> Path:
        path = Path(path)
        save_checkpoint(path, self.state_records(), self.digest)
        return path

    def load_state(self, records: dict[str, np.ndarray], digest: str) -> None:
        if digest != self.digest:
            raise CheckpointError("checkpoint config digest does not match this run's config")
        self.G.load_state_dict({k[2:]: v for k, v in records.items() if k.startswith("G.")})
        self.D.load_state_dict({k[2:]: v for k, v in records.items() if k.startswith("D.")})
        for tag, opt in (("G", self.g_opt), ("D", self.d_opt)):
            opt.t = int(records[f"opt.{tag}.t"])
            for k in opt.params:
                opt.m[k] = records[f"opt.{tag}.m.{k}"].copy()
                opt.v[k] = records[f"opt.{tag}.v.{k}"].copy()
        if self.ema is not None:
            self.ema = {k: records[f"ema.{k}"].copy() for k in self.ema}
        self.step = int(records["state.step"])
        self.data_rng.bit_generator.state = _json_value(records["meta.rng.data"])
        self.noise_rng.bit_generator.state = _json_value(records["meta.rng.noise"])

    @classmethod
    def from_checkpoint(cls, path, out_dir=None, dataset: Dataset | None = None) -> "Trainer":
        digest, records = load_checkpoint(path)
        cfg = RunConfig.from_dict(_json_value(records["meta.config"]))
        trainer = cls(cfg, out_dir=out_dir, dataset=dataset)
        trainer.load_state(records, digest)
        return trainer

    # -- evaluation and samples --
    def sampling_generator(self) -> Generator:
        """G itself, or a copy carrying the EMA weights when EMA is on."""
        if self.ema is None:
            return self.G
        with default_dtype(self.dtype):
            g = Generator(self.cfg.generator, seed=self.cfg.train.seed)
        g.load_state_dict(self.ema)
        return g

    def generate(self, count: int, stream: str = "eval.z", batch: int = 64) -> np.ndarray:
        rng = sub_rng(self.cfg.train.seed, stream)
        z = rng.standard_normal((count, self.cfg.generator.latent_dim)).astype(self.dtype)
        gen = self.sampling_generator()
        out = []
        with default_dtype(self.dtype), no_grad():
            for s in range(0, count, batch):
                out.append(gen(z[s : s + batch]).data)
        return np.concatenate(out, axis=0)

    def proxy_fid(self, count: int | None = None) -> float:
        count = count or self.cfg.proxy_fid_samples
        real = self.dataset.images[: min(count, len(self.dataset))]
        return proxy_frechet(real, self.generate(count), FeatureExtractor(seed=self.cfg.train.seed))

    def write_samples(self, tag: str, count: int = 16) -> Path:
        path = self.out_dir / "samples" / f"{tag}.png"
        save_png(path, make_grid(self.generate(count, stream="train.sample_z")))
        return path

    # -- main loop --
    def _snapshot(self, step: int, exc: Exception) -> Path | None:
        if self.out_dir is None:
            return None
        norms = {k: float(np.sqrt(np.sum(np.square(p.data, dtype=np.float64))))
                 for k, p in list(self.G.named_parameters()) + list(self.D.named_parameters())}
        report = {
            "step": step,
            "error": str(exc),
            "last_metrics": self.history[-5:],
            "param_norms": norms,
            "nonfinite_params": [k for k, p in list(self.G.named_parameters()) + list(self.D.named_parameters())
                                 if not np.isfinite(p.data).all()],
        }
        path = self.out_dir / "reports" / f"nan_abort_step{step:06d}.json"
        path.write_text(json.dumps(report, indent=2))
        return path

    def run(self, steps: int | None = None, progress_every: int = 50) -> list[dict]:
        """Train until ``steps`` total steps; checkpoint at start, every ``ckpt_every`` and at the end."""
        tc = self.cfg.train
        target = tc.steps if steps is None else steps
        log_path = self.out_dir / "logs" / "metrics.jsonl" if self.out_dir else None
        ckpt_dir = self.out_dir / "ckpt" if self.out_dir else None
        if ckpt_dir is not None and self.step == 0:
            self.save(ckpt_dir / f"step_{0:06d}.ckpt")
        t0 = time.perf_counter()
        while self.step < target:
            try:
                metrics = self.train_step()
            except NonFiniteError as exc:
                snap = self._snapshot(self.step + 1, exc)
                raise TrainingAborted(f"non-finite value at step {self.step + 1}: {exc}; snapshot: {snap}") from exc
            row = metrics.as_dict()
            self.history.append(row)
            if log_path is not None and (metrics.step % tc.log_every == 0):
                with log_path.open("a") as fh:
                    fh.write(json.dumps(row, sort_keys=True) + "\n")
            if ckpt_dir is not None and tc.ckpt_every and metrics.step % tc.ckpt_every == 0:
                self.save(ckpt_dir / f"step_{metrics.step:06d}.ckpt")
            if self.out_dir is not None and tc.sample_every and metrics.step % tc.sample_every == 0:
                self.write_samples(f"step_{metrics.step:06d}")
            if progress_every and metrics.step % progress_every == 0:
                log.info("step %d  d_loss %.4f  g_loss %.4f  (%.2fs/step)", metrics.step, metrics.d_loss,
                         metrics.g_loss, (time.perf_counter() - t0) / max(1, len(self.history)))
        if ckpt_dir is not None:
            final = ckpt_dir / f"step_{self.step:06d}.ckpt"
            if not final.exists():
                self.save(final)
        return self.history


def load_generator(path, prefer_ema: bool = True) -> tuple[Generator, RunConfig]:
    """Rebuild the generator stored in a checkpoint (EMA weights when present)."""
    digest, records = load_checkpoint(path)
    try:
        cfg = RunConfig.from_dict(_json_value(records["meta.config"]))
    except KeyError as exc:
        raise CheckpointError(f"checkpoint {path} has no embedded config") from exc
    if config_digest(cfg) != digest:
        raise CheckpointError(f"checkpoint {path}: embedded config does not match its digest")
    prefix = "ema." if prefer_ema and any(k.startswith("ema.") for k in records) else "G."
    with default_dtype(cfg.train.dtype):
        gen = Generator(cfg.generator, seed=cfg.train.seed)
    gen.load_state_dict({k[len(prefix):]: v for k, v in records.items() if k.startswith(prefix)})
    return gen, cfg
