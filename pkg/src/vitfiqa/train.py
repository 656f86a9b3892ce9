"""AdamW with polynomial learning-rate decay, the training loop, and
binary checkpoint persistence.

Checkpoint layout: magic "VFIQ", one format-version byte, a length-prefixed
key=value config block, parameter records, optimizer records, and a 64-bit
checksum over all tensor payloads. Tensor payloads round-trip bit-exactly.
"""

import csv
import os
import struct
from dataclasses import dataclass, field

import numpy as np

from . import data as datamod
from . import heads
from . import tensor as T
from . import vit

CKPT_MAGIC = b"VFIQ"
CKPT_VERSION = 1


class FormatError(ValueError):
    """Checkpoint file is corrupt or has an unsupported version."""


@dataclass
class Schedule:
    base_lr: float = 1e-3
    total_steps: int = 1000
    power: float = 1.0
    warmup_steps: int = 0

    def __post_init__(self):
        if self.total_steps <= 0 or self.power <= 0 or not (0 <= self.warmup_steps < self.total_steps):
            raise ValueError(f"invalid schedule {self}")


def lr_at(step, schedule):
    """Linear warmup then polynomial decay to zero at total_steps."""
    if step >= schedule.total_steps:
        return 0.0
    if step < schedule.warmup_steps:
        return schedule.base_lr * step / schedule.warmup_steps
    frac = (step - schedule.warmup_steps) / (schedule.total_steps - schedule.warmup_steps)
    return schedule.base_lr * (1.0 - frac) ** schedule.power


@dataclass
class OptimState:
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    t: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.05


def adamw_step(params, state, lr, frozen=()):
    """One decoupled-weight-decay Adam update over all named parameters.

    Weight decay shrinks parameters first, then the bias-corrected moment
    update is applied. Parameters listed in `frozen` are skipped.
    """
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    corr1 = 1.0 - b1 ** state.t
    corr2 = 1.0 - b2 ** state.t
    for name, p in params.items():
        if name in frozen:
            continue
        if p.grad is None:
            raise T.ContractError(f"adamw_step: missing gradient for parameter {name}")
        g = p.grad.astype(np.float64)
        if name not in state.m:
            state.m[name] = np.zeros_like(g)
            state.v[name] = np.zeros_like(g)
        theta = p.data.astype(np.float64)
        theta *= 1.0 - lr * state.weight_decay
        state.m[name] = b1 * state.m[name] + (1.0 - b1) * g
        state.v[name] = b2 * state.v[name] + (1.0 - b2) * g * g
        m_hat = state.m[name] / corr1
        v_hat = state.v[name] / corr2
        theta -= lr * m_hat / (np.sqrt(v_hat) + state.eps)
        p.data = theta.astype(p.data.dtype)


# ---------------------------------------------------------------------------
# checkpoints


def _write_record(f, name, arr):
    payload = arr.tobytes()
    f.write(struct.pack("<I", len(name)))
    f.write(name.encode())
    f.write(struct.pack("<B", arr.ndim))
    for extent in arr.shape:
        f.write(struct.pack("<I", extent))
    f.write(struct.pack("<B", arr.dtype.itemsize))
    f.write(payload)
    return sum(payload) & 0xFFFFFFFFFFFFFFFF


def _read_record(f):
    raw = f.read(4)
    if not raw:
        return None
    (nlen,) = struct.unpack("<I", raw)
    name = f.read(nlen).decode()
    (rank,) = struct.unpack("<B", f.read(1))
    shape = tuple(struct.unpack("<I", f.read(4))[0] for _ in range(rank))
    (width,) = struct.unpack("<B", f.read(1))
    dtype = {4: np.dtype("<f4"), 8: np.dtype("<f8")}.get(width)
    if dtype is None:
        raise FormatError(f"unsupported element width {width} in record {name!r}")
    count = int(np.prod(shape)) if shape else 1
    payload = f.read(count * width)
    if len(payload) != count * width:
        raise FormatError(f"truncated payload in record {name!r}")
    arr = np.frombuffer(payload, dtype=dtype).reshape(shape).copy()
    return name, arr, sum(payload) & 0xFFFFFFFFFFFFFFFF


def checkpoint_save(path, params, config_map, optim_state=None, step=0):
    """Write parameters (and optionally optimizer state) to a checkpoint."""
    config_map = dict(config_map)
    config_map["step"] = str(step)
    blob = "\n".join(f"{k}={v}" for k, v in sorted(config_map.items())).encode()
    checksum = 0
    with open(path, "wb") as f:
        f.write(CKPT_MAGIC)
        f.write(struct.pack("<B", CKPT_VERSION))
        f.write(struct.pack("<I", len(blob)))
        f.write(blob)
        f.write(struct.pack("<I", len(params)))
        for name in sorted(params):
            checksum = (checksum + _write_record(f, name, params[name].data)) & 0xFFFFFFFFFFFFFFFF
        opt_records = []
        if optim_state is not None:
            for name in sorted(optim_state.m):
                opt_records.append(("m." + name, optim_state.m[name]))
                opt_records.append(("v." + name, optim_state.v[name]))
            opt_records.append(("t", np.array([float(optim_state.t)])))
        f.write(struct.pack("<I", len(opt_records)))
        for name, arr in opt_records:
            checksum = (checksum + _write_record(f, name, arr)) & 0xFFFFFFFFFFFFFFFF
        f.write(struct.pack("<Q", checksum))


def checkpoint_load(path):
    """Read a checkpoint; returns (params, config_map, optim_state, step)."""
    if not os.path.exists(path):
        raise IOError(f"checkpoint not found: {path}")
    with open(path, "rb") as f:
        if f.read(4) != CKPT_MAGIC:
            raise FormatError(f"bad checkpoint magic in {path}")
        (version,) = struct.unpack("<B", f.read(1))
        if version != CKPT_VERSION:
            raise FormatError(f"unsupported checkpoint version {version}, expected {CKPT_VERSION}")
        (blen,) = struct.unpack("<I", f.read(4))
        config_map = {}
        for line in f.read(blen).decode().splitlines():
            key, _, value = line.partition("=")
            config_map[key] = value
        checksum = 0
        (nparams,) = struct.unpack("<I", f.read(4))
        params = {}
        for _ in range(nparams):
            name, arr, c = _read_record(f)
            params[name] = T.parameter(arr, dtype=arr.dtype, name=name)
            checksum = (checksum + c) & 0xFFFFFFFFFFFFFFFF
        (nopt,) = struct.unpack("<I", f.read(4))
        optim_state = None
        opt_raw = {}
        for _ in range(nopt):
            name, arr, c = _read_record(f)
            opt_raw[name] = arr
            checksum = (checksum + c) & 0xFFFFFFFFFFFFFFFF
        raw = f.read(8)
        if len(raw) != 8:
            raise FormatError(f"missing checksum in {path}")
        (stored,) = struct.unpack("<Q", raw)
        if stored != checksum:
            raise FormatError(f"checksum mismatch in {path}: stored {stored}, computed {checksum}")
    if opt_raw:
        optim_state = OptimState()
        optim_state.t = int(opt_raw.pop("t")[0])
        for name, arr in opt_raw.items():
            kind, _, pname = name.partition(".")
            getattr(optim_state, kind)[pname] = arr
    step = int(config_map.pop("step", "0"))
    return params, config_map, optim_state, step


# ---------------------------------------------------------------------------
# training loop


@dataclass
class TrainResult:
    params: dict
    optim_state: OptimState
    metrics: list  # rows of (step, loss, l_fr, l_fiq, lr, mean_qhat)


def write_metrics(path, metrics):
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["step", "loss", "l_fr", "l_fiq", "lr", "mean_qhat"])
        for row in metrics:
            w.writerow([row[0]] + [repr(float(x)) for x in row[1:]])


def train(manifest, config, variant, loss_cfg, schedule, optim_hp=None,
          batch_size=32, seed=0, augment_spec=None, params=None,
          checkpoint_path=None, checkpoint_every=0, config_map=None,
          log_every=10, clip_norm=None):
    """Seeded training loop: shuffle, forward, backward, AdamW step.

    Aborts on a non-finite loss, keeping the last saved checkpoint intact.
    Returns the trained parameters, optimizer state, and the metrics log.
    """
    entries = manifest.entries
    if not entries:
        raise T.ContractError("train: empty manifest")
    num_classes = manifest.num_identities
    if num_classes < 2:
        raise heads.ConfigurationError("train: need at least 2 identities")
    if params is None:
        params = heads.init_model_params(config, variant, num_classes, seed)
    state = OptimState(**(optim_hp or {}))
    frozen = () if config.pos0_trainable or variant != "T" else ()
    rng = np.random.default_rng(seed)
    metrics = []
    order = np.arange(len(entries))
    pos = len(entries)  # force reshuffle on first batch
    epoch = -1
    for step in range(schedule.total_steps):
        if pos + batch_size > len(entries):
            epoch += 1
            order = rng.permutation(len(entries))
            pos = 0
        idx = order[pos:pos + batch_size]
        pos += batch_size
        batch = datamod.load_batch([entries[i] for i in idx], augment_spec,
                                   seed=seed, split=manifest.split, epoch=epoch)
        for p in params.values():
            p.zero_grad()
        with T.Tape() as tape:
            out = heads.total_loss(batch, params, config, variant, loss_cfg)
            T.backward(out.loss, tape)
        loss_val = out.loss.item()
        if not np.isfinite(loss_val):
            raise ArithmeticError(f"non-finite loss {loss_val} at step {step}")
        if clip_norm is not None:
            total = np.sqrt(sum(float((p.grad ** 2).sum())
                                for p in params.values() if p.grad is not None))
            if total > clip_norm:
                for p in params.values():
                    if p.grad is not None:
                        p.grad *= clip_norm / total
        lr = lr_at(step, schedule)
        adamw_step(params, state, lr, frozen=frozen)
        if variant == "T" and not config.pos0_trainable:
            params["pos_table"].data[0] = 0.0
        if step % log_every == 0 or step == schedule.total_steps - 1:
            metrics.append((step, loss_val, out.l_fr.item(), out.l_fiq.item(),
                            lr, float(out.qhat.mean())))
        if checkpoint_path and checkpoint_every and (step + 1) % checkpoint_every == 0:
            checkpoint_save(checkpoint_path, params, config_map or {}, state, step + 1)
    if checkpoint_path:
        checkpoint_save(checkpoint_path, params, config_map or {}, state, schedule.total_steps)
    return TrainResult(params=params, optim_state=state, metrics=metrics)
