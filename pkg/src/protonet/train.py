"""Minibatch SGD/Adam training with augmentation, checkpointing and metrics.

Shuffles and augmentation seeds are pure functions of (seed, epoch, batch),
so a resumed run replays exactly the same stream as an uninterrupted one.
"""

import json
import os
import struct
import time
from dataclasses import dataclass, field

import numpy as np

from protonet import model as M
from protonet.augment import ElasticParams, elastic_deform
from protonet.data import BatchStream, Dataset
from protonet.loss import Hyperparams, total_loss
from protonet.model import ModelConfig, NetworkParams

CHECKPOINT_MAGIC = b"PNCK"
CHECKPOINT_VERSION = 1


class CheckpointError(ValueError):
    pass


class CheckpointMagicError(CheckpointError):
    pass


class CheckpointVersionError(CheckpointError):
    pass


class CheckpointShapeError(CheckpointError):
    pass


class NonFiniteGradientError(FloatingPointError):
    pass


@dataclass
class TrainState:
    params: NetworkParams
    cfg: ModelConfig
    step: int = 0
    epoch: int = 0
    rng_seed: int = 0
    best_validation_accuracy: float = 0.0
    optimizer: str = "sgd"
    opt_state: dict = field(default_factory=dict)  # adam moments, keyed by param name


@dataclass
class Metrics:
    """Per-epoch rows: accuracy, loss-term averages, wall-clock seconds."""
    rows: list = field(default_factory=list)

    CSV_HEADER = "epoch,train_acc,val_acc,E,R,R1,R2,L,seconds"

    def add(self, epoch, train_acc, val_acc, e, r, r1, r2, total, seconds):
        self.rows.append(dict(epoch=epoch, train_acc=train_acc, val_acc=val_acc,
                              E=e, R=r, R1=r1, R2=r2, L=total, seconds=seconds))

    def write_csv(self, path):
        with open(path, "w") as f:
            f.write(self.CSV_HEADER + "\n")
            for row in self.rows:
                f.write(",".join(repr(row[k]) if isinstance(row[k], float) else str(row[k])
                                 for k in self.CSV_HEADER.split(",")) + "\n")


# ---- optimizers ------------------------------------------------------------

def _check_finite_grads(params: NetworkParams):
    for name, t in params.learnable().items():
        if t.grad is not None and not np.isfinite(t.grad).all():
            raise NonFiniteGradientError(f"non-finite gradient in {name}")


def sgd_step(state: TrainState, lr: float) -> TrainState:
    """theta <- theta - lr * grad for every learnable tensor (in place)."""
    _check_finite_grads(state.params)
    for t in state.params.learnable().values():
        if t.grad is not None:
            t.data -= lr * t.grad
    state.step += 1
    return state


ADAM_BETA1, ADAM_BETA2, ADAM_EPS = 0.9, 0.999, 1e-8


def adam_step(state: TrainState, lr: float) -> TrainState:
    """Adaptive-moment update; moments live in state.opt_state."""
    _check_finite_grads(state.params)
    state.step += 1
    t = state.step
    for name, p in state.params.learnable().items():
        if p.grad is None:
            continue
        m = state.opt_state.setdefault(f"{name}.m", np.zeros_like(p.data))
        v = state.opt_state.setdefault(f"{name}.v", np.zeros_like(p.data))
        m *= ADAM_BETA1
        m += (1 - ADAM_BETA1) * p.grad
        v *= ADAM_BETA2
        v += (1 - ADAM_BETA2) * p.grad ** 2
        mhat = m / (1 - ADAM_BETA1 ** t)
        vhat = v / (1 - ADAM_BETA2 ** t)
        p.data -= lr * mhat / (np.sqrt(vhat) + ADAM_EPS)
    return state


def optimizer_step(state: TrainState, lr: float) -> TrainState:
    if state.optimizer == "adam":
        return adam_step(state, lr)
    return sgd_step(state, lr)


# ---- evaluation -------------------------------------------------------------

def evaluate(params: NetworkParams, cfg: ModelConfig, d: Dataset,
             batch_size: int = 250) -> float:
    """Fraction of correct predictions over d, without augmentation."""
    correct = 0
    for start in range(0, d.n, batch_size):
        images = d.images[start:start + batch_size]
        correct += int((M.predict(params, cfg, images) ==
                        d.labels[start:start + batch_size]).sum())
    return correct / d.n


# ---- checkpoints ------------------------------------------------------------

def _write_tensor(f, name: str, arr: np.ndarray):
    nb = name.encode()
    f.write(struct.pack("<I", len(nb)))
    f.write(nb)
    f.write(struct.pack("<I", arr.ndim))
    f.write(struct.pack(f"<{arr.ndim}q", *arr.shape))
    f.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())


def _read_tensor(f):
    raw = f.read(4)
    if not raw:
        return None
    name = f.read(struct.unpack("<I", raw)[0]).decode()
    ndim, = struct.unpack("<I", f.read(4))
    shape = struct.unpack(f"<{ndim}q", f.read(8 * ndim)) if ndim else ()
    data = np.frombuffer(f.read(8 * int(np.prod(shape, dtype=np.int64)) if shape else 8),
                         dtype="<f8")
    if shape:
        data = data.reshape(shape)
    else:
        data = data[0]
    return name, np.array(data)


def save_checkpoint(state: TrainState, path) -> None:
    """Self-describing binary: magic, version, JSON header, named f64 tensors."""
    header = {
        "config": M.config_to_dict(state.cfg),
        "step": state.step,
        "epoch": state.epoch,
        "rng_seed": state.rng_seed,
        "best_validation_accuracy": state.best_validation_accuracy,
        "optimizer": state.optimizer,
    }
    hb = json.dumps(header, sort_keys=True).encode()
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack("<I", CHECKPOINT_VERSION))
        f.write(struct.pack("<I", len(hb)))
        f.write(hb)
        for name, t in state.params.named().items():
            _write_tensor(f, f"param/{name}", t.data)
        for name, arr in sorted(state.opt_state.items()):
            _write_tensor(f, f"opt/{name}", np.asarray(arr))


def load_checkpoint(path, cfg: ModelConfig = None) -> TrainState:
    """Rebuild a TrainState; validates magic/version and tensor shapes.

    When cfg is given it must match the stored config echo.
    """
    with open(path, "rb") as f:
        magic = f.read(4)
        if magic != CHECKPOINT_MAGIC:
            raise CheckpointMagicError(f"bad checkpoint magic {magic!r}")
        version, = struct.unpack("<I", f.read(4))
        if version != CHECKPOINT_VERSION:
            raise CheckpointVersionError(f"unsupported checkpoint version {version}")
        hlen, = struct.unpack("<I", f.read(4))
        header = json.loads(f.read(hlen).decode())
        tensors = {}
        while True:
            item = _read_tensor(f)
            if item is None:
                break
            tensors[item[0]] = item[1]

    stored_cfg = M.config_from_dict(header["config"])
    if cfg is not None and M.config_to_dict(cfg) != M.config_to_dict(stored_cfg):
        raise CheckpointShapeError("checkpoint config does not match the requested config")
    params = M.init_params(stored_cfg, seed=header["rng_seed"])
    for name, t in params.named().items():
        key = f"param/{name}"
        if key not in tensors:
            raise CheckpointShapeError(f"checkpoint missing tensor {key}")
        if tensors[key].shape != t.data.shape:
            raise CheckpointShapeError(
                f"{key}: shape {tensors[key].shape} vs expected {t.data.shape}")
        t.data = tensors[key]
    opt_state = {name[len("opt/"):]: arr for name, arr in tensors.items()
                 if name.startswith("opt/")}
    return TrainState(params=params, cfg=stored_cfg, step=header["step"],
                      epoch=header["epoch"], rng_seed=header["rng_seed"],
                      best_validation_accuracy=header["best_validation_accuracy"],
                      optimizer=header["optimizer"], opt_state=opt_state)


# ---- training loop ----------------------------------------------------------

def _augment_seed(seed: int, epoch: int, batch_index: int) -> int:
    return int(np.random.SeedSequence([seed, epoch, batch_index]).generate_state(1)[0])


def train_loop(cfg: ModelConfig, hyper: Hyperparams, train_set: Dataset,
               val_set: Dataset = None, augment: ElasticParams = None,
               seed: int = 0, optimizer: str = "sgd",
               state: TrainState = None, out_dir=None,
               checkpoint_every: int = 25, augment_threads: int = 1,
               snapshot_every: int = 0, log=None) -> tuple:
    """Run (or resume) training for hyper.epochs total epochs.

    Returns (TrainState, Metrics). Validation uses undeformed images; the
    elastic deformation seed for each batch derives from (seed, epoch, batch)
    so interrupted and uninterrupted runs see identical data.
    """
    if state is None:
        state = TrainState(params=M.init_params(cfg, seed), cfg=cfg,
                           rng_seed=seed, optimizer=optimizer)
    else:
        seed = state.rng_seed
    params = state.params
    metrics = Metrics()
    loss_file = None
    if out_dir is not None:
        os.makedirs(out_dir, exist_ok=True)
        loss_path = os.path.join(out_dir, "loss.csv")
        new = not os.path.exists(loss_path)
        loss_file = open(loss_path, "a")
        if new:
            loss_file.write("step,E,R,R1,R2,L\n")

    n_batches = -(-train_set.n // hyper.batch_size)
    try:
        for epoch in range(state.epoch, hyper.epochs):
            t0 = time.perf_counter()
            perm = BatchStream.epoch_permutation(seed, epoch, train_set.n)
            sums = np.zeros(5)
            for b in range(n_batches):
                idx = perm[b * hyper.batch_size:(b + 1) * hyper.batch_size]
                images = train_set.images[idx]
                labels = train_set.labels[idx]
                if augment is not None:
                    images = elastic_deform(
                        images,
                        ElasticParams(augment.sigma, augment.alpha,
                                      _augment_seed(seed, epoch, b)),
                        threads=augment_threads)
                params.zero_grads()
                trace = M.forward(params, cfg, images)
                breakdown, total = total_loss(trace, images, labels,
                                              params.prototypes, hyper,
                                              cfg.autoencoder_enabled)
                total.backward()
                optimizer_step(state, hyper.learning_rate)
                sums += (breakdown.cross_entropy, breakdown.reconstruction,
                         breakdown.proto_to_data, breakdown.data_to_proto,
                         breakdown.total)
                if loss_file is not None:
                    loss_file.write(breakdown.csv_row(state.step) + "\n")
            state.epoch = epoch + 1

            train_acc = evaluate(params, cfg, train_set, hyper.batch_size)
            val_acc = (evaluate(params, cfg, val_set, hyper.batch_size)
                       if val_set is not None else float("nan"))
            avg = sums / n_batches
            seconds = time.perf_counter() - t0
            metrics.add(state.epoch, train_acc, val_acc, *avg, seconds)
            if log is not None:
                log(f"epoch {state.epoch}/{hyper.epochs} "
                    f"train_acc={train_acc:.4f} val_acc={val_acc:.4f} "
                    f"L={avg[4]:.4f} ({seconds:.1f}s)")

            if out_dir is not None:
                if val_set is not None and val_acc >= state.best_validation_accuracy:
                    state.best_validation_accuracy = val_acc
                    save_checkpoint(state, os.path.join(out_dir, "best.ckpt"))
                if checkpoint_every and state.epoch % checkpoint_every == 0:
                    save_checkpoint(state, os.path.join(out_dir, f"epoch{state.epoch:05d}.ckpt"))
                if (snapshot_every and cfg.head_mode == "prototype"
                        and cfg.autoencoder_enabled
                        and state.epoch % snapshot_every == 0):
                    from protonet.explain import export_images
                    snap = os.path.join(out_dir, f"prototypes_epoch{state.epoch:05d}")
                    export_images(M.decode_prototypes(params, cfg), snap, "png")
        if out_dir is not None:
            save_checkpoint(state, os.path.join(out_dir, "final.ckpt"))
            metrics.write_csv(os.path.join(out_dir, "metrics.csv"))
    finally:
        if loss_file is not None:
            loss_file.close()
    return state, metrics
