"""Pretraining loop: views, loss, SGD, momentum update, bank enqueue, checkpoints."""
from __future__ import annotations

import io
import json
import logging
import math
import time
import warnings
import zipfile
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .augment import strong_augment, weak_augment
from .bank import RepresentationBank
from .config import TrainConfig
from .data import Dataset
from .encoder import EncoderPair, init_pair
from .losses import ViewEmbeddings, total_loss

log = logging.getLogger(__name__)

CHECKPOINT_FORMAT = 1


class CheckpointError(RuntimeError):
    pass


@dataclass
class TrainState:
    cfg: TrainConfig
    pair: EncoderPair
    bank: RepresentationBank
    optimizer: torch.optim.Optimizer
    step: int = 0
    epoch: int = 0
    total_steps: int = 0
    history: list = field(default_factory=list)


def lr_at(step: int, total_steps: int, cfg: TrainConfig) -> float:
    """Cosine decay from ``base_lr * batch_size / 256`` to zero."""
    if total_steps <= 0:
        return cfg.lr
    if not 0 <= step <= total_steps:
        raise ValueError(f"step {step} outside [0, {total_steps}]")
    if step == total_steps:
        return 0.0
    return cfg.lr * 0.5 * (1.0 + math.cos(math.pi * step / total_steps))


def _param_groups(pair: EncoderPair, cfg: TrainConfig):
    params = [p for p in pair.query.parameters() if p.requires_grad]
    if not cfg.exempt_norm_bias:
        return [{"params": params, "weight_decay": cfg.weight_decay}]
    decay = [p for p in params if p.ndim > 1]
    no_decay = [p for p in params if p.ndim <= 1]
    return [
        {"params": decay, "weight_decay": cfg.weight_decay},
        {"params": no_decay, "weight_decay": 0.0},
    ]


def init_state(cfg: TrainConfig) -> TrainState:
    pair = init_pair(cfg.seed, cfg.arch, cfg.key_momentum)
    bank = RepresentationBank(cfg.bank_size, cfg.arch.embed_dim, seed=cfg.seed + 1)
    opt = torch.optim.SGD(_param_groups(pair, cfg), lr=cfg.lr, momentum=cfg.sgd_momentum)
    return TrainState(cfg=cfg, pair=pair, bank=bank, optimizer=opt)


# --------------------------------------------------------------------------
# Views


@dataclass
class BatchViews:
    query: np.ndarray
    key: np.ndarray
    strong: list[np.ndarray]
    strong_key: np.ndarray | None = None


def _sample_views(image, cfg: TrainConfig, seed_key, with_strong: bool, with_strong_key: bool):
    rng = np.random.default_rng(seed_key)
    q = weak_augment(image, cfg.weak, rng)
    k = weak_augment(image, cfg.weak, rng)
    strong = []
    if with_strong:
        strong = [strong_augment(image, cfg.strong, size, rng) for size in cfg.strong.crop_sizes]
    skey = strong_augment(image, cfg.strong, cfg.strong.crop_sizes[0], rng) if with_strong_key else None
    return q, k, strong, skey


def make_views(images, cfg: TrainConfig, step: int, pool: ThreadPoolExecutor | None = None) -> BatchViews:
    """Augment a raw batch; sample ``i`` of step ``s`` always uses seed ``(seed, s, i)``.

    Weak views are drawn before strong ones from the same per-sample stream,
    so every ablation mode sees identical weak views for a given seed.
    """
    mode = cfg.loss.mode
    with_strong = mode != "baseline"
    with_skey = mode == "strong_query_and_key"
    jobs = [((cfg.seed, step, i), img) for i, img in enumerate(images)]
    fn = lambda job: _sample_views(job[1], cfg, job[0], with_strong, with_skey)  # noqa: E731
    results = list(pool.map(fn, jobs)) if pool is not None else [fn(j) for j in jobs]
    n_crops = len(cfg.strong.crop_sizes) if with_strong else 0
    return BatchViews(
        query=np.stack([r[0] for r in results]),
        key=np.stack([r[1] for r in results]),
        strong=[np.stack([r[2][c] for r in results]) for c in range(n_crops)],
        strong_key=np.stack([r[3] for r in results]) if with_skey else None,
    )


# --------------------------------------------------------------------------
# One optimisation step


def train_step(state: TrainState, raw_batch, pool: ThreadPoolExecutor | None = None) -> dict:
    """Run one step on ``raw_batch`` (a list of uint8 images) and return its metrics.

    Order: views, query/key embeddings, loss against the pre-step bank
    snapshot, SGD on the query encoder, momentum update of the key encoder,
    enqueue of the keys.
    """
    cfg = state.cfg
    mode = cfg.loss.mode
    t0 = time.perf_counter()
    views = make_views(raw_batch, cfg, state.step, pool)

    pair = state.pair
    pair.train()
    strong_only = mode in ("strong_query_contrastive", "strong_query_and_key")
    z_query = None if strong_only else pair.encode_query(views.query)
    z_strong = [pair.encode_query(v) for v in views.strong]
    z_key = pair.encode_key(views.key)
    z_skey = pair.encode_key(views.strong_key) if views.strong_key is not None else None
    if z_query is None:
        z_query = z_key  # unused by the strong-query modes
    bank_snapshot = state.bank.snapshot()

    loss, diag = total_loss(ViewEmbeddings(z_query, z_key, z_strong, z_skey), bank_snapshot, cfg.loss)
    if not torch.isfinite(loss):
        raise FloatingPointError(
            f"non-finite loss {loss.item()} at step {state.step} "
            f"(augmentation seed key ({cfg.seed}, {state.step}, i)); diagnostics: {diag}"
        )

    lr = lr_at(state.step, state.total_steps, cfg)
    for group in state.optimizer.param_groups:
        group["lr"] = lr
    state.optimizer.zero_grad(set_to_none=True)
    loss.backward()
    state.optimizer.step()
    pair.momentum_update()
    state.bank.enqueue(z_skey if mode == "strong_query_and_key" else z_key)

    record = {
        "step": state.step,
        "epoch": state.epoch,
        "lr": lr,
        "loss": diag["loss_total"],
        "loss_contrastive": diag["loss_contrastive"],
        "loss_ddm": diag["loss_ddm"],
        "p_pos_mean": diag.get("p_pos_mean"),
        "p_pos_strong_mean": diag.get("p_pos_strong_mean"),
        "wall_time": time.perf_counter() - t0,
    }
    state.step += 1
    state.history.append(record)
    return record


# --------------------------------------------------------------------------
# Checkpoints


def _state_payload(state: TrainState) -> dict:
    return {
        "format": CHECKPOINT_FORMAT,
        "config": state.cfg.to_dict(),
        "config_hash": state.cfg.hash(),
        "epoch": state.epoch,
        "step": state.step,
        "total_steps": state.total_steps,
        "query": state.pair.query.state_dict(),
        "key": state.pair.key.state_dict(),
        "optimizer": state.optimizer.state_dict(),
        "bank": state.bank.state_dict(),
        "rng": {"torch": torch.get_rng_state()},
        "history": json.dumps(state.history),
    }


_ZIP_TIME = (1980, 1, 1, 0, 0, 0)


def _encode(obj, tensors: dict):
    """Replace tensors by references so the rest serialises as canonical JSON."""
    if torch.is_tensor(obj):
        name = f"t{len(tensors):05d}"
        tensors[name] = obj.detach().cpu()
        return {"__tensor__": name}
    if isinstance(obj, dict):
        if all(isinstance(k, str) for k in obj):
            return {k: _encode(v, tensors) for k, v in obj.items()}
        return {"__items__": [[k, _encode(v, tensors)] for k, v in obj.items()]}
    if isinstance(obj, (list, tuple)):
        return [_encode(v, tensors) for v in obj]
    return obj


def _decode(obj, tensors: dict):
    if isinstance(obj, dict):
        if "__tensor__" in obj:
            return tensors[obj["__tensor__"]]
        if "__items__" in obj:
            return {k: _decode(v, tensors) for k, v in obj["__items__"]}
        return {k: _decode(v, tensors) for k, v in obj.items()}
    if isinstance(obj, list):
        return [_decode(v, tensors) for v in obj]
    return obj


def _zip_entry(zf: zipfile.ZipFile, name: str, data: bytes) -> None:
    info = zipfile.ZipInfo(name, date_time=_ZIP_TIME)
    info.external_attr = 0o644 << 16
    zf.writestr(info, data)


def save_checkpoint(state: TrainState, path) -> Path:
    """Write a single-file archive; identical states produce identical bytes."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tensors: dict = {}
    meta = json.dumps(_encode(_state_payload(state), tensors), sort_keys=True).encode()
    buf = io.BytesIO()
    with zipfile.ZipFile(buf, "w", zipfile.ZIP_STORED) as zf:
        _zip_entry(zf, "meta.json", meta)
        for name, tensor in tensors.items():
            arr = io.BytesIO()
            np.save(arr, tensor.numpy(), allow_pickle=False)
            _zip_entry(zf, f"tensors/{name}.npy", arr.getvalue())
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(buf.getvalue())
    tmp.replace(path)
    return path


def _read_archive(path: Path) -> dict:
    with zipfile.ZipFile(path) as zf:
        tensors = {}
        for name in zf.namelist():
            if name.startswith("tensors/"):
                arr = np.load(io.BytesIO(zf.read(name)), allow_pickle=False)
                tensors[name[len("tensors/"):-len(".npy")]] = torch.from_numpy(arr)
        return _decode(json.loads(zf.read("meta.json")), tensors)


def load_checkpoint(path, cfg: TrainConfig | None = None) -> TrainState:
    """Restore a :class:`TrainState`.

    If ``cfg`` is given and differs from the stored configuration, a warning
    is emitted and ``cfg`` governs the restored run (the architecture and
    bank shape must still match).
    """
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    try:
        payload = _read_archive(path)
        stored_cfg = TrainConfig.from_dict(payload["config"])
    except (OSError, EOFError, zipfile.BadZipFile, KeyError, ValueError, TypeError) as exc:
        raise CheckpointError(f"corrupt checkpoint: {path} ({exc})") from exc
    if payload.get("format") != CHECKPOINT_FORMAT:
        raise CheckpointError(f"corrupt checkpoint: {path} (unknown format {payload.get('format')})")

    if cfg is not None and cfg.hash() != payload["config_hash"]:
        warnings.warn(
            f"config hash mismatch for {path}: checkpoint {payload['config_hash']}, "
            f"current {cfg.hash()}; continuing with the current config",
            stacklevel=2,
        )
    cfg = cfg or stored_cfg
    state = init_state(cfg)
    try:
        state.pair.query.load_state_dict(payload["query"])
        state.pair.key.load_state_dict(payload["key"])
        state.optimizer.load_state_dict(payload["optimizer"])
        state.bank.load_state_dict(payload["bank"])
    except (RuntimeError, ValueError) as exc:
        raise CheckpointError(f"checkpoint {path} does not match the configured model: {exc}") from exc
    torch.set_rng_state(payload["rng"]["torch"])
    state.epoch = payload["epoch"]
    state.step = payload["step"]
    state.total_steps = payload["total_steps"]
    state.history = json.loads(payload["history"])
    return state


def checkpoint_path(out_dir, epoch: int) -> Path:
    return Path(out_dir) / f"checkpoint_epoch{epoch:04d}.pt"


# --------------------------------------------------------------------------
# Full run


def steps_per_epoch(cfg: TrainConfig, dataset: Dataset) -> int:
    return len(dataset) // cfg.batch_size


def epoch_order(cfg: TrainConfig, epoch: int, n: int) -> np.ndarray:
    return np.random.default_rng([cfg.seed, epoch, 0x5EED]).permutation(n)


def pretrain(
    cfg: TrainConfig,
    dataset: Dataset,
    out_dir,
    resume=None,
    max_steps: int | None = None,
    log_every: int = 0,
) -> TrainState:
    """Train for ``cfg.epochs`` epochs and return the final state.

    Per-step records go to ``out_dir/metrics.jsonl`` together with one
    aggregate record per epoch. A checkpoint is written every
    ``cfg.checkpoint_every`` epochs and at the end. ``max_steps`` stops early
    (without a final checkpoint), which simulates an interrupted run.
    """
    if len(dataset) == 0:
        raise ValueError("dataset is empty")
    per_epoch = steps_per_epoch(cfg, dataset)
    if per_epoch == 0:
        raise ValueError(f"dataset of {len(dataset)} images is smaller than batch_size {cfg.batch_size}")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    state = load_checkpoint(resume, cfg) if resume else init_state(cfg)
    state.total_steps = cfg.epochs * per_epoch
    if state.step == 0:
        counts = state.pair.num_parameters()
        log.info("parameters: %s", counts)

    metrics_path = out_dir / "metrics.jsonl"
    pool = ThreadPoolExecutor(cfg.num_workers) if cfg.num_workers > 0 else None
    done = 0
    try:
        with metrics_path.open("a") as fh:
            while state.epoch < cfg.epochs:
                epoch = state.epoch
                order = epoch_order(cfg, epoch, len(dataset))
                first = state.step - epoch * per_epoch
                for b in range(first, per_epoch):
                    if max_steps is not None and done >= max_steps:
                        return state
                    idx = order[b * cfg.batch_size:(b + 1) * cfg.batch_size]
                    rec = train_step(state, [dataset.images[i] for i in idx], pool)
                    fh.write(json.dumps({"type": "step", **rec}) + "\n")
                    done += 1
                    if log_every and rec["step"] % log_every == 0:
                        log.info("step %d loss %.4f L_C %.4f lr %.4g", rec["step"], rec["loss"],
                                 rec["loss_contrastive"], rec["lr"])
                recs = [r for r in state.history if r["epoch"] == epoch]
                summary = {
                    "type": "epoch",
                    "epoch": epoch,
                    "steps": len(recs),
                    "loss": float(np.mean([r["loss"] for r in recs])) if recs else None,
                    "loss_contrastive": float(np.mean([r["loss_contrastive"] for r in recs])) if recs else None,
                    "loss_ddm": float(np.mean([sum(r["loss_ddm"]) for r in recs])) if recs else None,
                }
                fh.write(json.dumps(summary) + "\n")
                fh.flush()
                state.epoch = epoch + 1
                if cfg.checkpoint_every and state.epoch % cfg.checkpoint_every == 0:
                    save_checkpoint(state, checkpoint_path(out_dir, state.epoch))
    finally:
        if pool is not None:
            pool.shutdown()
    save_checkpoint(state, checkpoint_path(out_dir, state.epoch))
    return state
