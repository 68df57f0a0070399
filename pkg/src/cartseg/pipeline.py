"""Dataset generation, training, tiled inference and the end-to-end experiment."""
from __future__ import annotations

import json
import logging
import math
import time
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path
from typing import Callable

import numpy as np

from . import data as D
from .config import RunConfig
from .diffcore import Tensor
from .losses import tversky_index, tversky_loss
from .metrics import aggregate_detail, evaluate
from .optim import AMSGrad
from .postproc import binarize, keep_largest, label_components
from .vnet import VNet, load_checkpoint, save_checkpoint

log = logging.getLogger(__name__)

MANIFEST = "manifest.json"


class TrainingError(RuntimeError):
    pass


def stream(seed: int, *keys: int) -> np.random.Generator:
    """Independent generator for a (seed, purpose, ...) key."""
    return np.random.default_rng(np.random.SeedSequence([seed, *keys]))


def _map(fn, items, workers: int):
    if workers <= 1:
        return [fn(i) for i in items]
    with ThreadPoolExecutor(workers) as pool:
        return list(pool.map(fn, items))


class JsonlLog:
    """Line-oriented structured records, mirrored to a file when given a path."""

    def __init__(self, path=None, echo: Callable[[str], None] | None = None):
        self.path = Path(path) if path else None
        self.echo = echo
        self.records: list[dict] = []
        if self.path:
            self.path.write_text("")

    def __call__(self, event: str, **fields) -> None:
        rec = {"event": event, **fields}
        self.records.append(rec)
        line = json.dumps(rec, sort_keys=True)
        if self.path:
            with self.path.open("a") as fh:
                fh.write(line + "\n")
        if self.echo:
            self.echo(line)


# --- gen -----------------------------------------------------------------


def volume_seed(seed: int, index: int) -> int:
    return int(np.random.SeedSequence([seed, 100, index]).generate_state(1)[0])


def generate_dataset(config: RunConfig, out_dir) -> dict:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    n = config.n_volumes
    subjects = [f"s{i:03d}" for i in range(n)]
    splits = D.split_volumes(subjects, config.fractions, seed=config.seed)
    split_of = {i: name for name, idx in splits.items() for i in idx}

    def make(i):
        pc = config.phantom(volume_seed(config.seed, i))
        image, truth = D.generate_phantom(pc)
        img_name, tru_name = f"vol{i:03d}_image.vvol", f"vol{i:03d}_truth.vvol"
        D.write_volume(image, out / img_name)
        D.write_volume(truth, out / tru_name)
        return {
            "index": i,
            "subject": subjects[i],
            "split": split_of[i],
            "seed": pc.seed,
            "image": img_name,
            "truth": tru_name,
            "positive_fraction": float(truth.voxels.mean()),
        }

    entries = _map(make, range(n), config.workers)
    manifest = {
        "seed": config.seed,
        "config": config.to_dict(),
        "splits": {k: len(v) for k, v in splits.items()},
        "volumes": entries,
    }
    (out / MANIFEST).write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return manifest


def load_manifest(data_dir) -> dict:
    path = Path(data_dir) / MANIFEST
    if not path.exists():
        raise FileNotFoundError(f"no dataset manifest at {path}")
    return json.loads(path.read_text())


def load_split(data_dir, split: str) -> list[tuple[dict, D.Volume, D.Volume]]:
    data_dir = Path(data_dir)
    out = []
    for e in load_manifest(data_dir)["volumes"]:
        if e["split"] == split:
            out.append((e, D.read_volume(data_dir / e["image"]), D.read_volume(data_dir / e["truth"])))
    return out


# --- train ---------------------------------------------------------------


def _stack(patches: list[D.Patch], dtype) -> tuple[np.ndarray, np.ndarray]:
    x = np.stack([p.image for p in patches])[:, None].astype(dtype)
    y = np.stack([p.truth for p in patches])[:, None].astype(dtype)
    return x, y


def _draw(config: RunConfig, volumes, keys, augment: bool) -> list[D.Patch]:
    def one(j):
        _, img, tru = volumes[j]
        return D.sample_training_patches(
            img, tru,
            count=config.patches_per_volume,
            patch_size=config.patch_size,
            positive_ratio=config.positive_ratio,
            rng=np.random.SeedSequence([config.seed, *keys, j]),
            augment=augment,
            axis=config.rotation_axis,
        )

    return [p for chunk in _map(one, range(len(volumes)), config.workers) for p in chunk]


def validation_index(net: VNet, patches: list[D.Patch], config: RunConfig) -> float:
    params = config.tversky()
    vals = []
    for p in patches:
        x, y = _stack([p], np.float32)
        vals.append(tversky_index(Tensor(net.predict(x)), y, params).item())
    return float(np.mean(vals)) if vals else math.nan


def train(config: RunConfig, data_dir, out_dir, logger: JsonlLog | None = None, train_split="train") -> dict:
    """Train from scratch; writes ``best.ckpt`` (by validation Tversky index),
    ``final.ckpt`` and ``train_log.jsonl`` into ``out_dir``."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    logger = logger or JsonlLog(out / "train_log.jsonl")
    train_vols = load_split(data_dir, train_split)
    val_vols = load_split(data_dir, "val")
    if not train_vols:
        raise TrainingError(f"dataset {data_dir} has no {train_split!r} volumes")
    net = VNet.build(config.network(), stream(config.seed, 0))
    opt = AMSGrad(net.params, config.optimizer())
    opt.zero_grads()
    tparams = config.tversky()
    val_patches = _draw(config, val_vols, (4,), augment=False) if val_vols else []
    logger("start", parameters=net.parameter_count(), train_volumes=len(train_vols),
           val_volumes=len(val_vols), config=config.to_dict())

    def epoch_batches(e: int):
        sample_epoch = e if config.resample_each_epoch else 1
        patches = _draw(config, train_vols, (1, sample_epoch), config.augment_rotations)
        order = stream(config.seed, 2, e).permutation(len(patches))
        bs = config.batch_size
        return [[patches[i] for i in order[k : k + bs]] for k in range(0, len(order), bs)]

    # epoch 0: the untrained network's loss on the first epoch's batches
    drop0 = stream(config.seed, 3, 0)
    losses0 = [tversky_loss(net.forward(Tensor(x), True, drop0), y, tparams).item()
               for x, y in (_stack(b, np.float32) for b in epoch_batches(1))]
    val0 = validation_index(net, val_patches, config)
    logger("epoch", epoch=0, train_loss=float(np.mean(losses0)), val_tversky=val0, seconds=0.0)

    best = -math.inf
    history = [{"epoch": 0, "train_loss": float(np.mean(losses0)), "val_tversky": val0}]
    for e in range(1, config.epochs + 1):
        t0 = time.time()
        drop = stream(config.seed, 3, e)
        losses = []
        for b, batch in enumerate(epoch_batches(e)):
            x, y = _stack(batch, np.float32)
            loss = tversky_loss(net.forward(Tensor(x), True, drop), y, tparams)
            if not np.isfinite(loss.data):
                raise TrainingError(f"non-finite loss at epoch {e} batch {b}")
            loss.backward()
            opt.step()
            losses.append(loss.item())
        val = validation_index(net, val_patches, config)
        rec = {"epoch": e, "train_loss": float(np.mean(losses)), "val_tversky": val}
        history.append(rec)
        logger("epoch", seconds=round(time.time() - t0, 2), **rec)
        if val_patches and val > best:
            best = val
            save_checkpoint(out / "best.ckpt", net, opt, {"epoch": e, "val_tversky": val})
    save_checkpoint(out / "final.ckpt", net, opt, {"epoch": config.epochs})
    if not (out / "best.ckpt").exists():
        save_checkpoint(out / "best.ckpt", net, opt, {"epoch": config.epochs})
    logger("done", best_val_tversky=best if best > -math.inf else None)
    return {"history": history, "best_val_tversky": best}


# --- predict -------------------------------------------------------------


def predict_volume(net: VNet, image: D.Volume, workers: int = 1) -> np.ndarray:
    """Probability map from disjoint tiles, one tile per forward pass."""
    size = net.config.input_patch_size
    tiles = D.extract_tiles(image, size)

    def run(tile: D.Patch) -> D.Patch:
        prob = net.predict(tile.image[None, None])[0, 0]
        return D.Patch(tile.spec, prob)

    return D.stitch(_map(run, tiles, workers), image.dims, dtype=np.float32)


def load_model(checkpoint, patch_size: int | None = None) -> VNet:
    net, _, _ = load_checkpoint(checkpoint)
    if patch_size is not None and patch_size != net.config.input_patch_size:
        raise ValueError(
            f"checkpoint patch size {net.config.input_patch_size} does not match configured {patch_size}"
        )
    return net


# --- overlay -------------------------------------------------------------

OVERLAY_COLOURS = {1: (255, 0, 0), 2: (0, 0, 255), 3: (255, 255, 0)}  # truth-only, pred-only, both


def overlay_codes(truth, pred) -> np.ndarray:
    """0 neither, 1 truth only, 2 prediction only, 3 both."""
    t = np.asarray(truth).astype(bool)
    p = np.asarray(pred).astype(bool)
    return (t.astype(np.uint8) + 2 * p.astype(np.uint8)).astype(np.uint8)


def overlay_slices(image: np.ndarray, codes: np.ndarray, axis: int = 0) -> list[np.ndarray]:
    """RGB uint8 slices along ``axis`` (default x: sagittal slices)."""
    img = np.asarray(image, dtype=np.float64)
    lo, hi = np.percentile(img, 1), np.percentile(img, 99)
    gray = np.clip((img - lo) / max(hi - lo, 1e-12), 0, 1) * 255
    rgb = np.repeat(gray[..., None], 3, axis=-1).astype(np.uint8)
    for code, colour in OVERLAY_COLOURS.items():
        rgb[codes == code] = colour
    return [np.ascontiguousarray(np.moveaxis(rgb, axis, 0)[i]) for i in range(rgb.shape[axis])]


# --- experiment ----------------------------------------------------------


def run_experiment(config: RunConfig, workdir, echo=None) -> dict:
    """gen -> train -> predict -> keep-k -> eval on the test split."""
    workdir = Path(workdir)
    t0 = time.time()
    data_dir, run_dir = workdir / "data", workdir / "run"
    generate_dataset(config, data_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    logger = JsonlLog(run_dir / "train_log.jsonl", echo)
    result = train(config, data_dir, run_dir, logger)
    net = load_model(run_dir / "best.ckpt", config.patch_size)
    raw_reports, post_reports = [], []
    manifest = load_manifest(data_dir)
    fractions = [e["positive_fraction"] for e in manifest["volumes"]]
    for entry, image, truth in load_split(data_dir, "test"):
        prob = predict_volume(net, image, config.workers)
        raw = binarize(prob, config.threshold)
        post = keep_largest(label_components(raw, config.connectivity), config.keep)
        raw_reports.append(evaluate(raw, truth, f"vol{entry['index']:03d}"))
        post_reports.append(evaluate(post, truth, f"vol{entry['index']:03d}"))
    summary = {
        "n_test": len(post_reports),
        "positive_fraction_mean": float(np.mean(fractions)),
        "raw": [r.as_dict() for r in raw_reports],
        "post": [r.as_dict() for r in post_reports],
        "raw_macro": aggregate_detail(raw_reports, "macro").report.as_dict(),
        "post_macro": aggregate_detail(post_reports, "macro").report.as_dict(),
        "post_micro": aggregate_detail(post_reports, "micro").report.as_dict(),
        "history": result["history"],
        "seconds": round(time.time() - t0, 1),
    }
    (workdir / "experiment.json").write_text(json.dumps(summary, indent=2) + "\n")
    return summary
