"""The outer texture attack loop: SGD with clamping and checkpoints.

Every random draw comes from a stream seeded by (seed, epoch, iteration),
so reruns are bitwise reproducible and resume() continues an interrupted
run on exactly the trajectory an uninterrupted run would have taken.
"""

from __future__ import annotations

import copy
import hashlib
import json
import math
import time
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np

from . import diffcore as dc
from . import losses as ls
from .attention import averaged_attention_batch, random_specs
from .scene import Mesh, Texture

TEXTURE_INIT_MODES = ("random_uniform", "constant_gray")


class AttackError(Exception):
    pass


@dataclass
class AttackConfig:
    seed: int
    model_path: str = ""
    weights: ls.LossWeights = field(default_factory=ls.LossWeights)
    attention_items: str = "fas+baa"
    p_transforms: int = 3
    q_base: int = 3
    batch_size: int = 2
    epochs: int = 5
    learning_rate: float = 0.01
    momentum: float = 0.0
    texture_init: str = "random_uniform"
    checkpoint_interval: int = 100
    image_size: int = 128
    palette_path: str = ""

    def __post_init__(self):
        if self.batch_size < 1:
            raise AttackError("batch size must be at least 1")
        if self.learning_rate <= 0:
            raise AttackError("learning rate must be positive")
        if self.texture_init not in TEXTURE_INIT_MODES:
            raise AttackError(f"texture init mode must be one of {TEXTURE_INIT_MODES}")
        if self.p_transforms < 0 or self.q_base < 1:
            raise AttackError("transform counts must be non-negative (p) and positive (q)")


def replace_config(cfg: AttackConfig) -> AttackConfig:
    return copy.deepcopy(cfg)


def config_hash(cfg: AttackConfig) -> str:
    payload = json.dumps(asdict(cfg), sort_keys=True)
    return hashlib.sha256(payload.encode("utf-8")).hexdigest()


@dataclass
class AttackRun:
    log: list  # one scalar breakdown dict per executed iteration
    checkpoints: list
    wall_times: list  # seconds per iteration; kept out of summaries
    final_texture: Texture
    config: AttackConfig


def init_texture(mesh: Mesh, mode: str, seed: int) -> Texture:
    """Paintable-face colors: uniform random channels or constant gray."""
    n = mesh.n_sampled
    if mode == "random_uniform":
        rng = np.random.default_rng(np.random.SeedSequence([913, seed]))
        return Texture(rng.uniform(size=(n, 3)))
    if mode == "constant_gray":
        return Texture(np.full((n, 3), 0.5))
    raise AttackError(f"texture init mode must be one of {TEXTURE_INIT_MODES}")


def _iter_rng(seed: int, epoch: int, iteration: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([seed, epoch, iteration, 7]))


def _epoch_order(seed: int, epoch: int, n: int) -> np.ndarray:
    return np.random.default_rng(np.random.SeedSequence([seed, epoch, 11])).permutation(n)


def _save_checkpoint(path, texture, velocity, epoch, iteration, cfg_hash, seed):
    np.savez_compressed(
        path,
        texture=texture.values,
        velocity=velocity,
        epoch=np.int64(epoch),
        iteration=np.int64(iteration),
        config_hash=np.array(cfg_hash),
        seed=np.int64(seed),
    )


def load_checkpoint(path) -> dict:
    with np.load(path, allow_pickle=False) as data:
        return {
            "texture": data["texture"].copy(),
            "velocity": data["velocity"].copy(),
            "epoch": int(data["epoch"]),
            "iteration": int(data["iteration"]),
            "config_hash": str(data["config_hash"]),
            "seed": int(data["seed"]),
        }


def attack(
    cfg: AttackConfig,
    mesh: Mesh,
    scenes,
    model,
    out_dir,
    palette: ls.PrintablePalette | None = None,
    start_texture: Texture | None = None,
    start_iteration: int = 0,
    start_velocity: np.ndarray | None = None,
) -> AttackRun:
    """Optimize the texture against a white-box model over the scene set.

    Per batch: rebuild the scene images from the current texture, form the
    transform-averaged attention stacks, take the combined loss, and step
    the texture with clamping to [0, 1]. A checkpoint lands after every
    epoch and every checkpoint_interval iterations.
    """
    if not scenes:
        raise AttackError("attack: empty scene dataset")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    if palette is None:
        palette = ls.load_palette(cfg.palette_path) if cfg.palette_path else ls.default_palette()

    texture = start_texture.copy() if start_texture else init_texture(mesh, cfg.texture_init, cfg.seed)
    velocity = (
        start_velocity.copy() if start_velocity is not None else np.zeros_like(texture.values)
    )
    cfg_hash = config_hash(cfg)
    n = len(scenes)
    per_epoch = math.ceil(n / cfg.batch_size)
    size = scenes[0].pose.image_size

    log = []
    checkpoints = []
    wall = []
    global_it = 0
    for epoch in range(cfg.epochs):
        order = _epoch_order(cfg.seed, epoch, n)
        executed_in_epoch = 0
        for bi, start in enumerate(range(0, n, cfg.batch_size)):
            if global_it < start_iteration:
                global_it += 1
                continue
            executed_in_epoch += 1
            t0 = time.perf_counter()
            batch = [scenes[i] for i in order[start : start + cfg.batch_size]]
            rng = _iter_rng(cfg.seed, epoch, bi)
            specs_list = [random_specs(cfg.p_transforms, cfg.q_base, size, rng) for _ in batch]
            want_norms = cfg.checkpoint_interval > 0 and (global_it + 1) % cfg.checkpoint_interval == 0
            with dc.Tape() as tape:
                leaf = dc.Tensor(texture.values, requires_grad=True)
                stacks = averaged_attention_batch(model, batch, leaf, specs_list)
                breakdowns = [
                    ls.total_loss(stack, leaf, mesh, palette, cfg.weights, cfg.attention_items)
                    for stack in stacks
                ]
                total = breakdowns[0].total
                for b in breakdowns[1:]:
                    total = dc.add(total, b.total)
                total = dc.mul(total, dc.Tensor(np.float64(1.0 / len(breakdowns))))
                norms = None
                if want_norms:
                    norms = _batch_grad_norms(tape, breakdowns, leaf)
                (grad,) = tape.grad(total, [leaf])
            total_val = total.item()
            if not np.isfinite(total_val) or not np.all(np.isfinite(grad.data)):
                dump = out_dir / f"diagnostic_iter{global_it}.npz"
                np.savez_compressed(
                    dump,
                    texture=texture.values,
                    scene_indices=order[start : start + cfg.batch_size],
                    loss=np.float64(total_val),
                    grad=grad.data,
                )
                raise AttackError(f"non-finite loss at iteration {global_it}; dump at {dump}")
            if cfg.momentum > 0:
                velocity = cfg.momentum * velocity + grad.data
                step = velocity
            else:
                step = grad.data
            texture.values = np.clip(texture.values - cfg.learning_rate * step, 0.0, 1.0)
            row = {
                "iteration": global_it,
                "epoch": epoch,
                "l_fas": float(np.mean([b.l_fas for b in breakdowns])),
                "l_baa": float(np.mean([b.l_baa for b in breakdowns])),
                "l_s3d": float(np.mean([b.l_s3d for b in breakdowns])),
                "l_nps": float(np.mean([b.l_nps for b in breakdowns])),
                "l_total": total_val,
                "grad_norm": float(np.linalg.norm(grad.data)),
            }
            if norms:
                row.update({f"grad_norm_{k}": v for k, v in norms.items()})
            log.append(row)
            wall.append(time.perf_counter() - t0)
            global_it += 1
            if cfg.checkpoint_interval > 0 and global_it % cfg.checkpoint_interval == 0:
                path = out_dir / f"checkpoint_iter{global_it}.npz"
                _save_checkpoint(path, texture, velocity, epoch, global_it, cfg_hash, cfg.seed)
                checkpoints.append(str(path))
        if executed_in_epoch:
            path = out_dir / f"checkpoint_epoch{epoch}.npz"
            _save_checkpoint(path, texture, velocity, epoch, global_it, cfg_hash, cfg.seed)
            checkpoints.append(str(path))
    return AttackRun(log=log, checkpoints=checkpoints, wall_times=wall, final_texture=texture, config=cfg)


def _batch_grad_norms(tape, breakdowns, leaf):
    """Mean per-term gradient norms across the batch, by extra backwards."""
    out = {}
    for name in ("fas", "baa", "s3d", "nps"):
        term = breakdowns[0].terms[name]
        for b in breakdowns[1:]:
            term = dc.add(term, b.terms[name])
        if term.requires_grad:
            (g,) = tape.grad(term, [leaf])
            out[name] = float(np.linalg.norm(g.data)) / len(breakdowns)
        else:
            out[name] = 0.0
    return out


def resume(checkpoint_path, cfg: AttackConfig, mesh: Mesh, scenes, model, out_dir,
           palette: ls.PrintablePalette | None = None) -> AttackRun:
    """Continue from a checkpoint on the identical trajectory.

    The stored config hash must match; resuming with an altered config is
    an error. Resuming from a final checkpoint is a no-op run.
    """
    state = load_checkpoint(checkpoint_path)
    if state["config_hash"] != config_hash(cfg):
        raise AttackError("config hash mismatch: checkpoint belongs to a different configuration")
    return attack(
        cfg,
        mesh,
        scenes,
        model,
        out_dir,
        palette=palette,
        start_texture=Texture(state["texture"]),
        start_iteration=state["iteration"],
        start_velocity=state["velocity"],
    )
