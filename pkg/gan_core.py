"""
Cycle-consistent translation between the two label domains

Two generators (class 0 -> class 1 and back) are trained on unpaired images
with least-squares adversarial terms and an L1 cycle-consistency term.
"""
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd
import torch
import torch.nn.functional as F
from torch import nn

from data_ingest import Sample
from networks.generators import PatchDiscriminator, ReplayBuffer, ResnetGenerator
from utils.checkpoint import (
    load_module_tensors,
    load_optimizer_tensors,
    module_tensors,
    optimizer_tensors,
    read_container,
    require_kind,
    write_container,
)
from utils.errors import InputError, NonFiniteError, ShapeMismatchError
from utils.logger import logger, timed
from utils.rng import SeedStreams, generator_state, restore_generator
from utils.validators import GanConfig

CHECKPOINT_KIND = "gan"
LOSS_COLUMNS = ("step", "d0_loss", "d1_loss", "g_adv", "g_cyc", "g_total")

ImageBatch = Union[np.ndarray, torch.Tensor]


@dataclass
class GeneratorPair:
    """Both translation generators, both domain discriminators and the step counter"""
    g01: ResnetGenerator
    g10: ResnetGenerator
    d0: PatchDiscriminator
    d1: PatchDiscriminator
    step: int = 0

    @classmethod
    def build(cls, config: GanConfig, seed: int) -> 'GeneratorPair':
        with SeedStreams(seed).torch_global("gan.init"):
            g01 = ResnetGenerator(config.channels, config.resolution,
                                  config.residual_blocks, config.generator_filters)
            g10 = ResnetGenerator(config.channels, config.resolution,
                                  config.residual_blocks, config.generator_filters)
            d0 = PatchDiscriminator(config.channels, config.discriminator_filters, config.discriminator_layers)
            d1 = PatchDiscriminator(config.channels, config.discriminator_filters, config.discriminator_layers)
        return cls(g01, g10, d0, d1)

    def generator_for(self, label: int) -> ResnetGenerator:
        """Generator that turns an image of `label` into the other class"""
        return self.g01 if label == 0 else self.g10

    def modules(self) -> Dict[str, nn.Module]:
        return {"g01": self.g01, "g10": self.g10, "d0": self.d0, "d1": self.d1}


@dataclass
class LossRecord:
    step: int
    d0_loss: float
    d1_loss: float
    g_adv: float
    g_cyc: float
    g_total: float


@dataclass
class GanTrainState:
    """Everything needed to continue training exactly where it stopped"""
    pair: GeneratorPair
    config: GanConfig
    seed: int
    optimizer_g: torch.optim.Optimizer
    optimizer_d0: torch.optim.Optimizer
    optimizer_d1: torch.optim.Optimizer
    replay0: ReplayBuffer
    replay1: ReplayBuffer
    shuffle_rng: np.random.Generator
    history: List[LossRecord] = field(default_factory=list)
    epoch: int = 0
    probe_ids: List[str] = field(default_factory=list)
    probe_initial: Optional[float] = None
    probe_final: Optional[float] = None


# ---------------------------------------------------------------------------
# Inference and losses
# ---------------------------------------------------------------------------

def _to_nchw(batch: ImageBatch) -> torch.Tensor:
    """numpy B x H x W x C -> float32 tensor B x C x H x W; tensors pass through"""
    if isinstance(batch, torch.Tensor):
        return batch
    array = np.asarray(batch, dtype=np.float32)
    if array.ndim != 4:
        raise ShapeMismatchError(f"expected a B x H x W x C batch, got shape {array.shape}")
    return torch.from_numpy(np.ascontiguousarray(array.transpose(0, 3, 1, 2)))


def _check_finite(tensor: torch.Tensor, what: str):
    if not torch.isfinite(tensor).all():
        raise NonFiniteError(f"non-finite values in {what}")


def translate(generator: ResnetGenerator, batch: np.ndarray) -> np.ndarray:
    """Run a generator in inference mode on a B x H x W x C batch in [-1, 1]"""
    array = np.asarray(batch)
    if array.ndim != 4:
        raise ShapeMismatchError(f"expected a B x H x W x C batch, got shape {array.shape}")
    _, height, width, channels = array.shape
    if (height, width) != (generator.resolution, generator.resolution) or channels != generator.channels:
        raise ShapeMismatchError(
            f"batch images are {height}x{width}x{channels}, generator expects "
            f"{generator.resolution}x{generator.resolution}x{generator.channels}"
        )
    if not np.isfinite(array).all():
        raise NonFiniteError("non-finite values in translate input")

    was_training = generator.training
    generator.eval()
    try:
        with torch.no_grad():
            output = generator(_to_nchw(array))
    finally:
        generator.train(was_training)
    _check_finite(output, "generator output")
    return output.numpy().transpose(0, 2, 3, 1).copy()


def cycle_terms(g01: Callable, g10: Callable, batch0: ImageBatch, batch1: ImageBatch) -> Tuple[torch.Tensor, torch.Tensor]:
    """(mean|g10(g01(x0)) - x0|, mean|g01(g10(x1)) - x1|)"""
    x0, x1 = _to_nchw(batch0), _to_nchw(batch1)
    fake1 = g01(x0)
    fake0 = g10(x1)
    _check_finite(fake1, "g01 output")
    _check_finite(fake0, "g10 output")
    rec0 = g10(fake1)
    rec1 = g01(fake0)
    _check_finite(rec0, "class-0 reconstruction")
    _check_finite(rec1, "class-1 reconstruction")
    return F.l1_loss(rec0, x0), F.l1_loss(rec1, x1)


def cycle_loss(g01: Callable, g10: Callable, batch0: ImageBatch, batch1: ImageBatch) -> torch.Tensor:
    """L1 cycle-consistency loss summed over both directions

    Any callables work as generators; numpy batches are B x H x W x C, tensors
    are taken as B x C x H x W.
    """
    forward, backward = cycle_terms(g01, g10, batch0, batch1)
    return forward + backward


def lsgan_d_loss(d_real: torch.Tensor, d_fake: torch.Tensor) -> torch.Tensor:
    return F.mse_loss(d_real, torch.ones_like(d_real)) + F.mse_loss(d_fake, torch.zeros_like(d_fake))


def lsgan_g_loss(d_fake: torch.Tensor) -> torch.Tensor:
    return F.mse_loss(d_fake, torch.ones_like(d_fake))


def adversarial_loss(discriminator: Callable, real_batch: ImageBatch,
                     fake_batch: ImageBatch) -> Tuple[torch.Tensor, torch.Tensor]:
    """Least-squares objective: (mean((D(real)-1)^2) + mean(D(fake)^2), mean((D(fake)-1)^2))"""
    d_real = discriminator(_to_nchw(real_batch))
    d_fake = discriminator(_to_nchw(fake_batch))
    _check_finite(d_real, "discriminator scores on real images")
    _check_finite(d_fake, "discriminator scores on generated images")
    return lsgan_d_loss(d_real, d_fake), lsgan_g_loss(d_fake)


def probe_cycle_loss(pair: GeneratorPair, probe0: ImageBatch, probe1: ImageBatch) -> float:
    with torch.no_grad():
        return float(cycle_loss(pair.g01, pair.g10, probe0, probe1))


# ---------------------------------------------------------------------------
# Training
# ---------------------------------------------------------------------------

@dataclass
class GeneratorLosses:
    fake0: torch.Tensor
    fake1: torch.Tensor
    adv: torch.Tensor
    cyc: torch.Tensor
    total: torch.Tensor


def generator_objective(g01: Callable, g10: Callable, d0: Callable, d1: Callable,
                        real0: torch.Tensor, real1: torch.Tensor, lambda_cyc: float,
                        identity_weight: float = 0.0) -> GeneratorLosses:
    """LSGAN generator terms of both directions plus lambda_cyc times the summed L1 cycle terms

    With identity_weight > 0 the identity term enters weighted by identity_weight * lambda_cyc.
    Inputs are B x C x H x W tensors.
    """
    fake1 = g01(real0)
    fake0 = g10(real1)
    adv = lsgan_g_loss(d1(fake1)) + lsgan_g_loss(d0(fake0))
    cyc = F.l1_loss(g10(fake1), real0) + F.l1_loss(g01(fake0), real1)
    total = adv + lambda_cyc * cyc
    if identity_weight > 0:
        idt = F.l1_loss(g01(real1), real1) + F.l1_loss(g10(real0), real0)
        total = total + identity_weight * lambda_cyc * idt
    return GeneratorLosses(fake0, fake1, adv, cyc, total)


def _make_optimizers(pair: GeneratorPair, config: GanConfig):
    betas = (config.beta1, config.beta2)
    generator_params = list(pair.g01.parameters()) + list(pair.g10.parameters())
    return (
        torch.optim.Adam(generator_params, lr=config.lr, betas=betas),
        torch.optim.Adam(pair.d0.parameters(), lr=config.lr, betas=betas),
        torch.optim.Adam(pair.d1.parameters(), lr=config.lr, betas=betas),
    )


def init_state(config: GanConfig, seed: int) -> GanTrainState:
    """Freshly initialised networks, optimizers, replay buffers and random streams"""
    streams = SeedStreams(seed)
    pair = GeneratorPair.build(config, seed)
    optimizer_g, optimizer_d0, optimizer_d1 = _make_optimizers(pair, config)
    return GanTrainState(
        pair=pair,
        config=config,
        seed=seed,
        optimizer_g=optimizer_g,
        optimizer_d0=optimizer_d0,
        optimizer_d1=optimizer_d1,
        replay0=ReplayBuffer(config.replay_capacity, streams.numpy("gan.replay0")),
        replay1=ReplayBuffer(config.replay_capacity, streams.numpy("gan.replay1")),
        shuffle_rng=streams.numpy("gan.shuffle"),
    )


def lr_factor(epoch: int, epochs: int, decay_start: float) -> float:
    """Constant for the first part of training, then linear decay towards zero"""
    start = int(epochs * decay_start)
    return 1.0 - max(0, epoch - start) / float(epochs - start + 1)


def _set_lr(state: GanTrainState, lr: float):
    for optimizer in (state.optimizer_g, state.optimizer_d0, state.optimizer_d1):
        for group in optimizer.param_groups:
            group["lr"] = lr


def _set_requires_grad(modules: Sequence[nn.Module], flag: bool):
    for module in modules:
        for param in module.parameters():
            param.requires_grad_(flag)


def _stack(samples: Sequence[Sample]) -> torch.Tensor:
    return _to_nchw(np.stack([s.image for s in samples]))


def _train_step(state: GanTrainState, real0: torch.Tensor, real1: torch.Tensor) -> LossRecord:
    pair, config = state.pair, state.config
    step = pair.step + 1

    # Generators
    _set_requires_grad([pair.d0, pair.d1], False)
    state.optimizer_g.zero_grad(set_to_none=True)
    losses_g = generator_objective(pair.g01, pair.g10, pair.d0, pair.d1, real0, real1, config.lambda_cyc,
                                   config.identity_weight if config.identity_loss else 0.0)
    fake0, fake1 = losses_g.fake0, losses_g.fake1
    g_adv, g_cyc, g_total = losses_g.adv, losses_g.cyc, losses_g.total
    if not torch.isfinite(g_total):
        raise NonFiniteError("generator loss is not finite", step=step,
                             components={"g_adv": float(g_adv), "g_cyc": float(g_cyc), "g_total": float(g_total)})
    g_total.backward()
    state.optimizer_g.step()
    _set_requires_grad([pair.d0, pair.d1], True)

    # Discriminators see generated images through the replay buffers
    losses = {}
    for name, disc, optimizer, buffer, real, fake in (
            ("d0_loss", pair.d0, state.optimizer_d0, state.replay0, real0, fake0),
            ("d1_loss", pair.d1, state.optimizer_d1, state.replay1, real1, fake1)):
        optimizer.zero_grad(set_to_none=True)
        pooled = buffer.push_and_pop(fake)
        d_loss = lsgan_d_loss(disc(real), disc(pooled))
        if not torch.isfinite(d_loss):
            raise NonFiniteError("discriminator loss is not finite", step=step,
                                 components={name: float(d_loss), "g_total": float(g_total)})
        (0.5 * d_loss).backward()
        optimizer.step()
        losses[name] = float(d_loss)

    pair.step = step
    return LossRecord(step, losses["d0_loss"], losses["d1_loss"],
                      float(g_adv), float(g_cyc), float(g_total))


def _partition(samples: Sequence[Sample], config: GanConfig) -> Tuple[List[Sample], List[Sample]]:
    train = [s for s in samples if s.split == "train"]
    for sample in train:
        if sample.shape != (config.resolution, config.resolution, config.channels):
            raise ShapeMismatchError(
                f"sample {sample.id} has shape {sample.shape}, GAN expects "
                f"{(config.resolution, config.resolution, config.channels)}"
            )
    domain0 = [s for s in train if s.label == 0]
    domain1 = [s for s in train if s.label == 1]
    for label, domain in ((0, domain0), (1, domain1)):
        if not domain:
            raise InputError(f"class {label} has no training samples; both domains are needed")
    return domain0, domain1


def write_loss_history(history: Sequence[LossRecord], path: Union[str, Path]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    pd.DataFrame([asdict(r) for r in history], columns=list(LOSS_COLUMNS)).to_csv(
        path, index=False, lineterminator="\n", float_format="%.9g")
    return path


@timed("train_gan")
def train_gan(train_samples: Sequence[Sample], config: GanConfig, seed: int,
              state: Optional[GanTrainState] = None, stop_after_epoch: Optional[int] = None,
              checkpoint_dir: Optional[Union[str, Path]] = None) -> GanTrainState:
    """Train (or continue training) the generator pair up to `config.epochs` epochs

    A `state` from a checkpoint resumes; a state trained on another dataset
    fine-tunes when `config.epochs` exceeds its epoch count. `stop_after_epoch`
    ends the run early, as an interruption would.
    """
    domain0, domain1 = _partition(train_samples, config)
    if state is None:
        state = init_state(config, seed)
    else:
        state.config = config

    x0, x1 = _stack(domain0), _stack(domain1)
    probe0, probe1 = domain0[:config.probe_size], domain1[:config.probe_size]
    probe_ids = [s.id for s in probe0 + probe1]
    probe_x0, probe_x1 = _stack(probe0), _stack(probe1)
    if state.probe_initial is None or state.probe_ids != probe_ids:
        state.probe_ids = probe_ids
        state.probe_initial = probe_cycle_loss(state.pair, probe_x0, probe_x1)

    n0, n1, batch = len(domain0), len(domain1), config.batch_size
    steps = math.ceil(max(n0, n1) / batch)
    if config.max_steps_per_epoch is not None:
        steps = min(steps, config.max_steps_per_epoch)
    last_epoch = config.epochs if stop_after_epoch is None else min(config.epochs, stop_after_epoch)

    logger.info("GAN_TRAINING_STARTED", n0=n0, n1=n1, start_epoch=state.epoch, epochs=config.epochs,
                steps_per_epoch=steps, seed=seed, probe_initial=state.probe_initial)

    for pair_module in state.pair.modules().values():
        pair_module.train()

    while state.epoch < last_epoch:
        lr = config.lr * lr_factor(state.epoch, config.epochs, config.decay_start)
        _set_lr(state, lr)
        perm0 = state.shuffle_rng.permutation(n0)
        perm1 = state.shuffle_rng.permutation(n1)
        records = []
        for step in range(steps):
            offsets = np.arange(step * batch, (step + 1) * batch)
            real0 = x0[torch.from_numpy(perm0[offsets % n0])]
            real1 = x1[torch.from_numpy(perm1[offsets % n1])]
            records.append(_train_step(state, real0, real1))
        state.history.extend(records)
        state.epoch += 1

        means = {c: float(np.mean([getattr(r, c) for r in records])) for c in LOSS_COLUMNS[1:]}
        logger.training_progress("gan", state.epoch, config.epochs, step=state.pair.step, lr=lr, **means)

        if checkpoint_dir is not None and state.epoch % config.checkpoint_every == 0:
            save_checkpoint(state, Path(checkpoint_dir) / f"gan_epoch_{state.epoch:04d}.ckpt")

    state.probe_final = probe_cycle_loss(state.pair, probe_x0, probe_x1)
    if state.epoch > 0 and state.probe_final >= state.probe_initial:
        logger.warning("GAN_PROBE_NOT_IMPROVED", probe_initial=state.probe_initial,
                       probe_final=state.probe_final)
    if checkpoint_dir is not None:
        save_checkpoint(state, Path(checkpoint_dir) / "gan_last.ckpt")
        write_loss_history(state.history, Path(checkpoint_dir) / "gan_loss_history.csv")

    logger.info("GAN_TRAINING_FINISHED", epoch=state.epoch, step=state.pair.step,
                probe_initial=state.probe_initial, probe_final=state.probe_final)
    return state


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------

OPTIMIZER_NAMES = ("optimizer_g", "optimizer_d0", "optimizer_d1")


def save_checkpoint(state: GanTrainState, path: Union[str, Path]) -> Path:
    tensors = {}
    for name, module in state.pair.modules().items():
        tensors.update(module_tensors(name, module))
    optimizers = {}
    for name in OPTIMIZER_NAMES:
        opt_tensors, opt_meta = optimizer_tensors(name, getattr(state, name))
        tensors.update(opt_tensors)
        optimizers[name] = opt_meta
    for name in ("replay0", "replay1"):
        stacked = getattr(state, name).state_tensor()
        if stacked is not None:
            tensors[f"{name}.images"] = stacked

    meta = {
        "kind": CHECKPOINT_KIND,
        "config": state.config.model_dump(mode="json"),
        "seed": state.seed,
        "epoch": state.epoch,
        "step": state.pair.step,
        "optimizers": optimizers,
        "rng": {
            "shuffle": generator_state(state.shuffle_rng),
            "replay0": generator_state(state.replay0.rng),
            "replay1": generator_state(state.replay1.rng),
        },
        "history": [asdict(r) for r in state.history],
        "probe_ids": state.probe_ids,
        "probe_initial": state.probe_initial,
        "probe_final": state.probe_final,
    }
    path = write_container(path, tensors, meta)
    logger.debug("GAN_CHECKPOINT_SAVED", path=str(path), epoch=state.epoch, step=state.pair.step)
    return path


def load_checkpoint(path: Union[str, Path]) -> GanTrainState:
    tensors, meta = read_container(path)
    require_kind(meta, CHECKPOINT_KIND, path)
    config = GanConfig.model_validate(meta["config"])
    state = init_state(config, meta["seed"])
    for name, module in state.pair.modules().items():
        load_module_tensors(name, module, tensors)
    for name in OPTIMIZER_NAMES:
        load_optimizer_tensors(name, getattr(state, name), tensors, meta["optimizers"][name])
    for name in ("replay0", "replay1"):
        buffer = getattr(state, name)
        stacked = tensors.get(f"{name}.images")
        buffer.load_state_tensor(torch.from_numpy(stacked) if stacked is not None else None)
        buffer.rng = restore_generator(meta["rng"][name])

    state.shuffle_rng = restore_generator(meta["rng"]["shuffle"])
    state.pair.step = meta["step"]
    state.epoch = meta["epoch"]
    state.history = [LossRecord(**r) for r in meta["history"]]
    state.probe_ids = list(meta.get("probe_ids", []))
    state.probe_initial = meta.get("probe_initial")
    state.probe_final = meta.get("probe_final")
    logger.debug("GAN_CHECKPOINT_LOADED", path=str(path), epoch=state.epoch, step=state.pair.step)
    return state
