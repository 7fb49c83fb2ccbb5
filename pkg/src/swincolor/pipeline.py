"""Dataset handling, the alternating WGAN training loop, and evaluation.

The loop follows the usual conditional-GAN alternation: ``n_critic`` critic
updates on detached generator output, then one generator update through the
full four-term objective.  Everything is deterministic given (seed, config,
data): batch order is derived from the step counter alone, and the one
stateful noise stream is saved inside checkpoints, so a resumed run replays
the uninterrupted trajectory bit for bit in single-threaded mode.
"""

from __future__ import annotations

import dataclasses
import functools
import hashlib
import math
import os
from contextlib import nullcontext
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from . import checkpoint as ckpt
from . import colorspace, config as config_mod, losses, metrics, model
from . import tensor as T

LOSS_COLUMNS = ("step", "Lg", "Lp", "L1", "Lc", "total", "d_loss")

_IMAGE_SUFFIXES = (".png", ".jpg", ".jpeg", ".bmp")

# config fields a resumed run may change freely; everything else must match
# the checkpoint or the trajectory would silently diverge
_RESUME_FREE_FIELDS = ("steps", "checkpoint_every", "single_thread", "eval_seed")


class DatasetError(ValueError):
    pass


class TrainingDivergedError(RuntimeError):
    pass


@dataclasses.dataclass(frozen=True)
class Dataset:
    """Validated image paths for one split, in deterministic order."""

    files: tuple
    split: str
    seed: int

    def __len__(self):
        return len(self.files)


def _load_rgb(path) -> colorspace.RgbImage:
    try:
        return colorspace.read_png(path)
    except (OSError, ValueError) as exc:
        raise DatasetError(f"failed to decode {path}: {exc}") from None


def _voc_layout(root: Path):
    sets = root / "ImageSets" / "Main"
    images = root / "JPEGImages"
    if not (sets / "train.txt").is_file() or not (sets / "val.txt").is_file():
        return None
    if not images.is_dir():
        return None
    return sets, images


def _voc_files(sets: Path, images: Path, names):
    files, missing = [], []
    for stem in names:
        for suffix in _IMAGE_SUFFIXES:
            candidate = images / (stem + suffix)
            if candidate.is_file():
                files.append(candidate)
                break
        else:
            missing.append(stem)
    if missing:
        raise DatasetError(f"VOC split names {missing} have no image files in {images}")
    return files


def _split_key(seed, name):
    return hashlib.sha256(f"{seed}:{name}".encode()).hexdigest()


def load_dataset(data_dir, split, cfg) -> Dataset:
    """Enumerate and validate images, returning the requested split.

    A PASCAL VOC directory layout (JPEGImages/ plus ImageSets/Main/train.txt
    and val.txt) is honored when present; any other directory is split
    deterministically by hashing each filename with the seed.  Every selected
    image must decode and carry chroma; failures are listed by path.
    """
    if split not in ("train", "test", "all"):
        raise DatasetError(f"unknown split {split!r}; expected train, test, or all")
    root = Path(data_dir)
    if not root.is_dir():
        raise DatasetError(f"dataset directory {root} does not exist")

    voc = _voc_layout(root)
    if voc is not None:
        sets, images = voc
        wanted = []
        if split in ("train", "all"):
            wanted += (sets / "train.txt").read_text().split()
        if split in ("test", "all"):
            wanted += (sets / "val.txt").read_text().split()
        files = _voc_files(sets, images, sorted(set(wanted)))
    else:
        files = sorted(
            p for p in root.iterdir() if p.suffix.lower() in _IMAGE_SUFFIXES
        )
        if not files:
            raise DatasetError(f"no images with suffixes {_IMAGE_SUFFIXES} in {root}")
        if split != "all":
            by_hash = sorted(files, key=lambda p: (_split_key(cfg.seed, p.name), p.name))
            n_train = int(len(files) * cfg.train_frac + 0.5)
            chosen = by_hash[:n_train] if split == "train" else by_hash[n_train:]
            files = sorted(chosen)

    undecodable, grayscale = [], []
    for path in files:
        try:
            img = _load_rgb(path)
        except DatasetError:
            undecodable.append(str(path))
            continue
        px = img.pixels
        if np.array_equal(px[..., 0], px[..., 1]) and np.array_equal(px[..., 1], px[..., 2]):
            grayscale.append(str(path))
    if undecodable:
        raise DatasetError(f"undecodable images: {undecodable}")
    if grayscale:
        raise DatasetError(
            f"grayscale-only images (no chroma signal to learn): {grayscale}"
        )
    if not files:
        raise DatasetError(f"split {split!r} of {root} selected no images")
    return Dataset(files=tuple(str(p) for p in files), split=split, seed=cfg.seed)


def make_batch(ds: Dataset, indices, cfg):
    """(Ln, abn_gt, rgb_gt) float32/-/uint8 arrays for the given indices."""
    size = cfg.image_size
    light = np.empty((len(indices), 1, size, size), dtype=np.float32)
    chroma = np.empty((len(indices), 2, size, size), dtype=np.float32)
    rgb = np.empty((len(indices), size, size, 3), dtype=np.uint8)
    for slot, index in enumerate(indices):
        resized = colorspace.resize_rgb(_load_rgb(ds.files[index]), size, size)
        norm = colorspace.normalize_lab(colorspace.srgb_to_lab(resized))
        light[slot, 0] = norm.lightness
        chroma[slot] = norm.chroma
        rgb[slot] = resized.pixels
    return light, chroma, rgb


# -- training state ---------------------------------------------------------------


@dataclasses.dataclass
class TrainState:
    generator: model.ColorizerGenerator
    critic: model.PatchCritic
    backbone: model.PerceptualBackbone
    opt_g: T.Adam
    opt_d: T.Adam
    noise_rng: np.random.Generator
    step: int = 0


def init_state(cfg) -> TrainState:
    generator = model.ColorizerGenerator(
        seed=cfg.seed,
        base_width=cfg.base_width,
        ablation=cfg.ablation,
        heads=cfg.heads,
        window=cfg.window,
        mlp_ratio=cfg.mlp_ratio,
        bottleneck_grid=cfg.bottleneck_grid(),
    )
    critic = model.PatchCritic(seed=cfg.seed + 1, base_width=cfg.base_width)
    backbone = model.PerceptualBackbone(seed=cfg.backbone_seed)
    return TrainState(
        generator=generator,
        critic=critic,
        backbone=backbone,
        opt_g=T.Adam(cfg.lr_g, beta1=cfg.beta1, beta2=cfg.beta2),
        opt_d=T.Adam(cfg.lr_d, beta1=cfg.beta1, beta2=cfg.beta2),
        noise_rng=np.random.default_rng([cfg.seed, 101]),
    )


def _require_finite(value, component, step):
    if not math.isfinite(value):
        raise TrainingDivergedError(f"non-finite {component} loss at step {step}")
    return value


def _rescale(rgb01: T.Tensor) -> T.Tensor:
    # backbone inputs live in [-1, 1]
    return rgb01 * 2.0 + (-1.0)


def _sample_noise_tensor(state, cfg, batch):
    if not state.generator.has_color_encoder:
        return None
    data = model.sample_noise(state.noise_rng, batch, cfg.image_size, cfg.noise_std)
    return T.Tensor(data, requires_grad=False)


def train_step(state: TrainState, batch, cfg):
    """One alternation: n_critic critic updates, then one generator update."""
    light_np, chroma_np, rgb_np = batch
    step = state.step + 1
    light = T.Tensor(light_np, requires_grad=False)
    chroma_gt = T.Tensor(chroma_np, requires_grad=False)
    weights = cfg.loss_weights()

    # encoder injections always come from the gray input
    gray = T.concat([light, light, light], axis=1)
    injected = state.backbone.feature_pyramid(gray)[:3]

    d_report = 0.0
    for _ in range(cfg.n_critic):
        noise = _sample_noise_tensor(state, cfg, light_np.shape[0])
        with T.no_grad():
            fake, _ = state.generator.forward(light, noise=noise, injected=injected)
        fake_const = T.Tensor(fake.data, requires_grad=False)
        try:
            scores_real = state.critic.forward(light, chroma_gt)
            scores_fake = state.critic.forward(light, fake_const)
            _, d_loss = losses.wgan_losses(scores_real, scores_fake)
        except ValueError as exc:
            raise TrainingDivergedError(f"{exc} at step {step}") from None
        objective = d_loss
        if cfg.lipschitz == "gp":
            penalty, _ = losses.gradient_penalty(
                state.critic, light, chroma_np, fake.data, state.noise_rng
            )
            _require_finite(float(penalty.data), "gradient penalty", step)
            objective = d_loss + penalty * cfg.gp_weight
        d_report = _require_finite(float(d_loss.data), "critic", step)
        objective.backward()
        state.opt_d.step(state.critic.params)
        T.zero_grads(state.critic.params)
        if cfg.lipschitz == "clip":
            losses.clip_critic(state.critic.params, cfg.clip_c)

    gt_rgb01 = T.Tensor((rgb_np.astype(np.float32) / 255.0).transpose(0, 3, 1, 2))
    color_target = None
    if state.generator.has_color_encoder:
        gt_composite = colorspace.normalized_lab_to_rgb01(light, chroma_gt)
        color_target = state.backbone.global_features(_rescale(gt_composite))

    for p in state.critic.params.values():
        p.requires_grad = False
    try:
        noise = _sample_noise_tensor(state, cfg, light_np.shape[0])
        pred, trace = state.generator.forward(light, noise=noise, injected=injected)
        scores = state.critic.forward(light, pred)
        adversarial = -T.reduce_mean(scores)
        pred_rgb01 = colorspace.normalized_lab_to_rgb01(light, pred)
        perceptual = losses.perceptual_loss(
            _rescale(pred_rgb01), _rescale(gt_rgb01), state.backbone, cfg.perceptual_tap
        )
        pixel = losses.l1_loss(pred, chroma_gt)
        if color_target is not None:
            color = losses.color_loss(trace.color_out, color_target)
        else:
            color = T.Tensor(np.zeros((), dtype=np.float32), requires_grad=False)

        for component, value in (
            ("adversarial", adversarial),
            ("perceptual", perceptual),
            ("pixel", pixel),
            ("color", color),
        ):
            _require_finite(float(value.data), component, step)
        total = losses.total_loss(adversarial, perceptual, pixel, color, weights)
        bundle = losses.LossBundle(
            adversarial=float(adversarial.data),
            perceptual=float(perceptual.data),
            pixel=float(pixel.data),
            color=float(color.data),
            total=_require_finite(float(total.data), "total", step),
            critic=d_report,
        )
        total.backward()
        state.opt_g.step(state.generator.params)
        T.zero_grads(state.generator.params)
    finally:
        for p in state.critic.params.values():
            p.requires_grad = True

    state.step = step
    return state, bundle


# -- deterministic batch order ------------------------------------------------


@functools.lru_cache(maxsize=None)
def _epoch_order(seed, epoch, count):
    return tuple(int(i) for i in np.random.default_rng([seed, 911, epoch]).permutation(count))


def batch_indices(step, batch_size, dataset_size, seed):
    """Dataset indices for 1-based ``step``, derived from the step alone."""
    first = (step - 1) * batch_size
    out = []
    for sample in range(first, first + batch_size):
        epoch, position = divmod(sample, dataset_size)
        out.append(_epoch_order(seed, epoch, dataset_size)[position])
    return out


# -- checkpoint plumbing ------------------------------------------------------


def save_state(state: TrainState, cfg, path):
    return ckpt.save_checkpoint(
        path,
        step=state.step,
        config=cfg.to_mapping(),
        sections={
            "generator": state.generator.params,
            "critic": state.critic.params,
        },
        optimizers={
            "adam_g": state.opt_g.state_dict(),
            "adam_d": state.opt_d.state_dict(),
        },
        rng_state=state.noise_rng.bit_generator.state,
    )


def _restore_adam(opt: T.Adam, stored):
    opt.load_state_dict(stored)


def restore_state(loaded: ckpt.Checkpoint, cfg) -> TrainState:
    state = init_state(cfg)
    for section, params in (
        ("generator", state.generator.params),
        ("critic", state.critic.params),
    ):
        if section not in loaded.sections:
            raise ckpt.CheckpointError(f"checkpoint is missing section {section!r}")
        ckpt.restore_params(params, loaded.sections[section], section)
    for name, opt in (("adam_g", state.opt_g), ("adam_d", state.opt_d)):
        if name not in loaded.optimizers:
            raise ckpt.CheckpointError(f"checkpoint is missing optimizer state {name!r}")
        _restore_adam(opt, loaded.optimizers[name])
    if loaded.rng_state is None:
        raise ckpt.CheckpointError("checkpoint is missing the noise RNG state")
    state.noise_rng.bit_generator.state = loaded.rng_state
    state.step = loaded.step
    return state


def _check_resume_config(cfg, stored_mapping, path):
    current = cfg.to_mapping()
    for name, stored_value in stored_mapping.items():
        if name in _RESUME_FREE_FIELDS:
            continue
        if name not in current:
            raise ckpt.CheckpointError(f"checkpoint {path} has unknown config field {name!r}")
        if current[name] != stored_value:
            raise ckpt.CheckpointError(
                f"config field {name!r} was {stored_value!r} at save time but is "
                f"{current[name]!r} now; resuming would diverge"
            )


# -- the loop -------------------------------------------------------------------


def _format_row(step, bundle):
    values = (
        bundle.adversarial,
        bundle.perceptual,
        bundle.pixel,
        bundle.color,
        bundle.total,
        bundle.critic,
    )
    return ",".join([str(step)] + [repr(v) for v in values]) + "\n"


def train(cfg, data_dir, out_dir, resume=None, dataset=None):
    """Run cfg.steps training steps; returns (final checkpoint path, rows).

    ``resume`` names an earlier checkpoint to continue from; architecture and
    optimization fields must match its stored config.  ``dataset`` overrides
    the default train-split load (the overfit experiments train on "all").
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    if dataset is None:
        dataset = load_dataset(data_dir, "train", cfg)

    if resume is not None:
        loaded = ckpt.load_checkpoint(resume)
        _check_resume_config(cfg, loaded.config, resume)
        state = restore_state(loaded, cfg)
    else:
        state = init_state(cfg)

    log_path = out / "losses.csv"
    fresh_log = not (resume is not None and log_path.exists())
    guard = threadpool_limits(limits=1) if cfg.single_thread else nullcontext()
    rows = []
    with guard:
        with open(log_path, "w" if fresh_log else "a") as log:
            if fresh_log:
                log.write(",".join(LOSS_COLUMNS) + "\n")
            while state.step < cfg.steps:
                indices = batch_indices(state.step + 1, cfg.batch_size, len(dataset), cfg.seed)
                batch = make_batch(dataset, indices, cfg)
                state, bundle = train_step(state, batch, cfg)
                row = _format_row(state.step, bundle)
                log.write(row)
                log.flush()
                rows.append(row)
                if cfg.checkpoint_every and state.step % cfg.checkpoint_every == 0:
                    save_state(state, cfg, out / f"checkpoint_{state.step:06d}.ckpt")
    final = save_state(state, cfg, out / "checkpoint_final.ckpt")
    return final, rows


# -- evaluation -------------------------------------------------------------------


def _reconstruct_rgb(light_f32, chroma_f32) -> colorspace.RgbImage:
    """(1,H,W)/(2,H,W) normalized float32 planes -> gamut-clipped RGB image."""
    L = (light_f32[0].astype(np.float64) + 1.0) * 50.0
    ab = chroma_f32.astype(np.float64) * 128.0
    pixels = colorspace.lab_array_to_rgb(np.stack([L, ab[0], ab[1]]))
    return colorspace.RgbImage.from_array(pixels)


def load_generator(checkpoint_path):
    """Rebuild (generator, backbone, stored config) from a checkpoint."""
    loaded = ckpt.load_checkpoint(checkpoint_path)
    try:
        stored = config_mod.build_config(loaded.config)
    except config_mod.ConfigError as exc:
        raise ckpt.CheckpointError(f"checkpoint config rejected: {exc}") from exc
    state = init_state(stored)
    if "generator" not in loaded.sections:
        raise ckpt.CheckpointError("checkpoint is missing section 'generator'")
    ckpt.restore_params(state.generator.params, loaded.sections["generator"], "generator")
    return state.generator, state.backbone, stored


def colorize_image(generator, backbone, stored_cfg, img: colorspace.RgbImage, seed):
    """Colorize one image: returns RGB at the source dimensions.

    The lightness plane is resized to the training resolution for the
    generator; the predicted chroma is resized back to the source grid and
    recombined with the source's own full-resolution lightness.
    """
    size = stored_cfg.image_size
    resized = colorspace.resize_rgb(img, size, size)
    norm = colorspace.normalize_lab(colorspace.srgb_to_lab(resized))
    light = T.Tensor(norm.lightness[None, None].astype(np.float32), requires_grad=False)
    noise = None
    if generator.has_color_encoder:
        rng = np.random.default_rng(seed)
        noise = T.Tensor(
            model.sample_noise(rng, 1, size, stored_cfg.noise_std), requires_grad=False
        )
    with T.no_grad():
        abn, _ = generator.forward(light, noise=noise, backbone=backbone)
    chroma = abn.data[0]
    if (img.height, img.width) != (size, size):
        chroma_t = T.Tensor(chroma[None], requires_grad=False)
        chroma = T.resize_nearest(chroma_t, (img.height, img.width)).data[0]
    full_norm = colorspace.normalize_lab(colorspace.srgb_to_lab(img))
    return _reconstruct_rgb(
        full_norm.lightness[None].astype(np.float32), chroma.astype(np.float32)
    )


def evaluate(checkpoint_path, dataset: Dataset, cfg, bypass_generator=False):
    """Colorize every dataset image with a fixed per-image seed and score it."""
    generator = backbone = stored = None
    if not bypass_generator:
        generator, backbone, stored = load_generator(checkpoint_path)
    report = metrics.MetricReport()
    for index, path in enumerate(dataset.files):
        source = _load_rgb(path)
        if bypass_generator:
            size = cfg.image_size
            resized = colorspace.resize_rgb(source, size, size)
            report.add_pair(Path(path).stem, resized, resized)
            continue
        size = stored.image_size
        resized = colorspace.resize_rgb(source, size, size)
        norm = colorspace.normalize_lab(colorspace.srgb_to_lab(resized))
        light = T.Tensor(norm.lightness[None, None].astype(np.float32), requires_grad=False)
        noise = None
        if generator.has_color_encoder:
            rng = np.random.default_rng([cfg.eval_seed, index])
            noise = T.Tensor(
                model.sample_noise(rng, 1, size, stored.noise_std), requires_grad=False
            )
        with T.no_grad():
            abn, _ = generator.forward(light, noise=noise, backbone=backbone)
        pred = _reconstruct_rgb(light.data[0], abn.data[0])
        report.add_pair(Path(path).stem, pred, resized)
    return report
