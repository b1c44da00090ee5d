"""Two-stage training loops, run configuration, checkpointing and the
end-to-end generation pipeline.

Checkpoints are self-describing torch containers (parameter arrays per
network, codebook state, optimizer state, RNG state, config echo, step
counter) written atomically via temp-then-rename.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import math
import os
import tempfile
import warnings
from dataclasses import dataclass

import numpy as np
import torch

from . import stage1_losses as losses
from .codebook import Codebook, codebook_loss
from .networks import NetworkConfig, PerceptualExtractor, init_networks
from .transformer import (MaskedTokenTransformer, TransformerConfig, apply_mask,
                          linearize, sample_tokens)


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class RunConfig:
    seed: int = 0
    deterministic: bool = True
    # stage-1 network / codebook
    in_edge: int = 128
    latent_edge: int = 8
    base_channels: int = 32
    n_z: int = 64
    norm: bool = True
    num_codes: int = 512
    codebook_decay: float = 0.99
    codebook_eps: float = 1e-5
    # stage-1 schedule
    s1_epochs: int = 4000
    s1_lr: float = 1e-4
    s1_batch: int = 3
    lambda_l1: float = 4.0
    lambda_perceptual: float = 1.0
    lambda_match: float = 4.0
    lambda_gradient: float = 4.0
    lambda_codebook: float = 1.0
    adv_weight: float = 1.0
    adv_warmup_steps: int = 2000
    # stage-2
    s2_epochs: int = 1500
    s2_lr: float = 4.5e-6
    s2_batch: int = 3
    mask_ratio: float = 0.5
    t_layers: int = 8
    t_heads: int = 8
    t_model_dim: int = 512
    # sampling
    temperature: float = 1.0
    top_k: int = 100

    def __post_init__(self):
        if not 0.0 <= self.mask_ratio <= 1.0:
            raise ValueError("mask_ratio must be in [0, 1]")
        for name in ("s1_epochs", "s1_lr", "s1_batch", "s2_epochs", "s2_lr",
                     "s2_batch", "num_codes", "n_z"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")

    def net_config(self) -> NetworkConfig:
        return NetworkConfig(in_edge=self.in_edge, latent_edge=self.latent_edge,
                             base_channels=self.base_channels, n_z=self.n_z,
                             norm=self.norm)

    def transformer_config(self) -> TransformerConfig:
        return TransformerConfig(num_codes=self.num_codes,
                                 seq_len=self.latent_edge ** 3,
                                 layers=self.t_layers, heads=self.t_heads,
                                 model_dim=self.t_model_dim)


_BOOL = {"true": True, "1": True, "yes": True, "false": False, "0": False, "no": False}


def parse_config(path, overrides: dict | None = None) -> RunConfig:
    """Flat key=value text config with typed parsing; unknown keys are errors."""
    fields = {f.name: f.type for f in dataclasses.fields(RunConfig)}
    values: dict = {}
    with open(path, encoding="utf-8") as f:
        for lineno, line in enumerate(f, 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ValueError(f"{path}:{lineno}: expected key=value")
            key, raw = (s.strip() for s in line.split("=", 1))
            if key not in fields:
                raise ValueError(f"{path}:{lineno}: unknown config key {key!r}")
            values[key] = _coerce(key, raw)
    if overrides:
        values.update(overrides)
    return RunConfig(**values)


def _coerce(key: str, raw: str):
    kind = RunConfig.__dataclass_fields__[key].type
    if kind in ("int", int):
        return int(raw)
    if kind in ("float", float):
        return float(raw)
    if kind in ("bool", bool):
        if raw.lower() not in _BOOL:
            raise ValueError(f"bad boolean {raw!r} for {key}")
        return _BOOL[raw.lower()]
    return raw


def seed_everything(seed: int, deterministic: bool = True) -> None:
    torch.manual_seed(seed)
    if deterministic:
        torch.use_deterministic_algorithms(True)


def save_checkpoint(path, payload: dict) -> None:
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=os.path.dirname(os.path.abspath(path)))
    try:
        with os.fdopen(fd, "wb") as f:
            torch.save(payload, f)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def load_checkpoint(path) -> dict:
    return torch.load(path, map_location="cpu", weights_only=False)


def params_hash(module: torch.nn.Module) -> str:
    h = hashlib.sha256()
    for name, p in sorted(module.state_dict().items()):
        h.update(name.encode())
        h.update(np.ascontiguousarray(p.detach().numpy()).tobytes())
    return h.hexdigest()


class LossLog:
    """Line-delimited (step, component, value) records."""

    def __init__(self, path=None):
        self.path = path
        self.f = open(path, "a", encoding="utf-8") if path else None

    def write(self, step: int, component: str, value: float) -> None:
        if self.f:
            self.f.write(json.dumps(
                {"step": step, "component": component, "value": float(value)}) + "\n")

    def close(self):
        if self.f:
            self.f.close()


def _cosine_lr(base: float, epoch: int, total: int) -> float:
    return base * 0.5 * (1.0 + math.cos(math.pi * min(epoch, total) / total))


def train_stage1(cfg: RunConfig, volumes, log_path=None, checkpoint_path=None,
                 resume_from: dict | None = None, checkpoint_every: int = 0) -> dict:
    """Adversarial stage-1 training over a list of volumes.

    One discriminator and one generator update per batch, EMA codebook
    update per batch, cosine learning-rate decay per epoch. Aborts with
    TrainingDiverged if the total loss goes non-finite.
    """
    if not volumes:
        raise ValueError("empty training set")
    seed_everything(cfg.seed, cfg.deterministic)
    net_cfg = cfg.net_config()
    enc, dec, disc = init_networks(net_cfg, seed=cfg.seed)
    cb = Codebook(cfg.num_codes, cfg.n_z, decay=cfg.codebook_decay, eps=cfg.codebook_eps)
    extractor = PerceptualExtractor(seed=cfg.seed)
    weights = losses.LossWeights(
        l1=cfg.lambda_l1, perceptual=cfg.lambda_perceptual, match=cfg.lambda_match,
        gradient=cfg.lambda_gradient, codebook=cfg.lambda_codebook,
        adv_weight=cfg.adv_weight, adv_warmup_steps=cfg.adv_warmup_steps)

    opt_g = torch.optim.Adam(list(enc.parameters()) + list(dec.parameters()), lr=cfg.s1_lr)
    opt_d = torch.optim.Adam(disc.parameters(), lr=cfg.s1_lr)
    rng = np.random.default_rng(cfg.seed)
    step = 0
    start_epoch = 0

    if resume_from is not None:
        _check_config_echo(resume_from, cfg)
        enc.load_state_dict(resume_from["encoder"])
        dec.load_state_dict(resume_from["decoder"])
        disc.load_state_dict(resume_from["discriminator"])
        cb.load_state_dict(resume_from["codebook"])
        opt_g.load_state_dict(resume_from["opt_g"])
        opt_d.load_state_dict(resume_from["opt_d"])
        torch.set_rng_state(resume_from["torch_rng"])
        rng.bit_generator.state = resume_from["np_rng"]
        step = resume_from["step"]
        start_epoch = resume_from["epoch"]

    data = torch.from_numpy(np.stack([np.asarray(v, np.float32) for v in volumes]))
    data = data[:, None]  # (N, 1, E, E, E)
    log = LossLog(log_path)

    def snapshot(epoch: int) -> dict:
        return {
            "config": dataclasses.asdict(cfg),
            "encoder": enc.state_dict(), "decoder": dec.state_dict(),
            "discriminator": disc.state_dict(), "codebook": cb.state_dict(),
            "opt_g": opt_g.state_dict(), "opt_d": opt_d.state_dict(),
            "torch_rng": torch.get_rng_state(), "np_rng": rng.bit_generator.state,
            "step": step, "epoch": epoch,
        }

    try:
        for epoch in range(start_epoch, cfg.s1_epochs):
            lr = _cosine_lr(cfg.s1_lr, epoch, cfg.s1_epochs)
            for group in (*opt_g.param_groups, *opt_d.param_groups):
                group["lr"] = lr
            order = rng.permutation(len(volumes))
            for bstart in range(0, len(volumes), cfg.s1_batch):
                idx = order[bstart:bstart + cfg.s1_batch]
                x = data[idx]
                z = enc(x)
                indices, zq = cb.quantize(z)
                x_hat = dec(zq)

                # discriminator step
                scores_fake_d, _ = disc(x_hat.detach())
                scores_real, feats_real = disc(x)
                d_loss = losses.hinge_disc_loss(scores_real, scores_fake_d)
                opt_d.zero_grad()
                d_loss.backward()
                opt_d.step()

                # generator step
                scores_fake, feats_fake = disc(x_hat)
                comp = losses.LossComponents(
                    l1=losses.l1_loss(x, x_hat),
                    perceptual=sum(
                        losses.perceptual_loss(x[i, 0], x_hat[i, 0], extractor, rng)
                        for i in range(len(idx))) / len(idx),
                    match=losses.feature_matching_loss(
                        [f.detach() for f in feats_real], feats_fake),
                    gradient=losses.gradient_3d_loss(x, x_hat),
                    codebook=codebook_loss(z, cb.lookup(indices)),
                    adv=losses.generator_adv_loss(scores_fake, weights, step),
                )
                total = losses.total_stage1_loss(comp, weights)
                if not torch.isfinite(total):
                    raise TrainingDiverged(
                        f"non-finite stage-1 loss at step {step}: "
                        + str({k: getattr(comp, k).detach().item() for k in
                               ("l1", "perceptual", "match", "gradient", "codebook", "adv")}))
                opt_g.zero_grad()
                total.backward()
                opt_g.step()
                cb.ema_update(z.detach(), indices)

                for name in ("l1", "perceptual", "match", "gradient", "codebook", "adv"):
                    log.write(step, name, getattr(comp, name).detach().item())
                log.write(step, "total", total.detach().item())
                log.write(step, "disc", d_loss.detach().item())
                step += 1
            if checkpoint_path and checkpoint_every and (epoch + 1) % checkpoint_every == 0:
                save_checkpoint(checkpoint_path, snapshot(epoch + 1))
    finally:
        log.close()

    payload = snapshot(cfg.s1_epochs)
    if checkpoint_path:
        save_checkpoint(checkpoint_path, payload)
    return payload


def _check_config_echo(payload: dict, cfg: RunConfig) -> None:
    echo = payload.get("config")
    if echo != dataclasses.asdict(cfg):
        raise ValueError("checkpoint config does not match the current run config:\n"
                         f"checkpoint: {echo}\ncurrent:    {dataclasses.asdict(cfg)}")


def restore_stage1(payload: dict):
    """(encoder, decoder, codebook, config) from a stage-1 checkpoint, eval mode."""
    cfg = RunConfig(**payload["config"])
    enc, dec, _ = init_networks(cfg.net_config(), seed=cfg.seed)
    enc.load_state_dict(payload["encoder"])
    dec.load_state_dict(payload["decoder"])
    cb = Codebook(cfg.num_codes, cfg.n_z, decay=cfg.codebook_decay, eps=cfg.codebook_eps)
    cb.load_state_dict(payload["codebook"])
    enc.eval()
    dec.eval()
    return enc, dec, cb, cfg


def encode_tokens(payload: dict, volumes) -> list[np.ndarray]:
    """Frozen stage-1 encode + quantize of each volume to a token grid."""
    enc, _, cb, _ = restore_stage1(payload)
    grids = []
    with torch.no_grad():
        for v in volumes:
            z = enc(torch.from_numpy(np.asarray(v, np.float32)))
            grids.append(cb.nearest(z[0]).numpy())
    return grids


def train_stage2(cfg: RunConfig, stage1_payload: dict, volumes,
                 log_path=None, checkpoint_path=None) -> dict:
    """Masked-token training of the transformer over frozen stage-1 tokens.

    Stage-1 parameters are hash-verified unchanged after training.
    """
    seed_everything(cfg.seed, cfg.deterministic)
    enc, dec, cb, s1cfg = restore_stage1(stage1_payload)
    hash_before = params_hash(enc) + params_hash(dec) + params_hash(cb)
    if (s1cfg.num_codes, s1cfg.n_z, s1cfg.latent_edge) != (cfg.num_codes, cfg.n_z, cfg.latent_edge):
        raise ValueError(
            "stage-1 checkpoint incompatible with stage-2 config: "
            f"(K, n_z, latent_edge) {(s1cfg.num_codes, s1cfg.n_z, s1cfg.latent_edge)} "
            f"vs {(cfg.num_codes, cfg.n_z, cfg.latent_edge)}")
    if cfg.mask_ratio == 0.0:
        warnings.warn("mask_ratio is 0: the masked CE loss is identically zero")

    sequences = [linearize(g) for g in encode_tokens(stage1_payload, volumes)]
    tcfg = cfg.transformer_config()
    torch.manual_seed(cfg.seed)
    model = MaskedTokenTransformer(tcfg)
    opt = torch.optim.AdamW(model.parameters(), lr=cfg.s2_lr)
    rng = np.random.default_rng(cfg.seed + 1)
    log = LossLog(log_path)
    step = 0
    try:
        for _epoch in range(cfg.s2_epochs):
            order = rng.permutation(len(sequences))
            for bstart in range(0, len(sequences), cfg.s2_batch):
                idx = order[bstart:bstart + cfg.s2_batch]
                cor, masks, tgt = [], [], []
                for i in idx:
                    c, spec = apply_mask(sequences[i], cfg.mask_ratio,
                                         int(rng.integers(1 << 31)), cfg.num_codes)
                    cor.append(c)
                    masks.append(spec.mask)
                    tgt.append(sequences[i])
                logits = model(torch.from_numpy(np.stack(cor)))
                loss = _masked_ce_batch(logits, np.stack(tgt), np.stack(masks))
                if not torch.isfinite(loss):
                    raise TrainingDiverged(f"non-finite stage-2 loss at step {step}")
                if loss.requires_grad:  # empty masked set gives a constant 0
                    opt.zero_grad()
                    loss.backward()
                    opt.step()
                log.write(step, "masked_ce", loss.detach().item())
                step += 1
    finally:
        log.close()

    hash_after = params_hash(enc) + params_hash(dec) + params_hash(cb)
    assert hash_before == hash_after, "stage-1 parameters changed during stage 2"
    payload = {
        "config": dataclasses.asdict(cfg),
        "transformer": model.state_dict(),
        "stage1_hash": hash_after,
        "stage1_config": stage1_payload["config"],
        "step": step,
    }
    if checkpoint_path:
        save_checkpoint(checkpoint_path, payload)
    return payload


def _masked_ce_batch(logits, targets, masks):
    from .transformer import masked_ce_loss
    return masked_ce_loss(logits, torch.from_numpy(targets), torch.from_numpy(masks))


def restore_stage2(payload: dict):
    cfg = RunConfig(**payload["config"])
    model = MaskedTokenTransformer(cfg.transformer_config())
    model.load_state_dict(payload["transformer"])
    model.eval()
    return model, cfg


def generate_volume(stage1_payload: dict, stage2_payload: dict, seed: int) -> np.ndarray:
    """Sample a token grid, look up embeddings and decode to a volume."""
    _, dec, cb, s1cfg = restore_stage1(stage1_payload)
    model, s2cfg = restore_stage2(stage2_payload)
    k1 = (s1cfg.num_codes, s1cfg.n_z, s1cfg.latent_edge)
    k2 = (s2cfg.num_codes, s2cfg.n_z, s2cfg.latent_edge)
    if k1 != k2:
        raise ValueError("incompatible checkpoints:\n"
                         f"stage-1 (K, n_z, latent_edge) = {k1}, config {stage1_payload['config']}\n"
                         f"stage-2 (K, n_z, latent_edge) = {k2}, config {stage2_payload['config']}")
    le = s1cfg.latent_edge
    grid = sample_tokens(model, (le, le, le), seed,
                         temperature=s2cfg.temperature, top_k=s2cfg.top_k)
    with torch.no_grad():
        zq = cb.lookup(torch.from_numpy(grid))
        vol = dec(zq[None])
    return vol[0, 0].numpy()


def generate_batch(stage1_payload: dict, stage2_payload: dict, n: int,
                   base_seed: int, out_dir, fmt: str = "vq3d"):
    """n volumes with seeds base_seed..base_seed+n-1, plus a manifest."""
    from .volumes import ManifestEntry, save_volume, write_manifest
    if n < 1:
        raise ValueError("n must be >= 1")
    os.makedirs(out_dir, exist_ok=True)
    ext = {"vq3d": ".vq3d", "nifti": ".nii.gz"}[fmt]
    entries = []
    for i in range(n):
        seed = base_seed + i
        vol = generate_volume(stage1_payload, stage2_payload, seed)
        name = f"sample_{seed:06d}{ext}"
        save_volume(os.path.join(out_dir, name), vol)
        entries.append(ManifestEntry(name, "synthetic", "train"))
    write_manifest(os.path.join(out_dir, "manifest.tsv"), entries)
    return entries
