"""Multipath one-step latent restoration model.

Architecture: a strided conv encoder to a compact latent, a two-scale UNet
denoiser applied a fixed (default 1) number of times, and a transposed-conv
decoder. The encoder and denoiser carry low-rank adapters modulated by a
shared degradation-attention matrix; conditioning enters through learned
prompt embeddings (positive / neutral / negative) via FiLM.

Training draws one of the three paths per step from a categorical
distribution: the positive path restores the clean target from a degraded
input, the neutral path restores an edge-preserving low-pass of the target,
and the negative path learns the degradation itself (clean input -> degraded
target), which also powers pseudo-pair generation. At inference the positive
and neutral latents are cached and any blend alpha*z_pos + (1-alpha)*z_neu
can be decoded without re-running the encoder or denoiser.
"""

from __future__ import annotations

import hashlib
import json
import math
import struct
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Adam, Tensor
from .degradation import DegradationMap, score_quality
from .imaging import as_image_array, load_png, save_png
from .nn import (
    Conv2d,
    ConvTranspose2d,
    FiLM,
    GroupNorm,
    LoraConv2d,
    SvdaAttention,
    reconstruction_loss,
    standardize_map,
)

PATHS = ("negative", "positive", "neutral")  # categorical order of path_probs

MAGIC = b"DMDF"
VERSION = 1


class ModelFormatError(ValueError):
    """Bad container magic/version/structure."""


class ChecksumError(ValueError):
    """Payload bytes do not match the header checksum."""


class UntrainedModelError(RuntimeError):
    """Operation requires a trained model."""


class TrainingDivergedError(RuntimeError):
    def __init__(self, step: int, path: str, lr: float):
        super().__init__(f"non-finite loss at step {step} (path {path}, lr {lr})")
        self.context = {"step": step, "path": path, "lr": lr}


@dataclass(frozen=True)
class ModelConfig:
    latent_channels: int = 8
    latent_downscale: int = 4
    denoise_steps: int = 1
    lora_rank: int = 8
    grid_n: int = 7
    path_probs: tuple = (0.25, 0.5, 0.25)  # (negative, positive, neutral)
    perceptual_weight: float = 2.5
    alpha_min: float = 0.0
    alpha_max: float = 1.25
    seed: int = 0
    base_channels: int = 24
    denoiser_channels: int = 48
    embed_dim: int = 64
    svda_hidden: int = 32

    def __post_init__(self):
        object.__setattr__(self, "path_probs", tuple(float(p) for p in self.path_probs))
        if len(self.path_probs) != 3 or any(p < 0 for p in self.path_probs):
            raise ValueError("path_probs must be three non-negative values")
        if abs(sum(self.path_probs) - 1.0) > 1e-9:
            raise ValueError(f"path_probs must sum to 1, got {sum(self.path_probs)}")
        if self.denoise_steps < 1:
            raise ValueError("denoise_steps must be >= 1")
        if self.latent_downscale != 4:
            raise ValueError("this architecture downsamples by exactly 4 (two stride-2 stages)")
        if self.alpha_min >= self.alpha_max:
            raise ValueError("alpha_min must be < alpha_max")

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2)

    @classmethod
    def from_json(cls, text: str) -> "ModelConfig":
        return cls(**json.loads(text))

    def clamp_alpha(self, alpha: float) -> float:
        return min(max(float(alpha), self.alpha_min), self.alpha_max)


@dataclass
class LatentCode:
    """Denoised latent (C, H/ds, W/ds) plus the source image size for decoding."""

    values: np.ndarray
    image_size: tuple

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float32)
        if not np.all(np.isfinite(self.values)):
            raise ValueError("latent values must be finite")


def _silu(t):
    return ad.silu(t)


class MultipathModel:
    def __init__(self, config: ModelConfig, fwhm_grid: np.ndarray):
        cfg = config
        fwhm_grid = np.asarray(fwhm_grid, dtype=np.float32)
        if fwhm_grid.shape != (cfg.grid_n, cfg.grid_n):
            raise ValueError(f"fwhm_grid {fwhm_grid.shape} vs grid_n {cfg.grid_n}")
        self.config = cfg
        self.fwhm_grid = fwhm_grid
        self.trained = False
        self.encoder_calls = 0
        self.denoiser_calls = 0
        self.decoder_calls = 0

        rng = np.random.default_rng(cfg.seed)
        bc, dc, lc, r = cfg.base_channels, cfg.denoiser_channels, cfg.latent_channels, cfg.lora_rank
        dc2 = dc + dc // 2
        e = cfg.embed_dim

        self.enc1 = LoraConv2d(rng, Conv2d(rng, 3, bc, k=3, stride=2, pad=1), r)
        self.enc_gn = GroupNorm(bc)
        self.enc2 = LoraConv2d(rng, Conv2d(rng, bc, lc, k=3, stride=2, pad=1), r)

        self.den_in = LoraConv2d(rng, Conv2d(rng, lc, dc, k=3, pad=1), r)
        self.den_in_gn = GroupNorm(dc)
        self.den_in_film = FiLM(rng, e, dc)
        self.den_down = LoraConv2d(rng, Conv2d(rng, dc, dc2, k=3, stride=2, pad=1), r)
        self.den_down_gn = GroupNorm(dc2)
        self.den_down_film = FiLM(rng, e, dc2)
        self.den_mid1 = LoraConv2d(rng, Conv2d(rng, dc2, dc2, k=3, pad=1), r)
        self.den_mid_gn = GroupNorm(dc2)
        self.den_mid_film = FiLM(rng, e, dc2)
        self.den_mid2 = LoraConv2d(rng, Conv2d(rng, dc2, dc2, k=3, pad=1), r)
        self.den_up = LoraConv2d(rng, Conv2d(rng, dc2, dc, k=3, pad=1), r)
        self.den_up_gn = GroupNorm(dc)
        self.den_up_film = FiLM(rng, e, dc)
        self.den_out = LoraConv2d(rng, Conv2d(rng, dc, lc, k=3, pad=1, zero_init=True), r)

        self.dec1 = ConvTranspose2d(rng, lc, bc, k=4, stride=2, pad=1)
        self.dec_gn1 = GroupNorm(bc)
        self.dec_mid = Conv2d(rng, bc, bc, k=3, pad=1)
        self.dec_gn_mid = GroupNorm(bc)
        self.dec2 = ConvTranspose2d(rng, bc, bc, k=4, stride=2, pad=1)
        self.dec_gn2 = GroupNorm(bc)
        self.dec_out = Conv2d(rng, bc, 3, k=3, pad=1)

        self.prompts = {
            path: Tensor((rng.standard_normal(e) * 0.5).astype(np.float32), requires_grad=True)
            for path in PATHS
        }
        self.svda = SvdaAttention(rng, cfg.grid_n, r, hidden=cfg.svda_hidden)

    # -- parameter registry ---------------------------------------------------

    def _modules(self):
        return [
            ("enc1", self.enc1),
            ("enc_gn", self.enc_gn),
            ("enc2", self.enc2),
            ("den_in", self.den_in),
            ("den_in_gn", self.den_in_gn),
            ("den_in_film", self.den_in_film),
            ("den_down", self.den_down),
            ("den_down_gn", self.den_down_gn),
            ("den_down_film", self.den_down_film),
            ("den_mid1", self.den_mid1),
            ("den_mid_gn", self.den_mid_gn),
            ("den_mid_film", self.den_mid_film),
            ("den_mid2", self.den_mid2),
            ("den_up", self.den_up),
            ("den_up_gn", self.den_up_gn),
            ("den_up_film", self.den_up_film),
            ("den_out", self.den_out),
            ("dec1", self.dec1),
            ("dec_gn1", self.dec_gn1),
            ("dec_mid", self.dec_mid),
            ("dec_gn_mid", self.dec_gn_mid),
            ("dec2", self.dec2),
            ("dec_gn2", self.dec_gn2),
            ("dec_out", self.dec_out),
            ("svda", self.svda),
        ]

    def named_params(self) -> dict:
        out = {}
        for mod_name, mod in self._modules():
            for name, tensor in mod.params():
                out[f"{mod_name}.{name}"] = tensor
        for path, emb in self.prompts.items():
            out[f"prompt.{path}"] = emb
        return out

    def base_param_names(self):
        """Encoder/denoiser base weights that freeze after pretraining.

        The FiLM heads are excluded: together with the prompt embeddings they
        form the conditioning pathway, which must keep training so the three
        paths can separate (a head trained on one embedding is near rank-1).
        """
        names = []
        for key in self.named_params():
            mod = key.split(".")[0]
            if mod.startswith(("enc", "den")) and "_film" not in mod and not key.endswith((".a", ".b")):
                names.append(key)
        return names

    def conditioning_param_names(self):
        """Prompt embeddings plus their FiLM injection heads."""
        return [k for k in self.named_params() if "_film" in k.split(".")[0] or k.startswith("prompt.")]

    def adapter_param_names(self):
        return [k for k in self.named_params() if k.endswith((".a", ".b")) and k.split(".")[0].startswith(("enc", "den"))]

    def decoder_param_names(self):
        return [k for k in self.named_params() if k.startswith("dec")]

    def svda_param_names(self):
        return [k for k in self.named_params() if k.startswith("svda.")]

    def prompt_param_names(self):
        return [k for k in self.named_params() if k.startswith("prompt.")]

    # -- forward passes ---------------------------------------------------------

    def _encode(self, x: Tensor, q, bypass: bool) -> Tensor:
        self.encoder_calls += 1
        h = _silu(self.enc_gn(self.enc1(x, q) if bypass else self.enc1.base(x)))
        return self.enc2(h, q) if bypass else self.enc2.base(h)

    def _denoise_once(self, z: Tensor, emb: Tensor, q, bypass: bool) -> Tensor:
        self.denoiser_calls += 1

        def conv(layer, t):
            return layer(t, q) if bypass else layer.base(t)

        h0 = self.den_in_film(_silu(self.den_in_gn(conv(self.den_in, z))), emb)
        h1 = self.den_down_film(_silu(self.den_down_gn(conv(self.den_down, h0))), emb)
        m = self.den_mid_film(_silu(self.den_mid_gn(conv(self.den_mid1, h1))), emb)
        m = conv(self.den_mid2, m) + h1
        u = ad.upsample_nearest2x(m)
        u = self.den_up_film(_silu(self.den_up_gn(conv(self.den_up, u))), emb) + h0
        return z + conv(self.den_out, u)

    def _decode(self, z: Tensor) -> Tensor:
        self.decoder_calls += 1
        h = _silu(self.dec_gn1(self.dec1(z)))
        h = _silu(self.dec_gn_mid(self.dec_mid(h))) + h
        h = _silu(self.dec_gn2(self.dec2(h)))
        return self.dec_out(h)

    def _forward_batch(self, x: Tensor, path: str, features: Tensor, bypass: bool = True) -> Tensor:
        """Latent for a (B, 3, H, W) batch; features are standardized maps (B, 2n^2)."""
        q = self.svda.forward(features) if bypass else None
        emb = ad.reshape(self.prompts[path], (1, self.config.embed_dim))
        if x.shape[0] > 1:
            emb = emb + Tensor(np.zeros((x.shape[0], 1), dtype=emb.dtype))  # broadcast rows
        z = self._encode(x, q, bypass)
        for _ in range(self.config.denoise_steps):
            z = self._denoise_once(z, emb, q, bypass)
        return z

    # -- persistence helpers ----------------------------------------------------

    def frozen_base_snapshot(self) -> dict:
        return {k: self.named_params()[k].data.copy() for k in self.base_param_names()}


def _prepare_input(image) -> tuple[np.ndarray, tuple]:
    img = as_image_array(image)
    h, w, c = img.shape
    if c == 1:
        img = np.repeat(img, 3, axis=2)
    # downscale 4 plus one 2x stage inside the denoiser: pad to a multiple of 8
    ph = (-h) % 8
    pw = (-w) % 8
    if ph or pw:
        img = np.pad(img, ((0, ph), (0, pw), (0, 0)), mode="reflect")
    return img.transpose(2, 0, 1)[None], (h, w)


def degradation_features(model: MultipathModel, image) -> tuple[DegradationMap, np.ndarray]:
    """DegradationMap for an input (stored camera S_f + per-image S_i) and its features."""
    dmap = DegradationMap(
        fwhm_grid=model.fwhm_grid,
        quality_grid=score_quality(image, model.config.grid_n),
    )
    return dmap, standardize_map(dmap)


def forward_path(model: MultipathModel, image, path: str, dmap: DegradationMap | None = None) -> LatentCode:
    """Encode + denoise one image along a prompt path; deterministic.

    The negative path is meant for clean inputs (degradation learning);
    positive/neutral take camera captures.
    """
    if path not in PATHS:
        raise ValueError(f"unknown path {path!r}, expected one of {PATHS}")
    if dmap is None:
        dmap, features = degradation_features(model, image)
    else:
        if dmap.grid_size != model.config.grid_n:
            raise ValueError(f"map grid {dmap.grid_size} vs model grid_n {model.config.grid_n}")
        features = standardize_map(dmap)
    batch, size = _prepare_input(image)
    z = model._forward_batch(Tensor(batch), path, Tensor(features[None, :]))
    return LatentCode(values=z.data[0], image_size=size)


def tunable_decode(model: MultipathModel, z_pos: LatentCode, z_neu: LatentCode, alpha: float) -> np.ndarray:
    """Decode alpha * z_pos + (1 - alpha) * z_neu; output clipped to [0, 1]."""
    if z_pos.values.shape != z_neu.values.shape or z_pos.image_size != z_neu.image_size:
        raise ValueError("latent codes disagree in shape")
    alpha = model.config.clamp_alpha(alpha)
    blend = blend_latents(z_pos.values, z_neu.values, alpha)
    out = model._decode(Tensor(blend[None]))
    h, w = z_pos.image_size
    img = out.data[0].transpose(1, 2, 0)[:h, :w]
    return np.clip(img, 0.0, 1.0).astype(np.float32)


def blend_latents(z_pos: np.ndarray, z_neu: np.ndarray, alpha: float) -> np.ndarray:
    """alpha * z_pos + (1 - alpha) * z_neu; exact at the endpoints."""
    if alpha == 0.0:
        return z_neu.copy()
    if alpha == 1.0:
        return z_pos.copy()
    return (alpha * z_pos + (1.0 - alpha) * z_neu).astype(np.float32)


def restore(model: MultipathModel, image, alphas) -> list:
    """Cache z_pos/z_neu once, then decode each alpha from the cached latents."""
    dmap, _ = degradation_features(model, image)
    z_pos = forward_path(model, image, "positive", dmap)
    z_neu = forward_path(model, image, "neutral", dmap)
    return [tunable_decode(model, z_pos, z_neu, a) for a in alphas]


# -- training -----------------------------------------------------------------


def sample_path(rng: np.random.Generator, probs) -> str:
    """Draw one training path from the categorical distribution (negative, positive, neutral)."""
    return PATHS[rng.choice(3, p=probs)]


def load_pair_dataset(root) -> list:
    """(degraded, clean) float image pairs from a corpus directory."""
    root = Path(root)
    clean_dir = root / "clean"
    degraded_dir = root / "degraded"
    pairs = []
    for clean_path in sorted(clean_dir.glob("*.png")):
        degraded_path = degraded_dir / clean_path.name
        if not degraded_path.exists():
            raise FileNotFoundError(f"missing degraded pair for {clean_path.name}")
        pairs.append((load_png(degraded_path).data, load_png(clean_path, tag="groundtruth").data))
    if not pairs:
        raise ValueError(f"no image pairs under {root}")
    return pairs


def train(
    model: MultipathModel,
    dataset: list,
    steps: int = 3000,
    pretrain_steps: int = 1000,
    batch_size: int = 4,
    lr: float = 2e-3,
    guided_radius: int = 4,
    guided_eps: float = 1e-3,
    log_every: int = 50,
    progress: bool = False,
) -> list:
    """Pretrain the base on the positive path, freeze it, then run multipath
    fine-tuning of the adapters, attention, prompts, and decoder.

    Returns the metrics log (list of dicts, one per logged step).
    """
    from .imaging import guided_lowpass

    if not dataset:
        raise ValueError("empty dataset")
    cfg = model.config
    rng = np.random.default_rng(cfg.seed + 1)

    degraded_np = []
    clean_np = []
    guided_np = []
    feats_degraded = []
    feats_clean = []
    for degraded, clean in dataset:
        d3 = degraded if degraded.shape[2] == 3 else np.repeat(degraded, 3, axis=2)
        c3 = clean if clean.shape[2] == 3 else np.repeat(clean, 3, axis=2)
        degraded_np.append(d3.transpose(2, 0, 1))
        clean_np.append(c3.transpose(2, 0, 1))
        guided_np.append(guided_lowpass(c3, radius=guided_radius, eps=guided_eps).transpose(2, 0, 1))
        feats_degraded.append(standardize_map(DegradationMap(model.fwhm_grid, score_quality(d3, cfg.grid_n))))
        feats_clean.append(standardize_map(DegradationMap(model.fwhm_grid, score_quality(c3, cfg.grid_n))))
    degraded_np = np.stack(degraded_np)
    clean_np = np.stack(clean_np)
    guided_np = np.stack(guided_np)
    feats_degraded = np.stack(feats_degraded)
    feats_clean = np.stack(feats_clean)

    params = model.named_params()
    log: list = []

    def run_phase(phase, n_steps, trainable_names, phase_lr, bypass):
        if n_steps <= 0:
            return
        for name, tensor in params.items():
            tensor.requires_grad = name in trainable_names
        opt = Adam([params[n] for n in sorted(trainable_names)], lr=phase_lr)
        for step in range(n_steps):
            frac = step / max(n_steps - 1, 1)
            opt.lr = phase_lr * (0.25 if frac >= 0.8 else 0.5 if frac >= 0.5 else 1.0)
            if phase == "pretrain":
                path = "positive"
            else:
                path = sample_path(rng, cfg.path_probs)
            idx = rng.integers(0, len(dataset), size=batch_size)
            if path == "negative":
                x, target, feats = clean_np[idx], degraded_np[idx], feats_clean[idx]
            elif path == "positive":
                x, target, feats = degraded_np[idx], clean_np[idx], feats_degraded[idx]
            else:
                x, target, feats = degraded_np[idx], guided_np[idx], feats_degraded[idx]
            z = model._forward_batch(Tensor(x), path, Tensor(feats), bypass=bypass)
            pred = model._decode(z)
            # the multipath phase trains with the full loss; pretraining builds
            # the frozen base (a stand-in for an external prior) on pure MSE
            weight = cfg.perceptual_weight if phase == "multipath" else 0.0
            loss, l2, proxy = reconstruction_loss(pred, Tensor(target), weight)
            loss_val = float(loss.data)
            if not math.isfinite(loss_val):
                raise TrainingDivergedError(step, path, phase_lr)
            opt.zero_grad()
            loss.backward()
            opt.step()
            if step % log_every == 0 or step == n_steps - 1:
                entry = {
                    "phase": phase,
                    "step": step,
                    "path": path,
                    "l2": round(float(l2.data), 6),
                    "proxy": round(float(proxy.data), 6),
                    "loss": round(loss_val, 6),
                }
                log.append(entry)
                if progress:
                    print(f"[{phase}] step {step}: path={path} loss={loss_val:.5f}")

    base = set(model.base_param_names())
    decoder = set(model.decoder_param_names())
    adapters = set(model.adapter_param_names())
    svda = set(model.svda_param_names())
    conditioning = set(model.conditioning_param_names())

    film = {n for n in conditioning if not n.startswith("prompt.")}
    run_phase("pretrain", pretrain_steps, base | decoder | film | {"prompt.positive"}, lr, bypass=False)
    run_phase("multipath", steps, adapters | svda | conditioning | decoder, lr * 0.5, bypass=True)

    for name, tensor in params.items():
        tensor.requires_grad = True  # restore default; freezing is a training-time policy
    model.trained = True
    return log


def generate_pseudo_pairs(model: MultipathModel, clean_dir, out_dir) -> dict:
    """Run the trained negative path on clean images to manufacture degraded twins."""
    if not model.trained:
        raise UntrainedModelError(
            "pseudo-pair generation needs a trained negative path; train the model first"
        )
    clean_paths = sorted(Path(clean_dir).glob("*.png"))
    if not clean_paths:
        raise ValueError(f"no PNG images under {clean_dir}")
    out = Path(out_dir)
    (out / "clean").mkdir(parents=True, exist_ok=True)
    (out / "degraded").mkdir(parents=True, exist_ok=True)
    for i, path in enumerate(clean_paths):
        clean = load_png(path, tag="groundtruth").data
        dmap, _ = degradation_features(model, clean)
        z = forward_path(model, clean, "negative", dmap)
        pseudo = tunable_decode(model, z, z, alpha=1.0)
        save_png(out / "degraded" / f"{i:06d}.png", pseudo, tag="pseudo")
        save_png(out / "clean" / f"{i:06d}.png", clean)
    manifest = {"pseudo": True, "count": len(clean_paths), "source": str(clean_dir)}
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2))
    return manifest


# -- persistence ----------------------------------------------------------------


def save_model(path, model: MultipathModel) -> None:
    params = model.named_params()
    names = sorted(params)
    payload = bytearray()
    tensors = []
    for name in names:
        arr = np.ascontiguousarray(params[name].data, dtype="<f4")
        tensors.append({"name": name, "shape": list(arr.shape), "offset": len(payload)})
        payload.extend(arr.tobytes())
    header = {
        "format": "DMDF",
        "version": VERSION,
        "config": json.loads(model.config.to_json()),
        "fwhm_grid": [[float(v) for v in row] for row in model.fwhm_grid],
        "trained": model.trained,
        "tensors": tensors,
        "payload_sha256": hashlib.sha256(bytes(payload)).hexdigest(),
    }
    header_bytes = json.dumps(header, indent=1).encode()
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<II", VERSION, len(header_bytes)))
        fh.write(header_bytes)
        fh.write(bytes(payload))


def load_model(path) -> MultipathModel:
    blob = Path(path).read_bytes()
    if blob[:4] != MAGIC:
        raise ModelFormatError(f"{path}: bad magic {blob[:4]!r}")
    version, header_len = struct.unpack_from("<II", blob, 4)
    if version != VERSION:
        raise ModelFormatError(f"{path}: unsupported version {version}")
    header = json.loads(blob[12 : 12 + header_len].decode())
    payload = blob[12 + header_len :]
    if hashlib.sha256(payload).hexdigest() != header["payload_sha256"]:
        raise ChecksumError(f"{path}: payload checksum mismatch (truncated or corrupt)")
    config = ModelConfig(**{k: tuple(v) if isinstance(v, list) else v for k, v in header["config"].items()})
    model = MultipathModel(config, np.asarray(header["fwhm_grid"], dtype=np.float32))
    params = model.named_params()
    for spec in header["tensors"]:
        tensor = params[spec["name"]]
        count = int(np.prod(spec["shape"])) if spec["shape"] else 1
        arr = np.frombuffer(payload, dtype="<f4", count=count, offset=spec["offset"])
        tensor.data = arr.reshape(spec["shape"]).astype(np.float32, copy=True)
    model.trained = bool(header["trained"])
    return model


def model_sha256(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()
