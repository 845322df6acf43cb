"""Visual/geometric representation pathway.

Covers the frozen patch codec (stand-in for a pretrained VAE), the semantic
embedding MLP, the noise embedding with its schedule, the learnable Fourier
time encoding, the spatiotemporal embedding, and the projection into token
space. All trainable pieces register themselves in a ModelState; the codec
weights are frozen buffers with the decoder pinned to the encoder's
pseudo-inverse so encode/decode is analytically lossless.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from u4d import autodiff as ad
from u4d.autodiff import Tensor
from u4d.errors import ConfigError, ContractError, ShapeError
from u4d.scenes import _quat_to_rot, project_point
from u4d.state import ModelState

TWO_PI = 2.0 * np.pi


# ---------------------------------------------------------------------------
# noise schedule
# ---------------------------------------------------------------------------

@dataclass
class NoiseSchedule:
    """Per-step noise magnitudes alpha_t > 0 normalized so they sum to sigma_total."""

    T: int
    kind: str = "linear"
    sigma_total: float = 1.0
    alphas: np.ndarray = field(init=False)

    def __post_init__(self):
        if self.T < 1:
            raise ConfigError("noise schedule needs T >= 1")
        if self.sigma_total <= 0:
            raise ConfigError("sigma_total must be positive")
        t = np.arange(1, self.T + 1, dtype=np.float64)
        if self.kind == "linear":
            w = t
        elif self.kind == "cosine":
            w = 1.0 - np.cos(np.pi * t / self.T)
        else:
            raise ConfigError(f"unknown schedule kind {self.kind!r}")
        self.alphas = self.sigma_total * w / w.sum()
        assert np.all(self.alphas > 0)


# ---------------------------------------------------------------------------
# frozen vision codec (pretrained VAE stand-in)
# ---------------------------------------------------------------------------

class VisionCodec:
    """Per-patch linear encode/decode pair, fixed at init.

    The decoder weight is the pseudo-inverse of the encoder so that with the
    default zero positional offset decode(encode(x)) == x whenever
    d_v >= patch*patch*channels.
    """

    def __init__(self, state: ModelState, height: int, width: int, channels: int,
                 patch: int, d_v: int, rng: np.random.Generator):
        if height % patch or width % patch:
            raise ConfigError(f"frame size {height}x{width} not divisible by patch {patch}")
        self.height, self.width, self.channels, self.patch = height, width, channels, patch
        self.grid = (height // patch, width // patch)
        self.num_patches = self.grid[0] * self.grid[1]
        self.patch_dim = patch * patch * channels
        self.d_v = d_v
        enc = ad.xavier_uniform(rng, self.patch_dim, d_v)
        self.enc_w = state.add_buffer("vae.enc_w", enc)
        self.enc_pos = state.add_buffer("vae.enc_pos", np.zeros((self.num_patches, d_v)))
        self.dec_w = state.add_buffer("vae.dec_w", np.linalg.pinv(enc))
        self.dec_b = state.add_buffer("vae.dec_b", np.zeros(self.patch_dim))

    def patchify(self, frames: np.ndarray) -> np.ndarray:
        v, f, h, w, c = frames.shape
        if (h, w, c) != (self.height, self.width, self.channels):
            raise ShapeError(f"frames {frames.shape[2:]} do not match codec "
                             f"({self.height}, {self.width}, {self.channels})")
        gh, gw, p = self.grid[0], self.grid[1], self.patch
        x = frames.reshape(v, f, gh, p, gw, p, c)
        x = x.transpose(0, 1, 2, 4, 3, 5, 6)  # [V,F,gh,gw,p,p,c]
        return x.reshape(v, f, self.num_patches, self.patch_dim)

    def unpatchify(self, patches: np.ndarray, v: int, f: int) -> np.ndarray:
        gh, gw, p, c = self.grid[0], self.grid[1], self.patch, self.channels
        x = patches.reshape(v, f, gh, gw, p, p, c).transpose(0, 1, 2, 4, 3, 5, 6)
        return x.reshape(v, f, self.height, self.width, c)

    def encode(self, frames: np.ndarray) -> Tensor:
        """frames [V,F,H,W,C] -> visual latent z_v [V,F,P,d_v]."""
        patches = self.patchify(np.asarray(frames, dtype=np.float64))
        z = patches @ self.enc_w.data + self.enc_pos.data
        return Tensor(z)

    def encode_t(self, frames: Tensor) -> Tensor:
        """Tape-aware encode for gradient checks through the codec."""
        v, f, h, w, c = frames.data.shape
        gh, gw, p = self.grid[0], self.grid[1], self.patch
        x = ad.reshape(frames, (v, f, gh, p, gw, p, c))
        x = ad.transpose(x, (0, 1, 2, 4, 3, 5, 6))
        x = ad.reshape(x, (v * f * self.num_patches, self.patch_dim))
        z = ad.matmul(x, self.enc_w)
        z = ad.reshape(z, (v, f, self.num_patches, self.d_v))
        return ad.add(z, self.enc_pos)

    def decode(self, tokens, v: int, f: int) -> np.ndarray:
        """Visual-latent tokens [N_vis, d_v] -> frames [V,F,H,W,C] clamped to [0,1]."""
        data = tokens.data if isinstance(tokens, Tensor) else np.asarray(tokens, dtype=np.float64)
        if data.ndim != 2 or data.shape[0] != v * f * self.num_patches:
            raise ShapeError(
                f"decode expected {v * f * self.num_patches} tokens, got shape {data.shape}"
            )
        patches = data @ self.dec_w.data + self.dec_b.data
        frames = self.unpatchify(patches.reshape(v, f, self.num_patches, self.patch_dim), v, f)
        return np.clip(frames, 0.0, 1.0)


# ---------------------------------------------------------------------------
# task-specific embeddings
# ---------------------------------------------------------------------------

def build_semantic_embed(state: ModelState, d_v: int, d_fuse: int, hidden: int,
                         rng: np.random.Generator):
    state.add("se.w1", ad.xavier_uniform(rng, d_v, hidden), "embeddings")
    state.add("se.b1", np.zeros(hidden), "embeddings")
    state.add("se.w2", ad.xavier_uniform(rng, hidden, d_fuse), "embeddings")
    state.add("se.b2", np.zeros(d_fuse), "embeddings")


def semantic_embed(state: ModelState, z_v: Tensor) -> Tensor:
    """Deterministic 2-layer MLP over the visual latent (understanding branch)."""
    v, f, p, d = z_v.data.shape
    x = ad.reshape(z_v, (v * f * p, d))
    h = ad.gelu(ad.add(ad.matmul(x, state.weight("se.w1")), state.tensor("se.b1")))
    out = ad.add(ad.matmul(h, state.weight("se.w2")), state.tensor("se.b2"))
    return ad.reshape(out, (v, f, p, out.data.shape[-1]))


def build_noise_embed(state: ModelState, d_v: int, d_a: int, rng: np.random.Generator):
    state.add("ne.w", ad.xavier_uniform(rng, d_v, d_a), "embeddings")
    state.add("ne.b", np.zeros(d_a), "embeddings")


def noise_linear(state: ModelState, z_v: Tensor) -> Tensor:
    """The noiseless appearance branch W_a z_v."""
    v, f, p, d = z_v.data.shape
    x = ad.reshape(z_v, (v * f * p, d))
    out = ad.add(ad.matmul(x, state.weight("ne.w")), state.tensor("ne.b"))
    return ad.reshape(out, (v, f, p, out.data.shape[-1]))


def apply_noise(wz: Tensor, m: np.ndarray, alpha: float, eps: np.ndarray) -> Tensor:
    """Appearance features with step noise: wz + m * alpha * eps (m in {0,1} per token)."""
    m = np.asarray(m)
    if m.dtype != bool and not np.all(np.isin(m, (0, 1))):
        raise ContractError("noise mask m must be boolean per token")
    m = m.astype(np.float64)
    if m.shape != wz.data.shape[:-1]:
        raise ShapeError(f"noise mask shape {m.shape} does not match tokens {wz.data.shape[:-1]}")
    eps = np.asarray(eps, dtype=np.float64)
    if eps.shape != wz.data.shape:
        raise ShapeError(f"eps shape {eps.shape} does not match features {wz.data.shape}")
    offset = m[..., None] * (float(alpha) * eps)
    return ad.add(wz, Tensor(offset))


def noise_embed(state: ModelState, z_v: Tensor, m: np.ndarray, t: int,
                eps: np.ndarray, sched: NoiseSchedule) -> Tensor:
    if not 1 <= t <= sched.T:
        raise ContractError(f"diffusion step t={t} outside 1..{sched.T}")
    return apply_noise(noise_linear(state, z_v), m, sched.alphas[t - 1], eps)


# ---------------------------------------------------------------------------
# spatiotemporal pathway
# ---------------------------------------------------------------------------

def build_fourier(state: ModelState, n_freq: int, rng: np.random.Generator):
    if n_freq < 1:
        raise ConfigError("n_freq must be >= 1")
    state.add("ste.freqs", 2.0 ** np.arange(n_freq, dtype=np.float64), "ste")


def fourier_time(state: ModelState, t: np.ndarray) -> Tensor:
    """[F] timestamps -> [F, 2*n_freq] learnable sin/cos features."""
    t = np.asarray(t, dtype=np.float64).reshape(-1, 1)
    freqs = ad.reshape(state.tensor("ste.freqs"), (1, -1))
    phase = ad.scale(ad.mul(Tensor(t), freqs), TWO_PI)
    return ad.concat([ad.sin(phase), ad.cos(phase)], axis=1)


def build_spatiotemporal(state: ModelState, d_g: int, d_fuse: int, n_freq: int,
                         rng: np.random.Generator):
    build_fourier(state, n_freq, rng)
    state.add("ste.geo_posi_w", ad.xavier_uniform(rng, 6, d_g), "ste")
    state.add("ste.geo_posi_b", np.zeros(d_g), "ste")
    state.add("ste.geo_pose_w", ad.xavier_uniform(rng, 7, d_g), "ste")
    state.add("ste.geo_pose_b", np.zeros(d_g), "ste")
    win = d_g + 2 * n_freq
    state.add("ste.w4d_posi", ad.xavier_uniform(rng, win, d_fuse), "ste")
    state.add("ste.b4d_posi", np.zeros(d_fuse), "ste")
    state.add("ste.w4d_pose", ad.xavier_uniform(rng, win, d_fuse), "ste")
    state.add("ste.b4d_pose", np.zeros(d_fuse), "ste")


def patch_plane_points(poses: np.ndarray, codec: VisionCodec) -> np.ndarray:
    """World-space point of each patch center on the camera plane: [V, P, 3]."""
    gh, gw, p = codec.grid[0], codec.grid[1], codec.patch
    scale = min(codec.height, codec.width) / 2.0 / 1.3
    rows = (np.arange(gh) + 0.5) * p - 0.5
    cols = (np.arange(gw) + 0.5) * p - 0.5
    cr = (codec.height - 1) / 2.0
    cc = (codec.width - 1) / 2.0
    out = np.zeros((poses.shape[0], codec.num_patches, 3))
    for v, pose in enumerate(poses):
        rot = _quat_to_rot(pose[:4])
        k = 0
        for r in rows:
            for c in cols:
                cam = np.array([(c - cc) / scale, -(r - cr) / scale, 0.0])
                out[v, k] = pose[4:] + rot @ cam
                k += 1
    return out


def raw_geometry(poses: np.ndarray, positions: np.ndarray, codec: VisionCodec) -> np.ndarray:
    """Ground-truth geometry features per (view, frame, patch): [V, F, P, 6].

    First three dims: the patch's world plane point. Last three: object
    positions averaged with soft weights by projected pixel distance, the
    stand-in for a pointmap from a geometry encoder.
    """
    n_views = poses.shape[0]
    n_obj, n_frames = positions.shape[:2]
    plane = patch_plane_points(poses, codec)  # [V,P,3]
    gh, gw, p = codec.grid[0], codec.grid[1], codec.patch
    prow = np.repeat((np.arange(gh) + 0.5) * p - 0.5, gw)
    pcol = np.tile((np.arange(gw) + 0.5) * p - 0.5, gh)
    out = np.zeros((n_views, n_frames, codec.num_patches, 6))
    for v in range(n_views):
        out[v, :, :, :3] = plane[v][None]
        for f in range(n_frames):
            w = np.zeros((n_obj, codec.num_patches))
            for o in range(n_obj):
                r, c = project_point(poses[v], positions[o, f], codec.height, codec.width)
                d2 = (prow - r) ** 2 + (pcol - c) ** 2
                w[o] = np.exp(-d2 / 8.0)
            denom = w.sum(axis=0) + 1e-6
            out[v, f, :, 3:] = (w[:, :, None] * positions[:, f][:, None, :]).sum(axis=0) / denom[:, None]
    return out


def geometric_latents(state: ModelState, poses: np.ndarray, positions: np.ndarray,
                      codec: VisionCodec):
    """Trainable linear maps over ground-truth geometry: z_posi [V,F,P,d_g], z_pose [V,d_g]."""
    raw = raw_geometry(poses, positions, codec)
    v, f, p, _ = raw.shape
    flat = Tensor(raw.reshape(v * f * p, 6))
    z_posi = ad.add(ad.matmul(flat, state.weight("ste.geo_posi_w")), state.tensor("ste.geo_posi_b"))
    z_posi = ad.reshape(z_posi, (v, f, p, -1))
    z_pose = ad.add(ad.matmul(Tensor(poses), state.weight("ste.geo_pose_w")),
                    state.tensor("ste.geo_pose_b"))
    return z_posi, z_pose


def spatiotemporal_embed(state: ModelState, z_posi: Tensor, z_pose: Tensor,
                         t: np.ndarray, mode: str = "spatiotemporal"):
    """4D features: ([V,F,P,d_fuse] position stream, [V,F,1,d_fuse] pose stream).

    mode "spatial" zeroes the time block; the output then no longer depends on
    the timestamp values.
    """
    if mode not in ("spatial", "spatiotemporal"):
        raise ConfigError(f"unknown embedding mode {mode!r} for the 4D feature path")
    v, f, p, d_g = z_posi.data.shape
    t = np.asarray(t, dtype=np.float64)
    if t.shape != (f,):
        raise ShapeError(f"timestamps shape {t.shape} does not match the frame axis {f}")
    if mode == "spatial":
        n_freq = state.tensor("ste.freqs").data.shape[0]
        ft = Tensor(np.zeros((f, 2 * n_freq)))
    else:
        ft = fourier_time(state, t)
    two_n = ft.data.shape[1]

    ft_posi = ad.reshape(ft, (1, f, 1, two_n))
    ft_posi = ad.add(ft_posi, Tensor(np.zeros((v, f, p, two_n))))  # broadcast via add
    x_posi = ad.concat([ad.reshape(z_posi, (v, f, p, d_g)), ft_posi], axis=3)
    flat = ad.reshape(x_posi, (v * f * p, d_g + two_n))
    f4d_posi = ad.add(ad.matmul(flat, state.weight("ste.w4d_posi")), state.tensor("ste.b4d_posi"))
    f4d_posi = ad.reshape(f4d_posi, (v, f, p, -1))

    pose_rep = ad.reshape(z_pose, (v, 1, d_g))
    pose_rep = ad.add(pose_rep, Tensor(np.zeros((v, f, d_g))))
    ft_pose = ad.add(ad.reshape(ft, (1, f, two_n)), Tensor(np.zeros((v, f, two_n))))
    x_pose = ad.concat([pose_rep, ft_pose], axis=2)
    f4d_pose = ad.add(ad.matmul(ad.reshape(x_pose, (v * f, d_g + two_n)),
                                state.weight("ste.w4d_pose")), state.tensor("ste.b4d_pose"))
    f4d_pose = ad.reshape(f4d_pose, (v, f, 1, -1))
    return f4d_posi, f4d_pose


# ---------------------------------------------------------------------------
# projection into token space
# ---------------------------------------------------------------------------

def build_projector(state: ModelState, d_fuse: int, d_model: int, rng: np.random.Generator):
    state.add("proj.w1", ad.xavier_uniform(rng, d_fuse, d_model), "projector")
    state.add("proj.b1", np.zeros(d_model), "projector")
    state.add("proj.w2", ad.xavier_uniform(rng, d_model, d_model), "projector")
    state.add("proj.b2", np.zeros(d_model), "projector")


def project_tokens(state: ModelState, f_uni: Tensor) -> Tensor:
    """Flatten (V,F,P) view-major/time-second/patch-third and MLP to model width."""
    v, f, p, d = f_uni.data.shape
    x = ad.reshape(f_uni, (v * f * p, d))
    h = ad.gelu(ad.add(ad.matmul(x, state.weight("proj.w1")), state.tensor("proj.b1")))
    return ad.add(ad.matmul(h, state.weight("proj.w2")), state.tensor("proj.b2"))


def token_index_to_vfp(i: int, f: int, p: int):
    """Inverse of the projection's flattening order."""
    return i // (f * p), (i // p) % f, i % p
