"""Diffusion backends producing pixel-space score-distillation gradients.

The gradient returned for an image x is s(m) * (eps_pred - eps) pulled back
through the noising map z_m = sqrt(abar_m) E(resize(x)) + sqrt(1-abar_m) eps,
i.e. the denoiser Jacobian is skipped and the encoder/resize Jacobian is
applied by reverse-mode differentiation.

Two backends:
  * ToyLatentDiffusion — a small untrained latent model with frozen seeded
    weights. Exercises the full contract (determinism, classifier-free
    guidance, weighting modes, encoder pullback) without pretrained assets.
  * load_pretrained(...) — loads a diffusers latent text-to-image
    checkpoint when the diffusers package and weights are available.
"""

from __future__ import annotations

import hashlib

import numpy as np
import torch
import torch.nn.functional as F

NUM_TIMESTEPS = 1000


def _alpha_bars(num_steps=NUM_TIMESTEPS):
    betas = torch.linspace(1e-4, 0.02, num_steps, dtype=torch.float64)
    return torch.cumprod(1.0 - betas, dim=0).float()


class ToyLatentDiffusion:
    """Deterministic stand-in latent diffusion model.

    Encoder: two frozen strided convolutions, 64x64x3 -> 4x8x8 latents.
    Denoiser: a frozen MLP conditioned on the timestep and a prompt
    embedding derived by hashing the prompt text.
    """

    input_size = 64
    latent_shape = (4, 8, 8)
    model_id = "toy-latent-v1"

    def __init__(self, weight_seed: int = 1234):
        gen = torch.Generator().manual_seed(weight_seed)
        self.enc1 = torch.randn(16, 3, 4, 4, generator=gen) * 0.25
        self.enc2 = torch.randn(4, 16, 2, 2, generator=gen) * 0.25
        lat = int(np.prod(self.latent_shape))
        d_in = lat + 1 + 32
        self.w1 = torch.randn(128, d_in, generator=gen) * (d_in ** -0.5)
        self.b1 = torch.zeros(128)
        self.w2 = torch.randn(lat, 128, generator=gen) * (128 ** -0.5)
        self.b2 = torch.zeros(lat)
        self.alpha_bar = _alpha_bars()

    # -- components ----------------------------------------------------------

    def prompt_embedding(self, prompt: str) -> torch.Tensor:
        digest = hashlib.sha256(prompt.encode("utf-8")).digest()
        seed = int.from_bytes(digest[:8], "little") % (2 ** 31)
        gen = torch.Generator().manual_seed(seed)
        return torch.randn(32, generator=gen)

    def encode(self, image_chw: torch.Tensor) -> torch.Tensor:
        x = image_chw[None]
        if x.shape[-2:] != (self.input_size, self.input_size):
            x = F.interpolate(x, size=(self.input_size, self.input_size),
                              mode="bilinear", align_corners=False)
        h = torch.tanh(F.conv2d(x, self.enc1, stride=4))
        return F.conv2d(h, self.enc2, stride=2)[0]

    def denoise(self, z_m: torch.Tensor, m: int,
                emb: torch.Tensor) -> torch.Tensor:
        inp = torch.cat([z_m.reshape(-1),
                         torch.tensor([m / NUM_TIMESTEPS]), emb])
        h = torch.tanh(self.w1 @ inp + self.b1)
        return (self.w2 @ h + self.b2).reshape(self.latent_shape)

    # -- the endpoint's work ---------------------------------------------------

    def pixel_gradient(self, image_hwc: np.ndarray, prompt: str,
                       guidance_scale: float, timestep_range, seed: int,
                       weighting: dict):
        """Returns (gradient (H, W, 3) float32, m, s_m)."""
        gen = torch.Generator().manual_seed(seed & 0x7FFFFFFF)
        lo, hi = timestep_range
        hi = min(hi, NUM_TIMESTEPS - 1)
        m = int(torch.randint(lo, hi + 1, (1,), generator=gen))
        abar = self.alpha_bar[m]

        x = torch.as_tensor(np.ascontiguousarray(image_hwc, np.float32))
        x = x.permute(2, 0, 1).requires_grad_(True)
        z = self.encode(x)
        eps = torch.randn(z.shape, generator=gen)
        z_m = abar.sqrt() * z + (1 - abar).sqrt() * eps

        with torch.no_grad():
            eps_cond = self.denoise(z_m, m, self.prompt_embedding(prompt))
            eps_uncond = self.denoise(z_m, m, self.prompt_embedding(""))
            eps_pred = eps_uncond + guidance_scale * (eps_cond - eps_uncond)

        mode = weighting.get("mode", "constant")
        w_scale = float(weighting.get("scale", 1.0))
        s_m = w_scale if mode == "constant" else w_scale * float(1 - abar)

        cotangent = s_m * (eps_pred - eps)
        (grad,) = torch.autograd.grad((z_m * cotangent).sum(), x)
        return (grad.permute(1, 2, 0).numpy().astype(np.float32), m, s_m)


def load_pretrained(model_path: str, device: str = "cpu"):
    """Wrap a pretrained diffusers latent text-to-image checkpoint.

    Requires the optional ``diffusers`` dependency and downloaded weights;
    the v- vs eps-parameterization is read from the scheduler config.
    """
    try:
        from diffusers import StableDiffusionPipeline  # noqa: PLC0415
    except ImportError as exc:
        raise RuntimeError(
            "pretrained backend requires the 'diffusers' package") from exc
    pipe = StableDiffusionPipeline.from_pretrained(model_path)
    pipe.to(device)
    return PretrainedLatentDiffusion(pipe, model_path)


class PretrainedLatentDiffusion:
    input_size = 512

    def __init__(self, pipe, model_id: str):
        self.pipe = pipe
        self.model_id = model_id
        self.alpha_bar = pipe.scheduler.alphas_cumprod.float()
        pred_type = pipe.scheduler.config.get("prediction_type", "epsilon")
        self.v_parameterized = pred_type == "v_prediction"

    def _text_embedding(self, prompt: str):
        tok = self.pipe.tokenizer(prompt, padding="max_length",
                                  max_length=self.pipe.tokenizer.model_max_length,
                                  truncation=True, return_tensors="pt")
        return self.pipe.text_encoder(tok.input_ids)[0]

    def pixel_gradient(self, image_hwc, prompt, guidance_scale,
                       timestep_range, seed, weighting):
        gen = torch.Generator().manual_seed(seed & 0x7FFFFFFF)
        lo, hi = timestep_range
        hi = min(hi, len(self.alpha_bar) - 1)
        m = int(torch.randint(lo, hi + 1, (1,), generator=gen))
        abar = self.alpha_bar[m]

        x = torch.as_tensor(np.ascontiguousarray(image_hwc, np.float32))
        x = x.permute(2, 0, 1)[None].requires_grad_(True)
        resized = F.interpolate(x, size=(self.input_size, self.input_size),
                                mode="bilinear", align_corners=False)
        z = self.pipe.vae.encode(resized * 2 - 1).latent_dist.mean
        z = z * self.pipe.vae.config.scaling_factor
        eps = torch.randn(z.shape, generator=gen)
        z_m = abar.sqrt() * z + (1 - abar).sqrt() * eps

        with torch.no_grad():
            emb = torch.cat([self._text_embedding(""),
                             self._text_embedding(prompt)])
            t = torch.tensor([m, m])
            pred = self.pipe.unet(torch.cat([z_m, z_m]), t,
                                  encoder_hidden_states=emb).sample
            uncond, cond = pred.chunk(2)
            pred = uncond + guidance_scale * (cond - uncond)
            if self.v_parameterized:
                pred = abar.sqrt() * pred + (1 - abar).sqrt() * z_m

        mode = weighting.get("mode", "constant")
        w_scale = float(weighting.get("scale", 1.0))
        s_m = w_scale if mode == "constant" else w_scale * float(1 - abar)

        cotangent = s_m * (pred - eps)
        (grad,) = torch.autograd.grad((z_m * cotangent).sum(), x)
        return (grad[0].permute(1, 2, 0).numpy().astype(np.float32), m, s_m)
