"""latentvol: two-stage 3D latent generative modeling for volumetric imaging.

Stage 1 compresses volumes with a vector-quantized adversarial autoencoder;
stage 2 trains a denoising diffusion model in the normalized latent space.
The package also ships the surrounding toolchain: deterministic volume
preprocessing, MS-SSIM diversity evaluation, a synthetic-pretraining transfer
harness, and an HTTP service for blinded reader studies.
"""

__version__ = "0.1.0"
