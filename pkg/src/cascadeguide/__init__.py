"""Low-resolution guided multi-resolution latent diffusion at desk scale."""
