"""Conditional denoising diffusion over LiDAR range images: trains on
degraded/clean pairs and serves generated scans through a file spool."""

from .encoding import denormalize_scan, fourier_pe, normalize_scan
from .model import ConditionalDenoiser, build_model
from .sampling import ddim_sample, finalize_scan
from .schedule import DiffusionConfig, Schedule, ddim_step, q_sample, sampling_timesteps
from .spool import serve_spool
from .training import PairCorpus, epsilon_loss, load_model, save_model, train, train_step
from .wavelet import haar_down, haar_up

__version__ = "0.1.0"
