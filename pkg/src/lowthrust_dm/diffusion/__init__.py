"""Conditional denoising diffusion model over initial costates."""
from .model import (ArtifactError, DiffusionModel, Normalizer, TrainingConfig, TrainingError,
                    guided_sample, train)
from .network import Denoiser
from .schedule import NoiseSchedule, cosine_schedule, forward_step, q_sample, schedule_from_betas

__all__ = ["ArtifactError", "DiffusionModel", "Normalizer", "TrainingConfig", "TrainingError",
           "guided_sample", "train", "Denoiser", "NoiseSchedule", "cosine_schedule",
           "forward_step", "q_sample", "schedule_from_betas"]
