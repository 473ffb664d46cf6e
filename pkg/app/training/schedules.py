# app/training/schedules.py
import math

from app.core.models import OptimizerSettings, ScheduleKind


def cosine_schedule(step: int, total_steps: int, base_lr: float, warmup_steps: int = 0) -> float:
    """Linear warm-up reaching base_lr on the last warm-up step, then cosine decay to 0 at total_steps.

    Warm-up step k uses base_lr * (k + 1) / warmup_steps so the first update is never a no-op.
    """
    if step < 0:
        raise ValueError("step must be non-negative")
    if step < warmup_steps:
        return base_lr * (step + 1) / warmup_steps
    if step >= total_steps:
        return 0.0
    progress = (step - warmup_steps) / (total_steps - warmup_steps)
    return base_lr * 0.5 * (1.0 + math.cos(math.pi * progress))


def learning_rate(settings: OptimizerSettings, step: int, total_steps: int, warmup_steps: int) -> float:
    if settings.schedule is ScheduleKind.CONSTANT:
        if step < warmup_steps:
            return settings.base_lr * (step + 1) / warmup_steps
        return settings.base_lr
    return cosine_schedule(step, total_steps, settings.base_lr, warmup_steps)
