from .compare import CompareConfig, compare_classical_rlhf
from .experiments import CorruptionConfig, TrendConfig, beam_trend_report, localization, run_corruption
from .heatmap import render_heatmap, token_colors
from .tasks import LoadedTask, gen_task, load_task, random_instance
from .verify import VerificationReport, load_tolerances, run_verify_suite


def checkpoint_io(action: str, path, policy=None, mdp=None):
    """``save`` returns the content hash; ``load`` returns the policy."""
    from ..policy import load_checkpoint, save_checkpoint

    if action == "save":
        if policy is None:
            raise ValueError("save needs a policy")
        return save_checkpoint(policy, path)
    if action == "load":
        return load_checkpoint(path, mdp)
    raise ValueError(f"unknown checkpoint action {action!r}")


__all__ = [
    "CompareConfig",
    "CorruptionConfig",
    "LoadedTask",
    "TrendConfig",
    "VerificationReport",
    "beam_trend_report",
    "checkpoint_io",
    "compare_classical_rlhf",
    "gen_task",
    "load_task",
    "load_tolerances",
    "localization",
    "random_instance",
    "render_heatmap",
    "run_corruption",
    "run_verify_suite",
    "token_colors",
]
