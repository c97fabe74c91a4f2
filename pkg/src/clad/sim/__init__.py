from .env import ArmState, WorldState, forward_kinematics, render, step, wrap_angle
from .tasks import N_TASKS, TASKS, get_task, initial_world, success
from .expert import UnreachableWaypointError, scripted_expert
from .dataset import Dataset, DatasetError, EpisodeRecord, generate_dataset, load_dataset, run_episode

__all__ = [
    "ArmState", "WorldState", "forward_kinematics", "render", "step", "wrap_angle",
    "N_TASKS", "TASKS", "get_task", "initial_world", "success",
    "UnreachableWaypointError", "scripted_expert",
    "Dataset", "DatasetError", "EpisodeRecord", "generate_dataset", "load_dataset", "run_episode",
]
