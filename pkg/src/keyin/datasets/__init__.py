from .base import Dataset, Episode, add_noise, read_dataset, read_manifest, write_dataset
from .push2d import Push2DState, demo_push2d, push2d_step, render_push2d
from .sbm import gen_sbm

__all__ = [
    "Dataset",
    "Episode",
    "Push2DState",
    "add_noise",
    "demo_push2d",
    "gen_sbm",
    "push2d_step",
    "read_dataset",
    "read_manifest",
    "render_push2d",
    "write_dataset",
]
