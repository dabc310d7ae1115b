from .metrics import miou
from .networks import ToyWorld, create_task_net, create_world, load_world, save_world
from .sprites import VideoSequence, generate_sequence, load_sequence, save_sequence

__all__ = [
    "miou",
    "ToyWorld", "create_task_net", "create_world", "load_world", "save_world",
    "VideoSequence", "generate_sequence", "load_sequence", "save_sequence",
]
