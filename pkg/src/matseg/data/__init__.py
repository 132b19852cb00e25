from .checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from .dataset import Sample, load_dataset, load_images, save_dataset, split_dataset, stack
from .phantom import PhantomConfig, generate_phantom, generate_phantoms
from .tensorfile import decode_tensor, encode_tensor, load_tensor, save_tensor

__all__ = [
    "Checkpoint", "load_checkpoint", "save_checkpoint",
    "Sample", "load_dataset", "load_images", "save_dataset", "split_dataset", "stack",
    "PhantomConfig", "generate_phantom", "generate_phantoms",
    "decode_tensor", "encode_tensor", "load_tensor", "save_tensor",
]
