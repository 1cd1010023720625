from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .config import DEFAULT_CONFIG, ConfigError, load_config, merge_config
from .dataset import Dataset, DatasetError, load_dataset, load_pose, save_pose
from .images import load_mask, load_png, load_sidecar, save_mask, save_png, save_sidecar
