"""LiDAR odometry against a sparse semantic occupancy grid."""

from .grid import MappingConfig, OccupancyGrid, VoxelData, VoxelKey, integrate_scan
from .pipeline import OdometryState, PipelineConfig, load_config, process_scan
from .preprocess import Scan
from .registration import RegistrationConfig, register_scan
from .se3 import Pose, exp_map, log_map

__version__ = "0.1.0"
