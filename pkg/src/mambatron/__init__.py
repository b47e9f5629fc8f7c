"""MambaTron: selective-scan context plus block attention for point-cloud completion."""
from .blockattn import BlockConfig, block_attention, block_layer, block_partition, full_attention
from .cell import CellParams, Encoder, mambatron_forward
from .config import RunConfig
from .geometry import AffineParams, apr, evolve_affine, fps, knn_group, path_length, xyz_order
from .model import MambaTronNet, forward
from .objective import chamfer, chamfer_metric, fscore, project, style_loss
from .ssm import MambaLayer, bidirectional_context, chunked_scan, selective_scan

__version__ = "0.1.0"
