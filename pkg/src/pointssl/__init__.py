"""Self-supervised point-cloud pretraining with dual-masked autoencoding,
graph-based differentiable clustering, balanced transport assignment targets,
and stop-gradient global contrastive learning."""

from .tensor import Tensor, softmax, stop_gradient, ShapeError, DomainError
from .pointcloud import (PointCloud, PatchSet, MiniPointNet,
                         farthest_point_sample, knn, build_patches, embed_patches)
from .backbone import (MaskPair, ViTStack, sample_masks, encode, decode,
                       save_checkpoint, load_checkpoint)
from .graph import AffinityGraph, build_graph
from .clustering import (ClusterHead, SinkhornConfig, SinkhornResult,
                         message_pass, cluster_scores, pool_centers,
                         sinkhorn_assign, chamfer, center_loss, assignment_loss)
from .contrastive import global_pool, siamese_distance, contrastive_loss
from .config import TrainConfig, MetricsRecord
from .optim import AdamW, cosine_lr
from .data import SyntheticShape, generate_dataset
from .train import Model, build_model, forward_cloud, train_step, run_pretraining
from .probe import linear_probe

__version__ = "0.1.0"
