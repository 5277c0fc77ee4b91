"""Supervised contrastive mesh VAE: spiral-convolution autoencoder with
classification/regression contrastive disentanglement, a synthetic torus
dataset generator and a disentanglement/generative metrics suite."""

from .mesh import TriMesh, SpiralIndexSet, compute_spirals, load_mesh, mesh_volume, save_mesh
from .hierarchy import SamplingHierarchy, build_hierarchy
from .torusgen import TorusFactors, generate_dataset, generate_torus, read_manifest
from .model import LatentCode, MeshVAE, ModelConfig, load_checkpoint, save_checkpoint
from .losses import LossBreakdown, LossConfig, contrastive_cls, contrastive_reg, total_loss, vae_loss
from .metrics import EvalReport, chamfer, emd, knn_predict, one_nna, one_sample_ttest, pbc, pcc, recon_error, sap
from .trainer import TrainConfig, TrainLog, evaluate, train

__all__ = [
    "TriMesh", "SpiralIndexSet", "compute_spirals", "load_mesh", "mesh_volume", "save_mesh",
    "SamplingHierarchy", "build_hierarchy",
    "TorusFactors", "generate_dataset", "generate_torus", "read_manifest",
    "LatentCode", "MeshVAE", "ModelConfig", "load_checkpoint", "save_checkpoint",
    "LossBreakdown", "LossConfig", "contrastive_cls", "contrastive_reg", "total_loss", "vae_loss",
    "EvalReport", "chamfer", "emd", "knn_predict", "one_nna", "one_sample_ttest",
    "pbc", "pcc", "recon_error", "sap",
    "TrainConfig", "TrainLog", "evaluate", "train",
]

__version__ = "0.1.0"
