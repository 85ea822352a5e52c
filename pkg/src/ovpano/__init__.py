from .cloud import FeatureField, PointCloud, load_cloud, save_cloud, voxel_downsample  # noqa: F401

__version__ = "0.1.0"
