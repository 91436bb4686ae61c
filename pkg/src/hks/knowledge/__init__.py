"""Server-side knowledge store: logit cache, hash index, cluster hierarchy."""
from .cache import KnowledgeCache, LogitRecord, SampleId
from .hashing import RandomProjectionEncoder, encode_hash, HashVector
from .hierarchy import ClusterPath, ClusterTree, Merge, agglomerate, build_hierarchy, cluster_path
from .hnsw import HnswIndex, exact_knn
from .teachers import Granularity, fedcache_teacher, feddistill_teacher, fetch_teacher

__all__ = [
    "KnowledgeCache",
    "LogitRecord",
    "SampleId",
    "RandomProjectionEncoder",
    "encode_hash",
    "HashVector",
    "ClusterPath",
    "ClusterTree",
    "Merge",
    "agglomerate",
    "build_hierarchy",
    "cluster_path",
    "HnswIndex",
    "exact_knn",
    "Granularity",
    "fetch_teacher",
    "feddistill_teacher",
    "fedcache_teacher",
]
