"""
Mesh-group enumeration.

Tensor parallelism stays inside a node, so a mesh group is one partition of
every node's GPUs into meshes of 1, 2, 4 or 8 GPUs. Two groups that give the
same multiset of per-node partitions are isomorphic and only one is kept.
"""
import logging
from itertools import combinations_with_replacement
from typing import Iterable, List, Optional, Tuple

from apps.cost_model.domain import LLMSpec

from .domain import Cluster, Mesh

logger = logging.getLogger(__name__)

MESH_SIZES = (8, 4, 2, 1)

MeshGroup = Tuple[Mesh, ...]


def node_partitions(gpus: int, largest: int = 8) -> List[Tuple[int, ...]]:
    """
    Partitions of ``gpus`` into mesh sizes, parts non-increasing.

    Largest meshes come first: 4 GPUs give (4,), (2, 2), (2, 1, 1), (1, 1, 1, 1).
    """
    if gpus == 0:
        return [()]
    partitions = []
    for size in MESH_SIZES:
        if size > largest or size > gpus:
            continue
        for rest in node_partitions(gpus - size, size):
            partitions.append((size,) + rest)
    return partitions


def _build_group(cluster: Cluster, per_node: Iterable[Tuple[int, ...]]) -> MeshGroup:
    meshes = []
    for node, sizes in enumerate(per_node):
        next_gpu = node * cluster.gpus_per_node
        for size in sizes:
            meshes.append(Mesh(tuple(range(next_gpu, next_gpu + size)), node=node))
            next_gpu += size
    return tuple(meshes)


def enumerate_mesh_groups(cluster: Cluster, llms: Optional[Iterable[LLMSpec]] = None,
                          usable_fraction: float = 1.0) -> List[MeshGroup]:
    """
    Candidate mesh groups for ``cluster``.

    When ``llms`` is given, groups whose usable memory cannot hold all weights,
    or whose largest mesh cannot hold the largest model, are pruned.
    """
    partitions = node_partitions(cluster.gpus_per_node)
    if not partitions or sum(partitions[0]) != cluster.gpus_per_node:
        raise ValueError(f"gpus_per_node={cluster.gpus_per_node} cannot be split into meshes")

    llms = list(llms or [])
    total_weights = sum(spec.weight_bytes for spec in llms)
    largest_weight = max((spec.weight_bytes for spec in llms), default=0)
    per_gpu = cluster.gpu_memory_bytes * usable_fraction

    groups = []
    pruned = 0
    for per_node in combinations_with_replacement(partitions, cluster.num_nodes):
        group = _build_group(cluster, per_node)
        largest_mesh = max(mesh.size for mesh in group)
        if per_gpu * cluster.total_gpus < total_weights or per_gpu * largest_mesh < largest_weight:
            pruned += 1
            continue
        groups.append(group)
    logger.debug(f"{len(groups)} mesh groups for {cluster.num_nodes}x{cluster.gpus_per_node} GPUs "
                 f"({pruned} pruned by memory)")
    return groups


def describe_group(group: MeshGroup) -> str:
    return ' '.join(f"n{mesh.node}:{mesh.size}" for mesh in group)
