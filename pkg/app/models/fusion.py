import numpy as np
from pydantic import BaseModel, Field

from app.core.exceptions import ConfigError
from app.models.graph import Topology


class NodeWeights(BaseModel):
    """Two-stage fusion output for one node.

    `members` is the closed neighborhood (node first). `c` and `w` are unit vectors
    over the members; `scale` is the convergence normalization s_j applied to the
    self-normalized coefficients c / c[0]; `threshold` is on the engine decision scale.
    """

    node: int
    members: list[int]
    c: list[float]
    w: list[float]
    scale: float = 1.0
    threshold: float = 0.0
    fallback: bool = False


class FusionWeights(BaseModel):
    """Per-node fusion weights, serializable as the weights file."""

    nodes: list[NodeWeights] = Field(default_factory=list)

    def node(self, j: int) -> NodeWeights:
        for entry in self.nodes:
            if entry.node == j:
                return entry
        raise KeyError(j)

    def thresholds(self) -> np.ndarray:
        return np.array([n.threshold for n in sorted(self.nodes, key=lambda n: n.node)])

    def to_engine(self, topology: Topology) -> tuple[np.ndarray, np.ndarray]:
        """Message coefficients C and decision weights W for the linear engine.

        C[j, k] = s_j c_jk / c_jj and W[j, k] = w_jk / (w_jj s_j), so that
        W[j, k] C[j, k] is proportional to w_jk c_jk; W[j, j] = 1.
        """
        n = topology.node_count
        C = np.zeros((n, n))
        W = np.ones((n, n))
        for entry in self.nodes:
            j = entry.node
            c = np.asarray(entry.c)
            w = np.asarray(entry.w)
            ratio = c / c[0]
            for pos, k in enumerate(entry.members[1:], start=1):
                C[j, k] = entry.scale * ratio[pos]
                W[j, k] = w[pos] / (w[0] * entry.scale)
        return C, W

    def validate_against(self, topology: Topology) -> None:
        """One entry per node whose members are its closed neighborhood, node first."""
        labels = sorted(entry.node for entry in self.nodes)
        if labels != list(range(topology.node_count)):
            raise ConfigError(f"weights cover nodes {[j + 1 for j in labels]}, topology has {topology.node_count}")
        for entry in self.nodes:
            expected = list(topology.closed_neighborhood(entry.node))
            if entry.members != expected:
                raise ConfigError(
                    f"weights of node {entry.node + 1} list members {[k + 1 for k in entry.members]}, "
                    f"expected {[k + 1 for k in expected]}"
                )
            if not (len(entry.c) == len(entry.w) == len(expected)):
                raise ConfigError(f"weights of node {entry.node + 1} need one c and one w per member")
            if entry.c[0] == 0.0 or entry.w[0] == 0.0:
                raise ConfigError(f"weights of node {entry.node + 1} have a zero self entry")

    def relabel(self, offset: int) -> "FusionWeights":
        """Shift node labels by `offset` (+1 for weights files, -1 when reading them back)."""
        return FusionWeights(nodes=[
            entry.model_copy(update={
                "node": entry.node + offset,
                "members": [k + offset for k in entry.members],
            })
            for entry in self.nodes
        ])
