import math

from pydantic import BaseModel, ConfigDict, Field, model_validator

from app.core.exceptions import ConfigError
from app.models.graph import Topology

ERROR_FREE = math.inf


class ErrorConfig(BaseModel):
    """Per-node LE SNR and per-directed-edge ME SNR, in dB (inf means error-free).

    ME SNRs default to the sender's entry in `me_db`; `me_edges` overrides single
    directed edges as (sender, receiver, dB).
    """

    model_config = ConfigDict(frozen=True, ser_json_inf_nan="constants")

    le_db: tuple[float, ...]
    me_db: tuple[float, ...]
    me_edges: tuple[tuple[int, int, float], ...] = ()
    faulty_nodes: tuple[int, ...] = Field(default=(), description="informational, 0-based")

    @model_validator(mode="after")
    def check_levels(self) -> "ErrorConfig":
        if len(self.le_db) != len(self.me_db):
            raise ValueError("le_db and me_db need one entry per node")
        for v in (*self.le_db, *self.me_db, *(e[2] for e in self.me_edges)):
            if math.isnan(v) or v == -math.inf:
                raise ValueError("error SNR levels must be finite or +inf")
        return self

    @property
    def node_count(self) -> int:
        return len(self.le_db)

    @classmethod
    def error_free(cls, node_count: int) -> "ErrorConfig":
        return cls(le_db=(ERROR_FREE,) * node_count, me_db=(ERROR_FREE,) * node_count)

    @classmethod
    def uniform(cls, node_count: int, le_db: float = ERROR_FREE, me_db: float = ERROR_FREE) -> "ErrorConfig":
        return cls(le_db=(le_db,) * node_count, me_db=(me_db,) * node_count)

    @classmethod
    def faulty(cls, node_count: int, nodes: list[int], le_db: float, me_db: float) -> "ErrorConfig":
        """Listed (0-based) nodes get the given levels, every other node is error-free."""
        le = [le_db if n in nodes else ERROR_FREE for n in range(node_count)]
        me = [me_db if n in nodes else ERROR_FREE for n in range(node_count)]
        return cls(le_db=tuple(le), me_db=tuple(me), faulty_nodes=tuple(sorted(nodes)))

    def only_le(self) -> "ErrorConfig":
        return self.model_copy(update={"me_db": (ERROR_FREE,) * self.node_count, "me_edges": ()})

    def only_me(self) -> "ErrorConfig":
        return self.model_copy(update={"le_db": (ERROR_FREE,) * self.node_count})

    def me_level(self, sender: int, receiver: int) -> float:
        for k, j, db in self.me_edges:
            if (k, j) == (sender, receiver):
                return db
        return self.me_db[sender]

    def validate_against(self, topology: Topology) -> None:
        if self.node_count != topology.node_count:
            raise ConfigError(f"error config has {self.node_count} nodes, topology has {topology.node_count}")
        directed = set(topology.directed_edges())
        for k, j, _ in self.me_edges:
            if (k, j) not in directed:
                raise ConfigError(f"ME override on {k + 1}->{j + 1}, which is not a topology edge")
