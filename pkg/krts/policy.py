"""Entity-based transformer actor-critic.

Every occupied cell becomes one entity row: a position encoding (raw one-hot
of the cell index, or that one-hot times a trainable embedding) followed by
the cell's 27 observation features. Rows are ordered agent units, enemy
units, neutral mines; within a block by row-major grid position. The actor
reads the agent rows, the critic aggregates all rows per block.
"""
import logging
from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from krts.autograd import (
    MASK_VALUE, Parameter, Tensor, concat, exp, getitem, linear, log_softmax, mask_fill,
)
from krts.config import ModelConfig
from krts.engine import (
    COMPONENT_OFFSETS, COMPONENT_WIDTHS, NUM_COMPONENTS, OBS_FEATURES, OBS_GROUP_OFFSETS,
    OWNER_ENEMY, OWNER_NONE, OWNER_SELF,
)
from krts.nn import (
    EncoderConfig, EncoderLayerWeights, InitConfig, create_encoder, encode_stack, init_bias,
    init_weight,
)

log = logging.getLogger(__name__)

ACTION_WIDTH = sum(COMPONENT_WIDTHS)
GROUP_ORDER = (OWNER_SELF, OWNER_ENEMY, OWNER_NONE)
NUM_GROUPS = len(GROUP_ORDER)

# published totals for (height, width, position embedding)
REFERENCE_PARAMETER_COUNTS = {
    (8, 8, False): 645470,
    (16, 16, True): 661854,
}


class NoControllableUnitsError(Exception):
    pass


class ZeroProbabilityActionError(Exception):
    pass


class PositionEmbedding:
    """One-hot cell positions, optionally projected by a trainable matrix."""

    def __init__(self, cells: int, weight: Optional[Parameter] = None, dtype=np.float64):
        self.cells = cells
        self.weight = weight
        self.dtype = np.dtype(dtype)

    @classmethod
    def create(
        cls, cells: int, enabled: bool, dim: int, init: InitConfig, rng: np.random.Generator,
        dtype=np.float64,
    ) -> "PositionEmbedding":
        weight = init_weight("embedding.weight", (cells, dim), init, rng, dtype) if enabled else None
        return cls(cells, weight, dtype)

    @property
    def enabled(self) -> bool:
        return self.weight is not None

    @property
    def width(self) -> int:
        return self.weight.shape[1] if self.weight is not None else self.cells

    def encode(self, positions: np.ndarray) -> Tensor:
        positions = np.asarray(positions, dtype=np.int64)
        if self.weight is None:
            return Tensor(np.eye(self.cells, dtype=self.dtype)[positions])
        return getitem(self.weight, positions)

    def parameters(self) -> List[Parameter]:
        return [self.weight] if self.weight is not None else []


def entity_order(obs: np.ndarray) -> Tuple[np.ndarray, Tuple[int, int, int]]:
    """Flat cell indices of the entities in ``obs`` plus the (agent, enemy, neutral) counts."""
    h, w, _ = obs.shape
    owner_o, type_o = OBS_GROUP_OFFSETS[2], OBS_GROUP_OFFSETS[3]
    flat = obs.reshape(h * w, OBS_FEATURES)
    occupied = flat[:, type_o] == 0
    blocks = [np.flatnonzero(occupied & (flat[:, owner_o + owner] == 1)) for owner in GROUP_ORDER]
    return np.concatenate(blocks).astype(np.int64), tuple(len(b) for b in blocks)


@dataclass
class EntityMatrix:
    rows: Tensor
    counts: Tuple[int, int, int]
    positions: np.ndarray

    @property
    def width(self) -> int:
        return self.rows.shape[-1]

    @property
    def entities(self) -> int:
        return self.rows.shape[0]


def feature_map(obs: np.ndarray, embedding: PositionEmbedding) -> EntityMatrix:
    positions, counts = entity_order(obs)
    h, w, _ = obs.shape
    if embedding.cells != h * w:
        raise ValueError(f"Embedding covers {embedding.cells} cells, observation has {h * w}")
    features = obs.reshape(h * w, OBS_FEATURES)[positions].astype(embedding.dtype)
    rows = concat([embedding.encode(positions), Tensor(features)], axis=-1)
    return EntityMatrix(rows=rows, counts=counts, positions=positions)


@dataclass
class EntityBatch:
    """Entity rows of several observations padded to a common length."""
    positions: np.ndarray  # B x E cell indices
    features: np.ndarray  # B x E x 27
    valid: np.ndarray  # B x E
    groups: np.ndarray  # B x E x 3 block membership
    counts: np.ndarray  # B x 3
    active: np.ndarray  # B x E rows that choose an action this tick
    component_mask: np.ndarray  # B x E x 78

    @property
    def size(self) -> int:
        return self.positions.shape[0]

    @property
    def max_entities(self) -> int:
        return self.positions.shape[1]

    @classmethod
    def from_observations(
        cls,
        observations: Sequence[np.ndarray],
        source_masks: Optional[Sequence[np.ndarray]] = None,
        component_masks: Optional[Sequence[np.ndarray]] = None,
    ) -> "EntityBatch":
        orders = [entity_order(obs) for obs in observations]
        batch = len(observations)
        longest = max([1] + [len(positions) for positions, _ in orders])
        positions = np.zeros((batch, longest), dtype=np.int64)
        features = np.zeros((batch, longest, OBS_FEATURES), dtype=np.int8)
        valid = np.zeros((batch, longest), dtype=bool)
        groups = np.zeros((batch, longest, NUM_GROUPS), dtype=bool)
        counts = np.zeros((batch, NUM_GROUPS), dtype=np.int64)
        active = np.zeros((batch, longest), dtype=bool)
        component_mask = np.zeros((batch, longest, ACTION_WIDTH), dtype=bool)
        for b, (obs, (cells, block_counts)) in enumerate(zip(observations, orders)):
            h, w, _ = obs.shape
            n = len(cells)
            positions[b, :n] = cells
            features[b, :n] = obs.reshape(h * w, OBS_FEATURES)[cells]
            valid[b, :n] = True
            counts[b] = block_counts
            start = 0
            for g, count in enumerate(block_counts):
                groups[b, start:start + count, g] = True
                start += count
            k = block_counts[0]
            if source_masks is None:
                active[b, :k] = True
            else:
                active[b, :k] = np.asarray(source_masks[b]).reshape(h * w)[cells[:k]]
            if component_masks is None:
                component_mask[b, :k] = True
            else:
                component_mask[b, :k] = np.asarray(component_masks[b]).reshape(h * w, ACTION_WIDTH)[cells[:k]]
        return cls(
            positions=positions, features=features, valid=valid, groups=groups,
            counts=counts, active=active, component_mask=component_mask,
        )


@dataclass
class ActorHead:
    weight: Parameter
    bias: Parameter

    @classmethod
    def create(
        cls, model_dim: int, init: InitConfig, rng: np.random.Generator, dtype=np.float64,
    ) -> "ActorHead":
        return cls(
            weight=init_weight("actor.weight", (model_dim, ACTION_WIDTH), init, rng, dtype),
            bias=init_bias("actor.bias", (ACTION_WIDTH,), init, dtype),
        )

    def __call__(self, y: Tensor) -> Tensor:
        return linear(y, self.weight, self.bias)

    def parameters(self) -> List[Parameter]:
        return [self.weight, self.bias]


@dataclass
class CriticHead:
    """Per-entity value head plus per-block weights on the block sum and mean.

    ``aggregate_weight[0]``/``aggregate_bias[0]`` apply to block sums,
    index 1 to block means; columns follow agent, enemy, neutral.
    """
    weight: Parameter
    bias: Parameter
    aggregate_weight: Parameter
    aggregate_bias: Parameter

    @classmethod
    def create(
        cls, model_dim: int, init: InitConfig, rng: np.random.Generator, dtype=np.float64,
    ) -> "CriticHead":
        return cls(
            weight=init_weight("critic.weight", (model_dim, 1), init, rng, dtype),
            bias=init_bias("critic.bias", (1,), init, dtype),
            aggregate_weight=init_weight("critic.aggregate_weight", (2, NUM_GROUPS), init, rng, dtype),
            aggregate_bias=init_bias("critic.aggregate_bias", (2, NUM_GROUPS), init, dtype),
        )

    def entity_values(self, y: Tensor) -> Tensor:
        out = linear(y, self.weight, self.bias)
        return out.reshape(out.shape[:-1])

    def parameters(self) -> List[Parameter]:
        return [self.weight, self.bias, self.aggregate_weight, self.aggregate_bias]


def actor_logits(y: Tensor, head: ActorHead, controlled: int) -> Tensor:
    """Sub-action logits for the first ``controlled`` rows of an encoded e x d matrix."""
    if controlled == 0:
        raise NoControllableUnitsError("Agent has no units to control")
    return head(y[:controlled])


def critic_value(y: Tensor, groups: np.ndarray, head: CriticHead) -> Tensor:
    """State value: a scalar for an e x d matrix, one per sample for B x E x d."""
    groups = np.asarray(groups, dtype=bool)
    unbatched = y.ndim == 2
    if unbatched:
        y = y.reshape(1, *y.shape)
        groups = groups.reshape(1, *groups.shape)
    values = head.entity_values(y)
    membership = groups.astype(y.dtype)
    sums = (values.reshape(*values.shape, 1) * Tensor(membership)).sum(axis=1)
    counts = np.maximum(membership.sum(axis=1), 1.0)
    means = sums * (1.0 / counts)
    w, b = head.aggregate_weight, head.aggregate_bias
    value = (sums * w[0]).sum(axis=-1) + (means * w[1]).sum(axis=-1) + b.sum()
    return value.reshape(()) if unbatched else value


def normalize_mask(mask: np.ndarray) -> np.ndarray:
    """Leaves index 0 as the only choice of every fully masked component."""
    mask = np.array(mask, dtype=bool)
    for offset, width in zip(COMPONENT_OFFSETS, COMPONENT_WIDTHS):
        empty = ~mask[..., offset:offset + width].any(axis=-1)
        mask[..., offset][empty] = True
    return mask


def mask_logits(logits: Tensor, mask: np.ndarray) -> Tensor:
    return mask_fill(logits, normalize_mask(mask))


@dataclass
class FactoredDistribution:
    """Independent categoricals, one per component of every active row."""
    log_probs: List[Tensor]  # per component: B x E x width
    active: np.ndarray  # B x E

    @classmethod
    def from_logits(
        cls, logits: Tensor, mask: np.ndarray, active: np.ndarray,
    ) -> "FactoredDistribution":
        masked = mask_logits(logits, mask)
        log_probs = [
            log_softmax(masked[..., offset:offset + width], axis=-1)
            for offset, width in zip(COMPONENT_OFFSETS, COMPONENT_WIDTHS)
        ]
        return cls(log_probs=log_probs, active=np.asarray(active, dtype=bool))

    def probabilities(self, component: int) -> np.ndarray:
        return np.exp(self.log_probs[component].data)


@dataclass
class SampledActions:
    actions: np.ndarray  # B x E x 7
    log_prob: np.ndarray  # B
    entropy: np.ndarray  # B


def _sample_rows(probs: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    cumulative = np.cumsum(probs, axis=-1)
    # u in (0, 1] never lands on a zero-probability prefix
    u = 1.0 - rng.random(len(probs))
    picks = (cumulative < (u * cumulative[:, -1])[:, None]).sum(axis=-1)
    return np.minimum(picks, probs.shape[-1] - 1)


def sample_joint(dist: FactoredDistribution, rng: np.random.Generator) -> SampledActions:
    batch, entities = dist.active.shape
    actions = np.zeros((batch, entities, NUM_COMPONENTS), dtype=np.int64)
    rows = np.nonzero(dist.active)
    for component in range(NUM_COMPONENTS):
        probs = dist.probabilities(component)[rows]
        if len(probs):
            actions[rows + (component,)] = _sample_rows(probs, rng)
    return SampledActions(
        actions=actions,
        log_prob=log_prob_of(dist, actions).data.copy(),
        entropy=entropy_of(dist).data.copy(),
    )


def log_prob_of(dist: FactoredDistribution, actions: np.ndarray) -> Tensor:
    """Per-sample joint log-probability of entity ``actions`` (B x E x 7)."""
    active = dist.active
    total = None
    for component, (log_prob, width) in enumerate(zip(dist.log_probs, COMPONENT_WIDTHS)):
        chosen = np.eye(width, dtype=log_prob.dtype)[actions[..., component]] * active[..., None]
        picked = (log_prob * Tensor(chosen)).sum(axis=-1)
        if (picked.data[active] <= MASK_VALUE / 2).any():
            raise ZeroProbabilityActionError(
                f"Action component {component} has zero probability under the current masks"
            )
        total = picked if total is None else total + picked
    return total.sum(axis=-1)


def entropy_of(dist: FactoredDistribution) -> Tensor:
    active = Tensor(dist.active.astype(dist.log_probs[0].dtype))
    total = None
    for log_prob in dist.log_probs:
        entropy = -(exp(log_prob) * log_prob).sum(axis=-1)
        total = entropy if total is None else total + entropy
    return (total * active).sum(axis=-1)


def to_joint_actions(batch: EntityBatch, actions: np.ndarray, cells: int) -> np.ndarray:
    """Scatter entity actions into B x cells x 7 joint actions indexed by source cell."""
    joint = np.zeros((batch.size, cells, NUM_COMPONENTS), dtype=np.int64)
    b, e = np.nonzero(batch.active)
    joint[b, batch.positions[b, e]] = actions[b, e]
    return joint


def from_joint_actions(batch: EntityBatch, joint: np.ndarray) -> np.ndarray:
    actions = np.zeros((batch.size, batch.max_entities, NUM_COMPONENTS), dtype=np.int64)
    b, e = np.nonzero(batch.active)
    actions[b, e] = joint[b, batch.positions[b, e]]
    return actions


@dataclass
class PolicyOutput:
    encoded: Tensor
    logits: Tensor
    dist: FactoredDistribution
    values: Tensor


class EntityPolicy:
    def __init__(self, config: ModelConfig, height: int, width: int, seed: int = 0):
        self.config = config
        self.height = height
        self.width = width
        self.dtype = config.numpy_dtype()
        rng = np.random.default_rng(seed)
        init = config.init_config()
        self.embedding = PositionEmbedding.create(
            height * width, config.position_embedding, config.embedding_dim, init, rng, self.dtype,
        )
        self.model_dim = self.embedding.width + OBS_FEATURES
        self.encoder_config: EncoderConfig = config.encoder_config(self.model_dim)
        self.encoder: List[EncoderLayerWeights] = create_encoder(
            self.encoder_config, init, rng, self.dtype,
        )
        self.actor = ActorHead.create(self.model_dim, init, rng, self.dtype)
        self.critic = CriticHead.create(self.model_dim, init, rng, self.dtype)
        log.debug(f"Created policy for {height}x{width} with {self.parameter_count()} parameters")

    @property
    def cells(self) -> int:
        return self.height * self.width

    def parameters(self) -> List[Parameter]:
        params = list(self.embedding.parameters())
        for layer in self.encoder:
            params.extend(layer.parameters())
        return params + self.actor.parameters() + self.critic.parameters()

    def named_parameters(self) -> List[Tuple[str, Parameter]]:
        return [(param.name, param) for param in self.parameters()]

    def parameter_count(self) -> int:
        return sum(param.data.size for param in self.parameters())

    def state_dict(self) -> Dict[str, np.ndarray]:
        """Read-only copies of every parameter value."""
        state = {}
        for name, param in self.named_parameters():
            value = param.data.copy()
            value.setflags(write=False)
            state[name] = value
        return state

    def load_state_dict(self, state: Dict[str, np.ndarray]):
        for name, param in self.named_parameters():
            if name not in state:
                raise KeyError(f"Parameter '{name}' missing from state")
            value = np.asarray(state[name])
            if value.shape != param.shape:
                raise ValueError(f"Parameter '{name}' has shape {value.shape}, expected {param.shape}")
            param.data = value.astype(self.dtype, copy=True)

    def embed(self, batch: EntityBatch) -> Tensor:
        features = Tensor(batch.features.astype(self.dtype))
        return concat([self.embedding.encode(batch.positions), features], axis=-1)

    def forward(
        self, batch: EntityBatch, rng: Optional[np.random.Generator] = None, training: bool = False,
    ) -> PolicyOutput:
        encoded = encode_stack(
            self.embed(batch), self.encoder_config, self.encoder, rng, training, batch.valid,
        )
        logits = self.actor(encoded)
        dist = FactoredDistribution.from_logits(logits, batch.component_mask, batch.active)
        values = critic_value(encoded, batch.groups, self.critic)
        return PolicyOutput(encoded=encoded, logits=logits, dist=dist, values=values)


@dataclass
class ParameterCountReport:
    blocks: Dict[str, int]
    total: int
    reference: Optional[int]
    # aggregate biases are only ever summed, so all but one are redundant
    redundant_biases: int = 0

    @property
    def difference(self) -> Optional[int]:
        return None if self.reference is None else self.total - self.reference

    @property
    def relative_difference(self) -> Optional[float]:
        return None if self.reference is None else self.difference / self.reference

    @property
    def unexplained_difference(self) -> Optional[int]:
        return None if self.reference is None else self.difference - self.redundant_biases

    def lines(self) -> List[str]:
        lines = [f"{name}: {count}" for name, count in self.blocks.items()]
        lines.append(f"total: {self.total}")
        if self.reference is not None:
            lines.append(
                f"reference: {self.reference} (difference {self.difference:+d}, "
                f"{self.relative_difference:+.6%})"
            )
            if self.redundant_biases:
                lines.append(
                    f"critic_aggregate bias: {self.redundant_biases + 1} entries act as one effective "
                    f"bias, {self.redundant_biases} redundant; unexplained difference "
                    f"{self.unexplained_difference:+d}"
                )
        return lines


def parameter_count_report(config: ModelConfig, height: int, width: int) -> ParameterCountReport:
    model = EntityPolicy(config, height, width)
    blocks = {
        "embedding": sum(p.data.size for p in model.embedding.parameters()),
        "encoder": sum(p.data.size for layer in model.encoder for p in layer.parameters()),
        "actor": sum(p.data.size for p in model.actor.parameters()),
        "critic_entity": model.critic.weight.data.size + model.critic.bias.data.size,
        "critic_aggregate": (
            model.critic.aggregate_weight.data.size + model.critic.aggregate_bias.data.size
        ),
    }
    reference = REFERENCE_PARAMETER_COUNTS.get((height, width, config.position_embedding))
    return ParameterCountReport(
        blocks=blocks,
        total=sum(blocks.values()),
        reference=reference,
        redundant_biases=model.critic.aggregate_bias.data.size - 1,
    )
