"""Full segmentation model: encoder, query embedding, decoder, heads.

Instance query parameters are shared across every dataset; only the
semantic queries change with the class-name list, so swapping datasets at
inference needs no parameter surgery.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import torch
from torch import Tensor, nn

from .decoder import DecoderConfig, DecoderOutputs, DualQueryDecoder
from .encoder import MaskFeatureFuser, PyramidEncoder
from .queries import SemanticQueryEmbedder, get_embedder, init_instance_queries


@dataclass
class ModelConfig:
    channels: int = 64
    num_heads: int = 8
    instance_queries: int = 64  # N; shared across datasets (paper-scale: 500)
    decoder_layers: int = 4  # K
    max_threshold: float = 0.01  # query-selection schedule top
    query_selection: bool = True
    query_interaction: bool = True
    ffn_ratio: int = 4
    embedder: str = "trigram-hash"
    embedder_args: dict = field(default_factory=dict)
    seed: int = 0

    def decoder_config(self) -> DecoderConfig:
        return DecoderConfig(
            num_layers=self.decoder_layers,
            num_heads=self.num_heads,
            max_threshold=self.max_threshold,
            query_selection=self.query_selection,
            query_interaction=self.query_interaction,
            ffn_ratio=self.ffn_ratio,
        )

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**d)


class SegmentationModel(nn.Module):
    def __init__(self, config: ModelConfig):
        super().__init__()
        self.config = config
        c = config.channels
        self.encoder = PyramidEncoder(channels=c, num_heads=config.num_heads)
        self.fuser = MaskFeatureFuser(channels=c)
        self.query_embedder = SemanticQueryEmbedder(
            c, get_embedder(config.embedder, **config.embedder_args)
        )
        n = config.instance_queries
        self.instance_queries = nn.Parameter(init_instance_queries(n, c, config.seed))
        # unit-scale positions so query slots are distinguishable from the start
        g = torch.Generator().manual_seed(config.seed + 1)
        self.instance_query_pos = nn.Parameter(torch.randn(n, c, generator=g))
        self.decoder = DualQueryDecoder(c, config.decoder_config())

    def forward(self, images: Tensor, class_names: list[str], min_active: int = 0) -> DecoderOutputs:
        features = self.encoder(images)
        mask_feature = self.fuser(features)
        b = images.shape[0]
        semantic = self.query_embedder(list(class_names)).unsqueeze(0).expand(b, -1, -1)
        instance = self.instance_queries.unsqueeze(0).expand(b, -1, -1)
        instance_pos = self.instance_query_pos.unsqueeze(0).expand(b, -1, -1)
        # the projected name embeddings double as the semantic positions
        return self.decoder(
            features,
            mask_feature,
            semantic,
            instance,
            semantic_pos=semantic,
            instance_pos=instance_pos,
            min_active=min_active,
        )


def build_model(config: ModelConfig) -> SegmentationModel:
    """Construct a model with seed-deterministic parameter initialization."""
    torch.manual_seed(config.seed)
    return SegmentationModel(config)
