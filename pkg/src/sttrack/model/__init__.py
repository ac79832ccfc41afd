from .backbone import Backbone, Bottleneck
from .heads import CornerHead, MLPBoxHead, ScoreHead, corners_from_maps, modulate_search_features, soft_argmax
from .net import ModelConfig, Prediction, TrackerNet
from .transformer import (
    Decoder,
    Encoder,
    MultiHeadAttention,
    TokenSequence,
    attention,
    build_sequence,
    position_embedding,
    scaled_dot_product,
)
