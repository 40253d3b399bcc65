"""Vizarel: an RL telemetry server with episode storage and projection."""

from .analytics import (Histogram, MetricsSummary, action_histogram,
                        action_series, metrics, reward_component_series,
                        scalar_reward_series, state_series)
from .errors import (BackpressureError, BoundsError, CorruptionError,
                     FramingError, NotFoundError, ProtocolError, SchemaError,
                     StoreStateError, VizarelError)
from .model import (DType, Episode, EpisodeSummary, Experience,
                    ExperienceBuilder, SessionSchema, StepBatch,
                    build_experiences, compute_return, episode_return,
                    scalar_rewards, segment_episodes)
from .projection import (FeatureMatrix, ProjectionCancelled, ProjectionParams,
                         ProjectionResult, calibrate_affinities,
                         calibrate_conditionals, featurize, kl_and_grad,
                         pairwise_sq_dists, project, subsample)
from .protocol import StreamDecoder, WireMessage
from .server import VizarelServer
from .storage import EpisodeStore

__version__ = "0.1.0"

__all__ = [
    "BackpressureError", "BoundsError", "CorruptionError", "DType", "Episode",
    "EpisodeStore", "EpisodeSummary", "Experience", "ExperienceBuilder",
    "FeatureMatrix", "FramingError", "Histogram", "MetricsSummary",
    "NotFoundError", "ProjectionCancelled", "ProjectionParams",
    "ProjectionResult", "ProtocolError", "pairwise_sq_dists",
    "SchemaError", "SessionSchema", "StepBatch", "StoreStateError",
    "StreamDecoder", "VizarelError", "VizarelServer", "WireMessage",
    "action_histogram", "action_series",
    "build_experiences", "calibrate_affinities", "calibrate_conditionals",
    "compute_return", "episode_return", "featurize", "kl_and_grad", "metrics",
    "project", "reward_component_series", "scalar_reward_series",
    "scalar_rewards", "segment_episodes", "state_series", "subsample",
    "__version__",
]
