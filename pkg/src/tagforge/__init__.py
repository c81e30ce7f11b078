"""Text-attributed graph synthesis with agent-guided node generation."""

from .graph import (
    GraphSchemaError,
    GraphValidationError,
    NodeRecord,
    SynthesizedDelta,
    TextAttributedGraph,
    graph_stats,
    load_graph,
    save_graph,
)
from .community import (
    EmbeddingTable,
    ModularityParams,
    Partition,
    detect_communities,
    semantic_modularity,
)
from .perception import (
    EnhancementMode,
    PerceptionParams,
    build_report,
    personalized_pagerank,
    sample_knowledge,
    select_seed,
)
from .limiter import LimiterParams, property_tensor, sample_limited, sample_limited_detailed
from .gateway import (
    AuditLog,
    HttpProvider,
    MockProvider,
    PermanentProviderError,
    ProviderConfig,
    StructuredOutputError,
    TransportError,
)
from .synthesis import SynthesisConfig, SynthesisResult, run_synthesis

__version__ = "0.1.0"

__all__ = [
    "AuditLog",
    "EmbeddingTable",
    "EnhancementMode",
    "GraphSchemaError",
    "GraphValidationError",
    "HttpProvider",
    "LimiterParams",
    "MockProvider",
    "ModularityParams",
    "NodeRecord",
    "Partition",
    "PerceptionParams",
    "PermanentProviderError",
    "ProviderConfig",
    "StructuredOutputError",
    "SynthesisConfig",
    "SynthesisResult",
    "SynthesizedDelta",
    "TextAttributedGraph",
    "TransportError",
    "build_report",
    "detect_communities",
    "graph_stats",
    "load_graph",
    "personalized_pagerank",
    "property_tensor",
    "run_synthesis",
    "sample_knowledge",
    "sample_limited",
    "sample_limited_detailed",
    "save_graph",
    "select_seed",
    "semantic_modularity",
    "__version__",
]
