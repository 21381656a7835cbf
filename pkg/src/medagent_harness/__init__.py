"""Medical multi-agent pipelines with pluggable LLM backbones and a fold-based benchmark harness."""

__version__ = "0.1.0"
