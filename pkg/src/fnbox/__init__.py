"""Streaming program-aided QA with an induced, shared, periodically trimmed toolbox.

The engine feeds examples to a language model in three interaction modes,
executes every sampled program in a sandbox, picks answers by execution
agreement, grows a library of model-written helper functions, and prunes the
library on a logarithmic usage threshold. Baseline pipelines (primitives-only
and per-example tool creation), ordering ablations, metric reports, and a
human-verification export/serve workflow ride on the same core.
"""

__version__ = "0.1.0"
