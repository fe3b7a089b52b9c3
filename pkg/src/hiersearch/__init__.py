"""Hierarchical deep-search sessions.

A planner model decomposes a question into subtasks delegated through a
special-token protocol; a coordinator routes each subtask to a
tool-using expert, distills the expert's reasoning, and feeds the
distilled result plus a shared memory back to the planner.
"""

from .backend import (Backend, BackendError, Completion, FinishReason,
                      GenerationRequest, HttpChatBackend, Message, SamplingParams,
                      ScriptedBackend, count_tokens, make_request)
from .config import AppConfig, ConfigError, Runtime, load_config
from .coordinator import Coordinator, DistillationReport, ExpertProfile, SelectionDecision
from .evaluate import (BenchmarkItem, ItemResult, JudgeVerdict, RunMetrics,
                       count_interactions, judge, load_dataset, metrics_from_rows,
                       run_benchmark)
from .executors import (ExpertDefinition, ExpertRegistry, ExpertTranscript,
                        ToolInteraction, default_expert_definitions, run_tool_loop)
from .memory import FactEntry, MemoryStore, ResourceEntry, merge_facts, upsert_resources
from .planner import (Session, SessionRunner, SessionStatus, Subtask,
                      extract_final_answer)
from .protocol import (Block, MarkerKind, MarkerTable, StreamScanner,
                       UnbalancedMarkerError, default_markers, extract_blocks,
                       sanitize_payload, scan_stream, scan_text, serialize_events,
                       wrap_result)
from .tools import (FixtureCodeAdapter, FixtureMediaAdapter, FixturePageAdapter,
                    FixtureSearchAdapter, SandboxCodeAdapter, ToolInvoker)
from .trace import TraceEvent, Tracer, load_trace

__version__ = "0.1.0"

__all__ = [name for name in dir() if not name.startswith("_")]
