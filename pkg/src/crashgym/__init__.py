"""Local-first evaluation gym and repair pipeline for kernel crash bugs.

Compiles patched kernels, runs reproducers in VMs, classifies outcomes, and
drives LLM-based repair agents with non-oracle localization. Executors are
pluggable, so the whole pipeline also runs against a simulated backend and a
record/replay model gateway for deterministic evaluation.
"""

__version__ = "0.1.0"
