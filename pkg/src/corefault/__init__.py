"""Fault analysis for 5G-core packet captures.

Two detectors run over frame summaries of a capture: a transition graph
learned from successful call flows (:mod:`corefault.golden_flow`) and a
per-protocol bag-of-words linear SVM (:mod:`corefault.ai_engine`).  Their
verdicts are fused into a fault report (:mod:`corefault.triage`) that can be
turned into a retrieval-augmented troubleshooting prompt (:mod:`corefault.rag`).
"""

__version__ = "0.1.0"
