"""Experiment harness: workload and fault injection, measurement and reports."""

from push0.harness.report import ExperimentReport, describe, merge, percentile

__all__ = ["ExperimentReport", "describe", "merge", "percentile"]
