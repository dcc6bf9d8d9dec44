"""Offline reinforcement learning for lending-pool interest rates.

Pipeline: reserve snapshots -> daily feature series -> transition dataset ->
offline policy (BC, CQL or TD3-BC) -> semi-open-loop replay and metrics.
"""

__version__ = "0.1.0"
