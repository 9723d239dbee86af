"""Personalised federated learning with a per-client mixture of a shared and a private expert.

Modules: ``nn`` (numpy layers with hand-written backward passes), ``models``
(CNN zoo, gate, MoE), ``data`` (datasets and non-IID partitions), ``fed``
(federation loop), ``metrics`` (accuracy, costs, logs), ``config`` and
``cli`` (experiment runner).
"""

__version__ = "0.1.0"
