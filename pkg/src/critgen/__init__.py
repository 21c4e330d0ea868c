"""Critical-scenario curriculum for highway driving policies.

Submodules: ``scenario`` (configurations and their database), ``traffic``
(simulator), ``risk`` (surrogate safety measures), ``highd`` (trajectory
ingestion and driver clustering), ``ppo`` (policy optimisation), ``loop``
(criticality statistics and configuration selection), ``llm`` (chat-model
suggestions), ``experiments`` (training arms), ``report`` and ``cli``.
"""

__version__ = "0.1.0"
