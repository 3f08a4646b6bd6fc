"""Class-incremental audio classification from few labelled clips, built on a
pretrained encoder plus a branch that grows by one block copy per session.

The modules follow the pipeline order: ``frontend`` (log-mel features and
synthetic corpora), ``encoder`` (patch transformer), ``ede`` (the dual-branch
extractor), ``classifier`` (prototypes and embedding replay), ``training``,
``protocol`` (sessions and runs), ``stats`` and ``cli``.
"""

__version__ = "0.1.0"
