"""Robot action-sequence generation from instruction-video features.

Subpackages:

* :mod:`avaction.numerics` - float64 autograd, attention, losses, Adam
* :mod:`avaction.model` - audio-visual/text encoders, caption and action
  decoders, proposal generator, semantic classifier
* :mod:`avaction.training` - multi-task, classifier and weakly-supervised phases
* :mod:`avaction.data` - synthetic kitchen world and manifest I/O
* :mod:`avaction.decode` - greedy/beam decoding with task-knowledge masks
* :mod:`avaction.metrics` - BLEU, METEOR, error rates, task success
* :mod:`avaction.dmp` - dynamic movement primitives and a kitchen executor
"""

__version__ = "0.1.0"
