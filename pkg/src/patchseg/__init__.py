"""Patch-based MRI segmentation CNN with spatial constraints, in numpy.

Modules: ``volume`` (I/O and normalization), ``phantom`` (synthetic data),
``sampling`` (patches and augmentation), ``spatial`` (landmark distances),
``atlas``, ``nn`` (layers and SGD), ``model``, ``metrics`` and ``pipeline``
(training, inference, checkpoints); ``cli`` wires them to the command line.
"""

__version__ = "0.1.0"
