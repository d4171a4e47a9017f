"""Multichannel keyword spotting with attention-based channel fusion.

Submodules: ``array_sim`` (array and lab simulation), ``frontend`` (beams,
noise cancellation, log-Mel), ``net`` (SVDF detector, attention fusion),
``detect`` (events), ``training``, ``evaluation``, ``corpus``, ``bench`` and
``pipeline`` (the end-to-end recipe), plus the ``mkws`` command.
"""

__version__ = "0.1.0"
