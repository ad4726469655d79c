"""Longitudinal 3D volume classification at desk scale.

A shared 3D-CNN encoder turns each visit of a subject's volume sequence
into a compact feature; a future-visit pooling layer, a GRU, and a sigmoid
head produce one progression score per visit.  Training combines weighted
cross entropy, a hinge penalty on score decreases for progressing cohorts,
and L2 regularization of the recurrent/linear weights.  Everything runs on
a small tape-based reverse-mode autodiff engine.
"""

__version__ = "0.1.0"
