"""lfr-tabular: self-supervised representations for tabular data.

An encoder is trained so that small predictor heads can reproduce the
outputs of frozen, randomly initialized projector networks. The package
contains its own numpy autodiff core, the batch-wise Barlow Twins loss,
determinant-based projector selection, a logistic-regression probe and a
command-line interface.
"""

__version__ = "0.1.0"
