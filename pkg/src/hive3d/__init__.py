"""Hive-plot sequence DDoS detection with a from-scratch 3D CNN.

Modules: ``flowsim`` (synthetic traces), ``hiveplot`` (8-frame rendering),
``tensor`` (reverse-mode autodiff), ``model`` (3D CNN), ``attacks``
(FGSM/PGD/augmentation), ``trainer``, ``evaluator``, ``store`` (binary
persistence) and ``cli``.
"""
__version__ = "0.1.0"
