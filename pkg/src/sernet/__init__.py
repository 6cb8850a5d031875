"""Lightweight fully convolutional speech emotion recognition.

MFCC front-end, a small numpy autograd engine, a three-path CNN
(spectral 9x1, temporal 1x11, local 3x3) with LFLB blocks and a global
average pooling head, plus training/evaluation and efficiency accounting.
"""

__version__ = "0.1.0"
