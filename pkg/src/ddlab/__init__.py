"""Distribution distillation loss laboratory.

Soft-histogram similarity distributions, KL and order losses between an
easy-sample teacher and hard-sample students, an angular-margin softmax
term, and a synthetic easy/hard identity benchmark to exercise them.
"""

__version__ = "0.1.0"
