"""Desk-scale domain-oriented masked-LM training.

A small transformer encoder is trained jointly on masked-token prediction
and domain classification; the learned domain embeddings drive an online
sampler that re-balances the training stream toward the target domain and
its discovered relevant domains.
"""

__version__ = "0.1.0"
