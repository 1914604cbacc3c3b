"""Prompt-based self-training for few-shot multi-class text classification.

The package wires a miniature masked-language-model encoder to five
classification heads (a trainable two-layer verbalizer, single and multi
label words, and two linear baselines) and trains them with a FixMatch-style
semi-supervised loop over synthetic corpora.
"""

__version__ = "0.1.0"
