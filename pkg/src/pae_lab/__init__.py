"""pae-lab: a desk-scale vision-language-model laboratory.

Trains a tiny from-scratch VLM on procedurally generated scenes with a
pixel-value-prediction pretraining task, then evaluates referring
segmentation (as per-pixel querying) and imitation game playing.
"""

__version__ = "0.1.0"
