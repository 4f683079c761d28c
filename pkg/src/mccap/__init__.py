"""Multiple-choice caption comprehension workbench.

Builds adversarial multiple-choice caption datasets from paired
image-embedding/caption corpora, trains a ladder of comprehension models
over them, and collects human-rater judgments through an HTTP service.
"""

__version__ = "0.1.0"
