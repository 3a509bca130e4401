"""Category-common-prompt concept injection for AI-generated-image detection.

The pipeline has five stages, each exposed both as a library module and a
CLI subcommand:

1. ``c2p.data``       -- scan benchmark directory trees into manifests and
                         preprocess images into model-ready tensors.
2. ``c2p.captions``   -- caption every image through a pluggable provider and
                         prefix each caption with a per-class common prompt.
3. ``c2p.encoder``    -- a frozen joint image-text embedding backbone with
                         low-rank adapters on the image tower's attention
                         projections, mergeable for parameter-free inference.
4. ``c2p.training``   -- optimize adapters plus a linear classifier with a
                         symmetric contrastive loss and a weighted binary
                         cross-entropy loss.
5. ``c2p.evaluation`` / ``c2p.analysis`` -- per-subset AP/Acc scoring, logit
                         histograms, and detection-feature interpretability
                         (decode-to-text, word frequency, clustering, 2-D
                         projection).
"""

__version__ = "0.1.0"
