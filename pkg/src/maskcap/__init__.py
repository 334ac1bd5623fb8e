"""maskcap: interpretable image captioning with mask-gated soft attention.

A caption decoder attends over a scene's visual entity slots; a per-slot
mask (rule-built ground truth during training, predicted or human-edited at
inference) gates the attention so humans can see and control which entities
a caption covers. Everything runs at desk scale on a small numpy-based
autodiff kernel.
"""

__version__ = "0.1.0"
