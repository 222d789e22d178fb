"""Copy-augmented transformer captioner with reinforced copy encouragement.

Desk-scale, CPU-only. Subpackages:

- ``numcore``: reverse-mode autodiff over dense float64 arrays
- ``taxonomy``: object-class hierarchy, abstract labels, detection filtering
- ``morph``: inflected surface forms of object labels
- ``captioner``: the encoder/decoder network with the joint copy output head
- ``decoder``: beam search, sampling, inference bias
- ``metrics``: CIDEr-D and copy-quantity metrics
- ``trainer``: cross-entropy and self-critical training
- ``datakit``: dataset schema and the synthetic corpus generator
- ``cli``: the ``copycap`` command
"""

__version__ = "0.1.0"
