"""triflow: a small unified text+image generative model, built for exactness.

Three-expert transformer over interleaved text/image token sequences, trained
jointly with next-token prediction and rectified-flow velocity regression,
plus a plan / act / reflect / correct generation pipeline. Everything runs on
a procedurally generated 16x16 shapes-and-captions world with an exact scene
oracle, in float64, with gradient-checked backprop and bit-reproducible runs.
"""

__version__ = "0.1.0"
