"""Monocular optical flow for driving scenes, one rigid body at a time.

Modules: imgproc (data model and codecs), matchnet (learned matcher),
costvol (top-K volumes), epigeo (two-view geometry), sgm (scanline
optimization), fgflow (per-instance flow), bgflow (ego-motion flow),
synth (scene oracle), pipeline (orchestration), viz, cli.
"""

__version__ = "0.1.0"
