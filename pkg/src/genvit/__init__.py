"""Desk-scale generative visual instruction tuning.

One composite model that understands images (image to text), generates
images (text to image through a frozen latent-diffusion decoder conditioned
by a learned generation head), and edits images; plus the instruction-mixture
data pipeline, single-stage trainer, task-token inference router, and metric
harness. Pure numpy.
"""

__version__ = "0.1.0"
