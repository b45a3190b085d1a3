"""Serving backend for the dtgen pipeline.

The worker is the other side of the wire contract that
``dtgen.backend_gateway`` speaks as a client: it fine-tunes low-rank
adapters on a diffusion denoiser, generates images, embeds text and images
into a shared space, and trains classifiers on exported bundles.  Model
sizes are configuration; the ``tiny`` profile runs everything on a CPU in
seconds, the ``production`` profile names full-scale checkpoints that this
package does not ship.
"""

__version__ = "0.1.0"
