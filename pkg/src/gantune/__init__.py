"""Efficient adaptation of text-conditioned image-to-image GANs.

Modules:
    models     generator, discriminator and layer descriptors
    lora       low-rank adapters on the crucial layers
    rank_search  doubling rank schedule and global rank aggregation
    selection  k-means data reduction and base-concept selection
    trainer    conditional GAN + L1 training loops
    metrics    Fréchet distance and cost accounting
    dataio     datasets, synthetic tasks and checkpoints
    cli        the ``gantune`` command
"""

__version__ = "0.1.0"
