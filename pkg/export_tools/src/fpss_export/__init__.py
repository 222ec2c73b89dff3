"""Export tooling: serialize backbone outputs into FPSS tensor files.

The segmentation engine is model-free; these tools sit on the other side
of its file boundary.  They run a backbone over images and write feature
stacks, text-prompted masks, and logits in the formats the engine reads.
Nothing here imports the engine: the contract is the bytes on disk.
"""
__version__ = "0.1.0"
