"""skyhost: unified object-store and stream data movement.

One pipeline architecture moves bytes between object stores and partitioned
streams: source operators feed a trigger-driven micro-batcher, batches cross
a framed TCP transport between gateways, and sink operators write them out.
A single CLI routes transfers from the source and destination URIs.
"""

__version__ = "0.1.0"
