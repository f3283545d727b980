"""
LeViT-UNet
A hybrid convolution/transformer U-shaped network for 2-D medical image
segmentation, with its own NumPy autodiff, training loop and evaluation tools.
"""

__version__ = "0.1.0"
