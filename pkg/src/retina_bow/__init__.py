"""Bag-of-visual-words classification of retinal fundus images.

Local descriptors (SURF, dense SURF, HOG, uniform LBP) are quantized against
k-means dictionaries, pooled into L2-normalized histograms and classified
with one-vs-one linear SVMs into normal, drusen and exudate.
"""

from .features import FeatureMatrix, Kind, NoDescriptorsError
from .imgcore import ImageError, RgbImage, load_image

__version__ = "0.1.0"

__all__ = ["FeatureMatrix", "ImageError", "Kind", "NoDescriptorsError", "RgbImage", "load_image"]
