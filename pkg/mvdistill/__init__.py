# mvdistill: multi-view diffusion training and score-distilled radiance fields
__version__ = "0.1.0"
