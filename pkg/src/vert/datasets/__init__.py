from .generators import (DatasetConfig, Dataset, SignalDistractorSample, generate,
                         inject_spurious_patch, flip_correlation, dataset_moments)
from .io import save, load
from .tiny import TinyConfig, TinyProblem
