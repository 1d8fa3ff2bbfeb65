"""One-stage image inpainting with dense multi-scale fusion blocks."""

from .core import ContractError, ImageBatch, LossWeights, Mask, Range, TrainConfig, from_model_range, to_model_range
from .discriminator import CriticResult, Discriminator, DiscriminatorConfig, build_discriminator, discriminator_forward
from .generator import (
    DMFB, AblationVariant, DMFBConfig, Generator, GeneratorConfig, build_dmfb, build_generator, count_parameters,
    generator_forward,
)
from .losses import DistanceMetric, GuidancePyramid
from .vgg import FeaturePyramid, VGG19Features, average_feature_map, extract_pyramid, load_vgg19

__version__ = "0.1.0"
