"""Image-based nutrition estimation with ingredient-text fusion."""

from .data import FIELDS, DatasetManifest, NutritionVector, Sample, load_manifest, split_dataset
from .embedding import HashTextEncoder, IngredientEmbedder, aggregate_ingredients
from .evaluation import EvalReport, evaluate_protocol1, evaluate_protocol2, relative_percent
from .fusion import FusionConfig, NutritionEstimator, NutritionModel, NutritionPrediction
from .inference import AugmentationSpec, VoteConfig, majority_vote, predict_with_augmented_ingredients
from .ingredients import IngredientVocabulary, RobustnessConfig, normalize_ingredient
from .training import TrainConfig, train

__version__ = "0.1.0"

__all__ = [
    "FIELDS", "DatasetManifest", "NutritionVector", "Sample", "load_manifest", "split_dataset",
    "HashTextEncoder", "IngredientEmbedder", "aggregate_ingredients",
    "EvalReport", "evaluate_protocol1", "evaluate_protocol2", "relative_percent",
    "FusionConfig", "NutritionEstimator", "NutritionModel", "NutritionPrediction",
    "AugmentationSpec", "VoteConfig", "majority_vote", "predict_with_augmented_ingredients",
    "IngredientVocabulary", "RobustnessConfig", "normalize_ingredient",
    "TrainConfig", "train",
]
