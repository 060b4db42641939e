"""duiit: cycle-consistent cross-modality image translation trained jointly
with a downstream age regressor, so translated source-modality images serve as
labeled training data for the target-modality prediction task.
"""

from .data import (
    LabeledImage,
    ModalityDataset,
    SplitSpec,
    SyntheticTaskSpec,
    generate_synthetic_task,
    load_dataset,
    resize_to,
    save_dataset,
    split_dataset,
)
from .engine import RunReport, TrainConfig, joint_loss, lr_at, run_experiment, train_step
from .translator import (
    ImageBuffer,
    TranslatorState,
    adv_loss_discriminator,
    adv_loss_generator,
    build_translator,
    cycle_loss,
    discriminate,
    translate,
    translation_loss,
)

__version__ = "0.1.0"

__all__ = [
    "ImageBuffer",
    "LabeledImage",
    "ModalityDataset",
    "RunReport",
    "SplitSpec",
    "SyntheticTaskSpec",
    "TrainConfig",
    "TranslatorState",
    "adv_loss_discriminator",
    "adv_loss_generator",
    "build_translator",
    "cycle_loss",
    "discriminate",
    "generate_synthetic_task",
    "joint_loss",
    "load_dataset",
    "lr_at",
    "resize_to",
    "run_experiment",
    "save_dataset",
    "split_dataset",
    "train_step",
    "translate",
    "translation_loss",
    "__version__",
]
