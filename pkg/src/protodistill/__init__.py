"""Unpaired 3D-to-2D knowledge distillation through class prototypes.

A frozen 3D teacher summarizes each organ class as a vector of mean logits
(a prototype).  A 2D student is trained on unrelated slices with a
segmentation loss plus Pearson-correlation terms that pull the structure of
its own per-batch prototypes towards the teacher's.
"""

from .config import RunConfig, load_config
from .estimators import (
    DistilledStudent,
    PrototypeExtractor,
    StudentSegmenter,
    TeacherSegmenter,
    check_images,
    check_labels,
)
from .evaluation import EvalReport, compare_runs, dsc, evaluate, wilcoxon_signed_rank
from .exceptions import (
    ConfigError,
    DegenerateVectorError,
    EmptyMaskError,
    FormatError,
    InsufficientPairsError,
    ShapeError,
    TrainingError,
)
from .models import NetworkParams, init_params, load_checkpoint, save_checkpoint
from .prototype import Prototype, dataset_prototype, load_prototype, save_prototype
from .synthdata import PhantomSpec, gen_slice, gen_volume, make_splits, make_volume_splits
from .trainer import TrainConfig, continue_training, distill, pretrain_student, train_teacher

__version__ = "0.1.0"
