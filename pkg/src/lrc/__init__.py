"""Low-rank clone distillation for small transformer LMs, with a bound-verification harness."""
from ._accel import USE_NUMBA
from .errors import (DivergenceError, InsufficientDataError, InvalidInputError, LRCError,
                     NumericalError)
from .matcore import RngState, SvdFactors, frobenius_norm, matmul, svd
from .lowrank import (ApproxReport, LowRankFactors, approximation_error_profile, compose_student_weight,
                      init_projections, projection_gradients, truncate_rank)
from .model import (ActivationTrace, ModelConfig, StudentModel, TeacherModel, init_student,
                    init_teacher, load_checkpoint, save_checkpoint, student_forward, teacher_forward)
from .losses import LossBreakdown, clone_loss, kd_loss, lm_loss, total_loss
from .optim import ConstantEstimates, SgdConfig, TrainTrace, train, train_teacher
from .data import Batch, Corpus, batches, char_tokenize, generate_markov_corpus
from .theory import BoundReport, GaussianMIModel, RankFit
from .config import RunConfig

__version__ = "0.1.0"
