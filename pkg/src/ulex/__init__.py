"""ulex: craft and evaluate unlearnable examples on desk-scale synthetic data.

The pipeline: learn the gradient of the class-conditional data
distribution by denoising score matching, craft bounded per-example noise
that jointly minimizes classifier loss and score norm (collapsing classes
toward their density modes), train the noise generator adversarially, and
measure protection by training victim models on the poisoned data.
"""

from .datasets import (GaussianComponent, GaussianMixtureSpec, LabeledDataset,
                       analytic_score, gen_mixture, gen_two_moons, load_dataset,
                       normalize, save_dataset)
from .diffcore import Tensor, backward, finite_diff
from .metrics import (MetricsRecord, intra_class_spread, pca_project,
                      scatter_svg, score_norm_stats, write_report)
from .models import (ArchSpec, ClassifierModel, ScoreModel, classify_loss,
                     init_classifier, init_score_model, load_classifier,
                     load_model, load_score_model, save_model, score_eval)
from .poisonforge import (GeneratorTrainConfig, PerturbationBudget,
                          PoisonedDataset, craft_stage_one, craft_stage_two,
                          emit_poison, load_poison, project_linf, save_poison,
                          train_generator)
from .scorelab import DSMConfig, SGLDConfig, dsm_loss, sgld_run, train_score
from .victim import VictimTrainConfig, evaluate, mix_partial, train_victim

__version__ = "0.1.0"
