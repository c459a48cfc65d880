"""Adapter-merging toolkit: baselines, per-pair optimization, and a trained
per-column coefficient predictor, with a binary-judge evaluation protocol."""

from .autodiff import AdamW, AdamWConfig, GradCheckReport, Tape, grad_check
from .evaluation import (BenchmarkResult, EvalConfig, JudgeEndpointConfig,
                         JudgeThresholds, JudgeUnavailableError, JudgeVerdict,
                         Mars2Report, PairReport, calibrate_thresholds,
                         export_coefficients_csv, majority_pass, mars2_aggregate,
                         make_strategy, mock_judge, pearson_corr, run_benchmark)
from .hypernet import (Hypernetwork, TrainConfig, UnregisteredWidthError,
                       count_params, hypernet_coefficients, load_hypernet,
                       save_hypernet, train_hypernet)
from .merging import (ZipConfig, dare_sparsify, dare_ties_merge, direct_merge,
                      ties_merge, ties_trim, zip_optimize)
from .model import (BaseModel, DivergenceError, EffectiveWeights, FinetuneConfig,
                    LoraAdapter, ModelDims, PromptEmbedding, apply_deltas,
                    apply_lora, combine_prompts, finetune_lora, forward)
from .objective import (MergeCoefficients, MergePolicy, build_merged_deltas,
                        constant_coefficients, merge_loss_value, merge_with_coeffs,
                        pair_eval_loss)
from .tasks import (Corpus, CorpusConfig, PairSampler, SplitManifest,
                    SyntheticTask, build_corpus, composed_target, gen_task,
                    load_corpus, sample_pair)
from .tensor import Rng, ShapeError, derive_seed
from .tensorfile import (TensorFile, TensorFileError, load_adapter,
                         load_tensorfile, save_adapter, save_tensors)

__version__ = "0.1.0"
