import logging


class Config:
    # Logging
    LOG_LEVEL = logging.INFO
    LOG_FORMAT = "%(asctime)s %(levelname)s %(name)s: %(message)s"

    # Tool identity (written into every run manifest)
    TOOL_NAME = "mcqa-lens"
    TOOL_VERSION = "1.0.0"

    # Numerics
    LAYER_NORM_EPS = 1e-5
    INIT_STD = 0.02

    # Model presets, mirroring the layer/head ratios of the studied models at toy scale
    TINY_MODEL = {"n_layers": 2, "n_heads": 2, "d_model": 16, "max_seq": 16}
    SMALL_MODEL = {"n_layers": 2, "n_heads": 2, "d_model": 32, "max_seq": 256}
    REFERENCE_MODEL = {"n_layers": 4, "n_heads": 4, "d_model": 128, "max_seq": 256}

    # Training defaults, sized for REFERENCE_TIME_BUDGET on one CPU
    TRAIN_STEPS = 5000
    BATCH_SIZE = 2
    LEARNING_RATE = 1e-3
    WARMUP_STEPS = 200
    ADAM_BETA1 = 0.9
    ADAM_BETA2 = 0.95
    ADAM_EPS = 1e-8
    WEIGHT_DECAY = 0.01
    CHECKPOINT_EVERY = 500
    GENERATIVE_FRACTION = 0.5  # share of generative vs formatted sequences

    # Gradient check
    GRAD_CHECK_STEP = 1e-3
    GRAD_CHECK_SAMPLES = 8  # coordinates sampled per parameter tensor

    # Data / evaluation
    DATASET_SEED = 0
    ICL_SEED = 0
    NUM_SHOTS = 3
    CONSISTENCY_SYMBOL_SETS = ["ABCD", "QZRX", "1234"]
    ANALYSIS_SYMBOL_SETS = ["OEBP"]
    REFERENCE_SYMBOL_SET = "ABCD"

    # Interpretability
    HEAD_SPARSITY_RATIO = 0.1
    FLIP_RATE_THRESHOLD = 0.5
    COHORT_SIZE = 32
    HEAD_SHARE = 0.8  # share of a layer's absolute head total the fewest heads must reach
    REFERENCE_TIME_BUDGET = 15 * 60  # seconds, whole reference run

    # Output file names inside a run directory
    MANIFEST_FILE = "manifest.json"
    TRAIN_LOG_FILE = "train_log.csv"
    SERIES_FILE = "series.json"
    VOCAB_FILE = "vocab.txt"
