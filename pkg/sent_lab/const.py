"""Constants for the SENT desk laboratory."""

DOMAIN = "sent_lab"
DEFAULT_NAME = "SENT desk lab"

# Environment
ENV_OUTPUT_DIR = "SENT_LAB_OUTPUT_DIR"
DEFAULT_OUTPUT_DIR = "runs"
DEFAULT_CONFIG_FILE = "config/desk.yaml"

# Vocabulary layout: digits first, then operators and control tokens
DIGIT_TOKENS = 10
TOKEN_PLUS = 10
TOKEN_MINUS = 11
TOKEN_TIMES = 12
TOKEN_MOD = 13
TOKEN_EQUALS = 14
TOKEN_ANSWER = 15
TOKEN_EOS = 16
VOCAB_SIZE = 17

OPERATOR_TOKENS = {"+": TOKEN_PLUS, "-": TOKEN_MINUS, "*": TOKEN_TIMES}
TOKEN_SYMBOLS = (
    *[str(digit) for digit in range(DIGIT_TOKENS)],
    "+",
    "-",
    "*",
    "mod",
    "=",
    "<answer>",
    "<eos>",
)

# Task generation
DEFAULT_DATASET_SIZE = 200
DEFAULT_MIN_STEPS = 1
DEFAULT_MAX_STEPS = 3
DEFAULT_MIN_OPERAND = 1
DEFAULT_MAX_OPERAND = 9
DEFAULT_MODULUS = 50
DEFAULT_OPERATORS = ("+", "-", "*")

# Policy
DEFAULT_CONTEXT_WINDOW = 2
DEFAULT_TEMPERATURE = 1.0
DEFAULT_MAX_RESPONSE_LENGTH = 32
POLICY_SNAPSHOT_HEADER = "# sent_lab policy v1"

# Warm start prior
DEFAULT_FORMAT_STRENGTH = 4.0
DEFAULT_ANSWER_STRENGTH = 6.0
DEFAULT_PRIOR_NOISE = 0.5

# GRPO
DEFAULT_GROUP_SIZE = 8
DEFAULT_CLIP_EPS = 0.2
DEFAULT_KL_COEF = 0.001
ADVANTAGE_STD_EPS = 1e-8
RATIO_SENTINEL = 1e30

LOSS_AGG_SEQ_MEAN_TOKEN_MEAN = "seq-mean-token-mean"
LOSS_AGG_TOKEN_MEAN = "token-mean"
LOSS_AGG_MODES = (LOSS_AGG_SEQ_MEAN_TOKEN_MEAN, LOSS_AGG_TOKEN_MEAN)

KL_ESTIMATOR_EXACT = "exact"
KL_ESTIMATOR_K3 = "k3"
KL_ESTIMATORS = (KL_ESTIMATOR_EXACT, KL_ESTIMATOR_K3)

# Token selection
THRESHOLD_ABSOLUTE = "absolute"
THRESHOLD_PERCENTILE = "percentile"
THRESHOLD_TOP_FRACTION = "top-fraction"
DEFAULT_BETA_LOW = 0.5
DEFAULT_BETA_HIGH = 2.0
DEFAULT_ENTROPY_PERCENTILE = 0.8
DEFAULT_COV_FRACTION = 0.0002
# Tolerance applied before floor/ceil of fractional token counts
COUNT_TOLERANCE = 1e-9

# Semantic entropy and curriculum
DEFAULT_SE_SAMPLES = 8
DEFAULT_STAGES = 2
NONE_CLUSTER_KEY = "NONE"

# Baselines
DEFAULT_ENTROPY_COEF = 0.001
DEFAULT_ADV_ALPHA = 0.4
DEFAULT_ADV_KAPPA = 2.0
DEFAULT_MASK_RHO = 0.2
DEFAULT_CLIP_FRACTION = 2e-4
DEFAULT_COV_LOW = 1.0
DEFAULT_COV_HIGH = 5.0
DEFAULT_COV_K = 0.0002
DEFAULT_COV_KL_COEF = 1.0
DEFAULT_HIGH_ENTROPY_THRESHOLD = 1.0

# KL coefficient of the forward reference penalty, per objective mode
KL_COEF_BY_MODE = {
    "grpo": DEFAULT_KL_COEF,
    "en": DEFAULT_KL_COEF,
    "adv": 0.0,
    "mask": 0.0,
    "clip": 0.0,
    "cov": 0.0,
    "high_en": DEFAULT_KL_COEF,
    "sent": 0.0,
}

# Training
# Applied straight to tabular logits. The batch loss averages over every
# query, sample and token, so a single state sees a gradient of order
# 1/(batch_queries * group_size); 1e-6 (FULL_SCALE_DEFAULTS) would leave the
# table unchanged over a desk run.
DEFAULT_LEARNING_RATE = 10.0
DEFAULT_TOTAL_STEPS = 240
DEFAULT_BATCH_QUERIES = 16
DEFAULT_PPO_EPOCHS = 1
DEFAULT_CHECKPOINT_EVERY = 50

# Evaluation
DEFAULT_EVAL_K = (1, 8, 16, 32)
SPLIT_ALL = "all"
SPLIT_HARDEST = "hardest_quintile"
HARDEST_FRACTION = 0.2

# Entropy dynamics verification
DEFAULT_DYNAMICS_INSTANCES = 24
DEFAULT_IDENTITY_TRIALS = 100
DEFAULT_DYNAMICS_ETA_MAX = 1e-2
DEFAULT_DYNAMICS_HALVINGS = 5
ORDER_RATIO_LOW = 3.5
ORDER_RATIO_HIGH = 4.5
IDENTITY_TOLERANCE = 1e-10
DECOMPOSITION_TOLERANCE = 1e-12

# RNG stream tags mixed into SeedSequence entropy
STREAM_DATASET = 11
STREAM_WARM_START = 13
STREAM_PROFILE = 17
STREAM_TRAIN = 19
STREAM_EVAL = 23
STREAM_DYNAMICS = 29
STREAM_SHUFFLE = 31

# Files
DATASET_FILE = "dataset.jsonl"
PROFILE_FILE = "se_profile.jsonl"
ORDER_FILE = "curriculum_order.json"
METRICS_FILE = "metrics.csv"
EVAL_CURVE_FILE = "eval_curve.csv"
EVAL_REPORT_FILE = "eval_report.json"
POLICY_FILE = "policy_final.txt"
LAST_GOOD_FILE = "policy_last_good.txt"
CHECKPOINT_DIR = "checkpoints"
BATCH_DIR = "batches"
DIAGNOSTICS_FILE = "diagnostics.json"
DYNAMICS_FILE = "dynamics.csv"
DYNAMICS_SUMMARY_FILE = "dynamics_summary.json"
EXPERIMENT_FILE = "experiment_summary.json"

# Metrics schema; bump the version whenever the columns change
METRICS_SCHEMA_VERSION = 1
METRICS_COLUMNS = (
    "step",
    "stage",
    "mean_entropy",
    "mean_reward",
    "mean_length",
    "objective",
    "low_count",
    "high_cov_count",
    "low_mean_entropy",
    "low_mean_cov",
    "high_cov_mean_entropy",
    "high_cov_mean_cov",
    "clip_fraction",
    "ratio_clamped",
    "term1",
    "term2",
)
BATCH_COLUMNS = (
    "group",
    "response",
    "position",
    "state",
    "token",
    "logprob_old",
    "logprob_new",
    "advantage",
    "entropy",
    "covariance",
    "in_low",
    "in_high_cov",
    "beta_con",
)

# Full-scale values kept next to the desk defaults for reference
FULL_SCALE_DEFAULTS = {
    "learning_rate": 1e-6,
    "clip_eps": 0.2,
    "group_size": 8,
    "se_samples": 8,
    "stages": 2,
    "beta_low": 0.5,
    "beta_high": 2.0,
    "entropy_percentile": 0.8,
    "cov_fraction": 0.0002,
    "max_response_length": 2048,
    "temperature": 1.0,
    "kl_coef": 0.001,
    "entropy_coef": 0.001,
    "cov_kl_coef": 1.0,
}
