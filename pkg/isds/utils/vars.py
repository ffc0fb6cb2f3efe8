SCHEMA_VERSION = 1
CHECKPOINT_SCHEMA_VERSION = 1

# floor added to every variance so that Σ ≻ 0 under any parameter value
VAR_FLOOR = 1e-6

DATASET_HEADER_SUFFIX = ".json"
DATASET_PAYLOAD_SUFFIX = ".bin"
GROUND_TRUTH_SIDECAR_NAME = "ground_truth.json"
CHECKPOINT_NAME = "checkpoint.json"
FIT_REPORT_NAME = "fit_report.json"
METRIC_REPORT_NAME = "metrics.json"
METRIC_CSV_NAME = "metrics.csv"

ROLES = ("latent", "observed", "regime")
ACTIVATIONS = ("cosine", "softplus", "gelu", "leaky_relu")
ANALYTIC_ACTIVATIONS = ("cosine", "softplus", "gelu")
COVARIANCE_MODES = ("constant", "heterogeneous", "history")
SETTINGS = ("A", "B", "C", "D", "E", "F")
ABLATIONS = ("none", "zero", "overlap")

EXIT_OK = 0
EXIT_VALIDATION_FAIL = 1
EXIT_USAGE = 2
EXIT_TRAINING_FAIL = 3
