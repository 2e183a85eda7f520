"""Constants for Tcomplete."""

__version__ = "0.1.0"

POINT_FILE_MAGIC = b"PCB1"
SESSION_MAGIC = b"TCS1"

CHECKPOINT_VERSION = 1
SESSION_VERSION = 1
MANIFEST_VERSION = 1

NORMALIZATION_RADIUS = 0.5
VIEWPOINT_RADIUS = 2.0

DEFAULT_NUM_POINTS = 2048
SHAPE_CODE_DIM = 1280
SURFACE_SAMPLES = 20000
SEQUENCE_LENGTH = 16

ROTATION_TOLERANCE = 1e-5
DEGENERATE_ANGLE = 1e-6
DEGENERATE_EDGE = 1e-12

EXACT_EMD_MAX_POINTS = 16
EMD_TOLERANCE = 1e-3

CD_REPORT_SCALE = 1e4
CONSISTENCY_GROUP = 5
EVAL_REPEATS = 10
EVAL_FRAMES = 5
INPUT_SWEEP_SIZES = (2048, 1024, 512, 256)

SEED_ENV_VAR = "TCOMPLETE_SEED"

METHOD_NAME = "tcomplete"
