import re

HEATMAP_SIZE = 64
INPUT_SIZE = (448, 448)
EC_INPUT_SIZE = (224, 224)
DEFAULT_SIGMA = 0.85
IFT_THRESHOLD = 0.5
SCALE_FACTORS = (1.0, 0.5, 0.25)
EC_DISTANCE_MM = 30.0
GT_SIGMA_CELLS = 3.0

IMAGENET_MEAN = (0.485, 0.456, 0.406)
IMAGENET_STD = (0.229, 0.224, 0.225)

# RGB
GREEN = (0, 255, 0)
RED = (255, 0, 0)
WHITE = (255, 255, 255)

ENV_PREFIX = "GT360_"
ENV_SEPARATOR = "__"

MANIFEST_FIELDS = {"image", "box", "label", "target", "source", "subject", "confidence"}
SOURCES = ("gazefollow", "vat", "mpii", "columbia", "eyediap")

# 0001_2m_-15P_10V_-5H.jpg
COLUMBIA_NAME_RE = re.compile(
    r"^(?P<subject>\d+)_(?P<distance>\d+)m_(?P<pose>-?\d+)P_(?P<vertical>-?\d+)V_"
    r"(?P<horizontal>-?\d+)H\.(?:jpg|jpeg|png)$",
    re.IGNORECASE,
)
