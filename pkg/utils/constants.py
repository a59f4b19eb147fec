"""
定数とユーティリティ関数
utils/constants.py

純粋な定数と小さなユーティリティのみを置く。
環境依存の設定は config/unified_config.py の UnifiedConfig を使用すること
"""
import os

# ===== アプリケーション情報 =====
APP_NAME = "Feature Response Detector"
APP_VERSION = "1.0.0"
APP_DESCRIPTION = "特徴応答マップの局所空間エントロピーによる敵対的サンプル検出"

# ===== 重みファイル（FSNT コンテナ） =====
WEIGHTS_MAGIC = b"FSNT"
WEIGHTS_FORMAT_VERSION = 1

# ===== IDX 形式 =====
IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801

# ===== 合成データセット =====
SYNTH_IMAGE_SIZE = 28
SYNTH_CLASS_NAMES = ("circle", "square", "triangle", "cross")
SYNTH_NOISE_AMPLITUDE = 0.05

# ===== 攻撃 =====
ONE_PIXEL_STOP_PROBABILITY = 0.05
BOUNDARY_ADAPTATION_INTERVAL = 10
DEEPFOOL_MIN_NORM = 1e-12
# 境界上（f = 0）でもステップが 0 にならないための加算項
DEEPFOOL_STEP_MARGIN = 1e-4

# ===== 評価 =====
REPORT_FPRS = (0.01, 0.05, 0.10)
HISTOGRAM_BINS = 64
BOOTSTRAP_RESAMPLES = 1000
BOOTSTRAP_CONFIDENCE = 0.95
BOOTSTRAP_SEED = 20190101
MAX_ERROR_FRACTION = 0.5
CLEAN_ROW = "clean"

# ===== 出力ファイル名 =====
METRICS_FILE = "metrics.csv"
OUTCOMES_FILE = "outcomes.csv"
SUMMARY_CSV_FILE = "summary.csv"
SUMMARY_TEXT_FILE = "summary.txt"
HISTOGRAM_FILE = "histogram.csv"
ROC_FILE = "roc.csv"
IMAGES_DIR = "images"

# ===== CLI 終了コード =====
EXIT_SUCCESS = 0
EXIT_ATTACKED = 1
EXIT_CONFIG_ERROR = 2
EXIT_NUMERIC_ERROR = 3
EXIT_IO_ERROR = 4


def ensure_directory_exists(directory_path):
    """ディレクトリが存在しない場合は作成する"""
    if directory_path and not os.path.exists(directory_path):
        os.makedirs(directory_path, exist_ok=True)
    return directory_path
