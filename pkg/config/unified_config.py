"""
統一設定管理システム
config/unified_config.py

環境変数（.env を含む）から読み込む実行環境の設定。
実験ごとのパラメータは config/experiment_config.py の ExperimentConfig が扱う
"""
import os
from typing import Optional

from dotenv import load_dotenv

from utils.constants import APP_NAME, APP_VERSION, APP_DESCRIPTION

# 環境変数を読み込み
load_dotenv()


def _env_flag(name: str, default: str = "false") -> bool:
    return os.getenv(name, default).lower() == "true"


class UnifiedConfig:
    """統一設定管理クラス"""

    # ===== アプリケーション基本情報 =====
    APP_NAME = APP_NAME
    APP_VERSION = APP_VERSION
    APP_DESCRIPTION = APP_DESCRIPTION

    # ===== ディレクトリパス =====
    DATA_DIR = os.getenv("FS_DATA_DIR", "data")
    LOGS_DIR = os.getenv("FS_LOG_DIR", os.path.join(DATA_DIR, "logs"))

    # ===== ログレベル設定 =====
    DEBUG_MODE = _env_flag("DEBUG_MODE")
    LOG_LEVEL = os.getenv("LOG_LEVEL", "INFO").upper()  # DEBUG, INFO, WARNING, ERROR
    ENABLE_DEBUG_LOGS = _env_flag("ENABLE_DEBUG_LOGS")

    # ===== 実験の既定値 =====
    DEFAULT_JOBS = int(os.getenv("FS_JOBS", "1"))

    @classmethod
    def should_log_debug(cls) -> bool:
        """デバッグログを出力すべきかを判定"""
        return cls.ENABLE_DEBUG_LOGS or cls.DEBUG_MODE or cls.LOG_LEVEL == "DEBUG"

    @classmethod
    def env_seed(cls) -> Optional[int]:
        """
        FS_SEED 環境変数からシードを取得する（呼び出し時点の値を読む）

        Returns:
            Optional[int]: 未設定なら None
        """
        raw = os.getenv("FS_SEED")
        if raw is None or raw.strip() == "":
            return None
        try:
            return int(raw)
        except ValueError:
            from core.exceptions import ConfigError
            raise ConfigError("FS_SEED", f"整数ではありません: {raw!r}")

    @classmethod
    def default_jobs(cls) -> int:
        """--jobs 未指定時の並列数"""
        return max(1, cls.DEFAULT_JOBS)
