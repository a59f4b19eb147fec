"""
ユーティリティ機能
- 定数管理
- 構造化ログ
- PGM/PPM 入出力
"""
