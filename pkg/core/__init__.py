"""
コア機能モジュール
- テンソル演算（順伝播・逆伝播）
- ネットワーク定義とパラメータ
- 例外と終了コード
- コマンドラインルーター
"""
