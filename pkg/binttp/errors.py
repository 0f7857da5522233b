"""统一异常定义，所有模块错误都继承 BinTtpError"""

from __future__ import annotations


class BinTtpError(Exception):
    """流水线错误基类"""


class ValidationError(BinTtpError):
    pass


class ExportParseError(BinTtpError):
    """导出文件格式错误，带记录下标和字段名"""

    def __init__(self, message: str, index: int | None = None, field: str | None = None) -> None:
        self.index = index
        self.field = field
        location = ""
        if index is not None:
            location = f"记录 #{index}"
            if field:
                location += f" 字段 '{field}'"
            location += ": "
        super().__init__(f"{location}{message}")


class NotFoundError(BinTtpError):
    def __init__(self, kind: str, key: str) -> None:
        self.kind = kind
        self.key = key
        super().__init__(f"找不到{kind}: {key}")


class ConfigError(BinTtpError):
    """配置缺键或取值非法，CLI 按用法错误处理"""

    def __init__(self, key: str, message: str = "") -> None:
        self.key = key
        super().__init__(f"{key}: {message}" if message else f"缺少配置键: {key}")


class GatewayError(BinTtpError):
    """模型网关错误基类"""


class TransientBackendError(GatewayError):
    """可重试的后端故障（限流、5xx、连接中断）"""


class TransportError(GatewayError):
    def __init__(self, message: str, attempts: int) -> None:
        self.attempts = attempts
        super().__init__(f"{message}（已尝试 {attempts} 次）")


class ReplayMissError(GatewayError):
    def __init__(self, fingerprint: str) -> None:
        self.fingerprint = fingerprint
        super().__init__(f"回放记录缺失: {fingerprint}")


class NetworkForbiddenError(GatewayError):
    pass


class UnmatchedPromptError(GatewayError):
    pass


class ResponseFormatError(BinTtpError):
    pass


class EmbeddingError(BinTtpError):
    def __init__(self, keys: list[str], cause: Exception | None = None) -> None:
        self.keys = list(keys)
        detail = f": {cause}" if cause else ""
        super().__init__(f"嵌入失败的键 {self.keys}{detail}")


class RenamePassError(BinTtpError):
    def __init__(self, func_id: str, cause: Exception) -> None:
        self.func_id = func_id
        self.cause = cause
        super().__init__(f"重命名函数 {func_id} 失败: {cause}")


class GuidelineStepError(BinTtpError):
    def __init__(self, step: int, ttp_id: str, cause: Exception | str) -> None:
        self.step = step
        self.ttp_id = ttp_id
        super().__init__(f"{ttp_id} 指南合成第 {step} 步失败: {cause}")


class VersionSkewError(BinTtpError):
    pass


class UndefinedMetricError(BinTtpError):
    pass
