"""
VoiceShield Errors
Exception hierarchy shared by every module. Each family carries the exit code
the command-line front end reports for it.
"""


class VoiceShieldError(Exception):
    """Base class for all toolkit errors."""

    exit_code = 1


# Configuration (exit code 2)

class ConfigError(VoiceShieldError):
    exit_code = 2


class InvalidConfig(ConfigError):
    pass


# Storage (exit code 3)

class StorageError(VoiceShieldError):
    exit_code = 3


class IoError(StorageError):
    pass


class AudioFileNotFound(StorageError):
    pass


class BadMagic(StorageError):
    pass


class VersionMismatch(StorageError):
    pass


class ChecksumMismatch(StorageError):
    pass


# Data contract violations (exit code 4)

class DataContractError(VoiceShieldError):
    exit_code = 4


class UnsupportedFormat(DataContractError):
    pass


class SampleRateMismatch(DataContractError):
    pass


class EmptyAudio(DataContractError):
    pass


class NonFiniteSamples(DataContractError):
    pass


class TooShort(DataContractError):
    pass


class InvalidRange(DataContractError):
    pass


class DimensionMismatch(DataContractError):
    pass


class AllZeroAir(DataContractError):
    pass


class IndexOutOfRange(DataContractError):
    pass


class EmptySpectrogram(DataContractError):
    pass


class FrameCountMismatch(DataContractError):
    pass


class OutOfRange(DataContractError):
    pass


class InvalidRt60(DataContractError):
    pass


class NoActiveSpeech(DataContractError):
    pass


class SilentNoise(DataContractError):
    pass


class SilentClip(DataContractError):
    pass


class ShapeMismatch(DataContractError):
    pass


class WrongOutputArity(DataContractError):
    pass


class LengthMismatch(DataContractError):
    pass


class NonFiniteLoss(DataContractError):
    pass


class SingleClass(DataContractError):
    pass
