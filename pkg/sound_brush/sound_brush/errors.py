# Copyright (C) 2024 Miguel Ángel González Santamarta

# This program is free software: you can redistribute it and/or modify
# it under the terms of the GNU General Public License as published by
# the Free Software Foundation, either version 3 of the License, or
# (at your option) any later version.

# This program is distributed in the hope that it will be useful,
# but WITHOUT ANY WARRANTY; without even the implied warranty of
# MERCHANTABILITY or FITNESS FOR A PARTICULAR PURPOSE.  See the
# GNU General Public License for more details.

# You should have received a copy of the GNU General Public License
# along with this program.  If not, see <https://www.gnu.org/licenses/>.


from typing import Any, Dict, Optional


class SoundBrushError(Exception):
    """Base class of every error raised by sound_brush."""


class ConfigError(SoundBrushError):

    def __init__(self, key_path: str, message: str) -> None:
        super().__init__(f"{key_path}: {message}" if key_path else message)
        self.key_path = key_path


class InvalidInputError(SoundBrushError):
    pass


class ShapeError(SoundBrushError):
    pass


class SpaceMismatchError(SoundBrushError):
    pass


class NumericalError(SoundBrushError):
    pass


class PromptClientError(SoundBrushError):
    """Raised when the prompt client fails; callers may retry."""

    retriable = True

    def __init__(self, message: str, source: str = "", keyword: str = "") -> None:
        super().__init__(f"{message} (source={source!r}, keyword={keyword!r})")
        self.source = source
        self.keyword = keyword


class GenerationError(SoundBrushError):
    pass


class ManifestError(SoundBrushError):

    def __init__(self, line: int, message: str) -> None:
        super().__init__(f"line {line}: {message}")
        self.line = line


class MOSFormatError(SoundBrushError):

    def __init__(self, line: int, message: str) -> None:
        super().__init__(f"line {line}: {message}")
        self.line = line


class TrainingDivergedError(SoundBrushError):

    def __init__(self, step: int, components: Dict[str, Any]) -> None:
        super().__init__(f"non-finite loss at step {step}: {components}")
        self.step = step
        self.components = components


class CheckpointError(SoundBrushError):

    def __init__(self, message: str, path: Optional[str] = None) -> None:
        super().__init__(f"{path}: {message}" if path else message)
        self.path = path


class TimestepError(SoundBrushError, IndexError):
    pass
