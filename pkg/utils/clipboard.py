"""Clipboard export for rendered result tables."""

import logging
import os
import subprocess
import tempfile
from typing import Any, Dict, Optional

import pyperclip

logger = logging.getLogger(__name__)

# tried in order when pyperclip has no backend
LINUX_COMMANDS = (
    ("xclip", ["xclip", "-selection", "clipboard"]),
    ("xsel", ["xsel", "--clipboard", "--input"]),
)


def _check_command(command: str) -> bool:
    """Check if a command is available in the system PATH"""
    try:
        subprocess.run([command, "--version"], capture_output=True, timeout=2)
    except (subprocess.TimeoutExpired, FileNotFoundError):
        return False
    return True


def _pipe(text: str, argv) -> Optional[str]:
    """Feed text to a clipboard command; returns an error message or None."""
    try:
        done = subprocess.run(argv, input=text, text=True, capture_output=True, timeout=5)
    except (OSError, subprocess.SubprocessError) as e:
        return str(e)
    return None if done.returncode == 0 else f"exit status {done.returncode}"


def copy_to_clipboard(text: str) -> Dict[str, Any]:
    """
    Copy text to clipboard.
    Returns a dict with success, method, error and fallback_used.
    """
    result: Dict[str, Any] = {"success": False, "method": None, "error": None, "fallback_used": False}
    try:
        pyperclip.copy(text)
    except Exception as e:
        result["error"] = str(e)
        logger.warning("pyperclip could not reach a clipboard: %s", e)
    else:
        result.update(success=True, method="pyperclip")
        return result

    for name, argv in LINUX_COMMANDS:
        if not _check_command(name):
            continue
        error = _pipe(text, argv)
        if error is None:
            result.update(success=True, method=name, fallback_used=True)
            return result
        result["error"] = f"{name} failed: {error}"
    return result


def save_to_temp_file(text: str, filename: str = "co4_results.tex") -> Optional[str]:
    path = os.path.join(tempfile.gettempdir(), filename)
    try:
        with open(path, "w", encoding="utf-8") as f:
            f.write(text)
    except OSError as e:
        logger.error("failed to save temp file: %s", e)
        return None
    return path


def export_text(text: str) -> Dict[str, Any]:
    """Clipboard first; when no backend works the text lands in a temp file."""
    result = copy_to_clipboard(text)
    if not result["success"]:
        result["temp_file"] = save_to_temp_file(text)
        if result["temp_file"]:
            logger.warning("no clipboard available; table written to %s", result["temp_file"])
    return result
