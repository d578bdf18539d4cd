"""
Corpus Repository
File access for CMeEE-format corpora and JSON/markdown artifacts.
"""

import json
from pathlib import Path
from typing import Any, List

from gridner.core.exceptions import CorpusParseError


class CorpusRepository:
    """
    Repository for JSON corpus files and report outputs.

    Reading never mutates the source file; writes go only to output paths.
    """

    def read_raw(self, path: Path) -> List[dict]:
        """
        Read a corpus file as a list of raw record dicts.

        Args:
            path: UTF-8 JSON file holding an array of {"text", "entities"} objects

        Returns:
            List of raw record dicts

        Raises:
            FileNotFoundError: If the file does not exist
            CorpusParseError: If the JSON is malformed or not an array of objects
        """
        path = Path(path)
        if not path.exists():
            raise FileNotFoundError(f"Corpus file not found: {path}")

        content = path.read_text(encoding="utf-8")
        try:
            data = json.loads(content)
        except json.JSONDecodeError as e:
            raise CorpusParseError(
                f"Malformed JSON in {path} at line {e.lineno}, column {e.colno}: {e.msg}",
                detail={"line": e.lineno, "column": e.colno},
            ) from e

        if not isinstance(data, list) or not all(isinstance(item, dict) for item in data):
            raise CorpusParseError(f"{path} must contain a JSON array of objects")
        return data

    def write_json(self, path: Path, payload: Any) -> Path:
        """Write `payload` as deterministic, indented UTF-8 JSON."""
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(
            json.dumps(payload, ensure_ascii=False, indent=2, sort_keys=False) + "\n",
            encoding="utf-8",
        )
        return path

    def write_text(self, path: Path, text: str) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(text, encoding="utf-8")
        return path
