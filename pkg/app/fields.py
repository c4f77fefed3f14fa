from __future__ import annotations

from typing import Annotated, Any, Tuple

from pydantic import BeforeValidator


def _split_csv(value: Any) -> Any:
    if value is None:
        return ()
    if isinstance(value, str):
        return tuple(part.strip() for part in value.split(",") if part.strip())
    return value


# comma-separated values as they appear in the experiment file, e.g. "seeds = 0, 1, 2"
IntTuple = Annotated[Tuple[int, ...], BeforeValidator(_split_csv)]
