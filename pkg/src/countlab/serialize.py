"""JSON model files.

Schema (``format`` = ``countlab.model/1``)::

    {
      "format": "countlab.model/1",
      "config": {<TransformerConfig fields>},
      "params": {
        "<name>": {"shape": [int, ...], "data": [float, ...]},   # row-major
        ...
      }
    }

Floats are written with ``repr`` precision, so finite doubles survive a
round trip bit for bit.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from countlab.nn import TransformerConfig, TransformerModel

FORMAT = "countlab.model/1"


def model_to_dict(model: TransformerModel) -> dict:
    return {
        "format": FORMAT,
        "config": model.config.to_dict(),
        "params": {
            name: {"shape": list(v.shape), "data": v.ravel(order="C").tolist()}
            for name, v in sorted(model.params.items())
        },
    }


def model_from_dict(doc: dict) -> TransformerModel:
    if doc.get("format") != FORMAT:
        raise ValueError(f"unsupported model format {doc.get('format')!r}")
    cfg = TransformerConfig.from_dict(doc["config"])
    params = {}
    for name, entry in doc["params"].items():
        arr = np.asarray(entry["data"], dtype=np.float64)
        params[name] = arr.reshape(tuple(entry["shape"]))
    return TransformerModel(cfg, params)


def dumps(model: TransformerModel) -> str:
    return json.dumps(model_to_dict(model), allow_nan=False)


def loads(text: str) -> TransformerModel:
    return model_from_dict(json.loads(text))


def save_model(model: TransformerModel, path) -> None:
    Path(path).write_text(dumps(model) + "\n", encoding="utf-8")


def load_model(path) -> TransformerModel:
    return loads(Path(path).read_text(encoding="utf-8"))
