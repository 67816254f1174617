"""Plain-text model checkpoints.

Line 1 is a JSON header naming the model family and everything needed to
rebuild it except the parameters; each following line is one parameter
written with ``repr`` so values round-trip exactly.
"""

import json
from pathlib import Path

import numpy as np

from .domain import Vocab
from .policies import AutoregressivePolicy, TabularPolicy, TabularSupport
from .rewards import FeaturizedReward, TabularReward


class CheckpointError(ValueError):
    pass


def _header(model):
    head = {"family": model.family, "vocab_size": model.vocab.size,
            "labels": list(model.vocab.labels), "n_params": int(model.n_params)}
    if isinstance(model, TabularPolicy):
        head["support"] = model.support.to_record()
        head["scale"] = model.scale
        if np.any(model.base != 0):
            head["base"] = [float(v) for v in model.base]
    elif isinstance(model, AutoregressivePolicy):
        head.update(model.config())
    elif isinstance(model, TabularReward):
        head["support"] = model.support.to_record()
        head["clamp"] = model.clamp
    elif isinstance(model, FeaturizedReward):
        head["clamp"] = model.clamp
    else:
        raise CheckpointError(f"cannot checkpoint {type(model).__name__}")
    return head


def save_checkpoint(model, path):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", encoding="utf-8", newline="\n") as fh:
        fh.write(json.dumps(_header(model), sort_keys=True) + "\n")
        for v in model.params:
            fh.write(repr(float(v)) + "\n")


def load_checkpoint(path):
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    if not lines:
        raise CheckpointError(f"{path}: empty checkpoint")
    try:
        head = json.loads(lines[0])
        params = np.array([float(s) for s in lines[1:] if s.strip()])
    except ValueError as exc:
        raise CheckpointError(f"{path}: {exc}") from None
    if len(params) != head.get("n_params"):
        raise CheckpointError(f"{path}: header says {head.get('n_params')} parameters, "
                              f"found {len(params)}")
    vocab = Vocab(head["vocab_size"], tuple(head.get("labels") or ()))
    family = head.get("family")
    if family == TabularPolicy.family:
        support = TabularSupport.from_record(vocab, head["support"])
        return TabularPolicy(support, params, base=head.get("base"), scale=head.get("scale", 1.0))
    if family == AutoregressivePolicy.family:
        return AutoregressivePolicy(vocab, head["max_len"], params, end_token=head["end_token"],
                                    context=head["context"], n_buckets=head["n_buckets"])
    if family == TabularReward.family:
        support = TabularSupport.from_record(vocab, head["support"])
        return TabularReward(support, params, clamp=head.get("clamp"))
    if family == FeaturizedReward.family:
        return FeaturizedReward(vocab, params, clamp=head.get("clamp"))
    raise CheckpointError(f"{path}: unknown model family {family!r}")
