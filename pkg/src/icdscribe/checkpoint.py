"""Versioned training checkpoints.

A checkpoint stores the run config, the vocabulary, every named parameter
tensor in row-major order, the completed-epoch counter, and (optionally)
the optimizer moments, so a run can resume on the exact trajectory it
left.  Floats survive the JSON round trip bit for bit because the encoder
emits shortest round-trippable representations.
"""

import json
from dataclasses import dataclass

import numpy as np

from .autodiff import AdamState
from .config import RunConfig
from .data import Vocabulary
from .errors import ParseError, ValidationError
from .model import DecoderConfig, Seq2SeqModel

CKPT_FORMAT = "ckpt-v1"


@dataclass
class Checkpoint:
    config: RunConfig
    vocabulary: Vocabulary
    parameters: dict  # name -> float64 array
    step: int  # completed training epochs
    optimizer: dict  # raw optimizer payload, or None


def decoder_config(config, vocab_size):
    s = config.decoder
    return DecoderConfig(
        vocab_size=vocab_size,
        embedding_dim=s.embedding_dim,
        hidden=s.hidden,
        attention_dim=s.attention_dim,
        max_decode_len=s.max_decode_len,
    )


def fresh_model(config, vocab):
    return Seq2SeqModel(
        config.encoder,
        decoder_config(config, len(vocab)),
        input_dim=config.dataset.frontend.n_mels,
        seed=config.seed,
    )


def save_checkpoint(path, model, vocab, config, step, optimizer=None):
    payload = {
        "format": CKPT_FORMAT,
        "config": config.to_dict(),
        "vocabulary": vocab.content_words,
        "step": int(step),
        "parameters": [
            {
                "name": name,
                "shape": list(tensor.values.shape),
                "values": tensor.values.ravel().tolist(),
            }
            for name, tensor in model.named_parameters().items()
        ],
        "optimizer": None if optimizer is None else _optimizer_payload(optimizer),
    }
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _optimizer_payload(state):
    return {
        "lr": state.lr,
        "beta1": state.beta1,
        "beta2": state.beta2,
        "eps": state.eps,
        "step": state.step,
        "moments": [
            {"m": m.ravel().tolist(), "v": v.ravel().tolist()}
            for m, v in zip(state.m, state.v)
        ],
    }


def load_checkpoint(path):
    with open(path, encoding="utf-8") as fh:
        payload = json.load(fh)
    declared = payload.get("format")
    if declared != CKPT_FORMAT:
        raise ParseError(f"unsupported checkpoint format {declared!r}")
    parameters = {}
    for entry in payload["parameters"]:
        shape = tuple(entry["shape"])
        values = np.asarray(entry["values"], dtype=np.float64)
        if values.size != int(np.prod(shape, dtype=np.int64)):
            raise ValidationError(
                f"parameter {entry['name']!r} has {values.size} values for shape {shape}"
            )
        parameters[entry["name"]] = values.reshape(shape)
    return Checkpoint(
        config=RunConfig.from_dict(payload["config"]),
        vocabulary=Vocabulary(payload["vocabulary"]),
        parameters=parameters,
        step=payload["step"],
        optimizer=payload["optimizer"],
    )


def build_model(checkpoint):
    """Reconstruct the model and load the stored parameters into it."""
    model = fresh_model(checkpoint.config, checkpoint.vocabulary)
    named = model.named_parameters()
    if set(named) != set(checkpoint.parameters):
        missing = sorted(set(named) ^ set(checkpoint.parameters))
        raise ValidationError(f"checkpoint parameters do not match the model: {missing[:4]}")
    for name, tensor in named.items():
        stored = checkpoint.parameters[name]
        if stored.shape != tensor.values.shape:
            raise ValidationError(
                f"parameter {name!r}: stored shape {stored.shape}, model {tensor.values.shape}"
            )
        tensor.values[...] = stored
    return model


def restore_optimizer(checkpoint, params):
    """Rebuild the Adam accumulators saved alongside the parameters."""
    payload = checkpoint.optimizer
    if payload is None:
        raise ValidationError("checkpoint carries no optimizer state")
    if len(payload["moments"]) != len(params):
        raise ValidationError(
            f"optimizer state covers {len(payload['moments'])} parameters, model has {len(params)}"
        )
    state = AdamState(
        params, lr=payload["lr"], beta1=payload["beta1"], beta2=payload["beta2"], eps=payload["eps"]
    )
    state.step = payload["step"]
    for i, (p, entry) in enumerate(zip(params, payload["moments"])):
        state.m[i][...] = np.asarray(entry["m"], dtype=np.float64).reshape(p.values.shape)
        state.v[i][...] = np.asarray(entry["v"], dtype=np.float64).reshape(p.values.shape)
    return state
