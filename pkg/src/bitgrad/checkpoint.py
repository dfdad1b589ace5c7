"""Checkpoint files.

Two JSON formats:

* training checkpoints hold the model constructor arguments plus every
  float array hex-encoded (float.hex round-trips exactly, so a reloaded
  model is bit-identical and training metrics stay reproducible);
* calibrated checkpoints hold integer mantissas and concrete formats.
  Loading re-validates every mantissa against its declared format range,
  so a corrupted or hand-edited file fails loudly instead of producing a
  silently wrong circuit.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .fxp import FixedPointFormat, OVERFLOW_MODES, ROUND_MODES
from .layers import CalibratedModel, LayerCalibration, QModel

TRAIN_KIND = "bitgrad.train"
CALIB_KIND = "bitgrad.calibrated"
VERSION = 1


class CheckpointError(ValueError):
    pass


# ---------------------------------------------------------------------------
# training checkpoints


def _float_array_to_json(a: np.ndarray) -> dict:
    return {
        "shape": list(a.shape),
        "hex": [float(v).hex() for v in np.asarray(a, dtype=np.float64).ravel()],
    }


def _float_array_from_json(d, where: str) -> np.ndarray:
    try:
        vals = [float.fromhex(h) for h in d["hex"]]
        return np.array(vals, dtype=np.float64).reshape(d["shape"])
    except (KeyError, TypeError, ValueError) as e:
        raise CheckpointError(f"bad float array at {where}: {e}") from e


def save_train_checkpoint(path: str | Path, model_spec: dict, state: dict) -> None:
    doc = {
        "kind": TRAIN_KIND,
        "version": VERSION,
        "model_spec": model_spec,
        "state": {k: _float_array_to_json(v) for k, v in sorted(state.items())},
    }
    Path(path).write_text(json.dumps(doc, indent=1, sort_keys=True) + "\n")


def load_train_checkpoint(path: str | Path) -> tuple[dict, dict]:
    doc = _read_json(path)
    if doc.get("kind") != TRAIN_KIND:
        raise CheckpointError(f"{path}: not a training checkpoint")
    spec = doc.get("model_spec")
    raw = doc.get("state")
    if not isinstance(spec, dict) or not isinstance(raw, dict):
        raise CheckpointError(f"{path}: missing model_spec or state")
    state = {k: _float_array_from_json(v, k) for k, v in raw.items()}
    return spec, state


def rebuild_model(model_spec: dict, state: dict) -> QModel:
    try:
        model = QModel.mlp(**model_spec)
    except (TypeError, ValueError) as e:
        raise CheckpointError(f"bad model_spec: {e}") from e
    want = model.state_arrays()
    if set(want) != set(state):
        missing = sorted(set(want) ^ set(state))
        raise CheckpointError(f"state keys do not match model: {missing}")
    for k, v in state.items():
        if v.shape != want[k].shape:
            raise CheckpointError(
                f"state array {k} has shape {v.shape}, expected {want[k].shape}"
            )
    model.load_state_arrays(state)
    return model


# ---------------------------------------------------------------------------
# calibrated checkpoints


def _int_list(a: np.ndarray) -> list:
    return np.asarray(a, dtype=np.int64).tolist()


def save_calibrated(path: str | Path, cm: CalibratedModel) -> None:
    layers = []
    for lc in cm.layers:
        layers.append(
            {
                "weight": {
                    "mantissa": _int_list(lc.weight_mantissas),
                    "f": _int_list(lc.weight_f),
                    "i": _int_list(lc.weight_i),
                    "group_index": _int_list(lc.weight_group_index),
                },
                "bias": {
                    "mantissa": _int_list(lc.bias_mantissas),
                    "f": _int_list(lc.bias_f),
                    "i": _int_list(lc.bias_i),
                },
                "act": {
                    "signed": bool(lc.act_signed),
                    "i": _int_list(lc.act_i),
                    "f": _int_list(lc.act_f),
                    "group_index": _int_list(lc.act_group_index),
                    "round": lc.act_round_mode,
                    "overflow": lc.act_overflow_mode,
                },
                "relu": bool(lc.use_relu),
            }
        )
    doc = {
        "kind": CALIB_KIND,
        "version": VERSION,
        "input_format": cm.input_format.token(),
        "layers": layers,
    }
    Path(path).write_text(json.dumps(doc, sort_keys=True) + "\n")


def _int_array(raw, where: str, shape=None) -> np.ndarray:
    try:
        a = np.asarray(raw, dtype=np.int64)
    except (TypeError, ValueError, OverflowError) as e:
        raise CheckpointError(f"{where}: not an integer array ({e})") from e
    if shape is not None and a.shape != shape:
        raise CheckpointError(f"{where}: shape {a.shape}, expected {shape}")
    return a


def _check_mantissa_range(k: np.ndarray, signed: int, i: np.ndarray,
                          f: np.ndarray, where: str) -> None:
    """Every mantissa must fit its declared format; widths <= 0 force zero."""
    for idx in np.ndindex(k.shape):
        ki, ii, fi = int(k[idx]), int(i[idx]), int(f[idx])
        payload = ii + fi
        width = signed + payload
        if width <= 0:
            if ki != 0:
                raise CheckpointError(
                    f"{where}{list(idx)}: mantissa {ki} in a width-0 format"
                )
            continue
        lo = -(signed << payload) if signed else 0
        hi = (1 << payload) - 1
        if not lo <= ki <= hi:
            raise CheckpointError(
                f"{where}{list(idx)}: mantissa {ki} outside [{lo}, {hi}] "
                f"for format (s={signed}, i={ii}, f={fi})"
            )


def load_calibrated(path: str | Path) -> CalibratedModel:
    doc = _read_json(path)
    if doc.get("kind") != CALIB_KIND:
        raise CheckpointError(f"{path}: not a calibrated checkpoint")
    try:
        input_format = FixedPointFormat.from_token(doc["input_format"])
        raw_layers = doc["layers"]
    except (KeyError, TypeError, ValueError) as e:
        raise CheckpointError(f"{path}: {e}") from e
    if not isinstance(raw_layers, list) or not raw_layers:
        raise CheckpointError(f"{path}: no layers")

    layers = []
    prev_out = None
    for li, raw in enumerate(raw_layers):
        where = f"layer{li}"
        try:
            w, b, a = raw["weight"], raw["bias"], raw["act"]
            k_w = _int_array(w["mantissa"], f"{where}.weight.mantissa")
            if k_w.ndim != 2:
                raise CheckpointError(f"{where}.weight.mantissa: not a matrix")
            f_w = _int_array(w["f"], f"{where}.weight.f", k_w.shape)
            i_w = _int_array(w["i"], f"{where}.weight.i", k_w.shape)
            gi_w = _int_array(w["group_index"], f"{where}.weight.group_index",
                              k_w.shape)
            n_out = k_w.shape[1]
            lane = (n_out,)
            k_b = _int_array(b["mantissa"], f"{where}.bias.mantissa", lane)
            f_b = _int_array(b["f"], f"{where}.bias.f", lane)
            i_b = _int_array(b["i"], f"{where}.bias.i", lane)
            signed = bool(a["signed"])
            i_a = _int_array(a["i"], f"{where}.act.i", lane)
            f_a = _int_array(a["f"], f"{where}.act.f", lane)
            gi_a = _int_array(a["group_index"], f"{where}.act.group_index", lane)
            round_mode, overflow = a["round"], a["overflow"]
            use_relu = bool(raw["relu"])
        except KeyError as e:
            raise CheckpointError(f"{where}: missing key {e}") from e
        if round_mode not in ROUND_MODES or overflow not in OVERFLOW_MODES:
            raise CheckpointError(f"{where}: bad round/overflow mode")
        if prev_out is not None and k_w.shape[0] != prev_out:
            raise CheckpointError(
                f"{where}: {k_w.shape[0]} inputs after a {prev_out}-lane layer"
            )
        prev_out = n_out

        _check_mantissa_range(k_w, 1, i_w, f_w, f"{where}.weight")
        _check_mantissa_range(k_b, 1, i_b, f_b, f"{where}.bias")

        layers.append(
            LayerCalibration(
                weight_mantissas=k_w,
                weight_f=f_w,
                weight_i=i_w,
                weight_width=np.maximum(0, 1 + i_w + f_w),
                weight_group_index=gi_w,
                bias_mantissas=k_b,
                bias_f=f_b,
                bias_i=i_b,
                bias_width=np.maximum(0, 1 + i_b + f_b),
                act_signed=signed,
                act_i=i_a,
                act_f=f_a,
                act_width=np.maximum(0, int(signed) + i_a + f_a),
                act_group_index=gi_a,
                act_round_mode=round_mode,
                act_overflow_mode=overflow,
                use_relu=use_relu,
            )
        )
    return CalibratedModel(input_format, layers)


def _read_json(path: str | Path) -> dict:
    p = Path(path)
    if not p.exists():
        raise CheckpointError(f"checkpoint not found: {p}")
    try:
        doc = json.loads(p.read_text())
    except json.JSONDecodeError as e:
        raise CheckpointError(f"{p}: not valid JSON: {e}") from e
    if not isinstance(doc, dict):
        raise CheckpointError(f"{p}: root must be an object")
    if doc.get("version") != VERSION:
        raise CheckpointError(f"{p}: unsupported version {doc.get('version')!r}")
    return doc
