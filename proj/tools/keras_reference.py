#!/usr/bin/env python3
# Copyright 2026 The Spill Detection Authors
#
# Licensed under the Apache License, Version 2.0 (the "License");
# you may not use this file except in compliance with the License.
# You may obtain a copy of the License at
#
# http://www.apache.org/licenses/LICENSE-2.0
#
# Unless required by applicable law or agreed to in writing, software
# distributed under the License is distributed on an "AS IS" BASIS,
# WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
# See the License for the specific language governing permissions and
# limitations under the License.

"""Runs a backbone in keras.applications with weights from a .weights file.

Used as an independent numeric reference for the C++ interpreter:

  keras_reference.py --case <Backbone> <model.weights> <input.weights> <output.weights> <float32|float64> [--case ...]

The input file holds one tensor "input" (NCHW, preprocessed); the output
file receives "output" (NCHW). The last field picks the compute precision;
double precision is for networks that amplify float32 rounding. Weights use
the interpreter's torch layouts and are transposed to Keras layouts here.
"""
import argparse
import json
import os
import struct

os.environ.setdefault("TF_CPP_MIN_LOG_LEVEL", "3")

import numpy as np  # noqa: E402

MAGIC = b"SPLW0001"


def read_weights(path):
    with open(path, "rb") as f:
        if f.read(8) != MAGIC:
            raise ValueError(f"{path} is not a weights file")
        (n,) = struct.unpack("<Q", f.read(8))
        header = json.loads(f.read(n))
        data = f.read()
    out = {}
    for t in header["tensors"]:
        count = int(np.prod(t["shape"])) if t["shape"] else 1
        arr = np.frombuffer(data, dtype="<f4", count=count, offset=t["offset"])
        out[t["name"]] = arr.reshape(t["shape"])
    return out


def write_weights(path, tensors):
    entries, blobs, offset = [], [], 0
    for name, arr in tensors.items():
        arr = np.ascontiguousarray(arr, dtype="<f4")
        entries.append({"name": name, "shape": list(arr.shape), "dtype": "f32", "offset": offset})
        blobs.append(arr.tobytes())
        offset += arr.nbytes
    header = json.dumps({"tensors": entries, "meta": {}}).encode()
    with open(path, "wb") as f:
        f.write(MAGIC + struct.pack("<Q", len(header)) + header + b"".join(blobs))


def to_keras(kind, arr, target_shape):
    """Torch layout -> Keras layout for one variable."""
    if kind in ("kernel", "pointwise_kernel") and arr.ndim == 4:
        return arr.transpose(2, 3, 1, 0)  # [O, I, kh, kw] -> (kh, kw, I, O)
    if kind == "depthwise_kernel":
        kh, kw, c, m = target_shape
        return arr.reshape(c, m, kh, kw).transpose(2, 3, 0, 1)
    if kind == "kernel" and arr.ndim == 2:
        return arr.T  # [units, in] -> (in, units)
    return arr.reshape(target_shape)


def assign(layer, prefix, weights):
    import keras

    if isinstance(layer, keras.Sequential):
        for sub in layer.layers:
            assign(sub, f"{prefix}/{sub.name}", weights)
        return
    for var in layer.weights:
        kind = var.path.split("/")[-1]
        if isinstance(layer, keras.layers.DepthwiseConv2D) and kind == "kernel":
            kind = "depthwise_kernel"
        key = f"{prefix}/{kind}"
        if key not in weights:
            # Custom layers may leave their only weight unnamed.
            mine = [k for k in weights if k.rsplit("/", 1)[0] == prefix]
            if len(layer.weights) != 1 or len(mine) != 1:
                raise KeyError(f"weights lack {key}")
            key, kind = mine[0], mine[0].rsplit("/", 1)[1]
        var.assign(to_keras(kind, weights[key], tuple(var.shape)))
    if isinstance(layer, keras.layers.Normalization):
        layer.finalize_state()  # adapted statistics are cached at build time


def run_case(name, weights_path, input_path, output_path, dtype):
    import keras

    keras.backend.clear_session()
    keras.config.set_floatx(dtype)
    x = read_weights(input_path)["input"].astype(dtype)
    size = x.shape[2:]
    model = getattr(keras.applications, name)(weights=None, include_top=False, input_shape=(*size, 3))
    weights = read_weights(weights_path)
    for layer in model.layers:
        assign(layer, layer.name, weights)
    y = model(np.ascontiguousarray(x.transpose(0, 2, 3, 1)), training=False)
    y = np.asarray(y)
    write_weights(output_path, {"output": y.transpose(0, 3, 1, 2) if y.ndim == 4 else y})


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--case", nargs=5, action="append", required=True,
                    metavar=("BACKBONE", "WEIGHTS", "INPUT", "OUTPUT", "DTYPE"))
    args = ap.parse_args()
    for case in args.case:
        if case[4] not in ("float32", "float64"):
            ap.error(f"unsupported dtype {case[4]}")
        run_case(*case)


if __name__ == "__main__":
    main()
