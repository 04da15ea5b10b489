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

"""Exports the backbone architectures from keras.applications.

Writes one compact graph description per backbone to data/backbones/ and a
fixture with Keras' own layer order, per-layer parameter counts and output
shapes to tests/fixtures/keras_backbones.json. No weights are downloaded.
"""
import argparse
import json
import os
import pathlib

os.environ.setdefault("TF_CPP_MIN_LOG_LEVEL", "3")

import keras  # noqa: E402

# Registry order and native input (height, width).
BACKBONES = [
    ("VGG19", 224), ("ResNet50", 224), ("ResNet50V2", 224), ("EfficientNetB3", 300),
    ("InceptionV3", 299), ("InceptionResNetV2", 299), ("Xception", 299), ("DenseNet121", 224),
    ("NASNetMobile", 224), ("EfficientNetV2B3", 300), ("ConvNeXtBase", 224),
]

DROP = ("dtype", "trainable", "data_format", "name")
DROP_SUFFIX = ("_initializer", "_regularizer", "_constraint")


def compact_config(cfg):
    out = {}
    for k, v in cfg.items():
        if k in DROP or k.endswith(DROP_SUFFIX):
            continue
        out[k] = v
    return out


def inbound_names(layer_cfg):
    names = []
    for node in layer_cfg.get("inbound_nodes", []):
        def walk(a):
            if isinstance(a, dict) and a.get("class_name") == "__keras_tensor__":
                names.append(a["config"]["keras_history"][0])
            elif isinstance(a, (list, tuple)):
                for x in a:
                    walk(x)
        walk(node.get("args", []))
    return names


def tensor_refs(refs):
    # [name, node, index] for a single tensor, or a list of those.
    if refs and not isinstance(refs[0], (list, tuple)):
        refs = [refs]
    return [r[0] for r in refs]


def describe(layer_cfg):
    cls = layer_cfg["class_name"]
    entry = {"name": layer_cfg["config"]["name"], "class": cls, "inbound": inbound_names(layer_cfg)}
    # Raw tensor ops (e.g. `x + y`) are graph nodes but not model layers.
    if layer_cfg.get("module", "").startswith("keras.src.ops"):
        entry["op"] = True
    if cls == "Sequential":
        entry["layers"] = [
            {"name": s["config"]["name"], "class": s["class_name"], "config": compact_config(s["config"])}
            for s in layer_cfg["config"]["layers"] if s["class_name"] != "InputLayer"
        ]
    else:
        entry["config"] = compact_config(layer_cfg["config"])
    return entry


def main():
    root = pathlib.Path(__file__).resolve().parents[1]
    ap = argparse.ArgumentParser()
    ap.add_argument("--data", default=root / "data" / "backbones", type=pathlib.Path)
    ap.add_argument("--fixture", default=root / "tests" / "fixtures" / "keras_backbones.json", type=pathlib.Path)
    args = ap.parse_args()
    args.data.mkdir(parents=True, exist_ok=True)
    fixture = {"keras_version": keras.__version__, "backbones": {}}
    for name, size in BACKBONES:
        keras.backend.clear_session()
        model = getattr(keras.applications, name)(weights=None, include_top=False, input_shape=(size, size, 3))
        cfg = model.get_config()
        graph = {
            "name": name,
            "native_input": [size, size],
            "input": tensor_refs(cfg["input_layers"])[0],
            "outputs": tensor_refs(cfg["output_layers"]),
            "layers": [describe(l) for l in cfg["layers"]],
        }
        # Sorted by name so the layer order has to be derived from the graph.
        graph["layers"].sort(key=lambda l: l["name"])
        (args.data / f"{name}.json").write_text(json.dumps(graph, separators=(",", ":")) + "\n")
        fixture["backbones"][name] = {
            "count_params": int(model.count_params()),
            "layer_order": [l.name for l in model.layers],
            "layer_params": {l.name: int(l.count_params()) for l in model.layers if l.count_params()},
            "output_shapes": {l.name: list(l.output.shape[1:]) for l in model.layers},
        }
        print(name, model.count_params(), len(model.layers))
    args.fixture.write_text(json.dumps(fixture, indent=1) + "\n")


if __name__ == "__main__":
    main()
