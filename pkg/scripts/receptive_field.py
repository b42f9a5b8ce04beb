"""Theoretical receptive field and stride of every layer in a config.

The head's receptive field bounds which boxes can be told apart: when a box
is wider than the field, several cells inside it see only its flat interior.

    python scripts/receptive_field.py [config]
"""

import argparse

from yolopeds import backbone
from yolopeds.cli import load_graph


def receptive_fields(graph) -> dict[str, tuple[int, int]]:
    """Layer id -> (field size in input pixels, stride in input pixels)."""
    rf: dict[str, tuple[int, int]] = {}
    for layer in graph.layers:
        if layer.kind == "input":
            rf[layer.id] = (1, 1)
            continue
        size, jump = max(rf[i] for i in layer.inputs)
        if layer.kind == "sepconv":
            k, s = layer.get("kernel", 3), layer.get("stride", 1)
            size, jump = size + (k - 1) * jump, jump * s
        elif layer.kind == "avgpool":
            win, s = layer.get("window", 2), layer.get("stride", 2)
            size, jump = size + (win - 1) * jump, jump * s
        elif layer.kind == "fuse-tap":
            f = layer.get("factor", 2)
            size, jump = size + (f - 1) * jump, jump * f
        rf[layer.id] = (size, jump)
    return rf


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("config", nargs="?", default="yolopeds")
    graph = load_graph(ap.parse_args().config)
    w, _ = graph.input_size
    for name, (size, jump) in receptive_fields(graph).items():
        print(f"{name:8s} field {size:4d}px ({size / w:.2f} of width)  stride {jump:3d}px  "
              f"shape {graph.shapes[name]}")
    print(f"{backbone.param_count(graph):,} parameters")


if __name__ == "__main__":
    main()
