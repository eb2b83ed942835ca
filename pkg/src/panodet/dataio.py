"""Dataset directories: point/label containers per scene, one boxes.csv,
and a dataset.json manifest tying them together."""

import json
import os

from . import serial
from .boxes import load_boxes_csv, save_boxes_csv
from .scenegen import (CLASS_NAMES, THING_CLASSES, SceneSample, SceneSpec,
                       generate_scene)


def scene_name(i):
    return f"scene_{i:04d}"


def write_dataset(out_dir, samples):
    """Writes scene_XXXX.aopc/.aopl pairs, boxes.csv, dataset.json."""
    os.makedirs(out_dir, exist_ok=True)
    rows, scenes = [], []
    for i, s in enumerate(samples):
        name = scene_name(i)
        serial.save_points(os.path.join(out_dir, name + ".aopc"), s.points)
        serial.save_labels(os.path.join(out_dir, name + ".aopl"),
                           s.semantic, s.instance)
        rows.extend((name, b) for b in s.boxes)
        scenes.append({"name": name, "seed": s.seed, "attempt": s.attempt,
                       "n_points": int(s.points.shape[0])})
    save_boxes_csv(os.path.join(out_dir, "boxes.csv"), rows)
    manifest = {"format": 1, "n_scenes": len(samples),
                "classes": list(CLASS_NAMES),
                "thing_classes": list(THING_CLASSES), "scenes": scenes}
    with open(os.path.join(out_dir, "dataset.json"), "w") as f:
        json.dump(manifest, f, indent=2)
        f.write("\n")


def load_dataset(data_dir):
    """Reads a dataset directory back into SceneSample objects."""
    with open(os.path.join(data_dir, "dataset.json")) as f:
        manifest = json.load(f)
    by_scene = {}
    for sid, box in load_boxes_csv(os.path.join(data_dir, "boxes.csv")):
        by_scene.setdefault(sid, []).append(box)
    out = []
    for entry in manifest["scenes"]:
        name = entry["name"]
        pts = serial.load_points(os.path.join(data_dir, name + ".aopc"))
        sem, inst = serial.load_labels(os.path.join(data_dir, name + ".aopl"))
        out.append(SceneSample(points=pts, semantic=sem, instance=inst,
                               boxes=by_scene.get(name, []),
                               seed=entry["seed"], attempt=entry["attempt"]))
    return out


def generate_dataset(out_dir, n_scenes, base_seed=0, **spec_kw):
    """Generates scenes at consecutive seeds and writes them out."""
    samples = [generate_scene(SceneSpec(seed=base_seed + i, **spec_kw))
               for i in range(n_scenes)]
    write_dataset(out_dir, samples)
    return samples
