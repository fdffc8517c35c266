"""Self-contained serving directories: manifest.json + variables.estckpt.

An export freezes one checkpoint together with everything a separate process
needs to serve it: the feature spec, the head's output signature, and (for
prebuilt estimators) a model description that lets ServedModel rebuild the
model_fn without any code from the training job.
"""
from __future__ import annotations

import json
import shutil
import time
from pathlib import Path
from typing import Callable, Iterator, Optional

from .checkpoint import restore_checkpoint, restore_into_graph
from .errors import NoCheckpointError
from .execution import Executor
from .graph import Graph
from .inputs import InputPlumbing, peek_iterator, split_batch
from .modes import Mode

MANIFEST_FILE = "manifest.json"
VARIABLES_FILE = "variables.estckpt"


def export_saved_model(estimator, export_dir_base,
                       serving_feature_spec=None) -> Path:
    """Write manifest + frozen variables into a fresh timestamped directory."""
    latest = estimator.latest_checkpoint()
    if latest is None:
        raise NoCheckpointError(f"no trained model in {estimator.model_dir}")
    metadata = estimator.export_metadata or {}
    if serving_feature_spec is None:
        serving_feature_spec = metadata.get("feature_spec")
    global_step = restore_checkpoint(latest).global_step
    manifest = {
        "format_version": 1,
        "global_step": int(global_step),
        "feature_spec": serving_feature_spec,
        "columns": metadata.get("columns", []),
        "outputs": metadata.get("outputs", {}),
        "model": metadata.get("model"),
    }
    base = Path(export_dir_base)
    base.mkdir(parents=True, exist_ok=True)
    stamp = int(time.time() * 1000)
    while (base / str(stamp)).exists():
        stamp += 1
    export_dir = base / str(stamp)
    export_dir.mkdir()
    shutil.copyfile(latest, export_dir / VARIABLES_FILE)
    (export_dir / MANIFEST_FILE).write_text(json.dumps(manifest, indent=2))
    return export_dir


class ServedModel:
    """Serve predictions from an export directory alone.

    Exports of prebuilt estimators carry a model description the loader can
    rebuild; for a custom model_fn, pass the same callable (and params) used
    in training.
    """

    def __init__(self, export_dir, model_fn: Optional[Callable] = None,
                 params: Optional[dict] = None):
        self.export_dir = Path(export_dir)
        manifest_path = self.export_dir / MANIFEST_FILE
        if not manifest_path.exists():
            raise FileNotFoundError(f"no {MANIFEST_FILE} in {self.export_dir}")
        self.manifest = json.loads(manifest_path.read_text())
        self.checkpoint = restore_checkpoint(self.export_dir / VARIABLES_FILE)
        if model_fn is not None:
            self.model_fn = model_fn
            self.params = params if params is not None else {}
        else:
            model = self.manifest.get("model")
            if model is None:
                raise ValueError(
                    "this export has no model description; pass the model_fn "
                    "used in training")
            from .canned import build_model_fn_from_description

            self.model_fn, self.params = build_model_fn_from_description(model)

    @property
    def global_step(self) -> int:
        return int(self.manifest["global_step"])

    def predict(self, input_fn: Callable) -> Iterator[dict]:
        """Same contract as Estimator.predict, served from the export."""
        graph = Graph(seed=0)
        with graph.as_default():
            graph.create_global_step()
            first, batches = peek_iterator(input_fn())
            features_raw, _ = split_batch(first)
            plumbing = InputPlumbing(graph, features_raw, None)
            spec = self.model_fn(plumbing.features, None, Mode.PREDICT, self.params)
        restore_into_graph(graph, self.checkpoint)
        executor = Executor(graph)
        names = list(spec.predictions)
        tensors = [spec.predictions[name] for name in names]

        def generate():
            for batch in batches:
                features, _ = split_batch(batch)
                feed = plumbing.feed_for_batch(features)
                outputs = executor.run(tensors, feed=feed)
                for row in range(len(outputs[0])):
                    yield {name: outputs[col][row]
                           for col, name in enumerate(names)}

        return generate()


def load_saved_model(export_dir, model_fn: Optional[Callable] = None,
                     params: Optional[dict] = None) -> ServedModel:
    return ServedModel(export_dir, model_fn=model_fn, params=params)
