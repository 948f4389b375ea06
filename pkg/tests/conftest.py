"""Shared fixtures: the desk-scale trained model and acceptance reporting.

Training the reference model takes ~15 minutes on one core, so the result is
cached in pytest's cache directory, keyed by the source of the modules that
shape training and by the data and training settings. Set
``POSEFIELD_RETRAIN=1`` to ignore the cache.
"""
import hashlib
import json
import os
import time
from dataclasses import dataclass
from pathlib import Path

import pytest

import posefield
from posefield.data import generate_dataset, load_dataset, random_manifold_spec, save_dataset
from posefield.field import init_model, load_model, save_model
from posefield.skeleton import binary_tree
from posefield.train import TrainingConfig, train, write_history

DATA = {"k": 8, "latent_dim": 2, "spec_seed": 0, "n_manifold": 20000, "per_sigma": 10000,
        "train_seed": 1, "val_manifold": 1000, "val_per_sigma": 1000, "val_seed": 2}
MODEL_SEED = 0

_results: list[tuple[str, bool, str]] = []


def record(criterion: str, passed: bool, detail: str) -> None:
    """Log one acceptance line; printed again in the terminal summary."""
    line = (criterion, bool(passed), detail)
    _results.append(line)
    print(f"{criterion} {'PASS' if passed else 'FAIL'}: {detail}")


def pytest_terminal_summary(terminalreporter):
    if not _results:
        return
    terminalreporter.section("acceptance criteria")
    for criterion, passed, detail in sorted(_results, key=lambda r: int(r[0][1:])):
        terminalreporter.write_line(f"{criterion} {'PASS' if passed else 'FAIL'}: {detail}")


@dataclass
class Trained:
    model: object
    spec: object
    skel: object
    val: object
    history: list
    seconds: float
    cached: bool


# modules whose code determines the trained model
_TRAINING_MODULES = ("so3.py", "skeleton.py", "data.py", "field.py", "train.py")


def _fingerprint() -> str:
    h = hashlib.sha256()
    src = Path(posefield.__file__).parent
    for path in (src / name for name in _TRAINING_MODULES):
        h.update(path.name.encode())
        h.update(path.read_bytes())
    h.update(json.dumps(DATA, sort_keys=True).encode())
    h.update(json.dumps(TrainingConfig().to_dict(), sort_keys=True).encode())
    return h.hexdigest()[:16]


@pytest.fixture(scope="session")
def trained(request):
    skel = binary_tree(DATA["k"])
    spec = random_manifold_spec(DATA["k"], DATA["latent_dim"], seed=DATA["spec_seed"])
    root = Path(request.config.cache.mkdir("posefield-trained")) / _fingerprint()
    meta_path = root / "meta.json"
    if meta_path.exists() and not os.environ.get("POSEFIELD_RETRAIN"):
        meta = json.loads(meta_path.read_text())
        return Trained(load_model(root / "model.pnmd"), spec, skel, load_dataset(root / "val.pndf"),
                       meta["history"], meta["seconds"], cached=True)

    root.mkdir(parents=True, exist_ok=True)
    ds = generate_dataset(spec, skel, DATA["n_manifold"], DATA["per_sigma"], seed=DATA["train_seed"])
    val = generate_dataset(spec, skel, DATA["val_manifold"], DATA["val_per_sigma"], seed=DATA["val_seed"])
    save_dataset(val, root / "val.pndf")
    start = time.perf_counter()
    model, history = train(init_model(skel, seed=MODEL_SEED), ds, TrainingConfig(), heldout=val)
    seconds = time.perf_counter() - start
    save_model(model, root / "model.pnmd")
    write_history(history, root / "history.csv")
    meta_path.write_text(json.dumps({"seconds": seconds, "history": history}))
    return Trained(model, spec, skel, val, history, seconds, cached=False)
